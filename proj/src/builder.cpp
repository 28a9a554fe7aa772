#include "gradir/builder.hpp"

#include <cstring>
#include <map>
#include <unordered_map>

namespace gradir {

struct Module::BlockFrame {
  uint64_t serial = 0;
  std::vector<Let> lets;
};

struct Module::DefTrace {
  uint64_t id = 0;
  std::string name;
  std::vector<Param> params;
  uint32_t nextVar = 0;
  std::map<VarId, std::string> varNames;
  std::vector<BlockFrame> stack;
  std::unordered_map<uint64_t, VarId> constPool;  // double bits -> root let
};

Module::Module() = default;
Module::~Module() = default;

Module::DefTrace& Module::cur() {
  if (open_.empty())
    fail(ErrCode::EscapeError, "no function is being traced");
  return open_.back();
}

const Val& Module::checkLive(const Val& v) const {
  if (v.m_ != this)
    fail(ErrCode::EscapeError,
         v.m_ ? "value handle belongs to a different module"
              : "uninitialized value handle");
  if (open_.empty() || open_.back().id != v.defId_)
    fail(ErrCode::EscapeError,
         "value handle used outside the function that bound it");
  for (const BlockFrame& f : open_.back().stack)
    if (f.serial == v.frameSerial_) return v;
  fail(ErrCode::EscapeError,
       "value handle escaped the region that bound it");
}

VarId Module::freshVar(const std::string& name) {
  DefTrace& d = cur();
  VarId v = d.nextVar++;
  if (!name.empty()) d.varNames[v] = name;
  return v;
}

Val Module::emit(Ty ty, Expr e, const std::string& name) {
  DefTrace& d = cur();
  VarId v = freshVar(name);
  d.stack.back().lets.push_back(Let{v, ty, std::move(e)});
  return Val(this, d.id, d.stack.back().serial, v, std::move(ty));
}

// ---------------------------------------------------------------------------
// Definitions.

FuncId Module::fn(const std::string& name, const std::vector<Ty>& paramTys,
                  const std::function<Val(std::vector<Val>)>& body,
                  const std::vector<std::string>& paramNames) {
  DefTrace trace;
  trace.id = nextDefId_++;
  trace.name = name;
  trace.stack.push_back(BlockFrame{nextFrameSerial_++, {}});
  open_.push_back(std::move(trace));

  Val result;
  try {
    std::vector<Val> params;
    DefTrace& d = open_.back();
    for (size_t i = 0; i < paramTys.size(); ++i) {
      std::string pn = i < paramNames.size() ? paramNames[i] : "";
      VarId v = freshVar(pn);
      d.params.push_back(Param{v, paramTys[i]});
      params.emplace_back(Val(this, d.id, d.stack[0].serial, v, paramTys[i]));
    }
    result = body(std::move(params));
    checkLive(result);
  } catch (...) {
    open_.pop_back();
    throw;
  }

  DefTrace d = std::move(open_.back());
  open_.pop_back();
  if (d.stack.size() != 1)
    fail(ErrCode::EscapeError,
         "a traced region was left open in " + name);

  FuncDef def;
  def.name = name;
  int suffix = 2;
  while (reg_.byName(def.name))
    def.name = name + "$" + std::to_string(suffix++);
  def.params = std::move(d.params);
  def.ret = result.type();
  def.body.lets = std::move(d.stack[0].lets);
  def.body.result = result.var_;
  def.varCount = d.nextVar;
  def.varNames = std::move(d.varNames);
  FuncDef canon = canonicalize(def);
  if (auto diag = typecheckFunction(canon, reg_)) throw Error(*diag);
  return reg_.add(std::move(canon));
}

FuncId Module::opaque(const std::string& name, uint32_t arity,
                      const std::string& hostRoutine) {
  OpaqueDef od;
  od.name = name;
  od.arity = arity;
  od.hostRoutine = hostRoutine;
  if (reg_.byName(name))
    fail(ErrCode::DuplicateBinding,
         "a function named " + name + " already exists");
  return reg_.add(std::move(od));
}

void Module::setJvp(FuncId base, FuncId jvp) { reg_.customJvp[base] = jvp; }

// ---------------------------------------------------------------------------
// Leaves.

Val Module::c(double value) {
  DefTrace& d = cur();
  uint64_t bits;
  std::memcpy(&bits, &value, sizeof(bits));
  auto it = d.constPool.find(bits);
  if (it != d.constPool.end())
    return Val(this, d.id, d.stack[0].serial, it->second, Ty::real());
  // Constants live in the root block so every region of the def can share
  // them.
  VarId v = freshVar("");
  d.stack[0].lets.push_back(Let{v, Ty::real(), EConst{value}});
  d.constPool.emplace(bits, v);
  return Val(this, d.id, d.stack[0].serial, v, Ty::real());
}

Val Module::boolean(bool value) {
  if (value) return emit(Ty::boolean(), ETrue{});
  return emit(Ty::boolean(), EFalse{});
}

Val Module::finIndex(uint64_t bound, uint64_t value) {
  if (value >= bound)
    fail(ErrCode::FinOutOfRange,
         "index literal " + std::to_string(value) + " does not fit " +
             std::to_string(bound));
  return emit(Ty::fin(bound), EFin{value});
}

Val Module::unit() { return emit(Ty::unit(), EUnit{}); }

// ---------------------------------------------------------------------------
// Structured data.

Val Module::pair(const Val& a, const Val& b) {
  checkLive(a), checkLive(b);
  return emit(Ty::pair(a.ty_, b.ty_), EPair{a.var_, b.var_});
}

Val Module::fst(const Val& p) {
  checkLive(p);
  if (!p.ty_.is(Ty::Tag::Pair))
    fail(ErrCode::TypeMismatch,
         "fst of non-pair " + tyToString(p.ty_));
  return emit(p.ty_.first(), EFst{p.var_});
}

Val Module::snd(const Val& p) {
  checkLive(p);
  if (!p.ty_.is(Ty::Tag::Pair))
    fail(ErrCode::TypeMismatch,
         "snd of non-pair " + tyToString(p.ty_));
  return emit(p.ty_.second(), ESnd{p.var_});
}

Val Module::tuple(const std::vector<Val>& fields) {
  if (fields.empty()) return unit();
  Val acc = fields.back();
  for (size_t i = fields.size() - 1; i-- > 0;) acc = pair(fields[i], acc);
  return acc;
}

Val Module::field(const Val& record, size_t index, size_t count) {
  if (count == 0 || index >= count)
    fail(ErrCode::TypeMismatch, "record field index out of range");
  Val v = record;
  for (size_t i = 0; i < index; ++i) v = snd(v);
  if (index + 1 < count) v = fst(v);
  return v;
}

Val Module::array(const std::vector<Val>& elems) {
  if (elems.empty())
    fail(ErrCode::TypeMismatch,
         "empty array literals need an element type; use map over 0");
  EArray arr;
  for (const Val& e : elems) {
    checkLive(e);
    if (e.ty_ != elems[0].ty_)
      fail(ErrCode::TypeMismatch, "array elements must share one type");
    arr.elems.push_back(e.var_);
  }
  return emit(Ty::arr(Ty::fin(elems.size()), elems[0].ty_), std::move(arr));
}

// ---------------------------------------------------------------------------
// Control and aggregation.

Val Module::select(const Val& cond, const Val& a, const Val& b) {
  checkLive(cond), checkLive(a), checkLive(b);
  if (!cond.ty_.is(Ty::Tag::Bool))
    fail(ErrCode::TypeMismatch, "select condition must be Bool");
  if (a.ty_ != b.ty_)
    fail(ErrCode::TypeMismatch, "select branches must share one type");
  return emit(a.ty_, ESelect{cond.var_, a.var_, b.var_});
}

Val Module::map(uint64_t n, const std::function<Val(Val)>& body) {
  Ty idxTy = Ty::fin(n);
  uint64_t serial = nextFrameSerial_++;
  uint64_t defId = cur().id;
  cur().stack.push_back(BlockFrame{serial, {}});
  VarId iv = freshVar("");
  Val idx(this, defId, serial, iv, idxTy);
  Val r;
  // The callback may itself open and close defs, so re-acquire the trace
  // after it returns instead of holding a reference across it.
  try {
    r = body(idx);
    checkLive(r);
  } catch (...) {
    cur().stack.pop_back();
    throw;
  }
  BlockFrame frame = std::move(cur().stack.back());
  cur().stack.pop_back();
  EFor f;
  f.indexTy = idxTy;
  f.indexVar = iv;
  f.body = std::make_shared<const Block>(
      Block{std::move(frame.lets), r.var_});
  return emit(Ty::arr(idxTy, r.type()), std::move(f));
}

Val Module::accumRegion(const Val& seed, const std::function<Val(Val)>& body) {
  checkLive(seed);
  uint64_t serial = nextFrameSerial_++;
  uint64_t defId = cur().id;
  cur().stack.push_back(BlockFrame{serial, {}});
  VarId av = freshVar("");
  Val acc(this, defId, serial, av, Ty::acc(seed.ty_));
  Val r;
  try {
    r = body(acc);
    checkLive(r);
  } catch (...) {
    cur().stack.pop_back();
    throw;
  }
  BlockFrame frame = std::move(cur().stack.back());
  cur().stack.pop_back();
  EAccumBlock ab;
  ab.accVar = av;
  ab.from = seed.var_;
  ab.body = std::make_shared<const Block>(
      Block{std::move(frame.lets), r.var_});
  return emit(Ty::pair(seed.ty_, r.type()), std::move(ab));
}

Val Module::accumulate(const Val& target, const Val& value) {
  checkLive(target), checkLive(value);
  if (!target.ty_.is(Ty::Tag::Acc))
    fail(ErrCode::TypeMismatch, "accumulate target must be an accumulator");
  if (target.ty_.inner() != value.ty_)
    fail(ErrCode::TypeMismatch,
         "accumulated value has type " + tyToString(value.ty_) +
             ", accumulator holds " + tyToString(target.ty_.inner()));
  return emit(Ty::unit(), EAccum{target.var_, value.var_});
}

Val Module::refFst(const Val& acc) {
  checkLive(acc);
  if (!acc.ty_.is(Ty::Tag::Acc) || !acc.ty_.inner().is(Ty::Tag::Pair))
    fail(ErrCode::TypeMismatch, "refFst needs an accumulator over a pair");
  return emit(Ty::acc(acc.ty_.inner().first()), ERefFst{acc.var_});
}

Val Module::refSnd(const Val& acc) {
  checkLive(acc);
  if (!acc.ty_.is(Ty::Tag::Acc) || !acc.ty_.inner().is(Ty::Tag::Pair))
    fail(ErrCode::TypeMismatch, "refSnd needs an accumulator over a pair");
  return emit(Ty::acc(acc.ty_.inner().second()), ERefSnd{acc.var_});
}

Val Module::refIndex(const Val& acc, const Val& idx) {
  checkLive(acc), checkLive(idx);
  if (!acc.ty_.is(Ty::Tag::Acc) || !acc.ty_.inner().is(Ty::Tag::Arr))
    fail(ErrCode::TypeMismatch, "refIndex needs an accumulator over an array");
  if (idx.ty_ != acc.ty_.inner().index())
    fail(ErrCode::TypeMismatch, "reference index type mismatch");
  return emit(Ty::acc(acc.ty_.inner().elem()), ERefIndex{acc.var_, idx.var_});
}

Val Module::sum(uint64_t n, const std::function<Val(Val)>& body) {
  Val zero = c(0.0);
  Val region = accumRegion(zero, [&](Val a) {
    return map(n, [&](Val i) {
      Val e = body(i);
      if (!e.type().is(Ty::Tag::Real))
        fail(ErrCode::TypeMismatch, "sum body must produce Real");
      return accumulate(a, e);
    });
  });
  return fst(region);
}

// ---------------------------------------------------------------------------
// Calls with structural type-argument inference.

namespace {

void unify(const Ty& pattern, const Ty& concrete,
           std::map<std::string, Ty>& bindings, const std::string& ctx) {
  if (pattern.is(Ty::Tag::Var)) {
    auto [it, fresh] = bindings.emplace(pattern.varName(), concrete);
    if (!fresh && it->second != concrete)
      fail(ErrCode::InferenceFailure,
           "generic " + pattern.varName() + " matched both " +
               tyToString(it->second) + " and " + tyToString(concrete) +
               " in " + ctx);
    return;
  }
  if (pattern.tag() != concrete.tag())
    fail(ErrCode::TypeMismatch,
         "argument type " + tyToString(concrete) + " does not match " +
             tyToString(pattern) + " in " + ctx);
  switch (pattern.tag()) {
    case Ty::Tag::Fin:
      if (pattern.finSize() != concrete.finSize())
        fail(ErrCode::TypeMismatch,
             "argument type " + tyToString(concrete) + " does not match " +
                 tyToString(pattern) + " in " + ctx);
      return;
    case Ty::Tag::Acc:
      unify(pattern.inner(), concrete.inner(), bindings, ctx);
      return;
    case Ty::Tag::Arr:
      unify(pattern.index(), concrete.index(), bindings, ctx);
      unify(pattern.elem(), concrete.elem(), bindings, ctx);
      return;
    case Ty::Tag::Pair:
      unify(pattern.first(), concrete.first(), bindings, ctx);
      unify(pattern.second(), concrete.second(), bindings, ctx);
      return;
    default:
      return;  // Unit/Bool/Real carry nothing further
  }
}

}  // namespace

Val Module::call(FuncId callee, const std::vector<Val>& args) {
  if (callee >= reg_.size())
    fail(ErrCode::UnresolvedCallee,
         "call target #" + std::to_string(callee) + " does not exist");
  std::vector<Ty> paramTys = reg_.paramTypes(callee);
  std::vector<Generic> gens = reg_.genericsOf(callee);
  const std::string& name = reg_.nameOf(callee);
  if (args.size() != paramTys.size())
    fail(ErrCode::ArityMismatch,
         name + " expects " + std::to_string(paramTys.size()) +
             " arguments, got " + std::to_string(args.size()));
  std::map<std::string, Ty> bindings;
  for (size_t i = 0; i < args.size(); ++i) {
    checkLive(args[i]);
    unify(paramTys[i], args[i].ty_, bindings, "call to " + name);
  }
  ECall call;
  call.callee = callee;
  for (const Generic& g : gens) {
    auto it = bindings.find(g.name);
    if (it == bindings.end())
      fail(ErrCode::InferenceFailure,
           "generic " + g.name + " of " + name +
               " is not determined by the argument types");
    call.typeArgs.push_back(it->second);
  }
  for (const Val& a : args) call.args.push_back(a.var_);
  Ty ret = substitute(reg_.retType(callee), bindings);
  return emit(std::move(ret), std::move(call));
}

Val Module::call(const std::string& callee, const std::vector<Val>& args) {
  auto f = reg_.byName(callee);
  if (!f) fail(ErrCode::UnresolvedCallee, "no function named " + callee);
  return call(*f, args);
}

// ---------------------------------------------------------------------------
// Primitive operations.

Val Module::unary(UnaryOp op, const Val& x) {
  checkLive(x);
  if (op == UnaryOp::Not) {
    if (!x.ty_.is(Ty::Tag::Bool))
      fail(ErrCode::TypeMismatch, "! needs a Bool operand");
    return emit(Ty::boolean(), EUnary{op, x.var_});
  }
  if (!x.ty_.is(Ty::Tag::Real))
    fail(ErrCode::TypeMismatch,
         std::string(unaryOpName(op)) + " needs a Real operand");
  return emit(Ty::real(), EUnary{op, x.var_});
}

Val Module::binary(BinaryOp op, const Val& a, const Val& b) {
  checkLive(a), checkLive(b);
  Ty want = isLogic(op) ? Ty::boolean() : Ty::real();
  if (a.ty_ != want || b.ty_ != want)
    fail(ErrCode::TypeMismatch,
         std::string(binaryOpName(op)) + " needs " + tyToString(want) +
             " operands, got " + tyToString(a.ty_) + " and " +
             tyToString(b.ty_));
  Ty out = isArith(op) ? Ty::real() : Ty::boolean();
  return emit(std::move(out), EBinary{op, a.var_, b.var_});
}

// ---------------------------------------------------------------------------
// Handle operators.

Val Val::operator[](const Val& idx) const {
  if (!m_) fail(ErrCode::EscapeError, "uninitialized value handle");
  m_->checkLive(*this), m_->checkLive(idx);
  if (!ty_.is(Ty::Tag::Arr))
    fail(ErrCode::TypeMismatch, "indexing a non-array " + tyToString(ty_));
  if (idx.ty_ != ty_.index())
    fail(ErrCode::TypeMismatch,
         "index type " + tyToString(idx.ty_) + " does not match " +
             tyToString(ty_));
  return m_->emit(ty_.elem(), EIndex{var_, idx.var_});
}

Val Val::operator[](uint64_t idx) const {
  if (!m_) fail(ErrCode::EscapeError, "uninitialized value handle");
  if (!ty_.is(Ty::Tag::Arr) || !ty_.index().is(Ty::Tag::Fin))
    fail(ErrCode::TypeMismatch,
         "literal indexing needs a concrete array, got " + tyToString(ty_));
  Val i = m_->finIndex(ty_.index().finSize(), idx);
  return (*this)[i];
}

Val opBinary(BinaryOp op, const Val& a, const Val& b) {
  if (!a.m_) fail(ErrCode::EscapeError, "uninitialized value handle");
  return a.m_->binary(op, a, b);
}

Val opBinaryD(BinaryOp op, const Val& v, double d, bool scalarOnLeft) {
  if (!v.m_) fail(ErrCode::EscapeError, "uninitialized value handle");
  Val cv = v.m_->c(d);
  return scalarOnLeft ? v.m_->binary(op, cv, v) : v.m_->binary(op, v, cv);
}

Val opUnary(UnaryOp op, const Val& x) {
  if (!x.m_) fail(ErrCode::EscapeError, "uninitialized value handle");
  return x.m_->unary(op, x);
}

Val operator+(const Val& a, const Val& b) { return opBinary(BinaryOp::Add, a, b); }
Val operator-(const Val& a, const Val& b) { return opBinary(BinaryOp::Sub, a, b); }
Val operator*(const Val& a, const Val& b) { return opBinary(BinaryOp::Mul, a, b); }
Val operator/(const Val& a, const Val& b) { return opBinary(BinaryOp::Div, a, b); }
Val operator-(const Val& x) { return opUnary(UnaryOp::Neg, x); }
Val operator!(const Val& x) { return opUnary(UnaryOp::Not, x); }
Val operator<(const Val& a, const Val& b) { return opBinary(BinaryOp::Lt, a, b); }
Val operator<=(const Val& a, const Val& b) { return opBinary(BinaryOp::Leq, a, b); }
Val operator>(const Val& a, const Val& b) { return opBinary(BinaryOp::Gt, a, b); }
Val operator>=(const Val& a, const Val& b) { return opBinary(BinaryOp::Geq, a, b); }
Val eq(const Val& a, const Val& b) { return opBinary(BinaryOp::Eq, a, b); }
Val neq(const Val& a, const Val& b) { return opBinary(BinaryOp::Neq, a, b); }
Val logicalAnd(const Val& a, const Val& b) { return opBinary(BinaryOp::And, a, b); }
Val logicalOr(const Val& a, const Val& b) { return opBinary(BinaryOp::Or, a, b); }
Val logicalIff(const Val& a, const Val& b) { return opBinary(BinaryOp::Iff, a, b); }
Val logicalXor(const Val& a, const Val& b) { return opBinary(BinaryOp::Xor, a, b); }
Val abs(const Val& x) { return opUnary(UnaryOp::Abs, x); }
Val sgn(const Val& x) { return opUnary(UnaryOp::Sgn, x); }
Val ceil(const Val& x) { return opUnary(UnaryOp::Ceil, x); }
Val floor(const Val& x) { return opUnary(UnaryOp::Floor, x); }
Val trunc(const Val& x) { return opUnary(UnaryOp::Trunc, x); }
Val sqrt(const Val& x) { return opUnary(UnaryOp::Sqrt, x); }

Val operator+(const Val& a, double b) { return opBinaryD(BinaryOp::Add, a, b, false); }
Val operator+(double a, const Val& b) { return opBinaryD(BinaryOp::Add, b, a, true); }
Val operator-(const Val& a, double b) { return opBinaryD(BinaryOp::Sub, a, b, false); }
Val operator-(double a, const Val& b) { return opBinaryD(BinaryOp::Sub, b, a, true); }
Val operator*(const Val& a, double b) { return opBinaryD(BinaryOp::Mul, a, b, false); }
Val operator*(double a, const Val& b) { return opBinaryD(BinaryOp::Mul, b, a, true); }
Val operator/(const Val& a, double b) { return opBinaryD(BinaryOp::Div, a, b, false); }
Val operator/(double a, const Val& b) { return opBinaryD(BinaryOp::Div, b, a, true); }
Val operator<(const Val& a, double b) { return opBinaryD(BinaryOp::Lt, a, b, false); }
Val operator>(const Val& a, double b) { return opBinaryD(BinaryOp::Gt, a, b, false); }

}  // namespace gradir
