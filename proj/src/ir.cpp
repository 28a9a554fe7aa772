#include "gradir/ir.hpp"

#include <algorithm>
#include <cstring>
#include <sstream>

namespace gradir {

bool kindLeq(Kind a, Kind b) {
  return static_cast<uint8_t>(a) <= static_cast<uint8_t>(b);
}

const char* kindName(Kind k) {
  switch (k) {
    case Kind::Index: return "Index";
    case Kind::Value: return "Value";
    case Kind::Type: return "Type";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Ty

Ty Ty::var(std::string name) {
  auto n = std::make_shared<Node>();
  n->tag = Tag::Var;
  n->name = std::move(name);
  return Ty(std::move(n));
}

Ty Ty::unit() {
  static Ty t = [] {
    auto n = std::make_shared<Node>();
    n->tag = Tag::Unit;
    return Ty(std::move(n));
  }();
  return t;
}

Ty Ty::boolean() {
  static Ty t = [] {
    auto n = std::make_shared<Node>();
    n->tag = Tag::Bool;
    return Ty(std::move(n));
  }();
  return t;
}

Ty Ty::real() {
  static Ty t = [] {
    auto n = std::make_shared<Node>();
    n->tag = Tag::Real;
    return Ty(std::move(n));
  }();
  return t;
}

Ty Ty::fin(uint64_t size) {
  auto n = std::make_shared<Node>();
  n->tag = Tag::Fin;
  n->n = size;
  return Ty(std::move(n));
}

Ty Ty::acc(Ty inner) {
  auto n = std::make_shared<Node>();
  n->tag = Tag::Acc;
  n->kids = {std::move(inner)};
  return Ty(std::move(n));
}

Ty Ty::arr(Ty index, Ty elem) {
  auto n = std::make_shared<Node>();
  n->tag = Tag::Arr;
  n->kids = {std::move(index), std::move(elem)};
  return Ty(std::move(n));
}

Ty Ty::pair(Ty first, Ty second) {
  auto n = std::make_shared<Node>();
  n->tag = Tag::Pair;
  n->kids = {std::move(first), std::move(second)};
  return Ty(std::move(n));
}

bool Ty::operator==(const Ty& o) const {
  if (node_ == o.node_) return true;
  if (node_->tag != o.node_->tag) return false;
  switch (node_->tag) {
    case Tag::Var: return node_->name == o.node_->name;
    case Tag::Unit:
    case Tag::Bool:
    case Tag::Real: return true;
    case Tag::Fin: return node_->n == o.node_->n;
    case Tag::Acc: return inner() == o.inner();
    case Tag::Arr: return index() == o.index() && elem() == o.elem();
    case Tag::Pair: return first() == o.first() && second() == o.second();
  }
  return false;
}

bool Ty::contains(Tag t) const {
  if (node_->tag == t) return true;
  for (const Ty& k : node_->kids)
    if (k.contains(t)) return true;
  return false;
}

Ty substitute(const Ty& ty, const std::map<std::string, Ty>& bindings) {
  switch (ty.tag()) {
    case Ty::Tag::Var: {
      auto it = bindings.find(ty.varName());
      return it == bindings.end() ? ty : it->second;
    }
    case Ty::Tag::Unit:
    case Ty::Tag::Bool:
    case Ty::Tag::Real:
    case Ty::Tag::Fin:
      return ty;
    case Ty::Tag::Acc:
      return Ty::acc(substitute(ty.inner(), bindings));
    case Ty::Tag::Arr:
      return Ty::arr(substitute(ty.index(), bindings),
                     substitute(ty.elem(), bindings));
    case Ty::Tag::Pair:
      return Ty::pair(substitute(ty.first(), bindings),
                      substitute(ty.second(), bindings));
  }
  return ty;
}

std::string tyToString(const Ty& ty) {
  switch (ty.tag()) {
    case Ty::Tag::Var: return ty.varName();
    case Ty::Tag::Unit: return "()";
    case Ty::Tag::Bool: return "Bool";
    case Ty::Tag::Real: return "Real";
    case Ty::Tag::Fin: return std::to_string(ty.finSize());
    case Ty::Tag::Acc: return "&" + tyToString(ty.inner());
    case Ty::Tag::Arr:
      return "[" + tyToString(ty.index()) + "]" + tyToString(ty.elem());
    case Ty::Tag::Pair:
      return "(" + tyToString(ty.first()) + ", " + tyToString(ty.second()) +
             ")";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Op tables

const char* unaryOpName(UnaryOp op) {
  switch (op) {
    case UnaryOp::Not: return "!";
    case UnaryOp::Neg: return "-";
    case UnaryOp::Abs: return "abs";
    case UnaryOp::Sgn: return "sgn";
    case UnaryOp::Ceil: return "ceil";
    case UnaryOp::Floor: return "floor";
    case UnaryOp::Trunc: return "trunc";
    case UnaryOp::Sqrt: return "sqrt";
  }
  return "?";
}

const char* binaryOpName(BinaryOp op) {
  switch (op) {
    case BinaryOp::And: return "and";
    case BinaryOp::Or: return "or";
    case BinaryOp::Iff: return "iff";
    case BinaryOp::Xor: return "xor";
    case BinaryOp::Neq: return "!=";
    case BinaryOp::Lt: return "<";
    case BinaryOp::Leq: return "<=";
    case BinaryOp::Eq: return "==";
    case BinaryOp::Gt: return ">";
    case BinaryOp::Geq: return ">=";
    case BinaryOp::Add: return "+";
    case BinaryOp::Sub: return "-";
    case BinaryOp::Mul: return "*";
    case BinaryOp::Div: return "/";
  }
  return "?";
}

bool isArith(BinaryOp op) {
  return op == BinaryOp::Add || op == BinaryOp::Sub || op == BinaryOp::Mul ||
         op == BinaryOp::Div;
}

bool isCompare(BinaryOp op) {
  return op == BinaryOp::Neq || op == BinaryOp::Lt || op == BinaryOp::Leq ||
         op == BinaryOp::Eq || op == BinaryOp::Gt || op == BinaryOp::Geq;
}

bool isLogic(BinaryOp op) {
  return op == BinaryOp::And || op == BinaryOp::Or || op == BinaryOp::Iff ||
         op == BinaryOp::Xor;
}

// ---------------------------------------------------------------------------
// Registry

FuncId Registry::add(FuncDef def) {
  FuncId id = static_cast<FuncId>(funcs.size());
  def.id = id;
  funcs.emplace_back(std::move(def));
  return id;
}

FuncId Registry::add(OpaqueDef def) {
  FuncId id = static_cast<FuncId>(funcs.size());
  def.id = id;
  funcs.emplace_back(std::move(def));
  return id;
}

bool Registry::isDef(FuncId f) const {
  return f < funcs.size() && std::holds_alternative<FuncDef>(funcs[f]);
}

bool Registry::isOpaque(FuncId f) const {
  return f < funcs.size() && std::holds_alternative<OpaqueDef>(funcs[f]);
}

const FuncDef& Registry::def(FuncId f) const {
  return std::get<FuncDef>(funcs.at(f));
}

FuncDef& Registry::defMut(FuncId f) { return std::get<FuncDef>(funcs.at(f)); }

const OpaqueDef& Registry::opaque(FuncId f) const {
  return std::get<OpaqueDef>(funcs.at(f));
}

const std::string& Registry::nameOf(FuncId f) const {
  if (isDef(f)) return def(f).name;
  return opaque(f).name;
}

std::optional<FuncId> Registry::byName(const std::string& name) const {
  for (FuncId i = 0; i < funcs.size(); ++i)
    if (nameOf(i) == name) return i;
  return std::nullopt;
}

std::vector<Ty> Registry::paramTypes(FuncId f) const {
  std::vector<Ty> out;
  if (isDef(f)) {
    for (const Param& p : def(f).params) out.push_back(p.ty);
  } else {
    out.assign(opaque(f).arity, Ty::real());
  }
  return out;
}

Ty Registry::retType(FuncId f) const {
  return isDef(f) ? def(f).ret : Ty::real();
}

std::vector<Generic> Registry::genericsOf(FuncId f) const {
  return isDef(f) ? def(f).generics : std::vector<Generic>{};
}

// ---------------------------------------------------------------------------
// Diagnostics

const char* errCodeName(ErrCode c) {
  switch (c) {
    case ErrCode::UnboundTypeVar: return "UnboundTypeVar";
    case ErrCode::NonValueComponent: return "NonValueComponent";
    case ErrCode::TypeMismatch: return "TypeMismatch";
    case ErrCode::FinOutOfRange: return "FinOutOfRange";
    case ErrCode::UnboundVar: return "UnboundVar";
    case ErrCode::DuplicateBinding: return "DuplicateBinding";
    case ErrCode::ArityMismatch: return "ArityMismatch";
    case ErrCode::BadGenericInstantiation: return "BadGenericInstantiation";
    case ErrCode::AccumulatorEscape: return "AccumulatorEscape";
    case ErrCode::UnresolvedCallee: return "UnresolvedCallee";
    case ErrCode::RecursionCycle: return "RecursionCycle";
    case ErrCode::BadCustomJvpSignature: return "BadCustomJvpSignature";
    case ErrCode::EscapeError: return "EscapeError";
    case ErrCode::InferenceFailure: return "InferenceFailure";
    case ErrCode::MultiParamVjp: return "MultiParamVjp";
    case ErrCode::MissingDerivative: return "MissingDerivative";
    case ErrCode::NonlinearTangentUse: return "NonlinearTangentUse";
    case ErrCode::MarshalError: return "MarshalError";
    case ErrCode::MissingHostRoutine: return "MissingHostRoutine";
    case ErrCode::UnboundIndexGeneric: return "UnboundIndexGeneric";
    case ErrCode::ParseError: return "ParseError";
  }
  return "?";
}

std::string Diag::str() const {
  std::ostringstream os;
  os << errCodeName(code);
  if (!where.empty()) os << " [" << where << "]";
  os << ": " << message;
  return os.str();
}

void fail(ErrCode code, const std::string& msg, const std::string& where) {
  throw Error(Diag{code, msg, where});
}

// ---------------------------------------------------------------------------
// Kinding

std::optional<Kind> GenericEnv::lookup(const std::string& name) const {
  for (const Generic& g : generics)
    if (g.name == name) return g.kind;
  return std::nullopt;
}

bool tryKindOf(const Ty& ty, const GenericEnv& env, Kind& out, Diag& err) {
  switch (ty.tag()) {
    case Ty::Tag::Var: {
      auto k = env.lookup(ty.varName());
      if (!k) {
        err = {ErrCode::UnboundTypeVar,
               "type variable '" + ty.varName() + "' is not in scope", ""};
        return false;
      }
      out = *k;
      return true;
    }
    case Ty::Tag::Unit:
    case Ty::Tag::Bool:
    case Ty::Tag::Real:
      out = Kind::Value;
      return true;
    case Ty::Tag::Fin:
      out = Kind::Index;
      return true;
    case Ty::Tag::Acc: {
      Kind k;
      if (!tryKindOf(ty.inner(), env, k, err)) return false;
      if (!kindLeq(k, Kind::Value)) {
        err = {ErrCode::NonValueComponent,
               "accumulator over non-Value type " + tyToString(ty.inner()), ""};
        return false;
      }
      out = Kind::Type;
      return true;
    }
    case Ty::Tag::Arr: {
      Kind ki, ke;
      if (!tryKindOf(ty.index(), env, ki, err)) return false;
      if (!kindLeq(ki, Kind::Index)) {
        err = {ErrCode::NonValueComponent,
               "array index type " + tyToString(ty.index()) +
                   " does not kind to Index",
               ""};
        return false;
      }
      if (!tryKindOf(ty.elem(), env, ke, err)) return false;
      if (!kindLeq(ke, Kind::Value)) {
        err = {ErrCode::NonValueComponent,
               "array element type " + tyToString(ty.elem()) +
                   " does not kind to Value",
               ""};
        return false;
      }
      out = Kind::Value;
      return true;
    }
    case Ty::Tag::Pair: {
      Kind k1, k2;
      if (!tryKindOf(ty.first(), env, k1, err)) return false;
      if (!kindLeq(k1, Kind::Value)) {
        err = {ErrCode::NonValueComponent,
               "pair component " + tyToString(ty.first()) +
                   " does not kind to Value",
               ""};
        return false;
      }
      if (!tryKindOf(ty.second(), env, k2, err)) return false;
      if (!kindLeq(k2, Kind::Value)) {
        err = {ErrCode::NonValueComponent,
               "pair component " + tyToString(ty.second()) +
                   " does not kind to Value",
               ""};
        return false;
      }
      out = Kind::Value;
      return true;
    }
  }
  err = {ErrCode::TypeMismatch, "unreachable type tag", ""};
  return false;
}

Kind kindOf(const Ty& ty, const GenericEnv& env) {
  Kind k;
  Diag err;
  if (!tryKindOf(ty, env, k, err)) throw Error(std::move(err));
  return k;
}

Ty liftTy(const Ty& ty) {
  switch (ty.tag()) {
    case Ty::Tag::Real:
      return Ty::pair(Ty::real(), Ty::real());
    case Ty::Tag::Var:
    case Ty::Tag::Unit:
    case Ty::Tag::Bool:
    case Ty::Tag::Fin:
      return ty;
    case Ty::Tag::Acc:
      return Ty::acc(liftTy(ty.inner()));
    case Ty::Tag::Arr:
      return Ty::arr(ty.index(), liftTy(ty.elem()));
    case Ty::Tag::Pair:
      return Ty::pair(liftTy(ty.first()), liftTy(ty.second()));
  }
  return ty;
}

// ---------------------------------------------------------------------------
// Alpha-equivalence and canonicalization

namespace {

struct AlphaCtx {
  std::map<VarId, VarId> m;  // a-var -> b-var
  bool bind(VarId a, VarId b) {
    auto [it, fresh] = m.emplace(a, b);
    return fresh ? true : it->second == b;
  }
  bool same(VarId a, VarId b) const {
    auto it = m.find(a);
    return it != m.end() && it->second == b;
  }
};

bool blockAlphaEq(const Block& a, const Block& b, AlphaCtx& ctx);

bool exprAlphaEq(const Expr& a, const Expr& b, AlphaCtx& ctx) {
  if (a.index() != b.index()) return false;
  auto v = [&](VarId x, VarId y) { return ctx.same(x, y); };
  if (auto* ca = std::get_if<EConst>(&a)) {
    auto* cb = std::get_if<EConst>(&b);
    // bit compare so that -0.0 and NaN payloads round-trip honestly
    uint64_t ba, bb;
    static_assert(sizeof(double) == 8);
    std::memcpy(&ba, &ca->value, 8);
    std::memcpy(&bb, &cb->value, 8);
    return ba == bb;
  }
  if (auto* fa = std::get_if<EFin>(&a))
    return fa->value == std::get<EFin>(b).value;
  if (auto* aa = std::get_if<EArray>(&a)) {
    const auto& ab = std::get<EArray>(b);
    if (aa->elems.size() != ab.elems.size()) return false;
    for (size_t i = 0; i < aa->elems.size(); ++i)
      if (!v(aa->elems[i], ab.elems[i])) return false;
    return true;
  }
  if (auto* pa = std::get_if<EPair>(&a)) {
    const auto& pb = std::get<EPair>(b);
    return v(pa->first, pb.first) && v(pa->second, pb.second);
  }
  if (auto* ua = std::get_if<EUnary>(&a)) {
    const auto& ub = std::get<EUnary>(b);
    return ua->op == ub.op && v(ua->x, ub.x);
  }
  if (auto* ba = std::get_if<EBinary>(&a)) {
    const auto& bb = std::get<EBinary>(b);
    return ba->op == bb.op && v(ba->lhs, bb.lhs) && v(ba->rhs, bb.rhs);
  }
  if (auto* sa = std::get_if<ESelect>(&a)) {
    const auto& sb = std::get<ESelect>(b);
    return v(sa->cond, sb.cond) && v(sa->then, sb.then) &&
           v(sa->otherwise, sb.otherwise);
  }
  if (auto* aa = std::get_if<EAccum>(&a)) {
    const auto& ab = std::get<EAccum>(b);
    return v(aa->target, ab.target) && v(aa->value, ab.value);
  }
  if (auto* ia = std::get_if<EIndex>(&a)) {
    const auto& ib = std::get<EIndex>(b);
    return v(ia->arr, ib.arr) && v(ia->idx, ib.idx);
  }
  if (auto* fa = std::get_if<EFst>(&a)) return v(fa->pair, std::get<EFst>(b).pair);
  if (auto* sa = std::get_if<ESnd>(&a)) return v(sa->pair, std::get<ESnd>(b).pair);
  if (auto* ra = std::get_if<ERefIndex>(&a)) {
    const auto& rb = std::get<ERefIndex>(b);
    return v(ra->arr, rb.arr) && v(ra->idx, rb.idx);
  }
  if (auto* ra = std::get_if<ERefFst>(&a))
    return v(ra->pair, std::get<ERefFst>(b).pair);
  if (auto* ra = std::get_if<ERefSnd>(&a))
    return v(ra->pair, std::get<ERefSnd>(b).pair);
  if (auto* ca = std::get_if<ECall>(&a)) {
    const auto& cb = std::get<ECall>(b);
    if (ca->callee != cb.callee) return false;
    if (ca->typeArgs.size() != cb.typeArgs.size()) return false;
    for (size_t i = 0; i < ca->typeArgs.size(); ++i)
      if (ca->typeArgs[i] != cb.typeArgs[i]) return false;
    if (ca->args.size() != cb.args.size()) return false;
    for (size_t i = 0; i < ca->args.size(); ++i)
      if (!v(ca->args[i], cb.args[i])) return false;
    return true;
  }
  if (auto* fa = std::get_if<EFor>(&a)) {
    const auto& fb = std::get<EFor>(b);
    if (fa->indexTy != fb.indexTy) return false;
    if (!ctx.bind(fa->indexVar, fb.indexVar)) return false;
    return blockAlphaEq(*fa->body, *fb.body, ctx);
  }
  if (auto* aa = std::get_if<EAccumBlock>(&a)) {
    const auto& ab = std::get<EAccumBlock>(b);
    if (!v(aa->from, ab.from)) return false;
    if (!ctx.bind(aa->accVar, ab.accVar)) return false;
    return blockAlphaEq(*aa->body, *ab.body, ctx);
  }
  return true;  // EUnit/ETrue/EFalse
}

bool blockAlphaEq(const Block& a, const Block& b, AlphaCtx& ctx) {
  if (a.lets.size() != b.lets.size()) return false;
  for (size_t i = 0; i < a.lets.size(); ++i) {
    const Let& la = a.lets[i];
    const Let& lb = b.lets[i];
    if (la.ty != lb.ty) return false;
    if (!exprAlphaEq(la.expr, lb.expr, ctx)) return false;
    if (!ctx.bind(la.var, lb.var)) return false;
  }
  return ctx.same(a.result, b.result);
}

}  // namespace

bool alphaEqual(const FuncDef& a, const FuncDef& b) {
  if (a.name != b.name) return false;
  if (a.generics.size() != b.generics.size()) return false;
  std::map<std::string, Ty> genMap;
  for (size_t i = 0; i < a.generics.size(); ++i) {
    if (a.generics[i].kind != b.generics[i].kind) return false;
    genMap[b.generics[i].name] = Ty::var(a.generics[i].name);
  }
  auto norm = [&](const Ty& t) { return substitute(t, genMap); };
  if (a.params.size() != b.params.size()) return false;
  AlphaCtx ctx;
  for (size_t i = 0; i < a.params.size(); ++i) {
    if (a.params[i].ty != norm(b.params[i].ty)) return false;
    if (!ctx.bind(a.params[i].var, b.params[i].var)) return false;
  }
  if (a.ret != norm(b.ret)) return false;
  // Types inside the bodies must match under the generic renaming too.
  // Compare blocks with b's types normalized on the fly.
  struct Rename {
    const std::map<std::string, Ty>& m;
    Block apply(const Block& blk) const {
      Block out;
      out.result = blk.result;
      for (const Let& l : blk.lets) {
        Let nl{l.var, substitute(l.ty, m), l.expr};
        if (auto* f = std::get_if<EFor>(&nl.expr)) {
          EFor nf = *f;
          nf.indexTy = substitute(nf.indexTy, m);
          nf.body = std::make_shared<Block>(apply(*nf.body));
          nl.expr = nf;
        } else if (auto* ab = std::get_if<EAccumBlock>(&nl.expr)) {
          EAccumBlock na = *ab;
          na.body = std::make_shared<Block>(apply(*na.body));
          nl.expr = na;
        } else if (auto* c = std::get_if<ECall>(&nl.expr)) {
          ECall nc = *c;
          for (Ty& t : nc.typeArgs) t = substitute(t, m);
          nl.expr = nc;
        }
        out.lets.push_back(std::move(nl));
      }
      return out;
    }
  };
  Block bBody = Rename{genMap}.apply(b.body);
  return blockAlphaEq(a.body, bBody, ctx);
}

bool alphaEqual(const Registry& a, const Registry& b) {
  if (a.funcs.size() != b.funcs.size()) return false;
  for (FuncId i = 0; i < a.funcs.size(); ++i) {
    if (a.isDef(i) != b.isDef(i)) return false;
    if (a.isDef(i)) {
      if (!alphaEqual(a.def(i), b.def(i))) return false;
    } else {
      const OpaqueDef& oa = a.opaque(i);
      const OpaqueDef& ob = b.opaque(i);
      if (oa.name != ob.name || oa.arity != ob.arity ||
          oa.hostRoutine != ob.hostRoutine)
        return false;
    }
  }
  return a.customJvp == b.customJvp;
}

// ---------------------------------------------------------------------------
// Canonicalization

namespace {

struct Renumber {
  std::map<VarId, VarId> map;
  uint32_t next = 0;
  VarId bind(VarId v) {
    auto [it, fresh] = map.emplace(v, next);
    if (fresh) ++next;
    return it->second;
  }
  VarId get(VarId v) const {
    auto it = map.find(v);
    return it == map.end() ? v : it->second;
  }

  Block walk(const Block& b) {
    Block out;
    for (const Let& l : b.lets) {
      VarId nv = bind(l.var);
      Expr ne = walkExpr(l.expr);
      out.lets.push_back(Let{nv, l.ty, std::move(ne)});
    }
    out.result = get(b.result);
    return out;
  }

  Expr walkExpr(const Expr& e) {
    Expr out = e;
    auto r = [&](VarId v) { return get(v); };
    std::visit(
        [&](auto& n) {
          using T = std::decay_t<decltype(n)>;
          if constexpr (std::is_same_v<T, EArray>) {
            for (VarId& v : n.elems) v = r(v);
          } else if constexpr (std::is_same_v<T, EPair>) {
            n.first = r(n.first);
            n.second = r(n.second);
          } else if constexpr (std::is_same_v<T, EUnary>) {
            n.x = r(n.x);
          } else if constexpr (std::is_same_v<T, EBinary>) {
            n.lhs = r(n.lhs);
            n.rhs = r(n.rhs);
          } else if constexpr (std::is_same_v<T, ESelect>) {
            n.cond = r(n.cond);
            n.then = r(n.then);
            n.otherwise = r(n.otherwise);
          } else if constexpr (std::is_same_v<T, EAccum>) {
            n.target = r(n.target);
            n.value = r(n.value);
          } else if constexpr (std::is_same_v<T, EIndex> ||
                               std::is_same_v<T, ERefIndex>) {
            n.arr = r(n.arr);
            n.idx = r(n.idx);
          } else if constexpr (std::is_same_v<T, EFst> ||
                               std::is_same_v<T, ESnd> ||
                               std::is_same_v<T, ERefFst> ||
                               std::is_same_v<T, ERefSnd>) {
            n.pair = r(n.pair);
          } else if constexpr (std::is_same_v<T, ECall>) {
            for (VarId& v : n.args) v = r(v);
          } else if constexpr (std::is_same_v<T, EFor>) {
            n.indexVar = bind(n.indexVar);
            n.body = std::make_shared<Block>(walk(*n.body));
          } else if constexpr (std::is_same_v<T, EAccumBlock>) {
            n.from = r(n.from);
            n.accVar = bind(n.accVar);
            n.body = std::make_shared<Block>(walk(*n.body));
          }
        },
        out);
    return out;
  }
};

}  // namespace

FuncDef canonicalize(const FuncDef& def) {
  FuncDef out = def;
  Renumber rn;
  out.params.clear();
  for (const Param& p : def.params)
    out.params.push_back(Param{rn.bind(p.var), p.ty});
  out.body = rn.walk(def.body);
  out.varCount = rn.next;
  out.varNames.clear();
  for (const auto& [old, name] : def.varNames) {
    auto it = rn.map.find(old);
    if (it != rn.map.end()) out.varNames[it->second] = name;
  }
  return out;
}

namespace {
size_t blockLetCount(const Block& b) {
  size_t n = b.lets.size();
  for (const Let& l : b.lets) {
    if (auto* f = std::get_if<EFor>(&l.expr)) n += blockLetCount(*f->body);
    if (auto* a = std::get_if<EAccumBlock>(&l.expr)) n += blockLetCount(*a->body);
  }
  return n;
}
}  // namespace

size_t staticLetCount(const FuncDef& def) { return blockLetCount(def.body); }

namespace {
Block mapTypesBlock(const Block& b, const std::function<Ty(const Ty&)>& fn) {
  Block out;
  out.result = b.result;
  for (const Let& l : b.lets) {
    Expr e = l.expr;
    if (auto* f = std::get_if<EFor>(&e)) {
      f->indexTy = fn(f->indexTy);
      f->body = std::make_shared<const Block>(mapTypesBlock(*f->body, fn));
    } else if (auto* a = std::get_if<EAccumBlock>(&e)) {
      a->body = std::make_shared<const Block>(mapTypesBlock(*a->body, fn));
    } else if (auto* c = std::get_if<ECall>(&e)) {
      for (Ty& t : c->typeArgs) t = fn(t);
    }
    out.lets.push_back(Let{l.var, fn(l.ty), std::move(e)});
  }
  return out;
}
}  // namespace

FuncDef mapTypes(const FuncDef& def, const std::function<Ty(const Ty&)>& fn) {
  FuncDef out = def;
  for (Param& p : out.params) p.ty = fn(p.ty);
  out.ret = fn(out.ret);
  out.body = mapTypesBlock(def.body, fn);
  return out;
}

}  // namespace gradir
