#include "gradir/exec.hpp"

#include <cmath>
#include <sstream>

namespace gradir {

// ---------------------------------------------------------------------------
// Host routines.

namespace {

HostFn unary(double (*fn)(double), const char* name) {
  return [fn, name = std::string(name)](const std::vector<double>& a) {
    if (a.size() != 1)
      fail(ErrCode::MarshalError,
           "host routine " + name + " expects 1 argument, got " +
               std::to_string(a.size()));
    return fn(a[0]);
  };
}

HostFn binary(double (*fn)(double, double), const char* name) {
  return [fn, name = std::string(name)](const std::vector<double>& a) {
    if (a.size() != 2)
      fail(ErrCode::MarshalError,
           "host routine " + name + " expects 2 arguments, got " +
               std::to_string(a.size()));
    return fn(a[0], a[1]);
  };
}

}  // namespace

HostRoutines HostRoutines::standard() {
  HostRoutines h;
  h.table["sin"] = unary(std::sin, "sin");
  h.table["cos"] = unary(std::cos, "cos");
  h.table["tan"] = unary(std::tan, "tan");
  h.table["asin"] = unary(std::asin, "asin");
  h.table["acos"] = unary(std::acos, "acos");
  h.table["atan"] = unary(std::atan, "atan");
  h.table["exp"] = unary(std::exp, "exp");
  h.table["log"] = unary(std::log, "log");
  h.table["log2"] = unary(std::log2, "log2");
  h.table["log10"] = unary(std::log10, "log10");
  h.table["sinh"] = unary(std::sinh, "sinh");
  h.table["cosh"] = unary(std::cosh, "cosh");
  h.table["tanh"] = unary(std::tanh, "tanh");
  h.table["pow"] = binary(std::pow, "pow");
  h.table["atan2"] = binary(std::atan2, "atan2");
  h.table["hypot"] = binary(std::hypot, "hypot");
  return h;
}

// ---------------------------------------------------------------------------
// Marshalling.

nlohmann::json rtToJson(const RtValue& v, const Ty& ty) {
  switch (ty.tag()) {
    case Ty::Tag::Unit:
      if (!v.isUnit()) break;
      return nullptr;
    case Ty::Tag::Bool:
      if (!v.isBool()) break;
      return v.asBool();
    case Ty::Tag::Real:
      if (!v.isReal()) break;
      return v.asReal();
    case Ty::Tag::Fin:
      if (!v.isFin()) break;
      return v.asFin();
    case Ty::Tag::Arr: {
      if (!v.isArray() || !ty.index().is(Ty::Tag::Fin)) break;
      const RtArray& a = v.asArray();
      nlohmann::json out = nlohmann::json::array();
      for (const RtValue& e : a) out.push_back(rtToJson(e, ty.elem()));
      return out;
    }
    case Ty::Tag::Pair: {
      if (!v.isPair()) break;
      const RtPair& p = v.asPair();
      return nlohmann::json::array(
          {rtToJson(p.first, ty.first()), rtToJson(p.second, ty.second())});
    }
    case Ty::Tag::Acc:
    case Ty::Tag::Var:
      fail(ErrCode::MarshalError,
           "type " + tyToString(ty) + " cannot cross the host boundary");
  }
  fail(ErrCode::MarshalError,
       "runtime value does not match type " + tyToString(ty));
}

RtValue rtFromJson(const nlohmann::json& j, const Ty& ty) {
  switch (ty.tag()) {
    case Ty::Tag::Unit:
      if (!j.is_null())
        fail(ErrCode::MarshalError, "expected null for ()");
      return RtValue::unit();
    case Ty::Tag::Bool:
      if (!j.is_boolean())
        fail(ErrCode::MarshalError, "expected a boolean for Bool");
      return RtValue::boolean(j.get<bool>());
    case Ty::Tag::Real:
      if (!j.is_number())
        fail(ErrCode::MarshalError, "expected a number for Real");
      return RtValue::real(j.get<double>());
    case Ty::Tag::Fin: {
      if (!j.is_number_integer())
        fail(ErrCode::MarshalError,
             "expected an integer for " + tyToString(ty));
      int64_t raw = j.get<int64_t>();
      if (raw < 0 || uint64_t(raw) >= ty.finSize())
        fail(ErrCode::MarshalError,
             "index " + std::to_string(raw) + " is out of range for " +
                 tyToString(ty));
      return RtValue::fin(uint64_t(raw));
    }
    case Ty::Tag::Arr: {
      if (!ty.index().is(Ty::Tag::Fin))
        fail(ErrCode::MarshalError,
             "array size in " + tyToString(ty) + " is not concrete");
      if (!j.is_array() || j.size() != ty.index().finSize())
        fail(ErrCode::MarshalError,
             "expected an array of length " +
                 std::to_string(ty.index().finSize()) + " for " +
                 tyToString(ty));
      RtArray elems;
      elems.reserve(j.size());
      for (const auto& e : j) elems.push_back(rtFromJson(e, ty.elem()));
      return RtValue::array(std::move(elems));
    }
    case Ty::Tag::Pair: {
      if (!j.is_array() || j.size() != 2)
        fail(ErrCode::MarshalError,
             "expected a two-element array for " + tyToString(ty));
      return RtValue::pair(rtFromJson(j[0], ty.first()),
                           rtFromJson(j[1], ty.second()));
    }
    case Ty::Tag::Acc:
    case Ty::Tag::Var:
      break;
  }
  fail(ErrCode::MarshalError,
       "type " + tyToString(ty) + " cannot cross the host boundary");
}

// ---------------------------------------------------------------------------
// Engine.

Engine::Engine(const Registry& reg, HostRoutines hosts)
    : reg_(reg), hosts_(std::move(hosts)), byFunc_(reg_.size()) {
  std::vector<Diag> diags = validateRegistry(reg_);
  if (!diags.empty()) throw Error(diags.front());
}

RtValue Engine::invoke(const std::string& name,
                       const std::vector<Ty>& typeArgs,
                       std::vector<RtValue> args) {
  auto f = reg_.byName(name);
  if (!f)
    fail(ErrCode::UnresolvedCallee, "no function named " + name);
  return invoke(*f, typeArgs, std::move(args));
}

RtValue Engine::invoke(FuncId f, const std::vector<Ty>& typeArgs,
                       std::vector<RtValue> args) {
  return callFunction(f, typeArgs, std::move(args));
}

RtValue Engine::callFunction(FuncId callee, const std::vector<Ty>& typeArgs,
                             std::vector<RtValue> args) {
  if (reg_.isOpaque(callee)) {
    const OpaqueDef& od = reg_.opaque(callee);
    if (args.size() != od.arity)
      fail(ErrCode::ArityMismatch,
           od.name + " expects " + std::to_string(od.arity) +
               " arguments, got " + std::to_string(args.size()));
    std::vector<double> xs;
    xs.reserve(args.size());
    for (const RtValue& a : args) {
      if (!a.isReal())
        fail(ErrCode::MarshalError,
             "opaque " + od.name + " takes Real arguments only");
      xs.push_back(a.asReal());
    }
    auto host = hosts_.table.find(od.hostRoutine);
    if (host == hosts_.table.end())
      fail(ErrCode::MissingHostRoutine,
           "no host routine '" + od.hostRoutine + "' for opaque " + od.name);
    return RtValue::real(host->second(xs));
  }

  Mono& mono = instance(callee, typeArgs);
  if (args.size() != mono.def.params.size())
    fail(ErrCode::ArityMismatch,
         mono.def.name + " expects " +
             std::to_string(mono.def.params.size()) + " arguments, got " +
             std::to_string(args.size()));
  mono.calls++;
  std::vector<RtValue> frame(mono.def.varCount);
  for (size_t i = 0; i < args.size(); ++i)
    frame[mono.def.params[i].var] = std::move(args[i]);
  return evalBlock(mono, frame, mono.def.body);
}

Engine::Mono& Engine::instance(FuncId f, const std::vector<Ty>& typeArgs) {
  auto& bucket = byFunc_.at(f);
  for (auto& [args, mono] : bucket)
    if (args == typeArgs) return *mono;

  const FuncDef& def = reg_.def(f);
  if (typeArgs.size() != def.generics.size())
    fail(ErrCode::ArityMismatch,
         def.name + " takes " + std::to_string(def.generics.size()) +
             " type arguments, got " + std::to_string(typeArgs.size()));
  for (const Ty& t : typeArgs)
    if (t.containsVar())
      fail(ErrCode::UnboundIndexGeneric,
           "cannot instantiate " + def.name + " with open type " +
               tyToString(t));
  Mono mono;
  mono.label = reg_.nameOf(f);
  if (!typeArgs.empty()) {
    mono.label += "<";
    for (size_t i = 0; i < typeArgs.size(); ++i) {
      if (i) mono.label += ", ";
      mono.label += tyToString(typeArgs[i]);
    }
    mono.label += ">";
  }
  if (typeArgs.empty()) {
    mono.def = canonicalize(def);
  } else {
    std::map<std::string, Ty> sub;
    for (size_t i = 0; i < def.generics.size(); ++i)
      sub[def.generics[i].name] = typeArgs[i];
    FuncDef specialized = mapTypes(
        def, [&sub](const Ty& t) { return substitute(t, sub); });
    specialized.generics.clear();
    mono.def = canonicalize(specialized);
  }
  monos_.push_back(std::move(mono));
  bucket.emplace_back(typeArgs, &monos_.back());
  return monos_.back();
}

RtValue Engine::evalBlock(Mono& mono, std::vector<RtValue>& frame,
                          const Block& b) {
  for (const Let& l : b.lets) {
    mono.ops++;
    frame[l.var] = evalExpr(mono, frame, l.expr);
  }
  return frame[b.result];
}

RtValue Engine::evalExpr(Mono& mono, std::vector<RtValue>& frame,
                         const Expr& e) {
  return std::visit(
      [&](const auto& n) -> RtValue {
        using T = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<T, EUnit>) {
          return RtValue::unit();
        } else if constexpr (std::is_same_v<T, ETrue>) {
          return RtValue::boolean(true);
        } else if constexpr (std::is_same_v<T, EFalse>) {
          return RtValue::boolean(false);
        } else if constexpr (std::is_same_v<T, EConst>) {
          return RtValue::real(n.value);
        } else if constexpr (std::is_same_v<T, EFin>) {
          return RtValue::fin(n.value);
        } else if constexpr (std::is_same_v<T, EArray>) {
          RtArray elems;
          elems.reserve(n.elems.size());
          for (VarId v : n.elems) elems.push_back(frame[v]);
          return RtValue::array(std::move(elems));
        } else if constexpr (std::is_same_v<T, EPair>) {
          return RtValue::pair(frame[n.first], frame[n.second]);
        } else if constexpr (std::is_same_v<T, EUnary>) {
          if (n.op == UnaryOp::Not)
            return RtValue::boolean(!frame[n.x].asBool());
          double x = frame[n.x].asReal();
          switch (n.op) {
            case UnaryOp::Neg: return RtValue::real(-x);
            case UnaryOp::Abs: return RtValue::real(std::fabs(x));
            case UnaryOp::Sgn:
              return RtValue::real(x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0));
            case UnaryOp::Ceil: return RtValue::real(std::ceil(x));
            case UnaryOp::Floor: return RtValue::real(std::floor(x));
            case UnaryOp::Trunc: return RtValue::real(std::trunc(x));
            case UnaryOp::Sqrt: return RtValue::real(std::sqrt(x));
            case UnaryOp::Not: break;
          }
          fail(ErrCode::MarshalError, "unreachable unary op");
        } else if constexpr (std::is_same_v<T, EBinary>) {
          if (isLogic(n.op)) {
            bool a = frame[n.lhs].asBool(), b = frame[n.rhs].asBool();
            switch (n.op) {
              case BinaryOp::And: return RtValue::boolean(a && b);
              case BinaryOp::Or: return RtValue::boolean(a || b);
              case BinaryOp::Iff: return RtValue::boolean(a == b);
              case BinaryOp::Xor: return RtValue::boolean(a != b);
              default: break;
            }
          }
          double a = frame[n.lhs].asReal(), b = frame[n.rhs].asReal();
          switch (n.op) {
            case BinaryOp::Add: return RtValue::real(a + b);
            case BinaryOp::Sub: return RtValue::real(a - b);
            case BinaryOp::Mul: return RtValue::real(a * b);
            case BinaryOp::Div: return RtValue::real(a / b);
            case BinaryOp::Neq: return RtValue::boolean(a != b);
            case BinaryOp::Eq: return RtValue::boolean(a == b);
            case BinaryOp::Lt: return RtValue::boolean(a < b);
            case BinaryOp::Leq: return RtValue::boolean(a <= b);
            case BinaryOp::Gt: return RtValue::boolean(a > b);
            case BinaryOp::Geq: return RtValue::boolean(a >= b);
            default: break;
          }
          fail(ErrCode::MarshalError, "unreachable binary op");
        } else if constexpr (std::is_same_v<T, ESelect>) {
          return frame[n.cond].asBool() ? frame[n.then] : frame[n.otherwise];
        } else if constexpr (std::is_same_v<T, EAccum>) {
          Cell* cell = resolve(frame[n.target].asAcc());
          addInto(*cell, frame[n.value]);
          return RtValue::unit();
        } else if constexpr (std::is_same_v<T, EIndex>) {
          return frame[n.arr].asArray().at(frame[n.idx].asFin());
        } else if constexpr (std::is_same_v<T, EFst>) {
          return frame[n.pair].asPair().first;
        } else if constexpr (std::is_same_v<T, ESnd>) {
          return frame[n.pair].asPair().second;
        } else if constexpr (std::is_same_v<T, ERefIndex>) {
          AccPath p = frame[n.arr].asAcc();
          p.steps.push_back(AccStep{AccStep::Elem, frame[n.idx].asFin()});
          return RtValue{std::move(p)};
        } else if constexpr (std::is_same_v<T, ERefFst>) {
          AccPath p = frame[n.pair].asAcc();
          p.steps.push_back(AccStep{AccStep::First, 0});
          return RtValue{std::move(p)};
        } else if constexpr (std::is_same_v<T, ERefSnd>) {
          AccPath p = frame[n.pair].asAcc();
          p.steps.push_back(AccStep{AccStep::Second, 0});
          return RtValue{std::move(p)};
        } else if constexpr (std::is_same_v<T, ECall>) {
          std::vector<RtValue> args;
          args.reserve(n.args.size());
          for (VarId v : n.args) args.push_back(frame[v]);
          return callFunction(n.callee, n.typeArgs, std::move(args));
        } else if constexpr (std::is_same_v<T, EFor>) {
          if (!n.indexTy.is(Ty::Tag::Fin))
            fail(ErrCode::UnboundIndexGeneric,
                 "loop bound " + tyToString(n.indexTy) +
                     " is not concrete in " + mono.def.name);
          uint64_t bound = n.indexTy.finSize();
          RtArray elems;
          elems.reserve(bound);
          for (uint64_t i = 0; i < bound; ++i) {
            frame[n.indexVar] = RtValue::fin(i);
            elems.push_back(evalBlock(mono, frame, *n.body));
          }
          return RtValue::array(std::move(elems));
        } else if constexpr (std::is_same_v<T, EAccumBlock>) {
          accStack_.push_back(zeroFromSeed(frame[n.from]));
          uint32_t store = uint32_t(accStack_.size() - 1);
          frame[n.accVar] = RtValue{AccPath{store, {}}};
          RtValue bodyVal = evalBlock(mono, frame, *n.body);
          RtValue decayed = decay(accStack_[store]);
          accStack_.pop_back();
          return RtValue::pair(std::move(decayed), std::move(bodyVal));
        }
      },
      e);
}

Engine::Cell Engine::zeroFromSeed(const RtValue& seed) const {
  Cell c;
  if (seed.isReal()) {
    c.k = Cell::Real;
    c.r = 0.0;
  } else if (seed.isBool()) {
    c.k = Cell::Bool;
    c.b = seed.asBool();
  } else if (seed.isFin()) {
    c.k = Cell::Fin;
    c.f = seed.asFin();
  } else if (seed.isUnit()) {
    c.k = Cell::Unit;
  } else if (seed.isArray()) {
    c.k = Cell::Arr;
    for (const RtValue& e : seed.asArray()) c.kids.push_back(zeroFromSeed(e));
  } else if (seed.isPair()) {
    c.k = Cell::Pair;
    c.kids.push_back(zeroFromSeed(seed.asPair().first));
    c.kids.push_back(zeroFromSeed(seed.asPair().second));
  } else {
    fail(ErrCode::MarshalError, "accumulator seed contains an accumulator");
  }
  return c;
}

Engine::Cell* Engine::resolve(const AccPath& path) {
  Cell* c = &accStack_.at(path.store);
  for (const AccStep& s : path.steps) {
    switch (s.k) {
      case AccStep::First: c = &c->kids.at(0); break;
      case AccStep::Second: c = &c->kids.at(1); break;
      case AccStep::Elem: c = &c->kids.at(s.index); break;
    }
  }
  return c;
}

void Engine::addInto(Cell& cell, const RtValue& v) {
  switch (cell.k) {
    case Cell::Real:
      cell.r += v.asReal();
      return;
    case Cell::Bool:
    case Cell::Fin:
    case Cell::Unit:
      return;  // non-vector material is inert under accumulation
    case Cell::Arr: {
      const RtArray& a = v.asArray();
      for (size_t i = 0; i < cell.kids.size(); ++i)
        addInto(cell.kids[i], a.at(i));
      return;
    }
    case Cell::Pair: {
      const RtPair& p = v.asPair();
      addInto(cell.kids.at(0), p.first);
      addInto(cell.kids.at(1), p.second);
      return;
    }
  }
}

RtValue Engine::decay(const Cell& cell) const {
  switch (cell.k) {
    case Cell::Unit: return RtValue::unit();
    case Cell::Bool: return RtValue::boolean(cell.b);
    case Cell::Real: return RtValue::real(cell.r);
    case Cell::Fin: return RtValue::fin(cell.f);
    case Cell::Arr: {
      RtArray elems;
      elems.reserve(cell.kids.size());
      for (const Cell& k : cell.kids) elems.push_back(decay(k));
      return RtValue::array(std::move(elems));
    }
    case Cell::Pair:
      return RtValue::pair(decay(cell.kids.at(0)), decay(cell.kids.at(1)));
  }
  fail(ErrCode::MarshalError, "unreachable cell kind");
}

uint64_t Engine::totalOps() const {
  uint64_t total = 0;
  for (const Mono& mono : monos_) total += mono.ops;
  return total;
}

void Engine::resetOps() {
  for (Mono& mono : monos_) {
    mono.ops = 0;
    mono.calls = 0;
  }
}

std::vector<std::tuple<std::string, uint64_t, uint64_t>>
Engine::instanceReport() const {
  std::vector<std::tuple<std::string, uint64_t, uint64_t>> out;
  for (const Mono& m : monos_) out.emplace_back(m.label, m.calls, m.ops);
  return out;
}

}  // namespace gradir
