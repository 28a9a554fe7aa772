#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "gradir/ir.hpp"

namespace gradir {

namespace {

// Scoped typing environment over dense var ids. Region boundaries (For and
// accumulator blocks) remove their binders on exit, which also enforces that
// accumulator handles cannot leak: an out-of-region reference is simply an
// unbound variable.
class Scope {
 public:
  bool bind(VarId v, Ty ty) {
    auto [it, fresh] = vars_.emplace(v, std::move(ty));
    return fresh;
  }
  void unbind(VarId v) { vars_.erase(v); }
  const Ty* lookup(VarId v) const {
    auto it = vars_.find(v);
    return it == vars_.end() ? nullptr : &it->second;
  }

 private:
  std::unordered_map<VarId, Ty> vars_;
};

class Checker {
 public:
  Checker(const FuncDef& def, const Registry& reg)
      : def_(def), reg_(reg), env_{def.generics} {}

  std::optional<Diag> run() {
    // Return type must kind to Value: accumulators cannot escape a def.
    Kind rk;
    Diag kerr;
    if (!tryKindOf(def_.ret, env_, rk, kerr)) return at(kerr);
    if (!kindLeq(rk, Kind::Value))
      return err(ErrCode::AccumulatorEscape,
                 "return type " + tyToString(def_.ret) +
                     " does not kind to Value");
    for (const Param& p : def_.params) {
      Kind pk;
      if (!tryKindOf(p.ty, env_, pk, kerr)) return at(kerr);
      if (!scope_.bind(p.var, p.ty))
        return err(ErrCode::DuplicateBinding,
                   "duplicate parameter binding x" + std::to_string(p.var));
    }
    Ty bodyTy;
    if (auto d = checkBlock(def_.body, bodyTy)) return d;
    if (bodyTy != def_.ret)
      return err(ErrCode::TypeMismatch,
                 "body has type " + tyToString(bodyTy) + ", declared " +
                     tyToString(def_.ret));
    return std::nullopt;
  }

 private:
  const FuncDef& def_;
  const Registry& reg_;
  GenericEnv env_;
  Scope scope_;

  std::optional<Diag> err(ErrCode c, const std::string& m) const {
    return Diag{c, m, "def " + def_.name};
  }
  std::optional<Diag> at(Diag d) const {
    d.where = "def " + def_.name;
    return d;
  }

  const Ty* use(VarId v, std::optional<Diag>& d) {
    const Ty* t = scope_.lookup(v);
    if (!t)
      d = err(ErrCode::UnboundVar,
              "variable x" + std::to_string(v) + " is not in scope");
    return t;
  }

  std::optional<Diag> checkBlock(const Block& b, Ty& out) {
    std::vector<VarId> bound;
    std::optional<Diag> deferred;
    for (const Let& l : b.lets) {
      // Declared type must kind (to anything); formation constraints live in
      // tryKindOf.
      Kind k;
      Diag kerr;
      if (!tryKindOf(l.ty, env_, k, kerr)) return at(kerr);
      Ty got;
      if (auto d = checkExpr(l.expr, l.ty, got)) return d;
      if (got != l.ty)
        return err(ErrCode::TypeMismatch,
                   "let x" + std::to_string(l.var) + " declared " +
                       tyToString(l.ty) + " but expression has type " +
                       tyToString(got));
      if (!scope_.bind(l.var, l.ty))
        return err(ErrCode::DuplicateBinding,
                   "variable x" + std::to_string(l.var) + " bound twice");
      bound.push_back(l.var);
    }
    std::optional<Diag> res;
    if (const Ty* t = use(b.result, res)) out = *t;
    for (VarId v : bound) scope_.unbind(v);
    return res;
  }

  // `declared` feeds the rules whose conclusion type is not synthesizable
  // from operands alone (Fin literals and array literals fix their index
  // bound from the declared type).
  std::optional<Diag> checkExpr(const Expr& e, const Ty& declared, Ty& out) {
    std::optional<Diag> d;
    auto operand = [&](VarId v) { return use(v, d); };

    if (std::holds_alternative<EUnit>(e)) {
      out = Ty::unit();
      return std::nullopt;
    }
    if (std::holds_alternative<ETrue>(e) || std::holds_alternative<EFalse>(e)) {
      out = Ty::boolean();
      return std::nullopt;
    }
    if (std::holds_alternative<EConst>(e)) {
      out = Ty::real();
      return std::nullopt;
    }
    if (auto* f = std::get_if<EFin>(&e)) {
      if (!declared.is(Ty::Tag::Fin))
        return err(ErrCode::TypeMismatch,
                   "index literal needs a Fin type, declared " +
                       tyToString(declared));
      if (f->value >= declared.finSize())
        return err(ErrCode::FinOutOfRange,
                   "literal " + std::to_string(f->value) +
                       " out of range for " + tyToString(declared));
      out = declared;
      return std::nullopt;
    }
    if (auto* a = std::get_if<EArray>(&e)) {
      if (!declared.is(Ty::Tag::Arr) || !declared.index().is(Ty::Tag::Fin))
        return err(ErrCode::TypeMismatch,
                   "array literal needs a concrete [n]T type, declared " +
                       tyToString(declared));
      if (declared.index().finSize() != a->elems.size())
        return err(ErrCode::TypeMismatch,
                   "array literal has " + std::to_string(a->elems.size()) +
                       " elements, declared " + tyToString(declared));
      for (VarId v : a->elems) {
        const Ty* t = operand(v);
        if (!t) return d;
        if (*t != declared.elem())
          return err(ErrCode::TypeMismatch,
                     "array element x" + std::to_string(v) + " has type " +
                         tyToString(*t) + ", expected " +
                         tyToString(declared.elem()));
      }
      out = declared;
      return std::nullopt;
    }
    if (auto* p = std::get_if<EPair>(&e)) {
      const Ty* a = operand(p->first);
      if (!a) return d;
      const Ty* b = operand(p->second);
      if (!b) return d;
      out = Ty::pair(*a, *b);
      return std::nullopt;
    }
    if (auto* u = std::get_if<EUnary>(&e)) {
      const Ty* t = operand(u->x);
      if (!t) return d;
      Ty want = u->op == UnaryOp::Not ? Ty::boolean() : Ty::real();
      if (*t != want)
        return err(ErrCode::TypeMismatch,
                   std::string(unaryOpName(u->op)) + " applied to " +
                       tyToString(*t));
      out = want;
      return std::nullopt;
    }
    if (auto* b = std::get_if<EBinary>(&e)) {
      const Ty* lt = operand(b->lhs);
      if (!lt) return d;
      const Ty* rt = operand(b->rhs);
      if (!rt) return d;
      Ty want = isLogic(b->op) ? Ty::boolean() : Ty::real();
      if (*lt != want || *rt != want)
        return err(ErrCode::TypeMismatch,
                   std::string(binaryOpName(b->op)) + " applied to " +
                       tyToString(*lt) + " and " + tyToString(*rt));
      out = isArith(b->op) ? Ty::real() : Ty::boolean();
      return std::nullopt;
    }
    if (auto* s = std::get_if<ESelect>(&e)) {
      const Ty* c = operand(s->cond);
      if (!c) return d;
      if (*c != Ty::boolean())
        return err(ErrCode::TypeMismatch,
                   "select condition has type " + tyToString(*c));
      const Ty* a = operand(s->then);
      if (!a) return d;
      const Ty* b = operand(s->otherwise);
      if (!b) return d;
      if (*a != *b)
        return err(ErrCode::TypeMismatch,
                   "select branches differ: " + tyToString(*a) + " vs " +
                       tyToString(*b));
      out = *a;
      return std::nullopt;
    }
    if (auto* a = std::get_if<EAccum>(&e)) {
      const Ty* tgt = operand(a->target);
      if (!tgt) return d;
      if (!tgt->is(Ty::Tag::Acc))
        return err(ErrCode::TypeMismatch,
                   "accumulate target has type " + tyToString(*tgt) +
                       ", expected an accumulator");
      const Ty* val = operand(a->value);
      if (!val) return d;
      if (*val != tgt->inner())
        return err(ErrCode::TypeMismatch,
                   "accumulate value has type " + tyToString(*val) +
                       ", cell holds " + tyToString(tgt->inner()));
      out = Ty::unit();
      return std::nullopt;
    }
    if (auto* i = std::get_if<EIndex>(&e)) {
      const Ty* at = operand(i->arr);
      if (!at) return d;
      if (!at->is(Ty::Tag::Arr))
        return err(ErrCode::TypeMismatch,
                   "indexing non-array " + tyToString(*at));
      const Ty* it = operand(i->idx);
      if (!it) return d;
      if (*it != at->index())
        return err(ErrCode::TypeMismatch,
                   "index has type " + tyToString(*it) + ", array wants " +
                       tyToString(at->index()));
      out = at->elem();
      return std::nullopt;
    }
    if (auto* f = std::get_if<EFst>(&e)) {
      const Ty* t = operand(f->pair);
      if (!t) return d;
      if (!t->is(Ty::Tag::Pair))
        return err(ErrCode::TypeMismatch, "fst of " + tyToString(*t));
      out = t->first();
      return std::nullopt;
    }
    if (auto* s = std::get_if<ESnd>(&e)) {
      const Ty* t = operand(s->pair);
      if (!t) return d;
      if (!t->is(Ty::Tag::Pair))
        return err(ErrCode::TypeMismatch, "snd of " + tyToString(*t));
      out = t->second();
      return std::nullopt;
    }
    if (auto* r = std::get_if<ERefIndex>(&e)) {
      const Ty* at = operand(r->arr);
      if (!at) return d;
      if (!at->is(Ty::Tag::Acc) || !at->inner().is(Ty::Tag::Arr))
        return err(ErrCode::TypeMismatch,
                   "ref-index needs an array accumulator, got " +
                       tyToString(*at));
      const Ty* it = operand(r->idx);
      if (!it) return d;
      if (*it != at->inner().index())
        return err(ErrCode::TypeMismatch,
                   "ref-index has type " + tyToString(*it) +
                       ", accumulator wants " +
                       tyToString(at->inner().index()));
      out = Ty::acc(at->inner().elem());
      return std::nullopt;
    }
    if (auto* r = std::get_if<ERefFst>(&e)) {
      const Ty* t = operand(r->pair);
      if (!t) return d;
      if (!t->is(Ty::Tag::Acc) || !t->inner().is(Ty::Tag::Pair))
        return err(ErrCode::TypeMismatch,
                   "ref-fst needs a pair accumulator, got " + tyToString(*t));
      out = Ty::acc(t->inner().first());
      return std::nullopt;
    }
    if (auto* r = std::get_if<ERefSnd>(&e)) {
      const Ty* t = operand(r->pair);
      if (!t) return d;
      if (!t->is(Ty::Tag::Acc) || !t->inner().is(Ty::Tag::Pair))
        return err(ErrCode::TypeMismatch,
                   "ref-snd needs a pair accumulator, got " + tyToString(*t));
      out = Ty::acc(t->inner().second());
      return std::nullopt;
    }
    if (auto* c = std::get_if<ECall>(&e)) {
      if (c->callee >= reg_.size())
        return err(ErrCode::UnresolvedCallee,
                   "call target #" + std::to_string(c->callee) +
                       " does not exist");
      std::vector<Generic> gens = reg_.genericsOf(c->callee);
      if (c->typeArgs.size() != gens.size())
        return err(ErrCode::ArityMismatch,
                   "call to " + reg_.nameOf(c->callee) + " supplies " +
                       std::to_string(c->typeArgs.size()) + " type args, def has " +
                       std::to_string(gens.size()));
      std::map<std::string, Ty> subst;
      for (size_t i = 0; i < gens.size(); ++i) {
        Kind k;
        Diag kerr;
        if (!tryKindOf(c->typeArgs[i], env_, k, kerr)) return at(kerr);
        if (!kindLeq(k, gens[i].kind))
          return err(ErrCode::BadGenericInstantiation,
                     "type argument " + tyToString(c->typeArgs[i]) +
                         " has kind " + kindName(k) + ", generic " +
                         gens[i].name + " wants " + kindName(gens[i].kind));
        subst[gens[i].name] = c->typeArgs[i];
      }
      std::vector<Ty> ps = reg_.paramTypes(c->callee);
      if (c->args.size() != ps.size())
        return err(ErrCode::ArityMismatch,
                   "call to " + reg_.nameOf(c->callee) + " passes " +
                       std::to_string(c->args.size()) + " args, def takes " +
                       std::to_string(ps.size()));
      for (size_t i = 0; i < ps.size(); ++i) {
        const Ty* t = operand(c->args[i]);
        if (!t) return d;
        Ty want = substitute(ps[i], subst);
        if (*t != want)
          return err(ErrCode::TypeMismatch,
                     "argument " + std::to_string(i) + " of " +
                         reg_.nameOf(c->callee) + " has type " +
                         tyToString(*t) + ", expected " + tyToString(want));
      }
      out = substitute(reg_.retType(c->callee), subst);
      return std::nullopt;
    }
    if (auto* f = std::get_if<EFor>(&e)) {
      Kind k;
      Diag kerr;
      if (!tryKindOf(f->indexTy, env_, k, kerr)) return at(kerr);
      if (!kindLeq(k, Kind::Index))
        return err(ErrCode::NonValueComponent,
                   "loop index type " + tyToString(f->indexTy) +
                       " does not kind to Index");
      if (!scope_.bind(f->indexVar, f->indexTy))
        return err(ErrCode::DuplicateBinding,
                   "loop variable x" + std::to_string(f->indexVar) +
                       " already bound");
      Ty bodyTy;
      auto res = checkBlock(*f->body, bodyTy);
      scope_.unbind(f->indexVar);
      if (res) return res;
      Ty result = Ty::arr(f->indexTy, bodyTy);
      Diag kerr2;
      if (!tryKindOf(result, env_, k, kerr2)) return at(kerr2);
      out = result;
      return std::nullopt;
    }
    if (auto* a = std::get_if<EAccumBlock>(&e)) {
      const Ty* fromTy = operand(a->from);
      if (!fromTy) return d;
      Kind k;
      Diag kerr;
      if (!tryKindOf(*fromTy, env_, k, kerr)) return at(kerr);
      if (!kindLeq(k, Kind::Value))
        return err(ErrCode::NonValueComponent,
                   "accumulator seed has non-Value type " +
                       tyToString(*fromTy));
      if (!scope_.bind(a->accVar, Ty::acc(*fromTy)))
        return err(ErrCode::DuplicateBinding,
                   "accumulator variable x" + std::to_string(a->accVar) +
                       " already bound");
      Ty bodyTy;
      auto res = checkBlock(*a->body, bodyTy);
      scope_.unbind(a->accVar);
      if (res) return res;
      Ty result = Ty::pair(*fromTy, bodyTy);
      Diag kerr2;
      if (!tryKindOf(result, env_, k, kerr2)) {
        // Pair formation failing here means the body result was not a Value
        // (it let an accumulator out).
        kerr2.code = ErrCode::AccumulatorEscape;
        return at(kerr2);
      }
      out = result;
      return std::nullopt;
    }
    return err(ErrCode::TypeMismatch, "unhandled expression form");
  }
};

void collectCallees(const Block& b, std::vector<FuncId>& out) {
  for (const Let& l : b.lets) {
    if (auto* c = std::get_if<ECall>(&l.expr)) out.push_back(c->callee);
    if (auto* f = std::get_if<EFor>(&l.expr)) collectCallees(*f->body, out);
    if (auto* a = std::get_if<EAccumBlock>(&l.expr))
      collectCallees(*a->body, out);
  }
}

}  // namespace

std::optional<Diag> typecheckFunction(const FuncDef& def, const Registry& reg) {
  return Checker(def, reg).run();
}

std::vector<FuncId> topoOrder(const Registry& reg) {
  std::vector<int> state(reg.size(), 0);  // 0 new, 1 visiting, 2 done
  std::vector<FuncId> order;
  struct Cyc {};
  auto visit = [&](auto&& self, FuncId f) -> void {
    if (state[f] == 2) return;
    if (state[f] == 1) throw Cyc{};
    state[f] = 1;
    if (reg.isDef(f)) {
      std::vector<FuncId> callees;
      collectCallees(reg.def(f).body, callees);
      for (FuncId c : callees)
        if (c < reg.size()) self(self, c);
    }
    state[f] = 2;
    order.push_back(f);
  };
  try {
    for (FuncId f = 0; f < reg.size(); ++f) visit(visit, f);
  } catch (Cyc) {
    fail(ErrCode::RecursionCycle, "call graph contains a cycle");
  }
  return order;
}

std::vector<Diag> validateRegistry(const Registry& reg) {
  std::vector<Diag> diags;

  // Callee resolution + acyclicity.
  bool cyclic = false;
  {
    std::vector<int> state(reg.size(), 0);
    auto visit = [&](auto&& self, FuncId f) -> bool {
      if (state[f] == 2) return true;
      if (state[f] == 1) return false;
      state[f] = 1;
      bool ok = true;
      if (reg.isDef(f)) {
        std::vector<FuncId> callees;
        collectCallees(reg.def(f).body, callees);
        for (FuncId c : callees) {
          if (c >= reg.size()) {
            diags.push_back({ErrCode::UnresolvedCallee,
                             "call in " + reg.nameOf(f) + " targets missing #" +
                                 std::to_string(c),
                             "def " + reg.nameOf(f)});
            continue;
          }
          if (!self(self, c)) {
            if (!cyclic) {
              cyclic = true;
              diags.push_back({ErrCode::RecursionCycle,
                               "recursive call cycle through " + reg.nameOf(f) +
                                   " and " + reg.nameOf(c),
                               "def " + reg.nameOf(f)});
            }
            ok = false;
          }
        }
      }
      state[f] = 2;
      return ok;
    };
    for (FuncId f = 0; f < reg.size(); ++f) visit(visit, f);
  }

  for (FuncId f = 0; f < reg.size(); ++f) {
    if (!reg.isDef(f)) continue;
    if (auto d = typecheckFunction(reg.def(f), reg)) diags.push_back(*d);
  }

  // Custom derivative signatures: jvp params/ret must be the dual lift of the
  // base signature, with identical generics.
  for (const auto& [base, jvp] : reg.customJvp) {
    auto bad = [&](const std::string& msg) {
      diags.push_back({ErrCode::BadCustomJvpSignature, msg,
                       "jvp " + (base < reg.size() ? reg.nameOf(base)
                                                   : std::to_string(base))});
    };
    if (base >= reg.size() || jvp >= reg.size()) {
      bad("custom derivative binding references a missing function");
      continue;
    }
    if (!reg.isDef(jvp)) {
      bad("custom derivative must be a def, " + reg.nameOf(jvp) +
          " is opaque");
      continue;
    }
    std::vector<Generic> gb = reg.genericsOf(base);
    std::vector<Generic> gj = reg.genericsOf(jvp);
    if (gb.size() != gj.size()) {
      bad("generic arity differs between " + reg.nameOf(base) + " and " +
          reg.nameOf(jvp));
      continue;
    }
    std::map<std::string, Ty> ren;
    bool genOk = true;
    for (size_t i = 0; i < gb.size(); ++i) {
      if (gb[i].kind != gj[i].kind) {
        bad("generic kinds differ between " + reg.nameOf(base) + " and " +
            reg.nameOf(jvp));
        genOk = false;
        break;
      }
      ren[gj[i].name] = Ty::var(gb[i].name);
    }
    if (!genOk) continue;
    std::vector<Ty> pb = reg.paramTypes(base);
    std::vector<Ty> pj = reg.paramTypes(jvp);
    if (pb.size() != pj.size()) {
      bad("parameter count differs between " + reg.nameOf(base) + " and " +
          reg.nameOf(jvp));
      continue;
    }
    bool ok = true;
    for (size_t i = 0; i < pb.size(); ++i) {
      if (substitute(pj[i], ren) != liftTy(pb[i])) {
        bad("parameter " + std::to_string(i) + " of " + reg.nameOf(jvp) +
            " has type " + tyToString(pj[i]) + ", expected " +
            tyToString(liftTy(pb[i])));
        ok = false;
        break;
      }
    }
    if (!ok) continue;
    if (substitute(reg.retType(jvp), ren) != liftTy(reg.retType(base)))
      bad("return type of " + reg.nameOf(jvp) + " is " +
          tyToString(reg.retType(jvp)) + ", expected " +
          tyToString(liftTy(reg.retType(base))));
  }

  return diags;
}

}  // namespace gradir
