#include "gradir/simplify.hpp"

#include <optional>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <variant>
#include <vector>

namespace gradir {

namespace {

// Visits every variable *use* position in one expression: operands, call
// arguments, accumulation targets, and region seeds. Binders (loop index
// vars, accumulator vars) and nested block interiors are not visited.
// Works on both const and mutable expressions.
template <class ExprT, class F>
void eachOperand(ExprT& e, F&& f) {
  if (auto* a = std::get_if<EArray>(&e)) {
    for (auto& v : a->elems) f(v);
  } else if (auto* p = std::get_if<EPair>(&e)) {
    f(p->first);
    f(p->second);
  } else if (auto* u = std::get_if<EUnary>(&e)) {
    f(u->x);
  } else if (auto* b = std::get_if<EBinary>(&e)) {
    f(b->lhs);
    f(b->rhs);
  } else if (auto* s = std::get_if<ESelect>(&e)) {
    f(s->cond);
    f(s->then);
    f(s->otherwise);
  } else if (auto* ac = std::get_if<EAccum>(&e)) {
    f(ac->target);
    f(ac->value);
  } else if (auto* ix = std::get_if<EIndex>(&e)) {
    f(ix->arr);
    f(ix->idx);
  } else if (auto* fs = std::get_if<EFst>(&e)) {
    f(fs->pair);
  } else if (auto* sn = std::get_if<ESnd>(&e)) {
    f(sn->pair);
  } else if (auto* ri = std::get_if<ERefIndex>(&e)) {
    f(ri->arr);
    f(ri->idx);
  } else if (auto* rf = std::get_if<ERefFst>(&e)) {
    f(rf->pair);
  } else if (auto* rs = std::get_if<ERefSnd>(&e)) {
    f(rs->pair);
  } else if (auto* c = std::get_if<ECall>(&e)) {
    for (auto& v : c->args) f(v);
  } else if (auto* ab = std::get_if<EAccumBlock>(&e)) {
    f(ab->from);
  }
  // EFor has no direct operands; leaf forms have none.
}

// Visits every variable use in a whole block, nested blocks included.
template <class F>
void eachUseDeep(const Block& b, F&& f) {
  for (const Let& l : b.lets) {
    eachOperand(l.expr, f);
    if (auto* fo = std::get_if<EFor>(&l.expr)) eachUseDeep(*fo->body, f);
    if (auto* ab = std::get_if<EAccumBlock>(&l.expr)) eachUseDeep(*ab->body, f);
  }
  if (b.result != kNoVar) f(b.result);
}

// Real-content-only structure: accumulating into it is fully described by
// the sum of accumulated values (no Bool/Fin payload carried by the seed).
bool realOnly(const Ty& t) {
  switch (t.tag()) {
    case Ty::Tag::Real:
    case Ty::Tag::Unit:
      return true;
    case Ty::Tag::Pair:
      return realOnly(t.first()) && realOnly(t.second());
    case Ty::Tag::Arr:
      return realOnly(t.elem());
    default:
      return false;
  }
}

// ---------------------------------------------------------------------------
// Pass 1: construct/destruct cancellation, identity/zero folding, dead
// accumulation erasure, and accumulation-region elision. One forward walk;
// folded variables are redirected through a substitution map.

struct Folder {
  Folder(const Registry& r, FuncDef& d) : reg(r), def(d) {}

  const Registry& reg;
  FuncDef& def;  // for fresh variable allocation
  bool changed = false;

  std::unordered_map<VarId, VarId> subst;
  // Shallow definitions for pattern matching (constructor-like forms only).
  std::unordered_map<VarId, Expr> defOf;

  VarId resolve(VarId v) const {
    auto it = subst.find(v);
    while (it != subst.end()) {
      v = it->second;
      it = subst.find(v);
    }
    return v;
  }

  const Expr* defExpr(VarId v) const {
    auto it = defOf.find(resolve(v));
    return it == defOf.end() ? nullptr : &it->second;
  }

  bool litConst(VarId v, double& out) const {
    if (const Expr* e = defExpr(v))
      if (auto* c = std::get_if<EConst>(e)) {
        out = c->value;
        return true;
      }
    return false;
  }
  // Matches +0.0 and -0.0. Folding on this basis may normalize a zero's
  // sign and short-circuits NaN/Inf propagation; finite results agree.
  bool isZero(VarId v) const {
    double c;
    return litConst(v, c) && c == 0.0;
  }
  bool isOne(VarId v) const {
    double c;
    return litConst(v, c) && c == 1.0;
  }

  // A fold that replaces the whole let with an existing variable.
  std::optional<VarId> tryForward(const Let& l) const {
    if (auto* fs = std::get_if<EFst>(&l.expr)) {
      if (const Expr* d = defExpr(fs->pair))
        if (auto* p = std::get_if<EPair>(d)) return p->first;
    } else if (auto* sn = std::get_if<ESnd>(&l.expr)) {
      if (const Expr* d = defExpr(sn->pair))
        if (auto* p = std::get_if<EPair>(d)) return p->second;
    } else if (auto* ix = std::get_if<EIndex>(&l.expr)) {
      const Expr* da = defExpr(ix->arr);
      const Expr* di = defExpr(ix->idx);
      if (da && di)
        if (auto* arr = std::get_if<EArray>(da))
          if (auto* fin = std::get_if<EFin>(di))
            if (fin->value < arr->elems.size()) return arr->elems[fin->value];
    } else if (auto* u = std::get_if<EUnary>(&l.expr)) {
      if (u->op == UnaryOp::Neg) {
        if (const Expr* d = defExpr(u->x))
          if (auto* iu = std::get_if<EUnary>(d))
            if (iu->op == UnaryOp::Neg) return iu->x;
        if (isZero(u->x)) return u->x;
      }
    } else if (auto* b = std::get_if<EBinary>(&l.expr)) {
      switch (b->op) {
        case BinaryOp::Add:
          if (isZero(b->lhs)) return b->rhs;
          if (isZero(b->rhs)) return b->lhs;
          break;
        case BinaryOp::Sub:
          if (isZero(b->rhs)) return b->lhs;
          break;
        case BinaryOp::Mul:
          if (isOne(b->lhs)) return b->rhs;
          if (isOne(b->rhs)) return b->lhs;
          if (isZero(b->lhs)) return b->lhs;
          if (isZero(b->rhs)) return b->rhs;
          break;
        case BinaryOp::Div:
          if (isOne(b->rhs)) return b->lhs;
          if (isZero(b->lhs)) return b->lhs;
          break;
        default:
          break;
      }
    } else if (auto* s = std::get_if<ESelect>(&l.expr)) {
      if (s->then == s->otherwise) return s->then;
      if (const Expr* d = defExpr(s->cond)) {
        if (std::holds_alternative<ETrue>(*d)) return s->then;
        if (std::holds_alternative<EFalse>(*d)) return s->otherwise;
      }
    }
    return std::nullopt;
  }

  // A fold that rewrites the right-hand side in place.
  void tryRewrite(Let& l) {
    if (auto* b = std::get_if<EBinary>(&l.expr)) {
      if (b->op == BinaryOp::Sub && isZero(b->lhs)) {
        l.expr = EUnary{UnaryOp::Neg, b->rhs};
        changed = true;
      }
    } else if (auto* ac = std::get_if<EAccum>(&l.expr)) {
      if (isZero(ac->value)) {
        l.expr = EUnit{};
        changed = true;
      }
    }
  }

  bool matchable(const Expr& e) const {
    return std::holds_alternative<EConst>(e) ||
           std::holds_alternative<ETrue>(e) ||
           std::holds_alternative<EFalse>(e) ||
           std::holds_alternative<EFin>(e) ||
           std::holds_alternative<EPair>(e) ||
           std::holds_alternative<EArray>(e) ||
           std::holds_alternative<EUnary>(e);
  }

  // Accumulation-region elision. `l` is the region let (result type
  // (inner, body)); `body` is its already-rewritten body. When the region's
  // accumulator is used at most once — by a single whole-accumulator
  // top-level accumulation — the region adds no sequencing and its result
  // is directly expressible: the accumulator's final value is the sum of
  // accumulated values (the seed only supplies structure). On success the
  // body is spliced into `out` and the region let becomes a pair
  // construction; returns true.
  bool tryElide(Block& out, const Let& l, const EAccumBlock& ab, Block& body) {
    if (!l.ty.is(Ty::Tag::Pair)) return false;
    const Ty& inner = l.ty.first();

    size_t uses = 0;
    eachUseDeep(body, [&](const VarId& v) {
      if (v == ab.accVar) ++uses;
    });
    std::vector<size_t> accLets;
    for (size_t i = 0; i < body.lets.size(); ++i)
      if (auto* a = std::get_if<EAccum>(&body.lets[i].expr))
        if (a->target == ab.accVar) accLets.push_back(i);

    VarId finalVal = kNoVar;
    if (uses == 1 && accLets.size() == 1 && realOnly(inner)) {
      // Single unconditional whole-accumulator write: final value is the
      // written value. The write let stays behind as a unit (its variable
      // may be referenced); dead-code elimination removes it.
      auto* a = std::get_if<EAccum>(&body.lets[accLets[0]].expr);
      finalVal = a->value;
      body.lets[accLets[0]].expr = EUnit{};
    } else if (uses == 0) {
      // Untouched accumulator: final value is the zero of the seed's
      // structure. Only the scalar case is worth materializing.
      if (isZero(ab.from)) {
        finalVal = ab.from;
      } else if (inner.is(Ty::Tag::Real)) {
        VarId z = def.varCount++;
        out.lets.push_back(Let{z, Ty::real(), EConst{0.0}});
        defOf.emplace(z, EConst{0.0});
        finalVal = z;
      } else {
        return false;
      }
    } else {
      return false;
    }

    for (Let& bl : body.lets) out.lets.push_back(std::move(bl));
    Expr pairExpr = EPair{finalVal, body.result};
    defOf.emplace(l.var, pairExpr);
    out.lets.push_back(Let{l.var, l.ty, std::move(pairExpr)});
    changed = true;
    return true;
  }

  Block rewrite(const Block& in) {
    Block out;
    for (const Let& l0 : in.lets) {
      Let l = l0;
      eachOperand(l.expr, [&](VarId& v) {
        VarId r = resolve(v);
        if (r != v) {
          v = r;
          changed = true;
        }
      });
      if (auto* fo = std::get_if<EFor>(&l.expr)) {
        fo->body = std::make_shared<const Block>(rewrite(*fo->body));
      } else if (auto* ab = std::get_if<EAccumBlock>(&l.expr)) {
        Block nb = rewrite(*ab->body);
        if (tryElide(out, l, *ab, nb)) continue;
        ab->body = std::make_shared<const Block>(std::move(nb));
      }
      if (std::optional<VarId> fwd = tryForward(l)) {
        subst[l.var] = *fwd;
        changed = true;
        continue;
      }
      tryRewrite(l);
      if (matchable(l.expr)) defOf.emplace(l.var, l.expr);
      out.lets.push_back(std::move(l));
    }
    VarId r = resolve(in.result);
    if (r != in.result) changed = true;
    out.result = r;
    retargetUnitResult(out);
    return out;
  }

  // A block returning a freshly built unit can return any other unit-typed
  // binding instead (all unit values are equal); retargeting to the last
  // effectful one lets DCE drop the placeholder let. Projections are not
  // eligible: tape reads must stay free-standing.
  void retargetUnitResult(Block& b) {
    const Let* res = nullptr;
    for (const Let& l : b.lets)
      if (l.var == b.result) {
        res = &l;
        break;
      }
    if (!res || !std::holds_alternative<EUnit>(res->expr)) return;
    VarId pick = kNoVar;
    for (const Let& l : b.lets) {
      if (l.ty != Ty::unit() || l.var == b.result) continue;
      if (std::holds_alternative<EUnit>(l.expr) ||
          std::holds_alternative<EFst>(l.expr) ||
          std::holds_alternative<ESnd>(l.expr) ||
          std::holds_alternative<EIndex>(l.expr))
        continue;
      pick = l.var;
    }
    if (pick == kNoVar) return;
    b.result = pick;
    changed = true;
  }
};

// ---------------------------------------------------------------------------
// Pass 2: dead code elimination with effect analysis. A let survives when
// its variable is needed or when dropping it would lose an observable
// effect: an accumulation into a live accumulator, a call to an opaque
// routine, or a call that writes through an accumulator argument.

struct Dce {
  explicit Dce(const Registry& r) : reg(r) {}

  const Registry& reg;
  bool changed = false;

  std::unordered_map<VarId, Ty> tyOf;
  std::unordered_map<VarId, VarId> refParent;

  void collect(const Block& b) {
    for (const Let& l : b.lets) {
      tyOf.emplace(l.var, l.ty);
      if (auto* rf = std::get_if<ERefFst>(&l.expr)) refParent[l.var] = rf->pair;
      if (auto* rs = std::get_if<ERefSnd>(&l.expr)) refParent[l.var] = rs->pair;
      if (auto* ri = std::get_if<ERefIndex>(&l.expr)) refParent[l.var] = ri->arr;
      if (auto* fo = std::get_if<EFor>(&l.expr)) {
        tyOf.emplace(fo->indexVar, fo->indexTy);
        collect(*fo->body);
      } else if (auto* ab = std::get_if<EAccumBlock>(&l.expr)) {
        auto it = tyOf.find(ab->from);
        if (it != tyOf.end()) tyOf.emplace(ab->accVar, Ty::acc(it->second));
        collect(*ab->body);
      }
    }
  }

  VarId root(VarId v) const {
    auto it = refParent.find(v);
    while (it != refParent.end()) {
      v = it->second;
      it = refParent.find(v);
    }
    return v;
  }

  bool accArg(VarId v) const {
    auto it = tyOf.find(v);
    return it != tyOf.end() && it->second.containsAcc();
  }

  // True when the block writes an accumulator rooted outside `bound` or
  // performs an opaque call; `bound` grows with every binder seen.
  bool escapes(const Block& b, std::unordered_set<VarId>& bound) const {
    bool eff = false;
    for (const Let& l : b.lets) {
      if (auto* a = std::get_if<EAccum>(&l.expr)) {
        if (!bound.count(root(a->target))) eff = true;
      } else if (auto* c = std::get_if<ECall>(&l.expr)) {
        if (reg.isOpaque(c->callee)) {
          eff = true;
        } else {
          for (VarId arg : c->args)
            if (accArg(arg) && !bound.count(root(arg))) eff = true;
        }
      } else if (auto* fo = std::get_if<EFor>(&l.expr)) {
        bound.insert(fo->indexVar);
        if (escapes(*fo->body, bound)) eff = true;
      } else if (auto* ab = std::get_if<EAccumBlock>(&l.expr)) {
        bound.insert(ab->accVar);
        if (escapes(*ab->body, bound)) eff = true;
      }
      bound.insert(l.var);
    }
    return eff;
  }

  bool effectful(const Let& l) const {
    if (std::holds_alternative<EAccum>(l.expr)) return true;
    if (auto* c = std::get_if<ECall>(&l.expr)) {
      if (reg.isOpaque(c->callee)) return true;
      for (VarId arg : c->args)
        if (accArg(arg)) return true;
      return false;
    }
    if (auto* fo = std::get_if<EFor>(&l.expr)) {
      std::unordered_set<VarId> bound{fo->indexVar};
      return escapes(*fo->body, bound);
    }
    if (auto* ab = std::get_if<EAccumBlock>(&l.expr)) {
      std::unordered_set<VarId> bound{ab->accVar};
      return escapes(*ab->body, bound);
    }
    return false;
  }

  void markNeeded(const Let& l, std::unordered_set<VarId>& needed) const {
    eachOperand(l.expr, [&](const VarId& v) { needed.insert(v); });
    auto deep = [&](const Block& b) {
      eachUseDeep(b, [&](const VarId& v) { needed.insert(v); });
    };
    if (auto* fo = std::get_if<EFor>(&l.expr)) deep(*fo->body);
    if (auto* ab = std::get_if<EAccumBlock>(&l.expr)) deep(*ab->body);
  }

  Block run(const Block& in) {
    Block b = in;
    for (Let& l : b.lets) {
      if (auto* fo = std::get_if<EFor>(&l.expr)) {
        fo->body = std::make_shared<const Block>(run(*fo->body));
      } else if (auto* ab = std::get_if<EAccumBlock>(&l.expr)) {
        ab->body = std::make_shared<const Block>(run(*ab->body));
      }
    }
    std::unordered_set<VarId> needed;
    if (b.result != kNoVar) needed.insert(b.result);
    std::vector<char> keep(b.lets.size(), 0);
    for (size_t i = b.lets.size(); i-- > 0;) {
      const Let& l = b.lets[i];
      if (needed.count(l.var) || effectful(l)) {
        keep[i] = 1;
        markNeeded(l, needed);
      }
    }
    Block out;
    out.result = b.result;
    for (size_t i = 0; i < b.lets.size(); ++i)
      if (keep[i]) out.lets.push_back(std::move(b.lets[i]));
    if (out.lets.size() != b.lets.size()) changed = true;
    return out;
  }
};

}  // namespace

FuncDef simplify(const FuncDef& defIn, const Registry& reg) {
  FuncDef def = canonicalize(defIn);
  for (int iter = 0; iter < 32; ++iter) {
    Folder fold(reg, def);
    def.body = fold.rewrite(def.body);
    Dce dce(reg);
    for (const Param& p : def.params) dce.tyOf.emplace(p.var, p.ty);
    dce.collect(def.body);
    def.body = dce.run(def.body);
    if (!fold.changed && !dce.changed) break;
  }
  return canonicalize(def);
}

}  // namespace gradir
