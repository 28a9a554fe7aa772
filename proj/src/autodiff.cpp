#include "gradir/autodiff.hpp"

#include <functional>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "gradir/simplify.hpp"

namespace gradir {
namespace {

// ---------------------------------------------------------------------------
// Small helpers.

std::string uniqueName(const Registry& reg, const std::string& base) {
  if (!reg.byName(base)) return base;
  for (int i = 2;; ++i) {
    std::string cand = base + "_" + std::to_string(i);
    if (!reg.byName(cand)) return cand;
  }
}

std::string stripJvpPrefix(const std::string& n) {
  if (n.rfind("jvp_", 0) == 0 && n.size() > 4) return n.substr(4);
  return n;
}

Ty dualTy() { return Ty::pair(Ty::real(), Ty::real()); }

bool isDual(const Ty& t) {
  return t.is(Ty::Tag::Pair) && t.first().is(Ty::Tag::Real) &&
         t.second().is(Ty::Tag::Real);
}

// Collapse the paired-Real representation back to scalars. Exact on images
// of liftTy, where a (Real, Real) pair can only be such a paired scalar.
Ty unlift(const Ty& t) {
  if (isDual(t)) return Ty::real();
  switch (t.tag()) {
    case Ty::Tag::Pair:
      return Ty::pair(unlift(t.first()), unlift(t.second()));
    case Ty::Tag::Arr:
      return Ty::arr(t.index(), unlift(t.elem()));
    case Ty::Tag::Acc:
      return Ty::acc(unlift(t.inner()));
    default:
      return t;
  }
}

bool hasReal(const Ty& t) { return t.contains(Ty::Tag::Real); }

// Visit every variable-use slot of an expression (not binders, and not the
// interiors of nested blocks).
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
  // EUnit/ETrue/EFalse/EConst/EFin/EFor: no direct operands.
}

// Visit every variable use in a block, recursing into nested bodies and
// including block results.
template <class F>
void eachUseDeep(const Block& b, F&& f) {
  for (const Let& l : b.lets) {
    eachOperand(l.expr, f);
    if (auto* fo = std::get_if<EFor>(&l.expr)) eachUseDeep(*fo->body, f);
    if (auto* ab = std::get_if<EAccumBlock>(&l.expr)) eachUseDeep(*ab->body, f);
  }
  if (b.result != kNoVar) f(b.result);
}

// ---------------------------------------------------------------------------
// Forward-derivative lift.

struct Lifter {
  Registry& reg;
  const std::function<FuncId(FuncId)>& liftCallee;
  FuncDef src;  // by value: the registry may grow while we work
  uint32_t next = 0;
  // (var, component) -> in-scope projection var, so each half of a paired
  // value is projected at most once per block.
  std::map<std::pair<VarId, int>, VarId> projCache;

  Lifter(Registry& r, const std::function<FuncId(FuncId)>& lc, FuncDef s)
      : reg(r), liftCallee(lc), src(std::move(s)) {}

  VarId fresh() { return next++; }

  VarId emit(Block& b, Ty ty, Expr e) {
    VarId v = fresh();
    b.lets.push_back(Let{v, std::move(ty), std::move(e)});
    return v;
  }

  VarId proj(Block& b, VarId dual, int side) {
    auto it = projCache.find({dual, side});
    if (it != projCache.end()) return it->second;
    VarId v = side == 0 ? emit(b, Ty::real(), EFst{dual})
                        : emit(b, Ty::real(), ESnd{dual});
    projCache[{dual, side}] = v;
    return v;
  }

  void bindDual(Block& b, VarId v, VarId p, VarId t) {
    b.lets.push_back(Let{v, dualTy(), EPair{p, t}});
    projCache[{v, 0}] = p;
    projCache[{v, 1}] = t;
  }

  FuncDef run() {
    FuncDef out{0, src.name, src.generics, {}, liftTy(src.ret), {}, 0,
                src.varNames};
    for (const Param& p : src.params) out.params.push_back({p.var, liftTy(p.ty)});
    next = src.varCount;
    out.body = liftBlock(src.body);
    out.varCount = next;
    return out;
  }

  Block liftBlock(const Block& b) {
    auto saved = projCache;
    Block nb;
    nb.result = b.result;
    for (const Let& l : b.lets) liftLet(nb, l);
    projCache = std::move(saved);
    return nb;
  }

  void liftLet(Block& nb, const Let& l) {
    const Ty lty = liftTy(l.ty);
    if (auto* c = std::get_if<EConst>(&l.expr)) {
      VarId p = emit(nb, Ty::real(), EConst{c->value});
      VarId t = emit(nb, Ty::real(), EConst{0.0});
      bindDual(nb, l.var, p, t);
      return;
    }
    if (auto* u = std::get_if<EUnary>(&l.expr)) {
      switch (u->op) {
        case UnaryOp::Not:
          nb.lets.push_back(Let{l.var, lty, l.expr});
          return;
        case UnaryOp::Neg: {
          VarId xp = proj(nb, u->x, 0), xt = proj(nb, u->x, 1);
          VarId p = emit(nb, Ty::real(), EUnary{UnaryOp::Neg, xp});
          VarId t = emit(nb, Ty::real(), EUnary{UnaryOp::Neg, xt});
          bindDual(nb, l.var, p, t);
          return;
        }
        case UnaryOp::Abs: {
          VarId xp = proj(nb, u->x, 0), xt = proj(nb, u->x, 1);
          VarId p = emit(nb, Ty::real(), EUnary{UnaryOp::Abs, xp});
          VarId sg = emit(nb, Ty::real(), EUnary{UnaryOp::Sgn, xp});
          VarId t = emit(nb, Ty::real(), EBinary{BinaryOp::Mul, xt, sg});
          bindDual(nb, l.var, p, t);
          return;
        }
        case UnaryOp::Sgn:
        case UnaryOp::Ceil:
        case UnaryOp::Floor:
        case UnaryOp::Trunc: {
          VarId xp = proj(nb, u->x, 0);
          VarId p = emit(nb, Ty::real(), EUnary{u->op, xp});
          VarId t = emit(nb, Ty::real(), EConst{0.0});
          bindDual(nb, l.var, p, t);
          return;
        }
        case UnaryOp::Sqrt: {
          VarId xp = proj(nb, u->x, 0), xt = proj(nb, u->x, 1);
          VarId r = emit(nb, Ty::real(), EUnary{UnaryOp::Sqrt, xp});
          VarId d = emit(nb, Ty::real(), EBinary{BinaryOp::Add, r, r});
          VarId t = emit(nb, Ty::real(), EBinary{BinaryOp::Div, xt, d});
          bindDual(nb, l.var, r, t);
          return;
        }
      }
    }
    if (auto* b = std::get_if<EBinary>(&l.expr)) {
      if (isArith(b->op)) {
        VarId xp = proj(nb, b->lhs, 0), xt = proj(nb, b->lhs, 1);
        VarId yp = proj(nb, b->rhs, 0), yt = proj(nb, b->rhs, 1);
        switch (b->op) {
          case BinaryOp::Add: {
            VarId p = emit(nb, Ty::real(), EBinary{BinaryOp::Add, xp, yp});
            VarId t = emit(nb, Ty::real(), EBinary{BinaryOp::Add, xt, yt});
            bindDual(nb, l.var, p, t);
            return;
          }
          case BinaryOp::Sub: {
            VarId p = emit(nb, Ty::real(), EBinary{BinaryOp::Sub, xp, yp});
            VarId t = emit(nb, Ty::real(), EBinary{BinaryOp::Sub, xt, yt});
            bindDual(nb, l.var, p, t);
            return;
          }
          case BinaryOp::Mul: {
            VarId p = emit(nb, Ty::real(), EBinary{BinaryOp::Mul, xp, yp});
            VarId m1 = emit(nb, Ty::real(), EBinary{BinaryOp::Mul, xt, yp});
            VarId m2 = emit(nb, Ty::real(), EBinary{BinaryOp::Mul, yt, xp});
            VarId t = emit(nb, Ty::real(), EBinary{BinaryOp::Add, m1, m2});
            bindDual(nb, l.var, p, t);
            return;
          }
          default: {  // Div
            VarId p = emit(nb, Ty::real(), EBinary{BinaryOp::Div, xp, yp});
            VarId m1 = emit(nb, Ty::real(), EBinary{BinaryOp::Mul, xt, yp});
            VarId m2 = emit(nb, Ty::real(), EBinary{BinaryOp::Mul, yt, xp});
            VarId num = emit(nb, Ty::real(), EBinary{BinaryOp::Sub, m1, m2});
            VarId den = emit(nb, Ty::real(), EBinary{BinaryOp::Mul, yp, yp});
            VarId t = emit(nb, Ty::real(), EBinary{BinaryOp::Div, num, den});
            bindDual(nb, l.var, p, t);
            return;
          }
        }
      }
      if (isCompare(b->op)) {
        VarId xp = proj(nb, b->lhs, 0);
        VarId yp = proj(nb, b->rhs, 0);
        nb.lets.push_back(Let{l.var, Ty::boolean(), EBinary{b->op, xp, yp}});
        return;
      }
      nb.lets.push_back(Let{l.var, lty, l.expr});  // logic: unchanged
      return;
    }
    if (auto* c = std::get_if<ECall>(&l.expr)) {
      std::vector<Ty> targs;
      for (const Ty& t : c->typeArgs) targs.push_back(liftTy(t));
      FuncId callee;
      if (reg.isOpaque(c->callee)) {
        auto it = reg.customJvp.find(c->callee);
        if (it == reg.customJvp.end())
          fail(ErrCode::MissingDerivative,
               "no derivative rule registered for opaque function '" +
                   reg.nameOf(c->callee) + "'",
               src.name);
        callee = it->second;  // called directly, never itself lifted
      } else {
        callee = liftCallee(c->callee);
      }
      nb.lets.push_back(
          Let{l.var, lty, ECall{callee, std::move(targs), c->args}});
      return;
    }
    if (auto* f = std::get_if<EFor>(&l.expr)) {
      Block body = liftBlock(*f->body);
      nb.lets.push_back(Let{l.var, lty,
                            EFor{f->indexTy, f->indexVar,
                                 std::make_shared<const Block>(std::move(body))}});
      return;
    }
    if (auto* a = std::get_if<EAccumBlock>(&l.expr)) {
      Block body = liftBlock(*a->body);
      nb.lets.push_back(
          Let{l.var, lty,
              EAccumBlock{a->accVar, a->from,
                          std::make_shared<const Block>(std::move(body))}});
      return;
    }
    // Everything else is structural or discrete: unit, booleans, index
    // literals, arrays, pairs, projections, selects, accumulation, refs.
    nb.lets.push_back(Let{l.var, lty, l.expr});
  }
};

// ---------------------------------------------------------------------------
// Transposition.

constexpr int kCollNone = 0;
constexpr int kCollFst = 1;  // value half survives scalarization
constexpr int kCollSnd = 2;  // perturbation/adjoint half survives

struct VarMeta {
  Ty after;
  int coll;
};

struct PassMeta {
  std::unordered_map<VarId, VarMeta> vars;
  void put(VarId v, Ty after, int coll) {
    vars.insert_or_assign(v, VarMeta{std::move(after), coll});
  }
  const VarMeta* find(VarId v) const {
    auto it = vars.find(v);
    return it == vars.end() ? nullptr : &it->second;
  }
};

struct TapeEntry {
  VarId var;    // value var in the value pass; bound to the same id in bwd
  Ty now;       // type as constructed
  Ty after;     // type after scalarization
  bool region;  // bwd wraps the continuation in an adjoint region seeded here
  int coll;     // collapse slot of the bwd value binding
  int adjColl;  // collapse slot of the adjoint value extracted from its region
  // Pruned entries carry no chain slot: the derivative pass replays the
  // binding instead (a leaf expression, or a shape-only zero for seeds).
  bool slot = true;
  bool rebind = false;
  Expr rebindExpr = EUnit{};
};

struct BlockPlan;

struct LetPlan {
  enum Kind {
    Taped,      // one entry; region per entry.region; maybe a propagation
    Recompute,  // projection recomputed in bwd; ref-alias adjoint
    ParamProj,  // value-only-taped projection of a Real-carrying param
    RefLet,     // accumulator projection: bwd projects the adjoint value
    AccumWrite, // x += y: bwd accumulates the adjoint value of x into y's
    CallSplit,  // two entries (result, callee tape); bwd calls the callee bwd
    Loop,       // two entries (element array, tape array); bwd replays
    Region,     // two entries (decayed pair, inner tape); bwd inverts inner
  } kind = Taped;
  bool propagate = false;
  VarId aux = kNoVar;  // CallSplit / Loop / Region: the secondary entry var
  SplitPair split{};
  std::vector<Ty> tyArgs;
  std::vector<Ty> calleeParams;  // substituted source-callee param types
  std::unique_ptr<BlockPlan> inner;
  size_t entryBegin = 0;
  size_t entryCount = 0;
};

struct BlockPlan {
  std::vector<LetPlan> lets;
  std::vector<TapeEntry> entries;
  size_t preEntries = 0;  // leading value-only param entries (root only)
  std::vector<Ty> sufNow, sufAfter;  // chain suffix types, size entries+1
};

void finalizeChain(BlockPlan& p) {
  size_t n = p.entries.size();
  p.sufNow.assign(n + 1, Ty::unit());
  p.sufAfter.assign(n + 1, Ty::unit());
  for (size_t i = n; i-- > 0;) {
    if (!p.entries[i].slot) {
      p.sufNow[i] = p.sufNow[i + 1];
      p.sufAfter[i] = p.sufAfter[i + 1];
      continue;
    }
    p.sufNow[i] = Ty::pair(p.entries[i].now, p.sufNow[i + 1]);
    p.sufAfter[i] = Ty::pair(p.entries[i].after, p.sufAfter[i + 1]);
  }
}

bool anySlot(const BlockPlan& p) {
  for (const TapeEntry& e : p.entries)
    if (e.slot) return true;
  return false;
}

// Leaf expressions can be replayed in the derivative pass instead of taped.
bool isLeafExpr(const Expr& x) {
  return std::holds_alternative<EUnit>(x) || std::holds_alternative<ETrue>(x) ||
         std::holds_alternative<EFalse>(x) ||
         std::holds_alternative<EConst>(x) || std::holds_alternative<EFin>(x);
}

struct Transposer {
  Registry& reg;
  FuncDef src;  // by value: the registry may grow while we work
  std::function<SplitPair(FuncId)> resolve;
  bool prune = false;  // optimized pipeline: tape only what bwd reads

  FuncDef fwd{0, "", {}, {}, Ty::unit(), {}, 0, {}};
  FuncDef bwd{0, "", {}, {}, Ty::unit(), {}, 0, {}};
  uint32_t nextF = 0, nextB = 0;
  PassMeta metaF, metaB;

  std::unordered_map<VarId, Ty> ty;        // source var -> source type
  std::unordered_map<VarId, bool> tang;    // Real source vars: perturbation?
  std::unordered_map<VarId, int> adjCollSrc;  // adjoint collapse per source var
  std::unordered_map<VarId, Ty> nowF;      // value-pass var -> constructed type
  std::unordered_map<VarId, VarId> adjAcc;     // source var -> bwd adjoint acc
  std::unordered_map<VarId, VarId> accAdjVal;  // source acc var -> adjoint value
  std::unordered_set<VarId> realParams;  // params whose value bwd lacks
  std::set<VarId> matParams;             // of those, ones bwd must read
  std::unordered_set<VarId> zconst;      // lets bound to the literal 0.0
  std::unordered_set<VarId> bwdReads;    // source vars whose value bwd reads

  Transposer(Registry& r, FuncDef s, std::function<SplitPair(FuncId)> res)
      : reg(r), src(std::move(s)), resolve(std::move(res)) {}

  bool isT(VarId v) const {
    auto it = tang.find(v);
    return it != tang.end() && it->second;
  }

  [[noreturn]] void nonlinear(const std::string& what) {
    fail(ErrCode::NonlinearTangentUse,
         what + " is not linear in the perturbation", src.name);
  }

  void emitF(Block& b, VarId v, Ty now, Expr e, Ty after, int coll) {
    nowF.insert_or_assign(v, now);
    metaF.put(v, std::move(after), coll);
    b.lets.push_back(Let{v, std::move(now), std::move(e)});
  }

  void emitB(std::vector<Let>& out, VarId v, Ty now, Expr e, Ty after,
             int coll) {
    metaB.put(v, std::move(after), coll);
    out.push_back(Let{v, std::move(now), std::move(e)});
  }

  const Ty& tyOf(VarId v) const { return ty.at(v); }

  static int primalColl(const Ty& sem) { return isDual(sem) ? kCollFst : kCollNone; }

  // Record the bwd value of Real-carrying param `p` as needed: it must be
  // carried on the tape because the derivative pass has only its adjoint.
  void needValue(VarId p) {
    if (realParams.count(p)) matParams.insert(p);
  }

  // Over-approximate the set of source vars whose value the derivative pass
  // can read: propagation coefficients (the kept side of a product, the
  // divisor), recomputed projections and their operands, branch selectors,
  // indices, and arguments forwarded to callee derivative passes.
  void computeReads(const Block& b) {
    for (const Let& l : b.lets) {
      if (const auto* bb = std::get_if<EBinary>(&l.expr)) {
        if (bb->op == BinaryOp::Mul) {
          bwdReads.insert(bb->lhs);
          bwdReads.insert(bb->rhs);
        } else if (bb->op == BinaryOp::Div) {
          bwdReads.insert(bb->rhs);
        }
      } else if (const auto* s = std::get_if<ESelect>(&l.expr)) {
        bwdReads.insert(s->cond);
      } else if (const auto* pf = std::get_if<EFst>(&l.expr)) {
        bwdReads.insert(pf->pair);
      } else if (const auto* ps = std::get_if<ESnd>(&l.expr)) {
        bwdReads.insert(ps->pair);
      } else if (const auto* ix = std::get_if<EIndex>(&l.expr)) {
        bwdReads.insert(ix->arr);
        bwdReads.insert(ix->idx);
      } else if (const auto* ri = std::get_if<ERefIndex>(&l.expr)) {
        bwdReads.insert(ri->idx);
      } else if (const auto* c = std::get_if<ECall>(&l.expr)) {
        for (VarId a : c->args) bwdReads.insert(a);
      } else if (const auto* f = std::get_if<EFor>(&l.expr)) {
        computeReads(*f->body);
      } else if (const auto* ab = std::get_if<EAccumBlock>(&l.expr)) {
        computeReads(*ab->body);
      }
    }
  }

  // Drop the chain slot of an entry whose value the derivative pass can
  // reconstruct: zeroed perturbation bindings and leaf expressions replay
  // verbatim, and values that are only region seeds get a shape-only zero.
  void pruneEntry(TapeEntry& e, const Expr* srcExpr) {
    if (!prune) return;
    if (e.now == Ty::real() && isT(e.var)) {
      e.slot = false;
      e.rebind = true;
      e.rebindExpr = EConst{0.0};
      return;
    }
    if (srcExpr && isLeafExpr(*srcExpr)) {
      e.slot = false;
      e.rebind = true;
      e.rebindExpr = *srcExpr;
      return;
    }
    if (!bwdReads.count(e.var)) e.slot = false;
  }

  // Bind `v` to a zero value of shape `now` in the derivative pass. Region
  // seeds only provide shape (content always starts at zero), so a rebuilt
  // zero stands in for the taped value.
  void zeroValueAs(VarId v, const Ty& now, const Ty& after, int coll,
                   std::vector<Let>& out) {
    switch (now.tag()) {
      case Ty::Tag::Real:
        emitB(out, v, Ty::real(), EConst{0.0}, Ty::real(), kCollNone);
        return;
      case Ty::Tag::Bool:
        emitB(out, v, now, EFalse{}, now, kCollNone);
        return;
      case Ty::Tag::Fin:
        emitB(out, v, now, EFin{0}, now, kCollNone);
        return;
      case Ty::Tag::Pair: {
        Ty aF = after.is(Ty::Tag::Pair) ? after.first() : after;
        Ty aS = after.is(Ty::Tag::Pair) ? after.second() : after;
        VarId a = nextB++;
        VarId b2 = nextB++;
        zeroValueAs(a, now.first(), aF, kCollNone, out);
        zeroValueAs(b2, now.second(), aS, kCollNone, out);
        emitB(out, v, now, EPair{a, b2}, after, coll);
        return;
      }
      case Ty::Tag::Arr: {
        VarId iv = nextB++;
        metaB.put(iv, now.index(), kCollNone);
        VarId ev = nextB++;
        Block bb;
        zeroValueAs(ev, now.elem(),
                    after.is(Ty::Tag::Arr) ? after.elem() : after, kCollNone,
                    bb.lets);
        bb.result = ev;
        emitB(out, v, now,
              EFor{now.index(), iv, std::make_shared<const Block>(std::move(bb))},
              after, coll);
        return;
      }
      default:  // Unit (accumulators and generics never appear on tapes)
        emitB(out, v, now, EUnit{}, after, coll);
        return;
    }
  }

  void run() {
    fwd.generics = src.generics;
    fwd.params = src.params;
    fwd.varNames = src.varNames;
    nextF = src.varCount;

    for (const Param& p : src.params) {
      ty.insert({p.var, p.ty});
      adjCollSrc[p.var] = isDual(p.ty) ? kCollSnd : kCollNone;
      if (p.ty == Ty::real()) tang[p.var] = false;
      metaF.put(p.var, unlift(p.ty), primalColl(p.ty));
      if (!p.ty.is(Ty::Tag::Acc) && hasReal(p.ty)) realParams.insert(p.var);
    }

    if (prune) computeReads(src.body);

    BlockPlan plan;
    Block fb = fwdBlock(src.body, plan);

    // Param values the derivative pass reads are prepended to the tape.
    if (!matParams.empty()) {
      std::vector<TapeEntry> pre;
      for (VarId p : matParams) {
        const Ty& pt = tyOf(p);
        pre.push_back(
            TapeEntry{p, pt, unlift(pt), false, primalColl(pt), kCollNone});
      }
      plan.entries.insert(plan.entries.begin(), pre.begin(), pre.end());
      plan.preEntries = pre.size();
      for (LetPlan& lp : plan.lets) lp.entryBegin += plan.preEntries;
    }
    finalizeChain(plan);

    // Chain the tape and pair it with the result.
    VarId chainHead = appendChainLets(fb, plan);
    const Ty resNow = nowF.count(fb.result) ? nowF.at(fb.result)
                                            : tyOf(fb.result);
    const Ty resAfter = metaF.find(fb.result)->after;
    VarId rr = nextF++;
    emitF(fb, rr, Ty::pair(resNow, plan.sufNow[0]),
          EPair{fb.result, chainHead},
          Ty::pair(resAfter, plan.sufAfter[0]), kCollNone);
    fb.result = rr;
    fwd.ret = Ty::pair(resNow, plan.sufNow[0]);
    metaF.put(rr, Ty::pair(resAfter, plan.sufAfter[0]), kCollNone);
    fwd.body = std::move(fb);
    fwd.varCount = nextF;

    // Derivative-pass ids start above every forward id so that tape entry
    // vars (allocated while planning the forward pass) can be re-bound here
    // without colliding with params or fresh lets.
    nextB = nextF;
    bwd.generics = src.generics;
    bwd.varNames = src.varNames;
    for (const Param& p : src.params) {
      std::string pname;
      {
        auto it = src.varNames.find(p.var);
        if (it != src.varNames.end()) pname = it->second;
      }
      if (p.ty.is(Ty::Tag::Acc)) {
        // The forward pass owns the accumulator; its content's adjoint
        // arrives in the derivative pass as a plain value.
        VarId v = nextB++;
        bwd.params.push_back({v, p.ty.inner()});
        accAdjVal[p.var] = v;
        metaB.put(v, unlift(p.ty.inner()),
                  isDual(p.ty.inner()) ? kCollSnd : kCollNone);
        if (!pname.empty()) bwd.varNames[v] = "d_" + pname;
      } else if (hasReal(p.ty)) {
        VarId v = nextB++;
        bwd.params.push_back({v, Ty::acc(p.ty)});
        adjAcc[p.var] = v;
        metaB.put(v, Ty::acc(unlift(p.ty)),
                  isDual(p.ty) ? kCollSnd : kCollNone);
        if (!pname.empty()) bwd.varNames[v] = "dd" + pname;
      } else {
        // Discrete data (indices, booleans, unit shapes) passes through by
        // value; the derivative pass may need it to replay selects/indexing.
        bwd.params.push_back({p.var, p.ty});
        metaB.put(p.var, p.ty, kCollNone);
      }
    }
    VarId dyParam = nextB++;
    bwd.params.push_back({dyParam, src.ret});
    metaB.put(dyParam, unlift(src.ret), isDual(src.ret) ? kCollSnd : kCollNone);
    bwd.varNames[dyParam] = "dy";

    VarId tapeParam = nextB++;
    bwd.params.push_back({tapeParam, plan.sufNow[0]});
    metaB.put(tapeParam, plan.sufAfter[0], kCollNone);
    bwd.varNames[tapeParam] = "t";
    bwd.ret = Ty::unit();

    std::vector<Let> lets;
    VarId cursor = anySlot(plan) ? tapeParam : kNoVar;
    size_t ei = 0;
    for (size_t i = 0; i < plan.preEntries; ++i)
      cursor = destructureEntry(plan, ei++, cursor, lets);
    emitBwdFrom(src.body, plan, 0, ei, cursor, dyParam, lets);
    Block bb;
    bb.lets = std::move(lets);
    bb.result = ensureUnitResult(bb.lets);
    bwd.body = std::move(bb);
    bwd.varCount = nextB;
  }

  VarId ensureUnitResult(std::vector<Let>& lets) {
    for (size_t i = lets.size(); i-- > 0;) {
      if (lets[i].ty != Ty::unit()) continue;
      // Never make a tape read the block result; tape narrowing assumes
      // reads are free-standing.
      if (std::holds_alternative<EFst>(lets[i].expr) ||
          std::holds_alternative<ESnd>(lets[i].expr))
        continue;
      return lets[i].var;
    }
    VarId u = nextB++;
    emitB(lets, u, Ty::unit(), EUnit{}, Ty::unit(), kCollNone);
    return u;
  }

  // Appends the right-nested unit-terminated tape chain to `b` and returns
  // the head var.
  VarId appendChainLets(Block& b, const BlockPlan& plan) {
    VarId cur = nextF++;
    emitF(b, cur, Ty::unit(), EUnit{}, Ty::unit(), kCollNone);
    for (size_t i = plan.entries.size(); i-- > 0;) {
      const TapeEntry& e = plan.entries[i];
      if (!e.slot) continue;
      VarId nv = nextF++;
      emitF(b, nv, plan.sufNow[i], EPair{e.var, cur}, plan.sufAfter[i],
            kCollNone);
      cur = nv;
    }
    return cur;
  }

  // ---- value pass -------------------------------------------------------

  Block fwdBlock(const Block& b, BlockPlan& plan) {
    Block out;
    out.result = b.result;
    for (const Let& l : b.lets) {
      plan.lets.emplace_back();
      fwdLet(out, l, plan, plan.lets.back());
    }
    return out;
  }

  void tapePlain(const Let& l, BlockPlan& plan, LetPlan& lp, bool propagate) {
    lp.kind = LetPlan::Taped;
    lp.propagate = propagate;
    lp.entryBegin = plan.entries.size();
    lp.entryCount = 1;
    TapeEntry e{l.var, l.ty, unlift(l.ty), hasReal(l.ty), primalColl(l.ty),
                isDual(l.ty) ? kCollSnd : kCollNone};
    pruneEntry(e, &l.expr);
    plan.entries.push_back(std::move(e));
  }

  void fwdLet(Block& out, const Let& l, BlockPlan& plan, LetPlan& lp) {
    ty.insert({l.var, l.ty});
    adjCollSrc[l.var] = isDual(l.ty) ? kCollSnd : kCollNone;

    if (auto* u = std::get_if<EUnary>(&l.expr)) {
      if (u->op == UnaryOp::Neg) {
        bool t = isT(u->x);
        if (zconst.count(u->x)) zconst.insert(l.var);
        tang[l.var] = t;
        emitF(out, l.var, l.ty, t ? Expr{EConst{0.0}} : l.expr, Ty::real(),
              kCollNone);
        tapePlain(l, plan, lp, t);
        return;
      }
      if (u->op != UnaryOp::Not && isT(u->x))
        nonlinear(std::string(unaryOpName(u->op)));
      if (u->op != UnaryOp::Not) tang[l.var] = false;
      emitF(out, l.var, l.ty, l.expr, l.ty, kCollNone);
      tapePlain(l, plan, lp, false);
      return;
    }
    if (auto* b = std::get_if<EBinary>(&l.expr)) {
      if (isArith(b->op)) {
        bool lt = isT(b->lhs), rt = isT(b->rhs);
        bool lz = zconst.count(b->lhs) != 0, rz = zconst.count(b->rhs) != 0;
        bool t = lt || rt;
        switch (b->op) {
          case BinaryOp::Add:
          case BinaryOp::Sub:
            // A syntactic zero is simultaneously a value and a (vanishing)
            // perturbation, so it may meet either role in a sum; the result
            // takes the other side's role.
            if (lt != rt) {
              bool tz = lt ? lz : rz, pz = lt ? rz : lz;
              if (!tz && !pz)
                nonlinear("a sum mixing value and perturbation");
              if (tz && !pz) t = false;  // value + zero tangent: a value
            }
            if (lz && rz) zconst.insert(l.var);
            break;
          case BinaryOp::Mul:
            if (lt && rt) nonlinear("a product of two perturbations");
            if (lt) needValue(b->rhs);
            if (rt) needValue(b->lhs);
            // Zero times anything is still zero.
            if (lz || rz) zconst.insert(l.var);
            break;
          default:  // Div
            if (rt) nonlinear("a division by a perturbation");
            if (lt) needValue(b->rhs);
            if (lz) zconst.insert(l.var);
            break;
        }
        tang[l.var] = t;
        emitF(out, l.var, l.ty, t ? Expr{EConst{0.0}} : l.expr, Ty::real(),
              kCollNone);
        tapePlain(l, plan, lp, t);
        return;
      }
      if (isCompare(b->op) && (isT(b->lhs) || isT(b->rhs)))
        nonlinear("a comparison of a perturbation");
      emitF(out, l.var, l.ty, l.expr, l.ty, kCollNone);
      tapePlain(l, plan, lp, false);
      return;
    }
    if (auto* cst = std::get_if<EConst>(&l.expr)) {
      if (cst->value == 0.0) zconst.insert(l.var);
      tang[l.var] = false;
      emitF(out, l.var, l.ty, l.expr, Ty::real(), kCollNone);
      tapePlain(l, plan, lp, false);
      return;
    }
    if (auto* s = std::get_if<ESelect>(&l.expr)) {
      if (l.ty.is(Ty::Tag::Acc)) {
        // Selecting between accumulators aliases one of them.
        emitF(out, l.var, l.ty, l.expr, unlift(l.ty),
              isDual(l.ty.inner()) ? kCollFst : kCollNone);
        lp.kind = LetPlan::RefLet;
        return;
      }
      if (l.ty == Ty::real()) tang[l.var] = isT(s->then) || isT(s->otherwise);
      emitF(out, l.var, l.ty, l.expr, unlift(l.ty), primalColl(l.ty));
      bool prop = l.ty == Ty::real() ? tang[l.var] : hasReal(l.ty);
      tapePlain(l, plan, lp, prop);
      return;
    }
    if (auto* p = std::get_if<EFst>(&l.expr)) {
      projectionLet(out, l, plan, lp, p->pair, kNoVar, 0);
      return;
    }
    if (auto* p = std::get_if<ESnd>(&l.expr)) {
      projectionLet(out, l, plan, lp, p->pair, kNoVar, 1);
      return;
    }
    if (auto* ix = std::get_if<EIndex>(&l.expr)) {
      projectionLet(out, l, plan, lp, ix->arr, ix->idx, 2);
      return;
    }
    if (std::holds_alternative<ERefFst>(l.expr) ||
        std::holds_alternative<ERefSnd>(l.expr) ||
        std::holds_alternative<ERefIndex>(l.expr)) {
      emitF(out, l.var, l.ty, l.expr, unlift(l.ty),
            l.ty.is(Ty::Tag::Acc) && isDual(l.ty.inner()) ? kCollFst
                                                          : kCollNone);
      lp.kind = LetPlan::RefLet;
      return;
    }
    if (auto* ac = std::get_if<EAccum>(&l.expr)) {
      emitF(out, l.var, l.ty, l.expr, Ty::unit(), kCollNone);
      lp.kind = LetPlan::AccumWrite;
      (void)ac;
      return;
    }
    if (auto* c = std::get_if<ECall>(&l.expr)) {
      callLet(out, l, plan, lp, *c);
      return;
    }
    if (auto* f = std::get_if<EFor>(&l.expr)) {
      loopLet(out, l, plan, lp, *f);
      return;
    }
    if (auto* a = std::get_if<EAccumBlock>(&l.expr)) {
      regionLet(out, l, plan, lp, *a);
      return;
    }
    // Unit, booleans, index literals, arrays, pairs: structural/discrete.
    if (l.ty == Ty::real()) tang[l.var] = false;
    emitF(out, l.var, l.ty, l.expr, unlift(l.ty), primalColl(l.ty));
    bool prop = hasReal(l.ty) && (std::holds_alternative<EPair>(l.expr) ||
                                  std::holds_alternative<EArray>(l.expr));
    tapePlain(l, plan, lp, prop);
  }

  // kind: 0 fst, 1 snd, 2 index
  void projectionLet(Block& out, const Let& l, BlockPlan& plan, LetPlan& lp,
                     VarId parent, VarId idx, int kind) {
    if (l.ty == Ty::real()) {
      const Ty& pt = tyOf(parent);
      tang[l.var] = kind == 1 && isDual(pt);
    }
    emitF(out, l.var, l.ty, l.expr, unlift(l.ty), primalColl(l.ty));
    (void)idx;
    if (!realParams.count(parent)) {
      lp.kind = LetPlan::Recompute;  // parent value exists in bwd; recompute
    } else {
      lp.kind = LetPlan::ParamProj;  // tape the value, alias the adjoint
      lp.entryBegin = plan.entries.size();
      lp.entryCount = 1;
      TapeEntry e{l.var, l.ty, unlift(l.ty), false, primalColl(l.ty),
                  isDual(l.ty) ? kCollSnd : kCollNone};
      pruneEntry(e, nullptr);
      plan.entries.push_back(std::move(e));
    }
    (void)kind;
  }

  void callLet(Block& out, const Let& l, BlockPlan& plan, LetPlan& lp,
               const ECall& c) {
    bool opaque = reg.isOpaque(c.callee);
    bool allPrimal = true;
    for (VarId a : c.args) {
      const Ty& at = tyOf(a);
      if (at.is(Ty::Tag::Acc) || (hasReal(at) && at != Ty::real()) ||
          (at == Ty::real() && isT(a)))
        allPrimal = false;
    }
    if (opaque) {
      for (VarId a : c.args)
        if (isT(a)) nonlinear("an opaque call applied to a perturbation");
      allPrimal = true;
    }
    if (allPrimal) {
      // Purely primal work: keep the call whole in the value pass.
      if (l.ty == Ty::real()) tang[l.var] = false;
      emitF(out, l.var, l.ty, l.expr, unlift(l.ty), primalColl(l.ty));
      tapePlain(l, plan, lp, false);
      lp.propagate = false;
      return;
    }
    SplitPair sp = resolve(c.callee);
    std::map<std::string, Ty> bind;
    {
      auto gs = reg.genericsOf(c.callee);
      for (size_t i = 0; i < gs.size() && i < c.typeArgs.size(); ++i)
        bind[gs[i].name] = c.typeArgs[i];
    }
    Ty fwdRet = substitute(reg.retType(sp.fwd), bind);
    Ty yTy = fwdRet.first(), tTy = fwdRet.second();
    std::vector<Ty> cps;
    for (const Ty& pt : reg.paramTypes(c.callee)) cps.push_back(substitute(pt, bind));

    VarId c0 = nextF++;
    emitF(out, c0, fwdRet, ECall{sp.fwd, c.typeArgs, c.args}, fwdRet,
          kCollNone);
    emitF(out, l.var, yTy, EFst{c0}, yTy, primalColl(l.ty));
    VarId t = nextF++;
    emitF(out, t, tTy, ESnd{c0}, tTy, kCollNone);
    adjCollSrc[l.var] = kCollNone;  // its adjoint is built callee-final

    lp.kind = LetPlan::CallSplit;
    lp.split = sp;
    lp.tyArgs = c.typeArgs;
    lp.calleeParams = std::move(cps);
    lp.aux = t;
    lp.entryBegin = plan.entries.size();
    lp.entryCount = 2;
    TapeEntry ye{l.var, yTy, yTy, hasReal(yTy), primalColl(l.ty),
                 isDual(l.ty) ? kCollSnd : kCollNone};
    // A discrete non-unit result is fed back to the callee derivative pass
    // by value, so its slot must survive; otherwise prune like any entry.
    if (hasReal(yTy) || yTy == Ty::unit()) pruneEntry(ye, nullptr);
    plan.entries.push_back(std::move(ye));
    plan.entries.push_back(TapeEntry{t, tTy, tTy, false, kCollNone, kCollNone});
  }

  void loopLet(Block& out, const Let& l, BlockPlan& plan, LetPlan& lp,
               const EFor& f) {
    ty.insert({f.indexVar, f.indexTy});
    adjCollSrc[f.indexVar] = kCollNone;
    metaF.put(f.indexVar, f.indexTy, kCollNone);
    lp.inner = std::make_unique<BlockPlan>();
    Block body = fwdBlock(*f.body, *lp.inner);
    finalizeChain(*lp.inner);
    const Ty elemNow = nowF.count(body.result) ? nowF.at(body.result)
                                               : tyOf(body.result);
    const Ty elemAfter = metaF.find(body.result)->after;
    if (!anySlot(*lp.inner)) {
      // No per-iteration tape: keep the loop whole, one element-array entry.
      Ty aNow = Ty::arr(f.indexTy, elemNow);
      Ty aAfter = Ty::arr(f.indexTy, elemAfter);
      emitF(out, l.var, aNow,
            EFor{f.indexTy, f.indexVar,
                 std::make_shared<const Block>(std::move(body))},
            aAfter, kCollNone);
      lp.kind = LetPlan::Loop;
      lp.aux = kNoVar;
      lp.entryBegin = plan.entries.size();
      lp.entryCount = 1;
      TapeEntry ve{l.var, aNow, aAfter, hasReal(aNow), kCollNone, kCollNone};
      pruneEntry(ve, nullptr);
      plan.entries.push_back(std::move(ve));
      return;
    }
    VarId chain = appendChainLets(body, *lp.inner);
    VarId res2 = nextF++;
    emitF(body, res2, Ty::pair(elemNow, lp.inner->sufNow[0]),
          EPair{body.result, chain},
          Ty::pair(elemAfter, lp.inner->sufAfter[0]), kCollNone);
    body.result = res2;

    VarId vRaw = nextF++;
    Ty rawNow = Ty::arr(f.indexTy, Ty::pair(elemNow, lp.inner->sufNow[0]));
    Ty rawAfter =
        Ty::arr(f.indexTy, Ty::pair(elemAfter, lp.inner->sufAfter[0]));
    emitF(out, vRaw, rawNow,
          EFor{f.indexTy, f.indexVar,
               std::make_shared<const Block>(std::move(body))},
          rawAfter, kCollNone);

    // Element array under the source id, tape array fresh.
    Ty aNow = Ty::arr(f.indexTy, elemNow), aAfter = Ty::arr(f.indexTy, elemAfter);
    {
      VarId i2 = nextF++;
      Block pb;
      VarId e1 = nextF++, e2 = nextF++;
      pb.lets.push_back(Let{e1, Ty::pair(elemNow, lp.inner->sufNow[0]),
                            EIndex{vRaw, i2}});
      metaF.put(e1, Ty::pair(elemAfter, lp.inner->sufAfter[0]), kCollNone);
      pb.lets.push_back(Let{e2, elemNow, EFst{e1}});
      metaF.put(e2, elemAfter, kCollNone);
      pb.result = e2;
      emitF(out, l.var, aNow,
            EFor{f.indexTy, i2, std::make_shared<const Block>(std::move(pb))},
            aAfter, kCollNone);
    }
    VarId t2 = nextF++;
    Ty t2Now = Ty::arr(f.indexTy, lp.inner->sufNow[0]);
    Ty t2After = Ty::arr(f.indexTy, lp.inner->sufAfter[0]);
    {
      VarId i3 = nextF++;
      Block pb;
      VarId e3 = nextF++, e4 = nextF++;
      pb.lets.push_back(Let{e3, Ty::pair(elemNow, lp.inner->sufNow[0]),
                            EIndex{vRaw, i3}});
      metaF.put(e3, Ty::pair(elemAfter, lp.inner->sufAfter[0]), kCollNone);
      pb.lets.push_back(Let{e4, lp.inner->sufNow[0], ESnd{e3}});
      metaF.put(e4, lp.inner->sufAfter[0], kCollNone);
      pb.result = e4;
      emitF(out, t2, t2Now,
            EFor{f.indexTy, i3, std::make_shared<const Block>(std::move(pb))},
            t2After, kCollNone);
    }

    lp.kind = LetPlan::Loop;
    lp.aux = t2;
    lp.entryBegin = plan.entries.size();
    lp.entryCount = 2;
    TapeEntry ve{l.var, aNow, aAfter, hasReal(aNow), kCollNone, kCollNone};
    pruneEntry(ve, nullptr);
    plan.entries.push_back(std::move(ve));
    plan.entries.push_back(
        TapeEntry{t2, t2Now, t2After, false, kCollNone, kCollNone});
  }

  void regionLet(Block& out, const Let& l, BlockPlan& plan, LetPlan& lp,
                 const EAccumBlock& a) {
    const Ty contentNow = l.ty.first();
    ty.insert({a.accVar, Ty::acc(contentNow)});
    metaF.put(a.accVar, Ty::acc(unlift(contentNow)),
              isDual(contentNow) ? kCollFst : kCollNone);
    lp.inner = std::make_unique<BlockPlan>();
    Block body = fwdBlock(*a.body, *lp.inner);
    finalizeChain(*lp.inner);
    const Ty bResNow = nowF.count(body.result) ? nowF.at(body.result)
                                               : tyOf(body.result);
    const Ty bResAfter = metaF.find(body.result)->after;
    if (!anySlot(*lp.inner)) {
      // No inner tape: the region already evaluates to (content, result).
      Ty piNow = Ty::pair(contentNow, bResNow);
      Ty piAfter = Ty::pair(unlift(contentNow), bResAfter);
      emitF(out, l.var, piNow,
            EAccumBlock{a.accVar, a.from,
                        std::make_shared<const Block>(std::move(body))},
            piAfter, kCollNone);
      lp.kind = LetPlan::Region;
      lp.aux = kNoVar;
      lp.entryBegin = plan.entries.size();
      lp.entryCount = 1;
      TapeEntry pe{l.var, piNow, piAfter, hasReal(piNow), kCollNone,
                   kCollNone};
      pruneEntry(pe, nullptr);
      plan.entries.push_back(std::move(pe));
      return;
    }
    VarId chain = appendChainLets(body, *lp.inner);
    VarId q = nextF++;
    emitF(body, q, Ty::pair(bResNow, lp.inner->sufNow[0]),
          EPair{body.result, chain}, Ty::pair(bResAfter, lp.inner->sufAfter[0]),
          kCollNone);
    body.result = q;

    VarId r0 = nextF++;
    Ty r0Now = Ty::pair(contentNow, Ty::pair(bResNow, lp.inner->sufNow[0]));
    Ty r0After = Ty::pair(unlift(contentNow),
                          Ty::pair(bResAfter, lp.inner->sufAfter[0]));
    emitF(out, r0, r0Now,
          EAccumBlock{a.accVar, a.from,
                      std::make_shared<const Block>(std::move(body))},
          r0After, kCollNone);
    VarId x = nextF++;
    emitF(out, x, contentNow, EFst{r0}, unlift(contentNow),
          primalColl(contentNow));
    VarId q2 = nextF++;
    emitF(out, q2, Ty::pair(bResNow, lp.inner->sufNow[0]), ESnd{r0},
          Ty::pair(bResAfter, lp.inner->sufAfter[0]), kCollNone);
    VarId z = nextF++;
    emitF(out, z, bResNow, EFst{q2}, bResAfter, kCollNone);
    VarId t2 = nextF++;
    emitF(out, t2, lp.inner->sufNow[0], ESnd{q2}, lp.inner->sufAfter[0],
          kCollNone);
    Ty piNow = Ty::pair(contentNow, bResNow);
    Ty piAfter = Ty::pair(unlift(contentNow), bResAfter);
    emitF(out, l.var, piNow, EPair{x, z}, piAfter, kCollNone);

    lp.kind = LetPlan::Region;
    lp.aux = t2;
    lp.entryBegin = plan.entries.size();
    lp.entryCount = 2;
    TapeEntry pe{l.var, piNow, piAfter, hasReal(piNow), kCollNone, kCollNone};
    pruneEntry(pe, nullptr);
    plan.entries.push_back(std::move(pe));
    plan.entries.push_back(TapeEntry{t2, lp.inner->sufNow[0],
                                     lp.inner->sufAfter[0], false, kCollNone,
                                     kCollNone});
  }

  // ---- derivative pass --------------------------------------------------

  VarId destructureEntry(const BlockPlan& plan, size_t ei, VarId cursor,
                         std::vector<Let>& out) {
    const TapeEntry& e = plan.entries[ei];
    if (!e.slot) {
      // The value-pass binding is statically known: replay it here rather
      // than carrying a tape slot. The cursor does not move.
      if (e.rebind)
        emitB(out, e.var, e.now, e.rebindExpr, e.after, e.coll);
      else
        zeroValueAs(e.var, e.now, e.after, e.coll, out);
      return cursor;
    }
    emitB(out, e.var, e.now, EFst{cursor}, e.after, e.coll);
    if (plan.sufNow[ei + 1] != Ty::unit()) {
      VarId nc = nextB++;
      emitB(out, nc, plan.sufNow[ei + 1], ESnd{cursor}, plan.sufAfter[ei + 1],
            kCollNone);
      return nc;
    }
    return kNoVar;
  }

  void accumInto(VarId srcVar, VarId val, std::vector<Let>& out) {
    auto it = adjAcc.find(srcVar);
    if (it == adjAcc.end()) return;
    emitB(out, nextB++, Ty::unit(), EAccum{it->second, val}, Ty::unit(),
          kCollNone);
  }

  // Opens an adjoint region for tape entry `e` around the continuation
  // `innerLets`, then binds the decayed adjoint value and returns it.
  VarId closeRegion(const TapeEntry& e, VarId srcVar,
                    std::vector<Let>&& innerLets, VarId ddv,
                    std::vector<Let>& out) {
    Block body;
    body.lets = std::move(innerLets);
    body.result = ensureUnitResult(body.lets);
    VarId pr = nextB++;
    emitB(out, pr, Ty::pair(e.now, Ty::unit()),
          EAccumBlock{ddv, e.var, std::make_shared<const Block>(std::move(body))},
          Ty::pair(e.after, Ty::unit()), kCollNone);
    VarId dx = nextB++;
    emitB(out, dx, e.now, EFst{pr}, e.after, e.adjColl);
    (void)srcVar;
    return dx;
  }

  VarId newAdjAcc(const TapeEntry& e, VarId srcVar) {
    VarId ddv = nextB++;
    metaB.put(ddv, Ty::acc(e.after), e.adjColl);
    adjAcc[srcVar] = ddv;
    return ddv;
  }

  void emitBwdFrom(const Block& b, const BlockPlan& plan, size_t li, size_t ei,
                   VarId cursor, VarId dyVal, std::vector<Let>& out) {
    if (li == b.lets.size()) {
      if (dyVal != kNoVar) {
        auto it = adjAcc.find(b.result);
        if (it != adjAcc.end())
          emitB(out, nextB++, Ty::unit(), EAccum{it->second, dyVal}, Ty::unit(),
                kCollNone);
      }
      return;
    }
    const Let& l = b.lets[li];
    const LetPlan& lp = plan.lets[li];
    switch (lp.kind) {
      case LetPlan::Taped: {
        const TapeEntry& e = plan.entries[lp.entryBegin];
        VarId nc = destructureEntry(plan, lp.entryBegin, cursor, out);
        if (!e.region) {
          emitBwdFrom(b, plan, li + 1, ei + 1, nc, dyVal, out);
          return;
        }
        VarId ddv = newAdjAcc(e, l.var);
        std::vector<Let> inner;
        emitBwdFrom(b, plan, li + 1, ei + 1, nc, dyVal, inner);
        VarId dx = closeRegion(e, l.var, std::move(inner), ddv, out);
        if (lp.propagate) emitProp(l, dx, out);
        return;
      }
      case LetPlan::Recompute: {
        emitB(out, l.var, l.ty, l.expr, unlift(l.ty), primalColl(l.ty));
        if (hasReal(l.ty)) {
          VarId rv = nextB++;
          Expr ref;
          if (auto* p = std::get_if<EFst>(&l.expr))
            ref = ERefFst{adjAcc.at(p->pair)};
          else if (auto* p2 = std::get_if<ESnd>(&l.expr))
            ref = ERefSnd{adjAcc.at(p2->pair)};
          else {
            auto& ix = std::get<EIndex>(l.expr);
            ref = ERefIndex{adjAcc.at(ix.arr), ix.idx};
          }
          emitB(out, rv, Ty::acc(l.ty), std::move(ref), Ty::acc(unlift(l.ty)),
                isDual(l.ty) ? kCollSnd : kCollNone);
          adjAcc[l.var] = rv;
        }
        emitBwdFrom(b, plan, li + 1, ei, cursor, dyVal, out);
        return;
      }
      case LetPlan::ParamProj: {
        VarId nc = destructureEntry(plan, lp.entryBegin, cursor, out);
        if (hasReal(l.ty)) {
          VarId rv = nextB++;
          Expr ref;
          if (auto* p = std::get_if<EFst>(&l.expr))
            ref = ERefFst{adjAcc.at(p->pair)};
          else if (auto* p2 = std::get_if<ESnd>(&l.expr))
            ref = ERefSnd{adjAcc.at(p2->pair)};
          else {
            auto& ix = std::get<EIndex>(l.expr);
            ref = ERefIndex{adjAcc.at(ix.arr), ix.idx};
          }
          emitB(out, rv, Ty::acc(l.ty), std::move(ref), Ty::acc(unlift(l.ty)),
                isDual(l.ty) ? kCollSnd : kCollNone);
          adjAcc[l.var] = rv;
        }
        emitBwdFrom(b, plan, li + 1, ei + 1, nc, dyVal, out);
        return;
      }
      case LetPlan::RefLet: {
        // The adjoint value of a projected (or selected) accumulator is the
        // matching projection (selection) of the parents' adjoint values.
        const Ty inner = l.ty.inner();
        bool have = false;
        Expr proj = EUnit{};
        if (auto* rf = std::get_if<ERefFst>(&l.expr)) {
          if (accAdjVal.count(rf->pair)) {
            proj = EFst{accAdjVal.at(rf->pair)};
            have = true;
          }
        } else if (auto* rs = std::get_if<ERefSnd>(&l.expr)) {
          if (accAdjVal.count(rs->pair)) {
            proj = ESnd{accAdjVal.at(rs->pair)};
            have = true;
          }
        } else if (auto* ri = std::get_if<ERefIndex>(&l.expr)) {
          if (accAdjVal.count(ri->arr)) {
            proj = EIndex{accAdjVal.at(ri->arr), ri->idx};
            have = true;
          }
        } else {
          auto& sel = std::get<ESelect>(l.expr);
          if (accAdjVal.count(sel.then) && accAdjVal.count(sel.otherwise)) {
            proj = ESelect{sel.cond, accAdjVal.at(sel.then),
                           accAdjVal.at(sel.otherwise)};
            have = true;
          }
        }
        if (have && hasReal(inner)) {
          VarId rv = nextB++;
          emitB(out, rv, inner, std::move(proj), unlift(inner),
                isDual(inner) ? kCollSnd : kCollNone);
          accAdjVal[l.var] = rv;
        }
        emitBwdFrom(b, plan, li + 1, ei, cursor, dyVal, out);
        return;
      }
      case LetPlan::AccumWrite: {
        auto& ac = std::get<EAccum>(l.expr);
        if (accAdjVal.count(ac.target) && adjAcc.count(ac.value))
          emitB(out, nextB++, Ty::unit(),
                EAccum{adjAcc.at(ac.value), accAdjVal.at(ac.target)},
                Ty::unit(), kCollNone);
        emitBwdFrom(b, plan, li + 1, ei, cursor, dyVal, out);
        return;
      }
      case LetPlan::CallSplit: {
        const TapeEntry& ye = plan.entries[lp.entryBegin];
        VarId nc = destructureEntry(plan, lp.entryBegin, cursor, out);
        nc = destructureEntry(plan, lp.entryBegin + 1, nc, out);
        VarId dyv = kNoVar;
        std::vector<Let>* tail = &out;
        std::vector<Let> inner;
        VarId ddv = kNoVar;
        if (ye.region) {
          ddv = newAdjAcc(ye, l.var);
          emitBwdFrom(b, plan, li + 1, ei + 2, nc, dyVal, inner);
          dyv = closeRegion(ye, l.var, std::move(inner), ddv, out);
        } else {
          emitBwdFrom(b, plan, li + 1, ei + 2, nc, dyVal, out);
          if (ye.now == Ty::unit()) {
            dyv = nextB++;
            emitB(out, dyv, Ty::unit(), EUnit{}, Ty::unit(), kCollNone);
          } else {
            dyv = l.var;  // discrete: the adjoint carries no information
          }
        }
        auto& c = std::get<ECall>(l.expr);
        std::vector<VarId> cargs;
        for (size_t i = 0; i < c.args.size(); ++i) {
          const Ty& pt = lp.calleeParams[i];
          if (pt.is(Ty::Tag::Acc))
            cargs.push_back(accAdjVal.at(c.args[i]));
          else if (hasReal(pt))
            cargs.push_back(adjAcc.at(c.args[i]));
          else
            cargs.push_back(c.args[i]);
        }
        cargs.push_back(dyv);
        cargs.push_back(lp.aux);
        emitB(*tail, nextB++, Ty::unit(), ECall{lp.split.bwd, lp.tyArgs, cargs},
              Ty::unit(), kCollNone);
        return;
      }
      case LetPlan::Loop: {
        auto& f = std::get<EFor>(l.expr);
        const TapeEntry& ae = plan.entries[lp.entryBegin];
        VarId nc = destructureEntry(plan, lp.entryBegin, cursor, out);
        if (lp.entryCount == 2)
          nc = destructureEntry(plan, lp.entryBegin + 1, nc, out);
        VarId daVar = kNoVar;
        if (ae.region) {
          VarId dda = newAdjAcc(ae, l.var);
          std::vector<Let> inner;
          emitBwdFrom(b, plan, li + 1, ei + lp.entryCount, nc, dyVal, inner);
          daVar = closeRegion(ae, l.var, std::move(inner), dda, out);
        } else {
          emitBwdFrom(b, plan, li + 1, ei + lp.entryCount, nc, dyVal, out);
        }
        // Replay the loop to invert each iteration against its own tape.
        const BlockPlan& ip = *lp.inner;
        std::vector<Let> lets;
        VarId tcur = kNoVar;
        if (lp.aux != kNoVar) {
          tcur = nextB++;
          emitB(lets, tcur, ip.sufNow[0], EIndex{lp.aux, f.indexVar},
                ip.sufAfter[0], kCollNone);
        }
        VarId dz = kNoVar;
        if (daVar != kNoVar && hasReal(ae.now.elem())) {
          dz = nextB++;
          emitB(lets, dz, ae.now.elem(), EIndex{daVar, f.indexVar},
                ae.after.elem(), adjCollSrc.at(f.body->result));
        }
        emitBwdFrom(*f.body, ip, 0, 0, tcur, dz, lets);
        Block rb;
        rb.lets = std::move(lets);
        rb.result = ensureUnitResult(rb.lets);
        VarId u = nextB++;
        emitB(out, u, Ty::arr(f.indexTy, Ty::unit()),
              EFor{f.indexTy, f.indexVar,
                   std::make_shared<const Block>(std::move(rb))},
              Ty::arr(f.indexTy, Ty::unit()), kCollNone);
        return;
      }
      case LetPlan::Region: {
        auto& a = std::get<EAccumBlock>(l.expr);
        const TapeEntry& pe = plan.entries[lp.entryBegin];
        VarId nc = destructureEntry(plan, lp.entryBegin, cursor, out);
        if (lp.entryCount == 2)
          nc = destructureEntry(plan, lp.entryBegin + 1, nc, out);
        VarId dz = kNoVar;
        if (pe.region) {
          VarId ddp = newAdjAcc(pe, l.var);
          std::vector<Let> inner;
          emitBwdFrom(b, plan, li + 1, ei + lp.entryCount, nc, dyVal, inner);
          VarId dpv = closeRegion(pe, l.var, std::move(inner), ddp, out);
          VarId dxA = nextB++;
          emitB(out, dxA, pe.now.first(), EFst{dpv}, pe.after.first(),
                isDual(pe.now.first()) ? kCollSnd : kCollNone);
          accAdjVal[a.accVar] = dxA;
          if (hasReal(pe.now.second())) {
            dz = nextB++;
            emitB(out, dz, pe.now.second(), ESnd{dpv}, pe.after.second(),
                  adjCollSrc.at(a.body->result));
          }
        } else {
          emitBwdFrom(b, plan, li + 1, ei + lp.entryCount, nc, dyVal, out);
        }
        const BlockPlan& ip = *lp.inner;
        emitBwdFrom(*a.body, ip, 0, 0, lp.aux, dz, out);
        return;
      }
    }
  }

  void emitProp(const Let& l, VarId dx, std::vector<Let>& out) {
    if (auto* u = std::get_if<EUnary>(&l.expr)) {  // Neg
      VarId m = nextB++;
      emitB(out, m, Ty::real(), EUnary{UnaryOp::Neg, dx}, Ty::real(),
            kCollNone);
      accumInto(u->x, m, out);
      return;
    }
    if (auto* b = std::get_if<EBinary>(&l.expr)) {
      switch (b->op) {
        case BinaryOp::Add:
          accumInto(b->lhs, dx, out);
          accumInto(b->rhs, dx, out);
          return;
        case BinaryOp::Sub: {
          accumInto(b->lhs, dx, out);
          VarId m = nextB++;
          emitB(out, m, Ty::real(), EUnary{UnaryOp::Neg, dx}, Ty::real(),
                kCollNone);
          accumInto(b->rhs, m, out);
          return;
        }
        case BinaryOp::Mul: {
          VarId t = isT(b->lhs) ? b->lhs : b->rhs;
          VarId p = isT(b->lhs) ? b->rhs : b->lhs;
          VarId m = nextB++;
          emitB(out, m, Ty::real(), EBinary{BinaryOp::Mul, dx, p}, Ty::real(),
                kCollNone);
          accumInto(t, m, out);
          return;
        }
        default: {  // Div (lhs is the perturbation)
          VarId m = nextB++;
          emitB(out, m, Ty::real(), EBinary{BinaryOp::Div, dx, b->rhs},
                Ty::real(), kCollNone);
          accumInto(b->lhs, m, out);
          return;
        }
      }
    }
    if (auto* s = std::get_if<ESelect>(&l.expr)) {
      // The adjoint flows to whichever branch was selected.
      auto ta = adjAcc.find(s->then);
      auto oa = adjAcc.find(s->otherwise);
      if (ta == adjAcc.end() || oa == adjAcc.end()) return;
      VarId dw = nextB++;
      emitB(out, dw, Ty::acc(l.ty), ESelect{s->cond, ta->second, oa->second},
            Ty::acc(unlift(l.ty)), isDual(l.ty) ? kCollSnd : kCollNone);
      emitB(out, nextB++, Ty::unit(), EAccum{dw, dx}, Ty::unit(), kCollNone);
      return;
    }
    if (auto* p = std::get_if<EPair>(&l.expr)) {
      VarId da = nextB++;
      emitB(out, da, l.ty.first(), EFst{dx}, unlift(l.ty.first()),
            isDual(l.ty.first()) ? kCollSnd : kCollNone);
      accumInto(p->first, da, out);
      VarId db = nextB++;
      emitB(out, db, l.ty.second(), ESnd{dx}, unlift(l.ty.second()),
            isDual(l.ty.second()) ? kCollSnd : kCollNone);
      accumInto(p->second, db, out);
      return;
    }
    if (auto* a = std::get_if<EArray>(&l.expr)) {
      for (size_t j = 0; j < a->elems.size(); ++j) {
        VarId fj = nextB++;
        emitB(out, fj, l.ty.index(), EFin{j}, l.ty.index(), kCollNone);
        VarId pj = nextB++;
        emitB(out, pj, l.ty.elem(), EIndex{dx, fj}, unlift(l.ty.elem()),
              isDual(l.ty.elem()) ? kCollSnd : kCollNone);
        accumInto(a->elems[j], pj, out);
      }
      return;
    }
  }
};

// ---------------------------------------------------------------------------
// Scalarization: collapse degenerate (value, perturbation) pairs to scalars.

FuncDef scalarize(const FuncDef& d, const PassMeta& meta) {
  std::unordered_map<VarId, VarId> alias;
  std::unordered_set<VarId> sink;
  auto res = [&](VarId v) {
    while (alias.count(v)) v = alias.at(v);
    return v;
  };
  // A value var collapses when its semantic type was a scalar pair; an
  // accumulator var collapses when its content was.
  auto valColl = [&](VarId v) -> int {
    const VarMeta* m = meta.find(v);
    if (m && m->coll != kCollNone && m->after == Ty::real()) return m->coll;
    return kCollNone;
  };
  auto accColl = [&](VarId v) -> int {
    const VarMeta* m = meta.find(v);
    if (m && m->coll != kCollNone && m->after == Ty::acc(Ty::real()))
      return m->coll;
    return kCollNone;
  };

  std::function<Block(const Block&)> go = [&](const Block& b) {
    Block out;
    for (const Let& l : b.lets) {
      Expr e = l.expr;
      eachOperand(e, [&](VarId& v) { v = res(v); });
      int vc = valColl(l.var);
      if (vc != kCollNone) {
        if (auto* p = std::get_if<EPair>(&e)) {
          alias[l.var] = vc == kCollFst ? p->first : p->second;
          continue;
        }
      }
      if (auto* f = std::get_if<EFst>(&e)) {
        int pc = valColl(f->pair);
        if (pc != kCollNone) {
          if (pc == kCollFst) {
            alias[l.var] = f->pair;
            continue;
          }
          e = EConst{0.0};
        }
      } else if (auto* s = std::get_if<ESnd>(&e)) {
        int pc = valColl(s->pair);
        if (pc != kCollNone) {
          if (pc == kCollSnd) {
            alias[l.var] = s->pair;
            continue;
          }
          e = EConst{0.0};
        }
      } else if (auto* rf = std::get_if<ERefFst>(&e)) {
        int pc = accColl(rf->pair);
        if (pc != kCollNone) {
          if (pc == kCollFst) {
            alias[l.var] = rf->pair;
          } else {
            sink.insert(l.var);
          }
          continue;
        }
      } else if (auto* rs = std::get_if<ERefSnd>(&e)) {
        int pc = accColl(rs->pair);
        if (pc != kCollNone) {
          if (pc == kCollSnd) {
            alias[l.var] = rs->pair;
          } else {
            sink.insert(l.var);
          }
          continue;
        }
      } else if (auto* ac = std::get_if<EAccum>(&e)) {
        if (sink.count(ac->target)) e = EUnit{};
      } else if (auto* fo = std::get_if<EFor>(&e)) {
        e = EFor{fo->indexTy, fo->indexVar,
                 std::make_shared<const Block>(go(*fo->body))};
      } else if (auto* ab = std::get_if<EAccumBlock>(&e)) {
        e = EAccumBlock{ab->accVar, ab->from,
                        std::make_shared<const Block>(go(*ab->body))};
      }
      const VarMeta* m = meta.find(l.var);
      out.lets.push_back(Let{l.var, m ? m->after : l.ty, std::move(e)});
    }
    out.result = res(b.result);
    return out;
  };

  FuncDef nd = d;
  nd.body = go(d.body);
  for (Param& p : nd.params) {
    const VarMeta* m = meta.find(p.var);
    if (m) p.ty = m->after;
  }
  const VarMeta* rm = meta.find(nd.body.result);
  if (rm) nd.ret = rm->after;
  return nd;
}

// ---------------------------------------------------------------------------
// Tape narrowing: drop tape entries the derivative pass never reads.

struct FwdChain {
  VarId resultLet = kNoVar;  // the (value, chain) pair let
  VarId valueVar = kNoVar;
  std::vector<VarId> entries;
  std::vector<VarId> chainLets;  // pair lets and the unit terminator
};

bool parseFwdChain(const FuncDef& f, FwdChain& out) {
  std::unordered_map<VarId, const Let*> top;
  for (const Let& l : f.body.lets) top[l.var] = &l;
  auto it = top.find(f.body.result);
  if (it == top.end()) return false;
  auto* rp = std::get_if<EPair>(&it->second->expr);
  if (!rp) return false;
  out.resultLet = f.body.result;
  out.valueVar = rp->first;
  VarId cur = rp->second;
  for (;;) {
    auto ct = top.find(cur);
    if (ct == top.end()) return false;
    if (std::holds_alternative<EUnit>(ct->second->expr)) {
      out.chainLets.push_back(cur);
      return true;
    }
    auto* p = std::get_if<EPair>(&ct->second->expr);
    if (!p) return false;
    out.chainLets.push_back(cur);
    out.entries.push_back(p->first);
    cur = p->second;
  }
}

// Locate, anywhere in the derivative pass, the per-position tape reads.
struct BwdChain {
  std::vector<VarId> reads;      // bound value per position (kNoVar if dead)
  std::vector<VarId> chainLets;  // all fst/snd reads of the chain spine
};

void scanBwdChain(const Block& b, std::unordered_map<VarId, size_t>& cursorAt,
                  size_t n, BwdChain& out) {
  for (const Let& l : b.lets) {
    if (auto* f = std::get_if<EFst>(&l.expr)) {
      auto it = cursorAt.find(f->pair);
      if (it != cursorAt.end() && it->second < n) {
        out.reads[it->second] = l.var;
        out.chainLets.push_back(l.var);
        continue;
      }
    }
    if (auto* s = std::get_if<ESnd>(&l.expr)) {
      auto it = cursorAt.find(s->pair);
      if (it != cursorAt.end() && it->second + 1 < n) {
        cursorAt[l.var] = it->second + 1;
        out.chainLets.push_back(l.var);
        continue;
      }
    }
    if (auto* fo = std::get_if<EFor>(&l.expr))
      scanBwdChain(*fo->body, cursorAt, n, out);
    if (auto* ab = std::get_if<EAccumBlock>(&l.expr))
      scanBwdChain(*ab->body, cursorAt, n, out);
  }
}

Block deleteLets(const Block& b, const std::unordered_set<VarId>& kill) {
  Block out;
  out.result = b.result;
  for (const Let& l : b.lets) {
    if (kill.count(l.var) && l.var != b.result) continue;
    Expr e = l.expr;
    if (auto* fo = std::get_if<EFor>(&e))
      e = EFor{fo->indexTy, fo->indexVar,
               std::make_shared<const Block>(deleteLets(*fo->body, kill))};
    else if (auto* ab = std::get_if<EAccumBlock>(&e))
      e = EAccumBlock{ab->accVar, ab->from,
                      std::make_shared<const Block>(deleteLets(*ab->body, kill))};
    out.lets.push_back(Let{l.var, l.ty, std::move(e)});
  }
  return out;
}

Block substVar(const Block& b, VarId from, VarId to) {
  Block out;
  out.result = b.result == from ? to : b.result;
  for (const Let& l : b.lets) {
    Expr e = l.expr;
    eachOperand(e, [&](VarId& v) {
      if (v == from) v = to;
    });
    if (auto* fo = std::get_if<EFor>(&e))
      e = EFor{fo->indexTy, fo->indexVar,
               std::make_shared<const Block>(substVar(*fo->body, from, to))};
    else if (auto* ab = std::get_if<EAccumBlock>(&e))
      e = EAccumBlock{ab->accVar, ab->from == from ? to : ab->from,
                      std::make_shared<const Block>(substVar(*ab->body, from, to))};
    out.lets.push_back(Let{l.var, l.ty, std::move(e)});
  }
  return out;
}

void narrowPair(FuncDef& fwd, FuncDef& bwd) {
  FwdChain fc;
  if (!parseFwdChain(fwd, fc)) return;
  size_t n = fc.entries.size();
  if (n == 0) return;

  BwdChain bc;
  bc.reads.assign(n, kNoVar);
  std::unordered_map<VarId, size_t> cursorAt;
  cursorAt[bwd.params.back().var] = 0;
  scanBwdChain(bwd.body, cursorAt, n, bc);

  // Type of each position's bound value.
  std::unordered_map<VarId, Ty> bty;
  {
    std::function<void(const Block&)> walk = [&](const Block& b) {
      for (const Let& l : b.lets) {
        bty.insert({l.var, l.ty});
        if (auto* fo = std::get_if<EFor>(&l.expr)) walk(*fo->body);
        if (auto* ab = std::get_if<EAccumBlock>(&l.expr)) walk(*ab->body);
      }
    };
    walk(bwd.body);
  }

  // A position is live when its value is used for anything other than
  // seeding a Real adjoint region (region seeds only fix the shape, and a
  // Real zero fixes it just as well).
  std::unordered_set<VarId> chainSet(bc.chainLets.begin(), bc.chainLets.end());
  std::vector<bool> live(n, false), zeroSeed(n, false);
  {
    std::unordered_map<VarId, size_t> pos;
    for (size_t i = 0; i < n; ++i)
      if (bc.reads[i] != kNoVar) pos[bc.reads[i]] = i;
    std::vector<int> otherUse(n, 0), seedUse(n, 0);
    std::function<void(const Block&)> walk = [&](const Block& b) {
      for (const Let& l : b.lets) {
        bool isSeed = false;
        if (auto* ab = std::get_if<EAccumBlock>(&l.expr)) {
          auto it = pos.find(ab->from);
          if (it != pos.end() && bty.at(bc.reads[it->second]) == Ty::real()) {
            seedUse[it->second]++;
            isSeed = true;
          }
          walk(*ab->body);
          if (isSeed) {
            // count any other operand of this let normally (none exist)
            continue;
          }
        }
        if (auto* fo = std::get_if<EFor>(&l.expr)) walk(*fo->body);
        if (chainSet.count(l.var)) continue;  // the reads themselves
        eachOperand(l.expr, [&](VarId v) {
          auto it = pos.find(v);
          if (it != pos.end()) otherUse[it->second]++;
        });
      }
      auto it = pos.find(b.result);
      if (it != pos.end()) otherUse[it->second]++;
    };
    walk(bwd.body);
    for (size_t i = 0; i < n; ++i) {
      if (bc.reads[i] == kNoVar) continue;
      if (otherUse[i] > 0)
        live[i] = true;
      else if (seedUse[i] > 0)
        zeroSeed[i] = true;
    }
  }

  bool allLive = true;
  for (size_t i = 0; i < n; ++i)
    if (!live[i]) allLive = false;
  if (allLive) return;

  // Entry types on the value-pass side.
  std::unordered_map<VarId, Ty> fty;
  for (const Let& l : fwd.body.lets) fty.insert({l.var, l.ty});
  for (const Param& p : fwd.params) fty.insert({p.var, p.ty});

  std::vector<size_t> keep;
  for (size_t i = 0; i < n; ++i)
    if (live[i]) keep.push_back(i);

  // Rebuild the value pass chain.
  {
    std::unordered_set<VarId> kill(fc.chainLets.begin(), fc.chainLets.end());
    kill.insert(fc.resultLet);
    fwd.body = deleteLets(fwd.body, kill);
    VarId chainVar;
    Ty chainTy = Ty::unit();
    if (keep.empty()) {
      chainVar = fwd.varCount++;
      fwd.body.lets.push_back(Let{chainVar, Ty::unit(), EUnit{}});
    } else if (keep.size() == 1) {
      chainVar = fc.entries[keep[0]];
      chainTy = fty.at(chainVar);
    } else {
      VarId cur = fwd.varCount++;
      fwd.body.lets.push_back(Let{cur, Ty::unit(), EUnit{}});
      Ty curTy = Ty::unit();
      for (size_t k = keep.size(); k-- > 0;) {
        VarId ev = fc.entries[keep[k]];
        VarId nv = fwd.varCount++;
        curTy = Ty::pair(fty.at(ev), curTy);
        fwd.body.lets.push_back(Let{nv, curTy, EPair{ev, cur}});
        cur = nv;
      }
      chainVar = cur;
      chainTy = curTy;
    }
    VarId rr = fwd.varCount++;
    Ty rrTy = Ty::pair(fty.at(fc.valueVar), chainTy);
    fwd.body.lets.push_back(Let{rr, rrTy, EPair{fc.valueVar, chainVar}});
    fwd.body.result = rr;
    fwd.ret = rrTy;
  }

  // Rebuild the derivative pass destructuring.
  {
    std::unordered_set<VarId> kill(bc.chainLets.begin(), bc.chainLets.end());
    bwd.body = deleteLets(bwd.body, kill);
    VarId tape = bwd.params.back().var;
    std::vector<Let> lead;
    if (keep.size() == 1) {
      VarId rv = bc.reads[keep[0]];
      bwd.params.back().ty = bty.at(rv);
      bwd.body = substVar(bwd.body, rv, tape);
    } else if (keep.empty()) {
      bwd.params.back().ty = Ty::unit();
    } else {
      // keep >= 2: fresh cursors, original read ids.
      std::vector<Ty> suf(keep.size() + 1, Ty::unit());
      for (size_t k = keep.size(); k-- > 0;)
        suf[k] = Ty::pair(bty.at(bc.reads[keep[k]]), suf[k + 1]);
      bwd.params.back().ty = suf[0];
      VarId cur = tape;
      for (size_t k = 0; k < keep.size(); ++k) {
        VarId rv = bc.reads[keep[k]];
        lead.push_back(Let{rv, bty.at(rv), EFst{cur}});
        if (k + 1 < keep.size()) {
          VarId nc = bwd.varCount++;
          lead.push_back(Let{nc, suf[k + 1], ESnd{cur}});
          cur = nc;
        }
      }
    }
    for (size_t i = 0; i < n; ++i) {
      if (live[i] || bc.reads[i] == kNoVar) continue;
      if (zeroSeed[i])
        lead.push_back(Let{bc.reads[i], Ty::real(), EConst{0.0}});
    }
    bwd.body.lets.insert(bwd.body.lets.begin(), lead.begin(), lead.end());
  }
}

void checkAndRegister(Registry& reg, FuncDef& def) {
  if (auto d = typecheckFunction(def, reg))
    fail(d->code, "internal: generated function '" + def.name +
                      "' fails to typecheck: " + d->message,
         def.name);
  reg.add(def);
}

}  // namespace

// ---------------------------------------------------------------------------
// Autodiff interface.

FuncId Autodiff::lift(FuncId f) {
  auto it = lifted_.find(f);
  if (it != lifted_.end()) return it->second;
  if (reg_.isOpaque(f)) {
    auto cj = reg_.customJvp.find(f);
    if (cj == reg_.customJvp.end())
      fail(ErrCode::MissingDerivative,
           "no derivative rule registered for opaque function '" +
               reg_.nameOf(f) + "'");
    lifted_[f] = cj->second;
    return cj->second;
  }
  std::function<FuncId(FuncId)> rec = [this](FuncId g) { return lift(g); };
  Lifter lifter(reg_, rec, reg_.def(f));
  FuncDef out = lifter.run();
  out.name = uniqueName(reg_, "jvp_" + reg_.nameOf(f));
  out = canonicalize(out);
  checkAndRegister(reg_, out);
  FuncId id = reg_.byName(out.name).value();
  lifted_[f] = id;
  return id;
}

SplitPair Autodiff::transposeStrict(FuncId lifted) {
  auto it = strict_.find(lifted);
  if (it != strict_.end()) return it->second;
  Transposer t(reg_, reg_.def(lifted),
               [this](FuncId g) { return transposeStrict(g); });
  t.run();
  std::string base = stripJvpPrefix(reg_.nameOf(lifted));
  FuncDef f = canonicalize(t.fwd);
  f.name = uniqueName(reg_, "fwd_" + base);
  checkAndRegister(reg_, f);
  FuncDef b = canonicalize(t.bwd);
  b.name = uniqueName(reg_, "bwd_" + base);
  checkAndRegister(reg_, b);
  SplitPair sp{reg_.byName(f.name).value(), reg_.byName(b.name).value()};
  strict_[lifted] = sp;
  return sp;
}

SplitPair Autodiff::transposed(FuncId lifted) {
  auto it = opt_.find(lifted);
  if (it != opt_.end()) return it->second;
  Transposer t(reg_, reg_.def(lifted),
               [this](FuncId g) { return transposed(g); });
  t.prune = true;
  t.run();
  FuncDef f = scalarize(t.fwd, t.metaF);
  FuncDef b = scalarize(t.bwd, t.metaB);
  f = simplify(f, reg_);
  b = simplify(b, reg_);
  narrowPair(f, b);
  f = simplify(f, reg_);
  b = simplify(b, reg_);
  std::string base = stripJvpPrefix(reg_.nameOf(lifted));
  f.name = uniqueName(reg_, "fwd_" + base);
  checkAndRegister(reg_, f);
  b.name = uniqueName(reg_, "bwd_" + base);
  checkAndRegister(reg_, b);
  SplitPair sp{reg_.byName(f.name).value(), reg_.byName(b.name).value()};
  opt_[lifted] = sp;
  return sp;
}

// ---------------------------------------------------------------------------
// Pullback recipes.

VjpResult vjp(Module& m, Autodiff& ad, FuncId f, const Val& x) {
  Registry& reg = ad.registry();
  if (reg.paramTypes(f).size() != 1)
    fail(ErrCode::MultiParamVjp,
         "pullbacks require a single-parameter function; '" + reg.nameOf(f) +
             "' takes " + std::to_string(reg.paramTypes(f).size()));
  FuncId j = ad.lift(f);
  SplitPair sp = ad.transposed(j);
  Val c0 = m.call(sp.fwd, {x});
  Val value = m.fst(c0);
  Val tape = m.snd(c0);
  auto grad = [&m, sp, x, tape](const Val& dy) -> Val {
    Val pr = m.accumRegion(
        x, [&](Val acc) { return m.call(sp.bwd, {acc, dy, tape}); });
    return m.fst(pr);
  };
  return VjpResult{value, grad};
}

FuncId gradientFn(Module& m, Autodiff& ad, FuncId f, const std::string& name) {
  Registry& reg = ad.registry();
  std::vector<Ty> ps = reg.paramTypes(f);
  if (ps.size() != 1)
    fail(ErrCode::MultiParamVjp,
         "gradients require a single-parameter function; '" + reg.nameOf(f) +
             "' takes " + std::to_string(ps.size()));
  if (reg.retType(f) != Ty::real())
    fail(ErrCode::TypeMismatch,
         "gradients require a Real-valued function; '" + reg.nameOf(f) +
             "' returns " + tyToString(reg.retType(f)));
  if (ps[0].containsVar())
    fail(ErrCode::TypeMismatch,
         "cannot take the gradient of a generic function");
  return m.fn(name, {ps[0]}, [&](std::vector<Val> args) {
    return vjp(m, ad, f, args[0]).grad(m.c(1.0));
  });
}

FuncId hessianFn(Module& m, Autodiff& ad, FuncId f, const std::string& name) {
  Registry& reg = ad.registry();
  std::vector<Ty> ps = reg.paramTypes(f);
  if (ps.size() != 1)
    fail(ErrCode::MultiParamVjp,
         "Hessians require a single-parameter function; '" + reg.nameOf(f) +
             "' takes " + std::to_string(ps.size()));
  const Ty& p = ps[0];
  if (!p.is(Ty::Tag::Arr) || !p.index().is(Ty::Tag::Fin) ||
      p.elem() != Ty::real())
    fail(ErrCode::TypeMismatch,
         "Hessians require a [n]Real parameter; '" + reg.nameOf(f) +
             "' takes " + tyToString(p));
  uint64_t n = p.index().finSize();
  FuncId g = gradientFn(m, ad, f, name + "_grad");
  return m.fn(name, {p}, [&, n, g](std::vector<Val> args) {
    VjpResult r = vjp(m, ad, g, args[0]);
    std::vector<Val> rows;
    for (uint64_t i = 0; i < n; ++i) {
      std::vector<Val> basis;
      for (uint64_t j = 0; j < n; ++j) basis.push_back(m.c(i == j ? 1.0 : 0.0));
      rows.push_back(r.grad(m.array(basis)));
    }
    return m.array(rows);
  });
}

}  // namespace gradir
