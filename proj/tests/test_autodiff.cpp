#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gradir/autodiff.hpp"
#include "gradir/builder.hpp"
#include "gradir/exec.hpp"
#include "gradir/parser.hpp"
#include "gradir/printer.hpp"

using namespace gradir;

namespace {

RtValue dual(double p, double t) {
  return RtValue::pair(RtValue::real(p), RtValue::real(t));
}

// A module with opaque sin/cos, a hand-written derivative rule for sin
// ((x, dx) -> (sin x, dx * cos x)), and f(u) = -sin(u).
struct SinFixture {
  Module m;
  FuncId sinId, cosId, jvpSin, f;
  SinFixture() {
    sinId = m.opaque("sin", 1, "sin");
    cosId = m.opaque("cos", 1, "cos");
    jvpSin = m.fn("jvp_sin", {Ty::pair(Ty::real(), Ty::real())},
                  [&](std::vector<Val> a) {
                    Val x = m.fst(a[0]);
                    Val dx = m.snd(a[0]);
                    Val s = m.call(sinId, {x});
                    Val c = m.call(cosId, {x});
                    Val t = dx * c;
                    return m.pair(s, t);
                  },
                  {"p"});
    m.setJvp(sinId, jvpSin);
    f = m.fn("f", {Ty::real()}, [&](std::vector<Val> a) {
      Val v = m.call(sinId, {a[0]});
      return -v;
    }, {"u"});
  }
};

}  // namespace

// Oracle: by the product rule, (2,3)*(5,7) = (2*5, 3*5 + 7*2) = (10, 29).
TEST_CASE("lifted product tracks the product rule") {
  Module m;
  Autodiff ad(m.registry());
  FuncId f = m.fn("mul2", {Ty::real(), Ty::real()},
                  [&](std::vector<Val> a) { return a[0] * a[1]; });
  FuncId j = ad.lift(f);
  Engine eng(m.registry());
  RtValue out = eng.invoke(j, {}, {dual(2, 3), dual(5, 7)});
  CHECK(out.asPair().first.asReal() == doctest::Approx(10.0).epsilon(1e-12));
  CHECK(out.asPair().second.asReal() == doctest::Approx(29.0).epsilon(1e-12));
}

// Oracle: by the quotient rule, (6,1)/(3,0) = (2, (1*3 - 0*6)/9) = (2, 1/3).
TEST_CASE("lifted quotient tracks the quotient rule") {
  Module m;
  Autodiff ad(m.registry());
  FuncId f = m.fn("div2", {Ty::real(), Ty::real()},
                  [&](std::vector<Val> a) { return a[0] / a[1]; });
  FuncId j = ad.lift(f);
  Engine eng(m.registry());
  RtValue out = eng.invoke(j, {}, {dual(6, 1), dual(3, 0)});
  CHECK(out.asPair().first.asReal() == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(out.asPair().second.asReal() ==
        doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

// Oracles: d sqrt(x) = dx / (2 sqrt x); d |x| = dx * sgn(x);
// d sgn(x) = 0; chain through sums and constants.
TEST_CASE("lifted unary rules: sqrt, abs, sgn") {
  Module m;
  Autodiff ad(m.registry());
  FuncId f = m.fn("g", {Ty::real()}, [&](std::vector<Val> a) {
    Val r = m.unary(UnaryOp::Sqrt, a[0]);
    Val b = m.unary(UnaryOp::Abs, a[0]);
    Val s = m.unary(UnaryOp::Sgn, a[0]);
    return r + b + s;
  });
  FuncId j = ad.lift(f);
  // The tangent of |x| at a negative point needs a second function; register
  // everything before building an engine, which snapshots the registry.
  FuncId h = m.fn("h", {Ty::real()}, [&](std::vector<Val> a) {
    return m.unary(UnaryOp::Abs, a[0]);
  });
  FuncId jh = ad.lift(h);
  Engine eng(m.registry());
  // At x = 9 with dx = 2: value 3 + 9 + 1 = 13, tangent 2/6 + 2*1 + 0.
  RtValue out = eng.invoke(j, {}, {dual(9, 2)});
  CHECK(out.asPair().first.asReal() == doctest::Approx(13.0).epsilon(1e-12));
  CHECK(out.asPair().second.asReal() ==
        doctest::Approx(2.0 / 6.0 + 2.0).epsilon(1e-12));
  // At x = -2 with dx = 5.
  RtValue o2 = eng.invoke(jh, {}, {dual(-2, 5)});
  CHECK(o2.asPair().first.asReal() == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(o2.asPair().second.asReal() == doctest::Approx(-5.0).epsilon(1e-12));
}

// The derivative lift of f(u) = -sin(u) against its hand-derived dual form:
// the registered sin rule is called, its scalar halves are projected once,
// and negation maps over both components.
TEST_CASE("lift of -sin(u) matches the hand-derived dual function") {
  SinFixture fx;
  Autodiff ad(fx.m.registry());
  FuncId j = ad.lift(fx.f);
  CHECK(fx.m.registry().nameOf(j) == "jvp_f");
  Registry expect = parseIr(R"(opaque sin(Real): Real = sin
opaque cos(Real): Real = cos
def jvp_sin(p: (Real, Real)): (Real, Real) =
  let x: Real = fst p in
  let dx: Real = snd p in
  let s: Real = sin(x) in
  let c: Real = cos(x) in
  let t: Real = (dx * c) in
  let r: (Real, Real) = (s, t) in
  r
def f(u: Real): Real =
  let v: Real = sin(u) in
  let w: Real = -v in
  w
def jvp_f(u: (Real, Real)): (Real, Real) =
  let v: (Real, Real) = jvp_sin(u) in
  let vp: Real = fst v in
  let vt: Real = snd v in
  let wp: Real = -vp in
  let wt: Real = -vt in
  let w: (Real, Real) = (wp, wt) in
  w
)");
  CHECK(alphaEqual(fx.m.registry().def(j), expect.def(4)));
}

TEST_CASE("a registered derivative rule is called, never itself lifted") {
  SinFixture fx;
  Autodiff ad(fx.m.registry());
  // Lifting the opaque resolves directly to the registered rule.
  CHECK(ad.lift(fx.sinId) == fx.jvpSin);
  ad.lift(fx.f);
  CHECK(!fx.m.registry().byName("jvp_jvp_sin").has_value());
  // The rule's body is untouched: it still calls the opaques directly.
  const FuncDef& rule = fx.m.registry().def(fx.jvpSin);
  size_t opaqueCalls = 0;
  for (const Let& l : rule.body.lets)
    if (auto* c = std::get_if<ECall>(&l.expr))
      if (fx.m.registry().isOpaque(c->callee)) ++opaqueCalls;
  CHECK(opaqueCalls == 2);
}

TEST_CASE("lifting an opaque without a derivative rule is an error") {
  Module m;
  Autodiff ad(m.registry());
  FuncId tanId = m.opaque("tan", 1, "tan");
  FuncId f = m.fn("f", {Ty::real()}, [&](std::vector<Val> a) {
    return m.call(tanId, {a[0]});
  });
  try {
    ad.lift(f);
    FAIL("expected a missing-derivative error");
  } catch (const Error& e) {
    CHECK(e.diag.code == ErrCode::MissingDerivative);
  }
  try {
    ad.lift(tanId);
    FAIL("expected a missing-derivative error");
  } catch (const Error& e) {
    CHECK(e.diag.code == ErrCode::MissingDerivative);
  }
}

// The unoptimized split of jvp_f, checked against the hand-derived protocol:
// the value pass keeps every binding (perturbation bindings zeroed), tapes
// them in source order with call results and callee tapes first, and the
// derivative pass destructures the tape, recomputes projections with
// accumulator aliases, opens one adjoint region per taped Real-carrying
// binding around the rest of the walk, and finishes with the callee's
// derivative pass fed by the decayed call adjoint.
TEST_CASE("strict split of -sin(u) matches the hand-derived passes") {
  SinFixture fx;
  Autodiff ad(fx.m.registry());
  FuncId j = ad.lift(fx.f);
  SplitPair sp = ad.transposeStrict(j);
  Registry& reg = fx.m.registry();
  CHECK(reg.nameOf(sp.fwd) == "fwd_f");
  CHECK(reg.nameOf(sp.bwd) == "bwd_f");
  REQUIRE(reg.byName("fwd_sin").has_value());
  REQUIRE(reg.byName("bwd_sin").has_value());

  Registry expect = parseIr(R"(opaque sin(Real): Real = sin
opaque cos(Real): Real = cos
def jvp_sin(p: (Real, Real)): (Real, Real) =
  let x: Real = fst p in
  let dx: Real = snd p in
  let s: Real = sin(x) in
  let c: Real = cos(x) in
  let t: Real = (dx * c) in
  let r: (Real, Real) = (s, t) in
  r
def f(u: Real): Real =
  let v: Real = sin(u) in
  let w: Real = -v in
  w
def jvp_f(u: (Real, Real)): (Real, Real) =
  let v: (Real, Real) = jvp_sin(u) in
  let vp: Real = fst v in
  let vt: Real = snd v in
  let wp: Real = -vp in
  let wt: Real = -vt in
  let w: (Real, Real) = (wp, wt) in
  w
def fwd_sin(p: (Real, Real)): ((Real, Real), (Real, (Real, (Real, (Real, (Real, ((Real, Real), ()))))))) =
  let x: Real = fst p in
  let dx: Real = snd p in
  let s: Real = sin(x) in
  let c: Real = cos(x) in
  let t: Real = 0.0 in
  let r: (Real, Real) = (s, t) in
  let u0: () = () in
  let k5: ((Real, Real), ()) = (r, u0) in
  let k4: (Real, ((Real, Real), ())) = (t, k5) in
  let k3: (Real, (Real, ((Real, Real), ()))) = (c, k4) in
  let k2: (Real, (Real, (Real, ((Real, Real), ())))) = (s, k3) in
  let k1: (Real, (Real, (Real, (Real, ((Real, Real), ()))))) = (dx, k2) in
  let k0: (Real, (Real, (Real, (Real, (Real, ((Real, Real), ())))))) = (x, k1) in
  let rr: ((Real, Real), (Real, (Real, (Real, (Real, (Real, ((Real, Real), ()))))))) = (r, k0) in
  rr
def bwd_sin(ddp: &(Real, Real), dy: (Real, Real), tp: (Real, (Real, (Real, (Real, (Real, ((Real, Real), ()))))))): () =
  let x: Real = fst tp in
  let n1: (Real, (Real, (Real, (Real, ((Real, Real), ()))))) = snd tp in
  let ddx: &Real = &fst ddp in
  let dx: Real = fst n1 in
  let n2: (Real, (Real, (Real, ((Real, Real), ())))) = snd n1 in
  let dddx: &Real = &snd ddp in
  let s: Real = fst n2 in
  let n3: (Real, (Real, ((Real, Real), ()))) = snd n2 in
  let prs: (Real, ()) = accum dds from s in
    let c: Real = fst n3 in
    let n4: (Real, ((Real, Real), ())) = snd n3 in
    let prc: (Real, ()) = accum ddc from c in
      let t: Real = fst n4 in
      let n5: ((Real, Real), ()) = snd n4 in
      let prt: (Real, ()) = accum ddt from t in
        let r: (Real, Real) = fst n5 in
        let prr: ((Real, Real), ()) = accum ddr from r in
          let sd: () = ddr += dy in
          sd
        in
        let dr: (Real, Real) = fst prr in
        let da: Real = fst dr in
        let w1: () = dds += da in
        let db: Real = snd dr in
        let w2: () = ddt += db in
        w2
      in
      let dt: Real = fst prt in
      let mm: Real = (dt * c) in
      let w3: () = dddx += mm in
      w3
    in
    let dc: Real = fst prc in
    let uc: () = () in
    uc
  in
  let ds: Real = fst prs in
  let ur: () = () in
  ur
def fwd_f(u: (Real, Real)): ((Real, Real), ((Real, Real), ((Real, (Real, (Real, (Real, (Real, ((Real, Real), ())))))), (Real, (Real, ((Real, Real), ())))))) =
  let c0: ((Real, Real), (Real, (Real, (Real, (Real, (Real, ((Real, Real), ()))))))) = fwd_sin(u) in
  let v: (Real, Real) = fst c0 in
  let t0: (Real, (Real, (Real, (Real, (Real, ((Real, Real), ())))))) = snd c0 in
  let vp: Real = fst v in
  let vt: Real = snd v in
  let wp: Real = -vp in
  let wt: Real = 0.0 in
  let w: (Real, Real) = (wp, wt) in
  let u0: () = () in
  let k4: ((Real, Real), ()) = (w, u0) in
  let k3: (Real, ((Real, Real), ())) = (wt, k4) in
  let k2: (Real, (Real, ((Real, Real), ()))) = (wp, k3) in
  let k1: ((Real, (Real, (Real, (Real, (Real, ((Real, Real), ())))))), (Real, (Real, ((Real, Real), ())))) = (t0, k2) in
  let k0: ((Real, Real), ((Real, (Real, (Real, (Real, (Real, ((Real, Real), ())))))), (Real, (Real, ((Real, Real), ()))))) = (v, k1) in
  let rr: ((Real, Real), ((Real, Real), ((Real, (Real, (Real, (Real, (Real, ((Real, Real), ())))))), (Real, (Real, ((Real, Real), ())))))) = (w, k0) in
  rr
def bwd_f(ddu: &(Real, Real), dy: (Real, Real), tp: ((Real, Real), ((Real, (Real, (Real, (Real, (Real, ((Real, Real), ())))))), (Real, (Real, ((Real, Real), ())))))): () =
  let v: (Real, Real) = fst tp in
  let n1: ((Real, (Real, (Real, (Real, (Real, ((Real, Real), ())))))), (Real, (Real, ((Real, Real), ())))) = snd tp in
  let t0: (Real, (Real, (Real, (Real, (Real, ((Real, Real), ())))))) = fst n1 in
  let n2: (Real, (Real, ((Real, Real), ()))) = snd n1 in
  let prv: ((Real, Real), ()) = accum ddv from v in
    let vp: Real = fst v in
    let ddvp: &Real = &fst ddv in
    let vt: Real = snd v in
    let ddvt: &Real = &snd ddv in
    let wp: Real = fst n2 in
    let n3: (Real, ((Real, Real), ())) = snd n2 in
    let prwp: (Real, ()) = accum ddwp from wp in
      let wt: Real = fst n3 in
      let n4: ((Real, Real), ()) = snd n3 in
      let prwt: (Real, ()) = accum ddwt from wt in
        let w: (Real, Real) = fst n4 in
        let prw: ((Real, Real), ()) = accum ddw from w in
          let sd: () = ddw += dy in
          sd
        in
        let dw: (Real, Real) = fst prw in
        let da: Real = fst dw in
        let w1: () = ddwp += da in
        let db: Real = snd dw in
        let w2: () = ddwt += db in
        w2
      in
      let dwt: Real = fst prwt in
      let nm: Real = -dwt in
      let w3: () = ddvt += nm in
      w3
    in
    let dwp: Real = fst prwp in
    let uw: () = () in
    uw
  in
  let dv: (Real, Real) = fst prv in
  let cl: () = bwd_sin(ddu, dv, t0) in
  cl
)");
  CHECK(alphaEqual(reg.def(*reg.byName("fwd_sin")), expect.def(5)));
  CHECK(alphaEqual(reg.def(*reg.byName("bwd_sin")), expect.def(6)));
  CHECK(alphaEqual(reg.def(sp.fwd), expect.def(7)));
  CHECK(alphaEqual(reg.def(sp.bwd), expect.def(8)));
}

// The strict passes must compute correct values: running fwd then bwd with
// an output adjoint recovers cos(u) * dy in the parameter accumulator.
TEST_CASE("strict split evaluates to the analytic pullback") {
  SinFixture fx;
  Autodiff ad(fx.m.registry());
  SplitPair sp = ad.transposeStrict(ad.lift(fx.f));
  double u = 0.7;
  // Drive the derivative pass through a host-side harness function so the
  // accumulator parameter is materialized by a region.
  Module& m = fx.m;
  FuncId drive = m.fn("drive", {Ty::real()}, [&](std::vector<Val> a) {
    Val du = m.pair(a[0], m.c(0.0));
    Val c0 = m.call(sp.fwd, {du});
    Val tape = m.snd(c0);
    Val dy = m.pair(m.c(0.0), m.c(1.0));
    Val pr = m.accumRegion(du, [&](Val acc) {
      return m.call(sp.bwd, {acc, dy, tape});
    });
    Val grad = m.fst(pr);
    return m.snd(grad);
  });
  Engine eng(m.registry());
  RtValue fwd = eng.invoke(sp.fwd, {}, {dual(u, 0)});
  CHECK(fwd.asPair().first.asPair().first.asReal() ==
        doctest::Approx(-std::sin(u)).epsilon(1e-12));
  RtValue g = eng.invoke(drive, {}, {RtValue::real(u)});
  CHECK(g.asReal() == doctest::Approx(-std::cos(u)).epsilon(1e-10));
}

TEST_CASE("nonlinear perturbation use is rejected") {
  auto expectNonlinear = [](const char* text) {
    Registry reg = parseIr(text);
    Autodiff ad(reg);
    try {
      ad.transposeStrict(*reg.byName("j"));
      return false;
    } catch (const Error& e) {
      return e.diag.code == ErrCode::NonlinearTangentUse;
    }
  };
  // A sum mixing a value with a perturbation.
  CHECK(expectNonlinear(R"(def j(p: (Real, Real)): Real =
  let x: Real = fst p in
  let dx: Real = snd p in
  let s: Real = (x + dx) in
  s
)"));
  // A product of two perturbations.
  CHECK(expectNonlinear(R"(def j(p: (Real, Real)): Real =
  let dx: Real = snd p in
  let s: Real = (dx * dx) in
  s
)"));
  // A division by a perturbation.
  CHECK(expectNonlinear(R"(def j(p: (Real, Real)): Real =
  let x: Real = fst p in
  let dx: Real = snd p in
  let s: Real = (x / dx) in
  s
)"));
  // A nonlinear primitive applied to a perturbation.
  CHECK(expectNonlinear(R"(def j(p: (Real, Real)): Real =
  let dx: Real = snd p in
  let s: Real = sqrt dx in
  s
)"));
  // A comparison of a perturbation.
  CHECK(expectNonlinear(R"(def j(p: (Real, Real)): (Real, Real) =
  let x: Real = fst p in
  let dx: Real = snd p in
  let c: Bool = (dx < x) in
  let s: Real = select(c, x, x) in
  let r: (Real, Real) = (s, dx) in
  r
)"));
  // An opaque call applied to a perturbation.
  CHECK(expectNonlinear(R"(opaque exp(Real): Real = exp
def j(p: (Real, Real)): Real =
  let dx: Real = snd p in
  let s: Real = exp(dx) in
  s
)"));
}

// Linear source functions transpose exactly: for f linear, the pullback of
// dy along f at any point is f^T(dy), checked here for the identity.
TEST_CASE("identity transposes to a plain adjoint hand-off") {
  Module m;
  Autodiff ad(m.registry());
  FuncId f = m.fn("id", {Ty::real()}, [&](std::vector<Val> a) {
    return a[0] + 0.0;
  });
  SplitPair sp = ad.transposed(ad.lift(f));
  FuncId drive = m.fn("drive", {Ty::real()}, [&](std::vector<Val> a) {
    Val c0 = m.call(sp.fwd, {a[0]});
    Val tape = m.snd(c0);
    Val pr = m.accumRegion(a[0], [&](Val acc) {
      return m.call(sp.bwd, {acc, m.c(3.25), tape});
    });
    return m.fst(pr);
  });
  Engine eng(m.registry());
  RtValue g = eng.invoke(drive, {}, {RtValue::real(11.0)});
  CHECK(g.asReal() == doctest::Approx(3.25).epsilon(1e-12));
}

TEST_CASE("lift handles nested loops, selects, and accumulation regions") {
  Module m;
  Autodiff ad(m.registry());
  // f(x) = sum_i (flag[i] ? x*x : x), over i in Fin 4, via a region.
  FuncId f = m.fn("f", {Ty::real()}, [&](std::vector<Val> a) {
    Val x = a[0];
    Val flags = m.array({m.boolean(true), m.boolean(true), m.boolean(false),
                         m.boolean(false)});
    Val pr = m.accumRegion(m.c(0.0), [&](Val acc) {
      return m.map(4, [&](Val i) {
        Val sq = x * x;
        Val cond = flags[i];
        Val v = m.select(cond, sq, x);
        return m.accumulate(acc, v);
      });
    });
    return m.fst(pr);
  });
  FuncId j = ad.lift(f);
  Engine eng(m.registry());
  // f(x) = 2x^2 + 2x, df = (4x + 2) dx; at x=3, dx=1: (24, 14).
  RtValue out = eng.invoke(j, {}, {dual(3, 1)});
  CHECK(out.asPair().first.asReal() == doctest::Approx(24.0).epsilon(1e-12));
  CHECK(out.asPair().second.asReal() == doctest::Approx(14.0).epsilon(1e-12));
}
