#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>
#include <string>
#include <vector>

#include "gradir/exec.hpp"
#include "gradir/ir.hpp"
#include "gradir/parser.hpp"
#include "gradir/printer.hpp"
#include "gradir/simplify.hpp"

using namespace gradir;

namespace {

// Parses a single-def registry, simplifies the def, and checks the result
// against an expected single-def registry (alpha-equivalence; names must
// agree).
void checkSimplifies(const std::string& input, const std::string& expected) {
  Registry rin = parseIr(input);
  Registry rexp = parseIr(expected);
  REQUIRE(validateRegistry(rin).empty());
  REQUIRE(validateRegistry(rexp).empty());
  REQUIRE(rin.funcs.size() == rexp.funcs.size());
  for (size_t i = 0; i < rin.funcs.size(); ++i) {
    auto* d = std::get_if<FuncDef>(&rin.funcs[i]);
    if (!d) continue;
    FuncDef got = simplify(*d, rin);
    Registry shown = rin;
    *std::get_if<FuncDef>(&shown.funcs[i]) = got;
    INFO("got:\n", printIr(shown));
    CHECK(alphaEqual(got, *std::get_if<FuncDef>(&rexp.funcs[i])));
  }
}

double runScalar(const Registry& reg, FuncId f, const std::vector<double>& xs) {
  Engine eng(reg);
  std::vector<RtValue> args;
  for (double x : xs) args.push_back(RtValue::real(x));
  RtValue out = eng.invoke(f, {}, std::move(args));
  return out.asReal();
}

}  // namespace

TEST_CASE("pair construct/destruct cancels and the pair dies") {
  checkSimplifies(
      "def f(x: Real, y: Real): Real =\n"
      "  let p: (Real, Real) = (x, y) in\n"
      "  let a: Real = fst p in\n"
      "  let b: Real = snd p in\n"
      "  let s: Real = (a + b) in\n"
      "  s\n",
      "def f(x: Real, y: Real): Real =\n"
      "  let s: Real = (x + y) in\n"
      "  s\n");
}

TEST_CASE("array literal indexed by a literal cancels") {
  checkSimplifies(
      "def g(x: Real, y: Real): Real =\n"
      "  let v: [2]Real = [x, y] in\n"
      "  let i: 2 = 1 in\n"
      "  let e: Real = v[i] in\n"
      "  let s: Real = (e + e) in\n"
      "  s\n",
      "def g(x: Real, y: Real): Real =\n"
      "  let s: Real = (y + y) in\n"
      "  s\n");
}

TEST_CASE("additive and multiplicative identities fold away completely") {
  checkSimplifies(
      "def h(x: Real): Real =\n"
      "  let z: Real = 0.0 in\n"
      "  let o: Real = 1.0 in\n"
      "  let a: Real = (x + z) in\n"
      "  let b: Real = (a * o) in\n"
      "  let c: Real = (b - z) in\n"
      "  let d: Real = (c / o) in\n"
      "  d\n",
      "def h(x: Real): Real =\n"
      "  x\n");
}

TEST_CASE("multiplication by literal zero folds to the zero") {
  checkSimplifies(
      "def mz(x: Real): Real =\n"
      "  let z: Real = 0.0 in\n"
      "  let m: Real = (x * z) in\n"
      "  m\n",
      "def mz(x: Real): Real =\n"
      "  let z: Real = 0.0 in\n"
      "  z\n");
}

TEST_CASE("double negation cancels") {
  checkSimplifies(
      "def nn(x: Real): Real =\n"
      "  let a: Real = -x in\n"
      "  let b: Real = -a in\n"
      "  b\n",
      "def nn(x: Real): Real =\n"
      "  x\n");
}

TEST_CASE("zero minus x becomes negation") {
  checkSimplifies(
      "def zs(x: Real): Real =\n"
      "  let z: Real = 0.0 in\n"
      "  let a: Real = (z - x) in\n"
      "  a\n",
      "def zs(x: Real): Real =\n"
      "  let a: Real = -x in\n"
      "  a\n");
}

TEST_CASE("select with equal branches folds; literal condition folds") {
  checkSimplifies(
      "def se(p: Bool, x: Real, y: Real): Real =\n"
      "  let a: Real = select(p, x, x) in\n"
      "  let t: Bool = true in\n"
      "  let b: Real = select(t, a, y) in\n"
      "  b\n",
      "def se(p: Bool, x: Real, y: Real): Real =\n"
      "  x\n");
}

TEST_CASE("single-write accumulation region collapses to its value") {
  checkSimplifies(
      "def r1(x: Real): Real =\n"
      "  let z: Real = 0.0 in\n"
      "  let t: (Real, ()) = accum a from z in\n"
      "    let u: () = a += x in\n"
      "    u\n"
      "  in\n"
      "  let y: Real = fst t in\n"
      "  y\n",
      "def r1(x: Real): Real =\n"
      "  x\n");
}

TEST_CASE("untouched accumulation region collapses to a zero") {
  checkSimplifies(
      "def r0(x: Real): Real =\n"
      "  let q: Real = (x + x) in\n"
      "  let t: (Real, Real) = accum a from q in\n"
      "    let w: Real = (x * x) in\n"
      "    w\n"
      "  in\n"
      "  let f0: Real = fst t in\n"
      "  let s: Real = snd t in\n"
      "  let r: Real = (f0 + s) in\n"
      "  r\n",
      "def r0(x: Real): Real =\n"
      "  let w: Real = (x * x) in\n"
      "  w\n");
}

TEST_CASE("accumulating a literal zero is erased, then the region collapses") {
  checkSimplifies(
      "def za(x: Real): Real =\n"
      "  let z: Real = 0.0 in\n"
      "  let t: (Real, ()) = accum a from z in\n"
      "    let u: () = a += z in\n"
      "    u\n"
      "  in\n"
      "  let y: Real = fst t in\n"
      "  y\n",
      "def za(x: Real): Real =\n"
      "  let z: Real = 0.0 in\n"
      "  z\n");
}

TEST_CASE("a region with a loop of writes is preserved") {
  const std::string text =
      "def fk(x: Real): Real =\n"
      "  let z: Real = 0.0 in\n"
      "  let t: (Real, [3]()) = accum a from z in\n"
      "    let q: [3]() = [for i: 3,\n"
      "      let u: () = a += x in\n"
      "      u\n"
      "    ] in\n"
      "    q\n"
      "  in\n"
      "  let y: Real = fst t in\n"
      "  y\n";
  Registry reg = parseIr(text);
  REQUIRE(validateRegistry(reg).empty());
  FuncDef got = simplify(reg.def(0), reg);
  CHECK(alphaEqual(got, reg.def(0)));  // nothing to simplify
  Registry out = reg;
  *std::get_if<FuncDef>(&out.funcs[0]) = got;
  CHECK(runScalar(out, 0, {2.0}) == 3 * 2.0);
}

TEST_CASE("a dead loop that writes an outer accumulator is retained") {
  const std::string text =
      "def fd(x: Real): Real =\n"
      "  let z: Real = 0.0 in\n"
      "  let t: (Real, ()) = accum a from z in\n"
      "    let w: [2]() = [for i: 2,\n"
      "      let u: () = a += x in\n"
      "      u\n"
      "    ] in\n"
      "    let uu: () = () in\n"
      "    uu\n"
      "  in\n"
      "  let y: Real = fst t in\n"
      "  y\n";
  Registry reg = parseIr(text);
  REQUIRE(validateRegistry(reg).empty());
  FuncDef got = simplify(reg.def(0), reg);
  Registry out = reg;
  *std::get_if<FuncDef>(&out.funcs[0]) = got;
  // The loop result w is unused, but dropping it would lose the writes.
  CHECK(runScalar(out, 0, {5.0}) == 2 * 5.0);
}

TEST_CASE("dead pure lets are removed; opaque calls are not") {
  checkSimplifies(
      "opaque sin(Real): Real = sin\n"
      "def oc(x: Real): Real =\n"
      "  let d1: Real = (x * x) in\n"
      "  let d2: Real = (d1 + x) in\n"
      "  let s: Real = sin(x) in\n"
      "  let r: Real = (x + x) in\n"
      "  r\n",
      "opaque sin(Real): Real = sin\n"
      "def oc(x: Real): Real =\n"
      "  let s: Real = sin(x) in\n"
      "  let r: Real = (x + x) in\n"
      "  r\n");
}

TEST_CASE("dead calls to defined functions are removed") {
  checkSimplifies(
      "def sq(x: Real): Real =\n"
      "  let m: Real = (x * x) in\n"
      "  m\n"
      "def dc(x: Real): Real =\n"
      "  let s: Real = sq(x) in\n"
      "  let r: Real = (x + x) in\n"
      "  r\n",
      "def sq(x: Real): Real =\n"
      "  let m: Real = (x * x) in\n"
      "  m\n"
      "def dc(x: Real): Real =\n"
      "  let r: Real = (x + x) in\n"
      "  r\n");
}

TEST_CASE("folds do not touch genuine work") {
  const std::string text =
      "def keep(x: Real, y: Real): Real =\n"
      "  let m: Real = (x * y) in\n"
      "  let s: Real = (m + x) in\n"
      "  let q: Real = (s / y) in\n"
      "  q\n";
  Registry reg = parseIr(text);
  FuncDef got = simplify(reg.def(0), reg);
  CHECK(alphaEqual(got, reg.def(0)));
}

TEST_CASE("simplify is idempotent and never grows a def") {
  const std::vector<std::string> programs = {
      "def f(x: Real, y: Real): Real =\n"
      "  let p: (Real, Real) = (x, y) in\n"
      "  let a: Real = fst p in\n"
      "  let b: Real = snd p in\n"
      "  let s: Real = (a + b) in\n"
      "  s\n",
      "def sum3(v: [3]Real): Real =\n"
      "  let z: Real = 0.0 in\n"
      "  let t: (Real, [3]()) = accum a from z in\n"
      "    let q: [3]() = [for i: 3,\n"
      "      let e: Real = v[i] in\n"
      "      let u: () = a += e in\n"
      "      u\n"
      "    ] in\n"
      "    q\n"
      "  in\n"
      "  let y: Real = fst t in\n"
      "  y\n",
      "def h(x: Real): Real =\n"
      "  let z: Real = 0.0 in\n"
      "  let o: Real = 1.0 in\n"
      "  let a: Real = (x + z) in\n"
      "  let b: Real = (a * o) in\n"
      "  let c: Real = (x * z) in\n"
      "  let d: Real = (b + c) in\n"
      "  d\n",
  };
  for (const std::string& text : programs) {
    CAPTURE(text);
    Registry reg = parseIr(text);
    REQUIRE(validateRegistry(reg).empty());
    FuncDef once = simplify(reg.def(0), reg);
    FuncDef twice = simplify(once, reg);
    CHECK(alphaEqual(once, twice));
    CHECK(staticLetCount(once) <= staticLetCount(reg.def(0)));
  }
}

TEST_CASE("simplified defs compute the same values") {
  const std::string text =
      "def probe(x: Real, y: Real): Real =\n"
      "  let z: Real = 0.0 in\n"
      "  let o: Real = 1.0 in\n"
      "  let p: (Real, Real) = (x, y) in\n"
      "  let a: Real = fst p in\n"
      "  let b: Real = snd p in\n"
      "  let m: Real = (a * b) in\n"
      "  let m1: Real = (m + z) in\n"
      "  let m2: Real = (m1 * o) in\n"
      "  let t: (Real, ()) = accum ac from z in\n"
      "    let u: () = ac += m2 in\n"
      "    u\n"
      "  in\n"
      "  let f0: Real = fst t in\n"
      "  let nx: Real = -f0 in\n"
      "  let nn: Real = -nx in\n"
      "  nn\n";
  Registry reg = parseIr(text);
  REQUIRE(validateRegistry(reg).empty());
  Registry simp = reg;
  *std::get_if<FuncDef>(&simp.funcs[0]) = simplify(reg.def(0), reg);

  std::mt19937 rng(7);
  std::uniform_real_distribution<double> dist(-3.0, 3.0);
  for (int i = 0; i < 50; ++i) {
    double x = dist(rng), y = dist(rng);
    CHECK(runScalar(reg, 0, {x, y}) == runScalar(simp, 0, {x, y}));
  }
}

TEST_CASE("simplified output still typechecks") {
  const std::string text =
      "def probe(x: Real): Real =\n"
      "  let z: Real = 0.0 in\n"
      "  let t: (Real, ()) = accum a from z in\n"
      "    let u: () = a += x in\n"
      "    u\n"
      "  in\n"
      "  let y: Real = fst t in\n"
      "  let w: Real = (y + z) in\n"
      "  w\n";
  Registry reg = parseIr(text);
  FuncDef got = simplify(reg.def(0), reg);
  Registry out = reg;
  *std::get_if<FuncDef>(&out.funcs[0]) = got;
  CHECK(validateRegistry(out).empty());
}
