#pragma once

// Ill-typed programs with their expected diagnoses, shared by the unit
// tests and the acceptance runner. Each case either parses a source string
// or constructs a registry directly (for shapes the grammar cannot spell).

#include <functional>
#include <string>
#include <vector>

#include "gradir/ir.hpp"
#include "gradir/parser.hpp"

namespace gradir::testing {

struct NegativeCase {
  std::string label;
  ErrCode expected;
  std::function<Registry()> make;
};

inline std::vector<NegativeCase> negativeCorpus() {
  auto text = [](std::string src) {
    return [src = std::move(src)]() { return parseIr(src); };
  };
  std::vector<NegativeCase> cases;

  cases.push_back({"unbound variable reference", ErrCode::UnboundVar,
                   text("def f(x: Real): Real = y\n")});

  cases.push_back({"result type disagrees with signature",
                   ErrCode::TypeMismatch,
                   text("def f(x: Real): Bool = x\n")});

  cases.push_back({"let annotation disagrees with operation",
                   ErrCode::TypeMismatch,
                   text("def f(x: Real): Real =\n"
                        "  let b: Bool = (x + x) in\n"
                        "  x\n")});

  cases.push_back({"index literal exceeds its bound", ErrCode::FinOutOfRange,
                   text("def f(x: Real): 3 =\n"
                        "  let i: 3 = 5 in\n"
                        "  i\n")});

  cases.push_back({"duplicate variable binding", ErrCode::DuplicateBinding,
                   []() {
                     FuncDef fd;
                     fd.id = 0;
                     fd.name = "f";
                     fd.params = {{0, Ty::real()}, {0, Ty::real()}};
                     fd.ret = Ty::real();
                     fd.body.result = 0;
                     fd.varCount = 1;
                     Registry reg;
                     reg.add(std::move(fd));
                     return reg;
                   }});

  cases.push_back({"call with wrong argument count", ErrCode::ArityMismatch,
                   text("def g(x: Real): Real =\n"
                        "  let y: Real = (x * x) in\n"
                        "  y\n"
                        "def f(x: Real): Real =\n"
                        "  let y: Real = g(x, x) in\n"
                        "  y\n")});

  cases.push_back({"value type passed for an index generic",
                   ErrCode::BadGenericInstantiation,
                   text("def g<n: Index>(v: [n]Real): Real =\n"
                        "  let i: Real = 0.0 in\n"
                        "  i\n"
                        "def f(v: [3]Real): Real =\n"
                        "  let y: Real = g<Real>(v) in\n"
                        "  y\n")});

  cases.push_back({"accumulator returned from a def",
                   ErrCode::AccumulatorEscape,
                   text("def f(x: &Real): &Real = x\n")});

  cases.push_back({"accumulator smuggled out of its region",
                   ErrCode::AccumulatorEscape,
                   text("def f(x: Real): Real =\n"
                        "  let t: (Real, Real) = accum a from x in\n"
                        "    a\n"
                        "  in\n"
                        "  x\n")});

  cases.push_back({"call to a function that does not exist",
                   ErrCode::UnresolvedCallee,
                   text("def f(x: Real): Real =\n"
                        "  let y: Real = h(x) in\n"
                        "  y\n")});

  cases.push_back({"mutually recursive defs", ErrCode::RecursionCycle,
                   text("def f(x: Real): Real =\n"
                        "  let y: Real = g(x) in\n"
                        "  y\n"
                        "def g(x: Real): Real =\n"
                        "  let y: Real = f(x) in\n"
                        "  y\n")});

  cases.push_back({"custom derivative with an unlifted signature",
                   ErrCode::BadCustomJvpSignature,
                   text("opaque sin(Real): Real = sin\n"
                        "def wrong(x: Real): Real =\n"
                        "  let y: Real = (x * x) in\n"
                        "  y\n"
                        "jvp sin = wrong\n")});

  cases.push_back({"array indexed by a non-index type",
                   ErrCode::NonValueComponent,
                   text("def f(v: [&Real]Real): Real =\n"
                        "  let c: Real = 1.0 in\n"
                        "  c\n")});

  cases.push_back({"type variable never declared", ErrCode::UnboundTypeVar,
                   text("def f(v: [n]Real): Real =\n"
                        "  let c: Real = 1.0 in\n"
                        "  c\n")});

  cases.push_back({"accumulate into a plain value", ErrCode::TypeMismatch,
                   text("def f(x: Real): Real =\n"
                        "  let u: () = x += x in\n"
                        "  x\n")});

  cases.push_back({"select condition that is not boolean",
                   ErrCode::TypeMismatch,
                   text("def f(x: Real): Real =\n"
                        "  let y: Real = select(x, x, x) in\n"
                        "  y\n")});

  return cases;
}

// Runs one case: the program must fail validation and the first diagnostic
// must carry the expected code. Throws from make() count as a miss.
inline bool negativeCaseHits(const NegativeCase& c, std::string* detail) {
  Registry reg;
  try {
    reg = c.make();
  } catch (const Error& e) {
    if (detail) *detail = "failed before validation: " + std::string(e.what());
    return false;
  }
  std::vector<Diag> diags = validateRegistry(reg);
  if (diags.empty()) {
    if (detail) *detail = "validated cleanly";
    return false;
  }
  for (const Diag& d : diags) {
    if (d.code == c.expected) return true;
  }
  if (detail) *detail = "got " + diags.front().str();
  return false;
}

}  // namespace gradir::testing
