#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>

#include "gradir/builder.hpp"
#include "gradir/ir.hpp"

namespace gradir {

// A function split into a value pass and a derivative pass. `fwd` computes
// the original result together with a tape of intermediate values; `bwd`
// consumes an output adjoint plus that tape and accumulates input adjoints.
struct SplitPair {
  FuncId fwd = 0;
  FuncId bwd = 0;
};

// Derivative transforms over a registry. All generated functions are
// canonicalized, typechecked, and registered in the underlying registry;
// results are memoized per source function, so repeated requests are cheap
// and shared callees are transformed once.
class Autodiff {
 public:
  explicit Autodiff(Registry& reg) : reg_(reg) {}

  // Forward-derivative lift: returns a function of the same shape where
  // every Real has been replaced by a (value, perturbation) pair. Calls to
  // functions with a registered derivative rule are redirected to that rule;
  // calls to other definitions recursively lift the callee. Lifting an
  // opaque function returns its derivative rule directly.
  FuncId lift(FuncId f);

  // Transposition of a lifted function into a value/derivative pair, kept in
  // the fully paired form produced by the rewrite rules (useful for
  // inspection and for the transposition correctness identity).
  SplitPair transposeStrict(FuncId lifted);

  // Transposition followed by scalarization (collapsing degenerate
  // value/perturbation pairs), simplification, and tape narrowing. This is
  // the pair the executor should run.
  SplitPair transposed(FuncId lifted);

  Registry& registry() { return reg_; }

 private:
  Registry& reg_;
  std::unordered_map<FuncId, FuncId> lifted_;
  std::unordered_map<FuncId, SplitPair> strict_;
  std::unordered_map<FuncId, SplitPair> opt_;
};

// Result of a value-and-pullback request: the traced value of f(x) plus a
// `grad` closure that maps an output adjoint to the input adjoint. `grad`
// may be invoked any number of times while the module trace that produced
// it is still open; each call replays only the derivative pass.
struct VjpResult {
  Val value;
  std::function<Val(const Val&)> grad;
};

// Trace a value/pullback pair for unary `f` at `x` into the module's
// currently open function. `m.registry()` must be the registry `ad` was
// constructed over. Fails with MultiParamVjp if `f` does not take exactly
// one parameter.
VjpResult vjp(Module& m, Autodiff& ad, FuncId f, const Val& x);

// Define and register `name`, computing the gradient of the Real-valued
// unary function `f` (same parameter type, result is the input adjoint).
FuncId gradientFn(Module& m, Autodiff& ad, FuncId f, const std::string& name);

// Define and register `name`, computing the dense Hessian of `f`, which
// must map [n]Real -> Real. The result has type [n][n]Real and is computed
// as n pullbacks of the gradient function (one value pass, n derivative
// passes per evaluation).
FuncId hessianFn(Module& m, Autodiff& ad, FuncId f, const std::string& name);

}  // namespace gradir
