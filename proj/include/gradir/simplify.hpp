#pragma once

#include "gradir/ir.hpp"

namespace gradir {

// Local cleanup pass: structural construct/destruct cancellation,
// additive/multiplicative identity folding, accumulation-region elision,
// and effect-aware dead code elimination, iterated to a fixpoint.
//
// Semantics are preserved on typechecked inputs, with one documented
// exception: folding x*0 -> 0 (and 0/y -> 0) short-circuits IEEE NaN/Inf
// propagation, and folding -0.0 may normalize a zero's sign. Finite
// results are unchanged.
FuncDef simplify(const FuncDef& def, const Registry& reg);

}  // namespace gradir
