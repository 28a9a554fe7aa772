#pragma once

#include <string>

#include "gradir/ir.hpp"

namespace gradir {

// Deterministic textual form of a registry: every let explicit, variables
// renumbered densely in preorder, defs in id order, then jvp bindings.
// parseIr(printIr(reg)) is alpha-equal to reg for any validating registry.
std::string printIr(const Registry& reg);
std::string printDef(const FuncDef& def, const Registry& reg);

// Human-oriented rendering: single-use lets are inlined into their use
// sites. Not meant to be re-parsed; use printIr for round trips.
std::string printDefSugared(const FuncDef& def, const Registry& reg);

// Canonical shortest round-trip decimal form; integral values get a
// trailing ".0" so Real and index literals stay distinct tokens.
std::string fmtReal(double v);

}  // namespace gradir
