#pragma once

#include <string>

#include "gradir/ir.hpp"

namespace gradir {

// Parses the textual registry form produced by printIr. Also accepts two
// conveniences the printer never emits: `e; rest` sequencing (binds e to a
// fresh unit-typed let) and a non-variable expression in result position
// (bound to a fresh let whose type is synthesized locally).
//
// Throws Error{ParseError} on malformed syntax. Ill-typed but well-formed
// programs parse fine; validateRegistry reports their errors.
Registry parseIr(const std::string& text);

// Lexical helpers shared with the printer (which must emit re-parseable
// variable names).
bool isValidIdent(const std::string& s);
bool isReservedWord(const std::string& s);

}  // namespace gradir
