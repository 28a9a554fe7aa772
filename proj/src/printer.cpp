#include "gradir/printer.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "gradir/parser.hpp"

namespace gradir {

std::string fmtReal(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v < 0 ? "-inf" : "inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  std::string s(buf, res.ptr);
  bool bare = s.find_first_of(".eE") == std::string::npos;
  if (bare) s += ".0";
  return s;
}

namespace {

void collectBinders(const Block& b, std::vector<VarId>& out) {
  for (const Let& l : b.lets) {
    out.push_back(l.var);
    if (const auto* f = std::get_if<EFor>(&l.expr)) {
      out.push_back(f->indexVar);
      collectBinders(*f->body, out);
    } else if (const auto* a = std::get_if<EAccumBlock>(&l.expr)) {
      out.push_back(a->accVar);
      collectBinders(*a->body, out);
    }
  }
}

bool looksLikeFallback(const std::string& s) {
  if (s.size() < 2 || s[0] != 'x') return false;
  for (size_t i = 1; i < s.size(); ++i)
    if (s[i] < '0' || s[i] > '9') return false;
  return true;
}

// Printable name per binder: the recorded debug name when it is a valid,
// unreserved, unique identifier; otherwise x<id>. Names shaped like the
// fallback are rejected so fallbacks can never collide with kept names.
std::unordered_map<VarId, std::string> renderNames(const FuncDef& def) {
  std::vector<VarId> binders;
  for (const Param& p : def.params) binders.push_back(p.var);
  collectBinders(def.body, binders);
  std::unordered_map<VarId, std::string> out;
  std::unordered_set<std::string> used;
  for (VarId v : binders) {
    std::string name = "x" + std::to_string(v);
    auto it = def.varNames.find(v);
    if (it != def.varNames.end() && isValidIdent(it->second) &&
        !isReservedWord(it->second) && !looksLikeFallback(it->second) &&
        !used.count(it->second)) {
      name = it->second;
    }
    used.insert(name);
    out.emplace(v, std::move(name));
  }
  return out;
}

class Printer {
 public:
  Printer(const FuncDef& def, const Registry& reg)
      : def_(def), reg_(reg), names_(renderNames(def)) {}

  std::string run() {
    out_ << "def " << def_.name;
    if (!def_.generics.empty()) {
      out_ << "<";
      for (size_t i = 0; i < def_.generics.size(); ++i) {
        if (i) out_ << ", ";
        out_ << def_.generics[i].name << ": " << kindName(def_.generics[i].kind);
      }
      out_ << ">";
    }
    out_ << "(";
    for (size_t i = 0; i < def_.params.size(); ++i) {
      if (i) out_ << ", ";
      out_ << name(def_.params[i].var) << ": " << tyToString(def_.params[i].ty);
    }
    out_ << "): " << tyToString(def_.ret) << " =\n";
    block(def_.body, 1);
    return out_.str();
  }

 private:
  std::string name(VarId v) const {
    auto it = names_.find(v);
    if (it != names_.end()) return it->second;
    return "x" + std::to_string(v);
  }

  std::string ind(int depth) const { return std::string(2 * size_t(depth), ' '); }

  void block(const Block& b, int depth) {
    for (const Let& l : b.lets) {
      out_ << ind(depth) << "let " << name(l.var) << ": " << tyToString(l.ty)
           << " = ";
      expr(l.expr, depth);
      out_ << "\n";
    }
    out_ << ind(depth) << name(b.result) << "\n";
  }

  // Emits the expression followed by the let-terminating "in" (inline for
  // flat expressions, on its own line after multi-line bodies).
  void expr(const Expr& e, int depth) {
    std::visit(
        [&](const auto& n) {
          using T = std::decay_t<decltype(n)>;
          if constexpr (std::is_same_v<T, EUnit>) {
            out_ << "() in";
          } else if constexpr (std::is_same_v<T, ETrue>) {
            out_ << "true in";
          } else if constexpr (std::is_same_v<T, EFalse>) {
            out_ << "false in";
          } else if constexpr (std::is_same_v<T, EConst>) {
            out_ << fmtReal(n.value) << " in";
          } else if constexpr (std::is_same_v<T, EFin>) {
            out_ << n.value << " in";
          } else if constexpr (std::is_same_v<T, EArray>) {
            out_ << "[";
            for (size_t i = 0; i < n.elems.size(); ++i) {
              if (i) out_ << ", ";
              out_ << name(n.elems[i]);
            }
            out_ << "] in";
          } else if constexpr (std::is_same_v<T, EPair>) {
            out_ << "(" << name(n.first) << ", " << name(n.second) << ") in";
          } else if constexpr (std::is_same_v<T, EUnary>) {
            switch (n.op) {
              case UnaryOp::Not: out_ << "!" << name(n.x); break;
              case UnaryOp::Neg: out_ << "-" << name(n.x); break;
              default: out_ << unaryOpName(n.op) << " " << name(n.x); break;
            }
            out_ << " in";
          } else if constexpr (std::is_same_v<T, EBinary>) {
            out_ << "(" << name(n.lhs) << " " << binaryOpName(n.op) << " "
                 << name(n.rhs) << ") in";
          } else if constexpr (std::is_same_v<T, ESelect>) {
            out_ << "select(" << name(n.cond) << ", " << name(n.then) << ", "
                 << name(n.otherwise) << ") in";
          } else if constexpr (std::is_same_v<T, EAccum>) {
            out_ << name(n.target) << " += " << name(n.value) << " in";
          } else if constexpr (std::is_same_v<T, EIndex>) {
            out_ << name(n.arr) << "[" << name(n.idx) << "] in";
          } else if constexpr (std::is_same_v<T, EFst>) {
            out_ << "fst " << name(n.pair) << " in";
          } else if constexpr (std::is_same_v<T, ESnd>) {
            out_ << "snd " << name(n.pair) << " in";
          } else if constexpr (std::is_same_v<T, ERefIndex>) {
            out_ << "&" << name(n.arr) << "[" << name(n.idx) << "] in";
          } else if constexpr (std::is_same_v<T, ERefFst>) {
            out_ << "&fst " << name(n.pair) << " in";
          } else if constexpr (std::is_same_v<T, ERefSnd>) {
            out_ << "&snd " << name(n.pair) << " in";
          } else if constexpr (std::is_same_v<T, ECall>) {
            out_ << reg_.nameOf(n.callee);
            if (!n.typeArgs.empty()) {
              out_ << "<";
              for (size_t i = 0; i < n.typeArgs.size(); ++i) {
                if (i) out_ << ", ";
                out_ << tyToString(n.typeArgs[i]);
              }
              out_ << ">";
            }
            out_ << "(";
            for (size_t i = 0; i < n.args.size(); ++i) {
              if (i) out_ << ", ";
              out_ << name(n.args[i]);
            }
            out_ << ") in";
          } else if constexpr (std::is_same_v<T, EFor>) {
            out_ << "[for " << name(n.indexVar) << ": "
                 << tyToString(n.indexTy) << ",\n";
            block(*n.body, depth + 1);
            out_ << ind(depth) << "] in";
          } else if constexpr (std::is_same_v<T, EAccumBlock>) {
            out_ << "accum " << name(n.accVar) << " from " << name(n.from)
                 << " in\n";
            block(*n.body, depth + 1);
            out_ << ind(depth) << "in";
          }
        },
        e);
  }

  const FuncDef& def_;
  const Registry& reg_;
  std::unordered_map<VarId, std::string> names_;
  std::ostringstream out_;
};

// ---------------------------------------------------------------------------
// Sugared display printer: single-use lets are folded into their use sites.

class Sugarer {
 public:
  Sugarer(const FuncDef& def, const Registry& reg)
      : def_(def), reg_(reg), names_(renderNames(def)) {
    countUses(def_.body);
  }

  std::string run() {
    std::ostringstream out;
    out << "def " << def_.name;
    if (!def_.generics.empty()) {
      out << "<";
      for (size_t i = 0; i < def_.generics.size(); ++i) {
        if (i) out << ", ";
        out << def_.generics[i].name << ": " << kindName(def_.generics[i].kind);
      }
      out << ">";
    }
    out << "(";
    for (size_t i = 0; i < def_.params.size(); ++i) {
      if (i) out << ", ";
      out << name(def_.params[i].var) << ": " << tyToString(def_.params[i].ty);
    }
    out << "): " << tyToString(def_.ret) << " = " << blockStr(def_.body);
    return out.str();
  }

 private:
  std::string name(VarId v) const {
    auto it = names_.find(v);
    if (it != names_.end()) return it->second;
    return "x" + std::to_string(v);
  }

  void bump(VarId v) { uses_[v]++; }

  void countUses(const Block& b) {
    for (const Let& l : b.lets) {
      std::visit(
          [&](const auto& n) {
            using T = std::decay_t<decltype(n)>;
            if constexpr (std::is_same_v<T, EArray>) {
              for (VarId e : n.elems) bump(e);
            } else if constexpr (std::is_same_v<T, EPair>) {
              bump(n.first), bump(n.second);
            } else if constexpr (std::is_same_v<T, EUnary>) {
              bump(n.x);
            } else if constexpr (std::is_same_v<T, EBinary>) {
              bump(n.lhs), bump(n.rhs);
            } else if constexpr (std::is_same_v<T, ESelect>) {
              bump(n.cond), bump(n.then), bump(n.otherwise);
            } else if constexpr (std::is_same_v<T, EAccum>) {
              bump(n.target), bump(n.value);
            } else if constexpr (std::is_same_v<T, EIndex>) {
              bump(n.arr), bump(n.idx);
            } else if constexpr (std::is_same_v<T, EFst>) {
              bump(n.pair);
            } else if constexpr (std::is_same_v<T, ESnd>) {
              bump(n.pair);
            } else if constexpr (std::is_same_v<T, ERefIndex>) {
              bump(n.arr), bump(n.idx);
            } else if constexpr (std::is_same_v<T, ERefFst>) {
              bump(n.pair);
            } else if constexpr (std::is_same_v<T, ERefSnd>) {
              bump(n.pair);
            } else if constexpr (std::is_same_v<T, ECall>) {
              for (VarId a : n.args) bump(a);
            } else if constexpr (std::is_same_v<T, EFor>) {
              countUses(*n.body);
            } else if constexpr (std::is_same_v<T, EAccumBlock>) {
              bump(n.from);
              countUses(*n.body);
            }
          },
          l.expr);
    }
    bump(b.result);
  }

  // Renders a variable use: inline its defining expression when this is the
  // sole use, otherwise just the name.
  std::string use(VarId v, bool atom) {
    auto it = inline_.find(v);
    if (it == inline_.end()) return name(v);
    const auto& [text, isAtom] = it->second;
    if (atom && !isAtom) return "(" + text + ")";
    return text;
  }

  std::string blockStr(const Block& b) {
    std::vector<std::string> stmts;
    for (const Let& l : b.lets) {
      auto [text, atom] = exprStr(l.expr);
      if (uses_[l.var] == 1) {
        inline_[l.var] = {text, atom};
      } else {
        stmts.push_back("let " + name(l.var) + " = " + text + " in ");
      }
    }
    std::string res = use(b.result, false);
    std::string out;
    for (auto& s : stmts) out += s;
    return out + res;
  }

  // Returns (text, is-atomic) where atomic expressions never need
  // parenthesizing when used as an operand.
  std::pair<std::string, bool> exprStr(const Expr& e) {
    return std::visit(
        [&](const auto& n) -> std::pair<std::string, bool> {
          using T = std::decay_t<decltype(n)>;
          if constexpr (std::is_same_v<T, EUnit>) {
            return {"()", true};
          } else if constexpr (std::is_same_v<T, ETrue>) {
            return {"true", true};
          } else if constexpr (std::is_same_v<T, EFalse>) {
            return {"false", true};
          } else if constexpr (std::is_same_v<T, EConst>) {
            return {fmtReal(n.value), true};
          } else if constexpr (std::is_same_v<T, EFin>) {
            return {std::to_string(n.value), true};
          } else if constexpr (std::is_same_v<T, EArray>) {
            std::string s = "[";
            for (size_t i = 0; i < n.elems.size(); ++i) {
              if (i) s += ", ";
              s += use(n.elems[i], false);
            }
            return {s + "]", true};
          } else if constexpr (std::is_same_v<T, EPair>) {
            return {"(" + use(n.first, false) + ", " + use(n.second, false) + ")",
                    true};
          } else if constexpr (std::is_same_v<T, EUnary>) {
            switch (n.op) {
              case UnaryOp::Not: return {"!" + use(n.x, true), false};
              case UnaryOp::Neg: return {"-" + use(n.x, true), false};
              default:
                return {std::string(unaryOpName(n.op)) + " " + use(n.x, true),
                        false};
            }
          } else if constexpr (std::is_same_v<T, EBinary>) {
            return {use(n.lhs, true) + " " + binaryOpName(n.op) + " " +
                        use(n.rhs, true),
                    false};
          } else if constexpr (std::is_same_v<T, ESelect>) {
            return {"select(" + use(n.cond, false) + ", " + use(n.then, false) +
                        ", " + use(n.otherwise, false) + ")",
                    true};
          } else if constexpr (std::is_same_v<T, EAccum>) {
            return {use(n.target, true) + " += " + use(n.value, true), false};
          } else if constexpr (std::is_same_v<T, EIndex>) {
            return {use(n.arr, true) + "[" + use(n.idx, false) + "]", true};
          } else if constexpr (std::is_same_v<T, EFst>) {
            return {"fst " + use(n.pair, true), false};
          } else if constexpr (std::is_same_v<T, ESnd>) {
            return {"snd " + use(n.pair, true), false};
          } else if constexpr (std::is_same_v<T, ERefIndex>) {
            return {"&" + use(n.arr, true) + "[" + use(n.idx, false) + "]",
                    true};
          } else if constexpr (std::is_same_v<T, ERefFst>) {
            return {"&fst " + use(n.pair, true), false};
          } else if constexpr (std::is_same_v<T, ERefSnd>) {
            return {"&snd " + use(n.pair, true), false};
          } else if constexpr (std::is_same_v<T, ECall>) {
            std::string s = reg_.nameOf(n.callee);
            if (!n.typeArgs.empty()) {
              s += "<";
              for (size_t i = 0; i < n.typeArgs.size(); ++i) {
                if (i) s += ", ";
                s += tyToString(n.typeArgs[i]);
              }
              s += ">";
            }
            s += "(";
            for (size_t i = 0; i < n.args.size(); ++i) {
              if (i) s += ", ";
              s += use(n.args[i], false);
            }
            return {s + ")", true};
          } else if constexpr (std::is_same_v<T, EFor>) {
            return {"[for " + name(n.indexVar) + ": " + tyToString(n.indexTy) +
                        ", " + blockStr(*n.body) + "]",
                    true};
          } else if constexpr (std::is_same_v<T, EAccumBlock>) {
            return {"accum " + name(n.accVar) + " from " + use(n.from, false) +
                        " in " + blockStr(*n.body),
                    false};
          }
        },
        e);
  }

  const FuncDef& def_;
  const Registry& reg_;
  std::unordered_map<VarId, std::string> names_;
  std::unordered_map<VarId, uint32_t> uses_;
  std::unordered_map<VarId, std::pair<std::string, bool>> inline_;
};

}  // namespace

std::string printDef(const FuncDef& def, const Registry& reg) {
  FuncDef canon = canonicalize(def);
  return Printer(canon, reg).run();
}

std::string printDefSugared(const FuncDef& def, const Registry& reg) {
  return Sugarer(def, reg).run();
}

std::string printIr(const Registry& reg) {
  std::ostringstream out;
  bool first = true;
  for (size_t i = 0; i < reg.size(); ++i) {
    if (!first) out << "\n";
    first = false;
    if (reg.isOpaque(FuncId(i))) {
      const OpaqueDef& o = reg.opaque(FuncId(i));
      out << "opaque " << o.name << "(";
      for (size_t k = 0; k < o.arity; ++k) {
        if (k) out << ", ";
        out << "Real";
      }
      out << "): Real = " << o.hostRoutine << "\n";
    } else {
      out << printDef(reg.def(FuncId(i)), reg);
    }
  }
  // jvp bindings last, ordered by the base function id.
  std::map<FuncId, FuncId> ordered(reg.customJvp.begin(), reg.customJvp.end());
  for (auto [base, jvp] : ordered) {
    if (!first) out << "\n";
    first = false;
    out << "jvp " << reg.nameOf(base) << " = " << reg.nameOf(jvp) << "\n";
  }
  return out.str();
}

}  // namespace gradir
