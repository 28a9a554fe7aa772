#include "gradir/parser.hpp"

#include <cctype>
#include <cstdlib>
#include <limits>
#include <optional>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace gradir {

bool isValidIdent(const std::string& s) {
  if (s.empty()) return false;
  if (!std::isalpha(static_cast<unsigned char>(s[0])) && s[0] != '_')
    return false;
  for (char c : s)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_') return false;
  return true;
}

bool isReservedWord(const std::string& s) {
  static const std::unordered_set<std::string> kWords = {
      "def",  "opaque", "jvp",   "let",   "in",    "for",  "accum",
      "from", "select", "fst",   "snd",   "true",  "false", "inf",
      "nan",  "abs",    "sgn",   "ceil",  "floor", "trunc", "sqrt",
      "and",  "or",     "iff",   "xor",   "Bool",  "Real",  "Index",
      "Value", "Type",
  };
  return kWords.count(s) != 0;
}

namespace {

struct Tok {
  enum K { Ident, IntLit, RealLit, Punct, End } kind = End;
  std::string text;
  uint64_t ival = 0;
  double rval = 0;
  int line = 1, col = 1;
};

[[noreturn]] void perr(const Tok& t, const std::string& msg) {
  fail(ErrCode::ParseError, msg,
       "line " + std::to_string(t.line) + ":" + std::to_string(t.col));
}

std::vector<Tok> lex(const std::string& src) {
  std::vector<Tok> out;
  size_t i = 0, n = src.size();
  int line = 1, col = 1;
  auto step = [&](size_t k) {
    for (size_t j = 0; j < k; ++j) {
      if (src[i + j] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    i += k;
  };
  while (i < n) {
    char c = src[i];
    if (c == '#') {
      while (i < n && src[i] != '\n') step(1);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      step(1);
      continue;
    }
    Tok t;
    t.line = line;
    t.col = col;
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      size_t j = i;
      while (j < n && (std::isalnum(static_cast<unsigned char>(src[j])) ||
                       src[j] == '_'))
        ++j;
      t.kind = Tok::Ident;
      t.text = src.substr(i, j - i);
      step(j - i);
      out.push_back(std::move(t));
      continue;
    }
    if (std::isdigit(static_cast<unsigned char>(c))) {
      size_t j = i;
      bool real = false;
      while (j < n && std::isdigit(static_cast<unsigned char>(src[j]))) ++j;
      if (j < n && src[j] == '.' && j + 1 < n &&
          std::isdigit(static_cast<unsigned char>(src[j + 1]))) {
        real = true;
        ++j;
        while (j < n && std::isdigit(static_cast<unsigned char>(src[j]))) ++j;
      }
      if (j < n && (src[j] == 'e' || src[j] == 'E')) {
        size_t k = j + 1;
        if (k < n && (src[k] == '+' || src[k] == '-')) ++k;
        if (k < n && std::isdigit(static_cast<unsigned char>(src[k]))) {
          real = true;
          j = k;
          while (j < n && std::isdigit(static_cast<unsigned char>(src[j])))
            ++j;
        }
      }
      t.text = src.substr(i, j - i);
      if (real) {
        t.kind = Tok::RealLit;
        t.rval = std::strtod(t.text.c_str(), nullptr);
      } else {
        t.kind = Tok::IntLit;
        errno = 0;
        char* endp = nullptr;
        t.ival = std::strtoull(t.text.c_str(), &endp, 10);
        if (errno != 0) perr(t, "integer literal out of range");
      }
      step(j - i);
      out.push_back(std::move(t));
      continue;
    }
    // Two-character operators first.
    auto two = src.substr(i, 2);
    if (two == "+=" || two == "==" || two == "!=" || two == "<=" ||
        two == ">=") {
      t.kind = Tok::Punct;
      t.text = two;
      step(2);
      out.push_back(std::move(t));
      continue;
    }
    static const std::string kSingles = "()[]<>,:=;&+-*/!";
    if (kSingles.find(c) != std::string::npos) {
      t.kind = Tok::Punct;
      t.text = std::string(1, c);
      step(1);
      out.push_back(std::move(t));
      continue;
    }
    perr(t, std::string("unexpected character '") + c + "'");
  }
  Tok end;
  end.kind = Tok::End;
  end.line = line;
  end.col = col;
  out.push_back(end);
  return out;
}

// ---------------------------------------------------------------------------

struct Binding {
  VarId id = kNoVar;
  std::optional<Ty> ty;
};

// A parsed expression occurrence: either a bare variable reference or a
// proper expression (with its locally synthesized type when derivable).
struct PE {
  bool isVar = false;
  VarId var = kNoVar;
  std::optional<Expr> expr;
  std::optional<Ty> ty;
};

class Parser {
 public:
  explicit Parser(const std::string& src) : toks_(lex(src)) {}

  Registry run() {
    scanNames();
    while (peek().kind != Tok::End) {
      const Tok& t = peek();
      if (t.kind != Tok::Ident) perr(t, "expected a top-level item");
      if (t.text == "def") {
        parseDef();
      } else if (t.text == "opaque") {
        parseOpaque();
      } else if (t.text == "jvp") {
        parseJvp();
      } else {
        perr(t, "expected def, opaque, or jvp");
      }
    }
    return std::move(reg_);
  }

 private:
  const Tok& peek(size_t k = 0) const {
    size_t p = pos_ + k;
    return p < toks_.size() ? toks_[p] : toks_.back();
  }
  const Tok& next() { return toks_[pos_ < toks_.size() - 1 ? pos_++ : pos_]; }
  bool isPunct(const char* s, size_t k = 0) const {
    return peek(k).kind == Tok::Punct && peek(k).text == s;
  }
  bool isIdent(const char* s, size_t k = 0) const {
    return peek(k).kind == Tok::Ident && peek(k).text == s;
  }
  void expectPunct(const char* s) {
    if (!isPunct(s)) perr(peek(), std::string("expected '") + s + "'");
    next();
  }
  void expectIdent(const char* s) {
    if (!isIdent(s)) perr(peek(), std::string("expected '") + s + "'");
    next();
  }
  std::string expectName(const char* what) {
    const Tok& t = peek();
    if (t.kind != Tok::Ident) perr(t, std::string("expected ") + what);
    if (isReservedWord(t.text))
      perr(t, "'" + t.text + "' is a reserved word");
    next();
    return t.text;
  }

  // First pass: collect item names in order so calls can reference
  // functions that appear later in the file.
  void scanNames() {
    FuncId id = 0;
    for (size_t k = 0; k + 1 < toks_.size(); ++k) {
      const Tok& t = toks_[k];
      if (t.kind != Tok::Ident) continue;
      if (t.text != "def" && t.text != "opaque") continue;
      const Tok& nm = toks_[k + 1];
      if (nm.kind != Tok::Ident) continue;
      if (nameTable_.count(nm.text))
        perr(nm, "duplicate function name '" + nm.text + "'");
      nameTable_[nm.text] = id++;
    }
  }

  // ------------------------------------------------------------------ types

  Ty parseTy() {
    const Tok& t = peek();
    if (t.kind == Tok::Punct && t.text == "(") {
      next();
      if (isPunct(")")) {
        next();
        return Ty::unit();
      }
      Ty a = parseTy();
      expectPunct(",");
      Ty b = parseTy();
      expectPunct(")");
      return Ty::pair(a, b);
    }
    if (t.kind == Tok::Punct && t.text == "[") {
      next();
      Ty idx = parseTy();
      expectPunct("]");
      Ty elem = parseTy();
      return Ty::arr(idx, elem);
    }
    if (t.kind == Tok::Punct && t.text == "&") {
      next();
      return Ty::acc(parseTy());
    }
    if (t.kind == Tok::IntLit) {
      next();
      return Ty::fin(t.ival);
    }
    if (t.kind == Tok::Ident) {
      next();
      if (t.text == "Bool") return Ty::boolean();
      if (t.text == "Real") return Ty::real();
      if (isReservedWord(t.text))
        perr(t, "'" + t.text + "' cannot name a type variable");
      return Ty::var(t.text);
    }
    perr(t, "expected a type");
  }

  // ------------------------------------------------------------- items

  void parseOpaque() {
    expectIdent("opaque");
    std::string name = expectName("function name");
    OpaqueDef od;
    od.id = FuncId(reg_.size());
    od.name = name;
    expectPunct("(");
    if (!isPunct(")")) {
      while (true) {
        const Tok& at = peek();
        Ty pt = parseTy();
        if (pt != Ty::real()) perr(at, "opaque parameters must be Real");
        od.arity++;
        if (isPunct(",")) {
          next();
          continue;
        }
        break;
      }
    }
    expectPunct(")");
    expectPunct(":");
    const Tok& rt = peek();
    if (parseTy() != Ty::real()) perr(rt, "opaque result must be Real");
    expectPunct("=");
    const Tok& h = peek();
    if (h.kind != Tok::Ident) perr(h, "expected host routine name");
    next();
    od.hostRoutine = h.text;
    reg_.add(std::move(od));
  }

  void parseJvp() {
    expectIdent("jvp");
    const Tok& b = peek();
    if (b.kind != Tok::Ident) perr(b, "expected function name");
    next();
    expectPunct("=");
    const Tok& j = peek();
    if (j.kind != Tok::Ident) perr(j, "expected function name");
    next();
    auto fb = nameTable_.find(b.text);
    auto fj = nameTable_.find(j.text);
    FuncId bi = fb == nameTable_.end() ? 0xffffffffu : fb->second;
    FuncId ji = fj == nameTable_.end() ? 0xffffffffu : fj->second;
    reg_.customJvp[bi] = ji;
  }

  void parseDef() {
    expectIdent("def");
    FuncDef fd;
    fd.id = FuncId(reg_.size());
    fd.name = expectName("function name");
    nextVar_ = 0;
    varNames_.clear();
    scopes_.clear();
    scopes_.emplace_back();

    if (isPunct("<")) {
      next();
      while (true) {
        std::string gn = expectName("generic name");
        expectPunct(":");
        const Tok& kt = peek();
        if (kt.kind != Tok::Ident) perr(kt, "expected a kind");
        Kind k;
        if (kt.text == "Index") {
          k = Kind::Index;
        } else if (kt.text == "Value") {
          k = Kind::Value;
        } else if (kt.text == "Type") {
          k = Kind::Type;
        } else {
          perr(kt, "expected Index, Value, or Type");
        }
        next();
        fd.generics.push_back({gn, k});
        if (isPunct(",")) {
          next();
          continue;
        }
        break;
      }
      expectPunct(">");
    }

    expectPunct("(");
    if (!isPunct(")")) {
      while (true) {
        std::string pn = expectName("parameter name");
        expectPunct(":");
        Ty pt = parseTy();
        VarId v = fresh(pn);
        bind(pn, v, pt);
        fd.params.push_back({v, pt});
        if (isPunct(",")) {
          next();
          continue;
        }
        break;
      }
    }
    expectPunct(")");
    expectPunct(":");
    fd.ret = parseTy();
    expectPunct("=");
    fd.body = parseBlock().block;
    fd.varCount = nextVar_;
    fd.varNames = varNames_;
    reg_.add(std::move(fd));
  }

  // ------------------------------------------------------------- scoping

  VarId fresh(const std::string& name) {
    VarId v = nextVar_++;
    if (!name.empty()) varNames_[v] = name;
    return v;
  }

  void bind(const std::string& name, VarId v, std::optional<Ty> ty) {
    scopes_.back()[name] = Binding{v, std::move(ty)};
  }

  const Binding* lookup(const std::string& name) const {
    for (auto it = scopes_.rbegin(); it != scopes_.rend(); ++it) {
      auto f = it->find(name);
      if (f != it->end()) return &f->second;
    }
    return nullptr;
  }

  // Resolves a variable use. Unknown names still parse (each use gets a
  // fresh id) so the type checker can report UnboundVar properly.
  std::pair<VarId, std::optional<Ty>> useVar(const std::string& name) {
    if (const Binding* b = lookup(name)) return {b->id, b->ty};
    return {fresh(name), std::nullopt};
  }

  // ------------------------------------------------------------- blocks

  struct BR {
    Block block;
    std::optional<Ty> resultTy;
  };

  BR parseBlock() {
    BR out;
    while (true) {
      if (isIdent("let")) {
        next();
        std::string ln = expectName("binder name");
        expectPunct(":");
        Ty lt = parseTy();
        expectPunct("=");
        PE pe = parseExpr();
        if (pe.isVar)
          perr(peek(), "a let body must be an operation, not a variable");
        expectIdent("in");
        VarId v = fresh(ln);
        out.block.lets.push_back(Let{v, lt, std::move(*pe.expr)});
        bind(ln, v, lt);
        continue;
      }
      PE pe = parseExpr();
      if (isPunct(";")) {
        next();
        if (pe.isVar)
          perr(peek(), "';' must follow an operation, not a variable");
        VarId v = fresh("");
        out.block.lets.push_back(
            Let{v, pe.ty.value_or(Ty::unit()), std::move(*pe.expr)});
        continue;
      }
      if (pe.isVar) {
        out.block.result = pe.var;
        out.resultTy = pe.ty;
      } else {
        VarId v = fresh("");
        Ty vt = pe.ty.value_or(Ty::unit());
        out.block.lets.push_back(Let{v, vt, std::move(*pe.expr)});
        out.block.result = v;
        out.resultTy = vt;
      }
      return out;
    }
  }

  // ------------------------------------------------------------- exprs

  PE mk(Expr e, std::optional<Ty> ty) {
    PE pe;
    pe.expr = std::move(e);
    pe.ty = std::move(ty);
    return pe;
  }

  // Parses one expression. Operands are variable names (strict ANF); the
  // richer nesting of the sugared display form is intentionally rejected.
  PE parseExpr() {
    const Tok& t = peek();
    if (t.kind == Tok::RealLit) {
      next();
      return mk(EConst{t.rval}, Ty::real());
    }
    if (t.kind == Tok::IntLit) {
      next();
      return mk(EFin{t.ival}, std::nullopt);  // Fin size comes from the let
    }
    if (t.kind == Tok::Punct) {
      if (t.text == "(") return parseParen();
      if (t.text == "[") return parseBracket();
      if (t.text == "-") {
        next();
        const Tok& o = peek();
        if (o.kind == Tok::RealLit) {
          next();
          return mk(EConst{-o.rval}, Ty::real());
        }
        if (o.kind == Tok::IntLit) {
          next();
          return mk(EConst{-double(o.ival)}, Ty::real());
        }
        auto [v, ty] = useVar(expectName("operand"));
        return mk(EUnary{UnaryOp::Neg, v}, Ty::real());
      }
      if (t.text == "!") {
        next();
        auto [v, ty] = useVar(expectName("operand"));
        return mk(EUnary{UnaryOp::Not, v}, Ty::boolean());
      }
      if (t.text == "&") return parseRef();
      perr(t, "expected an expression");
    }
    if (t.kind != Tok::Ident) perr(t, "expected an expression");
    // Identifier-led forms.
    const std::string& w = t.text;
    if (w == "true") {
      next();
      return mk(ETrue{}, Ty::boolean());
    }
    if (w == "false") {
      next();
      return mk(EFalse{}, Ty::boolean());
    }
    if (w == "inf") {
      next();
      return mk(EConst{std::numeric_limits<double>::infinity()}, Ty::real());
    }
    if (w == "nan") {
      next();
      return mk(EConst{std::numeric_limits<double>::quiet_NaN()}, Ty::real());
    }
    if (w == "fst" || w == "snd") {
      next();
      auto [v, ty] = useVar(expectName("operand"));
      std::optional<Ty> rt;
      if (ty && ty->is(Ty::Tag::Pair)) rt = w == "fst" ? ty->first() : ty->second();
      if (w == "fst") return mk(EFst{v}, rt);
      return mk(ESnd{v}, rt);
    }
    if (w == "select") {
      next();
      expectPunct("(");
      auto [c, ct] = useVar(expectName("operand"));
      expectPunct(",");
      auto [a, at] = useVar(expectName("operand"));
      expectPunct(",");
      auto [b, bt] = useVar(expectName("operand"));
      expectPunct(")");
      return mk(ESelect{c, a, b}, at ? at : bt);
    }
    if (w == "accum") return parseAccumBlock();
    for (UnaryOp op : {UnaryOp::Abs, UnaryOp::Sgn, UnaryOp::Ceil,
                       UnaryOp::Floor, UnaryOp::Trunc, UnaryOp::Sqrt}) {
      if (w == unaryOpName(op)) {
        next();
        auto [v, ty] = useVar(expectName("operand"));
        return mk(EUnary{op, v}, Ty::real());
      }
    }
    if (isReservedWord(w)) perr(t, "unexpected '" + w + "'");
    // Plain name: call, index, accumulate, or bare variable.
    next();
    if (isPunct("<") || isPunct("(")) return parseCall(w);
    if (isPunct("[")) {
      auto [arr, at] = useVar(w);
      next();
      auto [ix, it] = useVar(expectName("index operand"));
      expectPunct("]");
      std::optional<Ty> rt;
      if (at && at->is(Ty::Tag::Arr)) rt = at->elem();
      return mk(EIndex{arr, ix}, rt);
    }
    if (isPunct("+=")) {
      auto [tgt, tt] = useVar(w);
      next();
      auto [val, vt] = useVar(expectName("operand"));
      return mk(EAccum{tgt, val}, Ty::unit());
    }
    auto [v, ty] = useVar(w);
    PE pe;
    pe.isVar = true;
    pe.var = v;
    pe.ty = ty;
    return pe;
  }

  PE parseParen() {
    expectPunct("(");
    if (isPunct(")")) {
      next();
      return mk(EUnit{}, Ty::unit());
    }
    auto [a, at] = useVar(expectName("operand"));
    if (isPunct(",")) {
      next();
      auto [b, bt] = useVar(expectName("operand"));
      expectPunct(")");
      std::optional<Ty> rt;
      if (at && bt) rt = Ty::pair(*at, *bt);
      return mk(EPair{a, b}, rt);
    }
    // Binary operator.
    const Tok& opTok = peek();
    std::optional<BinaryOp> op;
    if (opTok.kind == Tok::Punct) {
      static const std::pair<const char*, BinaryOp> kPunctOps[] = {
          {"+", BinaryOp::Add},  {"-", BinaryOp::Sub}, {"*", BinaryOp::Mul},
          {"/", BinaryOp::Div},  {"!=", BinaryOp::Neq}, {"<", BinaryOp::Lt},
          {"<=", BinaryOp::Leq}, {"==", BinaryOp::Eq}, {">", BinaryOp::Gt},
          {">=", BinaryOp::Geq},
      };
      for (auto& [s, o] : kPunctOps)
        if (opTok.text == s) op = o;
    } else if (opTok.kind == Tok::Ident) {
      static const std::pair<const char*, BinaryOp> kWordOps[] = {
          {"and", BinaryOp::And},
          {"or", BinaryOp::Or},
          {"iff", BinaryOp::Iff},
          {"xor", BinaryOp::Xor},
      };
      for (auto& [s, o] : kWordOps)
        if (opTok.text == s) op = o;
    }
    if (!op) perr(opTok, "expected a binary operator");
    next();
    auto [b, bt] = useVar(expectName("operand"));
    expectPunct(")");
    Ty rt = isArith(*op) ? Ty::real() : Ty::boolean();
    return mk(EBinary{*op, a, b}, rt);
  }

  PE parseBracket() {
    expectPunct("[");
    if (isIdent("for")) {
      next();
      std::string in = expectName("index binder");
      expectPunct(":");
      Ty ity = parseTy();
      expectPunct(",");
      scopes_.emplace_back();
      VarId iv = fresh(in);
      bind(in, iv, ity);
      BR body = parseBlock();
      scopes_.pop_back();
      expectPunct("]");
      std::optional<Ty> rt;
      if (body.resultTy) rt = Ty::arr(ity, *body.resultTy);
      EFor f;
      f.indexTy = ity;
      f.indexVar = iv;
      f.body = std::make_shared<const Block>(std::move(body.block));
      return mk(std::move(f), rt);
    }
    // Array literal.
    EArray arr;
    std::optional<Ty> elemTy;
    bool uniform = true;
    if (!isPunct("]")) {
      while (true) {
        auto [v, ty] = useVar(expectName("array element"));
        arr.elems.push_back(v);
        if (!ty) {
          uniform = false;
        } else if (!elemTy) {
          elemTy = ty;
        } else if (*elemTy != *ty) {
          uniform = false;
        }
        if (isPunct(",")) {
          next();
          continue;
        }
        break;
      }
    }
    expectPunct("]");
    std::optional<Ty> rt;
    if (uniform && elemTy)
      rt = Ty::arr(Ty::fin(arr.elems.size()), *elemTy);
    return mk(std::move(arr), rt);
  }

  PE parseRef() {
    expectPunct("&");
    const Tok& t = peek();
    if (t.kind != Tok::Ident) perr(t, "expected a reference form");
    if (t.text == "fst" || t.text == "snd") {
      bool first = t.text == "fst";
      next();
      auto [v, ty] = useVar(expectName("operand"));
      std::optional<Ty> rt;
      if (ty && ty->is(Ty::Tag::Acc) && ty->inner().is(Ty::Tag::Pair))
        rt = Ty::acc(first ? ty->inner().first() : ty->inner().second());
      if (first) return mk(ERefFst{v}, rt);
      return mk(ERefSnd{v}, rt);
    }
    auto [arr, at] = useVar(expectName("operand"));
    expectPunct("[");
    auto [ix, it] = useVar(expectName("index operand"));
    expectPunct("]");
    std::optional<Ty> rt;
    if (at && at->is(Ty::Tag::Acc) && at->inner().is(Ty::Tag::Arr))
      rt = Ty::acc(at->inner().elem());
    return mk(ERefIndex{arr, ix}, rt);
  }

  PE parseAccumBlock() {
    expectIdent("accum");
    std::string an = expectName("accumulator binder");
    expectIdent("from");
    auto [fv, fty] = useVar(expectName("operand"));
    expectIdent("in");
    scopes_.emplace_back();
    VarId av = fresh(an);
    std::optional<Ty> aty;
    if (fty) aty = Ty::acc(*fty);
    bind(an, av, aty);
    BR body = parseBlock();
    scopes_.pop_back();
    std::optional<Ty> rt;
    if (fty && body.resultTy) rt = Ty::pair(*fty, *body.resultTy);
    EAccumBlock ab;
    ab.accVar = av;
    ab.from = fv;
    ab.body = std::make_shared<const Block>(std::move(body.block));
    return mk(std::move(ab), rt);
  }

  PE parseCall(const std::string& callee) {
    ECall call;
    auto f = nameTable_.find(callee);
    call.callee = f == nameTable_.end() ? 0xffffffffu : f->second;
    if (isPunct("<")) {
      next();
      while (true) {
        call.typeArgs.push_back(parseTy());
        if (isPunct(",")) {
          next();
          continue;
        }
        break;
      }
      expectPunct(">");
    }
    expectPunct("(");
    if (!isPunct(")")) {
      while (true) {
        auto [v, ty] = useVar(expectName("argument"));
        call.args.push_back(v);
        if (isPunct(",")) {
          next();
          continue;
        }
        break;
      }
    }
    expectPunct(")");
    // Synthesized result type: substitute type arguments into the callee's
    // declared return, when the callee's signature is already known.
    std::optional<Ty> rt;
    if (call.callee < reg_.size()) {
      std::vector<Generic> gens = reg_.genericsOf(call.callee);
      if (gens.size() == call.typeArgs.size()) {
        std::map<std::string, Ty> sub;
        for (size_t i = 0; i < gens.size(); ++i)
          sub[gens[i].name] = call.typeArgs[i];
        rt = substitute(reg_.retType(call.callee), sub);
      }
    }
    return mk(std::move(call), rt);
  }

  std::vector<Tok> toks_;
  size_t pos_ = 0;
  Registry reg_;
  std::unordered_map<std::string, FuncId> nameTable_;
  uint32_t nextVar_ = 0;
  std::map<VarId, std::string> varNames_;
  std::vector<std::unordered_map<std::string, Binding>> scopes_;
};

}  // namespace

Registry parseIr(const std::string& text) { return Parser(text).run(); }

}  // namespace gradir
