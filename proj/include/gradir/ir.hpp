#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace gradir {

// Kinds form a chain: Index <= Value <= Type.
enum class Kind : uint8_t { Index, Value, Type };

bool kindLeq(Kind a, Kind b);
const char* kindName(Kind k);

using VarId = uint32_t;
using FuncId = uint32_t;

constexpr VarId kNoVar = 0xffffffffu;

// ---------------------------------------------------------------------------
// Types. Immutable, structurally compared, cheap to copy (shared nodes).

class Ty {
 public:
  enum class Tag : uint8_t { Var, Unit, Bool, Real, Fin, Acc, Arr, Pair };

  Ty() : Ty(unit()) {}

  static Ty var(std::string name);
  static Ty unit();
  static Ty boolean();
  static Ty real();
  static Ty fin(uint64_t n);
  static Ty acc(Ty inner);
  static Ty arr(Ty index, Ty elem);
  static Ty pair(Ty first, Ty second);

  Tag tag() const { return node_->tag; }
  bool is(Tag t) const { return node_->tag == t; }
  const std::string& varName() const { return node_->name; }
  uint64_t finSize() const { return node_->n; }
  const Ty& inner() const { return node_->kids[0]; }   // Acc
  const Ty& index() const { return node_->kids[0]; }   // Arr
  const Ty& elem() const { return node_->kids[1]; }    // Arr
  const Ty& first() const { return node_->kids[0]; }   // Pair
  const Ty& second() const { return node_->kids[1]; }  // Pair

  bool operator==(const Ty& o) const;
  bool operator!=(const Ty& o) const { return !(*this == o); }

  bool contains(Tag t) const;
  bool containsVar() const { return contains(Tag::Var); }
  bool containsAcc() const { return contains(Tag::Acc); }

 private:
  struct Node {
    Tag tag;
    uint64_t n = 0;
    std::string name;
    std::vector<Ty> kids;
  };
  explicit Ty(std::shared_ptr<const Node> n) : node_(std::move(n)) {}
  std::shared_ptr<const Node> node_;
};

// Substitute type variables by name. Unbound vars are left in place.
Ty substitute(const Ty& ty, const std::map<std::string, Ty>& bindings);

std::string tyToString(const Ty& ty);

// ---------------------------------------------------------------------------
// Expressions. Strict ANF: every operand is a variable reference.

enum class UnaryOp : uint8_t { Not, Neg, Abs, Sgn, Ceil, Floor, Trunc, Sqrt };
enum class BinaryOp : uint8_t {
  And, Or, Iff, Xor,
  Neq, Lt, Leq, Eq, Gt, Geq,
  Add, Sub, Mul, Div,
};

const char* unaryOpName(UnaryOp op);
const char* binaryOpName(BinaryOp op);
bool isArith(BinaryOp op);    // Add/Sub/Mul/Div
bool isCompare(BinaryOp op);  // Neq/Lt/Leq/Eq/Gt/Geq
bool isLogic(BinaryOp op);    // And/Or/Iff/Xor

struct Block;
using BlockPtr = std::shared_ptr<const Block>;

struct EUnit {};
struct ETrue {};
struct EFalse {};
struct EConst { double value; };
struct EFin { uint64_t value; };
struct EArray { std::vector<VarId> elems; };
struct EPair { VarId first, second; };
struct EUnary { UnaryOp op; VarId x; };
struct EBinary { BinaryOp op; VarId lhs, rhs; };
struct ESelect { VarId cond, then, otherwise; };
struct EAccum { VarId target, value; };  // target += value
struct EIndex { VarId arr, idx; };
struct EFst { VarId pair; };
struct ESnd { VarId pair; };
struct ERefIndex { VarId arr, idx; };
struct ERefFst { VarId pair; };
struct ERefSnd { VarId pair; };
struct ECall {
  FuncId callee;
  std::vector<Ty> typeArgs;
  std::vector<VarId> args;
};
struct EFor {
  Ty indexTy;
  VarId indexVar;
  BlockPtr body;
};
struct EAccumBlock {
  VarId accVar;
  VarId from;
  BlockPtr body;
};

using Expr = std::variant<EUnit, ETrue, EFalse, EConst, EFin, EArray, EPair,
                          EUnary, EBinary, ESelect, EAccum, EIndex, EFst, ESnd,
                          ERefIndex, ERefFst, ERefSnd, ECall, EFor, EAccumBlock>;

struct Let {
  VarId var;
  Ty ty;
  Expr expr;
};

struct Block {
  std::vector<Let> lets;
  VarId result = kNoVar;
};

struct Generic {
  std::string name;
  Kind kind;
};

struct Param {
  VarId var;
  Ty ty;
};

struct FuncDef {
  FuncId id = 0;
  std::string name;
  std::vector<Generic> generics;
  std::vector<Param> params;
  Ty ret;
  Block body;
  uint32_t varCount = 0;  // ids are dense in [0, varCount)
  // Optional debug names, keyed by var id. Printed instead of x<N>.
  std::map<VarId, std::string> varNames;
};

// Opaque host functions: all-Real scalar signatures only.
struct OpaqueDef {
  FuncId id = 0;
  std::string name;
  uint32_t arity = 0;
  std::string hostRoutine;  // key into the host routine table
};

struct Registry {
  std::vector<std::variant<FuncDef, OpaqueDef>> funcs;
  std::map<FuncId, FuncId> customJvp;  // base -> jvp def

  FuncId add(FuncDef def);
  FuncId add(OpaqueDef def);
  size_t size() const { return funcs.size(); }
  bool isDef(FuncId f) const;
  bool isOpaque(FuncId f) const;
  const FuncDef& def(FuncId f) const;
  FuncDef& defMut(FuncId f);
  const OpaqueDef& opaque(FuncId f) const;
  const std::string& nameOf(FuncId f) const;
  std::optional<FuncId> byName(const std::string& name) const;
  // Signature helpers that work uniformly for defs and opaques.
  std::vector<Ty> paramTypes(FuncId f) const;
  Ty retType(FuncId f) const;
  std::vector<Generic> genericsOf(FuncId f) const;
};

// ---------------------------------------------------------------------------
// Diagnostics.

enum class ErrCode : uint8_t {
  // kinding
  UnboundTypeVar,
  NonValueComponent,
  // typing
  TypeMismatch,
  FinOutOfRange,
  UnboundVar,
  DuplicateBinding,
  ArityMismatch,
  BadGenericInstantiation,
  AccumulatorEscape,
  // registry
  UnresolvedCallee,
  RecursionCycle,
  BadCustomJvpSignature,
  // builder
  EscapeError,
  InferenceFailure,
  MultiParamVjp,
  // autodiff
  MissingDerivative,
  NonlinearTangentUse,
  // exec
  MarshalError,
  MissingHostRoutine,
  UnboundIndexGeneric,
  // parser
  ParseError,
};

const char* errCodeName(ErrCode c);

struct Diag {
  ErrCode code;
  std::string message;
  std::string where;  // function name and/or source location
  std::string str() const;
};

class Error : public std::runtime_error {
 public:
  explicit Error(Diag d) : std::runtime_error(d.str()), diag(std::move(d)) {}
  Diag diag;
};

[[noreturn]] void fail(ErrCode code, const std::string& msg,
                       const std::string& where = "");

// ---------------------------------------------------------------------------
// Kinding and type checking.

struct GenericEnv {
  std::vector<Generic> generics;
  std::optional<Kind> lookup(const std::string& name) const;
};

// Least kind derivable for `ty`, or a diagnostic.
bool tryKindOf(const Ty& ty, const GenericEnv& env, Kind& out, Diag& err);
Kind kindOf(const Ty& ty, const GenericEnv& env);  // throws Error

// Checks one def against a registry (callees must resolve for Call typing).
std::optional<Diag> typecheckFunction(const FuncDef& def, const Registry& reg);

// Whole-registry validation: per-def typechecking, callee resolution,
// call-graph acyclicity, custom-JVP signature agreement.
std::vector<Diag> validateRegistry(const Registry& reg);

// Topological order of the call graph (callees before callers).
// Fails with RecursionCycle if cyclic.
std::vector<FuncId> topoOrder(const Registry& reg);

// The dual lift of a type: Real becomes (Real, Real), containers map
// structurally, Unit/Bool/Fin/vars are fixed.
Ty liftTy(const Ty& ty);

// ---------------------------------------------------------------------------
// Structural equality modulo variable identity (alpha-equivalence).

bool alphaEqual(const FuncDef& a, const FuncDef& b);
bool alphaEqual(const Registry& a, const Registry& b);

// Renumber a def's variables densely in preorder (params first, then each
// let var before its expression's inner binders). Canonical form for
// printing and round-trip comparison.
FuncDef canonicalize(const FuncDef& def);

// Total number of lets in a def, nested blocks included.
size_t staticLetCount(const FuncDef& def);

// Rewrites every type in a def (params, return, let annotations, loop index
// types, call type arguments) through `fn`. Used for monomorphization and
// interface rewrites.
FuncDef mapTypes(const FuncDef& def, const std::function<Ty(const Ty&)>& fn);

}  // namespace gradir
