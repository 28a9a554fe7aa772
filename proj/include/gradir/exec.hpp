#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "gradir/ir.hpp"

namespace gradir {

// ---------------------------------------------------------------------------
// Runtime values. Immutable; arrays and pairs share storage on copy.

struct RtValue;
using RtArray = std::vector<RtValue>;
using RtPair = std::pair<RtValue, RtValue>;

// Accumulator references name a cell by store index plus a path of
// projections. They only ever live inside the evaluation of the region
// that allocated the store (the type system keeps them from escaping).
struct AccStep {
  enum K : uint8_t { First, Second, Elem } k = First;
  uint64_t index = 0;
};
struct AccPath {
  uint32_t store = 0;
  std::vector<AccStep> steps;
};

struct RtValue {
  std::variant<std::monostate, bool, double, uint64_t,
               std::shared_ptr<const RtArray>, std::shared_ptr<const RtPair>,
               AccPath>
      v;

  static RtValue unit() { return RtValue{}; }
  static RtValue boolean(bool b) { return RtValue{b}; }
  static RtValue real(double d) { return RtValue{d}; }
  static RtValue fin(uint64_t n) { return RtValue{n}; }
  static RtValue array(RtArray elems) {
    return RtValue{std::make_shared<const RtArray>(std::move(elems))};
  }
  static RtValue pair(RtValue a, RtValue b) {
    return RtValue{
        std::make_shared<const RtPair>(std::move(a), std::move(b))};
  }

  bool isUnit() const { return std::holds_alternative<std::monostate>(v); }
  bool isBool() const { return std::holds_alternative<bool>(v); }
  bool isReal() const { return std::holds_alternative<double>(v); }
  bool isFin() const { return std::holds_alternative<uint64_t>(v); }
  bool isArray() const {
    return std::holds_alternative<std::shared_ptr<const RtArray>>(v);
  }
  bool isPair() const {
    return std::holds_alternative<std::shared_ptr<const RtPair>>(v);
  }
  bool isAcc() const { return std::holds_alternative<AccPath>(v); }

  bool asBool() const { return std::get<bool>(v); }
  double asReal() const { return std::get<double>(v); }
  uint64_t asFin() const { return std::get<uint64_t>(v); }
  const RtArray& asArray() const {
    return *std::get<std::shared_ptr<const RtArray>>(v);
  }
  const RtPair& asPair() const {
    return *std::get<std::shared_ptr<const RtPair>>(v);
  }
  const AccPath& asAcc() const { return std::get<AccPath>(v); }
};

// ---------------------------------------------------------------------------
// Host routines backing opaque functions.

using HostFn = std::function<double(const std::vector<double>&)>;

struct HostRoutines {
  std::map<std::string, HostFn> table;
  // sin, cos, tan, exp, log, pow, tanh, atan, asin, acos, sinh, cosh.
  static HostRoutines standard();
};

// ---------------------------------------------------------------------------
// Marshalling across the host boundary, directed by the declared type.
// Real <-> number, Bool <-> bool, Fin(n) <-> integer below n,
// () <-> null, arrays <-> arrays, pairs <-> two-element arrays.
// Throws Error{MarshalError} on any mismatch.

nlohmann::json rtToJson(const RtValue& v, const Ty& ty);
RtValue rtFromJson(const nlohmann::json& j, const Ty& ty);

// ---------------------------------------------------------------------------
// Tree-walking engine over monomorphized instances.
//
// Each call with concrete type arguments lazily creates one instance per
// distinct instantiation; executing a let counts one operation against the
// instance being run. Evaluation order is fully deterministic: lets in
// program order, loops ascending, accumulation in program order.

class Engine {
 public:
  explicit Engine(const Registry& reg,
                  HostRoutines hosts = HostRoutines::standard());

  RtValue invoke(FuncId f, const std::vector<Ty>& typeArgs,
                 std::vector<RtValue> args);
  RtValue invoke(const std::string& name, const std::vector<Ty>& typeArgs,
                 std::vector<RtValue> args);

  const Registry& registry() const { return reg_; }

  // Operation accounting.
  uint64_t totalOps() const;
  void resetOps();
  size_t instanceCount() const { return monos_.size(); }
  // (instance label, calls, ops) in first-use order.
  std::vector<std::tuple<std::string, uint64_t, uint64_t>> instanceReport()
      const;

 private:
  struct Mono {
    std::string label;
    FuncDef def;
    uint64_t calls = 0;
    uint64_t ops = 0;
  };

  struct Cell {
    enum K : uint8_t { Unit, Bool, Real, Fin, Arr, Pair } k = Unit;
    bool b = false;
    double r = 0;
    uint64_t f = 0;
    std::vector<Cell> kids;  // Arr: elements; Pair: exactly two
  };

  Mono& instance(FuncId f, const std::vector<Ty>& typeArgs);
  RtValue evalBlock(Mono& mono, std::vector<RtValue>& frame, const Block& b);
  RtValue evalExpr(Mono& mono, std::vector<RtValue>& frame, const Expr& e);
  RtValue callFunction(FuncId callee, const std::vector<Ty>& typeArgs,
                       std::vector<RtValue> args);

  Cell zeroFromSeed(const RtValue& seed) const;
  Cell* resolve(const AccPath& path);
  void addInto(Cell& cell, const RtValue& v);
  RtValue decay(const Cell& cell) const;

  Registry reg_;
  HostRoutines hosts_;
  // Instances live in a deque so references stay stable; byFunc_ maps a
  // function and its concrete type arguments to its instance.
  std::deque<Mono> monos_;
  std::vector<std::vector<std::pair<std::vector<Ty>, Mono*>>> byFunc_;
  std::vector<Cell> accStack_;
};

}  // namespace gradir
