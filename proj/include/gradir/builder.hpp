#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "gradir/ir.hpp"

namespace gradir {

class Module;

// A host-side handle to a value inside the function currently being
// traced. Handles are only usable while their defining region is still
// open; using one outside (after the def froze, from a different def, or
// outside the loop/accumulation body that bound it) raises
// Error{EscapeError}.
class Val {
 public:
  Val() = default;
  bool valid() const { return m_ != nullptr; }
  const Ty& type() const { return ty_; }

  Val operator[](const Val& idx) const;
  Val operator[](uint64_t idx) const;

 private:
  friend class Module;
  friend Val opBinary(BinaryOp, const Val&, const Val&);
  friend Val opBinaryD(BinaryOp, const Val&, double, bool);
  friend Val opUnary(UnaryOp, const Val&);
  Val(Module* m, uint64_t defId, uint64_t frameSerial, VarId var, Ty ty)
      : m_(m), defId_(defId), frameSerial_(frameSerial), var_(var),
        ty_(std::move(ty)) {}
  Module* m_ = nullptr;
  uint64_t defId_ = 0;
  uint64_t frameSerial_ = 0;
  VarId var_ = kNoVar;
  Ty ty_;
};

// ---------------------------------------------------------------------------
// Module: a registry under construction by tracing host code.
//
// `fn` runs the body callback over fresh parameter handles and freezes the
// trace into an IR function. Function boundaries are preserved: calling a
// previously defined function emits a call, never an inline copy.

class Module {
 public:
  Module();
  ~Module();
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;

  const Registry& registry() const { return reg_; }
  Registry& registry() { return reg_; }

  // Defines a function by tracing. Parameter names are optional display
  // names. The body's return handle fixes the return type.
  FuncId fn(const std::string& name, const std::vector<Ty>& paramTys,
            const std::function<Val(std::vector<Val>)>& body,
            const std::vector<std::string>& paramNames = {});

  FuncId opaque(const std::string& name, uint32_t arity,
                const std::string& hostRoutine);
  void setJvp(FuncId base, FuncId jvp);

  // ----- leaves (usable only while a def is open) -----
  Val c(double value);               // pooled per def
  Val boolean(bool value);
  Val finIndex(uint64_t bound, uint64_t value);
  Val unit();

  // ----- structured data -----
  Val pair(const Val& a, const Val& b);
  Val fst(const Val& p);
  Val snd(const Val& p);
  // Right-nested record sugar: tuple({a,b,c}) = (a, (b, c));
  // field(r, i, n) projects component i of an n-field record.
  Val tuple(const std::vector<Val>& fields);
  Val field(const Val& record, size_t index, size_t count);
  Val array(const std::vector<Val>& elems);

  // ----- control and aggregation -----
  Val select(const Val& cond, const Val& a, const Val& b);
  // map(n, body): [for i: n, body(i)]
  Val map(uint64_t n, const std::function<Val(Val)>& body);
  // accumRegion(seed, body): accum a from seed in body(a); returns the
  // (decayed, body-result) pair.
  Val accumRegion(const Val& seed, const std::function<Val(Val)>& body);
  Val accumulate(const Val& target, const Val& value);  // returns the () let
  Val refFst(const Val& acc);
  Val refSnd(const Val& acc);
  Val refIndex(const Val& acc, const Val& idx);
  // sum(n, body): accumulate body(i) over i < n; returns the total.
  Val sum(uint64_t n, const std::function<Val(Val)>& body);

  // ----- calls -----
  // Type arguments are inferred by matching declared parameter types
  // against argument types; Error{InferenceFailure} if a generic stays
  // undetermined or is matched inconsistently.
  Val call(FuncId callee, const std::vector<Val>& args);
  Val call(const std::string& callee, const std::vector<Val>& args);

  // ----- raw ops (operators below are the ergonomic surface) -----
  Val unary(UnaryOp op, const Val& x);
  Val binary(BinaryOp op, const Val& a, const Val& b);

 private:
  friend class Val;
  struct BlockFrame;
  struct DefTrace;

  DefTrace& cur();
  const Val& checkLive(const Val& v) const;
  Val emit(Ty ty, Expr e, const std::string& name = "");
  VarId freshVar(const std::string& name);

  Registry reg_;
  std::vector<DefTrace> open_;
  uint64_t nextDefId_ = 1;
  uint64_t nextFrameSerial_ = 1;
};

// Arithmetic/comparison operators over handles; double operands are
// interned through the def's constant pool.
Val operator+(const Val& a, const Val& b);
Val operator-(const Val& a, const Val& b);
Val operator*(const Val& a, const Val& b);
Val operator/(const Val& a, const Val& b);
Val operator-(const Val& x);
Val operator!(const Val& x);
Val operator<(const Val& a, const Val& b);
Val operator<=(const Val& a, const Val& b);
Val operator>(const Val& a, const Val& b);
Val operator>=(const Val& a, const Val& b);
Val eq(const Val& a, const Val& b);
Val neq(const Val& a, const Val& b);
Val logicalAnd(const Val& a, const Val& b);
Val logicalOr(const Val& a, const Val& b);
Val logicalIff(const Val& a, const Val& b);
Val logicalXor(const Val& a, const Val& b);
Val abs(const Val& x);
Val sgn(const Val& x);
Val ceil(const Val& x);
Val floor(const Val& x);
Val trunc(const Val& x);
Val sqrt(const Val& x);

Val operator+(const Val& a, double b);
Val operator+(double a, const Val& b);
Val operator-(const Val& a, double b);
Val operator-(double a, const Val& b);
Val operator*(const Val& a, double b);
Val operator*(double a, const Val& b);
Val operator/(const Val& a, double b);
Val operator/(double a, const Val& b);
Val operator<(const Val& a, double b);
Val operator>(const Val& a, double b);

}  // namespace gradir
