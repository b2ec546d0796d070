/*
    tracejit/ops.hpp -- Array operations that extend the trace
*/

#pragma once

#include "context.hpp"

#include <initializer_list>
#include <utility>
#include <vector>

namespace tj {

// ---------------------------------------------------------------------
// Construction

Var literal(Context &ctx, Dtype t, double value, uint32_t size = 1);
Var literal_raw(Context &ctx, Dtype t, uint64_t payload, uint32_t size = 1);
inline Var zeros(Context &ctx, Dtype t, uint32_t size) { return literal(ctx, t, 0.0, size); }
inline Var ones(Context &ctx, Dtype t, uint32_t size) { return literal(ctx, t, 1.0, size); }

/// The lane index 0..size-1 as u32
Var index(Context &ctx, uint32_t size);
Var arange(Context &ctx, Dtype t, uint32_t size);

/// 'n' evenly spaced values covering [start, end]
Var linspace(Context &ctx, Dtype t, double start, double end, uint32_t n);

/// Expand two 1D arrays into row-major 2D grid coordinates:
/// x'[k] = x[k mod |x|], y'[k] = y[k div |x|]
std::pair<Var, Var> meshgrid(const Var &x, const Var &y);

/// Copy host data into an evaluated buffer
Var from_host(Context &ctx, Dtype t, const std::vector<double> &values);
Var from_host_raw(Context &ctx, Dtype t, const std::vector<uint64_t> &payloads);

// ---------------------------------------------------------------------
// Arithmetic

Var unary(Op op, const Var &a);
Var binary(Op op, const Var &a, const Var &b);
Var fma(const Var &a, const Var &b, const Var &c);
Var select(const Var &mask, const Var &t, const Var &f);
Var cast(const Var &a, Dtype t);
Var bitcast(const Var &a, Dtype t);

inline Var sqrt(const Var &a) { return unary(Op::Sqrt, a); }
inline Var abs(const Var &a) { return unary(Op::Abs, a); }
inline Var exp(const Var &a) { return unary(Op::Exp, a); }
inline Var log(const Var &a) { return unary(Op::Log, a); }
inline Var sin(const Var &a) { return unary(Op::Sin, a); }
inline Var cos(const Var &a) { return unary(Op::Cos, a); }
inline Var floor(const Var &a) { return unary(Op::Floor, a); }
inline Var rcp(const Var &a) { return unary(Op::Rcp, a); }
inline std::pair<Var, Var> sincos(const Var &a) { return { sin(a), cos(a) }; }
inline Var min(const Var &a, const Var &b) { return binary(Op::Min, a, b); }
inline Var max(const Var &a, const Var &b) { return binary(Op::Max, a, b); }

/// Literal of the same type as 'like'
Var scalar_like(const Var &like, double v);

Var operator-(const Var &a);
Var operator~(const Var &a);

#define TJ_BINARY_OPERATOR(sym, op)                                                       \
    inline Var operator sym(const Var &a, const Var &b) { return binary(op, a, b); }      \
    inline Var operator sym(const Var &a, double b) { return binary(op, a, scalar_like(a, b)); } \
    inline Var operator sym(double a, const Var &b) { return binary(op, scalar_like(b, a), b); }

TJ_BINARY_OPERATOR(+, Op::Add)
TJ_BINARY_OPERATOR(-, Op::Sub)
TJ_BINARY_OPERATOR(*, Op::Mul)
TJ_BINARY_OPERATOR(/, Op::Div)
TJ_BINARY_OPERATOR(%, Op::Mod)
TJ_BINARY_OPERATOR(&, Op::And)
TJ_BINARY_OPERATOR(|, Op::Or)
TJ_BINARY_OPERATOR(^, Op::Xor)
TJ_BINARY_OPERATOR(<<, Op::Shl)
TJ_BINARY_OPERATOR(>>, Op::Shr)
TJ_BINARY_OPERATOR(<, Op::Lt)
TJ_BINARY_OPERATOR(<=, Op::Le)
TJ_BINARY_OPERATOR(>, Op::Gt)
TJ_BINARY_OPERATOR(>=, Op::Ge)

#undef TJ_BINARY_OPERATOR

inline Var eq(const Var &a, const Var &b) { return binary(Op::Eq, a, b); }
inline Var neq(const Var &a, const Var &b) { return binary(Op::Neq, a, b); }

inline Var &operator+=(Var &a, const Var &b) { return a = a + b; }
inline Var &operator-=(Var &a, const Var &b) { return a = a - b; }
inline Var &operator*=(Var &a, const Var &b) { return a = a * b; }
inline Var &operator+=(Var &a, double b) { return a = a + b; }
inline Var &operator*=(Var &a, double b) { return a = a * b; }

// ---------------------------------------------------------------------
// Memory

/// Masked gather. Unevaluated side-effect free sources are indexed
/// symbolically; evaluated sources produce a load. Masked lanes read 0.
Var gather(const Var &src, const Var &index, const Var &mask);
Var gather(const Var &src, const Var &index);

/// Queue a scatter (or scatter-add) into an evaluated target array
void scatter(Var &target, const Var &value, const Var &index, const Var &mask,
             Reduce reduce = Reduce::None);
inline void scatter_add(Var &target, const Var &value, const Var &index, const Var &mask) {
    scatter(target, value, index, mask, Reduce::Add);
}

/// Horizontal sum, returned as a 1-element array (lazy scatter-add)
Var sum(const Var &a);

/// Evaluate several variables jointly (one kernel per launch size)
void eval(std::initializer_list<const Var *> vars);
void eval(const std::vector<Var> &vars);

/// True when no lane of a boolean array is set (evaluates)
bool none(const Var &mask);

/// Assert that a variable is uniform or of the given size
uint32_t broadcast_size(std::initializer_list<const Var *> vars);

} // namespace tj
