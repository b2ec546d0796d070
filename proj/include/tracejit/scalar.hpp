/*
    tracejit/scalar.hpp -- Per-element semantics of every elementwise opcode.

    Values travel as raw 64-bit payloads. Constant folding and the virtual
    machine both go through these functions, which is what makes folded
    and unfolded traces agree bit for bit.
*/

#pragma once

#include "types.hpp"

#include <bit>
#include <cmath>
#include <cstring>

namespace tj::scalar {

inline uint64_t from_f32(float v) { return std::bit_cast<uint32_t>(v); }
inline uint64_t from_f64(double v) { return std::bit_cast<uint64_t>(v); }
inline float to_f32(uint64_t b) { return std::bit_cast<float>((uint32_t) b); }
inline double to_f64(uint64_t b) { return std::bit_cast<double>(b); }

/// Encode a double as a payload of the given type (with rounding / truncation)
inline uint64_t encode(Dtype t, double v) {
    switch (t) {
        case Dtype::Bool: return v != 0.0 ? 1 : 0;
        case Dtype::I32: return (uint32_t) (int32_t) v;
        case Dtype::U32:
        case Dtype::Ptr: return (uint32_t) v;
        case Dtype::U64: return (uint64_t) v;
        case Dtype::F32: return from_f32((float) v);
        case Dtype::F64: return from_f64(v);
        default: return 0;
    }
}

/// Decode a payload into a double (lossy for large 64-bit integers)
inline double decode(Dtype t, uint64_t b) {
    switch (t) {
        case Dtype::Bool: return b ? 1.0 : 0.0;
        case Dtype::I32: return (double) (int32_t) (uint32_t) b;
        case Dtype::U32:
        case Dtype::Ptr: return (double) (uint32_t) b;
        case Dtype::U64: return (double) b;
        case Dtype::F32: return (double) to_f32(b);
        case Dtype::F64: return to_f64(b);
        default: return 0.0;
    }
}

inline uint64_t int_mask(Dtype t) {
    switch (t) {
        case Dtype::Bool: return 1;
        case Dtype::U64: return ~(uint64_t) 0;
        default: return 0xFFFFFFFFull;
    }
}

template <typename F> inline uint64_t float_unary(Dtype t, uint64_t a, F f) {
    if (t == Dtype::F32)
        return from_f32(f(to_f32(a)));
    return from_f64(f(to_f64(a)));
}

template <typename F> inline uint64_t float_binary(Dtype t, uint64_t a, uint64_t b, F f) {
    if (t == Dtype::F32)
        return from_f32(f(to_f32(a), to_f32(b)));
    return from_f64(f(to_f64(a), to_f64(b)));
}

inline uint64_t cast(Dtype to, Dtype from, uint64_t a) {
    if (to == from)
        return a;
    if (from == Dtype::F32 || from == Dtype::F64) {
        double v = decode(from, a);
        if (to == Dtype::F32)
            return from_f32((float) v);
        if (to == Dtype::F64)
            return from_f64(v);
        if (to == Dtype::Bool)
            return v != 0.0;
        if (!std::isfinite(v))
            return 0;
        if (to == Dtype::I32)
            return (uint32_t) (int32_t) v;
        if (to == Dtype::U64)
            return v <= 0 ? 0 : (uint64_t) v;
        return v <= 0 ? 0 : (uint32_t) (int64_t) v;
    }
    // integer / bool source
    if (to == Dtype::F32) {
        if (from == Dtype::I32)
            return from_f32((float) (int32_t) (uint32_t) a);
        return from_f32((float) a);
    }
    if (to == Dtype::F64) {
        if (from == Dtype::I32)
            return from_f64((double) (int32_t) (uint32_t) a);
        return from_f64((double) a);
    }
    if (to == Dtype::Bool)
        return a != 0;
    if (to == Dtype::U64 && from == Dtype::I32)
        return (uint64_t) (int64_t) (int32_t) (uint32_t) a;
    return a & int_mask(to);
}

inline uint64_t unary(Op op, Dtype t, Dtype src, uint64_t a) {
    switch (op) {
        case Op::Cast: return cast(t, src, a);
        case Op::Bitcast: return a & int_mask(dtype_size(t) == 8 ? Dtype::U64 : Dtype::U32);
        case Op::Neg:
            if (is_float(t))
                return float_unary(t, a, [](auto x) { return -x; });
            return (0 - a) & int_mask(t);
        case Op::Not:
            if (t == Dtype::Bool)
                return a ^ 1;
            return (~a) & int_mask(t);
        case Op::Abs:
            if (is_float(t))
                return float_unary(t, a, [](auto x) { return std::abs(x); });
            if (t == Dtype::I32)
                return (uint32_t) std::abs((int32_t) (uint32_t) a);
            return a;
        case Op::Sqrt: return float_unary(t, a, [](auto x) { return std::sqrt(x); });
        case Op::Exp: return float_unary(t, a, [](auto x) { return std::exp(x); });
        case Op::Log: return float_unary(t, a, [](auto x) { return std::log(x); });
        case Op::Sin: return float_unary(t, a, [](auto x) { return std::sin(x); });
        case Op::Cos: return float_unary(t, a, [](auto x) { return std::cos(x); });
        case Op::Floor: return float_unary(t, a, [](auto x) { return std::floor(x); });
        case Op::Rcp: return float_unary(t, a, [](auto x) { return decltype(x)(1) / x; });
        default: return 0;
    }
}

template <typename T> inline T sel_min(T a, T b) { return b < a ? b : a; }
template <typename T> inline T sel_max(T a, T b) { return a < b ? b : a; }

template <typename T> inline uint64_t cmp(Op op, T a, T b) {
    switch (op) {
        case Op::Eq: return a == b;
        case Op::Neq: return a != b;
        case Op::Lt: return a < b;
        case Op::Le: return a <= b;
        case Op::Gt: return a > b;
        case Op::Ge: return a >= b;
        default: return 0;
    }
}

/// Binary operation. 't' is the operand type (comparisons return Bool).
inline uint64_t binary(Op op, Dtype t, uint64_t a, uint64_t b) {
    if (op_is_compare(op)) {
        if (t == Dtype::F32)
            return cmp(op, to_f32(a), to_f32(b));
        if (t == Dtype::F64)
            return cmp(op, to_f64(a), to_f64(b));
        if (t == Dtype::I32)
            return cmp(op, (int32_t) (uint32_t) a, (int32_t) (uint32_t) b);
        return cmp(op, a, b);
    }
    if (is_float(t)) {
        switch (op) {
            case Op::Add: return float_binary(t, a, b, [](auto x, auto y) { return x + y; });
            case Op::Sub: return float_binary(t, a, b, [](auto x, auto y) { return x - y; });
            case Op::Mul: return float_binary(t, a, b, [](auto x, auto y) { return x * y; });
            case Op::Div: return float_binary(t, a, b, [](auto x, auto y) { return x / y; });
            case Op::Min: return float_binary(t, a, b, [](auto x, auto y) { return sel_min(x, y); });
            case Op::Max: return float_binary(t, a, b, [](auto x, auto y) { return sel_max(x, y); });
            case Op::Mod: return float_binary(t, a, b, [](auto x, auto y) { return std::fmod(x, y); });
            default: break;
        }
        // Bit operations on floats act on the representation
        uint64_t m = int_mask(dtype_size(t) == 8 ? Dtype::U64 : Dtype::U32);
        switch (op) {
            case Op::And: return a & b & m;
            case Op::Or: return (a | b) & m;
            case Op::Xor: return (a ^ b) & m;
            default: return 0;
        }
    }
    uint64_t m = int_mask(t);
    uint32_t bits = t == Dtype::U64 ? 64 : 32;
    switch (op) {
        case Op::Add: return (a + b) & m;
        case Op::Sub: return (a - b) & m;
        case Op::Mul: return (a * b) & m;
        case Op::Div:
            if (b == 0)
                return 0;
            if (t == Dtype::I32)
                return (uint32_t) ((int32_t) (uint32_t) a / (int32_t) (uint32_t) b);
            return (a / b) & m;
        case Op::Mod:
            if (b == 0)
                return 0;
            if (t == Dtype::I32)
                return (uint32_t) ((int32_t) (uint32_t) a % (int32_t) (uint32_t) b);
            return (a % b) & m;
        case Op::Min:
            if (t == Dtype::I32)
                return (uint32_t) sel_min((int32_t) (uint32_t) a, (int32_t) (uint32_t) b);
            return sel_min(a, b);
        case Op::Max:
            if (t == Dtype::I32)
                return (uint32_t) sel_max((int32_t) (uint32_t) a, (int32_t) (uint32_t) b);
            return sel_max(a, b);
        case Op::And: return a & b;
        case Op::Or: return a | b;
        case Op::Xor: return a ^ b;
        case Op::Shl: return (a << (b & (bits - 1))) & m;
        case Op::Shr:
            if (t == Dtype::I32)
                return (uint32_t) ((int32_t) (uint32_t) a >> (b & 31));
            return a >> (b & (bits - 1));
        default: return 0;
    }
}

inline uint64_t ternary(Op op, Dtype t, uint64_t a, uint64_t b, uint64_t c) {
    if (op == Op::Select)
        return a ? b : c;
    // fma
    if (t == Dtype::F32)
        return from_f32(std::fma(to_f32(a), to_f32(b), to_f32(c)));
    if (t == Dtype::F64)
        return from_f64(std::fma(to_f64(a), to_f64(b), to_f64(c)));
    return (a * b + c) & int_mask(t);
}

/// Payload of the constants 0 and 1 in a given type
inline uint64_t zero(Dtype) { return 0; }
inline uint64_t one(Dtype t) {
    switch (t) {
        case Dtype::F32: return from_f32(1.f);
        case Dtype::F64: return from_f64(1.0);
        default: return 1;
    }
}

/// Payload equality that treats +0 and -0 as different (bit-exact)
inline bool is_zero_payload(Dtype t, uint64_t v) {
    if (is_float(t))
        return v == 0; // only +0.0
    return v == 0;
}

} // namespace tj::scalar
