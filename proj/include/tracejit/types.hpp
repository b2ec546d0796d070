/*
    tracejit/types.hpp -- Scalar types, opcodes, option flags and errors
*/

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace tj {

/// Element types supported by the tracer
enum class Dtype : uint8_t { Bool, I32, U32, U64, F32, F64, Ptr, Count };

/// Byte size of one element as stored in device memory
constexpr uint32_t dtype_size(Dtype t) {
    switch (t) {
        case Dtype::Bool: return 1;
        case Dtype::U64:
        case Dtype::F64: return 8;
        default: return 4;
    }
}

constexpr bool is_float(Dtype t) { return t == Dtype::F32 || t == Dtype::F64; }
constexpr bool is_int(Dtype t) {
    return t == Dtype::I32 || t == Dtype::U32 || t == Dtype::U64 || t == Dtype::Ptr;
}

const char *dtype_name(Dtype t);

/// Operation kinds of trace records. The order of the arithmetic block
/// matters for the arity tables in ops.cpp.
enum class Op : uint8_t {
    // Leaves
    Literal, Data, Index,

    // Unary
    Neg, Not, Sqrt, Abs, Exp, Log, Sin, Cos, Floor, Rcp, Cast, Bitcast,

    // Binary
    Add, Sub, Mul, Div, Mod, Min, Max, And, Or, Xor, Shl, Shr,
    Eq, Neq, Lt, Le, Gt, Ge,

    // Ternary
    Fma, Select,

    // Memory
    Gather, Scatter,

    // Structured control flow
    LoopPhi, Loop, LoopOut,
    CallIn, Call, CallOut, ClosureLoad, ClosureBuf,

    // Ray queries
    Intersect, Extract,

    // Kernel IR only: buffer reference and output store
    BufRef, Store,

    Count
};

const char *op_name(Op op);

/// Number of operands of the elementwise operations (-1 for variable arity)
int op_arity(Op op);

constexpr bool op_is_commutative(Op op) {
    switch (op) {
        case Op::Add: case Op::Mul: case Op::Min: case Op::Max:
        case Op::And: case Op::Or: case Op::Xor: case Op::Eq: case Op::Neq:
            return true;
        default:
            return false;
    }
}

constexpr bool op_is_compare(Op op) { return op >= Op::Eq && op <= Op::Ge; }

constexpr bool op_is_elementwise(Op op) {
    return (op >= Op::Neg && op <= Op::Select) || op == Op::Index || op == Op::Literal;
}

enum class Reduce : uint8_t { None, Add };

/// Execution strategy for loops and polymorphic calls
enum class Mode : uint8_t { Megakernel, WavefrontLoops, Wavefront };

const char *mode_name(Mode m);
Mode parse_mode(std::string_view s);

/// Optimization toggles. Letters follow the benchmark column naming
/// (b) vcall recording, (c) dedup, (d) global vcall optimization,
/// (e) constant propagation, (f) value numbering, (g) loop recording,
/// (h) loop state optimization.
struct Flags {
    bool vcall_record = true;   // b
    bool vcall_dedup = true;    // c
    bool vcall_global = true;   // d
    bool const_prop = true;     // e
    bool lvn = true;            // f
    bool loop_record = true;    // g
    bool loop_state = true;     // h
    bool checked_memory = true;

    /// All optimizations disabled (memory checks stay on)
    static Flags none() {
        Flags f;
        f.vcall_record = f.vcall_dedup = f.vcall_global = f.const_prop =
            f.lvn = f.loop_record = f.loop_state = false;
        return f;
    }

    /// Build from the 7-bit mask b..h (bit 0 = b)
    static Flags from_mask(uint32_t mask);
    uint32_t mask() const;

    /// Parse a comma separated list of letters / long names, e.g. "b,c,lvn"
    static Flags parse(std::string_view list);
    std::string str() const;

    bool operator==(const Flags &) const = default;
};

/// Base class of all errors raised by the library
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Operand arity / dtype mismatch or otherwise malformed request
struct StructuralError : Error { using Error::Error; };

/// Array sizes that cannot be broadcast against each other
struct ShapeError : Error { using Error::Error; };

/// Operation not permitted in the current execution mode (e.g. eval inside a recorded loop)
struct ModeError : Error { using Error::Error; };

/// Out-of-bounds memory access detected in checked mode
struct MemoryError : Error { using Error::Error; };

/// Violated internal invariant
struct InternalError : Error { using Error::Error; };

} // namespace tj
