/*
    tracejit/context.hpp -- Trace records, evaluated buffers and the
    TraceContext that owns them.
*/

#pragma once

#include "types.hpp"

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace tj {

class Context;
class Instance;
struct RayQueryHook;

/// Evaluated array contents. Elements are stored as raw 64-bit payloads.
struct Buffer {
    Dtype dtype;
    uint32_t size;
    std::vector<uint64_t> data;

    /// Scatter-add contributions not yet folded into 'data'
    std::vector<std::pair<uint32_t, uint64_t>> pending;

    Buffer(Dtype dtype, uint32_t size, uint64_t fill = 0);
    Buffer(const Buffer &other);
    ~Buffer();

    /// Fold pending scatter-add contributions in canonical order
    /// (by index, then by value payload) so the result does not depend on
    /// the order in which lanes or kernels produced them.
    void settle();

    uint64_t bytes() const { return (uint64_t) size * dtype_size(dtype); }

    static uint64_t live_count();
    static uint64_t peak_count();
    static void reset_peak();
};

using BufferPtr = std::shared_ptr<Buffer>;

/// One node of the trace
struct VarRecord {
    Op op = Op::Literal;
    Dtype dtype = Dtype::F32;
    uint32_t size = 1;
    std::vector<uint32_t> deps;
    uint64_t literal = 0;
    uint32_t aux = 0, aux2 = 0;
    uint32_t ext_refs = 0, int_refs = 0;
    uint32_t se_refs = 0;   // internal references held by queued scatters
    BufferPtr data;
    bool dirty = false;
    bool lvn_registered = false;
    std::string label;

    bool is_literal() const { return op == Op::Literal; }
    bool is_data() const { return op == Op::Data; }
};

/// Closure slot captured while tracing one instance of a polymorphic call
struct ClosureSlot {
    bool indirect = false;   // array passed by reference
    Dtype dtype = Dtype::F32;
    uint64_t value = 0;      // scalar payload (indirect == false)
    BufferPtr buffer;        // referenced array (indirect == true)
};

struct ClosureBlock {
    std::vector<ClosureSlot> slots;
};

/// A recorded loop
struct LoopRecord {
    std::string name;
    uint32_t size = 1;
    uint32_t start = 0;             // first variable id created by the loop
    uint32_t cond = 0;
    std::vector<uint32_t> entry, phi, result;
    std::vector<bool> invariant;
    std::vector<uint32_t> side_effects;
};

/// A recorded polymorphic call
struct CallRecord {
    std::string domain, method;
    uint32_t size = 1;
    uint32_t start = 0;
    uint32_t self = 0;
    std::vector<uint32_t> inputs;        // caller-side values passed to the call
    std::vector<uint32_t> placeholders;  // matching CallIn variables
    std::vector<Dtype> out_types;
    std::vector<uint32_t> out_sizes;

    struct Target {
        uint32_t instance = 0;
        std::vector<uint32_t> outputs;
        std::vector<uint32_t> side_effects;
        ClosureBlock closure;
        uint64_t hash = 0;
        /// Variable id -> position of its first use while tracing this
        /// instance. Orders subroutine bodies independently of variable ids.
        std::unordered_map<uint32_t, uint32_t> touch;
    };
    std::vector<Target> targets;         // indexed by instance id - 1
    std::vector<bool> devirtualized;

    // Interface sizes before optimization (for statistics)
    uint32_t inputs_before = 0, outputs_before = 0;
};

/// Execution counters
struct LaunchStats {
    uint64_t kernels_launched = 0;
    uint64_t loop_kernels = 0;       // kernels containing a recorded loop
    uint64_t bytes_read = 0;
    uint64_t bytes_written = 0;
    uint64_t ir_ops = 0;             // IR operations of launched kernels
    uint64_t lowerings = 0;          // IR -> bytecode compilations
    uint64_t cache_hits = 0;
    uint64_t disk_hits = 0;
    uint64_t subroutines = 0;        // subroutines in launched kernels
    double trace_time = 0, assembly_time = 0, compile_time = 0, exec_time = 0;

    // Interface statistics of recorded calls and loops
    uint64_t call_inputs_before = 0, call_inputs_after = 0;
    uint64_t call_outputs_before = 0, call_outputs_after = 0;
    uint64_t loop_state_before = 0, loop_state_after = 0;

    uint64_t bytes() const { return bytes_read + bytes_written; }
};

class Var;

/// Owner of all trace state. Single-owner; not safe for concurrent mutation.
class Context {
public:
    explicit Context(Flags flags = {}, Mode mode = Mode::Megakernel);
    ~Context();
    Context(const Context &) = delete;
    Context &operator=(const Context &) = delete;

    // ---------------------------------------------------------------
    // Configuration

    const Flags &flags() const { return m_flags; }
    void set_flags(const Flags &f) { m_flags = f; }
    Mode mode() const { return m_mode; }
    void set_mode(Mode m) { m_mode = m; }

    /// Loops are recorded into kernels (otherwise: wavefront evaluation)
    bool record_loops() const { return m_mode == Mode::Megakernel && m_flags.loop_record; }
    /// Polymorphic calls are recorded (otherwise: grouped wavefront launches)
    bool record_calls() const { return m_mode != Mode::Wavefront && m_flags.vcall_record; }

    /// Chunk width used by the virtual machine
    uint32_t chunk_width() const { return m_chunk_width; }
    void set_chunk_width(uint32_t w) { m_chunk_width = w ? w : 1; }

    // ---------------------------------------------------------------
    // Variable creation

    /// Create (or reuse) a record. Returns an id holding one external reference.
    uint32_t new_var(Op op, Dtype dtype, std::span<const uint32_t> deps,
                     uint64_t literal = 0, uint32_t aux = 0, uint32_t aux2 = 0);

    uint32_t new_literal(Dtype dtype, uint64_t payload, uint32_t size = 1);
    uint32_t new_index(uint32_t size);
    uint32_t new_data(BufferPtr buffer);

    /// Structured node (loops, calls, ray queries) with an explicit size.
    /// Bypasses checks and simplification.
    uint32_t new_node(Op op, Dtype dtype, uint32_t size, std::vector<uint32_t> deps,
                      uint32_t aux = 0, uint32_t aux2 = 0, bool lvn = false);

    // ---------------------------------------------------------------
    // Reference counting

    void inc_ext(uint32_t id);
    void dec_ext(uint32_t id);
    void inc_int(uint32_t id);
    void dec_int(uint32_t id);

    const VarRecord &rec(uint32_t id) const;
    VarRecord &rec_mut(uint32_t id);
    bool alive(uint32_t id) const { return m_vars.count(id) != 0; }
    size_t var_count() const { return m_vars.size(); }
    uint32_t next_id() const { return m_next_id; }

    /// Number of transitive unevaluated dependencies of a variable
    size_t dep_count(uint32_t id) const;

    // ---------------------------------------------------------------
    // Side effects

    /// Register a side effect (scatter, or loop/call anchor containing one)
    void push_side_effect(uint32_t id);
    bool has_pending_side_effects() const { return !m_side_effects.empty(); }

    /// Mark a buffer variable as target of queued side effects
    void mark_dirty(uint32_t id);

    // ---------------------------------------------------------------
    // Evaluation

    /// Evaluate the given variables and all queued side effects
    void eval(std::span<const uint32_t> ids);
    void eval(uint32_t id) { eval(std::span<const uint32_t>(&id, 1)); }
    void flush() { eval(std::span<const uint32_t>()); }

    /// Evaluate (if needed) and return the buffer backing a variable
    BufferPtr buffer(uint32_t id);

    /// Deterministic topological order of the unevaluated ancestors of 'roots'
    std::vector<uint32_t> schedule(std::span<const uint32_t> roots) const;

    // ---------------------------------------------------------------
    // Recording scopes (loops and calls)

    struct Scope {
        enum Kind { Loop, Call } kind;
        uint32_t start = 0;
        std::vector<uint32_t> side_effects;
        // Call scopes only
        ClosureBlock *closure = nullptr;
        uint32_t closure_tag = 0;
        uint32_t call_size = 1;
        Instance *instance = nullptr;
        std::unordered_map<uint32_t, uint32_t> captured;
        std::unordered_map<uint32_t, uint32_t> *touch = nullptr;
    };

    void push_scope(Scope s);
    Scope pop_scope();
    bool recording() const { return !m_scopes.empty(); }
    Scope *call_scope();
    const std::vector<Scope> &scopes() const { return m_scopes; }

    /// Capture an outside variable into the closure of the active call.
    /// 'force' captures literals too (instance attributes).
    uint32_t capture(uint32_t id, bool force, bool as_buffer = false);

    uint32_t new_closure_tag() { return ++m_closure_tag; }

    /// Lane masks applied to side effects (wavefront loops)
    void push_mask(uint32_t id) { inc_ext(id); m_masks.push_back(id); }
    void pop_mask() { dec_ext(m_masks.back()); m_masks.pop_back(); }
    uint32_t current_mask() const { return m_masks.empty() ? 0 : m_masks.back(); }

    std::vector<LoopRecord> &loops() { return m_loops; }
    std::vector<CallRecord> &calls() { return m_calls; }

    // ---------------------------------------------------------------
    // Instances and ray queries

    /// Register an instance under a domain; returns its dense id (from 1)
    uint32_t register_instance(const std::string &domain, Instance *inst);
    void unregister_instance(const std::string &domain, uint32_t id);
    std::vector<Instance *> instances(const std::string &domain) const;
    Instance *instance(const std::string &domain, uint32_t id) const;

    void set_ray_hook(std::shared_ptr<RayQueryHook> hook) { m_ray_hook = std::move(hook); }
    const std::shared_ptr<RayQueryHook> &ray_hook() const { return m_ray_hook; }

    /// Trace stack of (instance, method) pairs for recursion detection
    std::vector<std::pair<Instance *, std::string>> &call_stack() { return m_call_stack; }

    // ---------------------------------------------------------------
    // Statistics and dumps

    LaunchStats &stats() { return m_stats; }
    void reset_stats() { m_stats = {}; }

    /// One line per live record:
    /// `%<id> = <op> <deps...> [literal] : <dtype>[<size>] refs=(ext,int)`
    std::string dump_trace() const;

    /// Slot for state layered on top of the tracer (the AD tape).
    /// Released before any trace record.
    std::shared_ptr<void> &extension() { return m_ext; }

    /// IR dumps of kernels assembled since the last call
    std::vector<std::string> &ir_log() { return m_ir_log; }
    bool &log_ir() { return m_log_ir; }

private:
    friend class Assembler;

    uint32_t insert(VarRecord &&r);
    uint32_t touch(uint32_t id);
    uint32_t new_var_impl(Op op, Dtype dtype, std::span<const uint32_t> deps, uint64_t literal,
                          uint32_t aux, uint32_t aux2);
    uint32_t new_literal_impl(Dtype dtype, uint64_t payload, uint32_t size);
    uint32_t new_index_impl(uint32_t size);
    uint32_t new_node_impl(Op op, Dtype dtype, uint32_t size, std::vector<uint32_t> deps,
                           uint32_t aux, uint32_t aux2, bool lvn);
    uint32_t capture_impl(uint32_t id, bool force, bool as_buffer);
    void free_var(uint32_t id);
    uint32_t simplify(Op op, Dtype dtype, uint32_t size, std::span<const uint32_t> deps);
    void check_deps(Op op, Dtype dtype, std::span<const uint32_t> deps, uint32_t &size);
    void run_eval(std::vector<uint32_t> roots);

    struct Key {
        Op op; Dtype dtype; uint32_t size;
        uint64_t literal; uint32_t aux, aux2;
        std::vector<uint32_t> deps;
        bool operator==(const Key &) const = default;
    };
    struct KeyHash { size_t operator()(const Key &k) const; };
    Key key_of(const VarRecord &r) const;

    Flags m_flags;
    Mode m_mode;
    uint32_t m_chunk_width = 16;
    uint32_t m_next_id = 1;
    uint32_t m_closure_tag = 0;
    std::unordered_map<uint32_t, VarRecord> m_vars;
    std::unordered_map<Key, uint32_t, KeyHash> m_lvn;
    std::vector<uint32_t> m_side_effects;
    std::vector<Scope> m_scopes;
    std::vector<uint32_t> m_masks;
    std::vector<LoopRecord> m_loops;
    std::vector<CallRecord> m_calls;
    std::unordered_map<std::string, std::vector<Instance *>> m_registry;
    std::shared_ptr<RayQueryHook> m_ray_hook;
    std::vector<std::pair<Instance *, std::string>> m_call_stack;
    LaunchStats m_stats;
    std::vector<std::string> m_ir_log;
    bool m_log_ir = false;
    bool m_evaluating = false;
    std::shared_ptr<void> m_ext;
};

/// Reference-counted handle to a trace variable
class Var {
public:
    Var() = default;
    static Var steal(Context *ctx, uint32_t id) { Var v; v.m_ctx = ctx; v.m_id = id; return v; }
    static Var borrow(Context *ctx, uint32_t id) {
        if (id)
            ctx->inc_ext(id);
        return steal(ctx, id);
    }

    Var(const Var &o) : m_ctx(o.m_ctx), m_id(o.m_id) { if (m_id) m_ctx->inc_ext(m_id); }
    Var(Var &&o) noexcept : m_ctx(o.m_ctx), m_id(o.m_id) { o.m_id = 0; }
    Var &operator=(const Var &o) {
        Var tmp(o);
        std::swap(m_ctx, tmp.m_ctx);
        std::swap(m_id, tmp.m_id);
        return *this;
    }
    Var &operator=(Var &&o) noexcept {
        std::swap(m_ctx, o.m_ctx);
        std::swap(m_id, o.m_id);
        return *this;
    }
    ~Var() { if (m_id) m_ctx->dec_ext(m_id); }

    uint32_t id() const { return m_id; }
    Context *ctx() const { return m_ctx; }
    bool valid() const { return m_id != 0; }
    explicit operator bool() const { return valid(); }

    Dtype dtype() const { return m_ctx->rec(m_id).dtype; }
    uint32_t size() const { return m_ctx->rec(m_id).size; }
    bool is_literal() const { return m_ctx->rec(m_id).is_literal(); }
    bool is_evaluated() const { return m_ctx->rec(m_id).is_data(); }

    /// Literal payload interpreted as double (requires is_literal())
    double literal_value() const;

    void eval() const { m_ctx->eval(m_id); }

    /// Evaluate and copy the contents to the host (as doubles)
    std::vector<double> to_host() const;
    std::vector<uint64_t> to_host_raw() const;

    /// Read a single element
    double item(uint32_t i = 0) const;

private:
    Context *m_ctx = nullptr;
    uint32_t m_id = 0;
};

} // namespace tj
