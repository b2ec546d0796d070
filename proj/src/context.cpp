/*
    src/context.cpp -- Variable records, value numbering, algebraic
    simplification and reference counting
*/

#include <tracejit/context.hpp>
#include <tracejit/control_flow.hpp>
#include <tracejit/scalar.hpp>

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <sstream>

namespace tj {

// ---------------------------------------------------------------------
// Names

static const char *dtype_names[] = { "bool", "i32", "u32", "u64", "f32", "f64", "ptr" };

const char *dtype_name(Dtype t) { return dtype_names[(int) t]; }

static const char *op_names[] = {
    "literal", "data", "index",
    "neg", "not", "sqrt", "abs", "exp", "log", "sin", "cos", "floor", "rcp", "cast", "bitcast",
    "add", "sub", "mul", "div", "mod", "min", "max", "and", "or", "xor", "shl", "shr",
    "eq", "neq", "lt", "le", "gt", "ge",
    "fma", "select",
    "gather", "scatter",
    "loop_phi", "loop", "loop_out",
    "call_in", "call", "call_out", "closure_load", "closure_buf",
    "intersect", "extract",
    "bufref", "store"
};
static_assert(sizeof(op_names) / sizeof(op_names[0]) == (size_t) Op::Count);

const char *op_name(Op op) { return op_names[(int) op]; }

int op_arity(Op op) {
    if (op == Op::Literal || op == Op::Data || op == Op::Index)
        return 0;
    if (op >= Op::Neg && op <= Op::Bitcast)
        return 1;
    if (op >= Op::Add && op <= Op::Ge)
        return 2;
    if (op == Op::Fma || op == Op::Select || op == Op::Gather)
        return 3;
    if (op == Op::Scatter)
        return 4;
    return -1;
}

const char *mode_name(Mode m) {
    switch (m) {
        case Mode::Megakernel: return "megakernel";
        case Mode::WavefrontLoops: return "wavefront-loops";
        default: return "wavefront";
    }
}

Mode parse_mode(std::string_view s) {
    if (s == "megakernel")
        return Mode::Megakernel;
    if (s == "wavefront-loops")
        return Mode::WavefrontLoops;
    if (s == "wavefront")
        return Mode::Wavefront;
    throw StructuralError("unknown mode '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------
// Flags

Flags Flags::from_mask(uint32_t m) {
    Flags f;
    f.vcall_record = m & 1;
    f.vcall_dedup = m & 2;
    f.vcall_global = m & 4;
    f.const_prop = m & 8;
    f.lvn = m & 16;
    f.loop_record = m & 32;
    f.loop_state = m & 64;
    return f;
}

uint32_t Flags::mask() const {
    return (vcall_record ? 1 : 0) | (vcall_dedup ? 2 : 0) | (vcall_global ? 4 : 0) |
           (const_prop ? 8 : 0) | (lvn ? 16 : 0) | (loop_record ? 32 : 0) |
           (loop_state ? 64 : 0);
}

Flags Flags::parse(std::string_view list) {
    Flags f = Flags::none();
    if (list == "all")
        return Flags{};
    if (list.empty() || list == "none")
        return f;
    size_t pos = 0;
    while (pos <= list.size()) {
        size_t end = list.find(',', pos);
        if (end == std::string_view::npos)
            end = list.size();
        std::string_view item = list.substr(pos, end - pos);
        if (item == "b" || item == "vcall_record") f.vcall_record = true;
        else if (item == "c" || item == "vcall_dedup") f.vcall_dedup = true;
        else if (item == "d" || item == "vcall_global") f.vcall_global = true;
        else if (item == "e" || item == "const_prop") f.const_prop = true;
        else if (item == "f" || item == "lvn") f.lvn = true;
        else if (item == "g" || item == "loop_record") f.loop_record = true;
        else if (item == "h" || item == "loop_state") f.loop_state = true;
        else if (item == "unchecked") f.checked_memory = false;
        else if (!item.empty())
            throw StructuralError("unknown optimization flag '" + std::string(item) + "'");
        pos = end + 1;
    }
    return f;
}

std::string Flags::str() const {
    std::string s;
    const char *letters = "bcdefgh";
    for (int i = 0; i < 7; ++i)
        if (mask() & (1u << i))
            s += letters[i];
    if (!checked_memory)
        s += "-unchecked";
    return s.empty() ? "none" : s;
}

// ---------------------------------------------------------------------
// Buffers

static std::atomic<uint64_t> buffers_live{ 0 }, buffers_peak{ 0 };

static void buffer_created() {
    uint64_t n = ++buffers_live;
    uint64_t p = buffers_peak.load();
    while (n > p && !buffers_peak.compare_exchange_weak(p, n)) {}
}

Buffer::Buffer(Dtype dtype, uint32_t size, uint64_t fill)
    : dtype(dtype), size(size), data(size, fill) {
    buffer_created();
}

Buffer::Buffer(const Buffer &o) : dtype(o.dtype), size(o.size), data(o.data), pending(o.pending) {
    buffer_created();
}

Buffer::~Buffer() { --buffers_live; }

uint64_t Buffer::live_count() { return buffers_live.load(); }
uint64_t Buffer::peak_count() { return buffers_peak.load(); }
void Buffer::reset_peak() { buffers_peak = buffers_live.load(); }

void Buffer::settle() {
    if (pending.empty())
        return;
    std::stable_sort(pending.begin(), pending.end());
    for (auto [i, v] : pending)
        data[i] = scalar::binary(Op::Add, dtype, data[i], v);
    pending.clear();
}

// ---------------------------------------------------------------------
// Context

Context::Context(Flags flags, Mode mode) : m_flags(flags), m_mode(mode) {}

Context::~Context() {
    m_ext.reset();
    // Records may reference each other; drop everything without cascading.
    m_lvn.clear();
    m_vars.clear();
}

size_t Context::KeyHash::operator()(const Key &k) const {
    uint64_t h = 1469598103934665603ull;
    auto mix = [&](uint64_t v) { h = (h ^ v) * 1099511628211ull; };
    mix((uint64_t) k.op);
    mix((uint64_t) k.dtype);
    mix(k.size);
    mix(k.literal);
    mix(k.aux);
    mix(k.aux2);
    for (uint32_t d : k.deps)
        mix(d);
    return (size_t) h;
}

Context::Key Context::key_of(const VarRecord &r) const {
    return Key{ r.op, r.dtype, r.size, r.literal, r.aux, r.aux2, r.deps };
}

static bool lvn_eligible(Op op) {
    return op_is_elementwise(op) || op == Op::Gather || op == Op::Extract ||
           op == Op::ClosureLoad || op == Op::ClosureBuf;
}

const VarRecord &Context::rec(uint32_t id) const {
    auto it = m_vars.find(id);
    if (it == m_vars.end())
        throw InternalError("access to expired variable %" + std::to_string(id));
    return it->second;
}

VarRecord &Context::rec_mut(uint32_t id) {
    auto it = m_vars.find(id);
    if (it == m_vars.end())
        throw InternalError("access to expired variable %" + std::to_string(id));
    return it->second;
}

void Context::inc_ext(uint32_t id) { rec_mut(id).ext_refs++; }
void Context::inc_int(uint32_t id) { rec_mut(id).int_refs++; }

void Context::dec_ext(uint32_t id) {
    auto it = m_vars.find(id);
    if (it == m_vars.end())
        return; // context teardown
    VarRecord &r = it->second;
    if (r.ext_refs == 0)
        throw InternalError("dec_ext: no external references");
    if (--r.ext_refs == 0 && r.int_refs == 0)
        free_var(id);
}

void Context::dec_int(uint32_t id) {
    auto it = m_vars.find(id);
    if (it == m_vars.end())
        return;
    VarRecord &r = it->second;
    if (r.int_refs == 0)
        throw InternalError("dec_int: no internal references");
    if (--r.int_refs == 0 && r.ext_refs == 0)
        free_var(id);
}

void Context::free_var(uint32_t root) {
    std::vector<uint32_t> todo{ root };
    while (!todo.empty()) {
        uint32_t id = todo.back();
        todo.pop_back();
        auto it = m_vars.find(id);
        if (it == m_vars.end())
            continue;
        VarRecord &r = it->second;
        if (r.lvn_registered) {
            auto lit = m_lvn.find(key_of(r));
            if (lit != m_lvn.end() && lit->second == id)
                m_lvn.erase(lit);
        }
        std::vector<uint32_t> release = std::move(r.deps);

        // Structured nodes keep their bodies alive through the side tables
        if (r.op == Op::Loop && r.aux < m_loops.size()) {
            LoopRecord &l = m_loops[r.aux];
            release.push_back(l.cond);
            for (auto v : l.phi) release.push_back(v);
            for (auto v : l.result) release.push_back(v);
            for (auto v : l.side_effects) release.push_back(v);
            l = LoopRecord{};
        } else if (r.op == Op::Call && r.aux < m_calls.size()) {
            CallRecord &c = m_calls[r.aux];
            for (auto v : c.placeholders) release.push_back(v);
            for (auto &t : c.targets) {
                for (auto v : t.outputs) release.push_back(v);
                for (auto v : t.side_effects) release.push_back(v);
            }
            c = CallRecord{};
        }
        if (r.op == Op::Scatter && !release.empty()) {
            auto tit = m_vars.find(release[0]);
            if (tit != m_vars.end() && tit->second.se_refs > 0)
                tit->second.se_refs--;
        }
        m_vars.erase(it);

        for (uint32_t d : release) {
            if (!d)
                continue;
            auto dit = m_vars.find(d);
            if (dit == m_vars.end())
                continue;
            VarRecord &dr = dit->second;
            if (dr.int_refs == 0)
                throw InternalError("free_var: reference count underflow");
            if (--dr.int_refs == 0 && dr.ext_refs == 0)
                todo.push_back(d);
        }
    }
}

uint32_t Context::insert(VarRecord &&r) {
    uint32_t id = m_next_id++;
    for (uint32_t d : r.deps)
        if (d)
            inc_int(d);
    r.ext_refs = 1;
    bool lvn = m_flags.lvn && lvn_eligible(r.op);
    auto [it, ok] = m_vars.emplace(id, std::move(r));
    if (lvn) {
        it->second.lvn_registered = true;
        m_lvn.emplace(key_of(it->second), id);
    }
    return id;
}

void Context::check_deps(Op op, Dtype dtype, std::span<const uint32_t> deps, uint32_t &size) {
    int arity = op_arity(op);
    if (arity >= 0 && (int) deps.size() != arity)
        throw StructuralError(std::string(op_name(op)) + ": expected " +
                              std::to_string(arity) + " operands, got " +
                              std::to_string(deps.size()));
    for (uint32_t d : deps)
        if (!alive(d))
            throw StructuralError(std::string(op_name(op)) + ": operand %" +
                                  std::to_string(d) + " is not live");

    auto dt = [&](size_t i) { return rec(deps[i]).dtype; };
    auto fail = [&](const char *what) {
        throw StructuralError(std::string(op_name(op)) + ": " + what);
    };

    if (op >= Op::Add && op <= Op::Ge) {
        if (dt(0) != dt(1))
            fail("operand dtypes differ");
        if (op_is_compare(op) && dtype != Dtype::Bool)
            fail("comparison must produce bool");
        if (!op_is_compare(op) && dtype != dt(0))
            fail("result dtype differs from operands");
        if ((op == Op::And || op == Op::Or || op == Op::Xor) && is_float(dt(0)) && dt(0) != dtype)
            fail("bit operation dtype mismatch");
    } else if (op == Op::Fma) {
        if (dt(0) != dt(1) || dt(1) != dt(2) || dtype != dt(0))
            fail("operand dtypes differ");
    } else if (op == Op::Select) {
        if (dt(0) != Dtype::Bool)
            fail("mask must be bool");
        if (dt(1) != dt(2) || dtype != dt(1))
            fail("operand dtypes differ");
    } else if (op >= Op::Neg && op <= Op::Rcp) {
        if (dtype != dt(0))
            fail("result dtype differs from operand");
        if (op >= Op::Sqrt && op != Op::Abs && !is_float(dtype))
            fail("requires a floating point operand");
    } else if (op == Op::Bitcast) {
        if (dtype_size(dtype) != dtype_size(dt(0)))
            fail("bitcast between types of different size");
    } else if (op == Op::Gather) {
        if (dt(1) != Dtype::U32 && dt(1) != Dtype::I32 && dt(1) != Dtype::Ptr)
            fail("index must be u32");
        if (dt(2) != Dtype::Bool)
            fail("mask must be bool");
        if (dtype != dt(0))
            fail("result dtype differs from source");
    } else if (op == Op::Scatter) {
        if (dt(0) != dt(1))
            fail("target and value dtype differ");
        if (dt(2) != Dtype::U32 && dt(2) != Dtype::I32 && dt(2) != Dtype::Ptr)
            fail("index must be u32");
        if (dt(3) != Dtype::Bool)
            fail("mask must be bool");
    }

    // Broadcasting: every operand is uniform or matches the largest size.
    // Gather/scatter sources and targets are exempt.
    size_t first = (op == Op::Gather || op == Op::Scatter) ? 1 : 0;
    size = 1;
    for (size_t i = first; i < deps.size(); ++i)
        size = std::max(size, rec(deps[i]).size);
    for (size_t i = first; i < deps.size(); ++i) {
        uint32_t s = rec(deps[i]).size;
        if (s != 1 && s != size)
            throw ShapeError(std::string(op_name(op)) + ": incompatible sizes " +
                             std::to_string(s) + " and " + std::to_string(size));
    }
}

static bool is_lit(const VarRecord &r, uint64_t payload) {
    return r.op == Op::Literal && r.literal == payload;
}

uint32_t Context::simplify(Op op, Dtype dtype, uint32_t size, std::span<const uint32_t> deps) {
    auto R = [&](size_t i) -> const VarRecord & { return rec(deps[i]); };
    auto same = [&](uint32_t id) -> uint32_t {
        // Reuse an operand only when it already has the result size
        if (rec(id).size != size)
            return 0;
        inc_ext(id);
        return id;
    };

    bool all_lit = !deps.empty();
    for (uint32_t d : deps)
        all_lit &= rec(d).op == Op::Literal;

    if (all_lit && op >= Op::Neg && op <= Op::Select) {
        uint64_t v;
        Dtype src = R(0).dtype;
        if (deps.size() == 1)
            v = scalar::unary(op, dtype, src, R(0).literal);
        else if (deps.size() == 2)
            v = scalar::binary(op, src, R(0).literal, R(1).literal);
        else
            v = scalar::ternary(op, dtype, R(0).literal, R(1).literal, R(2).literal);
        return new_literal(dtype, v, size);
    }

    uint64_t zero = 0, one = scalar::one(dtype);
    // Float identities must hold bit for bit: x + (-0) == x for every x, while
    // x + 0 flips -0 and x * 0 is not 0 for negative, infinite or NaN x.
    const bool fp = is_float(dtype);
    const uint64_t add_id = !fp ? zero : dtype == Dtype::F32 ? 0x80000000ull : 0x8000000000000000ull;
    switch (op) {
        case Op::Add:
            if (is_lit(R(1), add_id)) return same(deps[0]);
            if (is_lit(R(0), add_id)) return same(deps[1]);
            break;
        case Op::Sub:
            if (is_lit(R(1), zero)) return same(deps[0]);
            break;
        case Op::Mul:
            if (is_lit(R(1), one)) return same(deps[0]);
            if (is_lit(R(0), one)) return same(deps[1]);
            if (!fp && (is_lit(R(0), zero) || is_lit(R(1), zero)))
                return new_literal(dtype, zero, size);
            break;
        case Op::Div:
            if (is_lit(R(1), one)) return same(deps[0]);
            break;
        case Op::And:
            if (dtype == Dtype::Bool) {
                if (is_lit(R(1), 1)) return same(deps[0]);
                if (is_lit(R(0), 1)) return same(deps[1]);
                if (is_lit(R(0), 0) || is_lit(R(1), 0))
                    return new_literal(dtype, 0, size);
            }
            break;
        case Op::Or:
            if (dtype == Dtype::Bool) {
                if (is_lit(R(1), 0)) return same(deps[0]);
                if (is_lit(R(0), 0)) return same(deps[1]);
            }
            break;
        case Op::Select:
            if (is_lit(R(0), 1)) return same(deps[1]);
            if (is_lit(R(0), 0)) return same(deps[2]);
            if (deps[1] == deps[2]) return same(deps[1]);
            break;
        case Op::Fma:
            if (is_lit(R(2), add_id)) {
                uint32_t ab[2] = { deps[0], deps[1] };
                return new_var(Op::Mul, dtype, ab);
            }
            if (is_lit(R(1), one)) {
                uint32_t ac[2] = { deps[0], deps[2] };
                return new_var(Op::Add, dtype, ac);
            }
            if (is_lit(R(0), one)) {
                uint32_t bc[2] = { deps[1], deps[2] };
                return new_var(Op::Add, dtype, bc);
            }
            if (!fp && (is_lit(R(0), zero) || is_lit(R(1), zero)))
                return same(deps[2]);
            break;
        case Op::Cast:
            if (R(0).dtype == dtype) return same(deps[0]);
            break;
        default:
            break;
    }
    return 0;
}

uint32_t Context::new_var_impl(Op op, Dtype dtype, std::span<const uint32_t> deps_in,
                          uint64_t literal, uint32_t aux, uint32_t aux2) {
    std::vector<uint32_t> deps(deps_in.begin(), deps_in.end());

    // Implicit dependencies of a traced polymorphic call become closure slots
    if (Scope *cs = call_scope()) {
        for (size_t i = 0; i < deps.size(); ++i) {
            uint32_t d = deps[i];
            if (d >= cs->start)
                continue;
            const VarRecord &r = rec(d);
            bool as_buffer = (op == Op::Gather && i == 0) || (op == Op::Scatter && i == 0);
            if (r.op == Op::Literal || r.op == Op::Index || r.op == Op::ClosureBuf ||
                r.op == Op::ClosureLoad)
                continue;
            if (r.op == Op::Data && r.size > 1 && !as_buffer) {
                // Elementwise use of an array: lane-indexed load from the closure
                uint32_t buf = capture(d, false);
                uint32_t idx = new_index(cs->call_size);
                uint32_t msk = new_literal(Dtype::Bool, 1);
                uint32_t gdeps[3] = { buf, idx, msk };
                uint32_t g = new_var(Op::Gather, r.dtype, gdeps);
                dec_ext(idx);
                dec_ext(msk);
                deps[i] = g;
                // keep the loaded value alive until inserted below
                cs->captured.emplace(0x80000000u | g, g);
                continue;
            }
            deps[i] = capture(d, false, as_buffer);
        }
    }

    // Reading a variable with queued side effects triggers their evaluation
    if (!recording()) {
        for (uint32_t d : deps)
            if (alive(d) && rec(d).dirty) {
                flush();
                break;
            }
    }

    uint32_t size = 1;
    check_deps(op, dtype, deps, size);

    if (m_flags.const_prop && op >= Op::Neg && op <= Op::Select) {
        if (uint32_t r = simplify(op, dtype, size, deps))
            return r;
    }

    // Canonical operand order for commutative operations
    if (op_is_commutative(op) && deps.size() == 2 && deps[0] > deps[1])
        std::swap(deps[0], deps[1]);

    VarRecord r;
    r.op = op;
    r.dtype = dtype;
    r.size = size;
    r.deps = std::move(deps);
    r.literal = literal;
    r.aux = aux;
    r.aux2 = aux2;

    if (op == Op::Gather) {
        const VarRecord &src = rec(r.deps[0]);
        if (src.op != Op::Data && src.op != Op::ClosureBuf)
            throw StructuralError("gather: source must be evaluated");
    }

    if (m_flags.lvn && lvn_eligible(op)) {
        auto it = m_lvn.find(key_of(r));
        if (it != m_lvn.end()) {
            inc_ext(it->second);
            return it->second;
        }
    }
    return insert(std::move(r));
}

uint32_t Context::new_literal_impl(Dtype dtype, uint64_t payload, uint32_t size) {
    VarRecord r;
    r.op = Op::Literal;
    r.dtype = dtype;
    r.size = size;
    r.literal = payload;
    if (m_flags.lvn) {
        auto it = m_lvn.find(key_of(r));
        if (it != m_lvn.end()) {
            inc_ext(it->second);
            return it->second;
        }
    }
    return insert(std::move(r));
}

uint32_t Context::new_index_impl(uint32_t size) {
    VarRecord r;
    r.op = Op::Index;
    r.dtype = Dtype::U32;
    r.size = size;
    if (m_flags.lvn) {
        auto it = m_lvn.find(key_of(r));
        if (it != m_lvn.end()) {
            inc_ext(it->second);
            return it->second;
        }
    }
    return insert(std::move(r));
}

uint32_t Context::new_data(BufferPtr buffer) {
    VarRecord r;
    r.op = Op::Data;
    r.dtype = buffer->dtype;
    r.size = buffer->size;
    r.data = std::move(buffer);
    return insert(std::move(r));
}

uint32_t Context::new_node_impl(Op op, Dtype dtype, uint32_t size, std::vector<uint32_t> deps,
                           uint32_t aux, uint32_t aux2, bool lvn) {
    VarRecord r;
    r.op = op;
    r.dtype = dtype;
    r.size = size;
    r.deps = std::move(deps);
    r.aux = aux;
    r.aux2 = aux2;
    if (lvn && m_flags.lvn) {
        auto it = m_lvn.find(key_of(r));
        if (it != m_lvn.end()) {
            inc_ext(it->second);
            return it->second;
        }
        return insert(std::move(r));
    }
    // structured nodes are never value-numbered
    uint32_t id = m_next_id++;
    for (uint32_t d : r.deps)
        if (d)
            inc_int(d);
    r.ext_refs = 1;
    m_vars.emplace(id, std::move(r));
    return id;
}

size_t Context::dep_count(uint32_t id) const {
    std::vector<uint32_t> todo(rec(id).deps.begin(), rec(id).deps.end());
    std::unordered_map<uint32_t, bool> seen;
    while (!todo.empty()) {
        uint32_t d = todo.back();
        todo.pop_back();
        if (!d || seen.count(d))
            continue;
        seen[d] = true;
        for (uint32_t e : rec(d).deps)
            todo.push_back(e);
    }
    return seen.size();
}

// ---------------------------------------------------------------------
// Side effects and scopes

void Context::push_side_effect(uint32_t id) {
    inc_int(id);
    if (!m_scopes.empty())
        m_scopes.back().side_effects.push_back(id);
    else
        m_side_effects.push_back(id);
}

void Context::mark_dirty(uint32_t id) { rec_mut(id).dirty = true; }

void Context::push_scope(Scope s) { m_scopes.push_back(std::move(s)); }

Context::Scope Context::pop_scope() {
    if (m_scopes.empty())
        throw InternalError("pop_scope without push");
    Scope s = std::move(m_scopes.back());
    m_scopes.pop_back();
    for (auto &[key, id] : s.captured) {
        if (key & 0x80000000u)
            dec_ext(id);
        else
            dec_int(id);
    }
    s.captured.clear();
    return s;
}

Context::Scope *Context::call_scope() {
    for (auto it = m_scopes.rbegin(); it != m_scopes.rend(); ++it)
        if (it->kind == Scope::Call)
            return &*it;
    return nullptr;
}

uint32_t Context::capture_impl(uint32_t id, bool force, bool as_buffer) {
    Scope *cs = call_scope();
    if (!cs || id >= cs->start)
        return id;
    const VarRecord &r0 = rec(id);
    if (r0.op == Op::ClosureLoad || r0.op == Op::ClosureBuf)
        return id;
    if (r0.op == Op::Literal && !force)
        return id;
    if (r0.op != Op::Data && r0.op != Op::Literal)
        throw StructuralError(
            "polymorphic call body depends on an unevaluated outside variable %" +
            std::to_string(id) + "; pass it as an argument or evaluate it first");

    // size-1 arrays are captured by value unless addressed as memory
    bool indirect = r0.op == Op::Data && (r0.size > 1 || as_buffer);
    uint32_t key = indirect && r0.size == 1 ? (0x40000000u | id) : id;
    auto it = cs->captured.find(key);
    if (it != cs->captured.end())
        return it->second;

    const VarRecord &r = rec(id);
    ClosureSlot slot;
    slot.dtype = r.dtype;
    uint32_t size = 1;
    Op op = Op::ClosureLoad;
    if (r.op == Op::Literal) {
        slot.value = r.literal;
    } else if (!indirect) {
        r.data->settle();
        slot.value = r.data->data[0];
    } else {
        slot.indirect = true;
        slot.buffer = r.data;
        size = r.size;
        op = Op::ClosureBuf;
    }
    uint32_t slot_idx = (uint32_t) cs->closure->slots.size();
    cs->closure->slots.push_back(slot);

    VarRecord c;
    c.op = op;
    c.dtype = r.dtype;
    c.size = size;
    c.aux = slot_idx;
    c.aux2 = cs->closure_tag;
    uint32_t cid = insert(std::move(c));
    // the scope holds the reference from now on
    VarRecord &cr = rec_mut(cid);
    cr.ext_refs = 0;
    cr.int_refs = 1;
    cs->captured.emplace(key, cid);
    return cid;
}

// ---------------------------------------------------------------------
// Instances

uint32_t Context::register_instance(const std::string &domain, Instance *inst) {
    auto &v = m_registry[domain];
    v.push_back(inst);
    return (uint32_t) v.size();
}

void Context::unregister_instance(const std::string &domain, uint32_t id) {
    auto it = m_registry.find(domain);
    if (it != m_registry.end() && id >= 1 && id <= it->second.size())
        it->second[id - 1] = nullptr;
}

std::vector<Instance *> Context::instances(const std::string &domain) const {
    auto it = m_registry.find(domain);
    if (it == m_registry.end())
        return {};
    return it->second;
}

Instance *Context::instance(const std::string &domain, uint32_t id) const {
    auto it = m_registry.find(domain);
    if (it == m_registry.end() || id == 0 || id > it->second.size())
        return nullptr;
    return it->second[id - 1];
}

// ---------------------------------------------------------------------
// Dumps

static std::string literal_str(Dtype t, uint64_t v) {
    char buf[64];
    if (is_float(t))
        std::snprintf(buf, sizeof(buf), "%.9g", scalar::decode(t, v));
    else if (t == Dtype::I32)
        std::snprintf(buf, sizeof(buf), "%d", (int32_t) (uint32_t) v);
    else
        std::snprintf(buf, sizeof(buf), "%llu", (unsigned long long) v);
    return buf;
}

std::string Context::dump_trace() const {
    std::vector<uint32_t> ids;
    ids.reserve(m_vars.size());
    for (auto &[id, r] : m_vars)
        ids.push_back(id);
    std::sort(ids.begin(), ids.end());
    std::ostringstream os;
    for (uint32_t id : ids) {
        const VarRecord &r = m_vars.at(id);
        os << '%' << id << " = " << op_name(r.op);
        for (uint32_t d : r.deps)
            os << " %" << d;
        if (r.op == Op::Literal)
            os << ' ' << literal_str(r.dtype, r.literal);
        if (r.op == Op::Cast || r.op == Op::Bitcast)
            os << " from " << dtype_name(rec(r.deps[0]).dtype);
        if (r.op == Op::LoopOut || r.op == Op::CallOut || r.op == Op::Extract ||
            r.op == Op::ClosureLoad || r.op == Op::ClosureBuf || r.op == Op::LoopPhi ||
            r.op == Op::CallIn)
            os << " #" << r.aux;
        os << " : " << dtype_name(r.dtype) << '[' << r.size << ']';
        os << " refs=(" << r.ext_refs << ',' << r.int_refs << ')';
        if (!r.label.empty())
            os << " \"" << r.label << '"';
        os << '\n';
    }
    return os.str();
}

// ---------------------------------------------------------------------
// Var

double Var::literal_value() const {
    const VarRecord &r = m_ctx->rec(m_id);
    return scalar::decode(r.dtype, r.literal);
}

std::vector<uint64_t> Var::to_host_raw() const {
    BufferPtr b = m_ctx->buffer(m_id);
    return b->data;
}

std::vector<double> Var::to_host() const {
    BufferPtr b = m_ctx->buffer(m_id);
    std::vector<double> out(b->size);
    for (uint32_t i = 0; i < b->size; ++i)
        out[i] = scalar::decode(b->dtype, b->data[i]);
    return out;
}

double Var::item(uint32_t i) const {
    const VarRecord &r = m_ctx->rec(m_id);
    if (r.op == Op::Literal)
        return scalar::decode(r.dtype, r.literal);
    BufferPtr b = m_ctx->buffer(m_id);
    return scalar::decode(b->dtype, b->data[b->size == 1 ? 0 : i]);
}

uint32_t Context::touch(uint32_t id) {
    if (!id)
        return id;
    for (auto it = m_scopes.rbegin(); it != m_scopes.rend(); ++it)
        if (it->kind == Scope::Call) {
            if (it->touch)
                it->touch->emplace(id, (uint32_t) it->touch->size());
            break;
        }
    return id;
}

uint32_t Context::new_var(Op op, Dtype dtype, std::span<const uint32_t> deps, uint64_t literal,
                          uint32_t aux, uint32_t aux2) {
    return touch(new_var_impl(op, dtype, deps, literal, aux, aux2));
}

uint32_t Context::new_literal(Dtype dtype, uint64_t payload, uint32_t size) {
    return touch(new_literal_impl(dtype, payload, size));
}

uint32_t Context::new_index(uint32_t size) { return touch(new_index_impl(size)); }

uint32_t Context::new_node(Op op, Dtype dtype, uint32_t size, std::vector<uint32_t> deps,
                           uint32_t aux, uint32_t aux2, bool lvn) {
    return touch(new_node_impl(op, dtype, size, std::move(deps), aux, aux2, lvn));
}

uint32_t Context::capture(uint32_t id, bool force, bool as_buffer) {
    return touch(capture_impl(id, force, as_buffer));
}

} // namespace tj
