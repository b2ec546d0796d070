/*
    src/vm.cpp -- Lowering (handler selection) and the chunked interpreter
*/

#include <tracejit/kernel.hpp>
#include <tracejit/scalar.hpp>

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace tj {

namespace {

struct Frame {
    uint32_t call;
    uint32_t self_reg;
};

struct Vm {
    const KernelIR *ir;
    LaunchBindings *b;
    uint64_t *R;
    uint32_t W, base, n;
    bool checked;
    ExecCounters cnt;
    std::vector<Frame> frames;

    uint64_t *reg(uint32_t r) { return R + (size_t) r * W; }
};

using Handler = void (*)(Vm &, const IrInst &, const uint8_t *);

void exec_block(Vm &vm, const IrBlock &b, const uint8_t *mask);

// ---------------------------------------------------------------------
// Elementwise handlers

void h_unary(Vm &vm, const IrInst &in, const uint8_t *) {
    const uint64_t *a = vm.reg(in.args[0]);
    uint64_t *d = vm.reg(in.dst);
    for (uint32_t j = 0; j < vm.W; ++j)
        d[j] = scalar::unary(in.op, in.type, in.src_type, a[j]);
}

void h_binary(Vm &vm, const IrInst &in, const uint8_t *) {
    const uint64_t *a = vm.reg(in.args[0]), *b = vm.reg(in.args[1]);
    uint64_t *d = vm.reg(in.dst);
    for (uint32_t j = 0; j < vm.W; ++j)
        d[j] = scalar::binary(in.op, in.src_type, a[j], b[j]);
}

void h_ternary(Vm &vm, const IrInst &in, const uint8_t *) {
    const uint64_t *a = vm.reg(in.args[0]), *b = vm.reg(in.args[1]), *c = vm.reg(in.args[2]);
    uint64_t *d = vm.reg(in.dst);
    for (uint32_t j = 0; j < vm.W; ++j)
        d[j] = scalar::ternary(in.op, in.type, a[j], b[j], c[j]);
}

void h_select(Vm &vm, const IrInst &in, const uint8_t *) {
    const uint64_t *m = vm.reg(in.args[0]), *a = vm.reg(in.args[1]), *b = vm.reg(in.args[2]);
    uint64_t *d = vm.reg(in.dst);
    for (uint32_t j = 0; j < vm.W; ++j)
        d[j] = m[j] ? a[j] : b[j];
}

template <typename T> inline T ld(uint64_t v) {
    if constexpr (std::is_same_v<T, float>)
        return scalar::to_f32(v);
    else if constexpr (std::is_same_v<T, double>)
        return scalar::to_f64(v);
    else
        return (T) v;
}

template <typename T> inline uint64_t st(T v) {
    if constexpr (std::is_same_v<T, float>)
        return scalar::from_f32(v);
    else if constexpr (std::is_same_v<T, double>)
        return scalar::from_f64(v);
    else
        return (uint64_t) v;
}

template <typename T, typename F> void bin_loop(Vm &vm, const IrInst &in, F f) {
    const uint64_t *a = vm.reg(in.args[0]), *b = vm.reg(in.args[1]);
    uint64_t *d = vm.reg(in.dst);
    for (uint32_t j = 0; j < vm.W; ++j)
        d[j] = st<T>(f(ld<T>(a[j]), ld<T>(b[j])));
}

template <typename T> void h_add(Vm &vm, const IrInst &in, const uint8_t *) {
    bin_loop<T>(vm, in, [](T x, T y) { return (T) (x + y); });
}
template <typename T> void h_sub(Vm &vm, const IrInst &in, const uint8_t *) {
    bin_loop<T>(vm, in, [](T x, T y) { return (T) (x - y); });
}
template <typename T> void h_mul(Vm &vm, const IrInst &in, const uint8_t *) {
    bin_loop<T>(vm, in, [](T x, T y) { return (T) (x * y); });
}
template <typename T> void h_fdiv(Vm &vm, const IrInst &in, const uint8_t *) {
    bin_loop<T>(vm, in, [](T x, T y) { return x / y; });
}
template <typename T> void h_min(Vm &vm, const IrInst &in, const uint8_t *) {
    bin_loop<T>(vm, in, [](T x, T y) { return y < x ? y : x; });
}
template <typename T> void h_max(Vm &vm, const IrInst &in, const uint8_t *) {
    bin_loop<T>(vm, in, [](T x, T y) { return x < y ? y : x; });
}
template <typename T> void h_lt(Vm &vm, const IrInst &in, const uint8_t *) {
    const uint64_t *a = vm.reg(in.args[0]), *b = vm.reg(in.args[1]);
    uint64_t *d = vm.reg(in.dst);
    for (uint32_t j = 0; j < vm.W; ++j)
        d[j] = ld<T>(a[j]) < ld<T>(b[j]);
}
template <typename T> void h_fma(Vm &vm, const IrInst &in, const uint8_t *) {
    const uint64_t *a = vm.reg(in.args[0]), *b = vm.reg(in.args[1]), *c = vm.reg(in.args[2]);
    uint64_t *d = vm.reg(in.dst);
    for (uint32_t j = 0; j < vm.W; ++j)
        d[j] = st<T>(std::fma(ld<T>(a[j]), ld<T>(b[j]), ld<T>(c[j])));
}
void h_u32_add(Vm &vm, const IrInst &in, const uint8_t *) {
    bin_loop<uint32_t>(vm, in, [](uint32_t x, uint32_t y) { return x + y; });
}
void h_u32_mul(Vm &vm, const IrInst &in, const uint8_t *) {
    bin_loop<uint32_t>(vm, in, [](uint32_t x, uint32_t y) { return x * y; });
}
void h_u32_xor(Vm &vm, const IrInst &in, const uint8_t *) {
    bin_loop<uint32_t>(vm, in, [](uint32_t x, uint32_t y) { return x ^ y; });
}

// ---------------------------------------------------------------------
// Leaves and memory

void h_literal(Vm &vm, const IrInst &in, const uint8_t *) {
    uint64_t *d = vm.reg(in.dst);
    std::fill(d, d + vm.W, in.imm);
}

void h_index(Vm &vm, const IrInst &in, const uint8_t *) {
    uint64_t *d = vm.reg(in.dst);
    for (uint32_t j = 0; j < vm.W; ++j)
        d[j] = vm.base + j;
}

void h_bufref(Vm &vm, const IrInst &in, const uint8_t *) {
    uint64_t *d = vm.reg(in.dst);
    std::fill(d, d + vm.W, (uint64_t) in.aux);
}

void h_load(Vm &vm, const IrInst &in, const uint8_t *mask) {
    const Buffer &buf = *vm.b->buffers[in.aux];
    uint64_t *d = vm.reg(in.dst);
    uint32_t es = dtype_size(buf.dtype);
    if (in.aux2) {
        std::fill(d, d + vm.W, buf.data[0]);
        for (uint32_t j = 0; j < vm.W; ++j)
            if (mask[j])
                vm.cnt.bytes_read += es;
        return;
    }
    for (uint32_t j = 0; j < vm.W; ++j) {
        if (j < vm.n) {
            d[j] = buf.data[vm.base + j];
            if (mask[j])
                vm.cnt.bytes_read += es;
        } else {
            d[j] = 0;
        }
    }
}

void h_store(Vm &vm, const IrInst &in, const uint8_t *mask) {
    Buffer &buf = *vm.b->buffers[in.aux];
    const uint64_t *v = vm.reg(in.args[0]);
    uint32_t es = dtype_size(buf.dtype);
    for (uint32_t j = 0; j < vm.n; ++j)
        if (mask[j]) {
            buf.data[vm.base + j] = v[j];
            vm.cnt.bytes_written += es;
        }
}

[[noreturn]] void oob(const char *what, uint64_t idx, uint32_t size) {
    throw MemoryError(std::string(what) + ": index " + std::to_string(idx) +
                      " out of bounds for array of size " + std::to_string(size));
}

void h_gather(Vm &vm, const IrInst &in, const uint8_t *mask) {
    const uint64_t *ref = vm.reg(in.args[0]), *idx = vm.reg(in.args[1]),
                   *m = vm.reg(in.args[2]);
    uint64_t *d = vm.reg(in.dst);
    for (uint32_t j = 0; j < vm.W; ++j) {
        if (!mask[j] || !m[j]) {
            d[j] = 0;
            continue;
        }
        const Buffer &buf = *vm.b->buffers[ref[j]];
        uint64_t i = idx[j];
        if (i >= buf.size) {
            if (vm.checked)
                oob("gather", i, buf.size);
            d[j] = 0;
            continue;
        }
        d[j] = buf.data[i];
        vm.cnt.bytes_read += dtype_size(buf.dtype);
    }
}

void h_scatter(Vm &vm, const IrInst &in, const uint8_t *mask) {
    const uint64_t *ref = vm.reg(in.args[0]), *val = vm.reg(in.args[1]),
                   *idx = vm.reg(in.args[2]), *m = vm.reg(in.args[3]);
    for (uint32_t j = 0; j < vm.W; ++j) {
        if (!mask[j] || !m[j])
            continue;
        Buffer &buf = *vm.b->buffers[ref[j]];
        uint64_t i = idx[j];
        if (i >= buf.size) {
            if (vm.checked)
                oob("scatter", i, buf.size);
            continue;
        }
        if (in.aux == (uint32_t) Reduce::Add)
            buf.pending.emplace_back((uint32_t) i, val[j]);
        else
            buf.data[i] = val[j];
        vm.cnt.bytes_written += dtype_size(buf.dtype);
    }
}

void h_closure(Vm &vm, const IrInst &in, const uint8_t *mask) {
    if (vm.frames.empty())
        throw InternalError("closure access outside of a call");
    const Frame &f = vm.frames.back();
    const auto &table = vm.b->closures[f.call];
    const uint64_t *self = vm.reg(f.self_reg);
    uint64_t *d = vm.reg(in.dst);
    uint32_t es = dtype_size(in.type);
    for (uint32_t j = 0; j < vm.W; ++j) {
        d[j] = 0;
        if (!mask[j] || self[j] >= table.size() || in.aux >= table[self[j]].size())
            continue;
        d[j] = table[self[j]][in.aux];
        if (in.op == Op::ClosureLoad)
            vm.cnt.bytes_read += es;
    }
}

// ---------------------------------------------------------------------
// Structured control flow

void h_loop(Vm &vm, const IrInst &in, const uint8_t *mask) {
    const IrLoop &l = vm.ir->loops[in.aux];
    size_t np = l.phis.size();
    for (size_t k = 0; k < np; ++k)
        std::copy_n(vm.reg(l.init[k]), vm.W, vm.reg(l.phis[k]));
    std::vector<uint8_t> active(mask, mask + vm.W);
    std::vector<uint64_t> tmp(np * vm.W);
    while (true) {
        exec_block(vm, l.header, active.data());
        const uint64_t *c = vm.reg(l.cond);
        bool any = false;
        for (uint32_t j = 0; j < vm.W; ++j) {
            active[j] = active[j] && c[j];
            any |= active[j] != 0;
        }
        if (!any)
            break;
        exec_block(vm, l.body, active.data());
        for (size_t k = 0; k < np; ++k)
            std::copy_n(vm.reg(l.results[k]), vm.W, tmp.data() + k * vm.W);
        for (size_t k = 0; k < np; ++k) {
            uint64_t *p = vm.reg(l.phis[k]);
            const uint64_t *r = tmp.data() + k * vm.W;
            for (uint32_t j = 0; j < vm.W; ++j)
                if (active[j])
                    p[j] = r[j];
        }
    }
}

void h_call(Vm &vm, const IrInst &in, const uint8_t *mask) {
    const IrCall &c = vm.ir->calls[in.aux];
    const uint64_t *self = vm.reg(c.self);
    for (uint32_t o : c.outs)
        std::fill_n(vm.reg(o), vm.W, 0);
    std::vector<uint8_t> sm(vm.W);
    for (uint32_t s : c.subs) {
        bool any = false;
        for (uint32_t j = 0; j < vm.W; ++j) {
            uint64_t i = self[j];
            sm[j] = mask[j] && i < c.target_sub.size() && c.target_sub[i] == (int32_t) s;
            any |= sm[j] != 0;
        }
        if (!any)
            continue;
        const IrSub &sub = vm.ir->subs[s];
        for (size_t p = 0; p < sub.params.size(); ++p)
            std::copy_n(vm.reg(c.inputs[p]), vm.W, vm.reg(sub.params[p]));
        vm.frames.push_back({ in.aux, c.self });
        exec_block(vm, sub.body, sm.data());
        vm.frames.pop_back();
        for (size_t k = 0; k < c.outs.size(); ++k) {
            uint64_t *o = vm.reg(c.outs[k]);
            const uint64_t *r = vm.reg(sub.rets[k]);
            for (uint32_t j = 0; j < vm.W; ++j)
                if (sm[j])
                    o[j] = r[j];
        }
    }
}

void h_intersect(Vm &vm, const IrInst &in, const uint8_t *mask) {
    uint32_t W = vm.W;
    if (!vm.b->ray) {
        // no geometry: every ray misses
        for (uint32_t k : in.outs)
            std::fill_n(vm.reg(k), W, 0);
        return;
    }
    std::vector<double> in_d(7 * W);
    std::vector<uint8_t> act(W);
    for (int k = 0; k < 7; ++k) {
        const uint64_t *r = vm.reg(in.args[k]);
        for (uint32_t j = 0; j < W; ++j)
            in_d[k * W + j] = scalar::decode(in.src_type, r[j]);
    }
    const uint64_t *m = vm.reg(in.args[7]);
    for (uint32_t j = 0; j < W; ++j)
        act[j] = mask[j] && m[j] && j < vm.n;
    const double *o[3] = { &in_d[0], &in_d[W], &in_d[2 * W] };
    const double *d[3] = { &in_d[3 * W], &in_d[4 * W], &in_d[5 * W] };
    std::vector<uint8_t> hit(W, 0);
    std::vector<double> t(W, 0), u(W, 0), v(W, 0);
    std::vector<uint32_t> prim(W, 0), shape(W, 0);
    vm.b->ray->intersect(W, o, d, &in_d[6 * W], act.data(), in.aux != 0, hit.data(), t.data(),
                         prim.data(), shape.data(), u.data(), v.data());
    Dtype ft = in.src_type;
    uint64_t *out[6];
    for (int k = 0; k < 6; ++k)
        out[k] = vm.reg(in.outs[k]);
    for (uint32_t j = 0; j < W; ++j) {
        bool h = act[j] && hit[j];
        out[0][j] = h;
        out[1][j] = h ? scalar::encode(ft, t[j]) : 0;
        out[2][j] = h ? prim[j] : 0;
        out[3][j] = h ? shape[j] : 0;
        out[4][j] = h ? scalar::encode(ft, u[j]) : 0;
        out[5][j] = h ? scalar::encode(ft, v[j]) : 0;
    }
}

// ---------------------------------------------------------------------
// Handler table

struct Table {
    std::vector<Handler> fns;
    std::map<std::tuple<int, int, int>, uint16_t> special; // (op, type, src)
    std::map<int, uint16_t> generic;                       // by op

    uint16_t add(Handler h) {
        fns.push_back(h);
        return (uint16_t) (fns.size() - 1);
    }
    void spec(Op op, Dtype t, Dtype s, Handler h) {
        special[{ (int) op, (int) t, (int) s }] = add(h);
    }
    void gen(Op op, Handler h) { generic[(int) op] = add(h); }

    Table() {
        add(nullptr); // 0 = unresolved
        gen(Op::Literal, h_literal);
        gen(Op::Index, h_index);
        gen(Op::Data, h_load);
        gen(Op::BufRef, h_bufref);
        gen(Op::Store, h_store);
        gen(Op::Gather, h_gather);
        gen(Op::Scatter, h_scatter);
        gen(Op::ClosureLoad, h_closure);
        gen(Op::ClosureBuf, h_closure);
        gen(Op::Loop, h_loop);
        gen(Op::Call, h_call);
        gen(Op::Intersect, h_intersect);
        gen(Op::Select, h_select);
        gen(Op::Fma, h_ternary);
        for (int o = (int) Op::Neg; o <= (int) Op::Bitcast; ++o)
            gen((Op) o, h_unary);
        for (int o = (int) Op::Add; o <= (int) Op::Ge; ++o)
            gen((Op) o, h_binary);

        spec(Op::Add, Dtype::F32, Dtype::F32, h_add<float>);
        spec(Op::Add, Dtype::F64, Dtype::F64, h_add<double>);
        spec(Op::Sub, Dtype::F32, Dtype::F32, h_sub<float>);
        spec(Op::Sub, Dtype::F64, Dtype::F64, h_sub<double>);
        spec(Op::Mul, Dtype::F32, Dtype::F32, h_mul<float>);
        spec(Op::Mul, Dtype::F64, Dtype::F64, h_mul<double>);
        spec(Op::Div, Dtype::F32, Dtype::F32, h_fdiv<float>);
        spec(Op::Div, Dtype::F64, Dtype::F64, h_fdiv<double>);
        spec(Op::Min, Dtype::F32, Dtype::F32, h_min<float>);
        spec(Op::Min, Dtype::F64, Dtype::F64, h_min<double>);
        spec(Op::Max, Dtype::F32, Dtype::F32, h_max<float>);
        spec(Op::Max, Dtype::F64, Dtype::F64, h_max<double>);
        spec(Op::Lt, Dtype::Bool, Dtype::F32, h_lt<float>);
        spec(Op::Lt, Dtype::Bool, Dtype::F64, h_lt<double>);
        spec(Op::Lt, Dtype::Bool, Dtype::U32, h_lt<uint32_t>);
        spec(Op::Fma, Dtype::F32, Dtype::F32, h_fma<float>);
        spec(Op::Fma, Dtype::F64, Dtype::F64, h_fma<double>);
        spec(Op::Add, Dtype::U32, Dtype::U32, h_u32_add);
        spec(Op::Mul, Dtype::U32, Dtype::U32, h_u32_mul);
        spec(Op::Xor, Dtype::U32, Dtype::U32, h_u32_xor);
    }

    uint16_t select(const IrInst &in) const {
        auto it = special.find({ (int) in.op, (int) in.type, (int) in.src_type });
        if (it != special.end())
            return it->second;
        auto g = generic.find((int) in.op);
        if (g == generic.end())
            throw InternalError(std::string("lowering: no handler for ") + op_name(in.op));
        return g->second;
    }
};

const Table &table() {
    static Table t;
    return t;
}

void exec_block(Vm &vm, const IrBlock &b, const uint8_t *mask) {
    const auto &fns = table().fns;
    for (const IrInst &in : b)
        fns[in.fn](vm, in, mask);
}

// ---------------------------------------------------------------------
// Validation

struct Validator {
    const KernelIR &ir;
    void reg(uint32_t r) const {
        if (r >= ir.regs.size())
            throw InternalError("lowering: register out of range");
    }
    void block(IrBlock &b) {
        for (IrInst &in : b) {
            for (uint32_t a : in.args)
                reg(a);
            for (uint32_t o : in.outs)
                reg(o);
            switch (in.op) {
                case Op::Loop: {
                    if (in.aux >= ir.loops.size())
                        throw InternalError("lowering: bad loop index");
                    IrLoop &l = const_cast<IrLoop &>(ir.loops[in.aux]);
                    if (l.phis.size() != l.init.size() || l.phis.size() != l.results.size())
                        throw InternalError("lowering: malformed loop");
                    block(l.header);
                    block(l.body);
                    break;
                }
                case Op::Call: {
                    if (in.aux >= ir.calls.size())
                        throw InternalError("lowering: bad call index");
                    const IrCall &c = ir.calls[in.aux];
                    for (uint32_t s : c.subs) {
                        if (s >= ir.subs.size())
                            throw InternalError("lowering: bad subroutine index");
                        IrSub &sub = const_cast<IrSub &>(ir.subs[s]);
                        if (sub.params.size() != c.inputs.size() ||
                            sub.rets.size() != c.outs.size())
                            throw InternalError("lowering: subroutine interface mismatch");
                        block(sub.body);
                    }
                    break;
                }
                case Op::Data:
                case Op::Store:
                    if (in.aux >= ir.bindings.size())
                        throw InternalError("lowering: bad binding");
                    [[fallthrough]];
                default:
                    reg(in.dst);
            }
            in.fn = table().select(in);
        }
    }
};

bool handlers_match(const KernelIR &ir, const IrBlock &b) {
    const Table &t = table();
    for (const IrInst &in : b) {
        if (in.fn == 0 || in.fn >= t.fns.size())
            return false;
        try {
            if (t.select(in) != in.fn)
                return false;
        } catch (const InternalError &) {
            return false;
        }
        if (in.op == Op::Loop) {
            if (in.aux >= ir.loops.size() || !handlers_match(ir, ir.loops[in.aux].header) ||
                !handlers_match(ir, ir.loops[in.aux].body))
                return false;
        } else if (in.op == Op::Call) {
            if (in.aux >= ir.calls.size())
                return false;
            for (uint32_t s : ir.calls[in.aux].subs)
                if (s >= ir.subs.size() || !handlers_match(ir, ir.subs[s].body))
                    return false;
        }
    }
    return true;
}

} // namespace

ProgramPtr lower(KernelIR ir) {
    auto p = std::make_shared<Program>();
    p->hash = ir.hash();
    p->ir = std::move(ir);
    Validator v{ p->ir };
    v.block(p->ir.body);
    return p;
}

ExecCounters execute(const Program &prog, LaunchBindings &bindings, uint32_t width,
                     bool checked) {
    const KernelIR &ir = prog.ir;
    if (bindings.buffers.size() < ir.bindings.size())
        throw StructuralError("execute: kernel expects " + std::to_string(ir.bindings.size()) +
                              " bindings, got " + std::to_string(bindings.buffers.size()));
    for (size_t i = 0; i < ir.bindings.size(); ++i) {
        const BindingDesc &d = ir.bindings[i];
        const BufferPtr &b = bindings.buffers[i];
        if (!b)
            throw StructuralError("execute: binding " + std::to_string(i) + " is missing");
        if (b->dtype != d.dtype)
            throw StructuralError("execute: binding " + std::to_string(i) + " has type " +
                                  dtype_name(b->dtype) + ", expected " + dtype_name(d.dtype));
        bool bad = d.uniform ? b->size != 1
                             : d.role == BindingRole::Output && b->size != ir.size;
        if (bad)
            throw ShapeError("execute: binding " + std::to_string(i) + " has " +
                             std::to_string(b->size) + " elements in a launch of " +
                             std::to_string(ir.size));
    }
    Vm vm;
    vm.ir = &ir;
    vm.b = &bindings;
    vm.W = width;
    vm.checked = checked;
    std::vector<uint64_t> regs((size_t) ir.regs.size() * width, 0);
    vm.R = regs.data();
    std::vector<uint8_t> mask(width);
    for (uint32_t base = 0; base < ir.size; base += width) {
        vm.base = base;
        vm.n = std::min(width, ir.size - base);
        for (uint32_t j = 0; j < width; ++j)
            mask[j] = j < vm.n;
        exec_block(vm, ir.body, mask.data());
    }
    return vm.cnt;
}

// ---------------------------------------------------------------------
// Cache

KernelCache &KernelCache::global() {
    static KernelCache cache;
    return cache;
}

void KernelCache::set_disk_dir(std::filesystem::path dir) {
    std::lock_guard<std::mutex> guard(m_mutex);
    m_dir = std::move(dir);
    if (!m_dir.empty())
        std::filesystem::create_directories(m_dir);
}

void KernelCache::clear_memory() {
    std::lock_guard<std::mutex> guard(m_mutex);
    m_programs.clear();
}

size_t KernelCache::size() const {
    std::lock_guard<std::mutex> guard(m_mutex);
    return m_programs.size();
}

static std::string hex(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long) h);
    return buf;
}

KernelCache::Lookup KernelCache::get(KernelIR &&ir) {
    uint64_t h = ir.hash();
    uint32_t size = ir.size;
    std::lock_guard<std::mutex> guard(m_mutex);

    // Programs are size independent; the launch size is patched per lookup
    auto with_size = [&](const ProgramPtr &p) -> ProgramPtr {
        if (p->ir.size == size)
            return p;
        auto q = std::make_shared<Program>(*p);
        q->ir.size = size;
        return q;
    };

    auto it = m_programs.find(h);
    if (it != m_programs.end())
        return { with_size(it->second), true, false };

    if (!m_dir.empty()) {
        std::filesystem::path bin = m_dir / (hex(h) + ".bin");
        std::ifstream f(bin, std::ios::binary);
        if (f) {
            std::ostringstream ss;
            ss << f.rdbuf();
            auto p = Program::deserialize(ss.str());
            if (p && p->hash == h && handlers_match(p->ir, p->ir.body)) {
                auto ptr = std::make_shared<const Program>(std::move(*p));
                m_programs.emplace(h, ptr);
                return { with_size(ptr), true, true };
            }
            // corrupt entry: fall through and rewrite
        }
    }

    ProgramPtr p = lower(std::move(ir));
    m_programs.emplace(h, p);
    if (!m_dir.empty()) {
        std::ofstream f(m_dir / (hex(h) + ".bin"), std::ios::binary | std::ios::trunc);
        f << p->serialize();
        std::ofstream meta(m_dir / (hex(h) + ".meta"), std::ios::trunc);
        meta << "flags " << p->ir.flags_mask << "\nops " << p->ir.op_count() << '\n';
    }
    return { p, false, false };
}

} // namespace tj
