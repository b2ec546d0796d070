/*
    src/kernel_ir.cpp -- IR hashing, dumps and (de)serialization
*/

#include <tracejit/kernel.hpp>
#include <tracejit/scalar.hpp>

#include <cstdio>
#include <cstring>
#include <sstream>
#include <unordered_map>

namespace tj {

namespace {

struct Fnv {
    uint64_t h = 1469598103934665603ull;
    void byte(uint8_t b) { h = (h ^ b) * 1099511628211ull; }
    void u64(uint64_t v) {
        for (int i = 0; i < 8; ++i)
            byte((uint8_t) (v >> (8 * i)));
    }
    void u32(uint32_t v) {
        for (int i = 0; i < 4; ++i)
            byte((uint8_t) (v >> (8 * i)));
    }
};

// Canonical encoder. With 'renumber' set, registers defined inside the
// encoded region are numbered by first definition and registers defined
// elsewhere are tagged as outer references.
struct Encoder {
    const KernelIR &ir;
    bool renumber;
    Fnv f;
    std::unordered_map<uint32_t, uint32_t> local;

    Encoder(const KernelIR &ir, bool renumber) : ir(ir), renumber(renumber) {}

    void def(uint32_t r) {
        if (renumber && !local.count(r))
            local.emplace(r, (uint32_t) local.size());
        use(r);
    }
    void use(uint32_t r) {
        if (!renumber) {
            f.u32(r);
            return;
        }
        auto it = local.find(r);
        if (it != local.end()) {
            f.byte(0);
            f.u32(it->second);
        } else {
            f.byte(1);
            f.u32(r);
        }
    }

    void block(const IrBlock &b) {
        f.u32((uint32_t) b.size());
        for (const IrInst &in : b)
            inst(in);
    }

    void inst(const IrInst &in) {
        f.byte((uint8_t) in.op);
        f.byte((uint8_t) in.type);
        f.byte((uint8_t) in.src_type);
        f.u64(in.imm);
        f.u32(in.aux2);
        f.u32((uint32_t) in.args.size());
        for (uint32_t a : in.args)
            use(a);
        if (in.op == Op::Loop) {
            const IrLoop &l = ir.loops[in.aux];
            f.u32((uint32_t) l.phis.size());
            for (size_t k = 0; k < l.phis.size(); ++k) {
                use(l.init[k]);
                def(l.phis[k]);
            }
            block(l.header);
            use(l.cond);
            block(l.body);
            for (uint32_t r : l.results)
                use(r);
        } else if (in.op == Op::Call) {
            const IrCall &c = ir.calls[in.aux];
            use(c.self);
            f.u32((uint32_t) c.inputs.size());
            for (uint32_t r : c.inputs)
                use(r);
            f.u32((uint32_t) c.target_sub.size());
            for (int32_t s : c.target_sub)
                f.u32((uint32_t) s);
            for (uint32_t s : c.subs) {
                const IrSub &sub = ir.subs[s];
                f.u32(s);
                for (uint32_t p : sub.params)
                    def(p);
                block(sub.body);
                for (uint32_t r : sub.rets)
                    use(r);
            }
            for (uint32_t r : c.outs)
                def(r);
        } else if (in.op != Op::Literal && in.op != Op::Index) {
            f.u32(in.aux);
        }
        for (uint32_t o : in.outs)
            def(o);
        if (in.op != Op::Loop && in.op != Op::Call && in.op != Op::Scatter &&
            in.op != Op::Store)
            def(in.dst);
    }
};

void count_ops(const KernelIR &ir, const IrBlock &b, size_t &n) {
    for (const IrInst &in : b) {
        ++n;
        if (in.op == Op::Loop) {
            count_ops(ir, ir.loops[in.aux].header, n);
            count_ops(ir, ir.loops[in.aux].body, n);
        } else if (in.op == Op::Call) {
            for (uint32_t s : ir.calls[in.aux].subs)
                count_ops(ir, ir.subs[s].body, n);
        }
    }
}

std::string reg_str(uint32_t r) { return "r" + std::to_string(r); }

void dump_block(const KernelIR &ir, const IrBlock &b, std::ostringstream &os, int depth) {
    std::string pad(2 * depth, ' ');
    for (const IrInst &in : b) {
        os << pad;
        if (in.op == Op::Loop) {
            const IrLoop &l = ir.loops[in.aux];
            os << "loop L" << in.aux << " (";
            for (size_t k = 0; k < l.phis.size(); ++k)
                os << (k ? ", " : "") << reg_str(l.phis[k]) << " <- " << reg_str(l.init[k]);
            os << ") {\n" << pad << " header:\n";
            dump_block(ir, l.header, os, depth + 1);
            os << pad << " cond " << reg_str(l.cond) << "\n" << pad << " body:\n";
            dump_block(ir, l.body, os, depth + 1);
            os << pad << " next (";
            for (size_t k = 0; k < l.results.size(); ++k)
                os << (k ? ", " : "") << reg_str(l.results[k]);
            os << ")\n" << pad << "}\n";
            continue;
        }
        if (in.op == Op::Call) {
            const IrCall &c = ir.calls[in.aux];
            os << "(";
            for (size_t k = 0; k < c.outs.size(); ++k)
                os << (k ? ", " : "") << reg_str(c.outs[k]);
            os << ") = call C" << in.aux << " self=" << reg_str(c.self) << " (";
            for (size_t k = 0; k < c.inputs.size(); ++k)
                os << (k ? ", " : "") << reg_str(c.inputs[k]);
            os << ") {\n";
            for (uint32_t s : c.subs) {
                const IrSub &sub = ir.subs[s];
                os << pad << " sub S" << s << " instances [";
                bool first = true;
                for (size_t i = 0; i < c.target_sub.size(); ++i)
                    if (c.target_sub[i] == (int32_t) s) {
                        os << (first ? "" : " ") << i;
                        first = false;
                    }
                os << "] params (";
                for (size_t k = 0; k < sub.params.size(); ++k)
                    os << (k ? ", " : "") << reg_str(sub.params[k]);
                os << "):\n";
                dump_block(ir, sub.body, os, depth + 1);
                os << pad << "  ret (";
                for (size_t k = 0; k < sub.rets.size(); ++k)
                    os << (k ? ", " : "") << reg_str(sub.rets[k]);
                os << ")\n";
            }
            os << pad << "}\n";
            continue;
        }
        if (in.op == Op::Intersect) {
            os << "(";
            for (size_t k = 0; k < in.outs.size(); ++k)
                os << (k ? ", " : "") << reg_str(in.outs[k]);
            os << ") = " << (in.aux ? "ray_test" : "ray_intersect");
        } else if (in.op == Op::Scatter || in.op == Op::Store) {
            os << op_name(in.op) << (in.aux == 1 && in.op == Op::Scatter ? ".add" : "");
        } else {
            os << reg_str(in.dst) << " = " << op_name(in.op) << '.' << dtype_name(in.type);
            if (in.op == Op::Cast || in.op == Op::Bitcast || op_is_compare(in.op))
                os << '.' << dtype_name(in.src_type);
        }
        if (in.op == Op::Literal) {
            if (is_float(in.type))
                os << ' ' << scalar::decode(in.type, in.imm);
            else
                os << ' ' << in.imm;
        }
        if (in.op == Op::Data || in.op == Op::BufRef || in.op == Op::Store)
            os << " b" << in.aux;
        if (in.op == Op::ClosureLoad || in.op == Op::ClosureBuf)
            os << " slot" << in.aux;
        for (uint32_t a : in.args)
            os << ' ' << reg_str(a);
        os << '\n';
    }
}

// Binary writer / reader
struct Writer {
    std::string s;
    template <typename T> void put(T v) {
        char buf[sizeof(T)];
        std::memcpy(buf, &v, sizeof(T));
        s.append(buf, sizeof(T));
    }
    template <typename T> void vec(const std::vector<T> &v) {
        put<uint32_t>((uint32_t) v.size());
        for (const T &x : v)
            put<T>(x);
    }
    void block(const IrBlock &b) {
        put<uint32_t>((uint32_t) b.size());
        for (const IrInst &in : b) {
            put<uint8_t>((uint8_t) in.op);
            put<uint8_t>((uint8_t) in.type);
            put<uint8_t>((uint8_t) in.src_type);
            put<uint32_t>(in.dst);
            vec(in.args);
            vec(in.outs);
            put<uint64_t>(in.imm);
            put<uint32_t>(in.aux);
            put<uint32_t>(in.aux2);
            put<uint16_t>(in.fn);
        }
    }
};

struct Reader {
    const std::string &s;
    size_t pos = 0;
    bool ok = true;
    template <typename T> T get() {
        T v{};
        if (pos + sizeof(T) > s.size()) {
            ok = false;
            return v;
        }
        std::memcpy(&v, s.data() + pos, sizeof(T));
        pos += sizeof(T);
        return v;
    }
    template <typename T> std::vector<T> vec() {
        uint32_t n = get<uint32_t>();
        std::vector<T> v;
        if (!ok || n > s.size()) {
            ok = false;
            return v;
        }
        v.reserve(n);
        for (uint32_t i = 0; i < n && ok; ++i)
            v.push_back(get<T>());
        return v;
    }
    IrBlock block() {
        uint32_t n = get<uint32_t>();
        IrBlock b;
        if (!ok || n > s.size()) {
            ok = false;
            return b;
        }
        for (uint32_t i = 0; i < n && ok; ++i) {
            IrInst in;
            in.op = (Op) get<uint8_t>();
            in.type = (Dtype) get<uint8_t>();
            in.src_type = (Dtype) get<uint8_t>();
            in.dst = get<uint32_t>();
            in.args = vec<uint32_t>();
            in.outs = vec<uint32_t>();
            in.imm = get<uint64_t>();
            in.aux = get<uint32_t>();
            in.aux2 = get<uint32_t>();
            in.fn = get<uint16_t>();
            b.push_back(std::move(in));
        }
        return b;
    }
};

constexpr uint32_t program_magic = 0x314b4a54; // "TJK1"

} // namespace

size_t KernelIR::op_count() const {
    size_t n = 0;
    count_ops(*this, body, n);
    return n;
}

uint64_t KernelIR::hash() const {
    Encoder e(*this, false);
    e.f.u32((uint32_t) regs.size());
    for (Dtype t : regs)
        e.f.byte((uint8_t) t);
    e.f.u32((uint32_t) bindings.size());
    for (auto &b : bindings) {
        e.f.byte((uint8_t) b.dtype);
        e.f.byte((uint8_t) b.role);
        e.f.byte(b.uniform);
    }
    e.f.u32(flags_mask);
    e.block(body);
    return e.f.h;
}

uint64_t hash_block(const IrBlock &block, const std::vector<uint32_t> &params,
                    const std::vector<uint32_t> &rets, const KernelIR &ir) {
    Encoder e(ir, true);
    for (uint32_t p : params) {
        e.f.byte((uint8_t) ir.regs[p]);
        e.def(p);
    }
    e.block(block);
    for (uint32_t r : rets)
        e.use(r);
    return e.f.h;
}

std::string KernelIR::dump() const {
    std::ostringstream os;
    os << "kernel size=" << size << " regs=" << regs.size() << " ops=" << op_count()
       << " hash=" << std::hex << hash() << std::dec << '\n';
    for (size_t i = 0; i < bindings.size(); ++i) {
        const BindingDesc &b = bindings[i];
        const char *role = b.role == BindingRole::Input    ? "in"
                           : b.role == BindingRole::Output ? "out"
                                                           : "target";
        os << "  b" << i << ": " << role << ' ' << dtype_name(b.dtype)
           << (b.uniform ? " uniform" : "") << '\n';
    }
    dump_block(*this, body, os, 1);
    return os.str();
}

std::string Program::serialize() const {
    Writer w;
    w.put<uint32_t>(program_magic);
    w.put<uint64_t>(hash);
    w.put<uint32_t>(ir.size);
    w.put<uint32_t>(ir.flags_mask);
    std::vector<uint8_t> regs;
    for (Dtype t : ir.regs)
        regs.push_back((uint8_t) t);
    w.vec(regs);
    w.put<uint32_t>((uint32_t) ir.bindings.size());
    for (auto &b : ir.bindings) {
        w.put<uint8_t>((uint8_t) b.dtype);
        w.put<uint8_t>((uint8_t) b.role);
        w.put<uint8_t>(b.uniform);
    }
    w.block(ir.body);
    w.put<uint32_t>((uint32_t) ir.loops.size());
    for (auto &l : ir.loops) {
        w.vec(l.phis);
        w.vec(l.init);
        w.vec(l.results);
        w.block(l.header);
        w.block(l.body);
        w.put<uint32_t>(l.cond);
    }
    w.put<uint32_t>((uint32_t) ir.calls.size());
    for (auto &c : ir.calls) {
        w.put<uint32_t>(c.self);
        w.vec(c.inputs);
        w.vec(c.outs);
        w.vec(c.target_sub);
        w.vec(c.subs);
    }
    w.put<uint32_t>((uint32_t) ir.subs.size());
    for (auto &s : ir.subs) {
        w.vec(s.params);
        w.vec(s.rets);
        w.block(s.body);
    }
    return std::move(w.s);
}

std::optional<Program> Program::deserialize(const std::string &bytes) {
    Reader r{ bytes };
    if (r.get<uint32_t>() != program_magic)
        return std::nullopt;
    Program p;
    p.hash = r.get<uint64_t>();
    p.ir.size = r.get<uint32_t>();
    p.ir.flags_mask = r.get<uint32_t>();
    for (uint8_t t : r.vec<uint8_t>())
        p.ir.regs.push_back((Dtype) t);
    uint32_t nb = r.get<uint32_t>();
    if (!r.ok || nb > bytes.size())
        return std::nullopt;
    for (uint32_t i = 0; i < nb; ++i) {
        BindingDesc b;
        b.dtype = (Dtype) r.get<uint8_t>();
        b.role = (BindingRole) r.get<uint8_t>();
        b.uniform = r.get<uint8_t>();
        p.ir.bindings.push_back(b);
    }
    p.ir.body = r.block();
    uint32_t nl = r.get<uint32_t>();
    if (!r.ok || nl > bytes.size())
        return std::nullopt;
    for (uint32_t i = 0; i < nl && r.ok; ++i) {
        IrLoop l;
        l.phis = r.vec<uint32_t>();
        l.init = r.vec<uint32_t>();
        l.results = r.vec<uint32_t>();
        l.header = r.block();
        l.body = r.block();
        l.cond = r.get<uint32_t>();
        p.ir.loops.push_back(std::move(l));
    }
    uint32_t nc = r.get<uint32_t>();
    if (!r.ok || nc > bytes.size())
        return std::nullopt;
    for (uint32_t i = 0; i < nc && r.ok; ++i) {
        IrCall c;
        c.self = r.get<uint32_t>();
        c.inputs = r.vec<uint32_t>();
        c.outs = r.vec<uint32_t>();
        c.target_sub = r.vec<int32_t>();
        c.subs = r.vec<uint32_t>();
        p.ir.calls.push_back(std::move(c));
    }
    uint32_t ns = r.get<uint32_t>();
    if (!r.ok || ns > bytes.size())
        return std::nullopt;
    for (uint32_t i = 0; i < ns && r.ok; ++i) {
        IrSub s;
        s.params = r.vec<uint32_t>();
        s.rets = r.vec<uint32_t>();
        s.body = r.block();
        p.ir.subs.push_back(std::move(s));
    }
    if (!r.ok || r.pos != bytes.size())
        return std::nullopt;
    if (p.ir.hash() != p.hash)
        return std::nullopt;
    return p;
}

} // namespace tj
