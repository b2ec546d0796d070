/*
    src/eval.cpp -- Scheduling, kernel assembly and launch
*/

#include <tracejit/context.hpp>
#include <tracejit/kernel.hpp>
#include <tracejit/scalar.hpp>

#include <algorithm>
#include <chrono>
#include <map>
#include <set>
#include <unordered_set>

namespace tj {

namespace {
using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}
constexpr uint32_t none_reg = 0xFFFFFFFFu;
} // namespace

class Assembler {
public:
    Assembler(Context &ctx, uint32_t size) : ctx(ctx) {
        ir.size = size;
        ir.flags_mask = ctx.flags().mask() | (ctx.flags().checked_memory ? 0x100u : 0u);
        memo.emplace_back();
    }

    Context &ctx;
    KernelIR ir;
    LaunchBindings lb;
    std::vector<std::pair<uint32_t, BufferPtr>> outputs; // root id -> buffer

    // Closure payloads referring to indirect buffers, patched after assembly
    struct PendingBuf { uint32_t call, inst, slot; BufferPtr buf; };
    std::vector<PendingBuf> closure_bufs;

    void build(const std::vector<uint32_t> &roots, const std::vector<uint32_t> &effects) {
        std::vector<uint32_t> all(effects);
        all.insert(all.end(), roots.begin(), roots.end());
        std::vector<uint32_t> order = topo(all, {});
        emit_list(order, ir.body);

        for (uint32_t id : roots) {
            const VarRecord &r = ctx.rec(id);
            auto buf = std::make_shared<Buffer>(r.dtype, r.size);
            uint32_t slot = add_binding(buf, BindingRole::Output, false);
            IrInst st;
            st.op = Op::Store;
            st.type = r.dtype;
            st.args = { lookup(id) };
            st.aux = slot;
            ir.body.push_back(std::move(st));
            outputs.emplace_back(id, buf);
        }

        uint32_t base = (uint32_t) lb.buffers.size();
        for (size_t k = 0; k < closure_bufs.size(); ++k) {
            auto &p = closure_bufs[k];
            lb.closures[p.call][p.inst][p.slot] = base + k;
            lb.buffers.push_back(p.buf);
        }
    }

private:
    std::vector<std::unordered_map<uint32_t, uint32_t>> memo;
    std::unordered_map<const Buffer *, uint32_t> binding_of;
    std::unordered_map<uint32_t, std::set<uint32_t>> needed_outs;
    std::unordered_map<uint32_t, std::vector<uint32_t>> struct_outs; // anchor -> out regs
    // Closure buffer slots read (not only scatter targets) by the body being emitted
    std::vector<std::set<uint32_t>> cbuf_reads;
    const std::unordered_map<uint32_t, uint32_t> *cur_touch = nullptr;   // call body being emitted

    uint32_t lookup(uint32_t id) const {
        for (auto it = memo.rbegin(); it != memo.rend(); ++it) {
            auto f = it->find(id);
            if (f != it->end())
                return f->second;
        }
        return none_reg;
    }

    void bind(uint32_t id, uint32_t reg) { memo.back()[id] = reg; }

    uint32_t add_binding(const BufferPtr &buf, BindingRole role, bool uniform) {
        auto it = binding_of.find(buf.get());
        if (it != binding_of.end()) {
            BindingDesc &d = ir.bindings[it->second];
            if (role == BindingRole::Target)
                d.role = BindingRole::Target;
            return it->second;
        }
        uint32_t slot = (uint32_t) ir.bindings.size();
        ir.bindings.push_back({ buf->dtype, role, uniform });
        lb.buffers.push_back(buf);
        binding_of.emplace(buf.get(), slot);
        return slot;
    }

    /// Post-order of the unmapped ancestors of 'roots'
    std::vector<uint32_t> topo(const std::vector<uint32_t> &roots,
                               const std::unordered_set<uint32_t> &stop) const {
        std::vector<uint32_t> order;
        std::unordered_set<uint32_t> visited;
        std::vector<std::pair<uint32_t, size_t>> stack;
        for (uint32_t root : roots) {
            if (!root || visited.count(root) || stop.count(root) || lookup(root) != none_reg)
                continue;
            visited.insert(root);
            stack.emplace_back(root, 0);
            while (!stack.empty()) {
                auto &[id, k] = stack.back();
                const VarRecord &r = ctx.rec(id);
                if (k < r.deps.size()) {
                    size_t pos = k++;
                    uint32_t d = r.deps[pos];
                    // gather sources / scatter targets are bound, not loaded
                    if (pos == 0 && (r.op == Op::Gather || r.op == Op::Scatter) &&
                        ctx.rec(d).op == Op::Data)
                        continue;
                    if (d && !visited.count(d) && !stop.count(d) && lookup(d) == none_reg) {
                        visited.insert(d);
                        stack.emplace_back(d, 0);
                    }
                    continue;
                }
                order.push_back(id);
                stack.pop_back();
            }
        }
        return order;
    }

    /// All ancestors (ignoring the memo) with id >= min_id
    std::unordered_set<uint32_t> region(const std::vector<uint32_t> &roots,
                                        uint32_t min_id) const {
        std::unordered_set<uint32_t> seen;
        std::vector<uint32_t> todo;
        for (uint32_t r : roots)
            if (r >= min_id)
                todo.push_back(r);
        while (!todo.empty()) {
            uint32_t id = todo.back();
            todo.pop_back();
            if (!seen.insert(id).second)
                continue;
            for (uint32_t d : ctx.rec(id).deps)
                if (d >= min_id)
                    todo.push_back(d);
        }
        return seen;
    }

    // Reorder a call body by first use during tracing (ties: previous order)
    // while keeping dependencies first. LVN can hand an instance variables
    // created while tracing an earlier instance, so id order would differ
    // between instances with identical code.
    std::vector<uint32_t> trace_order(const std::vector<uint32_t> &body,
                                      const std::unordered_map<uint32_t, uint32_t> &touch) const {
        std::unordered_map<uint32_t, size_t> pos;
        for (size_t i = 0; i < body.size(); ++i)
            pos[body[i]] = i;
        auto key = [&](uint32_t id) {
            auto it = touch.find(id);
            return std::make_pair(it == touch.end() ? UINT32_MAX : it->second, pos[id]);
        };
        std::unordered_map<uint32_t, uint32_t> waiting;
        std::unordered_map<uint32_t, std::vector<uint32_t>> users;
        for (uint32_t id : body) {
            std::set<uint32_t> ds;
            for (uint32_t d : ctx.rec(id).deps)
                if (d != id && pos.count(d))
                    ds.insert(d);
            waiting[id] = (uint32_t) ds.size();
            for (uint32_t d : ds)
                users[d].push_back(id);
        }
        std::set<std::pair<std::pair<uint32_t, size_t>, uint32_t>> ready;
        for (uint32_t id : body)
            if (!waiting[id])
                ready.insert({ key(id), id });
        std::vector<uint32_t> out;
        while (!ready.empty()) {
            uint32_t id = ready.begin()->second;
            ready.erase(ready.begin());
            out.push_back(id);
            for (uint32_t u : users[id])
                if (--waiting[u] == 0)
                    ready.insert({ key(u), u });
        }
        return out.size() == body.size() ? out : body;
    }

    void emit_list(const std::vector<uint32_t> &order, IrBlock &blk) {
        for (uint32_t id : order) {
            const VarRecord &r = ctx.rec(id);
            if (r.op == Op::LoopOut || r.op == Op::CallOut)
                needed_outs[r.deps[0]].insert(r.aux);
        }
        for (uint32_t id : order)
            if (lookup(id) == none_reg)
                emit_one(id, blk);
    }

    uint32_t push_inst(IrBlock &blk, Op op, Dtype type, std::vector<uint32_t> args,
                       uint64_t imm = 0, uint32_t aux = 0, uint32_t aux2 = 0,
                       Dtype src = Dtype::F32) {
        IrInst in;
        in.op = op;
        in.type = type;
        in.src_type = src;
        in.args = std::move(args);
        in.imm = imm;
        in.aux = aux;
        in.aux2 = aux2;
        in.dst = (op == Op::Scatter || op == Op::Store) ? 0 : ir.new_reg(type);
        uint32_t dst = in.dst;
        blk.push_back(std::move(in));
        return dst;
    }

    uint32_t buffer_ref(uint32_t id, IrBlock &blk, bool target) {
        const VarRecord &r = ctx.rec(id);
        if (r.op == Op::ClosureBuf) {
            if (!target && !cbuf_reads.empty())
                cbuf_reads.back().insert(r.aux);
            uint32_t reg = lookup(id);
            if (reg == none_reg) {
                reg = push_inst(blk, Op::ClosureBuf, Dtype::U32, {}, 0, r.aux);
                bind(id, reg);
            }
            return reg;
        }
        if (r.op != Op::Data)
            throw InternalError("buffer reference to unevaluated variable");
        if (!target)
            r.data->settle();
        uint32_t slot = add_binding(r.data, target ? BindingRole::Target : BindingRole::Input,
                                    false);
        return push_inst(blk, Op::BufRef, Dtype::U32, {}, 0, slot);
    }

    std::vector<uint32_t> dep_regs(const VarRecord &r, size_t first = 0) const {
        std::vector<uint32_t> out;
        for (size_t i = first; i < r.deps.size(); ++i) {
            uint32_t reg = lookup(r.deps[i]);
            if (reg == none_reg)
                throw InternalError("assembly: operand %" + std::to_string(r.deps[i]) +
                                    " was not emitted");
            out.push_back(reg);
        }
        return out;
    }

    void emit_one(uint32_t id, IrBlock &blk) {
        const VarRecord &r = ctx.rec(id);
        uint32_t reg = none_reg;
        switch (r.op) {
            case Op::Literal:
                reg = push_inst(blk, Op::Literal, r.dtype, {}, r.literal);
                break;
            case Op::Index:
                reg = push_inst(blk, Op::Index, Dtype::U32, {});
                break;
            case Op::Data: {
                if (r.size != 1 && r.size != ir.size)
                    throw InternalError("assembly: array of size " + std::to_string(r.size) +
                                        " in kernel of size " + std::to_string(ir.size));
                r.data->settle();
                bool uniform = r.size == 1;
                uint32_t slot = add_binding(r.data, BindingRole::Input, uniform);
                reg = push_inst(blk, Op::Data, r.dtype, {}, 0, slot, uniform);
                break;
            }
            case Op::Gather: {
                uint32_t ref = buffer_ref(r.deps[0], blk, false);
                auto regs = dep_regs(r, 1);
                reg = push_inst(blk, Op::Gather, r.dtype, { ref, regs[0], regs[1] });
                break;
            }
            case Op::Scatter: {
                uint32_t ref = buffer_ref(r.deps[0], blk, true);
                auto regs = dep_regs(r, 1);
                push_inst(blk, Op::Scatter, r.dtype, { ref, regs[0], regs[1], regs[2] }, 0, r.aux);
                reg = 0;
                break;
            }
            case Op::ClosureLoad:
                reg = push_inst(blk, Op::ClosureLoad, r.dtype, {}, 0, r.aux);
                break;
            case Op::ClosureBuf:
                // binding only; a Gather through it marks the slot as read
                reg = buffer_ref(id, blk, true);
                break;
            case Op::Loop:
                emit_loop(id, blk);
                reg = 0;
                break;
            case Op::Call:
                emit_call(id, blk);
                reg = 0;
                break;
            case Op::Intersect:
                emit_intersect(id, blk);
                reg = 0;
                break;
            case Op::LoopOut:
            case Op::CallOut:
            case Op::Extract: {
                auto it = struct_outs.find(r.deps[0]);
                if (it == struct_outs.end() || r.aux >= it->second.size() ||
                    it->second[r.aux] == none_reg)
                    throw InternalError("assembly: output of a structured node was not emitted");
                reg = it->second[r.aux];
                break;
            }
            case Op::LoopPhi:
            case Op::CallIn:
                throw InternalError(std::string("assembly: ") + op_name(r.op) +
                                    " %" + std::to_string(id) + " referenced outside its scope");
            default: {
                if (!(r.op >= Op::Neg && r.op <= Op::Select))
                    throw InternalError(std::string("assembly: unsupported op ") + op_name(r.op));
                Dtype src = r.deps.empty() ? r.dtype : ctx.rec(r.deps[0]).dtype;
                if (r.op == Op::Select || r.op == Op::Fma)
                    src = r.dtype;
                auto regs = dep_regs(r);
                // commutative operands in tracing order, as for trace_order(); min/max
                // are left alone since swapping them changes signed zeros and NaNs
                if (cur_touch && op_is_commutative(r.op) && r.op != Op::Min && r.op != Op::Max &&
                    regs.size() == 2) {
                    auto a = cur_touch->find(r.deps[0]), b = cur_touch->find(r.deps[1]);
                    if (a != cur_touch->end() && b != cur_touch->end() && b->second < a->second)
                        std::swap(regs[0], regs[1]);
                }
                reg = push_inst(blk, r.op, r.dtype, regs, 0, 0, 0, src);
                break;
            }
        }
        bind(id, reg);
    }

    // -----------------------------------------------------------------
    // Loops

    void emit_loop(uint32_t anchor, IrBlock &blk) {
        const VarRecord &ar = ctx.rec(anchor);
        const LoopRecord L = ctx.loops()[ar.aux];
        size_t n = L.phi.size();
        std::unordered_set<uint32_t> phi_ids(L.phi.begin(), L.phi.end());
        std::unordered_map<uint32_t, size_t> phi_index;
        for (size_t k = 0; k < n; ++k)
            phi_index[L.phi[k]] = k;

        auto phis_of = [&](const std::vector<uint32_t> &roots) {
            std::set<size_t> s;
            for (uint32_t v : region(roots, L.start))
                if (auto it = phi_index.find(v); it != phi_index.end())
                    s.insert(it->second);
            return s;
        };

        std::vector<bool> need(n, true);
        if (ctx.flags().loop_state) {
            std::fill(need.begin(), need.end(), false);
            std::vector<uint32_t> base_roots{ L.cond };
            base_roots.insert(base_roots.end(), L.side_effects.begin(), L.side_effects.end());
            std::vector<size_t> work;
            for (size_t k : phis_of(base_roots))
                work.push_back(k);
            for (uint32_t k : needed_outs[anchor])
                work.push_back(k);
            while (!work.empty()) {
                size_t k = work.back();
                work.pop_back();
                if (need[k])
                    continue;
                need[k] = true;
                for (size_t j : phis_of({ L.result[k] }))
                    if (!need[j])
                        work.push_back(j);
            }
        }

        std::vector<uint32_t> roots{ L.cond };
        for (size_t k = 0; k < n; ++k)
            if (need[k])
                roots.push_back(L.result[k]);
        roots.insert(roots.end(), L.side_effects.begin(), L.side_effects.end());

        std::vector<uint32_t> order = topo(roots, phi_ids);
        std::unordered_set<uint32_t> inside;
        for (uint32_t id : order) {
            const VarRecord &r = ctx.rec(id);
            bool in = false;
            if (id >= L.start) {
                in = r.op == Op::Scatter || r.op == Op::Loop || r.op == Op::Call;
                for (uint32_t d : r.deps)
                    in |= inside.count(d) || phi_ids.count(d);
            }
            if (in)
                inside.insert(id);
        }
        std::vector<uint32_t> hoisted, header_ids, body_ids;
        for (uint32_t id : order)
            if (!inside.count(id))
                hoisted.push_back(id);
        emit_list(hoisted, blk);

        IrLoop lp;
        std::vector<uint32_t> out_regs(n, none_reg);
        memo.emplace_back();
        for (size_t k = 0; k < n; ++k) {
            if (!need[k])
                continue;
            uint32_t init = lookup(ar.deps[k]);
            if (init == none_reg)
                throw InternalError("assembly: loop entry value missing");
            uint32_t preg = ir.new_reg(ctx.rec(L.phi[k]).dtype);
            lp.phis.push_back(preg);
            lp.init.push_back(init);
            bind(L.phi[k], preg);
            out_regs[k] = preg;
        }

        std::unordered_set<uint32_t> cond_region = region({ L.cond }, L.start);
        for (uint32_t id : order) {
            if (!inside.count(id))
                continue;
            (cond_region.count(id) ? header_ids : body_ids).push_back(id);
        }
        emit_list(header_ids, lp.header);
        emit_list(body_ids, lp.body);
        lp.cond = lookup(L.cond);
        for (size_t k = 0; k < n; ++k)
            if (need[k])
                lp.results.push_back(lookup(L.result[k]));
        memo.pop_back();

        uint32_t idx = (uint32_t) ir.loops.size();
        ir.loops.push_back(std::move(lp));
        IrInst in;
        in.op = Op::Loop;
        in.type = Dtype::Bool;
        in.aux = idx;
        blk.push_back(std::move(in));
        struct_outs[anchor] = out_regs;

        auto &st = ctx.stats();
        st.loop_state_before += n;
        st.loop_state_after += std::count(need.begin(), need.end(), true);
    }

    // -----------------------------------------------------------------
    // Polymorphic calls

    void emit_call(uint32_t anchor, IrBlock &blk) {
        const VarRecord &ar = ctx.rec(anchor);
        const CallRecord &C = ctx.calls()[ar.aux];
        const Flags &fl = ctx.flags();
        size_t nout = C.out_types.size(), nin = C.placeholders.size();

        std::vector<bool> live_out(nout, !fl.vcall_global);
        if (fl.vcall_global)
            for (uint32_t k : needed_outs[anchor])
                live_out[k] = true;

        auto target_roots = [&](const CallRecord::Target &t) {
            std::vector<uint32_t> roots;
            for (size_t k = 0; k < nout; ++k)
                if (live_out[k])
                    roots.push_back(t.outputs[k]);
            roots.insert(roots.end(), t.side_effects.begin(), t.side_effects.end());
            return roots;
        };

        std::vector<bool> live_in(nin, !fl.vcall_global);
        std::unordered_map<uint32_t, size_t> ph_index;
        for (size_t i = 0; i < nin; ++i)
            ph_index[C.placeholders[i]] = i;
        if (fl.vcall_global) {
            for (auto &t : C.targets)
                for (uint32_t v : region(target_roots(t), C.start))
                    if (auto it = ph_index.find(v); it != ph_index.end())
                        live_in[it->second] = true;
        }

        IrCall ic;
        ic.self = lookup(ar.deps[0]);
        for (size_t i = 0; i < nin; ++i)
            if (live_in[i])
                ic.inputs.push_back(lookup(ar.deps[1 + i]));
        std::vector<uint32_t> out_regs(nout, none_reg);
        for (size_t k = 0; k < nout; ++k)
            if (live_out[k]) {
                out_regs[k] = ir.new_reg(C.out_types[k]);
                ic.outs.push_back(out_regs[k]);
            }

        uint32_t ci = (uint32_t) ir.calls.size();
        ir.calls.emplace_back();
        if (lb.closures.size() <= ci)
            lb.closures.resize(ci + 1);

        uint32_t max_inst = 0;
        for (auto &t : C.targets)
            max_inst = std::max(max_inst, t.instance);
        ic.target_sub.assign(max_inst + 1, -1);
        lb.closures[ci].resize(max_inst + 1);

        std::unordered_set<uint32_t> ph_set(C.placeholders.begin(), C.placeholders.end());
        std::map<uint64_t, uint32_t> dedup;

        for (auto &t : C.targets) {
            if (!ctx.instance(C.domain, t.instance))
                continue;
            std::vector<uint32_t> roots = target_roots(t);
            std::vector<uint32_t> order = topo(roots, ph_set);
            std::unordered_set<uint32_t> inside;
            for (uint32_t id : order) {
                const VarRecord &r = ctx.rec(id);
                bool in = false;
                if (id >= C.start) {
                    in = r.op == Op::Scatter || r.op == Op::Loop || r.op == Op::Call ||
                         r.op == Op::ClosureLoad || r.op == Op::ClosureBuf;
                    for (uint32_t d : r.deps)
                        in |= inside.count(d) || ph_set.count(d);
                }
                if (in)
                    inside.insert(id);
            }
            std::vector<uint32_t> hoisted, body;
            for (uint32_t id : order)
                (inside.count(id) ? body : hoisted).push_back(id);
            emit_list(hoisted, blk);
            body = trace_order(body, t.touch);

            size_t mark_regs = ir.regs.size(), mark_loops = ir.loops.size(),
                   mark_calls = ir.calls.size(), mark_subs = ir.subs.size(),
                   mark_cbufs = closure_bufs.size();

            IrSub sub;
            memo.emplace_back();
            for (size_t i = 0; i < nin; ++i) {
                if (!live_in[i])
                    continue;
                uint32_t p = ir.new_reg(ctx.rec(C.placeholders[i]).dtype);
                sub.params.push_back(p);
                bind(C.placeholders[i], p);
            }
            cbuf_reads.emplace_back();
            auto *prev_touch = cur_touch;
            cur_touch = &t.touch;
            emit_list(body, sub.body);
            cur_touch = prev_touch;
            std::set<uint32_t> reads = std::move(cbuf_reads.back());
            cbuf_reads.pop_back();
            for (size_t k = 0; k < nout; ++k)
                if (live_out[k]) {
                    uint32_t reg = lookup(t.outputs[k]);
                    if (reg == none_reg)
                        throw InternalError("assembly: call output missing");
                    sub.rets.push_back(reg);
                }
            memo.pop_back();

            // closure payloads of this instance
            auto &payload = lb.closures[ci][t.instance];
            payload.resize(t.closure.slots.size());
            for (size_t s = 0; s < t.closure.slots.size(); ++s) {
                const ClosureSlot &slot = t.closure.slots[s];
                if (slot.indirect) {
                    // pure scatter-add targets keep their contributions pending
                    if (reads.count((uint32_t) s))
                        slot.buffer->settle();
                    closure_bufs.push_back({ ci, t.instance, (uint32_t) s, slot.buffer });
                } else {
                    payload[s] = slot.value;
                }
            }

            uint64_t h = hash_block(sub.body, sub.params, sub.rets, ir);
            if (fl.vcall_dedup) {
                if (auto it = dedup.find(h); it != dedup.end()) {
                    ir.regs.resize(mark_regs);
                    ir.loops.resize(mark_loops);
                    ir.calls.resize(std::max(mark_calls, (size_t) ci + 1));
                    ir.subs.resize(mark_subs);
                    std::vector<PendingBuf> keep;
                    for (size_t k = 0; k < closure_bufs.size(); ++k)
                        if (k < mark_cbufs || closure_bufs[k].call == ci)
                            keep.push_back(closure_bufs[k]);
                    closure_bufs = std::move(keep);
                    ic.target_sub[t.instance] = (int32_t) it->second;
                    continue;
                }
            }
            uint32_t si = (uint32_t) ir.subs.size();
            ir.subs.push_back(std::move(sub));
            ic.subs.push_back(si);
            ic.target_sub[t.instance] = (int32_t) si;
            dedup.emplace(h, si);
        }

        ir.calls[ci] = std::move(ic);
        IrInst in;
        in.op = Op::Call;
        in.type = Dtype::Bool;
        in.aux = ci;
        blk.push_back(std::move(in));
        struct_outs[anchor] = out_regs;

        auto &st = ctx.stats();
        st.call_inputs_before += C.inputs_before;
        st.call_inputs_after += std::count(live_in.begin(), live_in.end(), true);
        st.call_outputs_before += C.outputs_before;
        st.call_outputs_after += std::count(live_out.begin(), live_out.end(), true);
    }

    // -----------------------------------------------------------------
    // Ray queries

    void emit_intersect(uint32_t anchor, IrBlock &blk) {
        const VarRecord &r = ctx.rec(anchor);
        Dtype ft = ctx.rec(r.deps[0]).dtype;
        IrInst in;
        in.op = Op::Intersect;
        in.type = Dtype::Bool;
        in.src_type = ft;
        in.args = dep_regs(r);
        in.aux = r.aux;
        Dtype types[6] = { Dtype::Bool, ft, Dtype::U32, Dtype::U32, ft, ft };
        std::vector<uint32_t> outs;
        for (Dtype t : types)
            outs.push_back(ir.new_reg(t));
        in.outs = outs;
        blk.push_back(std::move(in));
        struct_outs[anchor] = outs;
    }
};

// ---------------------------------------------------------------------
// Context evaluation entry points

std::vector<uint32_t> Context::schedule(std::span<const uint32_t> roots) const {
    std::vector<uint32_t> order;
    std::unordered_set<uint32_t> visited;
    std::vector<std::pair<uint32_t, size_t>> stack;
    for (uint32_t root : roots) {
        if (!root || visited.count(root) || rec(root).is_data())
            continue;
        visited.insert(root);
        stack.emplace_back(root, 0);
        while (!stack.empty()) {
            auto &[id, k] = stack.back();
            const VarRecord &r = rec(id);
            if (k < r.deps.size()) {
                uint32_t d = r.deps[k++];
                if (d && !visited.count(d) && !rec(d).is_data()) {
                    visited.insert(d);
                    stack.emplace_back(d, 0);
                }
                continue;
            }
            order.push_back(id);
            stack.pop_back();
        }
    }
    // Uniform values first (stable)
    std::stable_partition(order.begin(), order.end(),
                          [&](uint32_t id) { return rec(id).size == 1; });
    return order;
}

void Context::eval(std::span<const uint32_t> ids) {
    run_eval(std::vector<uint32_t>(ids.begin(), ids.end()));
}

BufferPtr Context::buffer(uint32_t id) {
    if (rec(id).dirty || !rec(id).is_data())
        eval(id);
    BufferPtr b = rec(id).data;
    b->settle();
    return b;
}

void Context::run_eval(std::vector<uint32_t> roots) {
    if (!m_scopes.empty())
        throw ModeError("eval() is not permitted while recording a loop or call body; "
                        "use wavefront mode or restructure the computation");
    if (m_evaluating)
        throw InternalError("recursive evaluation");
    m_evaluating = true;
    struct Guard {
        bool &b;
        ~Guard() { b = false; }
    } guard{ m_evaluating };

    // Deduplicate, drop evaluated roots, materialize literals on the host
    std::vector<uint32_t> todo;
    std::unordered_set<uint32_t> seen;
    std::vector<uint32_t> holds;
    for (uint32_t id : roots) {
        if (!id || !alive(id) || !seen.insert(id).second)
            continue;
        VarRecord &r = rec_mut(id);
        if (r.op == Op::Data)
            continue;
        inc_ext(id);
        holds.push_back(id);
        if (r.op == Op::Literal) {
            if (r.lvn_registered) {
                auto it = m_lvn.find(key_of(r));
                if (it != m_lvn.end() && it->second == id)
                    m_lvn.erase(it);
                r.lvn_registered = false;
            }
            r.data = std::make_shared<Buffer>(r.dtype, r.size, r.literal);
            r.op = Op::Data;
            r.literal = 0;
            continue;
        }
        todo.push_back(id);
    }

    std::vector<uint32_t> effects = std::move(m_side_effects);
    m_side_effects.clear();

    // Group by launch size: side effect groups first, then roots
    std::vector<uint32_t> sizes;
    std::map<uint32_t, std::pair<std::vector<uint32_t>, std::vector<uint32_t>>> groups;
    auto add_size = [&](uint32_t s) {
        if (!groups.count(s))
            sizes.push_back(s);
    };
    for (uint32_t id : effects) {
        uint32_t s = rec(id).size;
        add_size(s);
        groups[s].second.push_back(id);
    }
    for (uint32_t id : todo) {
        uint32_t s = rec(id).size;
        add_size(s);
        groups[s].first.push_back(id);
    }

    try {
        for (uint32_t size : sizes) {
            auto &[groots, geffects] = groups[size];
            auto t0 = Clock::now();
            Assembler a(*this, size);
            a.build(groots, geffects);
            m_stats.assembly_time += seconds_since(t0);

            if (m_log_ir)
                m_ir_log.push_back(a.ir.dump());
            bool has_loop = a.ir.has_loop();
            size_t ops = a.ir.op_count();
            size_t subs = a.ir.subs.size();

            auto t1 = Clock::now();
            KernelCache::Lookup lk = KernelCache::global().get(std::move(a.ir));
            m_stats.compile_time += seconds_since(t1);
            if (lk.hit)
                m_stats.cache_hits++;
            else
                m_stats.lowerings++;
            if (lk.disk_hit)
                m_stats.disk_hits++;

            a.lb.ray = m_ray_hook.get();
            auto t2 = Clock::now();
            ExecCounters c = execute(*lk.program, a.lb, m_chunk_width, m_flags.checked_memory);
            m_stats.exec_time += seconds_since(t2);
            m_stats.kernels_launched++;
            m_stats.loop_kernels += has_loop;
            m_stats.ir_ops += ops;
            m_stats.subroutines += subs;
            m_stats.bytes_read += c.bytes_read;
            m_stats.bytes_written += c.bytes_written;

            for (auto &[id, buf] : a.outputs) {
                VarRecord &r = rec_mut(id);
                if (r.lvn_registered) {
                    auto it = m_lvn.find(key_of(r));
                    if (it != m_lvn.end() && it->second == id)
                        m_lvn.erase(it);
                    r.lvn_registered = false;
                }
                std::vector<uint32_t> deps = std::move(r.deps);
                r.deps.clear();
                r.op = Op::Data;
                r.data = buf;
                r.literal = 0;
                r.aux = r.aux2 = 0;
                for (uint32_t d : deps)
                    if (d)
                        dec_int(d);
            }
        }
    } catch (...) {
        for (uint32_t id : effects)
            dec_int(id);
        for (auto &[id, r] : m_vars)
            r.dirty = false;
        for (uint32_t id : holds)
            dec_ext(id);
        throw;
    }

    for (uint32_t id : effects)
        dec_int(id);
    if (!effects.empty())
        for (auto &[id, r] : m_vars)
            r.dirty = false;
    for (uint32_t id : holds)
        dec_ext(id);
}

} // namespace tj
