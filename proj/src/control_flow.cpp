/*
    src/control_flow.cpp -- Recorded and wavefront loops, polymorphic calls
*/

#include <tracejit/control_flow.hpp>

#include <algorithm>
#include <map>
#include <unordered_map>
#include <unordered_set>

namespace tj {

Instance::Instance(Context &ctx, std::string domain)
    : m_ctx(&ctx), m_domain(std::move(domain)) {
    m_id = ctx.register_instance(m_domain, this);
}

Instance::~Instance() { m_ctx->unregister_instance(m_domain, m_id); }

// Attributes need an identity of their own: two instances holding equal
// literal values must still read separate closure slots, otherwise value
// numbering merges them and the sub-traces stop being structurally equal.
static Var own_storage(Var v) {
    Context *ctx = v.ctx();
    if (!ctx || !v.valid() || !v.is_literal())
        return v;
    const VarRecord &r = ctx->rec(v.id());
    auto buf = std::make_shared<Buffer>(r.dtype, r.size, r.literal);
    return Var::steal(ctx, ctx->new_data(std::move(buf)));
}

Attr::Attr(Var value) : m_value(own_storage(std::move(value))) {}

Var Attr::get() const {
    Context *ctx = m_value.ctx();
    if (!ctx || !m_value.valid())
        return m_value;
    Context::Scope *cs = ctx->call_scope();
    if (cs && m_value.id() < cs->start)
        return Var::borrow(ctx, ctx->capture(m_value.id(), true));
    return m_value;
}

void Attr::set(Var value) {
    Context *ctx = value.ctx();
    if (ctx && ctx->call_scope())
        throw StructuralError("instance attributes cannot be modified while a polymorphic "
                              "call is being traced");
    if (ctx && !ctx->recording() && !value.is_literal() && !value.is_evaluated())
        value.eval();
    m_value = own_storage(std::move(value));
}

// ---------------------------------------------------------------------
// Loops

static uint32_t state_size(const std::vector<Var> &state) {
    uint32_t n = 1;
    for (auto &v : state)
        n = std::max(n, v.size());
    for (auto &v : state)
        if (v.size() != 1 && v.size() != n)
            throw ShapeError("loop state variables have incompatible sizes");
    return n;
}

static void check_body(const std::vector<Var> &state, const std::vector<Var> &res,
                       const Var &cond) {
    if (!cond.valid() || cond.dtype() != Dtype::Bool)
        throw StructuralError("loop condition must be a boolean array");
    if (res.size() != state.size())
        throw StructuralError("loop body returned " + std::to_string(res.size()) +
                              " values for " + std::to_string(state.size()) +
                              " state variables");
    for (size_t k = 0; k < res.size(); ++k)
        if (!res[k].valid() || res[k].dtype() != state[k].dtype())
            throw StructuralError("loop body changed the type of state variable " +
                                  std::to_string(k));
}

static std::vector<Var> wavefront_loop(Context &ctx, std::vector<Var> state,
                                       const LoopCond &cond, const LoopBody &body) {
    Var c = cond(state);
    {
        std::vector<Var> all(state);
        all.push_back(c);
        eval(all);
    }
    while (!none(c)) {
        ctx.push_mask(c.id());
        std::vector<Var> res;
        try {
            res = body(state);
        } catch (...) {
            ctx.pop_mask();
            throw;
        }
        ctx.pop_mask();
        check_body(state, res, c);
        for (size_t k = 0; k < state.size(); ++k)
            state[k] = select(c, res[k], state[k]);
        c = cond(state);
        std::vector<Var> all(state);
        all.push_back(c);
        eval(all);
    }
    return state;
}

std::vector<Var> loop(Context &ctx, const std::string &name, std::vector<Var> state,
                      const LoopCond &cond, const LoopBody &body) {
    if (state.empty())
        throw StructuralError("loop requires at least one state variable");
    for (auto &v : state)
        if (!v.valid())
            throw StructuralError("uninitialized loop state variable");
    uint32_t n = state_size(state);

    // Loops nested in recorded bodies are always recorded
    if (!ctx.record_loops() && !ctx.recording())
        return wavefront_loop(ctx, std::move(state), cond, body);

    uint32_t idx = (uint32_t) ctx.loops().size();
    ctx.loops().emplace_back();
    uint32_t start = ctx.next_id();

    Context::Scope scope;
    scope.kind = Context::Scope::Loop;
    scope.start = start;
    ctx.push_scope(std::move(scope));

    std::vector<Var> phis;
    Var c;
    std::vector<Var> res;
    try {
        for (size_t k = 0; k < state.size(); ++k)
            phis.push_back(Var::steal(
                &ctx, ctx.new_node(Op::LoopPhi, state[k].dtype(), n, {}, idx, (uint32_t) k)));
        c = cond(phis);
        res = body(phis);
        check_body(state, res, c);
    } catch (...) {
        Context::Scope s = ctx.pop_scope();
        for (uint32_t id : s.side_effects)
            ctx.dec_int(id);
        throw;
    }
    Context::Scope s = ctx.pop_scope();

    LoopRecord rec;
    rec.name = name;
    rec.size = std::max(n, c.size());
    rec.start = start;
    rec.cond = c.id();
    ctx.inc_int(c.id());
    for (size_t k = 0; k < state.size(); ++k) {
        rec.entry.push_back(state[k].id());
        rec.phi.push_back(phis[k].id());
        rec.result.push_back(res[k].id());
        rec.invariant.push_back(res[k].id() == phis[k].id());
        ctx.inc_int(phis[k].id());
        ctx.inc_int(res[k].id());
        rec.size = std::max(rec.size, res[k].size());
    }
    rec.side_effects = std::move(s.side_effects);
    bool effects = !rec.side_effects.empty();
    uint32_t size = rec.size;
    std::vector<bool> invariant = rec.invariant;
    ctx.loops()[idx] = std::move(rec);

    uint32_t anchor = ctx.new_node(Op::Loop, Dtype::Bool, size, ctx.loops()[idx].entry, idx);
    if (effects)
        ctx.push_side_effect(anchor);

    std::vector<Var> out;
    for (size_t k = 0; k < state.size(); ++k) {
        if (ctx.flags().loop_state && invariant[k])
            out.push_back(state[k]);
        else
            out.push_back(Var::steal(
                &ctx, ctx.new_node(Op::LoopOut, state[k].dtype(), size, { anchor }, (uint32_t) k)));
    }
    ctx.dec_ext(anchor);
    return out;
}

// ---------------------------------------------------------------------
// Polymorphic calls

static size_t call_depth(Context &ctx) {
    size_t n = 0;
    for (auto &s : ctx.scopes())
        n += s.kind == Context::Scope::Call;
    return n;
}

static void check_recursion(Context &ctx, Instance *inst, const std::string &method) {
    for (auto &[i, m] : ctx.call_stack())
        if (i == inst && m == method)
            throw StructuralError("recursive polymorphic call of '" + method +
                                  "' on instance " + std::to_string(inst->instance_id()) +
                                  " of domain '" + inst->domain() + "'");
}

struct CallStackGuard {
    Context &ctx;
    CallStackGuard(Context &ctx, Instance *inst, const std::string &method) : ctx(ctx) {
        ctx.call_stack().emplace_back(inst, method);
    }
    ~CallStackGuard() { ctx.call_stack().pop_back(); }
};

static std::vector<Var> wavefront_call(Context &ctx, const std::string &domain,
                                       const std::string &method, const Var &self,
                                       const std::vector<Var> &inputs, const MethodFn &fn,
                                       uint32_t n) {
    std::vector<Instance *> insts = ctx.instances(domain);
    std::vector<uint64_t> ids = self.to_host_raw();
    // Lanes disabled by an enclosing wavefront loop behave like id 0
    std::vector<uint64_t> live;
    if (uint32_t m = ctx.current_mask())
        live = Var::borrow(&ctx, m).to_host_raw();

    std::map<uint32_t, std::vector<uint64_t>> lanes;
    for (uint32_t i = 0; i < n; ++i) {
        uint64_t id = ids[ids.size() == 1 ? 0 : i];
        if (!live.empty() && !live[live.size() == 1 ? 0 : i])
            continue;
        if (id >= 1 && id <= insts.size() && insts[id - 1])
            lanes[(uint32_t) id].push_back(i);
    }

    std::vector<Var> outs;
    auto init_outs = [&](const std::vector<Var> &r) {
        for (auto &v : r)
            outs.push_back(Var::steal(
                &ctx, ctx.new_data(std::make_shared<Buffer>(v.dtype(), n))));
    };

    if (lanes.empty()) {
        // No lane selects a live instance: probe the output types only
        Instance *probe = nullptr;
        for (auto *i : insts)
            if (i && !probe)
                probe = i;
        if (!probe)
            throw StructuralError("polymorphic call on domain '" + domain +
                                  "' without registered instances");
        Var off = literal(ctx, Dtype::Bool, 0.0);
        ctx.push_mask(off.id());
        std::vector<Var> r;
        try {
            CallStackGuard g(ctx, probe, method);
            r = fn(probe, inputs);
        } catch (...) {
            ctx.pop_mask();
            throw;
        }
        ctx.pop_mask();
        init_outs(r);
        return outs;
    }

    // Bodies see compacted lanes, so the outer mask no longer applies
    Var on = literal(ctx, Dtype::Bool, 1.0);
    ctx.push_mask(on.id());
    struct PopMask {
        Context &ctx;
        ~PopMask() { ctx.pop_mask(); }
    } pop{ ctx };

    for (auto &[id, lane_list] : lanes) {
        Instance *inst = insts[id - 1];
        check_recursion(ctx, inst, method);
        Var idx = from_host_raw(ctx, Dtype::U32, lane_list);
        std::vector<Var> args;
        for (auto &in : inputs)
            args.push_back(in.size() == 1 ? in : gather(in, idx));
        std::vector<Var> r;
        {
            CallStackGuard g(ctx, inst, method);
            r = fn(inst, args);
        }
        if (outs.empty())
            init_outs(r);
        if (r.size() != outs.size())
            throw StructuralError("instances of '" + domain + "' return different numbers "
                                  "of values from '" + method + "'");
        for (size_t k = 0; k < r.size(); ++k) {
            if (r[k].dtype() != outs[k].dtype())
                throw StructuralError("instances of '" + domain + "' return different types "
                                      "from '" + method + "'");
            scatter(outs[k], r[k], idx, on);
        }
        eval(outs);
    }
    return outs;
}

// Ancestors of a devirtualization candidate must be computable caller-side
static bool clonable(Context &ctx, uint32_t root, uint32_t start) {
    std::vector<uint32_t> todo{ root };
    std::unordered_set<uint32_t> seen;
    while (!todo.empty()) {
        uint32_t id = todo.back();
        todo.pop_back();
        if (id < start || !seen.insert(id).second)
            continue;
        const VarRecord &r = ctx.rec(id);
        if (r.op == Op::CallIn)
            continue;
        if (r.op == Op::Gather) {
            if (r.deps[0] >= start)
                return false;
        } else if (!op_is_elementwise(r.op)) {
            return false;
        }
        for (uint32_t d : r.deps)
            todo.push_back(d);
    }
    return true;
}

static Var clone_caller_side(Context &ctx, uint32_t id, uint32_t start,
                             const std::unordered_map<uint32_t, Var> &inputs,
                             std::unordered_map<uint32_t, Var> &memo) {
    if (id < start)
        return Var::borrow(&ctx, id);
    if (auto it = inputs.find(id); it != inputs.end())
        return it->second;
    if (auto it = memo.find(id); it != memo.end())
        return it->second;
    const VarRecord &r0 = ctx.rec(id);
    Op op = r0.op;
    Dtype t = r0.dtype;
    uint64_t lit = r0.literal;
    uint32_t aux = r0.aux, aux2 = r0.aux2, size = r0.size;
    std::vector<uint32_t> deps_in = r0.deps;
    Var out;
    if (op == Op::Literal) {
        out = literal_raw(ctx, t, lit, size);
    } else if (op == Op::Index) {
        out = index(ctx, size);
    } else {
        std::vector<Var> deps;
        for (uint32_t d : deps_in)
            deps.push_back(clone_caller_side(ctx, d, start, inputs, memo));
        std::vector<uint32_t> ids;
        for (auto &d : deps)
            ids.push_back(d.id());
        out = Var::steal(&ctx, ctx.new_var(op, t, ids, lit, aux, aux2));
    }
    memo.emplace(id, out);
    return out;
}

std::vector<Var> vcall(Context &ctx, const std::string &domain, const std::string &method,
                       const Var &self, const std::vector<Var> &inputs, const MethodFn &fn) {
    if (!self.valid() || self.dtype() != Dtype::U32)
        throw StructuralError("vcall: instance ids must be a u32 array");
    uint32_t n = self.size();
    for (auto &in : inputs) {
        if (!in.valid())
            throw StructuralError("vcall: uninitialized argument");
        n = std::max(n, in.size());
    }
    if (self.size() != 1 && self.size() != n)
        throw ShapeError("vcall: instance id array does not match the argument size");
    for (auto &in : inputs)
        if (in.size() != 1 && in.size() != n)
            throw ShapeError("vcall: arguments have incompatible sizes");
    if (call_depth(ctx) >= max_call_depth)
        throw StructuralError("vcall: polymorphic calls nested too deeply");

    if (!ctx.record_calls() && !ctx.recording())
        return wavefront_call(ctx, domain, method, self, inputs, fn, n);

    const Flags fl = ctx.flags();
    std::vector<Instance *> insts = ctx.instances(domain);
    uint32_t call_idx = (uint32_t) ctx.calls().size();
    ctx.calls().emplace_back();
    uint32_t start = ctx.next_id();

    std::vector<Var> args(inputs.size());
    std::vector<uint32_t> in_ids, ph_ids;
    std::unordered_map<uint32_t, Var> ph_to_input;
    for (size_t i = 0; i < inputs.size(); ++i) {
        if (fl.const_prop && inputs[i].is_literal()) {
            args[i] = inputs[i];
            continue;
        }
        Var ph = Var::steal(&ctx, ctx.new_node(Op::CallIn, inputs[i].dtype(), inputs[i].size(),
                                               {}, (uint32_t) i, call_idx));
        in_ids.push_back(inputs[i].id());
        ph_ids.push_back(ph.id());
        ph_to_input.emplace(ph.id(), inputs[i]);
        args[i] = ph;
    }

    std::vector<CallRecord::Target> targets;
    std::vector<Dtype> out_types;
    std::vector<uint32_t> out_sizes;
    auto release_targets = [&] {
        for (auto &t : targets) {
            for (uint32_t o : t.outputs)
                ctx.dec_int(o);
            for (uint32_t e : t.side_effects)
                ctx.dec_int(e);
        }
        targets.clear();
    };

    for (uint32_t id = 1; id <= insts.size(); ++id) {
        Instance *inst = insts[id - 1];
        if (!inst)
            continue;
        try {
            check_recursion(ctx, inst, method);
        } catch (...) {
            release_targets();
            throw;
        }
        targets.emplace_back();
        CallRecord::Target &t = targets.back();
        t.instance = id;

        Context::Scope scope;
        scope.kind = Context::Scope::Call;
        scope.start = start;
        scope.closure = &t.closure;
        scope.closure_tag = ctx.new_closure_tag();
        scope.call_size = n;
        scope.instance = inst;
        scope.touch = &t.touch;
        ctx.push_scope(std::move(scope));

        std::vector<Var> outs;
        try {
            CallStackGuard g(ctx, inst, method);
            outs = fn(inst, args);
        } catch (...) {
            Context::Scope s = ctx.pop_scope();
            for (uint32_t e : s.side_effects)
                ctx.dec_int(e);
            targets.pop_back();
            release_targets();
            throw;
        }
        Context::Scope s = ctx.pop_scope();
        t.side_effects = std::move(s.side_effects);

        std::string err;
        if (targets.size() == 1) {
            for (auto &o : outs) {
                out_types.push_back(o.valid() ? o.dtype() : Dtype::F32);
                out_sizes.push_back(n);
            }
        } else if (outs.size() != out_types.size()) {
            err = "instances of '" + domain + "' return different numbers of values from '" +
                  method + "'";
        }
        for (size_t k = 0; k < outs.size() && err.empty(); ++k) {
            if (!outs[k].valid() || outs[k].dtype() != out_types[k])
                err = "instances of '" + domain + "' return different types from '" +
                      method + "'";
            else if (outs[k].size() != 1 && outs[k].size() != n)
                err = "vcall: return value has an incompatible size";
        }
        if (!err.empty()) {
            for (uint32_t e : t.side_effects)
                ctx.dec_int(e);
            targets.pop_back();
            release_targets();
            throw StructuralError(err);
        }
        for (auto &o : outs) {
            ctx.inc_int(o.id());
            t.outputs.push_back(o.id());
        }
    }
    if (targets.empty())
        throw StructuralError("polymorphic call on domain '" + domain +
                              "' without registered instances");

    size_t nout = out_types.size();
    bool effects = false;
    for (auto &t : targets)
        effects |= !t.side_effects.empty();

    // Outputs that are the same variable for every instance do not need dispatch
    std::vector<bool> devirt(nout, false);
    if (fl.vcall_global)
        for (size_t k = 0; k < nout; ++k) {
            uint32_t v = targets[0].outputs[k];
            bool same = true;
            for (auto &t : targets)
                same &= t.outputs[k] == v;
            devirt[k] = same && clonable(ctx, v, start);
        }

    CallRecord &C = ctx.calls()[call_idx];
    C.domain = domain;
    C.method = method;
    C.size = n;
    C.start = start;
    C.self = self.id();
    C.inputs = in_ids;
    C.placeholders = ph_ids;
    for (uint32_t p : ph_ids)
        ctx.inc_int(p);
    C.out_types = out_types;
    C.out_sizes = out_sizes;
    C.devirtualized = devirt;
    C.inputs_before = (uint32_t) inputs.size();
    C.outputs_before = (uint32_t) nout;
    C.targets = std::move(targets);

    std::vector<uint32_t> deps{ self.id() };
    deps.insert(deps.end(), in_ids.begin(), in_ids.end());
    uint32_t anchor = ctx.new_node(Op::Call, Dtype::Bool, n, deps, call_idx);
    if (effects)
        ctx.push_side_effect(anchor);

    std::vector<Var> result;
    Var self_v = self;
    Var live;
    std::unordered_map<uint32_t, Var> memo;
    for (size_t k = 0; k < nout; ++k) {
        if (devirt[k]) {
            uint32_t v = ctx.calls()[call_idx].targets[0].outputs[k];
            Var val = clone_caller_side(ctx, v, start, ph_to_input, memo);
            if (!live.valid())
                live = neq(self_v, literal(ctx, Dtype::U32, 0.0));
            result.push_back(select(live, val, literal(ctx, val.dtype(), 0.0)));
        } else {
            result.push_back(Var::steal(
                &ctx, ctx.new_node(Op::CallOut, out_types[k], n, { anchor }, (uint32_t) k)));
        }
    }
    ctx.dec_ext(anchor);
    return result;
}

} // namespace tj
