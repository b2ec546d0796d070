/*
    src/ad_calls.cpp -- Differentiable loops and polymorphic calls
*/

#include <tracejit/autodiff.hpp>

namespace tj::ad {

namespace {

// Resume tracking plus a local isolation boundary around a body that is
// re-executed for derivative propagation
class BodyFrames {
public:
    explicit BodyFrames(Tape &t) : m_t(t) {
        m_t.push_frame({ Tape::FrameKind::Resume });
        Tape::Frame iso{ Tape::FrameKind::Isolate };
        iso.local = true;
        m_t.push_frame(std::move(iso));
    }
    void close() {
        if (!m_open)
            return;
        m_open = false;
        m_t.pop_frame();
        m_t.pop_frame();
    }
    ~BodyFrames() {
        if (m_open) {
            try {
                close();
            } catch (...) {
            }
        }
    }
    uint32_t boundary() const { return m_t.frames().back().boundary; }

private:
    Tape &m_t;
    bool m_open = true;
};

std::vector<DVar> wrap(const std::vector<Var> &v) {
    return std::vector<DVar>(v.begin(), v.end());
}

std::vector<Var> unwrap(const std::vector<DVar> &v) {
    std::vector<Var> r;
    for (auto &d : v)
        r.push_back(d.primal());
    return r;
}

Var as_dtype(const Var &v, Dtype t) { return v.dtype() == t ? v : cast(v, t); }

// Give implicit nodes temporary gradients (tangents) and restore them after
class ImplicitGrads {
public:
    ImplicitGrads(Tape &t, const std::vector<uint32_t> &ids, const std::vector<Var> &g)
        : m_t(t), m_ids(ids) {
        for (size_t j = 0; j < ids.size(); ++j) {
            Tape::Node &n = t.node_mut(ids[j]);
            m_saved.push_back(n.grad);
            n.grad = g[j].valid() ? as_dtype(g[j], n.dtype) : Var();
        }
    }
    ~ImplicitGrads() {
        for (size_t j = 0; j < m_ids.size(); ++j)
            if (m_t.has_node(m_ids[j]))
                m_t.node_mut(m_ids[j]).grad = m_saved[j];
    }

private:
    Tape &m_t;
    std::vector<uint32_t> m_ids;
    std::vector<Var> m_saved;
};

// Values read by a recorded body from outside must be arrays or literals.
// Inside an enclosing recording they are left alone (they are body-local).
void settle(Var &v) {
    if (v.valid() && !v.is_literal() && !v.is_evaluated() && !v.ctx()->recording())
        v.eval();
}

// ---------------------------------------------------------------------

class LoopOp : public CustomOp {
public:
    LoopOp(Context &ctx, std::string name, DLoopCond cond, DLoopBody body)
        : CustomOp(&ctx), m_name(std::move(name)), m_cond(std::move(cond)), m_body(std::move(body)) {}

    std::string name() const override { return "loop:" + m_name; }

    std::vector<DVar> eval(const std::vector<DVar> &inputs) override {
        Context &c = ctx();
        auto cond = [&](const std::vector<Var> &s) { return m_cond(wrap(s)); };
        auto body = [&](const std::vector<Var> &s) { return unwrap(m_body(wrap(s))); };
        return wrap(tj::loop(c, m_name, unwrap(inputs), cond, body));
    }

    void forward() override {
        size_t n = n_inputs();
        std::vector<Var> tin(n), timp(n_implicit());
        for (size_t i = 0; i < n; ++i)
            tin[i] = grad_in(i);
        for (size_t j = 0; j < n_implicit(); ++j) {
            timp[j] = grad_in(n + j);
            settle(timp[j]);
        }
        std::vector<Var> tout = tangents(tin, timp, false);
        for (size_t k = 0; k < tout.size(); ++k)
            if (tout[k].valid())
                set_grad_out(k, tout[k]);
    }

    // Lanes are independent, so the transpose is assembled from Jacobian
    // columns obtained by forward passes seeded with one input at a time
    void backward() override {
        size_t n = n_inputs(), m = n_implicit();
        std::vector<Var> g(n_outputs());
        for (size_t k = 0; k < n_outputs(); ++k)
            g[k] = grad_out(k);

        for (size_t j = 0; j < n + m; ++j) {
            if (j < n && !input_node(j))
                continue;
            std::vector<Var> tin(n), timp(m);
            for (size_t i = 0; i < n; ++i)
                if (is_float(input(i).dtype()))
                    tin[i] = literal(ctx(), input(i).dtype(), i == j ? 1.0 : 0.0);
            for (size_t i = 0; i < m; ++i) {
                Dtype t = tape(ctx()).node(implicit_node(i)).dtype;
                timp[i] = literal(ctx(), t, n + i == j ? 1.0 : 0.0);
            }
            std::vector<Var> col = tangents(tin, timp, true);
            Var acc;
            for (size_t k = 0; k < col.size(); ++k) {
                if (!col[k].valid() || (g[k].is_literal() && g[k].literal_value() == 0.0))
                    continue;
                Var term = col[k] * as_dtype(g[k], col[k].dtype());
                acc = acc.valid() ? acc + term : term;
            }
            if (acc.valid())
                set_grad_in(j, acc);
        }
    }

private:
    // Run the loop over primal + tangent state and return the output tangents
    std::vector<Var> tangents(const std::vector<Var> &tin, const std::vector<Var> &timp,
                              bool reverse) {
        Context &c = ctx();
        Tape &t = tape(c);
        size_t n = n_inputs();
        std::vector<size_t> slot(n, SIZE_MAX);
        std::vector<Var> state;
        for (size_t i = 0; i < n; ++i)
            state.push_back(input(i));
        for (size_t i = 0; i < n; ++i)
            if (is_float(input(i).dtype())) {
                slot[i] = state.size();
                Var ti = tin[i].valid() ? tin[i] : literal(c, input(i).dtype(), 0.0);
                state.push_back(as_dtype(ti, input(i).dtype()));
            }

        std::vector<uint32_t> implicit;
        for (size_t j = 0; j < n_implicit(); ++j)
            implicit.push_back(implicit_node(j));

        auto cond = [&](const std::vector<Var> &s) {
            return m_cond(wrap(std::vector<Var>(s.begin(), s.begin() + n)));
        };
        auto body = [&](const std::vector<Var> &s) {
            BodyFrames frames(t);
            uint32_t boundary = frames.boundary();
            std::vector<DVar> leaves;
            std::vector<uint32_t> seeds;
            for (size_t i = 0; i < n; ++i) {
                DVar d(s[i]);
                if (slot[i] != SIZE_MAX) {
                    enable_grad(d);
                    set_grad(d, s[slot[i]]);
                    seeds.push_back(d.node());
                }
                leaves.push_back(std::move(d));
            }
            ImplicitGrads ig(t, implicit, timp);
            seeds.insert(seeds.end(), implicit.begin(), implicit.end());

            std::vector<DVar> res = m_body(leaves);
            if (res.size() != n)
                throw StructuralError("loop body returned " + std::to_string(res.size()) +
                                      " values for " + std::to_string(n) + " state variables");
            if (reverse)
                for (uint32_t p : implicit)
                    for (uint32_t e : t.node(p).out) {
                        const Tape::Edge &edge = t.edge(e);
                        if (edge.tgt >= boundary && edge.kind == Tape::EdgeKind::Gather)
                            throw StructuralError(
                                "ad::loop: reverse mode does not support gathers from tracked "
                                "arrays inside the loop body");
                    }

            std::vector<uint32_t> keep;
            for (auto &r : res)
                if (r.tracked())
                    keep.push_back(r.node());
            t.traverse(false, seeds, keep);

            std::vector<Var> out(s.size());
            for (size_t i = 0; i < n; ++i) {
                out[i] = res[i].primal();
                if (slot[i] != SIZE_MAX) {
                    Var g = grad(res[i]);
                    out[slot[i]] = as_dtype(g, input(i).dtype());
                }
            }
            res.clear();
            leaves.clear();
            frames.close();
            return out;
        };
        std::vector<Var> fin = tj::loop(c, m_name + (reverse ? "_col" : "_jvp"), state, cond, body);

        std::vector<Var> tout(n);
        for (size_t i = 0; i < n; ++i)
            if (slot[i] != SIZE_MAX)
                tout[i] = fin[slot[i]];
        return tout;
    }

    std::string m_name;
    DLoopCond m_cond;
    DLoopBody m_body;
};

// ---------------------------------------------------------------------

class VCallOp : public CustomOp {
public:
    VCallOp(Context &ctx, std::string domain, std::string method, Var self, DMethodFn fn)
        : CustomOp(&ctx), m_domain(std::move(domain)), m_method(std::move(method)), m_self(std::move(self)),
          m_fn(std::move(fn)) {}

    std::string name() const override { return "vcall:" + m_domain + "." + m_method; }

    std::vector<DVar> eval(const std::vector<DVar> &inputs) override {
        auto fn = [&](Instance *inst, const std::vector<Var> &args) {
            return unwrap(m_fn(inst, wrap(args)));
        };
        return wrap(tj::vcall(ctx(), m_domain, m_method, m_self, unwrap(inputs), fn));
    }

    void backward() override {
        Context &c = ctx();
        Tape &t = tape(c);
        size_t n = n_inputs(), nout = n_outputs();
        // Outside gradients are scatter targets inside the call
        for (size_t j = 0; j < n_implicit(); ++j)
            t.grad_buffer(implicit_node(j));

        std::vector<Var> args;
        for (size_t k = 0; k < nout; ++k)
            args.push_back(grad_out(k));
        for (size_t i = 0; i < n; ++i)
            args.push_back(input(i));

        auto fn = [&](Instance *inst, const std::vector<Var> &a) {
            BodyFrames frames(t);
            std::vector<DVar> leaves;
            for (size_t i = 0; i < n; ++i) {
                DVar d(a[nout + i]);
                if (is_float(d.dtype()))
                    enable_grad(d);
                leaves.push_back(std::move(d));
            }
            std::vector<DVar> res = m_fn(inst, leaves);
            std::vector<uint32_t> seeds;
            for (size_t k = 0; k < res.size() && k < nout; ++k)
                if (res[k].tracked()) {
                    t.accumulate(res[k].node(), a[k]);
                    seeds.push_back(res[k].node());
                }
            t.traverse(true, seeds);
            std::vector<Var> out;
            for (size_t i = 0; i < n; ++i)
                if (is_float(leaves[i].dtype()))
                    out.push_back(grad(leaves[i]));
            res.clear();
            leaves.clear();
            frames.close();
            return out;
        };
        std::vector<Var> g = tj::vcall(c, m_domain, m_method + "_vjp", m_self, args, fn);
        size_t o = 0;
        for (size_t i = 0; i < n; ++i)
            if (is_float(input(i).dtype()))
                set_grad_in(i, g[o++]);
    }

    void forward() override {
        Context &c = ctx();
        Tape &t = tape(c);
        size_t n = n_inputs(), m = n_implicit();
        std::vector<uint32_t> implicit;
        for (size_t j = 0; j < m; ++j)
            implicit.push_back(implicit_node(j));

        // [primal inputs, input tangents, implicit tangents]
        std::vector<Var> args;
        std::vector<size_t> slot(n, SIZE_MAX);
        for (size_t i = 0; i < n; ++i)
            args.push_back(input(i));
        for (size_t i = 0; i < n; ++i)
            if (is_float(input(i).dtype())) {
                slot[i] = args.size();
                args.push_back(grad_in(i));
            }
        size_t imp0 = args.size();
        for (size_t j = 0; j < m; ++j)
            args.push_back(grad_in(n + j));

        auto fn = [&](Instance *inst, const std::vector<Var> &a) {
            BodyFrames frames(t);
            std::vector<DVar> leaves;
            std::vector<uint32_t> seeds;
            for (size_t i = 0; i < n; ++i) {
                DVar d(a[i]);
                if (slot[i] != SIZE_MAX) {
                    enable_grad(d);
                    set_grad(d, a[slot[i]]);
                    seeds.push_back(d.node());
                }
                leaves.push_back(std::move(d));
            }
            std::vector<Var> timp(a.begin() + imp0, a.end());
            ImplicitGrads ig(t, implicit, timp);
            seeds.insert(seeds.end(), implicit.begin(), implicit.end());
            std::vector<DVar> res = m_fn(inst, leaves);
            std::vector<uint32_t> keep;
            for (auto &r : res)
                if (r.tracked())
                    keep.push_back(r.node());
            t.traverse(false, seeds, keep);
            std::vector<Var> out;
            for (auto &r : res)
                out.push_back(is_float(r.dtype()) ? grad(r) : literal(c, r.dtype(), 0.0));
            res.clear();
            leaves.clear();
            frames.close();
            return out;
        };
        std::vector<Var> g = tj::vcall(c, m_domain, m_method + "_jvp", m_self, args, fn);
        for (size_t k = 0; k < g.size() && k < n_outputs(); ++k)
            if (is_float(output(k).dtype()))
                set_grad_out(k, g[k]);
    }

private:
    std::string m_domain, m_method;
    Var m_self;
    DMethodFn m_fn;
};

} // namespace

std::vector<DVar> loop(Context &ctx, const std::string &name, std::vector<DVar> state,
                       const DLoopCond &cond, const DLoopBody &body) {
    if (state.empty())
        throw StructuralError("loop requires at least one state variable");
    return custom(std::make_shared<LoopOp>(ctx, name, cond, body), state);
}

std::vector<DVar> vcall(Context &ctx, const std::string &domain, const std::string &method,
                        const Var &self, const std::vector<DVar> &inputs, const DMethodFn &fn) {
    return custom(std::make_shared<VCallOp>(ctx, domain, method, self, fn), inputs);
}

} // namespace tj::ad
