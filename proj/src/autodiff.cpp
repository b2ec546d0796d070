/*
    src/autodiff.cpp -- Tape, traversal, scopes and differentiable arithmetic
*/

#include <tracejit/autodiff.hpp>
#include <tracejit/scalar.hpp>

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace tj::ad {

Tape &tape(Context &ctx) {
    auto &slot = ctx.extension();
    if (!slot)
        slot = std::make_shared<Tape>(ctx);
    return *static_cast<Tape *>(slot.get());
}

static Tape *tape_if(Context *ctx) {
    if (!ctx || !ctx->extension())
        return nullptr;
    return static_cast<Tape *>(ctx->extension().get());
}

// ---------------------------------------------------------------------
// DVar

DVar::DVar(const DVar &o) : m_v(o.m_v), m_node(o.m_node) {
    if (m_node)
        tape(*m_v.ctx()).inc_ref(m_node);
}

DVar &DVar::operator=(const DVar &o) {
    DVar tmp(o);
    std::swap(m_v, tmp.m_v);
    std::swap(m_node, tmp.m_node);
    return *this;
}

DVar &DVar::operator=(DVar &&o) noexcept {
    std::swap(m_v, o.m_v);
    std::swap(m_node, o.m_node);
    return *this;
}

DVar::~DVar() {
    if (m_node)
        if (Tape *t = tape_if(m_v.ctx()))
            t->dec_ref(m_node);
}

DVar DVar::steal(Var v, uint32_t node) {
    DVar r(std::move(v));
    r.m_node = node;
    return r;
}

// ---------------------------------------------------------------------
// Nodes and edges

Tape::~Tape() {
    m_frames.clear();
    m_edges.clear();
    m_nodes.clear();
}

const Tape::Node &Tape::node(uint32_t id) const {
    auto it = m_nodes.find(id);
    if (it == m_nodes.end())
        throw StructuralError("ad: unknown tape node " + std::to_string(id));
    return it->second;
}

Tape::Node &Tape::node_mut(uint32_t id) {
    auto it = m_nodes.find(id);
    if (it == m_nodes.end())
        throw StructuralError("ad: unknown tape node " + std::to_string(id));
    return it->second;
}

uint32_t Tape::new_node(Dtype t, uint32_t size, uint32_t var_id, const std::string &label) {
    uint32_t id = m_next_node++;
    Node n;
    n.refs = 1;
    n.dtype = t;
    n.size = size;
    n.var_id = var_id;
    n.label = label;
    m_nodes.emplace(id, std::move(n));
    m_stats.nodes_created++;

    // Variables derived inside a "resume these" scope stay active there
    for (auto it = m_frames.rbegin(); it != m_frames.rend(); ++it) {
        if (it->kind == FrameKind::Isolate)
            continue;
        if (it->kind == FrameKind::ResumeSet)
            it->set.push_back(id);   // ids grow, so the set stays sorted
        break;
    }
    return id;
}

uint32_t Tape::add_edge(Edge e) {
    uint32_t id = m_next_edge++;
    node_mut(e.src).out.push_back(id);
    node_mut(e.tgt).in.push_back(id);
    m_edges.emplace(id, std::move(e));
    m_stats.edges_created++;
    return id;
}

void Tape::inc_ref(uint32_t id) {
    auto it = m_nodes.find(id);
    if (it != m_nodes.end())
        it->second.refs++;
}

void Tape::dec_ref(uint32_t id) {
    auto it = m_nodes.find(id);
    if (it == m_nodes.end())
        return;
    if (it->second.refs == 0 || --it->second.refs > 0)
        return;
    if (it->second.in.empty() && it->second.out.empty() && !it->second.custom) {
        m_nodes.erase(it);
        return;
    }
    try_eliminate(id);
}

void Tape::remove_edge(uint32_t eid) {
    auto it = m_edges.find(eid);
    if (it == m_edges.end())
        return;
    auto drop = [&](uint32_t n, bool in) {
        auto nit = m_nodes.find(n);
        if (nit == m_nodes.end())
            return;
        auto &v = in ? nit->second.in : nit->second.out;
        v.erase(std::remove(v.begin(), v.end(), eid), v.end());
    };
    drop(it->second.src, false);
    drop(it->second.tgt, true);
    m_edges.erase(it);
}

void Tape::remove_node(uint32_t id) {
    auto it = m_nodes.find(id);
    if (it == m_nodes.end())
        return;
    std::vector<uint32_t> edges = it->second.in;
    edges.insert(edges.end(), it->second.out.begin(), it->second.out.end());
    for (uint32_t e : edges)
        remove_edge(e);
    m_nodes.erase(id);
}

static Var mul_weight(const Var &w, const Var &g) {
    if (!w.valid())
        return g;
    Var gg = g.dtype() == w.dtype() ? g : cast(g, w.dtype());
    return w * gg;
}

static Var combine(const Var &a, const Var &b) {
    if (!a.valid())
        return b;
    if (!b.valid())
        return a;
    return a * b;
}

// Vertex elimination of a node nobody can refer to anymore: each path
// S -> X -> T is replaced by a direct edge with the product weight. Only
// plain weighted edges with a single successor are eliminated so the edge
// count never grows.
void Tape::try_eliminate(uint32_t id) {
    if (!eliminate || m_traversing || !m_frames.empty())
        return;
    auto it = m_nodes.find(id);
    if (it == m_nodes.end())
        return;
    Node &n = it->second;
    if (n.refs || n.custom)
        return;
    for (uint32_t e : n.in)
        if (m_edges.at(e).kind != EdgeKind::Mul)
            return;
    for (uint32_t e : n.out)
        if (m_edges.at(e).kind != EdgeKind::Mul)
            return;

    std::vector<uint32_t> sources;
    for (uint32_t e : n.in)
        sources.push_back(m_edges.at(e).src);

    if (n.out.empty()) {
        remove_node(id);
        m_stats.eliminated++;
    } else if (n.out.size() == 1) {
        const Edge &eo = m_edges.at(n.out[0]);
        uint32_t tgt = eo.tgt;
        const Node &tn = node(tgt);
        if (tn.custom || tn.dtype != n.dtype)
            return;
        for (uint32_t e : n.in)
            if (node(m_edges.at(e).src).dtype != n.dtype)
                return;
        Var wo = eo.weight;
        std::vector<std::pair<uint32_t, Var>> repl;
        for (uint32_t e : n.in) {
            const Edge &ei = m_edges.at(e);
            repl.emplace_back(ei.src, combine(ei.weight, wo));
        }
        remove_node(id);
        for (auto &[src, w] : repl) {
            // merge with an existing direct edge
            uint32_t found = 0;
            for (uint32_t e : node(src).out) {
                const Edge &ex = m_edges.at(e);
                if (ex.tgt == tgt && ex.kind == EdgeKind::Mul) {
                    found = e;
                    break;
                }
            }
            if (found) {
                Edge &ex = m_edges.at(found);
                Var one = scalar_like(w, 1.0);
                ex.weight = (ex.weight.valid() ? ex.weight : one) + (w.valid() ? w : one);
                m_pending.push_back(found);
            } else {
                Edge ne;
                ne.src = src;
                ne.tgt = tgt;
                ne.weight = w;
                m_pending.push_back(add_edge(std::move(ne)));
            }
        }
        m_stats.eliminated++;
    } else {
        return;
    }

    for (uint32_t s : sources) {
        auto sit = m_nodes.find(s);
        if (sit != m_nodes.end() && sit->second.refs == 0)
            try_eliminate(s);
    }
}

void Tape::truncate(uint32_t start) {
    std::vector<uint32_t> doomed;
    for (auto &[id, n] : m_nodes)
        if (id >= start)
            doomed.push_back(id);
    std::sort(doomed.begin(), doomed.end());
    for (uint32_t id : doomed)
        remove_node(id);
}

void Tape::clear() {
    m_edges.clear();
    m_nodes.clear();
    m_pending.clear();
    m_deferred.clear();
}

void Tape::eval_pending(std::vector<uint32_t> &ids) {
    for (uint32_t e : m_pending) {
        auto it = m_edges.find(e);
        if (it == m_edges.end() || !it->second.weight.valid())
            continue;
        const Var &w = it->second.weight;
        if (!w.is_literal() && !w.is_evaluated())
            ids.push_back(w.id());
    }
    m_pending.clear();
}

// ---------------------------------------------------------------------
// Scope frames

void Tape::push_frame(Frame f) {
    if (f.kind == FrameKind::Isolate)
        f.boundary = m_next_node;
    std::sort(f.set.begin(), f.set.end());
    m_frames.push_back(std::move(f));
}

void Tape::log_omega() {
    if (omega_log)
        omega_log->push_back(omega().str(*this));
}

Tape::Frame Tape::pop_frame() {
    if (m_frames.empty())
        throw StructuralError("ad: scope pop without matching push");
    Frame f = std::move(m_frames.back());
    m_frames.pop_back();

    if (f.kind == FrameKind::Isolate) {
        if (f.local)
            truncate(f.boundary);
        std::vector<uint32_t> post;
        for (uint32_t id : f.postponed)
            if (m_nodes.count(id))
                post.push_back(id);
        if (!post.empty()) {
            Frame *parent = isolation();
            if (m_ctx.recording()) {
                // cannot launch the postponed work from inside a recorded body
                auto &dst = parent ? parent->postponed : m_deferred;
                for (uint32_t id : post)
                    if (std::find(dst.begin(), dst.end(), id) == dst.end())
                        dst.push_back(id);
            } else {
                traverse(true, post);
            }
        }
    }
    if (m_frames.empty() && !m_ctx.recording() && !m_deferred.empty() && !m_traversing) {
        auto d = std::move(m_deferred);
        m_deferred.clear();
        traverse(true, d);
    }
    return f;
}

Tape::Frame *Tape::isolation() {
    for (auto it = m_frames.rbegin(); it != m_frames.rend(); ++it)
        if (it->kind == FrameKind::Isolate)
            return &*it;
    return nullptr;
}

static bool contains(const std::vector<uint32_t> &sorted, uint32_t id) {
    return std::binary_search(sorted.begin(), sorted.end(), id);
}

bool Tape::enabled(uint32_t id) {
    if (!m_nodes.count(id))
        return false;
    for (auto it = m_frames.rbegin(); it != m_frames.rend(); ++it) {
        switch (it->kind) {
            case FrameKind::Suspend: return false;
            case FrameKind::Resume: return true;
            case FrameKind::ResumeSet:
                if (contains(it->set, id))
                    return true;
                break;
            case FrameKind::SuspendSet:
                if (contains(it->set, id))
                    return false;
                break;
            case FrameKind::Isolate: break;
            case FrameKind::Monitor:
                if (!contains(it->set, id) &&
                    std::find(it->implicit.begin(), it->implicit.end(), id) == it->implicit.end())
                    it->implicit.push_back(id);
                return false;
        }
    }
    return true;
}

Omega Tape::omega() const {
    Omega o;
    auto add = [&](const std::vector<uint32_t> &s) {
        for (uint32_t id : s)
            if (std::find(o.nodes.begin(), o.nodes.end(), id) == o.nodes.end())
                o.nodes.push_back(id);
    };
    auto remove = [&](const std::vector<uint32_t> &s) {
        o.nodes.erase(std::remove_if(o.nodes.begin(), o.nodes.end(),
                                     [&](uint32_t id) { return contains(s, id); }),
                      o.nodes.end());
    };
    for (const Frame &f : m_frames) {
        switch (f.kind) {
            case FrameKind::Suspend:
            case FrameKind::Monitor: o.complement = false; o.nodes.clear(); break;
            case FrameKind::Resume: o.complement = true; o.nodes.clear(); break;
            case FrameKind::ResumeSet: o.complement ? remove(f.set) : add(f.set); break;
            case FrameKind::SuspendSet: o.complement ? add(f.set) : remove(f.set); break;
            case FrameKind::Isolate: break;
        }
    }
    std::sort(o.nodes.begin(), o.nodes.end());
    return o;
}

std::string Omega::str(const Tape &t) const {
    // components of one vector usually share a label; list it once
    std::vector<std::string> seen;
    for (uint32_t id : nodes) {
        std::string name = t.has_node(id) && !t.node(id).label.empty() ? t.node(id).label
                                                                        : "n" + std::to_string(id);
        if (std::find(seen.begin(), seen.end(), name) == seen.end())
            seen.push_back(name);
    }
    std::string names;
    for (size_t i = 0; i < seen.size(); ++i)
        names += (i ? "," : "") + seen[i];
    if (complement)
        return nodes.empty() ? "∅^c" : "∅^c\\{" + names + "}";
    return nodes.empty() ? "∅" : "{" + names + "}";
}

SuspendGrad::SuspendGrad(Context &ctx) : m_ctx(ctx) {
    tape(ctx).push_frame({ Tape::FrameKind::Suspend });
    tape(ctx).log_omega();
}

static std::vector<uint32_t> node_set(const std::vector<DVar> &vars) {
    std::vector<uint32_t> s;
    for (auto &v : vars)
        if (v.tracked())
            s.push_back(v.node());
    return s;
}

SuspendGrad::SuspendGrad(Context &ctx, const std::vector<DVar> &vars) : m_ctx(ctx) {
    Tape::Frame f{ Tape::FrameKind::SuspendSet };
    f.set = node_set(vars);
    tape(ctx).push_frame(std::move(f));
    tape(ctx).log_omega();
}

SuspendGrad::~SuspendGrad() { tape(m_ctx).pop_frame(); }

ResumeGrad::ResumeGrad(Context &ctx) : m_ctx(ctx) {
    tape(ctx).push_frame({ Tape::FrameKind::Resume });
    tape(ctx).log_omega();
}

ResumeGrad::ResumeGrad(Context &ctx, const std::vector<DVar> &vars) : m_ctx(ctx) {
    Tape::Frame f{ Tape::FrameKind::ResumeSet };
    f.set = node_set(vars);
    tape(ctx).push_frame(std::move(f));
    tape(ctx).log_omega();
}

ResumeGrad::~ResumeGrad() { tape(m_ctx).pop_frame(); }

IsolateGrad::IsolateGrad(Context &ctx, bool local) : m_ctx(ctx) {
    Tape::Frame f{ Tape::FrameKind::Isolate };
    f.local = local;
    tape(ctx).push_frame(std::move(f));
}

IsolateGrad::~IsolateGrad() noexcept(false) { tape(m_ctx).pop_frame(); }

// ---------------------------------------------------------------------
// Gradient accumulation

Var Tape::grad_of(uint32_t id) const {
    const Node &n = node(id);
    if (n.grad.valid())
        return n.grad;
    return literal(m_ctx, n.dtype, 0.0, n.size);
}

Var &Tape::grad_buffer(uint32_t id) {
    Node &n = node_mut(id);
    Var &g = n.grad;
    if (!g.valid() || (g.is_literal() && g.size() <= n.size)) {
        uint64_t fill = g.valid() ? m_ctx.rec(g.id()).literal : 0;
        auto buf = std::make_shared<Buffer>(n.dtype, n.size, fill);
        g = Var::steal(&m_ctx, m_ctx.new_data(std::move(buf)));
    } else if (!g.is_evaluated()) {
        if (m_ctx.recording())
            throw ModeError("ad: gradient of a gathered array must be evaluated before "
                            "entering a recorded loop or call");
        g.eval();
    }
    return g;
}

static bool is_zero(const Var &g) {
    return g.is_literal() && g.literal_value() == 0.0;
}

void Tape::deliver_outside(uint32_t id, const Var &g, Frame &iso) {
    Node &n = node_mut(id);
    if (iso.local || m_ctx.recording()) {
        if (n.size != 1 && g.size() != n.size)
            throw ShapeError("ad: gradient of size " + std::to_string(g.size()) +
                             " cannot be delivered to an array of size " + std::to_string(n.size));
        Var idx = n.size == 1 ? literal(m_ctx, Dtype::U32, 0.0) : index(m_ctx, n.size);
        Var &buf = grad_buffer(id);
        scatter_add(buf, g, idx, literal(m_ctx, Dtype::Bool, 1.0));
    } else if (n.in.empty() && g.size() > n.size) {
        Var &buf = grad_buffer(id);
        scatter_add(buf, g, literal(m_ctx, Dtype::U32, 0.0), literal(m_ctx, Dtype::Bool, 1.0));
    } else {
        n.grad = n.grad.valid() ? n.grad + g : g;
    }
    if (std::find(iso.postponed.begin(), iso.postponed.end(), id) == iso.postponed.end()) {
        iso.postponed.push_back(id);
        m_stats.postponed++;
    }
}

void Tape::accumulate(uint32_t id, const Var &g_in) {
    if (!g_in.valid() || is_zero(g_in) || !m_nodes.count(id))
        return;
    Node &n = node_mut(id);
    Var g = g_in.dtype() == n.dtype ? g_in : cast(g_in, n.dtype);
    Frame *iso = isolation();
    if (iso && id < iso->boundary) {
        deliver_outside(id, g, *iso);
        return;
    }
    if (n.in.empty() && g.size() > n.size) {
        // leaf of smaller size: reduce
        Var &buf = grad_buffer(id);
        scatter_add(buf, g, literal(m_ctx, Dtype::U32, 0.0), literal(m_ctx, Dtype::Bool, 1.0));
        return;
    }
    n.grad = n.grad.valid() ? n.grad + g : g;
}

// ---------------------------------------------------------------------
// Traversal

void Tape::run_custom(Node &n, bool backward) {
    std::shared_ptr<CustomOp> op = n.custom;
    auto &stash = backward ? op->m_gout : op->m_gin;
    bool any = false;
    for (auto &g : stash)
        any |= g.valid() && !is_zero(g);
    if (any) {
        if (backward)
            op->backward();
        else
            op->forward();
    }
    for (auto &g : op->m_gin)
        g = Var();
    for (auto &g : op->m_gout)
        g = Var();
}

void Tape::traverse(bool backward, const std::vector<uint32_t> &seeds,
                    const std::vector<uint32_t> &keep) {
    m_traversing++;
    m_stats.traversals++;
    struct Guard {
        int &c;
        ~Guard() { --c; }
    } guard{ m_traversing };

    Frame *iso = isolation();
    uint32_t boundary = iso ? iso->boundary : 0;

    std::unordered_set<uint32_t> visited;
    std::vector<uint32_t> todo;
    for (uint32_t s : seeds)
        if (m_nodes.count(s) && visited.insert(s).second)
            todo.push_back(s);
    while (!todo.empty()) {
        uint32_t id = todo.back();
        todo.pop_back();
        const Node &n = node(id);
        for (uint32_t eid : backward ? n.in : n.out) {
            const Edge &e = m_edges.at(eid);
            uint32_t other = backward ? e.src : e.tgt;
            if (other < boundary)
                continue;
            if (visited.insert(other).second)
                todo.push_back(other);
        }
    }

    std::vector<uint32_t> order(visited.begin(), visited.end());
    std::sort(order.begin(), order.end());
    if (backward)
        std::reverse(order.begin(), order.end());

    for (uint32_t id : order) {
        auto nit = m_nodes.find(id);
        if (nit == m_nodes.end())
            continue;
        if (nit->second.custom) {
            run_custom(nit->second, backward);
            continue;
        }
        Var g = nit->second.grad;
        if (g.valid() && !is_zero(g)) {
            std::vector<uint32_t> edges = backward ? nit->second.in : nit->second.out;
            for (uint32_t eid : edges) {
                auto eit = m_edges.find(eid);
                if (eit == m_edges.end())
                    continue;
                Edge &e = eit->second;
                uint32_t other = backward ? e.src : e.tgt;
                if (!backward && other < boundary)
                    continue;
                switch (e.kind) {
                    case EdgeKind::Mul:
                        accumulate(other, mul_weight(e.weight, g));
                        break;

                    case EdgeKind::Gather:
                        if (backward) {
                            // transpose of a gather: scatter-add into the source gradient
                            Var &buf = grad_buffer(other);
                            Var gv = g.dtype() == buf.dtype() ? g : cast(g, buf.dtype());
                            scatter_add(buf, gv, e.index, e.mask);
                            if (iso && other < boundary &&
                                std::find(iso->postponed.begin(), iso->postponed.end(), other) ==
                                    iso->postponed.end()) {
                                iso->postponed.push_back(other);
                                m_stats.postponed++;
                            }
                        } else {
                            accumulate(other, gather(g, e.index, e.mask));
                        }
                        break;

                    case EdgeKind::ScatterAdd:
                        if (backward) {
                            accumulate(other, gather(g, e.index, e.mask));
                        } else {
                            const Node &t = node(other);
                            auto buf = std::make_shared<Buffer>(t.dtype, t.size);
                            Var acc = Var::steal(&m_ctx, m_ctx.new_data(std::move(buf)));
                            scatter_add(acc, g.dtype() == t.dtype ? g : cast(g, t.dtype), e.index,
                                        e.mask);
                            accumulate(other, acc);
                        }
                        break;

                    case EdgeKind::Custom: {
                        CustomOp &op = *node(other).custom;
                        Var &slot = backward ? op.m_gout[e.slot] : op.m_gin[e.slot];
                        slot = slot.valid() ? slot + g : g;
                        break;
                    }
                }
            }
        }
        nit = m_nodes.find(id);
        if (nit == m_nodes.end())
            continue;
        Node &n = nit->second;
        bool interior = backward ? !n.in.empty() : !n.out.empty();
        if (interior && id >= boundary &&
            std::find(keep.begin(), keep.end(), id) == keep.end())
            n.grad = Var();
    }

    if (m_traversing == 1 && m_frames.empty() && !m_ctx.recording() && !m_deferred.empty()) {
        auto d = std::move(m_deferred);
        m_deferred.clear();
        m_traversing--;
        guard.c++;   // balanced by the guard
        traverse(true, d);
    }
}

// ---------------------------------------------------------------------
// Recording

bool active(const DVar &v) {
    if (!v.tracked() || !v.valid())
        return false;
    return tape(*v.ctx()).enabled(v.node());
}

DVar Tape::record(Var result, std::initializer_list<std::pair<const DVar *, Var>> operands) {
    if (!is_float(result.dtype()))
        return DVar(std::move(result));
    std::vector<std::pair<uint32_t, Var>> edges;
    for (auto &[d, w] : operands)
        if (d && d->tracked() && enabled(d->node()))
            edges.emplace_back(d->node(), w);
    if (edges.empty())
        return DVar(std::move(result));
    uint32_t id = new_node(result.dtype(), result.size(), result.id());
    for (auto &[src, w] : edges) {
        Edge e;
        e.src = src;
        e.tgt = id;
        e.weight = w;
        add_edge(std::move(e));
    }
    return DVar::steal(std::move(result), id);
}

// ---------------------------------------------------------------------
// Queries

size_t Tape::held_records() const {
    std::unordered_set<uint32_t> seen;
    std::vector<uint32_t> todo;
    auto push = [&](const Var &v) {
        if (v.valid() && m_ctx.alive(v.id()) && seen.insert(v.id()).second)
            todo.push_back(v.id());
    };
    for (auto &[id, e] : m_edges) {
        push(e.weight);
        push(e.index);
        push(e.mask);
    }
    for (auto &[id, n] : m_nodes)
        push(n.grad);
    size_t count = 0;
    while (!todo.empty()) {
        uint32_t id = todo.back();
        todo.pop_back();
        const VarRecord &r = m_ctx.rec(id);
        if (r.op != Op::Literal)
            count++;
        for (uint32_t d : r.deps)
            if (d && m_ctx.alive(d) && seen.insert(d).second)
                todo.push_back(d);
    }
    return count;
}

size_t Tape::held_buffers() const {
    std::unordered_set<uint32_t> seen, bufs;
    std::vector<uint32_t> todo;
    auto push = [&](const Var &v) {
        if (v.valid() && m_ctx.alive(v.id()) && seen.insert(v.id()).second)
            todo.push_back(v.id());
    };
    for (auto &[id, e] : m_edges) {
        push(e.weight);
        push(e.index);
        push(e.mask);
    }
    for (auto &[id, n] : m_nodes)
        push(n.grad);
    while (!todo.empty()) {
        uint32_t id = todo.back();
        todo.pop_back();
        const VarRecord &r = m_ctx.rec(id);
        if (r.op == Op::Data)
            bufs.insert(id);
        for (uint32_t d : r.deps)
            if (d && m_ctx.alive(d) && seen.insert(d).second)
                todo.push_back(d);
    }
    return bufs.size();
}

std::string Tape::dump() const {
    std::vector<uint32_t> ids;
    for (auto &[id, n] : m_nodes)
        ids.push_back(id);
    std::sort(ids.begin(), ids.end());
    auto name = [&](uint32_t id) {
        const Node &n = node(id);
        return n.label.empty() ? "n" + std::to_string(id) : n.label;
    };
    std::ostringstream os;
    for (uint32_t id : ids) {
        const Node &n = node(id);
        os << name(id) << ": ";
        if (n.custom)
            os << "custom " << n.custom->name();
        else
            os << dtype_name(n.dtype) << "[" << n.size << "] var=%" << n.var_id;
        os << " refs=" << n.refs << "\n";
        for (uint32_t eid : n.in) {
            const Edge &e = m_edges.at(eid);
            os << "  <- " << name(e.src);
            switch (e.kind) {
                case EdgeKind::Mul:
                    if (e.weight.valid())
                        os << " weight=%" << e.weight.id();
                    else
                        os << " weight=1";
                    break;
                case EdgeKind::Gather:
                    os << " gather index=%" << e.index.id();
                    break;
                case EdgeKind::ScatterAdd:
                    os << " scatter_add index=%" << e.index.id();
                    break;
                case EdgeKind::Custom:
                    os << " custom slot=" << e.slot;
                    break;
            }
            os << "\n";
        }
    }
    return os.str();
}

// ---------------------------------------------------------------------
// Public gradient API

void enable_grad(DVar &v, const std::string &label) {
    if (!v.valid())
        throw StructuralError("ad: enable_grad on an uninitialized variable");
    if (!is_float(v.dtype()))
        throw StructuralError("ad: only floating point variables can be differentiated");
    Tape &t = tape(*v.ctx());
    if (v.tracked() && t.has_node(v.node())) {
        if (!label.empty())
            t.node_mut(v.node()).label = label;
        return;
    }
    uint32_t id = t.new_node(v.dtype(), v.size(), v.primal().id(), label);
    v = DVar::steal(v.primal(), id);
}

void set_label(const DVar &v, const std::string &label) {
    if (v.tracked() && tape(*v.ctx()).has_node(v.node()))
        tape(*v.ctx()).node_mut(v.node()).label = label;
}

static uint32_t require_node(const DVar &v) {
    if (!v.valid() || !v.tracked() || !tape(*v.ctx()).has_node(v.node()))
        throw StructuralError("ad: variable does not carry derivatives");
    return v.node();
}

Var grad(const DVar &v) {
    if (!v.valid())
        throw StructuralError("ad: grad of an uninitialized variable");
    if (!v.tracked() || !tape(*v.ctx()).has_node(v.node()))
        return literal(*v.ctx(), v.dtype(), 0.0, v.size());
    return tape(*v.ctx()).grad_of(v.node());
}

void set_grad(const DVar &v, const Var &g) {
    uint32_t id = require_node(v);
    Tape &t = tape(*v.ctx());
    Var gg = g.dtype() == v.dtype() ? g : cast(g, v.dtype());
    t.node_mut(id).grad = gg;
}

void accum_grad(const DVar &v, const Var &g) {
    uint32_t id = require_node(v);
    tape(*v.ctx()).accumulate(id, g);
}

void backward(const DVar &v) {
    uint32_t id = require_node(v);
    Tape &t = tape(*v.ctx());
    t.accumulate(id, literal(*v.ctx(), v.dtype(), 1.0));
    t.traverse(true, { id });
}

void forward(const DVar &v) {
    uint32_t id = require_node(v);
    Tape &t = tape(*v.ctx());
    t.accumulate(id, literal(*v.ctx(), v.dtype(), 1.0));
    t.traverse(false, { id });
}

void backward_from(const std::vector<DVar> &seeds) {
    std::vector<uint32_t> ids;
    for (auto &s : seeds)
        ids.push_back(require_node(s));
    if (!ids.empty())
        tape(*seeds[0].ctx()).traverse(true, ids);
}

void forward_from(const std::vector<DVar> &seeds) {
    std::vector<uint32_t> ids;
    for (auto &s : seeds)
        ids.push_back(require_node(s));
    if (!ids.empty())
        tape(*seeds[0].ctx()).traverse(false, ids);
}

void eval(const std::vector<DVar> &vars) {
    Context *ctx = nullptr;
    std::vector<uint32_t> ids;
    for (auto &v : vars)
        if (v.valid()) {
            ctx = v.ctx();
            ids.push_back(v.primal().id());
        }
    if (!ctx)
        return;
    tape(*ctx).eval_pending(ids);
    ctx->eval(ids);
}

void clear(Context &ctx) { tape(ctx).clear(); }

// ---------------------------------------------------------------------
// Custom operations

Var CustomOp::grad_in(size_t i) const {
    if (m_gin[i].valid())
        return m_gin[i];
    if (i < m_in.size())
        return literal(*m_ctx, m_in[i].dtype(), 0.0, m_in[i].size());
    const Tape::Node &n = tape(*m_ctx).node(m_implicit[i - m_in.size()]);
    return literal(*m_ctx, n.dtype, 0.0, n.size);
}

void CustomOp::set_grad_in(size_t i, const Var &g) {
    uint32_t id = i < m_in.size() ? m_in_nodes[i] : m_implicit[i - m_in.size()];
    if (id)
        tape(*m_ctx).accumulate(id, g);
}

Var CustomOp::grad_out(size_t k) const {
    if (m_gout[k].valid())
        return m_gout[k];
    return literal(*m_ctx, m_out[k].dtype(), 0.0, m_out[k].size());
}

void CustomOp::set_grad_out(size_t k, const Var &g) {
    if (m_out_nodes[k])
        tape(*m_ctx).accumulate(m_out_nodes[k], g);
}

std::vector<DVar> custom(std::shared_ptr<CustomOp> op, const std::vector<DVar> &inputs) {
    Context *ctx = op->m_ctx;
    for (auto &v : inputs)
        if (v.valid())
            ctx = v.ctx();
    if (!ctx)
        throw StructuralError("ad: custom operation without a context");
    Tape &t = tape(*ctx);

    std::vector<uint32_t> in_nodes;
    bool any = false;
    for (auto &v : inputs) {
        bool a = v.valid() && v.tracked() && t.enabled(v.node());
        in_nodes.push_back(a ? v.node() : 0);
        any |= a;
    }

    Tape::Frame mon{ Tape::FrameKind::Monitor };
    for (uint32_t n : in_nodes)
        if (n)
            mon.set.push_back(n);
    t.push_frame(std::move(mon));
    std::vector<DVar> detached;
    for (auto &v : inputs)
        detached.emplace_back(v.primal());
    std::vector<DVar> outs;
    try {
        outs = op->eval(detached);
    } catch (...) {
        t.pop_frame();
        throw;
    }
    Tape::Frame f = t.pop_frame();

    std::vector<uint32_t> implicit;
    for (uint32_t id : f.implicit)
        if (t.enabled(id))
            implicit.push_back(id);
    any |= !implicit.empty();

    std::vector<DVar> result;
    if (!any) {
        for (auto &o : outs)
            result.emplace_back(o.primal());
        return result;
    }

    op->m_ctx = ctx;
    for (auto &v : inputs)
        op->m_in.push_back(v.primal());
    op->m_in_nodes = in_nodes;
    op->m_implicit = implicit;

    uint32_t c = t.new_node(Dtype::F64, 1, 0, op->name());
    t.node_mut(c).refs = 0;
    t.node_mut(c).custom = op;
    for (size_t i = 0; i < in_nodes.size(); ++i)
        if (in_nodes[i]) {
            Tape::Edge e;
            e.src = in_nodes[i];
            e.tgt = c;
            e.kind = Tape::EdgeKind::Custom;
            e.slot = (uint32_t) i;
            t.add_edge(std::move(e));
        }
    for (size_t j = 0; j < implicit.size(); ++j) {
        Tape::Edge e;
        e.src = implicit[j];
        e.tgt = c;
        e.kind = Tape::EdgeKind::Custom;
        e.slot = (uint32_t) (inputs.size() + j);
        t.add_edge(std::move(e));
    }
    for (size_t k = 0; k < outs.size(); ++k) {
        const Var &p = outs[k].primal();
        op->m_out.push_back(p);
        if (!p.valid() || !is_float(p.dtype())) {
            op->m_out_nodes.push_back(0);
            result.emplace_back(p);
            continue;
        }
        uint32_t o = t.new_node(p.dtype(), p.size(), p.id());
        Tape::Edge e;
        e.src = c;
        e.tgt = o;
        e.kind = Tape::EdgeKind::Custom;
        e.slot = (uint32_t) k;
        t.add_edge(std::move(e));
        op->m_out_nodes.push_back(o);
        result.push_back(DVar::steal(p, o));
    }
    op->m_gin.resize(inputs.size() + implicit.size());
    op->m_gout.resize(outs.size());
    return result;
}

// ---------------------------------------------------------------------
// Arithmetic

static Tape &tape_of(const DVar &a) {
    if (!a.valid())
        throw StructuralError("ad: operation on an uninitialized variable");
    return tape(*a.ctx());
}

static DVar lit(const DVar &like, double v) { return DVar(scalar_like(like.primal(), v)); }

DVar operator+(const DVar &a, const DVar &b) {
    Var r = a.primal() + b.primal();
    if (!active(a) && !active(b))
        return r;
    Var one = scalar_like(r, 1.0);
    return tape_of(a).record(r, { { &a, one }, { &b, one } });
}

DVar operator-(const DVar &a, const DVar &b) {
    Var r = a.primal() - b.primal();
    if (!active(a) && !active(b))
        return r;
    return tape_of(a).record(r, { { &a, scalar_like(r, 1.0) }, { &b, scalar_like(r, -1.0) } });
}

DVar operator*(const DVar &a, const DVar &b) {
    Var r = a.primal() * b.primal();
    if (!active(a) && !active(b))
        return r;
    return tape_of(a).record(r, { { &a, b.primal() }, { &b, a.primal() } });
}

DVar operator/(const DVar &a, const DVar &b) {
    Var r = a.primal() / b.primal();
    if (!active(a) && !active(b))
        return r;
    Var inv = rcp(b.primal());
    return tape_of(a).record(r, { { &a, inv }, { &b, -(r * inv) } });
}

DVar operator-(const DVar &a) {
    Var r = -a.primal();
    if (!active(a))
        return r;
    return tape_of(a).record(r, { { &a, scalar_like(r, -1.0) } });
}

DVar operator+(const DVar &a, double b) { return a + lit(a, b); }
DVar operator-(const DVar &a, double b) { return a - lit(a, b); }
DVar operator*(const DVar &a, double b) { return a * lit(a, b); }
DVar operator/(const DVar &a, double b) { return a / lit(a, b); }
DVar operator+(double a, const DVar &b) { return lit(b, a) + b; }
DVar operator-(double a, const DVar &b) { return lit(b, a) - b; }
DVar operator*(double a, const DVar &b) { return lit(b, a) * b; }
DVar operator/(double a, const DVar &b) { return lit(b, a) / b; }

DVar exp(const DVar &a) {
    Var r = tj::exp(a.primal());
    if (!active(a))
        return r;
    return tape_of(a).record(r, { { &a, r } });
}

DVar log(const DVar &a) {
    Var r = tj::log(a.primal());
    if (!active(a))
        return r;
    return tape_of(a).record(r, { { &a, rcp(a.primal()) } });
}

DVar sqrt(const DVar &a) {
    Var r = tj::sqrt(a.primal());
    if (!active(a))
        return r;
    return tape_of(a).record(r, { { &a, scalar_like(r, 0.5) / r } });
}

DVar sin(const DVar &a) {
    Var r = tj::sin(a.primal());
    if (!active(a))
        return r;
    return tape_of(a).record(r, { { &a, tj::cos(a.primal()) } });
}

DVar cos(const DVar &a) {
    Var r = tj::cos(a.primal());
    if (!active(a))
        return r;
    return tape_of(a).record(r, { { &a, -tj::sin(a.primal()) } });
}

DVar rcp(const DVar &a) {
    Var r = tj::rcp(a.primal());
    if (!active(a))
        return r;
    return tape_of(a).record(r, { { &a, -(r * r) } });
}

DVar abs(const DVar &a) {
    Var r = tj::abs(a.primal());
    if (!active(a))
        return r;
    Var neg = a.primal() < scalar_like(r, 0.0);
    return tape_of(a).record(r, { { &a, tj::select(neg, scalar_like(r, -1.0), scalar_like(r, 1.0)) } });
}

DVar min(const DVar &a, const DVar &b) {
    Var r = tj::min(a.primal(), b.primal());
    if (!active(a) && !active(b))
        return r;
    Var m = a.primal() <= b.primal();
    Var one = scalar_like(r, 1.0), zero = scalar_like(r, 0.0);
    return tape_of(a).record(r, { { &a, tj::select(m, one, zero) }, { &b, tj::select(m, zero, one) } });
}

DVar max(const DVar &a, const DVar &b) {
    Var r = tj::max(a.primal(), b.primal());
    if (!active(a) && !active(b))
        return r;
    Var m = a.primal() >= b.primal();
    Var one = scalar_like(r, 1.0), zero = scalar_like(r, 0.0);
    return tape_of(a).record(r, { { &a, tj::select(m, one, zero) }, { &b, tj::select(m, zero, one) } });
}

DVar fma(const DVar &a, const DVar &b, const DVar &c) {
    Var r = tj::fma(a.primal(), b.primal(), c.primal());
    if (!active(a) && !active(b) && !active(c))
        return r;
    return tape_of(a).record(r, { { &a, b.primal() }, { &b, a.primal() }, { &c, scalar_like(r, 1.0) } });
}

DVar select(const Var &mask, const DVar &t, const DVar &f) {
    Var r = tj::select(mask, t.primal(), f.primal());
    if (!active(t) && !active(f))
        return r;
    Var one = scalar_like(r, 1.0), zero = scalar_like(r, 0.0);
    return tape_of(t).record(r, { { &t, tj::select(mask, one, zero) },
                                  { &f, tj::select(mask, zero, one) } });
}

DVar cast(const DVar &a, Dtype t) {
    Var r = tj::cast(a.primal(), t);
    if (!active(a) || !is_float(t))
        return r;
    return tape_of(a).record(r, { { &a, Var() } });
}

DVar gather(const DVar &src, const Var &index_in, const Var &mask) {
    Var r = tj::gather(src.primal(), index_in, mask);
    if (!active(src) || !is_float(r.dtype()))
        return r;
    Tape &t = tape_of(src);
    Var idx = index_in.dtype() == Dtype::I32 ? tj::cast(index_in, Dtype::U32) : index_in;
    uint32_t id = t.new_node(r.dtype(), r.size(), r.id());
    Tape::Edge e;
    e.src = src.node();
    e.tgt = id;
    e.kind = Tape::EdgeKind::Gather;
    e.index = idx;
    e.mask = mask;
    t.add_edge(std::move(e));
    return DVar::steal(r, id);
}

DVar gather(const DVar &src, const Var &index) {
    return gather(src, index, literal(*src.ctx(), Dtype::Bool, 1.0));
}

void scatter_add(DVar &target, const DVar &value, const Var &index_in, const Var &mask) {
    Var tv = target.primal();
    tj::scatter_add(tv, value.primal(), index_in, mask);
    bool at = active(target), av = active(value);
    if (!at && !av) {
        target = DVar(tv);
        return;
    }
    Tape &t = tape_of(target);
    Var idx = index_in.dtype() == Dtype::I32 ? tj::cast(index_in, Dtype::U32) : index_in;
    uint32_t id = t.new_node(tv.dtype(), tv.size(), tv.id());
    if (at) {
        Tape::Edge e;
        e.src = target.node();
        e.tgt = id;
        t.add_edge(std::move(e));
    }
    if (av) {
        Tape::Edge e;
        e.src = value.node();
        e.tgt = id;
        e.kind = Tape::EdgeKind::ScatterAdd;
        e.index = idx;
        e.mask = mask;
        t.add_edge(std::move(e));
    }
    target = DVar::steal(tv, id);
}

DVar sum(const DVar &a) {
    Var r = tj::sum(a.primal());
    if (!active(a))
        return r;
    Tape &t = tape_of(a);
    uint32_t id = t.new_node(r.dtype(), 1, r.id());
    Tape::Edge e;
    e.src = a.node();
    e.tgt = id;
    e.kind = Tape::EdgeKind::ScatterAdd;
    e.index = literal(*a.ctx(), Dtype::U32, 0.0, a.size());
    e.mask = literal(*a.ctx(), Dtype::Bool, 1.0);
    t.add_edge(std::move(e));
    return DVar::steal(r, id);
}

DVar replace_grad(const DVar &a, const DVar &b) {
    if (!b.tracked())
        return DVar(a.primal());
    DVar r = b;   // shares b's node
    DVar out = DVar::steal(a.primal(), r.node());
    tape_of(b).inc_ref(r.node());
    return out;
}

} // namespace tj::ad
