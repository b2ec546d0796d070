/*
    tracejit/autodiff.hpp -- Tape-based forward/reverse differentiation on top
    of the tracer. Derivative propagation emits ordinary traced operations.
*/

#pragma once

#include "control_flow.hpp"
#include "ops.hpp"

#include <functional>
#include <memory>
#include <unordered_map>
#include <string>
#include <vector>

namespace tj::ad {

class Tape;
class CustomOp;

/// Array handle that may carry a node of the AD tape
class DVar {
public:
    DVar() = default;
    DVar(Var v) : m_v(std::move(v)) {}
    DVar(const DVar &o);
    DVar(DVar &&o) noexcept : m_v(std::move(o.m_v)), m_node(o.m_node) { o.m_node = 0; }
    DVar &operator=(const DVar &o);
    DVar &operator=(DVar &&o) noexcept;
    ~DVar();

    /// Adopt a tape reference
    static DVar steal(Var v, uint32_t node);

    const Var &primal() const { return m_v; }
    Var detach() const { return m_v; }
    uint32_t node() const { return m_node; }
    bool tracked() const { return m_node != 0; }

    Context *ctx() const { return m_v.ctx(); }
    Dtype dtype() const { return m_v.dtype(); }
    uint32_t size() const { return m_v.size(); }
    bool valid() const { return m_v.valid(); }

private:
    Var m_v;
    uint32_t m_node = 0;
};

Tape &tape(Context &ctx);

// ---------------------------------------------------------------------
// Gradient bookkeeping

/// Start tracking 'v' (floating point only). Creates a leaf node.
void enable_grad(DVar &v, const std::string &label = "");
void set_label(const DVar &v, const std::string &label);

/// Current gradient (literal zero when none was assigned)
Var grad(const DVar &v);
void set_grad(const DVar &v, const Var &g);
void accum_grad(const DVar &v, const Var &g);

/// Seed grad(v) += 1 and propagate to all reachable nodes
void backward(const DVar &v);
void forward(const DVar &v);

/// Propagate from the gradients already assigned to 'seeds'
void backward_from(const std::vector<DVar> &seeds);
void forward_from(const std::vector<DVar> &seeds);

/// Evaluate primal values together with pending tape weights
void eval(const std::vector<DVar> &vars);

/// Drop all tape nodes
void clear(Context &ctx);

// ---------------------------------------------------------------------
// Scopes. Each one pushes a frame on construction and pops it on destruction.

/// Disable tracking of all variables, or of the listed ones
class SuspendGrad {
public:
    explicit SuspendGrad(Context &ctx);
    SuspendGrad(Context &ctx, const std::vector<DVar> &vars);
    ~SuspendGrad();
    SuspendGrad(const SuspendGrad &) = delete;
    SuspendGrad &operator=(const SuspendGrad &) = delete;

private:
    Context &m_ctx;
};

/// Re-enable tracking of all variables, or of the listed ones only
class ResumeGrad {
public:
    explicit ResumeGrad(Context &ctx);
    ResumeGrad(Context &ctx, const std::vector<DVar> &vars);
    ~ResumeGrad();
    ResumeGrad(const ResumeGrad &) = delete;
    ResumeGrad &operator=(const ResumeGrad &) = delete;

private:
    Context &m_ctx;
};

/// Isolation boundary: propagation reaching nodes created before the
/// scope is postponed until the scope ends. A local scope also drops the
/// tape nodes created inside it on exit (for bodies of recorded loops).
class IsolateGrad {
public:
    explicit IsolateGrad(Context &ctx, bool local = false);
    ~IsolateGrad() noexcept(false);
    IsolateGrad(const IsolateGrad &) = delete;
    IsolateGrad &operator=(const IsolateGrad &) = delete;

private:
    Context &m_ctx;
};

/// Description of the active set: complement == true means "everything
/// except 'nodes'", otherwise "only 'nodes'".
struct Omega {
    bool complement = true;
    std::vector<uint32_t> nodes;
    std::string str(const Tape &t) const;
};

// ---------------------------------------------------------------------
// Custom operations

class CustomOp {
public:
    explicit CustomOp(Context *ctx = nullptr) : m_ctx(ctx) {}
    virtual ~CustomOp() = default;

    /// Primal evaluation. Runs with tracking suspended while reads of tracked
    /// variables that are not explicit inputs are recorded as implicit inputs.
    virtual std::vector<DVar> eval(const std::vector<DVar> &inputs) = 0;

    /// Input gradients -> output gradients
    virtual void forward() = 0;
    /// Output gradients -> input gradients
    virtual void backward() = 0;

    virtual std::string name() const { return "custom"; }

    size_t n_inputs() const { return m_in.size(); }
    size_t n_outputs() const { return m_out.size(); }
    size_t n_implicit() const { return m_implicit.size(); }

    /// Primal value of explicit input i / output k
    const Var &input(size_t i) const { return m_in[i]; }
    const Var &output(size_t k) const { return m_out[k]; }
    /// Tape node of explicit input i (0 when not tracked)
    uint32_t input_node(size_t i) const { return m_in_nodes[i]; }
    /// Tape node of implicit input j
    uint32_t implicit_node(size_t j) const { return m_implicit[j]; }

    /// Gradients of inputs (explicit first, then implicit) and outputs
    Var grad_in(size_t i) const;
    void set_grad_in(size_t i, const Var &g);
    Var grad_out(size_t k) const;
    void set_grad_out(size_t k, const Var &g);

    Context &ctx() const { return *m_ctx; }

private:
    friend class Tape;
    friend std::vector<DVar> custom(std::shared_ptr<CustomOp>, const std::vector<DVar> &);

    // Nodes are kept alive by the tape edges, so no handles are held here
    Context *m_ctx = nullptr;
    std::vector<Var> m_in, m_out;
    std::vector<uint32_t> m_in_nodes, m_implicit, m_out_nodes;
    std::vector<Var> m_gin, m_gout;   // stashed gradients during a traversal
};

/// Run a custom operation; creates a single tape node spanning it when any
/// explicit or implicit input is tracked
std::vector<DVar> custom(std::shared_ptr<CustomOp> op, const std::vector<DVar> &inputs);

// ---------------------------------------------------------------------
// Differentiable control flow. Bodies are isolation boundaries; tape nodes
// they create are dropped when the body ends.

using DLoopCond = std::function<Var(const std::vector<DVar> &)>;
using DLoopBody = std::function<std::vector<DVar>(const std::vector<DVar> &)>;

std::vector<DVar> loop(Context &ctx, const std::string &name, std::vector<DVar> state,
                       const DLoopCond &cond, const DLoopBody &body);

using DMethodFn = std::function<std::vector<DVar>(Instance *, const std::vector<DVar> &)>;

/// Polymorphic call whose derivative is another polymorphic call
std::vector<DVar> vcall(Context &ctx, const std::string &domain, const std::string &method,
                        const Var &self, const std::vector<DVar> &inputs, const DMethodFn &fn);

// ---------------------------------------------------------------------
// Arithmetic

DVar operator+(const DVar &a, const DVar &b);
DVar operator-(const DVar &a, const DVar &b);
DVar operator*(const DVar &a, const DVar &b);
DVar operator/(const DVar &a, const DVar &b);
DVar operator-(const DVar &a);

DVar operator+(const DVar &a, double b);
DVar operator-(const DVar &a, double b);
DVar operator*(const DVar &a, double b);
DVar operator/(const DVar &a, double b);
DVar operator+(double a, const DVar &b);
DVar operator-(double a, const DVar &b);
DVar operator*(double a, const DVar &b);
DVar operator/(double a, const DVar &b);

inline DVar &operator+=(DVar &a, const DVar &b) { return a = a + b; }
inline DVar &operator-=(DVar &a, const DVar &b) { return a = a - b; }
inline DVar &operator*=(DVar &a, const DVar &b) { return a = a * b; }

DVar exp(const DVar &a);
DVar log(const DVar &a);
DVar sqrt(const DVar &a);
DVar sin(const DVar &a);
DVar cos(const DVar &a);
DVar rcp(const DVar &a);
DVar abs(const DVar &a);
DVar min(const DVar &a, const DVar &b);
DVar max(const DVar &a, const DVar &b);
DVar fma(const DVar &a, const DVar &b, const DVar &c);
DVar select(const Var &mask, const DVar &t, const DVar &f);
DVar cast(const DVar &a, Dtype t);

DVar gather(const DVar &src, const Var &index, const Var &mask);
DVar gather(const DVar &src, const Var &index);
void scatter_add(DVar &target, const DVar &value, const Var &index, const Var &mask);
DVar sum(const DVar &a);

/// Primal value of 'a' with the derivative tracking of 'b'
DVar replace_grad(const DVar &a, const DVar &b);

// ---------------------------------------------------------------------
// Tape

/// Derivative graph of one context. Edges carry weights that are ordinary
/// trace variables; nodes are numbered in creation order.
class Tape {
public:
    enum class EdgeKind : uint8_t { Mul, Gather, ScatterAdd, Custom };

    struct Edge {
        uint32_t src = 0, tgt = 0;
        EdgeKind kind = EdgeKind::Mul;
        Var weight;           // Mul
        Var index, mask;      // Gather / ScatterAdd
        uint32_t slot = 0;    // Custom: input or output index of the op
    };

    struct Node {
        uint32_t refs = 0;    // DVar handles
        Dtype dtype = Dtype::F64;
        uint32_t size = 1;
        uint32_t var_id = 0;  // primal variable at creation
        Var grad;
        std::vector<uint32_t> in, out;   // edge ids in insertion order
        std::string label;
        std::shared_ptr<CustomOp> custom;
    };

    struct Stats {
        uint64_t nodes_created = 0, edges_created = 0, eliminated = 0;
        uint64_t traversals = 0, postponed = 0;
    };

    explicit Tape(Context &ctx) : m_ctx(ctx) {}
    ~Tape();

    Context &ctx() const { return m_ctx; }

    /// Record an operation result with weighted edges from tracked operands
    DVar record(Var result, std::initializer_list<std::pair<const DVar *, Var>> operands);

    /// True if propagation through 'node' is currently enabled
    bool enabled(uint32_t node);

    uint32_t new_node(Dtype t, uint32_t size, uint32_t var_id, const std::string &label = "");
    uint32_t add_edge(Edge e);

    void inc_ref(uint32_t node);
    void dec_ref(uint32_t node);

    bool has_node(uint32_t id) const { return m_nodes.count(id) != 0; }
    const Node &node(uint32_t id) const;
    Node &node_mut(uint32_t id);
    const Edge &edge(uint32_t id) const { return m_edges.at(id); }
    size_t node_count() const { return m_nodes.size(); }
    size_t edge_count() const { return m_edges.size(); }
    uint32_t next_node_id() const { return m_next_node; }

    /// Add 'g' to the gradient of 'node' honoring isolation frames
    void accumulate(uint32_t node, const Var &g);
    Var grad_of(uint32_t node) const;
    /// Gradient of 'node' as an evaluated array that scatter-adds can target
    Var &grad_buffer(uint32_t node);

    /// Propagate from 'seeds'. Nodes in 'keep' retain their gradient.
    void traverse(bool backward, const std::vector<uint32_t> &seeds,
                  const std::vector<uint32_t> &keep = {});

    /// Remove all nodes with id >= start (and their edges)
    void truncate(uint32_t start);
    void clear();

    /// Evaluate weights produced by node elimination
    void eval_pending(std::vector<uint32_t> &ids);

    // Scope frames
    enum class FrameKind : uint8_t { Suspend, Resume, SuspendSet, ResumeSet, Isolate, Monitor };
    struct Frame {
        Frame(FrameKind k = FrameKind::Suspend) : kind(k) {}
        FrameKind kind;
        std::vector<uint32_t> set;        // sorted node ids
        uint32_t boundary = 0;            // Isolate: first node id inside
        bool local = false;               // Isolate: truncate at exit
        std::vector<uint32_t> postponed;  // Isolate: outside nodes with pending grads
        std::vector<uint32_t> implicit;   // Monitor: implicit reads in order
    };
    void push_frame(Frame f);
    Frame pop_frame();
    const std::vector<Frame> &frames() const { return m_frames; }
    Frame *isolation();

    Omega omega() const;
    /// When set, the scope classes append the active set on entry
    std::vector<std::string> *omega_log = nullptr;
    void log_omega();

    /// Node elimination when a node loses its last handle (default on)
    bool eliminate = true;

    /// Live trace records (and evaluated buffers among them) kept alive by
    /// tape weights and gradients
    size_t held_records() const;
    size_t held_buffers() const;

    /// Fig.-style listing: nodes, edges, weight variable ids
    std::string dump() const;

    Stats &stats() { return m_stats; }

private:
    void try_eliminate(uint32_t id);
    void remove_node(uint32_t id);
    void remove_edge(uint32_t eid);
    void deliver_outside(uint32_t node, const Var &g, Frame &iso);
    void run_custom(Node &n, bool backward);

    Context &m_ctx;
    std::unordered_map<uint32_t, Node> m_nodes;
    std::unordered_map<uint32_t, Edge> m_edges;
    std::vector<Frame> m_frames;
    std::vector<uint32_t> m_pending;    // edges with lazily combined weights
    std::vector<uint32_t> m_deferred;   // postponed nodes awaiting propagation
    uint32_t m_next_node = 1, m_next_edge = 1;
    int m_traversing = 0;
    Stats m_stats;
};

} // namespace tj::ad
