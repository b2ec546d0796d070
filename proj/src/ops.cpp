/*
    src/ops.cpp -- Array operations
*/

#include <tracejit/ops.hpp>
#include <tracejit/scalar.hpp>

#include <unordered_map>

namespace tj {

static Context &ctx_of(const Var &v) {
    if (!v.valid())
        throw StructuralError("operation on an uninitialized variable");
    return *v.ctx();
}

Var literal(Context &ctx, Dtype t, double value, uint32_t size) {
    return Var::steal(&ctx, ctx.new_literal(t, scalar::encode(t, value), size));
}

Var literal_raw(Context &ctx, Dtype t, uint64_t payload, uint32_t size) {
    return Var::steal(&ctx, ctx.new_literal(t, payload, size));
}

Var index(Context &ctx, uint32_t size) { return Var::steal(&ctx, ctx.new_index(size)); }

Var arange(Context &ctx, Dtype t, uint32_t size) { return cast(index(ctx, size), t); }

Var linspace(Context &ctx, Dtype t, double start, double end, uint32_t n) {
    if (n == 0)
        throw ShapeError("linspace: n must be positive");
    if (n == 1)
        return literal(ctx, t, start);
    double step = (end - start) / (double) (n - 1);
    if (step == 0.0)
        return literal(ctx, t, start, n);
    return fma(arange(ctx, t, n), literal(ctx, t, step), literal(ctx, t, start));
}

std::pair<Var, Var> meshgrid(const Var &x, const Var &y) {
    Context &ctx = ctx_of(x);
    uint32_t nx = x.size(), ny = y.size();
    Var k = index(ctx, nx * ny);
    Var nxv = literal(ctx, Dtype::U32, nx);
    return { gather(x, k % nxv), gather(y, k / nxv) };
}

Var from_host(Context &ctx, Dtype t, const std::vector<double> &values) {
    auto b = std::make_shared<Buffer>(t, (uint32_t) values.size());
    for (size_t i = 0; i < values.size(); ++i)
        b->data[i] = scalar::encode(t, values[i]);
    return Var::steal(&ctx, ctx.new_data(std::move(b)));
}

Var from_host_raw(Context &ctx, Dtype t, const std::vector<uint64_t> &payloads) {
    auto b = std::make_shared<Buffer>(t, (uint32_t) payloads.size());
    b->data = payloads;
    return Var::steal(&ctx, ctx.new_data(std::move(b)));
}

Var unary(Op op, const Var &a) {
    Context &ctx = ctx_of(a);
    uint32_t d[1] = { a.id() };
    return Var::steal(&ctx, ctx.new_var(op, a.dtype(), d));
}

Var binary(Op op, const Var &a, const Var &b) {
    Context &ctx = ctx_of(a);
    uint32_t d[2] = { a.id(), b.id() };
    Dtype t = op_is_compare(op) ? Dtype::Bool : a.dtype();
    return Var::steal(&ctx, ctx.new_var(op, t, d));
}

Var fma(const Var &a, const Var &b, const Var &c) {
    Context &ctx = ctx_of(a);
    uint32_t d[3] = { a.id(), b.id(), c.id() };
    return Var::steal(&ctx, ctx.new_var(Op::Fma, a.dtype(), d));
}

Var select(const Var &mask, const Var &t, const Var &f) {
    Context &ctx = ctx_of(mask);
    uint32_t d[3] = { mask.id(), t.id(), f.id() };
    return Var::steal(&ctx, ctx.new_var(Op::Select, t.dtype(), d));
}

Var cast(const Var &a, Dtype t) {
    Context &ctx = ctx_of(a);
    uint32_t d[1] = { a.id() };
    return Var::steal(&ctx, ctx.new_var(Op::Cast, t, d));
}

Var bitcast(const Var &a, Dtype t) {
    Context &ctx = ctx_of(a);
    if (a.dtype() == t)
        return a;
    uint32_t d[1] = { a.id() };
    return Var::steal(&ctx, ctx.new_var(Op::Bitcast, t, d));
}

Var scalar_like(const Var &like, double v) { return literal(ctx_of(like), like.dtype(), v); }

Var operator-(const Var &a) { return unary(Op::Neg, a); }
Var operator~(const Var &a) { return unary(Op::Not, a); }

// ---------------------------------------------------------------------
// Gather

// Side-effect free elementwise subgraphs can be indexed by rebuilding them
// with the lane index replaced by the gather index.
static bool is_pure(Context &ctx, uint32_t root) {
    std::vector<uint32_t> todo{ root };
    std::unordered_map<uint32_t, bool> seen;
    while (!todo.empty()) {
        uint32_t id = todo.back();
        todo.pop_back();
        if (seen.count(id))
            continue;
        seen[id] = true;
        const VarRecord &r = ctx.rec(id);
        if (r.dirty)
            return false;
        if (r.op == Op::Gather) {
            const VarRecord &src = ctx.rec(r.deps[0]);
            if (src.op != Op::Data)
                return false;
            todo.push_back(r.deps[1]);
            todo.push_back(r.deps[2]);
            continue;
        }
        if (r.op == Op::Data || r.op == Op::ClosureLoad)
            continue;
        if (!op_is_elementwise(r.op))
            return false;
        for (uint32_t d : r.deps)
            todo.push_back(d);
    }
    return true;
}

static Var clone_indexed(Context &ctx, uint32_t id, const Var &idx, const Var &mask,
                         std::unordered_map<uint32_t, Var> &memo) {
    auto it = memo.find(id);
    if (it != memo.end())
        return it->second;
    const VarRecord &r = ctx.rec(id);
    Var out;
    if (r.op == Op::Index) {
        out = idx;
    } else if (r.op == Op::Literal) {
        out = literal_raw(ctx, r.dtype, r.literal);
    } else if (r.op == Op::Data || r.op == Op::ClosureLoad) {
        if (r.size == 1)
            out = Var::borrow(&ctx, id);
        else
            out = gather(Var::borrow(&ctx, id), idx, mask);
    } else if (r.op == Op::Gather) {
        Var i2 = clone_indexed(ctx, r.deps[1], idx, mask, memo);
        Var m2 = clone_indexed(ctx, r.deps[2], idx, mask, memo);
        out = gather(Var::borrow(&ctx, r.deps[0]), i2, m2);
    } else {
        Op op = r.op;
        Dtype t = r.dtype;
        uint64_t lit = r.literal;
        uint32_t aux = r.aux, aux2 = r.aux2;
        std::vector<uint32_t> deps_in = r.deps;
        std::vector<Var> deps;
        for (uint32_t d : deps_in)
            deps.push_back(clone_indexed(ctx, d, idx, mask, memo));
        std::vector<uint32_t> ids;
        for (auto &d : deps)
            ids.push_back(d.id());
        out = Var::steal(&ctx, ctx.new_var(op, t, ids, lit, aux, aux2));
    }
    memo.emplace(id, out);
    return out;
}

Var gather(const Var &src, const Var &index_in, const Var &mask) {
    Context &ctx = ctx_of(src);
    Var idx = index_in;
    if (idx.dtype() == Dtype::I32)
        idx = cast(idx, Dtype::U32);
    if (mask.dtype() != Dtype::Bool)
        throw StructuralError("gather: mask must be bool");

    const VarRecord &r = ctx.rec(src.id());
    if (r.op == Op::Literal) {
        uint32_t size = std::max(idx.size(), mask.size());
        Var v = literal_raw(ctx, r.dtype, r.literal, size);
        return select(mask, v, literal(ctx, r.dtype, 0.0));
    }
    if (r.op != Op::Data && r.op != Op::ClosureBuf) {
        if (r.op == Op::ClosureLoad) {
            // uniform value: every index reads the same element
            return select(mask, src, literal(ctx, r.dtype, 0.0));
        }
        if (is_pure(ctx, src.id())) {
            std::unordered_map<uint32_t, Var> memo;
            Var v = clone_indexed(ctx, src.id(), idx, mask, memo);
            return select(mask, v, literal(ctx, v.dtype(), 0.0));
        }
        if (ctx.recording())
            throw ModeError("gather: source must be evaluated before entering a recorded "
                            "loop or call");
        src.eval();
    }
    uint32_t d[3] = { src.id(), idx.id(), mask.id() };
    return Var::steal(&ctx, ctx.new_var(Op::Gather, src.dtype(), d));
}

Var gather(const Var &src, const Var &idx) {
    return gather(src, idx, literal(ctx_of(src), Dtype::Bool, 1.0));
}

// ---------------------------------------------------------------------
// Scatter

void scatter(Var &target, const Var &value, const Var &index_in, const Var &mask,
             Reduce reduce) {
    Context &ctx = ctx_of(target);
    Var idx = index_in;
    if (idx.dtype() == Dtype::I32)
        idx = cast(idx, Dtype::U32);
    if (value.dtype() != target.dtype())
        throw StructuralError("scatter: target and value dtype differ");

    const VarRecord *r = &ctx.rec(target.id());
    if (r->op != Op::Data && r->op != Op::ClosureBuf) {
        if (ctx.recording() && target.id() >= ctx.scopes().front().start)
            throw ModeError("scatter: target must be evaluated before entering a recorded "
                            "loop or call");
        target.eval();
        r = &ctx.rec(target.id());
    }

    // Copy on write when other variables may still observe the old contents
    if (!ctx.recording() && r->op == Op::Data &&
        (r->ext_refs > 1 || r->int_refs > r->se_refs)) {
        auto copy = std::make_shared<Buffer>(*r->data);
        target = Var::steal(&ctx, ctx.new_data(std::move(copy)));
    }

    Var m = mask;
    if (uint32_t outer = ctx.current_mask())
        m = m & Var::borrow(&ctx, outer);
    uint32_t d[4] = { target.id(), value.id(), idx.id(), m.id() };
    uint32_t id = ctx.new_var(Op::Scatter, target.dtype(), d, 0, (uint32_t) reduce);
    uint32_t tid = ctx.rec(id).deps[0];
    ctx.rec_mut(tid).se_refs++;
    ctx.mark_dirty(target.id());
    ctx.push_side_effect(id);
    ctx.dec_ext(id);
}

Var sum(const Var &a) {
    Context &ctx = ctx_of(a);
    Var out = Var::steal(&ctx, ctx.new_data(std::make_shared<Buffer>(a.dtype(), 1)));
    scatter_add(out, a, literal(ctx, Dtype::U32, 0.0), literal(ctx, Dtype::Bool, 1.0));
    return out;
}

void eval(std::initializer_list<const Var *> vars) {
    std::vector<uint32_t> ids;
    Context *ctx = nullptr;
    for (auto *v : vars)
        if (v && v->valid()) {
            ids.push_back(v->id());
            ctx = v->ctx();
        }
    if (ctx)
        ctx->eval(ids);
}

void eval(const std::vector<Var> &vars) {
    std::vector<uint32_t> ids;
    Context *ctx = nullptr;
    for (auto &v : vars)
        if (v.valid()) {
            ids.push_back(v.id());
            ctx = v.ctx();
        }
    if (ctx)
        ctx->eval(ids);
}

bool none(const Var &mask) {
    if (mask.is_literal())
        return mask.literal_value() == 0.0;
    for (uint64_t v : mask.to_host_raw())
        if (v)
            return false;
    return true;
}

uint32_t broadcast_size(std::initializer_list<const Var *> vars) {
    uint32_t size = 1;
    for (auto *v : vars)
        size = std::max(size, v->size());
    for (auto *v : vars)
        if (v->size() != 1 && v->size() != size)
            throw ShapeError("incompatible sizes " + std::to_string(v->size()) + " and " +
                             std::to_string(size));
    return size;
}

} // namespace tj
