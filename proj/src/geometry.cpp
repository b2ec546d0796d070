/*
    src/geometry.cpp -- Sphere/triangle intersection and the traced ray query
*/

#include <tracejit/geometry.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace tj {

static Vec3d sub(const Vec3d &a, const Vec3d &b) { return { a[0] - b[0], a[1] - b[1], a[2] - b[2] }; }
static double dot(const Vec3d &a, const Vec3d &b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
static Vec3d cross(const Vec3d &a, const Vec3d &b) {
    return { a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0] };
}

uint32_t Geometry::add_sphere(const Vec3d &center, double radius, uint32_t shape) {
    m_prims.push_back({ Kind::Sphere, shape, center, { radius, 0, 0 }, {} });
    m_nodes.clear();
    return (uint32_t) m_prims.size() - 1;
}

uint32_t Geometry::add_triangle(const Vec3d &a, const Vec3d &b, const Vec3d &c, uint32_t shape) {
    m_prims.push_back({ Kind::Triangle, shape, a, b, c });
    m_nodes.clear();
    return (uint32_t) m_prims.size() - 1;
}

uint32_t Geometry::add_quad(const Vec3d &a, const Vec3d &b, const Vec3d &c, const Vec3d &d,
                            uint32_t shape) {
    uint32_t first = add_triangle(a, b, c, shape);
    add_triangle(a, c, d, shape);
    return first;
}

bool Geometry::hit_prim(uint32_t i, const Vec3d &o, const Vec3d &d, double maxt, double &t,
                        double &u, double &v) const {
    const Prim &p = m_prims[i];
    if (p.kind == Kind::Sphere) {
        Vec3d oc = sub(o, p.p0);
        double r = p.p1[0];
        double a = dot(d, d), b = dot(oc, d), c = dot(oc, oc) - r * r;
        double disc = b * b - a * c;
        if (disc < 0 || a == 0)
            return false;
        double sq = std::sqrt(disc);
        double t0 = (-b - sq) / a, t1 = (-b + sq) / a;
        double th = t0 > 0 ? t0 : t1;
        if (!(th > 0) || th > maxt)
            return false;
        Vec3d q = { oc[0] + th * d[0], oc[1] + th * d[1], oc[2] + th * d[2] };
        t = th;
        u = (std::atan2(q[1], q[0]) + M_PI) / (2 * M_PI);
        v = std::acos(std::clamp(q[2] / r, -1.0, 1.0)) / M_PI;
        return true;
    }

    // Moeller-Trumbore, two-sided
    Vec3d e1 = sub(p.p1, p.p0), e2 = sub(p.p2, p.p0);
    Vec3d pv = cross(d, e2);
    double det = dot(e1, pv);
    if (det == 0)
        return false;
    double inv = 1.0 / det;
    Vec3d tv = sub(o, p.p0);
    double bu = dot(tv, pv) * inv;
    if (bu < 0 || bu > 1)
        return false;
    Vec3d qv = cross(tv, e1);
    double bv = dot(d, qv) * inv;
    if (bv < 0 || bu + bv > 1)
        return false;
    double th = dot(e2, qv) * inv;
    if (!(th > 0) || th > maxt)
        return false;
    t = th;
    u = bu;
    v = bv;
    return true;
}

bool Geometry::intersect1(const Vec3d &o, const Vec3d &d, double maxt, double &t,
                          uint32_t &prim, double &u, double &v) const {
    bool found = false;
    double best = maxt;
    auto test = [&](uint32_t i) {
        double ti, ui, vi;
        if (!hit_prim(i, o, d, best, ti, ui, vi))
            return;
        if (!found || ti < best || (ti == best && i < prim)) {
            found = true;
            best = ti;
            t = ti;
            prim = i;
            u = ui;
            v = vi;
        }
    };

    if (m_nodes.empty()) {
        for (uint32_t i = 0; i < m_prims.size(); ++i)
            test(i);
        return found;
    }

    Vec3d inv_d;
    for (int k = 0; k < 3; ++k)
        inv_d[k] = 1.0 / d[k];
    uint32_t stack[64];
    int sp = 0;
    stack[sp++] = 0;
    while (sp > 0) {
        const Node &n = m_nodes[stack[--sp]];
        // slab test; a box whose entry equals the best distance may hold a tie
        double t0 = 0, t1 = best;
        bool miss = false;
        for (int k = 0; k < 3 && !miss; ++k) {
            double a = (n.lo[k] - o[k]) * inv_d[k], b = (n.hi[k] - o[k]) * inv_d[k];
            if (std::isnan(a) || std::isnan(b)) {
                // ray parallel and on a slab plane
                if (o[k] < n.lo[k] || o[k] > n.hi[k])
                    miss = true;
                continue;
            }
            if (a > b)
                std::swap(a, b);
            t0 = std::max(t0, a);
            t1 = std::min(t1, b * (1 + 4 * std::numeric_limits<double>::epsilon()));
            if (t0 > t1)
                miss = true;
        }
        if (miss)
            continue;
        if (n.count) {
            for (uint32_t k = 0; k < n.count; ++k)
                test(m_order[n.left + k]);
        } else {
            stack[sp++] = n.right;
            stack[sp++] = n.left;
        }
    }
    return found;
}

void Geometry::intersect(uint32_t n, const double *o[3], const double *d[3], const double *maxt,
                         const uint8_t *active, bool shadow, uint8_t *hit, double *t,
                         uint32_t *prim, uint32_t *shape, double *u, double *v) const {
    for (uint32_t i = 0; i < n; ++i) {
        if (!active[i])
            continue;
        double ti = 0, ui = 0, vi = 0;
        uint32_t pi = 0;
        bool h = intersect1({ o[0][i], o[1][i], o[2][i] }, { d[0][i], d[1][i], d[2][i] },
                            maxt[i], ti, pi, ui, vi);
        hit[i] = h;
        if (h && !shadow) {
            t[i] = ti;
            prim[i] = pi;
            shape[i] = m_prims[pi].shape;
            u[i] = ui;
            v[i] = vi;
        }
    }
}

// ---------------------------------------------------------------------
// BVH

static void bounds(const Geometry::Prim &p, Vec3d &lo, Vec3d &hi) {
    if (p.kind == Geometry::Kind::Sphere) {
        for (int k = 0; k < 3; ++k) {
            lo[k] = p.p0[k] - p.p1[0];
            hi[k] = p.p0[k] + p.p1[0];
        }
        return;
    }
    for (int k = 0; k < 3; ++k) {
        lo[k] = std::min({ p.p0[k], p.p1[k], p.p2[k] });
        hi[k] = std::max({ p.p0[k], p.p1[k], p.p2[k] });
    }
}

uint32_t Geometry::build(uint32_t begin, uint32_t end, uint32_t leaf_size) {
    uint32_t id = (uint32_t) m_nodes.size();
    m_nodes.emplace_back();
    Vec3d lo{ INFINITY, INFINITY, INFINITY }, hi{ -INFINITY, -INFINITY, -INFINITY };
    for (uint32_t i = begin; i < end; ++i) {
        Vec3d a, b;
        bounds(m_prims[m_order[i]], a, b);
        for (int k = 0; k < 3; ++k) {
            lo[k] = std::min(lo[k], a[k]);
            hi[k] = std::max(hi[k], b[k]);
        }
    }
    m_nodes[id].lo = lo;
    m_nodes[id].hi = hi;
    if (end - begin <= leaf_size) {
        m_nodes[id].left = begin;
        m_nodes[id].count = end - begin;
        return id;
    }
    int axis = 0;
    for (int k = 1; k < 3; ++k)
        if (hi[k] - lo[k] > hi[axis] - lo[axis])
            axis = k;
    auto centroid = [&](uint32_t i) {
        Vec3d a, b;
        bounds(m_prims[i], a, b);
        return a[axis] + b[axis];
    };
    uint32_t mid = (begin + end) / 2;
    std::nth_element(m_order.begin() + begin, m_order.begin() + mid, m_order.begin() + end,
                     [&](uint32_t a, uint32_t b) {
                         double ca = centroid(a), cb = centroid(b);
                         return ca < cb || (ca == cb && a < b);
                     });
    uint32_t l = build(begin, mid, leaf_size);
    uint32_t r = build(mid, end, leaf_size);
    m_nodes[id].left = l;
    m_nodes[id].right = r;
    return id;
}

void Geometry::build_bvh(uint32_t leaf_size) {
    m_nodes.clear();
    m_order.resize(m_prims.size());
    std::iota(m_order.begin(), m_order.end(), 0u);
    if (!m_prims.empty())
        build(0, (uint32_t) m_prims.size(), std::max(leaf_size, 1u));
}

// ---------------------------------------------------------------------
// Traced queries

static uint32_t intersect_node(const std::array<Var, 3> &o, const std::array<Var, 3> &d,
                               const Var &maxt, const Var &mask, bool shadow) {
    Context &ctx = *mask.ctx();
    Dtype ft = o[0].dtype();
    const Var *all[8] = { &o[0], &o[1], &o[2], &d[0], &d[1], &d[2], &maxt, &mask };
    uint32_t size = 1;
    for (auto *v : all)
        size = std::max(size, v->size());
    std::vector<uint32_t> deps;
    for (int k = 0; k < 8; ++k) {
        const Var &v = *all[k];
        if (v.size() != 1 && v.size() != size)
            throw ShapeError("ray query: incompatible sizes");
        Dtype want = k == 7 ? Dtype::Bool : ft;
        if (v.dtype() != want)
            throw StructuralError("ray query: mixed operand types");
        deps.push_back(v.id());
    }
    // Inside a call body, route outside operands through closure capture
    std::vector<Var> keep;
    for (auto &id : deps) {
        if (!ctx.call_scope() || id >= ctx.call_scope()->start)
            continue;
        Var v = select(literal(ctx, Dtype::Bool, 1.0), Var::borrow(&ctx, id),
                       Var::borrow(&ctx, id));
        id = v.id();
        keep.push_back(std::move(v));
    }
    return ctx.new_node(Op::Intersect, Dtype::Bool, size, deps, shadow ? 1 : 0);
}

static Var extract(Context &ctx, uint32_t anchor, uint32_t k, Dtype t) {
    uint32_t size = ctx.rec(anchor).size;
    return Var::steal(&ctx, ctx.new_node(Op::Extract, t, size, { anchor }, k, 0, true));
}

Hit ray_intersect(const std::array<Var, 3> &o, const std::array<Var, 3> &d, const Var &maxt,
                  const Var &mask) {
    Context &ctx = *mask.ctx();
    Dtype ft = o[0].dtype();
    Var anchor = Var::steal(&ctx, intersect_node(o, d, maxt, mask, false));
    Hit h;
    h.valid = extract(ctx, anchor.id(), 0, Dtype::Bool);
    h.t = extract(ctx, anchor.id(), 1, ft);
    h.prim = extract(ctx, anchor.id(), 2, Dtype::U32);
    h.shape = extract(ctx, anchor.id(), 3, Dtype::U32);
    h.u = extract(ctx, anchor.id(), 4, ft);
    h.v = extract(ctx, anchor.id(), 5, ft);
    return h;
}

Var ray_test(const std::array<Var, 3> &o, const std::array<Var, 3> &d, const Var &maxt,
             const Var &mask) {
    Context &ctx = *mask.ctx();
    Var anchor = Var::steal(&ctx, intersect_node(o, d, maxt, mask, true));
    return extract(ctx, anchor.id(), 0, Dtype::Bool);
}

} // namespace tj
