/*
    src/render.cpp -- Integrators of the mini renderer
*/

#include <tracejit/render.hpp>

#include <cmath>
#include <optional>
#include <limits>

namespace tj::render {

using namespace tj::ad;

namespace {

constexpr double Pi = 3.14159265358979323846;
constexpr double RayEps = 1e-6;
constexpr uint64_t PcgMult = 0x5851f42d4c957f2dULL;

Var f64(Context &c, double v) { return literal(c, Dtype::F64, v); }

Vec3 operator+(const Vec3 &a, const Vec3 &b) { return { a.x + b.x, a.y + b.y, a.z + b.z }; }
Vec3 operator-(const Vec3 &a, const Vec3 &b) { return { a.x - b.x, a.y - b.y, a.z - b.z }; }
Vec3 operator*(const Vec3 &a, const Var &s) { return { a.x * s, a.y * s, a.z * s }; }
Vec3 operator-(const Vec3 &a) { return { -a.x, -a.y, -a.z }; }
Var dot(const Vec3 &a, const Vec3 &b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
Vec3 select(const Var &m, const Vec3 &a, const Vec3 &b) {
    return { tj::select(m, a.x, b.x), tj::select(m, a.y, b.y), tj::select(m, a.z, b.z) };
}

// Orthonormal basis around n (branchless construction of Duff et al.)
struct Frame3 {
    Vec3 s, t, n;

    explicit Frame3(const Vec3 &nn) : n(nn) {
        Context &c = *n.x.ctx();
        Var sign = tj::select(n.z >= 0.0, f64(c, 1.0), f64(c, -1.0));
        Var a = -rcp(sign + n.z);
        Var b = n.x * n.y * a;
        s = { 1.0 + sign * n.x * n.x * a, sign * b, -sign * n.x };
        t = { b, sign + n.y * n.y * a, -n.y };
    }
    Vec3 to_local(const Vec3 &v) const { return { dot(v, s), dot(v, t), dot(v, n) }; }
    Vec3 to_world(const Vec3 &v) const { return s * v.x + t * v.y + n * v.z; }
};

Vec3 cosine_hemisphere(Pcg32 &rng) {
    Var phi = rng.next_f64() * (2.0 * Pi);
    Var s2 = rng.next_f64();
    Var st = sqrt(s2);
    return { cos(phi) * st, sin(phi) * st, sqrt(1.0 - s2) };
}

Vec3 lit3(Context &c, const Vec3d &v) { return { f64(c, v[0]), f64(c, v[1]), f64(c, v[2]) }; }

// Position, normal, uv and BSDF id of the surface hit by (o, d)
struct Surface {
    Vec3 p, n;
    Var u, v, bsdf;
};

Surface surface(Context &c, const Vec3 &o, const Vec3 &d, const Hit &h) {
    auto fn = [](Instance *inst, const std::vector<Var> &a) {
        return static_cast<Shape *>(inst)->surface(a);
    };
    std::vector<Var> r = vcall(c, "shape", "surface", h.shape,
                               { o.x, o.y, o.z, d.x, d.y, d.z, h.t, h.u, h.v }, fn);
    return { { r[0], r[1], r[2] }, { r[3], r[4], r[5] }, r[6], r[7], r[8] };
}

std::vector<DVar> bsdf_args(const Surface &s, const Vec3 &wi, const Vec3 &wo) {
    return { s.u, s.v, wi.x, wi.y, wi.z, wo.x, wo.y, wo.z };
}

DMethodFn bsdf_fn() {
    return [](Instance *inst, const std::vector<DVar> &a) {
        return static_cast<const Bsdf *>(inst)->eval(a);
    };
}

// Plain evaluation (no derivative tracking)
Var bsdf_eval(Context &c, const Var &self, const std::vector<DVar> &args) {
    SuspendGrad sg(c);
    return ad::vcall(c, "bsdf", "eval", self, args, bsdf_fn())[0].primal();
}

struct CameraRays {
    Vec3 o, d;
    Var pixel;
    Pcg32 rng;
};

CameraRays camera_rays(Scene &scene, const RenderConfig &cfg, uint64_t seed) {
    Context &c = scene.ctx();
    uint32_t n = cfg.width * cfg.height * cfg.spp;
    CameraRays r;
    r.pixel = index(c, n) / literal(c, Dtype::U32, cfg.spp);
    Var col = cast(r.pixel % literal(c, Dtype::U32, cfg.width), Dtype::F64);
    Var row = cast(r.pixel / literal(c, Dtype::U32, cfg.width), Dtype::F64);
    r.rng = Pcg32::seeded(c, n, seed);
    Var jx = r.rng.next_f64(), jy = r.rng.next_f64();
    const Camera &cam = scene.camera;
    Var x = (col + jx) * (2.0 / cfg.width) - 1.0;
    Var y = (row + jy) * (2.0 / cfg.height) - 1.0;
    r.o = { x * cam.scale + cam.origin[0], y * cam.scale + cam.origin[1],
            literal(c, Dtype::F64, cam.origin[2], n) };
    r.d = lit3(c, { 0, 0, 1 });
    return r;
}

// Sum of per-sample values per pixel divided by the sample weight
Var splat(Context &c, const RenderConfig &cfg, const Var &pixel, const Var &value) {
    uint32_t np = cfg.width * cfg.height;
    Var img = Var::steal(&c, c.new_data(std::make_shared<Buffer>(Dtype::F64, np)));
    Var wgt = Var::steal(&c, c.new_data(std::make_shared<Buffer>(Dtype::F64, np)));
    Var on = literal(c, Dtype::Bool, 1.0);
    scatter_add(img, value, pixel, on);
    scatter_add(wgt, f64(c, 1.0), pixel, on);
    Var out = img / wgt;
    out.eval();
    return out;
}

Var inf(Context &c) { return f64(c, std::numeric_limits<double>::infinity()); }

// One path vertex shared by all integrators: intersect, refine, sample
struct Vertex {
    Var miss, cont;
    Surface s;
    Vec3 wi, wo, d_next, o_next;
    Var bsdf_self;
};

Vertex vertex(Context &c, const RenderConfig &cfg, Pcg32 &rng, const Vec3 &o, const Vec3 &d,
              const Var &depth, const Var &active) {
    Vertex v;
    Hit h = ray_intersect({ o.x, o.y, o.z }, { d.x, d.y, d.z }, inf(c), active);
    v.miss = active & ~h.valid;
    v.s = surface(c, o, d, h);
    v.cont = active & h.valid & (depth < literal(c, Dtype::U32, cfg.max_depth));
    // shade on the side the ray arrives from
    Vec3 n = select(dot(v.s.n, d) > 0.0, -v.s.n, v.s.n);
    Frame3 fr(n);
    v.wi = fr.to_local(-d);
    v.wo = cosine_hemisphere(rng);
    v.bsdf_self = tj::select(v.cont, v.s.bsdf, literal(c, Dtype::U32, 0.0));
    v.d_next = fr.to_world(v.wo);
    v.o_next = v.s.p + n * f64(c, RayEps);
    return v;
}

void check_config(const RenderConfig &cfg) {
    if (cfg.width == 0 || cfg.height == 0 || cfg.spp == 0)
        throw ShapeError("render: resolution and sample count must be positive");
}

} // namespace

// ---------------------------------------------------------------------
// PCG32

Pcg32 Pcg32::seeded(Context &ctx, uint32_t size, uint64_t seed) {
    Pcg32 r;
    Var seq = cast(index(ctx, size), Dtype::U64);
    r.inc = (seq << literal_raw(ctx, Dtype::U64, 1)) | literal_raw(ctx, Dtype::U64, 1);
    r.state = literal_raw(ctx, Dtype::U64, 0, size);
    r.next_u32();
    r.state = r.state + literal_raw(ctx, Dtype::U64, seed);
    r.next_u32();
    return r;
}

Var Pcg32::next_u32() {
    Context &c = *state.ctx();
    auto u64 = [&](uint64_t v) { return literal_raw(c, Dtype::U64, v); };
    Var old = state;
    state = old * u64(PcgMult) + inc;
    Var xs = cast(((old >> u64(18)) ^ old) >> u64(27), Dtype::U32);
    Var rot = cast(old >> u64(59), Dtype::U32);
    Var u31 = literal_raw(c, Dtype::U32, 31);
    return (xs >> rot) | (xs << ((literal_raw(c, Dtype::U32, 0) - rot) & u31));
}

Var Pcg32::next_f64() { return cast(next_u32(), Dtype::F64) * 0x1p-32; }

Pcg32Host::Pcg32Host(uint64_t seed, uint64_t seq) {
    inc = (seq << 1) | 1;
    next_u32();
    state += seed;
    next_u32();
}

uint32_t Pcg32Host::next_u32() {
    uint64_t old = state;
    state = old * PcgMult + inc;
    uint32_t xs = (uint32_t) (((old >> 18) ^ old) >> 27);
    uint32_t rot = (uint32_t) (old >> 59);
    return (xs >> rot) | (xs << ((0u - rot) & 31));
}

// ---------------------------------------------------------------------
// Materials and shapes

DVar Texture::lookup(const DVar &u, const DVar &v) const {
    Context &c = *texels.ctx();
    Var px = min(cast(u.primal() * (double) width, Dtype::U32), literal(c, Dtype::U32, width - 1));
    Var py = min(cast(v.primal() * (double) height, Dtype::U32), literal(c, Dtype::U32, height - 1));
    return ad::gather(texels, py * literal(c, Dtype::U32, width) + px);
}

std::vector<DVar> Diffuse::eval(const std::vector<DVar> &a) const {
    Context &c = *a[7].ctx();
    DVar alb = textured ? texture.lookup(a[0], a[1]) : albedo;
    DVar f = alb * (1.0 / Pi);
    return { ad::select(a[7].primal() > 0.0, f, DVar(f64(c, 0.0))) };
}

Phong::Phong(Context &ctx, Texture tex, double e)
    : Bsdf(ctx), texture(std::move(tex)), exponent(literal(ctx, Dtype::F64, e)) {}

std::vector<DVar> Phong::eval(const std::vector<DVar> &a) const {
    Context &c = *a[7].ctx();
    DVar alb = texture.lookup(a[0], a[1]);
    // reflect(wi) = (-wi.x, -wi.y, wi.z)
    DVar cr = a[7] * a[4] - a[5] * a[2] - a[6] * a[3];
    Var pos = cr.primal() > 0.0;
    DVar safe = ad::max(cr, DVar(f64(c, 1e-300)));
    DVar spec = ad::select(pos, ad::exp(ad::log(safe) * DVar(exponent.get())), DVar(f64(c, 0.0)));
    DVar f = alb * (1.0 / Pi) + spec;
    return { ad::select(a[7].primal() > 0.0, f, DVar(f64(c, 0.0))) };
}

Shape::Shape(Context &ctx, Kind kind, uint32_t bsdf)
    : Instance(ctx, "shape"), kind(kind), bsdf_id(bsdf),
      a_bsdf(literal(ctx, Dtype::U32, bsdf)) {}

std::vector<Var> Shape::surface(const std::vector<Var> &a) const {
    Vec3 o{ a[0], a[1], a[2] }, d{ a[3], a[4], a[5] };
    Vec3 p = o + d * a[6];
    auto get3 = [](const std::array<Attr, 3> &v) { return Vec3{ v[0].get(), v[1].get(), v[2].get() }; };
    Vec3 n;
    Var u, v;
    if (kind == Kind::Sphere) {
        n = (p - get3(a_p0)) * rcp(a_radius.get());
        u = a[7];
        v = a[8];
    } else {
        n = get3(a_n);
        Vec3 e1 = get3(a_e1), e2 = get3(a_e2), q = p - get3(a_p0);
        u = dot(q, e1) / dot(e1, e1);
        v = dot(q, e2) / dot(e2, e2);
    }
    return { p.x, p.y, p.z, n.x, n.y, n.z, u, v, a_bsdf.get() };
}

// ---------------------------------------------------------------------
// Scene

Scene::Scene(Context &ctx) : m_ctx(ctx), m_geo(std::make_shared<Geometry>()) {
    set_emitter(1.0);
}

Scene::~Scene() {
    if (m_ctx.ray_hook() == m_geo)
        m_ctx.set_ray_hook(nullptr);
}

static DVar make_param(Context &ctx, const std::vector<double> &v, const std::string &label) {
    DVar p(from_host(ctx, Dtype::F64, v));
    enable_grad(p, label);
    return p;
}

uint32_t Scene::bsdf_index(const std::string &name) const {
    auto it = m_bsdf_names.find(name);
    if (it == m_bsdf_names.end())
        throw StructuralError("scene: unknown bsdf '" + name + "'");
    return it->second;
}

uint32_t Scene::add_diffuse(const std::string &name, double albedo) {
    if (m_bsdf_names.count(name))
        throw StructuralError("scene: duplicate bsdf '" + name + "'");
    m_bsdfs.push_back(std::make_unique<Diffuse>(m_ctx, make_param(m_ctx, { albedo }, name + ".albedo")));
    m_param_order.push_back(name + ".albedo");
    return m_bsdf_names[name] = m_bsdfs.back()->instance_id();
}

uint32_t Scene::add_diffuse_texture(const std::string &name, uint32_t w, uint32_t h,
                                    const std::vector<double> &texels) {
    if (m_bsdf_names.count(name))
        throw StructuralError("scene: duplicate bsdf '" + name + "'");
    if (w == 0 || h == 0 || texels.size() != (size_t) w * h)
        throw ShapeError("scene: texture of " + name + " needs " + std::to_string(w * h) +
                         " texels");
    Texture t{ make_param(m_ctx, texels, name + ".texture"), w, h };
    m_bsdfs.push_back(std::make_unique<Diffuse>(m_ctx, std::move(t)));
    m_param_order.push_back(name + ".texture");
    return m_bsdf_names[name] = m_bsdfs.back()->instance_id();
}

uint32_t Scene::add_phong(const std::string &name, uint32_t w, uint32_t h,
                          const std::vector<double> &texels, double exponent) {
    if (m_bsdf_names.count(name))
        throw StructuralError("scene: duplicate bsdf '" + name + "'");
    if (w == 0 || h == 0 || texels.size() != (size_t) w * h)
        throw ShapeError("scene: texture of " + name + " needs " + std::to_string(w * h) +
                         " texels");
    Texture t{ make_param(m_ctx, texels, name + ".texture"), w, h };
    m_bsdfs.push_back(std::make_unique<Phong>(m_ctx, std::move(t), exponent));
    m_param_order.push_back(name + ".texture");
    return m_bsdf_names[name] = m_bsdfs.back()->instance_id();
}

void Scene::add_sphere(const Vec3d &c, double r, const std::string &bsdf) {
    if (!(r > 0))
        throw ShapeError("scene: sphere radius must be positive");
    auto s = std::make_unique<Shape>(m_ctx, Shape::Kind::Sphere, bsdf_index(bsdf));
    s->p0 = c;
    s->e1 = { r, 0, 0 };
    for (int k = 0; k < 3; ++k)
        s->a_p0[k].set(f64(m_ctx, c[k]));
    s->a_radius.set(f64(m_ctx, r));
    m_geo->add_sphere(c, r, s->instance_id());
    m_shapes.push_back(std::move(s));
}

void Scene::add_quad(const Vec3d &a, const Vec3d &b, const Vec3d &c, const Vec3d &d,
                     const std::string &bsdf) {
    auto s = std::make_unique<Shape>(m_ctx, Shape::Kind::Quad, bsdf_index(bsdf));
    Vec3d e1{ b[0] - a[0], b[1] - a[1], b[2] - a[2] }, e2{ d[0] - a[0], d[1] - a[1], d[2] - a[2] };
    Vec3d n{ e1[1] * e2[2] - e1[2] * e2[1], e1[2] * e2[0] - e1[0] * e2[2],
             e1[0] * e2[1] - e1[1] * e2[0] };
    double len = std::sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2]);
    if (!(len > 0))
        throw ShapeError("scene: degenerate quad");
    for (double &x : n)
        x /= len;
    s->p0 = a;
    s->e1 = e1;
    s->e2 = e2;
    s->normal = n;
    for (int k = 0; k < 3; ++k) {
        s->a_p0[k].set(f64(m_ctx, a[k]));
        s->a_e1[k].set(f64(m_ctx, e1[k]));
        s->a_e2[k].set(f64(m_ctx, e2[k]));
        s->a_n[k].set(f64(m_ctx, n[k]));
    }
    m_geo->add_quad(a, b, c, d, s->instance_id());
    m_shapes.push_back(std::move(s));
}

void Scene::set_emitter(double radiance) { emitter = make_param(m_ctx, { radiance }, "emitter"); }

void Scene::finalize(bool bvh) {
    if (bvh)
        m_geo->build_bvh();
    m_ctx.set_ray_hook(m_geo);
}

std::vector<std::pair<std::string, DVar *>> Scene::params() {
    std::vector<std::pair<std::string, DVar *>> r{ { "emitter", &emitter } };
    for (auto &name : m_param_order)
        r.emplace_back(name, &param(name));
    return r;
}

DVar &Scene::param(const std::string &name) {
    if (name == "emitter")
        return emitter;
    auto dot = name.rfind('.');
    if (dot != std::string::npos) {
        auto it = m_bsdf_names.find(name.substr(0, dot));
        if (it != m_bsdf_names.end()) {
            for (auto &b : m_bsdfs) {
                if (b->instance_id() != it->second)
                    continue;
                std::string field = name.substr(dot + 1);
                if (auto *d = dynamic_cast<Diffuse *>(b.get())) {
                    if (field == "albedo" && !d->textured)
                        return d->albedo;
                    if (field == "texture" && d->textured)
                        return d->texture.texels;
                } else if (auto *p = dynamic_cast<Phong *>(b.get())) {
                    if (field == "texture")
                        return p->texture.texels;
                }
            }
        }
    }
    throw StructuralError("scene: unknown parameter '" + name + "'");
}

// ---------------------------------------------------------------------
// Ambient occlusion

Var render_ao(Scene &scene, const RenderConfig &cfg) {
    check_config(cfg);
    Context &c = scene.ctx();
    SuspendGrad sg(c);
    // x arrives evaluated, everything after it fuses into one kernel
    std::vector<double> xs(cfg.width);
    for (uint32_t i = 0; i < cfg.width; ++i)
        xs[i] = cfg.width > 1 ? -1.0 + 2.0 * i / (cfg.width - 1) : -1.0;
    Var x = from_host(c, Dtype::F64, xs);
    Var y = linspace(c, Dtype::F64, -1.0, 1.0, cfg.height);
    auto [gx, gy] = meshgrid(x, y);
    const Camera &cam = scene.camera;
    Vec3 o{ gx * cam.scale + cam.origin[0], gy * cam.scale + cam.origin[1],
            literal(c, Dtype::F64, cam.origin[2], gx.size()) };
    Vec3 d = lit3(c, { 0, 0, 1 });
    Var on = literal(c, Dtype::Bool, 1.0);
    Hit h = ray_intersect({ o.x, o.y, o.z }, { d.x, d.y, d.z }, inf(c), on);
    Surface s = surface(c, o, d, h);
    Frame3 fr(s.n);
    Vec3 origin = s.p + s.n * f64(c, RayEps);

    uint32_t n = gx.size();
    Pcg32 rng = Pcg32::seeded(c, n, cfg.seed);
    Var inc = rng.inc;
    Var valid = h.valid;
    std::vector<Var> state{ rng.state, literal(c, Dtype::U32, 0.0), f64(c, 0.0) };
    auto cond = [&](const std::vector<Var> &st) {
        return valid & (st[1] < literal(c, Dtype::U32, cfg.spp));
    };
    auto body = [&](const std::vector<Var> &st) {
        Pcg32 r{ st[0], inc };
        Vec3 dir = fr.to_world(cosine_hemisphere(r));
        Var occluded = ray_test({ origin.x, origin.y, origin.z }, { dir.x, dir.y, dir.z },
                                f64(c, 1.0), literal(c, Dtype::Bool, 1.0));
        Var res = tj::select(occluded, st[2], st[2] + 1.0);
        return std::vector<Var>{ r.state, st[1] + literal(c, Dtype::U32, 1.0), res };
    };
    std::vector<Var> out = tj::loop(c, "ao", state, cond, body);
    Var img = out[2] * (1.0 / cfg.spp);
    img.eval();
    return img;
}

// ---------------------------------------------------------------------
// Path tracing

namespace {

struct PathResult {
    Var pixel, radiance, rng_state;
};

// Primal path tracer over all samples; per-sample radiance and final RNG state
PathResult trace_paths(Scene &scene, const RenderConfig &cfg, uint64_t seed, const char *name) {
    if (cfg.max_depth < 1)
        throw StructuralError("render: max_depth must be at least 1");
    check_config(cfg);
    Context &c = scene.ctx();
    SuspendGrad sg(c);
    CameraRays cam = camera_rays(scene, cfg, seed);
    Var inc = cam.rng.inc;
    Var E = scene.emitter.primal();

    std::vector<Var> state{ cam.rng.state, cam.o.x, cam.o.y, cam.o.z, cam.d.x, cam.d.y, cam.d.z,
                            f64(c, 1.0), f64(c, 0.0), literal(c, Dtype::U32, 0.0),
                            literal(c, Dtype::Bool, 1.0) };
    auto cond = [](const std::vector<Var> &s) { return s[10]; };
    auto body = [&](const std::vector<Var> &s) {
        Pcg32 rng{ s[0], inc };
        Vec3 o{ s[1], s[2], s[3] }, d{ s[4], s[5], s[6] };
        Var beta = s[7], L = s[8], depth = s[9], active = s[10];
        Vertex v = vertex(c, cfg, rng, o, d, depth, active);
        L = tj::select(v.miss, L + beta * E, L);
        Var f = bsdf_eval(c, v.bsdf_self, bsdf_args(v.s, v.wi, v.wo));
        beta = tj::select(v.cont, beta * f * Pi, beta);
        o = select(v.cont, v.o_next, o);
        d = select(v.cont, v.d_next, d);
        return std::vector<Var>{ rng.state, o.x, o.y, o.z, d.x, d.y, d.z, beta, L,
                                 depth + literal(c, Dtype::U32, 1.0), v.cont };
    };
    std::vector<Var> out = tj::loop(c, name, state, cond, body);
    return { cam.pixel, out[8], out[0] };
}

} // namespace

Var render_pt(Scene &scene, const RenderConfig &cfg, uint64_t seed) {
    PathResult r = trace_paths(scene, cfg, seed, "path");
    return splat(scene.ctx(), cfg, r.pixel, r.radiance);
}

// ---------------------------------------------------------------------
// Path replay backpropagation

void prb_backward(Scene &scene, const RenderConfig &cfg, const Var &grad_image) {
    Context &c = scene.ctx();
    Tape &t = tape(c);
    if (grad_image.size() != cfg.width * cfg.height)
        throw ShapeError("prb: gradient image has " + std::to_string(grad_image.size()) +
                         " pixels, expected " + std::to_string(cfg.width * cfg.height));

    // Pass 1: primal with the replay seed; keep per-sample radiance and RNG state
    PathResult primal = trace_paths(scene, cfg, cfg.replay_seed, "prb_primal");
    eval({ &primal.radiance, &primal.rng_state });

    // Parameter gradients are scatter-add targets inside the adjoint kernel
    std::vector<DVar> inactive;
    for (auto &[name, p] : scene.params())
        if (p->tracked() && t.enabled(p->node()))
            t.grad_buffer(p->node());
        else if (p->tracked())
            inactive.push_back(*p);

    CameraRays cam = camera_rays(scene, cfg, cfg.replay_seed);
    Var inc = cam.rng.inc;
    Var g = grad_image.dtype() == Dtype::F64 ? grad_image : cast(grad_image, Dtype::F64);
    // d(pixel)/d(sample) of the box filter
    Var dL = gather(g, cam.pixel) * (1.0 / cfg.spp);
    DVar E = scene.emitter;

    std::vector<Var> state{ cam.rng.state, cam.o.x, cam.o.y, cam.o.z, cam.d.x, cam.d.y, cam.d.z,
                            f64(c, 1.0), primal.radiance, literal(c, Dtype::U32, 0.0),
                            literal(c, Dtype::Bool, 1.0) };
    auto cond = [](const std::vector<Var> &s) { return s[10]; };
    auto body = [&](const std::vector<Var> &s) {
        Pcg32 rng{ s[0], inc };
        Vec3 o{ s[1], s[2], s[3] }, d{ s[4], s[5], s[6] };
        Var beta = s[7], Lrem = s[8], depth = s[9], active = s[10];
        Vertex v;
        {
            SuspendGrad sg(c);
            v = vertex(c, cfg, rng, o, d, depth, active);
        }
        Var f;
        {
            ResumeGrad rg(c);
            std::optional<SuspendGrad> excluded;
            if (!inactive.empty())
                excluded.emplace(c, inactive);
            IsolateGrad iso(c, true);
            DVar det(f64(c, 1.0));
            if (cfg.reparam) {
                DVec3 dd{ DVar(d.x), DVar(d.y), DVar(d.z) };
                for (DVar *k : { &dd.x, &dd.y, &dd.z })
                    enable_grad(*k, "ray.d");
                det = reparameterize(dd).second;
            }
            DVar fa = ad::vcall(c, "bsdf", "eval", v.bsdf_self, bsdf_args(v.s, v.wi, v.wo),
                                bsdf_fn())[0];
            f = fa.primal();
            Var zero = f64(c, 0.0);
            // emitted radiance reached at a miss, reflected radiance at a vertex
            Var wE = tj::select(v.miss, dL * beta, zero);
            Var wf = tj::select(v.cont & (f > 0.0), dL * Lrem / f, zero);
            DVar y = (E * DVar(wE) + fa * DVar(wf)) * det;
            if (y.tracked())
                backward(y);
        }
        Lrem = tj::select(v.miss, Lrem - beta * E.primal(), Lrem);
        beta = tj::select(v.cont, beta * f * Pi, beta);
        o = select(v.cont, v.o_next, o);
        d = select(v.cont, v.d_next, d);
        return std::vector<Var>{ rng.state, o.x, o.y, o.z, d.x, d.y, d.z, beta, Lrem,
                                 depth + literal(c, Dtype::U32, 1.0), v.cont };
    };
    std::vector<Var> out = tj::loop(c, "prb_adjoint", state, cond, body);

    // Both passes must have consumed identical random streams
    Var diff = neq(out[0], primal.rng_state);
    diff.eval();
    if (!none(diff))
        throw InternalError("prb: replayed random stream diverged from the primal pass");
}

// ---------------------------------------------------------------------
// Forward mode

Var render_forward(Scene &scene, const RenderConfig &cfg, uint64_t seed) {
    if (cfg.max_depth < 1)
        throw StructuralError("render: max_depth must be at least 1");
    check_config(cfg);
    Context &c = scene.ctx();
    Tape &t = tape(c);
    std::vector<uint32_t> seeds;
    for (auto &[name, p] : scene.params())
        if (p->tracked() && t.enabled(p->node())) {
            Var &g = t.node_mut(p->node()).grad;
            if (g.valid() && !g.is_literal() && !g.is_evaluated())
                g.eval();
            seeds.push_back(p->node());
        }

    CameraRays cam = camera_rays(scene, cfg, seed);
    Var inc = cam.rng.inc;
    DVar E = scene.emitter;
    Var zero = f64(c, 0.0);

    std::vector<Var> state{ cam.rng.state, cam.o.x, cam.o.y, cam.o.z, cam.d.x, cam.d.y, cam.d.z,
                            f64(c, 1.0), zero, zero, zero, literal(c, Dtype::U32, 0.0),
                            literal(c, Dtype::Bool, 1.0) };
    auto cond = [](const std::vector<Var> &s) { return s[12]; };
    auto body = [&](const std::vector<Var> &s) {
        Pcg32 rng{ s[0], inc };
        Vec3 o{ s[1], s[2], s[3] }, d{ s[4], s[5], s[6] };
        Var depth = s[11], active = s[12];
        Vertex v;
        {
            SuspendGrad sg(c);
            v = vertex(c, cfg, rng, o, d, depth, active);
        }
        Var beta, L, beta_t, L_t;
        {
            ResumeGrad rg(c);
            IsolateGrad iso(c, true);
            DVar b(s[7]), l(s[8]);
            enable_grad(b);
            enable_grad(l);
            set_grad(b, s[9]);
            set_grad(l, s[10]);
            DVar fa = ad::vcall(c, "bsdf", "eval", v.bsdf_self, bsdf_args(v.s, v.wi, v.wo),
                                bsdf_fn())[0];
            DVar l2 = ad::select(v.miss, l + b * E, l);
            DVar b2 = ad::select(v.cont, b * fa * Pi, b);
            std::vector<uint32_t> sd = seeds;
            sd.push_back(b.node());
            sd.push_back(l.node());
            t.traverse(false, sd, { l2.node(), b2.node() });
            beta = b2.primal();
            L = l2.primal();
            beta_t = grad(b2);
            L_t = grad(l2);
        }
        o = select(v.cont, v.o_next, o);
        d = select(v.cont, v.d_next, d);
        return std::vector<Var>{ rng.state, o.x, o.y, o.z, d.x, d.y, d.z, beta, L, beta_t, L_t,
                                 depth + literal(c, Dtype::U32, 1.0), v.cont };
    };
    std::vector<Var> out = tj::loop(c, "path_jvp", state, cond, body);
    return splat(c, cfg, cam.pixel, out[10]);
}

// ---------------------------------------------------------------------
// Differentiable render operation

namespace {

class RenderOp : public CustomOp {
public:
    RenderOp(Scene &scene, const RenderConfig &cfg)
        : CustomOp(&scene.ctx()), m_scene(scene), m_cfg(cfg) {}

    std::string name() const override { return "render"; }

    std::vector<DVar> eval(const std::vector<DVar> &) override {
        return { DVar(render_pt(m_scene, m_cfg, m_cfg.seed)) };
    }

    void backward() override {
        // parameters excluded from the active set when the op was recorded stay excluded
        std::vector<DVar> inactive;
        auto params = m_scene.params();
        for (size_t i = 0; i < params.size(); ++i)
            if (!input_node(i) && params[i].second->tracked())
                inactive.push_back(*params[i].second);
        if (inactive.empty()) {
            prb_backward(m_scene, m_cfg, grad_out(0));
        } else {
            SuspendGrad sg(ctx(), inactive);
            prb_backward(m_scene, m_cfg, grad_out(0));
        }
    }

    void forward() override {
        Tape &t = tape(ctx());
        auto params = m_scene.params();
        std::vector<Var> saved;
        for (size_t i = 0; i < params.size(); ++i) {
            DVar *p = params[i].second;
            Var prev;
            if (p->tracked() && t.has_node(p->node())) {
                prev = t.node(p->node()).grad;
                t.node_mut(p->node()).grad = grad_in(i);
            }
            saved.push_back(prev);
        }
        Var img;
        try {
            img = render_forward(m_scene, m_cfg, m_cfg.seed);
        } catch (...) {
            restore(params, saved);
            throw;
        }
        restore(params, saved);
        set_grad_out(0, img);
    }

private:
    void restore(const std::vector<std::pair<std::string, DVar *>> &params,
                 const std::vector<Var> &saved) {
        Tape &t = tape(ctx());
        for (size_t i = 0; i < params.size(); ++i) {
            DVar *p = params[i].second;
            if (p->tracked() && t.has_node(p->node()))
                t.node_mut(p->node()).grad = saved[i];
        }
    }

    Scene &m_scene;
    RenderConfig m_cfg;
};

class ReparamOp : public CustomOp {
public:
    explicit ReparamOp(Context &ctx) : CustomOp(&ctx) {}
    std::string name() const override { return "reparameterize"; }

    std::vector<DVar> eval(const std::vector<DVar> &in) override {
        return { in[0], in[1], in[2], DVar(scalar_like(in[0].primal(), 1.0)) };
    }
    // The warp field is not modeled: directions pass through, det has no derivative
    void backward() override {
        for (size_t i = 0; i < 3; ++i)
            set_grad_in(i, grad_out(i));
    }
    void forward() override {
        for (size_t i = 0; i < 3; ++i)
            set_grad_out(i, grad_in(i));
    }
};

} // namespace

DVar render(Scene &scene, const RenderConfig &cfg) {
    if (cfg.seed == cfg.replay_seed)
        throw StructuralError("render: the primal seed must differ from the replay seed");
    std::vector<DVar> inputs;
    for (auto &[name, p] : scene.params())
        inputs.push_back(*p);
    return ad::custom(std::make_shared<RenderOp>(scene, cfg), inputs)[0];
}

std::pair<DVec3, DVar> reparameterize(const DVec3 &d) {
    Context &c = *d.x.ctx();
    std::vector<DVar> r = ad::custom(std::make_shared<ReparamOp>(c), { d.x, d.y, d.z });
    for (int k = 0; k < 3; ++k)
        set_label(r[k], "ray.d");
    set_label(r[3], "det");
    return { DVec3{ r[0], r[1], r[2] }, r[3] };
}

// ---------------------------------------------------------------------
// Scope choreography of a reparameterized one-bounce estimator

void scoped_integrator(Scene &scene, const RenderConfig &cfg, std::vector<std::string> &log) {
    Context &c = scene.ctx();
    Tape &t = tape(c);
    t.omega_log = &log;
    struct Reset {
        Tape &t;
        ~Reset() { t.omega_log = nullptr; }
    } reset{ t };

    RenderConfig one = cfg;
    one.spp = 1;
    CameraRays cam = camera_rays(scene, one, cfg.replay_seed);
    Var on = literal(c, Dtype::Bool, 1.0);
    uint32_t n = cfg.width * cfg.height;
    Var dL = literal(c, Dtype::F64, 1.0 / n);
    {
        SuspendGrad s0(c);
        // primary vertex, detached
        Vertex v0 = vertex(c, one, cam.rng, cam.o, cam.d, literal(c, Dtype::U32, 0.0), on);
        DVec3 d;
        Var miss;
        {
            ResumeGrad r1(c);
            DVec3 d0{ DVar(v0.d_next.x), DVar(v0.d_next.y), DVar(v0.d_next.z) };
            for (DVar *k : { &d0.x, &d0.y, &d0.z })
                enable_grad(*k, "ray.d");
            d = reparameterize(d0).first;
            Hit h = ray_intersect({ v0.o_next.x, v0.o_next.y, v0.o_next.z },
                                  { d.x.primal(), d.y.primal(), d.z.primal() }, inf(c), v0.cont);
            miss = v0.cont & ~h.valid;
        }
        // radiance arriving from the sampled direction (detached)
        Var Li = tj::select(miss, scene.emitter.primal(), f64(c, 0.0));
        Vec3 n0 = select(dot(v0.s.n, cam.d) > 0.0, -v0.s.n, v0.s.n);
        Frame3 fr(n0);
        DVar L;
        {
            ResumeGrad r2(c, { d.x, d.y, d.z });
            // local direction stays differentiable in ray.d
            DVar wx = d.x * DVar(fr.s.x) + d.y * DVar(fr.s.y) + d.z * DVar(fr.s.z);
            DVar wy = d.x * DVar(fr.t.x) + d.y * DVar(fr.t.y) + d.z * DVar(fr.t.z);
            DVar wz = d.x * DVar(fr.n.x) + d.y * DVar(fr.n.y) + d.z * DVar(fr.n.z);
            std::vector<DVar> args{ v0.s.u, v0.s.v, v0.wi.x, v0.wi.y, v0.wi.z, wx, wy, wz };
            DVar f = ad::vcall(c, "bsdf", "eval", v0.bsdf_self, args, bsdf_fn())[0];
            L = DVar(Li) * f * Pi;
        }
        {
            ResumeGrad r3(c);
            if (L.tracked())
                backward(L * DVar(dL));
        }
    }
}

} // namespace tj::render
