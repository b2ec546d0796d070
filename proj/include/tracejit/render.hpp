/*
    tracejit/render.hpp -- Small differentiable renderer: ambient occlusion,
    path tracing and path replay backpropagation (PRB)
*/

#pragma once

#include "autodiff.hpp"
#include "geometry.hpp"

#include <map>
#include <memory>
#include <string>
#include <vector>

namespace tj::render {

using ad::DVar;

/// PCG32 (XSH-RR) with one stream per lane
struct Pcg32 {
    Var state, inc;   // u64

    /// Stream 'seq' (per lane) seeded with 'seed', as in the reference
    /// pcg32_srandom_r()
    static Pcg32 seeded(Context &ctx, uint32_t size, uint64_t seed);
    Var next_u32();
    /// Uniform in [0, 1) with 32 random bits
    Var next_f64();
};

/// Host-side reference generator matching Pcg32 lane for lane
struct Pcg32Host {
    uint64_t state = 0, inc = 0;
    Pcg32Host(uint64_t seed, uint64_t seq);
    uint32_t next_u32();
    double next_f64() { return next_u32() * 0x1p-32; }
};

struct Vec3 {
    Var x, y, z;
};

struct DVec3 {
    DVar x, y, z;
};

/// Nearest-neighbor texture over a differentiable texel array (row-major)
struct Texture {
    DVar texels;
    uint32_t width = 1, height = 1;

    DVar lookup(const DVar &u, const DVar &v) const;
};

// ---------------------------------------------------------------------
// Scene objects

/// Polymorphic BSDF. Argument layout of eval():
/// [u, v, wi.x, wi.y, wi.z, wo.x, wo.y, wo.z] in the local shading frame;
/// returns [f] (no cosine factor).
class Bsdf : public Instance {
public:
    explicit Bsdf(Context &ctx) : Instance(ctx, "bsdf") {}
    virtual std::vector<DVar> eval(const std::vector<DVar> &args) const = 0;
    virtual std::string kind() const = 0;
};

class Diffuse : public Bsdf {
public:
    Diffuse(Context &ctx, DVar albedo) : Bsdf(ctx), albedo(std::move(albedo)) {}
    Diffuse(Context &ctx, Texture tex) : Bsdf(ctx), texture(std::move(tex)), textured(true) {}

    std::vector<DVar> eval(const std::vector<DVar> &args) const override;
    std::string kind() const override { return textured ? "diffuse_tex" : "diffuse"; }

    DVar albedo;
    Texture texture;
    bool textured = false;
};

/// albedo(uv)/pi + max(dot(reflect(wi), wo), 0)^exponent
class Phong : public Bsdf {
public:
    Phong(Context &ctx, Texture tex, double exponent);

    std::vector<DVar> eval(const std::vector<DVar> &args) const override;
    std::string kind() const override { return "phong"; }

    Texture texture;
    Attr exponent;
};

/// Shape refinement: [o.xyz, d.xyz, t, hit_u, hit_v] ->
/// [p.xyz, n.xyz, u, v, bsdf id (u32)]
class Shape : public Instance {
public:
    enum class Kind { Sphere, Quad };

    Shape(Context &ctx, Kind kind, uint32_t bsdf);
    std::vector<Var> surface(const std::vector<Var> &args) const;

    Kind kind;
    uint32_t bsdf_id;
    Vec3d p0{}, e1{}, e2{}, normal{};   // sphere: p0 = center, e1[0] = radius
    Attr a_bsdf;
    std::array<Attr, 3> a_p0, a_e1, a_e2, a_n;
    Attr a_radius;
};

struct Camera {
    Vec3d origin{ 0, 0, 0 };
    double scale = 1.0;   // image plane spans origin +- scale in x and y
};

class Scene {
public:
    explicit Scene(Context &ctx);
    ~Scene();
    Scene(const Scene &) = delete;
    Scene &operator=(const Scene &) = delete;

    Context &ctx() const { return m_ctx; }

    /// Scene parameters are evaluated f64 arrays
    uint32_t add_diffuse(const std::string &name, double albedo);
    uint32_t add_diffuse_texture(const std::string &name, uint32_t w, uint32_t h,
                                 const std::vector<double> &texels);
    uint32_t add_phong(const std::string &name, uint32_t w, uint32_t h,
                       const std::vector<double> &texels, double exponent);
    void add_sphere(const Vec3d &c, double r, const std::string &bsdf);
    void add_quad(const Vec3d &a, const Vec3d &b, const Vec3d &c, const Vec3d &d,
                  const std::string &bsdf);
    void set_emitter(double radiance);

    /// Build acceleration structure and register the ray query backend
    void finalize(bool bvh = true);

    Camera camera;
    DVar emitter;

    /// Differentiable parameters in declaration order
    std::vector<std::pair<std::string, DVar *>> params();
    DVar &param(const std::string &name);

    const std::vector<std::unique_ptr<Shape>> &shapes() const { return m_shapes; }
    const std::vector<std::unique_ptr<Bsdf>> &bsdfs() const { return m_bsdfs; }
    const std::map<std::string, uint32_t> &bsdf_names() const { return m_bsdf_names; }
    Geometry &geometry() { return *m_geo; }

private:
    uint32_t bsdf_index(const std::string &name) const;

    Context &m_ctx;
    std::shared_ptr<Geometry> m_geo;
    std::vector<std::unique_ptr<Bsdf>> m_bsdfs;
    std::vector<std::unique_ptr<Shape>> m_shapes;
    std::map<std::string, uint32_t> m_bsdf_names;
    std::vector<std::string> m_param_order;
};

// ---------------------------------------------------------------------
// Integrators

struct RenderConfig {
    uint32_t width = 16, height = 16;
    uint32_t spp = 4;
    uint32_t max_depth = 1;
    uint64_t seed = 1;          // decorrelated primal
    uint64_t replay_seed = 2;   // PRB primal replay and adjoint pass
    bool reparam = false;       // route rays through the identity reparameterization
};

/// Ambient occlusion: fraction of 'spp' cosine-weighted rays of length 1
/// that escape. Pixels whose primary ray misses are 0.
Var render_ao(Scene &scene, const RenderConfig &cfg);

/// Path tracer with box-filter splatting; returns a width*height image
Var render_pt(Scene &scene, const RenderConfig &cfg, uint64_t seed);

/// PRB: scatter d(loss)/d(params) given d(loss)/d(image) into the gradients
/// of the scene parameters
void prb_backward(Scene &scene, const RenderConfig &cfg, const Var &grad_image);

/// Forward-mode image perturbation for the current parameter gradients
/// (used as tangents); returns d(image)
Var render_forward(Scene &scene, const RenderConfig &cfg, uint64_t seed);

/// Differentiable render: primal path tracing, PRB in reverse mode
DVar render(Scene &scene, const RenderConfig &cfg);

/// Identity reparameterization (direction, determinant 1) as a custom operation
std::pair<DVec3, DVar> reparameterize(const DVec3 &d);

/// One-bounce integrator written with explicit scopes; records the active
/// set at each scope entry into 'log'
void scoped_integrator(Scene &scene, const RenderConfig &cfg, std::vector<std::string> &log);

// Scene files and images

/// Load a scene description (see README for the grammar); throws
/// StructuralError with a line number on malformed input
std::unique_ptr<Scene> load_scene(Context &ctx, const std::string &path);
std::unique_ptr<Scene> parse_scene(Context &ctx, const std::string &text);

/// Write a grayscale portable float map
void write_pfm(const std::string &path, const std::vector<double> &pixels, uint32_t width,
               uint32_t height);
std::vector<double> read_pfm(const std::string &path, uint32_t &width, uint32_t &height);

} // namespace tj::render
