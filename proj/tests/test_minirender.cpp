#include <tracejit/render.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <unistd.h>

using namespace tj;
using namespace tj::render;

namespace {

const char *kPlane = "camera 0 0 0 1\nemitter 2\nbsdf p diffuse 0.6\n"
                     "quad -5 -5 1  5 -5 1  5 5 1  -5 5 1 p\n";

const char *kTexturedQuad = "camera 0 0 0 1\nemitter 1.5\n"
                            "bsdf t diffuse_tex 2 2 0.2 0.4 0.6 0.8\n"
                            "quad -1 -1 1  1 -1 1  1 1 1  -1 1 1 t\n";

// Interreflections between a floor, two walls and a sphere
const char *kBox = "camera 0 0 0 1\nemitter 1.5\n"
                   "bsdf floor diffuse_tex 2 2 0.8 0.3 0.4 0.6\n"
                   "bsdf back phong 2 2 20 0.5 0.3 0.3 0.5\n"
                   "bsdf side diffuse 0.7\n"
                   "bsdf ball diffuse 0.4\n"
                   "quad -2 -1 0  2 -1 0  2 -1 5  -2 -1 5  floor\n"
                   "quad -2 -1 5  2 -1 5  2 2 5  -2 2 5  back\n"
                   "quad -1.2 -1 0  -1.2 -1 5  -1.2 2 5  -1.2 2 0  side\n"
                   "sphere 0.2 -0.4 3 0.6 ball\n";

double mean(const std::vector<double> &v) {
    double s = 0;
    for (double x : v)
        s += x;
    return s / v.size();
}

RenderConfig small(uint32_t w, uint32_t spp, uint32_t depth) {
    RenderConfig c;
    c.width = c.height = w;
    c.spp = spp;
    c.max_depth = depth;
    return c;
}

// Central differences of <image, weights> with respect to every scalar parameter,
// rendered with the replay seed so both sides see the same paths
void check_prb_against_fd(const char *scene_text, uint32_t depth, double tol) {
    Context ctx;
    auto s = parse_scene(ctx, scene_text);
    RenderConfig c = small(4, 8, depth);
    const uint32_t n = c.width * c.height;
    std::vector<double> weights(n);
    for (uint32_t i = 0; i < n; ++i)
        weights[i] = 0.1 * (i % 5) + 0.05;
    prb_backward(*s, c, from_host(ctx, Dtype::F64, weights));

    size_t checked = 0;
    for (auto &[name, p] : s->params()) {
        auto g = ad::grad(*p).to_host();
        auto base = p->primal().to_host();
        for (size_t k = 0; k < base.size(); ++k) {
            auto loss_at = [&](double h) {
                auto v = base;
                v[k] += h;
                *p = ad::DVar(from_host(ctx, Dtype::F64, v));
                auto img = render_pt(*s, c, c.replay_seed).to_host();
                double L = 0;
                for (uint32_t i = 0; i < n; ++i)
                    L += img[i] * weights[i];
                return L;
            };
            const double h = 1e-5;
            double fd = (loss_at(h) - loss_at(-h)) / (2 * h);
            *p = ad::DVar(from_host(ctx, Dtype::F64, base));
            EXPECT_NEAR(g[k], fd, tol * std::max(1.0, std::abs(fd)))
                << name << "[" << k << "] depth " << depth;
            checked++;
        }
    }
    EXPECT_GT(checked, 3u);
}

} // namespace

TEST(Pcg32, MatchesHostReference) {
    Context ctx;
    for (uint64_t seed : { 1ull, 42ull, 0x853c49e6748fea9bull }) {
        auto rng = Pcg32::seeded(ctx, 8, seed);
        std::vector<Pcg32Host> host;
        for (uint64_t i = 0; i < 8; ++i)
            host.emplace_back(seed, i);
        for (int draw = 0; draw < 5; ++draw) {
            auto u = rng.next_u32().to_host_raw();
            auto f = rng.next_f64().to_host();
            for (int i = 0; i < 8; ++i) {
                EXPECT_EQ(u[i], host[i].next_u32());
                double hf = host[i].next_f64();
                EXPECT_EQ(f[i], hf);
                EXPECT_GE(hf, 0.0);
                EXPECT_LT(hf, 1.0);
            }
        }
    }
}

TEST(Pcg32, KnownFirstOutput) {
    // pcg32_srandom_r(&rng, 42, 54) produces 0xa15c02b7 first
    Pcg32Host h(42, 54);
    EXPECT_EQ(h.next_u32(), 0xa15c02b7u);
    EXPECT_EQ(h.next_u32(), 0x7b47f409u);
}

TEST(AmbientOcclusion, UnoccludedPlaneIsOne) {
    Context ctx;
    auto s = parse_scene(ctx, kPlane);
    auto img = render_ao(*s, small(8, 16, 1)).to_host();
    for (double v : img)
        EXPECT_EQ(v, 1.0);
}

TEST(AmbientOcclusion, ParallelPlanesEscapeFraction) {
    // cosine-weighted rays of length 1 escape a parallel plane at distance d with probability d^2
    for (double d : { 0.3, 0.5, 0.8 }) {
        Context ctx;
        char buf[512];
        std::snprintf(buf, sizeof buf,
                      "camera 0 0 0 1\nbsdf p diffuse 0.5\n"
                      "quad -50 -50 1  50 -50 1  50 50 1  -50 50 1 p\n"
                      "quad -50 -50 %g  -50 50 %g  50 50 %g  50 -50 %g p\n",
                      1 + d, 1 + d, 1 + d, 1 + d);
        auto s = parse_scene(ctx, buf);
        RenderConfig c = small(8, 256, 1);
        double m = mean(render_ao(*s, c).to_host());
        double sigma = std::sqrt(d * d * (1 - d * d) / (64.0 * 256));
        EXPECT_NEAR(m, d * d, 5 * sigma) << "d=" << d;
    }
}

TEST(AmbientOcclusion, MissIsZero) {
    Context ctx;
    auto s = parse_scene(ctx, "camera 0 0 0 1\nbsdf p diffuse 0.5\n"
                              "quad -1 -1 -1  1 -1 -1  1 1 -1  -1 1 -1 p\n");
    auto img = render_ao(*s, small(4, 4, 1)).to_host();
    for (double v : img)
        EXPECT_EQ(v, 0.0);
}

TEST(AmbientOcclusion, SingleKernelInMegakernelMode) {
    Context ctx;
    auto s = parse_scene(ctx, kBox);
    ctx.reset_stats();
    render_ao(*s, small(8, 4, 1)).to_host();
    EXPECT_EQ(ctx.stats().kernels_launched, 1u);
}

TEST(PathTracer, DiffusePlaneUnderConstantEmitter) {
    Context ctx;
    auto s = parse_scene(ctx, kPlane);
    for (uint32_t depth : { 1u, 3u }) {
        auto img = render_pt(*s, small(4, 8, depth), 7).to_host();
        for (double v : img)
            EXPECT_NEAR(v, 0.6 * 2.0, 1e-12);
    }
}

TEST(PathTracer, ZeroAlbedoIsBlack) {
    Context ctx;
    auto s = parse_scene(ctx, "camera 0 0 0 1\nemitter 3\nbsdf p diffuse 0\n"
                              "quad -5 -5 1  5 -5 1  5 5 1  -5 5 1 p\n");
    auto img = render_pt(*s, small(4, 4, 3), 1).to_host();
    for (double v : img)
        EXPECT_EQ(v, 0.0);
}

TEST(PathTracer, ModesAgree) {
    std::vector<double> ref;
    for (Mode m : { Mode::Megakernel, Mode::WavefrontLoops, Mode::Wavefront }) {
        Context ctx({}, m);
        auto s = parse_scene(ctx, kBox);
        auto img = render_pt(*s, small(6, 4, 3), 5).to_host();
        if (ref.empty())
            ref = img;
        else
            EXPECT_EQ(img, ref) << mode_name(m);
    }
}

TEST(Prb, MatchesFiniteDifferencesDepth1) { check_prb_against_fd(kBox, 1, 1e-4); }
TEST(Prb, MatchesFiniteDifferencesDepth4) { check_prb_against_fd(kBox, 4, 1e-3); }
TEST(Prb, TexturedQuad) { check_prb_against_fd(kTexturedQuad, 2, 1e-4); }

TEST(Prb, ZeroImageGradientGivesZero) {
    Context ctx;
    auto s = parse_scene(ctx, kBox);
    prb_backward(*s, small(4, 4, 3), literal(ctx, Dtype::F64, 0.0, 16));
    for (auto &[name, p] : s->params())
        for (double g : ad::grad(*p).to_host())
            EXPECT_EQ(g, 0.0) << name;
}

TEST(Render, ForwardModeWithRespectToEmitter) {
    Context ctx;
    auto s = parse_scene(ctx, kTexturedQuad);
    ad::DVar img = render::render(*s, small(4, 4, 2));
    ad::set_grad(s->emitter, literal(ctx, Dtype::F64, 1.0));
    ad::forward_from({ s->emitter });
    auto d = ad::grad(img).to_host();
    // image = emitter * texel value
    const double tex[4] = { 0.2, 0.4, 0.6, 0.8 };
    for (uint32_t y = 0; y < 4; ++y)
        for (uint32_t x = 0; x < 4; ++x)
            EXPECT_NEAR(d[y * 4 + x], tex[(y / 2) * 2 + x / 2], 1e-12) << x << "," << y;
}

TEST(Render, ReverseModeThroughCustomOp) {
    Context ctx;
    auto s = parse_scene(ctx, kTexturedQuad);
    ad::DVar img = render::render(*s, small(4, 4, 2));
    ad::backward(ad::sum(img * img));
    // d sum(I^2) / d texel = 2 * E * I over the 4 pixels of that texel
    auto g = ad::grad(s->param("t.texture")).to_host();
    const double tex[4] = { 0.2, 0.4, 0.6, 0.8 };
    for (int k = 0; k < 4; ++k)
        EXPECT_NEAR(g[k], 4 * 2 * 1.5 * (1.5 * tex[k]), 1e-9);
    double ge = ad::grad(s->emitter).item(), oracle = 0;
    for (double t : tex)
        oracle += 4 * 2 * (1.5 * t) * t;
    EXPECT_NEAR(ge, oracle, 1e-9);
}

TEST(Render, SuspendedParameterReceivesNothing) {
    Context ctx;
    auto s = parse_scene(ctx, kTexturedQuad);
    ad::DVar img;
    {
        ad::SuspendGrad sg(ctx, { s->emitter });
        img = render::render(*s, small(4, 4, 1));
    }
    ad::backward(ad::sum(img));
    EXPECT_EQ(ad::grad(s->emitter).item(), 0.0);
    for (double g : ad::grad(s->param("t.texture")).to_host())
        EXPECT_NEAR(g, 4 * 1.5, 1e-12);
}

TEST(Render, GradientStepReducesLoss) {
    Context ctx;
    auto target_scene = parse_scene(ctx, kBox);
    RenderConfig c = small(6, 4, 2);
    Var target = render_pt(*target_scene, c, c.seed);
    target.eval();

    auto s = parse_scene(ctx, kBox);
    ad::DVar &albedo = s->param("side.albedo");
    albedo = ad::DVar(from_host(ctx, Dtype::F64, { 0.2 }));
    ad::DVar &tex = s->param("floor.texture");
    tex = ad::DVar(from_host(ctx, Dtype::F64, { 0.3, 0.3, 0.3, 0.3 }));
    ad::enable_grad(albedo);
    ad::enable_grad(tex);

    auto loss_and_step = [&](double lr) {
        ad::DVar img = render::render(*s, c);
        ad::DVar diff = img - ad::DVar(target);
        ad::DVar loss = ad::sum(diff * diff);
        double L = loss.primal().item();
        ad::backward(loss);
        for (ad::DVar *p : { &albedo, &tex }) {
            Var next = p->primal() - ad::grad(*p) * lr;
            *p = ad::DVar(next);
            p->primal().eval();
            ad::enable_grad(*p);
        }
        return L;
    };
    double L0 = loss_and_step(0.01);
    double L1 = loss_and_step(0.01);
    double L2 = loss_and_step(0.01);
    EXPECT_LT(L1, L0);
    EXPECT_LT(L2, L1);
}

TEST(Render, ReparameterizationIsIdentity) {
    Context ctx;
    auto s = parse_scene(ctx, kBox);
    RenderConfig c = small(4, 4, 3);
    auto plain = render_pt(*s, c, 3).to_host();
    c.reparam = true;
    EXPECT_EQ(render_pt(*s, c, 3).to_host(), plain);

    auto grads = [&](bool reparam) {
        c.reparam = reparam;
        for (auto &[name, p] : s->params())
            ad::set_grad(*p, literal(ctx, Dtype::F64, 0.0, p->size()));
        prb_backward(*s, c, literal(ctx, Dtype::F64, 1.0, 16));
        std::vector<double> out;
        for (auto &[name, p] : s->params())
            for (double g : ad::grad(*p).to_host())
                out.push_back(g);
        return out;
    };
    auto a = grads(false), b = grads(true);
    ASSERT_EQ(a.size(), b.size());
    for (size_t i = 0; i < a.size(); ++i)
        EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Render, ScopedIntegratorActiveSets) {
    Context ctx;
    auto s = parse_scene(ctx, kTexturedQuad);
    std::vector<std::string> log;
    scoped_integrator(*s, small(4, 4, 1), log);
    EXPECT_EQ(log, (std::vector<std::string>{ "∅", "∅^c", "{ray.d}", "∅^c" }));
    // every bounce escapes; each texel covers 4 of 16 pixels
    for (double g : ad::grad(s->param("t.texture")).to_host())
        EXPECT_NEAR(g, 1.5 * 4 / 16, 1e-12);
    // the emitter was detached inside the suspended scope
    EXPECT_EQ(ad::grad(s->emitter).item(), 0.0);
}

TEST(SceneFile, ParseErrorsCarryLineNumbers) {
    Context ctx;
    auto expect_error = [&](const char *text, const char *needle) {
        try {
            parse_scene(ctx, text);
            ADD_FAILURE() << "no error for: " << text;
        } catch (const StructuralError &e) {
            EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
        }
    };
    expect_error("camera 0 0 0 1\nbogus 1 2\n", "line 2");
    expect_error("camera 0 0\n", "line 1");
    expect_error("bsdf a diffuse 0.5\nquad 0 0 0 1 0 0 1 1 0 0 1 0 nope\n", "line 2");
    expect_error("bsdf t diffuse_tex 2 2 0.1 0.2\n", "line 1");
    expect_error("emitter x\n", "line 1");
}

TEST(SceneFile, LoadsShippedScenes) {
    Context ctx;
    for (const char *name : { "plane.scene", "box.scene" }) {
        auto s = load_scene(ctx, std::string(TRACEJIT_SCENES) + "/" + name);
        EXPECT_FALSE(s->shapes().empty()) << name;
    }
    EXPECT_THROW(load_scene(ctx, "/nonexistent/x.scene"), Error);
}

TEST(Pfm, Roundtrip) {
    std::string path = "/tmp/tracejit_pfm_" + std::to_string(getpid()) + ".pfm";
    std::vector<double> px{ 0.0, 0.25, 1.5, -2.0, 1e3, 3.0 };
    write_pfm(path, px, 3, 2);
    uint32_t w = 0, h = 0;
    auto back = read_pfm(path, w, h);
    std::remove(path.c_str());
    EXPECT_EQ(w, 3u);
    EXPECT_EQ(h, 2u);
    ASSERT_EQ(back.size(), px.size());
    for (size_t i = 0; i < px.size(); ++i)
        EXPECT_EQ(back[i], (double) (float) px[i]);
}
