/*
    tools/workloads.cpp -- Benchmark workloads driven by the command line tool
*/

#include "workloads.hpp"

#include <tracejit/render.hpp>

#include <cmath>
#include <cstring>
#include <sstream>

namespace tj::bench {

namespace {

// Open box with every BSDF type; used when no --scene is given
const char *builtin_scene = R"(
camera 0 0 0 1
emitter 1.5
bsdf floor diffuse_tex 4 4  0.8 0.2 0.8 0.2  0.2 0.8 0.2 0.8  0.8 0.2 0.8 0.2  0.2 0.8 0.2 0.8
bsdf back phong 2 2 20  0.5 0.3 0.3 0.5
bsdf side diffuse 0.7
bsdf ball diffuse 0.4
quad -2 -1 0  2 -1 0  2 -1 5  -2 -1 5  floor
quad -2 -1 5  2 -1 5  2 2 5  -2 2 5  back
quad -1.2 -1 0  -1.2 -1 5  -1.2 2 5  -1.2 2 0  side
sphere 0.2 -0.4 3 0.6 ball
)";

std::unique_ptr<render::Scene> scene_for(Context &ctx, const WorkloadOptions &opt) {
    return opt.scene.empty() ? render::parse_scene(ctx, builtin_scene)
                             : render::load_scene(ctx, opt.scene);
}

render::RenderConfig config_for(const WorkloadOptions &opt) {
    render::RenderConfig cfg;
    cfg.width = opt.width;
    cfg.height = opt.height;
    cfg.spp = opt.spp;
    cfg.max_depth = opt.depth;
    cfg.seed = opt.seed;
    cfg.replay_seed = opt.seed + 1;
    return cfg;
}

void fail(WorkloadResult &r, const std::string &msg) {
    if (r.verified)
        r.message = msg;
    r.verified = false;
}

void check_finite(WorkloadResult &r) {
    for (double v : r.output)
        if (!std::isfinite(v))
            return fail(r, "non-finite output value");
}

void run_ao(Context &ctx, const WorkloadOptions &opt, WorkloadResult &r) {
    auto scene = scene_for(ctx, opt);
    render::RenderConfig cfg = config_for(opt);
    cfg.spp = std::max<uint32_t>(opt.spp, 1);
    ctx.reset_stats();
    r.output = render::render_ao(*scene, cfg).to_host();
    for (double v : r.output)
        if (!(v >= 0.0 && v <= 1.0))
            return fail(r, "ambient occlusion outside [0, 1]");
}

void run_pt(Context &ctx, const WorkloadOptions &opt, WorkloadResult &r) {
    auto scene = scene_for(ctx, opt);
    ctx.reset_stats();
    r.output = render::render_pt(*scene, config_for(opt), opt.seed).to_host();
    check_finite(r);
    for (double v : r.output)
        if (v < 0)
            return fail(r, "negative radiance");
}

// Primal render, loss against a flat reference and PRB
void run_prb(Context &ctx, const WorkloadOptions &opt, WorkloadResult &r, bool reparam) {
    auto scene = scene_for(ctx, opt);
    render::RenderConfig cfg = config_for(opt);
    cfg.reparam = reparam;
    ctx.reset_stats();
    ad::DVar img = render::render(*scene, cfg);
    ad::DVar diff = img - 0.5;
    ad::DVar loss = ad::sum(diff * diff) * (1.0 / img.primal().size());
    ad::backward(loss);
    r.output = img.primal().to_host();
    for (auto &[name, p] : scene->params()) {
        std::vector<double> g = ad::grad(*p).to_host();
        r.output.insert(r.output.end(), g.begin(), g.end());
    }
    if (opt.dump == "tape")
        r.dump = ad::tape(ctx).dump();
    check_finite(r);
}

double loop_step(double x) { return x * 0.999 + std::sin(x) * 0.001; }

Var loop_step(const Var &x) { return x * 0.999 + sin(x) * 0.001; }

void run_microloop(Context &ctx, const WorkloadOptions &opt, WorkloadResult &r) {
    uint32_t lanes = opt.lanes;
    ctx.reset_stats();
    Var x0 = cast(index(ctx, lanes), Dtype::F64) * (1.0 / lanes);
    Var x;
    if (opt.unroll) {
        x = x0;
        for (uint32_t i = 0; i < opt.n; ++i)
            x = loop_step(x);
    } else {
        std::vector<Var> st{ literal(ctx, Dtype::U32, 0.0), x0 };
        // a uniform, so the recorded kernel does not change with the count
        Var n = from_host(ctx, Dtype::U32, { (double) opt.n });
        auto out = loop(
            ctx, "microloop", st, [&](const std::vector<Var> &s) { return s[0] < n; },
            [&](const std::vector<Var> &s) {
                return std::vector<Var>{ s[0] + literal(ctx, Dtype::U32, 1.0), loop_step(s[1]) };
            });
        x = out[1];
    }
    if (opt.dump == "trace")
        r.dump = ctx.dump_trace();
    r.output = x.to_host();
    for (uint32_t k = 0; k < lanes; ++k) {
        double ref = (double) k * (1.0 / lanes);
        for (uint32_t i = 0; i < opt.n; ++i)
            ref = loop_step(ref);
        if (std::abs(r.output[k] - ref) > 1e-12 * (1 + std::abs(ref)))
            return fail(r, "microloop lane " + std::to_string(k) + " differs from the host oracle");
    }
}

// Truncated sine series; the term count repeats with period 5 over instances
struct SeriesInstance : Instance {
    uint32_t terms;
    Attr scale;
    SeriesInstance(Context &ctx, uint32_t terms, double s)
        : Instance(ctx, "series"), terms(terms), scale(literal(ctx, Dtype::F64, s)) {}

    Var eval(const Var &x) const {
        Var x2 = x * x, term = x, acc = x;
        double coef = 1.0;
        for (uint32_t j = 1; j < terms; ++j) {
            coef = -coef / double((2 * j) * (2 * j + 1));
            term = term * x2;
            acc = acc + term * coef;
        }
        return acc * scale.get();
    }
};

double series_host(uint32_t terms, double s, double x) {
    double x2 = x * x, term = x, acc = x, coef = 1.0;
    for (uint32_t j = 1; j < terms; ++j) {
        coef = -coef / double((2 * j) * (2 * j + 1));
        term = term * x2;
        acc = acc + term * coef;
    }
    return acc * s;
}

void run_microdispatch(Context &ctx, const WorkloadOptions &opt, WorkloadResult &r) {
    if (opt.n == 0)
        throw StructuralError("microdispatch needs at least one instance");
    std::vector<std::unique_ptr<SeriesInstance>> inst;
    for (uint32_t i = 0; i < opt.n; ++i)
        inst.push_back(std::make_unique<SeriesInstance>(ctx, i % 5 + 1, 1.0 + 1e-3 * i));
    uint32_t lanes = opt.lanes;
    ctx.reset_stats();
    Var lane = index(ctx, lanes);
    Var self = lane % literal(ctx, Dtype::U32, opt.n) + literal(ctx, Dtype::U32, 1.0);
    Var x = cast(lane, Dtype::F64) * (1.0 / lanes);
    auto out = vcall(ctx, "series", "eval", self, { x },
                     [](Instance *i, const std::vector<Var> &a) {
                         return std::vector<Var>{ static_cast<SeriesInstance *>(i)->eval(a[0]) };
                     });
    if (opt.dump == "trace")
        r.dump = ctx.dump_trace();
    r.output = out[0].to_host();
    for (uint32_t k = 0; k < lanes; ++k) {
        const SeriesInstance &s = *inst[k % opt.n];
        double ref = series_host(s.terms, 1.0 + 1e-3 * (k % opt.n), (double) k * (1.0 / lanes));
        if (std::abs(r.output[k] - ref) > 1e-12 * (1 + std::abs(ref)))
            return fail(r, "microdispatch lane " + std::to_string(k) +
                               " differs from the host oracle");
    }
}

} // namespace

const std::vector<std::string> &workload_names() {
    static const std::vector<std::string> names{ "ao",        "pt",          "prb", "prb-stub-reparam",
                                                 "microloop", "microdispatch" };
    return names;
}

WorkloadResult run_workload(const std::string &name, const WorkloadOptions &opt) {
    if (opt.dump != "" && opt.dump != "trace" && opt.dump != "ir" && opt.dump != "tape")
        throw StructuralError("unknown dump kind '" + opt.dump + "'");
    Context ctx;
    ctx.set_mode(opt.mode);
    ctx.set_flags(opt.flags);
    ctx.log_ir() = opt.dump == "ir";

    WorkloadResult r;
    if (name == "ao")
        run_ao(ctx, opt, r);
    else if (name == "pt")
        run_pt(ctx, opt, r);
    else if (name == "prb")
        run_prb(ctx, opt, r, false);
    else if (name == "prb-stub-reparam")
        run_prb(ctx, opt, r, true);
    else if (name == "microloop")
        run_microloop(ctx, opt, r);
    else if (name == "microdispatch")
        run_microdispatch(ctx, opt, r);
    else
        throw StructuralError("unknown workload '" + name + "'");

    r.stats = ctx.stats();
    if (opt.dump == "ir") {
        std::ostringstream os;
        for (auto &k : ctx.ir_log())
            os << k << "\n";
        r.dump = os.str();
    } else if (opt.dump == "trace" && r.dump.empty()) {
        r.dump = ctx.dump_trace();
    } else if (opt.dump == "tape" && r.dump.empty()) {
        r.dump = ad::tape(ctx).dump();
    }
    return r;
}

uint64_t checksum(const std::vector<double> &values) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (double v : values) {
        uint64_t bits;
        std::memcpy(&bits, &v, sizeof(bits));
        for (int i = 0; i < 8; ++i) {
            h ^= (bits >> (8 * i)) & 0xff;
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

std::vector<std::pair<std::string, Flags>> sweep_columns() {
    std::vector<std::pair<std::string, Flags>> cols;
    for (uint32_t k = 0; k <= 7; ++k)
        cols.emplace_back(std::string(1, char('a' + k)), Flags::from_mask((1u << k) - 1));
    return cols;
}

std::string csv_header() {
    return "workload,mode,column,flags,trace_time,assembly_time,compile_time,exec_time,"
           "kernels_launched,loop_kernels,bytes_read,bytes_written,ir_ops,lowerings,"
           "cache_hits,subroutines,call_inputs_removed,call_outputs_removed,"
           "loop_state_removed,checksum,verified";
}

std::string csv_row(const std::string &workload, const WorkloadOptions &opt,
                    const std::string &column, const WorkloadResult &r) {
    const LaunchStats &s = r.stats;
    std::ostringstream os;
    os << workload << ',' << mode_name(opt.mode) << ',' << column << ',' << opt.flags.str() << ',' << s.trace_time << ',' << s.assembly_time
       << ',' << s.compile_time << ',' << s.exec_time << ',' << s.kernels_launched << ','
       << s.loop_kernels << ',' << s.bytes_read << ',' << s.bytes_written << ',' << s.ir_ops
       << ',' << s.lowerings << ',' << s.cache_hits << ',' << s.subroutines << ','
       << s.call_inputs_before - s.call_inputs_after << ','
       << s.call_outputs_before - s.call_outputs_after << ','
       << s.loop_state_before - s.loop_state_after << ',' << std::hex << checksum(r.output)
       << std::dec << ',' << (r.verified ? 1 : 0);
    return os.str();
}

} // namespace tj::bench
