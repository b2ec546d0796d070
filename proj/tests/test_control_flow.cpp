#include <tracejit/control_flow.hpp>

#include "random_programs.hpp"

#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <random>

using namespace tj;

namespace {

Var u32(Context &ctx, double v) { return literal(ctx, Dtype::U32, v); }

std::vector<Var> counter_loop(Context &ctx, Var start, uint32_t end) {
    return loop(
        ctx, "count", { start }, [&](const std::vector<Var> &s) { return s[0] < u32(ctx, end); },
        [&](const std::vector<Var> &s) { return std::vector<Var>{ s[0] + u32(ctx, 1) }; });
}

// Loop shape of the power example: multiply x into an accumulator n times
Var pow_loop(Context &ctx, const Var &x, const Var &n) {
    auto out = loop(
        ctx, "pow", { u32(ctx, 0), literal(ctx, Dtype::F64, 1.0) },
        [&](const std::vector<Var> &s) { return s[0] < n; },
        [&](const std::vector<Var> &s) {
            return std::vector<Var>{ s[0] + u32(ctx, 1), s[1] * x };
        });
    return out[1];
}

const Mode all_modes[] = { Mode::Megakernel, Mode::WavefrontLoops, Mode::Wavefront };

struct Fig4 : Instance {
    Attr s;
    Fig4(Context &c, double v) : Instance(c, "fig4"), s(literal(c, Dtype::F64, v)) {}
    std::vector<Var> f(const std::vector<Var> &a) const {
        Var o1 = a[0] * a[1] * s.get();
        Var o2 = a[0] + 1.0;
        Var o3 = a[1] * s.get() + a[0] * a[2];
        return { o1, o2, o3 };
    }
};

std::vector<Var> call_fig4(Context &ctx, const Var &self, const std::vector<Var> &in) {
    return vcall(ctx, "fig4", "f", self, in, [](Instance *i, const std::vector<Var> &a) {
        return static_cast<Fig4 *>(i)->f(a);
    });
}

// Body depends only on (index mod 5): five distinct code variants
struct ModFive : Instance {
    uint32_t terms;
    Attr w;
    ModFive(Context &c, uint32_t i)
        : Instance(c, "mod5"), terms(i % 5 + 1), w(literal(c, Dtype::F64, 1.0 + i)) {}
    Var f(const Var &x) const {
        Var acc = x;
        for (uint32_t k = 1; k < terms; ++k)
            acc = acc * x + (double) k;
        return acc * w.get();
    }
};

struct Phong : Instance {
    Attr exponent, table;
    Phong(Context &c, double e, const std::vector<double> &tex)
        : Instance(c, "phong"), exponent(literal(c, Dtype::F64, e)),
          table(from_host(c, Dtype::F64, tex)) {}
    Var eval(const Var &cosine, const Var &k) const {
        return exp(log(cosine) * exponent.get()) + gather(table.get(), k);
    }
};

struct Recursive : Instance {
    Recursive(Context &c) : Instance(c, "rec") {}
    std::vector<Var> f(const Var &self, const std::vector<Var> &a) {
        Context &c = *a[0].ctx();
        return vcall(c, "rec", "f", self, a, [self](Instance *i, const std::vector<Var> &x) {
            return static_cast<Recursive *>(i)->f(self, x);
        });
    }
};

struct Mutator : Instance {
    Attr a;
    Mutator(Context &c) : Instance(c, "mut"), a(literal(c, Dtype::F64, 1.0)) {}
    std::vector<Var> f(const std::vector<Var> &x) {
        a.set(x[0]);
        return { x[0] };
    }
};

} // namespace

TEST(ControlFlow, PowLoop) {
    for (Mode m : all_modes) {
        Context ctx({}, m);
        Var r = pow_loop(ctx, literal(ctx, Dtype::F64, 2.0), u32(ctx, 3));
        double oracle = 1;
        for (int i = 0; i < 3; ++i)
            oracle *= 2.0;
        EXPECT_EQ(r.to_host(), std::vector<double>{ oracle });
    }
}

TEST(ControlFlow, ZeroIterationsReturnEntryState) {
    for (Mode m : all_modes) {
        Context ctx({}, m);
        Var start = from_host(ctx, Dtype::U32, { 9, 12, 40 });
        auto out = counter_loop(ctx, start, 5);
        EXPECT_EQ(out[0].to_host(), (std::vector<double>{ 9, 12, 40 }));
    }
}

TEST(ControlFlow, PerLaneCounter) {
    for (Mode m : all_modes) {
        Context ctx({}, m);
        auto out = counter_loop(ctx, index(ctx, 8), 5);
        std::vector<double> oracle;
        for (uint32_t s = 0; s < 8; ++s) {
            uint32_t i = s;
            while (i < 5)
                ++i;
            oracle.push_back(i);
        }
        EXPECT_EQ(out[0].to_host(), oracle);
    }
}

TEST(ControlFlow, RecordedLoopIsOneKernel) {
    Context ctx;
    Var r = pow_loop(ctx, cast(index(ctx, 16), Dtype::F64), u32(ctx, 7));
    r.eval();
    EXPECT_EQ(ctx.stats().kernels_launched, 1u);
    EXPECT_EQ(ctx.stats().loop_kernels, 1u);
}

TEST(ControlFlow, UnusedAndInvariantStateIsRemoved) {
    auto run = [](bool opt) {
        Flags f;
        f.loop_state = opt;
        Context ctx(f);
        Var x = cast(index(ctx, 32), Dtype::F64);
        Var inv = x * 0.5;
        auto out = loop(
            ctx, "L", { u32(ctx, 0), x, inv, x * 2.0 },
            [&](const std::vector<Var> &s) { return s[0] < u32(ctx, 6); },
            [&](const std::vector<Var> &s) {
                return std::vector<Var>{ s[0] + u32(ctx, 1), s[1] * 0.9 + s[2], s[2],
                                         s[3] + s[1] };
            });
        auto v = out[1].to_host();
        return std::make_pair(v, ctx.stats());
    };
    auto [ref, st_off] = run(false);
    auto [opt, st_on] = run(true);
    EXPECT_EQ(ref, opt);
    EXPECT_EQ(st_on.loop_state_before, st_off.loop_state_before);
    EXPECT_LT(st_on.loop_state_after, st_on.loop_state_before);
    EXPECT_LT(st_on.loop_state_after, st_off.loop_state_after);
}

TEST(ControlFlow, StateTypeChangeIsAnError) {
    Context ctx;
    EXPECT_THROW(loop(
                     ctx, "bad", { u32(ctx, 0), literal(ctx, Dtype::F64, 1.0, 4) },
                     [&](const std::vector<Var> &s) { return s[0] < u32(ctx, 3); },
                     [&](const std::vector<Var> &s) {
                         return std::vector<Var>{ s[0] + u32(ctx, 1), cast(s[1], Dtype::F32) };
                     }),
                 StructuralError);
}

TEST(ControlFlow, EvalInsideRecordedBodyIsAModeError) {
    Context ctx;
    EXPECT_THROW(loop(
                     ctx, "bad", { index(ctx, 4) },
                     [&](const std::vector<Var> &s) { return s[0] < u32(ctx, 3); },
                     [&](const std::vector<Var> &s) {
                         Var n = s[0] + u32(ctx, 1);
                         n.eval();
                         return std::vector<Var>{ n };
                     }),
                 ModeError);
    // still usable afterwards
    EXPECT_EQ(counter_loop(ctx, index(ctx, 2), 2)[0].to_host(), (std::vector<double>{ 2, 2 }));
}

TEST(ControlFlow, EvalInsideWavefrontBodyIsAllowed) {
    Context ctx({}, Mode::WavefrontLoops);
    auto out = loop(
        ctx, "ok", { index(ctx, 4) }, [&](const std::vector<Var> &s) { return s[0] < u32(ctx, 3); },
        [&](const std::vector<Var> &s) {
            Var n = s[0] + u32(ctx, 1);
            n.eval();
            return std::vector<Var>{ n };
        });
    EXPECT_EQ(out[0].to_host(), (std::vector<double>{ 3, 3, 3, 3 }));
}

// Random loops of up to four state variables against a per-lane host interpreter
TEST(ControlFlow, LoopMatchesScalarInterpreter) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 30; ++trial) {
        uint32_t k = 1 + rng() % 4, lanes = 1 + rng() % 24;
        std::vector<double> mul(k), add(k);
        for (uint32_t j = 0; j < k; ++j) {
            mul[j] = (double) (rng() % 1000) / 1000.0;
            add[j] = (double) (rng() % 1000) / 500.0 - 1.0;
        }
        std::vector<double> trips(lanes);
        for (auto &t : trips)
            t = (double) (rng() % 17);

        std::vector<std::vector<double>> oracle(k, std::vector<double>(lanes));
        for (uint32_t l = 0; l < lanes; ++l) {
            std::vector<double> s(k);
            for (uint32_t j = 0; j < k; ++j)
                s[j] = l * 0.1 + j;
            for (uint32_t it = 0; it < trips[l]; ++it) {
                std::vector<double> n(k);
                for (uint32_t j = 0; j < k; ++j)
                    n[j] = s[j] * mul[j] + std::sin(s[(j + 1) % k]) * add[j];
                s = n;
            }
            for (uint32_t j = 0; j < k; ++j)
                oracle[j][l] = s[j];
        }

        for (Mode m : all_modes) {
            Context ctx({}, m);
            Var lane = cast(index(ctx, lanes), Dtype::F64);
            Var limit = from_host(ctx, Dtype::U32, trips);
            std::vector<Var> st{ u32(ctx, 0) };
            for (uint32_t j = 0; j < k; ++j)
                st.push_back(lane * 0.1 + (double) j);
            auto out = loop(
                ctx, "rand", st, [&](const std::vector<Var> &s) { return s[0] < limit; },
                [&](const std::vector<Var> &s) {
                    std::vector<Var> n{ s[0] + u32(ctx, 1) };
                    for (uint32_t j = 0; j < k; ++j)
                        n.push_back(s[1 + j] * mul[j] + sin(s[1 + (j + 1) % k]) * add[j]);
                    return n;
                });
            for (uint32_t j = 0; j < k; ++j)
                EXPECT_EQ(out[1 + j].to_host(), oracle[j]) << "trial " << trial;
        }
    }
}

TEST(ControlFlow, CallInterfaceOptimization) {
    Context ctx;
    Fig4 a(ctx, 2.0), b(ctx, 3.0);
    Var i1 = cast(index(ctx, 8), Dtype::F64), i2 = sin(i1), i3 = literal(ctx, Dtype::F64, 0.5);
    Var self = index(ctx, 8) % u32(ctx, 2) + u32(ctx, 1);
    auto o = call_fig4(ctx, self, { i1, i2, i3 });
    // the identical output is computed outside the call
    EXPECT_NE(ctx.rec(o[1].id()).op, Op::CallOut);
    EXPECT_EQ(ctx.rec(o[2].id()).op, Op::CallOut);
    Var r = o[1] + o[2];
    auto v = r.to_host();
    const LaunchStats &s = ctx.stats();
    EXPECT_EQ(s.call_inputs_before, 3u);
    EXPECT_EQ(s.call_inputs_after, 2u);
    EXPECT_EQ(s.call_outputs_before, 3u);
    EXPECT_EQ(s.call_outputs_after, 1u);
    EXPECT_EQ(s.subroutines, 1u);
    for (uint32_t l = 0; l < 8; ++l) {
        double x = l, sc = l % 2 ? 3.0 : 2.0;
        EXPECT_EQ(v[l], (x + 1.0) + (std::sin(x) * sc + x * 0.5));
    }
}

TEST(ControlFlow, CallOptimizationsPreserveResults) {
    auto run = [](Flags f) {
        Context ctx(f);
        Fig4 a(ctx, 2.0), b(ctx, -1.5), c(ctx, 0.25);
        Var i1 = cast(index(ctx, 16), Dtype::F64), i2 = cos(i1), i3 = literal(ctx, Dtype::F64, 0.5);
        Var self = index(ctx, 16) % u32(ctx, 4);   // includes null lanes
        auto o = call_fig4(ctx, self, { i1, i2, i3 });
        return (o[0] + o[1] * o[2]).to_host_raw();
    };
    auto ref = run(Flags::none());
    for (uint32_t mask = 0; mask < 128; mask += 3)
        EXPECT_EQ(run(Flags::from_mask(mask)), ref) << "mask " << mask;
}

TEST(ControlFlow, NullLanesProduceZero) {
    for (Mode m : all_modes) {
        Context ctx({}, m);
        Fig4 a(ctx, 2.0);
        Var i1 = cast(index(ctx, 4), Dtype::F64) + 1.0;
        Var self = from_host(ctx, Dtype::U32, { 0, 1, 0, 1 });
        auto o = call_fig4(ctx, self, { i1, i1, i1 });
        for (auto &v : o) {
            auto h = v.to_host();
            EXPECT_EQ(h[0], 0.0);
            EXPECT_EQ(h[2], 0.0);
            EXPECT_NE(h[1], 0.0);
        }
    }
}

TEST(ControlFlow, DeduplicationGivesFiveSubroutines) {
    for (uint32_t n : { 5u, 12u, 40u }) {
        Context ctx;
        std::vector<std::unique_ptr<ModFive>> inst;
        for (uint32_t i = 0; i < n; ++i)
            inst.push_back(std::make_unique<ModFive>(ctx, i));
        Var lane = index(ctx, 256);
        Var self = lane % u32(ctx, n) + u32(ctx, 1);
        Var x = cast(lane, Dtype::F64) * (1.0 / 256);
        auto out = vcall(ctx, "mod5", "f", self, { x }, [](Instance *i, const std::vector<Var> &a) {
            return std::vector<Var>{ static_cast<ModFive *>(i)->f(a[0]) };
        });
        auto v = out[0].to_host();
        EXPECT_EQ(ctx.stats().subroutines, 5u) << "n = " << n;
        for (uint32_t l = 0; l < 256; ++l) {
            const ModFive &m = *inst[l % n];
            double xv = l * (1.0 / 256), acc = xv;
            for (uint32_t k = 1; k < m.terms; ++k)
                acc = acc * xv + (double) k;
            EXPECT_EQ(v[l], acc * (1.0 + l % n));
        }
    }
}

TEST(ControlFlow, SubroutinesBoundedByInstances) {
    Context ctx;
    ModFive a(ctx, 0), b(ctx, 1), c(ctx, 5);
    Var lane = index(ctx, 9);
    auto out = vcall(ctx, "mod5", "f", lane % u32(ctx, 3) + u32(ctx, 1),
                     { cast(lane, Dtype::F64) }, [](Instance *i, const std::vector<Var> &x) {
                         return std::vector<Var>{ static_cast<ModFive *>(i)->f(x[0]) };
                     });
    out[0].eval();
    EXPECT_EQ(ctx.stats().subroutines, 2u);
}

TEST(ControlFlow, SingleInstanceCall) {
    Context ctx;
    ModFive a(ctx, 3);
    Var x = linspace(ctx, Dtype::F64, 0, 1, 5);
    auto out = vcall(ctx, "mod5", "f", literal(ctx, Dtype::U32, 1.0, 5), { x },
                     [](Instance *i, const std::vector<Var> &v) {
                         return std::vector<Var>{ static_cast<ModFive *>(i)->f(v[0]) };
                     });
    auto v = out[0].to_host();
    EXPECT_LE(ctx.stats().subroutines, 1u);
    for (uint32_t l = 0; l < 5; ++l) {
        double xv = l / 4.0, acc = xv;
        for (uint32_t k = 1; k < 4; ++k)
            acc = acc * xv + (double) k;
        EXPECT_EQ(v[l], acc * 4.0);
    }
}

TEST(ControlFlow, ClosuresSeparateCodeFromData) {
    Context ctx;
    Phong p10(ctx, 10, { 0.1, 0.2 }), p50(ctx, 50, { 0.3, 0.4 });
    Var lane = index(ctx, 6);
    Var cosine = cast(lane, Dtype::F64) * 0.1 + 0.4;
    Var k = lane % u32(ctx, 2);
    auto out = vcall(ctx, "phong", "eval", lane % u32(ctx, 2) + u32(ctx, 1), { cosine, k },
                     [](Instance *i, const std::vector<Var> &a) {
                         return std::vector<Var>{ static_cast<Phong *>(i)->eval(a[0], a[1]) };
                     });
    ASSERT_FALSE(ctx.calls().empty());
    const CallRecord c = ctx.calls().back();
    ASSERT_EQ(c.targets.size(), 2u);
    for (auto &t : c.targets) {
        ASSERT_EQ(t.closure.slots.size(), 2u);
        int scalars = 0, arrays = 0;
        for (auto &s : t.closure.slots)
            (s.indirect ? arrays : scalars)++;
        EXPECT_EQ(scalars, 1);
        EXPECT_EQ(arrays, 1);
    }
    EXPECT_EQ(c.targets[0].hash, c.targets[1].hash);
    auto v = out[0].to_host();
    EXPECT_EQ(ctx.stats().subroutines, 1u);

    for (uint32_t l = 0; l < 6; ++l) {
        double cs = l * 0.1 + 0.4, e = l % 2 ? 50 : 10;
        double t = l % 2 ? 0.4 : 0.1;
        EXPECT_EQ(v[l], std::exp(std::log(cs) * e) + t);
    }
}

TEST(ControlFlow, RecursionIsAnError) {
    Context ctx;
    Recursive r(ctx);
    Var self = literal(ctx, Dtype::U32, 1.0, 4);
    EXPECT_THROW(r.f(self, { linspace(ctx, Dtype::F64, 0, 1, 4) }), StructuralError);
}

TEST(ControlFlow, AttributeWriteDuringTraceIsAnError) {
    Context ctx;
    Mutator m(ctx);
    EXPECT_THROW(vcall(ctx, "mut", "f", literal(ctx, Dtype::U32, 1.0, 4),
                       { linspace(ctx, Dtype::F64, 0, 1, 4) },
                       [](Instance *i, const std::vector<Var> &a) {
                           return static_cast<Mutator *>(i)->f(a);
                       }),
                 StructuralError);
}

TEST(ControlFlow, MismatchedSignaturesAreAnError) {
    struct A : Instance {
        int k;
        A(Context &c, int k) : Instance(c, "sig"), k(k) {}
    };
    Context ctx;
    A a(ctx, 1), b(ctx, 2);
    Var x = linspace(ctx, Dtype::F64, 0, 1, 4);
    EXPECT_THROW(vcall(ctx, "sig", "f", index(ctx, 4) % u32(ctx, 2) + u32(ctx, 1), { x },
                       [](Instance *i, const std::vector<Var> &v) {
                           if (static_cast<A *>(i)->k == 1)
                               return std::vector<Var>{ v[0] };
                           return std::vector<Var>{ v[0], v[0] };
                       }),
                 StructuralError);
}

// Random programs: every optimization subset and mode gives the same bits
TEST(ControlFlow, OptimizationSoundnessOnRandomPrograms) {
    for (uint64_t seed = 1; seed <= 12; ++seed) {
        std::vector<double> ref;
        for (Mode m : all_modes)
            for (uint32_t mask = 0; mask < 128; mask += 5) {
                Context ctx(Flags::from_mask(mask), m);
                auto out = fuzz::RandomProgram(seed).run(ctx);
                if (ref.empty())
                    ref = out;
                ASSERT_EQ(out.size(), ref.size());
                for (size_t i = 0; i < out.size(); ++i)
                    ASSERT_EQ(std::bit_cast<uint64_t>(out[i]), std::bit_cast<uint64_t>(ref[i]))
                        << "seed " << seed << " mode " << mode_name(m) << " mask " << mask;
            }
    }
}
