/*
    tests/random_programs.hpp -- Seeded generator of small array programs
    (arithmetic, gathers, loops, polymorphic calls) for equivalence tests
*/

#pragma once

#include <tracejit/control_flow.hpp>
#include <tracejit/ops.hpp>

#include <cmath>
#include <memory>
#include <random>
#include <vector>

namespace tj::fuzz {

// Instances of three code variants; variant 0 appears twice so deduplication
// has something to merge
struct RandomShape : Instance {
    int variant;
    Attr scale;
    Attr table;   // array attribute, read through a gather

    RandomShape(Context &ctx, int variant, double s, const std::vector<double> &tab)
        : Instance(ctx, "rshape"), variant(variant), scale(literal(ctx, Dtype::F64, s)),
          table(from_host(ctx, Dtype::F64, tab)) {}

    std::vector<Var> run(const std::vector<Var> &a) const {
        Context &c = *a[0].ctx();
        Var i1 = a[0], i2 = a[1], i3 = a[2];
        Var o1, o3;
        switch (variant) {
            case 0: o1 = i1 * scale.get() + i3; break;
            case 1: o1 = sin(i1) * i2 - scale.get(); break;
            default: {
                // a loop nested in the body
                std::vector<Var> st{ literal(c, Dtype::U32, 0.0), i1 };
                auto r = loop(
                    c, "inner", st,
                    [&](const std::vector<Var> &s) { return s[0] < literal(c, Dtype::U32, 3.0); },
                    [&](const std::vector<Var> &s) {
                        return std::vector<Var>{ s[0] + literal(c, Dtype::U32, 1.0),
                                                 s[1] * 0.5 + i2 };
                    });
                o1 = r[1] * scale.get();
            }
        }
        Var k = cast(abs(i2) * 3.0, Dtype::U32) % literal(c, Dtype::U32, 4.0);
        o3 = gather(table.get(), k) + i3 * i3;
        Var o2 = i1 + 1.0;   // identical in every variant
        return { o1, o2, o3 };
    }
};

struct RandomProgram {
    uint64_t seed;
    explicit RandomProgram(uint64_t seed) : seed(seed) {}

    /// Build and evaluate the program in 'ctx'; returns the concatenated outputs
    std::vector<double> run(Context &ctx) const {
        std::mt19937_64 rng(seed);
        auto uni = [&](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
        auto pick = [&](size_t n) { return (size_t) (rng() % n); };

        uint32_t n = 1 + (uint32_t) (rng() % 64);
        std::vector<std::unique_ptr<RandomShape>> shapes;
        for (int k = 0; k < 4; ++k)
            shapes.push_back(std::make_unique<RandomShape>(
                ctx, k == 3 ? 0 : k, uni(0.5, 2.0),
                std::vector<double>{ uni(-1, 1), uni(-1, 1), uni(-1, 1), uni(-1, 1) }));

        std::vector<double> host(n);
        for (auto &h : host)
            h = uni(-2, 2);
        std::vector<Var> pool{ from_host(ctx, Dtype::F64, host),
                               cast(index(ctx, n), Dtype::F64) * 0.25,
                               literal(ctx, Dtype::F64, uni(-1, 1)) };
        Var data = from_host(ctx, Dtype::F64, { uni(-1, 1), uni(-1, 1), uni(-1, 1), uni(-1, 1),
                                                uni(-1, 1) });
        auto any = [&]() { return pool[pick(pool.size())]; };

        int steps = 4 + (int) pick(9);
        for (int s = 0; s < steps; ++s) {
            Var a = any(), b = any(), r;
            switch (pick(11)) {
                case 0: r = a + b; break;
                case 1: r = a * b - 0.5; break;
                case 2: r = min(a, b) + max(a, b * 0.25); break;
                case 3: r = sin(a) + cos(b); break;
                case 4: r = a / (abs(b) + 1.0); break;
                case 5: r = sqrt(abs(a)) + exp(min(b, literal(ctx, Dtype::F64, 2.0))); break;
                case 6: r = select(a < b, a * 2.0, b - 1.0); break;
                case 7: r = fma(a, b, any()); break;
                case 8: {
                    Var k = cast(abs(a) * 7.0, Dtype::U32) % literal(ctx, Dtype::U32, 5.0);
                    r = gather(data, k) * b;
                    break;
                }
                case 9: {
                    uint32_t trips = 1 + (uint32_t) pick(6);
                    Var start = index(ctx, n) % literal(ctx, Dtype::U32, 3.0);
                    Var w = any();
                    std::vector<Var> st{ start, a, w, b };
                    auto out = loop(
                        ctx, "rloop", st,
                        [&](const std::vector<Var> &s) {
                            return s[0] < literal(ctx, Dtype::U32, trips);
                        },
                        [&](const std::vector<Var> &s) {
                            // s[2] is invariant, s[3] is unread afterwards
                            return std::vector<Var>{ s[0] + literal(ctx, Dtype::U32, 1.0),
                                                     s[1] * 0.75 + sin(s[2]), s[2],
                                                     s[3] + s[1] };
                        });
                    r = out[1];
                    break;
                }
                default: {
                    Var self = (index(ctx, n) + literal(ctx, Dtype::U32, (double) pick(5))) %
                               literal(ctx, Dtype::U32, 5.0);
                    Var lit = literal(ctx, Dtype::F64, uni(-1, 1));
                    auto out = vcall(ctx, "rshape", "run", self, { a, b, lit },
                                     [](Instance *i, const std::vector<Var> &args) {
                                         return static_cast<RandomShape *>(i)->run(args);
                                     });
                    r = pick(2) ? out[0] + out[2] : out[1] * out[2];
                    break;
                }
            }
            pool.push_back(r);
        }
        Var out = pool.back() + pool[pool.size() / 2] * 0.5;
        std::vector<double> res = out.to_host();
        if (res.size() == 1)
            res.resize(n, res[0]);
        return res;
    }
};

} // namespace tj::fuzz
