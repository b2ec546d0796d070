/*
    tools/tracejit.cpp -- Command line front end: run workloads, sweep
    optimization columns, dump traces, IR and tapes

    Exit status: 0 success, 1 verification failure, 2 usage error
*/

#include "workloads.hpp"

#include <tracejit/render.hpp>

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

using namespace tj;
using namespace tj::bench;

namespace {

constexpr int ExitVerify = 1, ExitUsage = 2;

struct Cli {
    std::string workload, mode = "megakernel", opt = "all", csv, expect;
    WorkloadOptions w;
};

void add_common(CLI::App *sub, Cli &c) {
    sub->add_option("workload", c.workload, "ao, pt, prb, prb-stub-reparam, microloop, microdispatch")
        ->required();
    sub->add_option("--mode", c.mode, "megakernel, wavefront or wavefront-loops");
    sub->add_option("--seed", c.w.seed, "Primal seed (replay uses seed+1)");
    sub->add_option("--scene", c.w.scene, "Scene file (default: built-in box)");
    sub->add_option("--csv", c.csv, "Append stats rows to this CSV file");
    sub->add_option("--width", c.w.width)->check(CLI::PositiveNumber);
    sub->add_option("--height", c.w.height)->check(CLI::PositiveNumber);
    sub->add_option("--spp", c.w.spp)->check(CLI::PositiveNumber);
    sub->add_option("--depth", c.w.depth)->check(CLI::PositiveNumber);
    sub->add_option("-n,--count", c.w.n, "Loop iterations or instance count");
    sub->add_option("--lanes", c.w.lanes)->check(CLI::PositiveNumber);
    sub->add_flag("--unroll", c.w.unroll, "microloop: unroll the loop into the trace");
}

void write_csv(const std::string &path, const std::vector<std::string> &rows) {
    bool fresh = !std::ifstream(path).good();
    std::ofstream f(path, std::ios::app);
    if (!f)
        throw StructuralError("cannot write '" + path + "'");
    if (fresh)
        f << csv_header() << "\n";
    for (auto &r : rows)
        f << r << "\n";
}

void print_stats(const WorkloadResult &r) {
    const LaunchStats &s = r.stats;
    std::cout << "kernels " << s.kernels_launched << "  bytes " << s.bytes() << "  ir_ops "
              << s.ir_ops << "  subroutines " << s.subroutines << "  lowerings " << s.lowerings
              << "  cache_hits " << s.cache_hits << "\n"
              << "checksum " << std::hex << checksum(r.output) << std::dec << "\n";
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{ "tracejit: tracing JIT workloads and benchmarks" };
    app.require_subcommand(1);

    Cli run, sweep;
    std::string pfm;
    CLI::App *run_cmd = app.add_subcommand("run", "Run one workload");
    add_common(run_cmd, run);
    run_cmd->add_option("--opt", run.opt, "Optimizations: comma list of b..h or names, 'all', 'none'");
    run_cmd->add_option("--dump", run.w.dump, "Print a dump after the run")
        ->check(CLI::IsMember({ "trace", "ir", "tape" }));
    run_cmd->add_option("--expect", run.expect, "Expected output checksum (hex)");
    run_cmd->add_option("--out", pfm, "Write the image of a render workload as PFM");

    CLI::App *sweep_cmd = app.add_subcommand("sweep", "Run the cumulative optimization columns a..h");
    add_common(sweep_cmd, sweep);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp &e) {
        return app.exit(e);
    } catch (const CLI::ParseError &e) {
        app.exit(e);
        return ExitUsage;
    }

    try {
        if (*run_cmd) {
            run.w.mode = parse_mode(run.mode);
            run.w.flags = Flags::parse(run.opt);
            WorkloadResult r = run_workload(run.workload, run.w);
            if (!run.w.dump.empty())
                std::cout << r.dump;
            print_stats(r);
            if (!run.csv.empty())
                write_csv(run.csv, { csv_row(run.workload, run.w, "-", r) });
            if (!pfm.empty()) {
                uint32_t np = run.w.width * run.w.height;
                if (r.output.size() < np || run.workload.rfind("micro", 0) == 0)
                    throw StructuralError("--out needs a render workload");
                render::write_pfm(pfm, { r.output.begin(), r.output.begin() + np }, run.w.width,
                                  run.w.height);
            }
            if (!r.verified) {
                std::cerr << "verification failed: " << r.message << "\n";
                return ExitVerify;
            }
            if (!run.expect.empty() && std::stoull(run.expect, nullptr, 16) != checksum(r.output)) {
                std::cerr << "verification failed: checksum differs from " << run.expect << "\n";
                return ExitVerify;
            }
        } else {
            sweep.w.mode = parse_mode(sweep.mode);
            std::vector<std::string> rows;
            uint64_t reference = 0;
            bool mismatch = false;
            std::cout << csv_header() << "\n";
            for (auto &[col, flags] : sweep_columns()) {
                sweep.w.flags = flags;
                WorkloadResult r = run_workload(sweep.workload, sweep.w);
                rows.push_back(csv_row(sweep.workload, sweep.w, col, r));
                std::cout << rows.back() << "\n";
                // optimizations must never change results
                if (col == "a")
                    reference = checksum(r.output);
                else if (checksum(r.output) != reference)
                    mismatch = true;
                mismatch |= !r.verified;
            }
            if (!sweep.csv.empty())
                write_csv(sweep.csv, rows);
            if (mismatch) {
                std::cerr << "verification failed: outputs differ across columns\n";
                return ExitVerify;
            }
        }
    } catch (const StructuralError &e) {
        std::cerr << "error: " << e.what() << "\n";
        return ExitUsage;
    } catch (const std::invalid_argument &e) {
        std::cerr << "error: " << e.what() << "\n";
        return ExitUsage;
    } catch (const Error &e) {
        std::cerr << "error: " << e.what() << "\n";
        return ExitVerify;
    }
    return 0;
}
