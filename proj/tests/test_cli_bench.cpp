#include "workloads.hpp"

#include <tracejit/render.hpp>

#include <gtest/gtest.h>

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <map>
#include <fstream>
#include <sstream>
#include <sys/wait.h>
#include <unistd.h>

using namespace tj;
using namespace tj::bench;

namespace {

struct Proc {
    int code = -1;
    std::string out;
};

Proc run_cli(const std::string &args) {
    std::string cmd = std::string(TRACEJIT_CLI) + " " + args + " 2>/dev/null";
    Proc p;
    FILE *f = popen(cmd.c_str(), "r");
    if (!f)
        return p;
    char buf[4096];
    size_t n;
    while ((n = fread(buf, 1, sizeof buf, f)) > 0)
        p.out.append(buf, n);
    int status = pclose(f);
    p.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return p;
}

std::vector<std::string> split(const std::string &s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep))
        out.push_back(item);
    return out;
}

std::string tmp_path(const char *stem) {
    return "/tmp/tracejit_" + std::string(stem) + "_" + std::to_string(getpid());
}

WorkloadOptions small_options(const std::string &name) {
    WorkloadOptions o;
    o.width = o.height = 8;
    o.spp = 2;
    o.depth = 3;
    o.lanes = 64;
    o.n = name == "microdispatch" ? 40 : 20;
    return o;
}

} // namespace

TEST(Workloads, NamesAndUnknown) {
    auto &names = workload_names();
    for (const char *w : { "ao", "pt", "prb", "microloop", "microdispatch" })
        EXPECT_NE(std::find(names.begin(), names.end(), w), names.end()) << w;
    EXPECT_THROW(run_workload("nope", {}), StructuralError);
}

TEST(Workloads, ChecksumIsFnv1aOverBits) {
    // FNV-1a over the 8 bytes of each value, little-endian
    auto oracle = [](const std::vector<double> &v) {
        uint64_t h = 0xcbf29ce484222325ull;
        for (double d : v) {
            uint64_t b;
            std::memcpy(&b, &d, 8);
            for (int i = 0; i < 8; ++i) {
                h ^= (b >> (8 * i)) & 0xff;
                h *= 0x100000001b3ull;
            }
        }
        return h;
    };
    std::vector<double> v{ 0.0, -0.0, 1.5, 1e300 };
    EXPECT_EQ(checksum(v), oracle(v));
    EXPECT_NE(checksum({ 0.0 }), checksum({ -0.0 }));
}

// Optimizations never increase the op count and never change results
TEST(Workloads, SweepColumnsMonotoneAndSound) {
    auto cols = sweep_columns();
    ASSERT_EQ(cols.size(), 8u);
    EXPECT_EQ(cols.front().first, "a");
    for (const std::string name : { "ao", "pt", "prb", "microloop", "microdispatch" }) {
        WorkloadOptions o = small_options(name);
        uint64_t ref = 0;
        uint64_t prev_ops = UINT64_MAX;
        for (auto &[col, flags] : cols) {
            o.flags = flags;
            WorkloadResult r = run_workload(name, o);
            EXPECT_TRUE(r.verified) << name << " " << col << ": " << r.message;
            if (col == "a")
                ref = checksum(r.output);
            EXPECT_EQ(checksum(r.output), ref) << name << " column " << col;
            EXPECT_LE(r.stats.ir_ops, prev_ops) << name << " column " << col;
            prev_ops = r.stats.ir_ops;
        }
    }
}

TEST(Workloads, AllFlagsNeverWorseThanNone) {
    for (const std::string &name : workload_names())
        for (Mode m : { Mode::Megakernel, Mode::Wavefront }) {
            WorkloadOptions o = small_options(name);
            o.mode = m;
            o.flags = Flags::none();
            WorkloadResult none = run_workload(name, o);
            o.flags = Flags();
            WorkloadResult all = run_workload(name, o);
            EXPECT_LE(all.stats.ir_ops, none.stats.ir_ops) << name << " " << mode_name(m);
            EXPECT_EQ(checksum(all.output), checksum(none.output)) << name;
        }
}

TEST(Workloads, WavefrontMovesMoreBytes) {
    for (const std::string name : { "ao", "pt", "prb" }) {
        WorkloadOptions o = small_options(name);
        WorkloadResult mk = run_workload(name, o);
        o.mode = Mode::Wavefront;
        WorkloadResult wf = run_workload(name, o);
        EXPECT_GT(wf.stats.bytes(), mk.stats.bytes()) << name;
        EXPECT_GT(wf.stats.kernels_launched, mk.stats.kernels_launched) << name;
        EXPECT_EQ(checksum(wf.output), checksum(mk.output)) << name;
    }
}

TEST(Workloads, LvnDoesNotChangeResults) {
    for (const std::string &name : workload_names()) {
        WorkloadOptions o = small_options(name);
        WorkloadResult with = run_workload(name, o);
        o.flags = Flags::parse("c,d,e,f,g,h");
        WorkloadResult without = run_workload(name, o);
        EXPECT_EQ(checksum(with.output), checksum(without.output)) << name;
        EXPECT_LE(with.stats.ir_ops, without.stats.ir_ops) << name;
    }
}

TEST(Workloads, DumpsAreStable) {
    for (const char *kind : { "trace", "ir", "tape" }) {
        WorkloadOptions o = small_options("prb");
        o.dump = kind;
        std::string a = run_workload("prb", o).dump;
        std::string b = run_workload("prb", o).dump;
        EXPECT_FALSE(a.empty()) << kind;
        EXPECT_EQ(a, b) << kind;
    }
}

TEST(Workloads, CsvRowMatchesHeader) {
    WorkloadOptions o = small_options("microloop");
    WorkloadResult r = run_workload("microloop", o);
    auto header = split(csv_header(), ',');
    auto row = split(csv_row("microloop", o, "h", r), ',');
    ASSERT_EQ(header.size(), row.size());
    std::map<std::string, std::string> rec;
    for (size_t i = 0; i < header.size(); ++i)
        rec[header[i]] = row[i];
    EXPECT_EQ(rec["workload"], "microloop");
    EXPECT_EQ(rec["column"], "h");
    EXPECT_EQ(rec["kernels_launched"], std::to_string(r.stats.kernels_launched));
    EXPECT_EQ(std::stoull(rec["checksum"], nullptr, 16), checksum(r.output));
    EXPECT_EQ(rec["verified"], "1");
}

TEST(Cli, RunSucceeds) {
    Proc p = run_cli("run ao --width 8 --height 8 --spp 2");
    EXPECT_EQ(p.code, 0);
    EXPECT_NE(p.out.find("kernels 1 "), std::string::npos) << p.out;
    EXPECT_NE(p.out.find("checksum "), std::string::npos);
}

TEST(Cli, UsageErrorsExitTwo) {
    EXPECT_EQ(run_cli("").code, 2);
    EXPECT_EQ(run_cli("run").code, 2);
    EXPECT_EQ(run_cli("run nope").code, 2);
    EXPECT_EQ(run_cli("run ao --mode sideways").code, 2);
    EXPECT_EQ(run_cli("run ao --opt z").code, 2);
    EXPECT_EQ(run_cli("run ao --width 0").code, 2);
    EXPECT_EQ(run_cli("run ao --dump bogus").code, 2);
    EXPECT_EQ(run_cli("run ao --scene /nonexistent.scene").code, 2);
    EXPECT_EQ(run_cli("frobnicate").code, 2);
}

TEST(Cli, ChecksumMismatchExitsOne) {
    Proc ok = run_cli("run microloop --lanes 32 -n 10");
    ASSERT_EQ(ok.code, 0);
    auto pos = ok.out.find("checksum ");
    ASSERT_NE(pos, std::string::npos);
    std::string sum = ok.out.substr(pos + 9, ok.out.find('\n', pos) - pos - 9);
    EXPECT_EQ(run_cli("run microloop --lanes 32 -n 10 --expect " + sum).code, 0);
    EXPECT_EQ(run_cli("run microloop --lanes 32 -n 10 --expect 1234").code, 1);
}

TEST(Cli, SweepWritesCsv) {
    std::string path = tmp_path("sweep") + ".csv";
    std::remove(path.c_str());
    Proc p = run_cli("sweep microdispatch --lanes 64 -n 20 --csv " + path);
    EXPECT_EQ(p.code, 0);
    std::ifstream f(path);
    std::vector<std::string> lines;
    for (std::string l; std::getline(f, l);)
        lines.push_back(l);
    std::remove(path.c_str());
    ASSERT_EQ(lines.size(), 9u);
    EXPECT_EQ(lines[0], csv_header());
    for (size_t i = 1; i < lines.size(); ++i)
        EXPECT_EQ(split(lines[i], ',').size(), split(lines[0], ',').size());
}

TEST(Cli, RenderWritesPfm) {
    std::string path = tmp_path("img") + ".pfm";
    Proc p = run_cli("run pt --width 6 --height 4 --spp 2 --scene " + std::string(TRACEJIT_SCENES) +
                     "/plane.scene --out " + path);
    EXPECT_EQ(p.code, 0);
    uint32_t w = 0, h = 0;
    auto px = render::read_pfm(path, w, h);
    std::remove(path.c_str());
    EXPECT_EQ(w, 6u);
    EXPECT_EQ(h, 4u);
    for (double v : px)
        EXPECT_NEAR(v, 0.6 * 2.0, 1e-6);
    EXPECT_EQ(run_cli("run microloop --out " + path).code, 2);
}

TEST(Cli, DumpToStdout) {
    Proc a = run_cli("run microloop --lanes 16 -n 4 --dump ir");
    Proc b = run_cli("run microloop --lanes 16 -n 4 --dump ir");
    EXPECT_EQ(a.code, 0);
    EXPECT_NE(a.out.find("hash="), std::string::npos);
    EXPECT_EQ(a.out, b.out);
}
