/*
    tools/workloads.hpp -- Benchmark workloads driven by the command line tool
*/

#pragma once

#include <tracejit/context.hpp>

#include <string>
#include <vector>

namespace tj::bench {

struct WorkloadOptions {
    Mode mode = Mode::Megakernel;
    Flags flags;
    uint64_t seed = 1;
    std::string scene;          // empty: built-in scene
    uint32_t width = 32, height = 32, spp = 4, depth = 4;
    uint32_t n = 100;           // loop iterations or instance count
    uint32_t lanes = 1024;
    bool unroll = false;        // microloop: trace the loop body n times
    std::string dump;           // "", "trace", "ir" or "tape"
};

struct WorkloadResult {
    std::vector<double> output;
    LaunchStats stats;
    std::string dump;
    bool verified = true;
    std::string message;        // reason for a verification failure
};

const std::vector<std::string> &workload_names();

/// Throws StructuralError for unknown names or options
WorkloadResult run_workload(const std::string &name, const WorkloadOptions &opt);

/// FNV-1a over the bit patterns of the values
uint64_t checksum(const std::vector<double> &values);

/// Cumulative optimization columns: (a) none, then b, b+c, ..., b..h
std::vector<std::pair<std::string, Flags>> sweep_columns();

/// CSV header and row of the benchmark report
std::string csv_header();
std::string csv_row(const std::string &workload, const WorkloadOptions &opt,
                    const std::string &column, const WorkloadResult &r);

} // namespace tj::bench
