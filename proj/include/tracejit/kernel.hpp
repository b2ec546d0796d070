/*
    tracejit/kernel.hpp -- Kernel IR, lowered programs, the program cache
    and the chunked virtual machine that executes them.
*/

#pragma once

#include "context.hpp"

#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace tj {

/// One IR instruction. Registers are kernel-global.
struct IrInst {
    Op op = Op::Literal;
    Dtype type = Dtype::F32;       // result type
    Dtype src_type = Dtype::F32;   // operand type (casts, comparisons)
    uint32_t dst = 0;
    std::vector<uint32_t> args;
    std::vector<uint32_t> outs;    // extra results (ray queries)
    uint64_t imm = 0;              // literal payload
    uint32_t aux = 0, aux2 = 0;    // binding slot / loop, call index / reduction
    uint16_t fn = 0;               // handler chosen by lowering (not hashed)
};

using IrBlock = std::vector<IrInst>;

/// Structured loop: phi registers are initialized from 'init', then
/// header -> cond -> body -> results until no lane remains active.
struct IrLoop {
    std::vector<uint32_t> phis, init, results;
    IrBlock header, body;
    uint32_t cond = 0;
};

struct IrSub {
    std::vector<uint32_t> params, rets;
    IrBlock body;
};

/// Indirect call: lanes are dispatched to subroutines by instance id
struct IrCall {
    uint32_t self = 0;
    std::vector<uint32_t> inputs, outs;
    std::vector<int32_t> target_sub;   // instance id -> subroutine (-1: none)
    std::vector<uint32_t> subs;        // subroutines used by this call
};

enum class BindingRole : uint8_t { Input, Output, Target };

struct BindingDesc {
    Dtype dtype = Dtype::F32;
    BindingRole role = BindingRole::Input;
    bool uniform = false;
};

struct KernelIR {
    uint32_t size = 1;
    std::vector<Dtype> regs;
    IrBlock body;
    std::vector<IrLoop> loops;
    std::vector<IrCall> calls;
    std::vector<IrSub> subs;
    std::vector<BindingDesc> bindings;
    uint32_t flags_mask = 0;

    uint32_t new_reg(Dtype t) {
        regs.push_back(t);
        return (uint32_t) regs.size() - 1;
    }

    /// Total number of instructions including nested blocks
    size_t op_count() const;

    /// Content hash over the canonical encoding (handlers excluded)
    uint64_t hash() const;

    /// Human readable listing
    std::string dump() const;

    bool has_loop() const { return !loops.empty(); }
};

/// Hash of an instruction sequence, used for subroutine deduplication.
/// Registers defined inside the block are renumbered by first definition.
uint64_t hash_block(const IrBlock &block, const std::vector<uint32_t> &params,
                    const std::vector<uint32_t> &rets, const KernelIR &ir);

/// Executable form of a kernel: validated IR with resolved handlers
struct Program {
    KernelIR ir;
    uint64_t hash = 0;

    std::string serialize() const;
    static std::optional<Program> deserialize(const std::string &bytes);
};

using ProgramPtr = std::shared_ptr<const Program>;

/// Validate the IR and select handlers. Throws InternalError on malformed IR.
ProgramPtr lower(KernelIR ir);

/// Process-wide cache of lowered programs with an optional on-disk store
class KernelCache {
public:
    static KernelCache &global();

    struct Lookup {
        ProgramPtr program;
        bool hit = false;       // memory or disk
        bool disk_hit = false;
    };

    /// Return a cached program for the IR or lower it
    Lookup get(KernelIR &&ir);

    void set_disk_dir(std::filesystem::path dir);
    const std::filesystem::path &disk_dir() const { return m_dir; }
    void clear_memory();
    size_t size() const;

private:
    mutable std::mutex m_mutex;
    std::unordered_map<uint64_t, ProgramPtr> m_programs;
    std::filesystem::path m_dir;
};

// ---------------------------------------------------------------------
// Ray queries

struct RayQueryHook {
    virtual ~RayQueryHook() = default;

    /// Intersect 'n' rays. Inputs/outputs are arrays of length n; lanes with
    /// active[i] == 0 must be left untouched. With 'shadow' set, only 'hit'
    /// has to be filled.
    virtual void intersect(uint32_t n, const double *o[3], const double *d[3],
                           const double *maxt, const uint8_t *active, bool shadow,
                           uint8_t *hit, double *t, uint32_t *prim, uint32_t *shape,
                           double *u, double *v) const = 0;
};

// ---------------------------------------------------------------------
// Execution

struct LaunchBindings {
    std::vector<BufferPtr> buffers;
    /// closures[call][instance id] = slot payloads (indirect slots hold a
    /// buffer index into 'buffers')
    std::vector<std::vector<std::vector<uint64_t>>> closures;
    const RayQueryHook *ray = nullptr;
};

struct ExecCounters {
    uint64_t bytes_read = 0, bytes_written = 0;
};

/// Run a program over 'ir.size' lanes in chunks of 'width' lanes
ExecCounters execute(const Program &prog, LaunchBindings &bindings, uint32_t width,
                     bool checked);

} // namespace tj
