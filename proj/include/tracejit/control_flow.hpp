/*
    tracejit/control_flow.hpp -- Symbolic loops and polymorphic calls
*/

#pragma once

#include "ops.hpp"

#include <functional>
#include <string>
#include <vector>

namespace tj {

/// Base class of objects that can be the target of a polymorphic call.
/// Instances register with the context under a domain name and receive a
/// dense id starting at 1 (0 denotes "no instance").
class Instance {
public:
    Instance(Context &ctx, std::string domain);
    virtual ~Instance();
    Instance(const Instance &) = delete;
    Instance &operator=(const Instance &) = delete;

    uint32_t instance_id() const { return m_id; }
    const std::string &domain() const { return m_domain; }
    Context &ctx() const { return *m_ctx; }

private:
    Context *m_ctx;
    std::string m_domain;
    uint32_t m_id;
};

/// Instance attribute. Reading it while a call body is being traced turns
/// it into a closure slot of that instance; writing during tracing is an error.
class Attr {
public:
    Attr() = default;
    explicit Attr(Var value);

    Var get() const;
    void set(Var value);
    const Var &raw() const { return m_value; }

private:
    Var m_value;
};

using LoopCond = std::function<Var(const std::vector<Var> &)>;
using LoopBody = std::function<std::vector<Var>(const std::vector<Var> &)>;

/// Run 'body' while 'cond' holds, lane by lane. Depending on the mode the
/// loop is recorded into a single kernel or evaluated one iteration at a time.
std::vector<Var> loop(Context &ctx, const std::string &name, std::vector<Var> state,
                      const LoopCond &cond, const LoopBody &body);

using MethodFn = std::function<std::vector<Var>(Instance *, const std::vector<Var> &)>;

/// Call 'fn' on the instance selected by 'self' (u32 instance ids of
/// 'domain') for every lane. Lanes with id 0 produce zeros.
std::vector<Var> vcall(Context &ctx, const std::string &domain, const std::string &method,
                       const Var &self, const std::vector<Var> &inputs, const MethodFn &fn);

/// Maximum nesting depth of traced polymorphic calls
constexpr size_t max_call_depth = 8;

} // namespace tj
