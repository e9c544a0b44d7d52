#pragma once

#include <memory>
#include <string>
#include <vector>

#include "core/problem.hpp"

namespace primkit {

// One tuned parameter choice for a solver. Serialization is comma-joined
// decimal values in declared parameter order.
struct PerfConfig {
    std::string solver_name;
    std::vector<std::pair<std::string, std::int64_t>> params;

    std::string serialize_values() const;
    std::int64_t value(const std::string& name, std::int64_t fallback) const;
    bool operator==(const PerfConfig&) const = default;
};

// Executable plan for one (problem, solver, config) triple. Construction is
// the CPU analog of kernel compilation.
class ConvPlan {
public:
    ConvPlan(ConvProblem problem, ConvAlgo algo, ImplicitGemmTiles tiles);

    const ConvProblem& problem() const { return problem_; }
    ConvAlgo algo() const { return algo_; }
    const ImplicitGemmTiles& tiles() const { return tiles_; }

    // a/b depend on direction: Forward (input, filter), BackwardData
    // (dOutput, filter), BackwardWeights (dOutput, input).
    Tensor run(OpCounters& counters, const Tensor& a, const Tensor& b,
               std::span<std::byte> workspace) const;

private:
    ConvProblem problem_;
    ConvAlgo algo_;
    ImplicitGemmTiles tiles_;
};

// Stateless strategy: applicability predicate, workspace estimate, tuning
// space, plan builder.
class Solver {
public:
    virtual ~Solver() = default;

    virtual std::string name() const = 0;
    virtual ConvAlgo algo() const = 0;
    virtual bool is_tunable() const { return false; }
    virtual bool is_applicable(const ConvProblem& p) const = 0;
    virtual std::size_t workspace_bytes(const ConvProblem& p,
                                        const PerfConfig* config) const = 0;
    virtual PerfConfig default_config(const ConvProblem& p) const;
    // Deterministic, finite, every emitted config valid for p. Throws
    // NotTunable on non-tunable solvers.
    virtual std::vector<PerfConfig> tuning_space(const ConvProblem& p) const;
    // Validity predicate over a parsed config (divisibility/bounds).
    virtual bool config_valid(const ConvProblem& p,
                              const PerfConfig& config) const;
    virtual ConvPlan build_plan(const ConvProblem& p,
                                const PerfConfig* config) const;

    // Reassembles a PerfConfig from its comma-joined serialized values using
    // the declared parameter order.
    PerfConfig config_from_values(const ConvProblem& p,
                                  const std::string& values) const;
};

// Built-in solver set: Im2colGemm, Direct, Winograd, FFT, ImplicitGemm.
std::vector<std::shared_ptr<const Solver>> builtin_solvers();

}  // namespace primkit
