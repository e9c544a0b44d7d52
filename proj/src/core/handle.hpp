#pragma once

#include <functional>
#include <map>
#include <memory>

#include "core/perfdb.hpp"
#include "core/plan_cache.hpp"
#include "core/solver.hpp"

namespace primkit {

struct ConvAlgoPerf {
    ConvAlgo algo;
    std::string solver_name;
    double time_ms;
    std::size_t workspace_bytes;
};

enum class FindEnforce { None, Search };

// Library context: counters, solver registry, perf database, plan cache and
// the clock. Single-threaded per handle; distinct handles are independent.
class Handle {
public:
    Handle();

    OpCounters& counters() { return counters_; }
    PerfDb& perfdb() { return perfdb_; }
    PlanCache& plan_cache() { return *plan_cache_; }
    std::uint64_t rng_seed = 0x5eed;

    // Milliseconds; replaceable for deterministic tests.
    double now_ms() const { return clock_(); }
    void set_clock(std::function<double()> clock) { clock_ = std::move(clock); }
    // Monotone tick clock; makes every timed run take exactly one unit.
    void use_fake_clock();

    void set_cache_dir(const std::filesystem::path& dir);
    FindEnforce find_enforce() const { return find_enforce_; }
    void set_find_enforce(FindEnforce e) { find_enforce_ = e; }

    void register_solver(std::shared_ptr<const Solver> solver);
    const std::vector<std::shared_ptr<const Solver>>& solvers() const {
        return solvers_;
    }
    const Solver* find_solver(const std::string& name) const;

    // Benchmarks all applicable solvers (1 warmup + 5 timed runs, median) and
    // returns records sorted ascending by time. Results are memoized per
    // handle. Solvers whose workspace request exceeds the provided workspace
    // are silently excluded.
    std::vector<ConvAlgoPerf> find_convolution(const ConvProblem& problem,
                                               const Tensor& a,
                                               const Tensor& b,
                                               std::span<std::byte> workspace);

    // Builds (or fetches from the two-level cache) the plan for (problem,
    // solver, config). Null config falls back to the perf-db record, then the
    // solver default.
    std::shared_ptr<const ConvPlan> cached_build(const ConvProblem& problem,
                                                 const Solver& solver,
                                                 const PerfConfig* config);

    // Resolves the config the plan builder would use.
    PerfConfig resolve_config(const ConvProblem& problem,
                              const Solver& solver) const;

    static constexpr int kWarmupRuns = 1;
    static constexpr int kTimedRuns = 5;

private:
    OpCounters counters_;
    PerfDb perfdb_;
    std::shared_ptr<PlanCache> plan_cache_;
    std::vector<std::shared_ptr<const Solver>> solvers_;
    std::function<double()> clock_;
    FindEnforce find_enforce_ = FindEnforce::None;
    std::map<std::string, std::vector<ConvAlgoPerf>> find_memo_;
};

struct TuneResult {
    PerfConfig best;
    std::int64_t evaluations = 0;
};

// Timed grid evaluation with a 2x-of-best early-abort pruning rule; writes
// the winner into the handle's perf database.
TuneResult tune(Handle& handle, const Solver& solver,
                const ConvProblem& problem, std::int64_t budget,
                bool exhaustive = false);

std::int64_t default_tune_budget(const Solver& solver,
                                 const ConvProblem& problem);

}  // namespace primkit
