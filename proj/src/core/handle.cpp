#include "core/handle.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <random>
#include <sstream>

namespace primkit {

namespace {

double steady_ms() {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

std::filesystem::path default_cache_dir() {
    if (const char* env = std::getenv("PRIMKIT_CACHE_DIR"); env && *env)
        return env;
    return std::filesystem::temp_directory_path() / "primkit-cache";
}

FindEnforce env_find_enforce() {
    if (const char* env = std::getenv("PRIMKIT_FIND_ENFORCE"); env) {
        if (std::string(env) == "SEARCH") return FindEnforce::Search;
    }
    return FindEnforce::None;
}

Tensor make_random(const TensorDescriptor& desc, std::uint64_t seed) {
    Tensor t(TensorDescriptor::packed(desc.dims, desc.etype));
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
    for (std::int64_t i = 0; i < t.size(); ++i) t.set(i, dist(rng));
    return t;
}

double median5(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
}

std::string plan_descriptor(const ConvProblem& problem, const Solver& solver,
                            const PerfConfig& config) {
    std::ostringstream os;
    os << problem.key() << '\n' << solver.name() << '\n'
       << config.serialize_values() << '\n';
    return os.str();
}

}  // namespace

Handle::Handle()
    : plan_cache_(std::make_shared<PlanCache>(default_cache_dir())),
      solvers_(builtin_solvers()),
      clock_(steady_ms),
      find_enforce_(env_find_enforce()) {}

void Handle::use_fake_clock() {
    auto tick = std::make_shared<double>(0.0);
    clock_ = [tick]() { return (*tick)++; };
}

void Handle::set_cache_dir(const std::filesystem::path& dir) {
    plan_cache_ = std::make_shared<PlanCache>(dir);
}

void Handle::register_solver(std::shared_ptr<const Solver> solver) {
    for (const auto& s : solvers_)
        if (s->name() == solver->name())
            throw_error(ErrorCode::DuplicateSolver,
                        "solver '" + solver->name() + "' already registered");
    solvers_.push_back(std::move(solver));
}

const Solver* Handle::find_solver(const std::string& name) const {
    for (const auto& s : solvers_)
        if (s->name() == name) return s.get();
    return nullptr;
}

PerfConfig Handle::resolve_config(const ConvProblem& problem,
                                  const Solver& solver) const {
    if (auto values = perfdb_.get(problem.key(), solver.name())) {
        try {
            PerfConfig c = solver.config_from_values(problem, *values);
            if (solver.config_valid(problem, c)) return c;
        } catch (const Error&) {
            // stale or foreign record; fall back to the default
        }
    }
    return solver.default_config(problem);
}

std::shared_ptr<const ConvPlan> Handle::cached_build(
    const ConvProblem& problem, const Solver& solver,
    const PerfConfig* config) {
    const PerfConfig resolved =
        config ? *config : resolve_config(problem, solver);
    const std::string key = PlanCache::hash_key(
        problem.key(), solver.name(), resolved.serialize_values());
    auto plan = plan_cache_->get_or_build(
        key, plan_descriptor(problem, solver, resolved),
        [&]() -> std::shared_ptr<void> {
            return std::make_shared<ConvPlan>(
                solver.build_plan(problem, &resolved));
        },
        [&](const std::string&) -> std::shared_ptr<void> {
            // Reassemble the executable from the cached descriptor without a
            // counted build.
            return std::make_shared<ConvPlan>(
                solver.build_plan(problem, &resolved));
        });
    return std::static_pointer_cast<const ConvPlan>(plan);
}

std::vector<ConvAlgoPerf> Handle::find_convolution(
    const ConvProblem& problem, const Tensor& a, const Tensor& b,
    std::span<std::byte> workspace) {
    const std::string memo_key =
        problem.key() + "#ws" + std::to_string(workspace.size());
    if (auto it = find_memo_.find(memo_key); it != find_memo_.end())
        return it->second;

    std::vector<ConvAlgoPerf> results;
    for (const auto& solver : solvers_) {
        if (!solver->is_applicable(problem)) continue;
        if (find_enforce_ == FindEnforce::Search && solver->is_tunable() &&
            !perfdb_.get(problem.key(), solver->name()))
            tune(*this, *solver, problem,
                 default_tune_budget(*solver, problem));
        const PerfConfig config = resolve_config(problem, *solver);
        const std::size_t need = solver->workspace_bytes(problem, &config);
        if (need > workspace.size()) continue;

        auto plan = cached_build(problem, *solver, &config);
        std::vector<double> times;
        for (int run = 0; run < kWarmupRuns + kTimedRuns; ++run) {
            const double t0 = now_ms();
            plan->run(counters_, a, b, workspace);
            const double t1 = now_ms();
            if (run >= kWarmupRuns) times.push_back(t1 - t0);
        }
        results.push_back(ConvAlgoPerf{solver->algo(), solver->name(),
                                       median5(std::move(times)), need});
    }
    if (results.empty())
        throw_error(ErrorCode::NoApplicableSolver,
                    "no applicable solver for " + problem.key());
    std::sort(results.begin(), results.end(),
              [](const ConvAlgoPerf& l, const ConvAlgoPerf& r) {
                  return std::tie(l.time_ms, l.solver_name) <
                         std::tie(r.time_ms, r.solver_name);
              });
    find_memo_[memo_key] = results;
    return results;
}

std::int64_t default_tune_budget(const Solver& solver,
                                 const ConvProblem& problem) {
    const auto grid = solver.tuning_space(problem);
    return std::min<std::int64_t>(static_cast<std::int64_t>(grid.size()), 256);
}

TuneResult tune(Handle& handle, const Solver& solver,
                const ConvProblem& problem, std::int64_t budget,
                bool exhaustive) {
    if (!solver.is_tunable())
        throw_error(ErrorCode::NotTunable, solver.name() + " is not tunable");
    if (budget < 1)
        throw_error(ErrorCode::InvalidValue, "tuning budget must be >= 1");
    auto grid = solver.tuning_space(problem);
    if (grid.empty())
        throw_error(ErrorCode::NoValidConfig,
                    "empty tuning space for " + solver.name());
    if (static_cast<std::int64_t>(grid.size()) > budget)
        grid.resize(static_cast<std::size_t>(budget));

    const Tensor a = make_random(problem.direction == ConvDirection::Forward
                                     ? problem.input_desc()
                                     : problem.output_desc(),
                                 handle.rng_seed);
    const Tensor b = make_random(problem.direction == ConvDirection::BackwardWeights
                                     ? problem.input_desc()
                                     : problem.filter_desc(),
                                 handle.rng_seed + 1);

    TuneResult result;
    double best_median = -1.0;
    std::vector<std::byte> ws;
    for (const auto& config : grid) {
        const ConvPlan plan = solver.build_plan(problem, &config);
        ws.resize(solver.workspace_bytes(problem, &config));
        result.evaluations += 1;
        std::vector<double> times;
        bool pruned = false;
        for (int run = 0; run < Handle::kWarmupRuns + Handle::kTimedRuns;
             ++run) {
            const double t0 = handle.now_ms();
            plan.run(handle.counters(), a, b, ws);
            const double t1 = handle.now_ms();
            if (run < Handle::kWarmupRuns) continue;
            times.push_back(t1 - t0);
            // Pruned search: drop the remaining repetitions once the first
            // timed run exceeds twice the best median so far.
            if (!exhaustive && times.size() == 1 && best_median >= 0.0 &&
                times[0] > 2.0 * best_median) {
                pruned = true;
                break;
            }
        }
        if (pruned) continue;
        const double med = median5(std::move(times));
        if (best_median < 0.0 || med < best_median) {
            best_median = med;
            result.best = config;
        }
    }
    if (best_median < 0.0)
        throw_error(ErrorCode::NoValidConfig, "all configs pruned");
    handle.perfdb().set(problem.key(), solver.name(),
                        result.best.serialize_values());
    return result;
}

}  // namespace primkit
