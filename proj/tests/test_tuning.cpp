#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "core/handle.hpp"
#include "test_util.hpp"

using namespace primkit;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const char* tag) {
    static std::uint64_t counter = 0;
    const fs::path dir = fs::temp_directory_path() /
                         ("primkit-test-" + std::string(tag) + "-" +
                          std::to_string(::getpid()) + "-" +
                          std::to_string(counter++));
    fs::remove_all(dir);
    return dir;
}

ConvProblem tunable_problem() {
    ConvProblem p;
    p.n = 1;
    p.c = 4;
    p.h = 6;
    p.w = 6;
    p.k = 4;
    p.y = 3;
    p.x = 3;
    p.pad_h = p.pad_w = 1;
    return p;
}

// Clock whose per-read increment is looked up by config index, assuming
// reads arrive in tune's fixed order (two reads per run, six runs per
// config).
struct ScheduledClock {
    std::vector<double> steps;
    int reads_per_config = 12;
    std::shared_ptr<double> t = std::make_shared<double>(0.0);
    std::shared_ptr<int> reads = std::make_shared<int>(0);

    std::function<double()> fn() const {
        auto steps_copy = steps;
        auto tc = t;
        auto rc = reads;
        const int rpc = reads_per_config;
        return [steps_copy, tc, rc, rpc]() {
            const std::size_t config =
                std::min(static_cast<std::size_t>(*rc / rpc),
                         steps_copy.size() - 1);
            *rc += 1;
            *tc += steps_copy[config];
            return *tc;
        };
    }
};

}  // namespace

TEST_CASE("perfdb set/get and serialization") {
    PerfDb db;
    db.set("32-3-224-224-64-7-7-3-3-2-2-1-1-1-F-C-f32", "ImplicitGemm",
           "8,8,4");
    CHECK(db.get("32-3-224-224-64-7-7-3-3-2-2-1-1-1-F-C-f32", "ImplicitGemm") ==
          "8,8,4");
    CHECK(!db.get("nope", "ImplicitGemm").has_value());
    CHECK(db.serialize() ==
          "32-3-224-224-64-7-7-3-3-2-2-1-1-1-F-C-f32=ImplicitGemm:8,8,4\n");
}

TEST_CASE("perfdb multiple solvers on one key and sorted save") {
    PerfDb db;
    db.set("b-key", "S2", "1");
    db.set("b-key", "S1", "2,3");
    db.set("a-key", "S1", "9");
    const std::string text = db.serialize();
    CHECK(text.find("a-key") < text.find("b-key"));
    CHECK(PerfDb::parse(text) == db);
}

TEST_CASE("perfdb round trip through a file") {
    PerfDb db;
    db.set("1-1-4-4-1-1-1-0-0-1-1-1-1-1-F-C-f32", "ImplicitGemm", "1,1,1");
    db.set("1-1-4-4-1-1-1-0-0-1-1-1-1-1-F-C-f32", "SomeFutureSolver",
           "7,7");  // unknown names are preserved
    const fs::path path = fresh_dir("perfdb") / "perf.db";
    fs::create_directories(path.parent_path());
    db.save(path);
    CHECK(PerfDb::load(path) == db);
    fs::remove_all(path.parent_path());
}

TEST_CASE("perfdb empty round trip and comments") {
    CHECK(PerfDb::parse("").empty());
    const PerfDb db = PerfDb::parse("# comment only\n\n# another\n");
    CHECK(db.empty());
    const PerfDb one = PerfDb::parse("# header\nkey=S:1\n");
    CHECK(one.get("key", "S") == "1");
}

TEST_CASE("perfdb parse errors carry line numbers") {
    try {
        PerfDb::parse("abc");
        FAIL("expected ParseError");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::ParseError);
        CHECK(std::string(e.what()).find("line 1") != std::string::npos);
    }
    try {
        PerfDb::parse("ok=S:1\nbroken-line\n");
        FAIL("expected ParseError");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
    try {
        PerfDb::parse("k=S:1\nk=S:2\n");
        FAIL("expected ParseError on duplicate key");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::ParseError);
        CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
}

TEST_CASE("perfdb load of missing file is IoError") {
    try {
        PerfDb::load("/nonexistent/path/perf.db");
        FAIL("expected IoError");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::IoError);
    }
}

TEST_CASE("tuning space enumeration") {
    Handle h;
    const Solver* ig = h.find_solver("ImplicitGemm");
    CHECK(ig->is_tunable());
    const ConvProblem p = tunable_problem();
    const auto grid = ig->tuning_space(p);
    CHECK(!grid.empty());
    for (const auto& cfg : grid) CHECK(ig->config_valid(p, cfg));
    // Deterministic order.
    const auto again = ig->tuning_space(p);
    REQUIRE(grid.size() == again.size());
    for (std::size_t i = 0; i < grid.size(); ++i) CHECK(grid[i] == again[i]);

    const Solver* direct = h.find_solver("Direct");
    CHECK_FALSE(direct->is_tunable());
    CHECK_THROWS_AS(direct->tuning_space(p), Error);
}

TEST_CASE("tune with budget 1 returns the single evaluated config") {
    Handle h;
    h.use_fake_clock();
    const ConvProblem p = tunable_problem();
    const Solver* ig = h.find_solver("ImplicitGemm");
    const TuneResult r = tune(h, *ig, p, 1);
    CHECK(r.evaluations == 1);
    CHECK(r.best == ig->tuning_space(p).front());
}

TEST_CASE("tune returns the min-time config under a scheduled clock") {
    Handle h;
    const ConvProblem p = tunable_problem();
    const Solver* ig = h.find_solver("ImplicitGemm");
    const auto grid = ig->tuning_space(p);
    REQUIRE(grid.size() >= 3);

    ScheduledClock clock;
    clock.steps.assign(grid.size(), 5.0);
    clock.steps[2] = 1.0;  // third config is fastest
    h.set_clock(clock.fn());
    const TuneResult r = tune(h, *ig, p, static_cast<std::int64_t>(grid.size()),
                              /*exhaustive=*/true);
    CHECK(r.best == grid[2]);
    // Winner lands in the perf database.
    CHECK(h.perfdb().get(p.key(), "ImplicitGemm") ==
          r.best.serialize_values());
}

TEST_CASE("pruned and exhaustive tune agree under a deterministic clock") {
    const ConvProblem p = tunable_problem();
    PerfConfig pruned_best, exhaustive_best;
    {
        Handle h;
        const Solver* ig = h.find_solver("ImplicitGemm");
        ScheduledClock clock;
        clock.steps.assign(ig->tuning_space(p).size(), 4.0);
        clock.steps[1] = 1.0;
        h.set_clock(clock.fn());
        pruned_best = tune(h, *ig, p, 256, false).best;
    }
    {
        Handle h;
        const Solver* ig = h.find_solver("ImplicitGemm");
        ScheduledClock clock;
        clock.steps.assign(ig->tuning_space(p).size(), 4.0);
        clock.steps[1] = 1.0;
        h.set_clock(clock.fn());
        exhaustive_best = tune(h, *ig, p, 256, true).best;
    }
    CHECK(pruned_best == exhaustive_best);
}

TEST_CASE("tune of a non-tunable solver fails") {
    Handle h;
    h.use_fake_clock();
    try {
        tune(h, *h.find_solver("Direct"), tunable_problem(), 8);
        FAIL("expected NotTunable");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::NotTunable);
    }
}

TEST_CASE("stored perf config is used by plan construction") {
    Handle h;
    h.use_fake_clock();
    const ConvProblem p = tunable_problem();
    h.perfdb().set(p.key(), "ImplicitGemm", "2,2,2");
    const PerfConfig cfg =
        h.resolve_config(p, *h.find_solver("ImplicitGemm"));
    CHECK(cfg.value("tile_m", -1) == 2);
    CHECK(cfg.value("tile_n", -1) == 2);
    CHECK(cfg.value("tile_k", -1) == 2);
}

TEST_CASE("invalid stored config falls back to the default") {
    Handle h;
    const ConvProblem p = tunable_problem();  // k=4, so tile_m=3 cannot divide
    h.perfdb().set(p.key(), "ImplicitGemm", "3,1,1");
    const PerfConfig cfg =
        h.resolve_config(p, *h.find_solver("ImplicitGemm"));
    CHECK(cfg == h.find_solver("ImplicitGemm")->default_config(p));
}

TEST_CASE("plan cache: memory, disk and corruption levels") {
    const fs::path dir = fresh_dir("cache");
    const ConvProblem p = tunable_problem();
    Tensor r1, r2;
    std::mt19937_64 rng(55);
    const Tensor a = testutil::random_tensor(p.input_desc().dims, rng);
    const Tensor b = testutil::random_tensor(p.filter_desc().dims, rng);
    std::vector<std::byte> ws(1 << 22);
    {
        Handle h;
        h.set_cache_dir(dir);
        const Solver* s = h.find_solver("Im2colGemm");
        auto plan1 = h.cached_build(p, *s, nullptr);
        CHECK(h.plan_cache().stats().builds == 1);
        auto plan2 = h.cached_build(p, *s, nullptr);
        CHECK(h.plan_cache().stats().builds == 1);
        CHECK(h.plan_cache().stats().memory_hits == 1);
        r1 = plan1->run(h.counters(), a, b, ws);
    }
    {
        // Fresh handle over the same directory: disk hit, no build.
        Handle h;
        h.set_cache_dir(dir);
        const Solver* s = h.find_solver("Im2colGemm");
        auto plan = h.cached_build(p, *s, nullptr);
        CHECK(h.plan_cache().stats().builds == 0);
        CHECK(h.plan_cache().stats().disk_hits == 1);
        r2 = plan->run(h.counters(), a, b, ws);
    }
    // Cached and freshly built plans produce bit-identical tensors.
    REQUIRE(r1.size() == r2.size());
    for (std::int64_t i = 0; i < r1.size(); ++i) CHECK(r1.at(i) == r2.at(i));

    // Corrupt every cache entry; the next build must silently rebuild.
    for (const auto& entry : fs::directory_iterator(dir)) {
        std::ofstream os(entry.path(), std::ios::trunc);
        os << "garbage";
    }
    {
        Handle h;
        h.set_cache_dir(dir);
        const Solver* s = h.find_solver("Im2colGemm");
        CHECK_NOTHROW(h.cached_build(p, *s, nullptr));
        CHECK(h.plan_cache().stats().builds == 1);
        CHECK(h.plan_cache().stats().disk_hits == 0);
    }
    fs::remove_all(dir);
}

TEST_CASE("plan cache degrades to memory-only on unwritable dir") {
    Handle h;
    h.set_cache_dir("/proc/definitely/not/writable");
    const ConvProblem p = tunable_problem();
    const Solver* s = h.find_solver("Direct");
    CHECK_NOTHROW(h.cached_build(p, *s, nullptr));
    CHECK_NOTHROW(h.cached_build(p, *s, nullptr));
    CHECK(h.plan_cache().stats().builds == 1);
}

TEST_CASE("find enforce SEARCH tunes tunable solvers") {
    Handle h;
    h.use_fake_clock();
    h.set_find_enforce(FindEnforce::Search);
    const ConvProblem p = tunable_problem();
    std::mt19937_64 rng(56);
    const Tensor a = testutil::random_tensor(p.input_desc().dims, rng);
    const Tensor b = testutil::random_tensor(p.filter_desc().dims, rng);
    std::vector<std::byte> ws(1 << 22);
    CHECK(!h.perfdb().get(p.key(), "ImplicitGemm").has_value());
    h.find_convolution(p, a, b, ws);
    CHECK(h.perfdb().get(p.key(), "ImplicitGemm").has_value());
}
