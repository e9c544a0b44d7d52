// primkit-driver: benchmark and tuning front end over the primkit C API.
//
// Subcommands:
//   conv    run every applicable convolution solver and report times
//   tune    grid-search tunable solvers, updating a perf database file
//   fusion  compare a fused pipeline against its per-op reference
//
// Reports are CSV by default (one file, path printed on success) or JSON
// with --json. Set PRIMKIT_FAKE_CLOCK=1 for deterministic timing output.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <primkit/primkit.h>

namespace {

constexpr const char* kCsvSchema = "# primkit-report v1";

struct ProblemFlags {
    int64_t n = 1, c = 0, h = 0, w = 0;
    int64_t k = 0, y = 3, x = 3;
    int64_t pad_h = 0, pad_w = 0;
    int64_t stride_h = 1, stride_w = 1;
    int64_t dilation_h = 1, dilation_w = 1;
    int64_t groups = 1;
    int direction = 1;  // 1 forward, 2 backward data, 4 backward weights
};

void add_problem_flags(CLI::App* cmd, ProblemFlags* p, bool with_direction) {
    cmd->add_option("-n", p->n, "batch size");
    cmd->add_option("-c", p->c, "input channels")->required();
    cmd->add_option("-H", p->h, "image height")->required();
    cmd->add_option("-W", p->w, "image width")->required();
    auto* k = cmd->add_option("-k", p->k, "output channels");
    if (with_direction) k->required();
    cmd->add_option("-y", p->y, "filter height");
    cmd->add_option("-x", p->x, "filter width");
    cmd->add_option("-p", p->pad_h, "padding height");
    cmd->add_option("-q", p->pad_w, "padding width");
    cmd->add_option("-u", p->stride_h, "stride height");
    cmd->add_option("-v", p->stride_w, "stride width");
    cmd->add_option("-l", p->dilation_h, "dilation height");
    cmd->add_option("-j", p->dilation_w, "dilation width");
    cmd->add_option("-g", p->groups, "group count");
    if (with_direction)
        cmd->add_option("-F", p->direction,
                        "direction: 1 forward, 2 backward data, 4 backward "
                        "weights");
}

primkit_conv_problem to_problem(const ProblemFlags& f) {
    primkit_conv_problem p;
    std::memset(&p, 0, sizeof(p));
    p.n = f.n;
    p.c = f.c;
    p.h = f.h;
    p.w = f.w;
    p.k = f.k;
    p.y = f.y;
    p.x = f.x;
    p.pad_h = f.pad_h;
    p.pad_w = f.pad_w;
    p.stride_h = f.stride_h;
    p.stride_w = f.stride_w;
    p.dilation_h = f.dilation_h;
    p.dilation_w = f.dilation_w;
    p.groups = f.groups;
    switch (f.direction) {
        case 2: p.direction = PRIMKIT_DIR_BACKWARD_DATA; break;
        case 4: p.direction = PRIMKIT_DIR_BACKWARD_WEIGHTS; break;
        default: p.direction = PRIMKIT_DIR_FORWARD; break;
    }
    p.mode = PRIMKIT_CONV_CONVOLUTION;
    p.etype = PRIMKIT_F32;
    return p;
}

// Fig-style run label: filter, input channels, image, output channels, pads.
std::string label_of(const ProblemFlags& f) {
    std::ostringstream os;
    os << f.y << '-' << f.x << '-' << f.c << '-' << f.h << '-' << f.w << '-'
       << f.k << '-' << f.pad_h << '-' << f.pad_w;
    return os.str();
}

std::string fmt_ms(double ms) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", ms);
    return buf;
}

std::string fmt_ratio(double r) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", r);
    return buf;
}

struct HandleGuard {
    primkit_handle* h = nullptr;
    HandleGuard() {
        if (primkit_handle_create(&h) != PRIMKIT_STATUS_OK) {
            std::cerr << "error: " << primkit_last_error() << "\n";
            std::exit(1);
        }
        if (const char* fake = std::getenv("PRIMKIT_FAKE_CLOCK");
            fake && *fake && std::strcmp(fake, "0") != 0)
            primkit_handle_use_fake_clock(h);
    }
    ~HandleGuard() { primkit_handle_destroy(h); }
};

std::vector<float> random_buf(size_t count, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
    std::vector<float> v(count);
    for (float& f : v) f = dist(rng);
    return v;
}

size_t elem_count(const int64_t dims[4]) {
    return static_cast<size_t>(dims[0] * dims[1] * dims[2] * dims[3]);
}

void write_report(const std::string& path, bool json,
                  const std::vector<std::string>& columns,
                  const std::vector<std::vector<std::string>>& rows) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) {
        std::cerr << "error: cannot write " << path << "\n";
        std::exit(1);
    }
    if (json) {
        nlohmann::ordered_json doc;
        doc["schema"] = "primkit-report v1";
        doc["rows"] = nlohmann::ordered_json::array();
        for (const auto& row : rows) {
            nlohmann::ordered_json obj;
            for (size_t i = 0; i < columns.size(); ++i) obj[columns[i]] = row[i];
            doc["rows"].push_back(obj);
        }
        os << doc.dump(2) << "\n";
    } else {
        os << kCsvSchema << "\n";
        for (size_t i = 0; i < columns.size(); ++i)
            os << (i ? "," : "") << columns[i];
        os << "\n";
        for (const auto& row : rows) {
            for (size_t i = 0; i < row.size(); ++i)
                os << (i ? "," : "") << row[i];
            os << "\n";
        }
    }
    std::cout << path << "\n";
}

int run_conv(const ProblemFlags& flags, const std::string& out_path,
             bool json, uint64_t seed) {
    HandleGuard g;
    const primkit_conv_problem p = to_problem(flags);

    int64_t a_dims[4], b_dims[4];
    {
        // Operand shapes: the result of the "other" direction is the operand
        // of this one; derive both from the forward geometry.
        primkit_conv_problem fwd = p;
        fwd.direction = PRIMKIT_DIR_FORWARD;
        int64_t out_dims[4];
        if (primkit_conv_output_dims(&fwd, out_dims) != PRIMKIT_STATUS_OK) {
            std::cerr << "error: " << primkit_last_error() << "\n";
            return 1;
        }
        const int64_t input[4] = {p.n, p.c, p.h, p.w};
        const int64_t filter[4] = {p.k, p.c / p.groups, p.y, p.x};
        switch (p.direction) {
            case PRIMKIT_DIR_FORWARD:
                std::copy(input, input + 4, a_dims);
                std::copy(filter, filter + 4, b_dims);
                break;
            case PRIMKIT_DIR_BACKWARD_DATA:
                std::copy(out_dims, out_dims + 4, a_dims);
                std::copy(filter, filter + 4, b_dims);
                break;
            default:
                std::copy(out_dims, out_dims + 4, a_dims);
                std::copy(input, input + 4, b_dims);
                break;
        }
    }
    const auto a = random_buf(elem_count(a_dims), seed);
    const auto b = random_buf(elem_count(b_dims), seed + 1);

    // Size the workspace for the hungriest applicable solver.
    size_t workspace = 0;
    int solver_count = 0;
    primkit_solver_count(g.h, &solver_count);
    for (int i = 0; i < solver_count; ++i) {
        char name[64];
        primkit_solver_name(g.h, i, name, sizeof(name));
        int applicable = 0;
        if (primkit_solver_is_applicable(g.h, name, &p, &applicable) !=
                PRIMKIT_STATUS_OK ||
            !applicable)
            continue;
        uint64_t bytes = 0;
        if (primkit_solver_workspace_bytes(g.h, name, &p, &bytes) ==
            PRIMKIT_STATUS_OK)
            workspace = std::max(workspace, static_cast<size_t>(bytes));
    }

    primkit_algo_perf results[16];
    int found = 0;
    const primkit_status st = primkit_find_convolution(
        g.h, &p, a.data(), b.data(), workspace, results, 16, &found);
    if (st != PRIMKIT_STATUS_OK) {
        std::cerr << "error: " << primkit_last_error() << "\n";
        return 1;
    }

    double baseline_ms = 0.0;
    for (int i = 0; i < found; ++i)
        if (std::strcmp(results[i].solver_name, "Im2colGemm") == 0)
            baseline_ms = results[i].time_ms;

    const std::string label = label_of(flags);
    std::vector<std::vector<std::string>> rows;
    for (int i = 0; i < found; ++i) {
        const double speedup =
            baseline_ms > 0.0 ? baseline_ms / results[i].time_ms : 1.0;
        rows.push_back({label, results[i].solver_name,
                        fmt_ms(results[i].time_ms),
                        std::to_string(results[i].workspace_bytes),
                        fmt_ratio(speedup)});
    }
    write_report(out_path, json,
                 {"label", "solver", "median_ms", "workspace_bytes",
                  "speedup_vs_im2colgemm"},
                 rows);
    return 0;
}

int run_tune(const ProblemFlags& flags, const std::string& db_path,
             int64_t budget, bool exhaustive) {
    HandleGuard g;
    const primkit_conv_problem p = to_problem(flags);

    // Fold in any existing records so the save below only adds or updates.
    if (std::ifstream probe(db_path); probe.good()) {
        if (primkit_perfdb_load(g.h, db_path.c_str()) != PRIMKIT_STATUS_OK) {
            std::cerr << "error: " << primkit_last_error() << "\n";
            return 1;
        }
    }

    int solver_count = 0;
    primkit_solver_count(g.h, &solver_count);
    int tuned = 0;
    for (int i = 0; i < solver_count; ++i) {
        char name[64];
        primkit_solver_name(g.h, i, name, sizeof(name));
        int applicable = 0, tunable = 0;
        primkit_solver_is_applicable(g.h, name, &p, &applicable);
        primkit_solver_is_tunable(g.h, name, &tunable);
        if (!applicable || !tunable) continue;
        int64_t evals = 0;
        if (primkit_tune(g.h, &p, name, budget, exhaustive ? 1 : 0, &evals) !=
            PRIMKIT_STATUS_OK) {
            std::cerr << "error: " << primkit_last_error() << "\n";
            return 1;
        }
        ++tuned;
    }
    if (tuned == 0) {
        std::cerr << "warning: no tunable solver applies to this problem; "
                     "database untouched\n";
        return 1;
    }
    if (primkit_perfdb_save(g.h, db_path.c_str()) != PRIMKIT_STATUS_OK) {
        std::cerr << "error: " << primkit_last_error() << "\n";
        return 1;
    }
    std::cout << db_path << "\n";
    return 0;
}

double median5(primkit_handle* h, const std::function<void()>& run) {
    run();  // warmup
    std::vector<double> times;
    for (int i = 0; i < 5; ++i) {
        double t0 = 0.0, t1 = 0.0;
        primkit_handle_now_ms(h, &t0);
        run();
        primkit_handle_now_ms(h, &t1);
        times.push_back(t1 - t0);
    }
    std::sort(times.begin(), times.end());
    return times[2];
}

int run_fusion(const ProblemFlags& flags, const std::string& combo,
               const std::string& algo_name, const std::string& act_name,
               float act_alpha, const std::string& out_path, bool json,
               uint64_t seed) {
    HandleGuard g;

    primkit_conv_algo algo = PRIMKIT_ALGO_DIRECT;
    if (algo_name == "Winograd")
        algo = PRIMKIT_ALGO_WINOGRAD;
    else if (algo_name != "Direct") {
        std::cerr << "error: unknown fusion algorithm '" << algo_name << "'\n";
        return 2;
    }
    primkit_activation act = PRIMKIT_ACT_RELU;
    if (act_name == "leakyrelu") act = PRIMKIT_ACT_LEAKY_RELU;
    else if (act_name == "sigmoid") act = PRIMKIT_ACT_SIGMOID;
    else if (act_name == "tanh") act = PRIMKIT_ACT_TANH;
    else if (act_name != "relu") {
        std::cerr << "error: unknown activation '" << act_name << "'\n";
        return 2;
    }

    primkit_fusion_plan* plan = nullptr;
    const int64_t in_dims[4] = {flags.n, flags.c, flags.h, flags.w};
    if (primkit_fusion_plan_create(in_dims, PRIMKIT_F32, &plan) !=
        PRIMKIT_STATUS_OK) {
        std::cerr << "error: " << primkit_last_error() << "\n";
        return 1;
    }
    const bool has_conv = combo == "CBA" || combo == "CBNA";
    if (has_conv && flags.k <= 0) {
        std::cerr << "error: -k is required for conv fusions\n";
        primkit_fusion_plan_destroy(plan);
        return 2;
    }
    primkit_status st = PRIMKIT_STATUS_OK;
    if (has_conv) {
        const int64_t f_dims[4] = {flags.k, flags.c / flags.groups, flags.y,
                                   flags.x};
        st = primkit_fusion_add_conv(plan, f_dims, flags.pad_h, flags.pad_w,
                                     flags.stride_h, flags.stride_w,
                                     flags.groups, algo);
        if (st == PRIMKIT_STATUS_OK)
            st = primkit_fusion_add_bias(plan, flags.k);
    }
    if (st == PRIMKIT_STATUS_OK && (combo == "CBNA" || combo == "NA"))
        st = primkit_fusion_add_batchnorm(plan, PRIMKIT_BN_SPATIAL);
    if (st == PRIMKIT_STATUS_OK)
        st = primkit_fusion_add_activation(plan, act, act_alpha);
    if (st == PRIMKIT_STATUS_OK) st = primkit_fusion_compile(g.h, plan);
    if (st != PRIMKIT_STATUS_OK) {
        std::cerr << "error: " << primkit_last_error() << "\n";
        primkit_fusion_plan_destroy(plan);
        return 1;
    }

    int64_t odims[4];
    primkit_fusion_output_dims(plan, odims);
    const int64_t bn_c = has_conv ? flags.k : flags.c;
    const auto filter = random_buf(
        static_cast<size_t>(flags.k * (flags.c / flags.groups) * flags.y *
                            flags.x),
        seed);
    const auto bias = random_buf(static_cast<size_t>(flags.k), seed + 1);
    const auto gamma = random_buf(static_cast<size_t>(bn_c), seed + 2);
    const auto beta = random_buf(static_cast<size_t>(bn_c), seed + 3);
    const auto mean = random_buf(static_cast<size_t>(bn_c), seed + 4);
    auto var = random_buf(static_cast<size_t>(bn_c), seed + 5);
    for (float& v : var) v = 1.0f + std::abs(v);
    if (primkit_fusion_set_args(plan, has_conv ? filter.data() : nullptr,
                                has_conv ? bias.data() : nullptr, gamma.data(),
                                beta.data(), mean.data(), var.data(), 1e-5f,
                                nullptr) != PRIMKIT_STATUS_OK) {
        std::cerr << "error: " << primkit_last_error() << "\n";
        primkit_fusion_plan_destroy(plan);
        return 1;
    }

    const auto input = random_buf(elem_count(in_dims), seed + 6);
    std::vector<float> fused_out(elem_count(odims), 0.0f);
    std::vector<float> unfused_out(elem_count(odims), 0.0f);

    primkit_handle_reset_counters(g.h);
    st = primkit_fusion_execute(g.h, plan, input.data(), fused_out.data(), 0);
    primkit_counters fused_ctr;
    primkit_handle_counters(g.h, &fused_ctr);
    if (st == PRIMKIT_STATUS_OK) {
        primkit_handle_reset_counters(g.h);
        st = primkit_fusion_execute(g.h, plan, input.data(),
                                    unfused_out.data(), 1);
    }
    primkit_counters unfused_ctr;
    primkit_handle_counters(g.h, &unfused_ctr);
    if (st != PRIMKIT_STATUS_OK) {
        std::cerr << "error: " << primkit_last_error() << "\n";
        primkit_fusion_plan_destroy(plan);
        return 1;
    }
    for (size_t i = 0; i < fused_out.size(); ++i) {
        const float denom = std::max(1.0f, std::abs(unfused_out[i]));
        if (std::abs(fused_out[i] - unfused_out[i]) / denom > 1e-5f) {
            std::cerr << "error: fused and unfused results diverge at element "
                      << i << "\n";
            primkit_fusion_plan_destroy(plan);
            return 1;
        }
    }

    const double fused_ms = median5(g.h, [&] {
        primkit_fusion_execute(g.h, plan, input.data(), fused_out.data(), 0);
    });
    const double unfused_ms = median5(g.h, [&] {
        primkit_fusion_execute(g.h, plan, input.data(), unfused_out.data(), 1);
    });
    primkit_fusion_plan_destroy(plan);

    const std::string label = label_of(flags);
    const double speedup = fused_ms > 0.0 ? unfused_ms / fused_ms : 1.0;
    std::vector<std::vector<std::string>> rows = {
        {label, combo + "/fused", fmt_ms(fused_ms),
         std::to_string(fused_ctr.buffer_roundtrips), fmt_ratio(speedup)},
        {label, combo + "/unfused", fmt_ms(unfused_ms),
         std::to_string(unfused_ctr.buffer_roundtrips), fmt_ratio(1.0)},
    };
    write_report(out_path, json,
                 {"label", "pipeline", "median_ms", "buffer_roundtrips",
                  "speedup_vs_unfused"},
                 rows);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"primkit benchmark and tuning driver"};
    app.require_subcommand(1);

    ProblemFlags conv_flags;
    std::string conv_out = "report.csv";
    bool conv_json = false;
    uint64_t seed = 1;
    CLI::App* conv = app.add_subcommand("conv", "benchmark conv solvers");
    add_problem_flags(conv, &conv_flags, true);
    conv->add_option("-o,--out", conv_out, "report path");
    conv->add_flag("--json", conv_json, "emit JSON instead of CSV");
    conv->add_option("--seed", seed, "data seed");

    ProblemFlags tune_flags;
    std::string db_path = "perf.db";
    int64_t budget = 0;
    bool exhaustive = false;
    CLI::App* tune = app.add_subcommand("tune", "tune tunable solvers");
    add_problem_flags(tune, &tune_flags, true);
    tune->add_option("--db", db_path, "perf database path");
    tune->add_option("--budget", budget, "evaluation budget (0 = default)");
    tune->add_flag("--exhaustive", exhaustive, "search the full space");

    ProblemFlags fusion_flags;
    std::string combo = "CBA";
    std::string algo_name = "Direct";
    std::string act_name = "relu";
    float act_alpha = 0.01f;
    std::string fusion_out = "fusion.csv";
    bool fusion_json = false;
    uint64_t fusion_seed = 1;
    CLI::App* fusion =
        app.add_subcommand("fusion", "fused vs unfused comparison");
    add_problem_flags(fusion, &fusion_flags, false);
    fusion->add_option("--combo", combo, "CBA, CBNA or NA");
    fusion->add_option("--algo", algo_name, "Direct or Winograd");
    fusion->add_option("--act", act_name, "relu, leakyrelu, sigmoid, tanh");
    fusion->add_option("--alpha", act_alpha, "LeakyReLU slope");
    fusion->add_option("-o,--out", fusion_out, "report path");
    fusion->add_flag("--json", fusion_json, "emit JSON instead of CSV");
    fusion->add_option("--seed", fusion_seed, "data seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {  // --help
            app.exit(e);
            return 0;
        }
        std::cerr << e.what() << "\n\n" << app.help() << "\n";
        return 2;
    }

    const auto valid_direction = [](int d) {
        return d == 1 || d == 2 || d == 4;
    };
    try {
        if ((conv->parsed() && !valid_direction(conv_flags.direction)) ||
            (tune->parsed() && !valid_direction(tune_flags.direction))) {
            std::cerr << "error: -F must be 1, 2 or 4\n\n" << app.help()
                      << "\n";
            return 2;
        }
        if (conv->parsed()) return run_conv(conv_flags, conv_out, conv_json,
                                            seed);
        if (tune->parsed())
            return run_tune(tune_flags, db_path, budget, exhaustive);
        if (fusion->parsed()) {
            if (combo != "CBA" && combo != "CBNA" && combo != "NA") {
                std::cerr << "error: --combo must be CBA, CBNA or NA\n\n"
                          << app.help() << "\n";
                return 2;
            }
            return run_fusion(fusion_flags, combo, algo_name, act_name,
                              act_alpha, fusion_out, fusion_json, fusion_seed);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
