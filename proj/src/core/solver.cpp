#include "core/solver.hpp"

#include <sstream>

namespace primkit {

std::string PerfConfig::serialize_values() const {
    std::ostringstream os;
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (i) os << ',';
        os << params[i].second;
    }
    return os.str();
}

std::int64_t PerfConfig::value(const std::string& name,
                               std::int64_t fallback) const {
    for (const auto& [k, v] : params)
        if (k == name) return v;
    return fallback;
}

ConvPlan::ConvPlan(ConvProblem problem, ConvAlgo algo, ImplicitGemmTiles tiles)
    : problem_(std::move(problem)), algo_(algo), tiles_(tiles) {}

Tensor ConvPlan::run(OpCounters& counters, const Tensor& a, const Tensor& b,
                     std::span<std::byte> workspace) const {
    const ConvDescriptor cv = problem_.conv_desc();
    switch (problem_.direction) {
        case ConvDirection::Forward:
            return conv_forward(counters, algo_, a, b, cv, workspace, tiles_);
        case ConvDirection::BackwardData:
            return conv_backward_data(counters, algo_, a, b, cv,
                                      problem_.input_desc(), workspace);
        case ConvDirection::BackwardWeights:
            return conv_backward_weights(counters, algo_, a, b, cv,
                                         problem_.filter_desc(), workspace);
    }
    throw_error(ErrorCode::InvalidValue, "bad direction");
}

PerfConfig Solver::default_config(const ConvProblem&) const {
    return PerfConfig{name(), {}};
}

std::vector<PerfConfig> Solver::tuning_space(const ConvProblem&) const {
    throw_error(ErrorCode::NotTunable, name() + " is not tunable");
}

bool Solver::config_valid(const ConvProblem&, const PerfConfig& config) const {
    return config.params.empty();
}

ConvPlan Solver::build_plan(const ConvProblem& p, const PerfConfig*) const {
    return ConvPlan(p, algo(), {});
}

PerfConfig Solver::config_from_values(const ConvProblem& p,
                                      const std::string& values) const {
    PerfConfig config = default_config(p);
    if (values.empty()) {
        if (!config.params.empty())
            throw_error(ErrorCode::ParseError, "empty config values for " + name());
        return config;
    }
    std::size_t i = 0;
    std::istringstream is(values);
    std::string tok;
    while (std::getline(is, tok, ',')) {
        if (i >= config.params.size())
            throw_error(ErrorCode::ParseError,
                        "too many config values for " + name());
        try {
            config.params[i].second = std::stoll(tok);
        } catch (const std::exception&) {
            throw_error(ErrorCode::ParseError, "bad config value '" + tok + "'");
        }
        ++i;
    }
    if (i != config.params.size())
        throw_error(ErrorCode::ParseError, "too few config values for " + name());
    return config;
}

namespace {

bool shapes_ok(const ConvProblem& p) {
    try {
        p.output_desc();
        return true;
    } catch (const Error&) {
        return false;
    }
}

class Im2colGemmSolver final : public Solver {
public:
    std::string name() const override { return "Im2colGemm"; }
    ConvAlgo algo() const override { return ConvAlgo::Im2colGemm; }
    bool is_applicable(const ConvProblem& p) const override {
        if (!shapes_ok(p)) return false;
        if (p.mode == ConvMode::Transpose)
            return p.direction == ConvDirection::Forward;
        return true;
    }
    std::size_t workspace_bytes(const ConvProblem& p,
                                const PerfConfig*) const override {
        return conv_workspace_bytes(ConvAlgo::Im2colGemm, p.input_desc(),
                                    p.filter_desc(), p.conv_desc());
    }
};

class DirectSolver final : public Solver {
public:
    std::string name() const override { return "Direct"; }
    ConvAlgo algo() const override { return ConvAlgo::Direct; }
    bool is_applicable(const ConvProblem& p) const override {
        if (!shapes_ok(p)) return false;
        if (p.mode == ConvMode::Transpose)
            return p.direction == ConvDirection::Forward;
        return true;
    }
    std::size_t workspace_bytes(const ConvProblem&,
                                const PerfConfig*) const override {
        return 0;
    }
};

class WinogradSolver final : public Solver {
public:
    std::string name() const override { return "Winograd"; }
    ConvAlgo algo() const override { return ConvAlgo::Winograd; }
    bool is_applicable(const ConvProblem& p) const override {
        return shapes_ok(p) && p.mode == ConvMode::Convolution &&
               p.direction == ConvDirection::Forward && p.y == 3 && p.x == 3 &&
               p.stride_h == 1 && p.stride_w == 1 && p.dilation_h == 1 &&
               p.dilation_w == 1;
    }
    std::size_t workspace_bytes(const ConvProblem&,
                                const PerfConfig*) const override {
        return 0;
    }
};

class FftSolver final : public Solver {
public:
    std::string name() const override { return "FFT"; }
    ConvAlgo algo() const override { return ConvAlgo::FFT; }
    bool is_applicable(const ConvProblem& p) const override {
        return shapes_ok(p) && p.mode == ConvMode::Convolution &&
               p.direction == ConvDirection::Forward && p.stride_h == 1 &&
               p.stride_w == 1 && p.dilation_h == 1 && p.dilation_w == 1;
    }
    std::size_t workspace_bytes(const ConvProblem& p,
                                const PerfConfig*) const override {
        return conv_workspace_bytes(ConvAlgo::FFT, p.input_desc(),
                                    p.filter_desc(), p.conv_desc());
    }
};

class ImplicitGemmSolver final : public Solver {
public:
    std::string name() const override { return "ImplicitGemm"; }
    ConvAlgo algo() const override { return ConvAlgo::ImplicitGemm; }
    bool is_tunable() const override { return true; }

    bool is_applicable(const ConvProblem& p) const override {
        return shapes_ok(p) && p.mode == ConvMode::Convolution &&
               p.direction == ConvDirection::Forward && p.dilation_h == 1 &&
               p.dilation_w == 1;
    }

    std::size_t workspace_bytes(const ConvProblem& p,
                                const PerfConfig* config) const override {
        return conv_workspace_bytes(ConvAlgo::ImplicitGemm, p.input_desc(),
                                    p.filter_desc(), p.conv_desc(),
                                    tiles_of(p, config));
    }

    PerfConfig default_config(const ConvProblem&) const override {
        return PerfConfig{name(),
                          {{"tile_m", 1}, {"tile_n", 1}, {"tile_k", 1}}};
    }

    std::vector<PerfConfig> tuning_space(const ConvProblem& p) const override {
        std::vector<PerfConfig> out;
        for (std::int64_t tm : {1, 2, 4, 8})
            for (std::int64_t tn : {1, 2, 4, 8})
                for (std::int64_t tk : {1, 2, 4}) {
                    PerfConfig c{name(),
                                 {{"tile_m", tm}, {"tile_n", tn}, {"tile_k", tk}}};
                    if (config_valid(p, c)) out.push_back(std::move(c));
                }
        return out;
    }

    bool config_valid(const ConvProblem& p,
                      const PerfConfig& c) const override {
        const auto tiles = tiles_of(p, &c);
        const auto out = p.output_desc();
        const std::int64_t pixels = out.dims[2] * out.dims[3];
        const std::int64_t kg = p.k / p.groups;
        const std::int64_t cg = p.c / p.groups;
        return tiles.tile_m >= 1 && tiles.tile_n >= 1 && tiles.tile_k >= 1 &&
               kg % tiles.tile_m == 0 && pixels % tiles.tile_n == 0 &&
               cg % tiles.tile_k == 0;
    }

    ConvPlan build_plan(const ConvProblem& p,
                        const PerfConfig* config) const override {
        return ConvPlan(p, ConvAlgo::ImplicitGemm, tiles_of(p, config));
    }

private:
    ImplicitGemmTiles tiles_of(const ConvProblem& p,
                               const PerfConfig* config) const {
        const PerfConfig def = default_config(p);
        const PerfConfig& c = config ? *config : def;
        return ImplicitGemmTiles{c.value("tile_m", 1), c.value("tile_n", 1),
                                 c.value("tile_k", 1)};
    }
};

}  // namespace

std::vector<std::shared_ptr<const Solver>> builtin_solvers() {
    return {std::make_shared<Im2colGemmSolver>(),
            std::make_shared<DirectSolver>(),
            std::make_shared<WinogradSolver>(), std::make_shared<FftSolver>(),
            std::make_shared<ImplicitGemmSolver>()};
}

}  // namespace primkit
