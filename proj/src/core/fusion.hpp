#pragma once

#include <optional>
#include <string>
#include <vector>

#include "core/conv.hpp"
#include "core/handle.hpp"
#include "core/primitives.hpp"

namespace primkit {

struct FusionOp {
    enum class Kind { ConvForward, Bias, BatchNormInference, Activation };
    Kind kind = Kind::ConvForward;

    // ConvForward: descriptor, static filter shape and the algorithm label
    // the plan is checked against.
    ConvDescriptor conv;
    TensorDescriptor filter_desc;
    ConvAlgo algo = ConvAlgo::Direct;

    // Bias: channel count of the bias vector.
    std::int64_t bias_channels = 0;

    BatchNormMode bn_mode = BatchNormMode::Spatial;

    ActivationKind act;

    static FusionOp conv_forward(ConvDescriptor conv, TensorDescriptor filter,
                                 ConvAlgo algo);
    static FusionOp bias(std::int64_t channels);
    static FusionOp batchnorm_inference(BatchNormMode mode);
    static FusionOp activation(ActivationKind kind);
};

// Numeric bindings supplied after compile; static shapes live in the ops.
struct FusionArgs {
    std::optional<Tensor> filter;
    std::optional<Tensor> bias;
    std::optional<Tensor> bn_gamma, bn_beta, bn_mean, bn_var;
    float bn_epsilon = 1e-5f;
    std::optional<float> act_alpha;
};

class FusionPlan {
public:
    explicit FusionPlan(TensorDescriptor input_desc);

    // Appends an op with eager shape propagation.
    void add_op(FusionOp op);

    const TensorDescriptor& input_desc() const { return input_desc_; }
    const TensorDescriptor& output_desc() const { return cur_desc_; }
    const std::vector<FusionOp>& ops() const { return ops_; }
    bool compiled() const { return compiled_; }

    void set_args(FusionArgs args);
    const FusionArgs& args() const { return args_; }

    // Stable signature of the static plan structure, used as the cache key.
    std::string signature() const;

private:
    friend void fusion_compile(Handle& handle, FusionPlan& plan);
    TensorDescriptor input_desc_;
    TensorDescriptor cur_desc_;
    std::vector<FusionOp> ops_;
    FusionArgs args_;
    bool compiled_ = false;
};

// Constraint specification graph over op-kind states; a plan compiles iff it
// traces a root-to-accepting path whose every edge predicate holds.
class MetadataGraph {
public:
    MetadataGraph();
    // Empty result on acceptance, otherwise the first violated constraint.
    std::optional<std::string> check(const FusionPlan& plan) const;

    using Predicate = std::optional<std::string> (*)(const FusionPlan&,
                                                     std::size_t op_index);
    struct Edge {
        int from;
        int to;
        FusionOp::Kind kind;
        Predicate check;
    };

private:
    std::vector<Edge> edges_;
    std::vector<int> accepting_;
};

const MetadataGraph& fusion_metadata_graph();

// Throws FusionNotSupported with the first violated constraint; caches the
// compiled executor, so re-compiling an identical plan costs no build.
void fusion_compile(Handle& handle, FusionPlan& plan);

// Single fused pass: one buffer round trip regardless of op count.
Tensor fusion_execute(Handle& handle, const FusionPlan& plan,
                      const Tensor& input);

// Reference pipeline running each op separately (one round trip per op).
Tensor fusion_execute_unfused(Handle& handle, const FusionPlan& plan,
                              const Tensor& input);

}  // namespace primkit
