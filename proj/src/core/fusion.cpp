#include "core/fusion.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace primkit {

FusionOp FusionOp::conv_forward(ConvDescriptor conv, TensorDescriptor filter,
                                ConvAlgo algo) {
    FusionOp op;
    op.kind = Kind::ConvForward;
    op.conv = conv;
    op.filter_desc = std::move(filter);
    op.algo = algo;
    return op;
}

FusionOp FusionOp::bias(std::int64_t channels) {
    FusionOp op;
    op.kind = Kind::Bias;
    op.bias_channels = channels;
    return op;
}

FusionOp FusionOp::batchnorm_inference(BatchNormMode mode) {
    FusionOp op;
    op.kind = Kind::BatchNormInference;
    op.bn_mode = mode;
    return op;
}

FusionOp FusionOp::activation(ActivationKind kind) {
    FusionOp op;
    op.kind = Kind::Activation;
    op.act = kind;
    return op;
}

FusionPlan::FusionPlan(TensorDescriptor input_desc)
    : input_desc_(input_desc), cur_desc_(std::move(input_desc)) {
    if (input_desc_.rank() != 4)
        throw_error(ErrorCode::InvalidShape, "fusion input must be NCHW");
}

void FusionPlan::add_op(FusionOp op) {
    if (compiled_)
        throw_error(ErrorCode::AlreadyCompiled,
                    "cannot add ops to a compiled plan");
    switch (op.kind) {
        case FusionOp::Kind::ConvForward: {
            if (op.conv.mode != ConvMode::Convolution)
                throw_error(ErrorCode::InvalidValue,
                            "fusion supports convolution mode only");
            cur_desc_ = output_dims(cur_desc_, op.filter_desc, op.conv);
            break;
        }
        case FusionOp::Kind::Bias:
            if (op.bias_channels != cur_desc_.dims[1])
                throw_error(ErrorCode::ShapeMismatch,
                            "bias channel count " +
                                std::to_string(op.bias_channels) +
                                " does not match " +
                                std::to_string(cur_desc_.dims[1]));
            break;
        case FusionOp::Kind::BatchNormInference:
        case FusionOp::Kind::Activation:
            break;
    }
    ops_.push_back(std::move(op));
}

void FusionPlan::set_args(FusionArgs args) { args_ = std::move(args); }

std::string FusionPlan::signature() const {
    std::ostringstream os;
    os << "fusion v1\n";
    for (std::int64_t d : input_desc_.dims) os << d << ' ';
    os << element_type_name(input_desc_.etype) << '\n';
    for (const FusionOp& op : ops_) {
        switch (op.kind) {
            case FusionOp::Kind::ConvForward:
                os << "conv " << conv_algo_name(op.algo);
                for (std::int64_t d : op.filter_desc.dims) os << ' ' << d;
                os << " p" << op.conv.pad_h << ',' << op.conv.pad_w << " s"
                   << op.conv.stride_h << ',' << op.conv.stride_w << " d"
                   << op.conv.dilation_h << ',' << op.conv.dilation_w << " g"
                   << op.conv.group_count;
                break;
            case FusionOp::Kind::Bias:
                os << "bias " << op.bias_channels;
                break;
            case FusionOp::Kind::BatchNormInference:
                os << "bn "
                   << (op.bn_mode == BatchNormMode::Spatial ? "spatial"
                                                            : "peract");
                break;
            case FusionOp::Kind::Activation:
                os << "act " << static_cast<int>(op.act.tag);
                break;
        }
        os << '\n';
    }
    return os.str();
}

namespace {

// Node ids of the constraint graph.
enum State : int {
    kStart = 0,
    kConv = 1,
    kConvBias = 2,
    kConvBiasBn = 3,
    kAcceptCba = 4,    // conv-bias-activation
    kAcceptCbna = 5,   // conv-bias-norm-activation
    kNorm = 6,
    kAcceptNa = 7,     // norm-activation
};

const FusionOp* find_conv(const FusionPlan& plan) {
    for (const FusionOp& op : plan.ops())
        if (op.kind == FusionOp::Kind::ConvForward) return &op;
    return nullptr;
}

std::optional<std::string> square_filter(const FusionOp& conv,
                                         std::int64_t* f) {
    if (conv.filter_desc.dims[2] != conv.filter_desc.dims[3])
        return "fused convolutions require square filters";
    *f = conv.filter_desc.dims[2];
    return std::nullopt;
}

std::optional<std::string> check_conv_entry(const FusionPlan& plan,
                                            std::size_t op_index) {
    const FusionOp& op = plan.ops()[op_index];
    if (op.conv.dilation_h != 1 || op.conv.dilation_w != 1)
        return "fused convolutions do not support dilation";
    if (op.algo != ConvAlgo::Direct && op.algo != ConvAlgo::Winograd)
        return std::string("algorithm ") + conv_algo_name(op.algo) +
               " has no fused variant";
    return std::nullopt;
}

// Conv-bias-activation row constraints; the convolution's shape rules depend
// on the algorithm and, for Winograd, on the stride and channel count.
std::optional<std::string> check_cba_activation(const FusionPlan& plan,
                                                std::size_t op_index) {
    const FusionOp& act = plan.ops()[op_index];
    const FusionOp* conv = find_conv(plan);
    const std::int64_t c =
        plan.input_desc().dims[1] / conv->conv.group_count;
    std::int64_t f = 0;
    if (auto err = square_filter(*conv, &f)) return err;
    const std::int64_t stride = conv->conv.stride_h;
    if (conv->conv.stride_h != conv->conv.stride_w)
        return "fused convolutions require equal strides";

    if (conv->algo == ConvAlgo::Direct) {
        if (f != 1) return "direct conv-bias-activation requires a 1x1 filter";
        if (stride != 1)
            return "direct conv-bias-activation does not support stride";
        if (conv->conv.pad_h != 0 || conv->conv.pad_w != 0)
            return "direct conv-bias-activation does not support padding";
        return std::nullopt;
    }

    // Winograd rows.
    if (plan.input_desc().etype == ElementType::BF16)
        return "bf16 conv-bias-activation supports the direct 1x1 row only";
    if (act.act.tag != ActivationKind::Tag::ReLU &&
        act.act.tag != ActivationKind::Tag::LeakyReLU)
        return "winograd fusion supports ReLU and LeakyReLU activations only";
    if (stride != 1 && stride != 2)
        return "winograd fusion requires stride 1 or 2";
    if (stride == 1) {
        if (f <= 2 && c < 18) return "filters up to 2x2 require c >= 18";
        if (f == 3 && (c < 18 || c % 2 != 0))
            return "3x3 filters require c >= 18 and c even";
        if (f >= 4 && f <= 6 && 4 * c < 18)
            return "4x4 to 6x6 filters require 4c >= 18";
        if (f >= 7 && f <= 9 && 12 * c < 18)
            return "7x7 to 9x9 filters require 12c >= 18";
        if (f >= 10 && f <= 12 && 16 * c < 18)
            return "10x10 to 12x12 filters require 16c >= 18";
    } else {
        if (f == 1 && 2 * c < 18) return "1x1 filters require 2c >= 18";
        if (f >= 2 && f <= 6 && 4 * c < 18)
            return "2x2 to 6x6 filters require 4c >= 18";
        if (f == 7 && 12 * c < 18) return "7x7 filters require 12c >= 18";
        if (f >= 8 && f <= 12 && 16 * c < 18)
            return "8x8 to 12x12 filters require 16c >= 18";
    }
    return std::nullopt;
}

// Conv-bias-norm-activation: direct algorithm, odd filters 3..11, stride and
// padding both in {1,2}.
std::optional<std::string> check_cbna_norm(const FusionPlan& plan,
                                           std::size_t /*op_index*/) {
    const FusionOp* conv = find_conv(plan);
    if (conv->algo != ConvAlgo::Direct)
        return "conv-bias-norm-activation requires the direct algorithm";
    std::int64_t f = 0;
    if (auto err = square_filter(*conv, &f)) return err;
    if (f != 3 && f != 5 && f != 7 && f != 9 && f != 11)
        return "conv-bias-norm-activation requires filter in "
               "{3x3,5x5,7x7,9x9,11x11}";
    if (conv->conv.stride_h != conv->conv.stride_w ||
        conv->conv.stride_h < 1 || conv->conv.stride_h > 2)
        return "conv-bias-norm-activation requires stride in {1,2}";
    if (conv->conv.pad_h != conv->conv.pad_w || conv->conv.pad_h < 1 ||
        conv->conv.pad_h > 2)
        return "conv-bias-norm-activation requires padding in {1,2}";
    return std::nullopt;
}

std::optional<std::string> check_na_norm(const FusionPlan& plan,
                                         std::size_t /*op_index*/) {
    if (plan.input_desc().etype == ElementType::BF16)
        return "norm-activation fusion supports f32 only";
    if (!plan.input_desc().is_packed())
        return "norm-activation fusion: padding not supported";
    return std::nullopt;
}

std::optional<std::string> accept_always(const FusionPlan&, std::size_t) {
    return std::nullopt;
}

}  // namespace

MetadataGraph::MetadataGraph() {
    edges_ = {
        {kStart, kConv, FusionOp::Kind::ConvForward, check_conv_entry},
        {kConv, kConvBias, FusionOp::Kind::Bias, accept_always},
        {kConvBias, kAcceptCba, FusionOp::Kind::Activation,
         check_cba_activation},
        {kConvBias, kConvBiasBn, FusionOp::Kind::BatchNormInference,
         check_cbna_norm},
        {kConvBiasBn, kAcceptCbna, FusionOp::Kind::Activation, accept_always},
        {kStart, kNorm, FusionOp::Kind::BatchNormInference, check_na_norm},
        {kNorm, kAcceptNa, FusionOp::Kind::Activation, accept_always},
    };
    accepting_ = {kAcceptCba, kAcceptCbna, kAcceptNa};
}

std::optional<std::string> MetadataGraph::check(const FusionPlan& plan) const {
    if (plan.ops().empty()) return "empty fusion plan";
    int state = kStart;
    for (std::size_t i = 0; i < plan.ops().size(); ++i) {
        const Edge* match = nullptr;
        for (const Edge& e : edges_)
            if (e.from == state && e.kind == plan.ops()[i].kind) {
                match = &e;
                break;
            }
        if (!match)
            return "op sequence not in the supported fusion table";
        if (auto err = match->check(plan, i)) return err;
        state = match->to;
    }
    for (int a : accepting_)
        if (a == state) return std::nullopt;
    return "op sequence is a prefix of a supported fusion, not a complete one";
}

const MetadataGraph& fusion_metadata_graph() {
    static const MetadataGraph graph;
    return graph;
}

void fusion_compile(Handle& handle, FusionPlan& plan) {
    if (plan.compiled_) return;
    if (auto violated = fusion_metadata_graph().check(plan))
        throw_error(ErrorCode::FusionNotSupported, *violated);
    const std::string sig = plan.signature();
    const std::string key = PlanCache::hash_key(sig, "fused", "");
    handle.plan_cache().get_or_build(
        key, sig,
        [&]() -> std::shared_ptr<void> {
            return std::make_shared<std::string>(sig);
        },
        [&](const std::string& body) -> std::shared_ptr<void> {
            return std::make_shared<std::string>(body);
        });
    plan.compiled_ = true;
}

namespace {

void require_args(const FusionPlan& plan) {
    const FusionArgs& args = plan.args();
    for (const FusionOp& op : plan.ops()) {
        switch (op.kind) {
            case FusionOp::Kind::ConvForward:
                if (!args.filter)
                    throw_error(ErrorCode::MissingArgs, "filter not bound");
                if (args.filter->desc().dims != op.filter_desc.dims)
                    throw_error(ErrorCode::ShapeMismatch,
                                "bound filter shape mismatch");
                break;
            case FusionOp::Kind::Bias:
                if (!args.bias)
                    throw_error(ErrorCode::MissingArgs, "bias not bound");
                if (args.bias->size() != op.bias_channels)
                    throw_error(ErrorCode::ShapeMismatch,
                                "bound bias length mismatch");
                break;
            case FusionOp::Kind::BatchNormInference:
                if (!args.bn_gamma || !args.bn_beta || !args.bn_mean ||
                    !args.bn_var)
                    throw_error(ErrorCode::MissingArgs,
                                "batchnorm parameters not bound");
                break;
            case FusionOp::Kind::Activation:
                break;
        }
    }
}

ActivationKind effective_act(const FusionPlan& plan, const FusionOp& op) {
    ActivationKind act = op.act;
    if (plan.args().act_alpha) act.alpha = *plan.args().act_alpha;
    return act;
}

// BN parameter index for channel k at spatial (oh, ow).
std::int64_t bn_index(BatchNormMode mode, const TensorDescriptor& shape,
                      std::int64_t k, std::int64_t oh, std::int64_t ow) {
    if (mode == BatchNormMode::Spatial) return k;
    return (k * shape.dims[2] + oh) * shape.dims[3] + ow;
}

}  // namespace

Tensor fusion_execute(Handle& handle, const FusionPlan& plan,
                      const Tensor& input) {
    if (!plan.compiled())
        throw_error(ErrorCode::NotCompiled, "fusion plan is not compiled");
    require_args(plan);
    if (input.desc().dims != plan.input_desc().dims)
        throw_error(ErrorCode::ShapeMismatch, "input shape mismatch");
    OpCounters& ctr = handle.counters();
    const FusionArgs& args = plan.args();

    Tensor out(TensorDescriptor::packed(plan.output_desc().dims,
                                        plan.input_desc().etype));
    const auto& odims = out.desc().dims;
    const FusionOp* conv = find_conv(plan);

    if (conv) {
        const std::int64_t n_count = input.dims()[0], c = input.dims()[1],
                           h = input.dims()[2], w = input.dims()[3];
        const std::int64_t k_count = odims[1], oh_count = odims[2],
                           ow_count = odims[3];
        const std::int64_t groups = conv->conv.group_count;
        const std::int64_t cg = c / groups, kg = k_count / groups;
        const std::int64_t fy = conv->filter_desc.dims[2],
                           fx = conv->filter_desc.dims[3];
        const float* filter = args.filter->data();
        for (std::int64_t n = 0; n < n_count; ++n)
            for (std::int64_t k = 0; k < k_count; ++k)
                for (std::int64_t oh = 0; oh < oh_count; ++oh)
                    for (std::int64_t ow = 0; ow < ow_count; ++ow) {
                        const std::int64_t g = k / kg;
                        float acc = 0.0f;
                        for (std::int64_t ci = 0; ci < cg; ++ci)
                            for (std::int64_t y = 0; y < fy; ++y)
                                for (std::int64_t x = 0; x < fx; ++x) {
                                    const std::int64_t ih =
                                        oh * conv->conv.stride_h - conv->conv.pad_h + y;
                                    const std::int64_t iw =
                                        ow * conv->conv.stride_w - conv->conv.pad_w + x;
                                    if (ih < 0 || ih >= h || iw < 0 || iw >= w)
                                        continue;
                                    acc += input.at(((n * c + g * cg + ci) * h + ih) * w + iw) *
                                           filter[((k * cg + ci) * fy + y) * fx + x];
                                    ctr.scalar_muls += 1;
                                }
                        // Epilogue in registers: bias, normalization and
                        // activation before the single store.
                        for (const FusionOp& op : plan.ops()) {
                            if (op.kind == FusionOp::Kind::Bias)
                                acc += args.bias->at(k);
                            else if (op.kind == FusionOp::Kind::BatchNormInference) {
                                const std::int64_t bi = bn_index(
                                    op.bn_mode, out.desc(), k, oh, ow);
                                acc = (acc - args.bn_mean->at(bi)) /
                                          std::sqrt(args.bn_var->at(bi) +
                                                    args.bn_epsilon) *
                                          args.bn_gamma->at(bi) +
                                      args.bn_beta->at(bi);
                            } else if (op.kind == FusionOp::Kind::Activation)
                                acc = activation_apply(effective_act(plan, op),
                                                       acc);
                        }
                        out.set(((n * k_count + k) * oh_count + oh) * ow_count + ow,
                                acc);
                    }
    } else {
        // Norm-activation: elementwise over the input.
        const std::int64_t n_count = input.dims()[0], c = input.dims()[1],
                           h = input.dims()[2], w = input.dims()[3];
        for (std::int64_t n = 0; n < n_count; ++n)
            for (std::int64_t k = 0; k < c; ++k)
                for (std::int64_t oh = 0; oh < h; ++oh)
                    for (std::int64_t ow = 0; ow < w; ++ow) {
                        float acc = input.at(((n * c + k) * h + oh) * w + ow);
                        for (const FusionOp& op : plan.ops()) {
                            if (op.kind == FusionOp::Kind::BatchNormInference) {
                                const std::int64_t bi = bn_index(
                                    op.bn_mode, input.desc(), k, oh, ow);
                                acc = (acc - args.bn_mean->at(bi)) /
                                          std::sqrt(args.bn_var->at(bi) +
                                                    args.bn_epsilon) *
                                          args.bn_gamma->at(bi) +
                                      args.bn_beta->at(bi);
                            } else if (op.kind == FusionOp::Kind::Activation)
                                acc = activation_apply(effective_act(plan, op),
                                                       acc);
                        }
                        out.set(((n * c + k) * h + oh) * w + ow, acc);
                    }
    }
    ctr.buffer_roundtrips += 1;
    return out;
}

Tensor fusion_execute_unfused(Handle& handle, const FusionPlan& plan,
                              const Tensor& input) {
    if (!plan.compiled())
        throw_error(ErrorCode::NotCompiled, "fusion plan is not compiled");
    require_args(plan);
    OpCounters& ctr = handle.counters();
    const FusionArgs& args = plan.args();

    Tensor cur = input;
    for (const FusionOp& op : plan.ops()) {
        switch (op.kind) {
            case FusionOp::Kind::ConvForward: {
                // The table's Winograd label covers shapes the standalone
                // Winograd kernel does not; fall back to the direct kernel
                // for those, the result is identical.
                ConvAlgo algo = op.algo;
                if (algo == ConvAlgo::Winograd &&
                    (op.filter_desc.dims[2] != 3 || op.filter_desc.dims[3] != 3 ||
                     op.conv.stride_h != 1 || op.conv.stride_w != 1))
                    algo = ConvAlgo::Direct;
                std::vector<std::byte> ws(conv_workspace_bytes(
                    algo, cur.desc(), op.filter_desc, op.conv));
                cur = conv_forward(ctr, algo, cur, *args.filter, op.conv, ws);
                break;
            }
            case FusionOp::Kind::Bias: {
                Tensor b(TensorDescriptor::packed({1, op.bias_channels, 1, 1},
                                                  ElementType::F32));
                std::memcpy(b.data(), args.bias->data(),
                            static_cast<std::size_t>(op.bias_channels) *
                                sizeof(float));
                cur = tensor_op(TensorOpKind::Add, 1.0f, cur, 1.0f, b);
                ctr.buffer_roundtrips += 1;
                break;
            }
            case FusionOp::Kind::BatchNormInference: {
                BatchNormParams p;
                p.gamma = *args.bn_gamma;
                p.beta = *args.bn_beta;
                p.running_mean = *args.bn_mean;
                p.running_var = *args.bn_var;
                p.epsilon = args.bn_epsilon;
                cur = batchnorm_forward_infer(op.bn_mode, cur, p);
                ctr.buffer_roundtrips += 1;
                break;
            }
            case FusionOp::Kind::Activation: {
                cur = activation_forward(effective_act(plan, op), cur);
                ctr.buffer_roundtrips += 1;
                break;
            }
        }
    }
    return cur;
}

}  // namespace primkit
