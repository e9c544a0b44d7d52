#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <random>
#include <unistd.h>

#include "core/fusion.hpp"
#include "test_util.hpp"

using namespace primkit;

namespace {

ConvDescriptor conv_desc(std::int64_t pad, std::int64_t stride,
                         std::int64_t dilation = 1, std::int64_t groups = 1) {
    ConvDescriptor d;
    d.pad_h = d.pad_w = pad;
    d.stride_h = d.stride_w = stride;
    d.dilation_h = d.dilation_w = dilation;
    d.group_count = groups;
    return d;
}

FusionArgs random_args(const FusionPlan& plan, std::mt19937_64& rng) {
    FusionArgs args;
    for (const FusionOp& op : plan.ops()) {
        switch (op.kind) {
            case FusionOp::Kind::ConvForward:
                args.filter = testutil::random_tensor(op.filter_desc.dims, rng,
                                                      plan.input_desc().etype);
                break;
            case FusionOp::Kind::Bias:
                args.bias = testutil::random_tensor({op.bias_channels}, rng);
                break;
            case FusionOp::Kind::BatchNormInference: {
                const std::int64_t c = plan.output_desc().dims[1];
                const std::vector<std::int64_t> shape =
                    op.bn_mode == BatchNormMode::Spatial
                        ? std::vector<std::int64_t>{1, c, 1, 1}
                        : std::vector<std::int64_t>{1, c,
                                                    plan.output_desc().dims[2],
                                                    plan.output_desc().dims[3]};
                args.bn_gamma = testutil::random_tensor(shape, rng,
                                                        ElementType::F32, 0.5f,
                                                        1.5f);
                args.bn_beta = testutil::random_tensor(shape, rng);
                args.bn_mean = testutil::random_tensor(shape, rng);
                args.bn_var = testutil::random_tensor(shape, rng,
                                                      ElementType::F32, 0.5f,
                                                      2.0f);
                break;
            }
            case FusionOp::Kind::Activation:
                break;
        }
    }
    return args;
}

std::optional<std::string> verdict(const FusionPlan& plan) {
    return fusion_metadata_graph().check(plan);
}

}  // namespace

TEST_CASE("plan construction propagates shapes") {
    FusionPlan plan(TensorDescriptor::packed({2, 4, 8, 8}));
    plan.add_op(FusionOp::conv_forward(conv_desc(1, 1),
                                       TensorDescriptor::packed({6, 4, 3, 3}),
                                       ConvAlgo::Direct));
    CHECK(plan.output_desc().dims == std::vector<std::int64_t>{2, 6, 8, 8});
    plan.add_op(FusionOp::bias(6));
    try {
        plan.add_op(FusionOp::bias(5));
        FAIL("expected ShapeMismatch");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::ShapeMismatch);
    }
    plan.add_op(FusionOp::batchnorm_inference(BatchNormMode::Spatial));
    plan.add_op(FusionOp::activation(ActivationKind::relu()));

    Handle h;
    fusion_compile(h, plan);
    try {
        plan.add_op(FusionOp::activation(ActivationKind::relu()));
        FAIL("expected AlreadyCompiled");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::AlreadyCompiled);
    }
}

TEST_CASE("winograd conv-bias-activation channel rules") {
    const auto make = [](std::int64_t c, std::int64_t f, std::int64_t stride,
                         ActivationKind act) {
        FusionPlan plan(TensorDescriptor::packed({1, c, 24, 24}));
        plan.add_op(FusionOp::conv_forward(
            conv_desc(0, stride), TensorDescriptor::packed({4, c, f, f}),
            ConvAlgo::Winograd));
        plan.add_op(FusionOp::bias(4));
        plan.add_op(FusionOp::activation(act));
        return plan;
    };

    auto accept = make(18, 3, 1, ActivationKind::relu());
    CHECK(!verdict(accept).has_value());

    auto odd = make(19, 3, 1, ActivationKind::relu());
    const auto err = verdict(odd);
    REQUIRE(err.has_value());
    CHECK(err->find("c >= 18") != std::string::npos);

    auto thin = make(17, 3, 1, ActivationKind::relu());
    CHECK(verdict(thin).has_value());

    // Larger filters relax the requirement: 4c >= 18 for 4x4..6x6.
    CHECK(!verdict(make(5, 5, 1, ActivationKind::leaky_relu(0.1f))).has_value());
    CHECK(verdict(make(4, 5, 1, ActivationKind::relu())).has_value());
    CHECK(!verdict(make(2, 7, 1, ActivationKind::relu())).has_value());
    CHECK(!verdict(make(2, 10, 1, ActivationKind::relu())).has_value());
    CHECK(verdict(make(1, 10, 1, ActivationKind::relu())).has_value());
    CHECK(!verdict(make(1, 13, 1, ActivationKind::relu())).has_value());

    // Stride 2 row.
    CHECK(!verdict(make(9, 1, 2, ActivationKind::relu())).has_value());
    CHECK(verdict(make(8, 1, 2, ActivationKind::relu())).has_value());
    CHECK(!verdict(make(5, 3, 2, ActivationKind::relu())).has_value());

    // Only rectifier activations fuse with the winograd rows.
    CHECK(verdict(make(18, 3, 1, ActivationKind::sigmoid())).has_value());
    CHECK(verdict(make(18, 3, 1, ActivationKind::tanh())).has_value());
}

TEST_CASE("direct conv-bias-activation accepts 1x1 stride 1 only") {
    const auto make = [](std::int64_t f, std::int64_t stride,
                         std::int64_t pad) {
        FusionPlan plan(TensorDescriptor::packed({1, 4, 12, 12}));
        plan.add_op(FusionOp::conv_forward(
            conv_desc(pad, stride), TensorDescriptor::packed({4, 4, f, f}),
            ConvAlgo::Direct));
        plan.add_op(FusionOp::bias(4));
        plan.add_op(FusionOp::activation(ActivationKind::sigmoid()));
        return plan;
    };
    CHECK(!verdict(make(1, 1, 0)).has_value());
    CHECK(verdict(make(3, 1, 0)).has_value());
    CHECK(verdict(make(1, 2, 0)).has_value());
    CHECK(verdict(make(1, 1, 1)).has_value());
}

TEST_CASE("conv-bias-norm-activation filter and stride table") {
    const auto make = [](std::int64_t f, std::int64_t stride, std::int64_t pad,
                         ConvAlgo algo) {
        FusionPlan plan(TensorDescriptor::packed({1, 4, 16, 16}));
        plan.add_op(FusionOp::conv_forward(
            conv_desc(pad, stride), TensorDescriptor::packed({4, 4, f, f}),
            algo));
        plan.add_op(FusionOp::bias(4));
        plan.add_op(FusionOp::batchnorm_inference(BatchNormMode::Spatial));
        plan.add_op(FusionOp::activation(ActivationKind::tanh()));
        return plan;
    };
    for (std::int64_t f : {3, 5, 7, 9, 11})
        CHECK(!verdict(make(f, 1, 1, ConvAlgo::Direct)).has_value());
    CHECK(!verdict(make(5, 2, 2, ConvAlgo::Direct)).has_value());
    CHECK(verdict(make(4, 1, 1, ConvAlgo::Direct)).has_value());
    CHECK(verdict(make(13, 1, 1, ConvAlgo::Direct)).has_value());
    CHECK(verdict(make(3, 3, 1, ConvAlgo::Direct)).has_value());
    CHECK(verdict(make(3, 1, 0, ConvAlgo::Direct)).has_value());
    CHECK(verdict(make(3, 1, 1, ConvAlgo::Winograd)).has_value());
}

TEST_CASE("unsupported algorithms and shapes are rejected at the entry edge") {
    FusionPlan gemm_plan(TensorDescriptor::packed({1, 4, 8, 8}));
    gemm_plan.add_op(FusionOp::conv_forward(
        conv_desc(0, 1), TensorDescriptor::packed({4, 4, 1, 1}),
        ConvAlgo::Im2colGemm));
    gemm_plan.add_op(FusionOp::bias(4));
    gemm_plan.add_op(FusionOp::activation(ActivationKind::relu()));
    const auto err = verdict(gemm_plan);
    REQUIRE(err.has_value());
    CHECK(err->find("Im2colGemm") != std::string::npos);

    FusionPlan dilated(TensorDescriptor::packed({1, 4, 8, 8}));
    dilated.add_op(FusionOp::conv_forward(
        conv_desc(0, 1, 2), TensorDescriptor::packed({4, 4, 1, 1}),
        ConvAlgo::Direct));
    dilated.add_op(FusionOp::bias(4));
    dilated.add_op(FusionOp::activation(ActivationKind::relu()));
    CHECK(verdict(dilated).has_value());
}

TEST_CASE("prefixes and out-of-table sequences are rejected") {
    FusionPlan prefix(TensorDescriptor::packed({1, 4, 8, 8}));
    prefix.add_op(FusionOp::conv_forward(
        conv_desc(0, 1), TensorDescriptor::packed({4, 4, 1, 1}),
        ConvAlgo::Direct));
    prefix.add_op(FusionOp::bias(4));
    const auto err = verdict(prefix);
    REQUIRE(err.has_value());
    CHECK(err->find("prefix") != std::string::npos);

    FusionPlan backwards(TensorDescriptor::packed({1, 4, 8, 8}));
    backwards.add_op(FusionOp::activation(ActivationKind::relu()));
    CHECK(verdict(backwards).has_value());

    FusionPlan empty(TensorDescriptor::packed({1, 4, 8, 8}));
    CHECK(verdict(empty).has_value());

    Handle h;
    try {
        fusion_compile(h, prefix);
        FAIL("expected FusionNotSupported");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::FusionNotSupported);
    }
}

TEST_CASE("norm-activation fusion wants packed f32 input") {
    FusionPlan ok(TensorDescriptor::packed({1, 4, 6, 6}));
    ok.add_op(FusionOp::batchnorm_inference(BatchNormMode::Spatial));
    ok.add_op(FusionOp::activation(ActivationKind::sigmoid()));
    CHECK(!verdict(ok).has_value());

    // Strided (non-packed) input.
    TensorDescriptor strided({1, 4, 6, 6}, {288, 72, 12, 2},
                             ElementType::F32);
    FusionPlan padded(strided);
    padded.add_op(FusionOp::batchnorm_inference(BatchNormMode::Spatial));
    padded.add_op(FusionOp::activation(ActivationKind::sigmoid()));
    const auto err = verdict(padded);
    REQUIRE(err.has_value());
    CHECK(err->find("padding") != std::string::npos);

    FusionPlan bf(TensorDescriptor::packed({1, 4, 6, 6}, ElementType::BF16));
    bf.add_op(FusionOp::batchnorm_inference(BatchNormMode::Spatial));
    bf.add_op(FusionOp::activation(ActivationKind::sigmoid()));
    CHECK(verdict(bf).has_value());
}

TEST_CASE("bf16 plans fuse on the direct rows only") {
    FusionPlan cbna(TensorDescriptor::packed({1, 4, 10, 10},
                                             ElementType::BF16));
    cbna.add_op(FusionOp::conv_forward(
        conv_desc(1, 1), TensorDescriptor::packed({4, 4, 3, 3},
                                                  ElementType::BF16),
        ConvAlgo::Direct));
    cbna.add_op(FusionOp::bias(4));
    cbna.add_op(FusionOp::batchnorm_inference(BatchNormMode::Spatial));
    cbna.add_op(FusionOp::activation(ActivationKind::relu()));
    CHECK(!verdict(cbna).has_value());

    FusionPlan cba1(TensorDescriptor::packed({1, 4, 10, 10},
                                             ElementType::BF16));
    cba1.add_op(FusionOp::conv_forward(
        conv_desc(0, 1), TensorDescriptor::packed({4, 4, 1, 1},
                                                  ElementType::BF16),
        ConvAlgo::Direct));
    cba1.add_op(FusionOp::bias(4));
    cba1.add_op(FusionOp::activation(ActivationKind::relu()));
    CHECK(!verdict(cba1).has_value());

    FusionPlan wino(TensorDescriptor::packed({1, 18, 10, 10},
                                             ElementType::BF16));
    wino.add_op(FusionOp::conv_forward(
        conv_desc(0, 1), TensorDescriptor::packed({4, 18, 3, 3},
                                                  ElementType::BF16),
        ConvAlgo::Winograd));
    wino.add_op(FusionOp::bias(4));
    wino.add_op(FusionOp::activation(ActivationKind::relu()));
    const auto err = verdict(wino);
    REQUIRE(err.has_value());
    CHECK(err->find("bf16") != std::string::npos);
}

TEST_CASE("fused equals unfused with one round trip total") {
    std::mt19937_64 rng(101);
    Handle h;

    // Conv-bias-activation, direct 1x1.
    FusionPlan cba(TensorDescriptor::packed({2, 4, 6, 6}));
    cba.add_op(FusionOp::conv_forward(
        conv_desc(0, 1), TensorDescriptor::packed({5, 4, 1, 1}),
        ConvAlgo::Direct));
    cba.add_op(FusionOp::bias(5));
    cba.add_op(FusionOp::activation(ActivationKind::sigmoid()));
    fusion_compile(h, cba);
    cba.set_args(random_args(cba, rng));
    const Tensor x = testutil::random_tensor({2, 4, 6, 6}, rng);

    h.counters().reset();
    const Tensor fused = fusion_execute(h, cba, x);
    CHECK(h.counters().buffer_roundtrips == 1);
    h.counters().reset();
    const Tensor unfused = fusion_execute_unfused(h, cba, x);
    CHECK(h.counters().buffer_roundtrips == 3);  // one per op
    CHECK(testutil::max_rel_err(fused, unfused) <= 1e-5);
}

TEST_CASE("conv-bias-norm-activation fused equals unfused") {
    std::mt19937_64 rng(102);
    Handle h;
    for (BatchNormMode mode : {BatchNormMode::Spatial,
                               BatchNormMode::PerActivation}) {
        FusionPlan plan(TensorDescriptor::packed({2, 3, 9, 9}));
        plan.add_op(FusionOp::conv_forward(
            conv_desc(1, 1), TensorDescriptor::packed({4, 3, 3, 3}),
            ConvAlgo::Direct));
        plan.add_op(FusionOp::bias(4));
        plan.add_op(FusionOp::batchnorm_inference(mode));
        plan.add_op(FusionOp::activation(ActivationKind::tanh()));
        fusion_compile(h, plan);
        plan.set_args(random_args(plan, rng));
        const Tensor x = testutil::random_tensor({2, 3, 9, 9}, rng);

        h.counters().reset();
        const Tensor fused = fusion_execute(h, plan, x);
        CHECK(h.counters().buffer_roundtrips == 1);
        h.counters().reset();
        const Tensor unfused = fusion_execute_unfused(h, plan, x);
        CHECK(h.counters().buffer_roundtrips == 4);
        CHECK(testutil::max_rel_err(fused, unfused) <= 1e-5);
    }
}

TEST_CASE("winograd-labelled fusion matches the standalone pipeline") {
    std::mt19937_64 rng(103);
    Handle h;
    FusionPlan plan(TensorDescriptor::packed({1, 18, 12, 12}));
    plan.add_op(FusionOp::conv_forward(
        conv_desc(1, 1), TensorDescriptor::packed({6, 18, 3, 3}),
        ConvAlgo::Winograd));
    plan.add_op(FusionOp::bias(6));
    plan.add_op(FusionOp::activation(ActivationKind::leaky_relu(0.2f)));
    fusion_compile(h, plan);
    plan.set_args(random_args(plan, rng));
    const Tensor x = testutil::random_tensor({1, 18, 12, 12}, rng);
    const Tensor fused = fusion_execute(h, plan, x);
    const Tensor unfused = fusion_execute_unfused(h, plan, x);
    CHECK(testutil::max_rel_err(fused, unfused) <= 1e-5);
}

TEST_CASE("norm-activation fused equals unfused") {
    std::mt19937_64 rng(104);
    Handle h;
    FusionPlan plan(TensorDescriptor::packed({2, 5, 4, 4}));
    plan.add_op(FusionOp::batchnorm_inference(BatchNormMode::PerActivation));
    plan.add_op(FusionOp::activation(ActivationKind::relu()));
    fusion_compile(h, plan);
    plan.set_args(random_args(plan, rng));
    const Tensor x = testutil::random_tensor({2, 5, 4, 4}, rng);
    h.counters().reset();
    const Tensor fused = fusion_execute(h, plan, x);
    CHECK(h.counters().buffer_roundtrips == 1);
    h.counters().reset();
    const Tensor unfused = fusion_execute_unfused(h, plan, x);
    CHECK(h.counters().buffer_roundtrips == 2);
    CHECK(testutil::max_rel_err(fused, unfused) <= 1e-5);
}

TEST_CASE("neutral epilogue reduces to the plain convolution") {
    std::mt19937_64 rng(105);
    Handle h;
    FusionPlan plan(TensorDescriptor::packed({1, 4, 5, 5}));
    plan.add_op(FusionOp::conv_forward(
        conv_desc(0, 1), TensorDescriptor::packed({4, 4, 1, 1}),
        ConvAlgo::Direct));
    plan.add_op(FusionOp::bias(4));
    // LeakyReLU with unit slope is the identity.
    plan.add_op(FusionOp::activation(ActivationKind::leaky_relu(1.0f)));
    fusion_compile(h, plan);
    FusionArgs args = random_args(plan, rng);
    args.bias = Tensor::packed({4});  // zero bias
    plan.set_args(std::move(args));

    const Tensor x = testutil::random_tensor({1, 4, 5, 5}, rng);
    const Tensor fused = fusion_execute(h, plan, x);

    ConvDescriptor conv = conv_desc(0, 1);
    std::vector<std::byte> ws;
    const Tensor plain = conv_forward(h.counters(), ConvAlgo::Direct, x,
                                      *plan.args().filter, conv, ws);
    for (std::int64_t i = 0; i < fused.size(); ++i)
        CHECK(fused.at(i) == plain.at(i));
}

TEST_CASE("execution guards: not compiled and missing args") {
    std::mt19937_64 rng(106);
    Handle h;
    FusionPlan plan(TensorDescriptor::packed({1, 4, 5, 5}));
    plan.add_op(FusionOp::conv_forward(
        conv_desc(0, 1), TensorDescriptor::packed({4, 4, 1, 1}),
        ConvAlgo::Direct));
    plan.add_op(FusionOp::bias(4));
    plan.add_op(FusionOp::activation(ActivationKind::relu()));
    const Tensor x = testutil::random_tensor({1, 4, 5, 5}, rng);
    try {
        fusion_execute(h, plan, x);
        FAIL("expected NotCompiled");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::NotCompiled);
    }
    fusion_compile(h, plan);
    try {
        fusion_execute(h, plan, x);  // no args bound
        FAIL("expected MissingArgs");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::MissingArgs);
    }
    FusionArgs partial;
    partial.filter = testutil::random_tensor({4, 4, 1, 1}, rng);
    plan.set_args(std::move(partial));
    try {
        fusion_execute(h, plan, x);
        FAIL("expected MissingArgs for the bias");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::MissingArgs);
    }
}

TEST_CASE("identical plans compile once per handle") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() /
                         ("primkit-test-fusion-cache-" +
                          std::to_string(::getpid()));
    fs::remove_all(dir);
    Handle h;
    h.set_cache_dir(dir);
    const auto build = [] {
        FusionPlan plan(TensorDescriptor::packed({1, 4, 5, 5}));
        plan.add_op(FusionOp::conv_forward(
            conv_desc(0, 1), TensorDescriptor::packed({4, 4, 1, 1}),
            ConvAlgo::Direct));
        plan.add_op(FusionOp::bias(4));
        plan.add_op(FusionOp::activation(ActivationKind::relu()));
        return plan;
    };
    FusionPlan a = build();
    fusion_compile(h, a);
    const auto builds = h.plan_cache().stats().builds;
    FusionPlan b = build();
    fusion_compile(h, b);
    CHECK(h.plan_cache().stats().builds == builds);
    CHECK(h.plan_cache().stats().memory_hits >= 1);

    // A structurally different plan does build.
    FusionPlan c = build();
    FusionPlan d(TensorDescriptor::packed({1, 4, 5, 5}));
    d.add_op(FusionOp::conv_forward(
        conv_desc(0, 1), TensorDescriptor::packed({4, 4, 1, 1}),
        ConvAlgo::Direct));
    d.add_op(FusionOp::bias(4));
    d.add_op(FusionOp::activation(ActivationKind::sigmoid()));
    fusion_compile(h, d);
    CHECK(h.plan_cache().stats().builds == builds + 1);
    fs::remove_all(dir);
}

TEST_CASE("re-binding args does not recompile") {
    std::mt19937_64 rng(107);
    Handle h;
    FusionPlan plan(TensorDescriptor::packed({1, 4, 5, 5}));
    plan.add_op(FusionOp::conv_forward(
        conv_desc(0, 1), TensorDescriptor::packed({4, 4, 1, 1}),
        ConvAlgo::Direct));
    plan.add_op(FusionOp::bias(4));
    plan.add_op(FusionOp::activation(ActivationKind::relu()));
    fusion_compile(h, plan);
    const auto builds = h.plan_cache().stats().builds;
    const Tensor x = testutil::random_tensor({1, 4, 5, 5}, rng);
    for (int i = 0; i < 3; ++i) {
        plan.set_args(random_args(plan, rng));
        const Tensor fused = fusion_execute(h, plan, x);
        const Tensor unfused = fusion_execute_unfused(h, plan, x);
        CHECK(testutil::max_rel_err(fused, unfused) <= 1e-5);
    }
    CHECK(h.plan_cache().stats().builds == builds);
}

TEST_CASE("verdict sweep against a transcription of the rules") {
    // Independent re-statement of the winograd conv-bias-activation channel
    // table, checked over every (filter, stride, c) cell.
    const auto expect_ok = [](std::int64_t f, std::int64_t stride,
                              std::int64_t c) {
        if (stride == 1) {
            if (f <= 2) return c >= 18;
            if (f == 3) return c >= 18 && c % 2 == 0;
            if (f <= 6) return 4 * c >= 18;
            if (f <= 9) return 12 * c >= 18;
            if (f <= 12) return 16 * c >= 18;
            return true;
        }
        if (f == 1) return 2 * c >= 18;
        if (f <= 6) return 4 * c >= 18;
        if (f == 7) return 12 * c >= 18;
        if (f <= 12) return 16 * c >= 18;
        return true;
    };
    int mismatches = 0;
    for (std::int64_t stride : {1, 2})
        for (std::int64_t f = 1; f <= 14; ++f)
            for (std::int64_t c = 1; c <= 24; ++c) {
                FusionPlan plan(TensorDescriptor::packed({1, c, 40, 40}));
                plan.add_op(FusionOp::conv_forward(
                    conv_desc(0, stride),
                    TensorDescriptor::packed({4, c, f, f}),
                    ConvAlgo::Winograd));
                plan.add_op(FusionOp::bias(4));
                plan.add_op(FusionOp::activation(ActivationKind::relu()));
                const bool got = !verdict(plan).has_value();
                if (got != expect_ok(f, stride, c)) ++mismatches;
            }
    CHECK(mismatches == 0);
}
