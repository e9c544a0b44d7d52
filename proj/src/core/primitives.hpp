#pragma once

#include <tuple>

#include "core/tensor.hpp"

namespace primkit {

enum class BatchNormMode { PerActivation, Spatial };

struct BatchNormParams {
    Tensor gamma;         // [1,C,H,W] per-activation, [1,C,1,1] spatial
    Tensor beta;
    Tensor running_mean;  // same shape as gamma
    Tensor running_var;
    float epsilon = 1e-5f;
    float momentum = 0.1f;
};

struct BatchNormForwardResult {
    Tensor y;
    Tensor saved_mean;
    Tensor saved_invstd;
};

// y = gamma*(x - mu)/sqrt(var + eps) + beta with batch statistics; updates
// running stats as (1 - momentum)*running + momentum*batch. Variance is the
// biased (divide-by-count) estimate.
BatchNormForwardResult batchnorm_forward_train(BatchNormMode mode,
                                               const Tensor& x,
                                               BatchNormParams& p);

Tensor batchnorm_forward_infer(BatchNormMode mode, const Tensor& x,
                               const BatchNormParams& p);

struct BatchNormBackwardResult {
    Tensor dx;
    Tensor dgamma;
    Tensor dbeta;
};

BatchNormBackwardResult batchnorm_backward(BatchNormMode mode, const Tensor& x,
                                           const Tensor& dy,
                                           const BatchNormParams& p,
                                           const Tensor& saved_mean,
                                           const Tensor& saved_invstd);

struct ActivationKind {
    enum class Tag { ReLU, LeakyReLU, Sigmoid, Tanh } tag = Tag::ReLU;
    float alpha = 0.0f;  // LeakyReLU slope

    static ActivationKind relu() { return {Tag::ReLU, 0.0f}; }
    static ActivationKind leaky_relu(float a) { return {Tag::LeakyReLU, a}; }
    static ActivationKind sigmoid() { return {Tag::Sigmoid, 0.0f}; }
    static ActivationKind tanh() { return {Tag::Tanh, 0.0f}; }
};

float activation_apply(ActivationKind kind, float v);

Tensor activation_forward(ActivationKind kind, const Tensor& x);
// Pointwise derivative times dY; the ReLU derivative at 0 is 0.
Tensor activation_backward(ActivationKind kind, const Tensor& x,
                           const Tensor& dy);

enum class PoolingKind { Max, Avg };

struct PoolingDescriptor {
    std::int64_t window_h = 2, window_w = 2;
    std::int64_t stride_h = 2, stride_w = 2;
    std::int64_t pad_h = 0, pad_w = 0;
};

struct PoolingForwardResult {
    Tensor y;
    // Linear input offsets of the argmax per output element (Max only).
    std::vector<std::int64_t> indices;
};

// Avg pooling divides by the count of valid (non-padded) taps.
PoolingForwardResult pooling_forward(PoolingKind kind,
                                     const PoolingDescriptor& pool,
                                     const Tensor& x);

Tensor pooling_backward(PoolingKind kind, const PoolingDescriptor& pool,
                        const TensorDescriptor& input_desc, const Tensor& dy,
                        const std::vector<std::int64_t>& indices);

// Numerically stabilized softmax along `axis`; rows sum to 1.
Tensor softmax_forward(const Tensor& x, std::int64_t axis);
// dX = y ⊙ (dY − <dY, y>) per softmax row.
Tensor softmax_backward(const Tensor& y, const Tensor& dy, std::int64_t axis);

}  // namespace primkit
