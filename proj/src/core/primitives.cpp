#include "core/primitives.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace primkit {

namespace {

struct BnLayout {
    std::int64_t n, c, h, w;
    std::int64_t stat_count;   // statistics groups
    std::int64_t reduce_count; // elements per group
};

BnLayout bn_layout(BatchNormMode mode, const TensorDescriptor& x) {
    if (x.rank() != 4)
        throw_error(ErrorCode::ShapeMismatch, "batchnorm expects NCHW input");
    BnLayout l{x.dims[0], x.dims[1], x.dims[2], x.dims[3], 0, 0};
    if (mode == BatchNormMode::PerActivation) {
        l.stat_count = l.c * l.h * l.w;
        l.reduce_count = l.n;
    } else {
        l.stat_count = l.c;
        l.reduce_count = l.n * l.h * l.w;
    }
    return l;
}

std::int64_t stat_index(BatchNormMode mode, const BnLayout& l, std::int64_t c,
                        std::int64_t h, std::int64_t w) {
    return mode == BatchNormMode::PerActivation ? (c * l.h + h) * l.w + w : c;
}

void check_bn_params(BatchNormMode mode, const BnLayout& l,
                     const BatchNormParams& p) {
    if (p.epsilon <= 0.0f)
        throw_error(ErrorCode::InvalidEpsilon, "epsilon must be positive");
    const std::vector<std::int64_t> want =
        mode == BatchNormMode::PerActivation
            ? std::vector<std::int64_t>{1, l.c, l.h, l.w}
            : std::vector<std::int64_t>{1, l.c, 1, 1};
    for (const Tensor* t : {&p.gamma, &p.beta, &p.running_mean, &p.running_var})
        if (t->dims() != want)
            throw_error(ErrorCode::ShapeMismatch,
                        "batchnorm parameter shape does not match mode");
}

template <typename Fn>
void bn_for_each(const BnLayout& l, Fn&& fn) {
    for (std::int64_t n = 0; n < l.n; ++n)
        for (std::int64_t c = 0; c < l.c; ++c)
            for (std::int64_t h = 0; h < l.h; ++h)
                for (std::int64_t w = 0; w < l.w; ++w)
                    fn(n, c, h, w, ((n * l.c + c) * l.h + h) * l.w + w);
}

}  // namespace

BatchNormForwardResult batchnorm_forward_train(BatchNormMode mode,
                                               const Tensor& x,
                                               BatchNormParams& p) {
    const BnLayout l = bn_layout(mode, x.desc());
    check_bn_params(mode, l, p);

    Tensor mean(TensorDescriptor::packed({l.stat_count}));
    Tensor invstd(TensorDescriptor::packed({l.stat_count}));
    std::vector<double> sum(static_cast<std::size_t>(l.stat_count), 0.0);
    std::vector<double> sumsq(static_cast<std::size_t>(l.stat_count), 0.0);
    bn_for_each(l, [&](auto, auto c, auto h, auto w, auto lin) {
        const double v = x.at(lin);
        const auto si = stat_index(mode, l, c, h, w);
        sum[si] += v;
        sumsq[si] += v * v;
    });
    const double m = static_cast<double>(l.reduce_count);
    for (std::int64_t si = 0; si < l.stat_count; ++si) {
        const double mu = sum[si] / m;
        const double var = std::max(0.0, sumsq[si] / m - mu * mu);
        mean.set(si, static_cast<float>(mu));
        invstd.set(si, static_cast<float>(1.0 / std::sqrt(var + p.epsilon)));
        p.running_mean.set(si, (1.0f - p.momentum) * p.running_mean.at(si) +
                                   p.momentum * static_cast<float>(mu));
        p.running_var.set(si, (1.0f - p.momentum) * p.running_var.at(si) +
                                  p.momentum * static_cast<float>(var));
    }

    Tensor y(TensorDescriptor::packed(x.dims(), x.etype()));
    bn_for_each(l, [&](auto, auto c, auto h, auto w, auto lin) {
        const auto si = stat_index(mode, l, c, h, w);
        y.set(lin, p.gamma.at(si) * (x.at(lin) - mean.at(si)) * invstd.at(si) +
                       p.beta.at(si));
    });
    return {std::move(y), std::move(mean), std::move(invstd)};
}

Tensor batchnorm_forward_infer(BatchNormMode mode, const Tensor& x,
                               const BatchNormParams& p) {
    const BnLayout l = bn_layout(mode, x.desc());
    check_bn_params(mode, l, p);
    Tensor y(TensorDescriptor::packed(x.dims(), x.etype()));
    bn_for_each(l, [&](auto, auto c, auto h, auto w, auto lin) {
        const auto si = stat_index(mode, l, c, h, w);
        const float inv =
            1.0f / std::sqrt(p.running_var.at(si) + p.epsilon);
        y.set(lin, p.gamma.at(si) * (x.at(lin) - p.running_mean.at(si)) * inv +
                       p.beta.at(si));
    });
    return y;
}

BatchNormBackwardResult batchnorm_backward(BatchNormMode mode, const Tensor& x,
                                           const Tensor& dy,
                                           const BatchNormParams& p,
                                           const Tensor& saved_mean,
                                           const Tensor& saved_invstd) {
    const BnLayout l = bn_layout(mode, x.desc());
    check_bn_params(mode, l, p);
    if (dy.dims() != x.dims())
        throw_error(ErrorCode::ShapeMismatch, "dY shape must match x");

    std::vector<double> dbeta(static_cast<std::size_t>(l.stat_count), 0.0);
    std::vector<double> dgamma(static_cast<std::size_t>(l.stat_count), 0.0);
    bn_for_each(l, [&](auto, auto c, auto h, auto w, auto lin) {
        const auto si = stat_index(mode, l, c, h, w);
        const double xhat =
            (x.at(lin) - saved_mean.at(si)) * saved_invstd.at(si);
        dbeta[si] += dy.at(lin);
        dgamma[si] += dy.at(lin) * xhat;
    });

    Tensor dx(TensorDescriptor::packed(x.dims(), x.etype()));
    const double m = static_cast<double>(l.reduce_count);
    bn_for_each(l, [&](auto, auto c, auto h, auto w, auto lin) {
        const auto si = stat_index(mode, l, c, h, w);
        const double xhat =
            (x.at(lin) - saved_mean.at(si)) * saved_invstd.at(si);
        const double v = (p.gamma.at(si) * saved_invstd.at(si) / m) *
                         (m * dy.at(lin) - dbeta[si] - xhat * dgamma[si]);
        dx.set(lin, static_cast<float>(v));
    });

    const auto pshape = p.gamma.dims();
    Tensor dgamma_t(TensorDescriptor::packed(pshape, x.etype()));
    Tensor dbeta_t(TensorDescriptor::packed(pshape, x.etype()));
    for (std::int64_t si = 0; si < l.stat_count; ++si) {
        dgamma_t.set(si, static_cast<float>(dgamma[si]));
        dbeta_t.set(si, static_cast<float>(dbeta[si]));
    }
    return {std::move(dx), std::move(dgamma_t), std::move(dbeta_t)};
}

float activation_apply(ActivationKind kind, float v) {
    switch (kind.tag) {
        case ActivationKind::Tag::ReLU: return v > 0.0f ? v : 0.0f;
        case ActivationKind::Tag::LeakyReLU:
            return v > 0.0f ? v : kind.alpha * v;
        case ActivationKind::Tag::Sigmoid:
            return 1.0f / (1.0f + std::exp(-v));
        case ActivationKind::Tag::Tanh: return std::tanh(v);
    }
    return v;
}

Tensor activation_forward(ActivationKind kind, const Tensor& x) {
    if (kind.tag == ActivationKind::Tag::LeakyReLU && kind.alpha < 0.0f)
        throw_error(ErrorCode::InvalidValue, "LeakyReLU alpha must be >= 0");
    Tensor y(TensorDescriptor::packed(x.dims(), x.etype()));
    for (std::int64_t i = 0; i < x.size(); ++i)
        y.set(i, activation_apply(kind, x.at(i)));
    return y;
}

Tensor activation_backward(ActivationKind kind, const Tensor& x,
                           const Tensor& dy) {
    if (dy.dims() != x.dims())
        throw_error(ErrorCode::ShapeMismatch, "dY shape must match x");
    Tensor dx(TensorDescriptor::packed(x.dims(), x.etype()));
    for (std::int64_t i = 0; i < x.size(); ++i) {
        const float v = x.at(i);
        float d = 0.0f;
        switch (kind.tag) {
            case ActivationKind::Tag::ReLU: d = v > 0.0f ? 1.0f : 0.0f; break;
            case ActivationKind::Tag::LeakyReLU:
                d = v > 0.0f ? 1.0f : kind.alpha;
                break;
            case ActivationKind::Tag::Sigmoid: {
                const float s = 1.0f / (1.0f + std::exp(-v));
                d = s * (1.0f - s);
                break;
            }
            case ActivationKind::Tag::Tanh: {
                const float t = std::tanh(v);
                d = 1.0f - t * t;
                break;
            }
        }
        dx.set(i, d * dy.at(i));
    }
    return dx;
}

PoolingForwardResult pooling_forward(PoolingKind kind,
                                     const PoolingDescriptor& pool,
                                     const Tensor& x) {
    if (x.desc().rank() != 4)
        throw_error(ErrorCode::InvalidShape, "pooling expects NCHW input");
    if (pool.window_h < 1 || pool.window_w < 1 || pool.stride_h < 1 ||
        pool.stride_w < 1 || pool.pad_h < 0 || pool.pad_w < 0)
        throw_error(ErrorCode::InvalidValue, "bad pooling descriptor");
    const std::int64_t n = x.dims()[0], c = x.dims()[1], h = x.dims()[2],
                       w = x.dims()[3];
    const std::int64_t oh = (h + 2 * pool.pad_h - pool.window_h) /
                                pool.stride_h + 1;
    const std::int64_t ow = (w + 2 * pool.pad_w - pool.window_w) /
                                pool.stride_w + 1;
    if (oh < 1 || ow < 1)
        throw_error(ErrorCode::InvalidShape, "pooling output extent below 1");

    PoolingForwardResult res{Tensor::packed({n, c, oh, ow}, x.etype()), {}};
    res.indices.assign(static_cast<std::size_t>(n * c * oh * ow), -1);
    for (std::int64_t ni = 0; ni < n; ++ni)
        for (std::int64_t ci = 0; ci < c; ++ci)
            for (std::int64_t i = 0; i < oh; ++i)
                for (std::int64_t j = 0; j < ow; ++j) {
                    float best = -std::numeric_limits<float>::infinity();
                    std::int64_t best_idx = -1;
                    double sum = 0.0;
                    std::int64_t count = 0;
                    for (std::int64_t p = 0; p < pool.window_h; ++p) {
                        const std::int64_t ih = i * pool.stride_h - pool.pad_h + p;
                        if (ih < 0 || ih >= h) continue;
                        for (std::int64_t q = 0; q < pool.window_w; ++q) {
                            const std::int64_t iw =
                                j * pool.stride_w - pool.pad_w + q;
                            if (iw < 0 || iw >= w) continue;
                            const std::int64_t lin =
                                ((ni * c + ci) * h + ih) * w + iw;
                            const float v = x.at(lin);
                            sum += v;
                            ++count;
                            if (v > best) {
                                best = v;
                                best_idx = lin;
                            }
                        }
                    }
                    const std::int64_t out_lin =
                        ((ni * c + ci) * oh + i) * ow + j;
                    if (kind == PoolingKind::Max) {
                        res.y.set(out_lin, count ? best : 0.0f);
                        res.indices[out_lin] = best_idx;
                    } else {
                        res.y.set(out_lin,
                                  count ? static_cast<float>(sum / count)
                                        : 0.0f);
                    }
                }
    return res;
}

Tensor pooling_backward(PoolingKind kind, const PoolingDescriptor& pool,
                        const TensorDescriptor& input_desc, const Tensor& dy,
                        const std::vector<std::int64_t>& indices) {
    Tensor dx(TensorDescriptor::packed(input_desc.dims, input_desc.etype));
    const std::int64_t n = input_desc.dims[0], c = input_desc.dims[1],
                       h = input_desc.dims[2], w = input_desc.dims[3];
    const std::int64_t oh = dy.dims()[2], ow = dy.dims()[3];
    if (kind == PoolingKind::Max) {
        if (static_cast<std::int64_t>(indices.size()) != dy.size())
            throw_error(ErrorCode::ShapeMismatch, "indices do not match dY");
        for (std::int64_t i = 0; i < dy.size(); ++i)
            if (indices[i] >= 0)
                dx.set(indices[i], dx.at(indices[i]) + dy.at(i));
        return dx;
    }
    for (std::int64_t ni = 0; ni < n; ++ni)
        for (std::int64_t ci = 0; ci < c; ++ci)
            for (std::int64_t i = 0; i < oh; ++i)
                for (std::int64_t j = 0; j < ow; ++j) {
                    std::int64_t count = 0;
                    for (std::int64_t p = 0; p < pool.window_h; ++p) {
                        const std::int64_t ih = i * pool.stride_h - pool.pad_h + p;
                        if (ih < 0 || ih >= h) continue;
                        for (std::int64_t q = 0; q < pool.window_w; ++q) {
                            const std::int64_t iw =
                                j * pool.stride_w - pool.pad_w + q;
                            if (iw >= 0 && iw < w) ++count;
                        }
                    }
                    if (!count) continue;
                    const float g =
                        dy.at(((ni * c + ci) * oh + i) * ow + j) /
                        static_cast<float>(count);
                    for (std::int64_t p = 0; p < pool.window_h; ++p) {
                        const std::int64_t ih = i * pool.stride_h - pool.pad_h + p;
                        if (ih < 0 || ih >= h) continue;
                        for (std::int64_t q = 0; q < pool.window_w; ++q) {
                            const std::int64_t iw =
                                j * pool.stride_w - pool.pad_w + q;
                            if (iw < 0 || iw >= w) continue;
                            const std::int64_t lin =
                                ((ni * c + ci) * h + ih) * w + iw;
                            dx.set(lin, dx.at(lin) + g);
                        }
                    }
                }
    return dx;
}

namespace {

struct AxisSplit {
    std::int64_t outer, axis, inner;
};

AxisSplit split_axis(const TensorDescriptor& d, std::int64_t axis) {
    if (axis < 0 || axis >= d.rank())
        throw_error(ErrorCode::InvalidAxis, "softmax axis out of range");
    AxisSplit s{1, d.dims[axis], 1};
    for (std::int64_t i = 0; i < axis; ++i) s.outer *= d.dims[i];
    for (std::int64_t i = axis + 1; i < d.rank(); ++i) s.inner *= d.dims[i];
    return s;
}

}  // namespace

Tensor softmax_forward(const Tensor& x, std::int64_t axis) {
    const AxisSplit s = split_axis(x.desc(), axis);
    Tensor y(TensorDescriptor::packed(x.dims(), x.etype()));
    for (std::int64_t o = 0; o < s.outer; ++o)
        for (std::int64_t i = 0; i < s.inner; ++i) {
            const auto at = [&](std::int64_t a) {
                return (o * s.axis + a) * s.inner + i;
            };
            float mx = x.at(at(0));
            for (std::int64_t a = 1; a < s.axis; ++a)
                mx = std::max(mx, x.at(at(a)));
            double denom = 0.0;
            for (std::int64_t a = 0; a < s.axis; ++a)
                denom += std::exp(static_cast<double>(x.at(at(a)) - mx));
            for (std::int64_t a = 0; a < s.axis; ++a)
                y.set(at(a), static_cast<float>(
                                 std::exp(static_cast<double>(x.at(at(a)) - mx)) /
                                 denom));
        }
    return y;
}

Tensor softmax_backward(const Tensor& y, const Tensor& dy, std::int64_t axis) {
    if (dy.dims() != y.dims())
        throw_error(ErrorCode::ShapeMismatch, "dY shape must match y");
    const AxisSplit s = split_axis(y.desc(), axis);
    Tensor dx(TensorDescriptor::packed(y.dims(), y.etype()));
    for (std::int64_t o = 0; o < s.outer; ++o)
        for (std::int64_t i = 0; i < s.inner; ++i) {
            const auto at = [&](std::int64_t a) {
                return (o * s.axis + a) * s.inner + i;
            };
            double dot = 0.0;
            for (std::int64_t a = 0; a < s.axis; ++a)
                dot += static_cast<double>(dy.at(at(a))) * y.at(at(a));
            for (std::int64_t a = 0; a < s.axis; ++a)
                dx.set(at(a), static_cast<float>(
                                  y.at(at(a)) *
                                  (dy.at(at(a)) - dot)));
        }
    return dx;
}

}  // namespace primkit
