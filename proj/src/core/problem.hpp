#pragma once

#include <string>

#include "core/conv.hpp"

namespace primkit {

// Canonical description of one convolution instance; its key() string is the
// perf-db key.
struct ConvProblem {
    std::int64_t n = 1, c = 1, h = 1, w = 1;
    std::int64_t k = 1, y = 1, x = 1;
    std::int64_t pad_h = 0, pad_w = 0;
    std::int64_t stride_h = 1, stride_w = 1;
    std::int64_t dilation_h = 1, dilation_w = 1;
    std::int64_t groups = 1;
    ConvDirection direction = ConvDirection::Forward;
    ConvMode mode = ConvMode::Convolution;
    ElementType etype = ElementType::F32;

    bool operator==(const ConvProblem&) const = default;

    // Dash-joined decimal fields, e.g. `32-3-224-224-64-7-7-3-3-2-2-1-1-1-F-C-f32`.
    std::string key() const;

    ConvDescriptor conv_desc() const;
    TensorDescriptor input_desc() const;
    TensorDescriptor filter_desc() const;
    TensorDescriptor output_desc() const;
};

}  // namespace primkit
