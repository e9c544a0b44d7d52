#include "core/problem.hpp"

#include <sstream>

namespace primkit {

std::string ConvProblem::key() const {
    std::ostringstream os;
    os << n << '-' << c << '-' << h << '-' << w << '-' << k << '-' << y << '-'
       << x << '-' << pad_h << '-' << pad_w << '-' << stride_h << '-'
       << stride_w << '-' << dilation_h << '-' << dilation_w << '-' << groups
       << '-';
    switch (direction) {
        case ConvDirection::Forward: os << 'F'; break;
        case ConvDirection::BackwardData: os << "BD"; break;
        case ConvDirection::BackwardWeights: os << "BW"; break;
    }
    os << '-' << (mode == ConvMode::Convolution ? 'C' : 'T') << '-'
       << element_type_name(etype);
    return os.str();
}

ConvDescriptor ConvProblem::conv_desc() const {
    ConvDescriptor d;
    d.pad_h = pad_h;
    d.pad_w = pad_w;
    d.stride_h = stride_h;
    d.stride_w = stride_w;
    d.dilation_h = dilation_h;
    d.dilation_w = dilation_w;
    d.mode = mode;
    d.group_count = groups;
    return d;
}

TensorDescriptor ConvProblem::input_desc() const {
    return TensorDescriptor::packed({n, c, h, w}, etype);
}

TensorDescriptor ConvProblem::filter_desc() const {
    if (mode == ConvMode::Transpose)
        return TensorDescriptor::packed({c, k / groups, y, x}, etype);
    return TensorDescriptor::packed({k, c / groups, y, x}, etype);
}

TensorDescriptor ConvProblem::output_desc() const {
    return output_dims(input_desc(), filter_desc(), conv_desc());
}

}  // namespace primkit
