#pragma once

#include <cstddef>
#include <optional>
#include <span>

#include "core/tensor.hpp"

namespace primkit {

enum class ConvMode { Convolution, Transpose };
enum class ConvAlgo { Im2colGemm, Direct, Winograd, FFT, ImplicitGemm };
enum class ConvDirection { Forward, BackwardData, BackwardWeights };

const char* conv_algo_name(ConvAlgo a);

struct ConvDescriptor {
    std::int64_t pad_h = 0, pad_w = 0;
    std::int64_t stride_h = 1, stride_w = 1;
    std::int64_t dilation_h = 1, dilation_w = 1;
    ConvMode mode = ConvMode::Convolution;
    std::int64_t group_count = 1;
};

// Per-level tile sizes of the hierarchical implicit-GEMM decomposition:
// tile_m blocks output channels, tile_n blocks flattened output pixels,
// tile_k blocks input channels per group.
struct ImplicitGemmTiles {
    std::int64_t tile_m = 1;
    std::int64_t tile_n = 1;
    std::int64_t tile_k = 1;
};

// Output descriptor for input [N,C,H,W] and filter [K,C/g,Y,X]
// ([C,K/g,Y,X] in Transpose mode).
TensorDescriptor output_dims(const TensorDescriptor& input,
                             const TensorDescriptor& filter,
                             const ConvDescriptor& conv);

// Unrolls one (n, group) input slice into the [(C/g)*Y*X, OH*OW] matrix with
// zero padding; columns follow row-major (oh, ow) order.
Tensor im2col(const Tensor& input, const TensorDescriptor& filter_desc,
              const ConvDescriptor& conv, std::int64_t n, std::int64_t group);

std::size_t conv_workspace_bytes(ConvAlgo algo, const TensorDescriptor& input,
                                 const TensorDescriptor& filter,
                                 const ConvDescriptor& conv,
                                 const ImplicitGemmTiles& tiles = {});

Tensor conv_forward(OpCounters& counters, ConvAlgo algo, const Tensor& input,
                    const Tensor& filter, const ConvDescriptor& conv,
                    std::span<std::byte> workspace,
                    const ImplicitGemmTiles& tiles = {});

Tensor conv_backward_data(OpCounters& counters, ConvAlgo algo,
                          const Tensor& d_output, const Tensor& filter,
                          const ConvDescriptor& conv,
                          const TensorDescriptor& input_desc,
                          std::span<std::byte> workspace);

Tensor conv_backward_weights(OpCounters& counters, ConvAlgo algo,
                             const Tensor& d_output, const Tensor& input,
                             const ConvDescriptor& conv,
                             const TensorDescriptor& filter_desc,
                             std::span<std::byte> workspace);

}  // namespace primkit
