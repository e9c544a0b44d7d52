#pragma once

#include <optional>
#include <vector>

#include "core/tensor.hpp"

namespace primkit {

enum class RnnCell { VanillaReLU, VanillaTanh, LSTM };
enum class RnnDirectionMode { Unidirectional, Bidirectional };
enum class RnnInputMode { Linear, Skip };
enum class RnnBiasMode { WithBias, NoBias };

struct RnnDescriptor {
    RnnCell cell = RnnCell::LSTM;
    RnnDirectionMode direction = RnnDirectionMode::Unidirectional;
    RnnInputMode input_mode = RnnInputMode::Linear;
    RnnBiasMode bias_mode = RnnBiasMode::WithBias;
    std::int64_t hidden_size = 1;
    std::int64_t num_layers = 1;

    std::int64_t dirs() const {
        return direction == RnnDirectionMode::Bidirectional ? 2 : 1;
    }
    std::int64_t gates() const { return cell == RnnCell::LSTM ? 4 : 1; }
};

// Packed variable-length sequence batch: per-step batch sizes must be
// non-increasing (longest sequences first).
struct SeqBatchLayout {
    std::vector<std::int64_t> batch_sizes;

    static SeqBatchLayout constant(std::int64_t t, std::int64_t b) {
        return SeqBatchLayout{std::vector<std::int64_t>(
            static_cast<std::size_t>(t), b)};
    }

    std::int64_t steps() const {
        return static_cast<std::int64_t>(batch_sizes.size());
    }
    std::int64_t max_batch() const;
    std::int64_t total_rows() const;
    std::int64_t row_offset(std::int64_t t) const;
    bool constant_batch() const;
    void validate() const;  // LayoutNotDescending
};

// Per (layer, direction) weights. LSTM: w [4H x D] stacked [Wi;Wf;Wo;Wc],
// r [4H x H] stacked [Ri;Rf;Ro;Rc], bias [4H]. Vanilla: 1H blocks.
struct RnnLayerWeights {
    Tensor w;
    Tensor r;
    Tensor bias;  // empty dims {1} with zero content when NoBias
};

struct RnnSaved {
    SeqBatchLayout layout;
    // Indexed layer*dirs + dir.
    std::vector<Tensor> gates;    // activated gate values [rows x G*H]
    std::vector<Tensor> cells;    // LSTM cell states [rows x H]
    std::vector<Tensor> hiddens;  // hidden states [rows x H]
    std::vector<Tensor> h0;       // initial hidden per pass [Bmax x H]
    std::vector<Tensor> c0;       // initial cell per pass (LSTM)
    std::vector<Tensor> inputs;   // per-layer input [rows x D_l]
};

struct RnnForwardResult {
    Tensor y;        // [rows x H*dirs]
    Tensor h_final;  // [layers*dirs, Bmax, H]
    Tensor c_final;  // LSTM only
    RnnSaved saved;
};

// Fused forward: one GEMM for the whole-sequence input transform, one
// recurrent GEMM per step, gate activations in a single fused pass.
RnnForwardResult lstm_forward(OpCounters& counters, const RnnDescriptor& desc,
                              const std::vector<RnnLayerWeights>& weights,
                              const Tensor& x, const SeqBatchLayout& layout,
                              const Tensor* h0 = nullptr,
                              const Tensor* c0 = nullptr);

struct LstmBackwardDataResult {
    Tensor dx;   // [rows x D]
    Tensor dh0;  // [layers*dirs, Bmax, H]
    Tensor dc0;
    std::vector<Tensor> gate_errors;  // per pass [rows x 4H]
};

// Per-step gate-error derivation with recurrent error propagation; the whole
// dX block is produced by a single trailing GEMM.
LstmBackwardDataResult lstm_backward_data(
    OpCounters& counters, const RnnDescriptor& desc,
    const std::vector<RnnLayerWeights>& weights, const RnnSaved& saved,
    const Tensor& dy, const Tensor* dh_final = nullptr,
    const Tensor* dc_final = nullptr);

struct RnnWeightGrads {
    std::vector<RnnLayerWeights> grads;  // same indexing as weights
};

// Constant-batch path: exactly 2 GEMMs per pass (dW, dR); variable-batch:
// T+1 (packed dW plus per-step aligned dR accumulation).
RnnWeightGrads lstm_backward_weights(OpCounters& counters,
                                     const RnnDescriptor& desc,
                                     const RnnSaved& saved,
                                     const std::vector<Tensor>& gate_errors);

RnnForwardResult vanilla_rnn_forward(OpCounters& counters,
                                     const RnnDescriptor& desc,
                                     const std::vector<RnnLayerWeights>& weights,
                                     const Tensor& x,
                                     const SeqBatchLayout& layout,
                                     const Tensor* h0 = nullptr);

struct VanillaBackwardResult {
    Tensor dx;
    Tensor dh0;
    RnnWeightGrads weight_grads;
};

VanillaBackwardResult vanilla_rnn_backward(
    OpCounters& counters, const RnnDescriptor& desc,
    const std::vector<RnnLayerWeights>& weights, const RnnSaved& saved,
    const Tensor& dy, const Tensor* dh_final = nullptr);

}  // namespace primkit
