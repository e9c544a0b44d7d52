#include "core/rnn.hpp"

#include <cmath>
#include <cstring>

#include "core/errors.hpp"

namespace primkit {

std::int64_t SeqBatchLayout::max_batch() const {
    return batch_sizes.empty() ? 0 : batch_sizes.front();
}

std::int64_t SeqBatchLayout::total_rows() const {
    std::int64_t rows = 0;
    for (std::int64_t b : batch_sizes) rows += b;
    return rows;
}

std::int64_t SeqBatchLayout::row_offset(std::int64_t t) const {
    std::int64_t off = 0;
    for (std::int64_t i = 0; i < t; ++i) off += batch_sizes[static_cast<std::size_t>(i)];
    return off;
}

bool SeqBatchLayout::constant_batch() const {
    for (std::int64_t b : batch_sizes)
        if (b != batch_sizes.front()) return false;
    return true;
}

void SeqBatchLayout::validate() const {
    if (batch_sizes.empty())
        throw_error(ErrorCode::InvalidShape, "sequence layout has no steps");
    for (std::size_t t = 0; t < batch_sizes.size(); ++t) {
        if (batch_sizes[t] < 1)
            throw_error(ErrorCode::InvalidShape,
                        "batch size must be >= 1 at step " + std::to_string(t));
        if (t > 0 && batch_sizes[t] > batch_sizes[t - 1])
            throw_error(ErrorCode::LayoutNotDescending,
                        "batch sizes must be non-increasing (step " +
                            std::to_string(t) + ")");
    }
}

namespace {

float sigmoidf(float v) { return 1.0f / (1.0f + std::exp(-v)); }

struct StepSpan {
    std::int64_t offset;  // packed row offset of the step
    std::int64_t batch;
};

// Steps in processing order: ascending time for the forward direction,
// descending for the reverse one. The recurrence only ever looks at the
// previous entry of this list.
std::vector<StepSpan> step_order(const SeqBatchLayout& layout, bool reverse) {
    std::vector<StepSpan> steps;
    std::int64_t off = 0;
    for (std::int64_t b : layout.batch_sizes) {
        steps.push_back({off, b});
        off += b;
    }
    if (reverse) std::reverse(steps.begin(), steps.end());
    return steps;
}

void check_weights(const RnnDescriptor& desc,
                   const std::vector<RnnLayerWeights>& weights,
                   std::int64_t input_size) {
    const std::int64_t g = desc.gates();
    const std::int64_t h = desc.hidden_size;
    if (static_cast<std::int64_t>(weights.size()) != desc.num_layers * desc.dirs())
        throw_error(ErrorCode::ShapeMismatch,
                    "expected one weight set per (layer, direction)");
    for (std::int64_t l = 0; l < desc.num_layers; ++l) {
        const std::int64_t d_in = l == 0 ? input_size : h * desc.dirs();
        for (std::int64_t dir = 0; dir < desc.dirs(); ++dir) {
            const auto& wt = weights[static_cast<std::size_t>(l * desc.dirs() + dir)];
            if (wt.w.desc().dims != std::vector<std::int64_t>{g * h, d_in})
                throw_error(ErrorCode::ShapeMismatch,
                            "input weight shape mismatch at layer " +
                                std::to_string(l));
            if (wt.r.desc().dims != std::vector<std::int64_t>{g * h, h})
                throw_error(ErrorCode::ShapeMismatch,
                            "recurrent weight shape mismatch at layer " +
                                std::to_string(l));
            if (desc.bias_mode == RnnBiasMode::WithBias &&
                wt.bias.desc().dims != std::vector<std::int64_t>{g * h})
                throw_error(ErrorCode::ShapeMismatch,
                            "bias shape mismatch at layer " + std::to_string(l));
        }
    }
    if (desc.input_mode == RnnInputMode::Skip && input_size != h)
        throw_error(ErrorCode::ShapeMismatch,
                    "skip input mode requires input size == hidden size");
    if (desc.direction == RnnDirectionMode::Bidirectional &&
        desc.num_layers >= 1 && desc.hidden_size >= 1) {
        // checked at the call site against the layout
    }
}

Tensor zeros(std::vector<std::int64_t> dims) {
    return Tensor(TensorDescriptor::packed(std::move(dims), ElementType::F32));
}

// Slice [b x width] rows out of a [layers*dirs, Bmax, width] state tensor.
const float* state_rows(const Tensor* state, std::int64_t pass,
                        std::int64_t bmax, std::int64_t width) {
    if (!state) return nullptr;
    return state->data() + pass * bmax * width;
}

// S[:rows] = x . W^T, or a per-gate identity copy in skip mode.
void input_transform(OpCounters& counters, const RnnDescriptor& desc,
                     bool skip_layer, const Tensor& w, const Tensor& x,
                     std::int64_t rows, std::int64_t d_in, Tensor& s) {
    const std::int64_t gh = desc.gates() * desc.hidden_size;
    if (skip_layer) {
        for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t g = 0; g < desc.gates(); ++g)
                std::memcpy(s.data() + r * gh + g * desc.hidden_size,
                            x.data() + r * d_in,
                            static_cast<std::size_t>(d_in) * sizeof(float));
        return;
    }
    gemm(counters, false, true, rows, gh, d_in, 1.0f, x.data(), d_in, w.data(),
         d_in, 0.0f, s.data(), gh);
}

void add_bias(const RnnDescriptor& desc, const Tensor& bias, std::int64_t rows,
              Tensor& s) {
    if (desc.bias_mode != RnnBiasMode::WithBias) return;
    const std::int64_t gh = desc.gates() * desc.hidden_size;
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < gh; ++j)
            s.data()[r * gh + j] += bias.data()[j];
}

}  // namespace

RnnForwardResult lstm_forward(OpCounters& counters, const RnnDescriptor& desc,
                              const std::vector<RnnLayerWeights>& weights,
                              const Tensor& x, const SeqBatchLayout& layout,
                              const Tensor* h0, const Tensor* c0) {
    if (desc.cell != RnnCell::LSTM)
        throw_error(ErrorCode::InvalidValue, "descriptor is not an LSTM");
    layout.validate();
    if (desc.direction == RnnDirectionMode::Bidirectional &&
        !layout.constant_batch())
        throw_error(ErrorCode::InvalidShape,
                    "bidirectional runs require a constant batch size");
    if (x.desc().dims.size() != 2 || x.desc().dims[0] != layout.total_rows())
        throw_error(ErrorCode::ShapeMismatch, "packed input row count mismatch");
    const std::int64_t d_in = x.desc().dims[1];
    check_weights(desc, weights, d_in);

    const std::int64_t h = desc.hidden_size;
    const std::int64_t dirs = desc.dirs();
    const std::int64_t rows = layout.total_rows();
    const std::int64_t bmax = layout.max_batch();
    const std::int64_t passes = desc.num_layers * dirs;

    RnnForwardResult out;
    out.saved.layout = layout;
    out.saved.gates.resize(static_cast<std::size_t>(passes));
    out.saved.cells.resize(static_cast<std::size_t>(passes));
    out.saved.hiddens.resize(static_cast<std::size_t>(passes));
    out.saved.h0.resize(static_cast<std::size_t>(passes));
    out.saved.c0.resize(static_cast<std::size_t>(passes));
    out.h_final = zeros({passes, bmax, h});
    out.c_final = zeros({passes, bmax, h});

    Tensor layer_in = x;
    for (std::int64_t l = 0; l < desc.num_layers; ++l) {
        out.saved.inputs.push_back(layer_in);
        const std::int64_t d_l = layer_in.desc().dims[1];
        Tensor layer_out = zeros({rows, h * dirs});
        for (std::int64_t dir = 0; dir < dirs; ++dir) {
            const std::int64_t pass = l * dirs + dir;
            const auto& wt = weights[static_cast<std::size_t>(pass)];

            Tensor s = zeros({rows, 4 * h});
            const bool skip =
                desc.input_mode == RnnInputMode::Skip && l == 0;
            input_transform(counters, desc, skip, wt.w, layer_in, rows, d_l, s);
            add_bias(desc, wt.bias, rows, s);

            Tensor c_all = zeros({rows, h});
            Tensor h_all = zeros({rows, h});
            Tensor h_prev = zeros({bmax, h});
            Tensor c_prev = zeros({bmax, h});
            if (const float* src = state_rows(h0, pass, bmax, h))
                std::memcpy(h_prev.data(), src,
                            static_cast<std::size_t>(bmax * h) * sizeof(float));
            if (const float* src = state_rows(c0, pass, bmax, h))
                std::memcpy(c_prev.data(), src,
                            static_cast<std::size_t>(bmax * h) * sizeof(float));
            out.saved.h0[static_cast<std::size_t>(pass)] = h_prev;
            out.saved.c0[static_cast<std::size_t>(pass)] = c_prev;
            Tensor h_carry = h_prev;
            Tensor c_carry = c_prev;

            for (const StepSpan& st : step_order(layout, dir == 1)) {
                float* s_t = s.data() + st.offset * 4 * h;
                gemm(counters, false, true, st.batch, 4 * h, h, 1.0f,
                     h_carry.data(), h, wt.r.data(), h, 1.0f, s_t, 4 * h);
                // One fused pass over the step: sigmoid on the i/f/o block,
                // tanh on the candidate, then the cell and hidden updates.
                for (std::int64_t r = 0; r < st.batch; ++r) {
                    float* g = s_t + r * 4 * h;
                    for (std::int64_t j = 0; j < 3 * h; ++j)
                        g[j] = sigmoidf(g[j]);
                    for (std::int64_t j = 3 * h; j < 4 * h; ++j)
                        g[j] = std::tanh(g[j]);
                    float* cc = c_carry.data() + r * h;
                    float* hc = h_carry.data() + r * h;
                    float* c_row = c_all.data() + (st.offset + r) * h;
                    float* h_row = h_all.data() + (st.offset + r) * h;
                    for (std::int64_t j = 0; j < h; ++j) {
                        const float ct = g[h + j] * cc[j] + g[j] * g[3 * h + j];
                        c_row[j] = ct;
                        cc[j] = ct;
                        const float ht = g[2 * h + j] * std::tanh(ct);
                        h_row[j] = ht;
                        hc[j] = ht;
                    }
                }
            }

            for (std::int64_t t = 0; t < layout.steps(); ++t) {
                const std::int64_t off = layout.row_offset(t);
                for (std::int64_t r = 0; r < layout.batch_sizes[static_cast<std::size_t>(t)]; ++r)
                    std::memcpy(layer_out.data() +
                                    (off + r) * h * dirs + dir * h,
                                h_all.data() + (off + r) * h,
                                static_cast<std::size_t>(h) * sizeof(float));
            }
            std::memcpy(out.h_final.data() + pass * bmax * h,
                        h_carry.data(),
                        static_cast<std::size_t>(bmax * h) * sizeof(float));
            std::memcpy(out.c_final.data() + pass * bmax * h,
                        c_carry.data(),
                        static_cast<std::size_t>(bmax * h) * sizeof(float));
            out.saved.gates[static_cast<std::size_t>(pass)] = std::move(s);
            out.saved.cells[static_cast<std::size_t>(pass)] = std::move(c_all);
            out.saved.hiddens[static_cast<std::size_t>(pass)] = std::move(h_all);
        }
        layer_in = layer_out;
    }
    out.y = layer_in;
    return out;
}

LstmBackwardDataResult lstm_backward_data(
    OpCounters& counters, const RnnDescriptor& desc,
    const std::vector<RnnLayerWeights>& weights, const RnnSaved& saved,
    const Tensor& dy, const Tensor* dh_final, const Tensor* dc_final) {
    const SeqBatchLayout& layout = saved.layout;
    const std::int64_t h = desc.hidden_size;
    const std::int64_t dirs = desc.dirs();
    const std::int64_t rows = layout.total_rows();
    const std::int64_t bmax = layout.max_batch();
    const std::int64_t passes = desc.num_layers * dirs;
    if (dy.desc().dims != std::vector<std::int64_t>{rows, h * dirs})
        throw_error(ErrorCode::ShapeMismatch, "dY shape mismatch");

    LstmBackwardDataResult out;
    out.gate_errors.resize(static_cast<std::size_t>(passes));
    out.dh0 = zeros({passes, bmax, h});
    out.dc0 = zeros({passes, bmax, h});

    Tensor dy_layer = dy;
    for (std::int64_t l = desc.num_layers - 1; l >= 0; --l) {
        const Tensor& layer_in = saved.inputs[static_cast<std::size_t>(l)];
        const std::int64_t d_l = layer_in.desc().dims[1];
        Tensor dx_layer = zeros({rows, d_l});
        for (std::int64_t dir = 0; dir < dirs; ++dir) {
            const std::int64_t pass = l * dirs + dir;
            const auto& wt = weights[static_cast<std::size_t>(pass)];
            const Tensor& gates = saved.gates[static_cast<std::size_t>(pass)];
            const Tensor& cells = saved.cells[static_cast<std::size_t>(pass)];
            const Tensor& c_init = saved.c0[static_cast<std::size_t>(pass)];

            Tensor ds = zeros({rows, 4 * h});
            Tensor dh_carry = zeros({bmax, h});
            Tensor dc_carry = zeros({bmax, h});

            const auto steps = step_order(layout, dir == 1);
            std::int64_t injected = 0;  // rows already seeded with final-state grads
            for (std::size_t i = steps.size(); i-- > 0;) {
                const StepSpan& st = steps[i];
                // Samples whose sequences end at this step pick up the
                // final-state gradient exactly once.
                if (st.batch > injected) {
                    if (const float* src = state_rows(dh_final, pass, bmax, h))
                        std::memcpy(dh_carry.data() + injected * h,
                                    src + injected * h,
                                    static_cast<std::size_t>((st.batch - injected) * h) *
                                        sizeof(float));
                    if (const float* src = state_rows(dc_final, pass, bmax, h))
                        std::memcpy(dc_carry.data() + injected * h,
                                    src + injected * h,
                                    static_cast<std::size_t>((st.batch - injected) * h) *
                                        sizeof(float));
                    injected = st.batch;
                }
                const float* c_prev_step =
                    i == 0 ? c_init.data() : cells.data() + steps[i - 1].offset * h;
                for (std::int64_t r = 0; r < st.batch; ++r) {
                    const float* g = gates.data() + (st.offset + r) * 4 * h;
                    const float* c_t = cells.data() + (st.offset + r) * h;
                    const float* c_pm1 = c_prev_step + r * h;
                    float* dh_r = dh_carry.data() + r * h;
                    float* dc_r = dc_carry.data() + r * h;
                    float* ds_r = ds.data() + (st.offset + r) * 4 * h;
                    const float* dy_r =
                        dy_layer.data() + (st.offset + r) * h * dirs + dir * h;
                    for (std::int64_t j = 0; j < h; ++j) {
                        const float ig = g[j], fg = g[h + j], og = g[2 * h + j],
                                    cg = g[3 * h + j];
                        const float tc = std::tanh(c_t[j]);
                        const float dh_j = dh_r[j] + dy_r[j];
                        const float dc_j = dc_r[j] + dh_j * og * (1.0f - tc * tc);
                        ds_r[2 * h + j] = dh_j * tc * og * (1.0f - og);
                        ds_r[3 * h + j] = dc_j * ig * (1.0f - cg * cg);
                        ds_r[j] = dc_j * cg * ig * (1.0f - ig);
                        ds_r[h + j] = dc_j * c_pm1[j] * fg * (1.0f - fg);
                        dc_r[j] = dc_j * fg;
                    }
                }
                // dh for the previous step in processing order: ds_t . R.
                gemm(counters, false, false, st.batch, h, 4 * h, 1.0f,
                     ds.data() + st.offset * 4 * h, 4 * h, wt.r.data(), h, 0.0f,
                     dh_carry.data(), h);
            }
            std::memcpy(out.dh0.data() + pass * bmax * h,
                        dh_carry.data(),
                        static_cast<std::size_t>(bmax * h) * sizeof(float));
            std::memcpy(out.dc0.data() + pass * bmax * h,
                        dc_carry.data(),
                        static_cast<std::size_t>(bmax * h) * sizeof(float));

            const bool skip = desc.input_mode == RnnInputMode::Skip && l == 0;
            if (skip) {
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t g = 0; g < 4; ++g)
                        for (std::int64_t j = 0; j < h; ++j)
                            dx_layer.data()[r * d_l + j] +=
                                ds.data()[r * 4 * h + g * h + j];
            } else {
                // The whole sequence's dX in one GEMM against the stacked
                // gate errors.
                Tensor dx_dir = zeros({rows, d_l});
                gemm(counters, false, false, rows, d_l, 4 * h, 1.0f, ds.data(),
                     4 * h, wt.w.data(), d_l, 0.0f, dx_dir.data(), d_l);
                for (std::int64_t i = 0; i < rows * d_l; ++i)
                    dx_layer.data()[i] += dx_dir.data()[i];
            }
            out.gate_errors[static_cast<std::size_t>(pass)] = std::move(ds);
        }
        dy_layer = dx_layer;
    }
    out.dx = dy_layer;
    return out;
}

RnnWeightGrads lstm_backward_weights(OpCounters& counters,
                                     const RnnDescriptor& desc,
                                     const RnnSaved& saved,
                                     const std::vector<Tensor>& gate_errors) {
    const SeqBatchLayout& layout = saved.layout;
    const std::int64_t h = desc.hidden_size;
    const std::int64_t dirs = desc.dirs();
    const std::int64_t rows = layout.total_rows();
    const std::int64_t passes = desc.num_layers * dirs;
    if (static_cast<std::int64_t>(gate_errors.size()) != passes)
        throw_error(ErrorCode::ShapeMismatch,
                    "expected one gate-error block per (layer, direction)");

    RnnWeightGrads out;
    out.grads.resize(static_cast<std::size_t>(passes));
    const bool constant = layout.constant_batch();
    for (std::int64_t l = 0; l < desc.num_layers; ++l) {
        const Tensor& layer_in = saved.inputs[static_cast<std::size_t>(l)];
        const std::int64_t d_l = layer_in.desc().dims[1];
        for (std::int64_t dir = 0; dir < dirs; ++dir) {
            const std::int64_t pass = l * dirs + dir;
            const Tensor& ds = gate_errors[static_cast<std::size_t>(pass)];
            const Tensor& h_all = saved.hiddens[static_cast<std::size_t>(pass)];
            const Tensor& h_init = saved.h0[static_cast<std::size_t>(pass)];
            RnnLayerWeights g;
            g.w = zeros({4 * h, d_l});
            g.r = zeros({4 * h, h});
            g.bias = zeros({4 * h});

            const bool skip = desc.input_mode == RnnInputMode::Skip && l == 0;
            if (skip) {
                // No input weights in skip mode; dW stays zero.
            } else if (constant) {
                gemm(counters, true, false, 4 * h, d_l, rows, 1.0f, ds.data(),
                     4 * h, layer_in.data(), d_l, 0.0f, g.w.data(),
                     d_l);
            } else {
                // Packed rows line up one-to-one, so dW is still one GEMM.
                gemm(counters, true, false, 4 * h, d_l, rows, 1.0f, ds.data(),
                     4 * h, layer_in.data(), d_l, 0.0f, g.w.data(),
                     d_l);
            }

            const auto steps = step_order(layout, dir == 1);
            if (constant) {
                // Hidden states shifted by one step line up contiguously, so
                // dR collapses to a single GEMM against [h0; h_0 .. h_{T-2}].
                const std::int64_t b = layout.max_batch();
                Tensor h_prev = zeros({rows, h});
                std::memcpy(h_prev.data(), h_init.data(),
                            static_cast<std::size_t>(b * h) * sizeof(float));
                for (std::size_t i = 1; i < steps.size(); ++i)
                    std::memcpy(h_prev.data() +
                                    static_cast<std::int64_t>(i) * b * h,
                                h_all.data() + steps[i - 1].offset * h,
                                static_cast<std::size_t>(b * h) * sizeof(float));
                Tensor ds_ordered = ds;
                if (dir == 1) {
                    // Reverse pass processes time descending; reorder the gate
                    // errors to the processing order before the single GEMM.
                    ds_ordered = zeros({rows, 4 * h});
                    for (std::size_t i = 0; i < steps.size(); ++i)
                        std::memcpy(ds_ordered.data() +
                                        static_cast<std::int64_t>(i) * b * 4 * h,
                                    ds.data() + steps[i].offset * 4 * h,
                                    static_cast<std::size_t>(b * 4 * h) *
                                        sizeof(float));
                }
                gemm(counters, true, false, 4 * h, h, rows, 1.0f,
                     ds_ordered.data(), 4 * h, h_prev.data(), h, 0.0f,
                     g.r.data(), h);
            } else {
                // Variable batch: per-step accumulation, T GEMMs.
                for (std::size_t i = 0; i < steps.size(); ++i) {
                    const StepSpan& st = steps[i];
                    const float* h_prev_t =
                        i == 0 ? h_init.data()
                               : h_all.data() + steps[i - 1].offset * h;
                    gemm(counters, true, false, 4 * h, h, st.batch, 1.0f,
                         ds.data() + st.offset * 4 * h, 4 * h, h_prev_t, h,
                         1.0f, g.r.data(), h);
                }
            }

            if (desc.bias_mode == RnnBiasMode::WithBias)
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t j = 0; j < 4 * h; ++j)
                        g.bias.data()[j] += ds.data()[r * 4 * h + j];
            out.grads[static_cast<std::size_t>(pass)] = std::move(g);
        }
    }
    return out;
}

RnnForwardResult vanilla_rnn_forward(OpCounters& counters,
                                     const RnnDescriptor& desc,
                                     const std::vector<RnnLayerWeights>& weights,
                                     const Tensor& x,
                                     const SeqBatchLayout& layout,
                                     const Tensor* h0) {
    if (desc.cell == RnnCell::LSTM)
        throw_error(ErrorCode::InvalidValue, "descriptor is not a vanilla RNN");
    layout.validate();
    if (desc.direction == RnnDirectionMode::Bidirectional &&
        !layout.constant_batch())
        throw_error(ErrorCode::InvalidShape,
                    "bidirectional runs require a constant batch size");
    if (x.desc().dims.size() != 2 || x.desc().dims[0] != layout.total_rows())
        throw_error(ErrorCode::ShapeMismatch, "packed input row count mismatch");
    const std::int64_t d_in = x.desc().dims[1];
    check_weights(desc, weights, d_in);

    const std::int64_t h = desc.hidden_size;
    const std::int64_t dirs = desc.dirs();
    const std::int64_t rows = layout.total_rows();
    const std::int64_t bmax = layout.max_batch();
    const std::int64_t passes = desc.num_layers * dirs;

    RnnForwardResult out;
    out.saved.layout = layout;
    out.saved.gates.resize(static_cast<std::size_t>(passes));
    out.saved.hiddens.resize(static_cast<std::size_t>(passes));
    out.saved.h0.resize(static_cast<std::size_t>(passes));
    out.h_final = zeros({passes, bmax, h});

    Tensor layer_in = x;
    for (std::int64_t l = 0; l < desc.num_layers; ++l) {
        out.saved.inputs.push_back(layer_in);
        const std::int64_t d_l = layer_in.desc().dims[1];
        Tensor layer_out = zeros({rows, h * dirs});
        for (std::int64_t dir = 0; dir < dirs; ++dir) {
            const std::int64_t pass = l * dirs + dir;
            const auto& wt = weights[static_cast<std::size_t>(pass)];

            Tensor s = zeros({rows, h});
            const bool skip = desc.input_mode == RnnInputMode::Skip && l == 0;
            input_transform(counters, desc, skip, wt.w, layer_in, rows, d_l, s);
            add_bias(desc, wt.bias, rows, s);

            Tensor h_all = zeros({rows, h});
            Tensor h_carry = zeros({bmax, h});
            if (const float* src = state_rows(h0, pass, bmax, h))
                std::memcpy(h_carry.data(), src,
                            static_cast<std::size_t>(bmax * h) * sizeof(float));
            out.saved.h0[static_cast<std::size_t>(pass)] = h_carry;

            for (const StepSpan& st : step_order(layout, dir == 1)) {
                float* s_t = s.data() + st.offset * h;
                gemm(counters, false, true, st.batch, h, h, 1.0f,
                     h_carry.data(), h, wt.r.data(), h, 1.0f, s_t, h);
                for (std::int64_t r = 0; r < st.batch; ++r)
                    for (std::int64_t j = 0; j < h; ++j) {
                        float v = s_t[r * h + j];
                        v = desc.cell == RnnCell::VanillaTanh
                                ? std::tanh(v)
                                : (v > 0.0f ? v : 0.0f);
                        h_all.data()[(st.offset + r) * h + j] = v;
                        h_carry.data()[r * h + j] = v;
                    }
            }

            for (std::int64_t t = 0; t < layout.steps(); ++t) {
                const std::int64_t off = layout.row_offset(t);
                for (std::int64_t r = 0; r < layout.batch_sizes[static_cast<std::size_t>(t)]; ++r)
                    std::memcpy(layer_out.data() +
                                    (off + r) * h * dirs + dir * h,
                                h_all.data() + (off + r) * h,
                                static_cast<std::size_t>(h) * sizeof(float));
            }
            std::memcpy(out.h_final.data() + pass * bmax * h,
                        h_carry.data(),
                        static_cast<std::size_t>(bmax * h) * sizeof(float));
            out.saved.gates[static_cast<std::size_t>(pass)] = h_all;
            out.saved.hiddens[static_cast<std::size_t>(pass)] = std::move(h_all);
        }
        layer_in = layer_out;
    }
    out.y = layer_in;
    return out;
}

VanillaBackwardResult vanilla_rnn_backward(
    OpCounters& counters, const RnnDescriptor& desc,
    const std::vector<RnnLayerWeights>& weights, const RnnSaved& saved,
    const Tensor& dy, const Tensor* dh_final) {
    const SeqBatchLayout& layout = saved.layout;
    const std::int64_t h = desc.hidden_size;
    const std::int64_t dirs = desc.dirs();
    const std::int64_t rows = layout.total_rows();
    const std::int64_t bmax = layout.max_batch();
    const std::int64_t passes = desc.num_layers * dirs;
    if (dy.desc().dims != std::vector<std::int64_t>{rows, h * dirs})
        throw_error(ErrorCode::ShapeMismatch, "dY shape mismatch");

    VanillaBackwardResult out;
    out.dh0 = zeros({passes, bmax, h});
    out.weight_grads.grads.resize(static_cast<std::size_t>(passes));

    Tensor dy_layer = dy;
    for (std::int64_t l = desc.num_layers - 1; l >= 0; --l) {
        const Tensor& layer_in = saved.inputs[static_cast<std::size_t>(l)];
        const std::int64_t d_l = layer_in.desc().dims[1];
        Tensor dx_layer = zeros({rows, d_l});
        for (std::int64_t dir = 0; dir < dirs; ++dir) {
            const std::int64_t pass = l * dirs + dir;
            const auto& wt = weights[static_cast<std::size_t>(pass)];
            const Tensor& h_all = saved.hiddens[static_cast<std::size_t>(pass)];
            const Tensor& h_init = saved.h0[static_cast<std::size_t>(pass)];

            Tensor ds = zeros({rows, h});
            Tensor dh_carry = zeros({bmax, h});
            const auto steps = step_order(layout, dir == 1);
            std::int64_t injected = 0;
            for (std::size_t i = steps.size(); i-- > 0;) {
                const StepSpan& st = steps[i];
                if (st.batch > injected) {
                    if (const float* src = state_rows(dh_final, pass, bmax, h))
                        std::memcpy(dh_carry.data() + injected * h,
                                    src + injected * h,
                                    static_cast<std::size_t>((st.batch - injected) * h) *
                                        sizeof(float));
                    injected = st.batch;
                }
                for (std::int64_t r = 0; r < st.batch; ++r) {
                    const float* h_t = h_all.data() + (st.offset + r) * h;
                    const float* dy_r =
                        dy_layer.data() + (st.offset + r) * h * dirs + dir * h;
                    float* dh_r = dh_carry.data() + r * h;
                    float* ds_r = ds.data() + (st.offset + r) * h;
                    for (std::int64_t j = 0; j < h; ++j) {
                        const float dh_j = dh_r[j] + dy_r[j];
                        const float deriv =
                            desc.cell == RnnCell::VanillaTanh
                                ? 1.0f - h_t[j] * h_t[j]
                                : (h_t[j] > 0.0f ? 1.0f : 0.0f);
                        ds_r[j] = dh_j * deriv;
                    }
                }
                gemm(counters, false, false, st.batch, h, h, 1.0f,
                     ds.data() + st.offset * h, h, wt.r.data(), h, 0.0f,
                     dh_carry.data(), h);
            }
            std::memcpy(out.dh0.data() + pass * bmax * h,
                        dh_carry.data(),
                        static_cast<std::size_t>(bmax * h) * sizeof(float));

            const bool skip = desc.input_mode == RnnInputMode::Skip && l == 0;
            if (skip) {
                for (std::int64_t i = 0; i < rows * h; ++i)
                    dx_layer.data()[i] += ds.data()[i];
            } else {
                Tensor dx_dir = zeros({rows, d_l});
                gemm(counters, false, false, rows, d_l, h, 1.0f, ds.data(), h,
                     wt.w.data(), d_l, 0.0f, dx_dir.data(), d_l);
                for (std::int64_t i = 0; i < rows * d_l; ++i)
                    dx_layer.data()[i] += dx_dir.data()[i];
            }

            RnnLayerWeights g;
            g.w = zeros({h, d_l});
            g.r = zeros({h, h});
            g.bias = zeros({h});
            if (!skip)
                gemm(counters, true, false, h, d_l, rows, 1.0f, ds.data(), h,
                     layer_in.data(), d_l, 0.0f, g.w.data(), d_l);
            for (std::size_t i = 0; i < steps.size(); ++i) {
                const StepSpan& st = steps[i];
                const float* h_prev_t =
                    i == 0 ? h_init.data()
                           : h_all.data() + steps[i - 1].offset * h;
                gemm(counters, true, false, h, h, st.batch, 1.0f,
                     ds.data() + st.offset * h, h, h_prev_t, h, 1.0f,
                     g.r.data(), h);
            }
            if (desc.bias_mode == RnnBiasMode::WithBias)
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t j = 0; j < h; ++j)
                        g.bias.data()[j] += ds.data()[r * h + j];
            out.weight_grads.grads[static_cast<std::size_t>(pass)] = std::move(g);
        }
        dy_layer = dx_layer;
    }
    out.dx = dy_layer;
    return out;
}

}  // namespace primkit
