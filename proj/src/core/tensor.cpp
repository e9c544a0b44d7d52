#include "core/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>

namespace primkit {

const char* element_type_name(ElementType t) {
    switch (t) {
        case ElementType::F32: return "f32";
        case ElementType::BF16: return "bf16";
    }
    return "?";
}

const char* error_code_name(ErrorCode code) {
    switch (code) {
        case ErrorCode::Ok: return "Ok";
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::InvalidShape: return "InvalidShape";
        case ErrorCode::GroupMismatch: return "GroupMismatch";
        case ErrorCode::AlgoNotApplicable: return "AlgoNotApplicable";
        case ErrorCode::WorkspaceTooSmall: return "WorkspaceTooSmall";
        case ErrorCode::DuplicateSolver: return "DuplicateSolver";
        case ErrorCode::NoApplicableSolver: return "NoApplicableSolver";
        case ErrorCode::NotTunable: return "NotTunable";
        case ErrorCode::NoValidConfig: return "NoValidConfig";
        case ErrorCode::IoError: return "IoError";
        case ErrorCode::ParseError: return "ParseError";
        case ErrorCode::LayoutNotDescending: return "LayoutNotDescending";
        case ErrorCode::InvalidEpsilon: return "InvalidEpsilon";
        case ErrorCode::InvalidAxis: return "InvalidAxis";
        case ErrorCode::FusionNotSupported: return "FusionNotSupported";
        case ErrorCode::AlreadyCompiled: return "AlreadyCompiled";
        case ErrorCode::NotCompiled: return "NotCompiled";
        case ErrorCode::MissingArgs: return "MissingArgs";
        case ErrorCode::InvalidValue: return "InvalidValue";
    }
    return "?";
}

float round_bf16(float x) {
    std::uint32_t u = std::bit_cast<std::uint32_t>(x);
    if (std::isnan(x)) {
        // Quiet NaN with a set payload bit that survives truncation.
        return std::bit_cast<float>((u & 0xffff0000u) | 0x00410000u);
    }
    std::uint32_t lsb = (u >> 16) & 1u;
    u += 0x7fffu + lsb;
    u &= 0xffff0000u;
    return std::bit_cast<float>(u);
}

TensorDescriptor::TensorDescriptor(std::vector<std::int64_t> d,
                                   std::vector<std::int64_t> s, ElementType t)
    : dims(std::move(d)), strides(std::move(s)), etype(t) {
    if (dims.size() != strides.size())
        throw_error(ErrorCode::InvalidShape, "dims/strides rank mismatch");
    for (auto x : dims)
        if (x < 1) throw_error(ErrorCode::InvalidShape, "dims must be >= 1");
    for (auto x : strides)
        if (x < 0) throw_error(ErrorCode::InvalidShape, "strides must be >= 0");
}

TensorDescriptor TensorDescriptor::packed(std::vector<std::int64_t> dims,
                                          ElementType t) {
    std::vector<std::int64_t> strides(dims.size());
    std::int64_t step = 1;
    for (std::size_t i = dims.size(); i-- > 0;) {
        strides[i] = step;
        step *= dims[i];
    }
    return TensorDescriptor(std::move(dims), std::move(strides), t);
}

std::int64_t TensorDescriptor::elem_count() const {
    std::int64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
}

std::int64_t TensorDescriptor::storage_size() const {
    std::int64_t last = 0;
    for (std::size_t i = 0; i < dims.size(); ++i)
        last += (dims[i] - 1) * strides[i];
    return last + 1;
}

bool TensorDescriptor::is_packed() const {
    return *this == packed(dims, etype);
}

Tensor::Tensor(TensorDescriptor desc)
    : desc_(std::move(desc)),
      data_(static_cast<std::size_t>(desc_.storage_size()), 0.0f) {}

Tensor::Tensor(TensorDescriptor desc, std::vector<float> data)
    : desc_(std::move(desc)), data_(std::move(data)) {
    if (static_cast<std::int64_t>(data_.size()) != desc_.storage_size())
        throw_error(ErrorCode::ShapeMismatch, "data length does not match descriptor");
    if (desc_.etype == ElementType::BF16) quantize();
}

Tensor Tensor::packed(std::vector<std::int64_t> dims, ElementType t) {
    return Tensor(TensorDescriptor::packed(std::move(dims), t));
}

void Tensor::set(std::int64_t linear, float v) {
    data_[linear] = desc_.etype == ElementType::BF16 ? round_bf16(v) : v;
}

void Tensor::quantize() {
    if (desc_.etype != ElementType::BF16) return;
    for (auto& v : data_) v = round_bf16(v);
}

namespace {

float apply_op(TensorOpKind kind, float a, float b) {
    switch (kind) {
        case TensorOpKind::Add: return a + b;
        case TensorOpKind::Mul: return a * b;
        case TensorOpKind::Min: return std::min(a, b);
        case TensorOpKind::Max: return std::max(a, b);
    }
    return 0.0f;
}

}  // namespace

Tensor tensor_op(TensorOpKind kind, float alpha, const Tensor& a, float beta,
                 const Tensor& b) {
    const auto& ad = a.desc();
    const auto& bd = b.desc();
    if (ad.rank() != bd.rank())
        throw_error(ErrorCode::ShapeMismatch, "tensor_op rank mismatch");
    for (std::int64_t i = 0; i < ad.rank(); ++i)
        if (bd.dims[i] != ad.dims[i] && bd.dims[i] != 1)
            throw_error(ErrorCode::ShapeMismatch,
                        "tensor_op operand not broadcastable");

    Tensor out(TensorDescriptor::packed(ad.dims, ad.etype));
    const std::int64_t rank = ad.rank();
    std::vector<std::int64_t> idx(rank, 0);
    const std::int64_t total = ad.elem_count();
    for (std::int64_t lin = 0; lin < total; ++lin) {
        std::int64_t aoff = 0, boff = 0;
        for (std::int64_t i = 0; i < rank; ++i) {
            aoff += idx[i] * ad.strides[i];
            boff += (bd.dims[i] == 1 ? 0 : idx[i]) * bd.strides[i];
        }
        out.set(lin, apply_op(kind, alpha * a.at(aoff), beta * b.at(boff)));
        for (std::int64_t i = rank - 1; i >= 0; --i) {
            if (++idx[i] < ad.dims[i]) break;
            idx[i] = 0;
        }
    }
    return out;
}

void gemm(OpCounters& counters, bool trans_a, bool trans_b, std::int64_t m,
          std::int64_t n, std::int64_t k, float alpha, const float* a,
          std::int64_t lda, const float* b, std::int64_t ldb, float beta,
          float* c, std::int64_t ldc) {
    if (m < 0 || n < 0 || k < 0)
        throw_error(ErrorCode::ShapeMismatch, "gemm negative extent");
    counters.gemm_calls += 1;
    counters.scalar_muls += static_cast<std::uint64_t>(m) * n * k;

    auto a_at = [&](std::int64_t i, std::int64_t p) {
        return trans_a ? a[p * lda + i] : a[i * lda + p];
    };
    auto b_at = [&](std::int64_t p, std::int64_t j) {
        return trans_b ? b[j * ldb + p] : b[p * ldb + j];
    };

    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j)
            c[i * ldc + j] = beta == 0.0f ? 0.0f : beta * c[i * ldc + j];

    constexpr std::int64_t kBlock = 64;
    for (std::int64_t i0 = 0; i0 < m; i0 += kBlock) {
        const std::int64_t i1 = std::min(i0 + kBlock, m);
        for (std::int64_t p0 = 0; p0 < k; p0 += kBlock) {
            const std::int64_t p1 = std::min(p0 + kBlock, k);
            for (std::int64_t i = i0; i < i1; ++i) {
                for (std::int64_t p = p0; p < p1; ++p) {
                    const float av = alpha * a_at(i, p);
                    if (av == 0.0f) continue;
                    if (!trans_b) {
                        const float* brow = b + p * ldb;
                        float* crow = c + i * ldc;
                        for (std::int64_t j = 0; j < n; ++j)
                            crow[j] += av * brow[j];
                    } else {
                        for (std::int64_t j = 0; j < n; ++j)
                            c[i * ldc + j] += av * b_at(p, j);
                    }
                }
            }
        }
    }
}

}  // namespace primkit
