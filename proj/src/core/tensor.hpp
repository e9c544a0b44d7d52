#pragma once

#include <cstdint>
#include <vector>

#include "core/errors.hpp"

namespace primkit {

enum class ElementType { F32, BF16 };

const char* element_type_name(ElementType t);

// Round a f32 value to the nearest bfloat16 (round-to-nearest-even) and widen
// back to f32. NaN maps to a quiet NaN, infinities are preserved.
float round_bf16(float x);

// Per-handle instrumentation counters. gemm_calls/scalar_muls track arithmetic
// routed through the library GEMM and the transformed-domain kernels;
// buffer_roundtrips counts tensor writes that cross a plan-step boundary.
struct OpCounters {
    std::uint64_t gemm_calls = 0;
    std::uint64_t scalar_muls = 0;
    std::uint64_t buffer_roundtrips = 0;

    void reset() { *this = OpCounters{}; }
};

struct TensorDescriptor {
    std::vector<std::int64_t> dims;
    std::vector<std::int64_t> strides;
    ElementType etype = ElementType::F32;

    TensorDescriptor() = default;
    TensorDescriptor(std::vector<std::int64_t> d, std::vector<std::int64_t> s,
                     ElementType t);

    // Dense row-major descriptor (NCHW for 4-D dims).
    static TensorDescriptor packed(std::vector<std::int64_t> dims,
                                   ElementType t = ElementType::F32);

    std::int64_t rank() const { return static_cast<std::int64_t>(dims.size()); }
    std::int64_t elem_count() const;
    // Highest linear index addressable through (dims, strides), plus one.
    std::int64_t storage_size() const;
    bool is_packed() const;

    bool operator==(const TensorDescriptor&) const = default;
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(TensorDescriptor desc);
    Tensor(TensorDescriptor desc, std::vector<float> data);

    static Tensor packed(std::vector<std::int64_t> dims,
                         ElementType t = ElementType::F32);

    const TensorDescriptor& desc() const { return desc_; }
    ElementType etype() const { return desc_.etype; }
    const std::vector<std::int64_t>& dims() const { return desc_.dims; }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }

    float at(std::int64_t linear) const { return data_[linear]; }
    // Stores through set() honour BF16 rounding.
    void set(std::int64_t linear, float v);
    // Re-rounds the whole buffer; used after bulk writes through data().
    void quantize();

private:
    TensorDescriptor desc_;
    std::vector<float> data_;
};

enum class TensorOpKind { Add, Mul, Min, Max };

// Elementwise kind(alpha*A, beta*B) with B broadcast against A's shape.
Tensor tensor_op(TensorOpKind kind, float alpha, const Tensor& a, float beta,
                 const Tensor& b);

// C <- alpha*op(A)*op(B) + beta*C, row-major with leading dimensions.
// Counts one gemm call and M*N*K scalar multiplies.
void gemm(OpCounters& counters, bool trans_a, bool trans_b, std::int64_t m,
          std::int64_t n, std::int64_t k, float alpha, const float* a,
          std::int64_t lda, const float* b, std::int64_t ldb, float beta,
          float* c, std::int64_t ldc);

}  // namespace primkit
