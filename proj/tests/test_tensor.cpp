#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "core/tensor.hpp"
#include "test_util.hpp"

using namespace primkit;

TEST_CASE("round_bf16 exact values") {
    CHECK(round_bf16(1.0f) == 1.0f);
    CHECK(round_bf16(0.0f) == 0.0f);
    CHECK(round_bf16(-0.0f) == -0.0f);
    CHECK(round_bf16(2.0f) == 2.0f);
    CHECK(round_bf16(-3.5f) == -3.5f);
}

TEST_CASE("round_bf16 tie goes to even") {
    // 1 + 2^-8 = 0x3F808000: the dropped half is exactly 0.5 ulp and the
    // kept mantissa lsb is 0, so round-to-nearest-even keeps 1.0.
    const float tie = 1.00390625f;
    CHECK(round_bf16(tie) == 1.0f);
    // 1 + 3*2^-8 = 0x3F818000: kept lsb is 1, so the tie rounds up.
    const float tie_up = 1.01171875f;
    CHECK(round_bf16(tie_up) == 1.015625f);
}

TEST_CASE("round_bf16 specials") {
    CHECK(std::isinf(round_bf16(std::numeric_limits<float>::infinity())));
    CHECK(round_bf16(-std::numeric_limits<float>::infinity()) < 0.0f);
    CHECK(std::isnan(round_bf16(std::numeric_limits<float>::quiet_NaN())));
}

TEST_CASE("round_bf16 is idempotent on randoms") {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<float> dist(-1e6f, 1e6f);
    for (int i = 0; i < 10000; ++i) {
        const float r = round_bf16(dist(rng));
        CHECK(round_bf16(r) == r);
        // Low 16 mantissa bits are zero after rounding.
        std::uint32_t u;
        std::memcpy(&u, &r, 4);
        CHECK((u & 0xffffu) == 0u);
    }
}

TEST_CASE("packed descriptor strides") {
    const auto d = TensorDescriptor::packed({2, 3, 4, 5});
    CHECK(d.strides == std::vector<std::int64_t>{60, 20, 5, 1});
    CHECK(d.elem_count() == 120);
    CHECK(d.storage_size() == 120);
    CHECK(d.is_packed());
}

TEST_CASE("descriptor rejects non-positive dims") {
    CHECK_THROWS_AS(TensorDescriptor::packed({2, 0, 3}), Error);
}

TEST_CASE("bf16 tensors store fixed points of round_bf16") {
    std::mt19937_64 rng(11);
    Tensor t = testutil::random_tensor({3, 4, 5, 2}, rng, ElementType::BF16);
    for (std::int64_t i = 0; i < t.size(); ++i)
        CHECK(round_bf16(t.at(i)) == t.at(i));
}

TEST_CASE("tensor_op add basic") {
    Tensor a(TensorDescriptor::packed({2}), {1.0f, 2.0f});
    Tensor b(TensorDescriptor::packed({2}), {3.0f, 4.0f});
    const Tensor r = tensor_op(TensorOpKind::Add, 1.0f, a, 1.0f, b);
    CHECK(r.at(0) == 4.0f);
    CHECK(r.at(1) == 6.0f);
}

TEST_CASE("tensor_op beta zero is identity") {
    std::mt19937_64 rng(3);
    Tensor a = testutil::random_tensor({2, 3}, rng);
    Tensor b = testutil::random_tensor({2, 3}, rng);
    const Tensor r = tensor_op(TensorOpKind::Add, 1.0f, a, 0.0f, b);
    for (std::int64_t i = 0; i < a.size(); ++i) CHECK(r.at(i) == a.at(i));
}

TEST_CASE("tensor_op scalar broadcast mul") {
    Tensor a(TensorDescriptor::packed({3}), {1.0f, 2.0f, 3.0f});
    Tensor b(TensorDescriptor::packed({1}), {5.0f});
    const Tensor r = tensor_op(TensorOpKind::Mul, 2.0f, a, 1.0f, b);
    CHECK(r.at(0) == 10.0f);
    CHECK(r.at(1) == 20.0f);
    CHECK(r.at(2) == 30.0f);
}

TEST_CASE("tensor_op channel broadcast against NCHW") {
    std::mt19937_64 rng(4);
    Tensor a = testutil::random_tensor({2, 3, 4, 4}, rng);
    Tensor b = testutil::random_tensor({1, 3, 1, 1}, rng);
    const Tensor r = tensor_op(TensorOpKind::Add, 1.0f, a, 1.0f, b);
    for (std::int64_t n = 0; n < 2; ++n)
        for (std::int64_t c = 0; c < 3; ++c)
            for (std::int64_t i = 0; i < 16; ++i) {
                const std::int64_t idx = (n * 3 + c) * 16 + i;
                CHECK(r.at(idx) == doctest::Approx(a.at(idx) + b.at(c)));
            }
}

TEST_CASE("tensor_op min and max") {
    Tensor a(TensorDescriptor::packed({3}), {1.0f, -2.0f, 3.0f});
    Tensor b(TensorDescriptor::packed({3}), {0.5f, 5.0f, -1.0f});
    const Tensor lo = tensor_op(TensorOpKind::Min, 1.0f, a, 1.0f, b);
    const Tensor hi = tensor_op(TensorOpKind::Max, 1.0f, a, 1.0f, b);
    CHECK(lo.at(0) == 0.5f);
    CHECK(lo.at(1) == -2.0f);
    CHECK(lo.at(2) == -1.0f);
    CHECK(hi.at(0) == 1.0f);
    CHECK(hi.at(1) == 5.0f);
    CHECK(hi.at(2) == 3.0f);
}

TEST_CASE("tensor_op add commutes for equal shapes") {
    std::mt19937_64 rng(5);
    Tensor a = testutil::random_tensor({4, 7}, rng);
    Tensor b = testutil::random_tensor({4, 7}, rng);
    const Tensor ab = tensor_op(TensorOpKind::Add, 1.0f, a, 1.0f, b);
    const Tensor ba = tensor_op(TensorOpKind::Add, 1.0f, b, 1.0f, a);
    for (std::int64_t i = 0; i < ab.size(); ++i) CHECK(ab.at(i) == ba.at(i));
}

TEST_CASE("tensor_op rejects non-broadcastable shapes") {
    std::mt19937_64 rng(6);
    Tensor a = testutil::random_tensor({2, 3}, rng);
    Tensor b = testutil::random_tensor({2, 2}, rng);
    CHECK_THROWS_AS(tensor_op(TensorOpKind::Add, 1.0f, a, 1.0f, b), Error);
}

namespace {

// Plain triple loop, no blocking; the reference the library GEMM must match.
std::vector<float> gemm_oracle(bool ta, bool tb, std::int64_t m, std::int64_t n,
                               std::int64_t k, float alpha,
                               const std::vector<float>& a,
                               const std::vector<float>& b, float beta,
                               std::vector<float> c) {
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::int64_t p = 0; p < k; ++p) {
                const float av = ta ? a[static_cast<std::size_t>(p * m + i)]
                                    : a[static_cast<std::size_t>(i * k + p)];
                const float bv = tb ? b[static_cast<std::size_t>(j * k + p)]
                                    : b[static_cast<std::size_t>(p * n + j)];
                acc += static_cast<double>(av) * bv;
            }
            auto& cv = c[static_cast<std::size_t>(i * n + j)];
            cv = static_cast<float>(alpha * acc + beta * cv);
        }
    return c;
}

}  // namespace

TEST_CASE("gemm identity") {
    OpCounters ctr;
    std::vector<float> a = {1, 0, 0, 1};
    std::vector<float> b = {1, 2, 3, 4};
    std::vector<float> c(4, 0.0f);
    gemm(ctr, false, false, 2, 2, 2, 1.0f, a.data(), 2, b.data(), 2, 0.0f,
         c.data(), 2);
    CHECK(c == b);
}

TEST_CASE("gemm alpha zero keeps C") {
    OpCounters ctr;
    std::vector<float> a = {9};
    std::vector<float> b = {9};
    std::vector<float> c = {7};
    gemm(ctr, false, false, 1, 1, 1, 0.0f, a.data(), 1, b.data(), 1, 1.0f,
         c.data(), 1);
    CHECK(c[0] == 7.0f);
}

TEST_CASE("gemm 2x2 worked example") {
    OpCounters ctr;
    std::vector<float> a = {1, 2, 3, 4};
    std::vector<float> b = {5, 6, 7, 8};
    std::vector<float> c(4, 0.0f);
    gemm(ctr, false, false, 2, 2, 2, 1.0f, a.data(), 2, b.data(), 2, 0.0f,
         c.data(), 2);
    CHECK(c == std::vector<float>{19, 22, 43, 50});
}

TEST_CASE("gemm counters") {
    OpCounters ctr;
    std::vector<float> a(3 * 5), b(5 * 4), c(3 * 4);
    gemm(ctr, false, false, 3, 4, 5, 1.0f, a.data(), 5, b.data(), 4, 0.0f,
         c.data(), 4);
    CHECK(ctr.gemm_calls == 1);
    CHECK(ctr.scalar_muls == 3 * 4 * 5);
    gemm(ctr, false, false, 3, 4, 5, 1.0f, a.data(), 5, b.data(), 4, 0.0f,
         c.data(), 4);
    CHECK(ctr.gemm_calls == 2);
}

TEST_CASE("gemm matches triple loop across transpose flags") {
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
    for (int ta = 0; ta < 2; ++ta)
        for (int tb = 0; tb < 2; ++tb)
            for (int iter = 0; iter < 8; ++iter) {
                const std::int64_t m = 1 + static_cast<std::int64_t>(rng() % 9);
                const std::int64_t n = 1 + static_cast<std::int64_t>(rng() % 9);
                const std::int64_t k = 1 + static_cast<std::int64_t>(rng() % 9);
                std::vector<float> a(static_cast<std::size_t>(m * k));
                std::vector<float> b(static_cast<std::size_t>(k * n));
                std::vector<float> c(static_cast<std::size_t>(m * n));
                for (auto& v : a) v = dist(rng);
                for (auto& v : b) v = dist(rng);
                for (auto& v : c) v = dist(rng);
                const float alpha = dist(rng), beta = dist(rng);
                const auto want =
                    gemm_oracle(ta, tb, m, n, k, alpha, a, b, beta, c);
                OpCounters ctr;
                gemm(ctr, ta, tb, m, n, k, alpha, a.data(), ta ? m : k,
                     b.data(), tb ? k : n, beta, c.data(), n);
                for (std::size_t i = 0; i < c.size(); ++i)
                    CHECK(std::abs(c[i] - want[i]) <=
                          1e-6 * std::max(1.0f, std::abs(want[i])));
            }
}

TEST_CASE("big gemm matches triple loop") {
    std::mt19937_64 rng(13);
    std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
    const std::int64_t m = 70, n = 65, k = 130;  // crosses the 64 blocking
    std::vector<float> a(static_cast<std::size_t>(m * k));
    std::vector<float> b(static_cast<std::size_t>(k * n));
    std::vector<float> c(static_cast<std::size_t>(m * n), 0.0f);
    for (auto& v : a) v = dist(rng);
    for (auto& v : b) v = dist(rng);
    const auto want = gemm_oracle(false, false, m, n, k, 1.0f, a, b, 0.0f, c);
    OpCounters ctr;
    gemm(ctr, false, false, m, n, k, 1.0f, a.data(), k, b.data(), n, 0.0f,
         c.data(), n);
    for (std::size_t i = 0; i < c.size(); ++i)
        CHECK(std::abs(c[i] - want[i]) <= 1e-5 * std::max(1.0f, std::abs(want[i])));
}
