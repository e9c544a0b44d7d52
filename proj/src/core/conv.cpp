#include "core/conv.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstring>
#include <vector>

namespace primkit {

namespace {

struct ConvShapes {
    std::int64_t n, c, h, w;      // input image
    std::int64_t k, y, x;         // filter
    std::int64_t oh, ow;          // output image
    std::int64_t cg, kg;          // channels per group
    std::int64_t groups;
};

ConvShapes resolve_shapes(const TensorDescriptor& input,
                          const TensorDescriptor& filter,
                          const ConvDescriptor& conv) {
    if (input.rank() != 4 || filter.rank() != 4)
        throw_error(ErrorCode::InvalidShape, "convolution expects 4-D tensors");
    if (!input.is_packed() || !filter.is_packed())
        throw_error(ErrorCode::InvalidShape, "convolution expects packed tensors");
    if (conv.stride_h < 1 || conv.stride_w < 1 || conv.dilation_h < 1 ||
        conv.dilation_w < 1 || conv.pad_h < 0 || conv.pad_w < 0 ||
        conv.group_count < 1)
        throw_error(ErrorCode::InvalidValue, "bad convolution descriptor");
    if (conv.mode == ConvMode::Transpose &&
        (conv.dilation_h != 1 || conv.dilation_w != 1))
        throw_error(ErrorCode::InvalidValue, "transpose mode requires dilation 1");

    ConvShapes s{};
    s.n = input.dims[0];
    s.c = input.dims[1];
    s.h = input.dims[2];
    s.w = input.dims[3];
    s.groups = conv.group_count;
    s.y = filter.dims[2];
    s.x = filter.dims[3];

    if (conv.mode == ConvMode::Convolution) {
        // filter [K, C/g, Y, X]
        s.k = filter.dims[0];
        if (s.c % s.groups != 0 || s.k % s.groups != 0)
            throw_error(ErrorCode::GroupMismatch,
                        "group count must divide input and output channels");
        if (filter.dims[1] != s.c / s.groups)
            throw_error(ErrorCode::ShapeMismatch,
                        "filter channel extent does not match input/groups");
        s.oh = (s.h + 2 * conv.pad_h - conv.dilation_h * (s.y - 1) - 1) /
                   conv.stride_h + 1;
        s.ow = (s.w + 2 * conv.pad_w - conv.dilation_w * (s.x - 1) - 1) /
                   conv.stride_w + 1;
        if (s.h + 2 * conv.pad_h < conv.dilation_h * (s.y - 1) + 1 ||
            s.w + 2 * conv.pad_w < conv.dilation_w * (s.x - 1) + 1)
            s.oh = 0;  // force the check below
    } else {
        // filter [C, K/g, Y, X]
        if (filter.dims[0] != s.c)
            throw_error(ErrorCode::ShapeMismatch,
                        "transpose filter leading extent must match input channels");
        s.k = filter.dims[1] * s.groups;
        if (s.c % s.groups != 0)
            throw_error(ErrorCode::GroupMismatch,
                        "group count must divide input channels");
        s.oh = conv.stride_h * (s.h - 1) + s.y - 2 * conv.pad_h;
        s.ow = conv.stride_w * (s.w - 1) + s.x - 2 * conv.pad_w;
    }
    if (s.oh < 1 || s.ow < 1)
        throw_error(ErrorCode::InvalidShape, "output extent below 1");
    s.cg = s.c / s.groups;
    s.kg = s.k / s.groups;
    return s;
}

// Float workspace view with the buffer start aligned by the allocator.
float* workspace_floats(std::span<std::byte> ws, std::size_t need_bytes) {
    if (ws.size() < need_bytes)
        throw_error(ErrorCode::WorkspaceTooSmall, "workspace below requested size");
    return reinterpret_cast<float*>(ws.data());
}

void require(bool ok, const char* what) {
    if (!ok) throw_error(ErrorCode::AlgoNotApplicable, what);
}

Tensor make_output(const ConvShapes& s, ElementType etype) {
    return Tensor::packed({s.n, s.k, s.oh, s.ow}, etype);
}

// ---------------------------------------------------------------------------
// Direct algorithm: fixed (n, k, oh, ow, c, y, x) loop nest. Doubles as the
// correctness oracle for every other algorithm.

void direct_forward(OpCounters& ctr, const Tensor& in, const Tensor& flt,
                    const ConvDescriptor& cv, const ConvShapes& s, Tensor& out) {
    const float* I = in.data();
    const float* F = flt.data();
    float* O = out.data();
    ctr.scalar_muls += static_cast<std::uint64_t>(s.n) * s.k * s.oh * s.ow *
                       s.cg * s.y * s.x;
    for (std::int64_t n = 0; n < s.n; ++n)
        for (std::int64_t k = 0; k < s.k; ++k) {
            const std::int64_t g = k / s.kg;
            for (std::int64_t oh = 0; oh < s.oh; ++oh)
                for (std::int64_t ow = 0; ow < s.ow; ++ow) {
                    float acc = 0.0f;
                    for (std::int64_t c = 0; c < s.cg; ++c) {
                        const float* ip =
                            I + ((n * s.c + g * s.cg + c) * s.h) * s.w;
                        const float* fp =
                            F + ((k * s.cg + c) * s.y) * s.x;
                        for (std::int64_t y = 0; y < s.y; ++y) {
                            const std::int64_t ih =
                                oh * cv.stride_h - cv.pad_h + y * cv.dilation_h;
                            if (ih < 0 || ih >= s.h) continue;
                            for (std::int64_t x = 0; x < s.x; ++x) {
                                const std::int64_t iw = ow * cv.stride_w -
                                                        cv.pad_w +
                                                        x * cv.dilation_w;
                                if (iw < 0 || iw >= s.w) continue;
                                acc += ip[ih * s.w + iw] * fp[y * s.x + x];
                            }
                        }
                    }
                    O[((n * s.k + k) * s.oh + oh) * s.ow + ow] = acc;
                }
        }
}

void direct_transpose_forward(OpCounters& ctr, const Tensor& in,
                              const Tensor& flt, const ConvDescriptor& cv,
                              const ConvShapes& s, Tensor& out) {
    const float* I = in.data();
    const float* F = flt.data();
    float* O = out.data();
    ctr.scalar_muls += static_cast<std::uint64_t>(s.n) * s.k * s.oh * s.ow *
                       s.cg * s.y * s.x;
    for (std::int64_t n = 0; n < s.n; ++n)
        for (std::int64_t k = 0; k < s.k; ++k) {
            const std::int64_t g = k / s.kg;
            const std::int64_t kg = k % s.kg;
            for (std::int64_t oh = 0; oh < s.oh; ++oh)
                for (std::int64_t ow = 0; ow < s.ow; ++ow) {
                    float acc = 0.0f;
                    for (std::int64_t c = 0; c < s.cg; ++c) {
                        const float* ip =
                            I + ((n * s.c + g * s.cg + c) * s.h) * s.w;
                        const float* fp =
                            F + (((g * s.cg + c) * s.kg + kg) * s.y) * s.x;
                        for (std::int64_t y = 0; y < s.y; ++y) {
                            const std::int64_t num_h = oh + cv.pad_h - y;
                            if (num_h < 0 || num_h % cv.stride_h != 0) continue;
                            const std::int64_t ih = num_h / cv.stride_h;
                            if (ih >= s.h) continue;
                            for (std::int64_t x = 0; x < s.x; ++x) {
                                const std::int64_t num_w = ow + cv.pad_w - x;
                                if (num_w < 0 || num_w % cv.stride_w != 0)
                                    continue;
                                const std::int64_t iw = num_w / cv.stride_w;
                                if (iw >= s.w) continue;
                                acc += ip[ih * s.w + iw] * fp[y * s.x + x];
                            }
                        }
                    }
                    O[((n * s.k + k) * s.oh + oh) * s.ow + ow] = acc;
                }
        }
}

// ---------------------------------------------------------------------------
// im2col + GEMM

void fill_im2col(const float* in_plane_base, const ConvDescriptor& cv,
                 const ConvShapes& s, float* col) {
    // col is [(cg*y*x) x (oh*ow)], row-major; in_plane_base points at the
    // first channel of the (n, group) slice.
    const std::int64_t cols = s.oh * s.ow;
    for (std::int64_t c = 0; c < s.cg; ++c) {
        const float* ip = in_plane_base + c * s.h * s.w;
        for (std::int64_t y = 0; y < s.y; ++y)
            for (std::int64_t x = 0; x < s.x; ++x) {
                float* row = col + ((c * s.y + y) * s.x + x) * cols;
                for (std::int64_t oh = 0; oh < s.oh; ++oh) {
                    const std::int64_t ih =
                        oh * cv.stride_h - cv.pad_h + y * cv.dilation_h;
                    for (std::int64_t ow = 0; ow < s.ow; ++ow) {
                        const std::int64_t iw =
                            ow * cv.stride_w - cv.pad_w + x * cv.dilation_w;
                        row[oh * s.ow + ow] =
                            (ih >= 0 && ih < s.h && iw >= 0 && iw < s.w)
                                ? ip[ih * s.w + iw]
                                : 0.0f;
                    }
                }
            }
    }
}

void im2col_forward(OpCounters& ctr, const Tensor& in, const Tensor& flt,
                    const ConvDescriptor& cv, const ConvShapes& s,
                    std::span<std::byte> ws, Tensor& out) {
    const std::int64_t col_rows = s.cg * s.y * s.x;
    const std::int64_t col_cols = s.oh * s.ow;
    float* col = workspace_floats(
        ws, static_cast<std::size_t>(col_rows * col_cols) * sizeof(float));
    for (std::int64_t n = 0; n < s.n; ++n)
        for (std::int64_t g = 0; g < s.groups; ++g) {
            fill_im2col(in.data() + ((n * s.c + g * s.cg) * s.h) * s.w, cv, s,
                        col);
            gemm(ctr, false, false, s.kg, col_cols, col_rows, 1.0f,
                 flt.data() + g * s.kg * col_rows, col_rows, col, col_cols,
                 0.0f,
                 out.data() + ((n * s.k + g * s.kg) * s.oh) * s.ow, col_cols);
        }
}

// Scatters a [(kg*y*x) x (h*w)] column matrix into the transpose-convolution
// output geometry.
void col2im_transpose(const float* col, const ConvDescriptor& cv,
                      const ConvShapes& s, float* out_group) {
    const std::int64_t cols = s.h * s.w;
    for (std::int64_t kg = 0; kg < s.kg; ++kg)
        for (std::int64_t y = 0; y < s.y; ++y)
            for (std::int64_t x = 0; x < s.x; ++x) {
                const float* row = col + ((kg * s.y + y) * s.x + x) * cols;
                for (std::int64_t h = 0; h < s.h; ++h) {
                    const std::int64_t oh = cv.stride_h * h - cv.pad_h + y;
                    if (oh < 0 || oh >= s.oh) continue;
                    for (std::int64_t w = 0; w < s.w; ++w) {
                        const std::int64_t ow = cv.stride_w * w - cv.pad_w + x;
                        if (ow < 0 || ow >= s.ow) continue;
                        out_group[(kg * s.oh + oh) * s.ow + ow] +=
                            row[h * s.w + w];
                    }
                }
            }
}

void im2col_transpose_forward(OpCounters& ctr, const Tensor& in,
                              const Tensor& flt, const ConvDescriptor& cv,
                              const ConvShapes& s, std::span<std::byte> ws,
                              Tensor& out) {
    const std::int64_t rows = s.kg * s.y * s.x;
    const std::int64_t cols = s.h * s.w;
    float* col = workspace_floats(
        ws, static_cast<std::size_t>(rows * cols) * sizeof(float));
    std::fill(out.data(), out.data() + out.size(), 0.0f);
    for (std::int64_t n = 0; n < s.n; ++n)
        for (std::int64_t g = 0; g < s.groups; ++g) {
            // filter slice [cg x (kg*y*x)]; col = Wg^T * Xg
            gemm(ctr, true, false, rows, cols, s.cg, 1.0f,
                 flt.data() + g * s.cg * rows, rows,
                 in.data() + ((n * s.c + g * s.cg) * s.h) * s.w, cols, 0.0f,
                 col, cols);
            col2im_transpose(col, cv, s,
                             out.data() + ((n * s.k + g * s.kg) * s.oh) * s.ow);
        }
}

// ---------------------------------------------------------------------------
// Winograd F(2x2,3x3): 4x4 input tiles, 16 transformed-domain multiplies per
// (channel, tile) against 36 for the direct method.

void winograd_forward(OpCounters& ctr, const Tensor& in, const Tensor& flt,
                      const ConvDescriptor& cv, const ConvShapes& s,
                      Tensor& out) {
    require(s.y == 3 && s.x == 3, "winograd handles 3x3 filters only");
    require(cv.stride_h == 1 && cv.stride_w == 1, "winograd requires stride 1");
    require(cv.dilation_h == 1 && cv.dilation_w == 1,
            "winograd requires dilation 1");
    require(cv.mode == ConvMode::Convolution, "winograd is forward-convolution only");

    // U = G g G^T for every (k, c), computed once per call.
    std::vector<float> U(static_cast<std::size_t>(s.k * s.cg * 16));
    for (std::int64_t k = 0; k < s.k; ++k)
        for (std::int64_t c = 0; c < s.cg; ++c) {
            const float* g = flt.data() + ((k * s.cg + c) * 3) * 3;
            float t[4][3];
            for (int j = 0; j < 3; ++j) {
                t[0][j] = g[0 * 3 + j];
                t[1][j] = 0.5f * (g[0 * 3 + j] + g[1 * 3 + j] + g[2 * 3 + j]);
                t[2][j] = 0.5f * (g[0 * 3 + j] - g[1 * 3 + j] + g[2 * 3 + j]);
                t[3][j] = g[2 * 3 + j];
            }
            float* u = U.data() + (k * s.cg + c) * 16;
            for (int i = 0; i < 4; ++i) {
                u[i * 4 + 0] = t[i][0];
                u[i * 4 + 1] = 0.5f * (t[i][0] + t[i][1] + t[i][2]);
                u[i * 4 + 2] = 0.5f * (t[i][0] - t[i][1] + t[i][2]);
                u[i * 4 + 3] = t[i][2];
            }
        }

    const std::int64_t th = (s.oh + 1) / 2;
    const std::int64_t tw = (s.ow + 1) / 2;
    for (std::int64_t n = 0; n < s.n; ++n)
        for (std::int64_t k = 0; k < s.k; ++k) {
            const std::int64_t g = k / s.kg;
            for (std::int64_t ti = 0; ti < th; ++ti)
                for (std::int64_t tj = 0; tj < tw; ++tj) {
                    float M[16] = {0};
                    for (std::int64_t c = 0; c < s.cg; ++c) {
                        // Gather the 4x4 input patch with zero padding.
                        float d[4][4];
                        const float* ip =
                            in.data() +
                            ((n * s.c + g * s.cg + c) * s.h) * s.w;
                        for (int i = 0; i < 4; ++i) {
                            const std::int64_t ih = 2 * ti - cv.pad_h + i;
                            for (int j = 0; j < 4; ++j) {
                                const std::int64_t iw = 2 * tj - cv.pad_w + j;
                                d[i][j] = (ih >= 0 && ih < s.h && iw >= 0 &&
                                           iw < s.w)
                                              ? ip[ih * s.w + iw]
                                              : 0.0f;
                            }
                        }
                        // V = B^T d B (additions only).
                        float t[4][4], V[4][4];
                        for (int j = 0; j < 4; ++j) {
                            t[0][j] = d[0][j] - d[2][j];
                            t[1][j] = d[1][j] + d[2][j];
                            t[2][j] = d[2][j] - d[1][j];
                            t[3][j] = d[1][j] - d[3][j];
                        }
                        for (int i = 0; i < 4; ++i) {
                            V[i][0] = t[i][0] - t[i][2];
                            V[i][1] = t[i][1] + t[i][2];
                            V[i][2] = t[i][2] - t[i][1];
                            V[i][3] = t[i][1] - t[i][3];
                        }
                        const float* u = U.data() + (k * s.cg + c) * 16;
                        for (int e = 0; e < 16; ++e)
                            M[e] += u[e] * V[e / 4][e % 4];
                        ctr.scalar_muls += 16;
                    }
                    // Y = A^T M A.
                    float r[2][4];
                    for (int j = 0; j < 4; ++j) {
                        r[0][j] = M[0 * 4 + j] + M[1 * 4 + j] + M[2 * 4 + j];
                        r[1][j] = M[1 * 4 + j] - M[2 * 4 + j] - M[3 * 4 + j];
                    }
                    float yv[2][2];
                    for (int i = 0; i < 2; ++i) {
                        yv[i][0] = r[i][0] + r[i][1] + r[i][2];
                        yv[i][1] = r[i][1] - r[i][2] - r[i][3];
                    }
                    float* op = out.data() + ((n * s.k + k) * s.oh) * s.ow;
                    for (int i = 0; i < 2; ++i) {
                        const std::int64_t oh = 2 * ti + i;
                        if (oh >= s.oh) continue;
                        for (int j = 0; j < 2; ++j) {
                            const std::int64_t ow = 2 * tj + j;
                            if (ow >= s.ow) continue;
                            op[oh * s.ow + ow] = yv[i][j];
                        }
                    }
                }
        }
}

// ---------------------------------------------------------------------------
// FFT: zero-pad image and filter to the next power of two covering the full
// linear correlation, pointwise spectrum multiply, inverse transform.

std::int64_t next_pow2(std::int64_t v) {
    std::int64_t p = 1;
    while (p < v) p <<= 1;
    return p;
}

void fft1d(std::complex<double>* a, std::int64_t n, bool inverse) {
    for (std::int64_t i = 1, j = 0; i < n; ++i) {
        std::int64_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (std::int64_t len = 2; len <= n; len <<= 1) {
        const double ang = 2.0 * M_PI / static_cast<double>(len) *
                           (inverse ? 1.0 : -1.0);
        const std::complex<double> wl(std::cos(ang), std::sin(ang));
        for (std::int64_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (std::int64_t j = 0; j < len / 2; ++j) {
                const auto u = a[i + j];
                const auto v = a[i + j + len / 2] * w;
                a[i + j] = u + v;
                a[i + j + len / 2] = u - v;
                w *= wl;
            }
        }
    }
    if (inverse)
        for (std::int64_t i = 0; i < n; ++i) a[i] /= static_cast<double>(n);
}

void fft2d(std::complex<double>* a, std::int64_t ph, std::int64_t pw,
           bool inverse) {
    for (std::int64_t i = 0; i < ph; ++i) fft1d(a + i * pw, pw, inverse);
    std::vector<std::complex<double>> colbuf(static_cast<std::size_t>(ph));
    for (std::int64_t j = 0; j < pw; ++j) {
        for (std::int64_t i = 0; i < ph; ++i) colbuf[i] = a[i * pw + j];
        fft1d(colbuf.data(), ph, inverse);
        for (std::int64_t i = 0; i < ph; ++i) a[i * pw + j] = colbuf[i];
    }
}

struct FftDims {
    std::int64_t ph, pw;
};

FftDims fft_padded_dims(const ConvDescriptor& cv, const ConvShapes& s) {
    return {next_pow2(s.h + 2 * cv.pad_h + s.y - 1),
            next_pow2(s.w + 2 * cv.pad_w + s.x - 1)};
}

std::size_t fft_workspace_bytes(const ConvDescriptor& cv, const ConvShapes& s) {
    const FftDims p = fft_padded_dims(cv, s);
    const std::size_t plane = static_cast<std::size_t>(p.ph * p.pw);
    const std::size_t planes = static_cast<std::size_t>(s.cg) +
                               static_cast<std::size_t>(s.kg) * s.cg + 1;
    return planes * plane * sizeof(std::complex<double>) + 16;
}

void fft_forward(OpCounters&, const Tensor& in, const Tensor& flt,
                 const ConvDescriptor& cv, const ConvShapes& s,
                 std::span<std::byte> ws, Tensor& out) {
    require(cv.stride_h == 1 && cv.stride_w == 1, "fft requires stride 1");
    require(cv.dilation_h == 1 && cv.dilation_w == 1, "fft requires dilation 1");
    require(cv.mode == ConvMode::Convolution, "fft is forward-convolution only");
    if (ws.size() < fft_workspace_bytes(cv, s))
        throw_error(ErrorCode::WorkspaceTooSmall, "workspace below requested size");

    const FftDims p = fft_padded_dims(cv, s);
    const std::int64_t plane = p.ph * p.pw;
    auto addr = reinterpret_cast<std::uintptr_t>(ws.data());
    auto* base = reinterpret_cast<std::complex<double>*>(
        (addr + 15u) & ~static_cast<std::uintptr_t>(15u));
    std::complex<double>* in_spec = base;                       // cg planes
    std::complex<double>* flt_spec = in_spec + s.cg * plane;    // kg*cg planes
    std::complex<double>* acc = flt_spec + s.kg * s.cg * plane; // 1 plane

    for (std::int64_t g = 0; g < s.groups; ++g) {
        // Filter spectra once per (call, group); input spectra per image.
        for (std::int64_t kg = 0; kg < s.kg; ++kg)
            for (std::int64_t c = 0; c < s.cg; ++c) {
                std::complex<double>* fs = flt_spec + (kg * s.cg + c) * plane;
                std::fill(fs, fs + plane, std::complex<double>{});
                const float* fp =
                    flt.data() + (((g * s.kg + kg) * s.cg + c) * s.y) * s.x;
                for (std::int64_t yy = 0; yy < s.y; ++yy)
                    for (std::int64_t xx = 0; xx < s.x; ++xx)
                        fs[yy * p.pw + xx] = fp[yy * s.x + xx];
                fft2d(fs, p.ph, p.pw, false);
            }
        for (std::int64_t n = 0; n < s.n; ++n) {
            for (std::int64_t c = 0; c < s.cg; ++c) {
                std::complex<double>* is = in_spec + c * plane;
                std::fill(is, is + plane, std::complex<double>{});
                const float* ip =
                    in.data() + ((n * s.c + g * s.cg + c) * s.h) * s.w;
                for (std::int64_t hh = 0; hh < s.h; ++hh)
                    for (std::int64_t ww = 0; ww < s.w; ++ww)
                        is[(hh + cv.pad_h) * p.pw + ww + cv.pad_w] =
                            ip[hh * s.w + ww];
                fft2d(is, p.ph, p.pw, false);
            }
            for (std::int64_t kg = 0; kg < s.kg; ++kg) {
                std::fill(acc, acc + plane, std::complex<double>{});
                for (std::int64_t c = 0; c < s.cg; ++c) {
                    const std::complex<double>* is = in_spec + c * plane;
                    const std::complex<double>* fs =
                        flt_spec + (kg * s.cg + c) * plane;
                    for (std::int64_t e = 0; e < plane; ++e)
                        acc[e] += is[e] * std::conj(fs[e]);
                }
                fft2d(acc, p.ph, p.pw, true);
                float* op =
                    out.data() + ((n * s.k + g * s.kg + kg) * s.oh) * s.ow;
                for (std::int64_t oh = 0; oh < s.oh; ++oh)
                    for (std::int64_t ow = 0; ow < s.ow; ++ow)
                        op[oh * s.ow + ow] = static_cast<float>(
                            acc[oh * p.pw + ow].real());
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Implicit GEMM: blockwise slice into tile buffers, threadwise slice into
// micro-tiles, threadwise 1x1 convolution accumulation. The (c, y, x)
// reduction order is fixed so results do not depend on tile sizes.

void validate_tiles(const ImplicitGemmTiles& t, const ConvShapes& s) {
    if (t.tile_m < 1 || t.tile_n < 1 || t.tile_k < 1 ||
        s.kg % t.tile_m != 0 || (s.oh * s.ow) % t.tile_n != 0 ||
        s.cg % t.tile_k != 0)
        throw_error(ErrorCode::InvalidValue, "implicit-gemm tiles invalid for problem");
}

std::size_t implicit_gemm_workspace_bytes(const ImplicitGemmTiles& t,
                                          const ConvShapes& s) {
    // LDS-analog filter and image blocks plus the register-analog accumulator.
    const std::int64_t lds_w = t.tile_m * t.tile_k * s.y * s.x;
    const std::int64_t lds_i = t.tile_k * t.tile_n * s.y * s.x;
    const std::int64_t acc = t.tile_m * t.tile_n;
    return static_cast<std::size_t>(lds_w + lds_i + acc) * sizeof(float);
}

void implicit_gemm_forward(OpCounters& ctr, const Tensor& in,
                           const Tensor& flt, const ConvDescriptor& cv,
                           const ConvShapes& s, std::span<std::byte> ws,
                           const ImplicitGemmTiles& t, Tensor& out) {
    require(cv.mode == ConvMode::Convolution,
            "implicit gemm is forward-convolution only");
    require(cv.dilation_h == 1 && cv.dilation_w == 1,
            "implicit gemm requires dilation 1");
    validate_tiles(t, s);
    float* buf = workspace_floats(ws, implicit_gemm_workspace_bytes(t, s));
    float* lds_w = buf;                                    // [tm][tk][y][x]
    float* lds_i = lds_w + t.tile_m * t.tile_k * s.y * s.x;  // [tk][tn][y][x]
    float* acc = lds_i + t.tile_k * t.tile_n * s.y * s.x;    // [tm][tn]

    const std::int64_t pixels = s.oh * s.ow;
    ctr.scalar_muls += static_cast<std::uint64_t>(s.n) * s.k * pixels * s.cg *
                       s.y * s.x;
    for (std::int64_t n = 0; n < s.n; ++n)
        for (std::int64_t g = 0; g < s.groups; ++g)
            for (std::int64_t k0 = 0; k0 < s.kg; k0 += t.tile_m)
                for (std::int64_t p0 = 0; p0 < pixels; p0 += t.tile_n) {
                    std::fill(acc, acc + t.tile_m * t.tile_n, 0.0f);
                    for (std::int64_t c0 = 0; c0 < s.cg; c0 += t.tile_k) {
                        // Blockwise slice: stage the filter and image blocks.
                        for (std::int64_t m = 0; m < t.tile_m; ++m)
                            std::memcpy(
                                lds_w + m * t.tile_k * s.y * s.x,
                                flt.data() +
                                    (((g * s.kg + k0 + m) * s.cg + c0) * s.y) *
                                        s.x,
                                static_cast<std::size_t>(t.tile_k * s.y * s.x) *
                                    sizeof(float));
                        for (std::int64_t cb = 0; cb < t.tile_k; ++cb) {
                            const float* ip =
                                in.data() +
                                ((n * s.c + g * s.cg + c0 + cb) * s.h) * s.w;
                            for (std::int64_t j = 0; j < t.tile_n; ++j) {
                                const std::int64_t pix = p0 + j;
                                const std::int64_t oh = pix / s.ow;
                                const std::int64_t ow = pix % s.ow;
                                float* dst =
                                    lds_i + (cb * t.tile_n + j) * s.y * s.x;
                                for (std::int64_t y = 0; y < s.y; ++y) {
                                    const std::int64_t ih =
                                        oh * cv.stride_h - cv.pad_h + y;
                                    for (std::int64_t x = 0; x < s.x; ++x) {
                                        const std::int64_t iw =
                                            ow * cv.stride_w - cv.pad_w + x;
                                        dst[y * s.x + x] =
                                            (ih >= 0 && ih < s.h && iw >= 0 &&
                                             iw < s.w)
                                                ? ip[ih * s.w + iw]
                                                : 0.0f;
                                    }
                                }
                            }
                        }
                        // Threadwise 1x1 convolution over the micro-tiles,
                        // looping (cb, y, x) inside the C block.
                        for (std::int64_t cb = 0; cb < t.tile_k; ++cb)
                            for (std::int64_t y = 0; y < s.y; ++y)
                                for (std::int64_t x = 0; x < s.x; ++x)
                                    for (std::int64_t m = 0; m < t.tile_m; ++m) {
                                        const float wv =
                                            lds_w[((m * t.tile_k + cb) * s.y +
                                                   y) * s.x + x];
                                        for (std::int64_t j = 0; j < t.tile_n;
                                             ++j)
                                            acc[m * t.tile_n + j] +=
                                                wv *
                                                lds_i[(cb * t.tile_n + j) *
                                                          s.y * s.x +
                                                      y * s.x + x];
                                    }
                    }
                    // Threadwise copy back to device-memory analog.
                    for (std::int64_t m = 0; m < t.tile_m; ++m)
                        for (std::int64_t j = 0; j < t.tile_n; ++j) {
                            const std::int64_t pix = p0 + j;
                            out.data()[((n * s.k + g * s.kg + k0 + m) * s.oh +
                                        pix / s.ow) * s.ow + pix % s.ow] =
                                acc[m * t.tile_n + j];
                        }
                }
}

}  // namespace

const char* conv_algo_name(ConvAlgo a) {
    switch (a) {
        case ConvAlgo::Im2colGemm: return "Im2colGemm";
        case ConvAlgo::Direct: return "Direct";
        case ConvAlgo::Winograd: return "Winograd";
        case ConvAlgo::FFT: return "FFT";
        case ConvAlgo::ImplicitGemm: return "ImplicitGemm";
    }
    return "?";
}

TensorDescriptor output_dims(const TensorDescriptor& input,
                             const TensorDescriptor& filter,
                             const ConvDescriptor& conv) {
    const ConvShapes s = resolve_shapes(input, filter, conv);
    return TensorDescriptor::packed({s.n, s.k, s.oh, s.ow}, input.etype);
}

Tensor im2col(const Tensor& input, const TensorDescriptor& filter_desc,
              const ConvDescriptor& conv, std::int64_t n, std::int64_t group) {
    if (conv.mode != ConvMode::Convolution)
        throw_error(ErrorCode::InvalidValue, "im2col requires convolution mode");
    const ConvShapes s = resolve_shapes(input.desc(), filter_desc, conv);
    Tensor col = Tensor::packed({s.cg * s.y * s.x, s.oh * s.ow});
    fill_im2col(input.data() + ((n * s.c + group * s.cg) * s.h) * s.w, conv, s,
                col.data());
    return col;
}

std::size_t conv_workspace_bytes(ConvAlgo algo, const TensorDescriptor& input,
                                 const TensorDescriptor& filter,
                                 const ConvDescriptor& conv,
                                 const ImplicitGemmTiles& tiles) {
    const ConvShapes s = resolve_shapes(input, filter, conv);
    switch (algo) {
        case ConvAlgo::Direct:
        case ConvAlgo::Winograd:
            return 0;
        case ConvAlgo::Im2colGemm:
            if (conv.mode == ConvMode::Transpose)
                return static_cast<std::size_t>(s.kg * s.y * s.x * s.h * s.w) *
                       sizeof(float);
            return static_cast<std::size_t>(s.cg * s.y * s.x * s.oh * s.ow) *
                   sizeof(float);
        case ConvAlgo::FFT:
            return fft_workspace_bytes(conv, s);
        case ConvAlgo::ImplicitGemm:
            return implicit_gemm_workspace_bytes(tiles, s);
    }
    return 0;
}

Tensor conv_forward(OpCounters& counters, ConvAlgo algo, const Tensor& input,
                    const Tensor& filter, const ConvDescriptor& conv,
                    std::span<std::byte> workspace,
                    const ImplicitGemmTiles& tiles) {
    if (input.etype() != filter.etype())
        throw_error(ErrorCode::ShapeMismatch, "input/filter element type mismatch");
    const ConvShapes s = resolve_shapes(input.desc(), filter.desc(), conv);
    Tensor out = make_output(s, input.etype());
    if (conv.mode == ConvMode::Transpose) {
        switch (algo) {
            case ConvAlgo::Direct:
                direct_transpose_forward(counters, input, filter, conv, s, out);
                break;
            case ConvAlgo::Im2colGemm:
                im2col_transpose_forward(counters, input, filter, conv, s,
                                         workspace, out);
                break;
            default:
                throw_error(ErrorCode::AlgoNotApplicable,
                            "transpose mode is serviced by Im2colGemm and Direct");
        }
    } else {
        switch (algo) {
            case ConvAlgo::Direct:
                direct_forward(counters, input, filter, conv, s, out);
                break;
            case ConvAlgo::Im2colGemm:
                im2col_forward(counters, input, filter, conv, s, workspace, out);
                break;
            case ConvAlgo::Winograd:
                winograd_forward(counters, input, filter, conv, s, out);
                break;
            case ConvAlgo::FFT:
                fft_forward(counters, input, filter, conv, s, workspace, out);
                break;
            case ConvAlgo::ImplicitGemm:
                implicit_gemm_forward(counters, input, filter, conv, s,
                                      workspace, tiles, out);
                break;
        }
    }
    counters.buffer_roundtrips += 1;
    out.quantize();
    return out;
}

Tensor conv_backward_data(OpCounters& counters, ConvAlgo algo,
                          const Tensor& d_output, const Tensor& filter,
                          const ConvDescriptor& conv,
                          const TensorDescriptor& input_desc,
                          std::span<std::byte> workspace) {
    if (conv.mode != ConvMode::Convolution)
        throw_error(ErrorCode::AlgoNotApplicable,
                    "backward data requires convolution mode");
    const ConvShapes s = resolve_shapes(input_desc, filter.desc(), conv);
    if (d_output.dims() !=
        std::vector<std::int64_t>({s.n, s.k, s.oh, s.ow}))
        throw_error(ErrorCode::ShapeMismatch, "dOutput shape mismatch");
    Tensor d_input(TensorDescriptor::packed(input_desc.dims, input_desc.etype));

    if (algo == ConvAlgo::Direct) {
        const float* dO = d_output.data();
        const float* F = filter.data();
        float* dI = d_input.data();
        counters.scalar_muls += static_cast<std::uint64_t>(s.n) * s.c * s.h *
                                s.w * s.kg * s.y * s.x;
        for (std::int64_t n = 0; n < s.n; ++n)
            for (std::int64_t c = 0; c < s.c; ++c) {
                const std::int64_t g = c / s.cg;
                const std::int64_t cg = c % s.cg;
                for (std::int64_t h = 0; h < s.h; ++h)
                    for (std::int64_t w = 0; w < s.w; ++w) {
                        float acc = 0.0f;
                        for (std::int64_t kg = 0; kg < s.kg; ++kg) {
                            const std::int64_t k = g * s.kg + kg;
                            for (std::int64_t y = 0; y < s.y; ++y) {
                                const std::int64_t num_h =
                                    h + conv.pad_h - y * conv.dilation_h;
                                if (num_h < 0 || num_h % conv.stride_h != 0)
                                    continue;
                                const std::int64_t oh = num_h / conv.stride_h;
                                if (oh >= s.oh) continue;
                                for (std::int64_t x = 0; x < s.x; ++x) {
                                    const std::int64_t num_w =
                                        w + conv.pad_w - x * conv.dilation_w;
                                    if (num_w < 0 ||
                                        num_w % conv.stride_w != 0)
                                        continue;
                                    const std::int64_t ow =
                                        num_w / conv.stride_w;
                                    if (ow >= s.ow) continue;
                                    acc += dO[((n * s.k + k) * s.oh + oh) *
                                                  s.ow + ow] *
                                           F[((k * s.cg + cg) * s.y + y) *
                                                 s.x + x];
                                }
                            }
                        }
                        dI[((n * s.c + c) * s.h + h) * s.w + w] = acc;
                    }
            }
    } else if (algo == ConvAlgo::Im2colGemm) {
        const std::int64_t rows = s.cg * s.y * s.x;
        const std::int64_t cols = s.oh * s.ow;
        float* col = workspace_floats(
            workspace, static_cast<std::size_t>(rows * cols) * sizeof(float));
        std::fill(d_input.data(), d_input.data() + d_input.size(), 0.0f);
        for (std::int64_t n = 0; n < s.n; ++n)
            for (std::int64_t g = 0; g < s.groups; ++g) {
                gemm(counters, true, false, rows, cols, s.kg, 1.0f,
                     filter.data() + g * s.kg * rows, rows,
                     d_output.data() + ((n * s.k + g * s.kg) * s.oh) * s.ow,
                     cols, 0.0f, col, cols);
                // col2im accumulate back into the input geometry.
                float* dI = d_input.data() + ((n * s.c + g * s.cg) * s.h) * s.w;
                for (std::int64_t c = 0; c < s.cg; ++c)
                    for (std::int64_t y = 0; y < s.y; ++y)
                        for (std::int64_t x = 0; x < s.x; ++x) {
                            const float* row =
                                col + ((c * s.y + y) * s.x + x) * cols;
                            for (std::int64_t oh = 0; oh < s.oh; ++oh) {
                                const std::int64_t ih = oh * conv.stride_h -
                                                        conv.pad_h +
                                                        y * conv.dilation_h;
                                if (ih < 0 || ih >= s.h) continue;
                                for (std::int64_t ow = 0; ow < s.ow; ++ow) {
                                    const std::int64_t iw =
                                        ow * conv.stride_w - conv.pad_w +
                                        x * conv.dilation_w;
                                    if (iw < 0 || iw >= s.w) continue;
                                    dI[(c * s.h + ih) * s.w + iw] +=
                                        row[oh * s.ow + ow];
                                }
                            }
                        }
            }
    } else {
        throw_error(ErrorCode::AlgoNotApplicable,
                    "backward data is serviced by Im2colGemm and Direct");
    }
    counters.buffer_roundtrips += 1;
    d_input.quantize();
    return d_input;
}

Tensor conv_backward_weights(OpCounters& counters, ConvAlgo algo,
                             const Tensor& d_output, const Tensor& input,
                             const ConvDescriptor& conv,
                             const TensorDescriptor& filter_desc,
                             std::span<std::byte> workspace) {
    if (conv.mode != ConvMode::Convolution)
        throw_error(ErrorCode::AlgoNotApplicable,
                    "backward weights requires convolution mode");
    const ConvShapes s = resolve_shapes(input.desc(), filter_desc, conv);
    if (d_output.dims() !=
        std::vector<std::int64_t>({s.n, s.k, s.oh, s.ow}))
        throw_error(ErrorCode::ShapeMismatch, "dOutput shape mismatch");
    Tensor d_filter(TensorDescriptor::packed(filter_desc.dims,
                                             filter_desc.etype));

    if (algo == ConvAlgo::Direct) {
        const float* dO = d_output.data();
        const float* I = input.data();
        float* dF = d_filter.data();
        counters.scalar_muls += static_cast<std::uint64_t>(s.k) * s.cg * s.y *
                                s.x * s.n * s.oh * s.ow;
        for (std::int64_t k = 0; k < s.k; ++k) {
            const std::int64_t g = k / s.kg;
            for (std::int64_t c = 0; c < s.cg; ++c)
                for (std::int64_t y = 0; y < s.y; ++y)
                    for (std::int64_t x = 0; x < s.x; ++x) {
                        float acc = 0.0f;
                        for (std::int64_t n = 0; n < s.n; ++n) {
                            const float* ip =
                                I + ((n * s.c + g * s.cg + c) * s.h) * s.w;
                            const float* op =
                                dO + ((n * s.k + k) * s.oh) * s.ow;
                            for (std::int64_t oh = 0; oh < s.oh; ++oh) {
                                const std::int64_t ih = oh * conv.stride_h -
                                                        conv.pad_h +
                                                        y * conv.dilation_h;
                                if (ih < 0 || ih >= s.h) continue;
                                for (std::int64_t ow = 0; ow < s.ow; ++ow) {
                                    const std::int64_t iw =
                                        ow * conv.stride_w - conv.pad_w +
                                        x * conv.dilation_w;
                                    if (iw < 0 || iw >= s.w) continue;
                                    acc += op[oh * s.ow + ow] *
                                           ip[ih * s.w + iw];
                                }
                            }
                        }
                        dF[((k * s.cg + c) * s.y + y) * s.x + x] = acc;
                    }
        }
    } else if (algo == ConvAlgo::Im2colGemm) {
        const std::int64_t rows = s.cg * s.y * s.x;
        const std::int64_t cols = s.oh * s.ow;
        float* col = workspace_floats(
            workspace, static_cast<std::size_t>(rows * cols) * sizeof(float));
        std::fill(d_filter.data(), d_filter.data() + d_filter.size(), 0.0f);
        for (std::int64_t n = 0; n < s.n; ++n)
            for (std::int64_t g = 0; g < s.groups; ++g) {
                fill_im2col(input.data() + ((n * s.c + g * s.cg) * s.h) * s.w,
                            conv, s, col);
                gemm(counters, false, true, s.kg, rows, cols, 1.0f,
                     d_output.data() + ((n * s.k + g * s.kg) * s.oh) * s.ow,
                     cols, col, cols, 1.0f,
                     d_filter.data() + g * s.kg * rows, rows);
            }
    } else {
        throw_error(ErrorCode::AlgoNotApplicable,
                    "backward weights is serviced by Im2colGemm and Direct");
    }
    counters.buffer_roundtrips += 1;
    d_filter.quantize();
    return d_filter;
}

}  // namespace primkit
