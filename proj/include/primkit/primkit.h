/* primkit: CPU deep-learning primitives behind a C shared-library API.
 *
 * All functions return primkit_status; PRIMKIT_STATUS_OK is 0. On failure
 * primkit_last_error() returns a thread-local description of the most recent
 * error. Handles and fusion plans are opaque; tensors cross the boundary as
 * packed NCHW float buffers (bf16 tensors store rounded values widened to
 * f32).
 */
#ifndef PRIMKIT_H
#define PRIMKIT_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define PRIMKIT_API __declspec(dllexport)
#else
#define PRIMKIT_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum primkit_status {
    PRIMKIT_STATUS_OK = 0,
    PRIMKIT_STATUS_SHAPE_MISMATCH = 1,
    PRIMKIT_STATUS_INVALID_SHAPE = 2,
    PRIMKIT_STATUS_GROUP_MISMATCH = 3,
    PRIMKIT_STATUS_ALGO_NOT_APPLICABLE = 4,
    PRIMKIT_STATUS_WORKSPACE_TOO_SMALL = 5,
    PRIMKIT_STATUS_DUPLICATE_SOLVER = 6,
    PRIMKIT_STATUS_NO_APPLICABLE_SOLVER = 7,
    PRIMKIT_STATUS_NOT_TUNABLE = 8,
    PRIMKIT_STATUS_NO_VALID_CONFIG = 9,
    PRIMKIT_STATUS_IO_ERROR = 10,
    PRIMKIT_STATUS_PARSE_ERROR = 11,
    PRIMKIT_STATUS_LAYOUT_NOT_DESCENDING = 12,
    PRIMKIT_STATUS_INVALID_EPSILON = 13,
    PRIMKIT_STATUS_INVALID_AXIS = 14,
    PRIMKIT_STATUS_FUSION_NOT_SUPPORTED = 15,
    PRIMKIT_STATUS_ALREADY_COMPILED = 16,
    PRIMKIT_STATUS_NOT_COMPILED = 17,
    PRIMKIT_STATUS_MISSING_ARGS = 18,
    PRIMKIT_STATUS_INVALID_VALUE = 19,
    PRIMKIT_STATUS_INTERNAL = 20
} primkit_status;

typedef enum primkit_element_type {
    PRIMKIT_F32 = 0,
    PRIMKIT_BF16 = 1
} primkit_element_type;

typedef enum primkit_conv_mode {
    PRIMKIT_CONV_CONVOLUTION = 0,
    PRIMKIT_CONV_TRANSPOSE = 1
} primkit_conv_mode;

typedef enum primkit_conv_direction {
    PRIMKIT_DIR_FORWARD = 0,
    PRIMKIT_DIR_BACKWARD_DATA = 1,
    PRIMKIT_DIR_BACKWARD_WEIGHTS = 2
} primkit_conv_direction;

typedef enum primkit_conv_algo {
    PRIMKIT_ALGO_IM2COL_GEMM = 0,
    PRIMKIT_ALGO_DIRECT = 1,
    PRIMKIT_ALGO_WINOGRAD = 2,
    PRIMKIT_ALGO_FFT = 3,
    PRIMKIT_ALGO_IMPLICIT_GEMM = 4
} primkit_conv_algo;

typedef enum primkit_activation {
    PRIMKIT_ACT_RELU = 0,
    PRIMKIT_ACT_LEAKY_RELU = 1,
    PRIMKIT_ACT_SIGMOID = 2,
    PRIMKIT_ACT_TANH = 3
} primkit_activation;

typedef enum primkit_batchnorm_mode {
    PRIMKIT_BN_PER_ACTIVATION = 0,
    PRIMKIT_BN_SPATIAL = 1
} primkit_batchnorm_mode;

typedef struct primkit_handle primkit_handle;
typedef struct primkit_fusion_plan primkit_fusion_plan;

typedef struct primkit_conv_problem {
    int64_t n, c, h, w;
    int64_t k, y, x;
    int64_t pad_h, pad_w;
    int64_t stride_h, stride_w;
    int64_t dilation_h, dilation_w;
    int64_t groups;
    primkit_conv_direction direction;
    primkit_conv_mode mode;
    primkit_element_type etype;
} primkit_conv_problem;

typedef struct primkit_algo_perf {
    char solver_name[64];
    primkit_conv_algo algo;
    double time_ms;
    uint64_t workspace_bytes;
} primkit_algo_perf;

typedef struct primkit_counters {
    uint64_t gemm_calls;
    uint64_t scalar_muls;
    uint64_t buffer_roundtrips;
} primkit_counters;

/* Thread-local message for the most recent failing call on this thread. */
PRIMKIT_API const char* primkit_last_error(void);

PRIMKIT_API primkit_status primkit_handle_create(primkit_handle** out);
PRIMKIT_API void primkit_handle_destroy(primkit_handle* handle);

PRIMKIT_API primkit_status primkit_handle_use_fake_clock(primkit_handle* handle);
PRIMKIT_API primkit_status primkit_handle_now_ms(primkit_handle* handle,
                                                 double* out_ms);
PRIMKIT_API primkit_status primkit_handle_set_cache_dir(primkit_handle* handle,
                                                        const char* dir);
PRIMKIT_API primkit_status primkit_handle_counters(primkit_handle* handle,
                                                   primkit_counters* out);
PRIMKIT_API primkit_status primkit_handle_reset_counters(primkit_handle* handle);
PRIMKIT_API primkit_status primkit_handle_set_seed(primkit_handle* handle,
                                                   uint64_t seed);

/* Writes `2-2-..-F-C-f32`-style key into buf (nul terminated). */
PRIMKIT_API primkit_status primkit_problem_key(const primkit_conv_problem* problem,
                                               char* buf, size_t buf_len);

/* Output dims of the problem (NCHW for Forward, the dInput/dFilter shape for
 * the backward directions). */
PRIMKIT_API primkit_status primkit_conv_output_dims(
    const primkit_conv_problem* problem, int64_t dims[4]);

PRIMKIT_API primkit_status primkit_solver_count(primkit_handle* handle,
                                                int* out_count);
PRIMKIT_API primkit_status primkit_solver_name(primkit_handle* handle, int index,
                                               char* buf, size_t buf_len);
PRIMKIT_API primkit_status primkit_solver_is_applicable(
    primkit_handle* handle, const char* solver_name,
    const primkit_conv_problem* problem, int* out_applicable);
PRIMKIT_API primkit_status primkit_solver_is_tunable(primkit_handle* handle,
                                                     const char* solver_name,
                                                     int* out_tunable);
PRIMKIT_API primkit_status primkit_solver_workspace_bytes(
    primkit_handle* handle, const char* solver_name,
    const primkit_conv_problem* problem, uint64_t* out_bytes);

/* Benchmarks all applicable solvers over the provided data buffers (a/b per
 * direction: Forward input/filter, BackwardData dOutput/filter,
 * BackwardWeights dOutput/input), sorted ascending by time. Returns
 * PRIMKIT_STATUS_NO_APPLICABLE_SOLVER when none fit the workspace. */
PRIMKIT_API primkit_status primkit_find_convolution(
    primkit_handle* handle, const primkit_conv_problem* problem, const float* a,
    const float* b, size_t workspace_bytes, primkit_algo_perf* results,
    int capacity, int* out_count);

/* Runs the named solver's plan once; output must hold the full result. Null
 * solver_name picks the fastest applicable one without benchmarking. */
PRIMKIT_API primkit_status primkit_conv_run(primkit_handle* handle,
                                            const primkit_conv_problem* problem,
                                            const char* solver_name,
                                            const float* a, const float* b,
                                            float* output,
                                            size_t workspace_bytes);

/* Grid search over the solver's tuning space; winner lands in the handle's
 * perf database. Budget <= 0 uses the default. */
PRIMKIT_API primkit_status primkit_tune(primkit_handle* handle,
                                        const primkit_conv_problem* problem,
                                        const char* solver_name, int64_t budget,
                                        int exhaustive,
                                        int64_t* out_evaluations);

PRIMKIT_API primkit_status primkit_perfdb_save(primkit_handle* handle,
                                               const char* path);
PRIMKIT_API primkit_status primkit_perfdb_load(primkit_handle* handle,
                                               const char* path);

PRIMKIT_API primkit_status primkit_fusion_plan_create(
    const int64_t input_dims[4], primkit_element_type etype,
    primkit_fusion_plan** out);
PRIMKIT_API void primkit_fusion_plan_destroy(primkit_fusion_plan* plan);

PRIMKIT_API primkit_status primkit_fusion_add_conv(
    primkit_fusion_plan* plan, const int64_t filter_dims[4],
    int64_t pad_h, int64_t pad_w, int64_t stride_h, int64_t stride_w,
    int64_t groups, primkit_conv_algo algo);
PRIMKIT_API primkit_status primkit_fusion_add_bias(primkit_fusion_plan* plan,
                                                   int64_t channels);
PRIMKIT_API primkit_status primkit_fusion_add_batchnorm(
    primkit_fusion_plan* plan, primkit_batchnorm_mode mode);
PRIMKIT_API primkit_status primkit_fusion_add_activation(
    primkit_fusion_plan* plan, primkit_activation kind, float alpha);

PRIMKIT_API primkit_status primkit_fusion_compile(primkit_handle* handle,
                                                  primkit_fusion_plan* plan);

PRIMKIT_API primkit_status primkit_fusion_output_dims(primkit_fusion_plan* plan,
                                                      int64_t dims[4]);

/* Numeric bindings; unused pointers may be null. Buffers are copied. */
PRIMKIT_API primkit_status primkit_fusion_set_args(
    primkit_fusion_plan* plan, const float* filter, const float* bias,
    const float* bn_gamma, const float* bn_beta, const float* bn_mean,
    const float* bn_var, float bn_epsilon, const float* act_alpha);

/* unfused != 0 runs the reference per-op pipeline instead of the fused loop
 * nest; outputs are equal within 1e-5 relative error. */
PRIMKIT_API primkit_status primkit_fusion_execute(primkit_handle* handle,
                                                  primkit_fusion_plan* plan,
                                                  const float* input,
                                                  float* output, int unfused);

#ifdef __cplusplus
}
#endif

#endif /* PRIMKIT_H */
