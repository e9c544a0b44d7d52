#include "primkit/primkit.h"

#include <cstring>
#include <exception>
#include <string>

#include "core/fusion.hpp"
#include "core/handle.hpp"
#include "core/rnn.hpp"

namespace {

thread_local std::string g_last_error;

primkit_status fail(primkit_status status, const std::string& message) {
    g_last_error = message;
    return status;
}

primkit_status from_exception() {
    try {
        throw;
    } catch (const primkit::Error& e) {
        return fail(static_cast<primkit_status>(e.code()), e.what());
    } catch (const std::exception& e) {
        return fail(PRIMKIT_STATUS_INTERNAL, e.what());
    } catch (...) {
        return fail(PRIMKIT_STATUS_INTERNAL, "unknown error");
    }
}

template <typename Fn>
primkit_status guarded(Fn&& fn) {
    try {
        fn();
        return PRIMKIT_STATUS_OK;
    } catch (...) {
        return from_exception();
    }
}

template <typename T>
T* require_ptr(T* p, const char* what) {
    if (!p)
        primkit::throw_error(primkit::ErrorCode::InvalidValue,
                             std::string("null ") + what);
    return p;
}

primkit::ConvProblem to_problem(const primkit_conv_problem& p) {
    primkit::ConvProblem out;
    out.n = p.n;
    out.c = p.c;
    out.h = p.h;
    out.w = p.w;
    out.k = p.k;
    out.y = p.y;
    out.x = p.x;
    out.pad_h = p.pad_h;
    out.pad_w = p.pad_w;
    out.stride_h = p.stride_h;
    out.stride_w = p.stride_w;
    out.dilation_h = p.dilation_h;
    out.dilation_w = p.dilation_w;
    out.groups = p.groups;
    out.direction = static_cast<primkit::ConvDirection>(p.direction);
    out.mode = static_cast<primkit::ConvMode>(p.mode);
    out.etype = static_cast<primkit::ElementType>(p.etype);
    return out;
}

// Descriptors of the two data operands per direction.
std::pair<primkit::TensorDescriptor, primkit::TensorDescriptor> operand_descs(
    const primkit::ConvProblem& p) {
    switch (p.direction) {
        case primkit::ConvDirection::Forward:
            return {p.input_desc(), p.filter_desc()};
        case primkit::ConvDirection::BackwardData:
            return {p.output_desc(), p.filter_desc()};
        case primkit::ConvDirection::BackwardWeights:
        default:
            return {p.output_desc(), p.input_desc()};
    }
}

primkit::Tensor tensor_from(const primkit::TensorDescriptor& desc,
                            const float* data) {
    primkit::Tensor t(primkit::TensorDescriptor::packed(desc.dims, desc.etype));
    std::memcpy(t.data(), data,
                static_cast<std::size_t>(t.size()) * sizeof(float));
    t.quantize();
    return t;
}

primkit::TensorDescriptor result_desc(const primkit::ConvProblem& p) {
    switch (p.direction) {
        case primkit::ConvDirection::Forward:
            return p.output_desc();
        case primkit::ConvDirection::BackwardData:
            return p.input_desc();
        case primkit::ConvDirection::BackwardWeights:
        default:
            return p.filter_desc();
    }
}

void copy_name(char* buf, size_t buf_len, const std::string& name) {
    if (!buf || buf_len == 0)
        primkit::throw_error(primkit::ErrorCode::InvalidValue,
                             "null output buffer");
    if (name.size() + 1 > buf_len)
        primkit::throw_error(primkit::ErrorCode::InvalidValue,
                             "output buffer too small");
    std::memcpy(buf, name.c_str(), name.size() + 1);
}

}  // namespace

struct primkit_handle;

namespace {
const primkit::Solver& require_solver(primkit_handle* handle,
                                      const char* name);
}  // namespace

struct primkit_handle {
    primkit::Handle impl;
};

struct primkit_fusion_plan {
    primkit::FusionPlan impl;
};

namespace {
primkit::Handle& impl_of(primkit_handle* handle) {
    return require_ptr(handle, "handle")->impl;
}

primkit::FusionPlan& impl_of(primkit_fusion_plan* plan) {
    return require_ptr(plan, "fusion plan")->impl;
}

const primkit::Solver& require_solver(primkit_handle* handle,
                                      const char* name) {
    const primkit::Solver* solver = impl_of(handle).find_solver(name ? name : "");
    if (!solver)
        primkit::throw_error(primkit::ErrorCode::InvalidValue,
                             std::string("unknown solver '") +
                                 (name ? name : "") + "'");
    return *solver;
}
}  // namespace

extern "C" {

const char* primkit_last_error(void) { return g_last_error.c_str(); }

primkit_status primkit_handle_create(primkit_handle** out) {
    return guarded([&] {
        if (!out)
            primkit::throw_error(primkit::ErrorCode::InvalidValue,
                                 "null handle output");
        *out = new primkit_handle{};
    });
}

void primkit_handle_destroy(primkit_handle* handle) { delete handle; }

primkit_status primkit_handle_use_fake_clock(primkit_handle* handle) {
    return guarded([&] { impl_of(handle).use_fake_clock(); });
}

primkit_status primkit_handle_now_ms(primkit_handle* handle, double* out_ms) {
    return guarded([&] { *out_ms = impl_of(handle).now_ms(); });
}

primkit_status primkit_handle_set_cache_dir(primkit_handle* handle,
                                            const char* dir) {
    return guarded([&] { impl_of(handle).set_cache_dir(dir); });
}

primkit_status primkit_handle_counters(primkit_handle* handle,
                                       primkit_counters* out) {
    return guarded([&] {
        const primkit::OpCounters& c = impl_of(handle).counters();
        out->gemm_calls = c.gemm_calls;
        out->scalar_muls = c.scalar_muls;
        out->buffer_roundtrips = c.buffer_roundtrips;
    });
}

primkit_status primkit_handle_reset_counters(primkit_handle* handle) {
    return guarded([&] { impl_of(handle).counters().reset(); });
}

primkit_status primkit_handle_set_seed(primkit_handle* handle, uint64_t seed) {
    return guarded([&] { impl_of(handle).rng_seed = seed; });
}

primkit_status primkit_problem_key(const primkit_conv_problem* problem,
                                   char* buf, size_t buf_len) {
    return guarded([&] { copy_name(buf, buf_len, to_problem(*require_ptr(problem, "problem")).key()); });
}

primkit_status primkit_conv_output_dims(const primkit_conv_problem* problem,
                                        int64_t dims[4]) {
    return guarded([&] {
        const primkit::TensorDescriptor d = result_desc(to_problem(*require_ptr(problem, "problem")));
        for (int i = 0; i < 4; ++i) dims[i] = d.dims[static_cast<std::size_t>(i)];
    });
}

primkit_status primkit_solver_count(primkit_handle* handle, int* out_count) {
    return guarded([&] {
        *out_count = static_cast<int>(impl_of(handle).solvers().size());
    });
}

primkit_status primkit_solver_name(primkit_handle* handle, int index, char* buf,
                                   size_t buf_len) {
    return guarded([&] {
        const auto& solvers = impl_of(handle).solvers();
        if (index < 0 || index >= static_cast<int>(solvers.size()))
            primkit::throw_error(primkit::ErrorCode::InvalidValue,
                                 "solver index out of range");
        copy_name(buf, buf_len, solvers[static_cast<std::size_t>(index)]->name());
    });
}

primkit_status primkit_solver_is_applicable(primkit_handle* handle,
                                            const char* solver_name,
                                            const primkit_conv_problem* problem,
                                            int* out_applicable) {
    return guarded([&] {
        *out_applicable = require_solver(handle, solver_name)
                              .is_applicable(to_problem(*require_ptr(problem, "problem")))
                              ? 1
                              : 0;
    });
}

primkit_status primkit_solver_is_tunable(primkit_handle* handle,
                                         const char* solver_name,
                                         int* out_tunable) {
    return guarded([&] {
        *out_tunable = require_solver(handle, solver_name).is_tunable() ? 1 : 0;
    });
}

primkit_status primkit_solver_workspace_bytes(
    primkit_handle* handle, const char* solver_name,
    const primkit_conv_problem* problem, uint64_t* out_bytes) {
    return guarded([&] {
        const primkit::Solver& solver = require_solver(handle, solver_name);
        const primkit::ConvProblem p = to_problem(*require_ptr(problem, "problem"));
        const primkit::PerfConfig config =
            impl_of(handle).resolve_config(p, solver);
        *out_bytes = solver.workspace_bytes(p, &config);
    });
}

primkit_status primkit_find_convolution(primkit_handle* handle,
                                        const primkit_conv_problem* problem,
                                        const float* a, const float* b,
                                        size_t workspace_bytes,
                                        primkit_algo_perf* results,
                                        int capacity, int* out_count) {
    return guarded([&] {
        const primkit::ConvProblem p = to_problem(*require_ptr(problem, "problem"));
        const auto [da, db] = operand_descs(p);
        const primkit::Tensor ta = tensor_from(da, a);
        const primkit::Tensor tb = tensor_from(db, b);
        std::vector<std::byte> ws(workspace_bytes);
        const auto perf = impl_of(handle).find_convolution(p, ta, tb, ws);
        *out_count = static_cast<int>(perf.size());
        const int n = std::min(capacity, *out_count);
        for (int i = 0; i < n; ++i) {
            const auto& src = perf[static_cast<std::size_t>(i)];
            primkit_algo_perf& dst = results[i];
            copy_name(dst.solver_name, sizeof(dst.solver_name),
                      src.solver_name);
            dst.algo = static_cast<primkit_conv_algo>(src.algo);
            dst.time_ms = src.time_ms;
            dst.workspace_bytes = src.workspace_bytes;
        }
    });
}

primkit_status primkit_conv_run(primkit_handle* handle,
                                const primkit_conv_problem* problem,
                                const char* solver_name, const float* a,
                                const float* b, float* output,
                                size_t workspace_bytes) {
    return guarded([&] {
        const primkit::ConvProblem p = to_problem(*require_ptr(problem, "problem"));
        const primkit::Solver* solver = nullptr;
        if (solver_name) {
            solver = &require_solver(handle, solver_name);
            if (!solver->is_applicable(p))
                primkit::throw_error(primkit::ErrorCode::AlgoNotApplicable,
                                     solver->name() + " is not applicable to " +
                                         p.key());
        } else {
            for (const auto& s : impl_of(handle).solvers())
                if (s->is_applicable(p)) {
                    solver = s.get();
                    break;
                }
            if (!solver)
                primkit::throw_error(primkit::ErrorCode::NoApplicableSolver,
                                     "no applicable solver for " + p.key());
        }
        const primkit::PerfConfig config =
            impl_of(handle).resolve_config(p, *solver);
        if (solver->workspace_bytes(p, &config) > workspace_bytes)
            primkit::throw_error(primkit::ErrorCode::WorkspaceTooSmall,
                                 "workspace too small for " + solver->name());
        const auto [da, db] = operand_descs(p);
        const primkit::Tensor ta = tensor_from(da, a);
        const primkit::Tensor tb = tensor_from(db, b);
        std::vector<std::byte> ws(workspace_bytes);
        auto plan = impl_of(handle).cached_build(p, *solver, &config);
        const primkit::Tensor result =
            plan->run(impl_of(handle).counters(), ta, tb, ws);
        std::memcpy(output, result.data(),
                    static_cast<std::size_t>(result.size()) * sizeof(float));
    });
}

primkit_status primkit_tune(primkit_handle* handle,
                            const primkit_conv_problem* problem,
                            const char* solver_name, int64_t budget,
                            int exhaustive, int64_t* out_evaluations) {
    return guarded([&] {
        const primkit::ConvProblem p = to_problem(*require_ptr(problem, "problem"));
        const primkit::Solver& solver = require_solver(handle, solver_name);
        if (budget <= 0) budget = primkit::default_tune_budget(solver, p);
        const primkit::TuneResult r =
            primkit::tune(impl_of(handle), solver, p, budget, exhaustive != 0);
        if (out_evaluations) *out_evaluations = r.evaluations;
    });
}

primkit_status primkit_perfdb_save(primkit_handle* handle, const char* path) {
    return guarded([&] { impl_of(handle).perfdb().save(path); });
}

primkit_status primkit_perfdb_load(primkit_handle* handle, const char* path) {
    return guarded([&] { impl_of(handle).perfdb() = primkit::PerfDb::load(path); });
}

primkit_status primkit_fusion_plan_create(const int64_t input_dims[4],
                                          primkit_element_type etype,
                                          primkit_fusion_plan** out) {
    return guarded([&] {
        std::vector<std::int64_t> dims(input_dims, input_dims + 4);
        *out = new primkit_fusion_plan{
            primkit::FusionPlan(primkit::TensorDescriptor::packed(
                std::move(dims), static_cast<primkit::ElementType>(etype)))};
    });
}

void primkit_fusion_plan_destroy(primkit_fusion_plan* plan) { delete plan; }

primkit_status primkit_fusion_add_conv(primkit_fusion_plan* plan,
                                       const int64_t filter_dims[4],
                                       int64_t pad_h, int64_t pad_w,
                                       int64_t stride_h, int64_t stride_w,
                                       int64_t groups, primkit_conv_algo algo) {
    return guarded([&] {
        primkit::ConvDescriptor conv;
        conv.pad_h = pad_h;
        conv.pad_w = pad_w;
        conv.stride_h = stride_h;
        conv.stride_w = stride_w;
        conv.group_count = groups;
        std::vector<std::int64_t> dims(filter_dims, filter_dims + 4);
        impl_of(plan).add_op(primkit::FusionOp::conv_forward(
            conv,
            primkit::TensorDescriptor::packed(std::move(dims),
                                              impl_of(plan).input_desc().etype),
            static_cast<primkit::ConvAlgo>(algo)));
    });
}

primkit_status primkit_fusion_add_bias(primkit_fusion_plan* plan,
                                       int64_t channels) {
    return guarded([&] { impl_of(plan).add_op(primkit::FusionOp::bias(channels)); });
}

primkit_status primkit_fusion_add_batchnorm(primkit_fusion_plan* plan,
                                            primkit_batchnorm_mode mode) {
    return guarded([&] {
        impl_of(plan).add_op(primkit::FusionOp::batchnorm_inference(
            static_cast<primkit::BatchNormMode>(mode)));
    });
}

primkit_status primkit_fusion_add_activation(primkit_fusion_plan* plan,
                                             primkit_activation kind,
                                             float alpha) {
    return guarded([&] {
        primkit::ActivationKind act;
        switch (kind) {
            case PRIMKIT_ACT_RELU: act = primkit::ActivationKind::relu(); break;
            case PRIMKIT_ACT_LEAKY_RELU:
                act = primkit::ActivationKind::leaky_relu(alpha);
                break;
            case PRIMKIT_ACT_SIGMOID:
                act = primkit::ActivationKind::sigmoid();
                break;
            case PRIMKIT_ACT_TANH: act = primkit::ActivationKind::tanh(); break;
            default:
                primkit::throw_error(primkit::ErrorCode::InvalidValue,
                                     "unknown activation kind");
        }
        impl_of(plan).add_op(primkit::FusionOp::activation(act));
    });
}

primkit_status primkit_fusion_compile(primkit_handle* handle,
                                      primkit_fusion_plan* plan) {
    return guarded([&] { primkit::fusion_compile(impl_of(handle), impl_of(plan)); });
}

primkit_status primkit_fusion_output_dims(primkit_fusion_plan* plan,
                                          int64_t dims[4]) {
    return guarded([&] {
        const auto& d = impl_of(plan).output_desc().dims;
        for (int i = 0; i < 4; ++i) dims[i] = d[static_cast<std::size_t>(i)];
    });
}

primkit_status primkit_fusion_set_args(primkit_fusion_plan* plan,
                                       const float* filter, const float* bias,
                                       const float* bn_gamma,
                                       const float* bn_beta,
                                       const float* bn_mean,
                                       const float* bn_var, float bn_epsilon,
                                       const float* act_alpha) {
    return guarded([&] {
        primkit::FusionArgs args;
        // Walk the plan to recover the shapes each binding must take.
        primkit::TensorDescriptor cur = impl_of(plan).input_desc();
        for (const primkit::FusionOp& op : impl_of(plan).ops()) {
            switch (op.kind) {
                case primkit::FusionOp::Kind::ConvForward:
                    if (filter)
                        args.filter = tensor_from(op.filter_desc, filter);
                    cur = primkit::output_dims(cur, op.filter_desc, op.conv);
                    break;
                case primkit::FusionOp::Kind::Bias:
                    if (bias)
                        args.bias = tensor_from(
                            primkit::TensorDescriptor::packed(
                                {op.bias_channels}),
                            bias);
                    break;
                case primkit::FusionOp::Kind::BatchNormInference: {
                    const primkit::TensorDescriptor shape =
                        op.bn_mode == primkit::BatchNormMode::Spatial
                            ? primkit::TensorDescriptor::packed(
                                  {1, cur.dims[1], 1, 1})
                            : primkit::TensorDescriptor::packed(
                                  {1, cur.dims[1], cur.dims[2], cur.dims[3]});
                    if (bn_gamma) args.bn_gamma = tensor_from(shape, bn_gamma);
                    if (bn_beta) args.bn_beta = tensor_from(shape, bn_beta);
                    if (bn_mean) args.bn_mean = tensor_from(shape, bn_mean);
                    if (bn_var) args.bn_var = tensor_from(shape, bn_var);
                    args.bn_epsilon = bn_epsilon;
                    break;
                }
                case primkit::FusionOp::Kind::Activation:
                    break;
            }
        }
        if (act_alpha) args.act_alpha = *act_alpha;
        impl_of(plan).set_args(std::move(args));
    });
}

primkit_status primkit_fusion_execute(primkit_handle* handle,
                                      primkit_fusion_plan* plan,
                                      const float* input, float* output,
                                      int unfused) {
    return guarded([&] {
        const primkit::Tensor in =
            tensor_from(impl_of(plan).input_desc(), input);
        const primkit::Tensor out =
            unfused ? primkit::fusion_execute_unfused(impl_of(handle), impl_of(plan),
                                                      in)
                    : primkit::fusion_execute(impl_of(handle), impl_of(plan), in);
        std::memcpy(output, out.data(),
                    static_cast<std::size_t>(out.size()) * sizeof(float));
    });
}

}  // extern "C"
