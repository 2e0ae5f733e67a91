#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "rqmoe/model.hpp"
#include "rqmoe/numerics.hpp"
#include "rqmoe/parallel.hpp"
#include "rqmoe/rq.hpp"

namespace rqmoe {

enum class LossKind { nrl, per_step_mse, final_mse };

inline const char* loss_kind_name(LossKind k) {
    switch (k) {
        case LossKind::nrl: return "nrl";
        case LossKind::per_step_mse: return "per_step_mse";
        case LossKind::final_mse: return "final_mse";
    }
    return "?";
}

inline LossKind parse_loss_kind(const std::string& s) {
    if (s == "nrl") return LossKind::nrl;
    if (s == "per_step_mse") return LossKind::per_step_mse;
    if (s == "final_mse") return LossKind::final_mse;
    throw config_error("unknown loss '" + s + "' (expected nrl|per_step_mse|final_mse)");
}

struct TrainConfig {
    double learning_rate = 1e-3;
    std::size_t batch_size = 1024;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t patience = 10;
    std::size_t max_epochs = 100;
    LossKind loss = LossKind::nrl;
    std::uint64_t seed = 0;
    double nrl_epsilon = 1e-8;
    std::size_t threads = 0;
};

// ---------------------------------------------------------------------------
// Normalized Residual Loss
// ---------------------------------------------------------------------------

// Squared residual norms ||r^1||^2 .. ||r^{M+1}||^2 for one vector.
struct NrlTerms {
    std::vector<double> residual_sq_norms;
    double epsilon = 1e-8;
};

// sum_m log(1 + ||r^{m+1}||^2 / (||r^m||^2 + eps)); the denominators are
// stop-gradient constants, which only matters for the backward pass.
inline double nrl_loss(const NrlTerms& terms) {
    if (terms.residual_sq_norms.size() < 2) {
        throw shape_error("nrl_loss: need at least ||r^1||^2 and ||r^2||^2");
    }
    if (terms.epsilon <= 0.0) {
        throw config_error("nrl_loss: epsilon must be > 0");
    }
    double loss = 0.0;
    for (std::size_t m = 0; m + 1 < terms.residual_sq_norms.size(); ++m) {
        const double prev = terms.residual_sq_norms[m];
        const double next = terms.residual_sq_norms[m + 1];
        if (prev < 0.0 || next < 0.0) {
            throw numeric_error("nrl_loss: negative squared norm at step " + std::to_string(m + 1),
                                m + 1);
        }
        loss += std::log1p(next / (prev + terms.epsilon));
    }
    return loss;
}

// Gradient of log(1 + rho^m) w.r.t. r^{m+1}:
//   2 r^{m+1} / (||r^m||^2 + ||r^{m+1}||^2 + eps)
// Bounded, and redescending: the magnitude peaks at ||r^{m+1}|| = sqrt(C)
// and decays to zero beyond it.
template <typename T>
std::vector<T> nrl_residual_gradient(std::span<const T> r_next, double r_prev_sq_norm, double eps) {
    const double denom = r_prev_sq_norm + squared_norm(r_next) + eps;
    std::vector<T> grad(r_next.size());
    for (std::size_t j = 0; j < r_next.size(); ++j) {
        grad[j] = static_cast<T>(2.0 * static_cast<double>(r_next[j]) / denom);
    }
    return grad;
}

// Loss value from the squared residual norms of one vector.
inline double loss_from_norms(const std::vector<double>& r_sq, LossKind kind, double nrl_eps) {
    const std::size_t num_steps = r_sq.size() - 1;
    switch (kind) {
        case LossKind::final_mse:
            return r_sq.back();
        case LossKind::per_step_mse: {
            double loss = 0.0;
            for (std::size_t m = 1; m <= num_steps; ++m) {
                loss += r_sq[m];
            }
            return loss;
        }
        case LossKind::nrl:
            return nrl_loss({r_sq, nrl_eps});
    }
    return 0.0;
}

// ---------------------------------------------------------------------------
// Manual reverse-mode differentiation through the quantization pipeline
// ---------------------------------------------------------------------------

// Indices chosen by argmin are constants of the forward pass; gradients flow
// through the selected dynamic codewords into base codebooks, projections,
// gates and expert layers, and through the instruction vectors into the
// expert tables of earlier steps.

using GradientSetTag = void;  // gradients mirror the model's tensor layout

namespace traindetail {

template <typename T>
struct StepRecord {
    std::uint32_t index = 0;
    std::vector<T> instruction;            // I^m entering this step
    std::vector<T> cat;                    // [c_i ; I^m]
    std::vector<T> z;                      // projected input
    std::vector<T> alpha;                  // gate weights
    std::vector<std::vector<T>> h_chain;   // per expert: h_0..h_L (flattened (L+1)*D)
    std::vector<std::vector<T>> preact;    // per expert: a_1..a_L (flattened L*H)
    std::vector<std::vector<T>> act;       // per expert: relu(a_l) (flattened L*H)
    std::vector<std::vector<T>> delta;     // per expert: E_n(z) - z
};

template <typename T>
struct VectorTrace {
    Code code;
    std::vector<std::vector<T>> residuals;  // r^1..r^{M+1}
    std::vector<double> residual_sq;        // matching squared norms (double)
    std::vector<StepRecord<T>> steps;
};

template <typename T>
struct Workspace {
    TransformScratch<T> scratch;
    DenseMatrix<T> table;
    VectorTrace<T> trace;
    std::vector<T> g;        // running dL/dr
    std::vector<T> dmix;     // dL/dc~
    std::vector<T> dz;
    std::vector<T> dh;
    std::vector<T> du;
    std::vector<T> da;
    std::vector<T> dlogit;
    std::vector<T> dcat;
    std::vector<T> suffix;   // instruction-chain suffix gradient
    DenseMatrix<T> dinstr;   // dL/dI^m per step

    void resize(const ModelDims& d) {
        scratch.resize(d);
        table = DenseMatrix<T>(d.codebook_size, d.dim);
        trace.residuals.assign(d.num_steps + 1, std::vector<T>(d.dim));
        trace.residual_sq.assign(d.num_steps + 1, 0.0);
        trace.steps.assign(d.num_steps, StepRecord<T>{});
        for (auto& st : trace.steps) {
            st.instruction.resize(d.expert_dim);
            st.cat.resize(d.dim + d.expert_dim);
            st.z.resize(d.dim);
            st.alpha.resize(d.num_experts);
            st.h_chain.assign(d.num_experts, std::vector<T>((d.expert_depth + 1) * d.dim));
            st.preact.assign(d.num_experts, std::vector<T>(d.expert_depth * d.hidden_dim));
            st.act.assign(d.num_experts, std::vector<T>(d.expert_depth * d.hidden_dim));
            st.delta.assign(d.num_experts, std::vector<T>(d.dim));
        }
        g.resize(d.dim);
        dmix.resize(d.dim);
        dz.resize(d.dim);
        dh.resize(d.dim);
        du.resize(d.hidden_dim);
        da.resize(d.hidden_dim);
        dlogit.resize(d.num_experts);
        dcat.resize(d.dim + d.expert_dim);
        suffix.resize(d.expert_dim);
        dinstr = DenseMatrix<T>(d.num_steps, d.expert_dim);
    }
};

// Forward pass of one vector with full trace. When `frozen` is non-null the
// given indices are used and no codebook search happens (this is the frozen-
// index loss surface that finite differences probe).
template <typename T>
void run_forward(std::span<const T> x,
                 const RqMoeModel<T>& model,
                 const std::uint32_t* frozen,
                 Workspace<T>& ws) {
    const auto& dims = model.dims;
    auto& trace = ws.trace;

    std::vector<T>& r0 = trace.residuals[0];
    std::copy(x.begin(), x.end(), r0.begin());
    trace.residual_sq[0] = squared_norm(std::span<const T>(r0));

    std::vector<T> instruction(dims.expert_dim, T(0));
    std::vector<T> codeword(dims.dim);

    for (std::size_t s = 0; s < dims.num_steps; ++s) {
        auto& rec = trace.steps[s];
        std::copy(instruction.begin(), instruction.end(), rec.instruction.begin());

        const bool dynamic = s > 0 && !model.is_static();
        std::uint32_t idx;
        if (frozen != nullptr) {
            idx = frozen[s];
        } else if (!dynamic) {
            idx = static_cast<std::uint32_t>(
                argmin_l2(std::span<const T>(trace.residuals[s]), model.steps[s].base).first);
        } else {
            const auto& base = model.steps[s].base;
            for (std::size_t k = 0; k < base.rows; ++k) {
                transform_codeword(model.transforms[s - 1], base.row_span(k),
                                   std::span<const T>(instruction), ws.table.row_span(k),
                                   ws.scratch);
            }
            idx = static_cast<std::uint32_t>(
                argmin_l2(std::span<const T>(trace.residuals[s]), ws.table).first);
        }
        rec.index = idx;
        trace.code[s] = idx;

        const auto base_row = model.steps[s].base.row_span(idx);
        if (!dynamic) {
            std::copy(base_row.begin(), base_row.end(), codeword.begin());
        } else {
            // Re-run the canonical transform for the selected codeword and
            // record every intermediate needed by the backward pass.
            const auto& t = model.transforms[s - 1];
            concat(base_row, std::span<const T>(instruction), std::span<T>(rec.cat));
            t.projection.apply(std::span<const T>(rec.cat), std::span<T>(rec.z));
            t.gate.apply(std::span<const T>(rec.z), std::span<T>(ws.scratch.logits));
            softmax(std::span<const T>(ws.scratch.logits), std::span<T>(rec.alpha));
            std::fill(ws.scratch.mix.begin(), ws.scratch.mix.end(), T(0));
            for (std::size_t n = 0; n < t.experts.size(); ++n) {
                T* h = rec.h_chain[n].data();
                std::copy(rec.z.begin(), rec.z.end(), h);
                for (std::size_t l = 0; l < t.experts[n].layers.size(); ++l) {
                    const auto& layer = t.experts[n].layers[l];
                    std::span<T> a(rec.preact[n].data() + l * dims.hidden_dim, dims.hidden_dim);
                    std::span<T> u(rec.act[n].data() + l * dims.hidden_dim, dims.hidden_dim);
                    layer.expand.apply(std::span<const T>(h + l * dims.dim, dims.dim), a);
                    std::copy(a.begin(), a.end(), u.begin());
                    relu_inplace(u);
                    layer.contract.apply(std::span<const T>(u.data(), u.size()),
                                         std::span<T>(ws.scratch.ct));
                    T* h_next = h + (l + 1) * dims.dim;
                    for (std::size_t j = 0; j < dims.dim; ++j) {
                        h_next[j] = h[l * dims.dim + j] + ws.scratch.ct[j];
                    }
                }
                const T* h_last = h + t.experts[n].layers.size() * dims.dim;
                for (std::size_t j = 0; j < dims.dim; ++j) {
                    rec.delta[n][j] = h_last[j] - rec.z[j];
                }
                axpy(rec.alpha[n], std::span<const T>(rec.delta[n]), std::span<T>(ws.scratch.mix));
            }
            for (std::size_t j = 0; j < dims.dim; ++j) {
                codeword[j] = base_row[j] + ws.scratch.mix[j];
            }
        }

        std::vector<T>& r_next = trace.residuals[s + 1];
        const std::vector<T>& r_cur = trace.residuals[s];
        for (std::size_t j = 0; j < dims.dim; ++j) {
            r_next[j] = r_cur[j] - codeword[j];
        }
        trace.residual_sq[s + 1] = squared_norm(std::span<const T>(r_next));
        if (!std::isfinite(trace.residual_sq[s + 1])) {
            throw numeric_error("non-finite residual after step " + std::to_string(s + 1), s + 1);
        }

        if (!model.is_static() && s + 1 < dims.num_steps) {
            const T* e = model.steps[s].expert.row(idx);
            for (std::size_t j = 0; j < dims.expert_dim; ++j) {
                instruction[j] += e[j];
            }
        }
    }
}

// grad_w[i][j] += d[i] * in[j]
template <typename T>
inline void accumulate_outer(DenseMatrix<T>& grad_w, std::span<const T> d, std::span<const T> in) {
    for (std::size_t i = 0; i < grad_w.rows; ++i) {
        T* row = grad_w.row(i);
        const T di = d[i];
        for (std::size_t j = 0; j < grad_w.cols; ++j) {
            row[j] += di * in[j];
        }
    }
}

// out[j] += sum_i w[i][j] * d[i]
template <typename T>
inline void accumulate_transposed_matvec(const DenseMatrix<T>& w, std::span<const T> d,
                                         std::span<T> out) {
    for (std::size_t i = 0; i < w.rows; ++i) {
        const T* row = w.row(i);
        const T di = d[i];
        for (std::size_t j = 0; j < w.cols; ++j) {
            out[j] += di * row[j];
        }
    }
}

// Direct dL/dr^{s+2} coefficient (the residual stored at trace index s+1)
// as a scalar multiplier of that residual vector.
inline double direct_coefficient(const std::vector<double>& r_sq, std::size_t s,
                                 std::size_t num_steps, LossKind kind, double nrl_eps) {
    switch (kind) {
        case LossKind::final_mse:
            return s + 1 == num_steps ? 2.0 : 0.0;
        case LossKind::per_step_mse:
            return 2.0;
        case LossKind::nrl:
            return 2.0 / (r_sq[s] + r_sq[s + 1] + nrl_eps);
    }
    return 0.0;
}

// Backward pass for one traced vector; accumulates into `grads`.
template <typename T>
void run_backward(const RqMoeModel<T>& model,
                  Workspace<T>& ws,
                  LossKind kind,
                  double nrl_eps,
                  RqMoeModel<T>& grads) {
    const auto& dims = model.dims;
    const auto& trace = ws.trace;
    const std::size_t num_steps = dims.num_steps;

    std::fill(ws.g.begin(), ws.g.end(), T(0));
    std::fill(ws.dinstr.data.begin(), ws.dinstr.data.end(), T(0));

    for (std::size_t s_plus = num_steps; s_plus-- > 0;) {
        const std::size_t s = s_plus;
        // g = dL/dr^{s+2}; the chain-through-identity contribution from later
        // steps is already in g, add this residual's direct loss term.
        const double coeff = direct_coefficient(trace.residual_sq, s, num_steps, kind, nrl_eps);
        if (coeff != 0.0) {
            const auto& r = trace.residuals[s + 1];
            for (std::size_t j = 0; j < dims.dim; ++j) {
                ws.g[j] += static_cast<T>(coeff * static_cast<double>(r[j]));
            }
        }

        const auto& rec = trace.steps[s];
        // dL/dc~ = -g
        for (std::size_t j = 0; j < dims.dim; ++j) {
            ws.dmix[j] = -ws.g[j];
        }

        auto grad_base_row = grads.steps[s].base.row_span(rec.index);
        for (std::size_t j = 0; j < dims.dim; ++j) {
            grad_base_row[j] += ws.dmix[j];
        }

        const bool dynamic = s > 0 && !model.is_static();
        if (dynamic) {
            const auto& t = model.transforms[s - 1];
            auto& gt = grads.transforms[s - 1];
            std::fill(ws.dz.begin(), ws.dz.end(), T(0));

            // Gate path: dalpha_n = <dmix, delta_n>, softmax backward.
            T alpha_dot = T(0);
            for (std::size_t n = 0; n < dims.num_experts; ++n) {
                ws.dlogit[n] = dot_kernel(ws.dmix.data(), rec.delta[n].data(), dims.dim);
                alpha_dot += rec.alpha[n] * ws.dlogit[n];
            }
            for (std::size_t n = 0; n < dims.num_experts; ++n) {
                ws.dlogit[n] = rec.alpha[n] * (ws.dlogit[n] - alpha_dot);
            }
            accumulate_outer(gt.gate.weight, std::span<const T>(ws.dlogit),
                             std::span<const T>(rec.z));
            for (std::size_t n = 0; n < dims.num_experts; ++n) {
                gt.gate.bias[n] += ws.dlogit[n];
            }
            accumulate_transposed_matvec(t.gate.weight, std::span<const T>(ws.dlogit),
                                         std::span<T>(ws.dz));

            // Expert paths: y_n - z contributes alpha_n * dmix to the expert
            // output and -alpha_n * dmix straight to z.
            for (std::size_t n = 0; n < dims.num_experts; ++n) {
                const T an = rec.alpha[n];
                for (std::size_t j = 0; j < dims.dim; ++j) {
                    ws.dh[j] = an * ws.dmix[j];
                    ws.dz[j] -= an * ws.dmix[j];
                }
                for (std::size_t l = dims.expert_depth; l-- > 0;) {
                    const auto& layer = t.experts[n].layers[l];
                    auto& glayer = gt.experts[n].layers[l];
                    std::span<const T> u(rec.act[n].data() + l * dims.hidden_dim, dims.hidden_dim);
                    std::span<const T> a(rec.preact[n].data() + l * dims.hidden_dim,
                                         dims.hidden_dim);
                    std::span<const T> h_prev(rec.h_chain[n].data() + l * dims.dim, dims.dim);

                    accumulate_outer(glayer.contract.weight, std::span<const T>(ws.dh), u);
                    for (std::size_t j = 0; j < dims.dim; ++j) {
                        glayer.contract.bias[j] += ws.dh[j];
                    }
                    std::fill(ws.du.begin(), ws.du.end(), T(0));
                    accumulate_transposed_matvec(layer.contract.weight, std::span<const T>(ws.dh),
                                                 std::span<T>(ws.du));
                    for (std::size_t j = 0; j < dims.hidden_dim; ++j) {
                        ws.da[j] = a[j] > T(0) ? ws.du[j] : T(0);
                    }
                    accumulate_outer(glayer.expand.weight, std::span<const T>(ws.da), h_prev);
                    for (std::size_t j = 0; j < dims.hidden_dim; ++j) {
                        glayer.expand.bias[j] += ws.da[j];
                    }
                    accumulate_transposed_matvec(layer.expand.weight, std::span<const T>(ws.da),
                                                 std::span<T>(ws.dh));
                }
                for (std::size_t j = 0; j < dims.dim; ++j) {
                    ws.dz[j] += ws.dh[j];
                }
            }

            // Projection path.
            accumulate_outer(gt.projection.weight, std::span<const T>(ws.dz),
                             std::span<const T>(rec.cat));
            for (std::size_t j = 0; j < dims.dim; ++j) {
                gt.projection.bias[j] += ws.dz[j];
            }
            std::fill(ws.dcat.begin(), ws.dcat.end(), T(0));
            accumulate_transposed_matvec(t.projection.weight, std::span<const T>(ws.dz),
                                         std::span<T>(ws.dcat));
            for (std::size_t j = 0; j < dims.dim; ++j) {
                grad_base_row[j] += ws.dcat[j];
            }
            T* dI = ws.dinstr.row(s);
            for (std::size_t j = 0; j < dims.expert_dim; ++j) {
                dI[j] = ws.dcat[dims.dim + j];
            }
        }
    }

    // Instruction chain: e^p rows receive the suffix sum of dL/dI^m, m > p.
    std::fill(ws.suffix.begin(), ws.suffix.end(), T(0));
    for (std::size_t s = num_steps; s-- > 1;) {
        const T* dI = ws.dinstr.row(s);
        for (std::size_t j = 0; j < dims.expert_dim; ++j) {
            ws.suffix[j] += dI[j];
        }
        auto grad_expert_row = grads.steps[s - 1].expert.row_span(trace.steps[s - 1].index);
        for (std::size_t j = 0; j < dims.expert_dim; ++j) {
            grad_expert_row[j] += ws.suffix[j];
        }
    }
}

}  // namespace traindetail

// Gradient buffers mirroring the model's tensors.
template <typename T>
using GradientSet = RqMoeModel<T>;

template <typename T>
struct ForwardBackwardResult {
    double loss = 0.0;                       // batch mean
    GradientSet<T> grads;                    // batch-averaged
    std::vector<double> mean_residual_sq;    // per step, batch mean
    std::vector<double> expert_grad_norms;   // per step, L2 of expert-table grads
};

// Loss of one vector with a fixed index sequence (no codebook search). This
// is the exact function the analytic gradients differentiate.
template <typename T>
double loss_with_codes(std::span<const T> x,
                       const RqMoeModel<T>& model,
                       const Code& code,
                       LossKind kind,
                       double nrl_eps) {
    traindetail::Workspace<T> ws;
    ws.resize(model.dims);
    ws.trace.code = code;
    traindetail::run_forward(x, model, code.data(), ws);
    return loss_from_norms(ws.trace.residual_sq, kind, nrl_eps);
}

// Batched forward/backward. When `frozen` is given, its indices replace the
// per-vector argmin. Deterministic for a fixed (batch, thread count): worker
// gradient buffers are reduced in worker order, then averaged over the batch.
template <typename T>
ForwardBackwardResult<T> forward_backward(const DenseMatrix<T>& batch,
                                          const RqMoeModel<T>& model,
                                          LossKind kind,
                                          double nrl_eps = 1e-8,
                                          std::size_t threads = 0,
                                          const Codes* frozen = nullptr) {
    if (batch.cols != model.dims.dim) {
        throw shape_error("forward_backward: batch dim " + std::to_string(batch.cols) +
                          " vs model dim " + std::to_string(model.dims.dim));
    }
    if (batch.rows == 0) {
        throw insufficient_data_error("forward_backward: empty batch");
    }
    const std::size_t workers = std::min(resolve_threads(threads), batch.rows);
    std::vector<GradientSet<T>> worker_grads(workers);
    std::vector<double> worker_loss(workers, 0.0);
    std::vector<std::vector<double>> worker_res_sq(workers);

    parallel_chunks(batch.rows, workers, [&](std::size_t begin, std::size_t end, std::size_t w) {
        worker_grads[w] = zeros_like(model);
        worker_res_sq[w].assign(model.dims.num_steps + 1, 0.0);
        traindetail::Workspace<T> ws;
        ws.resize(model.dims);
        ws.trace.code.resize(model.dims.num_steps);
        for (std::size_t i = begin; i < end; ++i) {
            traindetail::run_forward<T>(batch.row_span(i), model,
                                        frozen ? frozen->row(i).data() : nullptr, ws);
            worker_loss[w] += loss_from_norms(ws.trace.residual_sq, kind, nrl_eps);
            for (std::size_t m = 0; m <= model.dims.num_steps; ++m) {
                worker_res_sq[w][m] += ws.trace.residual_sq[m];
            }
            traindetail::run_backward(model, ws, kind, nrl_eps, worker_grads[w]);
        }
    });

    ForwardBackwardResult<T> out;
    out.grads = std::move(worker_grads[0]);
    out.loss = worker_loss[0];
    out.mean_residual_sq = std::move(worker_res_sq[0]);
    for (std::size_t w = 1; w < workers; ++w) {
        auto dst = tensor_list(out.grads);
        auto src = tensor_list(worker_grads[w]);
        for (std::size_t t = 0; t < dst.size(); ++t) {
            for (std::size_t j = 0; j < dst[t].size(); ++j) {
                dst[t][j] += src[t][j];
            }
        }
        out.loss += worker_loss[w];
        for (std::size_t m = 0; m < out.mean_residual_sq.size(); ++m) {
            out.mean_residual_sq[m] += worker_res_sq[w][m];
        }
    }

    const T inv_n = static_cast<T>(1.0 / static_cast<double>(batch.rows));
    for_each_tensor(out.grads, [&](std::span<T> s) {
        for (T& v : s) {
            v *= inv_n;
        }
    });
    out.loss /= static_cast<double>(batch.rows);
    for (double& v : out.mean_residual_sq) {
        v /= static_cast<double>(batch.rows);
    }
    if (!std::isfinite(out.loss)) {
        throw numeric_error("forward_backward: non-finite batch loss", 0);
    }

    out.expert_grad_norms.resize(model.dims.num_steps, 0.0);
    for (std::size_t m = 0; m < model.dims.num_steps; ++m) {
        out.expert_grad_norms[m] = std::sqrt(squared_norm(
            std::span<const T>(out.grads.steps[m].expert.data)));
    }
    return out;
}

// Mean loss over a data set (forward only).
template <typename T>
double evaluate_loss(const DenseMatrix<T>& data,
                     const RqMoeModel<T>& model,
                     LossKind kind,
                     double nrl_eps = 1e-8,
                     std::size_t threads = 0) {
    if (data.rows == 0) {
        throw insufficient_data_error("evaluate_loss: empty data");
    }
    const std::size_t workers = resolve_threads(threads);
    std::vector<double> partial(workers, 0.0);
    parallel_chunks(data.rows, workers, [&](std::size_t begin, std::size_t end, std::size_t w) {
        for (std::size_t i = begin; i < end; ++i) {
            const auto trace = encode_with_trace(data.row_span(i), model);
            partial[w] += loss_from_norms(trace.residual_sq_norms, kind, nrl_eps);
        }
    });
    double total = 0.0;
    for (double p : partial) {
        total += p;
    }
    return total / static_cast<double>(data.rows);
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <typename T>
struct AdamState {
    RqMoeModel<T> first_moment;
    RqMoeModel<T> second_moment;
    std::uint64_t step = 0;

    static AdamState make(const RqMoeModel<T>& model) {
        return {zeros_like(model), zeros_like(model), 0};
    }
};

template <typename T>
void adam_step(RqMoeModel<T>& model,
               const GradientSet<T>& grads,
               AdamState<T>& state,
               const TrainConfig& config) {
    state.step += 1;
    const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));

    auto params = tensor_list(model);
    auto g = tensor_list(const_cast<GradientSet<T>&>(grads));
    auto m1 = tensor_list(state.first_moment);
    auto m2 = tensor_list(state.second_moment);
    if (params.size() != g.size()) {
        throw shape_error("adam_step: gradient layout mismatch");
    }
    for (std::size_t t = 0; t < params.size(); ++t) {
        if (params[t].size() != g[t].size()) {
            throw shape_error("adam_step: tensor shape mismatch");
        }
        for (std::size_t j = 0; j < params[t].size(); ++j) {
            const double gj = static_cast<double>(g[t][j]);
            const double m = config.beta1 * static_cast<double>(m1[t][j]) + (1.0 - config.beta1) * gj;
            const double v =
                config.beta2 * static_cast<double>(m2[t][j]) + (1.0 - config.beta2) * gj * gj;
            m1[t][j] = static_cast<T>(m);
            m2[t][j] = static_cast<T>(v);
            const double update =
                config.learning_rate * (m / bc1) / (std::sqrt(v / bc2) + config.adam_eps);
            params[t][j] = static_cast<T>(static_cast<double>(params[t][j]) - update);
        }
    }
}

// ---------------------------------------------------------------------------
// Warm start and the training loop
// ---------------------------------------------------------------------------

// Builds an RQ-MoE model that initially reproduces the given static RQ model
// exactly: base tables copied, contract layers and gate biases zeroed (zero
// deformation), expert tables small random, projection/gate/expand weights
// Kaiming-scale uniform.
template <typename T>
RqMoeModel<T> warm_start(const RqModel<T>& rq,
                         const ModelDims& dims,
                         std::uint64_t seed,
                         std::span<const double> feature_std = {}) {
    if (rq.num_steps() != dims.num_steps || rq.codebook_size() != dims.codebook_size ||
        rq.dim() != dims.dim) {
        throw config_error("warm_start: RQ model does not match requested dims");
    }
    if (dims.num_experts == 0 || dims.expert_depth == 0 || dims.hidden_dim == 0) {
        throw config_error("warm_start: N, L, H must be >= 1");
    }

    RqMoeModel<T> model = from_rq(rq, dims.expert_dim);
    model.dims = dims;

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    auto kaiming = [&](LinearLayer<T>& layer) {
        const double bound = std::sqrt(6.0 / static_cast<double>(layer.in_dim()));
        std::uniform_real_distribution<double> uniform(-bound, bound);
        for (T& wv : layer.weight.data) {
            wv = static_cast<T>(uniform(rng));
        }
        std::fill(layer.bias.begin(), layer.bias.end(), T(0));
    };

    double mean_std = 1.0;
    if (!feature_std.empty()) {
        double acc = 0.0;
        for (double sdv : feature_std) {
            acc += sdv;
        }
        mean_std = acc / static_cast<double>(feature_std.size());
    }
    for (auto& step : model.steps) {
        for (std::size_t k = 0; k < step.expert.rows; ++k) {
            T* row = step.expert.row(k);
            for (std::size_t j = 0; j < step.expert.cols; ++j) {
                const double scale =
                    0.01 * (feature_std.size() == step.expert.cols ? feature_std[j] : mean_std);
                row[j] = static_cast<T>(scale * normal(rng));
            }
        }
    }

    model.transforms.resize(dims.num_steps - 1);
    for (auto& t : model.transforms) {
        t.projection = LinearLayer<T>(dims.dim, dims.dim + dims.expert_dim);
        kaiming(t.projection);
        t.gate = LinearLayer<T>(dims.num_experts, dims.dim);
        kaiming(t.gate);
        t.experts.resize(dims.num_experts);
        for (auto& ex : t.experts) {
            ex.layers.resize(dims.expert_depth);
            for (auto& layer : ex.layers) {
                layer.expand = LinearLayer<T>(dims.hidden_dim, dims.dim);
                kaiming(layer.expand);
                layer.contract = LinearLayer<T>(dims.dim, dims.hidden_dim);
                // zero contract: the warm start is lossless
            }
        }
    }
    validate(model);
    return model;
}

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double valid_loss = 0.0;
    std::vector<double> mean_residual_sq;       // per step, epoch mean
    std::vector<double> expert_grad_norms;      // per step, epoch mean of batch L2
    std::vector<double> expert_grad_rel;        // normalized by step 1
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;
    std::size_t best_epoch = 0;  // 0 = warm start
    double best_valid = 0.0;
};

template <typename T>
DenseMatrix<T> gather_rows(const DenseMatrix<T>& data, std::span<const std::size_t> rows) {
    DenseMatrix<T> out(rows.size(), data.cols);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::copy_n(data.row(rows[i]), data.cols, out.row(i));
    }
    return out;
}

// Epoch loop with seeded shuffling, Adam updates and patience-based early
// stopping; returns the parameters with the lowest recorded validation loss.
template <typename T>
TrainHistory fit(RqMoeModel<T>& model,
                 const DenseMatrix<T>& train_set,
                 const DenseMatrix<T>& valid_set,
                 const TrainConfig& config) {
    TrainHistory history;
    if (config.max_epochs == 0) {
        return history;
    }
    if (train_set.rows == 0 || valid_set.rows == 0) {
        throw insufficient_data_error("fit: train and valid splits must be non-empty");
    }

    AdamState<T> opt = AdamState<T>::make(model);
    RqMoeModel<T> best = model;
    double best_valid =
        evaluate_loss(valid_set, model, config.loss, config.nrl_epsilon, config.threads);
    history.best_epoch = 0;
    std::size_t best_epoch = 0;

    std::mt19937_64 shuffle_rng(config.seed ^ 0x5deece66dULL);
    std::vector<std::size_t> order(train_set.rows);
    std::iota(order.begin(), order.end(), std::size_t{0});

    std::size_t bad_epochs = 0;
    for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        EpochRecord rec;
        rec.epoch = epoch;
        rec.mean_residual_sq.assign(model.dims.num_steps + 1, 0.0);
        rec.expert_grad_norms.assign(model.dims.num_steps, 0.0);
        std::size_t batches = 0;

        for (std::size_t offset = 0; offset < order.size(); offset += config.batch_size) {
            const std::size_t take = std::min(config.batch_size, order.size() - offset);
            const auto batch =
                gather_rows(train_set, std::span<const std::size_t>(order.data() + offset, take));
            ForwardBackwardResult<T> fb;
            try {
                fb = forward_backward(batch, model, config.loss, config.nrl_epsilon,
                                      config.threads);
            } catch (const numeric_error& e) {
                throw numeric_error("training diverged at epoch " + std::to_string(epoch) + ": " +
                                    e.what(), e.step());
            }
            adam_step(model, fb.grads, opt, config);
            rec.train_loss += fb.loss;
            for (std::size_t m = 0; m < fb.mean_residual_sq.size(); ++m) {
                rec.mean_residual_sq[m] += fb.mean_residual_sq[m];
            }
            for (std::size_t m = 0; m < fb.expert_grad_norms.size(); ++m) {
                rec.expert_grad_norms[m] += fb.expert_grad_norms[m];
            }
            ++batches;
        }
        rec.train_loss /= static_cast<double>(batches);
        for (double& v : rec.mean_residual_sq) {
            v /= static_cast<double>(batches);
        }
        for (double& v : rec.expert_grad_norms) {
            v /= static_cast<double>(batches);
        }
        rec.expert_grad_rel.assign(rec.expert_grad_norms.size(), 0.0);
        if (!rec.expert_grad_norms.empty() && rec.expert_grad_norms[0] > 0.0) {
            for (std::size_t m = 0; m < rec.expert_grad_norms.size(); ++m) {
                rec.expert_grad_rel[m] = rec.expert_grad_norms[m] / rec.expert_grad_norms[0];
            }
        }

        rec.valid_loss =
            evaluate_loss(valid_set, model, config.loss, config.nrl_epsilon, config.threads);
        history.epochs.push_back(rec);

        if (rec.valid_loss < best_valid) {
            best_valid = rec.valid_loss;
            best = model;
            best_epoch = epoch;
            bad_epochs = 0;
        } else {
            ++bad_epochs;
            if (bad_epochs >= config.patience) {
                break;
            }
        }
    }

    model = std::move(best);
    history.best_epoch = best_epoch;
    history.best_valid = best_valid;
    return history;
}

template <typename T>
struct TrainOutput {
    RqMoeModel<T> model;
    TrainHistory history;
    RqModel<T> warm_start_rq;
};

// Full protocol: static RQ warm start, then NRL (or ablation) training.
template <typename T>
TrainOutput<T> train(const DenseMatrix<T>& train_set,
                     const DenseMatrix<T>& valid_set,
                     const ModelDims& dims,
                     const TrainConfig& config) {
    if (train_set.rows == 0 || valid_set.rows == 0) {
        throw insufficient_data_error("train: train and valid splits must be non-empty");
    }
    TrainOutput<T> out;
    out.warm_start_rq = rq_train(train_set, dims.num_steps, dims.codebook_size, config.seed, 25,
                                 config.threads);
    const auto [mean, stddev] = column_mean_std(train_set);
    (void)mean;
    out.model = warm_start<T>(out.warm_start_rq, dims, config.seed + 7,
                              std::span<const double>(stddev));
    out.history = fit(out.model, train_set, valid_set, config);
    return out;
}

}  // namespace rqmoe
