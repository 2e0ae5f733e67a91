#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rqmoe/numerics.hpp"
#include "rqmoe/parallel.hpp"
#include "rqmoe/rq.hpp"

namespace rqmoe {

struct ModelDims {
    std::size_t dim = 0;            // D
    std::size_t expert_dim = 0;     // D_e
    std::size_t codebook_size = 0;  // K
    std::size_t num_steps = 0;      // M
    std::size_t num_experts = 0;    // N (0 for static models)
    std::size_t expert_depth = 0;   // L
    std::size_t hidden_dim = 0;     // H
};

// Paired per-step tables sharing one index space: `base` quantizes the
// residual, `expert` carries the routing signal appended to the instruction.
template <typename T>
struct HyperCodebook {
    DenseMatrix<T> base;    // K x D
    DenseMatrix<T> expert;  // K x D_e
};

template <typename T>
struct ExpertLayer {
    LinearLayer<T> expand;    // D -> H
    LinearLayer<T> contract;  // H -> D
};

// Residual MLP block: h_l = h_{l-1} + contract_l(relu(expand_l(h_{l-1}))).
template <typename T>
struct BottleneckExpert {
    std::vector<ExpertLayer<T>> layers;
};

// Per-step codebook adaptation network, present for steps 2..M.
template <typename T>
struct StepTransform {
    LinearLayer<T> projection;  // (D + D_e) -> D
    LinearLayer<T> gate;        // D -> N
    std::vector<BottleneckExpert<T>> experts;
};

template <typename T>
struct RqMoeModel {
    ModelDims dims;
    std::vector<HyperCodebook<T>> steps;       // M entries
    std::vector<StepTransform<T>> transforms;  // empty (static) or M-1 entries

    // With no transforms and D_e = 0 the model behaves exactly like a plain
    // residual quantizer over its base tables.
    bool is_static() const { return transforms.empty(); }
};

// Accumulated conditioning vector I^m. I^1 is all zeros; I^m depends only on
// the indices i^1..i^{m-1} and the expert tables.
template <typename T>
struct InstructionState {
    std::vector<T> values;
    std::size_t step = 1;

    InstructionState() = default;
    explicit InstructionState(std::size_t expert_dim) : values(expert_dim, T(0)), step(1) {}
};

template <typename T>
InstructionState<T> instruction_update(const InstructionState<T>& state,
                                       std::span<const T> expert_row) {
    if (expert_row.size() != state.values.size()) {
        throw shape_error("instruction_update: expert row dim " + std::to_string(expert_row.size()) +
                          " vs instruction dim " + std::to_string(state.values.size()));
    }
    InstructionState<T> out = state;
    for (std::size_t j = 0; j < expert_row.size(); ++j) {
        out.values[j] += expert_row[j];
    }
    out.step = state.step + 1;
    return out;
}

// Preallocated temporaries for one codeword transform.
template <typename T>
struct TransformScratch {
    std::vector<T> cat;     // D + D_e
    std::vector<T> z;       // D
    std::vector<T> logits;  // N
    std::vector<T> alpha;   // N
    std::vector<T> h;       // D
    std::vector<T> a;       // H
    std::vector<T> u;       // H
    std::vector<T> ct;      // D
    std::vector<T> mix;     // D

    TransformScratch() = default;
    explicit TransformScratch(const ModelDims& d) { resize(d); }
    void resize(const ModelDims& d) {
        cat.resize(d.dim + d.expert_dim);
        z.resize(d.dim);
        logits.resize(d.num_experts);
        alpha.resize(d.num_experts);
        h.resize(d.dim);
        a.resize(d.hidden_dim);
        u.resize(d.hidden_dim);
        ct.resize(d.dim);
        mix.resize(d.dim);
    }
};

// h_out <- expert(z). a/u/ct hold the last layer's pre-activation, activation
// and contract output; callers that need the full trace record per layer.
template <typename T>
void expert_forward(const BottleneckExpert<T>& expert,
                    std::span<const T> z,
                    std::span<T> h_out,
                    std::span<T> a_scratch,
                    std::span<T> u_scratch,
                    std::span<T> ct_scratch) {
    if (z.size() != h_out.size()) {
        throw shape_error("expert_forward: input/output dim mismatch");
    }
    std::copy(z.begin(), z.end(), h_out.begin());
    for (const auto& layer : expert.layers) {
        layer.expand.apply(std::span<const T>(h_out.data(), h_out.size()), a_scratch);
        std::copy(a_scratch.begin(), a_scratch.end(), u_scratch.begin());
        relu_inplace(u_scratch);
        layer.contract.apply(std::span<const T>(u_scratch.data(), u_scratch.size()), ct_scratch);
        for (std::size_t j = 0; j < h_out.size(); ++j) {
            h_out[j] += ct_scratch[j];
        }
    }
}

template <typename T>
std::vector<T> expert_forward(const BottleneckExpert<T>& expert, std::span<const T> z) {
    if (expert.layers.empty()) {
        return std::vector<T>(z.begin(), z.end());
    }
    const std::size_t hidden = expert.layers.front().expand.out_dim();
    std::vector<T> h(z.size()), a(hidden), u(hidden), ct(z.size());
    expert_forward(expert, z, std::span<T>(h), std::span<T>(a), std::span<T>(u), std::span<T>(ct));
    return h;
}

// One dynamic codeword:
//   z      = projection([c ; I])
//   alpha  = softmax(gate(z))
//   c~     = c + sum_n alpha_n * (expert_n(z) - z)
// The deformation excludes the experts' shared identity path, so a model
// whose contract layers are all zero leaves every codeword unchanged.
template <typename T>
void transform_codeword(const StepTransform<T>& t,
                        std::span<const T> base_row,
                        std::span<const T> instruction,
                        std::span<T> out,
                        TransformScratch<T>& ws) {
    concat(base_row, instruction, std::span<T>(ws.cat));
    t.projection.apply(std::span<const T>(ws.cat), std::span<T>(ws.z));
    t.gate.apply(std::span<const T>(ws.z), std::span<T>(ws.logits));
    softmax(std::span<const T>(ws.logits), std::span<T>(ws.alpha));
    std::fill(ws.mix.begin(), ws.mix.end(), T(0));
    for (std::size_t n = 0; n < t.experts.size(); ++n) {
        expert_forward(t.experts[n], std::span<const T>(ws.z), std::span<T>(ws.h),
                       std::span<T>(ws.a), std::span<T>(ws.u), std::span<T>(ws.ct));
        for (std::size_t j = 0; j < ws.h.size(); ++j) {
            ws.h[j] -= ws.z[j];
        }
        axpy(ws.alpha[n], std::span<const T>(ws.h), std::span<T>(ws.mix));
    }
    for (std::size_t j = 0; j < out.size(); ++j) {
        out[j] = base_row[j] + ws.mix[j];
    }
}

template <typename T>
std::vector<T> transform_codeword(const StepTransform<T>& t,
                                  std::span<const T> base_row,
                                  std::span<const T> instruction) {
    ModelDims d;
    d.dim = base_row.size();
    d.expert_dim = instruction.size();
    d.num_experts = t.experts.size();
    d.hidden_dim = t.experts.empty() || t.experts.front().layers.empty()
                       ? 0
                       : t.experts.front().layers.front().expand.out_dim();
    TransformScratch<T> ws(d);
    std::vector<T> out(base_row.size());
    transform_codeword(t, base_row, instruction, std::span<T>(out), ws);
    return out;
}

// Applies the step transform to every codeword of a base table.
template <typename T>
DenseMatrix<T> transform_codebook(const StepTransform<T>& t,
                                  const DenseMatrix<T>& base,
                                  const InstructionState<T>& instruction) {
    if (t.projection.in_dim() != base.cols + instruction.values.size()) {
        throw shape_error("transform_codebook: projection expects in_dim " +
                          std::to_string(t.projection.in_dim()) + ", got " +
                          std::to_string(base.cols + instruction.values.size()));
    }
    ModelDims d;
    d.dim = base.cols;
    d.expert_dim = instruction.values.size();
    d.num_experts = t.experts.size();
    d.hidden_dim = t.experts.empty() || t.experts.front().layers.empty()
                       ? 0
                       : t.experts.front().layers.front().expand.out_dim();
    TransformScratch<T> ws(d);
    DenseMatrix<T> out(base.rows, base.cols);
    for (std::size_t k = 0; k < base.rows; ++k) {
        transform_codeword(t, base.row_span(k), std::span<const T>(instruction.values),
                           out.row_span(k), ws);
    }
    return out;
}

// Step m's table under instruction I. Step 1 uses the base table directly.
template <typename T>
DenseMatrix<T> dynamic_codebook(const RqMoeModel<T>& model,
                                std::size_t m,
                                const InstructionState<T>& instruction) {
    if (m < 1 || m > model.dims.num_steps) {
        throw range_error("dynamic_codebook: step " + std::to_string(m) + " out of [1, " +
                          std::to_string(model.dims.num_steps) + "]");
    }
    if (m == 1 || model.is_static()) {
        return model.steps[m - 1].base;
    }
    return transform_codebook(model.transforms[m - 2], model.steps[m - 1].base, instruction);
}

template <typename T>
struct EncodeTrace {
    Code code;
    std::vector<double> residual_sq_norms;  // ||r^1||^2 .. ||r^{M+1}||^2
};

namespace detail {

// Core greedy encode loop. The dynamic table for step one (and for static
// models) is the base table itself, so the degenerate path runs the very
// same arithmetic as rq_encode.
template <typename T>
EncodeTrace<T> encode_impl(std::span<const T> x, const RqMoeModel<T>& model) {
    const std::size_t num_steps = model.dims.num_steps;
    EncodeTrace<T> trace;
    trace.code.reserve(num_steps);
    trace.residual_sq_norms.reserve(num_steps + 1);

    std::vector<T> residual(x.begin(), x.end());
    InstructionState<T> instruction(model.dims.expert_dim);
    DenseMatrix<T> table;
    TransformScratch<T> ws(model.dims);

    trace.residual_sq_norms.push_back(squared_norm(std::span<const T>(residual)));
    for (std::size_t s = 0; s < num_steps; ++s) {
        const bool dynamic = s > 0 && !model.is_static();
        const DenseMatrix<T>* active = &model.steps[s].base;
        if (dynamic) {
            const auto& base = model.steps[s].base;
            if (table.rows != base.rows || table.cols != base.cols) {
                table = DenseMatrix<T>(base.rows, base.cols);
            }
            for (std::size_t k = 0; k < base.rows; ++k) {
                transform_codeword(model.transforms[s - 1], base.row_span(k),
                                   std::span<const T>(instruction.values), table.row_span(k), ws);
            }
            active = &table;
        }
        const auto [idx, d2] = argmin_l2(std::span<const T>(residual), *active);
        (void)d2;
        const T* chosen = active->row(idx);
        for (std::size_t j = 0; j < residual.size(); ++j) {
            residual[j] -= chosen[j];
        }
        trace.code.push_back(static_cast<std::uint32_t>(idx));
        trace.residual_sq_norms.push_back(squared_norm(std::span<const T>(residual)));
        if (!model.is_static() && s + 1 < num_steps) {
            instruction = instruction_update(instruction, model.steps[s].expert.row_span(idx));
        }
    }
    return trace;
}

template <typename T>
void check_code(const Code& code, const RqMoeModel<T>& model) {
    if (code.size() != model.dims.num_steps) {
        throw invalid_code_error("code length " + std::to_string(code.size()) + " vs M=" +
                                 std::to_string(model.dims.num_steps));
    }
    for (std::size_t s = 0; s < code.size(); ++s) {
        if (code[s] >= model.dims.codebook_size) {
            throw invalid_code_error("index " + std::to_string(code[s]) +
                                     " out of range at step " + std::to_string(s + 1));
        }
    }
}

// Instruction pre-pass: I^1..I^M from indices and expert tables alone, by
// prefix sums in step order. Never touches a dynamic codebook.
template <typename T>
std::vector<std::vector<T>> instruction_prepass(const Code& code, const RqMoeModel<T>& model) {
    const std::size_t num_steps = model.dims.num_steps;
    std::vector<std::vector<T>> out(num_steps, std::vector<T>(model.dims.expert_dim, T(0)));
    for (std::size_t s = 1; s < num_steps; ++s) {
        out[s] = out[s - 1];
        const T* row = model.steps[s - 1].expert.row(code[s - 1]);
        for (std::size_t j = 0; j < out[s].size(); ++j) {
            out[s][j] += row[j];
        }
    }
    return out;
}

// Selected dynamic codeword for step s (0-based) under instruction I.
template <typename T>
void selected_codeword(const RqMoeModel<T>& model,
                       std::size_t s,
                       std::uint32_t index,
                       std::span<const T> instruction,
                       std::span<T> out,
                       TransformScratch<T>& ws) {
    const auto base_row = model.steps[s].base.row_span(index);
    if (s == 0 || model.is_static()) {
        std::copy(base_row.begin(), base_row.end(), out.begin());
    } else {
        transform_codeword(model.transforms[s - 1], base_row, instruction, out, ws);
    }
}

}  // namespace detail

template <typename T>
Code encode(std::span<const T> x, const RqMoeModel<T>& model) {
    if (x.size() != model.dims.dim) {
        throw shape_error("encode: vector dim " + std::to_string(x.size()) + " vs model dim " +
                          std::to_string(model.dims.dim));
    }
    return detail::encode_impl(x, model).code;
}

template <typename T>
EncodeTrace<T> encode_with_trace(std::span<const T> x, const RqMoeModel<T>& model) {
    if (x.size() != model.dims.dim) {
        throw shape_error("encode: vector dim " + std::to_string(x.size()) + " vs model dim " +
                          std::to_string(model.dims.dim));
    }
    return detail::encode_impl(x, model);
}

// Step-by-step reconstruction, replaying the encoder's path.
template <typename T>
std::vector<T> decode_sequential(const Code& code, const RqMoeModel<T>& model) {
    detail::check_code(code, model);
    std::vector<T> recon(model.dims.dim, T(0));
    std::vector<T> codeword(model.dims.dim);
    InstructionState<T> instruction(model.dims.expert_dim);
    TransformScratch<T> ws(model.dims);
    for (std::size_t s = 0; s < code.size(); ++s) {
        detail::selected_codeword(model, s, code[s], std::span<const T>(instruction.values),
                                  std::span<T>(codeword), ws);
        for (std::size_t j = 0; j < recon.size(); ++j) {
            recon[j] += codeword[j];
        }
        if (!model.is_static() && s + 1 < code.size()) {
            instruction = instruction_update(instruction, model.steps[s].expert.row_span(code[s]));
        }
    }
    return recon;
}

// Two-phase decode: the instruction pre-pass first, then every step's
// codeword as an independent task, then an ordered reduction. The result is
// summed in step order regardless of which worker finishes first, so it
// matches decode_sequential bitwise.
template <typename T>
std::vector<T> decode_parallel(const Code& code, const RqMoeModel<T>& model,
                               std::size_t threads = 0) {
    detail::check_code(code, model);
    const std::size_t num_steps = code.size();
    const auto instructions = detail::instruction_prepass(code, model);

    DenseMatrix<T> slots(num_steps, model.dims.dim);
    parallel_chunks(num_steps, threads, [&](std::size_t begin, std::size_t end, std::size_t) {
        TransformScratch<T> ws(model.dims);
        for (std::size_t s = begin; s < end; ++s) {
            detail::selected_codeword(model, s, code[s], std::span<const T>(instructions[s]),
                                      slots.row_span(s), ws);
        }
    });

    std::vector<T> recon(model.dims.dim, T(0));
    for (std::size_t s = 0; s < num_steps; ++s) {
        const T* row = slots.row(s);
        for (std::size_t j = 0; j < recon.size(); ++j) {
            recon[j] += row[j];
        }
    }
    return recon;
}

// Reconstruction from the first m_stop indices only.
template <typename T>
std::vector<T> decode_truncated(const Code& code, std::size_t m_stop, const RqMoeModel<T>& model) {
    if (m_stop < 1 || m_stop > model.dims.num_steps) {
        throw range_error("decode_truncated: m_stop " + std::to_string(m_stop) + " out of [1, " +
                          std::to_string(model.dims.num_steps) + "]");
    }
    detail::check_code(code, model);
    std::vector<T> recon(model.dims.dim, T(0));
    std::vector<T> codeword(model.dims.dim);
    InstructionState<T> instruction(model.dims.expert_dim);
    TransformScratch<T> ws(model.dims);
    for (std::size_t s = 0; s < m_stop; ++s) {
        detail::selected_codeword(model, s, code[s], std::span<const T>(instruction.values),
                                  std::span<T>(codeword), ws);
        for (std::size_t j = 0; j < recon.size(); ++j) {
            recon[j] += codeword[j];
        }
        if (!model.is_static() && s + 1 < code.size()) {
            instruction = instruction_update(instruction, model.steps[s].expert.row_span(code[s]));
        }
    }
    return recon;
}

// All prefix reconstructions in one pass; row m-1 equals
// decode_truncated(code, m, model) bitwise.
template <typename T>
DenseMatrix<T> decode_prefixes(const Code& code, const RqMoeModel<T>& model) {
    detail::check_code(code, model);
    DenseMatrix<T> out(model.dims.num_steps, model.dims.dim);
    std::vector<T> recon(model.dims.dim, T(0));
    std::vector<T> codeword(model.dims.dim);
    InstructionState<T> instruction(model.dims.expert_dim);
    TransformScratch<T> ws(model.dims);
    for (std::size_t s = 0; s < code.size(); ++s) {
        detail::selected_codeword(model, s, code[s], std::span<const T>(instruction.values),
                                  std::span<T>(codeword), ws);
        for (std::size_t j = 0; j < recon.size(); ++j) {
            recon[j] += codeword[j];
        }
        std::copy(recon.begin(), recon.end(), out.row(s));
        if (!model.is_static() && s + 1 < code.size()) {
            instruction = instruction_update(instruction, model.steps[s].expert.row_span(code[s]));
        }
    }
    return out;
}

template <typename T>
Codes encode_batch(const DenseMatrix<T>& xs, const RqMoeModel<T>& model, std::size_t threads = 0) {
    Codes out(xs.rows, model.dims.num_steps);
    parallel_chunks(xs.rows, threads, [&](std::size_t begin, std::size_t end, std::size_t) {
        for (std::size_t i = begin; i < end; ++i) {
            out.set(i, encode(xs.row_span(i), model));
        }
    });
    return out;
}

// Batched two-phase decode: pre-pass per vector, then all (vector, step)
// codeword tasks run independently, then ordered per-vector reductions.
template <typename T>
DenseMatrix<T> decode_parallel_batch(const Codes& codes, const RqMoeModel<T>& model,
                                     std::size_t threads = 0) {
    const std::size_t num_steps = model.dims.num_steps;
    if (codes.steps != num_steps) {
        throw invalid_code_error("decode_parallel_batch: code length mismatch");
    }
    const std::size_t n = codes.count;
    DenseMatrix<T> instructions(n * num_steps, model.dims.expert_dim);
    parallel_chunks(n, threads, [&](std::size_t begin, std::size_t end, std::size_t) {
        for (std::size_t i = begin; i < end; ++i) {
            const auto code = codes.row(i);
            for (std::size_t s = 1; s < num_steps; ++s) {
                const T* prev = instructions.row(i * num_steps + s - 1);
                const T* row = model.steps[s - 1].expert.row(code[s - 1]);
                T* cur = instructions.row(i * num_steps + s);
                for (std::size_t j = 0; j < model.dims.expert_dim; ++j) {
                    cur[j] = prev[j] + row[j];
                }
            }
        }
    });

    DenseMatrix<T> slots(n * num_steps, model.dims.dim);
    parallel_chunks(n * num_steps, threads, [&](std::size_t begin, std::size_t end, std::size_t) {
        TransformScratch<T> ws(model.dims);
        for (std::size_t task = begin; task < end; ++task) {
            const std::size_t i = task / num_steps;
            const std::size_t s = task % num_steps;
            detail::selected_codeword(model, s, codes.row(i)[s],
                                      instructions.row_span(i * num_steps + s),
                                      slots.row_span(task), ws);
        }
    });

    DenseMatrix<T> recon(n, model.dims.dim);
    parallel_chunks(n, threads, [&](std::size_t begin, std::size_t end, std::size_t) {
        for (std::size_t i = begin; i < end; ++i) {
            T* out = recon.row(i);
            std::fill(out, out + model.dims.dim, T(0));
            for (std::size_t s = 0; s < num_steps; ++s) {
                const T* row = slots.row(i * num_steps + s);
                for (std::size_t j = 0; j < model.dims.dim; ++j) {
                    out[j] += row[j];
                }
            }
        }
    });
    return recon;
}

// Single-threaded sequential decode of a whole batch (the baseline the
// parallel path is benchmarked against).
template <typename T>
DenseMatrix<T> decode_sequential_batch(const Codes& codes, const RqMoeModel<T>& model) {
    DenseMatrix<T> recon(codes.count, model.dims.dim);
    for (std::size_t i = 0; i < codes.count; ++i) {
        const auto v = decode_sequential(codes.code(i), model);
        std::copy(v.begin(), v.end(), recon.row(i));
    }
    return recon;
}

// ---------------------------------------------------------------------------
// Construction, validation, conversion
// ---------------------------------------------------------------------------

// Wraps a static RQ model as a transform-free RqMoeModel (expert tables are
// zero-width unless expert_dim is given).
template <typename T>
RqMoeModel<T> from_rq(const RqModel<T>& rq, std::size_t expert_dim = 0) {
    RqMoeModel<T> model;
    model.dims.dim = rq.dim();
    model.dims.expert_dim = expert_dim;
    model.dims.codebook_size = rq.codebook_size();
    model.dims.num_steps = rq.num_steps();
    model.steps.reserve(rq.num_steps());
    for (const auto& cb : rq.codebooks) {
        HyperCodebook<T> step;
        step.base = cb.entries;
        step.expert = DenseMatrix<T>(cb.entries.rows, expert_dim);
        model.steps.push_back(std::move(step));
    }
    return model;
}

// Extracts the base tables as a static RQ model.
template <typename T>
RqModel<T> base_rq(const RqMoeModel<T>& model) {
    RqModel<T> rq;
    rq.codebooks.reserve(model.steps.size());
    for (std::size_t m = 0; m < model.steps.size(); ++m) {
        rq.codebooks.push_back({model.steps[m].base, m + 1});
    }
    return rq;
}

template <typename T>
void validate(const RqMoeModel<T>& model) {
    const auto& d = model.dims;
    if (d.num_steps == 0 || model.steps.size() != d.num_steps) {
        throw shape_error("model: expected " + std::to_string(d.num_steps) + " steps, have " +
                          std::to_string(model.steps.size()));
    }
    if (d.codebook_size == 0 || d.dim == 0) {
        throw shape_error("model: K and D must be >= 1");
    }
    for (std::size_t m = 0; m < d.num_steps; ++m) {
        const auto& step = model.steps[m];
        if (step.base.rows != d.codebook_size || step.base.cols != d.dim) {
            throw shape_error("model: base table shape mismatch at step " + std::to_string(m + 1));
        }
        if (step.expert.rows != d.codebook_size || step.expert.cols != d.expert_dim) {
            throw shape_error("model: expert table shape mismatch at step " + std::to_string(m + 1));
        }
        if (!all_finite(step.base) || !all_finite(step.expert)) {
            throw numeric_error("model: non-finite codebook entry at step " + std::to_string(m + 1),
                                m + 1);
        }
    }
    if (!model.transforms.empty()) {
        if (model.transforms.size() != d.num_steps - 1) {
            throw shape_error("model: expected " + std::to_string(d.num_steps - 1) +
                              " step transforms, have " + std::to_string(model.transforms.size()));
        }
        if (d.num_experts == 0 || d.expert_depth == 0 || d.hidden_dim == 0) {
            throw shape_error("model: N, L, H must be >= 1 when transforms are present");
        }
        for (std::size_t t = 0; t < model.transforms.size(); ++t) {
            const auto& tr = model.transforms[t];
            const std::string where = " in transform of step " + std::to_string(t + 2);
            if (tr.projection.out_dim() != d.dim || tr.projection.in_dim() != d.dim + d.expert_dim) {
                throw shape_error("model: projection shape mismatch" + where);
            }
            if (tr.gate.out_dim() != d.num_experts || tr.gate.in_dim() != d.dim) {
                throw shape_error("model: gate shape mismatch" + where);
            }
            if (tr.experts.size() != d.num_experts) {
                throw shape_error("model: expert count mismatch" + where);
            }
            for (const auto& ex : tr.experts) {
                if (ex.layers.size() != d.expert_depth) {
                    throw shape_error("model: expert depth mismatch" + where);
                }
                for (const auto& layer : ex.layers) {
                    if (layer.expand.out_dim() != d.hidden_dim || layer.expand.in_dim() != d.dim ||
                        layer.contract.out_dim() != d.dim || layer.contract.in_dim() != d.hidden_dim) {
                        throw shape_error("model: expert layer shape mismatch" + where);
                    }
                }
            }
        }
    }
}

// Tensor enumeration in declared order: per step base then expert table, then
// per transform projection/gate/expert layers. Serialization, the optimizer
// and the gradient checker all share this order.
template <typename T, typename Fn>
void for_each_tensor(RqMoeModel<T>& model, Fn&& fn) {
    for (auto& step : model.steps) {
        fn(std::span<T>(step.base.data));
        fn(std::span<T>(step.expert.data));
    }
    for (auto& t : model.transforms) {
        fn(std::span<T>(t.projection.weight.data));
        fn(std::span<T>(t.projection.bias));
        fn(std::span<T>(t.gate.weight.data));
        fn(std::span<T>(t.gate.bias));
        for (auto& ex : t.experts) {
            for (auto& layer : ex.layers) {
                fn(std::span<T>(layer.expand.weight.data));
                fn(std::span<T>(layer.expand.bias));
                fn(std::span<T>(layer.contract.weight.data));
                fn(std::span<T>(layer.contract.bias));
            }
        }
    }
}

template <typename T, typename Fn>
void for_each_tensor(const RqMoeModel<T>& model, Fn&& fn) {
    for_each_tensor(const_cast<RqMoeModel<T>&>(model),
                    [&](std::span<T> s) { fn(std::span<const T>(s)); });
}

template <typename T>
std::vector<std::span<T>> tensor_list(RqMoeModel<T>& model) {
    std::vector<std::span<T>> out;
    for_each_tensor(model, [&](std::span<T> s) { out.push_back(s); });
    return out;
}

template <typename T>
std::size_t parameter_count(const RqMoeModel<T>& model) {
    std::size_t n = 0;
    for_each_tensor(model, [&](std::span<const T> s) { n += s.size(); });
    return n;
}

template <typename T>
RqMoeModel<T> zeros_like(const RqMoeModel<T>& model) {
    RqMoeModel<T> out = model;
    for_each_tensor(out, [](std::span<T> s) { std::fill(s.begin(), s.end(), T(0)); });
    return out;
}

template <typename To, typename From>
RqMoeModel<To> convert_model(const RqMoeModel<From>& model) {
    RqMoeModel<To> out;
    out.dims = model.dims;
    out.steps.resize(model.steps.size());
    out.transforms.resize(model.transforms.size());

    auto cast_matrix = [](const DenseMatrix<From>& src) {
        DenseMatrix<To> dst(src.rows, src.cols);
        for (std::size_t i = 0; i < src.data.size(); ++i) {
            dst.data[i] = static_cast<To>(src.data[i]);
        }
        return dst;
    };
    auto cast_layer = [&](const LinearLayer<From>& src) {
        LinearLayer<To> dst;
        dst.weight = cast_matrix(src.weight);
        dst.bias.resize(src.bias.size());
        for (std::size_t i = 0; i < src.bias.size(); ++i) {
            dst.bias[i] = static_cast<To>(src.bias[i]);
        }
        return dst;
    };

    for (std::size_t m = 0; m < model.steps.size(); ++m) {
        out.steps[m].base = cast_matrix(model.steps[m].base);
        out.steps[m].expert = cast_matrix(model.steps[m].expert);
    }
    for (std::size_t t = 0; t < model.transforms.size(); ++t) {
        out.transforms[t].projection = cast_layer(model.transforms[t].projection);
        out.transforms[t].gate = cast_layer(model.transforms[t].gate);
        out.transforms[t].experts.resize(model.transforms[t].experts.size());
        for (std::size_t n = 0; n < model.transforms[t].experts.size(); ++n) {
            auto& dst = out.transforms[t].experts[n];
            for (const auto& layer : model.transforms[t].experts[n].layers) {
                dst.layers.push_back({cast_layer(layer.expand), cast_layer(layer.contract)});
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Closed-form FLOP counts per vector (encode / decode)
// ---------------------------------------------------------------------------

enum class FlopsVariant { rqmoe, qinco, unq };
enum class FlopsPhase { encode, decode };

struct FlopsDims {
    std::uint64_t M = 1;
    std::uint64_t K = 1;
    std::uint64_t D = 1;
    std::uint64_t N = 1;
    std::uint64_t L = 1;
    std::uint64_t H = 1;
    std::uint64_t b = 0;        // unq codeword dimensionality
    std::uint64_t H_prime = 0;  // unq hidden width
};

inline std::uint64_t flops_estimate(const FlopsDims& d, FlopsVariant variant, FlopsPhase phase) {
    switch (variant) {
        case FlopsVariant::rqmoe:
            return phase == FlopsPhase::encode
                       ? 2 * d.M * d.K * d.D * (d.D + d.N * d.L * d.H + d.N)
                       : 2 * d.M * d.D * (d.D + d.N * d.L * d.H + d.N);
        case FlopsVariant::qinco:
            return phase == FlopsPhase::encode ? 2 * d.M * d.K * d.D * (d.D + d.L * d.H)
                                               : 2 * d.M * d.D * (d.D + d.L * d.H);
        case FlopsVariant::unq:
            if (d.H_prime == 0) {
                throw config_error("flops_estimate: unq requires H' and b");
            }
            return phase == FlopsPhase::encode
                       ? d.H_prime * (d.D + d.H + d.M * d.b + d.M * d.K)
                       : d.H_prime * (d.b + d.H_prime + d.D + d.M);
    }
    throw config_error("flops_estimate: unknown variant");
}

inline FlopsVariant parse_flops_variant(const std::string& s) {
    if (s == "rqmoe") return FlopsVariant::rqmoe;
    if (s == "qinco") return FlopsVariant::qinco;
    if (s == "unq") return FlopsVariant::unq;
    throw config_error("unknown variant '" + s + "' (expected rqmoe|qinco|unq)");
}

}  // namespace rqmoe
