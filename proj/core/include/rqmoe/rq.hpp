#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "rqmoe/numerics.hpp"
#include "rqmoe/parallel.hpp"

namespace rqmoe {

// Indices for one vector, one entry per quantization step.
using Code = std::vector<std::uint32_t>;

// Flat container for a batch of codes (count x steps, row-major).
struct Codes {
    std::size_t count = 0;
    std::size_t steps = 0;
    std::vector<std::uint32_t> flat;

    Codes() = default;
    Codes(std::size_t n, std::size_t m) : count(n), steps(m), flat(n * m, 0) {}

    std::span<std::uint32_t> row(std::size_t i) { return {flat.data() + i * steps, steps}; }
    std::span<const std::uint32_t> row(std::size_t i) const {
        return {flat.data() + i * steps, steps};
    }
    Code code(std::size_t i) const {
        auto r = row(i);
        return Code(r.begin(), r.end());
    }
    void set(std::size_t i, const Code& c) {
        std::copy(c.begin(), c.end(), flat.begin() + static_cast<std::ptrdiff_t>(i * steps));
    }
};

template <typename T>
struct StaticCodebook {
    DenseMatrix<T> entries;      // K x D
    std::size_t step_index = 1;  // 1-based position in the model
};

template <typename T>
struct RqModel {
    std::vector<StaticCodebook<T>> codebooks;

    std::size_t num_steps() const { return codebooks.size(); }
    std::size_t dim() const { return codebooks.empty() ? 0 : codebooks.front().entries.cols; }
    std::size_t codebook_size() const {
        return codebooks.empty() ? 0 : codebooks.front().entries.rows;
    }
};

namespace detail {

// k-means++ seeding: first centroid uniform, the rest sampled proportionally
// to the squared distance to the nearest centroid chosen so far.
template <typename T>
DenseMatrix<T> kmeanspp_seed(const DenseMatrix<T>& data, std::size_t k, std::mt19937_64& rng) {
    const std::size_t n = data.rows;
    DenseMatrix<T> centroids(k, data.cols);
    std::uniform_int_distribution<std::size_t> uniform_idx(0, n - 1);
    std::uniform_real_distribution<double> uniform01(0.0, 1.0);

    const std::size_t first = uniform_idx(rng);
    std::copy_n(data.row(first), data.cols, centroids.row(0));

    std::vector<double> min_d2(n);
    for (std::size_t i = 0; i < n; ++i) {
        min_d2[i] = static_cast<double>(squared_distance(data.row_span(i), centroids.row_span(0)));
    }

    for (std::size_t c = 1; c < k; ++c) {
        double total = 0.0;
        for (double d : min_d2) {
            total += d;
        }
        std::size_t pick;
        if (total <= 0.0) {
            pick = uniform_idx(rng);
        } else {
            const double target = uniform01(rng) * total;
            double cum = 0.0;
            pick = n - 1;
            for (std::size_t i = 0; i < n; ++i) {
                cum += min_d2[i];
                if (cum >= target) {
                    pick = i;
                    break;
                }
            }
        }
        std::copy_n(data.row(pick), data.cols, centroids.row(c));
        for (std::size_t i = 0; i < n; ++i) {
            const double d =
                static_cast<double>(squared_distance(data.row_span(i), centroids.row_span(c)));
            min_d2[i] = std::min(min_d2[i], d);
        }
    }
    return centroids;
}

}  // namespace detail

// Lloyd's algorithm with k-means++ seeding. Deterministic for a fixed
// (seed, thread count): assignment partials are reduced in worker order.
// Empty clusters are re-seeded from the farthest point of the largest cluster.
// Converges when fewer than 0.1% of points change assignment.
template <typename T>
StaticCodebook<T> kmeans_fit(const DenseMatrix<T>& data,
                             std::size_t k,
                             std::size_t max_iters,
                             std::uint64_t seed,
                             std::size_t threads = 0) {
    if (k == 0) {
        throw config_error("kmeans_fit: K must be >= 1");
    }
    if (data.rows < k) {
        throw insufficient_data_error("kmeans_fit: " + std::to_string(data.rows) +
                                      " points for K=" + std::to_string(k));
    }
    const std::size_t n = data.rows;
    const std::size_t d = data.cols;
    const std::size_t workers = resolve_threads(threads);

    std::mt19937_64 rng(seed);
    DenseMatrix<T> centroids = detail::kmeanspp_seed(data, k, rng);
    std::vector<std::uint32_t> assign(n, 0);

    for (std::size_t iter = 0; iter < max_iters; ++iter) {
        std::vector<std::vector<double>> part_sums(workers);
        std::vector<std::vector<std::size_t>> part_counts(workers);
        std::vector<std::size_t> part_changed(workers, 0);

        parallel_chunks(n, workers, [&](std::size_t begin, std::size_t end, std::size_t w) {
            part_sums[w].assign(k * d, 0.0);
            part_counts[w].assign(k, 0);
            for (std::size_t i = begin; i < end; ++i) {
                const auto [best, best_d] = argmin_l2(data.row_span(i), centroids);
                (void)best_d;
                if (assign[i] != best) {
                    ++part_changed[w];
                    assign[i] = static_cast<std::uint32_t>(best);
                }
                double* sums = part_sums[w].data() + best * d;
                const T* x = data.row(i);
                for (std::size_t j = 0; j < d; ++j) {
                    sums[j] += x[j];
                }
                ++part_counts[w][best];
            }
        });

        std::vector<double> sums(k * d, 0.0);
        std::vector<std::size_t> counts(k, 0);
        std::size_t changed = 0;
        for (std::size_t w = 0; w < workers; ++w) {
            if (part_sums[w].empty()) {
                continue;
            }
            for (std::size_t j = 0; j < k * d; ++j) {
                sums[j] += part_sums[w][j];
            }
            for (std::size_t c = 0; c < k; ++c) {
                counts[c] += part_counts[w][c];
            }
            changed += part_changed[w];
        }

        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] == 0) {
                continue;
            }
            T* row = centroids.row(c);
            for (std::size_t j = 0; j < d; ++j) {
                row[j] = static_cast<T>(sums[c * d + j] / static_cast<double>(counts[c]));
            }
        }

        // Re-seed empty clusters from the farthest point of the largest cluster.
        std::vector<bool> stolen(n, false);
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] != 0) {
                continue;
            }
            std::size_t largest = 0;
            for (std::size_t g = 1; g < k; ++g) {
                if (counts[g] > counts[largest]) {
                    largest = g;
                }
            }
            if (counts[largest] == 0) {
                break;
            }
            double far_d = -1.0;
            std::size_t far_i = 0;
            for (std::size_t i = 0; i < n; ++i) {
                if (assign[i] != largest || stolen[i]) {
                    continue;
                }
                const double dist = static_cast<double>(
                    squared_distance(data.row_span(i), centroids.row_span(largest)));
                if (dist > far_d) {
                    far_d = dist;
                    far_i = i;
                }
            }
            if (far_d < 0.0) {
                continue;
            }
            std::copy_n(data.row(far_i), d, centroids.row(c));
            stolen[far_i] = true;
            --counts[largest];
            counts[c] = 1;
        }

        if (iter > 0 && static_cast<double>(changed) < 0.001 * static_cast<double>(n)) {
            break;
        }
    }

    StaticCodebook<T> out;
    out.entries = std::move(centroids);
    return out;
}

// Mean squared quantization error of `data` under a single codebook.
template <typename T>
double quantization_distortion(const DenseMatrix<T>& data,
                               const StaticCodebook<T>& codebook,
                               std::size_t threads = 0) {
    const std::size_t workers = resolve_threads(threads);
    std::vector<double> partial(workers, 0.0);
    parallel_chunks(data.rows, workers, [&](std::size_t begin, std::size_t end, std::size_t w) {
        double acc = 0.0;
        for (std::size_t i = begin; i < end; ++i) {
            const auto [idx, d2] = argmin_l2(data.row_span(i), codebook.entries);
            (void)idx;
            acc += static_cast<double>(d2);
        }
        partial[w] = acc;
    });
    double total = 0.0;
    for (double p : partial) {
        total += p;
    }
    return data.rows == 0 ? 0.0 : total / static_cast<double>(data.rows);
}

// Trains M codebooks where step m fits the residuals left by steps 1..m-1.
template <typename T>
RqModel<T> rq_train(const DenseMatrix<T>& data,
                    std::size_t num_steps,
                    std::size_t k,
                    std::uint64_t seed,
                    std::size_t max_iters = 25,
                    std::size_t threads = 0) {
    if (num_steps == 0) {
        throw config_error("rq_train: M must be >= 1");
    }
    RqModel<T> model;
    model.codebooks.reserve(num_steps);
    DenseMatrix<T> residuals = data;
    for (std::size_t m = 0; m < num_steps; ++m) {
        StaticCodebook<T> cb = kmeans_fit(residuals, k, max_iters, seed + m, threads);
        cb.step_index = m + 1;
        parallel_chunks(residuals.rows, resolve_threads(threads),
                        [&](std::size_t begin, std::size_t end, std::size_t) {
                            for (std::size_t i = begin; i < end; ++i) {
                                auto row = residuals.row_span(i);
                                const auto [idx, d2] = argmin_l2(std::span<const T>(row), cb.entries);
                                (void)d2;
                                const T* c = cb.entries.row(idx);
                                for (std::size_t j = 0; j < residuals.cols; ++j) {
                                    row[j] -= c[j];
                                }
                            }
                        });
        model.codebooks.push_back(std::move(cb));
    }
    return model;
}

// Greedy residual encoding: i^m = argmin_k ||r^m - c_k^m||^2, r^{m+1} = r^m - c^m.
template <typename T>
Code rq_encode(std::span<const T> x, const RqModel<T>& model) {
    if (x.size() != model.dim()) {
        throw shape_error("rq_encode: vector dim " + std::to_string(x.size()) + " vs model dim " +
                          std::to_string(model.dim()));
    }
    std::vector<T> residual(x.begin(), x.end());
    Code code;
    code.reserve(model.num_steps());
    for (const auto& cb : model.codebooks) {
        const auto [idx, d2] = argmin_l2(std::span<const T>(residual), cb.entries);
        (void)d2;
        const T* c = cb.entries.row(idx);
        for (std::size_t j = 0; j < residual.size(); ++j) {
            residual[j] -= c[j];
        }
        code.push_back(static_cast<std::uint32_t>(idx));
    }
    return code;
}

// Reconstruction = sum of the selected codewords, in step order.
template <typename T>
std::vector<T> rq_decode(const Code& code, const RqModel<T>& model) {
    if (code.size() != model.num_steps()) {
        throw invalid_code_error("rq_decode: code length " + std::to_string(code.size()) +
                                 " vs M=" + std::to_string(model.num_steps()));
    }
    std::vector<T> out(model.dim(), T(0));
    for (std::size_t m = 0; m < code.size(); ++m) {
        const auto& entries = model.codebooks[m].entries;
        if (code[m] >= entries.rows) {
            throw invalid_code_error("rq_decode: index " + std::to_string(code[m]) +
                                     " out of range at step " + std::to_string(m + 1));
        }
        const T* c = entries.row(code[m]);
        for (std::size_t j = 0; j < out.size(); ++j) {
            out[j] += c[j];
        }
    }
    return out;
}

}  // namespace rqmoe
