#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rqmoe/errors.hpp"

namespace rqmoe {

// Dense row-major matrix. Compute runs in T (float by default); loss and
// metric accumulation is always done in double at the call sites.
template <typename T>
struct DenseMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> data;

    DenseMatrix() = default;
    DenseMatrix(std::size_t r, std::size_t c, T fill = T(0)) : rows(r), cols(c), data(r * c, fill) {}

    T* row(std::size_t i) { return data.data() + i * cols; }
    const T* row(std::size_t i) const { return data.data() + i * cols; }
    std::span<T> row_span(std::size_t i) { return {row(i), cols}; }
    std::span<const T> row_span(std::size_t i) const { return {row(i), cols}; }
    T& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    T at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
    bool empty() const { return rows == 0 || cols == 0; }
};

using MatrixF = DenseMatrix<float>;
using MatrixD = DenseMatrix<double>;

template <typename T>
bool all_finite(std::span<const T> v) {
    for (const T& x : v) {
        if (!std::isfinite(static_cast<double>(x))) {
            return false;
        }
    }
    return true;
}

template <typename T>
bool all_finite(const DenseMatrix<T>& m) {
    return all_finite(std::span<const T>(m.data));
}

// Fixed-order dot product: four strided accumulators combined as
// (a0+a1)+(a2+a3), then the tail. Every routine in the library that reduces
// over a dimension goes through this kernel, so independently computed paths
// (encode vs. decode, sequential vs. parallel) agree bitwise.
template <typename T>
inline T dot_kernel(const T* a, const T* b, std::size_t n) {
    T acc0 = T(0), acc1 = T(0), acc2 = T(0), acc3 = T(0);
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) {
        acc0 += a[j] * b[j];
        acc1 += a[j + 1] * b[j + 1];
        acc2 += a[j + 2] * b[j + 2];
        acc3 += a[j + 3] * b[j + 3];
    }
    T acc = (acc0 + acc1) + (acc2 + acc3);
    for (; j < n; ++j) {
        acc += a[j] * b[j];
    }
    return acc;
}

// Squared Euclidean distance with the same accumulator discipline.
template <typename T>
inline T squared_distance(std::span<const T> a, std::span<const T> b) {
    const std::size_t n = a.size();
    const T* pa = a.data();
    const T* pb = b.data();
    T acc0 = T(0), acc1 = T(0), acc2 = T(0), acc3 = T(0);
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) {
        const T d0 = pa[j] - pb[j];
        const T d1 = pa[j + 1] - pb[j + 1];
        const T d2 = pa[j + 2] - pb[j + 2];
        const T d3 = pa[j + 3] - pb[j + 3];
        acc0 += d0 * d0;
        acc1 += d1 * d1;
        acc2 += d2 * d2;
        acc3 += d3 * d3;
    }
    T acc = (acc0 + acc1) + (acc2 + acc3);
    for (; j < n; ++j) {
        const T d = pa[j] - pb[j];
        acc += d * d;
    }
    return acc;
}

template <typename T>
inline double squared_norm(std::span<const T> v) {
    double acc = 0.0;
    for (const T& x : v) {
        acc += static_cast<double>(x) * static_cast<double>(x);
    }
    return acc;
}

// out = W v + bias. bias may be empty (treated as zero).
template <typename T>
void matvec(const DenseMatrix<T>& w, std::span<const T> v, std::span<const T> bias, std::span<T> out) {
    if (w.cols != v.size()) {
        throw shape_error("matvec: W has " + std::to_string(w.cols) + " cols, v has " +
                          std::to_string(v.size()) + " entries");
    }
    if (out.size() != w.rows || (!bias.empty() && bias.size() != w.rows)) {
        throw shape_error("matvec: output/bias size mismatch");
    }
    for (std::size_t i = 0; i < w.rows; ++i) {
        T acc = dot_kernel(w.row(i), v.data(), w.cols);
        out[i] = bias.empty() ? acc : acc + bias[i];
    }
}

template <typename T>
std::vector<T> matvec(const DenseMatrix<T>& w, std::span<const T> v, std::span<const T> bias = {}) {
    std::vector<T> out(w.rows);
    matvec(w, v, bias, std::span<T>(out));
    return out;
}

// Numerically stable softmax (max-shifted, hence shift-invariant). A single
// logit maps to exactly 1.0.
template <typename T>
void softmax(std::span<const T> v, std::span<T> out) {
    if (v.empty()) {
        throw shape_error("softmax: empty input");
    }
    T hi = v[0];
    for (const T& x : v) {
        hi = std::max(hi, x);
    }
    T sum = T(0);
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = std::exp(v[i] - hi);
        sum += out[i];
    }
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] /= sum;
    }
}

template <typename T>
std::vector<T> softmax(std::span<const T> v) {
    std::vector<T> out(v.size());
    softmax(v, std::span<T>(out));
    return out;
}

template <typename T>
void relu_inplace(std::span<T> v) {
    for (T& x : v) {
        x = x > T(0) ? x : T(0);
    }
}

template <typename T>
std::vector<T> relu(std::span<const T> v) {
    std::vector<T> out(v.begin(), v.end());
    relu_inplace(std::span<T>(out));
    return out;
}

// Index of the table row nearest to the query (squared L2), ties broken by
// the lowest index via strict less-than.
template <typename T>
std::pair<std::size_t, T> argmin_l2(std::span<const T> query, const DenseMatrix<T>& table) {
    if (table.rows == 0) {
        throw shape_error("argmin_l2: empty table");
    }
    if (table.cols != query.size()) {
        throw shape_error("argmin_l2: query dim " + std::to_string(query.size()) +
                          " vs table dim " + std::to_string(table.cols));
    }
    std::size_t best = 0;
    T best_d = squared_distance(query, table.row_span(0));
    for (std::size_t k = 1; k < table.rows; ++k) {
        const T d = squared_distance(query, table.row_span(k));
        if (d < best_d) {
            best_d = d;
            best = k;
        }
    }
    return {best, best_d};
}

// Linear map with an explicit bias vector.
template <typename T>
struct LinearLayer {
    DenseMatrix<T> weight;  // out_dim x in_dim
    std::vector<T> bias;    // out_dim

    LinearLayer() = default;
    LinearLayer(std::size_t out_dim, std::size_t in_dim)
        : weight(out_dim, in_dim), bias(out_dim, T(0)) {}

    std::size_t out_dim() const { return weight.rows; }
    std::size_t in_dim() const { return weight.cols; }

    void apply(std::span<const T> in, std::span<T> out) const {
        matvec(weight, in, std::span<const T>(bias), out);
    }
    std::vector<T> apply(std::span<const T> in) const {
        return matvec(weight, in, std::span<const T>(bias));
    }
};

template <typename T>
void concat(std::span<const T> a, std::span<const T> b, std::span<T> out) {
    std::copy(a.begin(), a.end(), out.begin());
    std::copy(b.begin(), b.end(), out.begin() + static_cast<std::ptrdiff_t>(a.size()));
}

// y += alpha * x
template <typename T>
inline void axpy(T alpha, std::span<const T> x, std::span<T> y) {
    for (std::size_t i = 0; i < x.size(); ++i) {
        y[i] += alpha * x[i];
    }
}

// Per-column mean and standard deviation (double accumulation).
template <typename T>
std::pair<std::vector<double>, std::vector<double>> column_mean_std(const DenseMatrix<T>& m) {
    std::vector<double> mean(m.cols, 0.0), sq(m.cols, 0.0);
    for (std::size_t i = 0; i < m.rows; ++i) {
        const T* r = m.row(i);
        for (std::size_t j = 0; j < m.cols; ++j) {
            mean[j] += r[j];
            sq[j] += static_cast<double>(r[j]) * static_cast<double>(r[j]);
        }
    }
    std::vector<double> stddev(m.cols, 0.0);
    if (m.rows > 0) {
        for (std::size_t j = 0; j < m.cols; ++j) {
            mean[j] /= static_cast<double>(m.rows);
            const double var = sq[j] / static_cast<double>(m.rows) - mean[j] * mean[j];
            stddev[j] = var > 0.0 ? std::sqrt(var) : 0.0;
        }
    }
    return {mean, stddev};
}

}  // namespace rqmoe
