#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <string>
#include <vector>

#include "rwkvl/error.hpp"

namespace rwkvl {

// Row-major float32 primitives. Kernels accumulate in f32 with a fixed
// reduction order per output element, so results are deterministic.

using Vector = std::vector<float>;

struct Matrix {
    size_t rows = 0;
    size_t cols = 0;
    std::vector<float> data;  // row-major, rows*cols

    Matrix() = default;
    Matrix(size_t r, size_t c) : rows(r), cols(c), data(r * c, 0.0f) {}

    float& at(size_t i, size_t j) { return data[i * cols + j]; }
    float at(size_t i, size_t j) const { return data[i * cols + j]; }
    float* row(size_t i) { return data.data() + i * cols; }
    const float* row(size_t i) const { return data.data() + i * cols; }
    bool empty() const { return data.empty(); }
};

// Packed bitfield, bit i at word i/64, LSB first. Shared by neuron masks and
// 1-bit sign planes.
struct Bitmask {
    size_t len = 0;
    std::vector<uint64_t> words;

    Bitmask() = default;
    explicit Bitmask(size_t n) : len(n), words((n + 63) / 64, 0) {}

    bool get(size_t i) const { return (words[i >> 6] >> (i & 63)) & 1u; }
    void set(size_t i, bool v) {
        const uint64_t bit = uint64_t{1} << (i & 63);
        if (v)
            words[i >> 6] |= bit;
        else
            words[i >> 6] &= ~bit;
    }

    size_t popcount() const {
        size_t n = 0;
        for (uint64_t w : words) n += static_cast<size_t>(std::popcount(w));
        return n;
    }

    static Bitmask ones(size_t n) {
        Bitmask m(n);
        for (size_t i = 0; i < n; i++) m.set(i, true);
        return m;
    }

    Bitmask operator|(const Bitmask& o) const {
        if (len != o.len) throw ShapeError("bitmask length mismatch");
        Bitmask out(len);
        for (size_t i = 0; i < words.size(); i++) out.words[i] = words[i] | o.words[i];
        return out;
    }

    Bitmask operator&(const Bitmask& o) const {
        if (len != o.len) throw ShapeError("bitmask length mismatch");
        Bitmask out(len);
        for (size_t i = 0; i < words.size(); i++) out.words[i] = words[i] & o.words[i];
        return out;
    }

    bool operator==(const Bitmask& o) const { return len == o.len && words == o.words; }
};

inline std::vector<uint32_t> mask_indices(const Bitmask& m) {
    std::vector<uint32_t> idx;
    idx.reserve(m.popcount());
    for (size_t i = 0; i < m.len; i++)
        if (m.get(i)) idx.push_back(static_cast<uint32_t>(i));
    return idx;
}

struct SvdFactors {
    Matrix u;      // M x r
    Vector sigma;  // r, non-negative, non-increasing
    Matrix v;      // M x r
};

// Symmetric per-row int8: scale = maxabs/127, zero rows get scale 1.
struct QuantTensorI8 {
    size_t rows = 0;
    size_t cols = 0;
    std::vector<int8_t> values;
    Vector scales;  // per row
};

// Sign-scale binarization: bit 1 = positive, scale = mean |w| per row.
struct QuantTensor1b {
    size_t rows = 0;
    size_t cols = 0;
    Bitmask sign_bits;  // rows*cols bits, row-major
    Vector scales;      // per row
};

inline bool all_finite(const float* p, size_t n) {
    for (size_t i = 0; i < n; i++)
        if (!std::isfinite(p[i])) return false;
    return true;
}

inline bool all_finite(const Vector& v) { return all_finite(v.data(), v.size()); }
inline bool all_finite(const Matrix& m) { return all_finite(m.data.data(), m.data.size()); }

inline float dot(const float* a, const float* b, size_t n) {
    float acc = 0.0f;
    for (size_t i = 0; i < n; i++) acc += a[i] * b[i];
    return acc;
}

inline float dot(const Vector& a, const Vector& b) {
    if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
    return dot(a.data(), b.data(), a.size());
}

// out[j] = sum_i x[i] * w[i][j]   (row vector times matrix)
inline Vector matvec(const Vector& x, const Matrix& w) {
    if (x.size() != w.rows) throw ShapeError("matvec: x length " + std::to_string(x.size()) +
                                             " vs rows " + std::to_string(w.rows));
    Vector out(w.cols, 0.0f);
    for (size_t i = 0; i < w.rows; i++) {
        const float xi = x[i];
        const float* row = w.row(i);
        for (size_t j = 0; j < w.cols; j++) out[j] += xi * row[j];
    }
    return out;
}

// out[i] = dot(w.row(i), x)   (matrix times column vector; head/embedding layout)
inline Vector matvec_rows(const Matrix& w, const Vector& x) {
    if (x.size() != w.cols) throw ShapeError("matvec_rows: x length mismatch");
    Vector out(w.rows, 0.0f);
    for (size_t i = 0; i < w.rows; i++) out[i] = dot(w.row(i), x.data(), w.cols);
    return out;
}

inline double frobenius_norm(const Matrix& m) {
    double acc = 0.0;
    for (float v : m.data) acc += static_cast<double>(v) * v;
    return std::sqrt(acc);
}

// --- truncated SVD ---

// One-sided Jacobi on the columns of W, double precision internally.
// Factors are the r largest triplets; V columns are sign-fixed so their
// first nonzero entry is non-negative.
inline SvdFactors truncated_svd(const Matrix& w, size_t r) {
    const size_t m = w.rows, n = w.cols;
    if (m == 0 || n == 0) throw std::invalid_argument("truncated_svd: empty matrix");
    if (r < 1 || r > std::min(m, n))
        throw std::invalid_argument("truncated_svd: rank out of range");
    if (!all_finite(w)) throw NumericError("truncated_svd: non-finite input");

    // column-major copies
    std::vector<double> a(m * n), v(n * n, 0.0);
    for (size_t i = 0; i < m; i++)
        for (size_t j = 0; j < n; j++) a[j * m + i] = w.at(i, j);
    for (size_t j = 0; j < n; j++) v[j * n + j] = 1.0;

    const double tol = 1e-13;
    const int max_sweeps = 60;
    for (int sweep = 0; sweep < max_sweeps; sweep++) {
        bool converged = true;
        for (size_t p = 0; p + 1 < n; p++) {
            for (size_t q = p + 1; q < n; q++) {
                double* ap = &a[p * m];
                double* aq = &a[q * m];
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (size_t i = 0; i < m; i++) {
                    alpha += ap[i] * ap[i];
                    beta += aq[i] * aq[i];
                    gamma += ap[i] * aq[i];
                }
                const double denom = std::sqrt(alpha * beta);
                if (denom == 0.0 || std::fabs(gamma) <= tol * denom) continue;
                converged = false;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                                 (std::fabs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (size_t i = 0; i < m; i++) {
                    const double tp = ap[i], tq = aq[i];
                    ap[i] = c * tp - s * tq;
                    aq[i] = s * tp + c * tq;
                }
                double* vp = &v[p * n];
                double* vq = &v[q * n];
                for (size_t i = 0; i < n; i++) {
                    const double tp = vp[i], tq = vq[i];
                    vp[i] = c * tp - s * tq;
                    vq[i] = s * tp + c * tq;
                }
            }
        }
        if (converged) break;
    }

    std::vector<double> norms(n);
    std::vector<size_t> order(n);
    for (size_t j = 0; j < n; j++) {
        double acc = 0.0;
        for (size_t i = 0; i < m; i++) acc += a[j * m + i] * a[j * m + i];
        norms[j] = std::sqrt(acc);
        order[j] = j;
    }
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t x, size_t y) { return norms[x] > norms[y]; });

    SvdFactors out;
    out.u = Matrix(m, r);
    out.v = Matrix(n, r);
    out.sigma.resize(r);
    for (size_t k = 0; k < r; k++) {
        const size_t j = order[k];
        const double sv = norms[j];
        out.sigma[k] = static_cast<float>(sv);

        double sign = 1.0;
        for (size_t i = 0; i < n; i++) {
            if (v[j * n + i] != 0.0) {
                sign = v[j * n + i] > 0.0 ? 1.0 : -1.0;
                break;
            }
        }
        const double inv = sv > 0.0 ? sign / sv : 0.0;
        for (size_t i = 0; i < m; i++) out.u.at(i, k) = static_cast<float>(a[j * m + i] * inv);
        for (size_t i = 0; i < n; i++) out.v.at(i, k) = static_cast<float>(v[j * n + i] * sign);
    }
    return out;
}

// --- quantization ---

inline QuantTensorI8 quantize_int8_rowwise(const Matrix& w) {
    if (!all_finite(w)) throw NumericError("quantize_int8: non-finite input");
    QuantTensorI8 q;
    q.rows = w.rows;
    q.cols = w.cols;
    q.values.resize(w.rows * w.cols);
    q.scales.resize(w.rows);
    for (size_t i = 0; i < w.rows; i++) {
        const float* row = w.row(i);
        float amax = 0.0f;
        for (size_t j = 0; j < w.cols; j++) amax = std::max(amax, std::fabs(row[j]));
        const float scale = amax > 0.0f ? amax / 127.0f : 1.0f;
        q.scales[i] = scale;
        for (size_t j = 0; j < w.cols; j++) {
            long v = std::lround(row[j] / scale);
            v = std::clamp(v, -127L, 127L);
            q.values[i * w.cols + j] = static_cast<int8_t>(v);
        }
    }
    return q;
}

inline Matrix dequantize_int8(const QuantTensorI8& q) {
    Matrix w(q.rows, q.cols);
    for (size_t i = 0; i < q.rows; i++) {
        const float scale = q.scales[i];
        for (size_t j = 0; j < q.cols; j++)
            w.at(i, j) = static_cast<float>(q.values[i * q.cols + j]) * scale;
    }
    return w;
}

inline QuantTensor1b quantize_1bit(const Matrix& w) {
    if (!all_finite(w)) throw NumericError("quantize_1bit: non-finite input");
    QuantTensor1b q;
    q.rows = w.rows;
    q.cols = w.cols;
    q.sign_bits = Bitmask(w.rows * w.cols);
    q.scales.resize(w.rows);
    for (size_t i = 0; i < w.rows; i++) {
        const float* row = w.row(i);
        double acc = 0.0;
        for (size_t j = 0; j < w.cols; j++) {
            acc += std::fabs(row[j]);
            if (row[j] > 0.0f) q.sign_bits.set(i * w.cols + j, true);
        }
        q.scales[i] = static_cast<float>(acc / static_cast<double>(w.cols));
    }
    return q;
}

inline Matrix dequantize_1bit(const QuantTensor1b& q) {
    Matrix w(q.rows, q.cols);
    for (size_t i = 0; i < q.rows; i++) {
        const float scale = q.scales[i];
        for (size_t j = 0; j < q.cols; j++)
            w.at(i, j) = q.sign_bits.get(i * q.cols + j) ? scale : -scale;
    }
    return w;
}

// Fused kernels: the per-row scale folds into x, so the dense dequantized
// matrix is never materialized.
inline Vector fused_dequant_matvec(const Vector& x, const QuantTensorI8& q) {
    if (x.size() != q.rows) throw ShapeError("fused_dequant_matvec: x length mismatch");
    Vector out(q.cols, 0.0f);
    for (size_t i = 0; i < q.rows; i++) {
        const float xs = x[i] * q.scales[i];
        const int8_t* row = &q.values[i * q.cols];
        for (size_t j = 0; j < q.cols; j++) out[j] += xs * static_cast<float>(row[j]);
    }
    return out;
}

inline Vector fused_dequant_matvec(const Vector& x, const QuantTensor1b& q) {
    if (x.size() != q.rows) throw ShapeError("fused_dequant_matvec: x length mismatch");
    Vector out(q.cols, 0.0f);
    for (size_t i = 0; i < q.rows; i++) {
        const float xs = x[i] * q.scales[i];
        const size_t base = i * q.cols;
        for (size_t j = 0; j < q.cols; j++)
            out[j] += q.sign_bits.get(base + j) ? xs : -xs;
    }
    return out;
}

// out[i] = scales[i] * sum_j (bit_ij ? x[j] : -x[j]); row-per-output layout,
// the mirror of matvec_rows.
inline Vector fused_dequant_matvec_rows(const QuantTensor1b& q, const Vector& x) {
    if (x.size() != q.cols) throw ShapeError("fused_dequant_matvec_rows: x length mismatch");
    Vector out(q.rows, 0.0f);
    for (size_t i = 0; i < q.rows; i++) {
        const size_t base = i * q.cols;
        float acc = 0.0f;
        for (size_t j = 0; j < q.cols; j++) acc += q.sign_bits.get(base + j) ? x[j] : -x[j];
        out[i] = q.scales[i] * acc;
    }
    return out;
}

// Nearest-rank percentile: the ceil(p*n)-th smallest element, p in (0, 1].
inline float percentile(Vector v, double p) {
    if (v.empty()) throw std::invalid_argument("percentile: empty vector");
    if (!(p > 0.0 && p <= 1.0)) throw std::invalid_argument("percentile: p out of (0,1]");
    const size_t n = v.size();
    auto rank = static_cast<size_t>(std::ceil(p * static_cast<double>(n) - 1e-9));
    rank = std::clamp<size_t>(rank, 1, n);
    std::nth_element(v.begin(), v.begin() + (rank - 1), v.end());
    return v[rank - 1];
}

}  // namespace rwkvl
