#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "rwkvl/error.hpp"
#include "rwkvl/linalg.hpp"

namespace rwkvl {

// Factored replacement for a square M x M projection: x*W ~= (x*L)*R.
struct LowRankPair {
    Matrix l;  // M x r, U*diag(sigma)
    Matrix r;  // r x M, V^T
};

// Factored form with a squared-ReLU nonlinearity between the factors and a
// full-rank diagonal residual: relu(x*L)^2 * R + x.*d.
struct EnhancedLowRank {
    Matrix l;  // M x r
    Matrix r;  // r x M
    Vector d;  // M
};

inline size_t lowrank_rank(size_t m, size_t k) {
    if (k < 1 || k > m) throw std::invalid_argument("lowrank_rank: factor out of range");
    return std::max<size_t>(1, m / k);
}

inline size_t param_count(const LowRankPair& p) { return p.l.data.size() + p.r.data.size(); }
inline size_t param_count(const EnhancedLowRank& e) {
    return e.l.data.size() + e.r.data.size() + e.d.size();
}

inline LowRankPair decompose_projection(const Matrix& w, size_t k) {
    if (w.rows != w.cols) throw ShapeError("decompose_projection: matrix not square");
    const size_t m = w.rows;
    const size_t r = lowrank_rank(m, k);
    SvdFactors f = truncated_svd(w, r);
    LowRankPair p;
    p.l = Matrix(m, r);
    p.r = Matrix(r, m);
    for (size_t i = 0; i < m; i++)
        for (size_t a = 0; a < r; a++) {
            p.l.at(i, a) = f.u.at(i, a) * f.sigma[a];
            p.r.at(a, i) = f.v.at(i, a);
        }
    return p;
}

inline Vector lowrank_forward(const Vector& x, const LowRankPair& p) {
    return matvec(matvec(x, p.l), p.r);
}

inline Vector enhanced_forward(const Vector& x, const EnhancedLowRank& e) {
    if (x.size() != e.l.rows || x.size() != e.d.size())
        throw ShapeError("enhanced_forward: shape mismatch");
    Vector a = matvec(x, e.l);
    for (auto& v : a) {
        const float rl = v > 0.0f ? v : 0.0f;
        v = rl * rl;
    }
    Vector out = matvec(a, e.r);
    for (size_t i = 0; i < x.size(); i++) out[i] += x[i] * e.d[i];
    return out;
}

// Small-noise init; d starts from the diagonal of w when available so the
// residual path is useful from step one.
inline EnhancedLowRank init_enhanced(size_t m, size_t r, uint32_t seed,
                                     const Matrix* w = nullptr) {
    std::mt19937 rng(seed);
    const float s = 1.0f / std::sqrt(static_cast<float>(m));
    std::uniform_real_distribution<float> dist(-s, s);
    EnhancedLowRank e;
    e.l = Matrix(m, r);
    e.r = Matrix(r, m);
    e.d.assign(m, 1.0f);
    for (auto& v : e.l.data) v = dist(rng);
    for (auto& v : e.r.data) v = dist(rng);
    if (w) {
        if (w->rows != m || w->cols != m) throw ShapeError("init_enhanced: diag source shape");
        for (size_t i = 0; i < m; i++) e.d[i] = w->at(i, i);
    }
    return e;
}

struct PairGrads {
    Matrix dl, dr;
};

struct EnhancedGrads {
    Matrix dl, dr;
    Vector dd;
};

// Mean over the batch of ||x*W - forward(x)||^2, with gradients if requested.
inline double pair_loss_grads(const Matrix& w, const LowRankPair& p,
                              const std::vector<Vector>& xs, PairGrads* g) {
    const size_t m = w.rows, r = p.l.cols;
    if (g) {
        g->dl = Matrix(m, r);
        g->dr = Matrix(r, m);
    }
    double loss = 0.0;
    for (const Vector& x : xs) {
        Vector h = matvec(x, p.l);
        Vector y = matvec(h, p.r);
        Vector t = matvec(x, w);
        Vector e(m);
        for (size_t j = 0; j < m; j++) {
            e[j] = y[j] - t[j];
            loss += static_cast<double>(e[j]) * e[j];
        }
        if (!g) continue;
        Vector dh(r, 0.0f);
        for (size_t a = 0; a < r; a++) {
            const float* rrow = p.r.row(a);
            float acc = 0.0f;
            for (size_t j = 0; j < m; j++) {
                g->dr.at(a, j) += 2.0f * h[a] * e[j];
                acc += rrow[j] * e[j];
            }
            dh[a] = 2.0f * acc;
        }
        for (size_t i = 0; i < m; i++)
            for (size_t a = 0; a < r; a++) g->dl.at(i, a) += x[i] * dh[a];
    }
    const float inv = 1.0f / static_cast<float>(xs.size());
    if (g) {
        for (auto& v : g->dl.data) v *= inv;
        for (auto& v : g->dr.data) v *= inv;
    }
    return loss / static_cast<double>(xs.size());
}

inline double enhanced_loss_grads(const Matrix& w, const EnhancedLowRank& en,
                                  const std::vector<Vector>& xs, EnhancedGrads* g) {
    const size_t m = w.rows, r = en.l.cols;
    if (g) {
        g->dl = Matrix(m, r);
        g->dr = Matrix(r, m);
        g->dd.assign(m, 0.0f);
    }
    double loss = 0.0;
    for (const Vector& x : xs) {
        Vector a = matvec(x, en.l);
        Vector h(r);
        for (size_t k = 0; k < r; k++) {
            const float rl = a[k] > 0.0f ? a[k] : 0.0f;
            h[k] = rl * rl;
        }
        Vector y = matvec(h, en.r);
        Vector t = matvec(x, w);
        Vector e(m);
        for (size_t j = 0; j < m; j++) {
            e[j] = y[j] + x[j] * en.d[j] - t[j];
            loss += static_cast<double>(e[j]) * e[j];
        }
        if (!g) continue;
        Vector da(r, 0.0f);
        for (size_t k = 0; k < r; k++) {
            const float* rrow = en.r.row(k);
            float acc = 0.0f;
            for (size_t j = 0; j < m; j++) {
                g->dr.at(k, j) += 2.0f * h[k] * e[j];
                acc += rrow[j] * e[j];
            }
            da[k] = 2.0f * acc * (a[k] > 0.0f ? 2.0f * a[k] : 0.0f);
        }
        for (size_t i = 0; i < m; i++) {
            g->dd[i] += 2.0f * e[i] * x[i];
            for (size_t k = 0; k < r; k++) g->dl.at(i, k) += x[i] * da[k];
        }
    }
    const float inv = 1.0f / static_cast<float>(xs.size());
    if (g) {
        for (auto& v : g->dl.data) v *= inv;
        for (auto& v : g->dr.data) v *= inv;
        for (auto& v : g->dd) v *= inv;
    }
    return loss / static_cast<double>(xs.size());
}

// Distillation inputs: unit vectors with non-negative entries, mirroring the
// post-activation statistics these projections see in a network.
inline Vector random_unit_input(std::mt19937& rng, size_t m) {
    std::uniform_real_distribution<float> dist(0.0f, 1.0f);
    Vector x(m);
    double norm = 0.0;
    for (auto& v : x) {
        v = dist(rng);
        norm += static_cast<double>(v) * v;
    }
    const float inv = norm > 0.0 ? static_cast<float>(1.0 / std::sqrt(norm)) : 0.0f;
    for (auto& v : x) v *= inv;
    return x;
}

struct DistillResult {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    size_t steps_run = 0;
};

namespace detail {

inline std::vector<Vector> eval_batch(size_t m, uint32_t seed, size_t n = 128) {
    std::mt19937 rng(seed);
    std::vector<Vector> xs;
    xs.reserve(n);
    for (size_t i = 0; i < n; i++) xs.push_back(random_unit_input(rng, m));
    return xs;
}

template <typename Factors, typename Grads, typename LossFn, typename StepFn>
DistillResult distill_impl(const Matrix& w, Factors& f, size_t steps, float lr, uint32_t seed,
                           LossFn&& loss_fn, StepFn&& apply) {
    const size_t m = w.rows;
    std::mt19937 rng(seed);
    const auto eval = eval_batch(m, seed ^ 0x9e3779b9u);

    DistillResult res;
    res.initial_loss = loss_fn(w, f, eval, nullptr);
    Factors best = f;
    double best_loss = res.initial_loss;

    const size_t batch = 16;
    for (size_t step = 0; step < steps; step++) {
        std::vector<Vector> xs;
        xs.reserve(batch);
        for (size_t b = 0; b < batch; b++) xs.push_back(random_unit_input(rng, m));
        Grads g;
        const double train_loss = loss_fn(w, f, xs, &g);
        if (!std::isfinite(train_loss))
            throw TrainingError("distill diverged at step " + std::to_string(step) +
                                ", loss=" + std::to_string(train_loss));
        apply(f, g, lr);
        res.steps_run++;
        if ((step + 1) % 25 == 0 || step + 1 == steps) {
            const double l = loss_fn(w, f, eval, nullptr);
            if (!std::isfinite(l))
                throw TrainingError("distill diverged at step " + std::to_string(step) +
                                    " (eval loss non-finite)");
            if (l < best_loss) {
                best_loss = l;
                best = f;
            }
        }
    }
    // keep the best evaluated snapshot so more steps never make things worse
    f = best;
    res.final_loss = best_loss;
    return res;
}

}  // namespace detail

inline DistillResult distill_lowrank(const Matrix& w, LowRankPair& p, size_t steps, float lr,
                                     uint32_t seed) {
    if (w.rows != w.cols) throw ShapeError("distill_lowrank: matrix not square");
    return detail::distill_impl<LowRankPair, PairGrads>(
        w, p, steps, lr, seed,
        [](const Matrix& w_, const LowRankPair& f, const std::vector<Vector>& xs,
           PairGrads* g) { return pair_loss_grads(w_, f, xs, g); },
        [](LowRankPair& f, const PairGrads& g, float lr_) {
            for (size_t i = 0; i < f.l.data.size(); i++) f.l.data[i] -= lr_ * g.dl.data[i];
            for (size_t i = 0; i < f.r.data.size(); i++) f.r.data[i] -= lr_ * g.dr.data[i];
        });
}

inline DistillResult distill_lowrank(const Matrix& w, EnhancedLowRank& e, size_t steps, float lr,
                                     uint32_t seed) {
    if (w.rows != w.cols) throw ShapeError("distill_lowrank: matrix not square");
    return detail::distill_impl<EnhancedLowRank, EnhancedGrads>(
        w, e, steps, lr, seed,
        [](const Matrix& w_, const EnhancedLowRank& f, const std::vector<Vector>& xs,
           EnhancedGrads* g) { return enhanced_loss_grads(w_, f, xs, g); },
        [](EnhancedLowRank& f, const EnhancedGrads& g, float lr_) {
            for (size_t i = 0; i < f.l.data.size(); i++) f.l.data[i] -= lr_ * g.dl.data[i];
            for (size_t i = 0; i < f.r.data.size(); i++) f.r.data[i] -= lr_ * g.dr.data[i];
            for (size_t i = 0; i < f.d.size(); i++) f.d[i] -= lr_ * g.dd[i];
        });
}

}  // namespace rwkvl
