#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "config.hpp"
#include "error.hpp"
#include "linalg.hpp"
#include "model.hpp"
#include "store.hpp"

namespace rwkvl {

struct ClusterAssignment {
    size_t n_clusters = 0;
    std::vector<uint32_t> assign;     // token id -> cluster id
    Matrix centroids;                 // N x D
    std::vector<uint32_t> sizes;      // per cluster, sums to V
    std::vector<double> distortion;   // per Lloyd iteration, non-increasing
};

struct ClusterHead {
    Matrix h1;  // D x N
};

namespace detail {

inline double sq_dist(const double* a, const float* b, size_t n) {
    double acc = 0.0;
    for (size_t i = 0; i < n; i++) {
        const double d = a[i] - double(b[i]);
        acc += d * d;
    }
    return acc;
}

inline std::vector<double> softmax_d(const Vector& logits) {
    double shift = -std::numeric_limits<double>::infinity();
    for (float v : logits) shift = std::max(shift, double(v));
    std::vector<double> p(logits.size());
    double sum = 0.0;
    for (size_t i = 0; i < logits.size(); i++) {
        p[i] = std::exp(double(logits[i]) - shift);
        sum += p[i];
    }
    for (auto& v : p) v /= sum;
    return p;
}

}  // namespace detail

// Lloyd's algorithm over embedding rows with distance-squared-weighted
// seeding. Empty clusters are repaired by re-seeding them at the farthest
// point of the largest cluster, so none survive to the result.
inline ClusterAssignment kmeans_embeddings(const Matrix& e, size_t n, size_t max_iters,
                                           uint64_t seed) {
    const size_t v = e.rows, d = e.cols;
    if (n < 1 || n > v) throw std::invalid_argument("kmeans: cluster count out of range");
    std::mt19937_64 rng(seed);

    // Seeding: first centroid uniform, then proportional to squared distance
    // from the chosen set; all-zero weights fall back to the first unchosen.
    std::vector<std::vector<double>> cent(n, std::vector<double>(d));
    std::vector<double> min_d2(v, std::numeric_limits<double>::infinity());
    std::vector<bool> chosen(v, false);
    {
        std::uniform_int_distribution<size_t> first(0, v - 1);
        size_t pick = first(rng);
        for (size_t c = 0; c < n; c++) {
            chosen[pick] = true;
            for (size_t j = 0; j < d; j++) cent[c][j] = double(e.row(pick)[j]);
            if (c + 1 == n) break;
            double total = 0.0;
            for (size_t t = 0; t < v; t++) {
                min_d2[t] = std::min(min_d2[t], detail::sq_dist(cent[c].data(), e.row(t), d));
                total += min_d2[t];
            }
            if (total > 0.0) {
                std::uniform_real_distribution<double> u(0.0, total);
                double r = u(rng), cum = 0.0;
                pick = 0;
                for (size_t t = 0; t < v; t++) {
                    cum += min_d2[t];
                    if (cum >= r) {
                        pick = t;
                        break;
                    }
                }
            } else {
                pick = 0;
                while (chosen[pick]) pick++;
            }
        }
    }

    ClusterAssignment a;
    a.n_clusters = n;
    a.assign.assign(v, 0);
    a.sizes.assign(n, 0);

    std::vector<uint32_t> prev(v, uint32_t(-1));
    for (size_t iter = 0; iter < max_iters; iter++) {
        // Assignment step, ties to the lowest cluster id.
        std::fill(a.sizes.begin(), a.sizes.end(), 0);
        for (size_t t = 0; t < v; t++) {
            double best = std::numeric_limits<double>::infinity();
            uint32_t arg = 0;
            for (size_t c = 0; c < n; c++) {
                const double d2 = detail::sq_dist(cent[c].data(), e.row(t), d);
                if (d2 < best) {
                    best = d2;
                    arg = uint32_t(c);
                }
            }
            a.assign[t] = arg;
            a.sizes[arg]++;
        }

        for (size_t c = 0; c < n; c++) {
            if (a.sizes[c] > 0) continue;
            const size_t big =
                size_t(std::max_element(a.sizes.begin(), a.sizes.end()) - a.sizes.begin());
            double far_d = -1.0;
            size_t far_t = 0;
            for (size_t t = 0; t < v; t++) {
                if (a.assign[t] != big) continue;
                const double d2 = detail::sq_dist(cent[big].data(), e.row(t), d);
                if (d2 > far_d) {
                    far_d = d2;
                    far_t = t;
                }
            }
            a.assign[far_t] = uint32_t(c);
            a.sizes[big]--;
            a.sizes[c]++;
            for (size_t j = 0; j < d; j++) cent[c][j] = double(e.row(far_t)[j]);
        }

        // Update step: means of the (repaired) assignment.
        for (size_t c = 0; c < n; c++) std::fill(cent[c].begin(), cent[c].end(), 0.0);
        for (size_t t = 0; t < v; t++) {
            double* dst = cent[a.assign[t]].data();
            for (size_t j = 0; j < d; j++) dst[j] += double(e.row(t)[j]);
        }
        for (size_t c = 0; c < n; c++)
            for (size_t j = 0; j < d; j++) cent[c][j] /= double(a.sizes[c]);

        double dist = 0.0;
        for (size_t t = 0; t < v; t++)
            dist += detail::sq_dist(cent[a.assign[t]].data(), e.row(t), d);
        a.distortion.push_back(dist);

        if (a.assign == prev) break;
        prev = a.assign;
    }

    a.centroids = Matrix(n, d);
    for (size_t c = 0; c < n; c++)
        for (size_t j = 0; j < d; j++) a.centroids.at(c, j) = float(cent[c][j]);
    return a;
}

inline std::vector<uint32_t> cluster_tokens(const ClusterAssignment& a, size_t cluster) {
    std::vector<uint32_t> out;
    for (size_t t = 0; t < a.assign.size(); t++)
        if (a.assign[t] == cluster) out.push_back(uint32_t(t));
    return out;
}

inline Vector aggregate_cluster_probs(const Vector& head_probs, const ClusterAssignment& a) {
    if (head_probs.size() != a.assign.size())
        throw ShapeError("aggregate_cluster_probs: size mismatch");
    double sum = 0.0;
    for (float p : head_probs) sum += p;
    if (std::fabs(sum - 1.0) > 1e-6)
        throw std::invalid_argument("aggregate_cluster_probs: probabilities must sum to 1");
    std::vector<double> acc(a.n_clusters, 0.0);
    for (size_t t = 0; t < head_probs.size(); t++) acc[a.assign[t]] += double(head_probs[t]);
    Vector out(a.n_clusters);
    for (size_t c = 0; c < a.n_clusters; c++) out[c] = float(acc[c]);
    return out;
}

// KL(target || predicted) with predicted clamped at 1e-12; zero-mass target
// terms contribute nothing.
inline double kl_loss(const Vector& target, const Vector& predicted) {
    if (target.size() != predicted.size()) throw ShapeError("kl_loss: size mismatch");
    double ts = 0.0, ps = 0.0;
    for (size_t i = 0; i < target.size(); i++) {
        if (target[i] < 0.0f || predicted[i] < 0.0f)
            throw std::invalid_argument("kl_loss: negative probability");
        ts += target[i];
        ps += predicted[i];
    }
    if (std::fabs(ts - 1.0) > 1e-6 || std::fabs(ps - 1.0) > 1e-6)
        throw std::invalid_argument("kl_loss: distributions must sum to 1");
    double acc = 0.0;
    for (size_t i = 0; i < target.size(); i++) {
        const double t = target[i];
        if (t <= 0.0) continue;
        acc += t * std::log(t / std::max(double(predicted[i]), 1e-12));
    }
    return acc;
}

struct ClusterTrainReport {
    double initial_kl = 0.0;
    double final_kl = 0.0;
    std::vector<double> epoch_kl;
};

namespace detail {

inline double mean_kl(const Matrix& h1, const std::vector<Vector>& xs,
                      const std::vector<Vector>& targets) {
    double total = 0.0;
    for (size_t i = 0; i < xs.size(); i++) {
        const std::vector<double> p = softmax_d(matvec(xs[i], h1));
        double acc = 0.0;
        for (size_t c = 0; c < p.size(); c++) {
            const double t = targets[i][c];
            if (t > 0.0) acc += t * std::log(t / std::max(p[c], 1e-12));
        }
        total += acc;
    }
    return total / double(xs.size());
}

}  // namespace detail

// Core KL distillation on precomputed (input, cluster-distribution) pairs.
inline ClusterHead train_cluster_head_on_pairs(const std::vector<Vector>& xs,
                                               const std::vector<Vector>& targets, size_t n,
                                               size_t epochs, float lr, uint64_t seed,
                                               ClusterTrainReport* report = nullptr) {
    if (xs.empty() || xs.size() != targets.size())
        throw std::invalid_argument("train_cluster_head: empty or mismatched pairs");
    if (targets[0].size() != n)
        throw ShapeError("train_cluster_head: target width != cluster count");
    const size_t d = xs[0].size();
    std::mt19937_64 rng(seed);
    ClusterHead ch;
    ch.h1 = Matrix(d, n);
    {
        std::uniform_real_distribution<float> u(-1.0f / std::sqrt(float(d)),
                                                1.0f / std::sqrt(float(d)));
        for (auto& v : ch.h1.data) v = u(rng);
    }

    ClusterTrainReport rep;
    rep.initial_kl = detail::mean_kl(ch.h1, xs, targets);
    rep.final_kl = rep.initial_kl;

    std::vector<size_t> order(xs.size());
    std::iota(order.begin(), order.end(), size_t{0});
    for (size_t e = 0; e < epochs; e++) {
        std::shuffle(order.begin(), order.end(), rng);
        for (size_t idx : order) {
            const Vector& x = xs[idx];
            const Vector& t = targets[idx];
            const std::vector<double> p = detail::softmax_d(matvec(x, ch.h1));
            for (size_t j = 0; j < d; j++) {
                const float xj = x[j];
                float* row = ch.h1.row(j);
                for (size_t c = 0; c < n; c++)
                    row[c] -= lr * xj * float(p[c] - double(t[c]));
            }
        }
        const double kl = detail::mean_kl(ch.h1, xs, targets);
        if (!std::isfinite(kl) || !all_finite(ch.h1))
            throw TrainingError("train_cluster_head: loss diverged");
        rep.epoch_kl.push_back(kl);
        rep.final_kl = kl;
    }
    if (report) *report = std::move(rep);
    return ch;
}

// Distills the frozen dense head into the cluster head: per corpus position,
// the dense softmax aggregated over clusters is the target.
inline ClusterHead train_cluster_head(Model& model, const std::vector<uint32_t>& corpus,
                                      const ClusterAssignment& a, size_t epochs, float lr,
                                      uint64_t seed, ClusterTrainReport* report = nullptr) {
    if (corpus.empty()) throw std::invalid_argument("train_cluster_head: empty corpus");
    std::vector<Vector> xs, targets;
    xs.reserve(corpus.size());
    targets.reserve(corpus.size());
    ForwardHooks hooks;
    hooks.head_logits = [&](const Vector& xo) {
        Vector logits = matvec_rows(model.head, xo);
        const std::vector<double> p = detail::softmax_d(logits);
        Vector probs(p.size());
        for (size_t i = 0; i < p.size(); i++) probs[i] = float(p[i]);
        xs.push_back(xo);
        targets.push_back(aggregate_cluster_probs(probs, a));
        return logits;
    };
    std::vector<BlockState> states(model.cfg.n_layers, BlockState::zeros(model.cfg));
    for (uint32_t t : corpus) forward_token(model, t, states, hooks);
    return train_cluster_head_on_pairs(xs, targets, a.n_clusters, epochs, lr, seed, report);
}

// Descending-probability prefix reaching p_min, widened to k_min and clamped
// to k_max. p_min >= 1 short-circuits to "all clusters" so the exactness
// limit never loses a far-tail cluster to rounding.
inline std::vector<uint32_t> select_clusters(const Vector& c, const HeadPolicy& policy) {
    if (policy.k_min < 1 || policy.k_max < policy.k_min)
        throw std::invalid_argument("select_clusters: bad k bounds");
    if (!(policy.p_min > 0.0f && policy.p_min <= 1.0f))
        throw std::invalid_argument("select_clusters: p_min out of (0,1]");
    double sum = 0.0;
    for (float p : c) sum += p;
    if (std::fabs(sum - 1.0) > 1e-6)
        throw std::invalid_argument("select_clusters: probabilities must sum to 1");

    std::vector<uint32_t> order(c.size());
    std::iota(order.begin(), order.end(), uint32_t{0});
    std::sort(order.begin(), order.end(), [&](uint32_t l, uint32_t r) {
        if (c[l] != c[r]) return c[l] > c[r];
        return l < r;
    });

    size_t take = order.size();
    if (policy.p_min < 1.0f) {
        double cum = 0.0;
        for (size_t i = 0; i < order.size(); i++) {
            cum += c[order[i]];
            if (cum >= double(policy.p_min)) {
                take = i + 1;
                break;
            }
        }
    }
    take = std::max(take, std::min(policy.k_min, order.size()));
    take = std::min(take, std::min(policy.k_max, order.size()));
    order.resize(take);
    return order;
}

// Exp-space completion: with S_k the max-shifted exponential sum of the known
// logits, the unknown side gets S_u = S_k (1-P)/P split evenly, which pins the
// known softmax mass to exactly P_known.
inline std::optional<double> pseudo_logits(const Vector& known_logits, double p_known,
                                           size_t n_unknown) {
    if (!(p_known > 0.0 && p_known <= 1.0))
        throw std::invalid_argument("pseudo_logits: p_known out of (0,1]");
    if (known_logits.empty()) throw std::invalid_argument("pseudo_logits: no known logits");
    if (n_unknown == 0 || p_known >= 1.0) return std::nullopt;
    double shift = -std::numeric_limits<double>::infinity();
    for (float v : known_logits) shift = std::max(shift, double(v));
    double s_k = 0.0;
    for (float v : known_logits) s_k += std::exp(double(v) - shift);
    const double s_u = s_k * (1.0 - p_known) / p_known;
    return shift + std::log(s_u / double(n_unknown));
}

// --- serving ---

inline std::string shard_name(size_t cluster) { return "head.shard." + std::to_string(cluster); }

// Cluster softmax, policy selection, shard gather, pseudo-logit fill. Selected
// shard rows reproduce the dense head's logits bit-for-bit; shard bytes are
// released once the logits are assembled.
inline Vector hier_forward(const Vector& x, const ClusterHead& ch, const ClusterAssignment& a,
                           const ModelFile& store, const HeadPolicy& policy,
                           MemoryMeter* meter = nullptr) {
    if (ch.h1.rows != x.size()) throw ShapeError("hier_forward: input dim mismatch");
    if (ch.h1.cols != a.n_clusters) throw ShapeError("hier_forward: cluster count mismatch");
    const size_t vocab = a.assign.size();

    const std::vector<double> cp = detail::softmax_d(matvec(x, ch.h1));
    Vector c(cp.size());
    for (size_t i = 0; i < cp.size(); i++) c[i] = float(cp[i]);
    const std::vector<uint32_t> selected = select_clusters(c, policy);

    std::vector<bool> is_selected(a.n_clusters, false);
    double p_known = 0.0;
    uint64_t fetched = 0;
    for (uint32_t cl : selected) {
        is_selected[cl] = true;
        p_known += cp[cl];
        if (!store.dir().contains(shard_name(cl)))
            throw IoError("hier_forward: missing shard " + shard_name(cl));
    }

    Vector logits(vocab, 0.0f);
    std::vector<bool> known(vocab, false);
    size_t n_known = 0;
    for (uint32_t cl : selected) {
        const Matrix shard = store.fetch_matrix(shard_name(cl), meter);
        fetched += store.dir().find(shard_name(cl)).length;
        const std::vector<uint32_t> tokens = cluster_tokens(a, cl);
        if (shard.rows != tokens.size() || shard.cols != x.size())
            throw FormatError("hier_forward: shard shape mismatch for " + shard_name(cl));
        for (size_t j = 0; j < tokens.size(); j++) {
            logits[tokens[j]] = dot(shard.row(j), x.data(), x.size());
            known[tokens[j]] = true;
            n_known++;
        }
    }

    const size_t n_unknown = vocab - n_known;
    if (n_unknown > 0) {
        Vector known_logits;
        known_logits.reserve(n_known);
        for (size_t t = 0; t < vocab; t++)
            if (known[t]) known_logits.push_back(logits[t]);
        const auto pseudo = pseudo_logits(known_logits, std::min(p_known, 1.0), n_unknown);
        const float fill = pseudo ? float(*pseudo) : 0.0f;
        for (size_t t = 0; t < vocab; t++)
            if (!known[t]) logits[t] = fill;
    }

    if (meter) meter->release(MemTag::head, fetched);
    return logits;
}

// --- persistence ---

// "head.h1" (f32), "head.assign" (u32 per token), and one f16 tensor per
// cluster whose rows are verbatim copies of the dense head's token rows.
inline std::vector<NamedTensor> head_tensors(const ClusterHead& ch, const ClusterAssignment& a,
                                             const Matrix& head) {
    if (head.rows != a.assign.size()) throw ShapeError("head_tensors: head/assignment mismatch");
    std::vector<NamedTensor> out;
    out.push_back(tensor_f32("head.h1", {ch.h1.rows, ch.h1.cols}, ch.h1.data));
    NamedTensor assign;
    assign.name = "head.assign";
    assign.dtype = Dtype::u32;
    assign.shape = {a.assign.size()};
    assign.u32s = a.assign;
    out.push_back(std::move(assign));
    for (size_t cl = 0; cl < a.n_clusters; cl++) {
        const std::vector<uint32_t> tokens = cluster_tokens(a, cl);
        Vector data(tokens.size() * head.cols);
        for (size_t j = 0; j < tokens.size(); j++)
            std::copy(head.row(tokens[j]), head.row(tokens[j]) + head.cols,
                      data.begin() + j * head.cols);
        out.push_back(tensor_f16(shard_name(cl), {tokens.size(), head.cols}, std::move(data)));
    }
    return out;
}

inline ClusterHead load_cluster_head(const ModelFile& file, MemoryMeter* meter = nullptr) {
    if (!file.dir().contains("head.h1")) throw IoError("load_cluster_head: no head.h1 tensor");
    return ClusterHead{file.fetch_matrix("head.h1", meter)};
}

// Assignment as serialized; centroids are an offline artifact and not stored.
inline ClusterAssignment load_head_assignment(const ModelFile& file,
                                              MemoryMeter* meter = nullptr) {
    if (!file.dir().contains("head.assign"))
        throw IoError("load_head_assignment: no head.assign tensor");
    ClusterAssignment a;
    a.assign = file.fetch_u32("head.assign", meter);
    uint32_t max_cl = 0;
    for (uint32_t cl : a.assign) max_cl = std::max(max_cl, cl);
    a.n_clusters = size_t(max_cl) + 1;
    a.sizes.assign(a.n_clusters, 0);
    for (uint32_t cl : a.assign) a.sizes[cl]++;
    return a;
}

}  // namespace rwkvl
