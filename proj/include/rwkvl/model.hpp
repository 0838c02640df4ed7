#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "rwkvl/config.hpp"
#include "rwkvl/error.hpp"
#include "rwkvl/linalg.hpp"
#include "rwkvl/lowrank.hpp"

namespace rwkvl {

// A square projection is either dense or one of the factored forms.
using Projection = std::variant<Matrix, LowRankPair, EnhancedLowRank>;

inline Vector projection_forward(const Vector& x, const Projection& p) {
    if (const auto* dense = std::get_if<Matrix>(&p)) return matvec(x, *dense);
    if (const auto* pair = std::get_if<LowRankPair>(&p)) return lowrank_forward(x, *pair);
    return enhanced_forward(x, std::get<EnhancedLowRank>(p));
}

inline bool projection_is_dense(const Projection& p) {
    return std::holds_alternative<Matrix>(p);
}

inline size_t projection_params(const Projection& p) {
    if (const auto* dense = std::get_if<Matrix>(&p)) return dense->data.size();
    if (const auto* pair = std::get_if<LowRankPair>(&p)) return param_count(*pair);
    return param_count(std::get<EnhancedLowRank>(p));
}

struct BlockWeights {
    // time-mix
    Projection wr, wk, wv, wg;  // D x D, compressible
    Matrix wo;                  // D x D, always dense
    Vector decay_raw;           // D, effective decay = exp(-exp(raw)) in (0,1)
    Vector bonus;               // D
    Vector mix_r, mix_k, mix_v, mix_g;  // D, token-shift coefficients
    // channel-mix
    Vector mix_cm_r, mix_cm_k;  // D
    Projection cm_wr;           // D x D, compressible
    Matrix cm_wk;               // F x D, neuron-major: row f is neuron f's input weights
    Matrix cm_wv;               // F x D, row f is neuron f's output contribution
    // layer norms
    Vector ln1_g, ln1_b, ln2_g, ln2_b;  // D
};

struct BlockState {
    Vector tm_prev_x;           // D
    Vector cm_prev_x;           // D
    std::vector<Matrix> wkv;    // per head, S x S with S = D/heads

    static BlockState zeros(const ModelConfig& cfg) {
        BlockState s;
        s.tm_prev_x.assign(cfg.dim, 0.0f);
        s.cm_prev_x.assign(cfg.dim, 0.0f);
        const size_t hd = cfg.head_dim();
        s.wkv.assign(cfg.n_heads, Matrix(hd, hd));
        return s;
    }

    size_t bytes() const {
        size_t n = tm_prev_x.size() + cm_prev_x.size();
        for (const auto& m : wkv) n += m.data.size();
        return n * sizeof(float);
    }
};

struct Model {
    ModelConfig cfg;
    Matrix emb;   // V x D, one row per token
    std::vector<BlockWeights> blocks;
    Vector ln_out_g, ln_out_b;  // D
    Matrix head;  // V x D, logits[t] = dot(head.row(t), x)
    bool compressed = false;
};

inline float effective_decay(float raw) { return std::exp(-std::exp(raw)); }

inline float sigmoidf(float x) { return 1.0f / (1.0f + std::exp(-x)); }
inline float siluf(float x) { return x * sigmoidf(x); }

inline Vector layer_norm(const Vector& x, const Vector& g, const Vector& b, float eps = 1e-5f) {
    const size_t n = x.size();
    double mean = 0.0;
    for (float v : x) mean += v;
    mean /= double(n);
    double var = 0.0;
    for (float v : x) {
        const double d = v - mean;
        var += d * d;
    }
    var /= double(n);
    const float inv = 1.0f / std::sqrt(float(var) + eps);
    Vector out(n);
    for (size_t i = 0; i < n; i++)
        out[i] = (x[i] - float(mean)) * inv * g[i] + b[i];
    return out;
}

// Per-head normalization of the attention output, no affine parameters.
inline void group_norm_heads(Vector& x, size_t n_heads, float eps = 1e-5f) {
    const size_t hd = x.size() / n_heads;
    for (size_t h = 0; h < n_heads; h++) {
        float* p = x.data() + h * hd;
        double mean = 0.0;
        for (size_t i = 0; i < hd; i++) mean += p[i];
        mean /= double(hd);
        double var = 0.0;
        for (size_t i = 0; i < hd; i++) {
            const double d = p[i] - mean;
            var += d * d;
        }
        var /= double(hd);
        const float inv = 1.0f / std::sqrt(float(var) + eps);
        for (size_t i = 0; i < hd; i++) p[i] = (p[i] - float(mean)) * inv;
    }
}

inline Vector token_shift(const Vector& x, const Vector& prev, const Vector& mix) {
    Vector out(x.size());
    for (size_t i = 0; i < x.size(); i++)
        out[i] = mix[i] * x[i] + (1.0f - mix[i]) * prev[i];
    return out;
}

// One recurrent attention step. The per-head state is an S x S matrix updated
// as wkv' = diag(decay) * wkv + k^T v; the current token additionally reaches
// the output through the bonus path u before entering the state.
inline Vector time_mix_forward(const Vector& x, BlockState& state, const BlockWeights& w,
                               size_t n_heads) {
    const size_t d = x.size();
    if (state.tm_prev_x.size() != d) throw ShapeError("time_mix: state dim mismatch");
    const size_t hd = d / n_heads;

    Vector r = projection_forward(token_shift(x, state.tm_prev_x, w.mix_r), w.wr);
    Vector k = projection_forward(token_shift(x, state.tm_prev_x, w.mix_k), w.wk);
    Vector v = projection_forward(token_shift(x, state.tm_prev_x, w.mix_v), w.wv);
    Vector g = projection_forward(token_shift(x, state.tm_prev_x, w.mix_g), w.wg);

    Vector out(d, 0.0f);
    for (size_t h = 0; h < n_heads; h++) {
        Matrix& s = state.wkv[h];
        const size_t base = h * hd;
        for (size_t i = 0; i < hd; i++) {
            const float ri = r[base + i];
            const float ki = k[base + i];
            const float ui = w.bonus[base + i];
            const float* srow = s.row(i);
            for (size_t j = 0; j < hd; j++)
                out[base + j] += ri * (srow[j] + ui * ki * v[base + j]);
        }
        for (size_t i = 0; i < hd; i++) {
            const float decay = effective_decay(w.decay_raw[base + i]);
            const float ki = k[base + i];
            float* srow = s.row(i);
            for (size_t j = 0; j < hd; j++)
                srow[j] = decay * srow[j] + ki * v[base + j];
        }
    }

    group_norm_heads(out, n_heads);
    for (size_t i = 0; i < d; i++) out[i] *= siluf(g[i]);
    Vector y = matvec(out, w.wo);
    state.tm_prev_x = x;
    return y;
}

// Hooks let the caller splice in the serving-time techniques without the core
// depending on them: cached embedding fetch, predicted FFN masks, a clustered
// head, and an activation observer shared by sparsity measurement and
// predictor-dataset recording.
struct ForwardHooks {
    std::function<Vector(uint32_t token)> embed_fetch;
    std::function<Bitmask(size_t layer, const Vector& xk)> ffn_mask;
    std::function<Vector(const Vector& x)> head_logits;
    std::function<void(size_t layer, const Vector& xk, const Vector& preact)> ffn_observer;
};

// Squared-ReLU FFN gated by a sigmoid receptance. When a mask is given, only
// the selected neurons are evaluated; the rest contribute exactly zero.
inline Vector channel_mix_forward(const Vector& x, BlockState& state, const BlockWeights& w,
                                  const Bitmask* mask) {
    const size_t d = x.size();
    if (state.cm_prev_x.size() != d) throw ShapeError("channel_mix: state dim mismatch");
    const size_t f = w.cm_wk.rows;

    Vector xr = token_shift(x, state.cm_prev_x, w.mix_cm_r);
    Vector xk = token_shift(x, state.cm_prev_x, w.mix_cm_k);
    Vector r = projection_forward(xr, w.cm_wr);
    for (auto& v : r) v = sigmoidf(v);

    Vector y(d, 0.0f);
    for (size_t i = 0; i < f; i++) {
        if (mask && !mask->get(i)) continue;
        const float pre = dot(w.cm_wk.row(i), xk.data(), d);
        if (pre <= 0.0f) continue;
        const float h = pre * pre;
        const float* vrow = w.cm_wv.row(i);
        for (size_t j = 0; j < d; j++) y[j] += h * vrow[j];
    }
    for (size_t i = 0; i < d; i++) y[i] *= r[i];
    state.cm_prev_x = x;
    return y;
}

namespace detail {

// Shared by forward_token and the activation observer path: x after ln2,
// mixed for the key projection, plus the raw pre-activations.
inline Vector cm_preactivations(const Vector& xk, const BlockWeights& w) {
    Vector pre(w.cm_wk.rows);
    for (size_t i = 0; i < w.cm_wk.rows; i++)
        pre[i] = dot(w.cm_wk.row(i), xk.data(), xk.size());
    return pre;
}

}  // namespace detail

inline Vector forward_token(Model& model, uint32_t token, std::vector<BlockState>& states,
                            const ForwardHooks& hooks = {}) {
    const ModelConfig& cfg = model.cfg;
    if (token >= cfg.vocab) throw std::invalid_argument("forward_token: token out of range");
    if (states.size() != cfg.n_layers) throw ShapeError("forward_token: state count mismatch");

    Vector x = hooks.embed_fetch ? hooks.embed_fetch(token)
                                 : Vector(model.emb.row(token), model.emb.row(token) + cfg.dim);
    if (x.size() != cfg.dim) throw ShapeError("forward_token: embedding dim mismatch");

    for (size_t l = 0; l < cfg.n_layers; l++) {
        BlockWeights& w = model.blocks[l];
        BlockState& st = states[l];

        Vector tm_in = layer_norm(x, w.ln1_g, w.ln1_b);
        Vector tm_out = time_mix_forward(tm_in, st, w, cfg.n_heads);
        for (size_t i = 0; i < cfg.dim; i++) x[i] += tm_out[i];

        Vector cm_in = layer_norm(x, w.ln2_g, w.ln2_b);
        if (hooks.ffn_observer) {
            Vector xk = token_shift(cm_in, st.cm_prev_x, w.mix_cm_k);
            hooks.ffn_observer(l, xk, detail::cm_preactivations(xk, w));
        }
        Bitmask mask;
        const Bitmask* mask_ptr = nullptr;
        if (hooks.ffn_mask) {
            Vector xk = token_shift(cm_in, st.cm_prev_x, w.mix_cm_k);
            mask = hooks.ffn_mask(l, xk);
            mask_ptr = &mask;
        }
        Vector cm_out = channel_mix_forward(cm_in, st, w, mask_ptr);
        for (size_t i = 0; i < cfg.dim; i++) x[i] += cm_out[i];
    }

    Vector xo = layer_norm(x, model.ln_out_g, model.ln_out_b);
    if (hooks.head_logits) return hooks.head_logits(xo);
    return matvec_rows(model.head, xo);
}

struct Sampler {
    enum class Mode { greedy, temperature, top_k };
    Mode mode = Mode::greedy;
    float temperature = 1.0f;
    size_t k = 40;
    uint32_t seed = 0;
};

class SamplerState {
  public:
    explicit SamplerState(const Sampler& s) : cfg_(s), rng_(s.seed) {}

    uint32_t sample(const Vector& logits) {
        if (cfg_.mode == Sampler::Mode::greedy) {
            size_t best = 0;
            for (size_t i = 1; i < logits.size(); i++)
                if (logits[i] > logits[best]) best = i;
            return static_cast<uint32_t>(best);
        }
        std::vector<size_t> idx(logits.size());
        for (size_t i = 0; i < idx.size(); i++) idx[i] = i;
        if (cfg_.mode == Sampler::Mode::top_k && cfg_.k < idx.size()) {
            std::partial_sort(idx.begin(), idx.begin() + cfg_.k, idx.end(),
                              [&](size_t a, size_t b) { return logits[a] > logits[b]; });
            idx.resize(cfg_.k);
        }
        const float t = cfg_.temperature > 0.0f ? cfg_.temperature : 1.0f;
        double mx = -1e300;
        for (size_t i : idx) mx = std::max(mx, double(logits[i]) / t);
        std::vector<double> p(idx.size());
        double sum = 0.0;
        for (size_t i = 0; i < idx.size(); i++) {
            p[i] = std::exp(double(logits[idx[i]]) / t - mx);
            sum += p[i];
        }
        std::uniform_real_distribution<double> dist(0.0, 1.0);
        double u = dist(rng_) * sum, acc = 0.0;
        for (size_t i = 0; i < idx.size(); i++) {
            acc += p[i];
            if (u <= acc) return static_cast<uint32_t>(idx[i]);
        }
        return static_cast<uint32_t>(idx.back());
    }

  private:
    Sampler cfg_;
    std::mt19937 rng_;
};

inline std::vector<uint32_t> generate(Model& model, const std::vector<uint32_t>& prompt, size_t n,
                                      const Sampler& sampler, const ForwardHooks& hooks = {}) {
    std::vector<BlockState> states(model.cfg.n_layers, BlockState::zeros(model.cfg));
    SamplerState ss(sampler);
    std::vector<uint32_t> feed = prompt;
    if (feed.empty()) feed.push_back(0);  // empty prompt starts from token 0
    Vector logits;
    for (uint32_t t : feed) logits = forward_token(model, t, states, hooks);
    std::vector<uint32_t> out;
    out.reserve(n);
    for (size_t i = 0; i < n; i++) {
        const uint32_t next = ss.sample(logits);
        out.push_back(next);
        if (i + 1 < n) logits = forward_token(model, next, states, hooks);
    }
    return out;
}

// Mean fraction of exactly-zero squared-ReLU activations per layer.
inline std::vector<double> measure_ffn_sparsity(Model& model, const std::vector<uint32_t>& corpus) {
    if (corpus.empty()) throw std::invalid_argument("measure_ffn_sparsity: empty corpus");
    const size_t L = model.cfg.n_layers;
    std::vector<size_t> zeros(L, 0), total(L, 0);
    ForwardHooks hooks;
    hooks.ffn_observer = [&](size_t layer, const Vector&, const Vector& pre) {
        for (float p : pre)
            if (p <= 0.0f) zeros[layer]++;
        total[layer] += pre.size();
    };
    std::vector<BlockState> states(L, BlockState::zeros(model.cfg));
    for (uint32_t t : corpus) forward_token(model, t, states, hooks);
    std::vector<double> ratio(L);
    for (size_t l = 0; l < L; l++) ratio[l] = double(zeros[l]) / double(total[l]);
    return ratio;
}

// --- initialization ---

inline Matrix random_weight(std::mt19937& rng, size_t rows, size_t cols, size_t fan_in) {
    const float s = 1.0f / std::sqrt(static_cast<float>(fan_in));
    std::uniform_real_distribution<float> dist(-s, s);
    Matrix m(rows, cols);
    for (auto& v : m.data) v = dist(rng);
    return m;
}

inline Model init_model(const ModelConfig& cfg, uint32_t seed) {
    cfg.validate();
    std::mt19937 rng(seed);
    std::uniform_real_distribution<float> mix_dist(0.2f, 0.8f);
    std::uniform_real_distribution<float> bonus_dist(-0.5f, 0.5f);

    Model m;
    m.cfg = cfg;
    const size_t d = cfg.dim, f = cfg.ffn_hidden(), hd = cfg.head_dim();
    m.emb = random_weight(rng, cfg.vocab, d, d);
    m.ln_out_g.assign(d, 1.0f);
    m.ln_out_b.assign(d, 0.0f);
    m.head = random_weight(rng, cfg.vocab, d, d);

    m.blocks.resize(cfg.n_layers);
    for (size_t l = 0; l < cfg.n_layers; l++) {
        BlockWeights& b = m.blocks[l];
        b.wr = random_weight(rng, d, d, d);
        b.wk = random_weight(rng, d, d, d);
        b.wv = random_weight(rng, d, d, d);
        b.wg = random_weight(rng, d, d, d);
        b.wo = random_weight(rng, d, d, d);
        b.cm_wr = random_weight(rng, d, d, d);
        b.cm_wk = random_weight(rng, f, d, d);
        b.cm_wv = random_weight(rng, f, d, f);

        b.decay_raw.resize(d);
        for (size_t h = 0; h < cfg.n_heads; h++)
            for (size_t i = 0; i < hd; i++) {
                const float frac = hd > 1 ? float(i) / float(hd - 1) : 0.0f;
                b.decay_raw[h * hd + i] = -6.0f + 5.0f * frac + 0.1f * float(l);
            }
        b.bonus.resize(d);
        for (auto& v : b.bonus) v = bonus_dist(rng);
        for (Vector* mv : {&b.mix_r, &b.mix_k, &b.mix_v, &b.mix_g, &b.mix_cm_r, &b.mix_cm_k}) {
            mv->resize(d);
            for (auto& v : *mv) v = mix_dist(rng);
        }
        b.ln1_g.assign(d, 1.0f);
        b.ln1_b.assign(d, 0.0f);
        b.ln2_g.assign(d, 1.0f);
        b.ln2_b.assign(d, 0.0f);
    }
    return m;
}

// --- compression ---

enum class CompressTarget { tm_r, tm_k, tm_v, tm_g, cm_r };

inline std::set<CompressTarget> parse_targets(const std::string& csv) {
    std::set<CompressTarget> out;
    size_t pos = 0;
    while (pos <= csv.size()) {
        size_t comma = csv.find(',', pos);
        if (comma == std::string::npos) comma = csv.size();
        const std::string tok = csv.substr(pos, comma - pos);
        pos = comma + 1;
        if (tok.empty()) continue;
        if (tok == "tm_r")
            out.insert(CompressTarget::tm_r);
        else if (tok == "tm_k")
            out.insert(CompressTarget::tm_k);
        else if (tok == "tm_v")
            out.insert(CompressTarget::tm_v);
        else if (tok == "tm_g")
            out.insert(CompressTarget::tm_g);
        else if (tok == "cm_r")
            out.insert(CompressTarget::cm_r);
        else if (tok == "wo" || tok == "tm_o")
            throw std::invalid_argument("compress: the output projection is never factored");
        else
            throw std::invalid_argument("compress: unknown target '" + tok + "'");
    }
    return out;
}

inline std::set<CompressTarget> all_compress_targets() {
    return {CompressTarget::tm_r, CompressTarget::tm_k, CompressTarget::tm_v, CompressTarget::tm_g,
            CompressTarget::cm_r};
}

inline void compress_model(Model& model, size_t k, const std::set<CompressTarget>& targets) {
    if (targets.empty()) return;
    for (auto& b : model.blocks) {
        auto replace = [&](Projection& p) {
            if (const auto* dense = std::get_if<Matrix>(&p)) p = decompose_projection(*dense, k);
        };
        if (targets.count(CompressTarget::tm_r)) replace(b.wr);
        if (targets.count(CompressTarget::tm_k)) replace(b.wk);
        if (targets.count(CompressTarget::tm_v)) replace(b.wv);
        if (targets.count(CompressTarget::tm_g)) replace(b.wg);
        if (targets.count(CompressTarget::cm_r)) replace(b.cm_wr);
    }
    model.compressed = true;
    model.cfg.k = k;
}

}  // namespace rwkvl
