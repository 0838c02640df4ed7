#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "error.hpp"
#include "linalg.hpp"
#include "model.hpp"
#include "store.hpp"

namespace rwkvl {

// Small MLP scoring which FFN neurons will fire: sigmoid(relu(x.l1).l2),
// thresholded post-sigmoid.
struct MlpPredictor {
    Matrix l1;  // D x N_h
    Matrix l2;  // N_h x F
    float threshold = 0.7f;
};

// 1-bit shadow of the neuron-major FFN key matrix; scores are thresholded at a
// per-input nearest-rank percentile.
struct QuantPredictor {
    QuantTensor1b wk_1bit;  // F x D, per-neuron scales
    float t_pct = 0.8f;
};

struct EnsemblePredictor {
    MlpPredictor mlp;
    QuantPredictor quant;
};

struct ActivationSample {
    Vector x;      // mixed key input at the channel mix
    Bitmask mask;  // ground truth: pre-activation > 0
};

struct ActivationDataset {
    size_t dim = 0;
    size_t hidden = 0;
    std::vector<ActivationSample> samples;
};

inline Bitmask predict_mlp(const Vector& x, const MlpPredictor& p) {
    if (x.size() != p.l1.rows) throw ShapeError("predict_mlp: input dim mismatch");
    if (p.l1.cols != p.l2.rows) throw ShapeError("predict_mlp: hidden dim mismatch");
    Vector h = matvec(x, p.l1);
    for (auto& v : h) v = std::max(v, 0.0f);
    Vector z = matvec(h, p.l2);
    Bitmask m(p.l2.cols);
    for (size_t j = 0; j < z.size(); j++)
        if (sigmoidf(z[j]) >= p.threshold) m.set(j, true);
    return m;
}

// Every element >= its own percentile when all scores tie (x = 0 included), so
// the degenerate case selects everything rather than nothing.
inline Bitmask predict_quant(const Vector& x, const QuantPredictor& p) {
    if (x.size() != p.wk_1bit.cols) throw ShapeError("predict_quant: input dim mismatch");
    Vector s = fused_dequant_matvec_rows(p.wk_1bit, x);
    const float tau = percentile(s, p.t_pct);
    Bitmask m(s.size());
    for (size_t j = 0; j < s.size(); j++)
        if (s[j] >= tau) m.set(j, true);
    return m;
}

inline Bitmask predict_ensemble(const Vector& x, const EnsemblePredictor& e) {
    return predict_mlp(x, e.mlp) | predict_quant(x, e.quant);
}

inline Bitmask predict_mask(const Vector& x, const MlpPredictor& p) { return predict_mlp(x, p); }
inline Bitmask predict_mask(const Vector& x, const QuantPredictor& p) { return predict_quant(x, p); }
inline Bitmask predict_mask(const Vector& x, const EnsemblePredictor& p) {
    return predict_ensemble(x, p);
}

inline QuantPredictor make_quant_predictor(const Matrix& cm_wk, float t_pct = 0.8f) {
    return QuantPredictor{quantize_1bit(cm_wk), t_pct};
}

// Gathers only the masked neuron rows of the key and value matrices from the
// file and evaluates the squared-ReLU core restricted to them. Fetch bytes are
// charged while resident and released after the combine, so on a fresh meter
// the channel-mix peak equals exactly the bytes gathered.
inline Vector sparse_ffn(const Vector& xk, const Bitmask& mask, const ModelFile& file,
                         size_t layer, MemoryMeter* meter = nullptr) {
    const std::string p = "blk." + std::to_string(layer) + ".cm.";
    if (!file.dir().contains(p + "wk") || !file.dir().contains(p + "wv"))
        throw IoError("sparse_ffn: missing FFN tensors for layer " + std::to_string(layer));
    const TensorEntry& ek = file.dir().find(p + "wk");
    const TensorEntry& ev = file.dir().find(p + "wv");
    if (mask.len != ek.shape[0]) throw ShapeError("sparse_ffn: mask length mismatch");
    if (xk.size() != ek.cols()) throw ShapeError("sparse_ffn: input dim mismatch");
    if (ev.shape[0] != ek.shape[0]) throw ShapeError("sparse_ffn: wk/wv row mismatch");

    const std::vector<uint32_t> idx = mask_indices(mask);
    Matrix wk = file.fetch_rows(p + "wk", idx, meter);
    Matrix wv = file.fetch_rows(p + "wv", idx, meter);

    Vector y(ev.cols(), 0.0f);
    for (size_t i = 0; i < idx.size(); i++) {
        const float pre = dot(wk.row(i), xk.data(), xk.size());
        if (pre <= 0.0f) continue;
        const float h = pre * pre;
        const float* vrow = wv.row(i);
        for (size_t j = 0; j < y.size(); j++) y[j] += h * vrow[j];
    }
    if (meter) {
        meter->release(MemTag::channel_mix, ek.row_bytes() * idx.size());
        meter->release(MemTag::channel_mix, ev.row_bytes() * idx.size());
    }
    return y;
}

// Captures (mixed key input, fired-neuron mask) at one layer's channel mix,
// one sample per corpus token. Uses the same observer path as the sparsity
// measurement, so recorded densities reconcile with it exactly.
inline ActivationDataset record_activations(Model& model, const std::vector<uint32_t>& corpus,
                                            size_t layer) {
    if (corpus.empty()) throw std::invalid_argument("record_activations: empty corpus");
    if (layer >= model.cfg.n_layers)
        throw std::invalid_argument("record_activations: layer out of range");
    ActivationDataset ds;
    ds.dim = model.cfg.dim;
    ds.hidden = model.cfg.ffn_hidden();
    ForwardHooks hooks;
    hooks.ffn_observer = [&](size_t l, const Vector& xk, const Vector& pre) {
        if (l != layer) return;
        ActivationSample s;
        s.x = xk;
        s.mask = Bitmask(pre.size());
        for (size_t i = 0; i < pre.size(); i++)
            if (pre[i] > 0.0f) s.mask.set(i, true);
        ds.samples.push_back(std::move(s));
    };
    std::vector<BlockState> states(model.cfg.n_layers, BlockState::zeros(model.cfg));
    for (uint32_t t : corpus) forward_token(model, t, states, hooks);
    return ds;
}

// Flat little-endian layout: u32 dim, u32 hidden, u64 count, then per sample
// dim f32 values followed by hidden/8 mask bytes (LSB-first).
inline void save_dataset(const ActivationDataset& ds, const std::string& path) {
    if (ds.hidden % 8 != 0) throw std::invalid_argument("save_dataset: hidden not a byte multiple");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for write: " + path);
    const uint32_t d32 = static_cast<uint32_t>(ds.dim);
    const uint32_t f32b = static_cast<uint32_t>(ds.hidden);
    const uint64_t n = ds.samples.size();
    out.write(reinterpret_cast<const char*>(&d32), 4);
    out.write(reinterpret_cast<const char*>(&f32b), 4);
    out.write(reinterpret_cast<const char*>(&n), 8);
    std::vector<uint8_t> maskbuf(ds.hidden / 8);
    for (const ActivationSample& s : ds.samples) {
        if (s.x.size() != ds.dim || s.mask.len != ds.hidden)
            throw ShapeError("save_dataset: sample shape mismatch");
        out.write(reinterpret_cast<const char*>(s.x.data()),
                  static_cast<std::streamsize>(ds.dim * 4));
        for (size_t b = 0; b < maskbuf.size(); b++)
            maskbuf[b] =
                static_cast<uint8_t>((s.mask.words[b >> 3] >> ((b & 7) * 8)) & 0xFFu);
        out.write(reinterpret_cast<const char*>(maskbuf.data()),
                  static_cast<std::streamsize>(maskbuf.size()));
    }
    if (!out) throw IoError("write failed: " + path);
}

inline ActivationDataset load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path);
    uint32_t d32 = 0, f32b = 0;
    uint64_t n = 0;
    in.read(reinterpret_cast<char*>(&d32), 4);
    in.read(reinterpret_cast<char*>(&f32b), 4);
    in.read(reinterpret_cast<char*>(&n), 8);
    if (!in) throw IoError("truncated dataset header: " + path);
    if (d32 == 0 || f32b == 0 || f32b % 8 != 0)
        throw FormatError("bad dataset header: " + path);
    ActivationDataset ds;
    ds.dim = d32;
    ds.hidden = f32b;
    ds.samples.resize(n);
    std::vector<uint8_t> maskbuf(ds.hidden / 8);
    for (uint64_t i = 0; i < n; i++) {
        ActivationSample& s = ds.samples[i];
        s.x.resize(ds.dim);
        in.read(reinterpret_cast<char*>(s.x.data()), static_cast<std::streamsize>(ds.dim * 4));
        in.read(reinterpret_cast<char*>(maskbuf.data()),
                static_cast<std::streamsize>(maskbuf.size()));
        if (!in) throw IoError("truncated dataset record: " + path);
        s.mask = Bitmask(ds.hidden);
        for (size_t b = 0; b < maskbuf.size(); b++)
            s.mask.words[b >> 3] |= uint64_t(maskbuf[b]) << ((b & 7) * 8);
    }
    if (in.peek() != std::ifstream::traits_type::eof())
        throw FormatError("trailing bytes in dataset: " + path);
    return ds;
}

struct PredictorMetrics {
    double precision = 0.0;
    double recall = 0.0;
    double density = 0.0;
};

// Per-sample precision/recall/density averaged over the dataset. Empty truth
// gives recall 1, empty prediction gives precision 1 (nothing wrongly kept).
template <typename P>
PredictorMetrics predictor_metrics(const P& pred, const ActivationDataset& ds) {
    if (ds.samples.empty()) throw std::invalid_argument("predictor_metrics: empty dataset");
    PredictorMetrics m;
    for (const ActivationSample& s : ds.samples) {
        const Bitmask p = predict_mask(s.x, pred);
        const size_t inter = (p & s.mask).popcount();
        const size_t np = p.popcount(), nt = s.mask.popcount();
        m.recall += nt == 0 ? 1.0 : double(inter) / double(nt);
        m.precision += np == 0 ? 1.0 : double(inter) / double(np);
        m.density += double(np) / double(s.mask.len);
    }
    const double n = double(ds.samples.size());
    m.recall /= n;
    m.precision /= n;
    m.density /= n;
    return m;
}

struct TrainReport {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    std::vector<double> epoch_loss;  // full-dataset mean BCE after each epoch
};

namespace detail {

// Mean binary cross-entropy from logits, in the overflow-safe form
// max(z,0) - z*y + log1p(exp(-|z|)).
inline double mlp_dataset_loss(const MlpPredictor& p, const ActivationDataset& ds) {
    double total = 0.0;
    for (const ActivationSample& s : ds.samples) {
        Vector h = matvec(s.x, p.l1);
        for (auto& v : h) v = std::max(v, 0.0f);
        Vector z = matvec(h, p.l2);
        double acc = 0.0;
        for (size_t j = 0; j < z.size(); j++) {
            const double zj = z[j];
            const double y = s.mask.get(j) ? 1.0 : 0.0;
            acc += std::max(zj, 0.0) - zj * y + std::log1p(std::exp(-std::fabs(zj)));
        }
        total += acc / double(z.size());
    }
    return total / double(ds.samples.size());
}

}  // namespace detail

// Per-sample SGD on per-neuron binary cross-entropy against the recorded
// fired/silent labels. Hidden width defaults to dim/2.
inline MlpPredictor train_mlp_predictor(const ActivationDataset& ds, size_t epochs, float lr,
                                        uint64_t seed, TrainReport* report = nullptr,
                                        size_t hidden = 0, float threshold = 0.7f) {
    if (ds.samples.empty()) throw std::invalid_argument("train_mlp_predictor: empty dataset");
    const size_t d = ds.dim, f = ds.hidden;
    const size_t nh = hidden ? hidden : std::max<size_t>(1, d / 2);

    std::mt19937_64 rng(seed);
    MlpPredictor p;
    p.threshold = threshold;
    p.l1 = Matrix(d, nh);
    p.l2 = Matrix(nh, f);
    {
        std::uniform_real_distribution<float> u1(-1.0f / std::sqrt(float(d)),
                                                 1.0f / std::sqrt(float(d)));
        std::uniform_real_distribution<float> u2(-1.0f / std::sqrt(float(nh)),
                                                 1.0f / std::sqrt(float(nh)));
        for (auto& v : p.l1.data) v = u1(rng);
        for (auto& v : p.l2.data) v = u2(rng);
    }

    TrainReport rep;
    rep.initial_loss = detail::mlp_dataset_loss(p, ds);
    rep.final_loss = rep.initial_loss;

    std::vector<size_t> order(ds.samples.size());
    for (size_t i = 0; i < order.size(); i++) order[i] = i;
    Vector a(nh), h(nh), z(f), dz(f), dh(nh);

    for (size_t e = 0; e < epochs; e++) {
        std::shuffle(order.begin(), order.end(), rng);
        for (size_t idx : order) {
            const ActivationSample& s = ds.samples[idx];
            for (size_t i = 0; i < nh; i++) {
                float acc = 0.0f;
                for (size_t j = 0; j < d; j++) acc += s.x[j] * p.l1.at(j, i);
                a[i] = acc;
                h[i] = std::max(acc, 0.0f);
            }
            for (size_t j = 0; j < f; j++) {
                float acc = 0.0f;
                for (size_t i = 0; i < nh; i++) acc += h[i] * p.l2.at(i, j);
                z[j] = acc;
                const float y = s.mask.get(j) ? 1.0f : 0.0f;
                dz[j] = (sigmoidf(acc) - y) / float(f);
            }
            for (size_t i = 0; i < nh; i++) {
                float acc = 0.0f;
                float* l2row = p.l2.row(i);
                const float hi = h[i];
                for (size_t j = 0; j < f; j++) {
                    acc += l2row[j] * dz[j];
                    l2row[j] -= lr * hi * dz[j];
                }
                dh[i] = a[i] > 0.0f ? acc : 0.0f;
            }
            for (size_t j = 0; j < d; j++) {
                const float xj = s.x[j];
                float* l1row = p.l1.row(j);
                for (size_t i = 0; i < nh; i++) l1row[i] -= lr * xj * dh[i];
            }
        }
        const double loss = detail::mlp_dataset_loss(p, ds);
        if (!std::isfinite(loss)) throw TrainingError("train_mlp_predictor: loss diverged");
        rep.epoch_loss.push_back(loss);
        rep.final_loss = loss;
    }

    if (report) {
        const PredictorMetrics m = predictor_metrics(p, ds);
        rep.precision = m.precision;
        rep.recall = m.recall;
        *report = std::move(rep);
    }
    return p;
}

// --- predictor persistence ---

inline std::vector<NamedTensor> predictor_tensors(size_t layer, const EnsemblePredictor& e) {
    const std::string p = std::to_string(layer) + ".pred.";
    std::vector<NamedTensor> out;
    out.push_back(tensor_f16(p + "L1", {e.mlp.l1.rows, e.mlp.l1.cols}, e.mlp.l1.data));
    out.push_back(tensor_f16(p + "L2", {e.mlp.l2.rows, e.mlp.l2.cols}, e.mlp.l2.data));
    NamedTensor bits;
    bits.name = p + "wk1b";
    bits.dtype = Dtype::bit1;
    bits.shape = {e.quant.wk_1bit.rows, e.quant.wk_1bit.cols};
    bits.bits = e.quant.wk_1bit.sign_bits;
    bits.companion = p + "scale";
    out.push_back(std::move(bits));
    out.push_back(tensor_f32(p + "scale", {e.quant.wk_1bit.scales.size()}, e.quant.wk_1bit.scales));
    return out;
}

inline EnsemblePredictor load_predictor(const ModelFile& file, size_t layer, float t_mlp = 0.7f,
                                        float t_pct = 0.8f, MemoryMeter* meter = nullptr) {
    const std::string p = std::to_string(layer) + ".pred.";
    if (!file.dir().contains(p + "L1") || !file.dir().contains(p + "wk1b"))
        throw IoError("load_predictor: missing predictor tensors for layer " +
                      std::to_string(layer));
    EnsemblePredictor e;
    e.mlp.l1 = file.fetch_matrix(p + "L1", meter);
    e.mlp.l2 = file.fetch_matrix(p + "L2", meter);
    e.mlp.threshold = t_mlp;
    e.quant.wk_1bit = file.fetch_bit1(p + "wk1b", meter);
    e.quant.t_pct = t_pct;
    return e;
}

}  // namespace rwkvl
