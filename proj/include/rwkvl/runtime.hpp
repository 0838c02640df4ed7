#pragma once

#include <array>
#include <condition_variable>
#include <cstdint>
#include <exception>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "embed_cache.hpp"
#include "error.hpp"
#include "hier_head.hpp"
#include "model.hpp"
#include "sparsity.hpp"
#include "store.hpp"

namespace rwkvl {

enum class LoadStrategy { full, layerwise };

struct TechniqueSet {
    bool embed_cache = false;  // embedding rows through the LRU cache
    bool sparse_ffn = false;   // FFN rows gathered under the ensemble mask
    bool hier_head = false;    // clustered head with on-demand shards
};

struct MemoryReport {
    std::array<uint64_t, kNumMemTags> peak{};
    uint64_t total_peak = 0;
    uint64_t sum_of_peaks = 0;
    uint64_t blocks_group_peak = 0;
};

inline MemoryReport memory_report(const MemoryMeter& m) {
    MemoryReport r;
    for (size_t i = 0; i < kNumMemTags; i++) r.peak[i] = m.peak(static_cast<MemTag>(i));
    r.total_peak = m.total_peak();
    r.sum_of_peaks = m.sum_of_peaks();
    r.blocks_group_peak = m.blocks_group_peak();
    return r;
}

namespace detail {

// Single background fetch context for layerwise loading: one request in
// flight, the consumer blocks on collect() until the layer is resident.
class BlockPrefetcher {
  public:
    void start(const ModelFile* file, MemoryMeter* meter, bool include_ffn_mats) {
        file_ = file;
        meter_ = meter;
        include_ffn_ = include_ffn_mats;
        th_ = std::thread([this] { run(); });
    }

    ~BlockPrefetcher() {
        if (!th_.joinable()) return;
        {
            std::lock_guard<std::mutex> lk(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        th_.join();
    }

    void submit(size_t layer) {
        std::lock_guard<std::mutex> lk(mu_);
        if (pending_ || has_result_) throw std::logic_error("prefetch: request already in flight");
        req_layer_ = layer;
        pending_ = true;
        cv_.notify_all();
    }

    std::pair<size_t, BlockWeights> collect() {
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [&] { return has_result_; });
        has_result_ = false;
        if (error_) {
            auto e = error_;
            error_ = nullptr;
            std::rethrow_exception(e);
        }
        return {res_layer_, std::move(result_)};
    }

  private:
    void run() {
        std::unique_lock<std::mutex> lk(mu_);
        for (;;) {
            cv_.wait(lk, [&] { return stop_ || pending_; });
            if (stop_) return;
            const size_t layer = req_layer_;
            pending_ = false;
            lk.unlock();
            BlockWeights w;
            std::exception_ptr err;
            try {
                w = load_block_weights(*file_, layer, meter_, include_ffn_);
            } catch (...) {
                err = std::current_exception();
            }
            lk.lock();
            result_ = std::move(w);
            res_layer_ = layer;
            error_ = err;
            has_result_ = true;
            cv_.notify_all();
        }
    }

    const ModelFile* file_ = nullptr;
    MemoryMeter* meter_ = nullptr;
    bool include_ffn_ = true;

    std::thread th_;
    std::mutex mu_;
    std::condition_variable cv_;
    bool stop_ = false, pending_ = false, has_result_ = false;
    size_t req_layer_ = 0, res_layer_ = 0;
    BlockWeights result_;
    std::exception_ptr error_;
};

}  // namespace detail

// Serving session over an on-disk model: residency is the strategy's concern
// (everything up front vs. current+next layer), independent of the enabled
// techniques, which govern how embedding, FFN, and head bytes are touched.
// Outputs are bit-identical across strategies for the same technique set.
class Runtime {
  public:
    Runtime(const ModelFile& file, LoadStrategy strategy, TechniqueSet tech = {})
        : file_(file), strategy_(strategy), tech_(tech), cfg_(file.config()) {
        cfg_.validate();
        ln_out_g_ = file.fetch_vector("ln_out.g", &meter_);
        ln_out_b_ = file.fetch_vector("ln_out.b", &meter_);
        if (tech_.hier_head) {
            cluster_head_ = load_cluster_head(file, &meter_);
            assignment_ = load_head_assignment(file, &meter_);
        } else {
            head_ = file.fetch_matrix("head.h", &meter_);
        }
        if (tech_.embed_cache)
            cache_.emplace(cfg_.embed_cache_capacity);
        else
            emb_ = file.fetch_matrix("emb", &meter_);
        if (tech_.sparse_ffn)
            for (size_t l = 0; l < cfg_.n_layers; l++)
                predictors_.push_back(
                    load_predictor(file, l, cfg_.mlp_threshold, cfg_.quant_percentile, &meter_));

        states_.assign(cfg_.n_layers, BlockState::zeros(cfg_));
        state_bytes_ = states_[0].bytes() * cfg_.n_layers;
        meter_.charge(MemTag::state, state_bytes_);

        if (strategy_ == LoadStrategy::full) {
            for (size_t l = 0; l < cfg_.n_layers; l++)
                blocks_.push_back(load_block_weights(file, l, &meter_, include_ffn_mats()));
        } else {
            prefetcher_.start(&file_, &meter_, include_ffn_mats());
        }
    }

    const ModelConfig& config() const { return cfg_; }
    const MemoryMeter& meter() const { return meter_; }

    void reset_states() {
        for (auto& s : states_) s = BlockState::zeros(cfg_);
    }

    Vector forward(uint32_t token) {
        if (token >= cfg_.vocab) throw std::invalid_argument("runtime: token out of range");
        Vector x = tech_.embed_cache
                       ? cache_->get_embedding(token, file_, &meter_)
                       : Vector(emb_.row(token), emb_.row(token) + cfg_.dim);

        if (strategy_ == LoadStrategy::full) {
            for (size_t l = 0; l < cfg_.n_layers; l++) step_layer(l, blocks_[l], x);
        } else {
            for (size_t l = 0; l < cfg_.n_layers; l++) {
                BlockWeights w = acquire_layer(l);
                const bool prefetching = cfg_.n_layers > 1;
                if (prefetching) prefetcher_.submit((l + 1) % cfg_.n_layers);
                step_layer(l, w, x);
                if (prefetching) {
                    auto next = prefetcher_.collect();
                    staged_layer_ = next.first;
                    staged_ = std::move(next.second);
                    has_staged_ = true;
                }
                release_layer_bytes(l);
            }
        }

        Vector xo = layer_norm(x, ln_out_g_, ln_out_b_);
        if (tech_.hier_head)
            return hier_forward(xo, cluster_head_, assignment_, file_, cfg_.head_policy, &meter_);
        return matvec_rows(head_, xo);
    }

    std::vector<uint32_t> generate(const std::vector<uint32_t>& prompt, size_t n,
                                   const Sampler& sampler) {
        SamplerState ss(sampler);
        std::vector<uint32_t> feed = prompt;
        if (feed.empty()) feed.push_back(0);
        Vector logits;
        for (uint32_t t : feed) logits = forward(t);
        std::vector<uint32_t> out;
        out.reserve(n);
        for (size_t i = 0; i < n; i++) {
            const uint32_t next = ss.sample(logits);
            out.push_back(next);
            if (i + 1 < n) logits = forward(next);
        }
        return out;
    }

    CacheStats cache_stats() const {
        return cache_ ? cache_->stats() : CacheStats{};
    }

  private:
    bool include_ffn_mats() const { return !tech_.sparse_ffn; }

    BlockWeights acquire_layer(size_t l) {
        if (has_staged_ && staged_layer_ == l) {
            has_staged_ = false;
            return std::move(staged_);
        }
        return load_block_weights(file_, l, &meter_, include_ffn_mats());
    }

    void release_layer_bytes(size_t l) {
        for (const auto& [tag, bytes] : block_tensor_bytes(file_.dir(), l, include_ffn_mats()))
            meter_.release(tag, bytes);
    }

    // Same math as the in-memory forward pass; the sparse branch swaps the
    // resident FFN loop for a masked row gather, everything else unchanged.
    void step_layer(size_t l, BlockWeights& w, Vector& x) {
        BlockState& st = states_[l];
        Vector tm_in = layer_norm(x, w.ln1_g, w.ln1_b);
        Vector tm_out = time_mix_forward(tm_in, st, w, cfg_.n_heads);
        for (size_t i = 0; i < cfg_.dim; i++) x[i] += tm_out[i];

        Vector cm_in = layer_norm(x, w.ln2_g, w.ln2_b);
        Vector cm_out;
        if (tech_.sparse_ffn) {
            Vector xr = token_shift(cm_in, st.cm_prev_x, w.mix_cm_r);
            Vector xk = token_shift(cm_in, st.cm_prev_x, w.mix_cm_k);
            const Bitmask mask = predict_ensemble(xk, predictors_[l]);
            Vector r = projection_forward(xr, w.cm_wr);
            for (auto& v : r) v = sigmoidf(v);
            cm_out = sparse_ffn(xk, mask, file_, l, &meter_);
            for (size_t i = 0; i < cfg_.dim; i++) cm_out[i] *= r[i];
            st.cm_prev_x = cm_in;
        } else {
            cm_out = channel_mix_forward(cm_in, st, w, nullptr);
        }
        for (size_t i = 0; i < cfg_.dim; i++) x[i] += cm_out[i];
    }

    const ModelFile& file_;
    LoadStrategy strategy_;
    TechniqueSet tech_;
    ModelConfig cfg_;
    MemoryMeter meter_;

    Vector ln_out_g_, ln_out_b_;
    Matrix head_;
    Matrix emb_;
    ClusterHead cluster_head_;
    ClusterAssignment assignment_;
    std::optional<LruEmbeddingCache> cache_;
    std::vector<EnsemblePredictor> predictors_;

    std::vector<BlockState> states_;
    uint64_t state_bytes_ = 0;

    std::vector<BlockWeights> blocks_;  // full strategy
    detail::BlockPrefetcher prefetcher_;
    BlockWeights staged_;
    size_t staged_layer_ = 0;
    bool has_staged_ = false;
};

struct Workload {
    std::vector<uint32_t> prompt;
    size_t n_generate = 0;
    Sampler sampler;
};

struct RunResult {
    std::vector<uint32_t> tokens;
    MemoryReport memory;
};

inline RunResult run_with_strategy(const ModelFile& file, const Workload& w, LoadStrategy strategy,
                                   TechniqueSet tech = {}) {
    Runtime rt(file, strategy, tech);
    RunResult res;
    res.tokens = rt.generate(w.prompt, w.n_generate, w.sampler);
    res.memory = memory_report(rt.meter());
    return res;
}

}  // namespace rwkvl
