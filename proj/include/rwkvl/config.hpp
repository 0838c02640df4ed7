#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>

#include "rwkvl/error.hpp"

namespace rwkvl {

// Cluster-selection policy for the hierarchical head: grow the selected set
// until cumulative probability reaches p_min, clamped to [k_min, k_max].
struct HeadPolicy {
    float p_min = 0.95f;
    size_t k_min = 3;
    size_t k_max = 100;
};

struct ModelConfig {
    size_t n_layers = 2;
    size_t dim = 64;
    size_t n_heads = 2;
    size_t vocab = 65536;
    float ffn_mult = 3.5f;
    size_t k = 8;  // low-rank compression factor
    float mlp_threshold = 0.7f;
    float quant_percentile = 0.8f;
    HeadPolicy head_policy;
    size_t embed_cache_capacity = 1000;
    size_t head_clusters = 200;

    size_t head_dim() const { return dim / n_heads; }

    // FFN hidden width: round(ffn_mult * D), then up to a multiple of 32 so
    // neuron masks pack into whole words.
    size_t ffn_hidden() const {
        auto f = static_cast<size_t>(std::llround(double(ffn_mult) * double(dim)));
        return (f + 31) / 32 * 32;
    }

    void validate() const {
        if (n_layers < 1 || dim < 1 || n_heads < 1 || vocab < 1)
            throw std::invalid_argument("config: layers/dim/heads/vocab must be positive");
        if (dim % n_heads != 0) throw std::invalid_argument("config: dim not divisible by heads");
        if (ffn_hidden() < dim) throw std::invalid_argument("config: ffn hidden below dim");
        if (k < 1 || k > dim) throw std::invalid_argument("config: compression factor out of range");
        if (!(mlp_threshold > 0.0f && mlp_threshold < 1.0f))
            throw std::invalid_argument("config: mlp_threshold out of (0,1)");
        if (!(quant_percentile > 0.0f && quant_percentile < 1.0f))
            throw std::invalid_argument("config: quant_percentile out of (0,1)");
        if (!(head_policy.p_min > 0.0f && head_policy.p_min <= 1.0f))
            throw std::invalid_argument("config: p_min out of (0,1]");
        if (head_policy.k_min < 1 || head_policy.k_max < head_policy.k_min)
            throw std::invalid_argument("config: cluster count bounds inverted");
        if (embed_cache_capacity < 1)
            throw std::invalid_argument("config: cache capacity must be positive");
        if (head_clusters < 1) throw std::invalid_argument("config: head_clusters must be positive");
    }
};

}  // namespace rwkvl
