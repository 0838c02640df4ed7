#include "rwkvl/model.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "support/oracles.hpp"

using namespace rwkvl;

namespace {

ModelConfig toy_config(size_t layers = 2, size_t dim = 32, size_t heads = 2, size_t vocab = 64) {
    ModelConfig cfg;
    cfg.n_layers = layers;
    cfg.dim = dim;
    cfg.n_heads = heads;
    cfg.vocab = vocab;
    return cfg;
}

// Independent double-precision re-implementation of one recurrent step,
// written as straight loops against the stated update rule.
struct UnrollOracle {
    size_t d, heads, hd;
    std::vector<double> prev_x;
    std::vector<std::vector<double>> wkv;  // per head, hd*hd

    explicit UnrollOracle(const ModelConfig& cfg)
        : d(cfg.dim), heads(cfg.n_heads), hd(cfg.head_dim()), prev_x(d, 0.0),
          wkv(heads, std::vector<double>(hd * hd, 0.0)) {}

    static std::vector<double> project(const std::vector<double>& x, const Matrix& w) {
        std::vector<double> out(w.cols, 0.0);
        for (size_t i = 0; i < w.rows; i++)
            for (size_t j = 0; j < w.cols; j++) out[j] += x[i] * double(w.at(i, j));
        return out;
    }

    std::vector<double> step(const Vector& xin, const BlockWeights& w) {
        std::vector<double> x(xin.begin(), xin.end());
        auto shift = [&](const Vector& mix) {
            std::vector<double> out(d);
            for (size_t i = 0; i < d; i++)
                out[i] = double(mix[i]) * x[i] + (1.0 - double(mix[i])) * prev_x[i];
            return out;
        };
        auto r = project(shift(w.mix_r), std::get<Matrix>(w.wr));
        auto k = project(shift(w.mix_k), std::get<Matrix>(w.wk));
        auto v = project(shift(w.mix_v), std::get<Matrix>(w.wv));
        auto g = project(shift(w.mix_g), std::get<Matrix>(w.wg));

        std::vector<double> out(d, 0.0);
        for (size_t h = 0; h < heads; h++) {
            const size_t base = h * hd;
            for (size_t j = 0; j < hd; j++) {
                double acc = 0.0;
                for (size_t i = 0; i < hd; i++) {
                    const double bonus = double(w.bonus[base + i]) * k[base + i] * v[base + j];
                    acc += r[base + i] * (wkv[h][i * hd + j] + bonus);
                }
                out[base + j] = acc;
            }
            for (size_t i = 0; i < hd; i++) {
                const double decay = std::exp(-std::exp(double(w.decay_raw[base + i])));
                for (size_t j = 0; j < hd; j++)
                    wkv[h][i * hd + j] = decay * wkv[h][i * hd + j] + k[base + i] * v[base + j];
            }
        }

        for (size_t h = 0; h < heads; h++) {
            double mean = 0.0;
            for (size_t j = 0; j < hd; j++) mean += out[h * hd + j];
            mean /= double(hd);
            double var = 0.0;
            for (size_t j = 0; j < hd; j++) {
                const double dv = out[h * hd + j] - mean;
                var += dv * dv;
            }
            var /= double(hd);
            const double inv = 1.0 / std::sqrt(var + 1e-5);
            for (size_t j = 0; j < hd; j++) out[h * hd + j] = (out[h * hd + j] - mean) * inv;
        }
        for (size_t i = 0; i < d; i++) out[i] *= g[i] / (1.0 + std::exp(-g[i]));
        auto y = project(out, w.wo);
        prev_x = x;
        return y;
    }
};

}  // namespace

TEST(Config, DefaultsValidate) {
    ModelConfig cfg = toy_config();
    cfg.validate();
    EXPECT_EQ(cfg.vocab, 64u);
    EXPECT_EQ(ModelConfig{}.vocab, 65536u);
    EXPECT_EQ(ModelConfig{}.embed_cache_capacity, 1000u);
}

TEST(Config, FfnHiddenRoundsUpToMultipleOf32) {
    ModelConfig cfg = toy_config(1, 64, 2);
    EXPECT_EQ(cfg.ffn_hidden(), 224u);
    cfg.dim = 100;
    EXPECT_EQ(cfg.ffn_hidden(), 352u);
    cfg.dim = 32;
    EXPECT_EQ(cfg.ffn_hidden(), 128u);
}

TEST(Config, InvalidValuesThrow) {
    ModelConfig cfg = toy_config(2, 30, 4);
    EXPECT_THROW(cfg.validate(), std::invalid_argument);  // 30 % 4 != 0
    cfg = toy_config();
    cfg.k = cfg.dim + 1;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg = toy_config();
    cfg.mlp_threshold = 1.0f;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg = toy_config(2, 64, 2);
    cfg.ffn_mult = 0.4f;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);  // hidden below dim
}

TEST(TimeMix, ZeroOutputProjectionGivesZero) {
    ModelConfig cfg = toy_config(1, 16, 2);
    Model m = init_model(cfg, 3);
    BlockWeights& w = m.blocks[0];
    w.wo = Matrix(16, 16);
    BlockState st = BlockState::zeros(cfg);
    st.tm_prev_x = oracle::random_vector(16, 4);
    Vector y = time_mix_forward(oracle::random_vector(16, 5), st, w, cfg.n_heads);
    for (float v : y) EXPECT_EQ(v, 0.0f);
}

TEST(TimeMix, TwoStepsMatchHandUnroll) {
    ModelConfig cfg = toy_config(1, 8, 2);
    Model m = init_model(cfg, 6);
    BlockWeights& w = m.blocks[0];
    BlockState st = BlockState::zeros(cfg);
    UnrollOracle oracle(cfg);

    for (uint32_t step = 0; step < 2; step++) {
        Vector x = oracle::random_vector(8, 7 + step);
        Vector y = time_mix_forward(x, st, w, cfg.n_heads);
        auto want = oracle.step(x, w);
        for (size_t i = 0; i < 8; i++) EXPECT_NEAR(y[i], want[i], 1e-5) << "step " << step;
    }
    for (size_t h = 0; h < cfg.n_heads; h++)
        for (size_t i = 0; i < 4; i++)
            for (size_t j = 0; j < 4; j++)
                EXPECT_NEAR(st.wkv[h].at(i, j), oracle.wkv[h][i * 4 + j], 1e-5);
}

TEST(TimeMix, ZeroDecayStateIsPureOuterProduct) {
    ModelConfig cfg = toy_config(1, 8, 2);
    Model m = init_model(cfg, 8);
    BlockWeights& w = m.blocks[0];
    for (auto& v : w.decay_raw) v = 10.0f;  // exp(-exp(10)) underflows to exactly 0
    EXPECT_EQ(effective_decay(10.0f), 0.0f);

    Vector x = oracle::random_vector(8, 9);
    BlockState a = BlockState::zeros(cfg);
    Vector ya = time_mix_forward(x, a, w, cfg.n_heads);
    BlockState b = BlockState::zeros(cfg);
    Vector yb = time_mix_forward(x, b, w, cfg.n_heads);
    EXPECT_EQ(ya, yb);  // fresh zero-state runs are identical

    // with zero decay the state is exactly this step's k^T v, no history
    Vector k = matvec(token_shift(x, Vector(8, 0.0f), w.mix_k), std::get<Matrix>(w.wk));
    Vector v = matvec(token_shift(x, Vector(8, 0.0f), w.mix_v), std::get<Matrix>(w.wv));
    for (size_t h = 0; h < 2; h++)
        for (size_t i = 0; i < 4; i++)
            for (size_t j = 0; j < 4; j++)
                EXPECT_FLOAT_EQ(a.wkv[h].at(i, j), k[h * 4 + i] * v[h * 4 + j]);
}

TEST(ChannelMix, NonPositivePreactivationsGiveZero) {
    ModelConfig cfg = toy_config(1, 16, 2);
    Model m = init_model(cfg, 10);
    BlockWeights& w = m.blocks[0];
    for (auto& v : w.cm_wk.data) v = -std::fabs(v) - 0.01f;
    for (auto& v : w.mix_cm_k) v = 1.0f;
    BlockState st = BlockState::zeros(cfg);
    Vector x = oracle::random_vector(16, 11, 0.05f, 1.0f);  // positive input
    Vector y = channel_mix_forward(x, st, w, nullptr);
    for (float v : y) EXPECT_EQ(v, 0.0f);
    EXPECT_EQ(st.cm_prev_x, x);
}

TEST(ChannelMix, ZeroInputZeroStateGivesZero) {
    ModelConfig cfg = toy_config(1, 16, 2);
    Model m = init_model(cfg, 12);
    BlockState st = BlockState::zeros(cfg);
    Vector y = channel_mix_forward(Vector(16, 0.0f), st, m.blocks[0], nullptr);
    for (float v : y) EXPECT_EQ(v, 0.0f);
}

TEST(ChannelMix, GroundTruthMaskMatchesDenseOnThousandCases) {
    ModelConfig cfg = toy_config(1, 32, 2);
    Model m = init_model(cfg, 13);
    const BlockWeights& w = m.blocks[0];
    const size_t f = cfg.ffn_hidden();
    std::mt19937 rng(14);
    for (int trial = 0; trial < 1000; trial++) {
        Vector x = oracle::random_vector(32, rng());
        Vector prev = oracle::random_vector(32, rng());
        BlockState dense_st = BlockState::zeros(cfg);
        dense_st.cm_prev_x = prev;
        BlockState sparse_st = dense_st;

        // ground-truth nonzero pattern from an independent preactivation pass
        Vector xk(32);
        for (size_t i = 0; i < 32; i++)
            xk[i] = w.mix_cm_k[i] * x[i] + (1.0f - w.mix_cm_k[i]) * prev[i];
        Bitmask mask(f);
        for (size_t i = 0; i < f; i++) {
            float pre = 0.0f;
            for (size_t j = 0; j < 32; j++) pre += w.cm_wk.at(i, j) * xk[j];
            if (pre > 0.0f) mask.set(i, true);
        }

        Vector yd = channel_mix_forward(x, dense_st, w, nullptr);
        Vector ys = channel_mix_forward(x, sparse_st, w, &mask);
        for (size_t i = 0; i < 32; i++) EXPECT_NEAR(yd[i], ys[i], 1e-6);
    }
}

TEST(Forward, DeterministicAcrossResets) {
    Model m = init_model(toy_config(2, 64, 4, 512), 15);
    std::vector<BlockState> s1(2, BlockState::zeros(m.cfg));
    std::vector<BlockState> s2(2, BlockState::zeros(m.cfg));
    Vector a, b;
    for (uint32_t t : {0u, 7u, 3u}) a = forward_token(m, t, s1);
    for (uint32_t t : {0u, 7u, 3u}) b = forward_token(m, t, s2);
    EXPECT_EQ(a, b);
}

TEST(Forward, LogitsLengthIsVocab) {
    Model m = init_model(toy_config(1, 16, 2, 37), 16);
    std::vector<BlockState> st(1, BlockState::zeros(m.cfg));
    EXPECT_EQ(forward_token(m, 5, st).size(), 37u);
}

TEST(Forward, OutOfRangeTokenThrows) {
    Model m = init_model(toy_config(1, 16, 2, 37), 17);
    std::vector<BlockState> st(1, BlockState::zeros(m.cfg));
    EXPECT_THROW(forward_token(m, 37, st), std::invalid_argument);
}

TEST(Forward, StateBytesConstantInSequenceLength) {
    Model m = init_model(toy_config(2, 32, 2, 64), 18);
    std::vector<BlockState> st(2, BlockState::zeros(m.cfg));
    const size_t before = st[0].bytes() + st[1].bytes();
    forward_token(m, 1, st);
    const size_t after_one = st[0].bytes() + st[1].bytes();
    std::mt19937 rng(19);
    for (int i = 0; i < 1000; i++) forward_token(m, rng() % 64, st);
    const size_t after_many = st[0].bytes() + st[1].bytes();
    EXPECT_EQ(before, after_one);
    EXPECT_EQ(before, after_many);
}

TEST(Compress, FullRankFactorsLeaveOutputsUnchanged) {
    Model dense = init_model(toy_config(2, 32, 2, 64), 20);
    Model fact = dense;
    compress_model(fact, 1, all_compress_targets());
    EXPECT_TRUE(fact.compressed);
    std::vector<BlockState> s1(2, BlockState::zeros(dense.cfg));
    std::vector<BlockState> s2(2, BlockState::zeros(fact.cfg));
    for (uint32_t t : {3u, 1u, 4u, 1u, 5u}) {
        Vector a = forward_token(dense, t, s1);
        Vector b = forward_token(fact, t, s2);
        for (size_t i = 0; i < a.size(); i++) EXPECT_NEAR(a[i], b[i], 1e-5);
    }
}

TEST(Compress, EmptyTargetSetIsNoOp) {
    Model m = init_model(toy_config(1, 16, 2, 32), 21);
    compress_model(m, 8, {});
    EXPECT_FALSE(m.compressed);
    EXPECT_TRUE(projection_is_dense(m.blocks[0].wr));
}

TEST(Compress, SquareProjectionParamsDropByHalfK) {
    Model m = init_model(toy_config(1, 64, 2, 32), 22);
    const size_t dense_params = projection_params(m.blocks[0].wr);
    compress_model(m, 8, all_compress_targets());
    for (const Projection* p : {&m.blocks[0].wr, &m.blocks[0].wk, &m.blocks[0].wv,
                                &m.blocks[0].wg, &m.blocks[0].cm_wr}) {
        EXPECT_FALSE(projection_is_dense(*p));
        EXPECT_EQ(projection_params(*p), 2 * 64 * 8u);
        EXPECT_EQ(dense_params / projection_params(*p), 4u);  // k/2 at k=8
    }
}

TEST(Compress, OutputProjectionIsRejectedAsTarget) {
    EXPECT_THROW(parse_targets("wo"), std::invalid_argument);
    EXPECT_THROW(parse_targets("tm_r,bogus"), std::invalid_argument);
    EXPECT_EQ(parse_targets("tm_r,tm_k,tm_v,tm_g,cm_r"), all_compress_targets());
}

TEST(Generate, ZeroCountGivesEmpty) {
    Model m = init_model(toy_config(1, 16, 2, 32), 23);
    EXPECT_TRUE(generate(m, {1, 2}, 0, Sampler{}).empty());
}

TEST(Generate, GreedyIsReproducible) {
    Model m = init_model(toy_config(2, 32, 2, 64), 24);
    auto a = generate(m, {5, 9}, 12, Sampler{});
    auto b = generate(m, {5, 9}, 12, Sampler{});
    EXPECT_EQ(a, b);
    EXPECT_EQ(a.size(), 12u);
}

TEST(Generate, EmptyPromptStartsFromTokenZero) {
    Model m = init_model(toy_config(1, 16, 2, 32), 25);
    EXPECT_EQ(generate(m, {}, 8, Sampler{}), generate(m, {0}, 8, Sampler{}));
}

TEST(Generate, SeededTemperatureSamplingIsReproducible) {
    Model m = init_model(toy_config(1, 16, 2, 32), 26);
    Sampler s;
    s.mode = Sampler::Mode::temperature;
    s.temperature = 0.9f;
    s.seed = 77;
    EXPECT_EQ(generate(m, {2}, 10, s), generate(m, {2}, 10, s));
    Sampler tk = s;
    tk.mode = Sampler::Mode::top_k;
    tk.k = 5;
    EXPECT_EQ(generate(m, {2}, 10, tk), generate(m, {2}, 10, tk));
}

TEST(Sparsity, RandomInitSitsNearHalf) {
    Model m = init_model(toy_config(2, 64, 2, 256), 27);
    std::mt19937 rng(28);
    std::vector<uint32_t> corpus(400);
    for (auto& t : corpus) t = rng() % 256;
    auto ratios = measure_ffn_sparsity(m, corpus);
    ASSERT_EQ(ratios.size(), 2u);
    for (double r : ratios) {
        EXPECT_GE(r, 0.45);
        EXPECT_LE(r, 0.55);
    }
}

TEST(Sparsity, AllNegativeKeyRowsOnPositiveInputsSaturate) {
    Model m = init_model(toy_config(2, 32, 2, 64), 29);
    for (auto& b : m.blocks) {
        for (auto& v : b.cm_wk.data) v = -std::fabs(v) - 0.01f;
        b.ln2_b.assign(32, 10.0f);  // shifts the mixed input fully positive
    }
    std::vector<uint32_t> corpus = {1, 2, 3, 4, 5, 6, 7, 8};
    for (double r : measure_ffn_sparsity(m, corpus)) EXPECT_EQ(r, 1.0);
}

TEST(Sparsity, EmptyCorpusThrows) {
    Model m = init_model(toy_config(1, 16, 2, 32), 30);
    EXPECT_THROW(measure_ffn_sparsity(m, {}), std::invalid_argument);
}
