#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "rwkvl/runtime.hpp"

using json = nlohmann::json;
using namespace rwkvl;

namespace {

std::vector<uint32_t> parse_ids(const std::string& s, const char* what) {
    std::istringstream in(s);
    std::vector<uint32_t> out;
    long long v;
    while (in >> v) {
        if (v < 0) throw FormatError(std::string(what) + ": negative token id");
        out.push_back(static_cast<uint32_t>(v));
    }
    if (!in.eof()) throw FormatError(std::string(what) + ": non-numeric token id");
    return out;
}

std::vector<uint32_t> read_corpus(const std::string& path) {
    std::ifstream f(path);
    if (!f.good()) throw IoError("corpus: cannot open " + path);
    std::stringstream buf;
    buf << f.rdbuf();
    std::vector<uint32_t> out = parse_ids(buf.str(), "corpus");
    if (out.empty()) throw FormatError("corpus: no tokens in " + path);
    return out;
}

std::vector<uint32_t> synth_corpus(size_t n, uint32_t vocab, uint32_t seed) {
    std::mt19937 rng(seed);
    std::vector<uint32_t> out(n);
    for (auto& t : out) t = rng() % vocab;
    return out;
}

void write_json_file(const std::string& path, const json& j) {
    std::ofstream f(path, std::ios::trunc);
    if (!f.good()) throw IoError("report: cannot open " + path + " for writing");
    f << j.dump(2) << "\n";
    if (!f.good()) throw IoError("report: write failed for " + path);
}

struct OutPaths {
    std::string report, manifest;
};

OutPaths resolve_paths(const std::string& cmd, const std::string& primary,
                       const std::string& report_flag, const std::string& manifest_flag) {
    OutPaths p;
    p.report = report_flag.empty() ? primary + "." + cmd + ".report.json" : report_flag;
    p.manifest = manifest_flag.empty() ? primary + "." + cmd + ".manifest.json" : manifest_flag;
    return p;
}

void emit_manifest(const OutPaths& paths, const std::string& cmd, const std::string& model,
                   const json& flags, uint32_t seed, json outputs) {
    outputs["report"] = paths.report;
    json m{{"command", cmd}, {"model", model},   {"config", model},
           {"flags", flags}, {"seed", seed},     {"outputs", outputs}};
    write_json_file(paths.manifest, m);
}

json peaks_json(const MemoryReport& r) {
    json peaks;
    for (size_t i = 0; i < kNumMemTags; i++)
        peaks[mem_tag_name(static_cast<MemTag>(i))] = r.peak[i];
    return peaks;
}

std::vector<NamedTensor> read_all_tensors(const ModelFile& file) {
    std::vector<NamedTensor> out;
    for (const TensorEntry& e : file.dir().entries) {
        NamedTensor t;
        t.name = e.name;
        t.dtype = e.dtype;
        t.shape = e.shape;
        t.companion = e.companion;
        switch (e.dtype) {
            case Dtype::f32:
            case Dtype::f16:
                t.floats = e.shape.size() < 2 ? file.fetch_vector(e.name)
                                              : file.fetch_matrix(e.name).data;
                break;
            case Dtype::u32:
                t.u32s = file.fetch_u32(e.name);
                break;
            case Dtype::i8:
                t.i8s = file.fetch_i8(e.name).values;
                break;
            case Dtype::bit1:
                t.bits = file.fetch_bit1(e.name).sign_bits;
                break;
        }
        out.push_back(std::move(t));
    }
    return out;
}

void upsert(std::vector<NamedTensor>& tensors, std::vector<NamedTensor> updates) {
    for (auto& u : updates) {
        auto it = std::find_if(tensors.begin(), tensors.end(),
                               [&](const NamedTensor& t) { return t.name == u.name; });
        if (it != tensors.end())
            *it = std::move(u);
        else
            tensors.push_back(std::move(u));
    }
}

template <typename Pred>
void drop_matching(std::vector<NamedTensor>& tensors, Pred pred) {
    tensors.erase(std::remove_if(tensors.begin(), tensors.end(),
                                 [&](const NamedTensor& t) { return pred(t.name); }),
                  tensors.end());
}

// Next-token cross-entropy over a corpus; with lr > 0 the dense head rows get
// one SGD step per position (softmax regression on the frozen trunk, so small
// steps always lower the loss). Returns the mean CE observed before updates.
double head_ce_epoch(Model& m, const std::vector<uint32_t>& corpus, float lr) {
    std::vector<BlockState> states(m.cfg.n_layers, BlockState::zeros(m.cfg));
    Vector xo_cap;
    ForwardHooks hooks;
    hooks.head_logits = [&](const Vector& xo) {
        xo_cap = xo;
        return matvec_rows(m.head, xo);
    };
    double ce_sum = 0.0;
    size_t count = 0;
    for (size_t t = 0; t + 1 < corpus.size(); t++) {
        Vector logits = forward_token(m, corpus[t], states, hooks);
        const uint32_t target = corpus[t + 1];
        double mx = -1e300;
        for (float v : logits) mx = std::max(mx, double(v));
        double z = 0.0;
        for (float v : logits) z += std::exp(double(v) - mx);
        ce_sum += -(double(logits[target]) - mx - std::log(z));
        count++;
        if (lr > 0.0f) {
            for (size_t r = 0; r < m.cfg.vocab; r++) {
                const double p = std::exp(double(logits[r]) - mx) / z;
                const float coef = lr * static_cast<float>(p - (r == target ? 1.0 : 0.0));
                float* row = m.head.row(r);
                for (size_t j = 0; j < m.cfg.dim; j++) row[j] -= coef * xo_cap[j];
            }
        }
    }
    return ce_sum / double(count);
}

struct AblateFlags {
    bool svd = false, sparsity = false, hh = false, cache = false;
};

AblateFlags parse_ablate(const std::string& csv) {
    AblateFlags a;
    size_t pos = 0;
    while (pos <= csv.size()) {
        size_t comma = csv.find(',', pos);
        if (comma == std::string::npos) comma = csv.size();
        const std::string tok = csv.substr(pos, comma - pos);
        pos = comma + 1;
        if (tok.empty()) continue;
        if (tok == "svd")
            a.svd = true;
        else if (tok == "sparsity")
            a.sparsity = true;
        else if (tok == "hh")
            a.hh = true;
        else if (tok == "cache")
            a.cache = true;
        else
            throw std::invalid_argument("unknown ablation tag '" + tok + "'");
    }
    return a;
}

LoadStrategy parse_strategy(const std::string& s) {
    if (s == "full") return LoadStrategy::full;
    if (s == "layerwise") return LoadStrategy::layerwise;
    throw std::invalid_argument("unknown strategy '" + s + "'");
}

Sampler make_sampler(const std::string& mode, float temperature, size_t top_k, uint32_t seed) {
    Sampler s;
    if (mode == "greedy")
        s.mode = Sampler::Mode::greedy;
    else if (mode == "temperature")
        s.mode = Sampler::Mode::temperature;
    else if (mode == "top_k")
        s.mode = Sampler::Mode::top_k;
    else
        throw std::invalid_argument("unknown sampler '" + mode + "'");
    s.temperature = temperature;
    s.k = top_k;
    s.seed = seed;
    return s;
}

bool file_is_compressed(const ModelFile& file) {
    return file.dir().contains("blk.0.tm.wr.L") || file.dir().contains("blk.0.tm.wk.L") ||
           file.dir().contains("blk.0.tm.wv.L") || file.dir().contains("blk.0.tm.wg.L") ||
           file.dir().contains("blk.0.cm.wr.L");
}

// --- subcommands ---

struct InitToyOpts {
    size_t dim = 64, layers = 2, heads = 2, vocab = 512;
    uint32_t seed = 0;
    std::string out;
    bool toy_train = false;
    size_t train_tokens = 256, train_epochs = 8;
    float train_lr = 0.05f;
    std::string report, manifest;
};

int cmd_init_toy(const InitToyOpts& o) {
    ModelConfig cfg;
    cfg.dim = o.dim;
    cfg.n_layers = o.layers;
    cfg.n_heads = o.heads;
    cfg.vocab = o.vocab;
    cfg.validate();
    Model m = init_model(cfg, o.seed);

    OutPaths paths = resolve_paths("init-toy", o.out, o.report, o.manifest);
    json report{{"dim", o.dim}, {"layers", o.layers}, {"heads", o.heads}, {"vocab", o.vocab}};
    if (o.toy_train) {
        const auto corpus = synth_corpus(o.train_tokens, static_cast<uint32_t>(o.vocab),
                                         o.seed ^ 0x9e3779b9u);
        report["initial_ce"] = head_ce_epoch(m, corpus, 0.0f);
        std::vector<double> per_epoch;
        for (size_t e = 0; e < o.train_epochs; e++)
            per_epoch.push_back(head_ce_epoch(m, corpus, o.train_lr));
        report["final_ce"] = head_ce_epoch(m, corpus, 0.0f);
        report["epoch_ce"] = per_epoch;
    }
    write_model(m, o.out);
    log_at(LogLevel::kInfo, "init-toy: wrote %s", o.out.c_str());

    write_json_file(paths.report, report);
    json flags{{"dim", o.dim},     {"layers", o.layers},
               {"heads", o.heads}, {"vocab", o.vocab},
               {"out", o.out},     {"toy_train", o.toy_train}};
    emit_manifest(paths, "init-toy", o.out, flags, o.seed, {{"model", o.out}});
    return 0;
}

struct CompressOpts {
    std::string in, out, targets = "tm_r,tm_k,tm_v,tm_g,cm_r";
    size_t k = 8;
    std::string report, manifest;
};

const char* target_name(CompressTarget t) {
    switch (t) {
        case CompressTarget::tm_r: return "tm_r";
        case CompressTarget::tm_k: return "tm_k";
        case CompressTarget::tm_v: return "tm_v";
        case CompressTarget::tm_g: return "tm_g";
        case CompressTarget::cm_r: return "cm_r";
    }
    return "?";
}

int cmd_compress(const CompressOpts& o) {
    const std::set<CompressTarget> targets = parse_targets(o.targets);
    if (targets.empty()) throw std::invalid_argument("compress: no targets given");

    ModelFile file(o.in);
    if (file_is_compressed(file)) throw std::invalid_argument("compress: input already compressed");
    Model m = load_model(file);
    if (o.k < 1 || o.k > m.cfg.dim)
        throw std::invalid_argument("compress: --svd-k out of range for this model");

    json bytes_before;
    {
        std::map<MemTag, uint64_t> by_tag;
        for (const auto& e : file.dir().entries) by_tag[component_of(e.name)] += e.length;
        for (const auto& [tag, b] : by_tag) bytes_before[mem_tag_name(tag)] = b;
    }

    // tail energy sqrt(||W||_F^2 - sum of kept sigma^2), per target per layer
    json tail;
    for (CompressTarget t : targets) {
        std::vector<double> per_layer;
        for (const auto& b : m.blocks) {
            const Matrix* w = nullptr;
            switch (t) {
                case CompressTarget::tm_r: w = std::get_if<Matrix>(&b.wr); break;
                case CompressTarget::tm_k: w = std::get_if<Matrix>(&b.wk); break;
                case CompressTarget::tm_v: w = std::get_if<Matrix>(&b.wv); break;
                case CompressTarget::tm_g: w = std::get_if<Matrix>(&b.wg); break;
                case CompressTarget::cm_r: w = std::get_if<Matrix>(&b.cm_wr); break;
            }
            const size_t r = lowrank_rank(w->rows, o.k);
            SvdFactors f = truncated_svd(*w, r);
            double frob2 = 0.0;
            for (float v : w->data) frob2 += double(v) * double(v);
            double kept = 0.0;
            for (float s : f.sigma) kept += double(s) * double(s);
            per_layer.push_back(std::sqrt(std::max(0.0, frob2 - kept)));
        }
        tail[target_name(t)] = per_layer;
    }

    // carry non-base tensors (predictors, cluster head, ...) through unchanged
    std::set<std::string> base_names;
    for (const auto& t : plan_model_tensors(m)) base_names.insert(t.name);
    std::vector<NamedTensor> extras;
    for (auto& t : read_all_tensors(file))
        if (!base_names.count(t.name)) extras.push_back(std::move(t));

    compress_model(m, o.k, targets);
    write_model(m, o.out, extras);
    log_at(LogLevel::kInfo, "compress: wrote %s (k=%zu)", o.out.c_str(), o.k);

    json bytes_after;
    {
        ModelFile out_file(o.out);
        std::map<MemTag, uint64_t> by_tag;
        for (const auto& e : out_file.dir().entries) by_tag[component_of(e.name)] += e.length;
        for (const auto& [tag, b] : by_tag) bytes_after[mem_tag_name(tag)] = b;
    }

    OutPaths paths = resolve_paths("compress", o.out, o.report, o.manifest);
    json report{{"k", o.k},
                {"targets", o.targets},
                {"bytes_before", bytes_before},
                {"bytes_after", bytes_after},
                {"tail_energy", tail}};
    write_json_file(paths.report, report);
    json flags{{"in", o.in}, {"out", o.out}, {"svd_k", o.k}, {"targets", o.targets}};
    emit_manifest(paths, "compress", o.out, flags, 0, {{"model", o.out}});
    return 0;
}

struct BuildHeadOpts {
    std::string in, out;
    size_t clusters = 0, iters = 50;
    uint32_t seed = 0;
    std::string report, manifest;
};

int cmd_build_head(const BuildHeadOpts& o) {
    ModelFile file(o.in);
    Model m = load_model(file);
    if (o.clusters < 1 || o.clusters > m.cfg.vocab)
        throw std::invalid_argument("build-head: --clusters must be in [1, vocab]");
    const std::string out = o.out.empty() ? o.in : o.out;

    ClusterAssignment a = kmeans_embeddings(m.emb, o.clusters, o.iters, o.seed);
    ClusterHead ch;
    std::mt19937 rng(o.seed + 1);
    ch.h1 = random_weight(rng, m.cfg.dim, o.clusters, m.cfg.dim);

    std::vector<NamedTensor> tensors = read_all_tensors(file);
    drop_matching(tensors, [](const std::string& n) {
        return n == "head.h1" || n == "head.assign" || n.rfind("head.shard.", 0) == 0;
    });
    upsert(tensors, head_tensors(ch, a, m.head));
    write_tensor_file(out, config_to_json(m.cfg), tensors);
    log_at(LogLevel::kInfo, "build-head: %zu clusters into %s", o.clusters, out.c_str());

    OutPaths paths = resolve_paths("build-head", out, o.report, o.manifest);
    json report{{"clusters", o.clusters},
                {"sizes", a.sizes},
                {"distortion", a.distortion}};
    write_json_file(paths.report, report);
    json flags{{"in", o.in}, {"out", out}, {"clusters", o.clusters}, {"iters", o.iters}};
    emit_manifest(paths, "build-head", out, flags, o.seed, {{"model", out}});
    return 0;
}

struct TrainHeadOpts {
    std::string model, corpus;
    size_t epochs = 10;
    float lr = 0.05f;
    uint32_t seed = 0;
    std::string report, manifest;
};

int cmd_train_head(const TrainHeadOpts& o) {
    ModelFile file(o.model);
    if (!file.dir().contains("head.assign"))
        throw IoError("train-head: model has no cluster assignment; run build-head first");
    Model m = load_model(file);
    ClusterAssignment a = load_head_assignment(file);
    const auto corpus = read_corpus(o.corpus);

    ClusterTrainReport rep;
    ClusterHead ch = train_cluster_head(m, corpus, a, o.epochs, o.lr, o.seed, &rep);

    std::vector<NamedTensor> tensors = read_all_tensors(file);
    upsert(tensors, {tensor_f32("head.h1", {ch.h1.rows, ch.h1.cols}, ch.h1.data)});
    write_tensor_file(o.model, config_to_json(m.cfg), tensors);
    log_at(LogLevel::kInfo, "train-head: KL %.4f -> %.4f", rep.initial_kl, rep.final_kl);

    OutPaths paths = resolve_paths("train-head", o.model, o.report, o.manifest);
    json report{{"initial_kl", rep.initial_kl},
                {"final_kl", rep.final_kl},
                {"epoch_kl", rep.epoch_kl}};
    write_json_file(paths.report, report);
    json flags{{"model", o.model}, {"corpus", o.corpus}, {"epochs", o.epochs}, {"lr", o.lr}};
    emit_manifest(paths, "train-head", o.model, flags, o.seed, {{"model", o.model}});
    return 0;
}

struct RecordActsOpts {
    std::string model, corpus, out;
    size_t layer = 0, samples = 1000;
    uint32_t seed = 0;
    std::string report, manifest;
};

int cmd_record_acts(const RecordActsOpts& o) {
    ModelFile file(o.model);
    Model m = load_model(file);
    if (o.layer >= m.cfg.n_layers)
        throw std::invalid_argument("record-acts: --layer out of range");
    const auto corpus = o.corpus.empty()
                            ? synth_corpus(o.samples, static_cast<uint32_t>(m.cfg.vocab), o.seed)
                            : read_corpus(o.corpus);

    ActivationDataset ds = record_activations(m, corpus, o.layer);
    save_dataset(ds, o.out);

    double density = 0.0;
    for (const auto& s : ds.samples) density += double(s.mask.popcount()) / double(s.mask.len);
    density /= double(ds.samples.size());
    log_at(LogLevel::kInfo, "record-acts: %zu records, mean density %.3f", ds.samples.size(),
           density);

    OutPaths paths = resolve_paths("record-acts", o.out, o.report, o.manifest);
    json report{{"records", ds.samples.size()},
                {"dim", ds.dim},
                {"hidden", ds.hidden},
                {"mean_density", density}};
    write_json_file(paths.report, report);
    json flags{{"model", o.model}, {"layer", o.layer}, {"samples", o.samples}, {"out", o.out}};
    emit_manifest(paths, "record-acts", o.model, flags, o.seed, {{"dataset", o.out}});
    return 0;
}

struct TrainPredictorOpts {
    std::string model, dataset;
    size_t layer = 0, epochs = 50, hidden = 0;
    float lr = 0.5f;
    uint32_t seed = 0;
    std::string report, manifest;
};

int cmd_train_predictor(const TrainPredictorOpts& o) {
    ModelFile file(o.model);
    Model m = load_model(file);
    if (o.layer >= m.cfg.n_layers)
        throw std::invalid_argument("train-predictor: --layer out of range");
    ActivationDataset ds = load_dataset(o.dataset);
    if (ds.dim != m.cfg.dim || ds.hidden != m.cfg.ffn_hidden())
        throw std::invalid_argument("train-predictor: dataset shape does not match model");

    TrainReport rep;
    EnsemblePredictor ens;
    ens.mlp = train_mlp_predictor(ds, o.epochs, o.lr, o.seed, &rep, o.hidden, m.cfg.mlp_threshold);
    ens.quant = make_quant_predictor(m.blocks[o.layer].cm_wk, m.cfg.quant_percentile);

    auto metrics_json = [&](const PredictorMetrics& pm) {
        return json{{"precision", pm.precision}, {"recall", pm.recall}, {"density", pm.density}};
    };
    const PredictorMetrics mm = predictor_metrics(ens.mlp, ds);
    const PredictorMetrics qm = predictor_metrics(ens.quant, ds);
    const PredictorMetrics em = predictor_metrics(ens, ds);

    std::vector<NamedTensor> tensors = read_all_tensors(file);
    upsert(tensors, predictor_tensors(o.layer, ens));
    write_tensor_file(o.model, config_to_json(m.cfg), tensors);
    log_at(LogLevel::kInfo, "train-predictor: layer %zu recall %.3f precision %.3f", o.layer,
           em.recall, em.precision);

    OutPaths paths = resolve_paths("train-predictor", o.model, o.report, o.manifest);
    json report{{"initial_loss", rep.initial_loss},
                {"final_loss", rep.final_loss},
                {"epoch_loss", rep.epoch_loss},
                {"metrics",
                 {{"mlp", metrics_json(mm)}, {"quant", metrics_json(qm)},
                  {"ensemble", metrics_json(em)}}},
                {"thresholds",
                 {{"mlp", m.cfg.mlp_threshold}, {"percentile", m.cfg.quant_percentile}}}};
    write_json_file(paths.report, report);
    json flags{{"model", o.model}, {"dataset", o.dataset}, {"layer", o.layer},
               {"epochs", o.epochs}, {"lr", o.lr}};
    emit_manifest(paths, "train-predictor", o.model, flags, o.seed, {{"model", o.model}});
    return 0;
}

struct GenerateOpts {
    std::string model, prompt_ids, sampler = "greedy", strategy = "full", ablate;
    size_t n = 16, top_k = 40;
    float temperature = 1.0f;
    uint32_t seed = 0;
    std::string report, manifest;
};

json techniques_json(const TechniqueSet& t, bool svd_active) {
    return json{{"svd", svd_active},
                {"sparsity", t.sparse_ffn},
                {"hh", t.hier_head},
                {"cache", t.embed_cache}};
}

int cmd_generate(const GenerateOpts& o) {
    const AblateFlags abl = parse_ablate(o.ablate);
    ModelFile file(o.model);
    const bool compressed = file_is_compressed(file);
    if (abl.svd && compressed)
        throw std::invalid_argument(
            "generate: --ablate svd needs a dense model file; this one is compressed");

    const TechniqueSet tech{!abl.cache, !abl.sparsity, !abl.hh};
    Workload w;
    w.prompt = parse_ids(o.prompt_ids, "prompt-ids");
    w.n_generate = o.n;
    w.sampler = make_sampler(o.sampler, o.temperature, o.top_k, o.seed);

    RunResult r = run_with_strategy(file, w, parse_strategy(o.strategy), tech);
    for (size_t i = 0; i < r.tokens.size(); i++)
        std::cout << r.tokens[i] << (i + 1 < r.tokens.size() ? ' ' : '\n');

    OutPaths paths = resolve_paths("generate", o.model, o.report, o.manifest);
    json report{{"strategy", o.strategy},
                {"techniques", techniques_json(tech, compressed && !abl.svd)},
                {"peak_bytes", peaks_json(r.memory)},
                {"total_peak", r.memory.total_peak},
                {"sum_of_peaks", r.memory.sum_of_peaks},
                {"blocks_group_peak", r.memory.blocks_group_peak}};
    write_json_file(paths.report, report);
    json flags{{"model", o.model},       {"prompt_ids", o.prompt_ids}, {"n", o.n},
               {"sampler", o.sampler},   {"strategy", o.strategy},     {"ablate", o.ablate}};
    emit_manifest(paths, "generate", o.model, flags, o.seed, {{"memory_report", paths.report}});
    return 0;
}

struct BenchOpts {
    std::string model, prompt_ids = "0", strategy = "full", ablate, out;
    size_t tokens = 64, repeat = 3;
    uint32_t seed = 0;
    std::string report, manifest;
};

int cmd_bench(const BenchOpts& o) {
    const AblateFlags abl = parse_ablate(o.ablate);
    ModelFile file(o.model);
    const bool compressed = file_is_compressed(file);
    if (abl.svd && compressed)
        throw std::invalid_argument(
            "bench: --ablate svd needs a dense model file; this one is compressed");
    const TechniqueSet tech{!abl.cache, !abl.sparsity, !abl.hh};

    Workload w;
    w.prompt = parse_ids(o.prompt_ids, "prompt-ids");
    w.n_generate = o.tokens;
    w.sampler = make_sampler("greedy", 1.0f, 40, o.seed);

    std::vector<double> raw_tps;
    MemoryReport mem{};
    const LoadStrategy strategy = parse_strategy(o.strategy);
    for (size_t rep = 0; rep < std::max<size_t>(1, o.repeat); rep++) {
        const auto t0 = std::chrono::steady_clock::now();
        RunResult r = run_with_strategy(file, w, strategy, tech);
        const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
        raw_tps.push_back(double(o.tokens) / std::max(dt.count(), 1e-9));
        if (rep == 0) mem = r.memory;
    }
    std::vector<double> sorted = raw_tps;
    std::sort(sorted.begin(), sorted.end());
    const size_t mid = sorted.size() / 2;
    const double median =
        sorted.size() % 2 ? sorted[mid] : 0.5 * (sorted[mid - 1] + sorted[mid]);

    json report{{"model", o.model},
                {"strategy", o.strategy},
                {"tokens", o.tokens},
                {"repeat", raw_tps.size()},
                {"raw_tps", raw_tps},
                {"median_tps", median},
                {"techniques", techniques_json(tech, compressed && !abl.svd)},
                {"peak_bytes", peaks_json(mem)},
                {"total_peak", mem.total_peak},
                {"blocks_group_peak", mem.blocks_group_peak}};
    if (o.out.empty())
        std::cout << report.dump(2) << "\n";
    else
        write_json_file(o.out, report);

    OutPaths paths = resolve_paths("bench", o.out.empty() ? o.model : o.out, o.report, o.manifest);
    write_json_file(paths.report, report);
    json flags{{"model", o.model}, {"tokens", o.tokens}, {"strategy", o.strategy},
               {"repeat", o.repeat}, {"ablate", o.ablate}};
    emit_manifest(paths, "bench", o.model, flags, o.seed,
                  {{"bench_report", o.out.empty() ? paths.report : o.out}});
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"RWKV serving toolkit: compression, sparsity, clustered heads, bounded loading"};
    app.require_subcommand(1);

    InitToyOpts it;
    CLI::App* init = app.add_subcommand("init-toy", "Write a randomly initialized toy model");
    init->add_option("--dim", it.dim);
    init->add_option("--layers", it.layers);
    init->add_option("--heads", it.heads);
    init->add_option("--vocab", it.vocab);
    init->add_option("--seed", it.seed);
    init->add_option("--out", it.out)->required();
    init->add_flag("--toy-train", it.toy_train, "Fit the dense head on a synthetic corpus");
    init->add_option("--train-tokens", it.train_tokens);
    init->add_option("--train-epochs", it.train_epochs);
    init->add_option("--train-lr", it.train_lr);
    init->add_option("--report", it.report);
    init->add_option("--manifest", it.manifest);

    CompressOpts co;
    CLI::App* comp = app.add_subcommand("compress", "Factor projections with truncated SVD");
    comp->add_option("--in", co.in)->required();
    comp->add_option("--out", co.out)->required();
    comp->add_option("--svd-k", co.k)->required();
    comp->add_option("--targets", co.targets);
    comp->add_option("--report", co.report);
    comp->add_option("--manifest", co.manifest);

    BuildHeadOpts bh;
    CLI::App* build = app.add_subcommand("build-head", "Cluster embeddings and shard the head");
    build->add_option("--in", bh.in)->required();
    build->add_option("--out", bh.out);
    build->add_option("--clusters", bh.clusters)->required();
    build->add_option("--iters", bh.iters);
    build->add_option("--seed", bh.seed);
    build->add_option("--report", bh.report);
    build->add_option("--manifest", bh.manifest);

    TrainHeadOpts th;
    CLI::App* thead = app.add_subcommand("train-head", "Distill the cluster head from the dense head");
    thead->add_option("--model", th.model)->required();
    thead->add_option("--corpus", th.corpus)->required();
    thead->add_option("--epochs", th.epochs);
    thead->add_option("--lr", th.lr);
    thead->add_option("--seed", th.seed);
    thead->add_option("--report", th.report);
    thead->add_option("--manifest", th.manifest);

    RecordActsOpts ra;
    CLI::App* rec = app.add_subcommand("record-acts", "Record FFN activation masks to a dataset");
    rec->add_option("--model", ra.model)->required();
    rec->add_option("--corpus", ra.corpus);
    rec->add_option("--layer", ra.layer)->required();
    rec->add_option("--samples", ra.samples);
    rec->add_option("--seed", ra.seed);
    rec->add_option("--out", ra.out)->required();
    rec->add_option("--report", ra.report);
    rec->add_option("--manifest", ra.manifest);

    TrainPredictorOpts tp;
    CLI::App* tpred = app.add_subcommand("train-predictor", "Train the sparsity predictor ensemble");
    tpred->add_option("--model", tp.model)->required();
    tpred->add_option("--dataset", tp.dataset)->required();
    tpred->add_option("--layer", tp.layer)->required();
    tpred->add_option("--epochs", tp.epochs);
    tpred->add_option("--lr", tp.lr);
    tpred->add_option("--hidden", tp.hidden);
    tpred->add_option("--seed", tp.seed);
    tpred->add_option("--report", tp.report);
    tpred->add_option("--manifest", tp.manifest);

    GenerateOpts ge;
    CLI::App* gen = app.add_subcommand("generate", "Generate token ids from a prompt");
    gen->add_option("--model", ge.model)->required();
    gen->add_option("--prompt-ids", ge.prompt_ids);
    gen->add_option("--n", ge.n);
    gen->add_option("--sampler", ge.sampler);
    gen->add_option("--temperature", ge.temperature);
    gen->add_option("--top-k", ge.top_k);
    gen->add_option("--seed", ge.seed);
    gen->add_option("--strategy", ge.strategy);
    gen->add_option("--ablate", ge.ablate);
    gen->add_option("--report", ge.report);
    gen->add_option("--manifest", ge.manifest);

    BenchOpts be;
    CLI::App* bench = app.add_subcommand("bench", "Measure tokens/s and peak memory");
    bench->add_option("--model", be.model)->required();
    bench->add_option("--tokens", be.tokens);
    bench->add_option("--prompt-ids", be.prompt_ids);
    bench->add_option("--strategy", be.strategy);
    bench->add_option("--repeat", be.repeat);
    bench->add_option("--ablate", be.ablate);
    bench->add_option("--seed", be.seed);
    bench->add_option("--out", be.out);
    bench->add_option("--report", be.report);
    bench->add_option("--manifest", be.manifest);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*init) return cmd_init_toy(it);
        if (*comp) return cmd_compress(co);
        if (*build) return cmd_build_head(bh);
        if (*thead) return cmd_train_head(th);
        if (*rec) return cmd_record_acts(ra);
        if (*tpred) return cmd_train_predictor(tp);
        if (*gen) return cmd_generate(ge);
        if (*bench) return cmd_bench(be);
    } catch (const TrainingError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::out_of_range& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
