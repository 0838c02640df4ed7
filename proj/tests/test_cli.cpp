#include <gtest/gtest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "json.hpp"
#include "rwkvl/runtime.hpp"

using namespace rwkvl;
using nlohmann::json;

namespace {

struct CmdResult {
    int exit_code = -1;
    std::string out;
};

CmdResult run_cli(const std::string& args) {
    const char* bin = std::getenv("RWKVL_CLI");
    EXPECT_NE(bin, nullptr) << "RWKVL_CLI must point at the cli binary";
    CmdResult r;
    const std::string cmd = std::string(bin) + " " + args + " 2>/dev/null";
    FILE* p = popen(cmd.c_str(), "r");
    EXPECT_NE(p, nullptr);
    char buf[4096];
    size_t n;
    while ((n = fread(buf, 1, sizeof(buf), p)) > 0) r.out.append(buf, n);
    const int status = pclose(p);
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string dir_path() { return testing::TempDir() + "rwkvl_cli/"; }

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    EXPECT_TRUE(f.good()) << path;
    return std::string(std::istreambuf_iterator<char>(f), {});
}

json load_json(const std::string& path) { return json::parse(slurp(path)); }

json schema_root() {
    static const json schema = [] {
        const auto p = std::filesystem::path(__FILE__).parent_path().parent_path() / "docs" /
                       "report_schema.json";
        return json::parse(std::ifstream(p));
    }();
    return schema;
}

// Minimal structural validator for the subset of JSON Schema the shipped
// schema uses: $ref into $defs, type, required, properties, items.
void check_schema(const json& value, const json& schema, const std::string& where) {
    if (schema.contains("$ref")) {
        const std::string ref = schema["$ref"];
        const std::string prefix = "#/$defs/";
        ASSERT_EQ(ref.rfind(prefix, 0), 0u) << where;
        check_schema(value, schema_root()["$defs"][ref.substr(prefix.size())], where);
        return;
    }
    if (schema.contains("type")) {
        const std::string t = schema["type"];
        if (t == "object") EXPECT_TRUE(value.is_object()) << where;
        if (t == "array") EXPECT_TRUE(value.is_array()) << where;
        if (t == "string") EXPECT_TRUE(value.is_string()) << where;
        if (t == "integer") EXPECT_TRUE(value.is_number_integer()) << where;
        if (t == "number") EXPECT_TRUE(value.is_number()) << where;
        if (t == "boolean") EXPECT_TRUE(value.is_boolean()) << where;
    }
    if (schema.contains("required"))
        for (const auto& key : schema["required"])
            ASSERT_TRUE(value.contains(key.get<std::string>()))
                << where << " missing " << key.get<std::string>();
    if (schema.contains("properties"))
        for (const auto& [key, sub] : schema["properties"].items())
            if (value.contains(key)) check_schema(value[key], sub, where + "." + key);
    if (schema.contains("items") && value.is_array())
        for (const auto& item : value) check_schema(item, schema["items"], where + "[]");
}

void validate_as(const json& value, const std::string& def, const std::string& where) {
    ASSERT_TRUE(schema_root()["$defs"].contains(def)) << def;
    check_schema(value, schema_root()["$defs"][def], where);
}

// One pipeline shared by the suite: plain dense toy, dense copy with head +
// predictor tensors, and a compressed copy of the same.
class CliPipeline : public ::testing::Test {
  protected:
    static void SetUpTestSuite() {
        std::filesystem::create_directories(dir_path());
        const std::string d = dir_path();
        toy_ = d + "toy.rwkvl";
        full_ = d + "toy_full.rwkvl";
        comp_ = d + "toy_comp.rwkvl";
        corpus_ = d + "corpus.txt";

        {
            std::ofstream f(corpus_);
            std::mt19937 rng(301);
            for (int i = 0; i < 300; i++) f << rng() % 64 << (i % 20 == 19 ? '\n' : ' ');
        }

        auto must = [](const std::string& args) {
            CmdResult r = run_cli(args);
            ASSERT_EQ(r.exit_code, 0) << args;
        };
        must("init-toy --dim 32 --layers 3 --heads 2 --vocab 64 --seed 7 --out " + toy_);
        must("compress --in " + toy_ + " --out " + comp_ + " --svd-k 8");

        for (const std::string& m : {full_, comp_}) {
            if (m == full_) {
                std::ofstream(full_, std::ios::binary) << slurp(toy_);
            }
            must("build-head --in " + m + " --clusters 6 --seed 3");
            must("train-head --model " + m + " --corpus " + corpus_ +
                 " --epochs 5 --lr 0.05 --seed 3");
            for (int layer = 0; layer < 3; layer++) {
                const std::string ds = dir_path() + "acts" + std::to_string(layer) +
                                       (m == full_ ? "f" : "c") + ".bin";
                must("record-acts --model " + m + " --layer " + std::to_string(layer) +
                     " --samples 150 --seed 5 --out " + ds);
                must("train-predictor --model " + m + " --dataset " + ds + " --layer " +
                     std::to_string(layer) + " --epochs 30 --lr 0.4 --seed 9");
            }
        }
    }

    static std::string toy_, full_, comp_, corpus_;
};

std::string CliPipeline::toy_, CliPipeline::full_, CliPipeline::comp_, CliPipeline::corpus_;

}  // namespace

TEST(CliBasics, NoSubcommandIsUsageError) {
    EXPECT_EQ(run_cli("").exit_code, 2);
    EXPECT_EQ(run_cli("frobnicate").exit_code, 2);
}

TEST(CliBasics, HelpExitsZero) { EXPECT_EQ(run_cli("--help").exit_code, 0); }

TEST(CliBasics, InitToyDeterministicFileHash) {
    const std::string a = dir_path() + "det_a.rwkvl", b = dir_path() + "det_b.rwkvl",
                      c = dir_path() + "det_c.rwkvl";
    std::filesystem::create_directories(dir_path());
    ASSERT_EQ(run_cli("init-toy --dim 16 --layers 1 --heads 2 --vocab 32 --seed 11 --out " + a)
                  .exit_code,
              0);
    ASSERT_EQ(run_cli("init-toy --dim 16 --layers 1 --heads 2 --vocab 32 --seed 11 --out " + b)
                  .exit_code,
              0);
    ASSERT_EQ(run_cli("init-toy --dim 16 --layers 1 --heads 2 --vocab 32 --seed 12 --out " + c)
                  .exit_code,
              0);
    EXPECT_EQ(slurp(a), slurp(b));
    EXPECT_NE(slurp(a), slurp(c));
}

TEST(CliBasics, InitToyIndivisibleHeadsIsUsageError) {
    EXPECT_EQ(run_cli("init-toy --dim 30 --layers 1 --heads 4 --vocab 32 --out " + dir_path() +
                      "bad.rwkvl")
                  .exit_code,
              2);
}

TEST(CliBasics, ToyTrainLowersCrossEntropy) {
    const std::string out = dir_path() + "trained.rwkvl";
    std::filesystem::create_directories(dir_path());
    ASSERT_EQ(run_cli("init-toy --dim 16 --layers 1 --heads 2 --vocab 24 --seed 4 --out " + out +
                      " --toy-train --train-tokens 120 --train-epochs 5")
                  .exit_code,
              0);
    json rep = load_json(out + ".init-toy.report.json");
    validate_as(rep, "init_toy", "init_toy report");
    EXPECT_LT(rep["final_ce"].get<double>(), rep["initial_ce"].get<double>());
}

TEST_F(CliPipeline, CompressShrinksSquareProjectionsFourTimes) {
    ModelFile dense(toy_), small(comp_);
    const uint64_t before = dense.dir().find("blk.0.tm.wr").length;
    const uint64_t after = small.dir().find("blk.0.tm.wr.L").length +
                           small.dir().find("blk.0.tm.wr.R").length;
    EXPECT_EQ(after * 4, before);
    json rep = load_json(comp_ + ".compress.report.json");
    validate_as(rep, "compress", "compress report");
    EXPECT_TRUE(rep["tail_energy"].contains("tm_r"));
    EXPECT_EQ(rep["tail_energy"]["tm_r"].size(), 3u);
    for (const auto& v : rep["tail_energy"]["tm_r"]) EXPECT_GT(v.get<double>(), 0.0);
}

TEST_F(CliPipeline, CompressCarriesTechniqueTensorsThrough) {
    const std::string out = dir_path() + "carried.rwkvl";
    ASSERT_EQ(run_cli("compress --in " + full_ + " --out " + out + " --svd-k 4").exit_code, 0);
    ModelFile f(out);
    EXPECT_TRUE(f.dir().contains("head.assign"));
    EXPECT_TRUE(f.dir().contains("head.shard.0"));
    EXPECT_TRUE(f.dir().contains("0.pred.L1"));
    EXPECT_TRUE(f.dir().contains("1.pred.wk1b"));
    EXPECT_TRUE(f.dir().contains("blk.0.tm.wr.L"));
}

TEST_F(CliPipeline, CompressRejectsOutputProjectionTarget) {
    EXPECT_EQ(run_cli("compress --in " + toy_ + " --out " + dir_path() +
                      "x.rwkvl --svd-k 8 --targets tm_r,wo")
                  .exit_code,
              2);
}

TEST_F(CliPipeline, CompressingTwiceIsUsageError) {
    EXPECT_EQ(run_cli("compress --in " + comp_ + " --out " + dir_path() + "y.rwkvl --svd-k 4")
                  .exit_code,
              2);
}

TEST_F(CliPipeline, FullRankCompressionPreservesGreedyTokens) {
    const std::string k1 = dir_path() + "toy_k1.rwkvl";
    ASSERT_EQ(run_cli("compress --in " + toy_ + " --out " + k1 + " --svd-k 1").exit_code, 0);
    CmdResult dense = run_cli("generate --model " + toy_ +
                              " --prompt-ids \"5 6\" --n 24 --ablate svd,sparsity,hh,cache");
    CmdResult lowrank = run_cli("generate --model " + k1 +
                                " --prompt-ids \"5 6\" --n 24 --ablate sparsity,hh,cache");
    ASSERT_EQ(dense.exit_code, 0);
    ASSERT_EQ(lowrank.exit_code, 0);
    EXPECT_EQ(dense.out, lowrank.out);
}

TEST_F(CliPipeline, BuildHeadShardRowsCoverVocab) {
    json rep = load_json(full_ + ".build-head.report.json");
    validate_as(rep, "build_head", "build-head report");
    uint64_t total = 0;
    for (const auto& s : rep["sizes"]) total += s.get<uint64_t>();
    EXPECT_EQ(total, 64u);

    ModelFile f(full_);
    uint64_t shard_rows = 0;
    for (const auto& e : f.dir().entries)
        if (e.name.rfind("head.shard.", 0) == 0) shard_rows += e.shape[0];
    EXPECT_EQ(shard_rows, 64u);
    EXPECT_TRUE(f.dir().contains("head.h"));  // dense head is kept alongside
}

TEST_F(CliPipeline, BuildHeadTooManyClustersIsUsageError) {
    EXPECT_EQ(run_cli("build-head --in " + toy_ + " --clusters 100 --seed 1").exit_code, 2);
}

TEST_F(CliPipeline, TrainHeadLowersKl) {
    json rep = load_json(full_ + ".train-head.report.json");
    validate_as(rep, "train_head", "train-head report");
    EXPECT_LT(rep["final_kl"].get<double>(), rep["initial_kl"].get<double>());
    EXPECT_EQ(rep["epoch_kl"].size(), 5u);
}

TEST_F(CliPipeline, TrainHeadWithoutAssignmentIsIoError) {
    EXPECT_EQ(run_cli("train-head --model " + toy_ + " --corpus " + corpus_ + " --epochs 1")
                  .exit_code,
              3);
}

TEST_F(CliPipeline, RecordActsWritesRequestedRecords) {
    const std::string ds = dir_path() + "acts_small.bin";
    ASSERT_EQ(run_cli("record-acts --model " + toy_ +
                      " --layer 0 --samples 100 --seed 2 --out " + ds)
                  .exit_code,
              0);
    EXPECT_EQ(load_dataset(ds).samples.size(), 100u);
    json rep = load_json(ds + ".record-acts.report.json");
    validate_as(rep, "record_acts", "record-acts report");
    EXPECT_EQ(rep["records"].get<uint64_t>(), 100u);
}

TEST_F(CliPipeline, RecordActsLayerOutOfRangeIsUsageError) {
    EXPECT_EQ(run_cli("record-acts --model " + toy_ + " --layer 9 --out " + dir_path() + "z.bin")
                  .exit_code,
              2);
}

TEST_F(CliPipeline, PredictorMetricsValidAndEnsembleDominates) {
    json rep = load_json(full_ + ".train-predictor.report.json");
    validate_as(rep, "train_predictor", "train-predictor report");
    const double er = rep["metrics"]["ensemble"]["recall"].get<double>();
    EXPECT_GE(er, rep["metrics"]["mlp"]["recall"].get<double>());
    EXPECT_GE(er, rep["metrics"]["quant"]["recall"].get<double>());
}

TEST_F(CliPipeline, TrainPredictorRerunSameSeedSameMetrics) {
    const std::string m1 = dir_path() + "rerun1.rwkvl", m2 = dir_path() + "rerun2.rwkvl";
    std::ofstream(m1, std::ios::binary) << slurp(toy_);
    std::ofstream(m2, std::ios::binary) << slurp(toy_);
    const std::string ds = dir_path() + "acts_rerun.bin";
    ASSERT_EQ(run_cli("record-acts --model " + toy_ +
                      " --layer 0 --samples 120 --seed 6 --out " + ds)
                  .exit_code,
              0);
    for (const std::string& m : {m1, m2})
        ASSERT_EQ(run_cli("train-predictor --model " + m + " --dataset " + ds +
                          " --layer 0 --epochs 20 --lr 0.4 --seed 13")
                      .exit_code,
                  0);
    EXPECT_EQ(load_json(m1 + ".train-predictor.report.json"),
              load_json(m2 + ".train-predictor.report.json"));
}

TEST_F(CliPipeline, GenerateStrategiesAgreeWithDifferentPeaks) {
    const std::string rf = dir_path() + "gen_full.json", rl = dir_path() + "gen_lw.json";
    CmdResult full = run_cli("generate --model " + comp_ +
                             " --prompt-ids \"1 2 3\" --n 16 --strategy full --report " + rf);
    CmdResult lw = run_cli("generate --model " + comp_ +
                           " --prompt-ids \"1 2 3\" --n 16 --strategy layerwise --report " + rl);
    ASSERT_EQ(full.exit_code, 0);
    ASSERT_EQ(lw.exit_code, 0);
    EXPECT_EQ(full.out, lw.out);
    EXPECT_FALSE(full.out.empty());

    json a = load_json(rf), b = load_json(rl);
    validate_as(a, "generate", "generate report");
    validate_as(b, "generate", "generate report");
    EXPECT_LT(b["blocks_group_peak"].get<uint64_t>(), a["blocks_group_peak"].get<uint64_t>());
}

TEST_F(CliPipeline, AblatingClusteredHeadRestoresDenseHeadBytes) {
    const std::string rp = dir_path() + "gen_hh.json";
    ASSERT_EQ(run_cli("generate --model " + full_ +
                      " --prompt-ids \"1\" --n 8 --ablate hh --report " + rp)
                  .exit_code,
              0);
    ModelFile f(full_);
    uint64_t dense_head = 0;
    for (const auto& e : f.dir().entries)
        if (e.name == "head.h" || e.name.rfind("ln_out.", 0) == 0)
            dense_head += e.length;
    json rep = load_json(rp);
    EXPECT_EQ(rep["peak_bytes"]["head"].get<uint64_t>(), dense_head);
    EXPECT_FALSE(rep["techniques"]["hh"].get<bool>());
}

TEST_F(CliPipeline, GenerateZeroTokensPrintsNothing) {
    CmdResult r = run_cli("generate --model " + full_ + " --prompt-ids \"1\" --n 0");
    EXPECT_EQ(r.exit_code, 0);
    EXPECT_TRUE(r.out.empty());
}

TEST_F(CliPipeline, UnknownAblationTagIsUsageError) {
    EXPECT_EQ(run_cli("generate --model " + full_ + " --prompt-ids \"1\" --n 2 --ablate bogus")
                  .exit_code,
              2);
}

TEST_F(CliPipeline, AblatingSvdNeedsDenseFile) {
    EXPECT_EQ(run_cli("generate --model " + comp_ + " --prompt-ids \"1\" --n 2 --ablate svd")
                  .exit_code,
              2);
    EXPECT_EQ(run_cli("generate --model " + full_ +
                      " --prompt-ids \"1\" --n 2 --ablate svd,sparsity,hh,cache")
                  .exit_code,
              0);
}

TEST_F(CliPipeline, DisablingEverythingMatchesVanillaDense) {
    CmdResult vanilla = run_cli("generate --model " + toy_ +
                                " --prompt-ids \"2 4\" --n 20 --ablate svd,sparsity,hh,cache");
    CmdResult ablated = run_cli("generate --model " + full_ +
                                " --prompt-ids \"2 4\" --n 20 --ablate svd,sparsity,hh,cache");
    ASSERT_EQ(vanilla.exit_code, 0);
    ASSERT_EQ(ablated.exit_code, 0);
    EXPECT_EQ(vanilla.out, ablated.out);
}

TEST_F(CliPipeline, SeededTopKSamplingIsRepeatable) {
    const std::string args = "generate --model " + full_ +
                             " --prompt-ids \"3\" --n 12 --sampler top_k --top-k 8 "
                             "--temperature 0.9 --seed 21";
    CmdResult a = run_cli(args), b = run_cli(args);
    ASSERT_EQ(a.exit_code, 0);
    EXPECT_EQ(a.out, b.out);
}

TEST_F(CliPipeline, BenchReportMatchesSchema) {
    const std::string out = dir_path() + "bench.json";
    ASSERT_EQ(run_cli("bench --model " + comp_ +
                      " --tokens 32 --repeat 3 --strategy layerwise --out " + out)
                  .exit_code,
              0);
    json rep = load_json(out);
    validate_as(rep, "bench", "bench report");
    EXPECT_EQ(rep["raw_tps"].size(), 3u);
    EXPECT_EQ(rep["repeat"].get<uint64_t>(), 3u);
    std::vector<double> raw = rep["raw_tps"].get<std::vector<double>>();
    std::sort(raw.begin(), raw.end());
    EXPECT_DOUBLE_EQ(rep["median_tps"].get<double>(), raw[1]);
    for (double t : raw) EXPECT_GT(t, 0.0);
}

TEST_F(CliPipeline, BenchWithoutOutPrintsJson) {
    CmdResult r = run_cli("bench --model " + full_ + " --tokens 8 --repeat 1");
    ASSERT_EQ(r.exit_code, 0);
    json rep = json::parse(r.out);
    validate_as(rep, "bench", "bench stdout");
}

TEST_F(CliPipeline, EveryCommandEmitsAManifest) {
    const struct {
        std::string path, command;
    } cases[] = {
        {toy_ + ".init-toy.manifest.json", "init-toy"},
        {comp_ + ".compress.manifest.json", "compress"},
        {full_ + ".build-head.manifest.json", "build-head"},
        {full_ + ".train-head.manifest.json", "train-head"},
        {full_ + ".train-predictor.manifest.json", "train-predictor"},
    };
    for (const auto& c : cases) {
        json m = load_json(c.path);
        validate_as(m, "manifest", c.path);
        EXPECT_EQ(m["command"].get<std::string>(), c.command);
        EXPECT_TRUE(m["outputs"].contains("report"));
    }
}

TEST_F(CliPipeline, MissingModelFileIsIoError) {
    EXPECT_EQ(run_cli("generate --model " + dir_path() + "nope.rwkvl --prompt-ids \"1\" --n 2")
                  .exit_code,
              3);
}
