#include "textrec/cli.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace textrec;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    EXPECT_TRUE(in.good()) << path;
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path fresh_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / "textrec_cli" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void write_config(const fs::path& path, const nlohmann::json& j) {
    std::ofstream out(path, std::ios::binary);
    out << j.dump(2);
}

// tiny corpus + tiny model so the full pipeline runs in seconds
nlohmann::json micro_config(const fs::path& dir) {
    return {{"out_dir", (dir / "out").string()},
            {"items", (dir / "out" / "items.jsonl").string()},
            {"interactions", (dir / "out" / "interactions.jsonl").string()},
            {"synth_domains", 2},
            {"synth_users_per_domain", 80},
            {"synth_items_per_domain", 60},
            {"synth_clusters_per_domain", 4},
            {"synth_seq_len_min", 5},
            {"synth_seq_len_max", 8},
            {"model_layers", 1},
            {"model_heads", 2},
            {"model_d", 32},
            {"model_ff", 64},
            {"model_max_positions", 256},
            {"pretrain_batch_size", 16},
            {"finetune_batch_size", 16},
            {"pretrain_epochs", 2},
            {"finetune_max_epochs", 2},
            {"early_stop_patience", 1},
            {"n_negatives", 20},
            {"valid_max_instances", 30},
            {"eval_max_instances", 50},
            {"target_domain", "d1"},
            {"rerank_sizes", {10, 38}},
            {"next_k", 2},
            {"seed", 7}};
}

int run(const std::vector<std::string>& args) { return run_cli(args); }

}  // namespace

TEST(CliConfig, PrintConfigCarriesPaperDefaults) {
    RunConfig defaults;
    nlohmann::json j = defaults.to_json();
    EXPECT_EQ(j["mask_ratio"].get<double>(), 0.1);
    EXPECT_EQ(j["item_token_cap"].get<int>(), 40);
    EXPECT_EQ(j["sequence_token_cap"].get<int>(), 512);
    EXPECT_EQ(j["learning_rate"].get<double>(), 3e-4);
    EXPECT_EQ(j["pretrain_batch_size"].get<int>(), 128);
    EXPECT_EQ(j["finetune_batch_size"].get<int>(), 64);
    EXPECT_EQ(j["pretrain_epochs"].get<int>(), 20);
    EXPECT_EQ(j["n_negatives"].get<int>(), 100);
    EXPECT_EQ(j["kcore_k"].get<int>(), 5);
    EXPECT_EQ(j["last_only_fraction"].get<double>(), 0.1);
    // each constant lives under exactly one key
    const std::string dump = j.dump();
    auto count = [&](const std::string& key) {
        std::size_t n = 0, pos = 0;
        while ((pos = dump.find("\"" + key + "\"", pos)) != std::string::npos) {
            ++n;
            ++pos;
        }
        return n;
    };
    for (const char* key : {"mask_ratio", "item_token_cap", "sequence_token_cap", "learning_rate", "pretrain_batch_size",
                            "finetune_batch_size", "pretrain_epochs", "n_negatives"})
        EXPECT_EQ(count(key), 1u) << key;
    EXPECT_EQ(run({"--print-config"}), 0);
}

TEST(CliConfig, UnknownKeyIsConfigError) {
    auto dir = fresh_dir("badkey");
    write_config(dir / "cfg.json", {{"maskratio", 0.2}});
    EXPECT_EQ(run({"synth", "--config", (dir / "cfg.json").string()}), 2);
}

TEST(CliConfig, WrongTypeIsConfigError) {
    auto dir = fresh_dir("badtype");
    write_config(dir / "cfg.json", {{"mask_ratio", "a lot"}});
    EXPECT_EQ(run({"synth", "--config", (dir / "cfg.json").string()}), 2);
}

TEST(CliConfig, MissingRequiredPathsIsConfigError) {
    auto dir = fresh_dir("nopaths");
    write_config(dir / "cfg.json", {{"out_dir", (dir / "out").string()}});
    EXPECT_EQ(run({"pretrain", "--config", (dir / "cfg.json").string()}), 2);
}

TEST(CliSynth, WritesThreeFilesDeterministically) {
    auto dir = fresh_dir("synth");
    auto cfg = micro_config(dir);
    write_config(dir / "cfg.json", cfg);
    ASSERT_EQ(run({"synth", "--config", (dir / "cfg.json").string()}), 0);
    for (const char* f : {"items.jsonl", "interactions.jsonl", "manifest.json"})
        EXPECT_TRUE(fs::exists(dir / "out" / f)) << f;

    const std::string items_a = slurp(dir / "out" / "items.jsonl");
    auto dir2 = fresh_dir("synth2");
    auto cfg2 = micro_config(dir2);
    write_config(dir2 / "cfg.json", cfg2);
    ASSERT_EQ(run({"synth", "--config", (dir2 / "cfg.json").string()}), 0);
    EXPECT_EQ(items_a, slurp(dir2 / "out" / "items.jsonl"));

    ASSERT_EQ(run({"synth", "--config", (dir2 / "cfg.json").string(), "--seed", "8"}), 0);
    EXPECT_NE(items_a, slurp(dir2 / "out" / "items.jsonl"));
}

TEST(CliPipeline, EndToEnd) {
    auto dir = fresh_dir("pipeline");
    auto cfg = micro_config(dir);
    write_config(dir / "cfg.json", cfg);
    const std::string cpath = (dir / "cfg.json").string();

    ASSERT_EQ(run({"synth", "--config", cpath}), 0);
    ASSERT_EQ(run({"ingest", "--config", cpath}), 0);
    EXPECT_TRUE(fs::exists(dir / "out" / "ingest_stats.json"));

    ASSERT_EQ(run({"pretrain", "--config", cpath}), 0);
    EXPECT_TRUE(fs::exists(dir / "out" / "pretrained.ckpt"));
    EXPECT_TRUE(fs::exists(dir / "out" / "vocab.txt"));
    const auto log = slurp(dir / "out" / "pretrain_log.jsonl");
    EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 2);  // one line per epoch

    ASSERT_EQ(run({"finetune", "--config", cpath}), 0);
    EXPECT_TRUE(fs::exists(dir / "out" / "finetuned.ckpt"));
    const auto ft_log = slurp(dir / "out" / "finetune_log.jsonl");
    EXPECT_NE(ft_log.find("valid_ndcg10"), std::string::npos);

    ASSERT_EQ(run({"eval", "--config", cpath}), 0);
    nlohmann::json report = nlohmann::json::parse(slurp(dir / "out" / "eval_report.json"));
    EXPECT_EQ(report["protocol"], "eval");
    EXPECT_GT(report["n_instances"].get<int>(), 0);
    const double hr1 = report["metrics"]["1"]["hr"].get<double>();
    const double ndcg1 = report["metrics"]["1"]["ndcg"].get<double>();
    EXPECT_EQ(hr1, ndcg1);
    for (const char* k : {"1", "5", "10"}) {
        const double hr = report["metrics"][k]["hr"].get<double>();
        const double ndcg = report["metrics"][k]["ndcg"].get<double>();
        EXPECT_GE(hr, 0.0);
        EXPECT_LE(hr, 1.0);
        EXPECT_GE(ndcg, 0.0);
        EXPECT_LE(ndcg, 1.0);
        EXPECT_GE(hr, ndcg);
    }

    // byte-identical reports across reruns of the same command + config + seed
    const std::string first = slurp(dir / "out" / "eval_report.json");
    ASSERT_EQ(run({"eval", "--config", cpath}), 0);
    EXPECT_EQ(first, slurp(dir / "out" / "eval_report.json"));

    // baseline scorers ride the same path
    auto cfg_pop = cfg;
    cfg_pop["scorer"] = "popularity";
    write_config(dir / "cfg_pop.json", cfg_pop);
    ASSERT_EQ(run({"eval", "--config", (dir / "cfg_pop.json").string()}), 0);

    ASSERT_EQ(run({"zeroshot", "--config", cpath}), 0);
    nlohmann::json zs = nlohmann::json::parse(slurp(dir / "out" / "zeroshot_report.json"));
    EXPECT_EQ(zs["protocol"], "zeroshot");

    ASSERT_EQ(run({"rerank", "--config", cpath}), 0);
    nlohmann::json rr = nlohmann::json::parse(slurp(dir / "out" / "rerank_report.json"));
    ASSERT_EQ(rr["sizes"].size(), 2u);
    for (const auto& entry : rr["sizes"]) {
        EXPECT_TRUE(entry.contains("retriever_miss_rate"));
        EXPECT_TRUE(entry.contains("metrics"));
    }

    ASSERT_EQ(run({"robustness", "--config", cpath}), 0);
    nlohmann::json rb = nlohmann::json::parse(slurp(dir / "out" / "robustness_report.json"));
    ASSERT_EQ(rb["per_j"].size(), 2u);
    EXPECT_EQ(rb["per_j"][0]["n_instances"], rb["per_j"][1]["n_instances"]);
}

TEST(CliPipeline, ResumeContinuesEpochs) {
    auto dir = fresh_dir("resume");
    auto cfg = micro_config(dir);
    cfg["pretrain_epochs"] = 1;
    write_config(dir / "cfg.json", cfg);
    const std::string cpath = (dir / "cfg.json").string();
    ASSERT_EQ(run({"synth", "--config", cpath}), 0);
    ASSERT_EQ(run({"pretrain", "--config", cpath}), 0);

    cfg["pretrain_epochs"] = 3;
    write_config(dir / "cfg.json", cfg);
    ASSERT_EQ(run({"pretrain", "--config", cpath, "--resume"}), 0);
    const auto log = slurp(dir / "out" / "pretrain_log.jsonl");
    EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 3);
    EXPECT_NE(log.find("\"epoch\":3"), std::string::npos);

    // resumed run equals an uninterrupted 3-epoch run bitwise
    auto dir2 = fresh_dir("resume_straight");
    auto cfg2 = micro_config(dir2);
    cfg2["pretrain_epochs"] = 3;
    write_config(dir2 / "cfg.json", cfg2);
    ASSERT_EQ(run({"synth", "--config", (dir2 / "cfg.json").string()}), 0);
    ASSERT_EQ(run({"pretrain", "--config", (dir2 / "cfg.json").string()}), 0);
    EXPECT_EQ(slurp(dir / "out" / "pretrained.ckpt"), slurp(dir2 / "out" / "pretrained.ckpt"));
}

TEST(CliPipeline, FromScratchFinetuneNeedsNoCheckpoint) {
    auto dir = fresh_dir("single");
    auto cfg = micro_config(dir);
    cfg["finetune_max_epochs"] = 1;
    write_config(dir / "cfg.json", cfg);
    const std::string cpath = (dir / "cfg.json").string();
    ASSERT_EQ(run({"synth", "--config", cpath}), 0);
    // vocabulary is built on demand; no pretrained checkpoint exists
    ASSERT_EQ(run({"finetune", "--config", cpath, "--from-scratch"}), 0);
    EXPECT_TRUE(fs::exists(dir / "out" / "finetuned.ckpt"));
    // without --from-scratch the missing init checkpoint is a config error
    auto dir2 = fresh_dir("single2");
    auto cfg2 = micro_config(dir2);
    write_config(dir2 / "cfg.json", cfg2);
    ASSERT_EQ(run({"synth", "--config", (dir2 / "cfg.json").string()}), 0);
    EXPECT_EQ(run({"finetune", "--config", (dir2 / "cfg.json").string()}), 2);
}

TEST(CliAblate, VariantsProduceSideBySideReport) {
    auto dir = fresh_dir("ablate");
    auto cfg = micro_config(dir);
    cfg["finetune_max_epochs"] = 1;
    cfg["ablate_variants"] = {"T", "C+T", "T->C"};
    write_config(dir / "cfg.json", cfg);
    const std::string cpath = (dir / "cfg.json").string();
    ASSERT_EQ(run({"synth", "--config", cpath}), 0);
    ASSERT_EQ(run({"ablate", "--config", cpath}), 0);
    nlohmann::json report = nlohmann::json::parse(slurp(dir / "out" / "ablate_report.json"));
    ASSERT_EQ(report["variants"].size(), 3u);
    EXPECT_EQ(report["variants"][0]["variant"], "T");
    EXPECT_EQ(report["variants"][1]["variant"], "C+T");
}

TEST(CliAblate, VariantParsing) {
    auto v = cli_detail::parse_variant("C+T+D");
    EXPECT_FALSE(v.pretrain_attrs.has_value());
    EXPECT_EQ(v.finetune_attrs, (std::vector<std::string>{"category", "title", "brand", "price", "description"}));
    auto o = cli_detail::parse_variant("D->C->T");
    EXPECT_TRUE(o.explicit_order);
    EXPECT_EQ(o.finetune_attrs, (std::vector<std::string>{"brand", "price", "description", "category", "title"}));
    auto pair = cli_detail::parse_variant("C+T/C+T+D");
    ASSERT_TRUE(pair.pretrain_attrs.has_value());
    EXPECT_EQ(*pair.pretrain_attrs, (std::vector<std::string>{"category", "title"}));
    EXPECT_EQ(pair.finetune_attrs.size(), 5u);
    EXPECT_THROW(cli_detail::parse_variant("X+Y"), ConfigError);
}
