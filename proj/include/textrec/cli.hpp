#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "textrec/corpus.hpp"
#include "textrec/eval.hpp"
#include "textrec/mitp.hpp"
#include "textrec/model.hpp"
#include "textrec/rank.hpp"
#include "textrec/synthetic.hpp"
#include "textrec/textualize.hpp"
#include "textrec/tokenizer.hpp"

namespace textrec {

/// Flat configuration with every pipeline default. Unknown keys are errors.
struct RunConfig {
    // paths
    std::string items;
    std::string interactions;
    std::string vocab;
    std::string checkpoint;
    std::string init_checkpoint;
    std::string out_dir = "out";
    // data protocol
    int kcore_k = 5;
    std::vector<std::string> pretrain_domains;  // empty: all domains in the corpus
    std::string target_domain;
    // model
    int model_layers = 2;
    int model_heads = 4;
    int model_d = 128;
    int model_ff = 512;
    int model_max_positions = 512;
    double model_dropout = 0.1;
    // training
    double mask_ratio = 0.1;
    double last_only_fraction = 0.1;
    int pretrain_batch_size = 128;
    int finetune_batch_size = 64;
    int pretrain_epochs = 20;
    int finetune_max_epochs = 30;
    double learning_rate = 3e-4;
    double weight_decay = 0.01;
    int early_stop_patience = 3;
    int valid_max_instances = 200;  // early-stop validation subsample (0 = all)
    std::map<std::string, double> domain_weights;
    // textualization
    int item_token_cap = 40;
    int sequence_token_cap = 512;
    std::string attribute_order_policy = "granularity";  // granularity | as_given
    std::vector<std::string> pretrain_attributes;        // empty: stage default
    std::vector<std::string> finetune_attributes;
    std::map<std::string, std::string> templates;
    // evaluation
    int n_negatives = 100;
    std::vector<int> eval_ks = {1, 5, 10};
    int eval_max_instances = 0;  // 0 = all
    std::string filter_untrained = "auto";  // auto | on | off
    std::string scorer = "model";           // model | popularity | markov
    // reranking
    std::vector<int> rerank_sizes = {100, 200, 300};
    std::string rerank_retriever = "markov";  // markov | popularity
    // temporal robustness
    int next_k = 3;
    // synthetic generation
    int synth_domains = 3;
    int synth_users_per_domain = 1000;
    int synth_items_per_domain = 2000;
    int synth_clusters_per_domain = 8;
    int synth_seq_len_min = 14;
    int synth_seq_len_max = 18;
    double synth_title_collision_rate = 0.0;
    double synth_transition_concentration = 0.2;
    // ablation harness
    std::vector<std::string> ablate_variants;
    // general
    std::uint64_t seed = 42;
    int vocab_min_freq = 1;
    int vocab_max_size = 50000;

    nlohmann::json to_json() const {
        return {{"items", items},
                {"interactions", interactions},
                {"vocab", vocab},
                {"checkpoint", checkpoint},
                {"init_checkpoint", init_checkpoint},
                {"out_dir", out_dir},
                {"kcore_k", kcore_k},
                {"pretrain_domains", pretrain_domains},
                {"target_domain", target_domain},
                {"model_layers", model_layers},
                {"model_heads", model_heads},
                {"model_d", model_d},
                {"model_ff", model_ff},
                {"model_max_positions", model_max_positions},
                {"model_dropout", model_dropout},
                {"mask_ratio", mask_ratio},
                {"last_only_fraction", last_only_fraction},
                {"pretrain_batch_size", pretrain_batch_size},
                {"finetune_batch_size", finetune_batch_size},
                {"pretrain_epochs", pretrain_epochs},
                {"finetune_max_epochs", finetune_max_epochs},
                {"learning_rate", learning_rate},
                {"weight_decay", weight_decay},
                {"early_stop_patience", early_stop_patience},
                {"valid_max_instances", valid_max_instances},
                {"domain_weights", domain_weights},
                {"item_token_cap", item_token_cap},
                {"sequence_token_cap", sequence_token_cap},
                {"attribute_order_policy", attribute_order_policy},
                {"pretrain_attributes", pretrain_attributes},
                {"finetune_attributes", finetune_attributes},
                {"templates", templates},
                {"n_negatives", n_negatives},
                {"eval_ks", eval_ks},
                {"eval_max_instances", eval_max_instances},
                {"filter_untrained", filter_untrained},
                {"scorer", scorer},
                {"rerank_sizes", rerank_sizes},
                {"rerank_retriever", rerank_retriever},
                {"next_k", next_k},
                {"synth_domains", synth_domains},
                {"synth_users_per_domain", synth_users_per_domain},
                {"synth_items_per_domain", synth_items_per_domain},
                {"synth_clusters_per_domain", synth_clusters_per_domain},
                {"synth_seq_len_min", synth_seq_len_min},
                {"synth_seq_len_max", synth_seq_len_max},
                {"synth_title_collision_rate", synth_title_collision_rate},
                {"synth_transition_concentration", synth_transition_concentration},
                {"ablate_variants", ablate_variants},
                {"seed", seed},
                {"vocab_min_freq", vocab_min_freq},
                {"vocab_max_size", vocab_max_size}};
    }

    static RunConfig from_json(const nlohmann::json& j) {
        RunConfig cfg;
        const nlohmann::json defaults = cfg.to_json();
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (!defaults.contains(it.key())) throw ConfigError("unknown config key '" + it.key() + "'");
        }
        auto get = [&](const char* key, auto& field) {
            if (j.contains(key)) {
                try {
                    field = j.at(key).get<std::decay_t<decltype(field)>>();
                } catch (const nlohmann::json::exception&) {
                    throw ConfigError(std::string("config key '") + key + "' has the wrong type");
                }
            }
        };
        get("items", cfg.items);
        get("interactions", cfg.interactions);
        get("vocab", cfg.vocab);
        get("checkpoint", cfg.checkpoint);
        get("init_checkpoint", cfg.init_checkpoint);
        get("out_dir", cfg.out_dir);
        get("kcore_k", cfg.kcore_k);
        get("pretrain_domains", cfg.pretrain_domains);
        get("target_domain", cfg.target_domain);
        get("model_layers", cfg.model_layers);
        get("model_heads", cfg.model_heads);
        get("model_d", cfg.model_d);
        get("model_ff", cfg.model_ff);
        get("model_max_positions", cfg.model_max_positions);
        get("model_dropout", cfg.model_dropout);
        get("mask_ratio", cfg.mask_ratio);
        get("last_only_fraction", cfg.last_only_fraction);
        get("pretrain_batch_size", cfg.pretrain_batch_size);
        get("finetune_batch_size", cfg.finetune_batch_size);
        get("pretrain_epochs", cfg.pretrain_epochs);
        get("finetune_max_epochs", cfg.finetune_max_epochs);
        get("learning_rate", cfg.learning_rate);
        get("weight_decay", cfg.weight_decay);
        get("early_stop_patience", cfg.early_stop_patience);
        get("valid_max_instances", cfg.valid_max_instances);
        get("domain_weights", cfg.domain_weights);
        get("item_token_cap", cfg.item_token_cap);
        get("sequence_token_cap", cfg.sequence_token_cap);
        get("attribute_order_policy", cfg.attribute_order_policy);
        get("pretrain_attributes", cfg.pretrain_attributes);
        get("finetune_attributes", cfg.finetune_attributes);
        get("templates", cfg.templates);
        get("n_negatives", cfg.n_negatives);
        get("eval_ks", cfg.eval_ks);
        get("eval_max_instances", cfg.eval_max_instances);
        get("filter_untrained", cfg.filter_untrained);
        get("scorer", cfg.scorer);
        get("rerank_sizes", cfg.rerank_sizes);
        get("rerank_retriever", cfg.rerank_retriever);
        get("next_k", cfg.next_k);
        get("synth_domains", cfg.synth_domains);
        get("synth_users_per_domain", cfg.synth_users_per_domain);
        get("synth_items_per_domain", cfg.synth_items_per_domain);
        get("synth_clusters_per_domain", cfg.synth_clusters_per_domain);
        get("synth_seq_len_min", cfg.synth_seq_len_min);
        get("synth_seq_len_max", cfg.synth_seq_len_max);
        get("synth_title_collision_rate", cfg.synth_title_collision_rate);
        get("synth_transition_concentration", cfg.synth_transition_concentration);
        get("ablate_variants", cfg.ablate_variants);
        get("seed", cfg.seed);
        get("vocab_min_freq", cfg.vocab_min_freq);
        get("vocab_max_size", cfg.vocab_max_size);
        return cfg;
    }

    static RunConfig load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw ConfigError("cannot read config file " + path);
        nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
        if (j.is_discarded() || !j.is_object()) throw ConfigError("config file " + path + " is not a JSON object");
        return from_json(j);
    }
};

namespace cli_detail {

using Params = Parameters<float>;

inline std::uint64_t config_fingerprint(const RunConfig& cfg, const std::string& command) {
    return fnv1a64(command + "|" + cfg.to_json().dump());
}

inline void write_text(const std::string& path, const std::string& content) {
    std::filesystem::create_directories(std::filesystem::path(path).parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << content;
}

inline void append_log(const std::string& path, const std::vector<EpochLog>& logs) {
    std::filesystem::create_directories(std::filesystem::path(path).parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::app);
    if (!out) throw std::runtime_error("cannot write " + path);
    for (const auto& log : logs) out << log.to_json().dump() << "\n";
}

inline std::filesystem::path out_path(const RunConfig& cfg, const std::string& name) {
    std::filesystem::create_directories(cfg.out_dir);
    return std::filesystem::path(cfg.out_dir) / name;
}

inline Dataset load_corpus(const RunConfig& cfg) {
    if (cfg.items.empty() || cfg.interactions.empty())
        throw ConfigError("config keys 'items' and 'interactions' are required for this command");
    Catalog catalog = load_items(cfg.items);
    return load_interactions(cfg.interactions, std::move(catalog));
}

inline std::vector<Dataset> filtered_domains(const RunConfig& cfg, const Dataset& corpus) {
    std::vector<Dataset> out;
    for (auto& ds : partition_by_domain(corpus)) out.push_back(kcore_filter(ds, static_cast<std::size_t>(cfg.kcore_k)));
    return out;
}

inline const Dataset& find_domain(const std::vector<Dataset>& domains, const std::string& name) {
    for (const auto& d : domains)
        if (d.domain == name) return d;
    throw ConfigError("target_domain '" + name + "' not present in the corpus");
}

inline Vocabulary ensure_vocab(const RunConfig& cfg, const Catalog& catalog) {
    const std::string path = cfg.vocab.empty() ? out_path(cfg, "vocab.txt").string() : cfg.vocab;
    if (std::filesystem::exists(path)) return Vocabulary::load(path);
    Vocabulary vocab = build_pipeline_vocab(catalog, cfg.vocab_min_freq, cfg.vocab_max_size);
    std::filesystem::create_directories(std::filesystem::path(path).parent_path());
    vocab.save(path);
    return vocab;
}

inline Vocabulary require_vocab(const RunConfig& cfg) {
    const std::string path = cfg.vocab.empty() ? out_path(cfg, "vocab.txt").string() : cfg.vocab;
    if (!std::filesystem::exists(path)) throw ConfigError("vocabulary file " + path + " not found; run pretrain first");
    return Vocabulary::load(path);
}

inline ModelConfig model_config(const RunConfig& cfg, const Vocabulary& vocab) {
    ModelConfig m;
    m.n_layers = cfg.model_layers;
    m.n_heads = cfg.model_heads;
    m.d_model = cfg.model_d;
    m.d_ff = cfg.model_ff;
    m.vocab_size = vocab.size();
    m.max_positions = cfg.model_max_positions;
    m.dropout_rate = cfg.model_dropout;
    m.seed = cfg.seed;
    m.validate();
    return m;
}

inline std::vector<std::string> apply_order_policy(const RunConfig& cfg, std::vector<std::string> attrs) {
    if (cfg.attribute_order_policy == "granularity") return order_attributes(attrs);
    if (cfg.attribute_order_policy == "as_given") return attrs;
    throw ConfigError("attribute_order_policy must be 'granularity' or 'as_given'");
}

inline TextualizationConfig stage_config(const RunConfig& cfg, Stage stage) {
    TextualizationConfig t = default_config(stage);
    const auto& override_attrs = stage == Stage::pretrain ? cfg.pretrain_attributes : cfg.finetune_attributes;
    if (!override_attrs.empty()) t.attributes = apply_order_policy(cfg, override_attrs);
    t.templates = cfg.templates;
    t.item_token_cap = cfg.item_token_cap;
    t.sequence_token_cap = cfg.sequence_token_cap;
    return t;
}

inline TrainConfig train_config(const RunConfig& cfg, Stage stage) {
    TrainConfig t;
    t.stage = stage;
    t.mask_ratio = cfg.mask_ratio;
    t.last_only_fraction = cfg.last_only_fraction;
    t.batch_size = stage == Stage::pretrain ? cfg.pretrain_batch_size : cfg.finetune_batch_size;
    t.epochs = stage == Stage::pretrain ? cfg.pretrain_epochs : cfg.finetune_max_epochs;
    t.optimizer.lr = cfg.learning_rate;
    t.optimizer.weight_decay = cfg.weight_decay;
    t.patience = cfg.early_stop_patience;
    t.seed = cfg.seed;
    t.domain_weights = cfg.domain_weights;
    t.validate();
    return t;
}

inline std::unordered_set<std::string> trained_item_set(const Dataset& train) {
    std::unordered_set<std::string> items;
    for (const auto& s : train.sequences) items.insert(s.items.begin(), s.items.end());
    return items;
}

inline std::map<std::string, std::set<std::string>> user_item_sets(const Dataset& ds) {
    std::map<std::string, std::set<std::string>> out;
    for (const auto& s : ds.sequences) out[s.user_id].insert(s.items.begin(), s.items.end());
    return out;
}

inline std::vector<EvalInstance> build_instances(const std::vector<HeldOut>& held, const Dataset& domain_data,
                                                 const std::map<std::string, std::set<std::string>>& full_items,
                                                 std::size_t n_negatives, std::uint64_t seed) {
    std::vector<EvalInstance> out;
    out.reserve(held.size());
    for (const auto& h : held) out.push_back(sample_negatives(h, domain_data, full_items.at(h.user_id), n_negatives, seed));
    return out;
}

template <typename T>
std::vector<T> deterministic_subsample(std::vector<T> v, int max_size, std::uint64_t seed) {
    if (max_size <= 0 || v.size() <= static_cast<std::size_t>(max_size)) return v;
    Rng rng(combine_seed(seed, 0x73756273616d70ull));
    rng.shuffle(v);
    v.resize(static_cast<std::size_t>(max_size));
    return v;
}

inline bool filter_enabled(const RunConfig& cfg, bool default_on) {
    if (cfg.filter_untrained == "on") return true;
    if (cfg.filter_untrained == "off") return false;
    if (cfg.filter_untrained == "auto") return default_on;
    throw ConfigError("filter_untrained must be 'auto', 'on' or 'off'");
}

// optimizer state sidecar: the same tensor container, m and v concatenated as
// two checkpoints in one file
inline void save_opt_state(const AdamWState<float>& st, const std::string& path) {
    save_checkpoint(st.m, path + ".m");
    save_checkpoint(st.v, path + ".v");
    nlohmann::json j{{"step", st.step}};
    write_text(path, j.dump());
}

inline bool load_opt_state(AdamWState<float>& st, const std::string& path) {
    if (!std::filesystem::exists(path) || !std::filesystem::exists(path + ".m") || !std::filesystem::exists(path + ".v"))
        return false;
    std::ifstream in(path, std::ios::binary);
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw std::runtime_error("corrupt optimizer state header " + path);
    st.step = j.at("step").get<std::size_t>();
    st.m = load_checkpoint<float>(path + ".m");
    st.v = load_checkpoint<float>(path + ".v");
    return true;
}

inline std::size_t count_log_lines(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return 0;
    std::size_t n = 0;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) ++n;
    return n;
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

inline int cmd_synth(const RunConfig& cfg) {
    SyntheticConfig s;
    s.n_domains = cfg.synth_domains;
    s.n_users = cfg.synth_users_per_domain;
    s.n_items_per_domain = cfg.synth_items_per_domain;
    s.n_clusters_per_domain = cfg.synth_clusters_per_domain;
    s.seq_len_min = cfg.synth_seq_len_min;
    s.seq_len_max = cfg.synth_seq_len_max;
    s.title_collision_rate = cfg.synth_title_collision_rate;
    s.transition_concentration = cfg.synth_transition_concentration;
    s.seed = cfg.seed;
    auto out = generate_synthetic(s);
    write_items_file(out.catalog, out_path(cfg, "items.jsonl").string());
    write_interactions_file(out.interactions, out_path(cfg, "interactions.jsonl").string());
    write_text(out_path(cfg, "manifest.json").string(), out.manifest.dump(2) + "\n");
    std::cout << "synth: wrote " << out.catalog.size() << " items, " << out.interactions.size() << " interactions to "
              << cfg.out_dir << "\n";
    return 0;
}

inline int cmd_ingest(const RunConfig& cfg) {
    Dataset corpus = load_corpus(cfg);
    corpus.validate();
    nlohmann::json stats;
    stats["domains"] = nlohmann::json::array();
    for (const auto& raw : partition_by_domain(corpus)) {
        Dataset filtered = kcore_filter(raw, static_cast<std::size_t>(cfg.kcore_k));
        const double avg = filtered.sequences.empty()
                               ? 0.0
                               : static_cast<double>(filtered.interaction_count()) / static_cast<double>(filtered.sequences.size());
        stats["domains"].push_back({{"domain", raw.domain},
                                    {"users_raw", raw.sequences.size()},
                                    {"items_raw", raw.catalog.size()},
                                    {"interactions_raw", raw.interaction_count()},
                                    {"users", filtered.sequences.size()},
                                    {"items", filtered.catalog.size()},
                                    {"interactions", filtered.interaction_count()},
                                    {"avg_len", avg}});
    }
    stats["kcore_k"] = cfg.kcore_k;
    stats["config_fingerprint"] = to_hex(config_fingerprint(cfg, "ingest"));
    const std::string text = stats.dump(2) + "\n";
    write_text(out_path(cfg, "ingest_stats.json").string(), text);
    std::cout << text;
    return 0;
}

inline int cmd_pretrain(const RunConfig& cfg, bool resume) {
    Dataset corpus = load_corpus(cfg);
    Vocabulary vocab = ensure_vocab(cfg, corpus.catalog);
    auto domains = filtered_domains(cfg, corpus);

    std::vector<Dataset> train_sets;
    for (auto& ds : domains) {
        if (!cfg.pretrain_domains.empty() &&
            std::find(cfg.pretrain_domains.begin(), cfg.pretrain_domains.end(), ds.domain) == cfg.pretrain_domains.end())
            continue;
        train_sets.push_back(leave_one_out_split(ds).train);
    }
    if (train_sets.empty()) throw ConfigError("no pretraining domains selected");

    const ModelConfig mcfg = model_config(cfg, vocab);
    const std::string ckpt = out_path(cfg, "pretrained.ckpt").string();
    const std::string opt = out_path(cfg, "pretrained.opt").string();
    const std::string log_path = out_path(cfg, "pretrain_log.jsonl").string();

    TrainerState<float> st{init_params<float>(mcfg), AdamWState<float>::init(mcfg), 0};
    if (resume && std::filesystem::exists(ckpt)) {
        st.params = load_checkpoint<float>(ckpt);
        if (!load_opt_state(st.opt, opt)) st.opt = AdamWState<float>::init(mcfg);
        st.epochs_done = static_cast<int>(count_log_lines(log_path));
        std::cout << "pretrain: resuming after epoch " << st.epochs_done << "\n";
    } else if (std::filesystem::exists(log_path)) {
        std::filesystem::remove(log_path);
    }

    auto logs = pretrain(st, train_sets, train_config(cfg, Stage::pretrain), stage_config(cfg, Stage::pretrain), vocab);
    append_log(log_path, logs);
    save_checkpoint(st.params, ckpt);
    save_opt_state(st.opt, opt);
    for (const auto& log : logs)
        std::cout << "pretrain epoch " << log.epoch << ": mean_loss " << log.mean_loss << "\n";
    std::cout << "pretrain: checkpoint " << ckpt << "\n";
    return 0;
}

inline int cmd_finetune(const RunConfig& cfg, bool from_scratch) {
    if (cfg.target_domain.empty()) throw ConfigError("finetune requires target_domain");
    Dataset corpus = load_corpus(cfg);
    Vocabulary vocab = ensure_vocab(cfg, corpus.catalog);
    auto domains = filtered_domains(cfg, corpus);
    const Dataset& target = find_domain(domains, cfg.target_domain);
    auto split = leave_one_out_split(target);
    if (split.valid.empty()) throw std::runtime_error("finetune: target domain has no validation split");

    const ModelConfig mcfg = model_config(cfg, vocab);
    TrainerState<float> st{Params::shaped(mcfg), AdamWState<float>::init(mcfg), 0};
    if (from_scratch) {
        st.params = init_params<float>(mcfg);
    } else {
        const std::string init = cfg.init_checkpoint.empty() ? out_path(cfg, "pretrained.ckpt").string() : cfg.init_checkpoint;
        if (!std::filesystem::exists(init))
            throw ConfigError("init checkpoint " + init + " not found (use --from-scratch for the single-domain arm)");
        st.params = load_checkpoint<float>(init);
        if (!st.params.config.same_shape(mcfg))
            throw std::runtime_error("finetune: checkpoint shape differs from the configured model");
    }

    const TextualizationConfig tcfg = stage_config(cfg, Stage::finetune);
    const TrainConfig traincfg = train_config(cfg, Stage::finetune);
    auto full_items = user_item_sets(target);
    auto valid_instances = deterministic_subsample(
        build_instances(split.valid, target, full_items, static_cast<std::size_t>(cfg.n_negatives), cfg.seed),
        cfg.valid_max_instances, cfg.seed);
    const auto trained = trained_item_set(split.train);
    const bool filter = filter_enabled(cfg, true);

    auto validator = [&](const Params& params) {
        ModelScorer<float> scorer(params, target.catalog, tcfg, vocab);
        auto report = evaluate(scorer, valid_instances, {10}, filter ? &trained : nullptr, "valid");
        return report.at_k.at(10).ndcg;
    };
    auto logs = finetune<float>(st, split.train, traincfg, tcfg, vocab, validator);

    const std::string ckpt = out_path(cfg, "finetuned.ckpt").string();
    const std::string log_path = out_path(cfg, "finetune_log.jsonl").string();
    if (std::filesystem::exists(log_path)) std::filesystem::remove(log_path);
    append_log(log_path, logs);
    save_checkpoint(st.params, ckpt);
    for (const auto& log : logs)
        std::cout << "finetune epoch " << log.epoch << ": mean_loss " << log.mean_loss << ", valid_ndcg10 "
                  << (log.valid_ndcg10 ? *log.valid_ndcg10 : 0.0) << "\n";
    std::cout << "finetune: checkpoint " << ckpt << "\n";
    return 0;
}

inline Params load_eval_params(const RunConfig& cfg, const ModelConfig& mcfg, const std::string& fallback) {
    std::string path = cfg.checkpoint;
    if (path.empty()) path = fallback;
    if (path.empty() || !std::filesystem::exists(path)) {
        if (!cfg.checkpoint.empty()) throw ConfigError("checkpoint " + cfg.checkpoint + " not found");
        return init_params<float>(mcfg);  // fresh-initialized model
    }
    Params p = load_checkpoint<float>(path);
    if (!p.config.same_shape(mcfg)) throw std::runtime_error("checkpoint shape differs from the configured model");
    return p;
}

inline void emit_report(const RunConfig& cfg, const std::string& file, const nlohmann::json& j) {
    const std::string text = j.dump(2) + "\n";
    write_text(out_path(cfg, file).string(), text);
    std::cout << text;
}

inline int cmd_eval(const RunConfig& cfg) {
    if (cfg.target_domain.empty()) throw ConfigError("eval requires target_domain");
    Dataset corpus = load_corpus(cfg);
    Vocabulary vocab = require_vocab(cfg);
    auto domains = filtered_domains(cfg, corpus);
    const Dataset& target = find_domain(domains, cfg.target_domain);
    auto split = leave_one_out_split(target);

    const ModelConfig mcfg = model_config(cfg, vocab);
    const TextualizationConfig tcfg = stage_config(cfg, Stage::finetune);
    auto full_items = user_item_sets(target);
    auto instances = deterministic_subsample(
        build_instances(split.test, target, full_items, static_cast<std::size_t>(cfg.n_negatives), cfg.seed),
        cfg.eval_max_instances, cfg.seed);
    const auto trained = trained_item_set(split.train);
    const bool filter = filter_enabled(cfg, true);

    std::unique_ptr<Scorer> scorer;
    Params params = Params::shaped(mcfg);
    if (cfg.scorer == "model") {
        params = load_eval_params(cfg, mcfg, out_path(cfg, "finetuned.ckpt").string());
        scorer = std::make_unique<ModelScorer<float>>(params, target.catalog, tcfg, vocab);
    } else if (cfg.scorer == "popularity") {
        scorer = std::make_unique<PopularityScorer>(split.train);
    } else if (cfg.scorer == "markov") {
        scorer = std::make_unique<MarkovScorer>(split.train);
    } else {
        throw ConfigError("scorer must be 'model', 'popularity' or 'markov'");
    }

    auto report = evaluate(*scorer, instances, cfg.eval_ks, filter ? &trained : nullptr, "eval");
    report.config_fingerprint = config_fingerprint(cfg, "eval");
    emit_report(cfg, "eval_report.json", report.to_json());
    return 0;
}

inline int cmd_zeroshot(const RunConfig& cfg) {
    if (cfg.target_domain.empty()) throw ConfigError("zeroshot requires target_domain");
    Dataset corpus = load_corpus(cfg);
    Vocabulary vocab = require_vocab(cfg);
    auto domains = filtered_domains(cfg, corpus);
    const Dataset& target = find_domain(domains, cfg.target_domain);

    const ModelConfig mcfg = model_config(cfg, vocab);
    // zero-shot scoring uses the representation the model was pretrained on
    const TextualizationConfig tcfg = stage_config(cfg, Stage::pretrain);
    auto held = zero_shot_instances(target);
    auto full_items = user_item_sets(target);
    auto instances = deterministic_subsample(
        build_instances(held, target, full_items, static_cast<std::size_t>(cfg.n_negatives), cfg.seed),
        cfg.eval_max_instances, cfg.seed);
    const bool filter = filter_enabled(cfg, false);
    const auto trained = trained_item_set(target);  // only used when forced on

    Params params = load_eval_params(cfg, mcfg, out_path(cfg, "pretrained.ckpt").string());
    ModelScorer<float> scorer(params, target.catalog, tcfg, vocab);
    auto report = evaluate(scorer, instances, cfg.eval_ks, filter ? &trained : nullptr, "zeroshot");
    report.config_fingerprint = config_fingerprint(cfg, "zeroshot");
    emit_report(cfg, "zeroshot_report.json", report.to_json());
    return 0;
}

inline int cmd_rerank(const RunConfig& cfg) {
    if (cfg.target_domain.empty()) throw ConfigError("rerank requires target_domain");
    Dataset corpus = load_corpus(cfg);
    Vocabulary vocab = require_vocab(cfg);
    auto domains = filtered_domains(cfg, corpus);
    const Dataset& target = find_domain(domains, cfg.target_domain);
    auto split = leave_one_out_split(target);

    const ModelConfig mcfg = model_config(cfg, vocab);
    const TextualizationConfig tcfg = stage_config(cfg, Stage::finetune);
    Params params = load_eval_params(cfg, mcfg, out_path(cfg, "finetuned.ckpt").string());
    ModelScorer<float> model(params, target.catalog, tcfg, vocab);

    std::unique_ptr<Scorer> retriever;
    if (cfg.rerank_retriever == "markov")
        retriever = std::make_unique<MarkovScorer>(split.train);
    else if (cfg.rerank_retriever == "popularity")
        retriever = std::make_unique<PopularityScorer>(split.train);
    else
        throw ConfigError("rerank_retriever must be 'markov' or 'popularity'");

    std::vector<EvalInstance> instances;
    for (const auto& h : split.test) {
        EvalInstance inst;
        inst.user_id = h.user_id;
        inst.history = h.history;
        inst.positive = h.target;
        inst.domain = target.domain;
        inst.position = h.position;
        instances.push_back(std::move(inst));
    }
    instances = deterministic_subsample(std::move(instances), cfg.eval_max_instances, cfg.seed);

    nlohmann::json out;
    out["protocol"] = "rerank";
    out["retriever"] = cfg.rerank_retriever;
    out["sizes"] = nlohmann::json::array();
    for (int size : cfg.rerank_sizes) {
        auto report = rerank_protocol(model, *retriever, instances, target, static_cast<std::size_t>(size), cfg.eval_ks);
        report.config_fingerprint = config_fingerprint(cfg, "rerank");
        nlohmann::json entry = report.to_json();
        entry["candidate_size"] = size;
        out["sizes"].push_back(std::move(entry));
    }
    out["config_fingerprint"] = to_hex(config_fingerprint(cfg, "rerank"));
    emit_report(cfg, "rerank_report.json", out);
    return 0;
}

inline int cmd_robustness(const RunConfig& cfg) {
    if (cfg.target_domain.empty()) throw ConfigError("robustness requires target_domain");
    Dataset corpus = load_corpus(cfg);
    Vocabulary vocab = require_vocab(cfg);
    auto domains = filtered_domains(cfg, corpus);
    const Dataset& target = find_domain(domains, cfg.target_domain);
    auto split = next_k_split(target, static_cast<std::size_t>(cfg.next_k));

    const ModelConfig mcfg = model_config(cfg, vocab);
    const TextualizationConfig tcfg = stage_config(cfg, Stage::finetune);
    Params params = load_eval_params(cfg, mcfg, out_path(cfg, "finetuned.ckpt").string());
    ModelScorer<float> scorer(params, target.catalog, tcfg, vocab);

    auto full_items = user_item_sets(target);
    std::vector<std::vector<EvalInstance>> splits;
    for (const auto& held : split.tests)
        splits.push_back(deterministic_subsample(
            build_instances(held, target, full_items, static_cast<std::size_t>(cfg.n_negatives), cfg.seed),
            cfg.eval_max_instances, cfg.seed));

    const auto trained = trained_item_set(split.train);
    const bool filter = filter_enabled(cfg, true);
    auto result = robustness_protocol(scorer, splits, cfg.eval_ks, filter ? &trained : nullptr);

    nlohmann::json out;
    out["protocol"] = "robustness";
    out["next_k"] = cfg.next_k;
    out["per_j"] = nlohmann::json::array();
    for (auto& report : result.per_j) {
        report.config_fingerprint = config_fingerprint(cfg, "robustness");
        out["per_j"].push_back(report.to_json());
    }
    if (result.decline) out["decline"] = *result.decline;
    out["config_fingerprint"] = to_hex(config_fingerprint(cfg, "robustness"));
    emit_report(cfg, "robustness_report.json", out);
    return 0;
}

// ---------------------------------------------------------------------------
// ablation harness
// ---------------------------------------------------------------------------

struct AblateVariant {
    std::string label;
    std::optional<std::vector<std::string>> pretrain_attrs;  // engaged for "A/B" stage pairs
    std::vector<std::string> finetune_attrs;
    bool explicit_order = false;
};

inline std::vector<std::string> parse_attr_part(const std::string& part, bool& explicit_order) {
    auto expand = [](const std::string& tok) -> std::vector<std::string> {
        std::string t;
        for (char c : tok) t.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        if (t == "t" || t == "title") return {"title"};
        if (t == "c" || t == "category") return {"category"};
        if (t == "b" || t == "brand") return {"brand"};
        if (t == "p" || t == "price") return {"price"};
        if (t == "d" || t == "dpt") return {"brand", "price", "description"};
        if (t == "description") return {"description"};
        throw ConfigError("unknown attribute token '" + tok + "' in ablate variant");
    };
    std::vector<std::string> out;
    std::string sep = part.find("->") != std::string::npos ? "->" : "+";
    explicit_order = sep == "->";
    std::size_t pos = 0;
    while (pos <= part.size()) {
        const std::size_t next = part.find(sep, pos);
        const std::string tok = part.substr(pos, next == std::string::npos ? std::string::npos : next - pos);
        if (!tok.empty())
            for (auto& a : expand(tok)) out.push_back(a);
        if (next == std::string::npos) break;
        pos = next + sep.size();
    }
    if (out.empty()) throw ConfigError("empty attribute list in ablate variant '" + part + "'");
    return out;
}

inline AblateVariant parse_variant(const std::string& text) {
    AblateVariant v;
    v.label = text;
    const auto slash = text.find('/');
    if (slash != std::string::npos) {
        bool dummy = false;
        v.pretrain_attrs = parse_attr_part(text.substr(0, slash), dummy);
        v.finetune_attrs = parse_attr_part(text.substr(slash + 1), v.explicit_order);
    } else {
        v.finetune_attrs = parse_attr_part(text, v.explicit_order);
    }
    return v;
}

inline int cmd_ablate(const RunConfig& cfg) {
    if (cfg.ablate_variants.empty()) throw ConfigError("ablate requires ablate_variants");
    if (cfg.target_domain.empty()) throw ConfigError("ablate requires target_domain");
    Dataset corpus = load_corpus(cfg);
    Vocabulary vocab = ensure_vocab(cfg, corpus.catalog);
    auto domains = filtered_domains(cfg, corpus);
    const Dataset& target = find_domain(domains, cfg.target_domain);
    auto split = leave_one_out_split(target);
    const ModelConfig mcfg = model_config(cfg, vocab);

    auto full_items = user_item_sets(target);
    auto valid_instances = deterministic_subsample(
        build_instances(split.valid, target, full_items, static_cast<std::size_t>(cfg.n_negatives), cfg.seed),
        cfg.valid_max_instances, cfg.seed);
    auto test_instances = deterministic_subsample(
        build_instances(split.test, target, full_items, static_cast<std::size_t>(cfg.n_negatives), cfg.seed),
        cfg.eval_max_instances, cfg.seed);
    const auto trained = trained_item_set(split.train);
    const bool filter = filter_enabled(cfg, true);

    // one pretrained checkpoint is reused across variants that share the
    // pretrain-stage selection
    std::map<std::string, Params> pretrain_cache;
    auto pretrained_for = [&](const std::vector<std::string>& attrs) -> const Params& {
        std::string key;
        for (const auto& a : attrs) key += a + ",";
        auto it = pretrain_cache.find(key);
        if (it != pretrain_cache.end()) return it->second;
        TextualizationConfig pt = stage_config(cfg, Stage::pretrain);
        pt.attributes = attrs;
        std::vector<Dataset> train_sets;
        for (auto& ds : domains) {
            if (!cfg.pretrain_domains.empty() &&
                std::find(cfg.pretrain_domains.begin(), cfg.pretrain_domains.end(), ds.domain) == cfg.pretrain_domains.end())
                continue;
            train_sets.push_back(leave_one_out_split(ds).train);
        }
        TrainerState<float> st{init_params<float>(mcfg), AdamWState<float>::init(mcfg), 0};
        pretrain(st, train_sets, train_config(cfg, Stage::pretrain), pt, vocab);
        return pretrain_cache.emplace(key, std::move(st.params)).first->second;
    };

    nlohmann::json table;
    table["protocol"] = "ablate";
    table["variants"] = nlohmann::json::array();
    std::vector<std::pair<std::string, MetricsReport>> results;
    for (const auto& text : cfg.ablate_variants) {
        AblateVariant variant = parse_variant(text);
        TextualizationConfig ft = stage_config(cfg, Stage::finetune);
        ft.attributes = variant.explicit_order ? variant.finetune_attrs : order_attributes(variant.finetune_attrs);

        TrainerState<float> st{Params::shaped(mcfg), AdamWState<float>::init(mcfg), 0};
        if (variant.pretrain_attrs) {
            st.params = pretrained_for(order_attributes(*variant.pretrain_attrs));
        } else {
            st.params = init_params<float>(mcfg);
        }
        auto validator = [&](const Params& params) {
            ModelScorer<float> scorer(params, target.catalog, ft, vocab);
            return evaluate(scorer, valid_instances, {10}, filter ? &trained : nullptr, "valid").at_k.at(10).ndcg;
        };
        finetune<float>(st, split.train, train_config(cfg, Stage::finetune), ft, vocab, validator);

        ModelScorer<float> scorer(st.params, target.catalog, ft, vocab);
        auto report = evaluate(scorer, test_instances, cfg.eval_ks, filter ? &trained : nullptr, "ablate");
        report.config_fingerprint = config_fingerprint(cfg, "ablate");
        nlohmann::json entry = report.to_json();
        entry["variant"] = variant.label;
        table["variants"].push_back(entry);
        results.emplace_back(variant.label, std::move(report));
    }
    table["config_fingerprint"] = to_hex(config_fingerprint(cfg, "ablate"));

    // side-by-side text table
    std::cout << "metric";
    for (const auto& [label, r] : results) std::cout << "\t" << label;
    std::cout << "\n";
    for (int k : cfg.eval_ks) {
        std::cout << "HR@" << k;
        for (const auto& [label, r] : results) std::cout << "\t" << r.at_k.at(k).hr;
        std::cout << "\nNDCG@" << k;
        for (const auto& [label, r] : results) std::cout << "\t" << r.at_k.at(k).ndcg;
        std::cout << "\n";
    }
    emit_report(cfg, "ablate_report.json", table);
    return 0;
}

}  // namespace cli_detail

/// Command-line entry point; returns the process exit code
/// (0 success, 1 runtime failure, 2 configuration error).
inline int run_cli(std::vector<std::string> args) {
    CLI::App app{"sequential recommendation as language modeling over item texts"};
    app.require_subcommand(0, 1);

    std::string config_path;
    std::optional<std::uint64_t> seed_override;
    std::string out_override;
    bool print_config = false;
    bool from_scratch = false;
    bool resume = false;

    app.add_flag("--print-config", print_config, "print the full default configuration and exit");

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "JSON config file");
        sub->add_option("--seed", seed_override, "override the global seed");
        sub->add_option("--out", out_override, "override the output directory");
    };
    CLI::App* synth = app.add_subcommand("synth", "generate a synthetic multi-domain corpus");
    CLI::App* ingest = app.add_subcommand("ingest", "validate a corpus and report post-filter statistics");
    CLI::App* pre = app.add_subcommand("pretrain", "masked item text prediction pre-training");
    CLI::App* fine = app.add_subcommand("finetune", "target-domain fine-tuning with early stopping");
    CLI::App* ev = app.add_subcommand("eval", "leave-one-out evaluation with sampled negatives");
    CLI::App* zs = app.add_subcommand("zeroshot", "evaluation on a domain without target-domain training");
    CLI::App* rr = app.add_subcommand("rerank", "rerank retriever candidates at several candidate sizes");
    CLI::App* rb = app.add_subcommand("robustness", "next-k temporal robustness evaluation");
    CLI::App* ab = app.add_subcommand("ablate", "train and compare textualization variants");
    for (CLI::App* sub : {synth, ingest, pre, fine, ev, zs, rr, rb, ab}) add_common(sub);
    pre->add_flag("--resume", resume, "continue from an existing checkpoint and log");
    fine->add_flag("--from-scratch", from_scratch, "skip the pretrained checkpoint (single-domain arm)");

    std::vector<const char*> argv;
    argv.push_back("textrec");
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (print_config) {
            RunConfig defaults;
            std::cout << defaults.to_json().dump(2) << "\n";
            return 0;
        }
        if (app.get_subcommands().empty()) {
            std::cout << app.help();
            return 0;
        }
        RunConfig cfg = config_path.empty() ? RunConfig() : RunConfig::load(config_path);
        if (seed_override) cfg.seed = *seed_override;
        if (!out_override.empty()) cfg.out_dir = out_override;

        CLI::App* sub = app.get_subcommands().front();
        const std::string name = sub->get_name();
        if (name == "synth") return cli_detail::cmd_synth(cfg);
        if (name == "ingest") return cli_detail::cmd_ingest(cfg);
        if (name == "pretrain") return cli_detail::cmd_pretrain(cfg, resume);
        if (name == "finetune") return cli_detail::cmd_finetune(cfg, from_scratch);
        if (name == "eval") return cli_detail::cmd_eval(cfg);
        if (name == "zeroshot") return cli_detail::cmd_zeroshot(cfg);
        if (name == "rerank") return cli_detail::cmd_rerank(cfg);
        if (name == "robustness") return cli_detail::cmd_robustness(cfg);
        if (name == "ablate") return cli_detail::cmd_ablate(cfg);
        throw ConfigError("unknown command " + name);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

inline int run_cli(int argc, char** argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run_cli(std::move(args));
}

}  // namespace textrec
