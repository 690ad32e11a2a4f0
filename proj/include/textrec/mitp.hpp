#pragma once

#include <chrono>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "textrec/corpus.hpp"
#include "textrec/model.hpp"
#include "textrec/textualize.hpp"
#include "textrec/tokenizer.hpp"

namespace textrec {

struct TrainConfig {
    Stage stage = Stage::pretrain;
    double mask_ratio = 0.1;
    double last_only_fraction = 0.1;
    int batch_size = 128;       // fine-tuning runs use 64
    int epochs = 20;
    AdamWConfig optimizer;      // lr 3e-4, betas (0.9, 0.999), eps 1e-8, wd 0.01
    int patience = 3;           // fine-tuning early stop, in evaluations
    std::uint64_t seed = 42;
    std::map<std::string, double> domain_weights;  // empty: proportional to interactions

    void validate() const {
        if (mask_ratio <= 0.0 || mask_ratio > 1.0) throw std::runtime_error("train config: mask_ratio out of (0,1]");
        if (last_only_fraction < 0.0 || last_only_fraction > 1.0)
            throw std::runtime_error("train config: last_only_fraction out of [0,1]");
        if (batch_size < 1) throw std::runtime_error("train config: batch_size must be positive");
        if (epochs < 0) throw std::runtime_error("train config: epochs must be non-negative");
        if (patience < 1) throw std::runtime_error("train config: patience must be positive");
    }
};

struct MITPSample {
    std::vector<int> encoder_ids;
    std::vector<int> target_ids;
    std::string user_id;
    std::vector<std::size_t> masked_positions;  // 0-based, ascending
    bool last_only = false;                     // sample came from the mask-last-only draw
};

namespace detail {

struct SequenceSlot {
    std::vector<int> ids;
    bool masked = false;
    std::size_t position = 0;
};

}  // namespace detail

/// Tokenizes one item's staged text and truncates it to the per-item cap.
inline std::vector<int> item_tokens(const Item& item, const TextualizationConfig& tcfg, const Vocabulary& vocab) {
    std::vector<int> ids = encode(vocab, item_text(item, tcfg));
    if (ids.size() > static_cast<std::size_t>(tcfg.item_token_cap)) ids.resize(static_cast<std::size_t>(tcfg.item_token_cap));
    return ids;
}

/// Assembles the prompted encoder id sequence from per-slot token lists.
/// Masked slots render as their sentinel; if the assembly exceeds the sequence
/// cap, whole oldest unmasked slots are dropped until it fits. Returns the
/// encoder ids; `kept` receives the surviving slots in order.
inline std::vector<int> assemble_encoder_ids(std::vector<detail::SequenceSlot> slots, const TextualizationConfig& tcfg,
                                             const Vocabulary& vocab, std::vector<detail::SequenceSlot>* kept = nullptr) {
    const std::vector<int> prefix = encode(vocab, tcfg.prompt_prefix);
    const std::vector<int> suffix = encode(vocab, tcfg.prompt_suffix);
    const std::vector<int> delim = encode(vocab, tcfg.delimiter);

    auto total_len = [&] {
        std::size_t len = prefix.size() + suffix.size();
        for (const auto& s : slots) len += s.masked ? 1 : s.ids.size();
        if (!slots.empty()) len += delim.size() * (slots.size() - 1);
        return len;
    };
    while (total_len() > static_cast<std::size_t>(tcfg.sequence_token_cap)) {
        auto oldest_unmasked = std::find_if(slots.begin(), slots.end(), [](const auto& s) { return !s.masked; });
        if (oldest_unmasked == slots.end())
            throw std::runtime_error("mitp: masked items alone exceed the sequence token cap");
        slots.erase(oldest_unmasked);
    }

    std::vector<int> out = prefix;
    int sentinel = 0;
    for (std::size_t i = 0; i < slots.size(); ++i) {
        if (i) out.insert(out.end(), delim.begin(), delim.end());
        if (slots[i].masked) {
            out.push_back(Vocabulary::sentinel_id(sentinel++));
        } else {
            out.insert(out.end(), slots[i].ids.begin(), slots[i].ids.end());
        }
    }
    out.insert(out.end(), suffix.begin(), suffix.end());
    if (kept) *kept = std::move(slots);
    return out;
}

/// Builds one masked-item-text-prediction sample. With probability
/// last_only_fraction only the last item is masked; otherwise items are masked
/// independently at mask_ratio with a >=1 floor (falling back to the last item).
inline MITPSample build_mitp_sample(const UserSequence& seq, const Catalog& catalog, const TextualizationConfig& tcfg,
                                    const Vocabulary& vocab, const TrainConfig& cfg, Rng& rng) {
    const std::size_t n = seq.items.size();
    if (n < 2) throw std::runtime_error("mitp: sequence must have at least 2 items");

    MITPSample sample;
    sample.user_id = seq.user_id;
    sample.last_only = rng.bernoulli(cfg.last_only_fraction);
    std::set<std::size_t> masked;
    if (sample.last_only) {
        masked.insert(n - 1);
    } else {
        for (std::size_t i = 0; i < n; ++i)
            if (rng.bernoulli(cfg.mask_ratio)) masked.insert(i);
        if (masked.empty()) masked.insert(n - 1);
    }

    std::vector<detail::SequenceSlot> slots;
    for (std::size_t i = 0; i < n; ++i)
        slots.push_back({item_tokens(catalog.at(seq.items[i]), tcfg, vocab), masked.count(i) != 0, i});

    std::vector<detail::SequenceSlot> kept;
    sample.encoder_ids = assemble_encoder_ids(std::move(slots), tcfg, vocab, &kept);

    int sentinel = 0;
    for (const auto& slot : kept) {
        if (!slot.masked) continue;
        sample.target_ids.push_back(Vocabulary::sentinel_id(sentinel++));
        sample.target_ids.insert(sample.target_ids.end(), slot.ids.begin(), slot.ids.end());
        sample.masked_positions.push_back(slot.position);
    }
    sample.target_ids.push_back(Vocabulary::kEos);
    return sample;
}

/// One epoch's deterministic sampling plan: (dataset index, sequence index)
/// pairs, users drawn across domains proportionally to the configured weights
/// (default: interaction counts). Only sequences long enough for MITP count.
inline std::vector<std::pair<std::size_t, std::size_t>> epoch_plan(const std::vector<Dataset>& datasets,
                                                                   const TrainConfig& cfg, int epoch) {
    if (datasets.empty()) throw std::runtime_error("training stream: no datasets");
    std::vector<std::vector<std::size_t>> eligible(datasets.size());
    std::vector<double> weights(datasets.size(), 0.0);
    std::size_t epoch_size = 0;
    for (std::size_t d = 0; d < datasets.size(); ++d) {
        for (std::size_t u = 0; u < datasets[d].sequences.size(); ++u)
            if (datasets[d].sequences[u].items.size() >= 2) eligible[d].push_back(u);
        double w;
        if (cfg.domain_weights.empty()) {
            w = static_cast<double>(datasets[d].interaction_count());
        } else {
            auto it = cfg.domain_weights.find(datasets[d].domain);
            w = it == cfg.domain_weights.end() ? 0.0 : it->second;
        }
        if (eligible[d].empty()) w = 0.0;
        weights[d] = w;
        if (w > 0.0) epoch_size += eligible[d].size();
    }
    double wsum = 0.0;
    for (double w : weights) wsum += w;
    if (wsum <= 0.0) throw std::runtime_error("training stream: no trainable sequences");

    Rng rng(combine_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    std::vector<std::pair<std::size_t, std::size_t>> plan;
    plan.reserve(epoch_size);
    for (std::size_t s = 0; s < epoch_size; ++s) {
        double r = rng.uniform() * wsum;
        std::size_t d = datasets.size() - 1;
        for (std::size_t i = 0; i < datasets.size(); ++i) {
            r -= weights[i];
            if (r < 0.0) {
                d = i;
                break;
            }
        }
        while (weights[d] <= 0.0) d = (d + 1) % datasets.size();
        plan.emplace_back(d, eligible[d][rng.uniform_index(eligible[d].size())]);
    }
    return plan;
}

/// One shared vocabulary for both stages, built from the superset (fine-tune
/// stage) item texts of the whole catalog plus the prompt strings.
inline Vocabulary build_pipeline_vocab(const Catalog& catalog, int min_freq, int max_size) {
    const TextualizationConfig superset = default_config(Stage::finetune);
    std::vector<std::string> texts;
    texts.reserve(catalog.size() + 3);
    for (const auto& item : catalog.items()) texts.push_back(item_text(item, superset));
    texts.push_back(superset.prompt_prefix);
    texts.push_back(superset.prompt_suffix);
    texts.push_back(superset.delimiter);
    return build_vocab(texts, min_freq, max_size);
}

struct EpochLog {
    int epoch = 0;
    double mean_loss = 0.0;
    std::optional<double> valid_ndcg10;
    double wall_seconds = 0.0;

    nlohmann::json to_json() const {
        nlohmann::json j{{"epoch", epoch}, {"mean_loss", mean_loss}, {"wall_seconds", wall_seconds}};
        if (valid_ndcg10) j["valid_ndcg10"] = *valid_ndcg10;
        return j;
    }
};

template <typename T>
struct TrainerState {
    Parameters<T> params;
    AdamWState<T> opt;
    int epochs_done = 0;
};

namespace detail {

template <typename T>
EpochLog run_epoch(TrainerState<T>& st, const std::vector<Dataset>& datasets, const TrainConfig& cfg,
                   const TextualizationConfig& tcfg, const Vocabulary& vocab, int epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    auto plan = epoch_plan(datasets, cfg, epoch);
    Rng sample_rng(combine_seed(combine_seed(cfg.seed, 0x6d61736bull), static_cast<std::uint64_t>(epoch)));
    Rng drop_rng(combine_seed(combine_seed(cfg.seed, 0x64726f70ull), static_cast<std::uint64_t>(epoch)));

    double loss_weighted = 0.0;
    std::size_t token_total = 0;
    for (std::size_t start = 0; start < plan.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
        const std::size_t end = std::min(plan.size(), start + static_cast<std::size_t>(cfg.batch_size));
        std::vector<std::vector<int>> enc_rows, tgt_rows;
        for (std::size_t i = start; i < end; ++i) {
            const auto& [d, u] = plan[i];
            auto sample = build_mitp_sample(datasets[d].sequences[u], datasets[d].catalog, tcfg, vocab, cfg, sample_rng);
            enc_rows.push_back(std::move(sample.encoder_ids));
            tgt_rows.push_back(std::move(sample.target_ids));
        }
        Batch batch;
        batch.encoder = TokenMatrix::from_rows(enc_rows);
        batch.target = TokenMatrix::from_rows(tgt_rows);
        GradResult<T> res;
        try {
            res = grad(st.params, batch, Mode::train, &drop_rng);
        } catch (const std::runtime_error& e) {
            throw std::runtime_error("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                                     std::to_string(start / static_cast<std::size_t>(cfg.batch_size)) + ": " + e.what());
        }
        adamw_step(st.params, res.grads, st.opt, cfg.optimizer);
        std::size_t tokens = 0;
        for (int id : batch.target.ids)
            if (id != kPadId) ++tokens;
        loss_weighted += res.loss * static_cast<double>(tokens);
        token_total += tokens;
    }
    EpochLog log;
    log.epoch = epoch;
    log.mean_loss = token_total ? loss_weighted / static_cast<double>(token_total) : 0.0;
    log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return log;
}

}  // namespace detail

/// Multi-domain MITP pre-training for the configured number of epochs.
/// Resuming from st.epochs_done > 0 continues the schedule deterministically.
template <typename T>
std::vector<EpochLog> pretrain(TrainerState<T>& st, const std::vector<Dataset>& datasets, const TrainConfig& cfg,
                               const TextualizationConfig& tcfg, const Vocabulary& vocab) {
    cfg.validate();
    std::vector<EpochLog> logs;
    for (int epoch = st.epochs_done + 1; epoch <= cfg.epochs; ++epoch) {
        logs.push_back(detail::run_epoch(st, datasets, cfg, tcfg, vocab, epoch));
        st.epochs_done = epoch;
    }
    return logs;
}

/// Target-domain fine-tuning with early stopping: after each epoch the
/// supplied validator scores the current parameters (NDCG@10 by protocol);
/// the best-scoring checkpoint is kept and training stops after `patience`
/// non-improving evaluations.
template <typename T>
std::vector<EpochLog> finetune(TrainerState<T>& st, const Dataset& train, const TrainConfig& cfg,
                               const TextualizationConfig& tcfg, const Vocabulary& vocab,
                               const std::function<double(const Parameters<T>&)>& valid_score) {
    cfg.validate();
    std::vector<Dataset> datasets{train};
    std::vector<EpochLog> logs;
    Parameters<T> best = st.params;
    double best_score = -std::numeric_limits<double>::infinity();
    int bad = 0;
    for (int epoch = st.epochs_done + 1; epoch <= cfg.epochs; ++epoch) {
        EpochLog log = detail::run_epoch(st, datasets, cfg, tcfg, vocab, epoch);
        st.epochs_done = epoch;
        const double score = valid_score(st.params);
        log.valid_ndcg10 = score;
        logs.push_back(log);
        if (score > best_score) {
            best_score = score;
            best = st.params;
            bad = 0;
        } else {
            ++bad;
        }
        if (bad >= cfg.patience) break;
    }
    st.params = std::move(best);
    return logs;
}

}  // namespace textrec
