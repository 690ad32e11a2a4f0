#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "textrec/rank.hpp"

namespace textrec {

struct EvalInstance {
    std::string user_id;
    std::vector<std::string> history;
    std::string positive;
    std::vector<std::string> negatives;
    std::string domain;
    std::size_t position = 0;

    void validate() const {
        std::set<std::string> negs(negatives.begin(), negatives.end());
        if (negs.size() != negatives.size()) throw std::runtime_error("eval instance: duplicate negatives");
        if (negs.count(positive)) throw std::runtime_error("eval instance: positive among negatives");
        for (const auto& h : history)
            if (negs.count(h)) throw std::runtime_error("eval instance: negative appears in history");
    }
};

struct KMetrics {
    double hr = 0.0;
    double ndcg = 0.0;
};

struct MetricsReport {
    std::string protocol;
    std::map<int, KMetrics> at_k;
    std::size_t n_instances = 0;
    std::uint64_t config_fingerprint = 0;
    std::optional<double> retriever_miss_rate;
    std::optional<double> decline;

    nlohmann::json to_json() const {
        nlohmann::json metrics = nlohmann::json::object();
        for (const auto& [k, m] : at_k) metrics[std::to_string(k)] = {{"hr", m.hr}, {"ndcg", m.ndcg}};
        nlohmann::json j{{"protocol", protocol},
                         {"metrics", metrics},
                         {"n_instances", n_instances},
                         {"config_fingerprint", to_hex(config_fingerprint)}};
        if (retriever_miss_rate) j["retriever_miss_rate"] = *retriever_miss_rate;
        if (decline) j["decline"] = *decline;
        return j;
    }
};

/// hr = 1 if rank <= k; ndcg = 1/log2(rank+1) if rank <= k (single relevant item).
inline KMetrics metric_at_k(std::size_t rank, int k) {
    if (rank < 1) throw std::runtime_error("metric_at_k: rank must be >= 1");
    KMetrics m;
    if (rank <= static_cast<std::size_t>(k)) {
        m.hr = 1.0;
        m.ndcg = 1.0 / std::log2(static_cast<double>(rank) + 1.0);
    }
    return m;
}

/// Uniform negatives without replacement from the instance's domain catalog,
/// excluding the positive and the user's full interaction history.
/// Deterministic per (seed, user_id, position).
inline EvalInstance sample_negatives(const HeldOut& held, const Dataset& domain_data,
                                     const std::set<std::string>& user_full_items, std::size_t n, std::uint64_t seed) {
    EvalInstance inst;
    inst.user_id = held.user_id;
    inst.history = held.history;
    inst.positive = held.target;
    inst.domain = domain_data.domain;
    inst.position = held.position;

    std::vector<std::string> eligible;
    eligible.reserve(domain_data.catalog.size());
    for (const auto& item : domain_data.catalog.items()) {
        if (item.item_id == held.target) continue;
        if (user_full_items.count(item.item_id)) continue;
        eligible.push_back(item.item_id);
    }
    if (eligible.size() < n)
        throw std::runtime_error("sample_negatives: domain " + domain_data.domain + " has only " +
                                 std::to_string(eligible.size()) + " eligible items, need " + std::to_string(n));
    Rng rng(combine_seed(combine_seed(seed, fnv1a64(held.user_id)), held.position));
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = i + rng.uniform_index(eligible.size() - i);
        std::swap(eligible[i], eligible[j]);
    }
    inst.negatives.assign(eligible.begin(), eligible.begin() + static_cast<std::ptrdiff_t>(n));
    inst.validate();
    return inst;
}

/// Candidate scorer interface shared by the model and the non-neural
/// baselines: lower scores rank earlier.
class Scorer {
public:
    virtual ~Scorer() = default;
    virtual std::vector<double> score(const std::vector<std::string>& history,
                                      const std::vector<std::string>& candidates) const = 0;
};

/// Perplexity scorer backed by model parameters; candidate texts are rendered
/// with the given stage config, tokenized and cached per item.
template <typename T>
class ModelScorer : public Scorer {
public:
    ModelScorer(const Parameters<T>& params, const Catalog& catalog, const TextualizationConfig& tcfg,
                const Vocabulary& vocab)
        : params_(params), catalog_(catalog), tcfg_(tcfg), vocab_(vocab) {}

    std::vector<double> score(const std::vector<std::string>& history,
                              const std::vector<std::string>& candidates) const override {
        ScoringContext ctx = build_scoring_context(history, catalog_, tcfg_, vocab_);
        std::vector<std::pair<std::string, std::vector<int>>> cands;
        cands.reserve(candidates.size());
        for (const auto& id : candidates) cands.emplace_back(id, tokens_for(id));
        auto scores = score_candidates(params_, ctx, cands);
        std::vector<double> out;
        out.reserve(scores.size());
        for (const auto& s : scores) out.push_back(s.perplexity);
        return out;
    }

private:
    const std::vector<int>& tokens_for(const std::string& id) const {
        auto it = cache_.find(id);
        if (it == cache_.end()) it = cache_.emplace(id, item_tokens(catalog_.at(id), tcfg_, vocab_)).first;
        return it->second;
    }

    const Parameters<T>& params_;
    const Catalog& catalog_;
    TextualizationConfig tcfg_;
    const Vocabulary& vocab_;
    mutable std::unordered_map<std::string, std::vector<int>> cache_;
};

/// Training-frequency baseline: frequent items first, ties by item_id.
class PopularityScorer : public Scorer {
public:
    explicit PopularityScorer(const Dataset& train) {
        for (const auto& s : train.sequences)
            for (const auto& id : s.items) ++freq_[id];
    }

    std::vector<double> score(const std::vector<std::string>&, const std::vector<std::string>& candidates) const override {
        std::vector<double> out;
        out.reserve(candidates.size());
        for (const auto& id : candidates) {
            auto it = freq_.find(id);
            out.push_back(it == freq_.end() ? 0.0 : -static_cast<double>(it->second));
        }
        return out;
    }

private:
    std::unordered_map<std::string, std::int64_t> freq_;
};

/// First-order item-to-item transition baseline with add-one smoothing;
/// backs off to popularity when the last history item was never seen.
class MarkovScorer : public Scorer {
public:
    explicit MarkovScorer(const Dataset& train) : popularity_(train), vocab_size_(train.catalog.size()) {
        for (const auto& s : train.sequences) {
            for (std::size_t i = 0; i + 1 < s.items.size(); ++i) {
                ++transitions_[s.items[i]][s.items[i + 1]];
                ++outgoing_[s.items[i]];
            }
        }
    }

    std::vector<double> score(const std::vector<std::string>& history,
                              const std::vector<std::string>& candidates) const override {
        if (history.empty()) return popularity_.score(history, candidates);
        const auto& last = history.back();
        auto out_it = outgoing_.find(last);
        if (out_it == outgoing_.end()) return popularity_.score(history, candidates);
        const double denom = static_cast<double>(out_it->second) + static_cast<double>(vocab_size_);
        const auto& row = transitions_.at(last);
        std::vector<double> out;
        out.reserve(candidates.size());
        for (const auto& id : candidates) {
            auto it = row.find(id);
            const double count = it == row.end() ? 0.0 : static_cast<double>(it->second);
            out.push_back(-(count + 1.0) / denom);
        }
        return out;
    }

private:
    PopularityScorer popularity_;
    std::size_t vocab_size_;
    std::unordered_map<std::string, std::unordered_map<std::string, std::int64_t>> transitions_;
    std::unordered_map<std::string, std::int64_t> outgoing_;
};

namespace detail {

inline std::size_t rank_of_positive(const Scorer& scorer, const EvalInstance& inst,
                                    const std::vector<std::string>& candidates) {
    auto scores = scorer.score(inst.history, candidates);
    std::vector<std::pair<std::string, double>> scored;
    scored.reserve(candidates.size());
    for (std::size_t i = 0; i < candidates.size(); ++i) scored.emplace_back(candidates[i], scores[i]);
    auto ranked = rank_by_score(std::move(scored), inst.positive);
    for (std::size_t i = 0; i < ranked.size(); ++i)
        if (ranked[i] == inst.positive) return i + 1;
    throw std::runtime_error("evaluate: positive missing from ranking");
}

inline std::vector<EvalInstance> canonical_order(std::vector<EvalInstance> instances) {
    std::sort(instances.begin(), instances.end(), [](const EvalInstance& a, const EvalInstance& b) {
        if (a.user_id != b.user_id) return a.user_id < b.user_id;
        return a.position < b.position;
    });
    return instances;
}

}  // namespace detail

/// Ranks every instance's positive among positive + negatives and averages
/// HR@k / NDCG@k. When `trained_items` is supplied, instances whose positive
/// never occurred in training are removed first.
inline MetricsReport evaluate(const Scorer& scorer, std::vector<EvalInstance> instances, const std::vector<int>& ks,
                              const std::unordered_set<std::string>* trained_items = nullptr,
                              const std::string& protocol = "eval") {
    instances = detail::canonical_order(std::move(instances));
    MetricsReport report;
    report.protocol = protocol;
    for (int k : ks) report.at_k[k] = {};
    for (const auto& inst : instances) {
        if (trained_items && !trained_items->count(inst.positive)) continue;
        std::vector<std::string> candidates;
        candidates.reserve(1 + inst.negatives.size());
        candidates.push_back(inst.positive);
        candidates.insert(candidates.end(), inst.negatives.begin(), inst.negatives.end());
        const std::size_t rank = detail::rank_of_positive(scorer, inst, candidates);
        for (int k : ks) {
            const KMetrics m = metric_at_k(rank, k);
            report.at_k[k].hr += m.hr;
            report.at_k[k].ndcg += m.ndcg;
        }
        ++report.n_instances;
    }
    if (report.n_instances > 0) {
        for (auto& [k, m] : report.at_k) {
            m.hr /= static_cast<double>(report.n_instances);
            m.ndcg /= static_cast<double>(report.n_instances);
        }
    }
    return report;
}

/// Reranking protocol: the retriever picks its top-m from the full domain
/// catalog (minus the user's earlier history); the model reranks those m.
/// A missed positive is force-included and counted in retriever_miss_rate.
inline MetricsReport rerank_protocol(const Scorer& model, const Scorer& retriever, std::vector<EvalInstance> instances,
                                     const Dataset& domain_data, std::size_t size, const std::vector<int>& ks) {
    instances = detail::canonical_order(std::move(instances));
    MetricsReport report;
    report.protocol = "rerank";
    for (int k : ks) report.at_k[k] = {};
    std::size_t misses = 0;
    for (const auto& inst : instances) {
        std::set<std::string> history_set(inst.history.begin(), inst.history.end());
        std::vector<std::string> pool;
        pool.reserve(domain_data.catalog.size());
        for (const auto& item : domain_data.catalog.items())
            if (item.item_id == inst.positive || !history_set.count(item.item_id)) pool.push_back(item.item_id);

        auto scores = retriever.score(inst.history, pool);
        std::vector<std::pair<std::string, double>> scored;
        scored.reserve(pool.size());
        for (std::size_t i = 0; i < pool.size(); ++i) scored.emplace_back(pool[i], scores[i]);
        auto retrieved = rank_by_score(std::move(scored));
        if (retrieved.size() > size) retrieved.resize(size);
        if (std::find(retrieved.begin(), retrieved.end(), inst.positive) == retrieved.end()) {
            ++misses;
            retrieved.back() = inst.positive;
        }

        const std::size_t rank = detail::rank_of_positive(model, inst, retrieved);
        for (int k : ks) {
            const KMetrics m = metric_at_k(rank, k);
            report.at_k[k].hr += m.hr;
            report.at_k[k].ndcg += m.ndcg;
        }
        ++report.n_instances;
    }
    if (report.n_instances > 0) {
        for (auto& [k, m] : report.at_k) {
            m.hr /= static_cast<double>(report.n_instances);
            m.ndcg /= static_cast<double>(report.n_instances);
        }
        report.retriever_miss_rate = static_cast<double>(misses) / static_cast<double>(report.n_instances);
    }
    return report;
}

struct RobustnessResult {
    std::vector<MetricsReport> per_j;
    std::optional<double> decline;  // relative NDCG@1 drop from j=1 to j=k
};

/// Evaluates each next-j test split independently and reports the relative
/// NDCG@1 decline between the first and last horizon.
inline RobustnessResult robustness_protocol(const Scorer& scorer, const std::vector<std::vector<EvalInstance>>& splits,
                                            const std::vector<int>& ks,
                                            const std::unordered_set<std::string>* trained_items = nullptr) {
    RobustnessResult out;
    for (std::size_t j = 0; j < splits.size(); ++j) {
        auto report = evaluate(scorer, splits[j], ks, trained_items, "robustness.next_" + std::to_string(j + 1));
        out.per_j.push_back(std::move(report));
    }
    if (!out.per_j.empty()) {
        auto it1 = out.per_j.front().at_k.find(1);
        auto itk = out.per_j.back().at_k.find(1);
        if (it1 != out.per_j.front().at_k.end() && itk != out.per_j.back().at_k.end() && it1->second.ndcg > 0.0)
            out.decline = (it1->second.ndcg - itk->second.ndcg) / it1->second.ndcg;
    }
    return out;
}

}  // namespace textrec
