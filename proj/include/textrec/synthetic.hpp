#pragma once

#include <cstdio>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "textrec/common.hpp"
#include "textrec/corpus.hpp"

namespace textrec {

struct SyntheticConfig {
    int n_domains = 3;
    int n_users = 1000;  // per domain
    int n_items_per_domain = 2000;
    int n_clusters_per_domain = 8;
    int seq_len_min = 14;
    int seq_len_max = 18;
    double title_collision_rate = 0.0;
    double transition_concentration = 0.2;
    std::uint64_t seed = 42;

    void validate() const {
        if (n_domains < 1 || n_users < 1 || n_items_per_domain < 1 || n_clusters_per_domain < 1)
            throw std::runtime_error("synthetic config: counts must be positive");
        if (n_clusters_per_domain > n_items_per_domain)
            throw std::runtime_error("synthetic config: more clusters than items");
        if (seq_len_min < 1 || seq_len_min > seq_len_max)
            throw std::runtime_error("synthetic config: invalid sequence length range");
        if (title_collision_rate < 0.0 || title_collision_rate > 1.0)
            throw std::runtime_error("synthetic config: title_collision_rate out of [0,1]");
        if (transition_concentration <= 0.0)
            throw std::runtime_error("synthetic config: transition_concentration must be positive");
    }

    nlohmann::json to_json() const {
        return {{"n_domains", n_domains},
                {"n_users", n_users},
                {"n_items_per_domain", n_items_per_domain},
                {"n_clusters_per_domain", n_clusters_per_domain},
                {"seq_len_min", seq_len_min},
                {"seq_len_max", seq_len_max},
                {"title_collision_rate", title_collision_rate},
                {"transition_concentration", transition_concentration},
                {"seed", seed}};
    }
};

struct SyntheticOutput {
    Catalog catalog;
    std::vector<Interaction> interactions;
    nlohmann::json manifest;
};

namespace detail {

inline std::string make_word(Rng& rng, std::set<std::string>& used) {
    static const char* consonants = "bcdfgklmnprstvz";
    static const char* vowels = "aeiou";
    while (true) {
        std::string w;
        const int syllables = static_cast<int>(rng.uniform_int(2, 3));
        for (int s = 0; s < syllables; ++s) {
            w.push_back(consonants[rng.uniform_index(15)]);
            w.push_back(vowels[rng.uniform_index(5)]);
        }
        if (rng.bernoulli(0.3)) w.push_back(consonants[rng.uniform_index(15)]);
        if (used.insert(w).second) return w;
    }
}

inline std::vector<std::string> make_words(Rng& rng, std::set<std::string>& used, int n) {
    std::vector<std::string> v;
    v.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) v.push_back(make_word(rng, used));
    return v;
}

}  // namespace detail

/// Generates a multi-domain corpus with planted, learnable structure:
/// items are partitioned into clusters with distinctive title vocabularies
/// (drawn from global word pools shared across domains), categories name a
/// coarse pool group, and user sequences follow a per-domain first-order
/// Markov chain over clusters with Dirichlet-sampled rows. A
/// title_collision_rate fraction of items take their title from a different
/// cluster's pool while keeping cluster-true brand and description.
/// Fully deterministic given the config (including seed).
inline SyntheticOutput generate_synthetic(const SyntheticConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    SyntheticOutput out;

    const int K = cfg.n_clusters_per_domain;
    const int kPoolWords = 40;
    const int kBrandsPerCluster = 4;

    std::set<std::string> used_words;
    std::vector<std::vector<std::string>> pools;
    for (int g = 0; g < K; ++g) pools.push_back(detail::make_words(rng, used_words, kPoolWords));
    const int n_groups = (K + 1) / 2;
    std::vector<std::string> group_words = detail::make_words(rng, used_words, n_groups);
    std::vector<std::string> common_words = detail::make_words(rng, used_words, 20);

    nlohmann::json manifest;
    manifest["config"] = cfg.to_json();
    manifest["pools"] = pools;
    manifest["pool_groups"] = group_words;
    manifest["domains"] = nlohmann::json::array();

    for (int d = 0; d < cfg.n_domains; ++d) {
        const std::string dom = "d" + std::to_string(d);

        std::vector<int> cluster_pool(static_cast<std::size_t>(K));
        for (int c = 0; c < K; ++c) cluster_pool[static_cast<std::size_t>(c)] = c;
        rng.shuffle(cluster_pool);

        std::vector<std::vector<std::string>> brands;
        for (int c = 0; c < K; ++c) brands.push_back(detail::make_words(rng, used_words, kBrandsPerCluster));

        std::vector<std::vector<double>> transition;
        for (int c = 0; c < K; ++c)
            transition.push_back(rng.dirichlet(cfg.transition_concentration, static_cast<std::size_t>(K)));

        std::vector<std::vector<std::size_t>> cluster_items(static_cast<std::size_t>(K));
        nlohmann::json item_clusters = nlohmann::json::object();
        for (int j = 0; j < cfg.n_items_per_domain; ++j) {
            const int c = j % K;
            const int pool = cluster_pool[static_cast<std::size_t>(c)];
            Item item;
            item.item_id = dom + "_i" + std::to_string(j);
            item.domain = dom;
            item.category = group_words[static_cast<std::size_t>(pool / 2)];

            int title_pool = pool;
            if (K > 1 && rng.bernoulli(cfg.title_collision_rate)) {
                int other = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(K - 1)));
                if (other >= c) ++other;
                title_pool = cluster_pool[static_cast<std::size_t>(other)];
            }
            const auto& tp = pools[static_cast<std::size_t>(title_pool)];
            const int title_len = static_cast<int>(rng.uniform_int(2, 3));
            std::string title;
            for (int w = 0; w < title_len; ++w) {
                if (w) title.push_back(' ');
                title += tp[rng.uniform_index(tp.size())];
            }
            item.title = title;
            item.brand = brands[static_cast<std::size_t>(c)][rng.uniform_index(kBrandsPerCluster)];
            item.price = std::round(std::exp(rng.uniform(std::log(1.0), std::log(500.0))) * 100.0) / 100.0;

            const auto& dp = pools[static_cast<std::size_t>(pool)];
            const int desc_len = static_cast<int>(rng.uniform_int(4, 6));
            std::string desc;
            for (int w = 0; w < desc_len; ++w) {
                if (w) desc.push_back(' ');
                if (rng.bernoulli(0.7))
                    desc += dp[rng.uniform_index(dp.size())];
                else
                    desc += common_words[rng.uniform_index(common_words.size())];
            }
            item.description = desc;

            cluster_items[static_cast<std::size_t>(c)].push_back(out.catalog.size());
            item_clusters[item.item_id] = c;
            out.catalog.add(std::move(item));
        }

        for (int u = 0; u < cfg.n_users; ++u) {
            const std::string user = dom + "_u" + std::to_string(u);
            const int len = static_cast<int>(rng.uniform_int(cfg.seq_len_min, cfg.seq_len_max));
            int c = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(K)));
            for (int t = 0; t < len; ++t) {
                const auto& members = cluster_items[static_cast<std::size_t>(c)];
                const auto& item = out.catalog.items()[members[rng.uniform_index(members.size())]];
                out.interactions.push_back({user, item.item_id, t});
                const auto& row = transition[static_cast<std::size_t>(c)];
                double r = rng.uniform();
                int next = K - 1;
                for (int cc = 0; cc < K; ++cc) {
                    r -= row[static_cast<std::size_t>(cc)];
                    if (r < 0.0) {
                        next = cc;
                        break;
                    }
                }
                c = next;
            }
        }

        manifest["domains"].push_back({{"name", dom},
                                       {"cluster_pool", cluster_pool},
                                       {"transition", transition},
                                       {"item_clusters", item_clusters}});
    }
    out.manifest = std::move(manifest);
    return out;
}

inline void write_items_file(const Catalog& catalog, const std::string& path) {
    std::ofstream outf(path, std::ios::binary);
    if (!outf) throw std::runtime_error("cannot write " + path);
    for (const auto& it : catalog.items()) {
        nlohmann::json j;
        j["item_id"] = it.item_id;
        j["domain"] = it.domain;
        if (it.category) j["category"] = *it.category;
        if (it.title) j["title"] = *it.title;
        if (it.brand) j["brand"] = *it.brand;
        if (it.price) j["price"] = *it.price;
        if (it.description) j["description"] = *it.description;
        outf << j.dump() << "\n";
    }
}

inline void write_interactions_file(const std::vector<Interaction>& interactions, const std::string& path) {
    std::ofstream outf(path, std::ios::binary);
    if (!outf) throw std::runtime_error("cannot write " + path);
    for (const auto& ev : interactions) {
        nlohmann::json j;
        j["user_id"] = ev.user_id;
        j["item_id"] = ev.item_id;
        j["timestamp"] = ev.timestamp;
        outf << j.dump() << "\n";
    }
}

}  // namespace textrec
