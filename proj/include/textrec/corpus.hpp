#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "textrec/common.hpp"

namespace textrec {

struct Item {
    std::string item_id;
    std::string domain;
    std::optional<std::string> category;
    std::optional<std::string> title;
    std::optional<std::string> brand;
    std::optional<double> price;
    std::optional<std::string> description;

    void validate() const {
        if (item_id.empty()) throw std::runtime_error("item: empty item_id");
        if (domain.empty()) throw std::runtime_error("item " + item_id + ": empty domain");
        if (!category && !title) throw std::runtime_error("item " + item_id + ": needs at least one of category/title");
        if (price && *price < 0.0) throw std::runtime_error("item " + item_id + ": negative price");
    }
};

struct Interaction {
    std::string user_id;
    std::string item_id;
    std::int64_t timestamp = 0;
};

/// Time-ordered interaction list of one user (ties broken by input order).
struct UserSequence {
    std::string user_id;
    std::vector<std::string> items;
};

/// Item catalog with deterministic (insertion-order) iteration.
class Catalog {
public:
    void add(Item item) {
        item.validate();
        if (index_.count(item.item_id)) throw std::runtime_error("catalog: duplicate item_id " + item.item_id);
        index_.emplace(item.item_id, items_.size());
        items_.push_back(std::move(item));
    }

    bool contains(const std::string& id) const { return index_.count(id) != 0; }

    const Item& at(const std::string& id) const {
        auto it = index_.find(id);
        if (it == index_.end()) throw std::runtime_error("catalog: unknown item_id " + id);
        return items_[it->second];
    }

    const std::vector<Item>& items() const { return items_; }
    std::size_t size() const { return items_.size(); }

private:
    std::vector<Item> items_;
    std::unordered_map<std::string, std::size_t> index_;
};

struct Dataset {
    Catalog catalog;
    std::vector<UserSequence> sequences;
    std::string domain;  // empty when mixed

    std::size_t interaction_count() const {
        std::size_t n = 0;
        for (const auto& s : sequences) n += s.items.size();
        return n;
    }

    void validate() const {
        for (const auto& s : sequences) {
            if (s.items.empty()) throw std::runtime_error("dataset: empty sequence for user " + s.user_id);
            for (const auto& id : s.items)
                if (!catalog.contains(id)) throw std::runtime_error("dataset: sequence item " + id + " missing from catalog");
        }
    }
};

namespace detail {

inline nlohmann::json parse_record(const std::string& line, const char* what, std::size_t line_no) {
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object())
        throw std::runtime_error(std::string(what) + ": line " + std::to_string(line_no) + ": malformed record");
    return j;
}

inline void reject_unknown_fields(const nlohmann::json& j, const std::vector<std::string>& allowed, const char* what,
                                  std::size_t line_no) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
            throw std::runtime_error(std::string(what) + ": line " + std::to_string(line_no) + ": unknown field '" + it.key() + "'");
    }
}

}  // namespace detail

/// Loads a catalog from a UTF-8 file with one JSON object per line.
inline Catalog load_items(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_items: cannot read " + path);
    Catalog cat;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j = detail::parse_record(line, "items", line_no);
        detail::reject_unknown_fields(j, {"item_id", "domain", "category", "title", "brand", "price", "description"}, "items",
                                      line_no);
        Item item;
        try {
            item.item_id = j.at("item_id").get<std::string>();
            item.domain = j.at("domain").get<std::string>();
            if (j.contains("category")) item.category = j["category"].get<std::string>();
            if (j.contains("title")) item.title = j["title"].get<std::string>();
            if (j.contains("brand")) item.brand = j["brand"].get<std::string>();
            if (j.contains("price")) item.price = j["price"].get<double>();
            if (j.contains("description")) item.description = j["description"].get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error("items: line " + std::to_string(line_no) + ": " + e.what());
        }
        try {
            cat.add(std::move(item));
        } catch (const std::exception& e) {
            throw std::runtime_error("items: line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return cat;
}

/// Loads interactions and groups them into per-user sequences sorted by
/// timestamp (stable on ties). An empty file yields an empty dataset.
inline Dataset load_interactions(const std::string& path, Catalog catalog) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_interactions: cannot read " + path);
    std::vector<Interaction> events;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j = detail::parse_record(line, "interactions", line_no);
        detail::reject_unknown_fields(j, {"user_id", "item_id", "timestamp"}, "interactions", line_no);
        Interaction ev;
        try {
            ev.user_id = j.at("user_id").get<std::string>();
            ev.item_id = j.at("item_id").get<std::string>();
            ev.timestamp = j.at("timestamp").get<std::int64_t>();
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error("interactions: line " + std::to_string(line_no) + ": " + e.what());
        }
        if (!catalog.contains(ev.item_id))
            throw std::runtime_error("interactions: line " + std::to_string(line_no) + ": unknown item_id " + ev.item_id);
        events.push_back(std::move(ev));
    }

    Dataset ds;
    ds.catalog = std::move(catalog);
    std::unordered_map<std::string, std::size_t> user_index;
    std::vector<std::vector<std::pair<std::int64_t, std::string>>> per_user;
    std::vector<std::string> user_order;
    for (auto& ev : events) {
        auto it = user_index.find(ev.user_id);
        if (it == user_index.end()) {
            it = user_index.emplace(ev.user_id, per_user.size()).first;
            per_user.emplace_back();
            user_order.push_back(ev.user_id);
        }
        per_user[it->second].emplace_back(ev.timestamp, std::move(ev.item_id));
    }
    for (std::size_t u = 0; u < per_user.size(); ++u) {
        auto& evs = per_user[u];
        std::stable_sort(evs.begin(), evs.end(),
                         [](const auto& a, const auto& b) { return a.first < b.first; });
        UserSequence seq;
        seq.user_id = user_order[u];
        for (auto& [t, id] : evs) seq.items.push_back(std::move(id));
        ds.sequences.push_back(std::move(seq));
    }

    std::string domain;
    bool mixed = false;
    for (const auto& it : ds.catalog.items()) {
        if (domain.empty())
            domain = it.domain;
        else if (domain != it.domain)
            mixed = true;
    }
    ds.domain = mixed ? std::string() : domain;
    return ds;
}

/// Splits a mixed-domain dataset into one dataset per domain, in first-seen
/// catalog order. A user whose sequence spans domains is rejected.
inline std::vector<Dataset> partition_by_domain(const Dataset& ds) {
    std::vector<std::string> order;
    std::map<std::string, Dataset> parts;
    for (const auto& item : ds.catalog.items()) {
        if (!parts.count(item.domain)) {
            order.push_back(item.domain);
            parts[item.domain].domain = item.domain;
        }
        parts[item.domain].catalog.add(item);
    }
    for (const auto& seq : ds.sequences) {
        const std::string& d = ds.catalog.at(seq.items.front()).domain;
        for (const auto& id : seq.items)
            if (ds.catalog.at(id).domain != d)
                throw std::runtime_error("partition_by_domain: user " + seq.user_id + " spans multiple domains");
        parts[d].sequences.push_back(seq);
    }
    std::vector<Dataset> out;
    for (const auto& d : order) out.push_back(std::move(parts[d]));
    return out;
}

/// Iterative k-core: removes users and items with fewer than k interactions
/// until a fixpoint. The result is the maximal subgraph where every surviving
/// user and item has at least k interactions; it may be empty.
inline Dataset kcore_filter(const Dataset& ds, std::size_t k) {
    if (k < 1) throw std::invalid_argument("kcore_filter: k must be >= 1");
    std::vector<UserSequence> seqs = ds.sequences;
    bool changed = true;
    std::unordered_map<std::string, std::size_t> item_count;
    while (changed) {
        changed = false;
        std::vector<UserSequence> kept;
        kept.reserve(seqs.size());
        for (auto& s : seqs) {
            if (s.items.size() >= k)
                kept.push_back(std::move(s));
            else if (!s.items.empty())
                changed = true;
        }
        seqs = std::move(kept);
        item_count.clear();
        for (const auto& s : seqs)
            for (const auto& id : s.items) ++item_count[id];
        for (auto& s : seqs) {
            auto keep_end = std::remove_if(s.items.begin(), s.items.end(),
                                           [&](const std::string& id) { return item_count[id] < k; });
            if (keep_end != s.items.end()) {
                s.items.erase(keep_end, s.items.end());
                changed = true;
            }
        }
    }
    Dataset out;
    out.domain = ds.domain;
    for (const auto& item : ds.catalog.items()) {
        auto it = item_count.find(item.item_id);
        if (it != item_count.end() && it->second >= k) out.catalog.add(item);
    }
    for (auto& s : seqs)
        if (!s.items.empty()) out.sequences.push_back(std::move(s));
    return out;
}

/// One held-out prediction instance: history, target, and the target's
/// position (= history length) within the user's original sequence.
struct HeldOut {
    std::string user_id;
    std::vector<std::string> history;
    std::string target;
    std::size_t position = 0;
};

struct LeaveOneOutSplit {
    Dataset train;
    std::vector<HeldOut> valid;
    std::vector<HeldOut> test;
    std::size_t train_only_users = 0;  // sequences too short to split
};

/// Last item per user becomes the test target, second-to-last the validation
/// target; the remaining prefix trains. Sequences shorter than 3 stay train-only.
inline LeaveOneOutSplit leave_one_out_split(const Dataset& ds) {
    LeaveOneOutSplit split;
    split.train.catalog = ds.catalog;
    split.train.domain = ds.domain;
    for (const auto& s : ds.sequences) {
        const std::size_t n = s.items.size();
        if (n < 3) {
            split.train.sequences.push_back(s);
            ++split.train_only_users;
            continue;
        }
        UserSequence prefix{s.user_id, {s.items.begin(), s.items.end() - 2}};
        split.train.sequences.push_back(std::move(prefix));
        split.valid.push_back({s.user_id, {s.items.begin(), s.items.end() - 2}, s.items[n - 2], n - 2});
        split.test.push_back({s.user_id, {s.items.begin(), s.items.end() - 1}, s.items[n - 1], n - 1});
    }
    return split;
}

struct NextKSplit {
    Dataset train;
    std::vector<std::vector<HeldOut>> tests;  // tests[j-1] holds the j-th withheld item
};

/// Withholds the last k items per user. test_j's history teacher-forces the
/// ground-truth withheld items 1..j-1 onto the train prefix.
inline NextKSplit next_k_split(const Dataset& ds, std::size_t k) {
    if (k < 1) throw std::invalid_argument("next_k_split: k must be >= 1");
    NextKSplit split;
    split.train.catalog = ds.catalog;
    split.train.domain = ds.domain;
    split.tests.resize(k);
    for (const auto& s : ds.sequences) {
        const std::size_t n = s.items.size();
        if (n < k + 1) {
            split.train.sequences.push_back(s);
            continue;
        }
        UserSequence prefix{s.user_id, {s.items.begin(), s.items.end() - static_cast<std::ptrdiff_t>(k)}};
        split.train.sequences.push_back(std::move(prefix));
        for (std::size_t j = 0; j < k; ++j) {
            const std::size_t target_pos = n - k + j;
            split.tests[j].push_back(
                {s.user_id, {s.items.begin(), s.items.begin() + static_cast<std::ptrdiff_t>(target_pos)}, s.items[target_pos],
                 target_pos});
        }
    }
    return split;
}

/// One instance per position p >= 2 of every sequence (history = items before p).
inline std::vector<HeldOut> zero_shot_instances(const Dataset& ds) {
    std::vector<HeldOut> out;
    for (const auto& s : ds.sequences) {
        for (std::size_t p = 1; p < s.items.size(); ++p) {
            out.push_back({s.user_id, {s.items.begin(), s.items.begin() + static_cast<std::ptrdiff_t>(p)}, s.items[p], p});
        }
    }
    return out;
}

}  // namespace textrec
