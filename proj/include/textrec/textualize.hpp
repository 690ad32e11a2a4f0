#pragma once

#include <algorithm>
#include <cstdio>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "textrec/corpus.hpp"

namespace textrec {

enum class Stage { pretrain, finetune };

enum class Level { very_low, low, medium, high, very_high };

inline const char* level_name(Level l) {
    switch (l) {
        case Level::very_low: return "very_low";
        case Level::low: return "low";
        case Level::medium: return "medium";
        case Level::high: return "high";
        case Level::very_high: return "very_high";
    }
    return "?";
}

/// Quality indicators of one textual attribute, plus its coarse-to-fine rank
/// and the training stage(s) it participates in.
struct AttributeProfile {
    std::string name;
    Level naturalness;
    Level domain_consistency;
    Level informativeness;
    Level noise_ambiguity;
    Level text_length;
    int granularity_rank;  // lower = coarser
    enum class Usage { pretrain_and_tune, tune_only } usage;
};

/// The five shipped attribute profiles.
inline const std::vector<AttributeProfile>& default_profiles() {
    static const std::vector<AttributeProfile> profiles = {
        {"title", Level::high, Level::high, Level::high, Level::medium, Level::high, 1,
         AttributeProfile::Usage::pretrain_and_tune},
        {"category", Level::medium, Level::high, Level::medium, Level::medium, Level::low, 0,
         AttributeProfile::Usage::pretrain_and_tune},
        {"brand", Level::medium, Level::medium, Level::medium, Level::low, Level::medium, 2,
         AttributeProfile::Usage::tune_only},
        {"price", Level::low, Level::medium, Level::medium, Level::very_low, Level::low, 3,
         AttributeProfile::Usage::tune_only},
        {"description", Level::high, Level::medium, Level::high, Level::high, Level::very_high, 4,
         AttributeProfile::Usage::tune_only},
    };
    return profiles;
}

inline const AttributeProfile& profile_of(const std::string& name) {
    for (const auto& p : default_profiles())
        if (p.name == name) return p;
    throw std::runtime_error("unknown attribute: " + name);
}

/// Orders a set of attributes coarse-to-fine by granularity rank.
inline std::vector<std::string> order_attributes(const std::vector<std::string>& names) {
    std::vector<std::string> out = names;
    for (const auto& n : out) profile_of(n);  // unknown -> error
    std::sort(out.begin(), out.end(),
              [](const std::string& a, const std::string& b) { return profile_of(a).granularity_rank < profile_of(b).granularity_rank; });
    return out;
}

/// Attribute selection, ordering, templates and caps for one training stage.
struct TextualizationConfig {
    Stage stage = Stage::pretrain;
    std::vector<std::string> attributes;              // render order
    std::map<std::string, std::string> templates;     // attribute -> template with "{}" placeholder
    std::string delimiter = ", ";
    std::string prompt_prefix = "Given the following purchase history of user: ";
    std::string prompt_suffix = ", predict masked item purchased by the user?";
    int item_token_cap = 40;
    int sequence_token_cap = 512;

    // Title renders bare; every other attribute as "(name: value)".
    std::string template_for(const std::string& attr) const {
        auto it = templates.find(attr);
        if (it != templates.end()) return it->second;
        if (attr == "title") return "{}";
        return "(" + attr + ": {})";
    }
};

/// Stage defaults: pretraining uses [category, title], fine-tuning adds the
/// domain property text (brand, price, description); always coarse-to-fine.
inline TextualizationConfig default_config(Stage stage) {
    TextualizationConfig cfg;
    cfg.stage = stage;
    for (const auto& p : default_profiles()) {
        if (stage == Stage::pretrain && p.usage != AttributeProfile::Usage::pretrain_and_tune) continue;
        cfg.attributes.push_back(p.name);
    }
    cfg.attributes = order_attributes(cfg.attributes);
    return cfg;
}

namespace detail {

inline std::string render_template(const std::string& tmpl, const std::string& value) {
    const auto pos = tmpl.find("{}");
    if (pos == std::string::npos) throw std::runtime_error("attribute template missing {} placeholder: " + tmpl);
    return tmpl.substr(0, pos) + value + tmpl.substr(pos + 2);
}

inline std::string price_text(double p) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", p);
    return buf;
}

}  // namespace detail

inline const std::string* attribute_value(const Item& item, const std::string& attr, std::string& scratch) {
    if (attr == "category") return item.category ? &*item.category : nullptr;
    if (attr == "title") return item.title ? &*item.title : nullptr;
    if (attr == "brand") return item.brand ? &*item.brand : nullptr;
    if (attr == "description") return item.description ? &*item.description : nullptr;
    if (attr == "price") {
        if (!item.price) return nullptr;
        scratch = detail::price_text(*item.price);
        return &scratch;
    }
    throw std::runtime_error("unknown attribute: " + attr);
}

/// Renders an item's textual representation: attribute segments in config
/// order, single-space separated; absent attributes are omitted entirely.
inline std::string item_text(const Item& item, const TextualizationConfig& cfg) {
    std::string out;
    for (const auto& attr : cfg.attributes) {
        std::string scratch;
        const std::string* value = attribute_value(item, attr, scratch);
        if (!value) continue;
        std::string segment = detail::render_template(cfg.template_for(attr), *value);
        if (!out.empty()) out.push_back(' ');
        out += segment;
    }
    if (out.empty())
        throw std::runtime_error("item " + item.item_id + ": all selected attributes absent");
    return out;
}

/// Assembles the prompted text sequence. Mask positions are 0-based slot
/// indices; index == item_texts.size() appends a trailing sentinel slot.
/// Sentinels are numbered 0,1,2,... left to right.
inline std::string sequence_text(const std::vector<std::string>& item_texts, const std::set<std::size_t>& mask_positions,
                                 const TextualizationConfig& cfg) {
    if (item_texts.empty()) throw std::runtime_error("sequence_text: empty item list");
    std::size_t n_slots = item_texts.size();
    if (mask_positions.count(item_texts.size())) ++n_slots;
    for (auto p : mask_positions)
        if (p > item_texts.size()) throw std::runtime_error("sequence_text: mask position out of range");
    std::string out = cfg.prompt_prefix;
    int sentinel = 0;
    for (std::size_t i = 0; i < n_slots; ++i) {
        if (i) out += cfg.delimiter;
        if (mask_positions.count(i)) {
            out += "<extra_id_" + std::to_string(sentinel++) + ">";
        } else {
            out += item_texts[i];
        }
    }
    out += cfg.prompt_suffix;
    return out;
}

}  // namespace textrec
