#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "textrec/common.hpp"

namespace textrec {

/// Word-level vocabulary with the reserved ids the masked-span task needs:
/// PAD=0, EOS=1, UNK=2, <extra_id_0>..<extra_id_99> = 3..102, natural tokens
/// from 103 ordered by (descending frequency, then lexicographic).
class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kEos = 1;
    static constexpr int kUnk = 2;
    static constexpr int kSentinelBase = 3;
    static constexpr int kNumSentinels = 100;
    static constexpr int kFirstNatural = kSentinelBase + kNumSentinels;  // 103

    Vocabulary() {
        add_token("<pad>");
        add_token("</s>");
        add_token("<unk>");
        for (int i = 0; i < kNumSentinels; ++i) add_token(sentinel_text(i));
    }

    static std::string sentinel_text(int i) { return "<extra_id_" + std::to_string(i) + ">"; }

    static int sentinel_id(int i) { return kSentinelBase + i; }

    static bool is_sentinel(int id) { return id >= kSentinelBase && id < kFirstNatural; }

    int size() const { return static_cast<int>(id_to_token_.size()); }

    const std::string& token(int id) const {
        if (id < 0 || id >= size()) throw std::runtime_error("vocabulary: unassigned id " + std::to_string(id));
        return id_to_token_[static_cast<std::size_t>(id)];
    }

    int id_of(const std::string& tok) const {
        auto it = token_to_id_.find(tok);
        return it == token_to_id_.end() ? -1 : it->second;
    }

    void add_token(const std::string& tok) {
        token_to_id_.emplace(tok, size());
        id_to_token_.push_back(tok);
    }

    /// One token per line, line number = id, reserved tokens included literally.
    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw std::runtime_error("vocabulary: cannot write " + path);
        for (const auto& t : id_to_token_) out << t << "\n";
    }

    static Vocabulary load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw std::runtime_error("vocabulary: cannot read " + path);
        Vocabulary v;
        std::string line;
        int id = 0;
        while (std::getline(in, line)) {
            if (id < kFirstNatural) {
                if (line != v.id_to_token_[static_cast<std::size_t>(id)])
                    throw std::runtime_error("vocabulary: reserved token mismatch at id " + std::to_string(id));
            } else {
                v.add_token(line);
            }
            ++id;
        }
        if (id < kFirstNatural) throw std::runtime_error("vocabulary: file too short, reserved block incomplete");
        return v;
    }

private:
    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int> token_to_id_;
};

namespace detail {

inline bool is_word_punct(char c) {
    return std::ispunct(static_cast<unsigned char>(c)) != 0;
}

// Splits one whitespace-free word into lowercase tokens, punctuation standalone.
inline void split_word(const std::string& word, std::vector<std::string>& out) {
    std::string cur;
    for (char c : word) {
        if (is_word_punct(c)) {
            if (!cur.empty()) {
                out.push_back(cur);
                cur.clear();
            }
            out.emplace_back(1, c);
        } else {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        }
    }
    if (!cur.empty()) out.push_back(cur);
}

// Finds the next "<extra_id_N>" literal at or after `from`; returns (pos, len) or npos.
inline std::pair<std::size_t, std::size_t> find_sentinel(const std::string& text, std::size_t from) {
    static const std::string prefix = "<extra_id_";
    for (std::size_t p = text.find(prefix, from); p != std::string::npos; p = text.find(prefix, p + 1)) {
        std::size_t q = p + prefix.size();
        std::size_t digits = 0;
        while (q + digits < text.size() && std::isdigit(static_cast<unsigned char>(text[q + digits]))) ++digits;
        if (digits > 0 && q + digits < text.size() && text[q + digits] == '>') {
            return {p, q + digits + 1 - p};
        }
    }
    return {std::string::npos, 0};
}

}  // namespace detail

/// Normalizes text to the token stream: sentinel literals are matched first,
/// then lowercasing, whitespace splitting and punctuation isolation.
inline std::vector<std::string> tokenize_text(const std::string& text) {
    std::vector<std::string> tokens;
    std::size_t pos = 0;
    while (pos < text.size()) {
        auto [sp, slen] = detail::find_sentinel(text, pos);
        const std::size_t seg_end = sp == std::string::npos ? text.size() : sp;
        std::string word;
        for (std::size_t i = pos; i < seg_end; ++i) {
            const char c = text[i];
            if (std::isspace(static_cast<unsigned char>(c))) {
                if (!word.empty()) {
                    detail::split_word(word, tokens);
                    word.clear();
                }
            } else {
                word.push_back(c);
            }
        }
        if (!word.empty()) detail::split_word(word, tokens);
        if (sp == std::string::npos) break;
        tokens.push_back(text.substr(sp, slen));
        pos = sp + slen;
    }
    return tokens;
}

/// Builds a vocabulary from a text corpus. Natural tokens below min_freq are
/// excluded; ties in frequency break lexicographically; capped at max_size.
inline Vocabulary build_vocab(const std::vector<std::string>& texts, int min_freq, int max_size) {
    if (min_freq < 1) throw std::invalid_argument("build_vocab: min_freq must be >= 1");
    if (max_size <= Vocabulary::kFirstNatural) throw std::invalid_argument("build_vocab: max_size must exceed the reserved block");
    std::map<std::string, std::int64_t> counts;
    for (const auto& t : texts) {
        for (auto& tok : tokenize_text(t)) {
            auto [sp, slen] = detail::find_sentinel(tok, 0);
            if (sp == 0 && slen == tok.size()) continue;  // reserved
            ++counts[tok];
        }
    }
    std::vector<std::pair<std::string, std::int64_t>> ranked(counts.begin(), counts.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    Vocabulary v;
    for (const auto& [tok, n] : ranked) {
        if (n < min_freq) break;
        if (v.size() >= max_size) break;
        v.add_token(tok);
    }
    return v;
}

/// Maps text to ids; out-of-vocabulary tokens become UNK. Never emits PAD or EOS.
inline std::vector<int> encode(const Vocabulary& v, const std::string& text) {
    std::vector<int> ids;
    for (const auto& tok : tokenize_text(text)) {
        const int id = v.id_of(tok);
        ids.push_back(id >= 0 && id != Vocabulary::kPad && id != Vocabulary::kEos ? id : Vocabulary::kUnk);
    }
    return ids;
}

/// Joins tokens with single spaces; PAD is dropped, EOS terminates the output.
inline std::string decode(const Vocabulary& v, const std::vector<int>& ids) {
    std::string out;
    for (int id : ids) {
        if (id == Vocabulary::kPad) continue;
        if (id == Vocabulary::kEos) break;
        const std::string& tok = v.token(id);
        if (!out.empty()) out.push_back(' ');
        out += tok;
    }
    return out;
}

}  // namespace textrec
