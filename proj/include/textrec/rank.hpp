#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "textrec/mitp.hpp"
#include "textrec/model.hpp"

namespace textrec {

/// Prompted history with a single trailing sentinel slot in place of the next item.
struct ScoringContext {
    std::vector<int> encoder_ids;
};

inline ScoringContext build_scoring_context(const std::vector<std::string>& history, const Catalog& catalog,
                                            const TextualizationConfig& tcfg, const Vocabulary& vocab) {
    if (history.empty()) throw std::runtime_error("scoring context: empty history");
    std::vector<detail::SequenceSlot> slots;
    for (std::size_t i = 0; i < history.size(); ++i)
        slots.push_back({item_tokens(catalog.at(history[i]), tcfg, vocab), false, i});
    slots.push_back({{}, true, history.size()});
    ScoringContext ctx;
    ctx.encoder_ids = assemble_encoder_ids(std::move(slots), tcfg, vocab);
    std::size_t sentinels = 0;
    for (int id : ctx.encoder_ids)
        if (Vocabulary::is_sentinel(id)) ++sentinels;
    if (sentinels != 1) throw std::runtime_error("scoring context: expected exactly one sentinel");
    return ctx;
}

struct CandidateScore {
    std::string item_id;
    double perplexity = 0.0;
    int token_count = 0;
};

/// Scores a batch of candidates against one context with a single encoder pass
/// and one teacher-forced decoder batch. The perplexity of candidate tokens
/// w_1..w_N is exp(-(1/N) sum_j log P(w_j | context, sentinel, w_<j)); the
/// sentinel and EOS are excluded from both the sum and N. All log-space.
template <typename T>
std::vector<CandidateScore> score_candidates(const Parameters<T>& params, const ScoringContext& ctx,
                                             const std::vector<std::pair<std::string, std::vector<int>>>& candidates) {
    if (candidates.empty()) throw std::runtime_error("score_candidates: no candidates");
    for (const auto& [id, toks] : candidates)
        if (toks.empty()) throw std::runtime_error("score_candidates: empty candidate text for " + id);

    TokenMatrix enc(1, ctx.encoder_ids.size());
    for (std::size_t c = 0; c < ctx.encoder_ids.size(); ++c) enc.at(0, c) = ctx.encoder_ids[c];
    auto enc_out = encode(params, enc);

    std::vector<std::vector<int>> target_rows;
    target_rows.reserve(candidates.size());
    for (const auto& [id, toks] : candidates) {
        std::vector<int> row;
        row.reserve(toks.size() + 1);
        row.push_back(Vocabulary::sentinel_id(0));
        row.insert(row.end(), toks.begin(), toks.end());
        target_rows.push_back(std::move(row));
    }
    TokenMatrix target = TokenMatrix::from_rows(target_rows);
    std::vector<std::size_t> mem_index(candidates.size(), 0);
    auto dec = decode(params, enc_out, mem_index, shift_right(target), decoder_valid(target));

    std::vector<CandidateScore> out;
    out.reserve(candidates.size());
    for (std::size_t r = 0; r < candidates.size(); ++r) {
        const std::size_t n = candidates[r].second.size();
        double nll = 0.0;
        for (std::size_t j = 1; j <= n; ++j) {  // skip position 0 (the sentinel)
            const std::size_t row = r * target.cols + j;
            const T* lr = dec.logits.row(row);
            double maxv = lr[0];
            for (std::size_t c = 1; c < dec.logits.cols; ++c) maxv = std::max(maxv, static_cast<double>(lr[c]));
            double denom = 0.0;
            for (std::size_t c = 0; c < dec.logits.cols; ++c) denom += std::exp(static_cast<double>(lr[c]) - maxv);
            nll += std::log(denom) + maxv - static_cast<double>(lr[static_cast<std::size_t>(target.at(r, j))]);
        }
        CandidateScore score;
        score.item_id = candidates[r].first;
        score.token_count = static_cast<int>(n);
        score.perplexity = std::exp(nll / static_cast<double>(n));
        if (!(score.perplexity > 0.0) || !std::isfinite(score.perplexity))
            throw std::runtime_error("score_candidates: non-finite perplexity for " + score.item_id);
        out.push_back(std::move(score));
    }
    return out;
}

template <typename T>
CandidateScore score_candidate(const Parameters<T>& params, const ScoringContext& ctx, const std::string& item_id,
                               const std::vector<int>& tokens) {
    return score_candidates(params, ctx, {{item_id, tokens}})[0];
}

/// Ascending score order (lower = preferred). Ties break pessimistically: the
/// flagged evaluation positive sorts after tied negatives, remaining ties by
/// ascending item_id.
inline std::vector<std::string> rank_by_score(std::vector<std::pair<std::string, double>> scored,
                                              const std::optional<std::string>& positive = std::nullopt) {
    std::sort(scored.begin(), scored.end(), [&](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second < b.second;
        const bool a_pos = positive && a.first == *positive;
        const bool b_pos = positive && b.first == *positive;
        if (a_pos != b_pos) return b_pos;
        return a.first < b.first;
    });
    std::vector<std::string> out;
    out.reserve(scored.size());
    for (auto& [id, s] : scored) out.push_back(std::move(id));
    return out;
}

template <typename T>
std::vector<std::string> rank_candidates(const Parameters<T>& params, const ScoringContext& ctx,
                                         const std::vector<std::pair<std::string, std::vector<int>>>& candidates,
                                         const std::optional<std::string>& positive = std::nullopt) {
    auto scores = score_candidates(params, ctx, candidates);
    std::vector<std::pair<std::string, double>> scored;
    scored.reserve(scores.size());
    for (auto& s : scores) scored.emplace_back(s.item_id, s.perplexity);
    return rank_by_score(std::move(scored), positive);
}

}  // namespace textrec
