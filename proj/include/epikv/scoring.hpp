// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "epikv/dialogue.hpp"
#include "epikv/kvcache.hpp"
#include "epikv/numerics.hpp"
#include "epikv/toymodel.hpp"

namespace epikv {

enum class PromptOrigin {
    medoid,
    exact_question,
    similarity_ranked,
    snapkv_window,
    kvzip_repeat,
    infinipot_generic,
};

/// Auxiliary token sequence appended after a block for scoring. Never
/// retained in the cache.
struct PatchedPrompt {
    std::vector<TokenId> tokens;
    PromptOrigin origin = PromptOrigin::medoid;
};

enum class Aggregation { Avg, Max };

enum class ScorerKind { patched, streaming, snapkv, kvzip, infinipot, keydiff };

inline std::string_view scorer_name(ScorerKind kind) {
    switch (kind) {
        case ScorerKind::patched: return "patched";
        case ScorerKind::streaming: return "streaming";
        case ScorerKind::snapkv: return "snapkv";
        case ScorerKind::kvzip: return "kvzip";
        case ScorerKind::infinipot: return "infinipot";
        case ScorerKind::keydiff: return "keydiff";
    }
    return "unknown";
}

inline std::optional<ScorerKind> scorer_from_name(std::string_view s) {
    if (s == "patched") return ScorerKind::patched;
    if (s == "streaming") return ScorerKind::streaming;
    if (s == "snapkv") return ScorerKind::snapkv;
    if (s == "kvzip") return ScorerKind::kvzip;
    if (s == "infinipot") return ScorerKind::infinipot;
    if (s == "keydiff") return ScorerKind::keydiff;
    return std::nullopt;
}

/// Whether the scorer consumes a patched prompt during block prefill.
inline bool scorer_uses_prompt(ScorerKind kind) {
    return kind == ScorerKind::patched || kind == ScorerKind::snapkv ||
           kind == ScorerKind::kvzip || kind == ScorerKind::infinipot;
}

/// Per-(layer, kv-head) token importance scores keyed by position.
struct TokenScoreMap {
    std::vector<LayerScores> layers;

    double at(std::size_t layer, std::size_t head, std::size_t position) const {
        return layers[layer][head].at(position);
    }
};

/// Token importance from the cross-attention a patched prompt pays to the
/// resident cache. Per context token the prompt-row weights are reduced by
/// mean or max; query-head scores collapse onto their kv-head by max. Prompt
/// tokens themselves (the trace's new tokens) receive no scores.
inline TokenScoreMap score_with_prompt(const ForwardTrace& prompt_trace, Aggregation agg) {
    const std::size_t p = prompt_trace.positions.size();
    if (p == 0) {
        throw Error("score_with_prompt: empty prompt");
    }
    TokenScoreMap map;
    map.layers.resize(prompt_trace.layers.size());
    for (std::size_t l = 0; l < prompt_trace.layers.size(); ++l) {
        const LayerTrace& lt = prompt_trace.layers[l];
        const std::size_t kv_heads = lt.context_positions.size();
        if (lt.attention.empty() || lt.attention.size() % kv_heads != 0) {
            throw DimensionError("score_with_prompt: attention grid shape mismatch");
        }
        const std::size_t group = lt.attention.size() / kv_heads;
        map.layers[l].resize(kv_heads);
        for (std::size_t qh = 0; qh < lt.attention.size(); ++qh) {
            const std::size_t h = qh / group;
            const Matrix& grid = lt.attention[qh];
            const std::size_t ctx_total = lt.context_positions[h].size();
            if (grid.rows != p || grid.cols != ctx_total) {
                throw DimensionError("score_with_prompt: attention grid shape mismatch");
            }
            const std::size_t cache_cols = ctx_total - p;
            for (std::size_t j = 0; j < cache_cols; ++j) {
                double acc = agg == Aggregation::Max ? -std::numeric_limits<double>::infinity()
                                                     : 0.0;
                for (std::size_t t = 0; t < p; ++t) {
                    const double w = grid.at(t, j);
                    if (agg == Aggregation::Max) {
                        acc = std::max(acc, w);
                    } else {
                        acc += w;
                    }
                }
                if (agg == Aggregation::Avg) {
                    acc /= double(p);
                }
                auto& head_scores = map.layers[l][h];
                auto it = head_scores.find(lt.context_positions[h][j]);
                if (it == head_scores.end()) {
                    head_scores.emplace(lt.context_positions[h][j], acc);
                } else if (acc > it->second) {
                    it->second = acc;  // query heads reduce onto the kv-head by max
                }
            }
        }
    }
    return map;
}

/// Static sink+recent retention: the first `sink` positions plus the last
/// M - sink positions. Everything is retained while n <= M.
inline std::vector<std::size_t> streaming_retention(std::size_t n, std::size_t budget,
                                                    std::size_t sink) {
    if (sink > budget) {
        throw Error("streaming_retention: sink (" + std::to_string(sink) + ") exceeds budget (" +
                    std::to_string(budget) + ")");
    }
    std::vector<std::size_t> out;
    if (n <= budget) {
        out.resize(n);
        for (std::size_t i = 0; i < n; ++i) out[i] = i;
        return out;
    }
    out.reserve(budget);
    for (std::size_t i = 0; i < sink; ++i) out.push_back(i);
    for (std::size_t i = n - (budget - sink); i < n; ++i) out.push_back(i);
    return out;
}

/// Observation-window prompt: the last (up to) 64 tokens of the block.
inline PatchedPrompt snapkv_prompt(std::span<const TokenId> block_tokens) {
    if (block_tokens.empty()) {
        throw Error("snapkv_prompt: empty block");
    }
    constexpr std::size_t kWindow = 64;
    const std::size_t take = std::min(kWindow, block_tokens.size());
    PatchedPrompt prompt;
    prompt.origin = PromptOrigin::snapkv_window;
    prompt.tokens.assign(block_tokens.end() - take, block_tokens.end());
    return prompt;
}

inline constexpr std::string_view kKvzipInstruction =
    "Repeat the part of the previous context exactly";
inline constexpr std::string_view kInfinipotInstruction =
    "Summarize the previous context highlighting the most important parts.";

/// Repetition prompt: tokenized instruction followed by the full block.
inline PatchedPrompt kvzip_prompt(std::span<const TokenId> block_tokens,
                                  std::size_t vocab = kDefaultVocab) {
    if (block_tokens.empty()) {
        throw Error("kvzip_prompt: empty block");
    }
    PatchedPrompt prompt;
    prompt.origin = PromptOrigin::kvzip_repeat;
    prompt.tokens = tokenize(kKvzipInstruction, vocab);
    prompt.tokens.insert(prompt.tokens.end(), block_tokens.begin(), block_tokens.end());
    return prompt;
}

/// Block-independent generic summarization prompt.
inline PatchedPrompt infinipot_prompt(std::size_t vocab = kDefaultVocab) {
    PatchedPrompt prompt;
    prompt.origin = PromptOrigin::infinipot_generic;
    prompt.tokens = tokenize(kInfinipotInstruction, vocab);
    return prompt;
}

/// Key-distinctiveness scores: per (layer, kv-head) the anchor is the mean
/// key state, and each token scores the negative cosine similarity to it.
/// A zero-norm anchor (or key) yields score 0 for the affected entries.
inline TokenScoreMap keydiff_scores(const EpisodicCache& cache) {
    TokenScoreMap map;
    map.layers.resize(cache.layers.size());
    for (std::size_t l = 0; l < cache.layers.size(); ++l) {
        const LayerCache& layer = cache.layers[l];
        map.layers[l].resize(layer.heads.size());
        for (std::size_t h = 0; h < layer.heads.size(); ++h) {
            const auto& entries = layer.heads[h];
            if (entries.empty()) continue;
            Vec anchor(entries[0].key.size(), 0.0);
            for (const KVEntry& e : entries) {
                for (std::size_t d = 0; d < anchor.size(); ++d) {
                    anchor[d] += e.key[d];
                }
            }
            for (double& x : anchor) {
                x /= double(entries.size());
            }
            const bool zero_anchor = l2_norm(anchor) == 0.0;
            for (const KVEntry& e : entries) {
                double score = 0.0;
                if (!zero_anchor && l2_norm(e.key) != 0.0) {
                    score = -cosine(e.key, anchor);
                }
                map.layers[l][h].emplace(e.position, score);
            }
        }
    }
    return map;
}

}  // namespace epikv
