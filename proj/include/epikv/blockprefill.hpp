// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "epikv/allocation.hpp"
#include "epikv/clustering.hpp"
#include "epikv/dialogue.hpp"
#include "epikv/kvcache.hpp"
#include "epikv/scoring.hpp"
#include "epikv/toymodel.hpp"

namespace epikv {

using PromptProvider = std::function<PatchedPrompt(std::size_t episode_id, std::size_t block_index)>;

struct BlockPrefillConfig {
    std::size_t budget_per_head = 64;  // M
    std::size_t block_size = 16;       // M_block
    ScorerKind scorer = ScorerKind::patched;
    Aggregation aggregation = Aggregation::Max;
    std::optional<BudgetAllocation> allocation;
    PromptProvider prompt_provider;     // required for the patched scorer
    std::size_t streaming_sink = 128;   // sink tokens for the streaming scorer
};

struct BlockPromptRange {
    std::size_t start = 0;
    std::size_t length = 0;
};

struct PrefillReport {
    EpisodicCache cache;
    OccupancyLog occupancy;
    std::size_t blocks_processed = 0;
    std::vector<std::size_t> evictions_per_block;  // entries dropped, all layers
    std::vector<BlockPromptRange> prompt_ranges;   // absolute positions of each block's prompt
    std::vector<std::size_t> layer_budgets;        // per-head budgets in effect

    std::size_t total_evictions() const {
        std::size_t n = 0;
        for (std::size_t e : evictions_per_block) n += e;
        return n;
    }
};

namespace detail {

inline std::vector<std::size_t> entries_per_layer(const EpisodicCache& cache) {
    std::vector<std::size_t> out;
    out.reserve(cache.layers.size());
    for (const auto& layer : cache.layers) {
        out.push_back(layer.entry_count());
    }
    return out;
}

/// Position-valued scores plus sink pins reproduce sink+recent retention
/// through the shared eviction path.
inline TokenScoreMap streaming_scores(const EpisodicCache& cache) {
    TokenScoreMap map;
    map.layers.resize(cache.layers.size());
    for (std::size_t l = 0; l < cache.layers.size(); ++l) {
        map.layers[l].resize(cache.layers[l].heads.size());
        for (std::size_t h = 0; h < cache.layers[l].heads.size(); ++h) {
            for (const KVEntry& e : cache.layers[l].heads[h]) {
                map.layers[l][h].emplace(e.position, double(e.position));
            }
        }
    }
    return map;
}

}  // namespace detail

/// Ingests the context in blocks of block_size tokens: forward the block
/// against the resident cache, append its KV, forward the patched prompt
/// read-only (its KV is discarded), score, and evict every layer back to its
/// budget. Occupancy is sampled after every append, prompt forward, and
/// eviction. Prompt tokens occupy positions at and above the end of the
/// context, so retained positions and prompt positions never collide.
inline PrefillReport block_prefill(const Model& model, std::span<const TokenId> context,
                                   const BlockPrefillConfig& config, std::size_t episode_id = 0,
                                   std::span<const std::size_t> positions = {}) {
    const ModelConfig& cfg = model.config;
    if (context.empty()) {
        throw Error("block_prefill: empty context");
    }
    if (config.budget_per_head < 1 || config.block_size < 1) {
        throw Error("block_prefill: budget and block size must be >= 1");
    }
    if (config.scorer == ScorerKind::patched && !config.prompt_provider) {
        throw Error("block_prefill: patched scorer needs a prompt provider");
    }
    std::vector<std::size_t> default_positions;
    if (positions.empty()) {
        default_positions.resize(context.size());
        for (std::size_t i = 0; i < context.size(); ++i) default_positions[i] = i;
        positions = default_positions;
    } else if (positions.size() != context.size()) {
        throw DimensionError("block_prefill: positions size mismatch");
    }

    std::vector<std::size_t> layer_budgets(cfg.layers, config.budget_per_head);
    if (config.allocation) {
        if (config.allocation->layer_count() != cfg.layers) {
            throw Error("block_prefill: allocation layer count != model layers");
        }
        if (config.allocation->total() != cfg.layers * config.budget_per_head) {
            throw Error("block_prefill: allocation does not target layers * budget");
        }
        layer_budgets = config.allocation->layer_budgets;
    }

    PrefillReport report;
    report.layer_budgets = layer_budgets;
    report.cache.episode_id = episode_id;
    report.cache.provenance.scorer = std::string(scorer_name(config.scorer));
    report.cache.provenance.budget_per_head = config.budget_per_head;
    report.cache.provenance.layer_budgets = layer_budgets;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        report.cache.layers.emplace_back(cfg.kv_heads, layer_budgets[l]);
    }

    // Prompts sit directly after the whole context in position space.
    const std::size_t prompt_base = positions.back() + 1;
    const std::vector<std::size_t> zeros(cfg.layers, 0);

    std::unordered_set<std::size_t> pins;
    if (config.scorer == ScorerKind::streaming) {
        if (config.streaming_sink > config.budget_per_head) {
            throw Error("block_prefill: streaming sink exceeds budget");
        }
        if (config.allocation) {
            for (std::size_t b : layer_budgets) {
                if (config.streaming_sink > b) {
                    throw Error("block_prefill: streaming sink exceeds an allocated layer budget");
                }
            }
        }
    }

    TraceOptions block_opts;
    block_opts.store_attention = false;

    const std::size_t n = context.size();
    for (std::size_t start = 0; start < n; start += config.block_size) {
        const std::size_t len = std::min(config.block_size, n - start);
        const std::span<const TokenId> block = context.subspan(start, len);
        const std::span<const std::size_t> block_positions = positions.subspan(start, len);
        const std::size_t block_index = report.blocks_processed;

        ForwardTrace trace = forward(model, block, block_positions, MaskSpec::causal(),
                                     &report.cache, block_opts);
        append_to_cache(report.cache, trace);
        report.occupancy.record(OccupancyKind::Append, detail::entries_per_layer(report.cache),
                                zeros);

        TokenScoreMap scores;
        if (scorer_uses_prompt(config.scorer)) {
            PatchedPrompt prompt;
            switch (config.scorer) {
                case ScorerKind::patched:
                    prompt = config.prompt_provider(episode_id, block_index);
                    break;
                case ScorerKind::snapkv:
                    prompt = snapkv_prompt(block);
                    break;
                case ScorerKind::kvzip:
                    prompt = kvzip_prompt(block, cfg.vocab);
                    break;
                case ScorerKind::infinipot:
                    prompt = infinipot_prompt(cfg.vocab);
                    break;
                default:
                    break;
            }
            if (prompt.tokens.empty()) {
                throw Error("block_prefill: empty patched prompt");
            }
            std::vector<std::size_t> prompt_positions(prompt.tokens.size());
            for (std::size_t i = 0; i < prompt.tokens.size(); ++i) {
                prompt_positions[i] = prompt_base + i;
            }
            report.prompt_ranges.push_back({prompt_base, prompt.tokens.size()});

            const ForwardTrace prompt_trace = forward(model, prompt.tokens, prompt_positions,
                                                      MaskSpec::causal(), &report.cache);
            std::vector<std::size_t> prompt_resident(cfg.layers,
                                                     cfg.kv_heads * prompt.tokens.size());
            report.occupancy.record(OccupancyKind::PromptResident,
                                    detail::entries_per_layer(report.cache),
                                    std::move(prompt_resident));
            scores = score_with_prompt(prompt_trace, config.aggregation);
        } else if (config.scorer == ScorerKind::keydiff) {
            scores = keydiff_scores(report.cache);
        } else {
            scores = detail::streaming_scores(report.cache);
            pins.clear();
            for (std::size_t p = 0; p < config.streaming_sink; ++p) {
                pins.insert(p);
            }
        }

        std::size_t evicted = 0;
        for (std::size_t l = 0; l < cfg.layers; ++l) {
            const std::size_t before = report.cache.layers[l].entry_count();
            report.cache.layers[l] = evict_to_budget(report.cache.layers[l], scores.layers[l],
                                                     pins);
            evicted += before - report.cache.layers[l].entry_count();
        }
        report.evictions_per_block.push_back(evicted);
        report.occupancy.record(OccupancyKind::Evict, detail::entries_per_layer(report.cache),
                                zeros);
        ++report.blocks_processed;
    }
    return report;
}

/// Reference mode: the true future query serves as every block's patched
/// prompt. Infeasible in deployment, used as the overlap oracle.
inline PrefillReport exact_question_prefill(const Model& model, std::span<const TokenId> context,
                                            BlockPrefillConfig config,
                                            std::span<const TokenId> future_query) {
    if (future_query.empty()) {
        throw Error("exact_question_prefill: empty query");
    }
    std::vector<TokenId> query(future_query.begin(), future_query.end());
    config.scorer = ScorerKind::patched;
    config.prompt_provider = [query](std::size_t, std::size_t) {
        PatchedPrompt prompt;
        prompt.origin = PromptOrigin::exact_question;
        prompt.tokens = query;
        return prompt;
    };
    return block_prefill(model, context, config);
}

/// Ranks utterances by embedding similarity to the query and concatenates
/// the top ceil(fraction * N_u) of them in original order. Ranking ties go
/// to the earlier turn.
inline PatchedPrompt similarity_ranked_prompt(const ConversationHistory& history,
                                              std::string_view query_text,
                                              const Embedder& embedder, double fraction,
                                              std::size_t vocab = kDefaultVocab) {
    if (!(fraction > 0.0) || fraction > 1.0) {
        throw Error("similarity_ranked_prompt: fraction must be in (0, 1]");
    }
    if (history.utterances.empty()) {
        throw Error("similarity_ranked_prompt: empty history");
    }
    const Vec query_vec = embedder.embed(query_text);
    const std::size_t n = history.utterances.size();
    std::vector<std::pair<double, std::size_t>> ranked;
    ranked.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const Vec u = embedder.embed(history.utterances[i].text);
        ranked.emplace_back(cosine(u, query_vec), i);
    }
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    const std::size_t take = static_cast<std::size_t>(std::ceil(fraction * double(n)));
    std::vector<std::size_t> chosen;
    chosen.reserve(take);
    for (std::size_t i = 0; i < take; ++i) {
        chosen.push_back(ranked[i].second);
    }
    std::sort(chosen.begin(), chosen.end());

    std::vector<Utterance> selected;
    selected.reserve(chosen.size());
    for (std::size_t i : chosen) {
        selected.push_back(history.utterances[i]);
    }
    PatchedPrompt prompt;
    prompt.origin = PromptOrigin::similarity_ranked;
    prompt.tokens = render_utterances(selected, vocab).tokens;
    return prompt;
}

/// Scalar KL(p || q) over two distributions.
inline double kl_divergence(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) {
        throw DimensionError("kl_divergence: size mismatch");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] > 0.0) {
            acc += p[i] * std::log(p[i] / q[i]);
        }
    }
    return acc;
}

namespace detail {

/// Mean KL between the full-KV next-token distributions and the block-prefill
/// ones, teacher-forced on the full-KV greedy continuation of the query.
inline double mean_kl_vs_full(const Model& model, const EpisodicCache& full_cache,
                              const EpisodicCache& compressed_cache,
                              std::span<const TokenId> query, std::size_t horizon) {
    TraceOptions opts;
    opts.store_attention = false;

    EpisodicCache full = full_cache;
    EpisodicCache comp = compressed_cache;
    std::vector<TokenId> feed(query.begin(), query.end());

    double acc = 0.0;
    std::size_t steps = 0;
    std::size_t full_next = full.empty() ? 0 : full.max_position() + 1;
    std::size_t comp_next = comp.empty() ? 0 : comp.max_position() + 1;
    while (steps < horizon) {
        std::vector<std::size_t> full_pos(feed.size()), comp_pos(feed.size());
        for (std::size_t i = 0; i < feed.size(); ++i) {
            full_pos[i] = full_next + i;
            comp_pos[i] = comp_next + i;
        }
        full_next += feed.size();
        comp_next += feed.size();
        const ForwardTrace tf = forward(model, feed, full_pos, MaskSpec::causal(), &full, opts);
        const ForwardTrace tc = forward(model, feed, comp_pos, MaskSpec::causal(), &comp, opts);
        append_to_cache(full, tf);
        append_to_cache(comp, tc);
        const Vec full_logits = logits_for(model, tf.hidden.row(tf.hidden.rows - 1));
        const Vec pf = softmax_row(full_logits);
        const Vec pc = softmax_row(logits_for(model, tc.hidden.row(tc.hidden.rows - 1)));
        acc += kl_divergence(pf, pc);
        ++steps;
        feed.assign(1, argmax_token(full_logits));
    }
    return acc / double(horizon);
}

}  // namespace detail

inline constexpr std::size_t kDivergenceHorizon = 4;

/// Compares two budget allocations by how closely block-prefill answer
/// distributions track the full-KV ones. Returns KL_a - KL_b; negative means
/// allocation a sits closer to full KV.
inline double allocation_divergence(const Model& model, std::span<const TokenId> context,
                                    std::span<const TokenId> query,
                                    const BlockPrefillConfig& base_config,
                                    const BudgetAllocation& alloc_a,
                                    const BudgetAllocation& alloc_b,
                                    std::size_t horizon = kDivergenceHorizon) {
    if (alloc_a.total() != alloc_b.total()) {
        throw Error("allocation_divergence: allocations target different global budgets");
    }
    if (query.empty()) {
        throw Error("allocation_divergence: empty query");
    }

    EpisodicCache full = make_empty_cache(model.config, context.size());
    TraceOptions opts;
    opts.store_attention = false;
    ForwardTrace trace = forward(model, context, MaskSpec::causal(), nullptr, opts);
    append_to_cache(full, trace);

    BlockPrefillConfig config_a = base_config;
    config_a.allocation = alloc_a;
    BlockPrefillConfig config_b = base_config;
    config_b.allocation = alloc_b;
    const PrefillReport report_a = block_prefill(model, context, config_a);
    const PrefillReport report_b = block_prefill(model, context, config_b);

    const double kl_a = detail::mean_kl_vs_full(model, full, report_a.cache, query, horizon);
    const double kl_b = detail::mean_kl_vs_full(model, full, report_b.cache, query, horizon);
    return kl_a - kl_b;
}

inline nlohmann::ordered_json occupancy_to_json(const OccupancyLog& log) {
    nlohmann::ordered_json samples = nlohmann::ordered_json::array();
    for (const auto& s : log.samples) {
        nlohmann::ordered_json rec;
        rec["step"] = s.step;
        rec["kind"] = s.kind == OccupancyKind::Append
                          ? "append"
                          : (s.kind == OccupancyKind::Evict ? "evict" : "prompt");
        rec["entries"] = s.entries_per_layer;
        rec["prompt_resident"] = s.prompt_resident_per_layer;
        samples.push_back(std::move(rec));
    }
    return samples;
}

inline nlohmann::ordered_json prefill_report_to_json(const PrefillReport& report) {
    nlohmann::ordered_json j;
    j["episode_id"] = report.cache.episode_id;
    j["scorer"] = report.cache.provenance.scorer;
    j["blocks_processed"] = report.blocks_processed;
    j["layer_budgets"] = report.layer_budgets;
    j["evictions_per_block"] = report.evictions_per_block;
    j["occupancy"] = occupancy_to_json(report.occupancy);
    nlohmann::ordered_json retained = nlohmann::ordered_json::array();
    for (const auto& per_head : retained_positions(report.cache)) {
        retained.push_back(per_head);
    }
    j["retained_positions"] = retained;
    nlohmann::ordered_json prompts = nlohmann::ordered_json::array();
    for (const auto& r : report.prompt_ranges) {
        prompts.push_back({{"start", r.start}, {"length", r.length}});
    }
    j["prompt_ranges"] = prompts;
    return j;
}

}  // namespace epikv
