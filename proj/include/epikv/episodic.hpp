// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <future>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "epikv/allocation.hpp"
#include "epikv/blockprefill.hpp"
#include "epikv/clustering.hpp"
#include "epikv/dialogue.hpp"
#include "epikv/kvcache.hpp"
#include "epikv/scoring.hpp"
#include "epikv/toymodel.hpp"

namespace epikv {

struct EpisodicBuildConfig {
    std::size_t block_size = 16;
    std::size_t w_embed = 4;
    std::size_t prompt_window = kDefaultPromptWindow;
    Aggregation aggregation = Aggregation::Max;
    std::uint64_t cluster_seed = 1;
    std::size_t kmeans_max_iters = 64;
    bool use_allocation = true;
    std::size_t calibration_tokens = 0;  // 0 -> max(4 * budget, 256)
    std::size_t calibration_budget = 0;  // 0 -> the run budget M
    std::size_t calibration_sink = 0;    // 0 -> min(128, calibration_budget / 2)
    std::uint64_t calibration_seed = 7;
    /// Builds all episode caches concurrently. Uses one in-flight
    /// construction cache per episode (E x the bounded-memory footprint of
    /// the default sequential mode).
    bool parallel_episodes = false;
};

/// Handle to the built episodic caches: the episode model, the budget
/// allocation in effect, and the on-disk store holding the E caches.
struct EpisodicCacheSet {
    EpisodeModel episodes;
    BudgetAllocation allocation;
    SensitivityProfile profile;
    std::string store_dir;
    std::size_t budget_per_head = 0;

    std::size_t episode_count() const { return episodes.episode_count; }
};

struct RouteRecord {
    std::size_t turn = 0;
    std::size_t episode = 0;
    bool switched = false;
    std::size_t load_bytes = 0;
};

/// Per-session routing state: at most one episode cache is resident at any
/// instant, and the switch count increments exactly when the resident id
/// changes.
struct SessionState {
    std::optional<std::size_t> resident_id;
    EpisodicCache resident;
    std::size_t switch_count = 0;
    std::vector<RouteRecord> route_log;
};

struct BuildResult {
    EpisodicCacheSet set;
    std::vector<PrefillReport> reports;  // one per episode, in episode order
};

namespace detail {

inline nlohmann::ordered_json manifest_json(const EpisodeModel& episodes,
                                            const BudgetAllocation& allocation,
                                            const CacheStore& store, ScorerKind scorer,
                                            std::size_t budget_per_head, std::size_t embed_dim) {
    nlohmann::ordered_json manifest;
    manifest["version"] = 1;
    manifest["embedder_dim"] = embed_dim;
    manifest["budget_per_head"] = budget_per_head;
    manifest["scorer"] = scorer_name(scorer);
    manifest["layer_budgets"] = allocation.layer_budgets;
    nlohmann::ordered_json eps = nlohmann::ordered_json::array();
    for (std::size_t e = 0; e < episodes.episode_count; ++e) {
        nlohmann::ordered_json rec;
        rec["id"] = e;
        rec["file"] = store.episode_path(e).filename().string();
        rec["centroid"] = episodes.centroids[e];
        rec["medoid_first_turn"] = episodes.prompt_turn_spans[e].first;
        rec["medoid_turn_count"] = episodes.prompt_turn_spans[e].second;
        rec["prompt_text"] = episodes.prompt_texts[e];
        eps.push_back(std::move(rec));
    }
    manifest["episodes"] = std::move(eps);
    return manifest;
}

}  // namespace detail

/// Phase A: cluster the history into episodes (A1), profile layer
/// sensitivity and allocate budgets (A2), then run block prefill once per
/// episode with that episode's medoid prompt appended to every block (A3).
/// All caches are persisted to the store along with a manifest. Episodes are
/// built sequentially by default so only one construction cache is live.
inline BuildResult build(const Model& model, const ConversationHistory& history,
                         std::size_t episode_count, std::size_t budget_per_head, double alpha,
                         const Embedder& embedder, const std::string& store_dir,
                         const EpisodicBuildConfig& config = {}) {
    const std::vector<Segment> segments = segment_history(history, config.w_embed);
    if (episode_count > segments.size()) {
        throw Error("build: more episodes (" + std::to_string(episode_count) +
                    ") than segments (" + std::to_string(segments.size()) + ")");
    }

    // A1: segment, embed, cluster, pick medoids and prompts.
    std::vector<Vec> embeddings;
    embeddings.reserve(segments.size());
    for (const Segment& s : segments) {
        embeddings.push_back(embedder.embed(s.text));
    }
    const KMeansResult clusters =
        kmeans(embeddings, episode_count, config.cluster_seed, config.kmeans_max_iters);
    EpisodeModel episodes = finalize_episodes(history, segments, embeddings, clusters.assignments,
                                              config.prompt_window, model.config.vocab);

    // A2: measure sensitivity and allocate the per-layer budgets.
    BudgetAllocation allocation;
    SensitivityProfile profile;
    if (config.use_allocation) {
        const std::size_t cal_budget =
            config.calibration_budget > 0 ? config.calibration_budget : budget_per_head;
        const std::size_t cal_sink = config.calibration_sink > 0
                                         ? config.calibration_sink
                                         : std::min<std::size_t>(128, cal_budget / 2);
        const std::size_t cal_len = config.calibration_tokens > 0
                                        ? config.calibration_tokens
                                        : std::max<std::size_t>(4 * cal_budget, 256);
        const std::vector<TokenId> cal_tokens =
            synthetic_calibration_tokens(cal_len, config.calibration_seed, model.config.vocab);
        profile = measure_sensitivity(model, cal_tokens, cal_budget, cal_sink,
                                      "synthetic:seed=" + std::to_string(config.calibration_seed) +
                                          ",len=" + std::to_string(cal_len));
        allocation = allocate(profile, budget_per_head, alpha);
    } else {
        allocation = uniform_allocation(model.config.layers, budget_per_head);
        profile.sigma.assign(model.config.layers, 1.0);
        profile.sensitivity.assign(model.config.layers, 0.0);
        profile.input_id = "uniform";
        profile.model_seed = model.config.seed;
    }

    // A3: block prefill per episode with the medoid prompt on every block.
    const RenderedHistory rendered = render_history_tokens(history, model.config.vocab);
    CacheStore store(store_dir);

    auto build_episode = [&](std::size_t e) {
        BlockPrefillConfig prefill;
        prefill.budget_per_head = budget_per_head;
        prefill.block_size = config.block_size;
        prefill.scorer = ScorerKind::patched;
        prefill.aggregation = config.aggregation;
        prefill.allocation = allocation;
        const PatchedPrompt prompt = episodes.prompts[e];
        prefill.prompt_provider = [prompt](std::size_t, std::size_t) { return prompt; };
        PrefillReport report = block_prefill(model, rendered.tokens, prefill, e);
        store.save(report.cache);
        return report;
    };

    BuildResult result;
    result.reports.resize(episode_count);
    if (config.parallel_episodes) {
        std::vector<std::future<PrefillReport>> futures;
        futures.reserve(episode_count);
        for (std::size_t e = 0; e < episode_count; ++e) {
            futures.push_back(std::async(std::launch::async, build_episode, e));
        }
        for (std::size_t e = 0; e < episode_count; ++e) {
            result.reports[e] = futures[e].get();
        }
    } else {
        for (std::size_t e = 0; e < episode_count; ++e) {
            result.reports[e] = build_episode(e);
        }
    }

    store.write_manifest(detail::manifest_json(episodes, allocation, store, ScorerKind::patched,
                                               budget_per_head, embedder.dim()));

    result.set.episodes = std::move(episodes);
    result.set.allocation = std::move(allocation);
    result.set.profile = std::move(profile);
    result.set.store_dir = store_dir;
    result.set.budget_per_head = budget_per_head;
    return result;
}

/// Reconstructs a routable cache-set handle from a persisted store: episode
/// centroids, prompts and budgets come from the manifest, the caches stay on
/// disk until routed to.
inline EpisodicCacheSet load_cache_set(const std::string& store_dir) {
    CacheStore store(store_dir);
    const nlohmann::json manifest = store.read_manifest();
    EpisodicCacheSet set;
    set.store_dir = store_dir;
    set.budget_per_head = manifest.at("budget_per_head").get<std::size_t>();
    set.allocation.per_head_budget = set.budget_per_head;
    set.allocation.layer_budgets =
        manifest.at("layer_budgets").get<std::vector<std::size_t>>();
    for (const auto& rec : manifest.at("episodes")) {
        set.episodes.centroids.push_back(rec.at("centroid").get<Vec>());
        set.episodes.prompt_texts.push_back(rec.at("prompt_text").get<std::string>());
        set.episodes.prompt_turn_spans.emplace_back(
            rec.at("medoid_first_turn").get<std::size_t>(),
            rec.at("medoid_turn_count").get<std::size_t>());
    }
    set.episodes.episode_count = set.episodes.centroids.size();
    return set;
}

/// Routes a query to the episode whose centroid is most cosine-similar to
/// the query embedding (ties to the lower id). Loads the cache from the
/// store only when the routed episode differs from the resident one.
inline std::size_t route(const EpisodicCacheSet& set, const Embedder& embedder,
                         std::string_view query_text, SessionState& state) {
    const Vec q = embedder.embed(query_text);
    std::size_t best = 0;
    double best_cos = -std::numeric_limits<double>::infinity();
    for (std::size_t e = 0; e < set.episode_count(); ++e) {
        const double c = centroid_similarity(q, set.episodes.centroids[e]);
        if (c > best_cos) {
            best_cos = c;
            best = e;
        }
    }

    RouteRecord record;
    record.turn = state.route_log.size();
    record.episode = best;
    if (!state.resident_id || *state.resident_id != best) {
        CacheStore store(set.store_dir);
        state.resident = store.load(best);
        state.resident_id = best;
        record.switched = true;
        record.load_bytes = store.stored_bytes(best);
        ++state.switch_count;
    }
    state.route_log.push_back(record);
    return best;
}

struct AnswerResult {
    std::vector<TokenId> tokens;
    RouteRecord route;
};

/// Routes the query, then greedy-decodes from the resident episodic cache.
inline AnswerResult answer(const Model& model, const EpisodicCacheSet& set,
                           const Embedder& embedder, SessionState& state,
                           std::string_view query_text, std::size_t max_new) {
    route(set, embedder, query_text, state);
    AnswerResult result;
    result.route = state.route_log.back();
    if (max_new > 0) {
        const std::vector<TokenId> query_tokens = tokenize(query_text, model.config.vocab);
        if (query_tokens.empty()) {
            throw Error("answer: query tokenized to nothing");
        }
        result.tokens = greedy_decode(model, state.resident, query_tokens, max_new);
    }
    return result;
}

/// Ablation mode: cluster as usual, pick the episode closest to the query,
/// and block-prefill ONLY that episode's segment tokens (at their original
/// positions) under the budget. Produces a single cache, no episodic set.
inline PrefillReport rag_like_build(const Model& model, const ConversationHistory& history,
                                    std::size_t episode_count, std::size_t budget_per_head,
                                    std::string_view query_text, const Embedder& embedder,
                                    const EpisodicBuildConfig& config = {}) {
    const std::vector<Segment> segments = segment_history(history, config.w_embed);
    if (episode_count > segments.size()) {
        throw Error("rag_like_build: more episodes than segments");
    }
    std::vector<Vec> embeddings;
    embeddings.reserve(segments.size());
    for (const Segment& s : segments) {
        embeddings.push_back(embedder.embed(s.text));
    }
    const KMeansResult clusters =
        kmeans(embeddings, episode_count, config.cluster_seed, config.kmeans_max_iters);
    EpisodeModel episodes = finalize_episodes(history, segments, embeddings, clusters.assignments,
                                              config.prompt_window, model.config.vocab);

    const Vec q = embedder.embed(query_text);
    std::size_t chosen = 0;
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t e = 0; e < episodes.episode_count; ++e) {
        const double c = centroid_similarity(q, episodes.centroids[e]);
        if (c > best) {
            best = c;
            chosen = e;
        }
    }

    // Token subsequence of the chosen episode's segments, original positions.
    const RenderedHistory rendered = render_history_tokens(history, model.config.vocab);
    std::vector<bool> turn_selected(history.utterances.size(), false);
    for (std::size_t k = 0; k < segments.size(); ++k) {
        if (clusters.assignments[k] != chosen) continue;
        for (std::size_t t = segments[k].first_turn;
             t < segments[k].first_turn + segments[k].turn_count; ++t) {
            turn_selected[t] = true;
        }
    }
    std::vector<TokenId> tokens;
    std::vector<std::size_t> positions;
    for (std::size_t i = 0; i < rendered.tokens.size(); ++i) {
        if (turn_selected[rendered.source[i].turn_index]) {
            tokens.push_back(rendered.tokens[i]);
            positions.push_back(i);
        }
    }

    BlockPrefillConfig prefill;
    prefill.budget_per_head = budget_per_head;
    prefill.block_size = config.block_size;
    prefill.scorer = ScorerKind::patched;
    prefill.aggregation = config.aggregation;
    const PatchedPrompt prompt = episodes.prompts[chosen];
    prefill.prompt_provider = [prompt](std::size_t, std::size_t) { return prompt; };
    return block_prefill(model, tokens, prefill, chosen, positions);
}

}  // namespace epikv
