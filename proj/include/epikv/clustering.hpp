// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "epikv/dialogue.hpp"
#include "epikv/numerics.hpp"
#include "epikv/scoring.hpp"

namespace epikv {

/// A window of consecutive utterances. Index k is 1-based; spans partition
/// the turn range in order.
struct Segment {
    std::size_t index = 1;
    std::size_t first_turn = 0;
    std::size_t turn_count = 0;
    std::string text;
};

/// Sentence embedding interface. Implementations return unit vectors and are
/// deterministic per text.
class Embedder {
public:
    virtual ~Embedder() = default;
    virtual std::size_t dim() const = 0;
    virtual Vec embed(std::string_view text) const = 0;
};

/// Signed feature-hashing bag-of-words embedder. Lowercased words hash into
/// d buckets with a hashed sign; the raw vector is L2-normalized. Texts with
/// no words map to the first basis vector.
class HashEmbedder final : public Embedder {
public:
    explicit HashEmbedder(std::size_t dim = 256, std::uint64_t seed = 0x9E37ULL)
        : m_dim(dim), m_seed(seed) {}

    std::size_t dim() const override { return m_dim; }

    Vec embed(std::string_view text) const override {
        Vec v(m_dim, 0.0);
        std::string word;
        auto flush = [&] {
            if (word.empty()) return;
            const std::uint64_t h = splitmix64(fnv1a64(word) ^ m_seed);
            const std::size_t bucket = static_cast<std::size_t>(h % m_dim);
            const double sign = ((h >> 63) & 1) ? -1.0 : 1.0;
            v[bucket] += sign;
            word.clear();
        };
        for (char c : text) {
            const auto uc = static_cast<unsigned char>(c);
            if (std::isalnum(uc)) {
                word.push_back(static_cast<char>(std::tolower(uc)));
            } else {
                flush();
            }
        }
        flush();
        const double norm = l2_norm(v);
        if (norm == 0.0) {
            v.assign(m_dim, 0.0);
            v[0] = 1.0;
            return v;
        }
        for (double& x : v) {
            x /= norm;
        }
        return v;
    }

private:
    std::size_t m_dim;
    std::uint64_t m_seed;
};

inline Vec default_embed(std::string_view text) {
    static const HashEmbedder embedder;
    return embedder.embed(text);
}

/// Renders a segment's utterances as one text block ("role: text" lines).
inline std::string segment_text(const ConversationHistory& history, std::size_t first_turn,
                                std::size_t turn_count) {
    std::string text;
    for (std::size_t i = first_turn; i < first_turn + turn_count; ++i) {
        const Utterance& u = history.utterances[i];
        text += std::string(role_name(u.role)) + ": " + u.text + "\n";
    }
    return text;
}

/// Splits the history into ceil(N_u / w_embed) windows of w_embed
/// utterances; the last window takes the remainder.
inline std::vector<Segment> segment_history(const ConversationHistory& history,
                                            std::size_t w_embed) {
    if (w_embed < 1) {
        throw Error("segment_history: w_embed must be >= 1");
    }
    if (history.utterances.empty()) {
        throw Error("segment_history: empty history");
    }
    const std::size_t n = history.utterances.size();
    std::vector<Segment> segments;
    segments.reserve((n + w_embed - 1) / w_embed);
    for (std::size_t start = 0; start < n; start += w_embed) {
        Segment s;
        s.index = segments.size() + 1;
        s.first_turn = start;
        s.turn_count = std::min(w_embed, n - start);
        s.text = segment_text(history, s.first_turn, s.turn_count);
        segments.push_back(std::move(s));
    }
    return segments;
}

struct KMeansResult {
    std::vector<std::size_t> assignments;
    std::vector<Vec> centroids;
    std::size_t iterations = 0;
    std::vector<double> sse_per_iteration;  // objective after each update step
};

namespace detail {

inline double sq_distance(const Vec& a, const Vec& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return acc;
}

}  // namespace detail

/// Lloyd iterations with k-means++ initialization, fully deterministic given
/// the seed. Assignment ties go to the lower cluster index. An emptied
/// cluster is repaired by stealing the point farthest from its current
/// centroid (ties to the lower point index).
inline KMeansResult kmeans(const std::vector<Vec>& points, std::size_t k, std::uint64_t seed,
                           std::size_t max_iters = 64) {
    if (k < 1) {
        throw Error("kmeans: cluster count must be >= 1");
    }
    if (points.size() < k) {
        throw Error("kmeans: fewer points (" + std::to_string(points.size()) + ") than clusters (" +
                    std::to_string(k) + ")");
    }
    const std::size_t n = points.size();
    Rng rng(seed);

    // k-means++ seeding.
    std::vector<Vec> centroids;
    centroids.reserve(k);
    centroids.push_back(points[rng.uniform_index(n)]);
    std::vector<double> d2(n);
    while (centroids.size() < k) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (const Vec& c : centroids) {
                best = std::min(best, detail::sq_distance(points[i], c));
            }
            d2[i] = best;
            total += best;
        }
        std::size_t chosen = 0;
        if (total > 0.0) {
            const double target = rng.uniform() * total;
            double acc = 0.0;
            chosen = n - 1;
            for (std::size_t i = 0; i < n; ++i) {
                acc += d2[i];
                if (acc > target) {
                    chosen = i;
                    break;
                }
            }
        } else {
            chosen = rng.uniform_index(n);  // all points coincide with a centroid
        }
        centroids.push_back(points[chosen]);
    }

    std::vector<std::size_t> assignments(n, 0);
    KMeansResult result;
    for (std::size_t iter = 0; iter < max_iters; ++iter) {
        bool changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t best = 0;
            double best_d = detail::sq_distance(points[i], centroids[0]);
            for (std::size_t c = 1; c < k; ++c) {
                const double d = detail::sq_distance(points[i], centroids[c]);
                if (d < best_d) {
                    best_d = d;
                    best = c;
                }
            }
            if (assignments[i] != best) {
                assignments[i] = best;
                changed = true;
            }
        }

        std::vector<std::size_t> counts(k, 0);
        for (std::size_t a : assignments) ++counts[a];
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] > 0) continue;
            // Steal the point farthest from its current centroid.
            std::size_t victim = 0;
            double worst = -1.0;
            for (std::size_t i = 0; i < n; ++i) {
                if (counts[assignments[i]] <= 1) continue;
                const double d = detail::sq_distance(points[i], centroids[assignments[i]]);
                if (d > worst) {
                    worst = d;
                    victim = i;
                }
            }
            --counts[assignments[victim]];
            assignments[victim] = c;
            ++counts[c];
            changed = true;
        }

        for (std::size_t c = 0; c < k; ++c) {
            Vec mean(points[0].size(), 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                if (assignments[i] != c) continue;
                for (std::size_t d = 0; d < mean.size(); ++d) {
                    mean[d] += points[i][d];
                }
            }
            for (double& x : mean) {
                x /= double(counts[c]);
            }
            centroids[c] = std::move(mean);
        }

        result.iterations = iter + 1;
        double sse = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            sse += detail::sq_distance(points[i], centroids[assignments[i]]);
        }
        result.sse_per_iteration.push_back(sse);
        if (!changed) break;
    }

    result.assignments = std::move(assignments);
    result.centroids = std::move(centroids);
    return result;
}

inline double within_cluster_sse(const std::vector<Vec>& points,
                                 const std::vector<std::size_t>& assignments,
                                 const std::vector<Vec>& centroids) {
    double sse = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
        sse += detail::sq_distance(points[i], centroids[assignments[i]]);
    }
    return sse;
}

/// Episode model: cluster assignments, centroids (plain means, not
/// re-normalized), the medoid segment per episode, and the per-episode
/// patched prompt built from consecutive utterances at the medoid.
struct EpisodeModel {
    std::size_t episode_count = 0;
    std::vector<std::size_t> assignments;          // segment index -> episode
    std::vector<Vec> centroids;                    // per episode
    std::vector<std::size_t> medoid_segment;       // per episode, 0-based segment slot
    std::vector<PatchedPrompt> prompts;            // per episode
    std::vector<std::string> prompt_texts;         // per episode
    std::vector<std::pair<std::size_t, std::size_t>> prompt_turn_spans;  // (first, count)
};

inline constexpr std::size_t kDefaultPromptWindow = 8;

/// Cosine against a centroid. A zero-norm side compares below every valid
/// similarity, so degenerate centroids are never selected.
inline double centroid_similarity(const Vec& v, const Vec& centroid) {
    if (l2_norm(v) == 0.0 || l2_norm(centroid) == 0.0) {
        return -std::numeric_limits<double>::infinity();
    }
    return cosine(v, centroid);
}

/// Picks each episode's medoid (max cosine to the centroid, ties to the
/// lower segment index) and builds its patched prompt from up to
/// prompt_window consecutive utterances starting at the medoid segment's
/// first turn. The window clamps at the history end and at the first turn
/// whose segment belongs to a different episode, so every prompt stays
/// inside its own episode.
inline EpisodeModel finalize_episodes(const ConversationHistory& history,
                                      const std::vector<Segment>& segments,
                                      const std::vector<Vec>& embeddings,
                                      const std::vector<std::size_t>& assignments,
                                      std::size_t prompt_window = kDefaultPromptWindow,
                                      std::size_t vocab = kDefaultVocab) {
    if (segments.size() != embeddings.size() || segments.size() != assignments.size()) {
        throw DimensionError("finalize_episodes: inconsistent input lengths");
    }
    std::size_t episode_count = 0;
    for (std::size_t a : assignments) {
        episode_count = std::max(episode_count, a + 1);
    }

    EpisodeModel model;
    model.episode_count = episode_count;
    model.assignments = assignments;
    model.centroids.assign(episode_count, Vec());
    model.medoid_segment.assign(episode_count, 0);
    model.prompts.resize(episode_count);
    model.prompt_texts.resize(episode_count);
    model.prompt_turn_spans.resize(episode_count);

    for (std::size_t e = 0; e < episode_count; ++e) {
        Vec centroid(embeddings[0].size(), 0.0);
        std::size_t members = 0;
        std::size_t first_member = assignments.size();
        for (std::size_t i = 0; i < assignments.size(); ++i) {
            if (assignments[i] != e) continue;
            for (std::size_t d = 0; d < centroid.size(); ++d) {
                centroid[d] += embeddings[i][d];
            }
            if (first_member == assignments.size()) first_member = i;
            ++members;
        }
        if (members == 0) {
            throw Error("finalize_episodes: empty episode " + std::to_string(e));
        }
        for (double& x : centroid) {
            x /= double(members);
        }

        std::size_t medoid = first_member;
        double best = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < assignments.size(); ++i) {
            if (assignments[i] != e) continue;
            const double c = centroid_similarity(embeddings[i], centroid);
            if (c > best) {
                best = c;
                medoid = i;
            }
        }

        const std::size_t first = segments[medoid].first_turn;
        std::size_t count = 0;
        for (std::size_t turn = first;
             turn < history.utterances.size() && count < prompt_window; ++turn) {
            std::size_t segment_slot = segments.size() - 1;
            for (std::size_t k = 0; k < segments.size(); ++k) {
                if (turn >= segments[k].first_turn &&
                    turn < segments[k].first_turn + segments[k].turn_count) {
                    segment_slot = k;
                    break;
                }
            }
            if (assignments[segment_slot] != e) break;
            ++count;
        }
        PatchedPrompt prompt;
        prompt.origin = PromptOrigin::medoid;
        const std::span<const Utterance> span(history.utterances.data() + first, count);
        prompt.tokens = render_utterances(span, vocab).tokens;

        model.centroids[e] = std::move(centroid);
        model.medoid_segment[e] = medoid;
        model.prompt_texts[e] = segment_text(history, first, count);
        model.prompt_turn_spans[e] = {first, count};
        model.prompts[e] = std::move(prompt);
    }
    return model;
}

}  // namespace epikv
