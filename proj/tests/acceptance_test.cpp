// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite. Each test covers one acceptance criterion at its stated
// tolerance and prints a single PASS/FAIL line.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>
#include <tuple>
#include <vector>

#include <gtest/gtest.h>

#include "epikv/harness.hpp"

using namespace epikv;

namespace {

class Criterion {
public:
    Criterion(int number, std::string name)
        : m_number(number), m_name(std::move(name)), m_start(std::chrono::steady_clock::now()) {}

    ~Criterion() {
        const double seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - m_start).count();
        const bool failed = ::testing::Test::HasFailure();
        std::printf("[ACCEPTANCE] criterion %2d (%s): %s (%.1fs)\n", m_number, m_name.c_str(),
                    failed ? "FAIL" : "PASS", seconds);
        std::fflush(stdout);
    }

private:
    int m_number;
    std::string m_name;
    std::chrono::steady_clock::time_point m_start;
};

ModelConfig desk_default(std::size_t layers = 4, std::size_t q_heads = 4, std::size_t kv_heads = 2,
                         std::size_t head_dim = 16) {
    ModelConfig cfg;
    cfg.layers = layers;
    cfg.query_heads = q_heads;
    cfg.kv_heads = kv_heads;
    cfg.head_dim = head_dim;
    cfg.model_dim = q_heads * head_dim;
    cfg.vocab = kDefaultVocab;
    cfg.seed = 1;
    return cfg;
}

PatchedPrompt synthetic_prompt() {
    PatchedPrompt prompt;
    prompt.origin = PromptOrigin::medoid;
    prompt.tokens = synthetic_calibration_tokens(12, 1234);
    return prompt;
}

// Runs jobs [0, count) on two worker threads.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& job) {
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= count) return;
            job(i);
        }
    };
    std::thread a(worker), b(worker);
    a.join();
    b.join();
}

std::string fixture_path(const std::string& name) {
    return std::string(EPIKV_TEST_DATA_DIR) + "/" + name;
}

std::string file_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

// Criterion 1: for every scorer, input length, budget and block size, live
// entries never exceed kv_heads * (layer budget + block size) at any
// occupancy sample.
TEST(Acceptance, MemoryBound) {
    Criterion guard(1, "memory bound across scorers, lengths, budgets");
    const Model model = init_model(desk_default());

    const ScorerKind scorers[] = {ScorerKind::patched,   ScorerKind::streaming,
                                  ScorerKind::snapkv,    ScorerKind::kvzip,
                                  ScorerKind::infinipot, ScorerKind::keydiff};
    const std::size_t lengths[] = {100, 1000, 5000, 20000};
    const std::size_t budgets[] = {8, 64, 256};
    const std::size_t blocks[] = {16, 128};

    struct Job {
        ScorerKind scorer;
        std::size_t length, budget, block;
    };
    std::vector<Job> jobs;
    for (ScorerKind scorer : scorers) {
        for (std::size_t length : lengths) {
            for (std::size_t budget : budgets) {
                for (std::size_t block : blocks) {
                    jobs.push_back({scorer, length, budget, block});
                }
            }
        }
    }

    std::atomic<std::size_t> violations{0};
    std::atomic<std::size_t> runs_done{0};
    parallel_for(jobs.size(), [&](std::size_t i) {
        const Job& job = jobs[i];
        const auto context = synthetic_calibration_tokens(job.length, 77 + i, kDefaultVocab);
        BlockPrefillConfig config;
        config.budget_per_head = job.budget;
        config.block_size = job.block;
        config.scorer = job.scorer;
        config.streaming_sink = std::min<std::size_t>(128, job.budget / 2);
        config.prompt_provider = [](std::size_t, std::size_t) { return synthetic_prompt(); };
        const PrefillReport report = block_prefill(model, context, config);
        const std::size_t limit = model.config.kv_heads * (job.budget + job.block);
        for (const auto& sample : report.occupancy.samples) {
            for (std::size_t entries : sample.entries_per_layer) {
                if (entries > limit) {
                    violations.fetch_add(1);
                }
            }
        }
        runs_done.fetch_add(1);
    });
    EXPECT_EQ(runs_done.load(), jobs.size());
    EXPECT_EQ(violations.load(), 0u);
}

// Criterion 2: 9 tokens in blocks of 3 under budget 1 produce the
// post-append/post-evict occupancy sequence 3,1,4,1,4,1 exactly.
TEST(Acceptance, ThreeTokenBlockTrace) {
    Criterion guard(2, "3-token block trace, budget 1");
    const Model model = init_model(desk_default(1, 1, 1, 16));
    const auto context = synthetic_calibration_tokens(9, 5, model.config.vocab);
    BlockPrefillConfig config;
    config.budget_per_head = 1;
    config.block_size = 3;
    config.scorer = ScorerKind::patched;
    config.prompt_provider = [](std::size_t, std::size_t) { return synthetic_prompt(); };
    const PrefillReport report = block_prefill(model, context, config);

    std::vector<std::size_t> series;
    for (const auto& sample : report.occupancy.samples) {
        if (sample.kind != OccupancyKind::PromptResident) {
            series.push_back(sample.entries_per_layer[0]);
        }
    }
    EXPECT_EQ(series, (std::vector<std::size_t>{3, 1, 4, 1, 4, 1}));
}

// Criterion 3: 500 randomized eviction instances match the brute-force
// global-sort oracle exactly.
TEST(Acceptance, EvictionOracleEquivalence) {
    Criterion guard(3, "eviction equals global-sort oracle, 500 instances");
    Rng rng(2024);
    std::size_t mismatches = 0;
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t heads = 1 + rng.uniform_index(4);
        const std::size_t budget = 1 + rng.uniform_index(6);
        const std::size_t block = 1 + rng.uniform_index(8);
        const std::size_t n = 1 + rng.uniform_index(budget + block);  // n <= M + M_block
        LayerCache cache(heads, budget);
        LayerScores scores(heads);
        std::set<std::size_t> pinned;
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t p = 0; p < n; ++p) {
                KVEntry e;
                e.position = p;
                e.key = {rng.gaussian()};
                e.value = {rng.gaussian()};
                cache.heads[h].push_back(std::move(e));
                scores[h][p] = double(rng.uniform_index(5));  // coarse grid forces ties
            }
        }
        if (trial % 4 == 0 && heads * budget >= heads && n > 0) {
            pinned.insert(0);
        }

        std::unordered_set<std::size_t> pin_arg(pinned.begin(), pinned.end());
        const LayerCache out = evict_to_budget(cache, scores, pin_arg);

        // Oracle.
        struct Row {
            double score;
            std::size_t position, head;
        };
        std::vector<Row> rows;
        std::vector<std::set<std::size_t>> expected(heads);
        std::size_t pinned_live = 0;
        for (std::size_t h = 0; h < heads; ++h) {
            for (const KVEntry& e : cache.heads[h]) {
                if (pinned.count(e.position)) {
                    expected[h].insert(e.position);
                    ++pinned_live;
                } else {
                    rows.push_back({scores[h].at(e.position), e.position, h});
                }
            }
        }
        std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
            return std::make_tuple(-a.score, a.position, a.head) <
                   std::make_tuple(-b.score, b.position, b.head);
        });
        const std::size_t limit = heads * budget;
        for (std::size_t i = 0; i + pinned_live < limit && i < rows.size(); ++i) {
            expected[rows[i].head].insert(rows[i].position);
        }

        std::vector<std::set<std::size_t>> actual(heads);
        for (std::size_t h = 0; h < heads; ++h) {
            for (const KVEntry& e : out.heads[h]) {
                actual[h].insert(e.position);
            }
        }
        if (actual != expected) ++mismatches;
    }
    EXPECT_EQ(mismatches, 0u);
}

// Criterion 4: integer budgets always sum to layers * M; alpha = 0 gives the
// uniform allocation; higher sensitivity never gets a smaller budget.
TEST(Acceptance, BudgetConservation) {
    Criterion guard(4, "budget conservation and rank preservation");
    Rng rng(4096);
    const double alphas[] = {0.0, 0.5, 1.0, 1.1, 1.3, 3.0};
    const std::size_t layer_counts[] = {2, 4, 8};
    const std::size_t budgets[] = {7, 64};
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t layers = layer_counts[rng.uniform_index(3)];
        SensitivityProfile profile;
        for (std::size_t l = 0; l < layers; ++l) {
            const double s = rng.uniform();
            profile.sigma.push_back(1.0 - s);
            profile.sensitivity.push_back(s);
        }
        for (double alpha : alphas) {
            for (std::size_t m : budgets) {
                const BudgetAllocation alloc = allocate(profile, m, alpha);
                ASSERT_EQ(alloc.total(), layers * m);
                if (alpha == 0.0) {
                    for (std::size_t b : alloc.layer_budgets) {
                        ASSERT_EQ(b, m);
                    }
                }
                for (std::size_t a = 0; a < layers; ++a) {
                    for (std::size_t b = 0; b < layers; ++b) {
                        if (profile.sensitivity[a] > profile.sensitivity[b]) {
                            ASSERT_GE(alloc.layer_budgets[a], alloc.layer_budgets[b]);
                        }
                    }
                }
            }
        }
    }
}

// Criterion 5: a mask budget covering the whole calibration stream yields
// sigma = 1 on every layer; the 1-layer toy case matches the explicit
// double-loop oracle.
TEST(Acceptance, SensitivityEndpoints) {
    Criterion guard(5, "sensitivity endpoints and hand-loop oracle");
    {
        const Model model = init_model(desk_default());
        const auto tokens = synthetic_calibration_tokens(32, 9, model.config.vocab);
        const SensitivityProfile profile = measure_sensitivity(model, tokens, 32, 8);
        for (double sigma : profile.sigma) {
            EXPECT_NEAR(sigma, 1.0, 1e-6);
        }
    }
    {
        const Model model = init_model(desk_default(1, 1, 1, 16));
        const auto tokens = synthetic_calibration_tokens(4, 11, model.config.vocab);
        const std::size_t budget = 2, sink = 1;
        const SensitivityProfile profile = measure_sensitivity(model, tokens, budget, sink);

        const ForwardTrace full = forward(model, tokens, MaskSpec::causal());
        const ForwardTrace block =
            forward(model, tokens, MaskSpec::sink_recent(sink, budget - sink));
        double acc = 0.0;
        for (std::size_t t = 0; t < tokens.size(); ++t) {
            const auto a = full.layers[0].keys[0].row(t);
            const auto b = block.layers[0].keys[0].row(t);
            double dot_ = 0.0, na = 0.0, nb = 0.0;
            for (std::size_t d = 0; d < a.size(); ++d) {
                dot_ += a[d] * b[d];
                na += a[d] * a[d];
                nb += b[d] * b[d];
            }
            acc += dot_ / (std::sqrt(na) * std::sqrt(nb));
        }
        EXPECT_NEAR(profile.sigma[0], acc / 4.0, 1e-9);
    }
}

// Criterion 6: max aggregation dominates mean pointwise on random grids;
// single-row prompts make them equal; a hand grid matches the loop oracle.
TEST(Acceptance, PromptScoringAggregation) {
    Criterion guard(6, "prompt scoring aggregation properties");
    Rng rng(66);
    auto make_trace = [](std::size_t p, std::size_t cols, Rng* r) {
        ForwardTrace trace;
        for (std::size_t i = 0; i < p; ++i) trace.positions.push_back(500 + i);
        LayerTrace lt;
        lt.context_positions.resize(1);
        for (std::size_t j = 0; j < cols; ++j) lt.context_positions[0].push_back(j);
        for (std::size_t i = 0; i < p; ++i) lt.context_positions[0].push_back(500 + i);
        lt.keys.emplace_back(p, 2);
        lt.values.emplace_back(p, 2);
        Matrix grid(p, cols + p);
        if (r != nullptr) {
            for (double& x : grid.values) x = r->uniform();
        }
        lt.attention.push_back(std::move(grid));
        trace.layers.push_back(std::move(lt));
        return trace;
    };

    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t p = 1 + rng.uniform_index(8);
        const std::size_t cols = 1 + rng.uniform_index(12);
        const ForwardTrace trace = make_trace(p, cols, &rng);
        const TokenScoreMap avg = score_with_prompt(trace, Aggregation::Avg);
        const TokenScoreMap max = score_with_prompt(trace, Aggregation::Max);
        for (std::size_t j = 0; j < cols; ++j) {
            ASSERT_GE(max.at(0, 0, j), avg.at(0, 0, j) - 1e-15);
            if (p == 1) {
                ASSERT_DOUBLE_EQ(max.at(0, 0, j), avg.at(0, 0, j));
            }
        }
    }

    ForwardTrace trace = make_trace(3, 4, nullptr);
    const double grid[3][4] = {{0.2, 0.1, 0.4, 0.3}, {0.1, 0.6, 0.2, 0.1}, {0.3, 0.3, 0.3, 0.1}};
    for (std::size_t t = 0; t < 3; ++t) {
        for (std::size_t j = 0; j < 4; ++j) {
            trace.layers[0].attention[0].at(t, j) = grid[t][j];
        }
    }
    const TokenScoreMap avg = score_with_prompt(trace, Aggregation::Avg);
    const TokenScoreMap max = score_with_prompt(trace, Aggregation::Max);
    for (std::size_t j = 0; j < 4; ++j) {
        double sum = 0.0, m = 0.0;
        for (std::size_t t = 0; t < 3; ++t) {
            sum += grid[t][j];
            m = std::max(m, grid[t][j]);
        }
        EXPECT_NEAR(avg.at(0, 0, j), sum / 3.0, 1e-12);
        EXPECT_NEAR(max.at(0, 0, j), m, 1e-12);
    }
}

// Criterion 7: overlap with the exact-question oracle cache orders prompt
// quality: most-similar utterances beat least-similar ones, and the routed
// medoid prompt beats the generic summarization prompt.
TEST(Acceptance, PromptRelevanceOverlapTrend) {
    Criterion guard(7, "prompt relevance overlap trend, 20 seeds");
    const Model model = init_model(desk_default());
    const HashEmbedder embedder;

    std::atomic<int> top_beats_bottom{0};
    std::atomic<int> medoid_beats_generic{0};

    parallel_for(20, [&](std::size_t seed_index) {
        const std::uint64_t seed = seed_index + 1;
        std::istringstream corpus(synth_corpus(4, 12, 1, seed));
        auto [history, queries] = parse_conversation(corpus);
        const Query& query = queries.queries[seed_index % queries.queries.size()];
        const RenderedHistory rendered = render_history_tokens(history, model.config.vocab);
        const std::vector<TokenId> query_tokens = tokenize(query.text, model.config.vocab);

        BlockPrefillConfig base;
        base.budget_per_head = 16;
        base.block_size = 64;

        const PrefillReport oracle =
            exact_question_prefill(model, rendered.tokens, base, query_tokens);
        const RetainedSets oracle_sets = retained_positions(oracle.cache);

        auto overlap_with_prompt = [&](const PatchedPrompt& prompt) {
            BlockPrefillConfig config = base;
            config.scorer = ScorerKind::patched;
            config.prompt_provider = [prompt](std::size_t, std::size_t) { return prompt; };
            const PrefillReport report = block_prefill(model, rendered.tokens, config);
            return overlap_vs_oracle(retained_positions(report.cache), oracle_sets).mean;
        };

        // Top and bottom 10% of utterances by embedding similarity.
        const PatchedPrompt top_prompt =
            similarity_ranked_prompt(history, query.text, embedder, 0.1, model.config.vocab);
        const Vec query_vec = embedder.embed(query.text);
        std::vector<std::pair<double, std::size_t>> ranked;
        for (std::size_t i = 0; i < history.turn_count(); ++i) {
            ranked.emplace_back(cosine(embedder.embed(history.utterances[i].text), query_vec), i);
        }
        std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first < b.first;
            return a.second < b.second;
        });
        const std::size_t take =
            static_cast<std::size_t>(std::ceil(0.1 * double(history.turn_count())));
        std::vector<std::size_t> bottom_turns;
        for (std::size_t i = 0; i < take; ++i) bottom_turns.push_back(ranked[i].second);
        std::sort(bottom_turns.begin(), bottom_turns.end());
        std::vector<Utterance> bottom_utterances;
        for (std::size_t i : bottom_turns) bottom_utterances.push_back(history.utterances[i]);
        PatchedPrompt bottom_prompt;
        bottom_prompt.origin = PromptOrigin::similarity_ranked;
        bottom_prompt.tokens = render_utterances(bottom_utterances, model.config.vocab).tokens;

        // Medoid prompt of the episode the query routes to.
        const auto segments = segment_history(history, 4);
        std::vector<Vec> embeddings;
        for (const Segment& s : segments) embeddings.push_back(embedder.embed(s.text));
        const KMeansResult clusters = kmeans(embeddings, 4, seed);
        const EpisodeModel episodes = finalize_episodes(history, segments, embeddings,
                                                        clusters.assignments, 8,
                                                        model.config.vocab);
        std::size_t routed = 0;
        double best = -2.0;
        for (std::size_t e = 0; e < episodes.episode_count; ++e) {
            const double c = cosine(query_vec, episodes.centroids[e]);
            if (c > best) {
                best = c;
                routed = e;
            }
        }

        PatchedPrompt generic = infinipot_prompt(model.config.vocab);

        const double top = overlap_with_prompt(top_prompt);
        const double bottom = overlap_with_prompt(bottom_prompt);
        const double medoid = overlap_with_prompt(episodes.prompts[routed]);
        const double generic_overlap = overlap_with_prompt(generic);

        if (top > bottom) top_beats_bottom.fetch_add(1);
        if (medoid > generic_overlap) medoid_beats_generic.fetch_add(1);
    });

    std::printf("  overlap trend: top>bottom in %d/20 seeds, medoid>generic in %d/20 seeds\n",
                top_beats_bottom.load(), medoid_beats_generic.load());
    EXPECT_GE(top_beats_bottom.load(), 17);
    EXPECT_GE(medoid_beats_generic.load(), 15);
}

// Criterion 8: switch counting on a 4-topic 40-query session; medoid texts
// route home; repeats load nothing; forced alternation switches every turn.
TEST(Acceptance, RoutingAndSwitches) {
    Criterion guard(8, "routing, residency reuse, switch counting");
    const auto dir = std::filesystem::temp_directory_path() / "epikv_accept_routing";
    std::filesystem::remove_all(dir);
    const Model model = init_model(desk_default());
    const HashEmbedder embedder;

    std::istringstream corpus(synth_corpus(4, 12, 10, 8));
    auto [history, queries] = parse_conversation(corpus);
    ASSERT_EQ(queries.queries.size(), 40u);

    EpisodicBuildConfig config;
    config.block_size = 64;
    const BuildResult built =
        build(model, history, 4, 16, 1.1, embedder, (dir / "store").string(), config);

    SessionState state;
    for (const Query& q : queries.queries) {
        route(built.set, embedder, q.text, state);
    }
    EXPECT_LE(state.switch_count, 40u);
    EXPECT_LT(state.switch_count, 40u);  // topic blocks persist, no forced alternation

    // Medoid prompt texts route to their own episodes, 4/4.
    for (std::size_t e = 0; e < 4; ++e) {
        SessionState fresh;
        EXPECT_EQ(route(built.set, embedder, built.set.episodes.prompt_texts[e], fresh), e);
    }

    // Repeat queries trigger zero loads.
    SessionState repeat_state;
    route(built.set, embedder, queries.queries[0].text, repeat_state);
    const std::size_t after_first = repeat_state.switch_count;
    route(built.set, embedder, queries.queries[0].text, repeat_state);
    EXPECT_EQ(repeat_state.switch_count, after_first);
    EXPECT_EQ(repeat_state.route_log.back().load_bytes, 0u);

    // Forced alternation between two distinct episodes switches every turn.
    SessionState alternating;
    const std::string text_a = built.set.episodes.prompt_texts[0];
    const std::string text_b = built.set.episodes.prompt_texts[1];
    for (int i = 0; i < 40; ++i) {
        route(built.set, embedder, i % 2 == 0 ? text_a : text_b, alternating);
    }
    EXPECT_EQ(alternating.switch_count, 40u);
    std::filesystem::remove_all(dir);
}

// Criterion 9: with per-layer budgets at least the context length, decoding
// from the episodic cache equals full-KV decoding token for token.
TEST(Acceptance, LosslessBudgetEquivalence) {
    Criterion guard(9, "lossless budget decode equivalence, 10 queries");
    const auto dir = std::filesystem::temp_directory_path() / "epikv_accept_lossless";
    std::filesystem::remove_all(dir);
    const Model model = init_model(desk_default());
    const HashEmbedder embedder;

    std::istringstream corpus(synth_corpus(2, 8, 5, 21));
    auto [history, queries] = parse_conversation(corpus);
    ASSERT_EQ(queries.queries.size(), 10u);
    const RenderedHistory rendered = render_history_tokens(history, model.config.vocab);

    EpisodicBuildConfig config;
    config.block_size = 64;
    config.use_allocation = false;
    const std::size_t budget = rendered.tokens.size();
    const BuildResult built =
        build(model, history, 2, budget, 1.1, embedder, (dir / "store").string(), config);

    EpisodicCache full = make_empty_cache(model.config, budget);
    append_to_cache(full, forward(model, rendered.tokens, MaskSpec::causal()));

    SessionState state;
    for (const Query& q : queries.queries) {
        const AnswerResult result = answer(model, built.set, embedder, state, q.text, 8);
        const auto expected = greedy_decode(model, full, tokenize(q.text, model.config.vocab), 8);
        ASSERT_EQ(result.tokens, expected) << "query: " << q.text;
    }
    std::filesystem::remove_all(dir);
}

// Criterion 10: two identically configured CLI runs produce byte-identical
// report.json, and caches reloaded from the store reproduce the same
// answers.
TEST(Acceptance, DeterminismAndPersistence) {
    Criterion guard(10, "run determinism and persisted-cache replay");
    const auto dir = std::filesystem::temp_directory_path() / "epikv_accept_determinism";
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);

    ExperimentConfig config;
    config.model = desk_default();
    config.budget_per_head = 16;
    config.block_size = 32;
    config.episodes = 2;
    config.max_new = 6;
    config.corpus_path = fixture_path("fixture_12turn.jsonl");

    const auto config_path = dir / "run.cfg";
    {
        std::ofstream out(config_path);
        out << "m = " << config.budget_per_head << "\n"
            << "m_block = " << config.block_size << "\n"
            << "episodes = " << config.episodes << "\n"
            << "max_new = " << config.max_new << "\n"
            << "corpus = " << config.corpus_path << "\n";
    }
    const std::string cli = EPIKV_CLI_PATH;
    for (const char* out_name : {"a", "b"}) {
        const std::string command = cli + " run --config " + config_path.string() + " -o " +
                                    (dir / out_name).string() + " > /dev/null";
        ASSERT_EQ(std::system(command.c_str()), 0);
    }
    const std::string report_a = file_text(dir / "a" / "report.json");
    EXPECT_FALSE(report_a.empty());
    EXPECT_EQ(report_a, file_text(dir / "b" / "report.json"));

    // Replay the answers through caches reloaded from disk.
    std::ifstream corpus_in(config.corpus_path);
    auto [history, queries] = parse_conversation(corpus_in);
    const Model model = init_model(config.model);
    const HashEmbedder embedder;
    const EpisodicCacheSet reloaded = load_cache_set((dir / "a" / "cache_store").string());
    SessionState state;
    const auto expected_answers =
        nlohmann::json::parse(report_a)["answers"].get<std::vector<std::vector<TokenId>>>();
    ASSERT_EQ(expected_answers.size(), queries.queries.size());
    for (std::size_t i = 0; i < queries.queries.size(); ++i) {
        const AnswerResult result =
            answer(model, reloaded, embedder, state, queries.queries[i].text, config.max_new);
        EXPECT_EQ(result.tokens, expected_answers[i]);
    }
    std::filesystem::remove_all(dir);
}

// Criterion 11: static sink+recent retention is exact at the stated sizes,
// and identical keys all score -1 under the key-distinctiveness scorer.
TEST(Acceptance, BaselineExactness) {
    Criterion guard(11, "baseline exactness: sink+recent set, key scores");
    {
        const Model model = init_model(desk_default());
        const std::size_t n = 5000, budget = 2048, sink = 128;
        const auto context = synthetic_calibration_tokens(n, 3, model.config.vocab);
        BlockPrefillConfig config;
        config.budget_per_head = budget;
        config.block_size = 512;
        config.scorer = ScorerKind::streaming;
        config.streaming_sink = sink;
        const PrefillReport report = block_prefill(model, context, config);

        std::vector<std::size_t> expected = streaming_retention(n, budget, sink);
        ASSERT_EQ(expected.size(), budget);
        EXPECT_EQ(expected[sink], n - (budget - sink));
        const auto retained = retained_positions(report.cache);
        for (const auto& per_head : retained) {
            for (const auto& positions : per_head) {
                ASSERT_EQ(positions, expected);
            }
        }
    }
    {
        EpisodicCache cache;
        LayerCache layer(1, 8);
        for (std::size_t p = 0; p < 8; ++p) {
            KVEntry e;
            e.position = p;
            e.key = {0.5, -1.5, 2.0, 0.25};
            e.value = Vec(4, 0.0);
            layer.heads[0].push_back(std::move(e));
        }
        cache.layers.push_back(std::move(layer));
        const TokenScoreMap scores = keydiff_scores(cache);
        for (std::size_t p = 0; p < 8; ++p) {
            EXPECT_NEAR(scores.at(0, 0, p), -1.0, 1e-12);
        }
    }
}
