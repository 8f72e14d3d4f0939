// SPDX-License-Identifier: Apache-2.0

#include "epikv/kvcache.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <tuple>

#include <gtest/gtest.h>

using namespace epikv;

namespace {

KVEntry make_entry(std::size_t position, Rng& rng, std::size_t dim = 4) {
    KVEntry e;
    e.position = position;
    e.key.resize(dim);
    e.value.resize(dim);
    for (auto& x : e.key) x = rng.gaussian();
    for (auto& x : e.value) x = rng.gaussian();
    return e;
}

// Brute-force reference: keep pins, then globally sort remaining entries by
// (score desc, position asc, head asc) and keep until the budget is full.
std::vector<std::set<std::size_t>> evict_oracle(const LayerCache& cache,
                                                const LayerScores& scores,
                                                const std::set<std::size_t>& pinned) {
    struct Row {
        double score;
        std::size_t position;
        std::size_t head;
    };
    std::vector<Row> rows;
    std::vector<std::set<std::size_t>> kept(cache.heads.size());
    std::size_t pinned_count = 0;
    for (std::size_t h = 0; h < cache.heads.size(); ++h) {
        for (const KVEntry& e : cache.heads[h]) {
            if (pinned.count(e.position)) {
                kept[h].insert(e.position);
                ++pinned_count;
            } else {
                rows.push_back({scores[h].at(e.position), e.position, h});
            }
        }
    }
    std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
        return std::make_tuple(-a.score, a.position, a.head) <
               std::make_tuple(-b.score, b.position, b.head);
    });
    const std::size_t limit = cache.heads.size() * cache.budget;
    for (std::size_t i = 0; i + pinned_count < limit && i < rows.size(); ++i) {
        kept[rows[i].head].insert(rows[i].position);
    }
    return kept;
}

std::vector<std::set<std::size_t>> positions_of(const LayerCache& cache) {
    std::vector<std::set<std::size_t>> out(cache.heads.size());
    for (std::size_t h = 0; h < cache.heads.size(); ++h) {
        for (const KVEntry& e : cache.heads[h]) {
            out[h].insert(e.position);
        }
    }
    return out;
}

}  // namespace

TEST(Evict, UnderBudgetUnchanged) {
    Rng rng(1);
    LayerCache cache(1, 4);
    LayerScores scores(1);
    for (std::size_t p = 0; p < 3; ++p) {
        cache.heads[0].push_back(make_entry(p, rng));
        scores[0][p] = double(p);
    }
    const LayerCache out = evict_to_budget(cache, scores);
    EXPECT_EQ(out, cache);
}

TEST(Evict, DirectTopK) {
    Rng rng(2);
    LayerCache cache(1, 2);
    LayerScores scores(1);
    const double s[] = {5, 1, 9, 2};
    for (std::size_t p = 0; p < 4; ++p) {
        cache.heads[0].push_back(make_entry(p, rng));
        scores[0][p] = s[p];
    }
    const LayerCache out = evict_to_budget(cache, scores);
    EXPECT_EQ(positions_of(out)[0], (std::set<std::size_t>{0, 2}));
}

TEST(Evict, PreservesPerHeadOrdering) {
    Rng rng(3);
    LayerCache cache(2, 3);
    LayerScores scores(2);
    for (std::size_t h = 0; h < 2; ++h) {
        for (std::size_t p = 0; p < 8; ++p) {
            cache.heads[h].push_back(make_entry(p, rng));
            scores[h][p] = rng.uniform();
        }
    }
    const LayerCache out = evict_to_budget(cache, scores);
    for (const auto& head : out.heads) {
        for (std::size_t i = 1; i < head.size(); ++i) {
            EXPECT_LT(head[i - 1].position, head[i].position);
        }
    }
    EXPECT_EQ(out.entry_count(), 6u);
}

TEST(Evict, MatchesGlobalSortOracle) {
    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t heads = 1 + rng.uniform_index(2);
        const std::size_t budget = 1 + rng.uniform_index(4);
        LayerCache cache(heads, budget);
        LayerScores scores(heads);
        std::set<std::size_t> pinned;
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t p = 0; p < 6; ++p) {
                cache.heads[h].push_back(make_entry(p, rng));
                // Quantized scores to provoke ties across heads and positions.
                scores[h][p] = double(rng.uniform_index(4));
            }
        }
        // Pin position 0 sometimes (live in every head).
        if (trial % 3 == 0 && heads * budget > heads) {
            pinned.insert(0);
        }
        std::unordered_set<std::size_t> pin_arg(pinned.begin(), pinned.end());
        const LayerCache out = evict_to_budget(cache, scores, pin_arg);
        const auto expected = evict_oracle(cache, scores, pinned);
        EXPECT_EQ(positions_of(out), expected);
        EXPECT_LE(out.entry_count(), heads * budget);
    }
}

TEST(Evict, DeterministicAcrossCalls) {
    Rng rng(7);
    LayerCache cache(2, 2);
    LayerScores scores(2);
    for (std::size_t h = 0; h < 2; ++h) {
        for (std::size_t p = 0; p < 6; ++p) {
            cache.heads[h].push_back(make_entry(p, rng));
            scores[h][p] = 1.0;  // all tied
        }
    }
    const LayerCache a = evict_to_budget(cache, scores);
    const LayerCache b = evict_to_budget(cache, scores);
    EXPECT_EQ(a, b);
}

TEST(Evict, PinnedOverflowThrows) {
    Rng rng(9);
    LayerCache cache(1, 1);
    LayerScores scores(1);
    std::unordered_set<std::size_t> pinned;
    for (std::size_t p = 0; p < 3; ++p) {
        cache.heads[0].push_back(make_entry(p, rng));
        scores[0][p] = 0.0;
        pinned.insert(p);
    }
    EXPECT_THROW(evict_to_budget(cache, scores, pinned), Error);
}

TEST(Evict, MissingScoreThrows) {
    Rng rng(11);
    LayerCache cache(1, 1);
    LayerScores scores(1);
    cache.heads[0].push_back(make_entry(0, rng));
    cache.heads[0].push_back(make_entry(1, rng));
    scores[0][0] = 1.0;  // no score for position 1
    EXPECT_THROW(evict_to_budget(cache, scores), DimensionError);
}

TEST(Count, EmptyCachesAreZero) {
    EpisodicCache cache;
    cache.layers.assign(3, LayerCache(2, 4));
    const EntryCounts counts = count_entries(cache);
    EXPECT_EQ(counts.total, 0u);
    for (std::size_t n : counts.per_layer) EXPECT_EQ(n, 0u);
}

TEST(Count, PostEvictionExactness) {
    Rng rng(13);
    EpisodicCache cache;
    cache.layers.assign(2, LayerCache(2, 3));
    for (auto& layer : cache.layers) {
        LayerScores scores(2);
        for (std::size_t h = 0; h < 2; ++h) {
            for (std::size_t p = 0; p < 10; ++p) {
                layer.heads[h].push_back(make_entry(p, rng));
                scores[h][p] = rng.uniform();
            }
        }
        layer = evict_to_budget(layer, scores);
    }
    const EntryCounts counts = count_entries(cache);
    for (std::size_t n : counts.per_layer) {
        EXPECT_EQ(n, 6u);  // min(20, 2 * 3)
    }
    EXPECT_EQ(counts.total, 12u);
}

TEST(Count, ShadowMultisetProperty) {
    Rng rng(17);
    EpisodicCache cache;
    cache.layers.assign(2, LayerCache(1, 4));
    std::vector<std::size_t> shadow(2, 0);
    std::size_t next_pos = 0;
    for (int step = 0; step < 100; ++step) {
        const std::size_t layer = rng.uniform_index(2);
        if (rng.uniform() < 0.7) {
            cache.layers[layer].heads[0].push_back(make_entry(next_pos++, rng));
            ++shadow[layer];
        } else {
            LayerScores scores(1);
            for (const KVEntry& e : cache.layers[layer].heads[0]) {
                scores[0][e.position] = rng.uniform();
            }
            cache.layers[layer] = evict_to_budget(cache.layers[layer], scores);
            shadow[layer] = std::min(shadow[layer], std::size_t{4});
        }
        const EntryCounts counts = count_entries(cache);
        EXPECT_EQ(counts.per_layer, shadow);
    }
}

class PersistTest : public ::testing::Test {
protected:
    void SetUp() override {
        dir = std::filesystem::temp_directory_path() / "epikv_persist_test";
        std::filesystem::remove_all(dir);
        std::filesystem::create_directories(dir);
    }
    void TearDown() override { std::filesystem::remove_all(dir); }
    std::filesystem::path dir;
};

TEST_F(PersistTest, EmptyCacheRoundTrip) {
    EpisodicCache cache;
    cache.episode_id = 3;
    cache.layers.assign(2, LayerCache(2, 8));
    cache.provenance.scorer = "patched";
    cache.provenance.budget_per_head = 8;
    cache.provenance.layer_budgets = {8, 8};
    const std::size_t bytes = persist(cache, dir / "empty.epkv");
    EXPECT_GT(bytes, 0u);
    EXPECT_EQ(load_cache(dir / "empty.epkv"), cache);
}

TEST_F(PersistTest, RandomCacheRoundTripIsBitwise) {
    Rng rng(19);
    EpisodicCache cache;
    cache.episode_id = 1;
    cache.provenance.scorer = "keydiff";
    cache.provenance.budget_per_head = 5;
    cache.provenance.layer_budgets = {5, 5, 5};
    for (int l = 0; l < 3; ++l) {
        LayerCache layer(2, 5);
        for (std::size_t h = 0; h < 2; ++h) {
            for (std::size_t p = 0; p < 5; ++p) {
                layer.heads[h].push_back(make_entry(p * 7 + h, rng, 8));
            }
        }
        cache.layers.push_back(std::move(layer));
    }
    persist(cache, dir / "rand.epkv");
    const EpisodicCache loaded = load_cache(dir / "rand.epkv");
    ASSERT_EQ(loaded, cache);
    // Bitwise check on a sampled float.
    EXPECT_EQ(std::bit_cast<std::uint64_t>(loaded.layers[2].heads[1][3].key[5]),
              std::bit_cast<std::uint64_t>(cache.layers[2].heads[1][3].key[5]));
}

TEST_F(PersistTest, CorruptHeaderFailsClosed) {
    EpisodicCache cache;
    cache.layers.assign(1, LayerCache(1, 2));
    persist(cache, dir / "x.epkv");
    {
        std::fstream f(dir / "x.epkv", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(0);
        f.write("NOPE", 4);
    }
    EXPECT_THROW(load_cache(dir / "x.epkv"), IoError);
}

TEST_F(PersistTest, VersionMismatchFailsClosed) {
    EpisodicCache cache;
    cache.layers.assign(1, LayerCache(1, 2));
    persist(cache, dir / "v.epkv");
    {
        std::fstream f(dir / "v.epkv", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(4);
        const char bad[2] = {char(0xFF), char(0x7F)};
        f.write(bad, 2);
    }
    EXPECT_THROW(load_cache(dir / "v.epkv"), IoError);
}

TEST_F(PersistTest, TruncatedFileFailsClosed) {
    Rng rng(23);
    EpisodicCache cache;
    LayerCache layer(1, 4);
    for (std::size_t p = 0; p < 4; ++p) layer.heads[0].push_back(make_entry(p, rng));
    cache.layers.push_back(layer);
    const std::size_t bytes = persist(cache, dir / "t.epkv");
    std::filesystem::resize_file(dir / "t.epkv", bytes / 2);
    EXPECT_THROW(load_cache(dir / "t.epkv"), IoError);
}

TEST_F(PersistTest, StoreUnknownEpisodeThrows) {
    CacheStore store((dir / "store").string());
    EXPECT_THROW(store.load(42), IoError);
}

TEST_F(PersistTest, StoreSaveLoadAndManifest) {
    CacheStore store((dir / "store").string());
    EpisodicCache cache;
    cache.episode_id = 2;
    cache.layers.assign(1, LayerCache(1, 2));
    const std::size_t bytes = store.save(cache);
    EXPECT_EQ(store.stored_bytes(2), bytes);
    EXPECT_EQ(store.load(2), cache);

    nlohmann::ordered_json manifest;
    manifest["episodes"] = {2};
    store.write_manifest(manifest);
    EXPECT_EQ(store.read_manifest()["episodes"][0], 2);
}
