// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "epikv/numerics.hpp"

namespace epikv {

class IoError : public Error {
public:
    explicit IoError(const std::string& what) : Error(what) {}
};

/// Key and Value state of a single token in one (layer, kv-head) slot.
struct KVEntry {
    std::size_t position = 0;
    Vec key;
    Vec value;

    bool operator==(const KVEntry&) const = default;
};

/// Token-level KV storage for one layer: per kv-head, a position-sorted
/// entry list, plus the per-head budget the layer is evicted to.
struct LayerCache {
    std::vector<std::vector<KVEntry>> heads;
    std::size_t budget = 0;  // per kv-head; layer holds at most heads * budget entries

    LayerCache() = default;
    LayerCache(std::size_t kv_heads, std::size_t per_head_budget)
        : heads(kv_heads), budget(per_head_budget) {}

    std::size_t entry_count() const {
        std::size_t n = 0;
        for (const auto& h : heads) n += h.size();
        return n;
    }

    bool operator==(const LayerCache&) const = default;
};

struct CacheProvenance {
    std::string scorer;
    std::size_t budget_per_head = 0;           // global per-head budget M
    std::vector<std::size_t> layer_budgets;    // per-layer budgets actually used

    bool operator==(const CacheProvenance&) const = default;
};

/// A compressed cache for one episode: L layer caches plus provenance.
struct EpisodicCache {
    std::size_t episode_id = 0;
    std::vector<LayerCache> layers;
    CacheProvenance provenance;

    std::size_t layer_count() const { return layers.size(); }

    std::size_t max_position() const {
        std::size_t m = 0;
        bool any = false;
        for (const auto& layer : layers) {
            for (const auto& head : layer.heads) {
                if (!head.empty()) {
                    m = std::max(m, head.back().position);
                    any = true;
                }
            }
        }
        return any ? m : 0;
    }

    bool empty() const {
        for (const auto& layer : layers) {
            for (const auto& head : layer.heads) {
                if (!head.empty()) return false;
            }
        }
        return true;
    }

    bool operator==(const EpisodicCache&) const = default;
};

enum class OccupancyKind { Append, PromptResident, Evict };

struct OccupancySample {
    std::size_t step = 0;
    OccupancyKind kind = OccupancyKind::Append;
    std::vector<std::size_t> entries_per_layer;
    std::vector<std::size_t> prompt_resident_per_layer;
};

/// Time-ordered record of live entry counts per layer. The prompt-resident
/// series counts transient prompt KV states that are never inserted into the
/// cache; the memory bound is checked against the entries series only.
struct OccupancyLog {
    std::vector<OccupancySample> samples;

    void record(OccupancyKind kind, std::vector<std::size_t> entries,
                std::vector<std::size_t> prompt_resident) {
        OccupancySample s;
        s.step = samples.size();
        s.kind = kind;
        s.entries_per_layer = std::move(entries);
        s.prompt_resident_per_layer = std::move(prompt_resident);
        samples.push_back(std::move(s));
    }

    std::vector<std::size_t> peak_entries_per_layer(std::size_t layer_count) const {
        std::vector<std::size_t> peak(layer_count, 0);
        for (const auto& s : samples) {
            for (std::size_t l = 0; l < layer_count && l < s.entries_per_layer.size(); ++l) {
                peak[l] = std::max(peak[l], s.entries_per_layer[l]);
            }
        }
        return peak;
    }
};

/// Per-head position -> score lookup for one layer.
using LayerScores = std::vector<std::unordered_map<std::size_t, double>>;

/// Evicts a layer back to its budget. Pinned positions are always retained;
/// the remaining slots go to the top-scoring entries pooled across the
/// layer's kv-heads (per-head counts may be non-uniform). Ties break towards
/// the lower position, then the lower head. Per-head position ordering is
/// preserved. Throws if the pinned entries alone exceed the budget or if a
/// live entry is missing a score.
inline LayerCache evict_to_budget(const LayerCache& cache, const LayerScores& scores,
                                  const std::unordered_set<std::size_t>& pinned = {}) {
    const std::size_t head_count = cache.heads.size();
    if (scores.size() != head_count) {
        throw DimensionError("evict_to_budget: score head count mismatch");
    }
    const std::size_t limit = head_count * cache.budget;
    if (cache.entry_count() <= limit) {
        return cache;
    }

    struct Candidate {
        double score;
        std::size_t position;
        std::size_t head;
    };
    std::vector<Candidate> candidates;
    std::size_t pinned_live = 0;
    for (std::size_t h = 0; h < head_count; ++h) {
        for (const KVEntry& e : cache.heads[h]) {
            if (pinned.count(e.position)) {
                ++pinned_live;
                continue;
            }
            auto it = scores[h].find(e.position);
            if (it == scores[h].end()) {
                throw DimensionError("evict_to_budget: missing score for head " +
                                     std::to_string(h) + " position " +
                                     std::to_string(e.position));
            }
            candidates.push_back({it->second, e.position, h});
        }
    }
    if (pinned_live > limit) {
        throw Error("evict_to_budget: pinned entries (" + std::to_string(pinned_live) +
                    ") exceed layer budget (" + std::to_string(limit) + ")");
    }

    const std::size_t slots = limit - pinned_live;
    std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.position != b.position) return a.position < b.position;
        return a.head < b.head;
    });

    std::vector<std::unordered_set<std::size_t>> keep(head_count);
    for (std::size_t i = 0; i < slots && i < candidates.size(); ++i) {
        keep[candidates[i].head].insert(candidates[i].position);
    }

    LayerCache out(head_count, cache.budget);
    for (std::size_t h = 0; h < head_count; ++h) {
        for (const KVEntry& e : cache.heads[h]) {
            if (pinned.count(e.position) || keep[h].count(e.position)) {
                out.heads[h].push_back(e);
            }
        }
    }
    return out;
}

struct EntryCounts {
    std::vector<std::size_t> per_layer;
    std::size_t total = 0;
};

inline EntryCounts count_entries(const EpisodicCache& cache) {
    EntryCounts counts;
    counts.per_layer.reserve(cache.layers.size());
    for (const auto& layer : cache.layers) {
        const std::size_t n = layer.entry_count();
        counts.per_layer.push_back(n);
        counts.total += n;
    }
    return counts;
}

/// Sorted retained positions per (layer, head).
inline std::vector<std::vector<std::vector<std::size_t>>> retained_positions(
    const EpisodicCache& cache) {
    std::vector<std::vector<std::vector<std::size_t>>> out;
    out.reserve(cache.layers.size());
    for (const auto& layer : cache.layers) {
        std::vector<std::vector<std::size_t>> per_head;
        per_head.reserve(layer.heads.size());
        for (const auto& head : layer.heads) {
            std::vector<std::size_t> positions;
            positions.reserve(head.size());
            for (const auto& e : head) positions.push_back(e.position);
            per_head.push_back(std::move(positions));
        }
        out.push_back(std::move(per_head));
    }
    return out;
}

namespace detail {

inline constexpr char kStoreMagic[4] = {'E', 'P', 'K', 'V'};
inline constexpr std::uint16_t kStoreVersion = 1;

inline void write_bytes_le(std::ostream& out, std::uint64_t v, int n_bytes) {
    char buf[8];
    for (int i = 0; i < n_bytes; ++i) {
        buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    }
    out.write(buf, n_bytes);
}

inline std::uint64_t read_bytes_le(std::istream& in, int n_bytes) {
    char buf[8];
    in.read(buf, n_bytes);
    if (!in) throw IoError("cache file truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < n_bytes; ++i) {
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[i])) << (8 * i);
    }
    return v;
}

inline void write_u16(std::ostream& out, std::uint16_t v) { write_bytes_le(out, v, 2); }
inline void write_u32(std::ostream& out, std::uint32_t v) { write_bytes_le(out, v, 4); }
inline void write_u64(std::ostream& out, std::uint64_t v) { write_bytes_le(out, v, 8); }
inline void write_f64(std::ostream& out, double v) {
    write_bytes_le(out, std::bit_cast<std::uint64_t>(v), 8);
}
inline std::uint16_t read_u16(std::istream& in) {
    return static_cast<std::uint16_t>(read_bytes_le(in, 2));
}
inline std::uint32_t read_u32(std::istream& in) {
    return static_cast<std::uint32_t>(read_bytes_le(in, 4));
}
inline std::uint64_t read_u64(std::istream& in) { return read_bytes_le(in, 8); }
inline double read_f64(std::istream& in) { return std::bit_cast<double>(read_bytes_le(in, 8)); }

}  // namespace detail

/// Writes the cache to a flat little-endian binary file. Returns the byte
/// count written. Key/value reals are preserved bitwise.
inline std::size_t persist(const EpisodicCache& cache, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("persist: cannot open " + path.string());
    }
    out.write(detail::kStoreMagic, 4);
    detail::write_u16(out, detail::kStoreVersion);
    detail::write_u64(out, cache.episode_id);
    detail::write_u32(out, static_cast<std::uint32_t>(cache.layers.size()));
    detail::write_u32(out, static_cast<std::uint32_t>(
                               cache.layers.empty() ? 0 : cache.layers[0].heads.size()));
    detail::write_u32(out, static_cast<std::uint32_t>(cache.provenance.scorer.size()));
    out.write(cache.provenance.scorer.data(),
              static_cast<std::streamsize>(cache.provenance.scorer.size()));
    detail::write_u64(out, cache.provenance.budget_per_head);
    detail::write_u32(out, static_cast<std::uint32_t>(cache.provenance.layer_budgets.size()));
    for (std::size_t b : cache.provenance.layer_budgets) {
        detail::write_u64(out, b);
    }
    for (const auto& layer : cache.layers) {
        detail::write_u64(out, layer.budget);
        detail::write_u32(out, static_cast<std::uint32_t>(layer.heads.size()));
        for (const auto& head : layer.heads) {
            detail::write_u64(out, head.size());
            for (const auto& e : head) {
                detail::write_u64(out, e.position);
                detail::write_u32(out, static_cast<std::uint32_t>(e.key.size()));
                for (double x : e.key) detail::write_f64(out, x);
                for (double x : e.value) detail::write_f64(out, x);
            }
        }
    }
    out.flush();
    if (!out) {
        throw IoError("persist: write failed for " + path.string());
    }
    return static_cast<std::size_t>(out.tellp());
}

/// Loads a cache written by persist(). Fails closed: magic/version mismatch
/// or truncation throws and returns no partial cache.
inline EpisodicCache load_cache(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("load: cannot open " + path.string());
    }
    char magic[4];
    in.read(magic, 4);
    if (!in || !std::equal(magic, magic + 4, detail::kStoreMagic)) {
        throw IoError("load: bad magic in " + path.string());
    }
    const std::uint16_t version = detail::read_u16(in);
    if (version != detail::kStoreVersion) {
        throw IoError("load: version mismatch in " + path.string() + " (got " +
                      std::to_string(version) + ", expected " +
                      std::to_string(detail::kStoreVersion) + ")");
    }
    EpisodicCache cache;
    cache.episode_id = detail::read_u64(in);
    const std::uint32_t layer_count = detail::read_u32(in);
    detail::read_u32(in);  // head count, redundant with per-layer counts
    const std::uint32_t scorer_len = detail::read_u32(in);
    std::string scorer(scorer_len, '\0');
    in.read(scorer.data(), scorer_len);
    if (!in) throw IoError("cache file truncated");
    cache.provenance.scorer = std::move(scorer);
    cache.provenance.budget_per_head = detail::read_u64(in);
    const std::uint32_t n_budgets = detail::read_u32(in);
    for (std::uint32_t i = 0; i < n_budgets; ++i) {
        cache.provenance.layer_budgets.push_back(detail::read_u64(in));
    }
    for (std::uint32_t l = 0; l < layer_count; ++l) {
        LayerCache layer;
        layer.budget = detail::read_u64(in);
        const std::uint32_t heads = detail::read_u32(in);
        layer.heads.resize(heads);
        for (std::uint32_t h = 0; h < heads; ++h) {
            const std::uint64_t n = detail::read_u64(in);
            layer.heads[h].reserve(n);
            for (std::uint64_t i = 0; i < n; ++i) {
                KVEntry e;
                e.position = detail::read_u64(in);
                const std::uint32_t dim = detail::read_u32(in);
                e.key.resize(dim);
                for (auto& x : e.key) x = detail::read_f64(in);
                e.value.resize(dim);
                for (auto& x : e.value) x = detail::read_f64(in);
                layer.heads[h].push_back(std::move(e));
            }
        }
        cache.layers.push_back(std::move(layer));
    }
    return cache;
}

/// Directory of episode_<e>.epkv files plus a manifest.json.
class CacheStore {
public:
    explicit CacheStore(std::filesystem::path dir) : m_dir(std::move(dir)) {
        std::error_code ec;
        std::filesystem::create_directories(m_dir, ec);
        if (ec) {
            throw IoError("store: cannot create " + m_dir.string() + ": " + ec.message());
        }
    }

    const std::filesystem::path& dir() const { return m_dir; }

    std::filesystem::path episode_path(std::size_t episode_id) const {
        return m_dir / ("episode_" + std::to_string(episode_id) + ".epkv");
    }

    std::size_t save(const EpisodicCache& cache) const {
        return persist(cache, episode_path(cache.episode_id));
    }

    EpisodicCache load(std::size_t episode_id) const {
        const auto path = episode_path(episode_id);
        if (!std::filesystem::exists(path)) {
            throw IoError("store: unknown episode id " + std::to_string(episode_id));
        }
        return load_cache(path);
    }

    std::size_t stored_bytes(std::size_t episode_id) const {
        std::error_code ec;
        const auto n = std::filesystem::file_size(episode_path(episode_id), ec);
        return ec ? 0 : static_cast<std::size_t>(n);
    }

    void write_manifest(const nlohmann::ordered_json& manifest) const {
        std::ofstream out(m_dir / "manifest.json");
        if (!out) {
            throw IoError("store: cannot write manifest in " + m_dir.string());
        }
        out << manifest.dump(2) << '\n';
    }

    nlohmann::json read_manifest() const {
        std::ifstream in(m_dir / "manifest.json");
        if (!in) {
            throw IoError("store: missing manifest in " + m_dir.string());
        }
        return nlohmann::json::parse(in);
    }

private:
    std::filesystem::path m_dir;
};

}  // namespace epikv
