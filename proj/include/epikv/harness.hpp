// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "epikv/blockprefill.hpp"
#include "epikv/clustering.hpp"
#include "epikv/dialogue.hpp"
#include "epikv/episodic.hpp"

namespace epikv {

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error(what) {}
};

/// Full experiment surface. Every random choice flows from an explicit seed.
struct ExperimentConfig {
    ModelConfig model;
    std::size_t budget_per_head = 32;  // m
    std::size_t block_size = 16;       // m_block
    std::size_t episodes = 4;
    double alpha = 1.1;
    std::size_t w_embed = 4;
    std::size_t prompt_window = kDefaultPromptWindow;
    ScorerKind scorer = ScorerKind::patched;
    Aggregation aggregation = Aggregation::Max;
    std::string embedder = "builtin";  // "builtin" or an embedding endpoint URL
    std::uint64_t cluster_seed = 1;
    std::uint64_t calibration_seed = 7;
    std::size_t calibration_tokens = 0;
    std::size_t calibration_budget = 0;
    std::size_t calibration_sink = 0;
    bool use_allocation = true;
    bool oracle_overlap = true;
    std::size_t streaming_sink = 128;
    std::size_t max_new = 8;
    std::string corpus_path;
    std::string output_dir = "out";

    void validate() const {
        model.validate();
        if (budget_per_head < 1) throw ConfigError("config: m must be >= 1");
        if (block_size < 1) throw ConfigError("config: m_block must be >= 1");
        if (episodes < 1) throw ConfigError("config: episodes must be >= 1");
        if (alpha < 0.0) throw ConfigError("config: alpha must be >= 0");
        if (w_embed < 1) throw ConfigError("config: w_embed must be >= 1");
        if (corpus_path.empty()) throw ConfigError("config: corpus path is required");
        if (!std::filesystem::exists(corpus_path)) {
            throw ConfigError("config: corpus file not found: " + corpus_path);
        }
    }
};

namespace detail {

inline void apply_config_key(ExperimentConfig& config, const std::string& key,
                             const nlohmann::json& value) {
    auto as_size = [&]() -> std::size_t { return value.get<std::size_t>(); };
    auto as_u64 = [&]() -> std::uint64_t { return value.get<std::uint64_t>(); };
    if (key == "layers") config.model.layers = as_size();
    else if (key == "query_heads") config.model.query_heads = as_size();
    else if (key == "kv_heads") config.model.kv_heads = as_size();
    else if (key == "head_dim") config.model.head_dim = as_size();
    else if (key == "vocab") config.model.vocab = as_size();
    else if (key == "model_seed") config.model.seed = as_u64();
    else if (key == "m") config.budget_per_head = as_size();
    else if (key == "m_block") config.block_size = as_size();
    else if (key == "episodes") config.episodes = as_size();
    else if (key == "alpha") config.alpha = value.get<double>();
    else if (key == "w_embed") config.w_embed = as_size();
    else if (key == "prompt_window") config.prompt_window = as_size();
    else if (key == "scorer") {
        auto kind = scorer_from_name(value.get<std::string>());
        if (!kind) throw ConfigError("config: unknown scorer '" + value.get<std::string>() + "'");
        config.scorer = *kind;
    } else if (key == "aggregation") {
        const std::string a = value.get<std::string>();
        if (a == "avg") config.aggregation = Aggregation::Avg;
        else if (a == "max") config.aggregation = Aggregation::Max;
        else throw ConfigError("config: aggregation must be avg or max");
    }
    else if (key == "embedder") config.embedder = value.get<std::string>();
    else if (key == "cluster_seed") config.cluster_seed = as_u64();
    else if (key == "calibration_seed") config.calibration_seed = as_u64();
    else if (key == "calibration_tokens") config.calibration_tokens = as_size();
    else if (key == "calibration_budget") config.calibration_budget = as_size();
    else if (key == "calibration_sink") config.calibration_sink = as_size();
    else if (key == "use_allocation") config.use_allocation = value.get<bool>();
    else if (key == "oracle_overlap") config.oracle_overlap = value.get<bool>();
    else if (key == "streaming_sink") config.streaming_sink = as_size();
    else if (key == "max_new") config.max_new = as_size();
    else if (key == "corpus") config.corpus_path = value.get<std::string>();
    else if (key == "out") config.output_dir = value.get<std::string>();
    else throw ConfigError("config: unknown key '" + key + "'");
}

inline nlohmann::json parse_scalar(const std::string& raw) {
    if (raw == "true") return true;
    if (raw == "false") return false;
    try {
        std::size_t pos = 0;
        if (raw.find('.') == std::string::npos && raw.find('e') == std::string::npos) {
            const long long v = std::stoll(raw, &pos);
            if (pos == raw.size()) return v;
        } else {
            const double v = std::stod(raw, &pos);
            if (pos == raw.size()) return v;
        }
    } catch (...) {
    }
    return raw;
}

inline std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

}  // namespace detail

/// Loads a config file: JSON when the first non-space character is '{',
/// otherwise "key = value" lines ('#' starts a comment).
inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("config: cannot open " + path.string());
    }
    std::stringstream buffer;
    buffer << in.rdbuf();
    const std::string content = buffer.str();

    ExperimentConfig config;
    const auto first = content.find_first_not_of(" \t\r\n");
    if (first != std::string::npos && content[first] == '{') {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(content);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config: bad JSON: " + std::string(e.what()));
        }
        for (auto it = j.begin(); it != j.end(); ++it) {
            detail::apply_config_key(config, it.key(), it.value());
        }
    } else {
        std::istringstream lines(content);
        std::string line;
        while (std::getline(lines, line)) {
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.resize(hash);
            line = detail::trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) {
                throw ConfigError("config: expected key=value, got '" + line + "'");
            }
            const std::string key = detail::trim(line.substr(0, eq));
            const std::string value = detail::trim(line.substr(eq + 1));
            detail::apply_config_key(config, key, detail::parse_scalar(value));
        }
    }
    config.model.model_dim = config.model.query_heads * config.model.head_dim;
    if (const char* url = std::getenv("EPIKV_EMBED_URL")) {
        config.embedder = url;
    }
    return config;
}

/// Deterministic topic-blocked synthetic conversation. Each topic draws from
/// a disjoint word pool; queries are labeled with their topic. A session
/// break separates consecutive topic blocks.
inline std::string synth_corpus(std::size_t topics, std::size_t turns_per_topic,
                                std::size_t queries_per_topic, std::uint64_t seed) {
    if (topics < 1 || turns_per_topic < 1 || queries_per_topic < 1) {
        throw Error("synth_corpus: counts must be >= 1");
    }
    static constexpr const char* kPrefix[] = {"ba", "ce", "di", "fo", "gu", "ha", "ji", "ko",
                                              "lu", "me", "ni", "po", "qua", "ru", "se", "ta"};
    static constexpr const char* kSuffix[] = {"ral", "mek", "tos", "vin", "dar", "pel",
                                              "zur", "nash", "gol", "bri", "fex", "wom",
                                              "hyt", "jul", "kip", "sod", "lav", "rem",
                                              "nox", "pim", "tul", "vesk", "yar", "zem"};
    constexpr std::size_t kPrefixCount = sizeof(kPrefix) / sizeof(kPrefix[0]);
    constexpr std::size_t kSuffixCount = sizeof(kSuffix) / sizeof(kSuffix[0]);

    Rng rng(seed);
    auto pool_word = [&](std::size_t topic, std::size_t i) {
        std::string w = kPrefix[topic % kPrefixCount];
        if (topic >= kPrefixCount) {
            w += kPrefix[(topic / kPrefixCount) % kPrefixCount];
        }
        return w + kSuffix[i % kSuffixCount];
    };
    auto sample_words = [&](std::size_t topic, std::size_t count) {
        std::string text;
        for (std::size_t i = 0; i < count; ++i) {
            if (i > 0) text += ' ';
            text += pool_word(topic, rng.uniform_index(kSuffixCount));
        }
        return text;
    };

    std::ostringstream out;
    for (std::size_t t = 0; t < topics; ++t) {
        if (t > 0) {
            out << R"({"kind":"session_break"})" << '\n';
        }
        for (std::size_t j = 0; j < turns_per_topic; ++j) {
            nlohmann::ordered_json rec;
            rec["kind"] = "turn";
            rec["role"] = j % 2 == 0 ? "speaker_1" : "speaker_2";
            rec["text"] = sample_words(t, 6 + rng.uniform_index(5));
            out << rec.dump() << '\n';
        }
    }
    for (std::size_t t = 0; t < topics; ++t) {
        for (std::size_t q = 0; q < queries_per_topic; ++q) {
            nlohmann::ordered_json rec;
            rec["kind"] = "query";
            rec["text"] = sample_words(t, 4 + rng.uniform_index(3)) + "?";
            rec["gold"] = pool_word(t, rng.uniform_index(kSuffixCount));
            rec["topic"] = "topic_" + std::to_string(t);
            out << rec.dump() << '\n';
        }
    }
    return out.str();
}

inline void write_synth_corpus(const std::filesystem::path& path, std::size_t topics,
                               std::size_t turns_per_topic, std::size_t queries_per_topic,
                               std::uint64_t seed) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("synth_corpus: cannot open " + path.string());
    }
    out << synth_corpus(topics, turns_per_topic, queries_per_topic, seed);
}

using RetainedSets = std::vector<std::vector<std::vector<std::size_t>>>;

struct OverlapReport {
    std::vector<double> per_layer;
    double mean = 0.0;
};

/// Jaccard overlap of retained position sets, per (layer, head), reduced to
/// per-layer and global means. Two empty sets count as identical.
inline OverlapReport overlap_vs_oracle(const RetainedSets& a, const RetainedSets& b) {
    if (a.size() != b.size()) {
        throw DimensionError("overlap_vs_oracle: layer count mismatch");
    }
    OverlapReport report;
    report.per_layer.reserve(a.size());
    for (std::size_t l = 0; l < a.size(); ++l) {
        if (a[l].size() != b[l].size()) {
            throw DimensionError("overlap_vs_oracle: head count mismatch");
        }
        double layer_acc = 0.0;
        for (std::size_t h = 0; h < a[l].size(); ++h) {
            std::vector<std::size_t> inter, uni;
            std::set_intersection(a[l][h].begin(), a[l][h].end(), b[l][h].begin(), b[l][h].end(),
                                  std::back_inserter(inter));
            std::set_union(a[l][h].begin(), a[l][h].end(), b[l][h].begin(), b[l][h].end(),
                           std::back_inserter(uni));
            layer_acc += uni.empty() ? 1.0 : double(inter.size()) / double(uni.size());
        }
        report.per_layer.push_back(a[l].empty() ? 1.0 : layer_acc / double(a[l].size()));
    }
    double total = 0.0;
    for (double x : report.per_layer) total += x;
    report.mean = report.per_layer.empty() ? 1.0 : total / double(report.per_layer.size());
    return report;
}

/// POST {"texts":[...]} to <endpoint>/embed and return the L2-normalized
/// vectors. Three attempts with backoff, then a hard error. Responses are
/// cached per (endpoint, text hash); repeated texts make no network calls.
inline std::vector<Vec> external_embed(const std::vector<std::string>& texts,
                                       const std::string& endpoint) {
    static std::mutex cache_mutex;
    static std::unordered_map<std::string, Vec> cache;

    std::vector<Vec> out(texts.size());
    std::vector<std::size_t> missing;
    {
        std::lock_guard<std::mutex> lock(cache_mutex);
        for (std::size_t i = 0; i < texts.size(); ++i) {
            const std::string key = endpoint + "\n" + std::to_string(fnv1a64(texts[i]));
            auto it = cache.find(key);
            if (it != cache.end()) {
                out[i] = it->second;
            } else {
                missing.push_back(i);
            }
        }
    }
    if (missing.empty()) {
        return out;
    }

    nlohmann::json request;
    request["texts"] = nlohmann::json::array();
    for (std::size_t i : missing) {
        request["texts"].push_back(texts[i]);
    }
    const std::string body = request.dump();

    httplib::Result result;
    for (int attempt = 0; attempt < 3; ++attempt) {
        if (attempt > 0) {
            std::this_thread::sleep_for(std::chrono::milliseconds(100 << (attempt - 1)));
        }
        httplib::Client client(endpoint);
        client.set_connection_timeout(5);
        client.set_read_timeout(10);
        result = client.Post("/embed", body, "application/json");
        if (result && result->status == 200) break;
    }
    if (!result || result->status != 200) {
        throw IoError("external_embed: POST " + endpoint + "/embed failed after 3 attempts");
    }

    nlohmann::json response;
    try {
        response = nlohmann::json::parse(result->body);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("external_embed: bad response JSON: " + std::string(e.what()));
    }
    const std::size_t dim = response.at("dim").get<std::size_t>();
    const auto& vectors = response.at("vectors");
    if (vectors.size() != missing.size()) {
        throw IoError("external_embed: response vector count mismatch");
    }
    std::lock_guard<std::mutex> lock(cache_mutex);
    for (std::size_t j = 0; j < missing.size(); ++j) {
        Vec v = vectors[j].get<Vec>();
        if (v.size() != dim) {
            throw IoError("external_embed: vector dim " + std::to_string(v.size()) +
                          " != declared dim " + std::to_string(dim));
        }
        const double norm = l2_norm(v);
        if (norm == 0.0) {
            v.assign(dim, 0.0);
            v[0] = 1.0;
        } else {
            for (double& x : v) x /= norm;
        }
        const std::string key =
            endpoint + "\n" + std::to_string(fnv1a64(texts[missing[j]]));
        cache[key] = v;
        out[missing[j]] = std::move(v);
    }
    return out;
}

/// Embedder backed by the external embedding endpoint.
class ExternalEmbedder final : public Embedder {
public:
    explicit ExternalEmbedder(std::string endpoint) : m_endpoint(std::move(endpoint)) {
        const auto probe = external_embed({"dim probe"}, m_endpoint);
        m_dim = probe[0].size();
    }

    std::size_t dim() const override { return m_dim; }

    Vec embed(std::string_view text) const override {
        return external_embed({std::string(text)}, m_endpoint)[0];
    }

private:
    std::string m_endpoint;
    std::size_t m_dim = 0;
};

struct MetricsReport {
    std::vector<std::size_t> peak_entries_per_layer;
    std::vector<std::size_t> bound_per_layer;
    std::vector<std::vector<std::size_t>> final_entries;  // per cache, per layer
    std::vector<std::size_t> eviction_counts;             // per cache
    std::optional<OverlapReport> overlap;                 // mean over queries
    std::vector<std::size_t> switch_series;               // cumulative per turn
    std::size_t switch_count = 0;
    double wall_build_s = 0.0;
    double wall_queries_s = 0.0;
    double wall_metrics_s = 0.0;
    nlohmann::ordered_json report_json;
};

namespace detail {

inline std::unique_ptr<Embedder> make_embedder(const std::string& selector) {
    if (selector == "builtin") {
        return std::make_unique<HashEmbedder>();
    }
    return std::make_unique<ExternalEmbedder>(selector);
}

inline void append_occupancy_csv(std::ostream& out, const OccupancyLog& log,
                                 std::size_t& step_base) {
    std::size_t last_step = 0;
    for (const auto& s : log.samples) {
        for (std::size_t l = 0; l < s.entries_per_layer.size(); ++l) {
            out << (step_base + s.step) << ',' << l << ',' << s.entries_per_layer[l] << ','
                << s.prompt_resident_per_layer[l] << '\n';
        }
        last_step = s.step;
    }
    step_base += last_step + 1;
}

}  // namespace detail

/// Executes the configured experiment: build the cache(s), answer every
/// query, compute metrics, and write report.json, occupancy.csv, routes.csv,
/// retained.json and timing.json into the output directory. The occupancy
/// bound is asserted, not just logged.
inline MetricsReport run(const ExperimentConfig& config) {
    config.validate();
    const auto t0 = std::chrono::steady_clock::now();

    std::ifstream corpus(config.corpus_path);
    auto [history, queries] = parse_conversation(corpus);
    const Model model = init_model(config.model);
    const RenderedHistory rendered = render_history_tokens(history, config.model.vocab);
    const auto embedder = detail::make_embedder(config.embedder);

    std::filesystem::create_directories(config.output_dir);
    const std::filesystem::path out_dir(config.output_dir);

    MetricsReport metrics;
    std::vector<PrefillReport> reports;
    std::optional<EpisodicCacheSet> set;

    if (config.scorer == ScorerKind::patched) {
        EpisodicBuildConfig build_config;
        build_config.block_size = config.block_size;
        build_config.w_embed = config.w_embed;
        build_config.prompt_window = config.prompt_window;
        build_config.aggregation = config.aggregation;
        build_config.cluster_seed = config.cluster_seed;
        build_config.use_allocation = config.use_allocation;
        build_config.calibration_tokens = config.calibration_tokens;
        build_config.calibration_budget = config.calibration_budget;
        build_config.calibration_sink = config.calibration_sink;
        build_config.calibration_seed = config.calibration_seed;
        BuildResult built = build(model, history, config.episodes, config.budget_per_head,
                                  config.alpha, *embedder, (out_dir / "cache_store").string(),
                                  build_config);
        save_profile(built.set.profile, out_dir / "sensitivity.json");
        reports = std::move(built.reports);
        set = std::move(built.set);
    } else {
        BlockPrefillConfig prefill;
        prefill.budget_per_head = config.budget_per_head;
        prefill.block_size = config.block_size;
        prefill.scorer = config.scorer;
        prefill.aggregation = config.aggregation;
        prefill.streaming_sink = config.streaming_sink;
        reports.push_back(block_prefill(model, rendered.tokens, prefill));
    }
    const auto t1 = std::chrono::steady_clock::now();

    // Bound check over every occupancy sample (entries series only).
    const std::size_t layers = config.model.layers;
    metrics.bound_per_layer.resize(layers);
    const auto& budgets = reports[0].layer_budgets;
    for (std::size_t l = 0; l < layers; ++l) {
        metrics.bound_per_layer[l] = config.model.kv_heads * (budgets[l] + config.block_size);
    }
    metrics.peak_entries_per_layer.assign(layers, 0);
    for (const auto& report : reports) {
        const auto peak = report.occupancy.peak_entries_per_layer(layers);
        for (std::size_t l = 0; l < layers; ++l) {
            if (peak[l] > metrics.bound_per_layer[l]) {
                throw Error("run: occupancy bound violated at layer " + std::to_string(l) + " (" +
                            std::to_string(peak[l]) + " > " +
                            std::to_string(metrics.bound_per_layer[l]) + ")");
            }
            metrics.peak_entries_per_layer[l] =
                std::max(metrics.peak_entries_per_layer[l], peak[l]);
        }
    }
    for (const auto& report : reports) {
        metrics.final_entries.push_back(count_entries(report.cache).per_layer);
        metrics.eviction_counts.push_back(report.total_evictions());
    }

    // Query loop.
    SessionState state;
    std::vector<std::vector<TokenId>> answers;
    std::vector<RouteRecord> routes;
    nlohmann::ordered_json retained_artifact;
    retained_artifact["caches"] = nlohmann::ordered_json::array();
    for (const auto& report : reports) {
        retained_artifact["caches"].push_back(retained_positions(report.cache));
    }
    retained_artifact["oracle_per_query"] = nlohmann::ordered_json::array();

    std::vector<OverlapReport> per_query_overlap;
    for (const Query& query : queries.queries) {
        std::size_t routed = 0;
        std::vector<TokenId> answer_tokens;
        if (set) {
            AnswerResult a =
                answer(model, *set, *embedder, state, query.text, config.max_new);
            routed = a.route.episode;
            routes.push_back(a.route);
            answer_tokens = std::move(a.tokens);
        } else {
            RouteRecord record;
            record.turn = routes.size();
            record.episode = 0;
            record.switched = routes.empty();  // single cache, loaded once
            routes.push_back(record);
            if (record.switched) {
                state.switch_count += 1;
            }
            const std::vector<TokenId> query_tokens = tokenize(query.text, config.model.vocab);
            if (!query_tokens.empty() && config.max_new > 0) {
                answer_tokens = greedy_decode(model, reports[0].cache, query_tokens,
                                              config.max_new);
            }
        }
        answers.push_back(std::move(answer_tokens));
        metrics.switch_series.push_back(state.switch_count);

        if (config.oracle_overlap) {
            BlockPrefillConfig oracle_config;
            oracle_config.budget_per_head = config.budget_per_head;
            oracle_config.block_size = config.block_size;
            oracle_config.aggregation = config.aggregation;
            if (set) {
                oracle_config.allocation = set->allocation;
            }
            const std::vector<TokenId> query_tokens = tokenize(query.text, config.model.vocab);
            const PrefillReport oracle =
                exact_question_prefill(model, rendered.tokens, oracle_config, query_tokens);
            retained_artifact["oracle_per_query"].push_back(retained_positions(oracle.cache));
            per_query_overlap.push_back(overlap_vs_oracle(
                retained_positions(reports[routed].cache), retained_positions(oracle.cache)));
        }
    }
    metrics.switch_count = state.switch_count;
    const auto t2 = std::chrono::steady_clock::now();

    if (!per_query_overlap.empty()) {
        OverlapReport agg;
        agg.per_layer.assign(layers, 0.0);
        for (const auto& o : per_query_overlap) {
            for (std::size_t l = 0; l < layers; ++l) {
                agg.per_layer[l] += o.per_layer[l];
            }
            agg.mean += o.mean;
        }
        for (double& x : agg.per_layer) x /= double(per_query_overlap.size());
        agg.mean /= double(per_query_overlap.size());
        metrics.overlap = std::move(agg);
    }

    // Artifacts.
    {
        std::ofstream occ(out_dir / "occupancy.csv");
        occ << "step,layer,entries,prompt_resident_entries\n";
        std::size_t step_base = 0;
        for (const auto& report : reports) {
            detail::append_occupancy_csv(occ, report.occupancy, step_base);
        }
    }
    {
        std::ofstream rcsv(out_dir / "routes.csv");
        rcsv << "turn,episode,switched\n";
        for (const auto& r : routes) {
            rcsv << r.turn << ',' << r.episode << ',' << (r.switched ? 1 : 0) << '\n';
        }
    }
    {
        std::ofstream rj(out_dir / "retained.json");
        rj << retained_artifact.dump() << '\n';
    }

    nlohmann::ordered_json report_json;
    report_json["config"] = {
        {"layers", config.model.layers},
        {"query_heads", config.model.query_heads},
        {"kv_heads", config.model.kv_heads},
        {"head_dim", config.model.head_dim},
        {"vocab", config.model.vocab},
        {"model_seed", config.model.seed},
        {"m", config.budget_per_head},
        {"m_block", config.block_size},
        {"episodes", config.episodes},
        {"alpha", config.alpha},
        {"w_embed", config.w_embed},
        {"prompt_window", config.prompt_window},
        {"scorer", scorer_name(config.scorer)},
        {"aggregation", config.aggregation == Aggregation::Max ? "max" : "avg"},
        {"embedder", config.embedder},
        {"cluster_seed", config.cluster_seed},
        {"calibration_seed", config.calibration_seed},
        {"use_allocation", config.use_allocation},
        {"max_new", config.max_new},
    };
    report_json["num_queries"] = queries.queries.size();
    report_json["bound_per_layer"] = metrics.bound_per_layer;
    report_json["peak_entries_per_layer"] = metrics.peak_entries_per_layer;
    report_json["bound_violations"] = 0;
    report_json["final_entries"] = metrics.final_entries;
    report_json["eviction_counts"] = metrics.eviction_counts;
    report_json["layer_budgets"] = budgets;
    if (metrics.overlap) {
        report_json["overlap"] = {{"per_layer", metrics.overlap->per_layer},
                                  {"mean", metrics.overlap->mean}};
    } else {
        report_json["overlap"] = nullptr;
    }
    report_json["switches"] = {{"count", metrics.switch_count},
                               {"series", metrics.switch_series}};
    report_json["answers"] = answers;
    {
        std::ofstream rep(out_dir / "report.json");
        rep << report_json.dump(2) << '\n';
    }
    metrics.report_json = std::move(report_json);

    const auto t3 = std::chrono::steady_clock::now();
    metrics.wall_build_s = std::chrono::duration<double>(t1 - t0).count();
    metrics.wall_queries_s = std::chrono::duration<double>(t2 - t1).count();
    metrics.wall_metrics_s = std::chrono::duration<double>(t3 - t2).count();
    {
        nlohmann::ordered_json timing;
        timing["build_s"] = metrics.wall_build_s;
        timing["queries_s"] = metrics.wall_queries_s;
        timing["metrics_s"] = metrics.wall_metrics_s;
        std::ofstream tj(out_dir / "timing.json");
        tj << timing.dump(2) << '\n';
    }
    return metrics;
}

}  // namespace epikv
