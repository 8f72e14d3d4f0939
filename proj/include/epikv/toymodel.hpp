// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "epikv/dialogue.hpp"
#include "epikv/kvcache.hpp"
#include "epikv/numerics.hpp"

namespace epikv {

/// Shape and seed of the deterministic grouped-query-attention transformer.
struct ModelConfig {
    std::size_t layers = 4;
    std::size_t query_heads = 4;
    std::size_t kv_heads = 2;
    std::size_t head_dim = 16;
    std::size_t model_dim = 64;
    std::size_t vocab = kDefaultVocab;
    std::uint64_t seed = 1;

    void validate() const {
        if (layers < 1 || query_heads < 1 || kv_heads < 1 || head_dim < 1 || model_dim < 1 ||
            vocab < 2) {
            throw Error("ModelConfig: all counts must be positive");
        }
        if (query_heads % kv_heads != 0) {
            throw Error("ModelConfig: query_heads must be divisible by kv_heads");
        }
        if (model_dim != query_heads * head_dim) {
            throw Error("ModelConfig: model_dim must equal query_heads * head_dim");
        }
    }

    std::size_t mlp_dim() const { return 2 * model_dim; }
    std::size_t group_size() const { return query_heads / kv_heads; }
    std::size_t kv_head_of(std::size_t query_head) const { return query_head / group_size(); }

    bool operator==(const ModelConfig&) const = default;
};

/// Attention mask: full causal, or causal restricted to the first sink_count
/// positions plus the recent_count most recent positions.
struct MaskSpec {
    enum class Kind { Causal, SinkRecent };

    Kind kind = Kind::Causal;
    std::size_t sink_count = 0;
    std::size_t recent_count = 0;

    static MaskSpec causal() { return {}; }

    static MaskSpec sink_recent(std::size_t sink, std::size_t recent) {
        if (recent < 1) {
            throw Error("MaskSpec: recent_count must be >= 1");
        }
        return {Kind::SinkRecent, sink, recent};
    }

    bool allows(std::size_t query_pos, std::size_t key_pos) const {
        if (key_pos > query_pos) return false;
        if (kind == Kind::Causal) return true;
        return key_pos < sink_count || key_pos + recent_count > query_pos;
    }
};

struct LayerWeights {
    Matrix wq;        // model_dim x model_dim
    Matrix wk;        // model_dim x (kv_heads * head_dim)
    Matrix wv;        // model_dim x (kv_heads * head_dim)
    Matrix wo;        // model_dim x model_dim
    Matrix mlp_in;    // model_dim x mlp_dim
    Matrix mlp_out;   // mlp_dim x model_dim
};

/// Immutable after init_model; safe to share across threads.
struct Model {
    ModelConfig config;
    Matrix token_embedding;  // vocab x model_dim
    Matrix unembedding;      // model_dim x vocab
    std::vector<LayerWeights> layers;

    /// Learned-style additive position encoding, generated on demand from the
    /// model seed so positions are unbounded.
    Vec position_embedding(std::size_t position) const {
        Rng rng(splitmix64(config.seed ^ (0xA5C3ULL + 2 * position)));
        Vec v(config.model_dim);
        for (double& x : v) {
            x = 0.25 * rng.gaussian();
        }
        return v;
    }
};

namespace detail {

inline void fill_gaussian(Matrix& m, Rng& rng, double scale) {
    for (double& x : m.values) {
        x = scale * rng.gaussian();
    }
}

}  // namespace detail

inline Model init_model(const ModelConfig& config) {
    config.validate();
    Model model;
    model.config = config;
    Rng rng(config.seed);
    model.token_embedding = Matrix(config.vocab, config.model_dim);
    detail::fill_gaussian(model.token_embedding, rng, 1.0);
    model.unembedding = Matrix(config.model_dim, config.vocab);
    detail::fill_gaussian(model.unembedding, rng, 1.0 / std::sqrt(double(config.model_dim)));
    const double proj_scale = 1.0 / std::sqrt(double(config.model_dim));
    const double mlp_scale = 1.0 / std::sqrt(double(config.mlp_dim()));
    for (std::size_t l = 0; l < config.layers; ++l) {
        LayerWeights w;
        w.wq = Matrix(config.model_dim, config.model_dim);
        w.wk = Matrix(config.model_dim, config.kv_heads * config.head_dim);
        w.wv = Matrix(config.model_dim, config.kv_heads * config.head_dim);
        w.wo = Matrix(config.model_dim, config.model_dim);
        w.mlp_in = Matrix(config.model_dim, config.mlp_dim());
        w.mlp_out = Matrix(config.mlp_dim(), config.model_dim);
        detail::fill_gaussian(w.wq, rng, proj_scale);
        detail::fill_gaussian(w.wk, rng, proj_scale);
        detail::fill_gaussian(w.wv, rng, proj_scale);
        detail::fill_gaussian(w.wo, rng, proj_scale);
        detail::fill_gaussian(w.mlp_in, rng, proj_scale);
        detail::fill_gaussian(w.mlp_out, rng, mlp_scale);
        model.layers.push_back(std::move(w));
    }
    return model;
}

inline std::size_t parameter_count(const Model& model) {
    std::size_t n = model.token_embedding.values.size() + model.unembedding.values.size();
    for (const auto& w : model.layers) {
        n += w.wq.values.size() + w.wk.values.size() + w.wv.values.size() + w.wo.values.size() +
             w.mlp_in.values.size() + w.mlp_out.values.size();
    }
    return n;
}

struct LayerTrace {
    std::vector<Matrix> keys;    // per kv-head: n_new x head_dim
    std::vector<Matrix> values;  // per kv-head: n_new x head_dim
    /// Per kv-head: absolute positions of the attention context columns, the
    /// cache entries of that head followed by the new token positions.
    std::vector<std::vector<std::size_t>> context_positions;
    /// Per query-head: n_new x context_len weight grid (rows sum to 1 over
    /// unmasked columns, masked columns hold exactly 0). Empty when attention
    /// storage is disabled.
    std::vector<Matrix> attention;
};

struct ForwardTrace {
    std::vector<std::size_t> positions;  // absolute positions of the new tokens
    std::vector<LayerTrace> layers;
    Matrix hidden;  // n_new x model_dim, final layer output
};

struct TraceOptions {
    bool store_attention = true;
};

namespace detail {

// C += A (n x k) * B (k x m), all row-major.
inline void matmul_add(const Matrix& a, const Matrix& b, Matrix& c) {
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* arow = a.values.data() + i * a.cols;
        double* crow = c.values.data() + i * c.cols;
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double av = arow[k];
            const double* brow = b.values.data() + k * b.cols;
            for (std::size_t j = 0; j < b.cols; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    Matrix c(a.rows, b.cols);
    matmul_add(a, b, c);
    return c;
}

inline void layer_norm_row(const double* in, double* out, std::size_t dim) {
    double mean = 0.0;
    for (std::size_t i = 0; i < dim; ++i) mean += in[i];
    mean /= double(dim);
    double var = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
        const double d = in[i] - mean;
        var += d * d;
    }
    var /= double(dim);
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    for (std::size_t i = 0; i < dim; ++i) {
        out[i] = (in[i] - mean) * inv;
    }
}

inline Matrix layer_norm(const Matrix& x) {
    Matrix out(x.rows, x.cols);
    for (std::size_t i = 0; i < x.rows; ++i) {
        layer_norm_row(x.values.data() + i * x.cols, out.values.data() + i * x.cols, x.cols);
    }
    return out;
}

}  // namespace detail

/// Runs the model over new tokens at the given absolute positions, attending
/// causally to the (optional) past cache and to preceding new tokens, both
/// filtered by the mask. The past cache is not mutated; its K/V states enter
/// attention as stored. Positions must be strictly increasing and above every
/// cache position.
inline ForwardTrace forward(const Model& model, std::span<const TokenId> tokens,
                            std::span<const std::size_t> positions, const MaskSpec& mask,
                            const EpisodicCache* past = nullptr, TraceOptions opts = {}) {
    const ModelConfig& cfg = model.config;
    const std::size_t n = tokens.size();
    if (n == 0) {
        throw Error("forward: empty token sequence");
    }
    if (positions.size() != n) {
        throw DimensionError("forward: positions size mismatch");
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (tokens[i] >= cfg.vocab) {
            throw Error("forward: token id " + std::to_string(tokens[i]) + " out of vocab");
        }
        if (i > 0 && positions[i] <= positions[i - 1]) {
            throw Error("forward: positions must be strictly increasing");
        }
    }
    if (past != nullptr) {
        if (past->layer_count() != cfg.layers) {
            throw DimensionError("forward: cache layer count mismatch");
        }
        if (!past->empty() && past->max_position() >= positions[0]) {
            throw Error("forward: position overlap between cache and new tokens");
        }
    }

    const std::size_t dh = cfg.head_dim;
    const double attn_scale = 1.0 / std::sqrt(double(dh));
    constexpr double kMasked = -std::numeric_limits<double>::infinity();

    ForwardTrace trace;
    trace.positions.assign(positions.begin(), positions.end());
    trace.layers.resize(cfg.layers);

    Matrix hidden(n, cfg.model_dim);
    for (std::size_t t = 0; t < n; ++t) {
        const double* emb = model.token_embedding.values.data() + tokens[t] * cfg.model_dim;
        const Vec pos = model.position_embedding(positions[t]);
        double* row = hidden.values.data() + t * cfg.model_dim;
        for (std::size_t d = 0; d < cfg.model_dim; ++d) {
            row[d] = emb[d] + pos[d];
        }
    }

    std::vector<double> logits_scratch;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const LayerWeights& w = model.layers[l];
        LayerTrace& lt = trace.layers[l];

        const Matrix normed = detail::layer_norm(hidden);
        const Matrix q = detail::matmul(normed, w.wq);
        const Matrix k_new = detail::matmul(normed, w.wk);
        const Matrix v_new = detail::matmul(normed, w.wv);

        lt.keys.resize(cfg.kv_heads);
        lt.values.resize(cfg.kv_heads);
        lt.context_positions.resize(cfg.kv_heads);

        // Per kv-head contiguous context: cache K/V rows, then the new rows.
        std::vector<std::vector<double>> ctx_keys(cfg.kv_heads), ctx_vals(cfg.kv_heads);
        std::vector<std::size_t> cache_len(cfg.kv_heads, 0);
        for (std::size_t h = 0; h < cfg.kv_heads; ++h) {
            std::size_t n_cache = 0;
            if (past != nullptr) {
                const auto& entries = past->layers[l].heads[h];
                n_cache = entries.size();
                ctx_keys[h].reserve((n_cache + n) * dh);
                ctx_vals[h].reserve((n_cache + n) * dh);
                for (const KVEntry& e : entries) {
                    ctx_keys[h].insert(ctx_keys[h].end(), e.key.begin(), e.key.end());
                    ctx_vals[h].insert(ctx_vals[h].end(), e.value.begin(), e.value.end());
                    lt.context_positions[h].push_back(e.position);
                }
            }
            cache_len[h] = n_cache;
            lt.keys[h] = Matrix(n, dh);
            lt.values[h] = Matrix(n, dh);
            for (std::size_t t = 0; t < n; ++t) {
                const double* krow = k_new.values.data() + t * k_new.cols + h * dh;
                const double* vrow = v_new.values.data() + t * v_new.cols + h * dh;
                std::copy(krow, krow + dh, lt.keys[h].values.data() + t * dh);
                std::copy(vrow, vrow + dh, lt.values[h].values.data() + t * dh);
                ctx_keys[h].insert(ctx_keys[h].end(), krow, krow + dh);
                ctx_vals[h].insert(ctx_vals[h].end(), vrow, vrow + dh);
                lt.context_positions[h].push_back(positions[t]);
            }
        }

        if (opts.store_attention) {
            lt.attention.resize(cfg.query_heads);
            for (std::size_t qh = 0; qh < cfg.query_heads; ++qh) {
                const std::size_t h = cfg.kv_head_of(qh);
                lt.attention[qh] = Matrix(n, cache_len[h] + n);
            }
        }

        Matrix attn_out(n, cfg.model_dim);
        for (std::size_t qh = 0; qh < cfg.query_heads; ++qh) {
            const std::size_t h = cfg.kv_head_of(qh);
            const std::size_t ctx_total = cache_len[h] + n;
            const double* keys = ctx_keys[h].data();
            const double* vals = ctx_vals[h].data();
            const auto& ctx_pos = lt.context_positions[h];
            logits_scratch.resize(ctx_total);
            const bool causal_only = mask.kind == MaskSpec::Kind::Causal;
            for (std::size_t t = 0; t < n; ++t) {
                const std::size_t qpos = positions[t];
                const double* qvec = q.values.data() + t * q.cols + qh * dh;
                // Columns beyond cache_len[h] + t are future new tokens.
                const std::size_t visible = cache_len[h] + t + 1;
                double max_logit = kMasked;
                if (causal_only) {
                    // Every visible column is allowed; skip the mask test.
                    for (std::size_t j = 0; j < visible; ++j) {
                        const double* kv = keys + j * dh;
                        double acc = 0.0;
                        for (std::size_t d = 0; d < dh; ++d) {
                            acc += qvec[d] * kv[d];
                        }
                        const double s = acc * attn_scale;
                        if (s > max_logit) max_logit = s;
                        logits_scratch[j] = s;
                    }
                } else {
                    for (std::size_t j = 0; j < visible; ++j) {
                        double s = kMasked;
                        if (mask.allows(qpos, ctx_pos[j])) {
                            const double* kv = keys + j * dh;
                            double acc = 0.0;
                            for (std::size_t d = 0; d < dh; ++d) {
                                acc += qvec[d] * kv[d];
                            }
                            s = acc * attn_scale;
                            if (s > max_logit) max_logit = s;
                        }
                        logits_scratch[j] = s;
                    }
                }
                double denom = 0.0;
                for (std::size_t j = 0; j < visible; ++j) {
                    const double e =
                        logits_scratch[j] == kMasked ? 0.0 : std::exp(logits_scratch[j] - max_logit);
                    logits_scratch[j] = e;
                    denom += e;
                }
                double* out = attn_out.values.data() + t * cfg.model_dim + qh * dh;
                for (std::size_t j = 0; j < visible; ++j) {
                    const double wgt = logits_scratch[j] / denom;
                    logits_scratch[j] = wgt;
                    if (wgt != 0.0) {
                        const double* vv = vals + j * dh;
                        for (std::size_t d = 0; d < dh; ++d) {
                            out[d] += wgt * vv[d];
                        }
                    }
                }
                if (opts.store_attention) {
                    double* grid = lt.attention[qh].values.data() + t * ctx_total;
                    std::copy(logits_scratch.begin(), logits_scratch.begin() + visible, grid);
                }
            }
        }

        Matrix attn_proj = detail::matmul(attn_out, w.wo);
        for (std::size_t i = 0; i < hidden.values.size(); ++i) {
            hidden.values[i] += attn_proj.values[i];
        }

        const Matrix normed2 = detail::layer_norm(hidden);
        Matrix act = detail::matmul(normed2, w.mlp_in);
        for (double& x : act.values) {
            if (x < 0.0) x = 0.0;
        }
        Matrix mlp_proj = detail::matmul(act, w.mlp_out);
        for (std::size_t i = 0; i < hidden.values.size(); ++i) {
            hidden.values[i] += mlp_proj.values[i];
        }
    }

    trace.hidden = std::move(hidden);
    return trace;
}

inline ForwardTrace forward(const Model& model, std::span<const TokenId> tokens,
                            const MaskSpec& mask, const EpisodicCache* past = nullptr,
                            TraceOptions opts = {}) {
    std::vector<std::size_t> positions(tokens.size());
    std::size_t base = 0;
    if (past != nullptr && !past->empty()) {
        base = past->max_position() + 1;
    }
    for (std::size_t i = 0; i < positions.size(); ++i) {
        positions[i] = base + i;
    }
    return forward(model, tokens, positions, mask, past, opts);
}

/// Appends the trace's K/V states to the cache (every layer, every kv-head).
inline void append_to_cache(EpisodicCache& cache, const ForwardTrace& trace) {
    for (std::size_t l = 0; l < trace.layers.size(); ++l) {
        const LayerTrace& lt = trace.layers[l];
        for (std::size_t h = 0; h < lt.keys.size(); ++h) {
            for (std::size_t t = 0; t < lt.keys[h].rows; ++t) {
                KVEntry e;
                e.position = trace.positions[t];
                auto krow = lt.keys[h].row(t);
                auto vrow = lt.values[h].row(t);
                e.key.assign(krow.begin(), krow.end());
                e.value.assign(vrow.begin(), vrow.end());
                cache.layers[l].heads[h].push_back(std::move(e));
            }
        }
    }
}

inline EpisodicCache make_empty_cache(const ModelConfig& cfg, std::size_t per_head_budget,
                                      std::size_t episode_id = 0) {
    EpisodicCache cache;
    cache.episode_id = episode_id;
    cache.layers.assign(cfg.layers, LayerCache(cfg.kv_heads, per_head_budget));
    return cache;
}

/// Next-token logits for one hidden-state row (final layer norm + unembed).
inline Vec logits_for(const Model& model, std::span<const double> hidden_row) {
    Vec normed(hidden_row.size());
    detail::layer_norm_row(hidden_row.data(), normed.data(), hidden_row.size());
    Vec logits(model.config.vocab, 0.0);
    for (std::size_t d = 0; d < normed.size(); ++d) {
        const double hv = normed[d];
        const double* urow = model.unembedding.values.data() + d * model.unembedding.cols;
        for (std::size_t v = 0; v < logits.size(); ++v) {
            logits[v] += hv * urow[v];
        }
    }
    return logits;
}

inline TokenId argmax_token(std::span<const double> logits) {
    std::size_t best = 0;
    for (std::size_t v = 1; v < logits.size(); ++v) {
        if (logits[v] > logits[best]) best = v;  // ties keep the lowest id
    }
    return static_cast<TokenId>(best);
}

/// Deterministic greedy decoding against a working copy of the cache. The
/// prompt is placed directly after the last cache position; the original
/// cache is never mutated. Ties in the argmax resolve to the lowest token id.
inline std::vector<TokenId> greedy_decode(const Model& model, const EpisodicCache& cache,
                                          std::span<const TokenId> prompt_tokens,
                                          std::size_t max_new) {
    if (max_new == 0) {
        return {};
    }
    if (prompt_tokens.empty()) {
        throw Error("greedy_decode: empty prompt");
    }
    EpisodicCache working = cache;
    std::size_t next_pos = working.empty() ? 0 : working.max_position() + 1;

    std::vector<std::size_t> positions(prompt_tokens.size());
    for (std::size_t i = 0; i < positions.size(); ++i) {
        positions[i] = next_pos + i;
    }
    next_pos += prompt_tokens.size();

    TraceOptions opts;
    opts.store_attention = false;
    ForwardTrace trace =
        forward(model, prompt_tokens, positions, MaskSpec::causal(), &working, opts);
    append_to_cache(working, trace);

    std::vector<TokenId> out;
    out.reserve(max_new);
    while (true) {
        const Vec logits = logits_for(model, trace.hidden.row(trace.hidden.rows - 1));
        const TokenId tok = argmax_token(logits);
        out.push_back(tok);
        if (out.size() == max_new) break;
        const TokenId step_tokens[1] = {tok};
        const std::size_t step_positions[1] = {next_pos};
        ++next_pos;
        trace = forward(model, step_tokens, step_positions, MaskSpec::causal(), &working, opts);
        append_to_cache(working, trace);
    }
    return out;
}

namespace detail {

inline constexpr char kModelMagic[4] = {'E', 'P', 'K', 'M'};
inline constexpr std::uint16_t kModelVersion = 1;

inline void write_matrix(std::ostream& out, const Matrix& m) {
    for (double x : m.values) write_f64(out, x);
}

inline void read_matrix(std::istream& in, Matrix& m) {
    for (double& x : m.values) x = read_f64(in);
}

}  // namespace detail

/// Binary model checkpoint: config header plus the weight matrices as
/// row-major little-endian 64-bit floats, in init order.
inline void save_model(const Model& model, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("save_model: cannot open " + path.string());
    }
    out.write(detail::kModelMagic, 4);
    detail::write_u16(out, detail::kModelVersion);
    const ModelConfig& c = model.config;
    for (std::uint64_t v : {std::uint64_t(c.layers), std::uint64_t(c.query_heads),
                            std::uint64_t(c.kv_heads), std::uint64_t(c.head_dim),
                            std::uint64_t(c.model_dim), std::uint64_t(c.vocab), c.seed}) {
        detail::write_u64(out, v);
    }
    detail::write_matrix(out, model.token_embedding);
    detail::write_matrix(out, model.unembedding);
    for (const auto& w : model.layers) {
        detail::write_matrix(out, w.wq);
        detail::write_matrix(out, w.wk);
        detail::write_matrix(out, w.wv);
        detail::write_matrix(out, w.wo);
        detail::write_matrix(out, w.mlp_in);
        detail::write_matrix(out, w.mlp_out);
    }
    if (!out) {
        throw IoError("save_model: write failed for " + path.string());
    }
}

inline Model load_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("load_model: cannot open " + path.string());
    }
    char magic[4];
    in.read(magic, 4);
    if (!in || !std::equal(magic, magic + 4, detail::kModelMagic)) {
        throw IoError("load_model: bad magic in " + path.string());
    }
    if (detail::read_u16(in) != detail::kModelVersion) {
        throw IoError("load_model: version mismatch in " + path.string());
    }
    ModelConfig c;
    c.layers = detail::read_u64(in);
    c.query_heads = detail::read_u64(in);
    c.kv_heads = detail::read_u64(in);
    c.head_dim = detail::read_u64(in);
    c.model_dim = detail::read_u64(in);
    c.vocab = detail::read_u64(in);
    c.seed = detail::read_u64(in);
    c.validate();
    Model model;
    model.config = c;
    model.token_embedding = Matrix(c.vocab, c.model_dim);
    model.unembedding = Matrix(c.model_dim, c.vocab);
    detail::read_matrix(in, model.token_embedding);
    detail::read_matrix(in, model.unembedding);
    for (std::size_t l = 0; l < c.layers; ++l) {
        LayerWeights w;
        w.wq = Matrix(c.model_dim, c.model_dim);
        w.wk = Matrix(c.model_dim, c.kv_heads * c.head_dim);
        w.wv = Matrix(c.model_dim, c.kv_heads * c.head_dim);
        w.wo = Matrix(c.model_dim, c.model_dim);
        w.mlp_in = Matrix(c.model_dim, c.mlp_dim());
        w.mlp_out = Matrix(c.mlp_dim(), c.model_dim);
        detail::read_matrix(in, w.wq);
        detail::read_matrix(in, w.wk);
        detail::read_matrix(in, w.wv);
        detail::read_matrix(in, w.wo);
        detail::read_matrix(in, w.mlp_in);
        detail::read_matrix(in, w.mlp_out);
        model.layers.push_back(std::move(w));
    }
    if (!in) {
        throw IoError("load_model: truncated file " + path.string());
    }
    return model;
}

}  // namespace epikv
