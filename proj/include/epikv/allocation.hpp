// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "epikv/numerics.hpp"
#include "epikv/toymodel.hpp"

namespace epikv {

/// Per-layer similarity between Key states under the full causal mask and
/// under the sink+recent budget mask, with sensitivity s = 1 - sigma.
struct SensitivityProfile {
    std::vector<double> sigma;        // in [-1, 1]
    std::vector<double> sensitivity;  // 1 - sigma
    std::size_t mask_sink = 0;
    std::size_t mask_recent = 0;
    std::string input_id;
    std::uint64_t model_seed = 0;
    std::size_t skipped_zero_norm = 0;  // key vectors excluded from the mean

    std::size_t layer_count() const { return sigma.size(); }
};

/// Integer per-layer budgets derived from a sensitivity profile. Budgets sum
/// to layers * per_head_budget exactly.
struct BudgetAllocation {
    double alpha = 0.0;
    std::vector<double> weights;             // nonnegative, sum 1
    std::vector<std::size_t> layer_budgets;  // per kv-head entries per layer
    std::size_t per_head_budget = 0;         // the global per-head budget M

    std::size_t layer_count() const { return layer_budgets.size(); }

    std::size_t total() const {
        std::size_t t = 0;
        for (std::size_t b : layer_budgets) t += b;
        return t;
    }
};

/// Runs two forwards over the calibration tokens, one under the causal mask
/// and one under SinkRecent{sink, budget - sink}, and averages per-layer key
/// cosine similarity over kv-heads and tokens. Zero-norm key pairs are
/// excluded from the mean with a count adjustment.
inline SensitivityProfile measure_sensitivity(const Model& model,
                                              std::span<const TokenId> calibration_tokens,
                                              std::size_t calibration_budget, std::size_t sink,
                                              std::string input_id = "") {
    const std::size_t n = calibration_tokens.size();
    if (n < 2) {
        throw Error("measure_sensitivity: need at least 2 calibration tokens");
    }
    if (calibration_budget < sink + 1) {
        throw Error("measure_sensitivity: budget must be >= sink + 1");
    }
    const std::size_t recent = calibration_budget - sink;

    TraceOptions opts;
    opts.store_attention = false;
    const ForwardTrace full = forward(model, calibration_tokens, MaskSpec::causal(), nullptr, opts);
    const ForwardTrace block =
        forward(model, calibration_tokens, MaskSpec::sink_recent(sink, recent), nullptr, opts);

    SensitivityProfile profile;
    profile.mask_sink = sink;
    profile.mask_recent = recent;
    profile.input_id = std::move(input_id);
    profile.model_seed = model.config.seed;

    const std::size_t kv_heads = model.config.kv_heads;
    for (std::size_t l = 0; l < model.config.layers; ++l) {
        double acc = 0.0;
        std::size_t counted = 0;
        for (std::size_t h = 0; h < kv_heads; ++h) {
            const Matrix& kf = full.layers[l].keys[h];
            const Matrix& kb = block.layers[l].keys[h];
            for (std::size_t t = 0; t < n; ++t) {
                const auto a = kf.row(t);
                const auto b = kb.row(t);
                if (l2_norm(a) == 0.0 || l2_norm(b) == 0.0) {
                    ++profile.skipped_zero_norm;
                    continue;
                }
                acc += cosine(a, b);
                ++counted;
            }
        }
        profile.sigma.push_back(counted > 0 ? acc / double(counted) : 1.0);
        profile.sensitivity.push_back(1.0 - profile.sigma.back());
    }
    return profile;
}

/// Deterministic calibration stream for sensitivity profiling.
inline std::vector<TokenId> synthetic_calibration_tokens(std::size_t count, std::uint64_t seed,
                                                         std::size_t vocab = kDefaultVocab) {
    Rng rng(seed);
    std::vector<TokenId> tokens(count);
    for (auto& t : tokens) {
        t = static_cast<TokenId>(rng.uniform_index(vocab - 1));
    }
    return tokens;
}

/// Sharpened proportional allocation: w = s^alpha / sum s^alpha, rounded to
/// integers by largest remainder so the budgets sum to layers * M exactly.
/// A degenerate profile (sum s^alpha == 0) falls back to uniform weights.
/// Every layer gets at least 1 entry; the deficit comes out of the largest
/// allocation.
inline BudgetAllocation allocate(const SensitivityProfile& profile, std::size_t per_head_budget,
                                 double alpha) {
    const std::size_t layers = profile.layer_count();
    if (layers < 1) {
        throw Error("allocate: empty profile");
    }
    if (per_head_budget < 1) {
        throw Error("allocate: budget must be >= 1");
    }
    if (alpha < 0.0) {
        throw Error("allocate: alpha must be >= 0");
    }

    BudgetAllocation alloc;
    alloc.alpha = alpha;
    alloc.per_head_budget = per_head_budget;

    std::vector<double> powered(layers);
    double total = 0.0;
    for (std::size_t l = 0; l < layers; ++l) {
        const double s = std::max(0.0, profile.sensitivity[l]);
        powered[l] = std::pow(s, alpha);
        total += powered[l];
    }
    alloc.weights.resize(layers);
    if (total <= 0.0) {
        std::fill(alloc.weights.begin(), alloc.weights.end(), 1.0 / double(layers));
    } else {
        for (std::size_t l = 0; l < layers; ++l) {
            alloc.weights[l] = powered[l] / total;
        }
    }

    const std::size_t grand_total = layers * per_head_budget;
    std::vector<double> real(layers);
    std::vector<std::size_t> budgets(layers);
    std::size_t assigned = 0;
    for (std::size_t l = 0; l < layers; ++l) {
        real[l] = alloc.weights[l] * double(grand_total);
        budgets[l] = static_cast<std::size_t>(std::floor(real[l]));
        assigned += budgets[l];
    }
    // Largest remainder, ties to the lower layer index.
    std::vector<std::size_t> order(layers);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double ra = real[a] - std::floor(real[a]);
        const double rb = real[b] - std::floor(real[b]);
        if (ra != rb) return ra > rb;
        return a < b;
    });
    for (std::size_t i = 0; assigned < grand_total; ++i) {
        ++budgets[order[i % layers]];
        ++assigned;
    }

    // Floor of 1 entry per layer, deficit taken from the largest allocation.
    // Among joint-largest budgets the lowest-weight layer gives, which keeps
    // budgets monotone in sensitivity.
    for (std::size_t l = 0; l < layers; ++l) {
        while (budgets[l] < 1) {
            std::size_t victim = 0;
            for (std::size_t j = 1; j < layers; ++j) {
                if (budgets[j] > budgets[victim] ||
                    (budgets[j] == budgets[victim] && alloc.weights[j] < alloc.weights[victim])) {
                    victim = j;
                }
            }
            if (budgets[victim] <= 1) {
                throw Error("allocate: cannot satisfy per-layer floor");
            }
            --budgets[victim];
            ++budgets[l];
        }
    }

    alloc.layer_budgets = std::move(budgets);
    return alloc;
}

inline BudgetAllocation uniform_allocation(std::size_t layers, std::size_t per_head_budget) {
    BudgetAllocation alloc;
    alloc.alpha = 0.0;
    alloc.per_head_budget = per_head_budget;
    alloc.weights.assign(layers, 1.0 / double(layers));
    alloc.layer_budgets.assign(layers, per_head_budget);
    return alloc;
}

inline void save_profile(const SensitivityProfile& profile, const std::filesystem::path& path) {
    nlohmann::ordered_json j;
    j["layers"] = profile.sigma;
    j["mask"] = {{"sink", profile.mask_sink}, {"recent", profile.mask_recent}};
    j["input_id"] = profile.input_id;
    j["model_seed"] = profile.model_seed;
    j["skipped_zero_norm"] = profile.skipped_zero_norm;
    std::ofstream out(path);
    if (!out) {
        throw IoError("save_profile: cannot open " + path.string());
    }
    out << j.dump(2) << '\n';
}

inline SensitivityProfile load_profile(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("load_profile: cannot open " + path.string());
    }
    nlohmann::json j = nlohmann::json::parse(in);
    SensitivityProfile profile;
    profile.sigma = j.at("layers").get<std::vector<double>>();
    for (double s : profile.sigma) {
        profile.sensitivity.push_back(1.0 - s);
    }
    profile.mask_sink = j.at("mask").at("sink").get<std::size_t>();
    profile.mask_recent = j.at("mask").at("recent").get<std::size_t>();
    profile.input_id = j.value("input_id", "");
    profile.model_seed = j.value("model_seed", std::uint64_t{0});
    profile.skipped_zero_norm = j.value("skipped_zero_norm", std::size_t{0});
    return profile;
}

}  // namespace epikv
