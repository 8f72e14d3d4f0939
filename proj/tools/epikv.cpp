// SPDX-License-Identifier: Apache-2.0

#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "epikv/harness.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Episodic KV cache management: block-bounded prefill eviction, "
                 "conversation clustering, sensitivity-aware budget allocation, and "
                 "query-routed cache retrieval."};
    app.require_subcommand(1);

    // run
    auto* run_cmd = app.add_subcommand("run", "Run an experiment from a config file");
    std::string config_path;
    run_cmd->add_option("--config", config_path, "Config file (JSON or key=value)")->required();
    std::string scorer_override, out_override, corpus_override;
    std::int64_t m_override = -1, m_block_override = -1, episodes_override = -1;
    double alpha_override = -1.0;
    run_cmd->add_option("--m", m_override, "Per-head KV budget M");
    run_cmd->add_option("--m-block", m_block_override, "Prefill block size");
    run_cmd->add_option("--episodes", episodes_override, "Episode count E");
    run_cmd->add_option("--alpha", alpha_override, "Allocation sharpness");
    run_cmd->add_option("--scorer", scorer_override,
                        "patched|streaming|snapkv|kvzip|infinipot|keydiff");
    run_cmd->add_option("--corpus", corpus_override, "Conversation file (JSONL)");
    run_cmd->add_option("-o,--out", out_override, "Output directory");

    // synth
    auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic topical conversation");
    std::size_t topics = 4, turns = 40, queries = 12;
    std::uint64_t synth_seed = 1;
    std::string synth_out = "conv.jsonl";
    synth_cmd->add_option("--topics", topics, "Topic count");
    synth_cmd->add_option("--turns", turns, "Turns per topic");
    synth_cmd->add_option("--queries", queries, "Queries per topic");
    synth_cmd->add_option("--seed", synth_seed, "Generator seed");
    synth_cmd->add_option("-o,--out", synth_out, "Output path")->required();

    // profile
    auto* profile_cmd = app.add_subcommand("profile", "Measure layer sensitivity");
    std::uint64_t model_seed = 1;
    std::size_t profile_budget = 64, profile_sink = 0, profile_tokens = 0;
    std::string profile_out = "sensitivity.json";
    profile_cmd->add_option("--model-seed", model_seed, "Model weight seed");
    profile_cmd->add_option("--budget", profile_budget, "Calibration mask budget");
    profile_cmd->add_option("--sink", profile_sink, "Calibration sink size (0 = auto)");
    profile_cmd->add_option("--tokens", profile_tokens, "Calibration stream length (0 = auto)");
    profile_cmd->add_option("-o,--out", profile_out, "Output path")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run_cmd) {
            epikv::ExperimentConfig config = epikv::load_config(config_path);
            if (m_override >= 0) config.budget_per_head = static_cast<std::size_t>(m_override);
            if (m_block_override >= 0) config.block_size = static_cast<std::size_t>(m_block_override);
            if (episodes_override >= 0) config.episodes = static_cast<std::size_t>(episodes_override);
            if (alpha_override >= 0.0) config.alpha = alpha_override;
            if (!scorer_override.empty()) {
                auto kind = epikv::scorer_from_name(scorer_override);
                if (!kind) {
                    std::cerr << "epikv: unknown scorer '" << scorer_override << "'\n";
                    return 1;
                }
                config.scorer = *kind;
            }
            if (!corpus_override.empty()) config.corpus_path = corpus_override;
            if (!out_override.empty()) config.output_dir = out_override;

            const epikv::MetricsReport metrics = epikv::run(config);
            std::cout << "wrote " << config.output_dir << "/report.json ("
                      << metrics.switch_series.size() << " queries, " << metrics.switch_count
                      << " switches)\n";
            std::cout << "phase seconds: build=" << metrics.wall_build_s
                      << " queries=" << metrics.wall_queries_s
                      << " metrics=" << metrics.wall_metrics_s << '\n';
        } else if (*synth_cmd) {
            epikv::write_synth_corpus(synth_out, topics, turns, queries, synth_seed);
            std::cout << "wrote " << synth_out << '\n';
        } else if (*profile_cmd) {
            epikv::ModelConfig mc;
            mc.seed = model_seed;
            const epikv::Model model = epikv::init_model(mc);
            const std::size_t sink =
                profile_sink > 0 ? profile_sink : std::min<std::size_t>(128, profile_budget / 2);
            const std::size_t count =
                profile_tokens > 0 ? profile_tokens : std::max<std::size_t>(4 * profile_budget, 256);
            const auto tokens = epikv::synthetic_calibration_tokens(count, 7, mc.vocab);
            const auto profile = epikv::measure_sensitivity(
                model, tokens, profile_budget, sink,
                "synthetic:seed=7,len=" + std::to_string(count));
            epikv::save_profile(profile, profile_out);
            std::cout << "wrote " << profile_out << '\n';
        }
    } catch (const std::exception& e) {
        std::cerr << "epikv: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
