#pragma once

// Command table and dispatch for the missgan tool. Kept in a header so the
// test suite can run commands in-process and inspect the flag table.

#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "missgan/checkpoint.hpp"
#include "missgan/config.hpp"
#include "missgan/detector.hpp"
#include "missgan/segmentation.hpp"
#include "missgan/synth.hpp"
#include "missgan/timeseries.hpp"
#include "missgan/trainer.hpp"

namespace missgan::cli {

struct FlagSpec {
    std::string name; // without the leading dashes
    std::string help;
    bool required = false;
};

struct CommandSpec {
    std::string name;
    std::string description;
    std::vector<FlagSpec> flags;
};

inline const std::vector<CommandSpec>& commands() {
    static const std::vector<CommandSpec> table = [] {
        const FlagSpec threads{"threads", "worker threads for scoring (env MISSGAN_THREADS)"};
        CommandSpec train{"train", "fit a model on a CSV series and write a checkpoint",
                          {{"data", "training CSV", true},
                           {"config", "key=value config file"},
                           {"out", "checkpoint path (default missgan.ckpt)"}}};
        for (const auto& k : run_config_keys()) train.flags.push_back({k.name, k.help});
        return std::vector<CommandSpec>{
            train,
            {"segment", "segment a series from a checkpoint's hidden representation",
             {{"checkpoint", "checkpoint file", true},
              {"data", "CSV series", true},
              {"out", "segmentation file (rho,l,regime_id lines)", true},
              threads}},
            {"score", "write per-tick anomaly scores",
             {{"checkpoint", "checkpoint file", true},
              {"data", "CSV series", true},
              {"out", "scores CSV", true},
              {"heatmap", "per-channel absolute error CSV"},
              threads}},
            {"eval", "AUC and ideal F1 from a labeled scores CSV",
             {{"scores", "scores CSV with a label column", true}, {"out", "summary file (default stdout)"}}},
            {"synth", "generate a labeled synthetic series",
             {{"spec", "synthetic spec key=value file", true},
              {"out", "output CSV", true},
              {"seed", "override the spec's seed"}}},
        };
    }();
    return table;
}

namespace detail {

inline TimeSeries load_for_checkpoint(const Checkpoint& ck, const std::string& path) {
    ChannelSchema schema = ck.schema;
    const auto header = read_csv_header(path);
    if (schema.label_channel && std::find(header.begin(), header.end(), *schema.label_channel) == header.end())
        schema.label_channel.reset();
    return load_csv(path, schema);
}

inline int cmd_train(const std::map<std::string, std::string>& flags, std::ostream& log) {
    KeyValues overrides;
    for (const auto& k : run_config_keys())
        if (const auto it = flags.find(k.name); it != flags.end()) overrides[k.name] = it->second;
    const auto cfg = parse_config(flags.count("config") ? flags.at("config") : "", overrides);
    const auto& data = flags.at("data");
    const auto schema = resolve_schema(cfg.schema, read_csv_header(data));
    const auto series = load_csv(data, schema);
    FitHooks hooks;
    hooks.on_epoch = [&](const EpochRecord& r) {
        log << "epoch " << r.epoch << " phase " << r.phase << " lr " << format_double(r.lr) << " L_G "
            << format_double(r.loss_g) << " L_D " << format_double(r.loss_d) << '\n';
    };
    hooks.on_segmentation = [&](int k, const SegmentationResult& r) {
        log << "segmentation " << k << ": " << r.segmentation.segments.size() << " segments, " << r.regimes.size()
            << " regimes\n";
    };
    const auto ck = missgan_fit(series, cfg.train, hooks);
    const auto out = flags.count("out") ? flags.at("out") : std::string("missgan.ckpt");
    save_checkpoint(out, ck);
    log << "wrote " << out << '\n';
    return 0;
}

inline int cmd_segment(const std::map<std::string, std::string>& flags) {
    const auto ck = load_checkpoint(flags.at("checkpoint"));
    const auto data = normalize_apply(load_for_checkpoint(ck, flags.at("data")), ck.norm);
    const Index T = data.length();
    const auto windows = cap_segments(coarse_segment(T, ck.config.l_init), 4 * ck.config.l_init);
    const Eigen::MatrixXd H = extract_hidden_representation(ck.model, data, windows);
    const Projection proj = ck.projection.output_dim() > 0 && ck.projection.input_dim() == H.cols()
                                ? ck.projection
                                : pca_fit(H, std::min(ck.config.d_r, T - 1));
    const auto result = segment_series(pca_transform(proj, H), segmenter_options(ck.config, 0));
    write_segmentation(flags.at("out"), result.segmentation, T, result.regimes.size(), ck.config.alpha);
    return 0;
}

inline int cmd_score(const std::map<std::string, std::string>& flags, int threads) {
    const auto ck = load_checkpoint(flags.at("checkpoint"));
    const auto raw = load_for_checkpoint(ck, flags.at("data"));
    const auto report = score_raw_series(ck, raw, threads);
    std::ofstream out(flags.at("out"));
    if (!out) throw ParseError("cannot write " + flags.at("out"));
    write_scores_csv(out, report, raw.labels);
    if (const auto it = flags.find("heatmap"); it != flags.end()) {
        std::ofstream heat(it->second);
        if (!heat) throw ParseError("cannot write " + it->second);
        write_heatmap_csv(heat, report, ck.schema.data_channels);
    }
    return 0;
}

inline int cmd_eval(const std::map<std::string, std::string>& flags, std::ostream& stdout_) {
    std::ifstream in(flags.at("scores"));
    if (!in) throw ParseError("cannot open " + flags.at("scores"));
    const auto scores = read_scores_csv(in, flags.at("scores"));
    if (scores.labels.empty()) throw ConfigError("scores file has no label column");
    const auto result = evaluate(scores.raw, scores.labels);
    if (const auto it = flags.find("out"); it != flags.end()) {
        std::ofstream out(it->second);
        if (!out) throw ParseError("cannot write " + it->second);
        write_eval_summary(out, result);
    } else {
        write_eval_summary(stdout_, result);
    }
    return 0;
}

inline int cmd_synth(const std::map<std::string, std::string>& flags) {
    auto spec = parse_synthetic_spec(read_key_values(flags.at("spec")));
    if (const auto it = flags.find("seed"); it != flags.end()) spec.seed = parse_uint(it->second, "seed");
    save_csv(flags.at("out"), synth_generate(spec));
    return 0;
}

} // namespace detail

/// Runs one command. Returns 0 on success, 2 on usage errors, 1 on runtime
/// failures; diagnostics go to `err` as one line.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Conditional GRU reconstruction anomaly detector with multi-scale segmentation", "missgan"};
    app.require_subcommand(1);
    std::map<std::string, std::map<std::string, std::string>> values;
    std::map<std::string, CLI::App*> subs;
    for (const auto& cmd : commands()) {
        auto* sub = app.add_subcommand(cmd.name, cmd.description);
        subs[cmd.name] = sub;
        for (const auto& f : cmd.flags) {
            auto* opt = sub->add_option_function<std::string>(
                "--" + f.name, [&values, c = cmd.name, n = f.name](const std::string& v) { values[c][n] = v; }, f.help);
            if (f.required) opt->required();
            if (f.name == "threads") opt->envname("MISSGAN_THREADS");
        }
    }

    std::vector<const char*> argv{"missgan"};
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
        const auto* chosen = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
        out << chosen->help();
        return 0;
    } catch (const CLI::ParseError& e) {
        const auto* chosen = app.get_subcommands().empty() ? nullptr : app.get_subcommands().front();
        err << "missgan: " << e.what() << " (see 'missgan " << (chosen ? chosen->get_name() + " " : "")
            << "--help')\n";
        return 2;
    }

    const auto& name = app.get_subcommands().front()->get_name();
    const auto& flags = values[name];
    try {
        int threads = 1;
        if (const auto it = flags.find("threads"); it != flags.end()) {
            RunConfig rc;
            apply_run_config(rc, {{"threads", it->second}});
            threads = rc.threads;
        }
        if (name == "train") return detail::cmd_train(flags, err);
        if (name == "segment") return detail::cmd_segment(flags);
        if (name == "score") return detail::cmd_score(flags, threads);
        if (name == "eval") return detail::cmd_eval(flags, out);
        if (name == "synth") return detail::cmd_synth(flags);
    } catch (const std::exception& e) {
        err << "missgan " << name << ": " << e.what() << '\n';
        return 1;
    }
    return 1;
}

} // namespace missgan::cli
