#pragma once

// Run configuration: training keys, channel schema and worker count, merged
// from defaults, a key=value file, and command-line overrides.

#include <algorithm>
#include <string>
#include <vector>

#include "missgan/keyvalue.hpp"
#include "missgan/timeseries.hpp"
#include "missgan/trainer.hpp"

namespace missgan {

struct RunConfig {
    TrainConfig train;
    /// Empty data_channels means "infer from the CSV header".
    ChannelSchema schema;
    int threads = 1;
};

struct RunConfigKey {
    std::string name;
    std::string help;
    std::function<void(RunConfig&, std::string_view)> set;
    std::function<std::string(const RunConfig&)> get;
};

namespace detail {

inline std::vector<std::string> parse_name_list(std::string_view v) {
    std::vector<std::string> out;
    if (trim(v).empty()) return out;
    for (auto& s : split(v, ',')) {
        const auto t = trim(s);
        if (t.empty()) throw ConfigError("empty channel name in list '" + std::string(v) + "'");
        out.emplace_back(t);
    }
    return out;
}

inline std::string join_names(const std::vector<std::string>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
    return out;
}

} // namespace detail

/// Every key accepted in a config file or as a --flag.
inline const std::vector<RunConfigKey>& run_config_keys() {
    static const std::vector<RunConfigKey> keys = [] {
        std::vector<RunConfigKey> k;
        for (const auto& t : train_config_keys())
            k.push_back({t.name, t.help, [set = t.set](RunConfig& c, std::string_view v) { set(c.train, v); },
                         [get = t.get](const RunConfig& c) { return get(c.train); }});
        k.push_back({"data_channels", "comma-separated data columns (default: inferred from the header)",
                     [](RunConfig& c, std::string_view v) { c.schema.data_channels = detail::parse_name_list(v); },
                     [](const RunConfig& c) { return detail::join_names(c.schema.data_channels); }});
        k.push_back({"cond_channels", "comma-separated conditional columns (default: inferred)",
                     [](RunConfig& c, std::string_view v) { c.schema.cond_channels = detail::parse_name_list(v); },
                     [](const RunConfig& c) { return detail::join_names(c.schema.cond_channels); }});
        k.push_back({"label_channel", "0/1 anomaly label column, empty for none (default: 'label' if present)",
                     [](RunConfig& c, std::string_view v) {
                         const auto t = trim(v);
                         c.schema.label_channel = t.empty() ? std::nullopt : std::optional<std::string>(t);
                     },
                     [](const RunConfig& c) { return c.schema.label_channel.value_or(""); }});
        k.push_back({"categorical_cond", "leave conditional channels unnormalized (on|off)",
                     [](RunConfig& c, std::string_view v) { c.schema.categorical_cond = parse_bool(v, "categorical_cond"); },
                     [](const RunConfig& c) { return std::string(c.schema.categorical_cond ? "on" : "off"); }});
        k.push_back({"threads", "worker threads for scoring (1 = strict single-threaded)",
                     [](RunConfig& c, std::string_view v) {
                         const auto n = parse_int(v, "threads");
                         if (n < 1 || n > 1024) throw ConfigError("key 'threads': must be in [1, 1024]");
                         c.threads = static_cast<int>(n);
                     },
                     [](const RunConfig& c) { return std::to_string(c.threads); }});
        return k;
    }();
    return keys;
}

inline void apply_run_config(RunConfig& cfg, const KeyValues& kv) {
    const auto& keys = run_config_keys();
    for (const auto& [name, value] : kv) {
        const auto it = std::find_if(keys.begin(), keys.end(), [&](const auto& k) { return k.name == name; });
        if (it == keys.end()) throw ConfigError("unknown key '" + name + "'");
        it->set(cfg, value);
    }
}

/// Defaults, then the file (if a path is given), then the overrides.
inline RunConfig parse_config(const std::string& path, const KeyValues& overrides = {}) {
    RunConfig cfg;
    if (!path.empty()) apply_run_config(cfg, read_key_values(path));
    apply_run_config(cfg, overrides);
    cfg.train.validate();
    return cfg;
}

inline std::string format_run_config(const RunConfig& cfg) {
    std::string out;
    for (const auto& k : run_config_keys()) out += k.name + "=" + k.get(cfg) + "\n";
    return out;
}

/// Completes a partial schema from a CSV header. A column named 'label' is
/// the label unless one is configured; columns starting with 'cond' are
/// conditional; everything else is data.
inline ChannelSchema resolve_schema(const ChannelSchema& given, const std::vector<std::string>& header) {
    ChannelSchema s = given;
    const auto has = [&](const std::string& n) { return std::find(header.begin(), header.end(), n) != header.end(); };
    if (!s.label_channel && has("label")) s.label_channel = "label";
    if (s.data_channels.empty()) {
        const bool infer_cond = s.cond_channels.empty();
        for (const auto& h : header) {
            if (s.label_channel && h == *s.label_channel) continue;
            if (std::find(s.cond_channels.begin(), s.cond_channels.end(), h) != s.cond_channels.end()) continue;
            if (infer_cond && h.rfind("cond", 0) == 0) s.cond_channels.push_back(h);
            else s.data_channels.push_back(h);
        }
    }
    s.validate();
    return s;
}

} // namespace missgan
