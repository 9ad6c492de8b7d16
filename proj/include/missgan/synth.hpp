#pragma once

// Labeled multi-mode synthetic series for testing the detector end to end.
//
// The series alternates between modes in blocks of 4-8 periods. Each mode
// drives two data channels (a waveform and its quarter-period shift) and one
// one-hot conditional channel. Anomalies are additive spikes on single ticks
// and stretches whose conditional channel names the wrong mode.

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "missgan/keyvalue.hpp"
#include "missgan/rng.hpp"
#include "missgan/timeseries.hpp"

namespace missgan {

enum class Waveform { Sine, Square, Sawtooth };

inline Waveform parse_waveform(std::string_view text, std::string_view key) {
    const auto t = trim(text);
    if (t == "sine") return Waveform::Sine;
    if (t == "square") return Waveform::Square;
    if (t == "sawtooth") return Waveform::Sawtooth;
    throw ConfigError("key '" + std::string(key) + "': unknown waveform '" + std::string(text) + "'");
}

inline const char* waveform_name(Waveform w) {
    switch (w) {
    case Waveform::Sine: return "sine";
    case Waveform::Square: return "square";
    case Waveform::Sawtooth: return "sawtooth";
    }
    return "?";
}

/// Waveform value at phase in [0, 1), range [-1, 1].
inline double waveform_value(Waveform w, double phase) {
    switch (w) {
    case Waveform::Sine: return std::sin(2.0 * std::numbers::pi * phase);
    case Waveform::Square: return phase < 0.5 ? 1.0 : -1.0;
    case Waveform::Sawtooth: return 2.0 * phase - 1.0;
    }
    return 0.0;
}

struct ModeSpec {
    Waveform waveform = Waveform::Sine;
    Index period = 20;
    double amplitude = 1.0;
};

struct SyntheticSpec {
    std::vector<ModeSpec> modes{{Waveform::Sine, 20, 1.0}, {Waveform::Sawtooth, 50, 0.8}};
    double noise_std = 0.05;
    double spike_rate = 0.0;
    double spike_magnitude = 3.0;
    double mislabel_rate = 0.0;
    Index ticks = 10000;
    std::uint64_t seed = 7;

    static constexpr Index data_channels = 2;

    void validate() const {
        if (modes.empty()) throw ConfigError("synthetic spec needs at least one mode");
        for (const auto& m : modes) {
            if (m.period < 2) throw ConfigError("mode period must be at least 2 ticks");
            if (!std::isfinite(m.amplitude)) throw ConfigError("mode amplitude must be finite");
        }
        if (!(noise_std >= 0.0)) throw ConfigError("noise_std must be >= 0");
        if (!(spike_rate >= 0.0 && spike_rate <= 1.0)) throw ConfigError("spike_rate must be in [0,1]");
        if (!(mislabel_rate >= 0.0 && mislabel_rate <= 1.0)) throw ConfigError("mislabel_rate must be in [0,1]");
        if (!std::isfinite(spike_magnitude)) throw ConfigError("spike_magnitude must be finite");
        if (ticks < 1) throw ConfigError("ticks must be positive");
    }

    ChannelSchema schema() const {
        ChannelSchema s;
        for (Index j = 0; j < data_channels; ++j) s.data_channels.push_back("x" + std::to_string(j));
        for (std::size_t i = 0; i < modes.size(); ++i) s.cond_channels.push_back("cond_" + std::to_string(i));
        s.label_channel = "label";
        return s;
    }
};

inline SyntheticSpec parse_synthetic_spec(const KeyValues& kv) {
    SyntheticSpec spec;
    std::size_t n_modes = spec.modes.size();
    if (const auto it = kv.find("modes"); it != kv.end()) {
        const auto n = parse_int(it->second, "modes");
        if (n < 1) throw ConfigError("key 'modes': must be at least 1");
        n_modes = static_cast<std::size_t>(n);
    }
    std::vector<ModeSpec> modes(n_modes);
    for (std::size_t i = 0; i < n_modes; ++i) {
        if (i < spec.modes.size()) modes[i] = spec.modes[i];
        else modes[i] = {Waveform::Sine, static_cast<Index>(20 + 10 * i), 1.0};
    }
    for (const auto& [key, value] : kv) {
        if (key == "modes") continue;
        if (key == "noise_std") spec.noise_std = parse_double(value, key);
        else if (key == "spike_rate") spec.spike_rate = parse_double(value, key);
        else if (key == "spike_magnitude") spec.spike_magnitude = parse_double(value, key);
        else if (key == "mislabel_rate") spec.mislabel_rate = parse_double(value, key);
        else if (key == "ticks") spec.ticks = parse_int(value, key);
        else if (key == "seed") spec.seed = parse_uint(value, key);
        else {
            const auto dot = key.find('.');
            if (dot == std::string::npos) throw ConfigError("unknown key '" + key + "'");
            const auto field = key.substr(0, dot);
            const auto idx = parse_int(std::string_view(key).substr(dot + 1), key);
            if (idx < 0 || static_cast<std::size_t>(idx) >= n_modes)
                throw ConfigError("key '" + key + "': mode index out of range");
            auto& mode = modes[static_cast<std::size_t>(idx)];
            if (field == "waveform") mode.waveform = parse_waveform(value, key);
            else if (field == "period") mode.period = parse_int(value, key);
            else if (field == "amplitude") mode.amplitude = parse_double(value, key);
            else throw ConfigError("unknown key '" + key + "'");
        }
    }
    spec.modes = std::move(modes);
    spec.validate();
    return spec;
}

inline std::string format_synthetic_spec(const SyntheticSpec& spec) {
    std::string out = "modes=" + std::to_string(spec.modes.size()) + "\n";
    for (std::size_t i = 0; i < spec.modes.size(); ++i) {
        const auto n = std::to_string(i);
        out += "waveform." + n + "=" + waveform_name(spec.modes[i].waveform) + "\n";
        out += "period." + n + "=" + std::to_string(spec.modes[i].period) + "\n";
        out += "amplitude." + n + "=" + format_double(spec.modes[i].amplitude) + "\n";
    }
    out += "noise_std=" + format_double(spec.noise_std) + "\n";
    out += "spike_rate=" + format_double(spec.spike_rate) + "\n";
    out += "spike_magnitude=" + format_double(spec.spike_magnitude) + "\n";
    out += "mislabel_rate=" + format_double(spec.mislabel_rate) + "\n";
    out += "ticks=" + std::to_string(spec.ticks) + "\n";
    out += "seed=" + std::to_string(spec.seed) + "\n";
    return out;
}

/// Per-tick ground truth that the generator used, for tests and diagnostics.
struct SyntheticTruth {
    std::vector<int> mode;          // true mode per tick
    std::vector<Index> block_starts; // first tick of each mode block
};

inline TimeSeries synth_generate(const SyntheticSpec& spec, SyntheticTruth* truth = nullptr) {
    spec.validate();
    const Index T = spec.ticks;
    const Index M = SyntheticSpec::data_channels;
    const auto n_modes = static_cast<Index>(spec.modes.size());

    const Rng root(spec.seed);
    Rng block_rng = root.child("blocks");
    Rng noise_rng = root.child("noise");
    Rng spike_rng = root.child("spikes");
    Rng mislabel_rng = root.child("mislabel");

    TimeSeries ts;
    ts.schema = spec.schema();
    ts.x.setZero(T, M);
    ts.y.setZero(T, n_modes);
    ts.labels.assign(static_cast<std::size_t>(T), 0);

    std::vector<int> mode_of(static_cast<std::size_t>(T));
    std::vector<Index> starts;
    int mode = static_cast<int>(block_rng.below(static_cast<std::uint64_t>(n_modes)));
    Index t = 0;
    while (t < T) {
        const auto& m = spec.modes[static_cast<std::size_t>(mode)];
        const Index len = m.period * static_cast<Index>(4 + block_rng.below(5));
        starts.push_back(t);
        for (Index i = 0; i < len && t < T; ++i, ++t) {
            const double phase = static_cast<double>(i % m.period) / static_cast<double>(m.period);
            ts.x(t, 0) = m.amplitude * waveform_value(m.waveform, phase);
            ts.x(t, 1) = m.amplitude * waveform_value(m.waveform, std::fmod(phase + 0.25, 1.0));
            ts.y(t, mode) = 1.0;
            mode_of[static_cast<std::size_t>(t)] = mode;
        }
        if (n_modes > 1) {
            const auto step = 1 + static_cast<int>(block_rng.below(static_cast<std::uint64_t>(n_modes - 1)));
            mode = (mode + step) % static_cast<int>(n_modes);
        }
    }

    if (spec.noise_std > 0.0)
        for (Index i = 0; i < T; ++i)
            for (Index j = 0; j < M; ++j) ts.x(i, j) += noise_rng.normal(0.0, spec.noise_std);

    // Mislabeled stretches last one period of the true mode, clipped to the
    // block, so the expected labeled fraction is close to mislabel_rate.
    if (n_modes > 1 && spec.mislabel_rate > 0.0) {
        std::size_t block = 0;
        for (Index i = 0; i < T;) {
            while (block + 1 < starts.size() && starts[block + 1] <= i) ++block;
            const Index block_end = block + 1 < starts.size() ? starts[block + 1] : T;
            const int true_mode = mode_of[static_cast<std::size_t>(i)];
            const Index period = spec.modes[static_cast<std::size_t>(true_mode)].period;
            if (mislabel_rng.bernoulli(spec.mislabel_rate / static_cast<double>(period))) {
                const int wrong = (true_mode + 1) % static_cast<int>(n_modes);
                const Index end = std::min(i + period, block_end);
                for (; i < end; ++i) {
                    ts.y.row(i).setZero();
                    ts.y(i, wrong) = 1.0;
                    ts.labels[static_cast<std::size_t>(i)] = 1;
                }
            } else {
                ++i;
            }
        }
    }

    if (spec.spike_rate > 0.0) {
        for (Index i = 0; i < T; ++i) {
            if (!spike_rng.bernoulli(spec.spike_rate)) continue;
            const auto channel = static_cast<Index>(spike_rng.below(static_cast<std::uint64_t>(M)));
            const double sign = spike_rng.bernoulli(0.5) ? 1.0 : -1.0;
            ts.x(i, channel) += sign * spec.spike_magnitude;
            ts.labels[static_cast<std::size_t>(i)] = 1;
        }
    }

    if (truth) {
        truth->mode = std::move(mode_of);
        truth->block_starts = std::move(starts);
    }
    return ts;
}

} // namespace missgan
