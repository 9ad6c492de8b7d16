#pragma once

// Multi-scale training loop: reconstruction epochs on the current segments,
// hidden-state extraction, PCA, re-segmentation, repeat until the cut points
// stop changing, then a final reconstruction phase.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "missgan/keyvalue.hpp"
#include "missgan/numerics.hpp"
#include "missgan/recnet.hpp"
#include "missgan/segmentation.hpp"
#include "missgan/timeseries.hpp"

namespace missgan {

struct TrainConfig {
    double lambda = 0.1;
    double lr = 0.001;
    double lr_decay = 0.75;
    int lr_decay_every = 8;
    double alpha = 0.1;
    Index l_init = 512;
    Index d_r = 6;
    Index d_h = 100;
    int iterations = 5; // K
    int epochs = 16;    // per reconstruction phase
    Index batch_size = 32;
    std::uint64_t seed = 7;
    bool decoder_feedback = true;
    Index hmm_states = 4;
    NormMode norm = NormMode::MinMax;
    /// Off gives the single-scale ablation: every phase trains on the coarse windows.
    bool segmentation = true;
    int max_regimes = 8;
    long long refit_work = 200'000;

    void validate() const {
        if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be >= 0");
        if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be > 0");
        if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("lr_decay must be in (0,1]");
        if (lr_decay_every < 1) throw ConfigError("lr_decay_every must be >= 1");
        if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ConfigError("alpha must be > 0");
        if (l_init < 2) throw ConfigError("l_init must be >= 2");
        if (d_h < 1) throw ConfigError("d_h must be >= 1");
        if (d_r < 1 || d_r > d_h) throw ConfigError("d_r must be in [1, d_h]");
        if (iterations < 1) throw ConfigError("iterations must be >= 1");
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (hmm_states < 1) throw ConfigError("hmm_states must be >= 1");
        if (max_regimes < 1) throw ConfigError("max_regimes must be >= 1");
        if (refit_work < 0) throw ConfigError("refit_work must be >= 0");
    }

    bool operator==(const TrainConfig&) const = default;
};

/// One configurable key: name, help text, parser and formatter.
struct TrainConfigKey {
    std::string name;
    std::string help;
    std::function<void(TrainConfig&, std::string_view)> set;
    std::function<std::string(const TrainConfig&)> get;
};

inline const std::vector<TrainConfigKey>& train_config_keys() {
    using C = TrainConfig;
    auto real = [](const char* name, const char* help, double C::*field) {
        return TrainConfigKey{name, help,
                              [=](C& c, std::string_view v) { c.*field = parse_double(v, name); },
                              [=](const C& c) { return format_double(c.*field); }};
    };
    auto index = [](const char* name, const char* help, Index C::*field) {
        return TrainConfigKey{name, help,
                              [=](C& c, std::string_view v) { c.*field = static_cast<Index>(parse_int(v, name)); },
                              [=](const C& c) { return std::to_string(c.*field); }};
    };
    auto integer = [](const char* name, const char* help, int C::*field) {
        return TrainConfigKey{name, help,
                              [=](C& c, std::string_view v) {
                                  const auto n = parse_int(v, name);
                                  if (n < INT32_MIN || n > INT32_MAX)
                                      throw ConfigError("key '" + std::string(name) + "': out of range");
                                  c.*field = static_cast<int>(n);
                              },
                              [=](const C& c) { return std::to_string(c.*field); }};
    };
    auto flag = [](const char* name, const char* help, bool C::*field) {
        return TrainConfigKey{name, help, [=](C& c, std::string_view v) { c.*field = parse_bool(v, name); },
                              [=](const C& c) { return std::string(c.*field ? "on" : "off"); }};
    };
    static const std::vector<TrainConfigKey> keys{
        real("lambda", "feature-matching weight in the generator loss", &C::lambda),
        real("lr", "initial Adam learning rate", &C::lr),
        real("lr_decay", "learning-rate factor applied every lr_decay_every epochs", &C::lr_decay),
        integer("lr_decay_every", "epochs between learning-rate decays", &C::lr_decay_every),
        real("alpha", "segmentation granularity (weight of the model cost)", &C::alpha),
        index("l_init", "coarse window length in ticks", &C::l_init),
        index("d_r", "PCA dimension of the hidden representation", &C::d_r),
        index("d_h", "GRU hidden size", &C::d_h),
        integer("iterations", "maximum segmentation iterations (K)", &C::iterations),
        integer("epochs", "reconstruction epochs per phase", &C::epochs),
        index("batch_size", "segments per mini-batch", &C::batch_size),
        TrainConfigKey{"seed", "master random seed",
                       [](C& c, std::string_view v) { c.seed = parse_uint(v, "seed"); },
                       [](const C& c) { return std::to_string(c.seed); }},
        flag("decoder_feedback", "feed the previously emitted tick back into the decoder (on|off)",
             &C::decoder_feedback),
        index("hmm_states", "hidden states per regime HMM", &C::hmm_states),
        TrainConfigKey{"norm", "input normalization (minmax|zscore)",
                       [](C& c, std::string_view v) {
                           const auto t = trim(v);
                           if (t == "minmax") c.norm = NormMode::MinMax;
                           else if (t == "zscore") c.norm = NormMode::ZScore;
                           else throw ConfigError("key 'norm': expected minmax|zscore, got '" + std::string(v) + "'");
                       },
                       [](const C& c) { return std::string(c.norm == NormMode::MinMax ? "minmax" : "zscore"); }},
        flag("segmentation", "re-segment from hidden states between phases (on|off)", &C::segmentation),
        integer("max_regimes", "upper bound on regimes per segmentation", &C::max_regimes),
        TrainConfigKey{"refit_work", "segmenter refit budget in EM tick-iterations (0 disables)",
                       [](C& c, std::string_view v) { c.refit_work = parse_int(v, "refit_work"); },
                       [](const C& c) { return std::to_string(c.refit_work); }},
    };
    return keys;
}

/// Applies key=value pairs; unknown keys are errors naming the key.
inline void apply_train_config(TrainConfig& cfg, const KeyValues& kv) {
    const auto& keys = train_config_keys();
    for (const auto& [name, value] : kv) {
        const auto it = std::find_if(keys.begin(), keys.end(), [&](const auto& k) { return k.name == name; });
        if (it == keys.end()) throw ConfigError("unknown key '" + name + "'");
        it->set(cfg, value);
    }
}

inline std::string format_train_config(const TrainConfig& cfg) {
    std::string out;
    for (const auto& k : train_config_keys()) out += k.name + "=" + k.get(cfg) + "\n";
    return out;
}

/// beta0 * decay^floor(epoch / every), rounded to 15 significant digits so
/// decimal schedules come out exact (0.001 * 0.75^2 is 0.0005625, not the
/// neighbouring double that binary multiplication lands on).
inline double lr_at_epoch(double beta0, long epoch, double decay = 0.75, int every = 8) {
    if (epoch < 0) throw ConfigError("epoch must be >= 0");
    const double v = beta0 * std::pow(decay, static_cast<double>(epoch / every));
    char buf[32];
    const auto end = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 15).ptr;
    double out = v;
    std::from_chars(buf, end, out);
    return out;
}

// ---------------------------------------------------------------------------
// Reconstruction epochs

struct EpochLosses {
    double generator = 0.0;
    double discriminator = 0.0;
};

/// Parameters and optimizer state that persist across phases.
struct TrainerState {
    ReconstructionModel model;
    DiscriminatorParams disc;
    AdamState adam_g;
    AdamState adam_d;
};

/// Order of parameter updates, for checking that the discriminator moves first.
enum class UpdateKind : std::uint8_t { Discriminator, Generator };

/// One pass over the batches. Per batch the discriminator ascends L_D, then
/// the generator descends L_G against the updated discriminator. Reported
/// losses are the pre-update batch values averaged over batches.
inline EpochLosses train_reconstruction_epoch(TrainerState& st, const std::vector<SegmentBatch>& batches,
                                              double lambda, double lr, std::vector<UpdateKind>* updates = nullptr) {
    if (batches.empty()) throw ShapeError("no batches to train on");
    EpochLosses sum;
    std::vector<double> flat, grad;
    for (std::size_t i = 0; i < batches.size(); ++i) {
        try {
            const auto gd = compute_gradients(LossKind::Discriminator, batches[i], st.model, st.disc, lambda);
            if (!std::isfinite(gd.loss)) throw NumericError("non-finite discriminator loss");
            flat = flatten(st.disc);
            grad = flatten(gd.discriminator);
            for (auto& g : grad) g = -g;
            adam_step(st.adam_d, flat, grad, lr);
            unflatten(flat, st.disc);
            if (updates) updates->push_back(UpdateKind::Discriminator);

            const auto gg = compute_gradients(LossKind::Generator, batches[i], st.model, st.disc, lambda);
            if (!std::isfinite(gg.loss)) throw NumericError("non-finite generator loss");
            flat = flatten(st.model);
            grad = flatten(gg.generator);
            adam_step(st.adam_g, flat, grad, lr);
            unflatten(flat, st.model);
            if (updates) updates->push_back(UpdateKind::Generator);

            sum.discriminator += gd.loss;
            sum.generator += gg.loss;
        } catch (const NumericError& e) {
            throw NumericError("batch " + std::to_string(i) + " (" + std::to_string(batches[i].size()) + " x " +
                               std::to_string(batches[i].length()) + " ticks): " + e.what());
        }
    }
    const auto n = static_cast<double>(batches.size());
    return {sum.generator / n, sum.discriminator / n};
}

/// Splits segments longer than `cap` into near-equal pieces.
inline std::vector<SegmentBounds> cap_segments(const std::vector<SegmentBounds>& segments, Index cap) {
    std::vector<SegmentBounds> out;
    for (const auto& s : segments) {
        const Index pieces = (s.length + cap - 1) / cap;
        Index begin = s.begin;
        for (Index p = 0; p < pieces; ++p) {
            const Index len = s.length / pieces + (p < s.length % pieces ? 1 : 0);
            out.push_back({begin, len});
            begin += len;
        }
    }
    return out;
}

/// Groups segments by exact length and cuts each group into batches of at
/// most `batch_size`. Membership and batch order are shuffled by `rng`.
inline std::vector<SegmentBatch> make_batches(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y,
                                              const std::vector<SegmentBounds>& segments, Index batch_size,
                                              Rng& rng) {
    std::vector<SegmentBounds> sorted = segments;
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const auto& a, const auto& b) { return a.length < b.length; });
    auto shuffle = [&](auto first, auto last) {
        for (auto n = last - first; n > 1; --n)
            std::swap(first[n - 1], first[static_cast<std::ptrdiff_t>(rng.below(static_cast<std::uint64_t>(n)))]);
    };
    std::vector<std::vector<SegmentBounds>> groups;
    for (auto it = sorted.begin(); it != sorted.end();) {
        auto end = std::find_if(it, sorted.end(), [&](const auto& s) { return s.length != it->length; });
        shuffle(it, end);
        for (auto b = it; b != end; b += std::min<std::ptrdiff_t>(batch_size, end - b))
            groups.emplace_back(b, b + std::min<std::ptrdiff_t>(batch_size, end - b));
        it = end;
    }
    shuffle(groups.begin(), groups.end());
    std::vector<SegmentBatch> out;
    out.reserve(groups.size());
    for (const auto& g : groups) out.push_back(make_batch(x, y, g));
    return out;
}

/// Encoder hidden states for every tick, each segment encoded from a zero
/// state. Segments must tile [0, T).
inline Eigen::MatrixXd extract_hidden_representation(const ReconstructionModel& m, const Eigen::MatrixXd& x,
                                                     const Eigen::MatrixXd& y,
                                                     const std::vector<SegmentBounds>& segments) {
    Eigen::MatrixXd H(x.rows(), m.hidden_dim());
    Index next = 0;
    for (const auto& s : segments) {
        if (s.begin != next || s.length < 1) throw ShapeError("segments must tile the series in order");
        H.middleRows(s.begin, s.length) = encode(x.middleRows(s.begin, s.length), y.middleRows(s.begin, s.length), m).hidden;
        next = s.end();
    }
    if (next != x.rows()) throw ShapeError("segments must tile the series in order");
    return H;
}

inline Eigen::MatrixXd extract_hidden_representation(const ReconstructionModel& m, const TimeSeries& series,
                                                     const std::vector<SegmentBounds>& segments) {
    return extract_hidden_representation(m, series.x, series.y, segments);
}

// ---------------------------------------------------------------------------
// Full fit

struct EpochRecord {
    int phase = 0;  // 0-based reconstruction phase
    long epoch = 0; // global 0-based epoch counter
    double lr = 0.0;
    double loss_g = 0.0;
    double loss_d = 0.0;

    bool operator==(const EpochRecord&) const = default;
};

struct TrainingLog {
    std::vector<EpochRecord> epochs;
    /// Cut points of S(0), S(1), ... in the order they were produced.
    std::vector<std::vector<Index>> segmentations;
    bool converged = false;

    bool operator==(const TrainingLog&) const = default;
};

/// Everything needed to score new data.
struct Checkpoint {
    static constexpr std::uint32_t kFormatVersion = 1;

    ChannelSchema schema;
    NormStats norm;
    TrainConfig config;
    ReconstructionModel model;
    DiscriminatorParams disc;
    Projection projection; // empty when segmentation is off
    std::vector<SegmentBounds> segments;
    Index scoring_window = 0;
    TrainingLog log;

    bool operator==(const Checkpoint&) const = default;
};

struct FitHooks {
    std::function<void(const EpochRecord&)> on_epoch;
    std::function<void(int iteration, const SegmentationResult&)> on_segmentation;
    std::vector<UpdateKind>* updates = nullptr;
};

inline SegmenterOptions segmenter_options(const TrainConfig& cfg, int iteration) {
    SegmenterOptions opt;
    opt.alpha = cfg.alpha;
    opt.states = cfg.hmm_states;
    opt.max_regimes = cfg.max_regimes;
    opt.refit_work = cfg.refit_work;
    opt.baum_welch.seed = Rng(cfg.seed).child("segmenter", static_cast<std::uint64_t>(iteration)).next();
    return opt;
}

/// Median segment length clamped to [16, 4 l_init].
inline Index scoring_window_for(const std::vector<SegmentBounds>& segments, Index l_init) {
    std::vector<Index> lengths;
    for (const auto& s : segments) lengths.push_back(s.length);
    const auto mid = lengths.begin() + static_cast<std::ptrdiff_t>(lengths.size() / 2);
    std::nth_element(lengths.begin(), mid, lengths.end());
    return std::clamp<Index>(*mid, 16, 4 * l_init);
}

/// Trains on a raw (unnormalized) series. Normalization statistics are fit
/// here and stored in the checkpoint.
inline Checkpoint missgan_fit(const TimeSeries& series, const TrainConfig& cfg, const FitHooks& hooks = {}) {
    cfg.validate();
    series.validate();
    const Index T = series.length();
    if (T < 4) throw ShapeError("training series needs at least 4 ticks");

    Checkpoint ck;
    ck.schema = series.schema;
    ck.config = cfg;
    ck.norm = normalize_fit(series, cfg.norm);
    const TimeSeries data = normalize_apply(series, ck.norm);
    const Index M = data.data_dim(), C = data.cond_dim();

    const Rng root(cfg.seed);
    Rng init_g = root.child("generator");
    Rng init_d = root.child("discriminator");
    Rng batch_rng = root.child("batches");
    TrainerState st{ReconstructionModel::random(M, C, cfg.d_h, init_g, cfg.decoder_feedback),
                    DiscriminatorParams::random(M + C, cfg.d_h, init_d), AdamState{}, AdamState{}};
    const Index cap = 4 * cfg.l_init;

    long epoch = 0;
    int phase = 0;
    auto run_phase = [&](const std::vector<SegmentBounds>& segments) {
        for (int e = 0; e < cfg.epochs; ++e, ++epoch) {
            const double lr = lr_at_epoch(cfg.lr, epoch, cfg.lr_decay, cfg.lr_decay_every);
            const auto batches = make_batches(data.x, data.y, segments, cfg.batch_size, batch_rng);
            const auto losses = train_reconstruction_epoch(st, batches, cfg.lambda, lr, hooks.updates);
            const EpochRecord rec{phase, epoch, lr, losses.generator, losses.discriminator};
            ck.log.epochs.push_back(rec);
            if (hooks.on_epoch) hooks.on_epoch(rec);
        }
        ++phase;
    };

    std::vector<SegmentBounds> current = coarse_segment(T, cfg.l_init);
    ck.log.segmentations.push_back(cut_points_of(current));
    for (int k = 1; k <= cfg.iterations; ++k) {
        const auto train_segments = cap_segments(current, cap);
        run_phase(train_segments);
        std::vector<SegmentBounds> next = current;
        if (cfg.segmentation) {
            const Eigen::MatrixXd H = extract_hidden_representation(st.model, data, train_segments);
            ck.projection = pca_fit(H, std::min(cfg.d_r, T - 1));
            const auto result = segment_series(pca_transform(ck.projection, H), segmenter_options(cfg, k));
            if (hooks.on_segmentation) hooks.on_segmentation(k, result);
            next.clear();
            for (const auto& s : result.segmentation.segments) next.push_back(s.bounds());
        }
        ck.log.segmentations.push_back(cut_points_of(next));
        const bool same = cut_points_of(next) == cut_points_of(current);
        current = std::move(next);
        if (same) {
            ck.log.converged = true;
            break;
        }
    }
    ck.segments = cap_segments(current, cap);
    run_phase(ck.segments);

    ck.model = std::move(st.model);
    ck.disc = std::move(st.disc);
    ck.scoring_window = scoring_window_for(ck.segments, cfg.l_init);
    return ck;
}

} // namespace missgan
