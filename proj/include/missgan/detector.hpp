#pragma once

// Per-tick anomaly scores from reconstruction error, CSV exports, and the
// threshold-free (AUC) and best-threshold (F1) evaluation metrics.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "missgan/keyvalue.hpp"
#include "missgan/numerics.hpp"
#include "missgan/recnet.hpp"
#include "missgan/trainer.hpp"

namespace missgan {

struct AnomalyReport {
    std::vector<double> raw;    // Euclidean reconstruction error per tick
    std::vector<double> scaled; // minmax_scale(raw)
    Eigen::MatrixXd errors;     // T x M absolute per-channel errors
    std::vector<SegmentBounds> windows;
};

/// Consecutive windows of `w` ticks; the remainder is kept at its own length.
inline std::vector<SegmentBounds> scoring_windows(Index T, Index w) {
    if (w < 1) throw ConfigError("scoring window must be positive");
    std::vector<SegmentBounds> out;
    for (Index b = 0; b < T; b += w) out.push_back({b, std::min(w, T - b)});
    return out;
}

/// Scores a series already normalized with the checkpoint's statistics.
/// Windows are reconstructed independently, so `threads` workers write to
/// disjoint rows and the result does not depend on the thread count.
inline AnomalyReport anomaly_scores(const Checkpoint& ck, const TimeSeries& series, int threads = 1) {
    if (series.schema.data_channels != ck.schema.data_channels ||
        series.schema.cond_channels != ck.schema.cond_channels)
        throw SchemaError("series channels do not match the checkpoint schema");
    series.validate();
    const Index T = series.length();
    const Index M = series.data_dim();
    AnomalyReport rep;
    rep.windows = scoring_windows(T, ck.scoring_window);
    rep.raw.assign(static_cast<std::size_t>(T), 0.0);
    rep.errors.resize(T, M);

    // Full-length windows go through in batches; the remainder alone.
    constexpr std::size_t kBatch = 64;
    std::vector<std::vector<SegmentBounds>> jobs;
    for (std::size_t i = 0; i < rep.windows.size(); i += kBatch) {
        std::vector<SegmentBounds> job;
        for (std::size_t j = i; j < std::min(i + kBatch, rep.windows.size()); ++j) {
            if (!job.empty() && rep.windows[j].length != job.front().length) {
                jobs.push_back(std::move(job));
                job.clear();
            }
            job.push_back(rep.windows[j]);
        }
        jobs.push_back(std::move(job));
    }

    auto run = [&](std::size_t first, std::size_t stride) {
        for (std::size_t j = first; j < jobs.size(); j += stride) {
            const auto batch = make_batch(series.x, series.y, jobs[j]);
            const auto rec = reconstruct_batch(batch, ck.model);
            for (std::size_t b = 0; b < jobs[j].size(); ++b) {
                const auto& w = jobs[j][b];
                for (Index t = 0; t < w.length; ++t) {
                    const auto diff = (batch.x[static_cast<std::size_t>(t)].row(static_cast<Index>(b)) -
                                       rec[static_cast<std::size_t>(t)].row(static_cast<Index>(b)))
                                          .cwiseAbs();
                    rep.errors.row(w.begin + t) = diff;
                    rep.raw[static_cast<std::size_t>(w.begin + t)] = diff.norm();
                }
            }
        }
    };
    const auto n = static_cast<std::size_t>(std::max(1, threads));
    if (n == 1 || jobs.size() < 2) {
        run(0, 1);
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t i = 0; i < std::min(n, jobs.size()); ++i) pool.emplace_back(run, i, std::min(n, jobs.size()));
    }
    for (double v : rep.raw)
        if (!std::isfinite(v)) throw NumericError("reconstruction produced a non-finite score");
    rep.scaled = minmax_scale(rep.raw);
    return rep;
}

/// Normalizes a raw series with the checkpoint's statistics, then scores it.
inline AnomalyReport score_raw_series(const Checkpoint& ck, const TimeSeries& raw, int threads = 1) {
    return anomaly_scores(ck, normalize_apply(raw, ck.norm), threads);
}

// ---------------------------------------------------------------------------
// Metrics

struct EvalResult {
    double auc = 0.0;
    double ideal_f1 = 0.0;
    double threshold = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    long tp = 0, fp = 0, fn = 0, tn = 0;
};

namespace detail {

inline void check_scores(std::span<const double> scores, std::span<const std::uint8_t> labels) {
    if (scores.size() != labels.size()) throw ShapeError("scores and labels differ in length");
    for (double s : scores)
        if (std::isnan(s)) throw NumericError("score is NaN");
    for (auto l : labels)
        if (l > 1) throw ConfigError("labels must be 0 or 1");
}

/// Indices ordered by descending score.
inline std::vector<std::size_t> descending(std::span<const double> scores) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
    return idx;
}

} // namespace detail

/// Fraction of (positive, negative) pairs ranked correctly, ties count half.
inline double auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
    detail::check_scores(scores, labels);
    const auto pos = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
    const double neg = static_cast<double>(labels.size()) - pos;
    if (pos == 0 || neg == 0) throw ConfigError("AUC needs both positive and negative labels");
    const auto idx = detail::descending(scores);
    // Walk from the lowest score up, counting negatives already passed.
    double correct = 0.0, neg_below = 0.0;
    for (std::size_t hi = idx.size(); hi > 0;) {
        std::size_t lo = hi - 1;
        while (lo > 0 && scores[idx[lo - 1]] == scores[idx[hi - 1]]) --lo;
        double p = 0.0, q = 0.0;
        for (std::size_t i = lo; i < hi; ++i) (labels[idx[i]] ? p : q) += 1.0;
        correct += p * neg_below + 0.5 * p * q;
        neg_below += q;
        hi = lo;
    }
    return correct / (pos * neg);
}

inline double f1_from_counts(long tp, long fp, long fn) {
    return tp == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
}

/// Best F1 over thresholds at every unique score, predicting score >= threshold.
/// The smallest threshold attaining the maximum is reported.
inline EvalResult ideal_f1(std::span<const double> scores, std::span<const std::uint8_t> labels) {
    detail::check_scores(scores, labels);
    const long pos = std::count(labels.begin(), labels.end(), 1);
    if (pos == 0) throw ConfigError("ideal F1 needs at least one positive label");
    const long n = static_cast<long>(labels.size());
    const auto idx = detail::descending(scores);
    EvalResult best;
    best.ideal_f1 = -1.0;
    long tp = 0, fp = 0;
    for (std::size_t i = 0; i < idx.size();) {
        const double v = scores[idx[i]];
        for (; i < idx.size() && scores[idx[i]] == v; ++i) (labels[idx[i]] ? tp : fp) += 1;
        const double f1 = f1_from_counts(tp, fp, pos - tp);
        if (f1 >= best.ideal_f1) {
            best.ideal_f1 = f1;
            best.threshold = v;
            best.tp = tp;
            best.fp = fp;
            best.fn = pos - tp;
            best.tn = n - pos - fp;
        }
    }
    best.precision = best.tp + best.fp > 0 ? static_cast<double>(best.tp) / static_cast<double>(best.tp + best.fp) : 0.0;
    best.recall = static_cast<double>(best.tp) / static_cast<double>(pos);
    return best;
}

inline EvalResult evaluate(std::span<const double> scores, std::span<const std::uint8_t> labels) {
    EvalResult r = ideal_f1(scores, labels);
    r.auc = auc(scores, labels);
    return r;
}

// ---------------------------------------------------------------------------
// Files

inline void write_scores_csv(std::ostream& out, const AnomalyReport& rep, std::span<const std::uint8_t> labels = {}) {
    if (!labels.empty() && labels.size() != rep.raw.size()) throw ShapeError("labels differ in length from scores");
    out << "tick,raw_score,scaled_score" << (labels.empty() ? "" : ",label") << '\n';
    for (std::size_t t = 0; t < rep.raw.size(); ++t) {
        out << t << ',' << format_double(rep.raw[t]) << ',' << format_double(rep.scaled[t]);
        if (!labels.empty()) out << ',' << int(labels[t]);
        out << '\n';
    }
}

inline void write_heatmap_csv(std::ostream& out, const AnomalyReport& rep, const std::vector<std::string>& channels) {
    if (static_cast<Index>(channels.size()) != rep.errors.cols()) throw ShapeError("channel names do not match errors");
    out << "tick";
    for (const auto& c : channels) out << ',' << c;
    out << '\n';
    for (Index t = 0; t < rep.errors.rows(); ++t) {
        out << t;
        for (Index j = 0; j < rep.errors.cols(); ++j) out << ',' << format_double(rep.errors(t, j));
        out << '\n';
    }
}

struct ScoresFile {
    std::vector<double> raw;
    std::vector<double> scaled;
    std::vector<std::uint8_t> labels; // empty if the file has no label column
};

inline ScoresFile read_scores_csv(std::istream& in, std::string_view source = "<stream>") {
    std::string line;
    if (!std::getline(in, line)) throw ParseError(std::string(source) + ": empty scores file");
    auto header = split(trim(line), ',');
    const bool has_labels = header.size() == 4 && header[3] == "label";
    if (header.size() < 3 || header[0] != "tick" || header[1] != "raw_score" || header[2] != "scaled_score" ||
        (header.size() == 4 && !has_labels) || header.size() > 4)
        throw ParseError(std::string(source) + ": expected header tick,raw_score,scaled_score[,label]");
    ScoresFile f;
    std::size_t row = 0;
    while (std::getline(in, line)) {
        ++row;
        if (trim(line).empty()) continue;
        const auto cells = split(trim(line), ',');
        if (cells.size() != header.size())
            throw ParseError(std::string(source) + ": row " + std::to_string(row) + " has the wrong number of cells");
        const auto where = std::string(source) + " row " + std::to_string(row);
        f.raw.push_back(parse_double(cells[1], where));
        f.scaled.push_back(parse_double(cells[2], where));
        if (has_labels) {
            const auto l = parse_int(cells[3], where);
            if (l != 0 && l != 1) throw ParseError(where + ": label must be 0 or 1");
            f.labels.push_back(static_cast<std::uint8_t>(l));
        }
    }
    return f;
}

inline void write_eval_summary(std::ostream& out, const EvalResult& r) {
    out << "auc=" << format_double(r.auc) << '\n'
        << "ideal_f1=" << format_double(r.ideal_f1) << '\n'
        << "threshold=" << format_double(r.threshold) << '\n'
        << "precision=" << format_double(r.precision) << '\n'
        << "recall=" << format_double(r.recall) << '\n'
        << "tp=" << r.tp << '\n'
        << "fp=" << r.fp << '\n'
        << "fn=" << r.fn << '\n'
        << "tn=" << r.tn << '\n';
}

} // namespace missgan
