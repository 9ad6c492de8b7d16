#pragma once

// Two-tier HMM regime segmentation scored by minimum description length.
//
// A regime is an HMM; a segmentation assigns every segment to one regime.
// The total description length in bits is
//     alpha * Cost_model + Cost_assign + Cost_like
// with Cost_model = 32 bits per free float (all regimes plus the regime
// transition matrix), Cost_assign = sum over segments of log*(length) +
// log2(r), and Cost_like = sum over segments of -log2 P(segment | regime).

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Dense>

#include "missgan/error.hpp"
#include "missgan/hmm.hpp"
#include "missgan/keyvalue.hpp"
#include "missgan/timeseries.hpp"

namespace missgan {

inline constexpr double kBitsPerFloat = 32.0;

/// Universal code length for a positive integer, in bits:
/// log2(c0) + log2(n) + log2(log2(n)) + ... over the positive terms.
inline double log_star(double n) {
    double bits = std::log2(2.865064);
    double x = n;
    for (;;) {
        x = std::log2(x);
        if (!(x > 0.0)) break;
        bits += x;
    }
    return bits;
}

struct RegimeSet {
    std::vector<HmmParams> regimes;
    Eigen::MatrixXd delta; // r x r regime transition matrix

    Index size() const { return static_cast<Index>(regimes.size()); }

    Index free_parameters() const {
        Index n = 0;
        for (const auto& h : regimes) n += h.free_parameters();
        return n + size() * (size() - 1);
    }

    void validate(double tol = 1e-9) const {
        if (regimes.empty()) throw ShapeError("regime set is empty");
        if (delta.rows() != size() || delta.cols() != size()) throw ShapeError("regime transition matrix shape");
        for (Index i = 0; i < size(); ++i)
            if (std::abs(delta.row(i).sum() - 1.0) > tol || (delta.row(i).array() < 0.0).any())
                throw NumericError("regime transition row " + std::to_string(i) + " is not a distribution");
        for (const auto& h : regimes) h.validate();
    }
};

struct Segment {
    Index begin = 0;
    Index length = 0;
    int regime = 0;

    Index end() const { return begin + length; }
    SegmentBounds bounds() const { return {begin, length}; }
    bool operator==(const Segment&) const = default;
};

struct Segmentation {
    std::vector<Segment> segments;
    double total_cost = 0.0;

    std::vector<Index> cut_points() const {
        std::vector<Index> cuts;
        for (const auto& s : segments) cuts.push_back(s.begin);
        return cuts;
    }

    std::vector<SegmentBounds> bounds() const {
        std::vector<SegmentBounds> out;
        for (const auto& s : segments) out.push_back(s.bounds());
        return out;
    }

    /// Segments tile [0, T) in order and regime ids lie in [0, r).
    void validate(Index T, Index r) const {
        Index pos = 0;
        for (const auto& s : segments) {
            if (s.begin != pos || s.length < 1) throw ShapeError("segments do not tile the series");
            if (s.regime < 0 || s.regime >= r) throw ShapeError("segment assigned to an unknown regime");
            pos += s.length;
        }
        if (pos != T) throw ShapeError("segments do not cover the series");
    }
};

struct CostBreakdown {
    double model = 0.0;  // bits before the alpha weight
    double assign = 0.0;
    double like = 0.0;
    double total = 0.0;
};

inline CostBreakdown mdl_cost_breakdown(const Eigen::MatrixXd& series, const RegimeSet& regimes,
                                        const Segmentation& seg, double alpha) {
    seg.validate(series.rows(), regimes.size());
    CostBreakdown c;
    const auto r = static_cast<double>(regimes.size());
    c.model = kBitsPerFloat * static_cast<double>(regimes.free_parameters());
    for (const auto& s : seg.segments) {
        c.assign += log_star(static_cast<double>(s.length)) + std::log2(r);
        const double ll = hmm_forward_loglik(series.middleRows(s.begin, s.length),
                                             regimes.regimes[static_cast<std::size_t>(s.regime)]);
        c.like += -ll / std::numbers::ln2;
    }
    c.total = alpha * c.model + c.assign + c.like;
    return c;
}

inline double mdl_cost(const Eigen::MatrixXd& series, const RegimeSet& regimes, const Segmentation& seg,
                       double alpha) {
    return mdl_cost_breakdown(series, regimes, seg, alpha).total;
}

/// Per-tick regime transition matrix from a segmentation: the off-diagonal
/// rate i->j is the number of i->j boundaries divided by the ticks spent in i.
inline Eigen::MatrixXd estimate_regime_transitions(const std::vector<Segment>& segments, Index r) {
    Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(r, r);
    Eigen::VectorXd ticks = Eigen::VectorXd::Zero(r);
    for (std::size_t i = 0; i < segments.size(); ++i) {
        ticks(segments[i].regime) += static_cast<double>(segments[i].length);
        if (i + 1 < segments.size() && segments[i + 1].regime != segments[i].regime)
            counts(segments[i].regime, segments[i + 1].regime) += 1.0;
    }
    Eigen::MatrixXd delta = Eigen::MatrixXd::Identity(r, r);
    for (Index i = 0; i < r; ++i) {
        if (ticks(i) <= 0.0) continue;
        double off = 0.0;
        for (Index j = 0; j < r; ++j)
            if (j != i) {
                delta(i, j) = counts(i, j) / ticks(i);
                off += delta(i, j);
            }
        delta(i, i) = 1.0 - off;
    }
    return delta;
}

// ---------------------------------------------------------------------------
// Cut-point search

struct CutSearchResult {
    std::vector<SegmentBounds> segments; // relative to the searched sequence
    std::vector<int> assignment;         // 0 = first regime, 1 = second

    std::vector<Index> cut_points() const { return cut_points_of(segments); }
    bool operator==(const CutSearchResult&) const = default;
};

/// Viterbi decoding over the union of both regimes' states. Moving between
/// the two state blocks costs the regime switch probability and re-enters the
/// target regime through its initial distribution. Cuts are placed where the
/// decoded path changes block.
inline CutSearchResult cut_point_search(const SeqRef& seq, const HmmParams& a, const HmmParams& b,
                                        const Eigen::Matrix2d& delta) {
    if (a.dim() != b.dim() || seq.cols() != a.dim()) throw ShapeError("cut-point search: dimension mismatch");
    if (seq.rows() < 1) throw ShapeError("cut-point search needs at least one tick");
    const Index ka = a.states(), kb = b.states(), k = ka + kb;
    HmmParams aug;
    aug.pi.resize(k);
    aug.pi << 0.5 * a.pi, 0.5 * b.pi;
    aug.A = Eigen::MatrixXd::Zero(k, k);
    aug.A.topLeftCorner(ka, ka) = delta(0, 0) * a.A;
    aug.A.topRightCorner(ka, kb) = delta(0, 1) * Eigen::VectorXd::Ones(ka) * b.pi.transpose();
    aug.A.bottomLeftCorner(kb, ka) = delta(1, 0) * Eigen::VectorXd::Ones(kb) * a.pi.transpose();
    aug.A.bottomRightCorner(kb, kb) = delta(1, 1) * b.A;
    aug.means.resize(k, a.dim());
    aug.means << a.means, b.means;
    aug.vars.resize(k, a.dim());
    aug.vars << a.vars, b.vars;

    const auto path = viterbi(seq, aug);
    CutSearchResult out;
    int current = -1;
    for (Index t = 0; t < seq.rows(); ++t) {
        const int block = path.states[static_cast<std::size_t>(t)] < ka ? 0 : 1;
        if (block != current) {
            out.segments.push_back({t, 0});
            out.assignment.push_back(block);
            current = block;
        }
        out.segments.back().length += 1;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Top-down regime splitting

struct SegmenterOptions {
    double alpha = 0.1;
    Index states = 4;
    double switch_prob = 0.01;
    int refine_iterations = 5;
    int max_regimes = 32;
    Index polish_shift = 8;   // cut moves tried per side under fixed parameters
    Index refit_shift = 2;    // cut moves tried per side with regime refits
    long long refit_work = 200'000; // EM tick-iterations per refit-scored descent
    int refit_iterations = 10;
    BaumWelchOptions baum_welch{};
};

struct SegmentationResult {
    Segmentation segmentation;
    RegimeSet regimes;
    CostBreakdown cost;
};

namespace detail {

inline std::vector<SeqRef> views(const Eigen::MatrixXd& series, const std::vector<SegmentBounds>& pieces) {
    std::vector<SeqRef> out;
    out.reserve(pieces.size());
    for (const auto& p : pieces) out.emplace_back(series.middleRows(p.begin, p.length));
    return out;
}

inline Index ticks_in(const std::vector<SegmentBounds>& pieces) {
    Index n = 0;
    for (const auto& p : pieces) n += p.length;
    return n;
}

/// Two-way split of the given pieces by 2-means on their ticks, returned as
/// contiguous runs per cluster.
inline std::pair<std::vector<SegmentBounds>, std::vector<SegmentBounds>>
two_means_runs(const Eigen::MatrixXd& series, const std::vector<SegmentBounds>& pieces, Rng rng) {
    const Index d = series.cols();
    std::vector<Index> ticks;
    for (const auto& p : pieces)
        for (Index t = p.begin; t < p.end(); ++t) ticks.push_back(t);
    const auto n = static_cast<Index>(ticks.size());
    Eigen::MatrixXd centers(2, d);
    centers.row(0) = series.row(ticks[static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(n)))]);
    {
        Eigen::VectorXd dist(n);
        for (Index i = 0; i < n; ++i) dist(i) = (series.row(ticks[static_cast<std::size_t>(i)]) - centers.row(0)).squaredNorm();
        const double total = dist.sum();
        Index pick = 0;
        if (total > 0.0) {
            double target = rng.uniform() * total;
            for (pick = 0; pick < n - 1; ++pick) {
                target -= dist(pick);
                if (target < 0.0) break;
            }
        }
        centers.row(1) = series.row(ticks[static_cast<std::size_t>(pick)]);
    }
    std::vector<int> label(static_cast<std::size_t>(n), 0);
    for (int iter = 0; iter < 20; ++iter) {
        bool changed = false;
        Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(2, d);
        Eigen::Vector2d counts = Eigen::Vector2d::Zero();
        for (Index i = 0; i < n; ++i) {
            const auto row = series.row(ticks[static_cast<std::size_t>(i)]);
            const int c = (row - centers.row(1)).squaredNorm() < (row - centers.row(0)).squaredNorm() ? 1 : 0;
            if (c != label[static_cast<std::size_t>(i)]) changed = true;
            label[static_cast<std::size_t>(i)] = c;
            sums.row(c) += row;
            counts(c) += 1.0;
        }
        for (int c = 0; c < 2; ++c)
            if (counts(c) > 0) centers.row(c) = sums.row(c) / counts(c);
        if (!changed && iter > 0) break;
    }
    std::pair<std::vector<SegmentBounds>, std::vector<SegmentBounds>> runs;
    std::size_t i = 0;
    for (const auto& p : pieces) {
        Index t = p.begin;
        while (t < p.end()) {
            const int c = label[i];
            const Index start = t;
            while (t < p.end() && label[i] == c) ++t, ++i;
            (c == 0 ? runs.first : runs.second).push_back({start, t - start});
        }
    }
    return runs;
}

} // namespace detail

/// Fits one regime per distinct assignment id to its segments, estimates the
/// regime transitions, and scores the result.
inline SegmentationResult fit_regimes(const Eigen::MatrixXd& series, std::vector<Segment> segments, Index r,
                                      const SegmenterOptions& opt) {
    SegmentationResult res;
    res.regimes.regimes.resize(static_cast<std::size_t>(r));
    for (Index id = 0; id < r; ++id) {
        std::vector<SegmentBounds> pieces;
        for (const auto& s : segments)
            if (s.regime == id) pieces.push_back(s.bounds());
        res.regimes.regimes[static_cast<std::size_t>(id)] =
            baum_welch_fit(detail::views(series, pieces), opt.states, opt.baum_welch);
    }
    res.regimes.delta = estimate_regime_transitions(segments, r);
    res.segmentation.segments = std::move(segments);
    res.cost = mdl_cost_breakdown(series, res.regimes, res.segmentation, opt.alpha);
    res.segmentation.total_cost = res.cost.total;
    return res;
}

namespace detail {

/// Cost of one segment under a fixed regime set, in bits.
inline double segment_bits(const Eigen::MatrixXd& series, const RegimeSet& regimes, Index begin, Index length,
                           int regime) {
    return log_star(static_cast<double>(length)) + std::log2(static_cast<double>(regimes.size())) -
           hmm_forward_loglik(series.middleRows(begin, length), regimes.regimes[static_cast<std::size_t>(regime)]) /
               std::numbers::ln2;
}

/// Greedy descent with the regime parameters held fixed: reassigns segments,
/// shifts cuts by up to max_shift ticks and removes cuts, keeping every move
/// that lowers the cost. Returns whether anything changed.
inline bool polish_cuts(const Eigen::MatrixXd& series, const RegimeSet& regimes, std::vector<Segment>& segs,
                        Index max_shift, const std::vector<char>& active = {}) {
    constexpr double eps = 1e-9;
    const int r = static_cast<int>(regimes.size());
    auto bits = [&](Index b, Index l, int g) { return segment_bits(series, regimes, b, l, g); };
    auto is_active = [&](int g) { return active.empty() || active[static_cast<std::size_t>(g)]; };
    bool changed = false;
    for (int round = 0; round < 100; ++round) {
        bool improved = false;
        for (auto& s : segs) {
            if (!is_active(s.regime)) continue;
            double cur = bits(s.begin, s.length, s.regime);
            for (int g = 0; g < r; ++g) {
                if (g == s.regime) continue;
                const double c = bits(s.begin, s.length, g);
                if (c < cur - eps) {
                    s.regime = g;
                    cur = c;
                    improved = true;
                }
            }
        }
        for (std::size_t i = 0; i + 1 < segs.size();) {
            Segment& L = segs[i];
            Segment& R = segs[i + 1];
            if (!is_active(L.regime) && !is_active(R.regime)) {
                ++i;
                continue;
            }
            // One forward pass under L's regime and one backward pass under
            // R's regime over both segments score every shift and merge.
            const auto both = series.middleRows(L.begin, L.length + R.length);
            const Eigen::VectorXd pre = prefix_logliks(both, regimes.regimes[static_cast<std::size_t>(L.regime)]);
            const Eigen::VectorXd suf = suffix_logliks(both, regimes.regimes[static_cast<std::size_t>(R.regime)]);
            const double log2r = std::log2(static_cast<double>(r));
            auto pair_bits = [&](Index left) {
                return log_star(static_cast<double>(left)) + log_star(static_cast<double>(L.length + R.length - left)) +
                       2.0 * log2r - (pre(left - 1) + suf(left)) / std::numbers::ln2;
            };
            const double base = pair_bits(L.length);
            double best = base;
            Index best_shift = 0;
            int merge_regime = -1;
            for (Index d = -max_shift; d <= max_shift; ++d) {
                if (d == 0 || L.length + d < 1 || R.length - d < 1) continue;
                const double c = pair_bits(L.length + d);
                if (c < best - eps) {
                    best = c;
                    best_shift = d;
                }
            }
            const Index total = L.length + R.length;
            const double merged_l = log_star(static_cast<double>(total)) + log2r - pre(total - 1) / std::numbers::ln2;
            const double merged_r = log_star(static_cast<double>(total)) + log2r - suf(0) / std::numbers::ln2;
            if (merged_l < best - eps) {
                best = merged_l;
                merge_regime = L.regime;
            }
            if (merged_r < best - eps) {
                best = merged_r;
                merge_regime = R.regime;
            }
            if (merge_regime >= 0) {
                L.length = total;
                L.regime = merge_regime;
                segs.erase(segs.begin() + static_cast<std::ptrdiff_t>(i) + 1);
                improved = true;
                continue;
            }
            if (best_shift != 0) {
                L.length += best_shift;
                R.begin += best_shift;
                R.length -= best_shift;
                improved = true;
            }
            ++i;
        }
        if (!improved) break;
        changed = true;
    }
    return changed;
}

/// Drops regimes no segment uses and renumbers the rest in order.
inline SegmentationResult compact_and_score(const Eigen::MatrixXd& series, const RegimeSet& regimes,
                                            std::vector<Segment> segs, double alpha,
                                            std::vector<int>* remap_out = nullptr) {
    std::vector<int> remap(static_cast<std::size_t>(regimes.size()), -1);
    SegmentationResult res;
    for (auto& s : segs) {
        auto& id = remap[static_cast<std::size_t>(s.regime)];
        if (id < 0) {
            id = static_cast<int>(res.regimes.regimes.size());
            res.regimes.regimes.push_back(regimes.regimes[static_cast<std::size_t>(s.regime)]);
        }
        s.regime = id;
    }
    res.regimes.delta = estimate_regime_transitions(segs, res.regimes.size());
    res.segmentation.segments = std::move(segs);
    res.cost = mdl_cost_breakdown(series, res.regimes, res.segmentation, alpha);
    res.segmentation.total_cost = res.cost.total;
    if (remap_out) *remap_out = std::move(remap);
    return res;
}

/// Cut moves scored after re-fitting the affected regimes with a few EM
/// iterations started from their current parameters, so a move is credited
/// with the better fit it enables. Stops after opt.refit_work evaluations.
inline SegmentationResult refit_descent(const Eigen::MatrixXd& series, SegmentationResult res,
                                        const SegmenterOptions& opt) {
    constexpr double eps = 1e-9;
    long long budget = opt.refit_work;
    // Likelihoods of the current segments; a candidate only re-scores the
    // segments of the regimes it refits.
    std::map<std::tuple<Index, Index, int>, double> cached;
    auto rebuild_cache = [&] {
        cached.clear();
        for (const auto& s : res.segmentation.segments)
            cached[{s.begin, s.length, s.regime}] =
                hmm_forward_loglik(series.middleRows(s.begin, s.length), res.regimes.regimes[static_cast<std::size_t>(s.regime)]);
    };
    rebuild_cache();
    struct Candidate {
        std::vector<Segment> segs;
        RegimeSet regimes;
        double cost;
    };
    auto evaluate = [&](std::vector<Segment> segs, std::initializer_list<int> touched) -> std::optional<Candidate> {
        budget -= static_cast<long long>(segs.size()); // bookkeeping over all segments
        Candidate cand{std::move(segs), res.regimes, 0.0};
        std::vector<char> refit(static_cast<std::size_t>(res.regimes.size()), 0);
        for (int g : touched) {
            if (refit[static_cast<std::size_t>(g)]) continue;
            refit[static_cast<std::size_t>(g)] = 1;
            std::vector<SegmentBounds> pieces;
            for (const auto& s : cand.segs)
                if (s.regime == g) pieces.push_back(s.bounds());
            if (pieces.empty()) continue;
            const Index ticks = ticks_in(pieces);
            if (ticks < opt.states) return std::nullopt;
            // Per-sequence overhead in EM is worth roughly 16 ticks.
            budget -= static_cast<long long>(ticks + 16 * static_cast<Index>(pieces.size())) * opt.refit_iterations;
            BaumWelchOptions bw = opt.baum_welch;
            bw.init = &res.regimes.regimes[static_cast<std::size_t>(g)];
            bw.max_iterations = opt.refit_iterations;
            bw.trace = nullptr;
            try {
                cand.regimes.regimes[static_cast<std::size_t>(g)] = baum_welch_fit(views(series, pieces), opt.states, bw);
            } catch (const NumericError&) {
                return std::nullopt; // the warm start cannot explain the moved ticks
            }
        }
        std::vector<char> used(refit.size(), 0);
        for (const auto& s : cand.segs) used[static_cast<std::size_t>(s.regime)] = 1;
        Index r = 0, floats = 0;
        for (std::size_t g = 0; g < used.size(); ++g)
            if (used[g]) {
                ++r;
                floats += cand.regimes.regimes[g].free_parameters();
            }
        floats += r * (r - 1);
        double bits = opt.alpha * kBitsPerFloat * static_cast<double>(floats);
        for (const auto& s : cand.segs) {
            double ll;
            const auto hit = refit[static_cast<std::size_t>(s.regime)] ? cached.end() : cached.find({s.begin, s.length, s.regime});
            if (hit != cached.end()) {
                ll = hit->second;
            } else {
                ll = hmm_forward_loglik(series.middleRows(s.begin, s.length),
                                        cand.regimes.regimes[static_cast<std::size_t>(s.regime)]);
            }
            bits += log_star(static_cast<double>(s.length)) + std::log2(static_cast<double>(r)) - ll / std::numbers::ln2;
        }
        cand.cost = bits;
        return cand;
    };
    auto accept = [&](std::optional<Candidate> cand) {
        if (!cand || !(cand->cost < res.cost.total - eps)) return false;
        res = compact_and_score(series, cand->regimes, std::move(cand->segs), opt.alpha);
        rebuild_cache();
        return true;
    };
    bool improved = true;
    while (improved && budget > 0) {
        improved = false;
        for (std::size_t i = 0; i + 1 < res.segmentation.segments.size() && budget > 0; ++i) {
            const auto segs = res.segmentation.segments;
            const Segment L = segs[i], R = segs[i + 1];
            for (Index d = -opt.refit_shift; d <= opt.refit_shift && budget > 0; ++d) {
                if (d == 0 || L.length + d < 1 || R.length - d < 1) continue;
                auto moved = segs;
                moved[i].length += d;
                moved[i + 1].begin += d;
                moved[i + 1].length -= d;
                if (accept(evaluate(std::move(moved), {L.regime, R.regime}))) {
                    improved = true;
                    break;
                }
            }
            if (improved) continue;
            for (int g : {L.regime, R.regime}) {
                if (budget <= 0) break;
                auto merged = segs;
                merged[i] = {L.begin, L.length + R.length, g};
                merged.erase(merged.begin() + static_cast<std::ptrdiff_t>(i) + 1);
                if (accept(evaluate(std::move(merged), {L.regime, R.regime}))) {
                    improved = true;
                    break;
                }
            }
        }
        for (std::size_t i = 0; i < res.segmentation.segments.size() && budget > 0; ++i)
            for (int g = 0; g < static_cast<int>(res.regimes.size()) && budget > 0; ++g) {
                const int old = res.segmentation.segments[i].regime;
                if (g == old) continue;
                auto moved = res.segmentation.segments;
                moved[i].regime = g;
                if (accept(evaluate(std::move(moved), {old, g}))) {
                    improved = true;
                    break;
                }
            }
        // Carve a short run off either end of a segment into another regime.
        for (std::size_t i = 0; i < res.segmentation.segments.size() && budget > 0; ++i) {
            const Segment S = res.segmentation.segments[i];
            bool done = false;
            for (Index m = 1; m <= opt.refit_shift && m < S.length && !done; ++m)
                for (int head = 0; head < 2 && !done; ++head)
                    for (int g = 0; g < static_cast<int>(res.regimes.size()) && budget > 0 && !done; ++g) {
                        if (g == S.regime) continue;
                        auto moved = res.segmentation.segments;
                        const auto at = moved.begin() + static_cast<std::ptrdiff_t>(i);
                        if (head) {
                            *at = {S.begin + m, S.length - m, S.regime};
                            moved.insert(at, Segment{S.begin, m, g});
                        } else {
                            *at = {S.begin, S.length - m, S.regime};
                            moved.insert(at + 1, Segment{S.end() - m, m, g});
                        }
                        done = accept(evaluate(std::move(moved), {S.regime, g}));
                    }
            if (done) improved = true;
        }
    }
    return res;
}

inline std::vector<std::vector<SegmentBounds>> pieces_by_regime(const SegmentationResult& res) {
    std::vector<std::vector<SegmentBounds>> out(static_cast<std::size_t>(res.regimes.size()));
    for (const auto& s : res.segmentation.segments) out[static_cast<std::size_t>(s.regime)].push_back(s.bounds());
    return out;
}

/// Alternates cut polishing under fixed parameters with refits of the
/// regimes whose segments changed, keeping whichever solution is cheaper,
/// then optionally finishes with the refit-scored descent. When `active` is
/// non-empty only cuts touching those regimes are polished.
inline SegmentationResult polish(const Eigen::MatrixXd& series, SegmentationResult res, const SegmenterOptions& opt,
                                 bool refit_moves = true, std::vector<char> active = {}) {
    for (int round = 0; opt.polish_shift > 0 && round < 5; ++round) {
        auto segs = res.segmentation.segments;
        if (!polish_cuts(series, res.regimes, segs, opt.polish_shift, active)) break;
        std::vector<int> remap;
        auto fixed = compact_and_score(series, res.regimes, std::move(segs), opt.alpha, &remap);
        const auto before = pieces_by_regime(res);
        const auto after = pieces_by_regime(fixed);
        std::vector<char> next_active(static_cast<std::size_t>(fixed.regimes.size()), active.empty() ? 1 : 0);
        RegimeSet refit = fixed.regimes;
        bool changed = false, fittable = true;
        for (std::size_t old = 0; old < remap.size(); ++old) {
            if (remap[old] < 0) continue;
            const auto g = static_cast<std::size_t>(remap[old]);
            if (!active.empty()) next_active[g] = active[old];
            if (after[g] == before[old]) continue;
            if (ticks_in(after[g]) < opt.states) {
                fittable = false;
                break;
            }
            refit.regimes[g] = baum_welch_fit(views(series, after[g]), opt.states, opt.baum_welch);
            changed = true;
        }
        active = std::move(next_active);
        if (fittable && changed) {
            auto refitted = compact_and_score(series, refit, fixed.segmentation.segments, opt.alpha);
            res = refitted.cost.total < fixed.cost.total ? std::move(refitted) : std::move(fixed);
        } else {
            res = std::move(fixed);
        }
    }
    if (refit_moves && opt.refit_work > 0) res = refit_descent(series, std::move(res), opt);
    return res;
}

/// Two-way split initialized from the best single Gaussian excursion: one
/// interval [c1, c2) inside one piece against all remaining ticks, scored
/// in bits with diagonal maximum-likelihood Gaussians plus the code length
/// of the pieces the excursion creates. Cut positions
/// are searched on a grid of at most ~256 steps per piece.
inline std::optional<std::pair<std::vector<SegmentBounds>, std::vector<SegmentBounds>>>
excursion_runs(const Eigen::MatrixXd& series, const std::vector<SegmentBounds>& pieces, Index min_side,
               double variance_floor) {
    const Index d = series.cols();
    Eigen::RowVectorXd tot_s = Eigen::RowVectorXd::Zero(d), tot_q = Eigen::RowVectorXd::Zero(d);
    Index n = 0;
    for (const auto& p : pieces) {
        tot_s += series.middleRows(p.begin, p.length).colwise().sum();
        tot_q += series.middleRows(p.begin, p.length).array().square().matrix().colwise().sum();
        n += p.length;
    }
    auto side_cost = [&](const Eigen::RowVectorXd& s, const Eigen::RowVectorXd& q, Index m) {
        const Eigen::ArrayXXd mean = s.array() / static_cast<double>(m);
        const Eigen::ArrayXXd var = (q.array() / static_cast<double>(m) - mean.square()).max(variance_floor);
        return 0.5 * static_cast<double>(m) * var.log().sum();
    };
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_piece = 0;
    Index best_c1 = 0, best_c2 = 0;
    for (std::size_t pi = 0; pi < pieces.size(); ++pi) {
        const auto& p = pieces[pi];
        const Index step = std::max<Index>(1, p.length / 256);
        std::vector<Index> grid;
        for (Index c = 0; c < p.length; c += step) grid.push_back(c);
        grid.push_back(p.length);
        Eigen::MatrixXd ps(static_cast<Index>(grid.size()), d), pq(static_cast<Index>(grid.size()), d);
        for (std::size_t g = 0; g < grid.size(); ++g) {
            const Index c = grid[g];
            ps.row(static_cast<Index>(g)) = series.middleRows(p.begin, c).colwise().sum();
            pq.row(static_cast<Index>(g)) = series.middleRows(p.begin, c).array().square().matrix().colwise().sum();
        }
        for (std::size_t i = 0; i < grid.size(); ++i)
            for (std::size_t j = i + 1; j < grid.size(); ++j) {
                const Index m = grid[j] - grid[i];
                if (m < min_side || n - m < min_side) continue;
                const Eigen::RowVectorXd bs = ps.row(static_cast<Index>(j)) - ps.row(static_cast<Index>(i));
                const Eigen::RowVectorXd bq = pq.row(static_cast<Index>(j)) - pq.row(static_cast<Index>(i));
                const Index c1 = grid[i], c2 = grid[j];
                double assign = log_star(static_cast<double>(m)) + 1.0;
                if (c1 > 0) assign += log_star(static_cast<double>(c1)) + 1.0;
                if (c2 < p.length) assign += log_star(static_cast<double>(p.length - c2)) + 1.0;
                const double c = (side_cost(bs, bq, m) + side_cost(tot_s - bs, tot_q - bq, n - m)) /
                                     std::numbers::ln2 + assign;
                if (c < best) {
                    best = c;
                    best_piece = pi;
                    best_c1 = grid[i];
                    best_c2 = grid[j];
                }
            }
    }
    if (!std::isfinite(best)) return std::nullopt;
    std::pair<std::vector<SegmentBounds>, std::vector<SegmentBounds>> runs;
    for (std::size_t pi = 0; pi < pieces.size(); ++pi) {
        const auto& p = pieces[pi];
        if (pi != best_piece) {
            runs.first.push_back(p);
            continue;
        }
        if (best_c1 > 0) runs.first.push_back({p.begin, best_c1});
        runs.second.push_back({p.begin + best_c1, best_c2 - best_c1});
        if (best_c2 < p.length) runs.first.push_back({p.begin + best_c2, p.length - best_c2});
    }
    return runs;
}

/// Alternates cut-point search over the target regime's segments with
/// refits of both halves, starting from the given two-way assignment.
inline std::optional<SegmentationResult> refine_split(const Eigen::MatrixXd& series, const SegmentationResult& cur,
                                                      int target, const std::vector<SegmentBounds>& pieces,
                                                      const std::vector<SegmentBounds>& runs_a,
                                                      const std::vector<SegmentBounds>& runs_b,
                                                      const SegmenterOptions& opt) {
    const Index k = opt.states;
    if (ticks_in(runs_a) < k || ticks_in(runs_b) < k) return std::nullopt;
    HmmParams theta_a = baum_welch_fit(views(series, runs_a), k, opt.baum_welch);
    HmmParams theta_b = baum_welch_fit(views(series, runs_b), k, opt.baum_welch);
    Eigen::Matrix2d delta;
    delta << 1.0 - opt.switch_prob, opt.switch_prob, opt.switch_prob, 1.0 - opt.switch_prob;

    // Per original piece: its decoded sub-pieces with side 0/1.
    std::vector<CutSearchResult> decoded, previous;
    for (int it = 0; it < std::max(1, opt.refine_iterations); ++it) {
        decoded.clear();
        std::vector<SegmentBounds> side_a, side_b;
        for (const auto& p : pieces) {
            auto res = cut_point_search(series.middleRows(p.begin, p.length), theta_a, theta_b, delta);
            for (std::size_t j = 0; j < res.segments.size(); ++j) {
                res.segments[j].begin += p.begin;
                (res.assignment[j] == 0 ? side_a : side_b).push_back(res.segments[j]);
            }
            decoded.push_back(std::move(res));
        }
        if (ticks_in(side_a) < k || ticks_in(side_b) < k) return std::nullopt;
        theta_a = baum_welch_fit(views(series, side_a), k, opt.baum_welch);
        theta_b = baum_welch_fit(views(series, side_b), k, opt.baum_welch);

        double ta = 0.0, tb = 0.0, sab = 0.0, sba = 0.0;
        for (const auto& res : decoded)
            for (std::size_t j = 0; j < res.segments.size(); ++j) {
                (res.assignment[j] == 0 ? ta : tb) += static_cast<double>(res.segments[j].length);
                if (j + 1 < res.segments.size()) (res.assignment[j] == 0 ? sab : sba) += 1.0;
            }
        const double pa = std::clamp(sab / ta, 1e-4, 0.5);
        const double pb = std::clamp(sba / tb, 1e-4, 0.5);
        delta << 1.0 - pa, pa, pb, 1.0 - pb;
        if (decoded == previous) break;
        previous = decoded;
    }

    const int new_id = static_cast<int>(cur.regimes.size());
    std::vector<Segment> segments;
    std::size_t piece = 0;
    for (const auto& s : cur.segmentation.segments) {
        if (s.regime != target) {
            segments.push_back(s);
            continue;
        }
        const auto& res = decoded[piece++];
        for (std::size_t j = 0; j < res.segments.size(); ++j)
            segments.push_back({res.segments[j].begin, res.segments[j].length,
                                res.assignment[j] == 0 ? target : new_id});
    }

    SegmentationResult next;
    next.regimes.regimes = cur.regimes.regimes;
    next.regimes.regimes[static_cast<std::size_t>(target)] = std::move(theta_a);
    next.regimes.regimes.push_back(std::move(theta_b));
    next.regimes.delta = estimate_regime_transitions(segments, next.regimes.size());
    next.segmentation.segments = std::move(segments);
    next.cost = mdl_cost_breakdown(series, next.regimes, next.segmentation, opt.alpha);
    next.segmentation.total_cost = next.cost.total;
    return next;
}

/// Attempts to split one regime in two from two initializations (2-means on
/// tick values, best Gaussian excursion), refines and polishes each, and
/// returns the cheaper candidate. Returns nothing when neither yields two
/// sides large enough to fit.
inline std::optional<SegmentationResult> try_split(const Eigen::MatrixXd& series, const SegmentationResult& cur,
                                                   int target, const SegmenterOptions& opt) {
    const Index k = opt.states;
    std::vector<SegmentBounds> pieces;
    for (const auto& s : cur.segmentation.segments)
        if (s.regime == target) pieces.push_back(s.bounds());
    if (ticks_in(pieces) < 2 * k) return std::nullopt;

    std::optional<SegmentationResult> best;
    auto consider = [&](const std::vector<SegmentBounds>& a, const std::vector<SegmentBounds>& b) {
        auto cand = refine_split(series, cur, target, pieces, a, b, opt);
        if (!cand) return;
        std::vector<char> active(static_cast<std::size_t>(cand->regimes.size()), 0);
        active[static_cast<std::size_t>(target)] = 1;
        if (!active.empty()) active.back() = 1;
        cand = polish(series, std::move(*cand), opt, false, std::move(active));
        if (!best || cand->cost.total < best->cost.total) best = std::move(cand);
    };
    const Rng rng = Rng(opt.baum_welch.seed).child("split", static_cast<std::uint64_t>(target));
    const auto [runs_a, runs_b] = two_means_runs(series, pieces, rng);
    consider(runs_a, runs_b);
    if (const auto exc = excursion_runs(series, pieces, std::max<Index>(k, 2), opt.baum_welch.variance_floor))
        consider(exc->first, exc->second);
    // With one state per regime a single tick can form its own regime; the
    // closed-form score then favours it outright, so it is tried separately.
    if (k == 1)
        if (const auto exc = excursion_runs(series, pieces, 1, opt.baum_welch.variance_floor))
            consider(exc->first, exc->second);
    if (best && opt.refit_work > 0) best = refit_descent(series, std::move(*best), opt);
    return best;
}

} // namespace detail

/// Starts from one regime over the whole series and repeatedly tries to split
/// regimes, costliest first. A split is kept only if it strictly lowers the
/// total description length; the search stops when no regime can be split
/// profitably.
inline SegmentationResult segment_series(const Eigen::MatrixXd& series, const SegmenterOptions& opt = {}) {
    const Index T = series.rows();
    if (T < 4) throw ShapeError("segmentation needs at least 4 ticks");
    if (!series.allFinite()) throw NumericError("segmentation input contains non-finite values");
    if (opt.states < 1) throw ConfigError("HMM states per regime must be at least 1");
    if (T < opt.states) throw ShapeError("series shorter than the number of HMM states");

    SegmentationResult cur = detail::polish(series, fit_regimes(series, {Segment{0, T, 0}}, 1, opt), opt);
    while (cur.regimes.size() < opt.max_regimes) {
        std::vector<double> like(static_cast<std::size_t>(cur.regimes.size()), 0.0);
        for (const auto& s : cur.segmentation.segments)
            like[static_cast<std::size_t>(s.regime)] -=
                hmm_forward_loglik(series.middleRows(s.begin, s.length),
                                   cur.regimes.regimes[static_cast<std::size_t>(s.regime)]);
        std::vector<int> order(like.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int x, int y) { return like[static_cast<std::size_t>(x)] > like[static_cast<std::size_t>(y)]; });

        bool accepted = false;
        for (int target : order) {
            auto candidate = detail::try_split(series, cur, target, opt);
            if (candidate && candidate->cost.total < cur.cost.total) {
                cur = std::move(*candidate);
                accepted = true;
                break;
            }
        }
        if (!accepted) break;
    }
    if (cur.regimes.size() > 1) cur = detail::polish(series, std::move(cur), opt);
    return cur;
}

inline SegmentationResult segment_series(const Eigen::MatrixXd& series, double alpha) {
    SegmenterOptions opt;
    opt.alpha = alpha;
    return segment_series(series, opt);
}

// ---------------------------------------------------------------------------
// Text export: "# T=<T> r=<r> alpha=<a> cost_bits=<c>" then "rho,l,regime_id".

inline void write_segmentation(std::ostream& out, const Segmentation& seg, Index T, Index r, double alpha) {
    out << "# T=" << T << " r=" << r << " alpha=" << format_double(alpha)
        << " cost_bits=" << format_double(seg.total_cost) << '\n';
    for (const auto& s : seg.segments) out << s.begin << ',' << s.length << ',' << s.regime << '\n';
}

inline void write_segmentation(const std::string& path, const Segmentation& seg, Index T, Index r, double alpha) {
    std::ofstream out(path);
    if (!out) throw ParseError("cannot write " + path);
    write_segmentation(out, seg, T, r, alpha);
}

struct SegmentationFile {
    Index T = 0;
    Index r = 0;
    double alpha = 0.0;
    Segmentation segmentation;
};

inline SegmentationFile read_segmentation(std::istream& in) {
    SegmentationFile f;
    std::string line;
    if (!std::getline(in, line) || line.rfind("# ", 0) != 0) throw ParseError("segmentation file: missing header");
    std::istringstream hs(line.substr(2));
    std::string field;
    while (hs >> field) {
        const auto eq = field.find('=');
        if (eq == std::string::npos) throw ParseError("segmentation header: bad field '" + field + "'");
        const auto key = field.substr(0, eq), value = field.substr(eq + 1);
        if (key == "T") f.T = parse_int(value, key);
        else if (key == "r") f.r = parse_int(value, key);
        else if (key == "alpha") f.alpha = parse_double(value, key);
        else if (key == "cost_bits") f.segmentation.total_cost = parse_double(value, key);
        else throw ParseError("segmentation header: unknown field '" + key + "'");
    }
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        const auto cells = split(line, ',');
        if (cells.size() != 3) throw ParseError("segmentation file: expected rho,l,regime_id");
        f.segmentation.segments.push_back({parse_int(cells[0], "rho"), parse_int(cells[1], "l"),
                                           static_cast<int>(parse_int(cells[2], "regime_id"))});
    }
    f.segmentation.validate(f.T, f.r);
    return f;
}

} // namespace missgan
