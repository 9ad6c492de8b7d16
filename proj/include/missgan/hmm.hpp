#pragma once

// Hidden Markov models with diagonal Gaussian emissions: scaled forward
// likelihood, Viterbi decoding and multi-sequence Baum-Welch.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "missgan/error.hpp"
#include "missgan/rng.hpp"

namespace missgan {

using Index = Eigen::Index;
using SeqRef = Eigen::Ref<const Eigen::MatrixXd>;

inline constexpr double kVarianceFloor = 1e-6;

struct HmmParams {
    Eigen::VectorXd pi;     // k
    Eigen::MatrixXd A;      // k x k, rows sum to 1
    Eigen::MatrixXd means;  // k x d
    Eigen::MatrixXd vars;   // k x d

    Index states() const { return pi.size(); }
    Index dim() const { return means.cols(); }

    /// Free parameters: (k-1) initial + k(k-1) transition + 2kd emission.
    Index free_parameters() const {
        const Index k = states();
        return (k - 1) + k * (k - 1) + 2 * k * dim();
    }

    void validate(double tol = 1e-9) const {
        const Index k = states();
        if (k < 1 || A.rows() != k || A.cols() != k || means.rows() != k || vars.rows() != k ||
            vars.cols() != means.cols())
            throw ShapeError("HMM parameter shapes are inconsistent");
        if (std::abs(pi.sum() - 1.0) > tol || (pi.array() < 0.0).any())
            throw NumericError("HMM initial distribution is not a probability vector");
        for (Index i = 0; i < k; ++i)
            if (std::abs(A.row(i).sum() - 1.0) > tol || (A.row(i).array() < 0.0).any())
                throw NumericError("HMM transition row " + std::to_string(i) + " is not a distribution");
        if ((vars.array() < kVarianceFloor * (1.0 - 1e-12)).any()) throw NumericError("HMM variance below floor");
    }

    bool operator==(const HmmParams& o) const {
        return pi.size() == o.pi.size() && means.cols() == o.means.cols() && pi == o.pi && A == o.A &&
               means == o.means && vars == o.vars;
    }
};

/// l x k matrix of log emission densities.
inline Eigen::MatrixXd log_emissions(const SeqRef& seq, const HmmParams& hmm) {
    if (seq.cols() != hmm.dim())
        throw ShapeError("sequence has " + std::to_string(seq.cols()) + " dims, HMM expects " +
                         std::to_string(hmm.dim()));
    const Index l = seq.rows();
    const Index k = hmm.states();
    const double log_2pi = std::log(2.0 * std::numbers::pi);
    Eigen::MatrixXd out(l, k);
    for (Index j = 0; j < k; ++j) {
        const double norm = -0.5 * (hmm.vars.row(j).array().log().sum() + static_cast<double>(hmm.dim()) * log_2pi);
        auto col = out.col(j).array();
        col.setConstant(norm);
        for (Index m = 0; m < seq.cols(); ++m)
            col -= (0.5 / hmm.vars(j, m)) * (seq.col(m).array() - hmm.means(j, m)).square();
    }
    return out;
}

namespace detail {

/// Emissions rescaled per tick by their max: b(t,j) = exp(logB(t,j) - shift(t)).
struct ScaledEmissions {
    Eigen::MatrixXd b;
    Eigen::VectorXd shift;
};

inline ScaledEmissions scaled_emissions(const SeqRef& seq, const HmmParams& hmm) {
    ScaledEmissions e;
    const Eigen::MatrixXd logb = log_emissions(seq, hmm);
    e.shift = logb.rowwise().maxCoeff();
    e.b = (logb.colwise() - e.shift).array().exp().matrix();
    return e;
}

/// Scaled forward pass; alpha rows sum to 1, c(t) are the scale factors.
/// Returns the log-likelihood, -inf if the sequence is impossible.
inline double forward_scaled(const ScaledEmissions& e, const HmmParams& hmm, Eigen::MatrixXd* alpha_out,
                             Eigen::VectorXd* scale_out, Eigen::VectorXd* prefix_out = nullptr) {
    const Index l = e.b.rows();
    const Index k = hmm.states();
    Eigen::MatrixXd alpha(alpha_out ? l : 0, k);
    Eigen::VectorXd c(scale_out ? l : 0);
    if (prefix_out) prefix_out->setConstant(l, -std::numeric_limits<double>::infinity());
    std::vector<double> prev(static_cast<std::size_t>(k)), cur(static_cast<std::size_t>(k));
    const double* A = hmm.A.data(); // column-major: A(i, j) = A[i + j * k]
    double ll = 0.0;
    for (Index t = 0; t < l; ++t) {
        double sum = 0.0;
        for (Index j = 0; j < k; ++j) {
            double v;
            if (t == 0) {
                v = hmm.pi(j);
            } else {
                v = 0.0;
                const double* col = A + j * k;
                for (Index i = 0; i < k; ++i) v += prev[static_cast<std::size_t>(i)] * col[i];
            }
            v *= e.b(t, j);
            cur[static_cast<std::size_t>(j)] = v;
            sum += v;
        }
        if (!(sum > 0.0)) return -std::numeric_limits<double>::infinity();
        const double inv = 1.0 / sum;
        for (Index j = 0; j < k; ++j) prev[static_cast<std::size_t>(j)] = cur[static_cast<std::size_t>(j)] * inv;
        if (alpha_out)
            for (Index j = 0; j < k; ++j) alpha(t, j) = prev[static_cast<std::size_t>(j)];
        if (scale_out) c(t) = sum;
        ll += std::log(sum) + e.shift(t);
        if (prefix_out) (*prefix_out)(t) = ll;
    }
    if (alpha_out) *alpha_out = std::move(alpha);
    if (scale_out) *scale_out = std::move(c);
    return ll;
}

} // namespace detail

/// Natural-log likelihood of the sequence by the forward algorithm.
inline double hmm_forward_loglik(const SeqRef& seq, const HmmParams& hmm) {
    if (seq.rows() < 1) throw ShapeError("forward algorithm needs at least one tick");
    return detail::forward_scaled(detail::scaled_emissions(seq, hmm), hmm, nullptr, nullptr);
}

/// out(t) = log P(x_0 .. x_t): likelihood of every prefix in one pass.
/// Entries past an impossible tick are -inf.
inline Eigen::VectorXd prefix_logliks(const SeqRef& seq, const HmmParams& hmm) {
    if (seq.rows() < 1) throw ShapeError("forward algorithm needs at least one tick");
    Eigen::VectorXd out;
    detail::forward_scaled(detail::scaled_emissions(seq, hmm), hmm, nullptr, nullptr, &out);
    return out;
}

/// out(t) = log P(x_t .. x_{l-1}) with the chain started from pi at t: the
/// likelihood of every suffix, from one scaled backward pass.
inline Eigen::VectorXd suffix_logliks(const SeqRef& seq, const HmmParams& hmm) {
    const Index l = seq.rows();
    const Index k = hmm.states();
    if (l < 1) throw ShapeError("backward algorithm needs at least one tick");
    const auto e = detail::scaled_emissions(seq, hmm);
    Eigen::VectorXd out = Eigen::VectorXd::Constant(l, -std::numeric_limits<double>::infinity());
    Eigen::VectorXd beta = Eigen::VectorXd::Ones(k), next(k);
    double log_scale = 0.0;
    for (Index t = l - 1; t >= 0; --t) {
        if (t < l - 1) {
            next = hmm.A * e.b.row(t + 1).transpose().cwiseProduct(beta);
            const double n = next.sum();
            if (!(n > 0.0)) break;
            beta = next / n;
            log_scale += std::log(n) + e.shift(t + 1);
        }
        const double p = hmm.pi.dot(e.b.row(t).transpose().cwiseProduct(beta));
        out(t) = p > 0.0 ? std::log(p) + e.shift(t) + log_scale : -std::numeric_limits<double>::infinity();
    }
    return out;
}

struct ViterbiPath {
    std::vector<int> states;
    double loglik = 0.0;
};

/// Most likely state path; ties go to the lower state index.
inline ViterbiPath viterbi(const SeqRef& seq, const HmmParams& hmm) {
    const Index l = seq.rows();
    const Index k = hmm.states();
    if (l < 1) throw ShapeError("Viterbi needs at least one tick");
    const Eigen::MatrixXd logb = log_emissions(seq, hmm);
    const Eigen::MatrixXd logA = hmm.A.array().log().matrix();
    Eigen::MatrixXd delta(l, k);
    Eigen::MatrixXi back(l, k);
    for (Index j = 0; j < k; ++j) delta(0, j) = std::log(hmm.pi(j)) + logb(0, j);
    for (Index t = 1; t < l; ++t) {
        for (Index j = 0; j < k; ++j) {
            double best = -std::numeric_limits<double>::infinity();
            int arg = 0;
            for (Index i = 0; i < k; ++i) {
                const double v = delta(t - 1, i) + logA(i, j);
                if (v > best) {
                    best = v;
                    arg = static_cast<int>(i);
                }
            }
            delta(t, j) = best + logb(t, j);
            back(t, j) = arg;
        }
    }
    ViterbiPath out;
    out.states.resize(static_cast<std::size_t>(l));
    int state = 0;
    double best = -std::numeric_limits<double>::infinity();
    for (Index j = 0; j < k; ++j)
        if (delta(l - 1, j) > best) {
            best = delta(l - 1, j);
            state = static_cast<int>(j);
        }
    out.loglik = best;
    for (Index t = l - 1; t >= 0; --t) {
        out.states[static_cast<std::size_t>(t)] = state;
        if (t > 0) state = back(t, state);
    }
    return out;
}

struct BaumWelchOptions {
    int max_iterations = 100;
    double tolerance = 1e-6;
    double variance_floor = kVarianceFloor;
    std::uint64_t seed = 0x5eed;
    /// When non-null, receives the total log-likelihood at every E-step.
    std::vector<double>* trace = nullptr;
    /// When non-null, EM starts from these parameters instead of k-means.
    const HmmParams* init = nullptr;
};

namespace detail {

inline Index total_ticks(const std::vector<SeqRef>& seqs) {
    Index n = 0;
    for (const auto& s : seqs) n += s.rows();
    return n;
}

/// k-means++ seeding followed by a few Lloyd iterations on pooled ticks.
inline HmmParams kmeans_init(const std::vector<SeqRef>& seqs, Index k, const BaumWelchOptions& opt) {
    const Index d = seqs.front().cols();
    const Index n = total_ticks(seqs);
    Eigen::MatrixXd pts(n, d);
    {
        Index r = 0;
        for (const auto& s : seqs) {
            pts.middleRows(r, s.rows()) = s;
            r += s.rows();
        }
    }
    const Eigen::RowVectorXd gmean = pts.colwise().mean();
    const Eigen::RowVectorXd gvar =
        ((pts.rowwise() - gmean).array().square().colwise().sum() / static_cast<double>(n)).cwiseMax(opt.variance_floor);

    Rng rng = Rng(opt.seed).child("kmeans");
    Eigen::MatrixXd centers(k, d);
    centers.row(0) = pts.row(static_cast<Index>(rng.below(static_cast<std::uint64_t>(n))));
    Eigen::VectorXd dist = (pts.rowwise() - centers.row(0)).rowwise().squaredNorm();
    for (Index c = 1; c < k; ++c) {
        const double total = dist.sum();
        Index pick = 0;
        if (total > 0.0) {
            double target = rng.uniform() * total;
            for (pick = 0; pick < n - 1; ++pick) {
                target -= dist(pick);
                if (target < 0.0) break;
            }
        } else {
            pick = static_cast<Index>(rng.below(static_cast<std::uint64_t>(n)));
        }
        centers.row(c) = pts.row(pick);
        dist = dist.cwiseMin((pts.rowwise() - centers.row(c)).rowwise().squaredNorm());
    }

    std::vector<Index> assign(static_cast<std::size_t>(n), 0);
    for (int iter = 0; iter < 10; ++iter) {
        bool changed = false;
        for (Index i = 0; i < n; ++i) {
            Index best = 0;
            double bd = std::numeric_limits<double>::infinity();
            for (Index c = 0; c < k; ++c) {
                const double dd = (pts.row(i) - centers.row(c)).squaredNorm();
                if (dd < bd) {
                    bd = dd;
                    best = c;
                }
            }
            if (assign[static_cast<std::size_t>(i)] != best) changed = true;
            assign[static_cast<std::size_t>(i)] = best;
        }
        Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, d);
        Eigen::VectorXd counts = Eigen::VectorXd::Zero(k);
        for (Index i = 0; i < n; ++i) {
            sums.row(assign[static_cast<std::size_t>(i)]) += pts.row(i);
            counts(assign[static_cast<std::size_t>(i)]) += 1.0;
        }
        for (Index c = 0; c < k; ++c)
            if (counts(c) > 0) centers.row(c) = sums.row(c) / counts(c);
        if (!changed) break;
    }

    HmmParams hmm;
    hmm.pi = Eigen::VectorXd::Constant(k, 1.0 / static_cast<double>(k));
    if (k == 1) hmm.A = Eigen::MatrixXd::Ones(1, 1);
    else {
        hmm.A = Eigen::MatrixXd::Constant(k, k, 0.1 / static_cast<double>(k - 1));
        hmm.A.diagonal().setConstant(0.9);
    }
    hmm.means = centers;
    hmm.vars.resize(k, d);
    for (Index c = 0; c < k; ++c) {
        Eigen::RowVectorXd sq = Eigen::RowVectorXd::Zero(d);
        double cnt = 0.0;
        for (Index i = 0; i < n; ++i)
            if (assign[static_cast<std::size_t>(i)] == c) {
                sq += (pts.row(i) - centers.row(c)).array().square().matrix();
                cnt += 1.0;
            }
        hmm.vars.row(c) = cnt >= 2.0 ? Eigen::RowVectorXd((sq / cnt).cwiseMax(opt.variance_floor)) : gvar;
    }
    return hmm;
}

} // namespace detail

/// EM fit of a k-state HMM to a set of independent sequences. Stops when the
/// total log-likelihood improves by less than the tolerance or after
/// max_iterations E-steps. Returns the parameters whose likelihood was
/// evaluated last.
inline HmmParams baum_welch_fit(const std::vector<SeqRef>& seqs, Index k, const BaumWelchOptions& opt = {}) {
    if (k < 1) throw ConfigError("HMM needs at least one state");
    if (seqs.empty() || detail::total_ticks(seqs) == 0) throw ShapeError("Baum-Welch needs at least one tick");
    const Index d = seqs.front().cols();
    for (const auto& s : seqs)
        if (s.cols() != d) throw ShapeError("Baum-Welch sequences differ in dimension");
    if (detail::total_ticks(seqs) < k)
        throw ShapeError("Baum-Welch needs at least as many ticks as states");

    if (opt.init && (opt.init->states() != k || opt.init->dim() != d))
        throw ShapeError("Baum-Welch initial parameters do not match k and dimension");
    HmmParams hmm = opt.init ? *opt.init : detail::kmeans_init(seqs, k, opt);

    // All sequences stacked once; per-iteration buffers cover every tick.
    const Index n = detail::total_ticks(seqs);
    Eigen::MatrixXd X(n, d);
    std::vector<std::pair<Index, Index>> spans; // (offset, length)
    for (Index off = 0; const auto& seq : seqs) {
        if (seq.rows() == 0) continue;
        X.middleRows(off, seq.rows()) = seq;
        spans.emplace_back(off, seq.rows());
        off += seq.rows();
    }
    const Eigen::MatrixXd X2 = X.array().square().matrix();
    Eigen::MatrixXd alpha(n, k), beta(n, k), w(n, k);
    Eigen::VectorXd c(n);
    std::vector<double> prev_row(static_cast<std::size_t>(k)), cur_row(static_cast<std::size_t>(k));

    double prev = -std::numeric_limits<double>::infinity();
    for (int iter = 0; iter < opt.max_iterations; ++iter) {
        const Eigen::MatrixXd logb = log_emissions(X, hmm);
        const Eigen::VectorXd shift = logb.rowwise().maxCoeff();
        const Eigen::MatrixXd b = (logb.colwise() - shift).array().exp().matrix();
        Eigen::VectorXd pi_acc = Eigen::VectorXd::Zero(k);
        Eigen::MatrixXd xi_acc = Eigen::MatrixXd::Zero(k, k);
        Eigen::VectorXd from_acc = Eigen::VectorXd::Zero(k);
        double total = 0.0;
        Index used = 0;

        for (const auto& [off, l] : spans) {
            // Scaled forward pass.
            double ll = 0.0;
            bool possible = true;
            for (Index t = off; t < off + l; ++t) {
                double sum = 0.0;
                for (Index j = 0; j < k; ++j) {
                    double v;
                    if (t == off) {
                        v = hmm.pi(j);
                    } else {
                        v = 0.0;
                        for (Index i = 0; i < k; ++i) v += prev_row[static_cast<std::size_t>(i)] * hmm.A(i, j);
                    }
                    v *= b(t, j);
                    cur_row[static_cast<std::size_t>(j)] = v;
                    sum += v;
                }
                if (!(sum > 0.0)) {
                    possible = false;
                    break;
                }
                for (Index j = 0; j < k; ++j) {
                    prev_row[static_cast<std::size_t>(j)] = cur_row[static_cast<std::size_t>(j)] / sum;
                    alpha(t, j) = prev_row[static_cast<std::size_t>(j)];
                }
                c(t) = sum;
                ll += std::log(sum) + shift(t);
            }
            if (!possible) {
                alpha.middleRows(off, l).setZero();
                beta.middleRows(off, l).setZero();
                w.middleRows(off, l).setZero();
                continue;
            }
            total += ll;
            ++used;
            // Backward pass: w(t) = b(t) * beta(t) / c(t); beta(t) = A w(t + 1).
            const Index last = off + l - 1;
            for (Index j = 0; j < k; ++j) {
                beta(last, j) = 1.0;
                w(last, j) = b(last, j) / c(last);
            }
            for (Index t = last - 1; t >= off; --t) {
                for (Index i = 0; i < k; ++i) {
                    double v = 0.0;
                    for (Index j = 0; j < k; ++j) v += hmm.A(i, j) * w(t + 1, j);
                    beta(t, i) = v;
                }
                for (Index j = 0; j < k; ++j) w(t, j) = b(t, j) * beta(t, j) / c(t);
            }
            pi_acc += alpha.row(off).cwiseProduct(beta.row(off)).transpose();
            if (l > 1) {
                xi_acc.noalias() += alpha.middleRows(off, l - 1).transpose() * w.middleRows(off + 1, l - 1);
                from_acc += alpha.middleRows(off, l - 1).cwiseProduct(beta.middleRows(off, l - 1)).colwise().sum().transpose();
            }
        }
        if (used == 0) throw NumericError("Baum-Welch: every sequence has zero likelihood");
        if (opt.trace) opt.trace->push_back(total);
        if (iter > 0 && total - prev < opt.tolerance) break;
        prev = total;

        const Eigen::MatrixXd gamma = alpha.cwiseProduct(beta);
        const Eigen::VectorXd gamma_acc = gamma.colwise().sum().transpose();
        const Eigen::MatrixXd x_acc = gamma.transpose() * X;
        const Eigen::MatrixXd xx_acc = gamma.transpose() * X2;
        xi_acc = xi_acc.cwiseProduct(hmm.A);

        HmmParams next = hmm;
        next.pi = pi_acc / pi_acc.sum();
        for (Index i = 0; i < k; ++i) {
            if (from_acc(i) > 0.0) {
                next.A.row(i) = xi_acc.row(i) / xi_acc.row(i).sum();
            }
            if (gamma_acc(i) > 0.0) {
                next.means.row(i) = x_acc.row(i) / gamma_acc(i);
                const Eigen::RowVectorXd var =
                    xx_acc.row(i) / gamma_acc(i) - next.means.row(i).cwiseAbs2();
                next.vars.row(i) = var.cwiseMax(opt.variance_floor);
            }
        }
        hmm = std::move(next);
    }
    return hmm;
}

inline HmmParams baum_welch_fit(const SeqRef& seq, Index k, const BaumWelchOptions& opt = {}) {
    return baum_welch_fit(std::vector<SeqRef>{seq}, k, opt);
}

} // namespace missgan
