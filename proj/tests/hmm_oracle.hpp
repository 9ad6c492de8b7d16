#pragma once

// Path-enumeration oracles for HMM likelihood and decoding.

#include <cmath>
#include <limits>
#include <vector>

#include "missgan/hmm.hpp"

namespace testing_support {

inline missgan::HmmParams random_hmm(missgan::Rng& rng, missgan::Index k, missgan::Index d) {
    using namespace missgan;
    HmmParams h;
    h.pi.resize(k);
    for (Index i = 0; i < k; ++i) h.pi(i) = 0.1 + rng.uniform();
    h.pi /= h.pi.sum();
    h.A.resize(k, k);
    for (Index i = 0; i < k; ++i) {
        for (Index j = 0; j < k; ++j) h.A(i, j) = 0.1 + rng.uniform();
        h.A.row(i) /= h.A.row(i).sum();
    }
    h.means.resize(k, d);
    h.vars.resize(k, d);
    for (Index i = 0; i < k; ++i)
        for (Index j = 0; j < d; ++j) {
            h.means(i, j) = rng.uniform(-2.0, 2.0);
            h.vars(i, j) = rng.uniform(0.3, 2.0);
        }
    return h;
}

inline double log_gauss_diag(const Eigen::RowVectorXd& x, const missgan::HmmParams& h, missgan::Index s) {
    double v = 0.0;
    for (missgan::Index j = 0; j < x.size(); ++j) {
        const double var = h.vars(s, j);
        const double diff = x(j) - h.means(s, j);
        v += -0.5 * std::log(2.0 * M_PI * var) - 0.5 * diff * diff / var;
    }
    return v;
}

/// Calls f(path, log joint probability) for every state path.
template <class F>
void for_each_path(const Eigen::MatrixXd& seq, const missgan::HmmParams& h, F&& f) {
    const auto l = static_cast<std::size_t>(seq.rows());
    const auto k = static_cast<int>(h.states());
    std::vector<int> path(l, 0);
    for (;;) {
        double lp = std::log(h.pi(path[0])) + log_gauss_diag(seq.row(0), h, path[0]);
        for (std::size_t t = 1; t < l; ++t)
            lp += std::log(h.A(path[t - 1], path[t])) + log_gauss_diag(seq.row(static_cast<long>(t)), h, path[t]);
        f(path, lp);
        long pos = static_cast<long>(l) - 1;
        while (pos >= 0) {
            if (++path[static_cast<std::size_t>(pos)] < k) break;
            path[static_cast<std::size_t>(pos)] = 0;
            --pos;
        }
        if (pos < 0) return;
    }
}

inline double brute_force_loglik(const Eigen::MatrixXd& seq, const missgan::HmmParams& h) {
    std::vector<double> terms;
    for_each_path(seq, h, [&](const std::vector<int>&, double lp) { terms.push_back(lp); });
    double mx = -std::numeric_limits<double>::infinity();
    for (double t : terms) mx = std::max(mx, t);
    double s = 0.0;
    for (double t : terms) s += std::exp(t - mx);
    return mx + std::log(s);
}

inline std::pair<std::vector<int>, double> brute_force_viterbi(const Eigen::MatrixXd& seq,
                                                               const missgan::HmmParams& h) {
    std::vector<int> best;
    double best_lp = -std::numeric_limits<double>::infinity();
    for_each_path(seq, h, [&](const std::vector<int>& p, double lp) {
        if (lp > best_lp) {
            best_lp = lp;
            best = p;
        }
    });
    return {best, best_lp};
}

} // namespace testing_support
