#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "missgan/error.hpp"

namespace missgan {

using Index = Eigen::Index;

// ---------------------------------------------------------------------------
// PCA

/// Linear projection onto the leading principal directions.
/// `components` is d_in x d_out with orthonormal columns ordered by
/// decreasing explained variance.
struct Projection {
    Eigen::VectorXd mean;
    Eigen::MatrixXd components;
    Eigen::VectorXd explained_variance;

    Index input_dim() const { return components.rows(); }
    Index output_dim() const { return components.cols(); }

    bool operator==(const Projection& o) const {
        return mean.size() == o.mean.size() && components.rows() == o.components.rows() &&
               components.cols() == o.components.cols() && mean == o.mean && components == o.components &&
               explained_variance == o.explained_variance;
    }
};

/// Principal components of the mean-centered rows via eigendecomposition of
/// the population covariance. Each component's largest-magnitude entry is
/// made positive so results are reproducible.
inline Projection pca_fit(const Eigen::MatrixXd& rows, Index d_r) {
    const Index n = rows.rows();
    const Index d = rows.cols();
    if (n < 2) throw ShapeError("PCA needs at least 2 rows");
    if (d_r < 1 || d_r > std::min(n - 1, d))
        throw ConfigError("PCA target dimension " + std::to_string(d_r) + " outside [1, " +
                          std::to_string(std::min(n - 1, d)) + "]");
    if (!rows.allFinite()) throw NumericError("PCA input contains non-finite values");

    Projection p;
    p.mean = rows.colwise().mean().transpose();
    const Eigen::MatrixXd centered = rows.rowwise() - p.mean.transpose();
    const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n);

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    if (eig.info() != Eigen::Success) throw NumericError("PCA eigendecomposition failed");
    const Eigen::VectorXd& values = eig.eigenvalues(); // ascending
    const double top = std::max(values(d - 1), 0.0);
    const double tol = top * 1e-10 * static_cast<double>(d);
    Index rank = 0;
    for (Index i = 0; i < d; ++i)
        if (values(i) > tol) ++rank;
    if (top <= 0.0) rank = 0;
    if (rank < d_r)
        throw NumericError("PCA input is rank-deficient: achieved rank " + std::to_string(rank) +
                           " < requested " + std::to_string(d_r));

    p.components.resize(d, d_r);
    p.explained_variance.resize(d_r);
    for (Index k = 0; k < d_r; ++k) {
        Eigen::VectorXd v = eig.eigenvectors().col(d - 1 - k);
        Index arg = 0;
        v.cwiseAbs().maxCoeff(&arg);
        if (v(arg) < 0.0) v = -v;
        p.components.col(k) = v;
        p.explained_variance(k) = std::max(values(d - 1 - k), 0.0);
    }
    return p;
}

inline Eigen::MatrixXd pca_transform(const Projection& proj, const Eigen::MatrixXd& rows) {
    if (rows.cols() != proj.input_dim())
        throw ShapeError("PCA transform expects " + std::to_string(proj.input_dim()) + " columns, got " +
                         std::to_string(rows.cols()));
    return (rows.rowwise() - proj.mean.transpose()) * proj.components;
}

inline Eigen::MatrixXd pca_reconstruct(const Projection& proj, const Eigen::MatrixXd& reduced) {
    if (reduced.cols() != proj.output_dim()) throw ShapeError("PCA reconstruct dimension mismatch");
    return (reduced * proj.components.transpose()).rowwise() + proj.mean.transpose();
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    std::uint64_t t = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}

    bool operator==(const AdamState&) const = default;
};

/// One bias-corrected Adam step in the descent direction, in place.
inline void adam_step(AdamState& state, std::span<double> params, std::span<const double> grads, double lr) {
    if (params.size() != grads.size()) throw ShapeError("Adam: params and grads differ in length");
    if (state.m.size() != params.size()) {
        if (state.t != 0) throw ShapeError("Adam: state size does not match parameters");
        state.m.assign(params.size(), 0.0);
        state.v.assign(params.size(), 0.0);
    }
    for (std::size_t i = 0; i < grads.size(); ++i)
        if (!std::isfinite(grads[i]))
            throw NumericError("Adam: non-finite gradient at coordinate " + std::to_string(i));

    state.t += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        const double m_hat = state.m[i] / bc1;
        const double v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
}

// ---------------------------------------------------------------------------
// Score scaling

/// (s - min) / (max - min); a constant vector maps to zeros.
inline std::vector<double> minmax_scale(std::span<const double> scores) {
    std::vector<double> out(scores.size(), 0.0);
    if (scores.empty()) return out;
    const auto [lo, hi] = std::minmax_element(scores.begin(), scores.end());
    const double range = *hi - *lo;
    if (!(range > 0.0)) return out;
    for (std::size_t i = 0; i < scores.size(); ++i) out[i] = (scores[i] - *lo) / range;
    return out;
}

} // namespace missgan
