#pragma once

// Single-layer GRU cell over mini-batches, with an exact backward pass.
//
// Rows are batch entries. Gate convention:
//   z  = sigmoid(u Wz' + h Uz' + bz)
//   r  = sigmoid(u Wr' + h Ur' + br)
//   h~ = tanh(u Wh' + (r * h) Uh' + bh)
//   h' = (1 - z) * h + z * h~

#include <cmath>
#include <concepts>
#include <type_traits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "missgan/error.hpp"
#include "missgan/rng.hpp"

namespace missgan {

using Index = Eigen::Index;

struct GruCell {
    Eigen::MatrixXd Wz, Uz;
    Eigen::VectorXd bz;
    Eigen::MatrixXd Wr, Ur;
    Eigen::VectorXd br;
    Eigen::MatrixXd Wh, Uh;
    Eigen::VectorXd bh;

    Index input_dim() const { return Wz.cols(); }
    Index hidden_dim() const { return Wz.rows(); }

    static GruCell zeros(Index input_dim, Index hidden_dim) {
        GruCell c;
        for (auto* w : {&c.Wz, &c.Wr, &c.Wh}) w->setZero(hidden_dim, input_dim);
        for (auto* u : {&c.Uz, &c.Ur, &c.Uh}) u->setZero(hidden_dim, hidden_dim);
        for (auto* b : {&c.bz, &c.br, &c.bh}) b->setZero(hidden_dim);
        return c;
    }

    /// Weights uniform in +-1/sqrt(hidden_dim), biases zero.
    static GruCell random(Index input_dim, Index hidden_dim, Rng& rng) {
        GruCell c = zeros(input_dim, hidden_dim);
        const double bound = 1.0 / std::sqrt(static_cast<double>(hidden_dim));
        for (auto* m : {&c.Wz, &c.Uz, &c.Wr, &c.Ur, &c.Wh, &c.Uh})
            for (Index j = 0; j < m->cols(); ++j)
                for (Index i = 0; i < m->rows(); ++i) (*m)(i, j) = rng.uniform(-bound, bound);
        return c;
    }

    bool operator==(const GruCell& o) const {
        return Wz.rows() == o.Wz.rows() && Wz.cols() == o.Wz.cols() && Wz == o.Wz && Uz == o.Uz && bz == o.bz &&
               Wr == o.Wr && Ur == o.Ur && br == o.br && Wh == o.Wh && Uh == o.Uh && bh == o.bh;
    }
};

/// Visits every parameter tensor in a fixed order.
template <class Cell, class F>
    requires std::same_as<std::remove_const_t<Cell>, GruCell>
void for_each_tensor(Cell& c, F&& f) {
    f(c.Wz), f(c.Uz), f(c.bz);
    f(c.Wr), f(c.Ur), f(c.br);
    f(c.Wh), f(c.Uh), f(c.bh);
}

/// Activations saved by the forward pass for the backward pass.
struct GruCache {
    Eigen::MatrixXd input;
    Eigen::MatrixXd h_prev;
    Eigen::MatrixXd z;
    Eigen::MatrixXd r;
    Eigen::MatrixXd cand;
};

namespace detail {

inline Eigen::MatrixXd sigmoid(const Eigen::MatrixXd& a) {
    return a.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
}

inline Eigen::MatrixXd affine(const Eigen::MatrixXd& input, const Eigen::MatrixXd& W, const Eigen::MatrixXd& h,
                              const Eigen::MatrixXd& U, const Eigen::VectorXd& b) {
    Eigen::MatrixXd a(input.rows(), W.rows());
    a.noalias() = input * W.transpose();
    a.noalias() += h * U.transpose();
    a.rowwise() += b.transpose();
    return a;
}

} // namespace detail

/// One step for a batch: input is B x d_in, h_prev is B x d_h.
inline Eigen::MatrixXd gru_forward(const GruCell& c, const Eigen::MatrixXd& input, const Eigen::MatrixXd& h_prev,
                                   GruCache* cache = nullptr) {
    if (input.cols() != c.input_dim() || h_prev.cols() != c.hidden_dim() || input.rows() != h_prev.rows())
        throw ShapeError("GRU step: input " + std::to_string(input.rows()) + "x" + std::to_string(input.cols()) +
                         " / state " + std::to_string(h_prev.rows()) + "x" + std::to_string(h_prev.cols()) +
                         " do not match cell " + std::to_string(c.input_dim()) + "->" +
                         std::to_string(c.hidden_dim()));
    Eigen::MatrixXd z = detail::sigmoid(detail::affine(input, c.Wz, h_prev, c.Uz, c.bz));
    Eigen::MatrixXd r = detail::sigmoid(detail::affine(input, c.Wr, h_prev, c.Ur, c.br));
    const Eigen::MatrixXd rh = r.cwiseProduct(h_prev);
    Eigen::MatrixXd cand = detail::affine(input, c.Wh, rh, c.Uh, c.bh).array().tanh().matrix();
    Eigen::MatrixXd h = ((1.0 - z.array()) * h_prev.array() + z.array() * cand.array()).matrix();
    if (cache) {
        cache->input = input;
        cache->h_prev = h_prev;
        cache->z = std::move(z);
        cache->r = std::move(r);
        cache->cand = std::move(cand);
    }
    return h;
}

/// Backward through one step. `dh` is dLoss/dh'. Parameter gradients are
/// accumulated into `grad` when non-null; dLoss/dh_prev is written to
/// `dh_prev`, and dLoss/dinput to `dinput` when non-null.
inline void gru_backward(const GruCell& c, const GruCache& k, const Eigen::MatrixXd& dh, GruCell* grad,
                         Eigen::MatrixXd& dh_prev, Eigen::MatrixXd* dinput) {
    const auto z = k.z.array();
    const auto r = k.r.array();
    const Eigen::MatrixXd dcand = (dh.array() * z).matrix();
    const Eigen::MatrixXd dz = (dh.array() * (k.cand - k.h_prev).array()).matrix();
    const Eigen::MatrixXd dah = (dcand.array() * (1.0 - k.cand.array().square())).matrix();
    const Eigen::MatrixXd drh = dah * c.Uh;
    const Eigen::MatrixXd daz = (dz.array() * z * (1.0 - z)).matrix();
    const Eigen::MatrixXd dar = (drh.array() * k.h_prev.array() * r * (1.0 - r)).matrix();

    dh_prev = (dh.array() * (1.0 - z) + drh.array() * r).matrix();
    dh_prev.noalias() += daz * c.Uz;
    dh_prev.noalias() += dar * c.Ur;

    if (grad) {
        const Eigen::MatrixXd rh = k.r.cwiseProduct(k.h_prev);
        grad->Wz.noalias() += daz.transpose() * k.input;
        grad->Uz.noalias() += daz.transpose() * k.h_prev;
        grad->bz += daz.colwise().sum().transpose();
        grad->Wr.noalias() += dar.transpose() * k.input;
        grad->Ur.noalias() += dar.transpose() * k.h_prev;
        grad->br += dar.colwise().sum().transpose();
        grad->Wh.noalias() += dah.transpose() * k.input;
        grad->Uh.noalias() += dah.transpose() * rh;
        grad->bh += dah.colwise().sum().transpose();
    }
    if (dinput) {
        dinput->noalias() = daz * c.Wz;
        dinput->noalias() += dar * c.Wr;
        dinput->noalias() += dah * c.Wh;
    }
}

/// Single-vector step.
inline Eigen::VectorXd gru_step(const Eigen::VectorXd& input, const Eigen::VectorXd& h_prev, const GruCell& cell) {
    if (!input.allFinite() || !h_prev.allFinite()) throw NumericError("GRU step: non-finite input");
    return gru_forward(cell, input.transpose(), h_prev.transpose()).row(0).transpose();
}

} // namespace missgan
