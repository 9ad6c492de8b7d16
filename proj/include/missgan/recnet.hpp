#pragma once

// Conditional GRU encoder-decoder with a GRU discriminator, the generator and
// discriminator objectives, and hand-derived backpropagation through time.
//
// Sequences are processed as time-major mini-batches: element t of a batch is
// a B x channels matrix holding tick t of every segment in the batch.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "missgan/error.hpp"
#include "missgan/gru.hpp"
#include "missgan/rng.hpp"
#include "missgan/timeseries.hpp"

namespace missgan {

inline constexpr double kProbClamp = 1e-7;

struct ReconstructionModel {
    GruCell encoder;
    GruCell decoder;
    Eigen::MatrixXd head_w; // M x d_h
    Eigen::VectorXd head_b; // M
    /// Decoder input at each step is [previously emitted tick; y_t] when on,
    /// [0; y_t] when off.
    bool decoder_feedback = true;

    Index data_dim() const { return head_w.rows(); }
    Index cond_dim() const { return encoder.input_dim() - head_w.rows(); }
    Index hidden_dim() const { return encoder.hidden_dim(); }

    static ReconstructionModel zeros(Index M, Index C, Index d_h, bool feedback = true) {
        ReconstructionModel m;
        m.encoder = GruCell::zeros(M + C, d_h);
        m.decoder = GruCell::zeros(M + C, d_h);
        m.head_w.setZero(M, d_h);
        m.head_b.setZero(M);
        m.decoder_feedback = feedback;
        return m;
    }

    static ReconstructionModel random(Index M, Index C, Index d_h, Rng& rng, bool feedback = true) {
        ReconstructionModel m;
        m.encoder = GruCell::random(M + C, d_h, rng);
        m.decoder = GruCell::random(M + C, d_h, rng);
        const double bound = 1.0 / std::sqrt(static_cast<double>(d_h));
        m.head_w.resize(M, d_h);
        for (Index j = 0; j < d_h; ++j)
            for (Index i = 0; i < M; ++i) m.head_w(i, j) = rng.uniform(-bound, bound);
        m.head_b.setZero(M);
        m.decoder_feedback = feedback;
        return m;
    }

    bool operator==(const ReconstructionModel& o) const {
        return encoder == o.encoder && decoder == o.decoder && head_w.rows() == o.head_w.rows() &&
               head_w == o.head_w && head_b == o.head_b && decoder_feedback == o.decoder_feedback;
    }
};

struct DiscriminatorParams {
    GruCell gru;
    Eigen::VectorXd readout_w; // d_h
    Eigen::VectorXd readout_b; // size 1

    Index hidden_dim() const { return gru.hidden_dim(); }
    Index input_dim() const { return gru.input_dim(); }

    static DiscriminatorParams zeros(Index input_dim, Index d_h) {
        DiscriminatorParams d;
        d.gru = GruCell::zeros(input_dim, d_h);
        d.readout_w.setZero(d_h);
        d.readout_b.setZero(1);
        return d;
    }

    static DiscriminatorParams random(Index input_dim, Index d_h, Rng& rng) {
        DiscriminatorParams d;
        d.gru = GruCell::random(input_dim, d_h, rng);
        const double bound = 1.0 / std::sqrt(static_cast<double>(d_h));
        d.readout_w.resize(d_h);
        for (Index i = 0; i < d_h; ++i) d.readout_w(i) = rng.uniform(-bound, bound);
        d.readout_b.setZero(1);
        return d;
    }

    bool operator==(const DiscriminatorParams& o) const {
        return gru == o.gru && readout_w == o.readout_w && readout_b == o.readout_b;
    }
};

template <class Model, class F>
    requires std::same_as<std::remove_const_t<Model>, ReconstructionModel>
void for_each_tensor(Model& m, F&& f) {
    for_each_tensor(m.encoder, f);
    for_each_tensor(m.decoder, f);
    f(m.head_w), f(m.head_b);
}

template <class Disc, class F>
    requires std::same_as<std::remove_const_t<Disc>, DiscriminatorParams>
void for_each_tensor(Disc& d, F&& f) {
    for_each_tensor(d.gru, f);
    f(d.readout_w), f(d.readout_b);
}

template <class P>
std::size_t parameter_count(const P& params) {
    std::size_t n = 0;
    for_each_tensor(params, [&](const auto& t) { n += static_cast<std::size_t>(t.size()); });
    return n;
}

template <class P>
std::vector<double> flatten(const P& params) {
    std::vector<double> out;
    out.reserve(parameter_count(params));
    for_each_tensor(params, [&](const auto& t) { out.insert(out.end(), t.data(), t.data() + t.size()); });
    return out;
}

template <class P>
void unflatten(std::span<const double> flat, P& params) {
    if (flat.size() != parameter_count(params)) throw ShapeError("flat parameter vector has the wrong length");
    std::size_t pos = 0;
    for_each_tensor(params, [&](auto& t) {
        std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(pos), t.size(), t.data());
        pos += static_cast<std::size_t>(t.size());
    });
}

template <class P>
P zeros_like(const P& params) {
    P out = params;
    for_each_tensor(out, [](auto& t) { t.setZero(); });
    return out;
}

template <class P>
bool all_finite(const P& params) {
    bool ok = true;
    for_each_tensor(params, [&](const auto& t) { ok = ok && t.allFinite(); });
    return ok;
}

// ---------------------------------------------------------------------------
// Batches

/// Same-length segments, time-major. x[t] is B x M, y[t] is B x C.
struct SegmentBatch {
    std::vector<Eigen::MatrixXd> x;
    std::vector<Eigen::MatrixXd> y;

    Index length() const { return static_cast<Index>(x.size()); }
    Index size() const { return x.empty() ? 0 : x.front().rows(); }
};

/// Gathers equal-length windows of a series into one batch.
inline SegmentBatch make_batch(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y,
                               std::span<const SegmentBounds> segments) {
    if (segments.empty()) throw ShapeError("cannot build an empty batch");
    const Index l = segments.front().length;
    const auto B = static_cast<Index>(segments.size());
    SegmentBatch batch;
    batch.x.assign(static_cast<std::size_t>(l), Eigen::MatrixXd(B, x.cols()));
    batch.y.assign(static_cast<std::size_t>(l), Eigen::MatrixXd(B, y.cols()));
    for (Index b = 0; b < B; ++b) {
        const auto& s = segments[static_cast<std::size_t>(b)];
        if (s.length != l) throw ShapeError("batch segments must share one length");
        if (s.begin < 0 || s.end() > x.rows()) throw ShapeError("segment outside the series");
        for (Index t = 0; t < l; ++t) {
            batch.x[static_cast<std::size_t>(t)].row(b) = x.row(s.begin + t);
            batch.y[static_cast<std::size_t>(t)].row(b) = y.row(s.begin + t);
        }
    }
    return batch;
}

/// A batch holding one segment (l x M) with its conditions (l x C).
inline SegmentBatch single_segment(const Eigen::MatrixXd& segment, const Eigen::MatrixXd& cond) {
    if (segment.rows() != cond.rows())
        throw ShapeError("segment has " + std::to_string(segment.rows()) + " ticks but conditions have " +
                         std::to_string(cond.rows()));
    const SegmentBounds whole{0, segment.rows()};
    return make_batch(segment, cond, std::span(&whole, 1));
}

/// Rows of segment b as an l x channels matrix.
inline Eigen::MatrixXd batch_member(const std::vector<Eigen::MatrixXd>& steps, Index b) {
    if (steps.empty()) return {};
    Eigen::MatrixXd out(static_cast<Index>(steps.size()), steps.front().cols());
    for (std::size_t t = 0; t < steps.size(); ++t) out.row(static_cast<Index>(t)) = steps[t].row(b);
    return out;
}

namespace detail {

inline Eigen::MatrixXd hcat(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    Eigen::MatrixXd out(a.rows(), a.cols() + b.cols());
    out << a, b;
    return out;
}

inline void check_batch(const SegmentBatch& batch, Index M, Index C) {
    if (batch.length() < 1) throw ShapeError("segment must have at least one tick");
    if (batch.y.size() != batch.x.size()) throw ShapeError("data and conditions differ in length");
    for (std::size_t t = 0; t < batch.x.size(); ++t) {
        if (batch.x[t].cols() != M || batch.y[t].cols() != C)
            throw ShapeError("batch channels do not match the model (expected " + std::to_string(M) + "+" +
                             std::to_string(C) + ")");
        if (!batch.x[t].allFinite() || !batch.y[t].allFinite()) throw NumericError("non-finite value in batch");
    }
}

struct EncoderPass {
    std::vector<GruCache> steps;
    std::vector<Eigen::MatrixXd> hidden; // per tick, B x d_h (only if requested)
    Eigen::MatrixXd last;
};

inline EncoderPass run_encoder(const ReconstructionModel& m, const SegmentBatch& batch, bool keep_cache,
                               bool keep_hidden) {
    const Index B = batch.size();
    EncoderPass pass;
    if (keep_cache) pass.steps.resize(batch.x.size());
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(B, m.hidden_dim());
    for (std::size_t t = 0; t < batch.x.size(); ++t) {
        h = gru_forward(m.encoder, hcat(batch.x[t], batch.y[t]), h, keep_cache ? &pass.steps[t] : nullptr);
        if (keep_hidden) pass.hidden.push_back(h);
    }
    pass.last = std::move(h);
    return pass;
}

struct DecoderPass {
    std::vector<GruCache> steps;          // generation order: step i handles tick l-1-i
    std::vector<Eigen::MatrixXd> states;  // generation order
    std::vector<Eigen::MatrixXd> output;  // time-aligned: output[t] is x'_t
};

inline DecoderPass run_decoder(const ReconstructionModel& m, const Eigen::MatrixXd& h_last,
                               const std::vector<Eigen::MatrixXd>& cond, bool keep_cache) {
    const auto l = cond.size();
    const Index B = h_last.rows();
    DecoderPass pass;
    pass.output.resize(l);
    if (keep_cache) {
        pass.steps.resize(l);
        pass.states.resize(l);
    }
    Eigen::MatrixXd s = h_last;
    Eigen::MatrixXd prev = Eigen::MatrixXd::Zero(B, m.data_dim());
    for (std::size_t i = 0; i < l; ++i) {
        const std::size_t t = l - 1 - i;
        s = gru_forward(m.decoder, hcat(prev, cond[t]), s, keep_cache ? &pass.steps[i] : nullptr);
        Eigen::MatrixXd out(B, m.data_dim());
        out.noalias() = s * m.head_w.transpose();
        out.rowwise() += m.head_b.transpose();
        if (m.decoder_feedback) prev = out;
        if (keep_cache) pass.states[i] = s;
        pass.output[t] = std::move(out);
    }
    return pass;
}

struct DiscriminatorPass {
    std::vector<GruCache> steps;
    Eigen::MatrixXd features; // B x d_h
    Eigen::VectorXd raw_prob; // before clamping
    Eigen::VectorXd prob;     // clamped
};

inline DiscriminatorPass run_discriminator(const DiscriminatorParams& d, const std::vector<Eigen::MatrixXd>& xs,
                                           const std::vector<Eigen::MatrixXd>& ys, bool keep_cache) {
    const Index B = xs.front().rows();
    DiscriminatorPass pass;
    if (keep_cache) pass.steps.resize(xs.size());
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(B, d.hidden_dim());
    for (std::size_t t = 0; t < xs.size(); ++t)
        h = gru_forward(d.gru, hcat(xs[t], ys[t]), h, keep_cache ? &pass.steps[t] : nullptr);
    const Eigen::VectorXd logits = (h * d.readout_w).array() + d.readout_b(0);
    pass.raw_prob = logits.unaryExpr([](double a) { return 1.0 / (1.0 + std::exp(-a)); });
    pass.prob = pass.raw_prob.cwiseMax(kProbClamp).cwiseMin(1.0 - kProbClamp);
    pass.features = std::move(h);
    return pass;
}

/// Backpropagates dL/dfeatures through the discriminator GRU. Parameter
/// gradients go to `grad` (may be null); input gradients for the data
/// channels are added to `dx` when non-null.
inline void backprop_discriminator(const DiscriminatorParams& d, const DiscriminatorPass& pass,
                                   const Eigen::MatrixXd& dfeatures, GruCell* grad,
                                   std::vector<Eigen::MatrixXd>* dx, Index M) {
    Eigen::MatrixXd dh = dfeatures;
    Eigen::MatrixXd dh_prev, dinput;
    for (std::size_t i = pass.steps.size(); i-- > 0;) {
        gru_backward(d.gru, pass.steps[i], dh, grad, dh_prev, dx ? &dinput : nullptr);
        if (dx) (*dx)[i] += dinput.leftCols(M);
        dh.swap(dh_prev);
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// Forward operations on single segments

struct Encoding {
    Eigen::MatrixXd hidden; // l x d_h
    Eigen::VectorXd last;   // d_h
};

/// Runs the encoder from a zero state over [x_t; y_t].
inline Encoding encode(const Eigen::MatrixXd& segment, const Eigen::MatrixXd& cond, const ReconstructionModel& m) {
    const auto batch = single_segment(segment, cond);
    detail::check_batch(batch, m.data_dim(), m.cond_dim());
    auto pass = detail::run_encoder(m, batch, false, true);
    Encoding e;
    e.hidden = batch_member(pass.hidden, 0);
    e.last = pass.last.row(0).transpose();
    return e;
}

/// Generates ticks from l-1 down to 0 starting from h_last, then returns them
/// in time order.
inline Eigen::MatrixXd decode(const Eigen::VectorXd& h_last, const Eigen::MatrixXd& cond,
                              const ReconstructionModel& m) {
    if (cond.rows() < 1) throw ShapeError("decode needs at least one tick");
    if (cond.cols() != m.cond_dim() || h_last.size() != m.hidden_dim())
        throw ShapeError("decode: conditions or state do not match the model");
    std::vector<Eigen::MatrixXd> steps(static_cast<std::size_t>(cond.rows()));
    for (Index t = 0; t < cond.rows(); ++t) steps[static_cast<std::size_t>(t)] = cond.row(t);
    const auto pass = detail::run_decoder(m, h_last.transpose(), steps, false);
    return batch_member(pass.output, 0);
}

inline Eigen::MatrixXd reconstruct(const Eigen::MatrixXd& segment, const Eigen::MatrixXd& cond,
                                   const ReconstructionModel& m) {
    return decode(encode(segment, cond, m).last, cond, m);
}

/// Reconstructs every segment of a batch; result is time-major like the batch.
inline std::vector<Eigen::MatrixXd> reconstruct_batch(const SegmentBatch& batch, const ReconstructionModel& m) {
    detail::check_batch(batch, m.data_dim(), m.cond_dim());
    const auto enc = detail::run_encoder(m, batch, false, false);
    return detail::run_decoder(m, enc.last, batch.y, false).output;
}

struct Discrimination {
    double prob = 0.5;
    Eigen::VectorXd features;
};

inline Discrimination discriminate(const Eigen::MatrixXd& segment, const Eigen::MatrixXd& cond,
                                   const DiscriminatorParams& d) {
    const auto batch = single_segment(segment, cond);
    detail::check_batch(batch, d.input_dim() - cond.cols(), cond.cols());
    const auto pass = detail::run_discriminator(d, batch.x, batch.y, false);
    if (!std::isfinite(pass.prob(0)) || !pass.features.allFinite())
        throw NumericError("discriminator produced a non-finite value");
    return {pass.prob(0), pass.features.row(0).transpose()};
}

// ---------------------------------------------------------------------------
// Objectives

/// ||x - x'|| + lambda ||f_real - f_fake||, Euclidean norms over all entries.
inline double generator_loss(const Eigen::MatrixXd& x, const Eigen::MatrixXd& x_rec, const Eigen::VectorXd& f_real,
                             const Eigen::VectorXd& f_fake, double lambda) {
    if (x.rows() != x_rec.rows() || x.cols() != x_rec.cols() || f_real.size() != f_fake.size())
        throw ShapeError("generator loss: shape mismatch");
    return (x - x_rec).norm() + lambda * (f_real - f_fake).norm();
}

/// log D(x|y) + log(1 - D(x'|y)); the discriminator ascends this.
inline double discriminator_loss(double prob_real, double prob_fake) {
    if (!(prob_real > 0.0 && prob_real < 1.0 && prob_fake > 0.0 && prob_fake < 1.0))
        throw NumericError("discriminator loss: probabilities must lie strictly inside (0,1)");
    return std::log(prob_real) + std::log1p(-prob_fake);
}

enum class LossKind { Generator, Discriminator };

/// Gradients shaped like the model. For the generator kind the
/// discriminator part is zero, and vice versa. `loss` is the batch mean of
/// the objective at the evaluation point.
struct GradientSet {
    LossKind kind = LossKind::Generator;
    ReconstructionModel generator;
    DiscriminatorParams discriminator;
    double loss = 0.0;
};

/// Batch-mean objective without gradients.
inline double evaluate_loss(LossKind kind, const SegmentBatch& batch, const ReconstructionModel& m,
                            const DiscriminatorParams& d, double lambda) {
    detail::check_batch(batch, m.data_dim(), m.cond_dim());
    const auto enc = detail::run_encoder(m, batch, false, false);
    const auto dec = detail::run_decoder(m, enc.last, batch.y, false);
    const auto real = detail::run_discriminator(d, batch.x, batch.y, false);
    const auto fake = detail::run_discriminator(d, dec.output, batch.y, false);
    const Index B = batch.size();
    double total = 0.0;
    for (Index b = 0; b < B; ++b) {
        if (kind == LossKind::Generator) {
            double sq = 0.0;
            for (std::size_t t = 0; t < batch.x.size(); ++t)
                sq += (batch.x[t].row(b) - dec.output[t].row(b)).squaredNorm();
            total += std::sqrt(sq) + lambda * (real.features.row(b) - fake.features.row(b)).norm();
        } else {
            total += discriminator_loss(real.prob(b), fake.prob(b));
        }
    }
    return total / static_cast<double>(B);
}

/// Exact gradients of the batch-mean objective by backpropagation through
/// time. Generator kind: d L_G / d Theta_G with the discriminator held fixed.
/// Discriminator kind: d L_D / d Theta_D with reconstructions held fixed.
/// At a zero norm the subgradient 0 is used.
inline GradientSet compute_gradients(LossKind kind, const SegmentBatch& batch, const ReconstructionModel& m,
                                     const DiscriminatorParams& d, double lambda) {
    const Index M = m.data_dim();
    detail::check_batch(batch, M, m.cond_dim());
    if (d.input_dim() != m.encoder.input_dim()) throw ShapeError("discriminator input does not match the model");
    const Index B = batch.size();
    const auto l = batch.x.size();
    const double inv_b = 1.0 / static_cast<double>(B);

    GradientSet g;
    g.kind = kind;
    g.generator = zeros_like(m);
    g.discriminator = zeros_like(d);

    if (kind == LossKind::Discriminator) {
        const auto enc = detail::run_encoder(m, batch, false, false);
        const auto dec = detail::run_decoder(m, enc.last, batch.y, false);
        const auto real = detail::run_discriminator(d, batch.x, batch.y, true);
        const auto fake = detail::run_discriminator(d, dec.output, batch.y, true);
        Eigen::VectorXd da_real(B), da_fake(B);
        double total = 0.0;
        for (Index b = 0; b < B; ++b) {
            total += discriminator_loss(real.prob(b), fake.prob(b));
            const bool real_clamped = real.raw_prob(b) != real.prob(b);
            const bool fake_clamped = fake.raw_prob(b) != fake.prob(b);
            // d log(sigmoid(a)) / da = 1 - p ; d log(1 - sigmoid(a)) / da = -p
            da_real(b) = real_clamped ? 0.0 : (1.0 - real.raw_prob(b)) * inv_b;
            da_fake(b) = fake_clamped ? 0.0 : -fake.raw_prob(b) * inv_b;
        }
        g.loss = total * inv_b;
        g.discriminator.readout_w = real.features.transpose() * da_real + fake.features.transpose() * da_fake;
        g.discriminator.readout_b(0) = da_real.sum() + da_fake.sum();
        const Eigen::MatrixXd df_real = da_real * d.readout_w.transpose();
        const Eigen::MatrixXd df_fake = da_fake * d.readout_w.transpose();
        detail::backprop_discriminator(d, real, df_real, &g.discriminator.gru, nullptr, M);
        detail::backprop_discriminator(d, fake, df_fake, &g.discriminator.gru, nullptr, M);
        if (!all_finite(g.discriminator)) throw NumericError("non-finite discriminator gradient");
        return g;
    }

    const auto enc = detail::run_encoder(m, batch, true, false);
    const auto dec = detail::run_decoder(m, enc.last, batch.y, true);
    const auto real = detail::run_discriminator(d, batch.x, batch.y, false);
    const auto fake = detail::run_discriminator(d, dec.output, batch.y, true);

    // Loss terms per segment and the gradient w.r.t. reconstructions/features.
    std::vector<Eigen::MatrixXd> dx(l);
    Eigen::VectorXd rec_norm = Eigen::VectorXd::Zero(B);
    for (std::size_t t = 0; t < l; ++t) {
        dx[t] = dec.output[t] - batch.x[t];
        rec_norm += dx[t].rowwise().squaredNorm();
    }
    rec_norm = rec_norm.cwiseSqrt();
    Eigen::VectorXd rec_scale(B);
    for (Index b = 0; b < B; ++b) rec_scale(b) = rec_norm(b) > 0.0 ? inv_b / rec_norm(b) : 0.0;
    for (auto& step : dx) step = rec_scale.asDiagonal() * step;

    const Eigen::MatrixXd fdiff = fake.features - real.features;
    const Eigen::VectorXd feat_norm = fdiff.rowwise().norm();
    Eigen::VectorXd feat_scale(B);
    for (Index b = 0; b < B; ++b) feat_scale(b) = feat_norm(b) > 0.0 ? lambda * inv_b / feat_norm(b) : 0.0;
    const Eigen::MatrixXd dfake = feat_scale.asDiagonal() * fdiff;
    g.loss = (rec_norm + lambda * feat_norm).sum() * inv_b;

    if (lambda != 0.0) detail::backprop_discriminator(d, fake, dfake, nullptr, &dx, M);

    // Decoder: backward over generation steps i = l-1 .. 0 (tick t = l-1-i).
    Eigen::MatrixXd ds = Eigen::MatrixXd::Zero(B, m.hidden_dim());
    Eigen::MatrixXd dfeed = Eigen::MatrixXd::Zero(B, M);
    Eigen::MatrixXd ds_prev, dinput;
    for (std::size_t i = l; i-- > 0;) {
        const std::size_t t = l - 1 - i;
        const Eigen::MatrixXd dout = dx[t] + dfeed;
        g.generator.head_w.noalias() += dout.transpose() * dec.states[i];
        g.generator.head_b += dout.colwise().sum().transpose();
        ds.noalias() += dout * m.head_w;
        gru_backward(m.decoder, dec.steps[i], ds, &g.generator.decoder, ds_prev, &dinput);
        if (m.decoder_feedback) dfeed = dinput.leftCols(M);
        ds.swap(ds_prev);
    }

    // Encoder: ds now holds dL/dh_last.
    Eigen::MatrixXd dh = std::move(ds);
    Eigen::MatrixXd dh_prev;
    for (std::size_t t = l; t-- > 0;) {
        gru_backward(m.encoder, enc.steps[t], dh, &g.generator.encoder, dh_prev, nullptr);
        dh.swap(dh_prev);
    }
    if (!all_finite(g.generator)) throw NumericError("non-finite generator gradient");
    return g;
}

inline GradientSet compute_gradients(LossKind kind, const Eigen::MatrixXd& segment, const Eigen::MatrixXd& cond,
                                     const ReconstructionModel& m, const DiscriminatorParams& d, double lambda) {
    return compute_gradients(kind, single_segment(segment, cond), m, d, lambda);
}

} // namespace missgan
