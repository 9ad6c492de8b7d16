#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "gradient_check.hpp"
#include "missgan/recnet.hpp"

using namespace missgan;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

// Scalar reference GRU step written with plain loops.
std::vector<double> ref_gru_step(const GruCell& c, const std::vector<double>& u, const std::vector<double>& h) {
    const auto dh = static_cast<std::size_t>(c.hidden_dim());
    const auto din = static_cast<std::size_t>(c.input_dim());
    auto sig = [](double a) { return 1.0 / (1.0 + std::exp(-a)); };
    std::vector<double> z(dh), r(dh), out(dh);
    for (std::size_t i = 0; i < dh; ++i) {
        double az = c.bz(i), ar = c.br(i);
        for (std::size_t j = 0; j < din; ++j) {
            az += c.Wz(i, j) * u[j];
            ar += c.Wr(i, j) * u[j];
        }
        for (std::size_t j = 0; j < dh; ++j) {
            az += c.Uz(i, j) * h[j];
            ar += c.Ur(i, j) * h[j];
        }
        z[i] = sig(az);
        r[i] = sig(ar);
    }
    for (std::size_t i = 0; i < dh; ++i) {
        double ah = c.bh(i);
        for (std::size_t j = 0; j < din; ++j) ah += c.Wh(i, j) * u[j];
        for (std::size_t j = 0; j < dh; ++j) ah += c.Uh(i, j) * (r[j] * h[j]);
        out[i] = (1.0 - z[i]) * h[i] + z[i] * std::tanh(ah);
    }
    return out;
}

std::vector<double> row(const MatrixXd& m, Index t) {
    std::vector<double> v(static_cast<std::size_t>(m.cols()));
    for (Index j = 0; j < m.cols(); ++j) v[static_cast<std::size_t>(j)] = m(t, j);
    return v;
}

std::vector<double> cat(std::vector<double> a, const std::vector<double>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

MatrixXd random_matrix(Index r, Index c, Rng& rng, double scale = 1.0) {
    MatrixXd m(r, c);
    for (Index j = 0; j < c; ++j)
        for (Index i = 0; i < r; ++i) m(i, j) = rng.uniform(-scale, scale);
    return m;
}

} // namespace

TEST(GruStep, ZeroParamsZeroState) {
    const auto cell = GruCell::zeros(3, 4);
    const VectorXd h = gru_step(VectorXd::Ones(3), VectorXd::Zero(4), cell);
    EXPECT_TRUE(h.isZero(0.0));
}

TEST(GruStep, ZeroParamsHalvesState) {
    const auto cell = GruCell::zeros(2, 3);
    VectorXd p(3);
    p << 0.4, -0.8, 0.2;
    const VectorXd h = gru_step(VectorXd::Ones(2), p, cell);
    for (Index i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(h(i), 0.5 * p(i));
}

TEST(GruStep, SaturatedUpdateGateGivesTanhOfInput) {
    auto cell = GruCell::zeros(1, 1);
    cell.bz(0) = 40.0; // z == 1 in double precision
    cell.Wh(0, 0) = 1.0;
    for (double u : {-2.0, -0.3, 0.0, 0.7, 1.5}) {
        VectorXd in(1), h0(1);
        in << u;
        h0 << 0.9;
        EXPECT_NEAR(gru_step(in, h0, cell)(0), std::tanh(u), 1e-9);
    }
}

TEST(GruStep, RejectsNonFiniteInput) {
    const auto cell = GruCell::zeros(1, 2);
    VectorXd in(1);
    in << std::nan("");
    EXPECT_THROW(gru_step(in, VectorXd::Zero(2), cell), NumericError);
}

TEST(GruStep, StatesStayInsideUnitBox) {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        GruCell cell = GruCell::random(3, 5, rng);
        for_each_tensor(cell, [&](auto& t) { t *= 4.0; });
        VectorXd h = VectorXd::Zero(5);
        for (int t = 0; t < 20; ++t) {
            VectorXd u(3);
            for (Index j = 0; j < 3; ++j) u(j) = rng.uniform(-5.0, 5.0);
            h = gru_step(u, h, cell);
            EXPECT_LT(h.cwiseAbs().maxCoeff(), 1.0);
        }
    }
}

TEST(Encode, SingleTickIsOneStep) {
    Rng rng(3);
    const auto m = ReconstructionModel::random(2, 1, 3, rng);
    const MatrixXd x = random_matrix(1, 2, rng), y = random_matrix(1, 1, rng);
    const auto e = encode(x, y, m);
    ASSERT_EQ(e.hidden.rows(), 1);
    VectorXd u(3);
    u << x(0, 0), x(0, 1), y(0, 0);
    const VectorXd expect = gru_step(u, VectorXd::Zero(3), m.encoder);
    EXPECT_EQ(e.hidden.row(0).transpose(), expect);
    EXPECT_EQ(e.last, expect);
}

TEST(Encode, ZeroModelGivesZeroStates) {
    const auto m = ReconstructionModel::zeros(2, 1, 4);
    Rng rng(1);
    const auto e = encode(random_matrix(6, 2, rng), random_matrix(6, 1, rng), m);
    EXPECT_TRUE(e.hidden.isZero(0.0));
}

TEST(Encode, MatchesUnrolledRecurrence) {
    Rng rng(5);
    const auto m = ReconstructionModel::random(2, 1, 3, rng);
    const MatrixXd x = random_matrix(4, 2, rng), y = random_matrix(4, 1, rng);
    const auto e = encode(x, y, m);
    std::vector<double> h(3, 0.0);
    for (Index t = 0; t < 4; ++t) {
        h = ref_gru_step(m.encoder, cat(row(x, t), row(y, t)), h);
        for (Index i = 0; i < 3; ++i) EXPECT_NEAR(e.hidden(t, i), h[static_cast<std::size_t>(i)], 1e-12);
    }
}

TEST(Encode, RejectsLengthMismatch) {
    const auto m = ReconstructionModel::zeros(1, 1, 2);
    EXPECT_THROW(encode(MatrixXd::Zero(3, 1), MatrixXd::Zero(2, 1), m), ShapeError);
}

TEST(Decode, ShapeAndZeroModel) {
    const auto m = ReconstructionModel::zeros(3, 2, 4);
    Rng rng(2);
    for (Index l : {1, 2, 7}) {
        const MatrixXd out = decode(VectorXd::Constant(4, 0.3), random_matrix(l, 2, rng), m);
        EXPECT_EQ(out.rows(), l);
        EXPECT_EQ(out.cols(), 3);
        EXPECT_TRUE(out.isZero(0.0));
    }
}

TEST(Decode, MatchesUnrolledReversedRecurrence) {
    for (bool feedback : {true, false}) {
        Rng rng(9);
        auto m = ReconstructionModel::random(1, 1, 2, rng, feedback);
        m.head_b(0) = 0.25;
        const MatrixXd y = random_matrix(3, 1, rng);
        VectorXd h_last(2);
        h_last << 0.3, -0.6;
        const MatrixXd out = decode(h_last, y, m);

        std::vector<double> s{h_last(0), h_last(1)};
        std::vector<double> prev{0.0};
        std::vector<double> expect(3);
        for (int t = 2; t >= 0; --t) {
            s = ref_gru_step(m.decoder, {prev[0], y(t, 0)}, s);
            const double o = m.head_w(0, 0) * s[0] + m.head_w(0, 1) * s[1] + m.head_b(0);
            expect[static_cast<std::size_t>(t)] = o;
            prev[0] = feedback ? o : 0.0;
        }
        for (Index t = 0; t < 3; ++t) EXPECT_NEAR(out(t, 0), expect[static_cast<std::size_t>(t)], 1e-12);
    }
}

TEST(Reconstruct, ShapeAndComposition) {
    Rng rng(4);
    const auto m = ReconstructionModel::random(3, 2, 5, rng);
    for (Index l : {1, 4, 9}) {
        const MatrixXd x = random_matrix(l, 3, rng), y = random_matrix(l, 2, rng);
        const MatrixXd r = reconstruct(x, y, m);
        EXPECT_EQ(r.rows(), l);
        EXPECT_EQ(r.cols(), 3);
        EXPECT_EQ(r, decode(encode(x, y, m).last, y, m));
    }
    const auto zero = ReconstructionModel::zeros(3, 2, 5);
    EXPECT_TRUE(reconstruct(random_matrix(4, 3, rng), random_matrix(4, 2, rng), zero).isZero(0.0));
}

TEST(Reconstruct, BatchMatchesPerSegment) {
    Rng rng(8);
    const auto m = ReconstructionModel::random(2, 1, 4, rng);
    const MatrixXd x = random_matrix(12, 2, rng), y = random_matrix(12, 1, rng);
    const std::vector<SegmentBounds> segs{{0, 4}, {4, 4}, {8, 4}};
    const auto out = reconstruct_batch(make_batch(x, y, segs), m);
    for (Index b = 0; b < 3; ++b) {
        const MatrixXd single = reconstruct(x.middleRows(4 * b, 4), y.middleRows(4 * b, 4), m);
        EXPECT_LT((batch_member(out, b) - single).cwiseAbs().maxCoeff(), 1e-14);
    }
}

TEST(Discriminate, ZeroParams) {
    const auto d = DiscriminatorParams::zeros(3, 4);
    Rng rng(1);
    const auto res = discriminate(random_matrix(5, 2, rng), random_matrix(5, 1, rng), d);
    EXPECT_DOUBLE_EQ(res.prob, 0.5);
    EXPECT_TRUE(res.features.isZero(0.0));
}

TEST(Discriminate, ProbabilityIsClamped) {
    Rng rng(2);
    auto d = DiscriminatorParams::random(2, 3, rng);
    for (double bias : {-500.0, 500.0, 0.0}) {
        d.readout_b(0) = bias;
        const auto res = discriminate(random_matrix(3, 1, rng), random_matrix(3, 1, rng), d);
        EXPECT_GT(res.prob, 0.0);
        EXPECT_LT(res.prob, 1.0);
        EXPECT_GE(res.prob, kProbClamp);
        EXPECT_LE(res.prob, 1.0 - kProbClamp);
    }
}

TEST(Discriminate, FeaturesMatchUnrolledRecurrence) {
    Rng rng(6);
    const auto d = DiscriminatorParams::random(3, 3, rng);
    const MatrixXd x = random_matrix(5, 2, rng), y = random_matrix(5, 1, rng);
    const auto res = discriminate(x, y, d);
    std::vector<double> h(3, 0.0);
    for (Index t = 0; t < 5; ++t) h = ref_gru_step(d.gru, cat(row(x, t), row(y, t)), h);
    double logit = d.readout_b(0);
    for (Index i = 0; i < 3; ++i) {
        EXPECT_NEAR(res.features(i), h[static_cast<std::size_t>(i)], 1e-12);
        logit += d.readout_w(i) * h[static_cast<std::size_t>(i)];
    }
    EXPECT_NEAR(res.prob, 1.0 / (1.0 + std::exp(-logit)), 1e-12);
}

TEST(GeneratorLoss, Values) {
    const MatrixXd x = MatrixXd::Constant(2, 1, 1.0);
    const VectorXd f = VectorXd::Constant(3, 0.2);
    EXPECT_EQ(generator_loss(x, x, f, f, 0.7), 0.0);
    MatrixXd xr(2, 1);
    xr << 1.0 - 3.0, 1.0 - 4.0;
    for (double lambda : {0.0, 0.1, 5.0}) EXPECT_DOUBLE_EQ(generator_loss(x, xr, f, f, lambda), 5.0);
    VectorXd g = f;
    g(0) += 2.0;
    EXPECT_DOUBLE_EQ(generator_loss(x, xr, f, g, 0.0), 5.0);
    EXPECT_DOUBLE_EQ(generator_loss(x, xr, f, g, 0.5), 6.0);
}

TEST(DiscriminatorLoss, Values) {
    EXPECT_NEAR(discriminator_loss(0.5, 0.5), -1.3862944, 1e-7);
    EXPECT_NEAR(discriminator_loss(0.9, 0.1), 2.0 * std::log(0.9), 1e-15);
    EXPECT_NEAR(discriminator_loss(0.9, 0.1), -0.2107, 1e-4);
    const double sup = discriminator_loss(1.0 - kProbClamp, kProbClamp);
    EXPECT_LE(sup, 0.0);
    EXPECT_GT(sup, -1e-6);
    EXPECT_THROW(discriminator_loss(0.0, 0.5), NumericError);
    EXPECT_THROW(discriminator_loss(0.5, 1.0), NumericError);
}

TEST(DiscriminatorLoss, NonPositiveInsideClampRange) {
    Rng rng(3);
    for (int i = 0; i < 1000; ++i) {
        const double pr = rng.uniform(kProbClamp, 1.0 - kProbClamp);
        const double pf = rng.uniform(kProbClamp, 1.0 - kProbClamp);
        EXPECT_LE(discriminator_loss(pr, pf), 0.0);
    }
}

TEST(Gradients, ZeroAtPerfectReconstruction) {
    const auto m = ReconstructionModel::zeros(2, 1, 3);
    Rng rng(1);
    const auto d = DiscriminatorParams::random(3, 3, rng);
    const MatrixXd x = MatrixXd::Zero(4, 2);
    const MatrixXd y = random_matrix(4, 1, rng);
    const auto g = compute_gradients(LossKind::Generator, x, y, m, d, 0.1);
    EXPECT_EQ(g.loss, 0.0);
    for (double v : flatten(g.generator)) EXPECT_EQ(v, 0.0);
}

TEST(Gradients, StopGradientContract) {
    Rng rng(2);
    const auto m = ReconstructionModel::random(2, 1, 3, rng);
    const auto d = DiscriminatorParams::random(3, 3, rng);
    const MatrixXd x = random_matrix(4, 2, rng), y = random_matrix(4, 1, rng);
    const auto gd = compute_gradients(LossKind::Discriminator, x, y, m, d, 0.1);
    for (double v : flatten(gd.generator)) EXPECT_EQ(v, 0.0);
    const auto gg = compute_gradients(LossKind::Generator, x, y, m, d, 0.1);
    for (double v : flatten(gg.discriminator)) EXPECT_EQ(v, 0.0);
}

TEST(Gradients, Deterministic) {
    Rng rng(3);
    const auto m = ReconstructionModel::random(2, 1, 3, rng);
    const auto d = DiscriminatorParams::random(3, 3, rng);
    const MatrixXd x = random_matrix(4, 2, rng), y = random_matrix(4, 1, rng);
    for (auto kind : {LossKind::Generator, LossKind::Discriminator}) {
        const auto a = compute_gradients(kind, x, y, m, d, 0.1);
        const auto b = compute_gradients(kind, x, y, m, d, 0.1);
        EXPECT_EQ(a.loss, b.loss);
        EXPECT_EQ(flatten(a.generator), flatten(b.generator));
        EXPECT_EQ(flatten(a.discriminator), flatten(b.discriminator));
    }
}

TEST(Gradients, LossMatchesForwardEvaluation) {
    Rng rng(4);
    const auto m = ReconstructionModel::random(2, 1, 3, rng);
    const auto d = DiscriminatorParams::random(3, 3, rng);
    const MatrixXd x = random_matrix(5, 2, rng), y = random_matrix(5, 1, rng);
    const MatrixXd xr = reconstruct(x, y, m);
    const auto fr = discriminate(x, y, d), ff = discriminate(xr, y, d);
    const auto gg = compute_gradients(LossKind::Generator, x, y, m, d, 0.3);
    EXPECT_NEAR(gg.loss, generator_loss(x, xr, fr.features, ff.features, 0.3), 1e-13);
    const auto gd = compute_gradients(LossKind::Discriminator, x, y, m, d, 0.3);
    EXPECT_NEAR(gd.loss, discriminator_loss(fr.prob, ff.prob), 1e-13);
}

TEST(Gradients, MatchFiniteDifferencesSeed7) {
    // d_h = 4, M = 2, C = 1, l = 5.
    const auto inst = testing_support::make_gradient_instance(7, 4, 2, 1, 5, 1);
    for (auto kind : {LossKind::Generator, LossKind::Discriminator}) {
        const auto report = testing_support::check_gradients(kind, inst);
        EXPECT_LT(report.max_rel_error, 1e-4) << "kind " << int(kind) << " worst coordinate " << report.worst_index;
        EXPECT_GT(report.coordinates, 0u);
    }
}

TEST(Gradients, MatchFiniteDifferencesBatchedWithoutFeedback) {
    auto inst = testing_support::make_gradient_instance(21, 3, 3, 2, 4, 3);
    inst.model.decoder_feedback = false;
    for (auto kind : {LossKind::Generator, LossKind::Discriminator}) {
        const auto report = testing_support::check_gradients(kind, inst);
        EXPECT_LT(report.max_rel_error, 1e-4);
    }
}
