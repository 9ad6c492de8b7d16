#include <cmath>

#include <gtest/gtest.h>

#include "hmm_oracle.hpp"
#include "missgan/hmm.hpp"

using namespace missgan;
using Eigen::MatrixXd;

namespace {

MatrixXd random_seq(Rng& rng, Index l, Index d) {
    MatrixXd m(l, d);
    for (Index j = 0; j < d; ++j)
        for (Index i = 0; i < l; ++i) m(i, j) = rng.normal(0.0, 1.5);
    return m;
}

HmmParams standard_normal_1d() {
    HmmParams h;
    h.pi = Eigen::VectorXd::Ones(1);
    h.A = MatrixXd::Ones(1, 1);
    h.means = MatrixXd::Zero(1, 1);
    h.vars = MatrixXd::Ones(1, 1);
    return h;
}

} // namespace

TEST(HmmForward, SingleStandardNormalTick) {
    EXPECT_NEAR(hmm_forward_loglik(MatrixXd::Zero(1, 1), standard_normal_1d()), -0.9189385, 1e-7);
}

TEST(HmmForward, TwoStatesThreeTicksMatchesEnumeration) {
    Rng rng(1);
    const auto h = testing_support::random_hmm(rng, 2, 1);
    const MatrixXd seq = random_seq(rng, 3, 1);
    EXPECT_NEAR(hmm_forward_loglik(seq, h), testing_support::brute_force_loglik(seq, h), 1e-9);
}

TEST(HmmForward, MatchesEnumerationOnRandomInstances) {
    Rng rng(2);
    for (int i = 0; i < 100; ++i) {
        const Index k = 1 + static_cast<Index>(rng.below(3));
        const Index l = 1 + static_cast<Index>(rng.below(6));
        const Index d = 1 + static_cast<Index>(rng.below(2));
        const auto h = testing_support::random_hmm(rng, k, d);
        const MatrixXd seq = random_seq(rng, l, d);
        EXPECT_NEAR(hmm_forward_loglik(seq, h), testing_support::brute_force_loglik(seq, h), 1e-9);
    }
}

TEST(HmmForward, AppendingNeverIncreasesWithSubUnitDensities) {
    Rng rng(3);
    for (int i = 0; i < 50; ++i) {
        auto h = testing_support::random_hmm(rng, 3, 1);
        h.vars = h.vars.cwiseMax(0.2); // density <= 1/sqrt(2 pi 0.2) < 1
        const MatrixXd seq = random_seq(rng, 8, 1);
        double prev = 0.0;
        for (Index l = 1; l <= 8; ++l) {
            const double ll = hmm_forward_loglik(seq.topRows(l), h);
            EXPECT_LE(ll, prev + 1e-12);
            prev = ll;
        }
    }
}

TEST(HmmForward, StableOnLongSequences) {
    Rng rng(4);
    const auto h = testing_support::random_hmm(rng, 3, 2);
    const MatrixXd seq = random_seq(rng, 20000, 2);
    EXPECT_TRUE(std::isfinite(hmm_forward_loglik(seq, h)));
}

TEST(Viterbi, SingleStateIsAllZero) {
    Rng rng(5);
    const auto path = viterbi(random_seq(rng, 7, 1), standard_normal_1d());
    for (int s : path.states) EXPECT_EQ(s, 0);
}

TEST(Viterbi, MatchesEnumeration) {
    Rng rng(6);
    for (int i = 0; i < 100; ++i) {
        const Index k = 1 + static_cast<Index>(rng.below(3));
        const Index l = 1 + static_cast<Index>(rng.below(6));
        const Index d = 1 + static_cast<Index>(rng.below(2));
        const auto h = testing_support::random_hmm(rng, k, d);
        const MatrixXd seq = random_seq(rng, l, d);
        const auto got = viterbi(seq, h);
        const auto [path, lp] = testing_support::brute_force_viterbi(seq, h);
        EXPECT_EQ(got.states, path);
        EXPECT_NEAR(got.loglik, lp, 1e-9);
        EXPECT_LE(got.loglik, hmm_forward_loglik(seq, h) + 1e-12);
    }
}

TEST(Viterbi, TiesGoToLowerState) {
    HmmParams h;
    h.pi = Eigen::VectorXd::Constant(2, 0.5);
    h.A = MatrixXd::Constant(2, 2, 0.5);
    h.means = MatrixXd::Zero(2, 1);
    h.vars = MatrixXd::Ones(2, 1);
    const auto path = viterbi(MatrixXd::Zero(4, 1), h);
    for (int s : path.states) EXPECT_EQ(s, 0);
}

TEST(BaumWelch, SingleStateIsClosedForm) {
    Rng rng(7);
    const MatrixXd seq = random_seq(rng, 50, 2);
    const auto h = baum_welch_fit(seq, 1);
    EXPECT_DOUBLE_EQ(h.pi(0), 1.0);
    EXPECT_DOUBLE_EQ(h.A(0, 0), 1.0);
    for (Index j = 0; j < 2; ++j) {
        const double mean = seq.col(j).mean();
        const double var = (seq.col(j).array() - mean).square().mean();
        EXPECT_NEAR(h.means(0, j), mean, 1e-12);
        EXPECT_NEAR(h.vars(0, j), var, 1e-10);
    }
}

TEST(BaumWelch, VarianceFloorOnConstantData) {
    const auto h = baum_welch_fit(MatrixXd::Constant(10, 1, 3.0), 1);
    EXPECT_DOUBLE_EQ(h.vars(0, 0), kVarianceFloor);
    EXPECT_DOUBLE_EQ(h.means(0, 0), 3.0);
}

TEST(BaumWelch, LikelihoodIsMonotone) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(100 + seed);
        const auto truth = testing_support::random_hmm(rng, 3, 2);
        std::vector<MatrixXd> data;
        for (int s = 0; s < 3; ++s) data.push_back(random_seq(rng, 60, 2));
        std::vector<SeqRef> refs(data.begin(), data.end());
        std::vector<double> trace;
        BaumWelchOptions opt;
        opt.seed = seed;
        opt.trace = &trace;
        const auto fit = baum_welch_fit(refs, 3, opt);
        fit.validate();
        ASSERT_GE(trace.size(), 2u);
        for (std::size_t i = 1; i < trace.size(); ++i) EXPECT_GE(trace[i], trace[i - 1] - 1e-9) << "iteration " << i;
    }
}

TEST(BaumWelch, RecoversTwoAlternatingClusters) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed);
        MatrixXd seq(400, 1);
        for (Index t = 0; t < 400; ++t) seq(t, 0) = rng.normal((t / 40) % 2 == 0 ? -2.0 : 3.0, 0.5);
        BaumWelchOptions opt;
        opt.seed = seed;
        const auto h = baum_welch_fit(seq, 2, opt);
        const double lo = std::min(h.means(0, 0), h.means(1, 0));
        const double hi = std::max(h.means(0, 0), h.means(1, 0));
        EXPECT_NEAR(lo, -2.0, 0.1);
        EXPECT_NEAR(hi, 3.0, 0.1);
    }
}

TEST(BaumWelch, Errors) {
    EXPECT_THROW(baum_welch_fit(std::vector<SeqRef>{}, 2), ShapeError);
    EXPECT_THROW(baum_welch_fit(MatrixXd::Zero(2, 1), 3), ShapeError);
    EXPECT_THROW(baum_welch_fit(MatrixXd::Zero(2, 1), 0), ConfigError);
}

TEST(HmmForward, PrefixAndSuffixLikelihoodsMatchSlices) {
    Rng rng(8);
    for (int i = 0; i < 20; ++i) {
        const auto h = testing_support::random_hmm(rng, 1 + static_cast<Index>(rng.below(3)), 2);
        const MatrixXd seq = random_seq(rng, 12, 2);
        const auto pre = prefix_logliks(seq, h);
        const auto suf = suffix_logliks(seq, h);
        for (Index t = 0; t < 12; ++t) {
            EXPECT_NEAR(pre(t), hmm_forward_loglik(seq.topRows(t + 1), h), 1e-9);
            EXPECT_NEAR(suf(t), hmm_forward_loglik(seq.bottomRows(12 - t), h), 1e-9);
        }
    }
}

TEST(BaumWelch, WarmStartNeverLowersLikelihood) {
    Rng rng(9);
    const auto start = testing_support::random_hmm(rng, 3, 1);
    const MatrixXd seq = random_seq(rng, 80, 1);
    BaumWelchOptions opt;
    opt.init = &start;
    opt.max_iterations = 5;
    const auto fit = baum_welch_fit(seq, 3, opt);
    EXPECT_GE(hmm_forward_loglik(seq, fit), hmm_forward_loglik(seq, start) - 1e-9);
    const auto wrong = testing_support::random_hmm(rng, 2, 1);
    opt.init = &wrong;
    EXPECT_THROW(baum_welch_fit(seq, 3, opt), ShapeError);
}

TEST(BaumWelch, DeterministicForFixedSeed) {
    Rng rng(10);
    const MatrixXd seq = random_seq(rng, 120, 2);
    EXPECT_EQ(baum_welch_fit(seq, 3), baum_welch_fit(seq, 3));
}
