#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "missgan/checkpoint.hpp"
#include "missgan/detector.hpp"
#include "missgan/synth.hpp"
#include "missgan/trainer.hpp"

using namespace missgan;
using Eigen::MatrixXd;

namespace {

TrainConfig tiny_config() {
    TrainConfig cfg;
    cfg.d_h = 6;
    cfg.d_r = 2;
    cfg.l_init = 24;
    cfg.epochs = 2;
    cfg.iterations = 2;
    cfg.batch_size = 4;
    cfg.hmm_states = 2;
    cfg.seed = 3;
    return cfg;
}

TimeSeries tiny_series(Index ticks = 160) {
    SyntheticSpec spec;
    spec.modes = {{Waveform::Sine, 8, 1.0}, {Waveform::Square, 12, 0.5}};
    spec.ticks = ticks;
    spec.seed = 5;
    return synth_generate(spec);
}

SegmentBatch random_batch(Rng& rng, Index B, Index l, Index M, Index C) {
    MatrixXd x(B * l, M), y(B * l, C);
    for (Index i = 0; i < x.rows(); ++i) {
        for (Index j = 0; j < M; ++j) x(i, j) = rng.normal();
        for (Index j = 0; j < C; ++j) y(i, j) = rng.uniform();
    }
    std::vector<SegmentBounds> segs;
    for (Index b = 0; b < B; ++b) segs.push_back({b * l, l});
    return make_batch(x, y, segs);
}

} // namespace

TEST(LrSchedule, DecaysByQuarterEveryEightEpochs) {
    EXPECT_EQ(lr_at_epoch(0.001, 0), 0.001);
    EXPECT_EQ(lr_at_epoch(0.001, 8), 0.00075);
    EXPECT_EQ(lr_at_epoch(0.001, 16), 0.0005625);
    double prev = lr_at_epoch(0.001, 0);
    for (long e = 1; e < 64; ++e) {
        const double lr = lr_at_epoch(0.001, e);
        EXPECT_LE(lr, prev);
        if (e % 8 != 0) {
            EXPECT_EQ(lr, prev) << "epoch " << e;
        }
        prev = lr;
    }
    EXPECT_THROW(lr_at_epoch(0.001, -1), ConfigError);
}

TEST(TrainConfigKeys, DefaultsAndRoundTrip) {
    const TrainConfig cfg;
    EXPECT_EQ(cfg.lambda, 0.1);
    EXPECT_EQ(cfg.lr, 0.001);
    EXPECT_EQ(cfg.alpha, 0.1);
    EXPECT_EQ(cfg.d_h, 100);
    EXPECT_EQ(cfg.d_r, 6);
    EXPECT_EQ(cfg.l_init, 512);
    EXPECT_EQ(cfg.iterations, 5);
    EXPECT_EQ(cfg.hmm_states, 4);

    TrainConfig changed;
    std::istringstream in("lambda=0.25\nnorm=zscore\ndecoder_feedback=off\nseed=42\nrefit_work=0\n");
    apply_train_config(changed, parse_key_values(in));
    EXPECT_EQ(changed.lambda, 0.25);
    EXPECT_EQ(changed.norm, NormMode::ZScore);
    EXPECT_FALSE(changed.decoder_feedback);
    EXPECT_EQ(changed.seed, 42u);

    TrainConfig back;
    std::istringstream text(format_train_config(changed));
    apply_train_config(back, parse_key_values(text));
    EXPECT_EQ(back, changed);
}

TEST(TrainConfigKeys, RejectsUnknownAndBadValues) {
    TrainConfig cfg;
    try {
        apply_train_config(cfg, {{"lambada", "0.1"}});
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("lambada"), std::string::npos);
    }
    EXPECT_THROW(apply_train_config(cfg, {{"epochs", "many"}}), ConfigError);
    EXPECT_THROW(apply_train_config(cfg, {{"norm", "robust"}}), ConfigError);
    TrainConfig bad;
    bad.d_r = 200;
    EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(TrainEpoch, ZeroLearningRateLeavesParameters) {
    Rng rng(1);
    TrainerState st{ReconstructionModel::random(2, 1, 5, rng), DiscriminatorParams::random(3, 5, rng), AdamState{}, AdamState{}};
    const auto before = st;
    const std::vector<SegmentBatch> batches{random_batch(rng, 3, 4, 2, 1), random_batch(rng, 2, 6, 2, 1)};
    const auto losses = train_reconstruction_epoch(st, batches, 0.1, 0.0);
    EXPECT_EQ(st.model, before.model);
    EXPECT_EQ(st.disc, before.disc);
    EXPECT_GT(losses.generator, 0.0);
    EXPECT_LT(losses.discriminator, 0.0);
}

TEST(TrainEpoch, SingleStepIsAdamOfComputedGradients) {
    Rng rng(2);
    TrainerState st{ReconstructionModel::random(2, 1, 4, rng), DiscriminatorParams::random(3, 4, rng), AdamState{}, AdamState{}};
    const auto batch = random_batch(rng, 3, 5, 2, 1);

    // Hand composition: discriminator ascends, then generator descends
    // against the updated discriminator.
    auto disc = st.disc;
    auto model = st.model;
    AdamState ad, ag;
    auto gd = flatten(compute_gradients(LossKind::Discriminator, batch, model, disc, 0.1).discriminator);
    for (auto& g : gd) g = -g;
    auto pd = flatten(disc);
    adam_step(ad, pd, gd, 0.01);
    unflatten(pd, disc);
    const auto gg = flatten(compute_gradients(LossKind::Generator, batch, model, disc, 0.1).generator);
    auto pg = flatten(model);
    adam_step(ag, pg, gg, 0.01);
    unflatten(pg, model);

    std::vector<UpdateKind> order;
    train_reconstruction_epoch(st, {batch}, 0.1, 0.01, &order);
    EXPECT_EQ(st.disc, disc);
    EXPECT_EQ(st.model, model);
    EXPECT_EQ(order, (std::vector<UpdateKind>{UpdateKind::Discriminator, UpdateKind::Generator}));
}

TEST(TrainEpoch, GradientsStayOnTheirSide) {
    Rng rng(3);
    const auto m = ReconstructionModel::random(2, 1, 4, rng);
    const auto d = DiscriminatorParams::random(3, 4, rng);
    const auto batch = random_batch(rng, 2, 5, 2, 1);
    const auto gg = compute_gradients(LossKind::Generator, batch, m, d, 0.1);
    const auto gd = compute_gradients(LossKind::Discriminator, batch, m, d, 0.1);
    for (double v : flatten(gg.discriminator)) EXPECT_EQ(v, 0.0);
    for (double v : flatten(gd.generator)) EXPECT_EQ(v, 0.0);
}

TEST(TrainEpoch, NonFiniteLossNamesTheBatch) {
    Rng rng(4);
    TrainerState st{ReconstructionModel::random(2, 1, 4, rng), DiscriminatorParams::random(3, 4, rng), AdamState{}, AdamState{}};
    auto bad = random_batch(rng, 2, 3, 2, 1);
    st.model.head_b(0) = std::numeric_limits<double>::infinity();
    try {
        train_reconstruction_epoch(st, {random_batch(rng, 2, 3, 2, 1), bad}, 0.1, 0.01);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("batch 0"), std::string::npos) << e.what();
    }
}

TEST(Batching, CapSplitsEvenly) {
    const auto out = cap_segments({{0, 10}, {10, 25}, {35, 3}}, 10);
    EXPECT_EQ(out, (std::vector<SegmentBounds>{{0, 10}, {10, 9}, {19, 8}, {27, 8}, {35, 3}}));
}

TEST(Batching, GroupsByExactLength) {
    Rng data_rng(5);
    const MatrixXd x = MatrixXd::Random(200, 2), y = MatrixXd::Random(200, 1);
    std::vector<SegmentBounds> segs;
    Index b = 0;
    while (b < 200) {
        const Index l = std::min<Index>(200 - b, 2 + static_cast<Index>(data_rng.below(4)));
        segs.push_back({b, l});
        b += l;
    }
    Rng rng(6), again(6);
    const auto batches = make_batches(x, y, segs, 3, rng);
    const auto same = make_batches(x, y, segs, 3, again);
    ASSERT_EQ(batches.size(), same.size());
    std::multiset<std::pair<double, Index>> seen, expected;
    for (std::size_t i = 0; i < batches.size(); ++i) {
        EXPECT_LE(batches[i].size(), 3);
        EXPECT_EQ(batches[i].x.front(), same[i].x.front());
        for (Index k = 0; k < batches[i].size(); ++k) seen.insert({batches[i].x.front()(k, 0), batches[i].length()});
    }
    for (const auto& s : segs) expected.insert({x(s.begin, 0), s.length});
    EXPECT_EQ(seen, expected);
}

TEST(HiddenRepresentation, ShapeZeroModelAndWatermarks) {
    Rng rng(7);
    const std::vector<SegmentBounds> segs{{0, 4}, {4, 7}, {11, 5}};
    const Index T = 16;
    MatrixXd x(T, 2), y(T, 1);
    for (std::size_t j = 0; j < segs.size(); ++j)
        for (Index t = segs[j].begin; t < segs[j].end(); ++t) {
            x.row(t).setConstant(static_cast<double>(j + 1));
            y(t, 0) = -static_cast<double>(j + 1);
        }
    EXPECT_TRUE(extract_hidden_representation(ReconstructionModel::zeros(2, 1, 5), x, y, segs).isZero(0.0));

    const auto m = ReconstructionModel::random(2, 1, 5, rng);
    const MatrixXd H = extract_hidden_representation(m, x, y, segs);
    ASSERT_EQ(H.rows(), T);
    ASSERT_EQ(H.cols(), 5);
    for (std::size_t j = 0; j < segs.size(); ++j) {
        // Each segment restarts from zero, so its rows equal the encoding of
        // a standalone series carrying only watermark j.
        const MatrixXd wx = MatrixXd::Constant(segs[j].length, 2, static_cast<double>(j + 1));
        const MatrixXd wy = MatrixXd::Constant(segs[j].length, 1, -static_cast<double>(j + 1));
        EXPECT_EQ(H.middleRows(segs[j].begin, segs[j].length), encode(wx, wy, m).hidden) << "segment " << j;
    }
    EXPECT_THROW(extract_hidden_representation(m, x, y, {{0, 4}, {5, 11}}), ShapeError);
    EXPECT_THROW(extract_hidden_representation(m, x, y, {{0, 4}}), ShapeError);
}

TEST(ScoringWindow, MedianClamped) {
    EXPECT_EQ(scoring_window_for({{0, 30}, {30, 40}, {70, 50}}, 512), 40);
    EXPECT_EQ(scoring_window_for({{0, 3}, {3, 4}, {7, 5}}, 512), 16);
    EXPECT_EQ(scoring_window_for({{0, 300}}, 50), 200);
}

TEST(MissganFit, LogsSegmentationsAndCapsSegments) {
    const auto series = tiny_series();
    auto cfg = tiny_config();
    int segmentations = 0;
    std::vector<UpdateKind> order;
    FitHooks hooks;
    hooks.on_segmentation = [&](int, const SegmentationResult&) { ++segmentations; };
    hooks.updates = &order;
    const auto ck = missgan_fit(series, cfg, hooks);

    const auto& segs = ck.log.segmentations;
    ASSERT_GE(segs.size(), 2u);
    EXPECT_EQ(segs.front(), cut_points_of(coarse_segment(series.length(), cfg.l_init)));
    EXPECT_EQ(segmentations, static_cast<int>(segs.size()) - 1);
    if (ck.log.converged) {
        EXPECT_EQ(segs[segs.size() - 1], segs[segs.size() - 2]);
    } else {
        EXPECT_EQ(static_cast<int>(segs.size()), cfg.iterations + 1);
    }
    EXPECT_EQ(ck.log.epochs.size(), static_cast<std::size_t>(segs.size()) * static_cast<std::size_t>(cfg.epochs));
    for (std::size_t i = 0; i < ck.log.epochs.size(); ++i) {
        EXPECT_EQ(ck.log.epochs[i].epoch, static_cast<long>(i));
        EXPECT_EQ(ck.log.epochs[i].lr, lr_at_epoch(cfg.lr, static_cast<long>(i)));
    }
    Index next = 0;
    for (const auto& s : ck.segments) {
        EXPECT_EQ(s.begin, next);
        EXPECT_LE(s.length, 4 * cfg.l_init);
        next = s.end();
    }
    EXPECT_EQ(next, series.length());
    EXPECT_EQ(ck.projection.input_dim(), cfg.d_h);
    EXPECT_EQ(ck.projection.output_dim(), cfg.d_r);
    ASSERT_EQ(order.size() % 2, 0u);
    for (std::size_t i = 0; i < order.size(); ++i)
        EXPECT_EQ(order[i], i % 2 == 0 ? UpdateKind::Discriminator : UpdateKind::Generator);
}

TEST(MissganFit, UnchangedCutsStopAfterOneIteration) {
    auto cfg = tiny_config();
    cfg.segmentation = false;
    cfg.iterations = 4;
    const auto ck = missgan_fit(tiny_series(), cfg);
    ASSERT_EQ(ck.log.segmentations.size(), 2u);
    EXPECT_EQ(ck.log.segmentations[0], ck.log.segmentations[1]);
    EXPECT_TRUE(ck.log.converged);
    EXPECT_EQ(ck.log.epochs.back().phase, 1);
    EXPECT_EQ(ck.projection.components.size(), 0);
}

TEST(MissganFit, BitwiseReproducible) {
    const auto series = tiny_series();
    const auto a = missgan_fit(series, tiny_config());
    const auto b = missgan_fit(series, tiny_config());
    EXPECT_EQ(serialize_checkpoint(a), serialize_checkpoint(b));
    auto other = tiny_config();
    other.seed = 4;
    EXPECT_NE(serialize_checkpoint(a), serialize_checkpoint(missgan_fit(series, other)));
}

TEST(CheckpointFile, RoundTripIsBitwise) {
    const auto series = tiny_series();
    const auto ck = missgan_fit(series, tiny_config());
    const auto bytes = serialize_checkpoint(ck);
    EXPECT_EQ(bytes.substr(0, 4), "MSGN");
    const auto back = deserialize_checkpoint(bytes);
    EXPECT_EQ(back, ck);
    EXPECT_EQ(serialize_checkpoint(back), bytes);

    const std::string path = ::testing::TempDir() + "missgan_ckpt_test.bin";
    save_checkpoint(path, ck);
    const auto loaded = load_checkpoint(path);
    std::remove(path.c_str());
    EXPECT_EQ(serialize_checkpoint(loaded), bytes);
    const auto r1 = score_raw_series(ck, series), r2 = score_raw_series(loaded, series);
    EXPECT_EQ(r1.raw, r2.raw);
    EXPECT_EQ(r1.errors, r2.errors);
}

TEST(CheckpointFile, RejectsCorruption) {
    const auto bytes = serialize_checkpoint(missgan_fit(tiny_series(), tiny_config()));
    EXPECT_THROW(deserialize_checkpoint("XXXX" + bytes.substr(4)), ParseError);
    EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() / 2)), ParseError);
    EXPECT_THROW(deserialize_checkpoint(bytes + "x"), ParseError);
    auto version = bytes;
    version[4] = 9;
    EXPECT_THROW(deserialize_checkpoint(version), ParseError);
    EXPECT_THROW(deserialize_checkpoint(""), ParseError);
}
