#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "uga/eval.hpp"
#include "uga/train.hpp"

using namespace uga;

namespace {

struct Domains {
    LabeledSet source;
    LabeledSet target;
};

Domains small_cubic(double shift, std::uint64_t seed, std::size_t n = 300) {
    auto d = gen_cubic_domains({0.0, 1.0, 0.05, n, 100 + seed}, {shift, 1.0, 0.05, n, 200 + seed});
    const auto fs = FeatureScaler::fit(d.source);
    fs.apply(d.source);
    fs.apply(d.target);
    return {std::move(d.source), std::move(d.target)};
}

TrainConfig quick_config(AlignmentKind k, std::uint64_t seed = 0) {
    TrainConfig c;
    c.alignment = k;
    c.iterations = 60;
    c.batch_size = 16;
    c.hidden = {8, 8};
    c.seed = seed;
    return c;
}

bool same_bundle(const ModelBundle& a, const ModelBundle& b) {
    if (a.params.size() != b.params.size()) return false;
    for (std::size_t i = 0; i < a.params.size(); ++i) {
        if (a.params[i].value != b.params[i].value) return false;
    }
    return true;
}

}  // namespace

// ---------------------------------------------------------------------------
// Schedule

TEST(LambdaSchedule, EndpointsAndMidpoint) {
    EXPECT_EQ(lambda_schedule(0.0), 0.0);
    // 2 / (1 + e^{-10p}) - 1 == tanh(5p)
    EXPECT_NEAR(lambda_schedule(0.5), std::tanh(2.5), 1e-15);
    EXPECT_NEAR(lambda_schedule(1.0), std::tanh(5.0), 1e-15);
    EXPECT_NEAR(lambda_schedule(0.5), 0.9866143, 1e-7);
    EXPECT_NEAR(lambda_schedule(1.0), 0.9999092, 1e-7);
}

TEST(LambdaSchedule, StrictlyIncreasing) {
    double prev = lambda_schedule(0.0);
    for (int i = 1; i <= 100; ++i) {
        const double v = lambda_schedule(i / 100.0);
        EXPECT_GT(v, prev);
        prev = v;
    }
}

TEST(LambdaSchedule, ProgressOutsideUnitIntervalRejected) {
    EXPECT_THROW(lambda_schedule(-0.01), std::invalid_argument);
    EXPECT_THROW(lambda_schedule(1.01), std::invalid_argument);
    EXPECT_THROW(lambda_schedule(std::nan("")), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Optimizers

TEST(Sgd, ZeroEverythingLeavesParamsUnchanged) {
    Tensor p = Tensor::vector({1.0, -2.0});
    Tensor v({2}, 0.0);
    sgd_step(p, Tensor({2}, 0.0), v, 0.1, 0.9, 0.0);
    EXPECT_EQ(p, Tensor::vector({1.0, -2.0}));
}

TEST(Sgd, PlainStepWithoutMomentum) {
    Tensor p = Tensor::vector({1.0, -2.0});
    Tensor v({2}, 0.0);
    sgd_step(p, Tensor::vector({0.5, 4.0}), v, 0.1, 0.0, 0.0);
    EXPECT_EQ(p[0], 1.0 - 0.1 * 0.5);
    EXPECT_EQ(p[1], -2.0 - 0.1 * 4.0);
}

TEST(Sgd, MomentumAndWeightDecay) {
    Tensor p = Tensor::vector({1.0});
    Tensor v({1}, 0.0);
    const Tensor g = Tensor::vector({2.0});
    sgd_step(p, g, v, 0.1, 0.5, 0.1);  // v = 2.1, p = 0.79
    EXPECT_NEAR(p[0], 0.79, 1e-15);
    sgd_step(p, g, v, 0.1, 0.5, 0.1);  // v = 1.05 + 2.079 = 3.129, p = 0.4771
    EXPECT_NEAR(v[0], 3.129, 1e-15);
    EXPECT_NEAR(p[0], 0.4771, 1e-15);
}

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
    Tensor p = Tensor::vector({0.3});
    Tensor m({1}, 0.0), v({1}, 0.0);
    adam_step(p, Tensor({1}, 0.0), m, v, 1, 0.01);
    EXPECT_EQ(p[0], 0.3);
}

TEST(Adam, FirstStepIsSignScaled) {
    for (double g : {1e-3, 0.5, 40.0, -7.0}) {
        Tensor p = Tensor::vector({0.0});
        Tensor m({1}, 0.0), v({1}, 0.0);
        adam_step(p, Tensor::vector({g}), m, v, 1, 0.01);
        EXPECT_NEAR(p[0], -0.01 * g / (std::abs(g) + 1e-8), 1e-15);
    }
}

TEST(Adam, StepCountStartsAtOne) {
    Tensor p({1}, 0.0), m({1}, 0.0), v({1}, 0.0);
    EXPECT_THROW(adam_step(p, p, m, v, 0, 0.1), std::invalid_argument);
}

TEST(Optimizer, PerGroupLearningRates) {
    TrainConfig cfg;
    cfg.optimizer = OptimizerKind::Sgd;
    cfg.momentum = 0.0;
    cfg.lr = 0.1;
    cfg.lr_extractor = 0.01;
    ModelBundle b = init_bundle(MlpSpec{{2, 3}, {Activation::Tanh}, 0.0}, 1);
    const ModelBundle before = b;
    std::vector<Tensor> grads;
    for (const auto& p : b.params) grads.emplace_back(p.value.shape(), 1.0);
    Optimizer opt(b, cfg);
    opt.step(b, grads);
    for (std::size_t i = 0; i < b.params.size(); ++i) {
        const double lr = b.params[i].extractor ? 0.01 : 0.1;
        EXPECT_NEAR(before.params[i].value[0] - b.params[i].value[0], lr, 1e-15) << b.params[i].name;
    }
}

// ---------------------------------------------------------------------------
// Config

TEST(Config, JsonRoundTrip) {
    TrainConfig c;
    c.alignment = AlignmentKind::CORAL;
    c.lr_extractor = 0.01;
    c.hidden = {4, 5, 6};
    c.model = "lstm";
    c.window_stride = 3;
    const TrainConfig back = config_from_json(to_json(c));
    EXPECT_EQ(to_json(back), to_json(c));
}

TEST(Config, MissingKeysKeepDefaults) {
    const TrainConfig c = config_from_json(nlohmann::json::parse(R"({"lr": 0.05})"));
    EXPECT_EQ(c.lr, 0.05);
    EXPECT_EQ(c.iterations, TrainConfig{}.iterations);
}

TEST(Config, UnknownKeyRejected) {
    EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"learning_rate": 0.1})")), config_error);
}

TEST(Config, InvalidValuesRejected) {
    EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"lr": -1})")), config_error);
    EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"lr": "fast"})")), config_error);
    EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"alignment": "dann"})")), config_error);
    EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"iterations": 0})")), config_error);
    EXPECT_THROW(config_from_json(nlohmann::json::parse(R"([1, 2])")), config_error);
}

// ---------------------------------------------------------------------------
// Loss assembly

TEST(AssembleLoss, LambdaZeroGivesSupervisedOnly) {
    const auto d = small_cubic(2.0, 0, 64);
    const auto bundle = init_bundle(MlpSpec{{1, 8}, {Activation::Tanh}, 0.0}, 0);
    for (auto k : {AlignmentKind::None, AlignmentKind::PlainMMD, AlignmentKind::CORAL, AlignmentKind::UgaFeature,
                   AlignmentKind::UgaPosterior}) {
        Tape t;
        Rng rng(0);
        const auto params = bind(t, bundle);
        std::vector<std::size_t> rows(32);
        for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
        const auto fs = model_forward(bundle, params, t.constant(d.source.gather(rows)), false, rng);
        const auto ft = model_forward(bundle, params, t.constant(d.target.gather(rows)), false, rng);
        TrainConfig cfg;
        cfg.alignment = k;
        const auto loss = assemble_loss(fs, t.constant(d.source.gather_labels(rows)), &ft, cfg, 0.0);
        EXPECT_EQ(loss.total.item(), loss.supervised.item()) << to_string(k);
        if (k != AlignmentKind::None) {
            EXPECT_GE(loss.alignment.item(), 0.0);
        }
        const auto full = assemble_loss(fs, t.constant(d.source.gather_labels(rows)), &ft, cfg, 0.5);
        if (k != AlignmentKind::None) {
            EXPECT_NEAR(full.total.item(), full.supervised.item() + 0.5 * full.alignment.item(), 1e-14);
        }
    }
}

TEST(AssembleLoss, PlainMmdSupervisesGammaWithSquaredError) {
    Tape t;
    const Var raw = t.constant(Tensor::matrix(2, 4, {0.2, 0, 0, 0, 0.7, 0, 0, 0}));
    ForwardResult f{t.constant(Tensor({2, 1}, 0.0)), raw, nig_from_raw(raw)};
    TrainConfig cfg;
    cfg.alignment = AlignmentKind::PlainMMD;
    const auto loss = assemble_loss(f, t.constant(Tensor::matrix(2, 1, {0.0, 1.0})), &f, cfg, 1.0);
    EXPECT_NEAR(loss.supervised.item(), (0.04 + 0.09) / 2.0, 1e-15);
}

TEST(AssembleLoss, AlignmentNeedsTarget) {
    Tape t;
    const Var raw = t.constant(Tensor::matrix(1, 4, {0, 0, 0, 0}));
    ForwardResult f{t.constant(Tensor({1, 1}, 0.0)), raw, nig_from_raw(raw)};
    TrainConfig cfg;
    EXPECT_THROW(assemble_loss(f, t.constant(Tensor({1, 1}, 0.0)), nullptr, cfg, 1.0), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Training loop

TEST(Train, SameSeedSameBundle) {
    const auto d = small_cubic(2.0, 1);
    const auto cfg = quick_config(AlignmentKind::UgaFeature, 3);
    const auto spec = extractor_from_config(cfg, d.source);
    const auto a = train_uga(d.source, d.target.unlabeled(), cfg, spec);
    const auto b = train_uga(d.source, d.target.unlabeled(), cfg, spec);
    EXPECT_TRUE(same_bundle(a.bundle, b.bundle));
    const auto c = train_uga(d.source, d.target.unlabeled(), quick_config(AlignmentKind::UgaFeature, 4), spec);
    EXPECT_FALSE(same_bundle(a.bundle, c.bundle));
}

TEST(Train, NoAlignmentEqualsZeroSchedule) {
    const auto d = small_cubic(2.0, 2);
    for (auto k : {AlignmentKind::UgaFeature, AlignmentKind::UgaPosterior, AlignmentKind::CORAL}) {
        const auto cfg = quick_config(k, 5);
        const auto spec = extractor_from_config(cfg, d.source);
        const auto zeroed = train_uga(d.source, d.target.unlabeled(), cfg, spec, [](double) { return 0.0; });
        const auto plain = train_uga(d.source, d.target.unlabeled(), quick_config(AlignmentKind::None, 5), spec);
        EXPECT_TRUE(same_bundle(zeroed.bundle, plain.bundle)) << to_string(k);
    }
}

TEST(Train, HistoryFollowsSchedule) {
    const auto d = small_cubic(2.0, 3);
    const auto cfg = quick_config(AlignmentKind::UgaPosterior);
    const auto r = train_uga(d.source, d.target.unlabeled(), cfg, extractor_from_config(cfg, d.source));
    ASSERT_EQ(r.history.size(), cfg.iterations);
    for (std::size_t i = 0; i < r.history.size(); ++i) {
        EXPECT_EQ(r.history[i].iteration, i + 1);
        EXPECT_EQ(r.history[i].lambda, lambda_schedule(static_cast<double>(i + 1) / cfg.iterations));
        EXPECT_TRUE(std::isfinite(r.history[i].supervised));
        EXPECT_GE(r.history[i].alignment, 0.0);
    }
}

TEST(Train, NonFiniteLossAborts) {
    const auto d = small_cubic(2.0, 4);
    const auto cfg = quick_config(AlignmentKind::UgaFeature);
    EXPECT_THROW(train_uga(d.source, d.target.unlabeled(), cfg, extractor_from_config(cfg, d.source),
                           [](double) { return std::numeric_limits<double>::infinity(); }),
                 training_diverged);
}

TEST(Train, EmptyOrMismatchedDataRejected) {
    const auto d = small_cubic(2.0, 5);
    const auto cfg = quick_config(AlignmentKind::UgaFeature);
    const auto spec = extractor_from_config(cfg, d.source);
    EXPECT_THROW(train_uga(d.source, UnlabeledSet{1, 1, {}}, cfg, spec), std::invalid_argument);
    UnlabeledSet wide{1, 2, {0.0, 1.0}};
    EXPECT_THROW(train_uga(d.source, wide, cfg, spec), shape_error);
}

TEST(Train, SourceFitImprovesOverInitialization) {
    const auto d = small_cubic(0.0, 6, 500);
    auto cfg = quick_config(AlignmentKind::None);
    cfg.iterations = 600;
    cfg.hidden = {16, 16};
    const auto spec = extractor_from_config(cfg, d.source);
    const auto init = init_bundle(spec, cfg.seed);
    const auto r = train_uga(d.source, {}, cfg, spec);
    EXPECT_LT(evaluate(r.bundle, d.source).mae, 0.5 * evaluate(init, d.source).mae);
}

TEST(Train, NullShiftLeavesAccuracyUnchanged) {
    std::vector<double> so, uga;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto d = gen_cubic_domains({0.0, 1.0, 0.05, 500, 10 + seed}, {0.0, 1.0, 0.05, 500, 20 + seed});
        const auto fs = FeatureScaler::fit(d.source);
        fs.apply(d.source);
        fs.apply(d.target);
        auto cfg = quick_config(AlignmentKind::None, seed);
        cfg.iterations = 500;
        cfg.hidden = {16, 16};
        cfg.dropout = 0.0;
        const auto spec = extractor_from_config(cfg, d.source);
        so.push_back(evaluate(train_uga(d.source, d.target.unlabeled(), cfg, spec).bundle, d.target).mae);
        cfg.alignment = AlignmentKind::UgaFeature;
        uga.push_back(evaluate(train_uga(d.source, d.target.unlabeled(), cfg, spec).bundle, d.target).mae);
    }
    double mean = 0.0, var = 0.0;
    for (double v : so) mean += v / 5;
    for (double v : so) var += (v - mean) * (v - mean) / 4;
    EXPECT_LE(std::abs(median(uga) - median(so)), 2.0 * std::sqrt(var));
}
