#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <sys/wait.h>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "uga/eval.hpp"
#include "uga/train.hpp"

using namespace uga;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

class Workdir : public ::testing::Test {
protected:
    void SetUp() override {
        const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
        dir_ = fs::temp_directory_path() / (std::string("uga_evalcli_") + info->name() + "_" +
                                            std::to_string(std::random_device{}()));
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }

    std::string path(const std::string& name) const { return (dir_ / name).string(); }

    // Exit status of the CLI with `args`; stdout and stderr go to a log file.
    int cli(const std::string& args) const {
        const std::string cmd = std::string(UGA_CLI_PATH) + " " + args + " >>" + path("log.txt") + " 2>&1";
        const int rc = std::system(cmd.c_str());
        return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    }

    void write(const std::string& name, const std::string& text) const {
        std::ofstream os(path(name));
        os << text;
    }

    fs::path dir_;
};

MetricsRow row(std::string task, std::string method, std::uint64_t seed, double mae_value) {
    MetricsRow r{std::move(task), std::move(method), seed, {}};
    r.metrics.mae = mae_value;
    r.metrics.mse = mae_value * mae_value;
    r.metrics.r2 = 1.0 - mae_value;
    r.metrics.coverage90 = 0.9;
    return r;
}

}  // namespace

// ---------------------------------------------------------------------------
// Metrics

TEST(Metrics, HandComputedValues) {
    const std::vector<double> y{1, 2, 3}, p{3, 2, 1};
    EXPECT_DOUBLE_EQ(mae(p, y), 4.0 / 3.0);
    EXPECT_DOUBLE_EQ(mse(p, y), 8.0 / 3.0);
    EXPECT_DOUBLE_EQ(r2(p, y), -3.0);
    EXPECT_DOUBLE_EQ(r2(y, y), 1.0);
    EXPECT_EQ(r2(std::vector<double>{2, 2, 2}, y), 0.0);
    EXPECT_EQ(r2(std::vector<double>{1, 0}, std::vector<double>{0, 1}), -3.0);
    EXPECT_EQ(mae(std::vector<double>{0, 2}, std::vector<double>{0, 0}), 1.0);
    EXPECT_EQ(mse(std::vector<double>{0, 2}, std::vector<double>{0, 0}), 2.0);
}

TEST(Histogram, ConstantHeadGivesIdenticalRows) {
    auto bundle = init_bundle(MlpSpec{{1, 3}, {Activation::Tanh}, 0.0}, 2);
    for (auto& v : bundle.param("head.weight").value.values()) v = 0.0;
    const auto a = gen_cubic_shift({0.0, 1.0, 0.05, 25, 3});
    const auto rows = uncertainty_histograms(bundle, {{"source", a.unlabeled()}});
    ASSERT_EQ(rows.size(), 25u);
    for (const auto& r : rows) {
        EXPECT_EQ(r.aleatoric, rows[0].aleatoric);
        EXPECT_EQ(r.epistemic, rows[0].epistemic);
    }
    EXPECT_THROW(uncertainty_histograms(bundle, {}), std::invalid_argument);
}

TEST(Metrics, R2IsScaleInvariant) {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n(0, 1);
    std::vector<double> y(50), p(50), ys(50), ps(50);
    for (std::size_t i = 0; i < 50; ++i) {
        y[i] = n(rng);
        p[i] = y[i] + 0.3 * n(rng);
        ys[i] = 7 * y[i] - 2;
        ps[i] = 7 * p[i] - 2;
    }
    EXPECT_NEAR(r2(p, y), r2(ps, ys), 1e-12);
}

TEST(Metrics, DegenerateInputsRejected) {
    const std::vector<double> c{2, 2, 2}, p{1, 2, 3};
    EXPECT_THROW(r2(p, c), std::invalid_argument);
    EXPECT_THROW(r2(std::vector<double>{1}, std::vector<double>{1}), std::invalid_argument);
    EXPECT_THROW(mae(std::vector<double>{}, std::vector<double>{}), std::invalid_argument);
    EXPECT_THROW(mse(p, std::vector<double>{1, 2}), std::invalid_argument);
}

TEST(Metrics, CoverageCountsClosedIntervals) {
    const std::vector<Interval> iv{{0, 1}, {0, 1}, {0, 1}, {0, 1}};
    EXPECT_DOUBLE_EQ(coverage(iv, std::vector<double>{0.5, 1.0, 1.5, -0.1}), 0.5);
    EXPECT_THROW(coverage(iv, std::vector<double>{0.5}), std::invalid_argument);
}

TEST(Metrics, QuantileInterpolates) {
    EXPECT_DOUBLE_EQ(quantile({4, 1, 3, 2}, 0.5), 2.5);
    EXPECT_DOUBLE_EQ(quantile({4, 1, 3, 2}, 0.0), 1.0);
    EXPECT_DOUBLE_EQ(quantile({4, 1, 3, 2}, 1.0), 4.0);
    EXPECT_DOUBLE_EQ(median({5, 1, 9}), 5.0);
    EXPECT_THROW(quantile({}, 0.5), std::invalid_argument);
}

TEST(Evaluate, MatchesManualPredictions) {
    auto d = gen_cubic_domains({0.0, 1.0, 0.05, 200, 1}, {1.0, 1.0, 0.05, 150, 2});
    const auto bundle = init_bundle(MlpSpec{{1, 6}, {Activation::Tanh}, 0.1}, 4);
    const auto m = evaluate(bundle, d.target, &d.source);
    const auto preds = predict(bundle, d.target);
    std::vector<double> g;
    for (const auto& p : preds) g.push_back(p.gamma);
    EXPECT_DOUBLE_EQ(m.mae, mae(g, d.target.labels));
    EXPECT_DOUBLE_EQ(m.r2, r2(g, d.target.labels));
    EXPECT_DOUBLE_EQ(m.posterior_gap, posterior_gap(predict(bundle, d.source), preds));
    EXPECT_TRUE(std::isnan(evaluate(bundle, d.target).posterior_gap));
    // inference ignores dropout
    EXPECT_EQ(evaluate(bundle, d.target).mae, m.mae);
}

TEST(Evaluate, ChunkingDoesNotChangePredictions) {
    const auto d = gen_cubic_shift({0.0, 1.0, 0.05, 77, 9});
    const auto bundle = init_bundle(MlpSpec{{1, 5, 5}, {Activation::Sigmoid}, 0.0}, 2);
    const auto a = predict(bundle, d, 256);
    const auto b = predict(bundle, d, 10);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].beta, b[i].beta);
}

// ---------------------------------------------------------------------------
// Tables

TEST(MetricsCsv, RoundTripKeepsValuesAndBlankGap) {
    std::vector<MetricsRow> rows{row("cubic", "source_only", 0, 0.125), row("cubic", "uga_feature", 1, 1.0 / 3.0)};
    rows[1].metrics.posterior_gap = 0.002;
    std::stringstream ss;
    write_metrics_csv(ss, rows);
    const auto back = read_metrics_csv(ss);
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[1].metrics.mae, 1.0 / 3.0);
    EXPECT_EQ(back[1].seed, 1u);
    EXPECT_TRUE(std::isnan(back[0].metrics.posterior_gap));
    EXPECT_EQ(back[1].metrics.posterior_gap, 0.002);
}

TEST(MetricsCsv, BadHeaderOrRowRejected) {
    std::istringstream bad_header("task,method\n");
    EXPECT_THROW(read_metrics_csv(bad_header), csv_error);
    std::istringstream short_row(std::string(kMetricsHeader) + "\na,b,0,1\n");
    EXPECT_THROW(read_metrics_csv(short_row), csv_error);
}

TEST(Report, MeansOverSeedsAndMarksMissingCells) {
    const std::vector<MetricsRow> rows{row("cubic", "uga_feature", 0, 0.1), row("cubic", "uga_feature", 1, 0.3),
                                       row("cubic", "source_only", 0, 0.5), row("battery", "source_only", 0, 0.7)};
    const auto t = build_report(rows, "mae");
    EXPECT_EQ(t.methods, (std::vector<std::string>{"source_only", "uga_feature"}));
    EXPECT_DOUBLE_EQ(t.cells.at("cubic").at("uga_feature"), 0.2);
    std::ostringstream os;
    write_report_csv(os, t);
    EXPECT_EQ(os.str(), "task,source_only,uga_feature\ncubic,0.5,0.2\nbattery,0.7,NA\n");
}

TEST(Report, ExplicitColumnsAndUnknownMetric) {
    const std::vector<MetricsRow> rows{row("cubic", "coral", 0, 0.4)};
    const auto t = build_report(rows, "mae", {"mmd", "coral"});
    std::ostringstream os;
    write_report_csv(os, t);
    EXPECT_EQ(os.str(), "task,mmd,coral\ncubic,NA,0.4\n");
    EXPECT_THROW(build_report(rows, "accuracy"), std::invalid_argument);
}

TEST(Histogram, RowsPerDomainAndSummary) {
    const auto bundle = init_bundle(MlpSpec{{1, 4}, {Activation::Tanh}, 0.0}, 1);
    const auto a = gen_cubic_shift({0.0, 1.0, 0.05, 30, 1});
    const auto b = gen_cubic_shift({2.0, 1.0, 0.05, 20, 2});
    const auto rows = uncertainty_histograms(bundle, {{"source", a.unlabeled()}, {"target", b.unlabeled()}});
    ASSERT_EQ(rows.size(), 50u);
    EXPECT_EQ(rows[29].domain, "source");
    EXPECT_EQ(rows[30].domain, "target");
    EXPECT_EQ(rows[30].sample_idx, 0u);
    for (const auto& r : rows) EXPECT_DOUBLE_EQ(r.total, r.aleatoric + r.epistemic);

    std::ostringstream os;
    write_uncertainty_summary(os, rows);
    std::istringstream is(os.str());
    std::string line;
    std::getline(is, line);
    EXPECT_EQ(line, "domain,measure,q05,q25,q50,q75,q95,mean");
    std::size_t n = 0;
    while (std::getline(is, line)) {
        const auto c = detail::split_csv_line(line);
        ASSERT_EQ(c.size(), 8u);
        for (std::size_t k = 3; k < 7; ++k) EXPECT_LE(std::stod(c[k - 1]), std::stod(c[k]));
        ++n;
    }
    EXPECT_EQ(n, 6u);
}

TEST(Manifest, FingerprintAndSidecarPath) {
    EXPECT_EQ(fingerprint_bytes(""), "cbf29ce484222325");
    EXPECT_EQ(fingerprint_bytes("a"), "af63dc4c8601ec8c");
    EXPECT_NE(fingerprint_bytes("ab"), fingerprint_bytes("ba"));
    EXPECT_EQ(manifest_path_for("out/metrics.csv"), "out/metrics.csv.manifest.json");
}

TEST(Methods, NamesForEveryAlignment) {
    EXPECT_EQ(method_name(AlignmentKind::None), "source_only");
    EXPECT_EQ(method_name(AlignmentKind::UgaFeature), "uga_feature");
    for (auto k : {AlignmentKind::PlainMMD, AlignmentKind::CORAL, AlignmentKind::UgaFeature,
                   AlignmentKind::UgaPosterior}) {
        const auto& c = canonical_methods();
        EXPECT_NE(std::find(c.begin(), c.end(), method_name(k)), c.end());
    }
}

// ---------------------------------------------------------------------------
// Command line

using Cli = Workdir;

TEST_F(Cli, UsageErrorsExitTwo) {
    EXPECT_EQ(cli(""), 2);
    EXPECT_EQ(cli("frobnicate"), 2);
    EXPECT_EQ(cli("datagen cubic"), 2);
    EXPECT_EQ(cli("--help"), 0);
}

TEST_F(Cli, BadConfigExitsTwo) {
    ASSERT_EQ(cli("datagen cubic --n 50 --out " + path("s.csv")), 0);
    write("bad.json", R"({"lr": 0.1, "warmup": 5})");
    EXPECT_EQ(cli("train --config " + path("bad.json") + " --source " + path("s.csv") + " --target " + path("s.csv") +
                  " --out " + path("m.ckpt")),
              2);
    write("broken.json", "{ not json");
    EXPECT_EQ(cli("train --config " + path("broken.json") + " --source " + path("s.csv") + " --target " +
                  path("s.csv") + " --out " + path("m.ckpt")),
              2);
    EXPECT_FALSE(fs::exists(path("m.ckpt")));
}

TEST_F(Cli, MissingInputExitsOne) {
    write("t.csv", "x0,y\n");
    write("cfg.json", "{}");
    EXPECT_EQ(cli("train --config " + path("cfg.json") + " --source " + path("t.csv") + " --target " + path("t.csv") +
                  " --out " + path("m.ckpt")),
              1);
}

TEST_F(Cli, GradcheckPasses) { EXPECT_EQ(cli("gradcheck --seed 3"), 0); }

TEST_F(Cli, CubicPipelineEndToEnd) {
    ASSERT_EQ(cli("datagen cubic --n 300 --seed 1 --out " + path("src.csv")), 0);
    ASSERT_EQ(cli("datagen cubic --n 300 --shift 2 --seed 2 --out " + path("tgt.csv")), 0);
    write("cfg.json", R"({"alignment": "uga_feature", "iterations": 50, "hidden": [8], "batch_size": 16})");
    ASSERT_EQ(cli("train --config " + path("cfg.json") + " --source " + path("src.csv") + " --target " +
                  path("tgt.csv") + " --out " + path("m.ckpt") + " --history " + path("h.csv") + " --seed 7"),
              0);
    EXPECT_TRUE(fs::exists(path("m.ckpt.manifest.json")));
    ASSERT_EQ(cli("eval --checkpoint " + path("m.ckpt") + " --data " + path("tgt.csv") + " --reference " +
                  path("src.csv") + " --task cubic --out " + path("metrics.csv") + " --histogram " + path("u.csv") +
                  " --histogram-summary " + path("us.csv")),
              0);
    const auto manifest = nlohmann::json::parse(slurp(path("metrics.csv.manifest.json")));
    EXPECT_EQ(manifest.at("command"), "eval");
    EXPECT_EQ(manifest.at("seed"), 7);
    EXPECT_EQ(manifest.at("outputs").at(path("u.csv")), fingerprint_file(path("u.csv")));
    EXPECT_EQ(manifest.at("config").at("iterations"), 50);
    EXPECT_TRUE(manifest.at("versions").contains("boost"));

    ASSERT_EQ(cli("eval --checkpoint " + path("m.ckpt") + " --data " + path("src.csv") +
                  " --task cubic_src --append --out " + path("metrics.csv")),
              0);

    std::ifstream is(path("metrics.csv"));
    const auto rows = read_metrics_csv(is);
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[0].method, "uga_feature");
    EXPECT_EQ(rows[0].seed, 7u);
    EXPECT_TRUE(std::isfinite(rows[0].metrics.posterior_gap));
    EXPECT_TRUE(std::isnan(rows[1].metrics.posterior_gap));

    const auto history = slurp(path("h.csv"));
    EXPECT_EQ(std::count(history.begin(), history.end(), '\n'), 51);

    ASSERT_EQ(cli("report --metrics " + path("metrics.csv") + " --metric r2 --out " + path("report.csv")), 0);
    const auto report = slurp(path("report.csv"));
    EXPECT_EQ(report.substr(0, report.find('\n')), "task,uga_feature");
    EXPECT_NE(report.find("cubic_src,"), std::string::npos);
}

TEST_F(Cli, BatteryPipelineUsesCycleSplit) {
    ASSERT_EQ(cli("datagen battery --temp -10 --cycles 5 --seed 1 --out " + path("cold.csv")), 0);
    ASSERT_EQ(cli("datagen battery --temp 25 --cycles 5 --seed 2 --sample-hz 2 --out " + path("warm.csv")), 0);
    write("cfg.json", R"({"model": "lstm", "lstm_hidden": 4, "lstm_layers": 1, "iterations": 5,
                          "batch_size": 4, "window_len": 20, "window_stride": 50, "alignment": "coral"})");
    ASSERT_EQ(cli("train --config " + path("cfg.json") + " --source " + path("cold.csv") + " --target " +
                  path("warm.csv") + " --out " + path("b.ckpt")),
              0);
    ASSERT_EQ(cli("eval --checkpoint " + path("b.ckpt") + " --data " + path("warm.csv") +
                  " --stride 100 --task battery --out " + path("bm.csv")),
              0);
    std::ifstream is(path("bm.csv"));
    const auto rows = read_metrics_csv(is);
    ASSERT_EQ(rows.size(), 1u);
    EXPECT_EQ(rows[0].method, "coral");
    EXPECT_TRUE(std::isfinite(rows[0].metrics.mae));
}

TEST_F(Cli, RepeatedRunsAreByteIdentical) {
    ASSERT_EQ(cli("datagen cubic --n 200 --seed 1 --out " + path("src.csv")), 0);
    ASSERT_EQ(cli("datagen cubic --n 200 --shift 2 --seed 2 --out " + path("tgt.csv")), 0);
    write("cfg.json", R"({"alignment": "uga_posterior", "iterations": 40, "hidden": [6, 6]})");
    for (const char* tag : {"a", "b"}) {
        const std::string t(tag);
        ASSERT_EQ(cli("train --config " + path("cfg.json") + " --source " + path("src.csv") + " --target " +
                      path("tgt.csv") + " --out " + path(t + ".ckpt")),
                  0);
        ASSERT_EQ(cli("eval --checkpoint " + path(t + ".ckpt") + " --data " + path("tgt.csv") + " --reference " +
                      path("src.csv") + " --out " + path(t + ".csv")),
                  0);
    }
    EXPECT_EQ(slurp(path("a.ckpt")), slurp(path("b.ckpt")));
    EXPECT_EQ(slurp(path("a.csv")), slurp(path("b.csv")));
}

TEST_F(Cli, ReportWarnsOnTamperedMetrics) {
    ASSERT_EQ(cli("datagen cubic --n 100 --seed 1 --out " + path("src.csv")), 0);
    write("cfg.json", R"({"alignment": "none", "iterations": 5})");
    ASSERT_EQ(cli("train --config " + path("cfg.json") + " --source " + path("src.csv") + " --target " +
                  path("src.csv") + " --out " + path("m.ckpt")),
              0);
    ASSERT_EQ(cli("eval --checkpoint " + path("m.ckpt") + " --data " + path("src.csv") + " --out " + path("m.csv")),
              0);
    std::ofstream(path("m.csv"), std::ios::app) << "extra,source_only,0,1,1,0,0.9,\n";
    fs::remove(path("log.txt"));
    ASSERT_EQ(cli("report --metrics " + path("m.csv")), 0);
    EXPECT_NE(slurp(path("log.txt")).find("warning"), std::string::npos);
}
