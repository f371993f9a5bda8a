// uga: datagen | train | eval | gradcheck | report
//
// Exit status: 0 success, 1 failed check or runtime error, 2 usage or config error.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <boost/version.hpp>
#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "uga/uga.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailed = 1;
constexpr int kExitUsage = 2;

using uga::format_double;
using Clock = std::chrono::steady_clock;

bool is_battery_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path);
    std::string header;
    std::getline(is, header);
    return header.rfind("time_s", 0) == 0;
}

struct DataOptions {
    std::string dataset = "Panasonic";
    std::string split = "all";
    std::size_t window_len = 100;
    std::size_t stride = 10;
};

uga::LabeledSet load_labeled(const std::string& path, const DataOptions& o) {
    if (!is_battery_csv(path)) return uga::read_vector_csv(path);
    auto series = uga::ingest_battery_csv(path);
    if (o.split != "all") {
        auto split = uga::split_by_cycle(series, uga::parse_battery_dataset(o.dataset));
        if (o.split == "train") series = std::move(split.train);
        else if (o.split == "test") series = std::move(split.test);
        else throw std::invalid_argument("--split must be train, test or all");
    }
    return uga::window_all(series, o.window_len, o.stride);
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    os << text;
    if (!os) throw std::runtime_error("write failed: " + path);
}

std::string read_text(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

nlohmann::json versions() {
    return {{"uga", uga::kArtifactVersion},
            {"compiler", __VERSION__},
            {"boost", BOOST_LIB_VERSION},
            {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                  std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                  std::to_string(NLOHMANN_JSON_VERSION_PATCH)}};
}

nlohmann::json hashes(const std::vector<std::string>& paths) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& p : paths) j[p] = uga::fingerprint_file(p);
    return j;
}

void write_manifest(const std::string& artifact, const std::string& command, nlohmann::json config,
                    std::uint64_t seed, const std::vector<std::string>& inputs, const std::vector<std::string>& outputs,
                    Clock::time_point start) {
    nlohmann::json m;
    m["command"] = command;
    m["config"] = std::move(config);
    m["seed"] = seed;
    m["inputs"] = hashes(inputs);
    m["outputs"] = hashes(outputs);
    m["versions"] = versions();
    m["wall_clock_s"] = std::chrono::duration<double>(Clock::now() - start).count();
    write_text(uga::manifest_path_for(artifact), m.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// datagen
// ---------------------------------------------------------------------------

struct CubicArgs {
    uga::SyntheticShiftSpec spec;
    std::string out;
};

struct BatteryArgs {
    uga::BatteryGenSpec spec;
    std::string dataset = "Panasonic";
    std::string out;
};

int run_cubic(const CubicArgs& a) {
    uga::write_vector_csv(a.out, uga::gen_cubic_shift(a.spec));
    return kExitOk;
}

int run_battery(BatteryArgs a) {
    a.spec.dataset = uga::parse_battery_dataset(a.dataset);
    uga::write_battery_csv(a.out, uga::gen_battery_curves(a.spec));
    return kExitOk;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string config;
    std::string source;
    std::string target;
    std::string out;
    std::string history;
    std::string dataset = "Panasonic";
    std::optional<std::uint64_t> seed;
};

uga::TrainConfig load_config(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw uga::config_error(std::string("config: ") + e.what());
    }
    return uga::config_from_json(j);
}

int run_train(const TrainArgs& a) {
    const auto start = Clock::now();
    uga::TrainConfig cfg = load_config(a.config);
    if (a.seed) cfg.seed = *a.seed;

    const DataOptions data{a.dataset, "train", cfg.window_len, cfg.window_stride};
    uga::LabeledSet source = load_labeled(a.source, data);
    uga::UnlabeledSet target = load_labeled(a.target, data).unlabeled();

    const auto labels = uga::LabelScaler::fit(source.labels);
    labels.apply(source);
    const auto features =
        cfg.standardize ? uga::FeatureScaler::fit(source) : uga::FeatureScaler::identity(source.features);
    features.apply(source);
    features.apply(target);

    const auto result = uga::train_uga(source, target, cfg, uga::extractor_from_config(cfg, source));

    uga::Checkpoint ck{result.bundle, {}};
    ck.meta["alignment"] = uga::to_string(cfg.alignment);
    ck.meta["seed"] = std::to_string(cfg.seed);
    ck.meta["label_lo"] = format_double(labels.lo);
    ck.meta["label_hi"] = format_double(labels.hi);
    ck.meta["feature_scaler"] = features.encode();
    ck.meta["window_len"] = std::to_string(cfg.window_len);
    ck.meta["dataset"] = a.dataset;
    ck.meta["config"] = uga::to_json(cfg).dump();
    uga::save_checkpoint(a.out, ck);

    std::vector<std::string> outputs{a.out};
    if (!a.history.empty()) {
        std::ostringstream os;
        os << "iteration,supervised,alignment,lambda\n";
        for (const auto& h : result.history) {
            os << h.iteration << ',' << format_double(h.supervised) << ',' << format_double(h.alignment) << ','
               << format_double(h.lambda) << '\n';
        }
        write_text(a.history, os.str());
        outputs.push_back(a.history);
    }
    write_manifest(a.out, "train", uga::to_json(cfg), cfg.seed, {a.config, a.source, a.target}, outputs, start);
    std::cout << "trained " << result.history.size() << " iterations, final supervised loss "
              << format_double(result.history.back().supervised) << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalArgs {
    std::string checkpoint;
    std::string data;
    std::string reference;
    std::string task = "task";
    std::string method;
    std::string split = "test";
    std::size_t stride = 1;
    std::string out;
    bool append = false;
    std::string histogram;
    std::string histogram_summary;
};

const std::string& meta(const uga::Checkpoint& ck, const std::string& key) {
    const auto it = ck.meta.find(key);
    if (it == ck.meta.end()) throw std::runtime_error("checkpoint lacks meta '" + key + "'");
    return it->second;
}

int run_eval(const EvalArgs& a) {
    const auto start = Clock::now();
    const auto ck = uga::load_checkpoint(a.checkpoint);
    const uga::LabelScaler labels{std::stod(meta(ck, "label_lo")), std::stod(meta(ck, "label_hi"))};
    const auto features = uga::FeatureScaler::decode(meta(ck, "feature_scaler"));
    const DataOptions data{meta(ck, "dataset"), a.split, std::stoul(meta(ck, "window_len")), a.stride};

    uga::LabeledSet target = load_labeled(a.data, data);
    labels.apply(target);
    features.apply(target);
    std::optional<uga::UnlabeledSet> reference;
    if (!a.reference.empty()) {
        reference = load_labeled(a.reference, data).unlabeled();
        features.apply(*reference);
    }

    const std::uint64_t seed = std::stoull(meta(ck, "seed"));
    uga::MetricsRow row{a.task,
                        a.method.empty() ? uga::method_name(uga::parse_alignment(meta(ck, "alignment"))) : a.method,
                        seed, uga::evaluate(ck.bundle, target, reference ? &*reference : nullptr)};

    std::vector<uga::MetricsRow> rows;
    if (a.append && std::filesystem::exists(a.out) && std::filesystem::file_size(a.out) > 0) {
        std::ifstream is(a.out);
        rows = uga::read_metrics_csv(is);
    }
    rows.push_back(row);
    std::ostringstream os;
    uga::write_metrics_csv(os, rows);
    write_text(a.out, os.str());

    std::vector<std::string> inputs{a.checkpoint, a.data};
    if (!a.reference.empty()) inputs.push_back(a.reference);
    std::vector<std::string> outputs{a.out};
    if (!a.histogram.empty() || !a.histogram_summary.empty()) {
        std::vector<uga::NamedSet> domains{{"target", target.unlabeled()}};
        if (reference) domains.push_back({"source", *reference});
        const auto hist = uga::uncertainty_histograms(ck.bundle, domains);
        if (!a.histogram.empty()) {
            std::ostringstream hs;
            uga::write_uncertainty_csv(hs, hist);
            write_text(a.histogram, hs.str());
            outputs.push_back(a.histogram);
        }
        if (!a.histogram_summary.empty()) {
            std::ostringstream ss;
            uga::write_uncertainty_summary(ss, hist);
            write_text(a.histogram_summary, ss.str());
            outputs.push_back(a.histogram_summary);
        }
    }
    write_manifest(a.out, "eval", nlohmann::json::parse(meta(ck, "config")), seed, inputs, outputs, start);
    std::cout << row.task << ' ' << row.method << " mae " << format_double(row.metrics.mae) << " r2 "
              << format_double(row.metrics.r2) << " coverage90 " << format_double(row.metrics.coverage90) << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// gradcheck / report
// ---------------------------------------------------------------------------

int run_gradcheck(std::uint64_t seed) {
    bool ok = true;
    for (const auto& r : uga::run_gradcheck(seed)) {
        std::cout << std::left << std::setw(16) << r.name << " points " << std::setw(4) << r.points << " max_error "
                  << std::setw(12) << r.max_error << " tol " << r.tolerance << "  " << (r.passed() ? "ok" : "FAIL")
                  << "\n";
        ok = ok && r.passed();
    }
    return ok ? kExitOk : kExitFailed;
}

struct ReportArgs {
    std::vector<std::string> metrics;
    std::string metric = "mae";
    std::vector<std::string> methods;
    std::string out;
};

int run_report(const ReportArgs& a) {
    std::vector<uga::MetricsRow> rows;
    for (const auto& path : a.metrics) {
        const std::string manifest = uga::manifest_path_for(path);
        if (std::filesystem::exists(manifest)) {
            const auto m = nlohmann::json::parse(read_text(manifest));
            const auto recorded = m.value("outputs", nlohmann::json::object()).value(path, std::string());
            if (!recorded.empty() && recorded != uga::fingerprint_file(path)) {
                std::cerr << "warning: " << path << " differs from the hash in its manifest\n";
            }
        }
        std::ifstream is(path);
        if (!is) throw std::runtime_error("cannot open " + path);
        auto part = uga::read_metrics_csv(is);
        rows.insert(rows.end(), part.begin(), part.end());
    }
    std::ostringstream os;
    uga::write_report_csv(os, uga::build_report(rows, a.metric, a.methods));
    if (a.out.empty()) std::cout << os.str();
    else write_text(a.out, os.str());
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Evidential regression with uncertainty-guided domain alignment"};
    app.require_subcommand(1);

    auto* datagen = app.add_subcommand("datagen", "Write synthetic datasets as CSV");
    datagen->require_subcommand(1);
    CubicArgs cubic;
    auto* cubic_cmd = datagen->add_subcommand("cubic", "Cubic regression domain (x0,y schema)");
    cubic_cmd->add_option("--shift", cubic.spec.shift, "Input translation");
    cubic_cmd->add_option("--scale", cubic.spec.scale, "Input scale")->check(CLI::PositiveNumber);
    cubic_cmd->add_option("--noise-sd", cubic.spec.noise_sd, "Label noise standard deviation")
        ->check(CLI::NonNegativeNumber);
    cubic_cmd->add_option("--n", cubic.spec.n, "Sample count");
    cubic_cmd->add_option("--seed", cubic.spec.seed, "Random seed");
    cubic_cmd->add_option("--out", cubic.out, "Output CSV")->required();

    BatteryArgs battery;
    auto* battery_cmd = datagen->add_subcommand("battery", "Simulated drive-cycle discharges (battery schema)");
    battery_cmd->add_option("--dataset", battery.dataset, "LG or Panasonic");
    battery_cmd->add_option("--temp", battery.spec.temp_c, "Ambient temperature in C");
    battery_cmd->add_option("--cycles", battery.spec.n_cycles, "Number of drive-cycle series");
    battery_cmd->add_option("--seed", battery.spec.seed, "Random seed");
    battery_cmd->add_option("--sample-hz", battery.spec.sample_hz, "Sampling rate")->check(CLI::PositiveNumber);
    battery_cmd->add_option("--out", battery.out, "Output CSV")->required();

    TrainArgs train;
    std::uint64_t train_seed = 0;
    auto* train_cmd = app.add_subcommand("train", "Train from a JSON config");
    train_cmd->add_option("--config", train.config, "JSON config")->required()->check(CLI::ExistingFile);
    train_cmd->add_option("--source", train.source, "Labeled source CSV")->required()->check(CLI::ExistingFile);
    train_cmd->add_option("--target", train.target, "Target CSV (labels ignored)")->required()->check(CLI::ExistingFile);
    train_cmd->add_option("--out", train.out, "Checkpoint path")->required();
    train_cmd->add_option("--history", train.history, "Per-iteration loss CSV");
    train_cmd->add_option("--dataset", train.dataset, "Battery dataset for the cycle split");
    auto* seed_opt = train_cmd->add_option("--seed", train_seed, "Override the config seed");

    EvalArgs eval;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a labeled dataset");
    eval_cmd->add_option("--checkpoint", eval.checkpoint, "Checkpoint path")->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--data", eval.data, "Labeled evaluation CSV")->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--reference", eval.reference, "Source-domain CSV for the posterior gap")
        ->check(CLI::ExistingFile);
    eval_cmd->add_option("--task", eval.task, "Task label for the metrics row");
    eval_cmd->add_option("--method", eval.method, "Method label (default: from the checkpoint)");
    eval_cmd->add_option("--split", eval.split, "Battery cycles to use: train, test or all");
    eval_cmd->add_option("--stride", eval.stride, "Battery window stride")->check(CLI::PositiveNumber);
    eval_cmd->add_option("--out", eval.out, "Metrics CSV")->required();
    eval_cmd->add_flag("--append", eval.append, "Append to an existing metrics CSV");
    eval_cmd->add_option("--histogram", eval.histogram, "Per-sample uncertainty CSV");
    eval_cmd->add_option("--histogram-summary", eval.histogram_summary, "Uncertainty quantile summary CSV");

    std::uint64_t grad_seed = 0;
    auto* grad_cmd = app.add_subcommand("gradcheck", "Run the finite-difference gradient suites");
    grad_cmd->add_option("--seed", grad_seed, "Random seed");

    ReportArgs report;
    auto* report_cmd = app.add_subcommand("report", "Join metrics CSVs into a tasks x methods table");
    report_cmd->add_option("--metrics", report.metrics, "Metrics CSVs")->required()->check(CLI::ExistingFile);
    report_cmd->add_option("--metric", report.metric, "mae, mse, r2, coverage90 or posterior_gap");
    report_cmd->add_option("--methods", report.methods, "Column order (default: every method seen)");
    report_cmd->add_option("--out", report.out, "Output CSV (default: stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*cubic_cmd) return run_cubic(cubic);
        if (*battery_cmd) return run_battery(battery);
        if (*train_cmd) {
            if (*seed_opt) train.seed = train_seed;
            return run_train(train);
        }
        if (*eval_cmd) return run_eval(eval);
        if (*grad_cmd) return run_gradcheck(grad_seed);
        if (*report_cmd) return run_report(report);
    } catch (const uga::config_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailed;
    }
    return kExitUsage;
}
