#pragma once

// Metrics, calibration and uncertainty diagnostics, run manifests and the
// method-comparison report.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "uga/alignment.hpp"
#include "uga/data.hpp"
#include "uga/evidential.hpp"
#include "uga/format.hpp"
#include "uga/models.hpp"

namespace uga {

// ---------------------------------------------------------------------------
// Point metrics
// ---------------------------------------------------------------------------

namespace detail {

inline void check_pairs(std::span<const double> a, std::span<const double> b, const char* op) {
    if (a.empty()) throw std::invalid_argument(std::string(op) + ": empty input");
    if (a.size() != b.size()) throw std::invalid_argument(std::string(op) + ": length mismatch");
}

}  // namespace detail

inline double mae(std::span<const double> preds, std::span<const double> labels) {
    detail::check_pairs(preds, labels, "mae");
    double s = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) s += std::abs(preds[i] - labels[i]);
    return s / static_cast<double>(preds.size());
}

inline double mse(std::span<const double> preds, std::span<const double> labels) {
    detail::check_pairs(preds, labels, "mse");
    double s = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) s += (preds[i] - labels[i]) * (preds[i] - labels[i]);
    return s / static_cast<double>(preds.size());
}

/// 1 - SS_res / SS_tot; negative when worse than predicting the mean.
inline double r2(std::span<const double> preds, std::span<const double> labels) {
    detail::check_pairs(preds, labels, "r2");
    if (labels.size() < 2) throw std::invalid_argument("r2: need at least 2 samples");
    double mean = 0.0;
    for (double y : labels) mean += y;
    mean /= static_cast<double>(labels.size());
    double ss_tot = 0.0, ss_res = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        ss_tot += (labels[i] - mean) * (labels[i] - mean);
        ss_res += (labels[i] - preds[i]) * (labels[i] - preds[i]);
    }
    if (ss_tot == 0.0) throw std::invalid_argument("r2: labels are constant");
    return 1.0 - ss_res / ss_tot;
}

inline double coverage(std::span<const Interval> intervals, std::span<const double> labels) {
    if (intervals.size() != labels.size()) throw std::invalid_argument("coverage: length mismatch");
    if (labels.empty()) throw std::invalid_argument("coverage: empty input");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hit += intervals[i].contains(labels[i]) ? 1 : 0;
    return static_cast<double>(hit) / static_cast<double>(labels.size());
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

/// NIG outputs for every sample, evaluated in chunks without dropout.
inline std::vector<NigOutput> predict(const ModelBundle& bundle, const UnlabeledSet& data, std::size_t chunk = 256) {
    std::vector<NigOutput> out;
    out.reserve(data.size());
    Rng unused(0);
    for (std::size_t start = 0; start < data.size(); start += chunk) {
        const std::size_t end = std::min(data.size(), start + chunk);
        std::vector<std::size_t> rows(end - start);
        for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = start + i;
        Tape tape;
        const auto params = bind_frozen(tape, bundle);
        const auto f = model_forward(bundle, params, tape.constant(data.gather(rows)), false, unused);
        for (std::size_t i = 0; i < rows.size(); ++i) out.push_back(f.nig.at(i));
    }
    return out;
}

inline Tensor posterior_matrix(std::span<const NigOutput> preds) {
    Tensor m({preds.size(), 3});
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const auto v = posterior_vector(preds[i]);
        std::copy(v.begin(), v.end(), m.values().begin() + static_cast<std::ptrdiff_t>(3 * i));
    }
    return m;
}

/// Squared MMD between the posterior-vector sets of two prediction lists.
inline double posterior_gap(std::span<const NigOutput> a, std::span<const NigOutput> b) {
    return mmd2_biased_value(posterior_matrix(a), posterior_matrix(b));
}

struct MetricsReport {
    double mae = 0.0;
    double mse = 0.0;
    double r2 = 0.0;
    double coverage90 = 0.0;
    double mean_aleatoric = 0.0;
    double mean_epistemic = 0.0;
    double mean_total = 0.0;
    /// NaN when no reference (source) set was supplied
    double posterior_gap = std::numeric_limits<double>::quiet_NaN();
};

/// Metrics of `bundle` on a labeled set; the posterior gap is measured
/// against `reference` (typically held-out source inputs) when given.
inline MetricsReport evaluate(const ModelBundle& bundle, const LabeledSet& data, const UnlabeledSet* reference = nullptr,
                              double level = 0.9) {
    data.validate();
    const auto preds = predict(bundle, data);
    std::vector<double> gamma(preds.size());
    std::vector<Interval> intervals(preds.size());
    MetricsReport r;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        gamma[i] = preds[i].gamma;
        intervals[i] = predictive_interval(preds[i], level);
        const auto u = uncertainties(preds[i]);
        r.mean_aleatoric += u.aleatoric;
        r.mean_epistemic += u.epistemic;
        r.mean_total += u.total();
    }
    const double n = static_cast<double>(preds.size());
    r.mean_aleatoric /= n;
    r.mean_epistemic /= n;
    r.mean_total /= n;
    r.mae = mae(gamma, data.labels);
    r.mse = mse(gamma, data.labels);
    r.r2 = r2(gamma, data.labels);
    r.coverage90 = coverage(intervals, data.labels);
    if (reference != nullptr) r.posterior_gap = posterior_gap(predict(bundle, *reference), preds);
    return r;
}

// ---------------------------------------------------------------------------
// Metrics CSV
// ---------------------------------------------------------------------------

inline std::string method_name(AlignmentKind k) {
    return k == AlignmentKind::None ? "source_only" : to_string(k);
}

struct MetricsRow {
    std::string task;
    std::string method;
    std::uint64_t seed = 0;
    MetricsReport metrics;
};

inline constexpr const char* kMetricsHeader = "task,method,seed,mae,mse,r2,coverage90,posterior_gap";

namespace detail {

inline std::string cell(double v) { return std::isnan(v) ? std::string() : format_double(v); }

}  // namespace detail

inline void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows) {
    os << kMetricsHeader << '\n';
    for (const auto& r : rows) {
        os << r.task << ',' << r.method << ',' << r.seed << ',' << detail::cell(r.metrics.mae) << ','
           << detail::cell(r.metrics.mse) << ',' << detail::cell(r.metrics.r2) << ','
           << detail::cell(r.metrics.coverage90) << ',' << detail::cell(r.metrics.posterior_gap) << '\n';
    }
}

inline std::vector<MetricsRow> read_metrics_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw csv_error("metrics csv: empty input");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != kMetricsHeader) throw csv_error("metrics csv: unexpected header '" + line + "'");
    std::vector<MetricsRow> rows;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto c = detail::split_csv_line(line);
        if (c.size() != 8) throw csv_error("metrics csv line " + std::to_string(lineno) + ": expected 8 cells");
        auto num = [&](std::size_t k, const char* name) {
            return c[k].empty() ? std::numeric_limits<double>::quiet_NaN() : detail::parse_number(c[k], lineno, name);
        };
        MetricsRow r;
        r.task = c[0];
        r.method = c[1];
        r.seed = static_cast<std::uint64_t>(detail::parse_number(c[2], lineno, "seed"));
        r.metrics.mae = num(3, "mae");
        r.metrics.mse = num(4, "mse");
        r.metrics.r2 = num(5, "r2");
        r.metrics.coverage90 = num(6, "coverage90");
        r.metrics.posterior_gap = num(7, "posterior_gap");
        rows.push_back(std::move(r));
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Uncertainty tables
// ---------------------------------------------------------------------------

struct UncertaintyRow {
    std::string domain;
    std::size_t sample_idx = 0;
    double aleatoric = 0.0;
    double epistemic = 0.0;
    double total = 0.0;
};

struct NamedSet {
    std::string name;
    UnlabeledSet data;
};

/// Per-sample aleatoric / epistemic / total uncertainty for every domain.
inline std::vector<UncertaintyRow> uncertainty_histograms(const ModelBundle& bundle, const std::vector<NamedSet>& domains) {
    if (domains.empty()) throw std::invalid_argument("uncertainty_histograms: no domain sets");
    std::vector<UncertaintyRow> rows;
    for (const auto& d : domains) {
        const auto preds = predict(bundle, d.data);
        for (std::size_t i = 0; i < preds.size(); ++i) {
            const auto u = uncertainties(preds[i]);
            rows.push_back({d.name, i, u.aleatoric, u.epistemic, u.total()});
        }
    }
    return rows;
}

inline void write_uncertainty_csv(std::ostream& os, const std::vector<UncertaintyRow>& rows) {
    os << "domain,sample_idx,aleatoric,epistemic,total\n";
    for (const auto& r : rows) {
        os << r.domain << ',' << r.sample_idx << ',' << format_double(r.aleatoric) << ','
           << format_double(r.epistemic) << ',' << format_double(r.total) << '\n';
    }
}

/// Linear-interpolated quantile of an unsorted sample.
inline double quantile(std::vector<double> v, double q) {
    if (v.empty()) throw std::invalid_argument("quantile: empty sample");
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline double median(std::vector<double> v) { return quantile(std::move(v), 0.5); }

/// Box-plot summary per domain and uncertainty kind.
inline void write_uncertainty_summary(std::ostream& os, const std::vector<UncertaintyRow>& rows) {
    os << "domain,measure,q05,q25,q50,q75,q95,mean\n";
    std::vector<std::string> order;
    for (const auto& r : rows) {
        if (std::find(order.begin(), order.end(), r.domain) == order.end()) order.push_back(r.domain);
    }
    for (const auto& d : order) {
        std::vector<double> a, e, t;
        for (const auto& r : rows) {
            if (r.domain != d) continue;
            a.push_back(r.aleatoric);
            e.push_back(r.epistemic);
            t.push_back(r.total);
        }
        for (const auto& [name, v] : {std::pair<const char*, const std::vector<double>&>{"aleatoric", a},
                                      {"epistemic", e},
                                      {"total", t}}) {
            double mean = 0.0;
            for (double x : v) mean += x;
            mean /= static_cast<double>(v.size());
            os << d << ',' << name;
            for (double q : {0.05, 0.25, 0.5, 0.75, 0.95}) os << ',' << format_double(quantile(v, q));
            os << ',' << format_double(mean) << '\n';
        }
    }
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

inline constexpr const char* kArtifactVersion = "0.1.0";

/// 64-bit FNV-1a over raw bytes, as 16 hex digits.
inline std::string fingerprint_bytes(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

inline std::string fingerprint_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return fingerprint_bytes(ss.str());
}

inline std::string manifest_path_for(const std::string& artifact) { return artifact + ".manifest.json"; }

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& canonical_methods() {
    static const std::vector<std::string> m{"source_only", "mmd", "coral", "uga_feature", "uga_posterior"};
    return m;
}

struct ReportTable {
    std::string metric;
    std::vector<std::string> tasks;
    std::vector<std::string> methods;
    /// cells[task][method]; absent pairs have no value
    std::map<std::string, std::map<std::string, double>> cells;
};

inline double metric_value(const MetricsReport& m, const std::string& metric) {
    if (metric == "mae") return m.mae;
    if (metric == "mse") return m.mse;
    if (metric == "r2") return m.r2;
    if (metric == "coverage90") return m.coverage90;
    if (metric == "posterior_gap") return m.posterior_gap;
    throw std::invalid_argument("report: unknown metric '" + metric + "'");
}

/// Tasks x methods table of the mean metric over seeds. `methods` fixes the
/// column set; when empty the columns are every method seen, canonical ones first.
inline ReportTable build_report(const std::vector<MetricsRow>& rows, const std::string& metric,
                                std::vector<std::string> methods = {}) {
    ReportTable t;
    t.metric = metric;
    std::map<std::string, std::map<std::string, std::pair<double, std::size_t>>> acc;
    std::set<std::string> seen;
    for (const auto& r : rows) {
        if (std::find(t.tasks.begin(), t.tasks.end(), r.task) == t.tasks.end()) t.tasks.push_back(r.task);
        seen.insert(r.method);
        const double v = metric_value(r.metrics, metric);
        if (std::isnan(v)) continue;
        auto& a = acc[r.task][r.method];
        a.first += v;
        a.second += 1;
    }
    if (methods.empty()) {
        for (const auto& m : canonical_methods()) {
            if (seen.count(m)) methods.push_back(m);
        }
        for (const auto& m : seen) {
            if (std::find(methods.begin(), methods.end(), m) == methods.end()) methods.push_back(m);
        }
    }
    t.methods = std::move(methods);
    for (const auto& [task, by_method] : acc) {
        for (const auto& [method, a] : by_method) t.cells[task][method] = a.first / static_cast<double>(a.second);
    }
    return t;
}

/// Missing (task, method) cells are written as NA.
inline void write_report_csv(std::ostream& os, const ReportTable& t) {
    os << "task";
    for (const auto& m : t.methods) os << ',' << m;
    os << '\n';
    for (const auto& task : t.tasks) {
        os << task;
        for (const auto& m : t.methods) {
            os << ',';
            const auto it = t.cells.find(task);
            if (it != t.cells.end()) {
                const auto jt = it->second.find(m);
                if (jt != it->second.end()) {
                    os << format_double(jt->second);
                    continue;
                }
            }
            os << "NA";
        }
        os << '\n';
    }
}

}  // namespace uga
