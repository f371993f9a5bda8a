#pragma once

// Datasets: synthetic shift domains, battery discharge series (generation,
// CSV ingestion, 1 Hz downsampling, windowing, cycle splits) and label /
// feature normalization.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "uga/format.hpp"
#include "uga/models.hpp"
#include "uga/tensor.hpp"

namespace uga {

// ---------------------------------------------------------------------------
// Sample sets
// ---------------------------------------------------------------------------

/// Inputs stored row-major: sample i occupies steps * features values.
/// Plain vectors use steps = 1.
struct UnlabeledSet {
    std::size_t steps = 1;
    std::size_t features = 0;
    std::vector<double> inputs;

    std::size_t sample_width() const noexcept { return steps * features; }
    std::size_t size() const noexcept { return sample_width() == 0 ? 0 : inputs.size() / sample_width(); }
    bool empty() const noexcept { return size() == 0; }

    std::span<const double> sample(std::size_t i) const {
        return {inputs.data() + i * sample_width(), sample_width()};
    }

    void push(std::span<const double> x) {
        if (x.size() != sample_width()) throw shape_error("dataset: sample width mismatch");
        inputs.insert(inputs.end(), x.begin(), x.end());
    }

    /// n x (steps * features) batch of the requested rows.
    Tensor gather(std::span<const std::size_t> rows) const {
        const std::size_t w = sample_width();
        Tensor out({rows.size(), w});
        for (std::size_t r = 0; r < rows.size(); ++r) {
            const auto s = sample(rows[r]);
            std::copy(s.begin(), s.end(), out.values().begin() + static_cast<std::ptrdiff_t>(r * w));
        }
        return out;
    }

    Tensor as_matrix() const { return Tensor({size(), sample_width()}, inputs); }
};

struct LabeledSet : UnlabeledSet {
    std::vector<double> labels;

    void validate() const {
        if (sample_width() == 0) throw std::invalid_argument("dataset: zero-width samples");
        if (inputs.size() % sample_width() != 0) throw shape_error("dataset: ragged input storage");
        if (labels.size() != size()) {
            throw shape_error("dataset: " + std::to_string(size()) + " inputs but " +
                              std::to_string(labels.size()) + " labels");
        }
    }

    void push(std::span<const double> x, double y) {
        UnlabeledSet::push(x);
        labels.push_back(y);
    }

    Tensor gather_labels(std::span<const std::size_t> rows) const {
        Tensor out({rows.size(), 1});
        for (std::size_t r = 0; r < rows.size(); ++r) out[r] = labels[rows[r]];
        return out;
    }

    UnlabeledSet unlabeled() const { return static_cast<const UnlabeledSet&>(*this); }
};

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Min-max map fitted on source labels; applied identically to every domain.
struct LabelScaler {
    double lo = 0.0;
    double hi = 1.0;

    static LabelScaler fit(std::span<const double> labels) {
        if (labels.empty()) throw std::invalid_argument("normalize_labels: empty source labels");
        const auto [mn, mx] = std::minmax_element(labels.begin(), labels.end());
        if (!(*mx > *mn)) throw std::invalid_argument("normalize_labels: source labels are constant");
        return {*mn, *mx};
    }

    double normalize(double y) const { return (y - lo) / (hi - lo); }
    double denormalize(double y) const { return y * (hi - lo) + lo; }

    void apply(LabeledSet& s) const {
        for (auto& y : s.labels) y = normalize(y);
    }
};

struct NormalizedDomains {
    LabeledSet source;
    LabeledSet target;  ///< labels kept for evaluation only
    LabelScaler scaler;
};

/// Fits the label map on the source and applies it to both domains.
inline NormalizedDomains normalize_labels(LabeledSet source, LabeledSet target) {
    const LabelScaler sc = LabelScaler::fit(source.labels);
    sc.apply(source);
    sc.apply(target);
    return {std::move(source), std::move(target), sc};
}

/// Per-feature standardization fitted on source inputs (pooled over time steps).
struct FeatureScaler {
    std::vector<double> mean;
    std::vector<double> sd;

    static FeatureScaler fit(const UnlabeledSet& s) {
        if (s.empty()) throw std::invalid_argument("feature scaler: empty set");
        const std::size_t f = s.features;
        FeatureScaler sc{std::vector<double>(f, 0.0), std::vector<double>(f, 0.0)};
        const std::size_t rows = s.inputs.size() / f;
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < f; ++c) sc.mean[c] += s.inputs[r * f + c];
        }
        for (auto& m : sc.mean) m /= static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < f; ++c) {
                const double d = s.inputs[r * f + c] - sc.mean[c];
                sc.sd[c] += d * d;
            }
        }
        for (auto& v : sc.sd) {
            v = std::sqrt(v / static_cast<double>(rows));
            if (!(v > 0.0)) v = 1.0;
        }
        return sc;
    }

    static FeatureScaler identity(std::size_t features) {
        return {std::vector<double>(features, 0.0), std::vector<double>(features, 1.0)};
    }

    void apply(UnlabeledSet& s) const {
        if (s.features != mean.size()) throw shape_error("feature scaler: feature count mismatch");
        const std::size_t f = s.features;
        for (std::size_t i = 0; i < s.inputs.size(); ++i) {
            s.inputs[i] = (s.inputs[i] - mean[i % f]) / sd[i % f];
        }
    }

    std::string encode() const {
        std::string out;
        for (std::size_t c = 0; c < mean.size(); ++c) {
            if (c) out += ' ';
            out += format_double(mean[c]) + ' ' + format_double(sd[c]);
        }
        return out;
    }

    static FeatureScaler decode(const std::string& text) {
        std::istringstream is(text);
        FeatureScaler sc;
        for (double m, s; is >> m >> s;) {
            sc.mean.push_back(m);
            sc.sd.push_back(s);
        }
        if (sc.mean.empty()) throw std::runtime_error("feature scaler: empty encoding");
        return sc;
    }
};

// ---------------------------------------------------------------------------
// Synthetic shift domains
// ---------------------------------------------------------------------------

struct SyntheticShiftSpec {
    double shift = 0.0;
    double scale = 1.0;
    double noise_sd = 0.05;
    std::size_t n = 2000;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(scale > 0.0)) throw std::invalid_argument("synthetic spec: scale must be > 0");
        if (!(noise_sd >= 0.0)) throw std::invalid_argument("synthetic spec: noise_sd must be >= 0");
    }
};

inline double cubic_target(double x) { return x * x * x / 64.0; }

/// Cubic regression domain: x ~ U(-4, 4) * scale + shift, y = x^3/64 + noise.
/// Labels are raw (unnormalized).
inline LabeledSet gen_cubic_shift(const SyntheticShiftSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    std::uniform_real_distribution<double> base(-4.0, 4.0);
    std::normal_distribution<double> noise(0.0, 1.0);
    LabeledSet s;
    s.steps = 1;
    s.features = 1;
    s.inputs.reserve(spec.n);
    s.labels.reserve(spec.n);
    for (std::size_t i = 0; i < spec.n; ++i) {
        const double x = base(rng) * spec.scale + spec.shift;
        const double eps = noise(rng);
        s.inputs.push_back(x);
        s.labels.push_back(cubic_target(x) + spec.noise_sd * eps);
    }
    return s;
}

/// Source and target cubic domains, labels normalized with source bounds.
inline NormalizedDomains gen_cubic_domains(const SyntheticShiftSpec& source, const SyntheticShiftSpec& target) {
    return normalize_labels(gen_cubic_shift(source), gen_cubic_shift(target));
}

// ---------------------------------------------------------------------------
// Battery series
// ---------------------------------------------------------------------------

enum class BatteryDataset { LG, Panasonic };

inline BatteryDataset parse_battery_dataset(const std::string& s) {
    if (s == "LG" || s == "lg") return BatteryDataset::LG;
    if (s == "Panasonic" || s == "panasonic") return BatteryDataset::Panasonic;
    throw std::invalid_argument("unknown battery dataset '" + s + "' (expected LG or Panasonic)");
}

inline std::string to_string(BatteryDataset d) { return d == BatteryDataset::LG ? "LG" : "Panasonic"; }

/// Drive cycles recorded for each dataset.
inline const std::vector<std::string>& drive_cycles(BatteryDataset d) {
    static const std::vector<std::string> lg{"US06", "HWFET", "UDDS", "LA92", "Mixed"};
    static const std::vector<std::string> pana{"US06", "HWFET", "UDDS", "LA92", "NN"};
    return d == BatteryDataset::LG ? lg : pana;
}

/// Cycles held out for testing.
inline const std::vector<std::string>& test_cycles(BatteryDataset d) {
    static const std::vector<std::string> lg{"US06", "LA92", "HWFET"};
    static const std::vector<std::string> pana{"US06", "LA92", "NN"};
    return d == BatteryDataset::LG ? lg : pana;
}

struct BatteryRecord {
    double t = 0.0;        ///< seconds
    double voltage = 0.0;  ///< V
    double current = 0.0;  ///< A, positive on discharge
    double temp = 0.0;     ///< deg C
    double soc = 0.0;      ///< [0, 1]
    std::string cycle;
};

struct BatterySeries {
    std::string cycle;
    std::vector<BatteryRecord> records;
};

struct BatteryGenSpec {
    double temp_c = 25.0;
    std::size_t n_cycles = 5;
    std::uint64_t seed = 0;
    BatteryDataset dataset = BatteryDataset::Panasonic;
    double sample_hz = 1.0;
    /// nominal capacity at 25 C; 0 selects the dataset's cell (LG 3.0 Ah, Panasonic 2.9 Ah)
    double capacity_ah = 0.0;
};

/// Usable capacity fraction at a given temperature; monotone increasing.
inline double capacity_factor(double temp_c) {
    return std::clamp(1.0 - 0.008 * (25.0 - temp_c), 0.3, 1.1);
}

/// Ohmic resistance in ohms; grows as the cell gets colder.
inline double internal_resistance(double temp_c) { return 0.045 * std::exp(0.025 * (25.0 - temp_c)); }

inline double open_circuit_voltage(double soc) {
    return 3.0 + 0.95 * soc + 0.25 * (1.0 - std::exp(-12.0 * soc));
}

namespace detail {

inline double cycle_intensity(const std::string& cycle) {
    static const std::map<std::string, double> amps{{"US06", 3.6}, {"HWFET", 2.4}, {"UDDS", 1.8},
                                                    {"LA92", 3.0}, {"NN", 3.3},    {"Mixed", 2.6}};
    return amps.at(cycle);
}

}  // namespace detail

/// Simulated constant-temperature discharges from full to empty, one series
/// per drive cycle (tags cycle through the dataset vocabulary). Current is a
/// random piecewise-constant profile scaled by the cycle's aggressiveness;
/// voltage is OCV(soc) minus ohmic and first-order polarization drops;
/// the case temperature follows a first-order thermal model. V, I and T
/// carry Gaussian measurement noise; soc is exact.
inline std::vector<BatterySeries> gen_battery_curves(const BatteryGenSpec& spec) {
    if (spec.n_cycles == 0) throw std::invalid_argument("gen_battery_curves: n_cycles must be >= 1");
    if (!(spec.sample_hz > 0.0)) throw std::invalid_argument("gen_battery_curves: sample_hz must be > 0");
    const double nominal =
        spec.capacity_ah > 0.0 ? spec.capacity_ah : (spec.dataset == BatteryDataset::LG ? 3.0 : 2.9);
    const double capacity = nominal * capacity_factor(spec.temp_c);
    const double r0 = internal_resistance(spec.temp_c);
    const double rp = 0.6 * r0;
    const double dt = 1.0 / spec.sample_hz;
    const auto& vocab = drive_cycles(spec.dataset);

    Rng rng(spec.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    std::vector<BatterySeries> out;
    for (std::size_t c = 0; c < spec.n_cycles; ++c) {
        BatterySeries series{vocab[c % vocab.size()], {}};
        const double intensity = detail::cycle_intensity(series.cycle);
        double soc = 1.0;
        double v_pol = 0.0;
        double heat = 0.0;
        double current = 0.0;
        double segment_left = 0.0;
        for (std::size_t k = 0;; ++k) {
            if (segment_left <= 0.0) {
                segment_left = 5.0 + 40.0 * unit(rng);
                current = unit(rng) < 0.1 ? 0.0 : intensity * (0.3 + 1.4 * unit(rng));
            }
            const double v = open_circuit_voltage(soc) - current * r0 - v_pol;
            BatteryRecord rec;
            rec.t = static_cast<double>(k) / spec.sample_hz;
            rec.voltage = v + 0.004 * gauss(rng);
            rec.current = current + 0.02 * gauss(rng);
            rec.temp = spec.temp_c + heat + 0.15 * gauss(rng);
            rec.soc = soc;
            rec.cycle = series.cycle;
            series.records.push_back(std::move(rec));
            if (soc <= 0.0) break;

            soc -= current * dt / (3600.0 * capacity);
            if (soc < 0.0) soc = 0.0;
            v_pol += dt * (current * rp - v_pol) / 30.0;
            heat += dt * (current * current * r0 * 8.0 - heat) / 400.0;
            segment_left -= dt;
        }
        out.push_back(std::move(series));
    }
    return out;
}

inline std::vector<BatterySeries> gen_battery_curves(double temp_c, std::size_t n_cycles, std::uint64_t seed) {
    BatteryGenSpec spec;
    spec.temp_c = temp_c;
    spec.n_cycles = n_cycles;
    spec.seed = seed;
    return gen_battery_curves(spec);
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

class csv_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream is(line);
    while (std::getline(is, cell, ',')) {
        if (!cell.empty() && cell.back() == '\r') cell.pop_back();
        cells.push_back(cell);
    }
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

inline double parse_number(const std::string& s, std::size_t line, const std::string& col) {
    double v = 0.0;
    const char* b = s.data();
    const char* e = s.data() + s.size();
    while (b < e && *b == ' ') ++b;
    auto [p, ec] = std::from_chars(b, e, v);
    if (ec != std::errc() || p != e) {
        throw csv_error("csv line " + std::to_string(line) + ": column '" + col + "' is not a number: '" + s + "'");
    }
    return v;
}

}  // namespace detail

inline const std::array<const char*, 6> kBatteryColumns = {"time_s", "voltage_v", "current_a", "temp_c", "soc", "cycle"};

inline void write_battery_csv(std::ostream& os, const std::vector<BatterySeries>& series) {
    os << "time_s,voltage_v,current_a,temp_c,soc,cycle\n";
    for (const auto& s : series) {
        for (const auto& r : s.records) {
            os << format_double(r.t) << ',' << format_double(r.voltage) << ',' << format_double(r.current) << ','
               << format_double(r.temp) << ',' << format_double(r.soc) << ',' << r.cycle << '\n';
        }
    }
}

inline void write_battery_csv(const std::string& path, const std::vector<BatterySeries>& series) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    write_battery_csv(os, series);
}

/// Keeps the first record of every 1-second bucket floor(t).
inline BatterySeries downsample_1hz(const BatterySeries& s) {
    BatterySeries out{s.cycle, {}};
    std::optional<double> last_bucket;
    for (const auto& r : s.records) {
        const double bucket = std::floor(r.t + 1e-9);
        if (last_bucket && bucket == *last_bucket) continue;
        last_bucket = bucket;
        out.records.push_back(r);
    }
    return out;
}

/// Reads the canonical battery CSV, splits rows into series at every change
/// of the cycle tag, validates, and downsamples each series to 1 Hz.
inline std::vector<BatterySeries> ingest_battery_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw csv_error("battery csv: empty input");
    const auto header = detail::split_csv_line(line);
    std::array<std::size_t, 6> col{};
    for (std::size_t k = 0; k < kBatteryColumns.size(); ++k) {
        const auto it = std::find(header.begin(), header.end(), kBatteryColumns[k]);
        if (it == header.end()) {
            throw csv_error(std::string("battery csv: missing column '") + kBatteryColumns[k] + "'");
        }
        col[k] = static_cast<std::size_t>(it - header.begin());
    }

    std::vector<BatterySeries> raw;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != header.size()) {
            throw csv_error("battery csv line " + std::to_string(lineno) + ": expected " +
                            std::to_string(header.size()) + " cells, got " + std::to_string(cells.size()));
        }
        BatteryRecord r;
        r.t = detail::parse_number(cells[col[0]], lineno, "time_s");
        r.voltage = detail::parse_number(cells[col[1]], lineno, "voltage_v");
        r.current = detail::parse_number(cells[col[2]], lineno, "current_a");
        r.temp = detail::parse_number(cells[col[3]], lineno, "temp_c");
        r.soc = detail::parse_number(cells[col[4]], lineno, "soc");
        r.cycle = cells[col[5]];
        if (!(r.soc >= 0.0 && r.soc <= 1.0)) {
            throw csv_error("battery csv line " + std::to_string(lineno) + ": soc " + cells[col[4]] +
                            " outside [0,1]");
        }
        if (raw.empty() || raw.back().cycle != r.cycle) raw.push_back({r.cycle, {}});
        auto& recs = raw.back().records;
        if (!recs.empty() && !(r.t > recs.back().t)) {
            throw csv_error("battery csv line " + std::to_string(lineno) + ": time not increasing within cycle " +
                            r.cycle);
        }
        recs.push_back(std::move(r));
    }
    std::vector<BatterySeries> out;
    out.reserve(raw.size());
    for (const auto& s : raw) out.push_back(downsample_1hz(s));
    return out;
}

inline std::vector<BatterySeries> ingest_battery_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path);
    return ingest_battery_csv(is);
}

/// Vector dataset CSV: x0..x{d-1},y
inline void write_vector_csv(std::ostream& os, const LabeledSet& s) {
    s.validate();
    for (std::size_t c = 0; c < s.sample_width(); ++c) os << 'x' << c << ',';
    os << "y\n";
    for (std::size_t i = 0; i < s.size(); ++i) {
        for (double v : s.sample(i)) os << format_double(v) << ',';
        os << format_double(s.labels[i]) << '\n';
    }
}

inline void write_vector_csv(const std::string& path, const LabeledSet& s) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    write_vector_csv(os, s);
}

inline LabeledSet read_vector_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw csv_error("vector csv: empty input");
    const auto header = detail::split_csv_line(line);
    if (header.size() < 2 || header.back() != "y") throw csv_error("vector csv: header must be x0..xN,y");
    for (std::size_t c = 0; c + 1 < header.size(); ++c) {
        if (header[c] != "x" + std::to_string(c)) throw csv_error("vector csv: unexpected column '" + header[c] + "'");
    }
    LabeledSet s;
    s.steps = 1;
    s.features = header.size() - 1;
    std::size_t lineno = 1;
    std::vector<double> row(s.features);
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != header.size()) throw csv_error("vector csv line " + std::to_string(lineno) + ": wrong cell count");
        for (std::size_t c = 0; c < s.features; ++c) row[c] = detail::parse_number(cells[c], lineno, header[c]);
        s.push(row, detail::parse_number(cells.back(), lineno, "y"));
    }
    return s;
}

inline LabeledSet read_vector_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path);
    return read_vector_csv(is);
}

// ---------------------------------------------------------------------------
// Windows and splits
// ---------------------------------------------------------------------------

inline std::size_t window_count(std::size_t n, std::size_t len, std::size_t stride) {
    return n < len ? 0 : (n - len) / stride + 1;
}

/// Sliding (V, I, T) windows; each label is the soc at the window's last step.
inline LabeledSet window(const BatterySeries& series, std::size_t len = 100, std::size_t stride = 1) {
    if (len == 0 || stride == 0) throw std::invalid_argument("window: len and stride must be >= 1");
    const auto& r = series.records;
    if (r.size() < len) {
        throw std::invalid_argument("window: series '" + series.cycle + "' has " + std::to_string(r.size()) +
                                    " records, shorter than window " + std::to_string(len));
    }
    LabeledSet out;
    out.steps = len;
    out.features = 3;
    const std::size_t count = window_count(r.size(), len, stride);
    out.inputs.reserve(count * len * 3);
    out.labels.reserve(count);
    for (std::size_t w = 0; w < count; ++w) {
        const std::size_t start = w * stride;
        for (std::size_t k = start; k < start + len; ++k) {
            out.inputs.push_back(r[k].voltage);
            out.inputs.push_back(r[k].current);
            out.inputs.push_back(r[k].temp);
        }
        out.labels.push_back(r[start + len - 1].soc);
    }
    return out;
}

/// Windows of every series, concatenated.
inline LabeledSet window_all(const std::vector<BatterySeries>& series, std::size_t len, std::size_t stride) {
    LabeledSet out;
    out.steps = len;
    out.features = 3;
    for (const auto& s : series) {
        LabeledSet w = window(s, len, stride);
        out.inputs.insert(out.inputs.end(), w.inputs.begin(), w.inputs.end());
        out.labels.insert(out.labels.end(), w.labels.begin(), w.labels.end());
    }
    return out;
}

struct CycleSplit {
    std::vector<BatterySeries> train;
    std::vector<BatterySeries> test;
};

/// Held-out drive cycles go to test, the rest to train.
inline CycleSplit split_by_cycle(const std::vector<BatterySeries>& series, BatteryDataset dataset) {
    const auto& known = drive_cycles(dataset);
    const auto& held = test_cycles(dataset);
    CycleSplit out;
    for (const auto& s : series) {
        if (std::find(known.begin(), known.end(), s.cycle) == known.end()) {
            throw std::invalid_argument("split_by_cycle: unknown cycle tag '" + s.cycle + "' for " + to_string(dataset));
        }
        (std::find(held.begin(), held.end(), s.cycle) != held.end() ? out.test : out.train).push_back(s);
    }
    return out;
}

}  // namespace uga
