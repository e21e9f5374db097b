#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "timesbert/errors.hpp"
#include "timesbert/log.hpp"
#include "timesbert/rng.hpp"
#include "timesbert/series.hpp"

namespace timesbert {

// ---------------------------------------------------------------------------
// Registry

struct DatasetInfo {
    std::string name;
    int id = 0;
    std::size_t n_samples = 0;
    std::size_t n_variates = 0;
    std::size_t length = 0;
};

/// Dense dataset ids in [0, M). M is the domain-classification width.
class DatasetRegistry {
public:
    int add(const std::string& name, std::size_t n_variates = 0, std::size_t length = 0) {
        if (auto id = find(name)) return *id;
        const int id = static_cast<int>(datasets_.size());
        datasets_.push_back({name, id, 0, n_variates, length});
        return id;
    }

    std::optional<int> find(const std::string& name) const {
        for (const auto& d : datasets_)
            if (d.name == name) return d.id;
        return std::nullopt;
    }

    int id_of(const std::string& name) const {
        if (auto id = find(name)) return *id;
        throw DataError("unknown dataset: " + name);
    }

    const DatasetInfo& info(int id) const { return datasets_.at(static_cast<std::size_t>(id)); }
    DatasetInfo& info(int id) { return datasets_.at(static_cast<std::size_t>(id)); }

    std::size_t size() const { return datasets_.size(); }
    const std::vector<DatasetInfo>& datasets() const { return datasets_; }

    nlohmann::json to_json() const {
        nlohmann::json j = nlohmann::json::array();
        for (const auto& d : datasets_)
            j.push_back({{"name", d.name}, {"id", d.id}, {"n_samples", d.n_samples},
                         {"n_variates", d.n_variates}, {"length", d.length}});
        return j;
    }

    static DatasetRegistry from_json(const nlohmann::json& j) {
        DatasetRegistry r;
        for (const auto& d : j) {
            const int id = r.add(d.at("name").get<std::string>(), d.value("n_variates", std::size_t{0}),
                                 d.value("length", std::size_t{0}));
            if (id != d.at("id").get<int>()) throw DataError("registry ids must be dense and ordered");
            r.info(id).n_samples = d.value("n_samples", std::size_t{0});
        }
        return r;
    }

private:
    std::vector<DatasetInfo> datasets_;
};

struct Corpus {
    DatasetRegistry registry;
    std::vector<TimeSeriesSample> samples;
    // Per-sample, per-time-point ground truth; empty when no anomalies were injected.
    std::vector<std::vector<std::uint8_t>> anomaly_labels;

    std::size_t n_domains() const { return registry.size(); }
};

// ---------------------------------------------------------------------------
// Synthetic generation

/// One synthetic dataset. `jitter` in [0,1] scales the per-variate random
/// draws of amplitude/period/phase; jitter 0 with one component gives the
/// exact closed form amplitude * sin(2 pi t / period).
struct FamilySpec {
    std::string family;  // sine-mix | sawtooth | ar2 | trend-season | square-pulse
    std::string name;    // dataset name, defaults to family
    std::size_t n_variates = 1;
    std::size_t length = 96;
    std::size_t n_samples = 32;
    double noise = 0.05;
    double period = 24.0;
    double amplitude = 1.0;
    double jitter = 1.0;
    std::size_t components = 2;  // sine-mix only
    double ar_phi1 = 0.5;        // ar2 only
    double ar_phi2 = -0.3;
    double anomaly_fraction = 0.0;
    bool random_phase = false;  // uniform phase even at jitter 0
};

struct CorpusSpec {
    std::vector<FamilySpec> datasets;
    bool class_labels = false;  // label each sample with its dataset index
};

inline const std::vector<std::string>& known_families() {
    static const std::vector<std::string> f{"sine-mix", "sawtooth", "ar2", "trend-season", "square-pulse"};
    return f;
}

namespace detail {

inline double frac(double x) { return x - std::floor(x); }

// Clean (noise-free for deterministic families) values of one variate.
inline std::vector<double> family_variate(const FamilySpec& fs, std::size_t length, Rng& rng) {
    const double j = fs.jitter;
    const double jp = fs.random_phase ? 1.0 : j;
    auto jittered = [&](double base, double spread) { return base * (1.0 + j * spread * (2.0 * rng.uniform() - 1.0)); };
    std::vector<double> x(length, 0.0);
    const double two_pi = 2.0 * std::numbers::pi;
    if (fs.family == "sine-mix") {
        const std::size_t k = std::max<std::size_t>(1, fs.components);
        for (std::size_t c = 0; c < k; ++c) {
            const double amp = jittered(fs.amplitude, 0.4) / static_cast<double>(c + 1);
            const double period = jittered(fs.period, 0.2) / static_cast<double>(c + 1);
            const double phase = jp * two_pi * rng.uniform();
            for (std::size_t t = 0; t < length; ++t) x[t] += amp * std::sin(two_pi * static_cast<double>(t) / period + phase);
        }
    } else if (fs.family == "sawtooth") {
        const double amp = jittered(fs.amplitude, 0.4);
        const double period = jittered(fs.period, 0.2);
        const double phase = jp * rng.uniform();
        for (std::size_t t = 0; t < length; ++t)
            x[t] = amp * (2.0 * frac(static_cast<double>(t) / period + phase) - 1.0);
    } else if (fs.family == "square-pulse") {
        const double amp = jittered(fs.amplitude, 0.4);
        const double period = jittered(fs.period, 0.2);
        const double phase = jp * rng.uniform();
        const double duty = 0.5 + j * 0.2 * (2.0 * rng.uniform() - 1.0);
        for (std::size_t t = 0; t < length; ++t)
            x[t] = amp * (frac(static_cast<double>(t) / period + phase) < duty ? 1.0 : -1.0);
    } else if (fs.family == "trend-season") {
        const double slope = j * (2.0 * rng.uniform() - 1.0) * 2.0 * fs.amplitude;
        const double amp = jittered(fs.amplitude, 0.4);
        const double period = jittered(fs.period, 0.2);
        const double phase = jp * two_pi * rng.uniform();
        for (std::size_t t = 0; t < length; ++t) {
            const double u = static_cast<double>(t) / static_cast<double>(length);
            x[t] = slope * u + amp * std::sin(two_pi * static_cast<double>(t) / period + phase);
        }
    } else if (fs.family == "ar2") {
        // Innovations carry the noise; `noise` is added on top like other families.
        const std::size_t burn_in = 100;
        double x1 = 0.0, x2 = 0.0;
        for (std::size_t t = 0; t < burn_in + length; ++t) {
            const double v = fs.ar_phi1 * x1 + fs.ar_phi2 * x2 + fs.amplitude * rng.normal();
            x2 = x1;
            x1 = v;
            if (t >= burn_in) x[t - burn_in] = v;
        }
    } else {
        throw ConfigError("unknown synthetic family: " + fs.family);
    }
    return x;
}

}  // namespace detail

/// Stationary variance of x_t = phi1 x_{t-1} + phi2 x_{t-2} + e_t, Var(e) = s2.
inline double ar2_stationary_variance(double phi1, double phi2, double s2) {
    return s2 * (1.0 - phi2) / ((1.0 + phi2) * ((1.0 - phi2) * (1.0 - phi2) - phi1 * phi1));
}

/// Adds spikes and level shifts to random variates until at least `fraction`
/// of the time points are labelled anomalous. Magnitudes are relative to
/// the per-variate std of the clean series.
inline std::vector<std::uint8_t> inject_anomalies(TimeSeriesSample& s, double fraction, Rng& rng,
                                                  double spike_sigma = 10.0, double shift_sigma = 6.0) {
    std::vector<std::uint8_t> labels(s.length, 0);
    if (fraction <= 0.0) return labels;
    const NormStats st = compute_stats(s);
    const std::size_t target = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(s.length)));
    std::size_t labelled = 0;
    bool spike = true;
    std::size_t guard = 0;
    while (labelled < target && guard++ < 100 * s.length) {
        const std::size_t c = rng.uniform_int(s.n_variates);
        const double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
        if (spike) {
            const std::size_t t = rng.uniform_int(s.valid_len[c]);
            if (labels[t]) continue;
            s.at(c, t) += sign * spike_sigma * st.stddev[c];
            labels[t] = 1;
            ++labelled;
        } else {
            const std::size_t len = 4 + rng.uniform_int(8);
            if (len >= s.valid_len[c]) continue;
            const std::size_t t0 = rng.uniform_int(s.valid_len[c] - len);
            bool clash = false;
            for (std::size_t t = t0; t < t0 + len; ++t) clash = clash || labels[t];
            if (clash) continue;
            for (std::size_t t = t0; t < t0 + len; ++t) {
                s.at(c, t) += sign * shift_sigma * st.stddev[c];
                labels[t] = 1;
            }
            labelled += len;
        }
        spike = !spike;
    }
    return labels;
}

inline TimeSeriesSample generate_family_sample(const FamilySpec& fs, std::size_t length, Rng& rng) {
    std::vector<std::vector<double>> vars(fs.n_variates);
    for (auto& v : vars) {
        v = detail::family_variate(fs, length, rng);
        if (fs.noise > 0.0)
            for (double& x : v) x += fs.noise * rng.normal();
    }
    return TimeSeriesSample::from_variates(vars);
}

/// Deterministic corpus: one registry dataset per family spec, in order.
inline Corpus generate_synthetic_corpus(const CorpusSpec& spec, std::uint64_t seed) {
    Corpus corpus;
    for (std::size_t d = 0; d < spec.datasets.size(); ++d) {
        const FamilySpec& fs = spec.datasets[d];
        const auto& fams = known_families();
        if (std::find(fams.begin(), fams.end(), fs.family) == fams.end())
            throw ConfigError("unknown synthetic family: " + fs.family);
        const std::string name = fs.name.empty() ? fs.family : fs.name;
        if (corpus.registry.find(name)) throw ConfigError("duplicate dataset name: " + name);
        const int id = corpus.registry.add(name, fs.n_variates, fs.length);
        corpus.registry.info(id).n_samples = fs.n_samples;
        for (std::size_t i = 0; i < fs.n_samples; ++i) {
            Rng rng(derive_seed({seed, static_cast<std::uint64_t>(d), static_cast<std::uint64_t>(i)}));
            TimeSeriesSample s = generate_family_sample(fs, fs.length, rng);
            s.dataset_id = id;
            s.sample_id = name + "/" + std::to_string(i);
            if (spec.class_labels) s.class_label = id;
            if (fs.anomaly_fraction > 0.0) {
                corpus.anomaly_labels.resize(corpus.samples.size());
                corpus.anomaly_labels.push_back(inject_anomalies(s, fs.anomaly_fraction, rng));
            }
            corpus.samples.push_back(std::move(s));
        }
    }
    if (!corpus.anomaly_labels.empty()) corpus.anomaly_labels.resize(corpus.samples.size());
    return corpus;
}

struct AnomalyStream {
    TimeSeriesSample stream;
    std::vector<std::uint8_t> labels;  // per time point
};

/// One long stream of a family with anomalies injected at `fraction` of points.
inline AnomalyStream generate_anomaly_stream(const FamilySpec& fs, std::size_t length, double fraction,
                                             std::uint64_t seed) {
    Rng rng(seed);
    AnomalyStream out;
    out.stream = generate_family_sample(fs, length, rng);
    out.stream.sample_id = (fs.name.empty() ? fs.family : fs.name) + "/stream";
    out.labels = inject_anomalies(out.stream, fraction, rng);
    return out;
}

/// Structured text manifest: datasets, ids, sample counts, generation spec and seed.
inline nlohmann::json corpus_manifest(const Corpus& corpus, const CorpusSpec* spec = nullptr,
                                      std::optional<std::uint64_t> seed = std::nullopt) {
    nlohmann::json j;
    j["datasets"] = corpus.registry.to_json();
    j["n_samples"] = corpus.samples.size();
    if (spec) {
        nlohmann::json fams = nlohmann::json::array();
        for (const auto& f : spec->datasets)
            fams.push_back({{"family", f.family}, {"name", f.name}, {"n_variates", f.n_variates},
                            {"length", f.length}, {"n_samples", f.n_samples}, {"noise", f.noise},
                            {"period", f.period}, {"amplitude", f.amplitude}, {"jitter", f.jitter},
                            {"components", f.components}, {"anomaly_fraction", f.anomaly_fraction},
                            {"random_phase", f.random_phase}});
        j["spec"] = {{"datasets", fams}, {"class_labels", spec->class_labels}};
    }
    if (seed) j["seed"] = *seed;
    return j;
}

// ---------------------------------------------------------------------------
// CSV ingestion

struct CsvSchema {
    enum class Layout { Wide, Long };
    Layout layout = Layout::Wide;
    // Wide: every column not named below is a variate, each row is a time step.
    // Long: one observation per row.
    std::string id_column;     // optional for wide, required for long
    std::string label_column;  // optional
    std::string time_column;   // optional for wide, required for long
    std::string variate_column = "variate";
    std::string value_column = "value";
    char delimiter = ',';
    int dataset_id = 0;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

inline std::vector<std::string> split_line(const std::string& line, char delim) {
    std::vector<std::string> out;
    std::string_view rest(line);
    for (;;) {
        const auto pos = rest.find(delim);
        out.emplace_back(trim(rest.substr(0, pos)));
        if (pos == std::string_view::npos) break;
        rest.remove_prefix(pos + 1);
    }
    return out;
}

inline double parse_cell(const std::string& cell, const std::string& path, std::size_t line_no,
                         const std::string& column) {
    double v = 0.0;
    const char* b = cell.data();
    const char* e = cell.data() + cell.size();
    if (!cell.empty() && *b == '+') ++b;
    auto [ptr, ec] = std::from_chars(b, e, v);
    if (cell.empty() || ec != std::errc{} || ptr != e || !std::isfinite(v)) {
        throw DataError(path + ":" + std::to_string(line_no) + ": column '" + column + "' has non-numeric value '" +
                        cell + "'");
    }
    return v;
}

inline std::optional<int> parse_label(const std::string& cell, const std::string& path, std::size_t line_no) {
    if (cell.empty()) return std::nullopt;
    int v = 0;
    auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
    if (ec != std::errc{} || ptr != cell.data() + cell.size())
        throw DataError(path + ":" + std::to_string(line_no) + ": label '" + cell + "' is not an integer");
    return v;
}

}  // namespace detail

/// Parses a header-carrying CSV into samples. Malformed rows are reported
/// with their 1-based line number.
inline std::vector<TimeSeriesSample> load_csv_dataset(const std::string& path, const CsvSchema& schema) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    std::string line;
    std::size_t line_no = 0;
    std::vector<std::string> header;
    while (std::getline(in, line)) {
        ++line_no;
        if (!detail::trim(line).empty()) {
            header = detail::split_line(line, schema.delimiter);
            break;
        }
    }
    if (header.empty()) throw DataError(path + ": empty file");

    auto col = [&](const std::string& name, bool required) -> std::optional<std::size_t> {
        if (name.empty()) {
            if (required) throw DataError(path + ": schema is missing a required column name");
            return std::nullopt;
        }
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw DataError(path + ": missing column '" + name + "'");
        return static_cast<std::size_t>(it - header.begin());
    };

    const bool is_long = schema.layout == CsvSchema::Layout::Long;
    const auto id_col = col(schema.id_column, is_long);
    const auto label_col = col(schema.label_column, false);
    const auto time_col = col(schema.time_column, is_long);
    std::optional<std::size_t> var_col, val_col;
    std::vector<std::size_t> variate_cols;
    if (is_long) {
        var_col = col(schema.variate_column, true);
        val_col = col(schema.value_column, true);
    } else {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (i != id_col && i != label_col && i != time_col) variate_cols.push_back(i);
        if (variate_cols.empty()) throw DataError(path + ": no variate columns");
    }

    struct Pending {
        std::string id;
        std::optional<int> label;
        std::vector<std::string> variate_names;
        // variate -> (time, value)
        std::vector<std::vector<std::pair<double, double>>> obs;
    };
    std::vector<Pending> pending;
    std::map<std::string, std::size_t> by_id;
    auto get = [&](const std::string& id) -> Pending& {
        auto it = by_id.find(id);
        if (it != by_id.end()) return pending[it->second];
        by_id.emplace(id, pending.size());
        pending.push_back({id, std::nullopt, {}, {}});
        if (!is_long) pending.back().obs.resize(variate_cols.size());
        return pending.back();
    };

    std::size_t rows = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (detail::trim(line).empty()) continue;
        auto cells = detail::split_line(line, schema.delimiter);
        if (cells.size() != header.size()) {
            throw DataError(path + ":" + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                            " cells, found " + std::to_string(cells.size()));
        }
        Pending& p = get(id_col ? cells[*id_col] : std::string("0"));
        if (label_col) {
            auto lab = detail::parse_label(cells[*label_col], path, line_no);
            if (lab && p.label && *lab != *p.label)
                throw DataError(path + ":" + std::to_string(line_no) + ": conflicting label for id '" + p.id + "'");
            if (lab) p.label = lab;
        }
        const double time = time_col ? detail::parse_cell(cells[*time_col], path, line_no, header[*time_col])
                                     : static_cast<double>(rows);
        if (is_long) {
            const std::string& vname = cells[*var_col];
            auto it = std::find(p.variate_names.begin(), p.variate_names.end(), vname);
            std::size_t vi = static_cast<std::size_t>(it - p.variate_names.begin());
            if (it == p.variate_names.end()) {
                p.variate_names.push_back(vname);
                p.obs.emplace_back();
            }
            p.obs[vi].emplace_back(time, detail::parse_cell(cells[*val_col], path, line_no, header[*val_col]));
        } else {
            for (std::size_t v = 0; v < variate_cols.size(); ++v)
                p.obs[v].emplace_back(time, detail::parse_cell(cells[variate_cols[v]], path, line_no,
                                                               header[variate_cols[v]]));
        }
        ++rows;
    }
    if (rows == 0) throw DataError(path + ": no data rows");

    std::vector<TimeSeriesSample> out;
    for (auto& p : pending) {
        std::vector<std::vector<double>> variates;
        for (auto& o : p.obs) {
            std::stable_sort(o.begin(), o.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
            std::vector<double> v;
            for (const auto& tv : o) v.push_back(tv.second);
            variates.push_back(std::move(v));
        }
        TimeSeriesSample s = TimeSeriesSample::from_variates(variates, schema.dataset_id, p.id);
        s.class_label = p.label;
        s.validate();
        out.push_back(std::move(s));
    }
    return out;
}

/// Writes samples in long layout (id,time,variate,value,label) readable by
/// load_csv_dataset with the matching schema.
inline void write_long_csv(const std::string& path, const std::vector<TimeSeriesSample>& samples) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out.precision(17);
    out << "id,time,variate,value,label\n";
    for (const auto& s : samples)
        for (std::size_t c = 0; c < s.n_variates; ++c)
            for (std::size_t t = 0; t < s.valid_len[c]; ++t) {
                out << s.sample_id << ',' << t << ",v" << c << ',' << s.at(c, t) << ',';
                if (s.class_label) out << *s.class_label;
                out << '\n';
            }
}

inline CsvSchema long_csv_schema(int dataset_id = 0) {
    CsvSchema s;
    s.layout = CsvSchema::Layout::Long;
    s.id_column = "id";
    s.time_column = "time";
    s.label_column = "label";
    s.dataset_id = dataset_id;
    return s;
}

// ---------------------------------------------------------------------------
// Splitting

struct SplitIndices {
    std::vector<std::size_t> train, val, test;
};

/// Deterministic train/val/test assignment, stratified by class label when
/// every sample carries one.
inline SplitIndices split(const std::vector<TimeSeriesSample>& samples, double f_train, double f_val,
                          double f_test, std::uint64_t seed) {
    if (f_train < 0.0 || f_val < 0.0 || f_test < 0.0) throw ConfigError("split: fractions must be non-negative");
    if (std::abs(f_train + f_val + f_test - 1.0) > 1e-9) throw ConfigError("split: fractions must sum to 1");
    const bool stratify = !samples.empty() && std::all_of(samples.begin(), samples.end(),
                                                          [](const auto& s) { return s.class_label.has_value(); });
    std::map<int, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < samples.size(); ++i) groups[stratify ? *samples[i].class_label : 0].push_back(i);

    SplitIndices out;
    for (auto& [label, idx] : groups) {
        Rng rng(derive_seed({seed, static_cast<std::uint64_t>(static_cast<std::int64_t>(label))}));
        for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.uniform_int(i)]);
        const auto n = static_cast<double>(idx.size());
        const auto n_train = static_cast<std::size_t>(std::llround(f_train * n));
        const auto n_val = std::min(idx.size() - n_train, static_cast<std::size_t>(std::llround(f_val * n)));
        for (std::size_t i = 0; i < idx.size(); ++i) {
            if (i < n_train) {
                out.train.push_back(idx[i]);
            } else if (i < n_train + n_val) {
                out.val.push_back(idx[i]);
            } else {
                out.test.push_back(idx[i]);
            }
        }
    }
    std::sort(out.train.begin(), out.train.end());
    std::sort(out.val.begin(), out.val.end());
    std::sort(out.test.begin(), out.test.end());
    return out;
}

template <class T>
std::vector<T> select(const std::vector<T>& all, const std::vector<std::size_t>& idx) {
    std::vector<T> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(all.at(i));
    return out;
}

}  // namespace timesbert
