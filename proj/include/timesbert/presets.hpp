#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "timesbert/data.hpp"
#include "timesbert/errors.hpp"

namespace timesbert {

/// A task's data: sample splits, or three labelled streams for anomaly
/// detection.
struct TaskSplits {
    std::string preset;
    DatasetRegistry registry;
    std::vector<TimeSeriesSample> train, val, test;
    std::optional<AnomalyStream> stream_train, stream_val, stream_test;

    bool is_stream() const { return stream_train.has_value(); }

    Corpus train_corpus() const {
        Corpus c;
        c.registry = registry;
        c.samples = train;
        return c;
    }

    std::vector<TimeSeriesSample> all() const {
        std::vector<TimeSeriesSample> out = train;
        out.insert(out.end(), val.begin(), val.end());
        out.insert(out.end(), test.begin(), test.end());
        return out;
    }
};

inline const std::vector<std::string>& known_presets() {
    static const std::vector<std::string> p{"default", "classify", "impute", "anomaly", "forecast"};
    return p;
}

namespace detail {

inline FamilySpec family(const std::string& fam, std::size_t c, std::size_t t, std::size_t n) {
    FamilySpec f;
    f.family = fam;
    f.n_variates = c;
    f.length = t;
    f.n_samples = n;
    return f;
}

inline TaskSplits from_corpus(const std::string& name, const CorpusSpec& spec, std::uint64_t seed, double f_train,
                              double f_val, double f_test) {
    auto corpus = generate_synthetic_corpus(spec, seed);
    const auto sp = split(corpus.samples, f_train, f_val, f_test, seed);
    TaskSplits t;
    t.preset = name;
    t.registry = corpus.registry;
    t.train = select(corpus.samples, sp.train);
    t.val = select(corpus.samples, sp.val);
    t.test = select(corpus.samples, sp.test);
    return t;
}

}  // namespace detail

/// Named synthetic tasks:
///   default  - pre-training corpus, 2 datasets x 32 samples, C=3, T=96, all train
///   classify - sine vs sawtooth, 96 samples, 64/16/16
///   impute   - exact-period (jitter 0) random-phase sine-mix + sawtooth, 2 x 100 samples, 70/10/20
///   anomaly  - sine-mix streams, clean train 4000, val/test 2000 with 2% anomalies
///   forecast - univariate sine-mix, 200 samples, 70/10/20
inline TaskSplits synthetic_preset(const std::string& name, std::uint64_t seed) {
    using detail::family;
    if (name == "default") {
        CorpusSpec spec{{family("sine-mix", 3, 96, 32), family("sawtooth", 3, 96, 32)}, false};
        return detail::from_corpus(name, spec, seed, 1.0, 0.0, 0.0);
    }
    if (name == "classify") {
        auto sine = family("sine-mix", 3, 96, 48);
        sine.components = 1;
        sine.name = "sine";
        CorpusSpec spec{{sine, family("sawtooth", 3, 96, 48)}, true};
        return detail::from_corpus(name, spec, seed, 64.0 / 96.0, 16.0 / 96.0, 16.0 / 96.0);
    }
    if (name == "impute") {
        auto a = family("sine-mix", 3, 96, 100), b = family("sawtooth", 3, 96, 100);
        for (auto* f : {&a, &b}) {
            f->jitter = 0.0;
            f->random_phase = true;
        }
        CorpusSpec spec{{a, b}, false};
        return detail::from_corpus(name, spec, seed, 0.7, 0.1, 0.2);
    }
    if (name == "forecast") {
        CorpusSpec spec{{family("sine-mix", 1, 96, 200)}, false};
        return detail::from_corpus(name, spec, seed, 0.7, 0.1, 0.2);
    }
    if (name == "anomaly") {
        const auto f = family("sine-mix", 2, 0, 1);
        TaskSplits t;
        t.preset = name;
        t.registry.add("sine-mix", 2, 0);
        t.stream_train = generate_anomaly_stream(f, 4000, 0.0, derive_seed({seed, 1}));
        t.stream_val = generate_anomaly_stream(f, 2000, 0.02, derive_seed({seed, 2}));
        t.stream_test = generate_anomaly_stream(f, 2000, 0.02, derive_seed({seed, 3}));
        return t;
    }
    throw ConfigError("unknown synthetic preset '" + name + "' (expected default, classify, impute, anomaly or forecast)");
}

// ---------------------------------------------------------------------------
// On-disk task data: manifest.json plus one long-layout CSV per split and
// dataset; streams carry a per-point label file.

inline void write_task_data(const std::string& dir, const TaskSplits& t, std::uint64_t seed) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DataError("cannot create data directory " + dir + ": " + ec.message());
    nlohmann::json files = nlohmann::json::array();
    auto write_split = [&](const std::string& split_name, const std::vector<TimeSeriesSample>& samples) {
        for (const auto& d : t.registry.datasets()) {
            std::vector<TimeSeriesSample> part;
            for (const auto& s : samples)
                if (s.dataset_id == d.id) part.push_back(s);
            if (part.empty()) continue;
            const std::string file = split_name + "_" + std::to_string(d.id) + ".csv";
            write_long_csv((fs::path(dir) / file).string(), part);
            files.push_back({{"split", split_name}, {"dataset", d.id}, {"file", file}});
        }
    };
    auto write_stream = [&](const std::string& split_name, const AnomalyStream& a) {
        const std::string file = split_name + "_stream.csv", labels = split_name + "_labels.txt";
        write_long_csv((fs::path(dir) / file).string(), {a.stream});
        std::ofstream out(fs::path(dir) / labels);
        if (!out) throw DataError("cannot write " + labels);
        for (auto l : a.labels) out << static_cast<int>(l) << '\n';
        files.push_back({{"split", split_name}, {"dataset", 0}, {"file", file}, {"labels", labels}});
    };
    if (t.is_stream()) {
        write_stream("train", *t.stream_train);
        write_stream("val", *t.stream_val);
        write_stream("test", *t.stream_test);
    } else {
        write_split("train", t.train);
        write_split("val", t.val);
        write_split("test", t.test);
    }
    nlohmann::json m{{"preset", t.preset}, {"seed", seed}, {"registry", t.registry.to_json()}, {"files", files},
                     {"stream", t.is_stream()}};
    std::ofstream out(fs::path(dir) / "manifest.json");
    if (!out) throw DataError("cannot write manifest in " + dir);
    out << m.dump(2) << '\n';
}

inline TaskSplits read_task_data(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream in(fs::path(dir) / "manifest.json");
    if (!in) throw DataError("no manifest.json in data directory " + dir);
    nlohmann::json m;
    try {
        m = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed manifest in " + dir + ": " + e.what());
    }
    TaskSplits t;
    try {
        t.preset = m.value("preset", std::string("custom"));
        t.registry = DatasetRegistry::from_json(m.at("registry"));
        const bool stream = m.value("stream", false);
        for (const auto& f : m.at("files")) {
            const std::string split_name = f.at("split");
            const int id = f.at("dataset");
            auto samples = load_csv_dataset((fs::path(dir) / f.at("file").get<std::string>()).string(), long_csv_schema(id));
            if (stream) {
                if (samples.size() != 1) throw DataError("stream file must hold exactly one series");
                AnomalyStream a{samples.front(), {}};
                std::ifstream lab(fs::path(dir) / f.at("labels").get<std::string>());
                if (!lab) throw DataError("missing label file for " + split_name + " stream");
                int v = 0;
                while (lab >> v) a.labels.push_back(static_cast<std::uint8_t>(v != 0));
                if (a.labels.size() != a.stream.length) throw DataError(split_name + " labels do not match stream length");
                auto& slot = split_name == "train" ? t.stream_train : split_name == "val" ? t.stream_val : t.stream_test;
                slot = std::move(a);
                continue;
            }
            auto& dst = split_name == "train" ? t.train : split_name == "val" ? t.val : t.test;
            for (auto& s : samples) dst.push_back(std::move(s));
        }
        if (stream && (!t.stream_train || !t.stream_val || !t.stream_test))
            throw DataError("stream data needs train, val and test streams");
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed manifest in " + dir + ": " + e.what());
    }
    return t;
}

}  // namespace timesbert
