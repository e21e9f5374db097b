#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "timesbert/errors.hpp"

namespace timesbert {

/// One multivariate series: C variates by T points, stored variate-major.
/// Points at or beyond valid_len[c] are padding and hold zero.
struct TimeSeriesSample {
    std::size_t n_variates = 0;
    std::size_t length = 0;
    std::vector<double> values;
    std::vector<std::size_t> valid_len;
    int dataset_id = 0;
    std::optional<int> class_label;
    std::string sample_id;

    static TimeSeriesSample from_variates(const std::vector<std::vector<double>>& variates, int dataset_id = 0,
                                          std::string sample_id = {}) {
        TimeSeriesSample s;
        s.n_variates = variates.size();
        for (const auto& v : variates) s.length = std::max(s.length, v.size());
        s.values.assign(s.n_variates * s.length, 0.0);
        s.valid_len.resize(s.n_variates);
        for (std::size_t c = 0; c < s.n_variates; ++c) {
            std::copy(variates[c].begin(), variates[c].end(), s.values.begin() + c * s.length);
            s.valid_len[c] = variates[c].size();
        }
        s.dataset_id = dataset_id;
        s.sample_id = std::move(sample_id);
        return s;
    }

    std::span<double> variate(std::size_t c) { return {values.data() + c * length, length}; }
    std::span<const double> variate(std::size_t c) const { return {values.data() + c * length, length}; }
    double at(std::size_t c, std::size_t t) const { return values[c * length + t]; }
    double& at(std::size_t c, std::size_t t) { return values[c * length + t]; }

    void validate() const {
        const std::string who = sample_id.empty() ? std::string("sample") : "sample '" + sample_id + "'";
        if (n_variates < 1 || length < 1) throw DataError(who + ": needs C >= 1 and T >= 1");
        if (values.size() != n_variates * length) throw DataError(who + ": value count does not match C x T");
        if (valid_len.size() != n_variates) throw DataError(who + ": valid_len must have one entry per variate");
        for (auto v : valid_len) {
            if (v < 1 || v > length) throw DataError(who + ": valid_len must lie in [1, T]");
        }
        for (double v : values) {
            if (!std::isfinite(v)) throw DataError(who + ": non-finite value");
        }
    }
};

/// Per-variate location/scale used to map a sample to and from model units.
struct NormStats {
    std::vector<double> mean;
    std::vector<double> stddev;
};

inline constexpr double kStdFloor = 1e-6;

/// Population mean/std per variate over valid points. When `observed` is
/// given (C×T, nonzero = observed) only observed valid points count; a variate
/// with no observed point gets mean 0, std 1.
inline NormStats compute_stats(const TimeSeriesSample& s, const std::vector<std::uint8_t>* observed = nullptr) {
    NormStats st;
    st.mean.resize(s.n_variates);
    st.stddev.resize(s.n_variates);
    for (std::size_t c = 0; c < s.n_variates; ++c) {
        double sum = 0.0;
        std::size_t n = 0;
        for (std::size_t t = 0; t < s.valid_len[c]; ++t) {
            if (observed && !(*observed)[c * s.length + t]) continue;
            sum += s.at(c, t);
            ++n;
        }
        if (n == 0) {
            st.mean[c] = 0.0;
            st.stddev[c] = 1.0;
            continue;
        }
        const double mean = sum / static_cast<double>(n);
        double var = 0.0;
        for (std::size_t t = 0; t < s.valid_len[c]; ++t) {
            if (observed && !(*observed)[c * s.length + t]) continue;
            var += (s.at(c, t) - mean) * (s.at(c, t) - mean);
        }
        var /= static_cast<double>(n);
        st.mean[c] = mean;
        st.stddev[c] = std::max(std::sqrt(var), kStdFloor);
    }
    return st;
}

inline TimeSeriesSample apply_normalization(const TimeSeriesSample& s, const NormStats& st) {
    TimeSeriesSample out = s;
    for (std::size_t c = 0; c < s.n_variates; ++c)
        for (std::size_t t = 0; t < s.length; ++t)
            out.at(c, t) = t < s.valid_len[c] ? (s.at(c, t) - st.mean[c]) / st.stddev[c] : 0.0;
    return out;
}

inline TimeSeriesSample denormalize(const TimeSeriesSample& s, const NormStats& st) {
    TimeSeriesSample out = s;
    for (std::size_t c = 0; c < s.n_variates; ++c)
        for (std::size_t t = 0; t < s.length; ++t)
            out.at(c, t) = t < s.valid_len[c] ? s.at(c, t) * st.stddev[c] + st.mean[c] : 0.0;
    return out;
}

/// Per-variate z-score over valid points (population std, floored at 1e-6).
inline std::pair<TimeSeriesSample, NormStats> normalize_instance(const TimeSeriesSample& s) {
    NormStats st = compute_stats(s);
    return {apply_normalization(s, st), std::move(st)};
}

}  // namespace timesbert
