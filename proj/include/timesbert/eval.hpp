#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "timesbert/errors.hpp"
#include "timesbert/log.hpp"
#include "timesbert/series.hpp"

namespace timesbert {

/// One evaluation record: task, named metrics, sample count and the
/// settings that produced it (mask ratio, horizon, quantile, ...).
struct MetricReport {
    std::string task;
    std::vector<std::pair<std::string, double>> metrics;
    std::size_t n = 0;
    nlohmann::json config = nlohmann::json::object();

    void add(const std::string& name, double v) {
        if (!std::isfinite(v)) throw NumericError("metric " + name + " is not finite");
        metrics.emplace_back(name, v);
    }

    double get(const std::string& name) const {
        for (const auto& [k, v] : metrics)
            if (k == name) return v;
        throw std::out_of_range("metric not in report: " + name);
    }

    nlohmann::json to_json() const {
        nlohmann::json m = nlohmann::json::object();
        for (const auto& [k, v] : metrics) m[k] = v;
        return {{"task", task}, {"n", n}, {"metrics", m}, {"config", config}};
    }

    std::string to_line() const { return to_json().dump(); }
};

inline double accuracy(const std::vector<int>& preds, const std::vector<int>& labels) {
    if (preds.size() != labels.size())
        throw DimensionError("accuracy: " + std::to_string(preds.size()) + " predictions for " +
                             std::to_string(labels.size()) + " labels");
    if (preds.empty()) throw DataError("accuracy: nothing to evaluate");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) hit += preds[i] == labels[i];
    return static_cast<double>(hit) / static_cast<double>(preds.size());
}

struct PrfScore {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    bool degenerate = false;  // no true anomalies and no predictions
};

/// Expands every true anomalous segment that contains at least one positive
/// prediction to fully positive.
inline std::vector<std::uint8_t> point_adjust(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth) {
    if (pred.size() != truth.size()) throw DimensionError("point_adjust: prediction and truth lengths differ");
    std::vector<std::uint8_t> out(pred.begin(), pred.end());
    for (std::size_t i = 0; i < truth.size();) {
        if (!truth[i]) {
            ++i;
            continue;
        }
        std::size_t j = i;
        bool hit = false;
        for (; j < truth.size() && truth[j]; ++j) hit = hit || pred[j] != 0;
        if (hit) std::fill(out.begin() + static_cast<std::ptrdiff_t>(i), out.begin() + static_cast<std::ptrdiff_t>(j), 1);
        i = j;
    }
    return out;
}

inline PrfScore f1_point_adjusted(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth) {
    const auto adj = point_adjust(pred, truth);
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < adj.size(); ++i) {
        if (adj[i] && truth[i]) ++tp;
        else if (adj[i]) ++fp;
        else if (truth[i]) ++fn;
    }
    PrfScore s;
    s.degenerate = tp + fp + fn == 0;
    if (tp + fp > 0) s.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    if (tp + fn > 0) s.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
    if (s.precision + s.recall > 0.0) s.f1 = 2.0 * s.precision * s.recall / (s.precision + s.recall);
    return s;
}

/// Linear-interpolation quantile of `xs` at q in [0, 1].
inline double quantile(std::vector<double> xs, double q) {
    if (xs.empty()) throw DataError("quantile of an empty sample");
    if (q < 0.0 || q > 1.0) throw ConfigError("quantile must lie in [0, 1]");
    std::sort(xs.begin(), xs.end());
    const double pos = q * static_cast<double>(xs.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, xs.size() - 1);
    return xs[lo] + (pos - static_cast<double>(lo)) * (xs[hi] - xs[lo]);
}

// ---------------------------------------------------------------------------
// Forecasting metrics

inline double smape(const std::vector<double>& y, const std::vector<double>& yhat) {
    if (y.size() != yhat.size() || y.empty()) throw DimensionError("smape: horizon mismatch or empty");
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double den = std::abs(y[i]) + std::abs(yhat[i]);
        if (den > 0.0) s += std::abs(y[i] - yhat[i]) / den;  // 0/0 counts as 0
    }
    return 200.0 * s / static_cast<double>(y.size());
}

/// In-sample mean absolute seasonal difference, the MASE scale.
inline double seasonal_scale(const std::vector<double>& insample, std::size_t m) {
    if (m == 0) throw ConfigError("seasonality must be positive");
    if (insample.size() <= m)
        throw DataError("in-sample length " + std::to_string(insample.size()) + " must exceed seasonality " + std::to_string(m));
    double s = 0.0;
    for (std::size_t t = m; t < insample.size(); ++t) s += std::abs(insample[t] - insample[t - m]);
    return s / static_cast<double>(insample.size() - m);
}

inline double mase(const std::vector<double>& y, const std::vector<double>& yhat, double scale) {
    if (y.size() != yhat.size() || y.empty()) throw DimensionError("mase: horizon mismatch or empty");
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += std::abs(y[i] - yhat[i]);
    return s / static_cast<double>(y.size()) / scale;
}

/// Seasonal-naive forecast: repeat the last observed season.
inline std::vector<double> naive2_forecast(const std::vector<double>& insample, std::size_t horizon, std::size_t m) {
    if (insample.size() < m || m == 0) throw DataError("naive2: history shorter than one season");
    std::vector<double> f(horizon);
    for (std::size_t h = 0; h < horizon; ++h) f[h] = insample[insample.size() - m + h % m];
    return f;
}

inline std::vector<double> naive_last_value(const std::vector<double>& insample, std::size_t horizon) {
    if (insample.empty()) throw DataError("naive forecast of an empty history");
    return std::vector<double>(horizon, insample.back());
}

struct M4Score {
    double smape = 0.0;
    double mase = 0.0;
    double owa = 0.0;
    std::size_t n = 0;         // series evaluated
    std::size_t excluded = 0;  // series with a zero seasonal scale
};

/// Collection averages weight every series equally; OWA compares those
/// averages against the seasonal-naive baseline on the same series.
inline M4Score m4_metrics(const std::vector<std::vector<double>>& forecasts, const std::vector<std::vector<double>>& actuals,
                          const std::vector<std::vector<double>>& insample, std::size_t m) {
    if (forecasts.size() != actuals.size() || forecasts.size() != insample.size())
        throw DimensionError("m4_metrics: forecasts, actuals and histories differ in count");
    M4Score r;
    double sm = 0.0, ms = 0.0, sm_n2 = 0.0, ms_n2 = 0.0;
    for (std::size_t i = 0; i < forecasts.size(); ++i) {
        const double scale = seasonal_scale(insample[i], m);
        if (scale == 0.0) {
            log().warn("m4_metrics: series {} has zero seasonal in-sample scale, excluded", i);
            ++r.excluded;
            continue;
        }
        const auto n2 = naive2_forecast(insample[i], actuals[i].size(), m);
        sm += smape(actuals[i], forecasts[i]);
        ms += mase(actuals[i], forecasts[i], scale);
        sm_n2 += smape(actuals[i], n2);
        ms_n2 += mase(actuals[i], n2, scale);
        ++r.n;
    }
    if (r.n == 0) throw DataError("m4_metrics: no series left to evaluate");
    const double k = static_cast<double>(r.n);
    r.smape = sm / k;
    r.mase = ms / k;
    if (sm_n2 == 0.0 || ms_n2 == 0.0) throw DataError("m4_metrics: seasonal-naive baseline is exact, OWA undefined");
    r.owa = 0.5 * (sm / sm_n2 + ms / ms_n2);
    return r;
}

// ---------------------------------------------------------------------------
// Imputation

/// MSE over the masked (variate, patch) coordinates, counting only valid
/// (non-padded) points.
inline double masked_mse(const TimeSeriesSample& pred, const TimeSeriesSample& truth,
                         const std::vector<std::pair<std::size_t, std::size_t>>& coords, std::size_t patch_len) {
    if (coords.empty()) throw DataError("masked_mse: empty mask");
    if (pred.n_variates != truth.n_variates || pred.length != truth.length)
        throw DimensionError("masked_mse: prediction and truth shapes differ");
    double s = 0.0;
    std::size_t n = 0;
    for (auto [c, i] : coords) {
        if (c >= truth.n_variates) throw DimensionError("masked_mse: variate out of range");
        const std::size_t end = std::min((i + 1) * patch_len, truth.valid_len[c]);
        for (std::size_t t = i * patch_len; t < end; ++t) {
            const double e = pred.at(c, t) - truth.at(c, t);
            s += e * e;
            ++n;
        }
    }
    if (n == 0) throw DataError("masked_mse: masked patches hold no valid points");
    return s / static_cast<double>(n);
}

}  // namespace timesbert
