#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "timesbert/checkpoint.hpp"
#include "timesbert/config.hpp"
#include "timesbert/embedding.hpp"
#include "timesbert/encoder.hpp"
#include "timesbert/eval.hpp"
#include "timesbert/optimizer.hpp"
#include "timesbert/pretrain.hpp"
#include "timesbert/series.hpp"

namespace timesbert {

namespace param_names {
inline const std::string cls_w = "head.cls.w";  // D x K
inline const std::string cls_b = "head.cls.b";  // K
}  // namespace param_names

enum class TaskKind : std::uint8_t { Classify, Impute, Anomaly, Forecast };

inline TaskKind parse_task(const std::string& s) {
    if (s == "classify") return TaskKind::Classify;
    if (s == "impute") return TaskKind::Impute;
    if (s == "anomaly") return TaskKind::Anomaly;
    if (s == "forecast") return TaskKind::Forecast;
    throw ConfigError("unknown task '" + s + "' (expected classify, impute, anomaly or forecast)");
}

inline std::string task_name(TaskKind k) {
    switch (k) {
        case TaskKind::Classify: return "classify";
        case TaskKind::Impute: return "impute";
        case TaskKind::Anomaly: return "anomaly";
        case TaskKind::Forecast: return "forecast";
    }
    return "?";
}

inline std::size_t task_patch_len(TaskKind k) {
    switch (k) {
        case TaskKind::Classify: return kPatchLenClassify;
        case TaskKind::Impute: return kPatchLenImpute;
        case TaskKind::Anomaly: return kPatchLenAnomaly;
        case TaskKind::Forecast: return kPatchLenForecast;
    }
    return kPatchLenImpute;
}

/// Classification trains head.cls.*; the reconstructive tasks re-learn the
/// D x P projection W_out.
inline bool is_head_param(TaskKind k, const std::string& name) {
    return k == TaskKind::Classify ? name.rfind("head.", 0) == 0 : name == param_names::w_out;
}

using PatchCoords = std::vector<std::pair<std::size_t, std::size_t>>;

inline void add_classifier_head(ParamStore& ps, std::size_t n_classes, std::uint64_t seed) {
    if (n_classes < 2) throw ConfigError("classifier needs at least 2 classes");
    const std::size_t d = ps.get(param_names::w_in).dim(0);
    ps.remove_prefix("head.cls.");
    Rng rng(seed);
    Tensor w({d, n_classes});
    for (double& v : w.values()) v = rng.truncated_normal(0.02);
    ps.add(param_names::cls_w, w);
    ps.add(param_names::cls_b, Tensor({n_classes}));
}

/// Re-initializes the patch-length dependent projections when a task runs
/// with a patch length other than the checkpoint's.
inline void adapt_patch_len(ParamStore& ps, EncoderConfig& enc, std::size_t patch_len, std::uint64_t seed) {
    if (patch_len == enc.patch_len) return;
    const std::size_t d = enc.d_model;
    Rng rng(seed);
    for (const auto* name : {&param_names::w_in, &param_names::w_out}) {
        Tensor t({d, patch_len});
        for (double& v : t.values()) v = rng.truncated_normal(0.02);
        t.set_requires_grad(true);
        ps.get(*name) = t;
    }
    enc.patch_len = patch_len;
}

/// Plan marking every data-carrying patch KEEP: all patches stay visible and
/// all are reconstruction targets.
inline MaskPlan keep_all_plan(const TokenGrid& g) {
    MaskPlan p;
    for (std::size_t c = 0; c < g.n_variates; ++c)
        for (std::size_t i = 0; i < g.n_patches; ++i) {
            const auto& s = g.patch(c, i);
            if (s.pad_count < g.patch_len) p.entries.push_back({c, i, MaskAction::Keep, s.raw_patch, s.pad_count});
        }
    return p;
}

/// round(ratio * data patches) distinct coordinates, at least one.
inline PatchCoords sample_missing(const TokenGrid& g, double ratio, std::uint64_t seed) {
    if (ratio <= 0.0 || ratio > 1.0) throw ConfigError("missing ratio must lie in (0, 1]");
    PatchCoords all;
    for (std::size_t c = 0; c < g.n_variates; ++c)
        for (std::size_t i = 0; i < g.n_patches; ++i)
            if (g.patch(c, i).pad_count < g.patch_len) all.emplace_back(c, i);
    const auto k = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(ratio * static_cast<double>(all.size()))),
                                           1, all.size());
    Rng rng(seed);
    for (std::size_t i = 0; i < k; ++i) std::swap(all[i], all[i + rng.uniform_int(all.size() - i)]);
    all.resize(k);
    std::sort(all.begin(), all.end());
    return all;
}

// ---------------------------------------------------------------------------
// Classification

/// Mean of the encoder outputs over all tokens of the sample (functional
/// tokens included; channel-independent grids pooled together), 1 x D each.
inline std::vector<Tensor> pooled_representations(const std::vector<TimeSeriesSample>& samples, const ParamStore& ps,
                                                  const EncoderConfig& enc, const ForwardMode& mode = {}) {
    std::vector<TokenGrid> grids;
    std::vector<std::size_t> owner;
    for (std::size_t i = 0; i < samples.size(); ++i)
        for (auto& g : build_token_grid(normalize_instance(samples[i]).first, enc.patch_len, enc.channel_independent)) {
            grids.push_back(std::move(g));
            owner.push_back(i);
        }
    const auto outs = encode_grids(grids, {}, ps, enc, mode);
    std::vector<std::vector<Tensor>> parts(samples.size());
    for (std::size_t g = 0; g < grids.size(); ++g) parts[owner[g]].push_back(outs[g]);
    std::vector<Tensor> pooled;
    for (auto& p : parts) pooled.push_back(ops::mean_rows(p.size() == 1 ? p.front() : ops::concat_rows(p)));
    return pooled;
}

/// Class logits, 1 x K per sample.
inline std::vector<Tensor> classify_logits(const std::vector<TimeSeriesSample>& samples, const ParamStore& ps,
                                           const EncoderConfig& enc, const ForwardMode& mode = {}) {
    if (!ps.contains(param_names::cls_w)) throw ConfigError("model has no classification head");
    std::vector<Tensor> out;
    for (const auto& z : pooled_representations(samples, ps, enc, mode))
        out.push_back(linear(z, ps, param_names::cls_w, param_names::cls_b));
    return out;
}

inline Tensor classify(const TimeSeriesSample& sample, const ParamStore& ps, const EncoderConfig& enc) {
    NoGradScope ng;
    return classify_logits({sample}, ps, enc).front();
}

inline int argmax(const Tensor& row) {
    const auto v = row.values();
    return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

inline std::vector<int> predict_classes(const std::vector<TimeSeriesSample>& samples, const ParamStore& ps,
                                        const EncoderConfig& enc) {
    NoGradScope ng;
    std::vector<int> preds;
    for (const auto& l : classify_logits(samples, ps, enc)) preds.push_back(argmax(l));
    return preds;
}

inline std::vector<int> class_labels(const std::vector<TimeSeriesSample>& samples, std::size_t n_classes) {
    std::vector<int> y;
    for (const auto& s : samples) {
        if (!s.class_label) throw DataError("sample '" + s.sample_id + "' has no class label");
        if (*s.class_label < 0 || static_cast<std::size_t>(*s.class_label) >= n_classes)
            throw DimensionError("class label " + std::to_string(*s.class_label) + " outside head width " +
                                 std::to_string(n_classes));
        y.push_back(*s.class_label);
    }
    return y;
}

// ---------------------------------------------------------------------------
// Imputation

/// Observed-point mask (C x T): everything except the missing patches.
inline std::vector<std::uint8_t> observed_mask(const TimeSeriesSample& s, const PatchCoords& missing, std::size_t patch_len) {
    std::vector<std::uint8_t> obs(s.values.size(), 1);
    for (auto [c, i] : missing)
        for (std::size_t t = i * patch_len; t < std::min((i + 1) * patch_len, s.length); ++t) obs[c * s.length + t] = 0;
    return obs;
}

struct ImputeInput {
    TokenGrid grid;
    MaskPlan plan;
    NormStats stats;
};

/// Normalizes with statistics of the observed points only, so the hidden
/// values never leak into the model input.
inline ImputeInput impute_input(const TimeSeriesSample& sample, const PatchCoords& missing, std::size_t patch_len) {
    if (missing.empty()) throw DataError("impute: empty missing set, nothing to impute");
    const auto obs = observed_mask(sample, missing, patch_len);
    ImputeInput in;
    in.stats = compute_stats(sample, &obs);
    in.grid = build_token_grid(apply_normalization(sample, in.stats), patch_len, false).front();
    in.plan = MaskPlan::replace_all(in.grid, missing);
    return in;
}

struct ImputeResult {
    TimeSeriesSample completed;       // original scale, missing patches filled
    Tensor reconstruction;            // normalized, one row per missing patch
    std::vector<double> patch_mse;    // original scale, per missing patch
    double mse = 0.0;                 // original scale, over all missing valid points
    double mse_normalized = 0.0;      // model units (the MPM loss)
};

inline ImputeResult impute(const TimeSeriesSample& sample, const PatchCoords& missing, const ParamStore& ps,
                           const EncoderConfig& enc) {
    NoGradScope ng;
    const ImputeInput in = impute_input(sample, missing, enc.patch_len);
    const auto out = encode_grids({in.grid}, {&in.plan}, ps, enc).front();
    ImputeResult r;
    r.reconstruction = reconstruct_masked(out, in.grid, in.plan, ps);
    r.mse_normalized = mpm_loss(r.reconstruction, in.plan).item();
    r.completed = sample;
    const std::size_t p = enc.patch_len;
    for (std::size_t k = 0; k < missing.size(); ++k) {
        const auto [c, i] = missing[k];
        double s = 0.0;
        std::size_t n = 0;
        for (std::size_t j = 0; j < p && i * p + j < sample.valid_len[c]; ++j) {
            const double v = r.reconstruction.at(k, j) * in.stats.stddev[c] + in.stats.mean[c];
            r.completed.at(c, i * p + j) = v;
            s += (v - sample.at(c, i * p + j)) * (v - sample.at(c, i * p + j));
            ++n;
        }
        r.patch_mse.push_back(n ? s / static_cast<double>(n) : 0.0);
    }
    r.mse = masked_mse(r.completed, sample, missing, p);
    return r;
}

/// Per-variate mean of the observed points, the trivial imputation baseline.
inline TimeSeriesSample mean_impute(const TimeSeriesSample& sample, const PatchCoords& missing, std::size_t patch_len) {
    const auto obs = observed_mask(sample, missing, patch_len);
    const auto st = compute_stats(sample, &obs);
    TimeSeriesSample out = sample;
    for (std::size_t c = 0; c < sample.n_variates; ++c)
        for (std::size_t t = 0; t < sample.valid_len[c]; ++t)
            if (!obs[c * sample.length + t]) out.at(c, t) = st.mean[c];
    return out;
}

// ---------------------------------------------------------------------------
// Anomaly detection

/// Non-overlapping windows; the trailing partial window is zero-padded
/// (valid_len marks the real part).
inline std::vector<TimeSeriesSample> make_windows(const TimeSeriesSample& stream, std::size_t window_len) {
    if (window_len == 0) throw ConfigError("window length must be positive");
    std::vector<TimeSeriesSample> out;
    for (std::size_t t0 = 0; t0 < stream.length; t0 += window_len) {
        TimeSeriesSample w;
        w.n_variates = stream.n_variates;
        w.length = window_len;
        w.values.assign(stream.n_variates * window_len, 0.0);
        w.valid_len.assign(stream.n_variates, 0);
        for (std::size_t c = 0; c < stream.n_variates; ++c) {
            const std::size_t end = std::min(stream.valid_len[c], t0 + window_len);
            for (std::size_t t = t0; t < end; ++t) w.at(c, t - t0) = stream.at(c, t);
            w.valid_len[c] = end > t0 ? end - t0 : 0;
        }
        // A variate that ended before this window still needs one valid point.
        for (auto& v : w.valid_len) v = std::max<std::size_t>(v, 1);
        w.dataset_id = stream.dataset_id;
        w.sample_id = stream.sample_id + "@" + std::to_string(t0);
        out.push_back(std::move(w));
    }
    return out;
}

inline void check_window(std::size_t window_len, std::size_t patch_len) {
    if (window_len < patch_len)
        throw ConfigError("window length " + std::to_string(window_len) + " is shorter than patch length " +
                          std::to_string(patch_len));
    if (window_len % patch_len != 0)
        throw ConfigError("window length " + std::to_string(window_len) + " is not a multiple of patch length " +
                          std::to_string(patch_len));
}

/// Per-time-point score: squared reconstruction error averaged over
/// variates, from full (unmasked) reconstruction of each window. `stats` are
/// global (training-stream) statistics, so a level shift stays visible
/// instead of being normalized away.
inline std::vector<double> anomaly_score(const TimeSeriesSample& stream, const ParamStore& ps, const EncoderConfig& enc,
                                         std::size_t window_len, const NormStats& stats) {
    check_window(window_len, enc.patch_len);
    NoGradScope ng;
    const auto windows = make_windows(apply_normalization(stream, stats), window_len);
    std::vector<TokenGrid> grids;
    std::vector<MaskPlan> plans;
    for (const auto& w : windows) {
        grids.push_back(build_token_grid(w, enc.patch_len, false).front());
        plans.push_back(keep_all_plan(grids.back()));
    }
    std::vector<const MaskPlan*> plan_ptr;
    for (const auto& p : plans) plan_ptr.push_back(&p);
    const auto outs = encode_grids(grids, plan_ptr, ps, enc);

    std::vector<double> score(windows.size() * window_len, 0.0);
    const std::size_t p = enc.patch_len;
    for (std::size_t w = 0; w < windows.size(); ++w) {
        const Tensor rec = reconstruct_masked(outs[w], grids[w], plans[w], ps);
        std::vector<double> sum(window_len, 0.0);
        std::vector<std::size_t> cnt(window_len, 0);
        for (std::size_t k = 0; k < plans[w].size(); ++k) {
            const auto& e = plans[w].entries[k];
            for (std::size_t j = 0; j + e.pad_count < p; ++j) {
                const double d = rec.at(k, j) - e.target[j];
                sum[e.patch * p + j] += d * d;
                ++cnt[e.patch * p + j];
            }
        }
        for (std::size_t t = 0; t < window_len; ++t)
            score[w * window_len + t] = cnt[t] ? sum[t] / static_cast<double>(cnt[t]) : 0.0;
    }
    score.resize(stream.length);
    return score;
}

/// Flags scores above the given quantile of the calibration scores.
/// Quantile 0 flags everything.
inline std::vector<std::uint8_t> detect(const std::vector<double>& scores, const std::vector<double>& calibration,
                                        double q) {
    if (calibration.empty()) throw DataError("detect: empty calibration split");
    if (q < 0.0 || q > 1.0) throw ConfigError("detect: quantile must lie in [0, 1]");
    std::vector<std::uint8_t> pred(scores.size(), 1);
    if (q == 0.0) return pred;
    const double thr = quantile(calibration, q);
    for (std::size_t i = 0; i < scores.size(); ++i) pred[i] = scores[i] > thr;
    return pred;
}

// ---------------------------------------------------------------------------
// Forecasting

struct ForecastInput {
    TokenGrid grid;
    MaskPlan plan;
    NormStats stats;
    std::size_t history_used = 0;  // most recent points kept (whole patches)
};

/// History is tail-aligned to whole patches (the oldest T mod P points are
/// dropped) so the appended mask patches start right after the last
/// observation. `future`, when given (C x H, original scale), becomes the
/// reconstruction target.
inline ForecastInput forecast_input(const TimeSeriesSample& history, std::size_t horizon, std::size_t patch_len,
                                    const TimeSeriesSample* future = nullptr) {
    if (horizon == 0) throw ConfigError("forecast horizon must be positive");
    for (auto v : history.valid_len)
        if (v != history.length) throw DataError("forecast: history '" + history.sample_id + "' has padded variates");
    const std::size_t n_hist = history.length / patch_len;
    if (n_hist == 0)
        throw DataError("forecast: history of " + std::to_string(history.length) + " points is shorter than one patch");
    const std::size_t n_fut = (horizon + patch_len - 1) / patch_len;
    const std::size_t skip = history.length - n_hist * patch_len;
    if (future && (future->n_variates != history.n_variates || future->length < horizon))
        throw DimensionError("forecast: future block does not match history");

    ForecastInput in;
    in.history_used = n_hist * patch_len;
    in.stats = compute_stats(history);
    TimeSeriesSample x;
    x.n_variates = history.n_variates;
    x.length = (n_hist + n_fut) * patch_len;
    x.values.assign(x.n_variates * x.length, 0.0);
    x.valid_len.assign(x.n_variates, in.history_used + horizon);
    x.sample_id = history.sample_id;
    for (std::size_t c = 0; c < x.n_variates; ++c) {
        const double mu = in.stats.mean[c], sd = in.stats.stddev[c];
        for (std::size_t t = 0; t < in.history_used; ++t) x.at(c, t) = (history.at(c, skip + t) - mu) / sd;
        if (future)
            for (std::size_t h = 0; h < horizon; ++h) x.at(c, in.history_used + h) = (future->at(c, h) - mu) / sd;
    }
    in.grid = build_token_grid(x, patch_len, false).front();
    PatchCoords fut;
    for (std::size_t c = 0; c < x.n_variates; ++c)
        for (std::size_t i = n_hist; i < n_hist + n_fut; ++i) fut.emplace_back(c, i);
    in.plan = MaskPlan::replace_all(in.grid, fut);
    return in;
}

/// C x H forecast in the original scale.
inline TimeSeriesSample forecast(const TimeSeriesSample& history, std::size_t horizon, const ParamStore& ps,
                                 const EncoderConfig& enc) {
    NoGradScope ng;
    const ForecastInput in = forecast_input(history, horizon, enc.patch_len);
    if (in.grid.size() > enc.context_len)
        throw ConfigError("forecast: history plus horizon needs " + std::to_string(in.grid.size()) +
                          " tokens, more than context length " + std::to_string(enc.context_len));
    const Tensor rec = reconstruct_masked(encode_grids({in.grid}, {&in.plan}, ps, enc).front(), in.grid, in.plan, ps);
    const std::size_t p = enc.patch_len, n_fut = in.plan.size() / history.n_variates;
    std::vector<std::vector<double>> out(history.n_variates, std::vector<double>(horizon));
    for (std::size_t c = 0; c < history.n_variates; ++c)
        for (std::size_t h = 0; h < horizon; ++h)
            out[c][h] = rec.at(c * n_fut + h / p, h % p) * in.stats.stddev[c] + in.stats.mean[c];
    auto s = TimeSeriesSample::from_variates(out, history.dataset_id, history.sample_id);
    s.class_label = history.class_label;
    return s;
}

/// Splits a series into (history, last `horizon` points).
inline std::pair<TimeSeriesSample, TimeSeriesSample> split_horizon(const TimeSeriesSample& s, std::size_t horizon) {
    if (horizon == 0 || horizon >= s.length)
        throw DataError("series '" + s.sample_id + "' is too short for horizon " + std::to_string(horizon));
    std::vector<std::vector<double>> hist(s.n_variates), fut(s.n_variates);
    for (std::size_t c = 0; c < s.n_variates; ++c) {
        if (s.valid_len[c] != s.length) throw DataError("series '" + s.sample_id + "' has padded variates");
        const auto v = s.variate(c);
        hist[c].assign(v.begin(), v.end() - static_cast<std::ptrdiff_t>(horizon));
        fut[c].assign(v.end() - static_cast<std::ptrdiff_t>(horizon), v.end());
    }
    auto h = TimeSeriesSample::from_variates(hist, s.dataset_id, s.sample_id);
    auto f = TimeSeriesSample::from_variates(fut, s.dataset_id, s.sample_id);
    h.class_label = f.class_label = s.class_label;
    return {h, f};
}

// ---------------------------------------------------------------------------
// Fine-tuning

struct FinetuneConfig {
    TaskKind task = TaskKind::Classify;
    std::size_t steps = 200;
    std::size_t batch_size = 8;
    double lr = 1e-4;
    double warmup_frac = 0.05;
    double weight_decay = 0.01;
    double grad_clip = 1.0;
    bool freeze_backbone = false;
    double mask_ratio = 0.25;     // impute
    std::size_t n_classes = 2;    // classify
    std::size_t horizon = 8;      // forecast
    std::size_t window_len = 40;  // anomaly

    void write(KeyValueConfig& kv) const {
        kv.set("finetune.task", task_name(task));
        kv.set("finetune.steps", steps);
        kv.set("finetune.batch_size", batch_size);
        kv.set("finetune.lr", lr);
        kv.set("finetune.warmup_frac", warmup_frac);
        kv.set("finetune.weight_decay", weight_decay);
        kv.set("finetune.grad_clip", grad_clip);
        kv.set("finetune.freeze_backbone", freeze_backbone);
        kv.set("finetune.mask_ratio", mask_ratio);
        kv.set("finetune.n_classes", n_classes);
        kv.set("finetune.horizon", horizon);
        kv.set("finetune.window_len", window_len);
    }

    static FinetuneConfig read(const KeyValueConfig& kv) {
        FinetuneConfig c;
        c.task = parse_task(kv.get_string("finetune.task", task_name(c.task)));
        c.steps = kv.get_size("finetune.steps", c.steps);
        c.batch_size = kv.get_size("finetune.batch_size", c.batch_size);
        c.lr = kv.get_double("finetune.lr", c.lr);
        c.warmup_frac = kv.get_double("finetune.warmup_frac", c.warmup_frac);
        c.weight_decay = kv.get_double("finetune.weight_decay", c.weight_decay);
        c.grad_clip = kv.get_double("finetune.grad_clip", c.grad_clip);
        c.freeze_backbone = kv.get_bool("finetune.freeze_backbone", c.freeze_backbone);
        c.mask_ratio = kv.get_double("finetune.mask_ratio", c.mask_ratio);
        c.n_classes = kv.get_size("finetune.n_classes", c.n_classes);
        c.horizon = kv.get_size("finetune.horizon", c.horizon);
        c.window_len = kv.get_size("finetune.window_len", c.window_len);
        return c;
    }

    void validate() const {
        if (batch_size == 0) throw ConfigError("batch size must be positive");
        if (lr <= 0.0) throw ConfigError("learning rate must be positive");
        if (warmup_frac < 0.0 || warmup_frac > 1.0) throw ConfigError("warmup fraction must lie in [0, 1]");
        if (mask_ratio <= 0.0 || mask_ratio > 1.0) throw ConfigError("mask ratio must lie in (0, 1]");
        if (horizon == 0) throw ConfigError("horizon must be positive");
    }
};

/// Training items for one task. Anomaly items are windows of the training
/// stream and use the stream-level `stats`.
struct TaskData {
    std::vector<TimeSeriesSample> samples;
    NormStats stats;
};

inline TaskData anomaly_task_data(const TimeSeriesSample& train_stream, std::size_t window_len) {
    return {make_windows(train_stream, window_len), compute_stats(train_stream)};
}

/// Mean task loss over a batch, in model units.
inline Tensor task_loss(const std::vector<const TimeSeriesSample*>& batch, const ParamStore& ps, const EncoderConfig& enc,
                        const FinetuneConfig& cfg, const NormStats& stats, std::uint64_t seed, std::size_t step,
                        const ForwardMode& mode) {
    std::vector<TimeSeriesSample> copies;
    if (cfg.task == TaskKind::Classify) {
        for (const auto* s : batch) copies.push_back(*s);
        const auto y = class_labels(copies, ps.get(param_names::cls_w).dim(1));
        return ops::cross_entropy_from_logits(ops::concat_rows(classify_logits(copies, ps, enc, mode)), y);
    }
    std::vector<TokenGrid> grids;
    std::vector<MaskPlan> plans;
    for (const auto* s : batch) {
        switch (cfg.task) {
            case TaskKind::Impute: {
                const auto g = build_token_grid(*s, enc.patch_len, false).front();
                auto in = impute_input(*s, sample_missing(g, cfg.mask_ratio, sample_seed(seed, step, s->sample_id)),
                                       enc.patch_len);
                grids.push_back(std::move(in.grid));
                plans.push_back(std::move(in.plan));
                break;
            }
            case TaskKind::Anomaly:
                check_window(s->length, enc.patch_len);
                grids.push_back(build_token_grid(apply_normalization(*s, stats), enc.patch_len, false).front());
                plans.push_back(keep_all_plan(grids.back()));
                break;
            case TaskKind::Forecast: {
                const auto [hist, fut] = split_horizon(*s, cfg.horizon);
                auto in = forecast_input(hist, cfg.horizon, enc.patch_len, &fut);
                grids.push_back(std::move(in.grid));
                plans.push_back(std::move(in.plan));
                break;
            }
            case TaskKind::Classify: break;
        }
    }
    std::vector<const MaskPlan*> plan_ptr;
    for (const auto& p : plans) plan_ptr.push_back(&p);
    const auto outs = encode_grids(grids, plan_ptr, ps, enc, mode);
    std::vector<Tensor> losses;
    for (std::size_t i = 0; i < grids.size(); ++i)
        losses.push_back(mpm_loss(reconstruct_masked(outs[i], grids[i], plans[i], ps), plans[i]));
    return ops::scale(ops::sum(ops::concat_rows(losses)), 1.0 / static_cast<double>(losses.size()));
}

struct FinetuneResult {
    ParamStore params;
    std::vector<double> losses;
};

/// AdamW with linear warmup then constant lr. With freeze_backbone only the
/// task head receives gradients.
inline FinetuneResult finetune(const ParamStore& init, const EncoderConfig& enc, const FinetuneConfig& cfg,
                               const TaskData& data, std::uint64_t seed) {
    cfg.validate();
    enc.validate();
    if (data.samples.empty()) throw DataError("fine-tuning set is empty");
    FinetuneResult res{init.clone(), {}};
    if (cfg.task == TaskKind::Classify && !res.params.contains(param_names::cls_w))
        add_classifier_head(res.params, cfg.n_classes, derive_seed({seed, 0x4EAD}));
    for (auto& [name, t] : res.params) t.set_requires_grad(!cfg.freeze_backbone || is_head_param(cfg.task, name));

    AdamW opt({0.9, 0.99, 1e-8, cfg.weight_decay});
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        const double lr = warmup_constant_lr(step, cfg.steps, cfg.lr, cfg.warmup_frac);
        std::vector<const TimeSeriesSample*> batch;
        for (auto i : draw_batch(data.samples.size(), cfg.batch_size, derive_seed({seed, step, 0xBA7C})))
            batch.push_back(&data.samples[i]);
        Rng drop_rng(derive_seed({seed, step, 0xD409}));
        Tape tape;
        double loss = 0.0;
        try {
            TapeScope scope(tape);
            const Tensor l = task_loss(batch, res.params, enc, cfg, data.stats, seed, step, {true, &drop_rng});
            loss = l.item();
            tape.backward(l);
            clip_grad_norm(res.params, cfg.grad_clip);
        } catch (const NumericError& e) {
            throw NumericError("fine-tuning step " + std::to_string(step) + ": " + e.what());
        }
        opt.step(res.params, lr);
        res.params.zero_grad();
        res.losses.push_back(loss);
        log().debug("finetune step {} loss {:.6f} lr {:.3g}", step, loss, lr);
    }
    for (auto& [name, t] : res.params) t.set_requires_grad(true);
    return res;
}

// ---------------------------------------------------------------------------
// Task evaluation

inline MetricReport evaluate_classify(const std::vector<TimeSeriesSample>& samples, const ParamStore& ps,
                                      const EncoderConfig& enc) {
    if (samples.empty()) throw DataError("evaluation split is empty");
    MetricReport r;
    r.task = "classify";
    r.n = samples.size();
    r.add("accuracy", accuracy(predict_classes(samples, ps, enc), class_labels(samples, ps.get(param_names::cls_w).dim(1))));
    return r;
}

/// Masked MSE over seeded missing sets (original scale), with the
/// normalized-space MSE and the mean-imputation baseline alongside.
inline MetricReport evaluate_impute(const std::vector<TimeSeriesSample>& samples, const ParamStore& ps,
                                    const EncoderConfig& enc, double mask_ratio, std::uint64_t seed) {
    if (samples.empty()) throw DataError("evaluation split is empty");
    double mse = 0.0, mse_n = 0.0, base = 0.0;
    for (const auto& s : samples) {
        const auto g = build_token_grid(s, enc.patch_len, false).front();
        const auto missing = sample_missing(g, mask_ratio, derive_seed({seed, hash_string(s.sample_id)}));
        const auto r = impute(s, missing, ps, enc);
        mse += r.mse;
        mse_n += r.mse_normalized;
        base += masked_mse(mean_impute(s, missing, enc.patch_len), s, missing, enc.patch_len);
    }
    const double k = static_cast<double>(samples.size());
    MetricReport r;
    r.task = "impute";
    r.n = samples.size();
    r.config = {{"mask_ratio", mask_ratio}};
    r.add("mse", mse / k);
    r.add("mse_normalized", mse_n / k);
    r.add("mse_mean_baseline", base / k);
    return r;
}

/// Picks the quantile with the best point-adjusted F1 on the validation
/// stream and applies that single threshold to the test stream.
inline MetricReport evaluate_anomaly(const AnomalyStream& val, const AnomalyStream& test, const NormStats& stats,
                                     const ParamStore& ps, const EncoderConfig& enc, std::size_t window_len,
                                     const std::vector<double>& quantile_grid) {
    if (quantile_grid.empty()) throw ConfigError("empty quantile grid");
    if (val.stream.length == 0 || test.stream.length == 0) throw DataError("anomaly evaluation split is empty");
    const auto val_scores = anomaly_score(val.stream, ps, enc, window_len, stats);
    const auto test_scores = anomaly_score(test.stream, ps, enc, window_len, stats);
    double best_q = quantile_grid.front(), best_f1 = -1.0;
    for (double q : quantile_grid) {
        const double f1 = f1_point_adjusted(detect(val_scores, val_scores, q), val.labels).f1;
        if (f1 > best_f1) {
            best_f1 = f1;
            best_q = q;
        }
    }
    const auto s = f1_point_adjusted(detect(test_scores, val_scores, best_q), test.labels);
    MetricReport r;
    r.task = "anomaly";
    r.n = test.stream.length;
    r.config = {{"quantile", best_q}, {"window_len", window_len}, {"quantile_grid", quantile_grid}};
    r.add("f1", s.f1);
    r.add("precision", s.precision);
    r.add("recall", s.recall);
    r.add("f1_validation", best_f1);
    r.add("quantile", best_q);
    return r;
}

/// SMAPE/MASE/OWA per dataset and over all series; every variate is one
/// series. Also reports the naive last-value SMAPE.
inline MetricReport evaluate_forecast(const std::vector<TimeSeriesSample>& samples, const ParamStore& ps,
                                      const EncoderConfig& enc, std::size_t horizon, std::size_t seasonality) {
    if (samples.empty()) throw DataError("evaluation split is empty");
    using Series = std::vector<std::vector<double>>;
    std::map<int, std::array<Series, 4>> by_family;  // forecast, actual, insample, naive
    for (const auto& s : samples) {
        const auto [hist, fut] = split_horizon(s, horizon);
        const auto pred = forecast(hist, horizon, ps, enc);
        auto& f = by_family[s.dataset_id];
        for (std::size_t c = 0; c < s.n_variates; ++c) {
            const auto hv = hist.variate(c);
            const auto fv = fut.variate(c);
            const auto pv = pred.variate(c);
            f[0].emplace_back(pv.begin(), pv.end());
            f[1].emplace_back(fv.begin(), fv.end());
            f[2].emplace_back(hv.begin(), hv.end());
            f[3].push_back(naive_last_value(f[2].back(), horizon));
        }
    }
    MetricReport r;
    r.task = "forecast";
    r.n = samples.size();
    r.config = {{"horizon", horizon}, {"seasonality", seasonality}};
    std::array<Series, 4> all;
    for (const auto& [id, f] : by_family) {
        const auto m = m4_metrics(f[0], f[1], f[2], seasonality);
        const std::string k = "dataset" + std::to_string(id) + ".";
        r.add(k + "smape", m.smape);
        r.add(k + "mase", m.mase);
        r.add(k + "owa", m.owa);
        for (std::size_t j = 0; j < 4; ++j) all[j].insert(all[j].end(), f[j].begin(), f[j].end());
    }
    const auto m = m4_metrics(all[0], all[1], all[2], seasonality);
    double naive = 0.0;
    for (std::size_t i = 0; i < all[1].size(); ++i) naive += smape(all[1][i], all[3][i]);
    r.add("smape", m.smape);
    r.add("mase", m.mase);
    r.add("owa", m.owa);
    r.add("smape_naive_last", naive / static_cast<double>(all[1].size()));
    return r;
}

// ---------------------------------------------------------------------------
// Representation export

enum class RepKind : std::uint8_t { Dom, Var, Pooled };

inline RepKind parse_rep_kind(const std::string& s) {
    if (s == "dom") return RepKind::Dom;
    if (s == "var") return RepKind::Var;
    if (s == "pooled") return RepKind::Pooled;
    throw ConfigError("unknown representation '" + s + "' (expected dom, var or pooled)");
}

struct Representations {
    std::size_t rows = 0, cols = 0;
    std::vector<float> data;  // row-major
    std::vector<std::string> ids;
    std::vector<std::string> labels;  // class label, else dataset id
};

inline Representations export_representations(const std::vector<TimeSeriesSample>& samples, const ParamStore& ps,
                                               const EncoderConfig& enc, RepKind which) {
    NoGradScope ng;
    Representations r;
    r.cols = enc.d_model;
    auto push = [&](const Tensor& row, std::string id, const TimeSeriesSample& s) {
        for (double v : row.values()) r.data.push_back(static_cast<float>(v));
        r.ids.push_back(std::move(id));
        r.labels.push_back(std::to_string(s.class_label.value_or(s.dataset_id)));
        ++r.rows;
    };
    if (which == RepKind::Pooled) {
        const auto pooled = pooled_representations(samples, ps, enc);
        for (std::size_t i = 0; i < samples.size(); ++i) push(pooled[i], samples[i].sample_id, samples[i]);
        return r;
    }
    std::vector<TokenGrid> grids;
    std::vector<std::size_t> owner;
    for (std::size_t i = 0; i < samples.size(); ++i)
        for (auto& g : build_token_grid(normalize_instance(samples[i]).first, enc.patch_len, enc.channel_independent)) {
            grids.push_back(std::move(g));
            owner.push_back(i);
        }
    const auto outs = encode_grids(grids, {}, ps, enc);
    if (which == RepKind::Var) {
        std::size_t variate = 0;
        for (std::size_t g = 0; g < grids.size(); ++g) {
            if (g == 0 || owner[g] != owner[g - 1]) variate = 0;
            const auto& s = samples[owner[g]];
            for (std::size_t c = 0; c < grids[g].n_variates; ++c, ++variate) {
                const std::size_t idx[1] = {grids[g].var_slot(c)};
                push(ops::gather_rows(outs[g], idx), s.sample_id + "#" + std::to_string(variate), s);
            }
        }
        return r;
    }
    // DOM; channel-independent samples average their per-variate DOM outputs.
    std::vector<std::vector<Tensor>> dom(samples.size());
    const std::size_t idx[1] = {TokenGrid::dom_slot()};
    for (std::size_t g = 0; g < grids.size(); ++g) dom[owner[g]].push_back(ops::gather_rows(outs[g], idx));
    for (std::size_t i = 0; i < samples.size(); ++i) push(ops::mean_rows(ops::concat_rows(dom[i])), samples[i].sample_id, samples[i]);
    return r;
}

inline constexpr char kRepMagic[4] = {'T', 'S', 'B', 'E'};

/// Matrix file (magic, u32 rows, u32 cols, f32 LE row-major) plus a
/// tab-separated sidecar `<path>.tsv` with row, sample_id, label.
inline void write_representations(const std::string& path, const Representations& r) {
    detail::ByteWriter w;
    w.raw(kRepMagic, 4);
    w.u32(static_cast<std::uint32_t>(r.rows));
    w.u32(static_cast<std::uint32_t>(r.cols));
    for (float v : r.data) w.f32(v);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path);
    out.write(reinterpret_cast<const char*>(w.bytes().data()), static_cast<std::streamsize>(w.bytes().size()));
    std::ofstream side(path + ".tsv", std::ios::trunc);
    if (!side) throw DataError("cannot write " + path + ".tsv");
    side << "row\tsample_id\tlabel\n";
    for (std::size_t i = 0; i < r.rows; ++i) side << i << '\t' << r.ids[i] << '\t' << r.labels[i] << '\n';
}

inline Representations read_representations(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 12 || std::memcmp(bytes.data(), kRepMagic, 4) != 0) throw DataError(path + ": not a TSBE file");
    detail::ByteReader r(bytes.data(), bytes.size(), path);
    for (int i = 0; i < 4; ++i) r.u8();
    Representations out;
    out.rows = r.u32();
    out.cols = r.u32();
    r.need(4 * out.rows * out.cols);
    for (std::size_t i = 0; i < out.rows * out.cols; ++i) out.data.push_back(r.f32());
    return out;
}

}  // namespace timesbert
