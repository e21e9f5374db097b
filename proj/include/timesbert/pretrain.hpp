#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "timesbert/checkpoint.hpp"
#include "timesbert/config.hpp"
#include "timesbert/data.hpp"
#include "timesbert/embedding.hpp"
#include "timesbert/encoder.hpp"
#include "timesbert/log.hpp"
#include "timesbert/optimizer.hpp"
#include "timesbert/rng.hpp"

namespace timesbert {

struct PretrainConfig {
    std::size_t steps = 500;
    std::size_t batch_size = 8;
    double mask_ratio = 0.25;
    double replace_prob = 0.9;
    double lr_init = 1e-4;
    double lr_final = 2e-7;
    double weight_decay = 0.01;
    double grad_clip = 1.0;
    bool use_ftp = true;  // false = MPM-only ablation
    std::size_t save_every = 0;
    std::string checkpoint_path;  // periodic + final checkpoint, empty = none
    std::string metrics_path;     // line-delimited metrics, empty = none
    bool log_wallclock = false;   // wallclock breaks byte-identical logs, so it is opt-in

    void write(KeyValueConfig& kv) const {
        kv.set("pretrain.steps", steps);
        kv.set("pretrain.batch_size", batch_size);
        kv.set("pretrain.mask_ratio", mask_ratio);
        kv.set("pretrain.replace_prob", replace_prob);
        kv.set("pretrain.lr_init", lr_init);
        kv.set("pretrain.lr_final", lr_final);
        kv.set("pretrain.weight_decay", weight_decay);
        kv.set("pretrain.grad_clip", grad_clip);
        kv.set("pretrain.use_ftp", use_ftp);
    }

    static PretrainConfig read(const KeyValueConfig& kv) {
        PretrainConfig c;
        c.steps = kv.get_size("pretrain.steps", c.steps);
        c.batch_size = kv.get_size("pretrain.batch_size", c.batch_size);
        c.mask_ratio = kv.get_double("pretrain.mask_ratio", c.mask_ratio);
        c.replace_prob = kv.get_double("pretrain.replace_prob", c.replace_prob);
        c.lr_init = kv.get_double("pretrain.lr_init", c.lr_init);
        c.lr_final = kv.get_double("pretrain.lr_final", c.lr_final);
        c.weight_decay = kv.get_double("pretrain.weight_decay", c.weight_decay);
        c.grad_clip = kv.get_double("pretrain.grad_clip", c.grad_clip);
        c.use_ftp = kv.get_bool("pretrain.use_ftp", c.use_ftp);
        return c;
    }

    void validate() const {
        if (mask_ratio < 0.0 || mask_ratio > 1.0) throw ConfigError("mask ratio must lie in [0, 1]");
        if (replace_prob < 0.0 || replace_prob > 1.0) throw ConfigError("replace probability must lie in [0, 1]");
        if (batch_size == 0) throw ConfigError("batch size must be positive");
        if (lr_init <= 0.0 || lr_final < 0.0) throw ConfigError("learning rates must be positive");
    }
};

inline void write_registry(KeyValueConfig& kv, const DatasetRegistry& r) {
    kv.set("registry.size", r.size());
    for (const auto& d : r.datasets()) {
        const std::string k = "registry." + std::to_string(d.id) + ".";
        if (d.name.find_first_of("#\n") != std::string::npos)
            throw ConfigError("dataset name '" + d.name + "' may not contain '#' or newlines");
        kv.set(k + "name", d.name);
        kv.set(k + "n_samples", d.n_samples);
        kv.set(k + "n_variates", d.n_variates);
        kv.set(k + "length", d.length);
    }
}

inline DatasetRegistry read_registry(const KeyValueConfig& kv) {
    DatasetRegistry r;
    const std::size_t n = kv.get_size("registry.size", 0);
    for (std::size_t i = 0; i < n; ++i) {
        const std::string k = "registry." + std::to_string(i) + ".";
        const int id = r.add(kv.get_string(k + "name", "dataset" + std::to_string(i)), kv.get_size(k + "n_variates", 0),
                             kv.get_size(k + "length", 0));
        r.info(id).n_samples = kv.get_size(k + "n_samples", 0);
    }
    return r;
}

// ---------------------------------------------------------------------------
// Corruption

/// Each data-carrying PATCH slot is selected with probability alpha; selected
/// slots are REPLACEd with probability replace_prob, else KEEP their value.
/// Fully padded slots carry no data and are never selected.
inline MaskPlan sample_mask(const TokenGrid& grid, double alpha, std::uint64_t seed, double replace_prob = 0.9) {
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("sample_mask: alpha must lie in [0, 1]");
    Rng rng(seed);
    MaskPlan plan;
    for (std::size_t c = 0; c < grid.n_variates; ++c)
        for (std::size_t i = 0; i < grid.n_patches; ++i) {
            const auto& slot = grid.patch(c, i);
            if (slot.pad_count >= grid.patch_len) continue;
            if (!rng.bernoulli(alpha)) continue;
            const auto action = rng.bernoulli(replace_prob) ? MaskAction::Replace : MaskAction::Keep;
            plan.entries.push_back({c, i, action, slot.raw_patch, slot.pad_count});
        }
    return plan;
}

struct FtpLabels {
    std::vector<int> variate_labels;  // empty when no variate was replaced
    int domain_label = 0;

    std::optional<std::size_t> victim() const {
        for (std::size_t c = 0; c < variate_labels.size(); ++c)
            if (variate_labels[c] == 1) return c;
        return std::nullopt;
    }
};

/// Read-only access to candidate donor variates, grouped by dataset.
class DonorPool {
public:
    explicit DonorPool(const std::vector<TimeSeriesSample>& samples) : samples_(&samples) {
        for (std::size_t i = 0; i < samples.size(); ++i) by_dataset_[samples[i].dataset_id].push_back(i);
    }

    std::size_t n_datasets() const { return by_dataset_.size(); }

    std::vector<int> donors_for(int dataset_id) const {
        std::vector<int> out;
        for (const auto& [id, idx] : by_dataset_)
            if (id != dataset_id && !idx.empty()) out.push_back(id);
        return out;
    }

    const std::vector<std::size_t>& members(int dataset_id) const { return by_dataset_.at(dataset_id); }
    const TimeSeriesSample& sample(std::size_t i) const { return (*samples_)[i]; }

private:
    const std::vector<TimeSeriesSample>* samples_;
    std::map<int, std::vector<std::size_t>> by_dataset_;
};

/// Crops (at a random offset) or cyclically tiles `donor` to `length` points.
inline std::vector<double> fit_donor_length(std::span<const double> donor, std::size_t length, Rng& rng) {
    std::vector<double> out(length);
    if (donor.size() >= length) {
        const std::size_t off = rng.uniform_int(donor.size() - length + 1);
        std::copy(donor.begin() + static_cast<std::ptrdiff_t>(off),
                  donor.begin() + static_cast<std::ptrdiff_t>(off + length), out.begin());
    } else {
        for (std::size_t t = 0; t < length; ++t) out[t] = donor[t % donor.size()];
    }
    return out;
}

/// Substitutes one variate of an (already normalized) sample with a variate
/// drawn from a different dataset, normalized by its own statistics.
inline std::pair<TimeSeriesSample, FtpLabels> apply_variate_replacement(const TimeSeriesSample& sample,
                                                                        const DonorPool& pool, std::uint64_t seed) {
    FtpLabels labels;
    labels.domain_label = sample.dataset_id;
    if (sample.n_variates < 2) return {sample, labels};
    const auto donors = pool.donors_for(sample.dataset_id);
    if (donors.empty()) throw DataError("variate replacement: no donor dataset other than " + std::to_string(sample.dataset_id));

    Rng rng(seed);
    const std::size_t victim = rng.uniform_int(sample.n_variates);
    const int donor_ds = donors[rng.uniform_int(donors.size())];
    const auto& members = pool.members(donor_ds);
    const TimeSeriesSample& donor = pool.sample(members[rng.uniform_int(members.size())]);
    const std::size_t dv = rng.uniform_int(donor.n_variates);

    const std::size_t len = sample.valid_len[victim];
    auto x = fit_donor_length(donor.variate(dv).first(donor.valid_len[dv]), len, rng);
    const auto st = compute_stats(TimeSeriesSample::from_variates({x}));
    TimeSeriesSample out = sample;
    for (std::size_t t = 0; t < len; ++t) out.at(victim, t) = (x[t] - st.mean[0]) / st.stddev[0];

    labels.variate_labels.assign(sample.n_variates, 0);
    labels.variate_labels[victim] = 1;
    return {std::move(out), labels};
}

// ---------------------------------------------------------------------------
// Losses

/// Weighted squared error over all masked scalar positions; padded tails
/// carry zero weight. Returns 0 for an empty plan.
inline Tensor mpm_loss(const Tensor& reconstructions, const MaskPlan& plan) {
    if (plan.empty()) return Tensor::scalar(0.0);
    const std::size_t p = reconstructions.cols();
    if (reconstructions.rows() != plan.size())
        throw DimensionError("mpm_loss: " + std::to_string(reconstructions.rows()) + " reconstructions for " +
                             std::to_string(plan.size()) + " masked patches");
    std::vector<double> target, weight;
    target.reserve(plan.size() * p);
    weight.reserve(plan.size() * p);
    for (const auto& e : plan.entries) {
        if (e.target.size() != p) throw DimensionError("mpm_loss: target length differs from patch length");
        target.insert(target.end(), e.target.begin(), e.target.end());
        for (std::size_t j = 0; j < p; ++j) weight.push_back(j + e.pad_count < p ? 1.0 : 0.0);
    }
    return ops::weighted_mse(reconstructions, target, weight);
}

/// Reconstructions W_out z at the plan's masked slots, in plan order.
inline Tensor reconstruct_masked(const Tensor& outputs, const TokenGrid& grid, const MaskPlan& plan, const ParamStore& ps) {
    std::vector<std::size_t> idx;
    for (const auto& e : plan.entries) idx.push_back(grid.patch_slot(e.variate, e.patch));
    return ops::matmul(ops::gather_rows(outputs, idx), ps.get(param_names::w_out));
}

/// Sum of per-variate binary cross-entropies (when labelled) plus the
/// M-way domain cross-entropy.
inline Tensor ftp_loss(const Tensor& var_outputs, const Tensor& dom_output, const FtpLabels& labels, const ParamStore& ps) {
    const Tensor& w_dom = ps.get(param_names::w_dom);
    if (labels.domain_label < 0 || static_cast<std::size_t>(labels.domain_label) >= w_dom.dim(1))
        throw DimensionError("ftp_loss: domain label " + std::to_string(labels.domain_label) + " outside W_DOM width " +
                             std::to_string(w_dom.dim(1)));
    const int dom[1] = {labels.domain_label};
    Tensor loss = ops::cross_entropy_from_logits(ops::matmul(dom_output, w_dom), dom);
    if (!labels.variate_labels.empty()) {
        if (labels.variate_labels.size() != var_outputs.rows())
            throw DimensionError("ftp_loss: variate label count does not match VAR outputs");
        const Tensor logits = ops::matmul(var_outputs, ps.get(param_names::w_var));
        const Tensor ce = ops::cross_entropy_from_logits(logits, labels.variate_labels);
        loss = ops::add(loss, ops::scale(ce, static_cast<double>(labels.variate_labels.size())));
    }
    return loss;
}

// ---------------------------------------------------------------------------
// Batches

struct PretrainExample {
    TokenGrid grid;
    MaskPlan plan;
    FtpLabels labels;
    std::string name;
};

/// Normalizes, optionally replaces a variate, tokenizes and masks one sample.
/// Channel-independent grids carry no variate labels.
inline std::vector<PretrainExample> prepare_examples(const TimeSeriesSample& raw, const EncoderConfig& enc,
                                                     const PretrainConfig& cfg, const DonorPool* pool,
                                                     std::uint64_t seed) {
    TimeSeriesSample x = normalize_instance(raw).first;
    FtpLabels labels;
    labels.domain_label = raw.dataset_id;
    if (pool && x.n_variates >= 2) std::tie(x, labels) = apply_variate_replacement(x, *pool, derive_seed({seed, 1}));
    std::vector<PretrainExample> out;
    auto grids = build_token_grid(x, enc.patch_len, enc.channel_independent);
    for (std::size_t g = 0; g < grids.size(); ++g) {
        PretrainExample ex;
        ex.plan = sample_mask(grids[g], cfg.mask_ratio, derive_seed({seed, 2, g}), cfg.replace_prob);
        ex.labels = labels;
        if (enc.channel_independent) ex.labels.variate_labels.clear();
        ex.grid = std::move(grids[g]);
        ex.name = raw.sample_id;
        out.push_back(std::move(ex));
    }
    return out;
}

struct PretrainOutputs {
    Tensor loss;  // mean over examples of (MPM + FTP)
    double loss_mpm = 0.0;
    double loss_ftp = 0.0;
    std::vector<double> mpm, ftp;  // per example
    std::vector<int> domain_pred;  // argmax of DOM logits
    std::vector<int> victim_pred;  // argmax over variates of P(replaced); -1 without variate labels
};

inline PretrainOutputs forward_pretrain(const std::vector<PretrainExample>& batch, const ParamStore& ps,
                                        const EncoderConfig& enc, bool use_ftp, const ForwardMode& mode = {}) {
    if (batch.empty()) throw DataError("forward_pretrain: empty batch");
    std::vector<TokenGrid> grids;
    std::vector<const MaskPlan*> plans;
    for (const auto& ex : batch) {
        grids.push_back(ex.grid);
        plans.push_back(&ex.plan);
    }
    const auto outs = encode_grids(grids, plans, ps, enc, mode);

    PretrainOutputs r;
    std::vector<Tensor> per_sample;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& ex = batch[i];
        Tensor mpm = ex.plan.empty() ? Tensor::scalar(0.0) : mpm_loss(reconstruct_masked(outs[i], ex.grid, ex.plan, ps), ex.plan);
        r.mpm.push_back(mpm.item());
        Tensor total = mpm;

        std::vector<std::size_t> var_idx;
        for (std::size_t c = 0; c < ex.grid.n_variates; ++c) var_idx.push_back(ex.grid.var_slot(c));
        const std::size_t dom_idx[1] = {TokenGrid::dom_slot()};
        const Tensor var_out = ops::gather_rows(outs[i], var_idx);
        const Tensor dom_out = ops::gather_rows(outs[i], dom_idx);
        {
            NoGradScope ng;
            const Tensor dl = ops::matmul(dom_out, ps.get(param_names::w_dom));
            r.domain_pred.push_back(static_cast<int>(std::max_element(dl.values().begin(), dl.values().end()) - dl.values().begin()));
            int victim = -1;
            if (!ex.labels.variate_labels.empty()) {
                const Tensor vl = ops::matmul(var_out, ps.get(param_names::w_var));
                double best = -std::numeric_limits<double>::infinity();
                for (std::size_t c = 0; c < vl.rows(); ++c)
                    if (vl.at(c, 1) - vl.at(c, 0) > best) {
                        best = vl.at(c, 1) - vl.at(c, 0);
                        victim = static_cast<int>(c);
                    }
            }
            r.victim_pred.push_back(victim);
        }
        if (use_ftp) {
            Tensor ftp = ftp_loss(var_out, dom_out, ex.labels, ps);
            r.ftp.push_back(ftp.item());
            total = ops::add(total, ftp);
        } else {
            r.ftp.push_back(0.0);
        }
        per_sample.push_back(total);
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    r.loss = ops::scale(ops::sum(ops::concat_rows(per_sample)), inv);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        r.loss_mpm += r.mpm[i] * inv;
        r.loss_ftp += r.ftp[i] * inv;
    }
    return r;
}

// ---------------------------------------------------------------------------
// Training loop

struct StepMetrics {
    std::size_t step = 0;
    double loss_mpm = 0.0;
    double loss_ftp = 0.0;
    double lr = 0.0;
    std::optional<double> wallclock_ms;

    nlohmann::json to_json() const {
        nlohmann::json j{{"step", step}, {"loss_mpm", loss_mpm}, {"loss_ftp", loss_ftp}, {"lr", lr}};
        if (wallclock_ms) j["wallclock_ms"] = *wallclock_ms;
        return j;
    }
};

struct PretrainResult {
    ParamStore params;
    EncoderConfig encoder;
    std::vector<StepMetrics> log;
    bool variate_task = false;
};

/// Effective configuration stored with every checkpoint.
inline KeyValueConfig checkpoint_config(const EncoderConfig& enc, const PretrainConfig& cfg, const DatasetRegistry& reg,
                                        std::uint64_t seed) {
    KeyValueConfig kv;
    enc.write(kv);
    cfg.write(kv);
    write_registry(kv, reg);
    kv.set("seed", static_cast<std::size_t>(seed));
    return kv;
}

/// Batch indices for one step: a seeded partial shuffle of the corpus.
inline std::vector<std::size_t> draw_batch(std::size_t n, std::size_t batch_size, std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(seed);
    const std::size_t b = std::min(n, batch_size);
    for (std::size_t i = 0; i < b; ++i) std::swap(idx[i], idx[i + rng.uniform_int(n - i)]);
    idx.resize(b);
    return idx;
}

/// The pre-training step seeds: per-sample corruption and per-step dropout.
inline std::uint64_t sample_seed(std::uint64_t run_seed, std::size_t step, const std::string& sample_id) {
    return derive_seed({run_seed, static_cast<std::uint64_t>(step), hash_string(sample_id)});
}

inline PretrainResult run_pretraining(const Corpus& corpus, EncoderConfig enc, const PretrainConfig& cfg,
                                      std::uint64_t seed, const ParamStore* init = nullptr) {
    cfg.validate();
    if (corpus.samples.empty()) throw DataError("pre-training corpus is empty");
    if (corpus.registry.size() == 0) throw DataError("pre-training corpus has no datasets");
    enc.n_domains = corpus.registry.size();
    enc.validate();
    for (const auto& s : corpus.samples) s.validate();

    PretrainResult res;
    res.encoder = enc;
    res.params = init ? init->clone() : init_params(enc, derive_seed({seed, 0x1417}));
    for (auto& [name, t] : res.params) t.set_requires_grad(true);

    DonorPool pool(corpus.samples);
    const bool any_multivariate = std::any_of(corpus.samples.begin(), corpus.samples.end(),
                                              [](const auto& s) { return s.n_variates >= 2; });
    res.variate_task = cfg.use_ftp && !enc.channel_independent && any_multivariate && pool.n_datasets() >= 2;
    if (cfg.use_ftp && any_multivariate && !enc.channel_independent && pool.n_datasets() < 2)
        log().warn("single-dataset corpus: no donor variates, variate discrimination disabled for this run");

    const auto ck_config = checkpoint_config(enc, cfg, corpus.registry, seed);
    std::ofstream metrics;
    if (!cfg.metrics_path.empty()) {
        metrics.open(cfg.metrics_path, std::ios::trunc);
        if (!metrics) throw DataError("cannot write metrics log " + cfg.metrics_path);
    }

    AdamW opt({0.9, 0.99, 1e-8, cfg.weight_decay});
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t last = cfg.steps == 0 ? 0 : cfg.steps - 1;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        const double lr = cosine_lr(step, last, cfg.lr_init, cfg.lr_final);
        std::vector<PretrainExample> batch;
        for (auto i : draw_batch(corpus.samples.size(), cfg.batch_size, derive_seed({seed, step, 0xBA7C})))
            for (auto& ex : prepare_examples(corpus.samples[i], enc, cfg, res.variate_task ? &pool : nullptr,
                                             sample_seed(seed, step, corpus.samples[i].sample_id)))
                batch.push_back(std::move(ex));

        Rng drop_rng(derive_seed({seed, step, 0xD409}));
        Tape tape;
        PretrainOutputs out;
        try {
            TapeScope scope(tape);
            out = forward_pretrain(batch, res.params, enc, cfg.use_ftp, {true, &drop_rng});
            if (!std::isfinite(out.loss.item())) throw NumericError("loss is not finite");
            tape.backward(out.loss);
            clip_grad_norm(res.params, cfg.grad_clip);
        } catch (const NumericError& e) {
            throw NumericError("pre-training step " + std::to_string(step) + ": " + e.what());
        }
        opt.step(res.params, lr);
        res.params.zero_grad();

        StepMetrics m{step, out.loss_mpm, out.loss_ftp, lr, std::nullopt};
        if (cfg.log_wallclock)
            m.wallclock_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        if (metrics) metrics << m.to_json().dump() << '\n' << std::flush;
        log().debug("step {} mpm {:.6f} ftp {:.6f} lr {:.3g}", step, m.loss_mpm, m.loss_ftp, lr);
        res.log.push_back(m);

        if (!cfg.checkpoint_path.empty() && cfg.save_every > 0 && (step + 1) % cfg.save_every == 0)
            save_checkpoint(cfg.checkpoint_path, ck_config, res.params);
    }
    if (!cfg.checkpoint_path.empty()) save_checkpoint(cfg.checkpoint_path, ck_config, res.params);
    return res;
}

}  // namespace timesbert
