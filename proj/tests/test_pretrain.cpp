#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "support.hpp"
#include "timesbert/pretrain.hpp"

using namespace timesbert;

namespace {

EncoderConfig tiny(std::size_t m = 2) {
    EncoderConfig cfg;
    cfg.d_model = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.patch_len = 4;
    cfg.context_len = 64;
    cfg.dropout = 0.0;
    cfg.n_domains = m;
    return cfg;
}

Corpus small_corpus(std::size_t c = 2, std::size_t t = 16, std::size_t n = 6) {
    FamilySpec a, b;
    a.family = "sine-mix";
    b.family = "sawtooth";
    for (auto* f : {&a, &b}) {
        f->n_variates = c;
        f->length = t;
        f->n_samples = n;
        f->period = 8;
    }
    return generate_synthetic_corpus({{a, b}}, 11);
}

TimeSeriesSample random_sample(std::size_t c, std::size_t t, Rng& rng, int dataset = 0) {
    std::vector<std::vector<double>> v(c, std::vector<double>(t));
    for (auto& x : v)
        for (double& y : x) y = rng.normal();
    auto s = TimeSeriesSample::from_variates(v, dataset);
    return s;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST(SampleMask, AlphaZeroIsEmpty) {
    Rng rng(1);
    auto g = build_token_grid(random_sample(2, 16, rng), 4, false)[0];
    EXPECT_TRUE(sample_mask(g, 0.0, 1).empty());
}

TEST(SampleMask, AlphaOneMasksEverything) {
    Rng rng(1);
    auto g = build_token_grid(random_sample(2, 16, rng), 4, false)[0];
    auto plan = sample_mask(g, 1.0, 1);
    EXPECT_EQ(plan.size(), 8u);
}

TEST(SampleMask, TargetsArePreCorruptionValues) {
    Rng rng(2);
    auto g = build_token_grid(random_sample(3, 20, rng), 4, false)[0];
    auto plan = sample_mask(g, 0.5, 7);
    for (const auto& e : plan.entries) EXPECT_EQ(e.target, g.patch(e.variate, e.patch).raw_patch);
    auto again = sample_mask(g, 0.5, 7);
    ASSERT_EQ(again.size(), plan.size());
    for (std::size_t i = 0; i < plan.size(); ++i) EXPECT_EQ(again.entries[i].action, plan.entries[i].action);
}

TEST(SampleMask, FractionsOverManySlots) {
    Rng rng(3);
    auto g = build_token_grid(random_sample(8, 400, rng), 4, false)[0];  // 800 slots
    std::size_t slots = 0, masked = 0, replaced = 0;
    for (std::uint64_t s = 0; slots < 120000; ++s) {
        auto plan = sample_mask(g, 0.25, derive_seed({99, s}));
        slots += 800;
        masked += plan.size();
        for (const auto& e : plan.entries) replaced += e.action == MaskAction::Replace;
    }
    EXPECT_NEAR(static_cast<double>(masked) / slots, 0.25, 0.005);
    EXPECT_NEAR(static_cast<double>(replaced) / masked, 0.90, 0.005);
}

TEST(VariateReplacement, UnivariateIsUnchanged) {
    auto corpus = small_corpus(1);
    DonorPool pool(corpus.samples);
    auto [out, labels] = apply_variate_replacement(corpus.samples[0], pool, 1);
    EXPECT_EQ(out.values, corpus.samples[0].values);
    EXPECT_TRUE(labels.variate_labels.empty());
}

TEST(VariateReplacement, OneHotVictimAndOthersUntouched) {
    auto corpus = small_corpus(3);
    DonorPool pool(corpus.samples);
    const auto& s = corpus.samples[0];
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto [out, labels] = apply_variate_replacement(s, pool, seed);
        auto victim = labels.victim();
        ASSERT_TRUE(victim);
        EXPECT_EQ(std::count(labels.variate_labels.begin(), labels.variate_labels.end(), 1), 1);
        for (std::size_t c = 0; c < 3; ++c) {
            const bool same = std::equal(out.variate(c).begin(), out.variate(c).end(), s.variate(c).begin());
            EXPECT_EQ(same, c != *victim);
        }
        auto st = compute_stats(out);
        EXPECT_NEAR(st.mean[*victim], 0.0, 1e-12);
        EXPECT_NEAR(st.stddev[*victim], 1.0, 1e-9);
    }
}

TEST(VariateReplacement, ShortDonorIsTiledCyclically) {
    std::vector<double> donor{1, 2, 3};
    Rng rng(1);
    auto x = fit_donor_length(donor, 8, rng);
    EXPECT_EQ(x, (std::vector<double>{1, 2, 3, 1, 2, 3, 1, 2}));
    auto crop = fit_donor_length(std::vector<double>{0, 1, 2, 3, 4, 5}, 3, rng);
    EXPECT_EQ(crop[1] - crop[0], 1.0);
    EXPECT_EQ(crop[2] - crop[1], 1.0);
}

TEST(VariateReplacement, SingleDatasetHasNoDonor) {
    auto corpus = small_corpus(2);
    std::vector<TimeSeriesSample> one(corpus.samples.begin(), corpus.samples.begin() + 3);
    DonorPool pool(one);
    EXPECT_THROW(apply_variate_replacement(one[0], pool, 1), DataError);
}

TEST(MpmLoss, Examples) {
    MaskPlan plan;
    plan.entries.push_back({0, 0, MaskAction::Replace, {0, 0}, 0});
    EXPECT_DOUBLE_EQ(mpm_loss(Tensor::matrix(1, 2, {0, 0}), plan).item(), 0.0);
    EXPECT_DOUBLE_EQ(mpm_loss(Tensor::matrix(1, 2, {1, 1}), plan).item(), 1.0);
    plan.entries.push_back({0, 1, MaskAction::Replace, {0, 0}, 0});
    EXPECT_DOUBLE_EQ(mpm_loss(Tensor::matrix(2, 2, {1, 1, 3, 0}), plan).item(), 2.75);
    EXPECT_DOUBLE_EQ(mpm_loss(Tensor::matrix(1, 2, {1, 1}), MaskPlan{}).item(), 0.0);
}

TEST(MpmLoss, PaddedTailCarriesNoWeight) {
    MaskPlan plan;
    plan.entries.push_back({0, 0, MaskAction::Replace, {1, 0, 0}, 2});
    EXPECT_DOUBLE_EQ(mpm_loss(Tensor::matrix(1, 3, {3, 50, -50}), plan).item(), 4.0);
}

TEST(FtpLoss, UniformLogitsTwoVariatesFourDomains) {
    auto ps = init_params(tiny(4), 1);
    for (double& v : ps.get(param_names::w_var).values()) v = 0.0;
    for (double& v : ps.get(param_names::w_dom).values()) v = 0.0;
    FtpLabels labels{{0, 1}, 3};
    Rng rng(1);
    auto loss = ftp_loss(timesbert::testing::random_tensor({2, 16}, rng), timesbert::testing::random_tensor({1, 16}, rng),
                         labels, ps);
    EXPECT_NEAR(loss.item(), 2 * std::log(2.0) + std::log(4.0), 1e-12);
}

TEST(FtpLoss, UnivariateUsesDomainTermOnly) {
    auto ps = init_params(tiny(8), 1);
    for (double& v : ps.get(param_names::w_dom).values()) v = 0.0;
    Rng rng(1);
    auto loss = ftp_loss(timesbert::testing::random_tensor({1, 16}, rng), timesbert::testing::random_tensor({1, 16}, rng),
                         FtpLabels{{}, 5}, ps);
    EXPECT_NEAR(loss.item(), std::log(8.0), 1e-12);
}

TEST(FtpLoss, ConfidentCorrectLogitsGiveNearZero) {
    auto ps = init_params(tiny(2), 1);
    auto& wv = ps.get(param_names::w_var);
    auto& wd = ps.get(param_names::w_dom);
    for (double& v : wv.values()) v = 0.0;
    for (double& v : wd.values()) v = 0.0;
    // Feature 0 votes "replaced", feature 1 votes "original" and domain 1.
    wv.at(0, 1) = 50;
    wv.at(1, 0) = 50;
    wd.at(1, 1) = 50;
    Tensor var_out = Tensor::matrix(2, 16, std::vector<double>(32, 0.0));
    var_out.at(0, 1) = 1;
    var_out.at(1, 0) = 1;
    Tensor dom_out({1, 16});
    dom_out[1] = 1;
    EXPECT_LT(ftp_loss(var_out, dom_out, FtpLabels{{0, 1}, 1}, ps).item(), 1e-12);
}

TEST(FtpLoss, DomainOutsideWidthIsAnError) {
    auto ps = init_params(tiny(2), 1);
    EXPECT_THROW(ftp_loss(Tensor({1, 16}), Tensor({1, 16}), FtpLabels{{}, 2}, ps), DimensionError);
}

namespace {

std::vector<PretrainExample> make_batch(const Corpus& corpus, const EncoderConfig& enc, std::uint64_t seed,
                                        std::size_t n = 4) {
    PretrainConfig cfg;
    cfg.mask_ratio = 0.5;
    DonorPool pool(corpus.samples);
    std::vector<PretrainExample> out;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& s = corpus.samples[(i * 5) % corpus.samples.size()];
        for (auto& ex : prepare_examples(s, enc, cfg, &pool, derive_seed({seed, i}))) out.push_back(std::move(ex));
    }
    return out;
}

}  // namespace

TEST(TotalLoss, PackedEqualsMeanOfIndividualLosses) {
    auto corpus = small_corpus(2, 16, 6);
    auto enc = tiny();
    auto ps = init_params(enc, 3);
    auto batch = make_batch(corpus, enc, 5);
    auto together = forward_pretrain(batch, ps, enc, true);
    double sum = 0;
    for (const auto& ex : batch) sum += forward_pretrain({ex}, ps, enc, true).loss.item();
    EXPECT_NEAR(together.loss.item(), sum / batch.size(), 1e-9);
}

TEST(TotalLoss, MpmOnlyEqualsMpmTerm) {
    auto corpus = small_corpus();
    auto enc = tiny();
    auto ps = init_params(enc, 3);
    auto batch = make_batch(corpus, enc, 6);
    auto joint = forward_pretrain(batch, ps, enc, true);
    auto mpm_only = forward_pretrain(batch, ps, enc, false);
    EXPECT_NEAR(mpm_only.loss.item(), joint.loss_mpm, 1e-12);
    EXPECT_NEAR(joint.loss.item(), joint.loss_mpm + joint.loss_ftp, 1e-12);
}

TEST(TotalLoss, OracleRecomputationOfBothTerms) {
    auto corpus = small_corpus(2, 16, 6);
    auto enc = tiny();
    auto ps = init_params(enc, 4);
    auto batch = make_batch(corpus, enc, 7);
    auto r = forward_pretrain(batch, ps, enc, true);

    std::vector<TokenGrid> grids;
    std::vector<const MaskPlan*> plans;
    for (const auto& ex : batch) {
        grids.push_back(ex.grid);
        plans.push_back(&ex.plan);
    }
    auto outs = encode_grids(grids, plans, ps, enc);
    const auto& wo = ps.get(param_names::w_out);
    const auto& wv = ps.get(param_names::w_var);
    const auto& wd = ps.get(param_names::w_dom);
    const std::size_t d = enc.d_model, p = enc.patch_len;
    auto lse_ce = [](const std::vector<double>& z, std::size_t y) {
        double m = *std::max_element(z.begin(), z.end()), s = 0;
        for (double v : z) s += std::exp(v - m);
        return m + std::log(s) - z[y];
    };
    for (std::size_t k = 0; k < batch.size(); ++k) {
        const auto& ex = batch[k];
        double se = 0, n = 0;
        for (const auto& e : ex.plan.entries) {
            const std::size_t row = ex.grid.patch_slot(e.variate, e.patch);
            for (std::size_t j = 0; j + e.pad_count < p; ++j) {
                double pred = 0;
                for (std::size_t i = 0; i < d; ++i) pred += outs[k].at(row, i) * wo.at(i, j);
                se += (pred - e.target[j]) * (pred - e.target[j]);
                n += 1;
            }
        }
        EXPECT_NEAR(r.mpm[k], n > 0 ? se / n : 0.0, 1e-9);

        double ftp = 0;
        for (std::size_t c = 0; c < ex.labels.variate_labels.size(); ++c) {
            std::vector<double> z(2, 0.0);
            for (std::size_t o = 0; o < 2; ++o)
                for (std::size_t i = 0; i < d; ++i) z[o] += outs[k].at(ex.grid.var_slot(c), i) * wv.at(i, o);
            ftp += lse_ce(z, static_cast<std::size_t>(ex.labels.variate_labels[c]));
        }
        std::vector<double> z(wd.dim(1), 0.0);
        for (std::size_t o = 0; o < z.size(); ++o)
            for (std::size_t i = 0; i < d; ++i) z[o] += outs[k].at(0, i) * wd.at(i, o);
        ftp += lse_ce(z, static_cast<std::size_t>(ex.labels.domain_label));
        EXPECT_NEAR(r.ftp[k], ftp, 1e-9);
    }
}

TEST(TotalLoss, UnmaskedReconstructionsDoNotMatter) {
    // Only masked rows feed the reconstruction, so W_out columns and encoder
    // outputs elsewhere cannot move L_MPM; checked through the gradient at
    // unmasked token rows of W_out's input.
    auto corpus = small_corpus();
    auto enc = tiny();
    auto ps = init_params(enc, 5);
    auto batch = make_batch(corpus, enc, 8, 1);
    const auto& ex = batch[0];
    std::vector<TokenGrid> grids{ex.grid};
    auto out = encode_grids(grids, {&ex.plan}, ps, enc)[0];
    const double base = mpm_loss(reconstruct_masked(out, ex.grid, ex.plan, ps), ex.plan).item();
    auto flags = ex.plan.slot_flags(ex.grid);
    Tensor perturbed = out.clone();
    for (std::size_t s = 0; s < ex.grid.size(); ++s)
        if (flags[s] == 0)
            for (std::size_t j = 0; j < enc.d_model; ++j) perturbed.at(s, j) += 3.0;
    EXPECT_EQ(mpm_loss(reconstruct_masked(perturbed, ex.grid, ex.plan, ps), ex.plan).item(), base);
}

TEST(TotalLoss, WithheldFtpLabelsLeaveHeadGradientsZero) {
    auto corpus = small_corpus();
    auto enc = tiny();
    auto ps = init_params(enc, 6);
    auto batch = make_batch(corpus, enc, 9);
    Tape tape;
    {
        TapeScope scope(tape);
        auto r = forward_pretrain(batch, ps, enc, false);
        tape.backward(r.loss);
    }
    for (const auto* name : {&param_names::w_var, &param_names::w_dom}) {
        const auto& t = ps.get(*name);
        if (!t.has_grad()) continue;
        for (double g : t.grad()) EXPECT_EQ(g, 0.0);
    }
    bool any = false;
    for (double g : ps.get(param_names::w_out).grad()) any = any || g != 0.0;
    EXPECT_TRUE(any);
}

TEST(TotalLoss, GradientsMatchFiniteDifferences) {
    auto corpus = small_corpus(2, 16, 6);
    auto enc = tiny();
    auto ps = init_params(enc, 7);
    for (std::size_t l = 0; l < enc.n_layers; ++l)
        for (const char* leaf : {"attn.wq", "attn.wk"})
            for (double& v : ps.get(layer_param(l, leaf)).values()) v *= 15.0;
    auto batch = make_batch(corpus, enc, 10, 3);
    std::vector<std::pair<std::string, Tensor>> params;
    for (auto& [name, t] : ps)
        if (name != param_names::pos) params.emplace_back(name, t);
    auto report = check_gradients([&] { return forward_pretrain(batch, ps, enc, true).loss; }, params, {.h = 1e-5});
    EXPECT_LE(report.max_rel_error, 1e-4) << report.worst.front().param << "[" << report.worst.front().index << "]";
}

TEST(Schedule, CosineEndpointsAreExactAndMonotone) {
    EXPECT_EQ(cosine_lr(0, 499, 1e-4, 2e-7), 1e-4);
    EXPECT_EQ(cosine_lr(499, 499, 1e-4, 2e-7), 2e-7);
    double prev = 1.0;
    for (std::size_t s = 0; s < 500; ++s) {
        const double lr = cosine_lr(s, 499, 1e-4, 2e-7);
        EXPECT_LE(lr, prev);
        prev = lr;
    }
}

TEST(Schedule, WarmupRampsThenHolds) {
    EXPECT_DOUBLE_EQ(warmup_constant_lr(0, 100, 1e-4, 0.05), 2e-5);
    EXPECT_DOUBLE_EQ(warmup_constant_lr(4, 100, 1e-4, 0.05), 1e-4);
    EXPECT_DOUBLE_EQ(warmup_constant_lr(80, 100, 1e-4, 0.05), 1e-4);
}

TEST(Optimizer, ClippingBoundsTheNorm) {
    ParamStore ps;
    ps.add("w", Tensor::matrix(1, 2, {0, 0}));
    ps.get("w").grad()[0] = 3;
    ps.get("w").grad()[1] = 4;
    EXPECT_DOUBLE_EQ(clip_grad_norm(ps, 1.0), 5.0);
    EXPECT_NEAR(grad_norm(ps), 1.0, 1e-15);
}

TEST(Optimizer, FirstAdamStepMovesBySignTimesLr) {
    ParamStore ps;
    ps.add("b", Tensor({2}, {1.0, -1.0}));
    ps.get("b").grad()[0] = 0.3;
    ps.get("b").grad()[1] = -2.0;
    AdamW opt;
    opt.step(ps, 0.1);
    EXPECT_NEAR(ps.get("b")[0], 0.9, 1e-6);
    EXPECT_NEAR(ps.get("b")[1], -0.9, 1e-6);
}

TEST(RunPretraining, SeededRunsAreByteIdentical) {
    auto corpus = small_corpus(2, 16, 4);
    auto enc = tiny();
    enc.dropout = 0.1;
    auto dir = std::filesystem::temp_directory_path();
    PretrainConfig cfg;
    cfg.steps = 4;
    cfg.batch_size = 3;
    cfg.metrics_path = (dir / "tb_metrics_a.jsonl").string();
    auto a = run_pretraining(corpus, enc, cfg, 21);
    cfg.metrics_path = (dir / "tb_metrics_b.jsonl").string();
    auto b = run_pretraining(corpus, enc, cfg, 21);
    EXPECT_EQ(slurp((dir / "tb_metrics_a.jsonl").string()), slurp(cfg.metrics_path));
    EXPECT_EQ(a.log.front().lr, 1e-4);
    EXPECT_EQ(a.log.back().lr, 2e-7);
    for (const auto& [name, t] : a.params)
        EXPECT_EQ(0, std::memcmp(t.data(), b.params.get(name).data(), t.numel() * sizeof(double))) << name;
}

TEST(RunPretraining, ZeroStepsWritesInitialCheckpoint) {
    auto corpus = small_corpus(2, 16, 2);
    PretrainConfig cfg;
    cfg.steps = 0;
    cfg.checkpoint_path = (std::filesystem::temp_directory_path() / "tb_init.ckpt").string();
    auto r = run_pretraining(corpus, tiny(), cfg, 3);
    auto ck = load_checkpoint(cfg.checkpoint_path);
    EXPECT_EQ(ck.params.size(), r.params.size());
    EXPECT_EQ(read_registry(ck.config).size(), 2u);
    EXPECT_TRUE(r.log.empty());
}

TEST(RunPretraining, SingleDatasetDisablesVariateTask) {
    auto corpus = small_corpus(2, 16, 3);
    Corpus one;
    one.registry.add("only");
    for (std::size_t i = 0; i < 3; ++i) one.samples.push_back(corpus.samples[i]);
    PretrainConfig cfg;
    cfg.steps = 1;
    auto r = run_pretraining(one, tiny(), cfg, 1);
    EXPECT_FALSE(r.variate_task);
}
