#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "support.hpp"
#include "timesbert/embedding.hpp"
#include "timesbert/encoder.hpp"

using namespace timesbert;

namespace {

TimeSeriesSample ramp_sample(std::size_t c, std::size_t t, double offset = 0.0) {
    std::vector<std::vector<double>> v(c, std::vector<double>(t));
    for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = 0; j < t; ++j) v[i][j] = offset + 0.1 * static_cast<double>(j) + static_cast<double>(i);
    return TimeSeriesSample::from_variates(v);
}

EncoderConfig small_config(std::size_t patch_len = 24) {
    EncoderConfig cfg;
    cfg.d_model = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.patch_len = patch_len;
    cfg.context_len = 64;
    cfg.dropout = 0.0;
    return cfg;
}

}  // namespace

TEST(SegmentPatches, ExactDivision) {
    std::vector<double> x(96, 1.0);
    auto seg = segment_patches(x, 24);
    EXPECT_EQ(seg.patches.size(), 4u);
    for (auto p : seg.pad_counts) EXPECT_EQ(p, 0u);
}

TEST(SegmentPatches, PartialLastPatchIsPadded) {
    std::vector<double> x(100, 1.0);
    auto seg = segment_patches(x, 24);
    ASSERT_EQ(seg.patches.size(), 5u);
    EXPECT_EQ(seg.pad_counts.back(), 20u);
    EXPECT_DOUBLE_EQ(seg.patches.back()[3], 1.0);
    EXPECT_DOUBLE_EQ(seg.patches.back()[4], 0.0);
}

TEST(SegmentPatches, SinglePatchIdentity) {
    std::vector<double> x{1, 2, 3};
    auto seg = segment_patches(x, 3);
    ASSERT_EQ(seg.patches.size(), 1u);
    EXPECT_EQ(seg.patches[0], x);
}

TEST(SegmentPatches, EmptySeriesIsAnError) {
    std::vector<double> x;
    EXPECT_THROW(segment_patches(x, 4), DataError);
}

TEST(TokenGrid, StructuredLayoutForTwoVariates) {
    auto grids = build_token_grid(ramp_sample(2, 72), 24, false);
    ASSERT_EQ(grids.size(), 1u);
    const auto& g = grids[0];
    ASSERT_EQ(g.size(), 9u);
    const SlotRole P = SlotRole::Patch, V = SlotRole::Var;
    std::vector<SlotRole> expected{SlotRole::Dom, P, P, P, V, P, P, P, V};
    for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(g.tokens[i].role, expected[i]) << i;
    EXPECT_EQ(g.tokens[5].variate, 1u);
    EXPECT_EQ(g.tokens[7].patch, 2u);
    EXPECT_EQ(g.var_slot(1), 8u);
}

TEST(TokenGrid, SingleVariateSinglePatch) {
    EXPECT_EQ(build_token_grid(ramp_sample(1, 24), 24, false)[0].size(), 3u);
}

TEST(TokenGrid, ChannelIndependentSplitsVariates) {
    auto grids = build_token_grid(ramp_sample(3, 72), 24, true);
    ASSERT_EQ(grids.size(), 3u);
    for (const auto& g : grids) EXPECT_EQ(g.size(), 5u);
    EXPECT_DOUBLE_EQ(grids[2].tokens[1].raw_patch[0], 2.0);
}

TEST(TokenGrid, TokenCountFormulaSweep) {
    for (std::size_t c = 1; c <= 8; ++c)
        for (std::size_t t = 1; t <= 200; ++t)
            for (std::size_t p : {4u, 24u, 36u}) {
                auto s = ramp_sample(c, t);
                const auto g = build_token_grid(s, p, false);
                const std::size_t n = (t + p - 1) / p;
                ASSERT_EQ(g[0].size(), (n + 1) * c + 1) << c << " " << t << " " << p;
                ASSERT_EQ(g[0].size(), expected_token_count(c, t, p));
            }
}

TEST(TokenGrid, ShortValidLengthPadsTrailingPatches) {
    auto s = TimeSeriesSample::from_variates({std::vector<double>(10, 1.0), std::vector<double>(30, 2.0)});
    const auto g = build_token_grid(s, 8, false)[0];
    EXPECT_EQ(g.n_patches, 4u);
    EXPECT_EQ(g.patch(0, 1).pad_count, 6u);
    EXPECT_EQ(g.patch(0, 2).pad_count, 8u);
    EXPECT_EQ(g.patch(1, 3).pad_count, 2u);
}

TEST(EmbedGrid, ZeroPatchZeroWeightsZeroPositionGivesZero) {
    auto cfg = small_config(4);
    auto ps = init_params(cfg, 1);
    for (double& v : ps.get(param_names::w_in).values()) v = 0.0;
    auto pe = ps.get(param_names::pos);
    for (std::size_t j = 0; j < cfg.d_model; ++j) pe.at(1, j) = 0.0;
    auto s = TimeSeriesSample::from_variates({std::vector<double>(4, 0.0)});
    Tensor z = embed_grid(build_token_grid(s, 4, false)[0], ps);
    for (std::size_t j = 0; j < cfg.d_model; ++j) EXPECT_EQ(z.at(1, j), 0.0);
}

TEST(EmbedGrid, ReplacedPatchesShareTheMaskEmbedding) {
    auto cfg = small_config(4);
    auto ps = init_params(cfg, 2);
    const auto g = build_token_grid(ramp_sample(2, 12), 4, false)[0];
    std::vector<std::pair<std::size_t, std::size_t>> all;
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t i = 0; i < 3; ++i) all.emplace_back(c, i);
    const auto plan = MaskPlan::replace_all(g, all);
    Tensor z = embed_grid(g, ps, &plan);
    const auto& mask = ps.get(param_names::mask_token);
    const auto& pe = ps.get(param_names::pos);
    for (auto [c, i] : all) {
        const std::size_t s = g.patch_slot(c, i);
        for (std::size_t j = 0; j < cfg.d_model; ++j) EXPECT_DOUBLE_EQ(z.at(s, j), mask[j] + pe.at(s, j));
    }
}

TEST(EmbedGrid, KeepActionUsesTrueValue) {
    auto cfg = small_config(4);
    auto ps = init_params(cfg, 2);
    const auto g = build_token_grid(ramp_sample(1, 8), 4, false)[0];
    MaskPlan plan;
    plan.entries.push_back({0, 1, MaskAction::Keep, g.patch(0, 1).raw_patch, 0});
    Tensor with_keep = embed_grid(g, ps, &plan);
    Tensor plain = embed_grid(g, ps);
    for (std::size_t i = 0; i < plain.numel(); ++i) EXPECT_EQ(with_keep[i], plain[i]);
}

TEST(EmbedGrid, IdenticalPatchesDifferByPositionRowsOnly) {
    auto cfg = small_config(4);
    auto ps = init_params(cfg, 3);
    auto s = TimeSeriesSample::from_variates({{1, 2, 3, 4, 1, 2, 3, 4}});
    const auto g = build_token_grid(s, 4, false)[0];
    Tensor z = embed_grid(g, ps);
    const auto& pe = ps.get(param_names::pos);
    for (std::size_t j = 0; j < cfg.d_model; ++j)
        EXPECT_NEAR(z.at(2, j) - z.at(1, j), pe.at(2, j) - pe.at(1, j), 1e-15);
}

TEST(EmbedGrid, PositionCapacityExceededIsAnError) {
    auto cfg = small_config(4);
    cfg.context_len = 4;
    auto ps = init_params(cfg, 4);
    const auto g = build_token_grid(ramp_sample(2, 8), 4, false)[0];  // 7 slots
    EXPECT_THROW(embed_grid(g, ps), DimensionError);
}

TEST(Pack, TwoSmallGridsShareOneRow) {
    std::vector<Tensor> emb{Tensor({9, 4}), Tensor({9, 4})};
    auto batches = pack(emb, {512});
    ASSERT_EQ(batches.size(), 1u);
    const auto& b = batches[0];
    ASSERT_EQ(b.batch_size(), 1u);
    const auto& bm = b.block_map[0];
    ASSERT_EQ(bm.size(), 512u);
    for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(bm[i], 0u);
    for (std::size_t i = 9; i < 18; ++i) EXPECT_EQ(bm[i], 1u);
    for (std::size_t i = 18; i < 512; ++i) EXPECT_EQ(bm[i], kPad);
    EXPECT_EQ(b.position_ids[0][9], 0u);
    EXPECT_EQ(b.position_ids[0][17], 8u);
}

TEST(Pack, FullContextGridFillsOneRow) {
    std::vector<Tensor> emb{Tensor({512, 2})};
    auto b = pack(emb, {512})[0];
    ASSERT_EQ(b.batch_size(), 1u);
    for (auto s : b.block_map[0]) EXPECT_EQ(s, 0u);
}

TEST(Pack, OverlongGridNamesTheSample) {
    std::vector<Tensor> emb{Tensor({513, 2})};
    try {
        pack(emb, {512}, {"big-one"});
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("big-one"), std::string::npos);
    }
}

TEST(Pack, AttentionIsBlockDiagonal) {
    Rng rng(8);
    std::vector<Tensor> emb;
    for (int i = 0; i < 7; ++i) emb.push_back(Tensor({1 + rng.uniform_int(20), 3}));
    for (const auto& b : pack(emb, {32, 0, false}))
        for (std::size_t r = 0; r < b.batch_size(); ++r) {
            const auto& bm = b.block_map[r];
            for (std::size_t p = 0; p < bm.size(); ++p)
                for (std::size_t q = 0; q < bm.size(); ++q)
                    ASSERT_EQ(b.attention[r].allowed(p, q), bm[p] == bm[q] && bm[p] != kPad);
        }
}

TEST(Pack, FirstFitDecreasingAndRoundTrip) {
    Rng rng(12);
    std::vector<Tensor> emb;
    std::vector<std::size_t> lens;
    for (int i = 0; i < 25; ++i) {
        lens.push_back(1 + rng.uniform_int(30));
        Tensor t({lens.back(), 2});
        for (std::size_t k = 0; k < t.rows(); ++k) {
            t.at(k, 0) = i;
            t.at(k, 1) = static_cast<double>(k);
        }
        emb.push_back(t);
    }
    auto batches = pack(emb, {40, 3, true});
    std::vector<int> seen(emb.size(), 0);
    for (const auto& b : batches) {
        EXPECT_LE(b.batch_size(), 3u);
        for (std::size_t i = 0; i < b.samples.size(); ++i) {
            const std::size_t s = b.samples[i];
            const auto& pl = b.placement[i];
            ++seen[s];
            EXPECT_EQ(pl.length, lens[s]);
            for (std::size_t k = 0; k < pl.length; ++k) {
                const std::size_t flat = b.flat_position(s, k);
                EXPECT_EQ(b.block_map[pl.row][flat], s);
                EXPECT_EQ(b.position_ids[pl.row][flat], k);
                EXPECT_EQ(b.rows[pl.row].at(flat, 0), static_cast<double>(s));
                EXPECT_EQ(b.rows[pl.row].at(flat, 1), static_cast<double>(k));
            }
        }
        for (const auto& row : b.rows) EXPECT_LE(row.rows(), 40u);
    }
    for (int n : seen) EXPECT_EQ(n, 1);
}

TEST(Pack, GridCoordinatesRecoverFromFlatPositions) {
    auto cfg = small_config(4);
    cfg.context_len = 64;
    auto ps = init_params(cfg, 5);
    std::vector<TokenGrid> grids{build_token_grid(ramp_sample(2, 12), 4, false)[0],
                                 build_token_grid(ramp_sample(3, 7), 4, false)[0]};
    std::vector<Tensor> emb;
    for (const auto& g : grids) emb.push_back(embed_grid(g, ps));
    const auto b = pack(emb, {64})[0];
    for (std::size_t s = 0; s < grids.size(); ++s) {
        const auto& g = grids[s];
        for (std::size_t c = 0; c < g.n_variates; ++c)
            for (std::size_t i = 0; i < g.n_patches; ++i) {
                const std::size_t flat = b.flat_position(s, g.patch_slot(c, i));
                const auto& pl = b.where(s);
                const std::size_t slot = b.position_ids[pl.row][flat];
                EXPECT_EQ(b.block_map[pl.row][flat], s);
                EXPECT_EQ(g.tokens[slot].role, SlotRole::Patch);
                EXPECT_EQ(g.tokens[slot].variate, c);
                EXPECT_EQ(g.tokens[slot].patch, i);
            }
    }
}
