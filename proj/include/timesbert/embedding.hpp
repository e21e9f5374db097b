#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "timesbert/errors.hpp"
#include "timesbert/ops.hpp"
#include "timesbert/params.hpp"
#include "timesbert/series.hpp"

namespace timesbert {

namespace param_names {
inline const std::string w_in = "embed.w_in";  // D x P
inline const std::string pos = "embed.pos";    // context_len x D
inline const std::string mask_token = "embed.mask";
inline const std::string var_token = "embed.var";
inline const std::string dom_token = "embed.dom";
inline const std::string w_out = "mpm.w_out";  // D x P
inline const std::string w_var = "ftp.w_var";  // D x 2
inline const std::string w_dom = "ftp.w_dom";  // D x M
}  // namespace param_names

struct PatchSegments {
    std::vector<std::vector<double>> patches;
    std::vector<std::size_t> pad_counts;
};

/// Splits a length-T series into N = ceil(T/P) patches; the last one is
/// zero-padded on the right and its pad count recorded.
inline PatchSegments segment_patches(std::span<const double> series, std::size_t patch_len) {
    if (series.empty()) throw DataError("segment_patches: empty series");
    if (patch_len == 0) throw ConfigError("segment_patches: patch length must be positive");
    const std::size_t n = (series.size() + patch_len - 1) / patch_len;
    PatchSegments out;
    out.patches.assign(n, std::vector<double>(patch_len, 0.0));
    out.pad_counts.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t b = i * patch_len;
        const std::size_t e = std::min(series.size(), b + patch_len);
        std::copy(series.begin() + static_cast<std::ptrdiff_t>(b), series.begin() + static_cast<std::ptrdiff_t>(e),
                  out.patches[i].begin());
        out.pad_counts[i] = patch_len - (e - b);
    }
    return out;
}

enum class SlotRole : std::uint8_t { Dom, Var, Patch };

struct TokenSlot {
    SlotRole role = SlotRole::Patch;
    std::size_t variate = 0;  // unused for DOM
    std::size_t patch = 0;    // PATCH only
    std::vector<double> raw_patch;
    std::size_t pad_count = 0;
};

/// Token layout of one sample: [DOM], then per variate its N patches followed
/// by a VAR token, (N+1)C+1 slots in total.
struct TokenGrid {
    std::vector<TokenSlot> tokens;
    std::size_t n_patches = 0;
    std::size_t n_variates = 0;
    std::size_t patch_len = 0;

    static constexpr std::size_t dom_slot() { return 0; }
    std::size_t patch_slot(std::size_t c, std::size_t i) const { return 1 + c * (n_patches + 1) + i; }
    std::size_t var_slot(std::size_t c) const { return 1 + c * (n_patches + 1) + n_patches; }
    std::size_t size() const { return tokens.size(); }
    const TokenSlot& patch(std::size_t c, std::size_t i) const { return tokens[patch_slot(c, i)]; }
};

inline std::size_t expected_token_count(std::size_t n_variates, std::size_t length, std::size_t patch_len) {
    return ((length + patch_len - 1) / patch_len + 1) * n_variates + 1;
}

namespace detail {

inline TokenGrid grid_for_variates(const TimeSeriesSample& s, const std::vector<std::size_t>& variates,
                                   std::size_t patch_len) {
    TokenGrid g;
    g.n_variates = variates.size();
    g.patch_len = patch_len;
    g.n_patches = (s.length + patch_len - 1) / patch_len;
    g.tokens.reserve((g.n_patches + 1) * g.n_variates + 1);
    g.tokens.push_back({SlotRole::Dom, 0, 0, {}, 0});
    for (std::size_t ci = 0; ci < variates.size(); ++ci) {
        const std::size_t c = variates[ci];
        // Only the valid prefix is real data; everything after it counts as padding.
        auto seg = segment_patches(s.variate(c).first(s.valid_len[c]), patch_len);
        for (std::size_t i = 0; i < g.n_patches; ++i) {
            TokenSlot slot{SlotRole::Patch, ci, i, std::vector<double>(patch_len, 0.0), patch_len};
            if (i < seg.patches.size()) {
                slot.raw_patch = std::move(seg.patches[i]);
                slot.pad_count = seg.pad_counts[i];
            }
            g.tokens.push_back(std::move(slot));
        }
        g.tokens.push_back({SlotRole::Var, ci, 0, {}, 0});
    }
    return g;
}

}  // namespace detail

/// One grid for the whole sample, or with channel_independent one grid of
/// N+2 slots per variate.
inline std::vector<TokenGrid> build_token_grid(const TimeSeriesSample& sample, std::size_t patch_len,
                                               bool channel_independent) {
    sample.validate();
    if (patch_len == 0) throw ConfigError("build_token_grid: patch length must be positive");
    std::vector<TokenGrid> out;
    if (channel_independent) {
        for (std::size_t c = 0; c < sample.n_variates; ++c) out.push_back(detail::grid_for_variates(sample, {c}, patch_len));
    } else {
        std::vector<std::size_t> all(sample.n_variates);
        std::iota(all.begin(), all.end(), std::size_t{0});
        out.push_back(detail::grid_for_variates(sample, all, patch_len));
    }
    return out;
}

enum class MaskAction : std::uint8_t { Replace, Keep };

struct MaskEntry {
    std::size_t variate = 0;
    std::size_t patch = 0;
    MaskAction action = MaskAction::Replace;
    std::vector<double> target;  // ground truth, captured before corruption
    std::size_t pad_count = 0;
};

/// Masked patch coordinates of one grid, with per-entry corruption action.
struct MaskPlan {
    std::vector<MaskEntry> entries;

    std::size_t size() const { return entries.size(); }
    bool empty() const { return entries.empty(); }

    // Slot-indexed flags: 0 = untouched, 1 = keep, 2 = replace.
    std::vector<std::uint8_t> slot_flags(const TokenGrid& g) const {
        std::vector<std::uint8_t> f(g.size(), 0);
        for (const auto& e : entries) {
            if (e.variate >= g.n_variates || e.patch >= g.n_patches)
                throw DimensionError("mask plan coordinate (" + std::to_string(e.variate) + "," +
                                     std::to_string(e.patch) + ") outside grid");
            f[g.patch_slot(e.variate, e.patch)] = e.action == MaskAction::Replace ? 2 : 1;
        }
        return f;
    }

    // Plan that replaces exactly the given (variate, patch) coordinates.
    static MaskPlan replace_all(const TokenGrid& g, const std::vector<std::pair<std::size_t, std::size_t>>& coords) {
        MaskPlan p;
        for (auto [c, i] : coords) {
            const auto& slot = g.patch(c, i);
            p.entries.push_back({c, i, MaskAction::Replace, slot.raw_patch, slot.pad_count});
        }
        return p;
    }
};

/// Z0 rows for one grid: W_in p + PE[pos] for visible patches, z_[MASK] for
/// replaced ones, z_[VAR]/z_[DOM] for functional slots; pos is the slot's
/// within-sample index.
inline Tensor embed_grid(const TokenGrid& grid, const ParamStore& params, const MaskPlan* plan = nullptr) {
    const Tensor& w_in = params.get(param_names::w_in);
    const Tensor& pe = params.get(param_names::pos);
    if (w_in.dim(1) != grid.patch_len) {
        throw DimensionError("embed_grid: grid patch length " + std::to_string(grid.patch_len) +
                             " does not match W_in " + shape_str(w_in.shape()));
    }
    if (grid.size() > pe.dim(0)) {
        throw DimensionError("embed_grid: " + std::to_string(grid.size()) + " slots exceed position capacity " +
                             std::to_string(pe.dim(0)));
    }
    const auto flags = plan ? plan->slot_flags(grid) : std::vector<std::uint8_t>(grid.size(), 0);

    std::vector<double> visible;
    std::vector<std::size_t> visible_slot;
    for (std::size_t s = 0; s < grid.size(); ++s) {
        const auto& t = grid.tokens[s];
        if (t.role == SlotRole::Patch && flags[s] != 2) {
            visible.insert(visible.end(), t.raw_patch.begin(), t.raw_patch.end());
            visible_slot.push_back(s);
        }
    }
    std::vector<Tensor> sources;
    std::size_t n_visible = visible_slot.size();
    if (n_visible > 0) {
        Tensor patches({n_visible, grid.patch_len}, std::move(visible));
        sources.push_back(ops::matmul_nt(patches, w_in));
    }
    sources.push_back(params.get(param_names::dom_token));
    sources.push_back(params.get(param_names::var_token));
    sources.push_back(params.get(param_names::mask_token));
    const Tensor source = ops::concat_rows(sources);

    std::vector<std::size_t> pick(grid.size());
    std::size_t next_visible = 0;
    for (std::size_t s = 0; s < grid.size(); ++s) {
        switch (grid.tokens[s].role) {
            case SlotRole::Dom: pick[s] = n_visible; break;
            case SlotRole::Var: pick[s] = n_visible + 1; break;
            case SlotRole::Patch: pick[s] = flags[s] == 2 ? n_visible + 2 : next_visible++; break;
        }
    }
    std::vector<std::size_t> positions(grid.size());
    std::iota(positions.begin(), positions.end(), std::size_t{0});
    return ops::add(ops::gather_rows(source, pick), ops::gather_rows(pe, positions));
}

// ---------------------------------------------------------------------------
// Packing

inline constexpr std::size_t kPad = std::numeric_limits<std::size_t>::max();

struct SamplePlacement {
    std::size_t row = 0;
    std::size_t offset = 0;
    std::size_t length = 0;
};

struct PackOptions {
    std::size_t context_len = 512;
    std::size_t max_rows = 0;  // rows per batch, 0 = everything in one batch
    // Cut each row after its last occupied position instead of padding to
    // context_len. PAD never influences other positions, so outputs at
    // occupied positions are unchanged.
    bool trim = false;
};

/// Packed rows of whole samples. rows[b] is this batch's token_embeddings
/// slice [L_ctx x D]; PAD rows are zero and excluded from attention.
struct PackedBatch {
    std::size_t context_len = 0;
    std::vector<Tensor> rows;
    std::vector<std::vector<std::size_t>> block_map;     // sample index or kPad
    std::vector<std::vector<std::size_t>> position_ids;  // within-sample slot, 0 on PAD
    std::vector<AttentionMask> attention;
    std::vector<std::size_t> samples;          // indices of the samples packed in this batch
    std::vector<SamplePlacement> placement;    // parallel to `samples`

    std::size_t batch_size() const { return rows.size(); }

    const SamplePlacement& where(std::size_t sample) const {
        for (std::size_t i = 0; i < samples.size(); ++i)
            if (samples[i] == sample) return placement[i];
        throw std::out_of_range("sample " + std::to_string(sample) + " is not in this batch");
    }

    // Row-local flat position of a sample's slot.
    std::size_t flat_position(std::size_t sample, std::size_t slot) const {
        const auto& p = where(sample);
        if (slot >= p.length) throw std::out_of_range("slot outside sample");
        return p.offset + slot;
    }
};

/// First-fit-decreasing packing of embedded samples (rows of Z0) into rows of
/// at most context_len positions. Ties keep input order.
inline std::vector<PackedBatch> pack(const std::vector<Tensor>& embedded, const PackOptions& opt,
                                     const std::vector<std::string>& sample_names = {}) {
    if (embedded.empty()) return {};
    const std::size_t d = embedded.front().cols();
    std::vector<std::size_t> order(embedded.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = 0; i < embedded.size(); ++i) {
        if (embedded[i].cols() != d) throw DimensionError("pack: embedding widths differ");
        if (embedded[i].rows() > opt.context_len) {
            const std::string name = i < sample_names.size() ? sample_names[i] : "#" + std::to_string(i);
            throw DataError("pack: sample " + name + " has " + std::to_string(embedded[i].rows()) +
                            " tokens, more than context length " + std::to_string(opt.context_len));
        }
    }
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return embedded[a].rows() > embedded[b].rows(); });

    std::vector<std::size_t> fill;                    // occupied length per row
    std::vector<std::vector<std::size_t>> members;    // samples per row, in placement order
    std::vector<SamplePlacement> place(embedded.size());
    for (auto s : order) {
        const std::size_t len = embedded[s].rows();
        std::size_t r = 0;
        while (r < fill.size() && fill[r] + len > opt.context_len) ++r;
        if (r == fill.size()) {
            fill.push_back(0);
            members.emplace_back();
        }
        place[s] = {r, fill[r], len};
        fill[r] += len;
        members[r].push_back(s);
    }

    const std::size_t per_batch = opt.max_rows == 0 ? fill.size() : opt.max_rows;
    std::vector<PackedBatch> batches;
    for (std::size_t r0 = 0; r0 < fill.size(); r0 += per_batch) {
        PackedBatch b;
        b.context_len = opt.context_len;
        for (std::size_t r = r0; r < std::min(fill.size(), r0 + per_batch); ++r) {
            const std::size_t width = opt.trim ? fill[r] : opt.context_len;
            std::vector<Tensor> parts;
            std::vector<std::size_t> bmap(width, kPad), pos(width, 0);
            for (auto s : members[r]) {
                parts.push_back(embedded[s]);
                for (std::size_t k = 0; k < place[s].length; ++k) {
                    bmap[place[s].offset + k] = s;
                    pos[place[s].offset + k] = k;
                }
                b.samples.push_back(s);
                b.placement.push_back({r - r0, place[s].offset, place[s].length});
            }
            if (width > fill[r]) parts.push_back(Tensor({width - fill[r], d}));
            AttentionMask mask(width);
            for (auto s : members[r])
                for (std::size_t q = 0; q < place[s].length; ++q)
                    for (std::size_t k = 0; k < place[s].length; ++k)
                        mask.set(place[s].offset + q, place[s].offset + k, true);
            b.rows.push_back(ops::concat_rows(parts));
            b.block_map.push_back(std::move(bmap));
            b.position_ids.push_back(std::move(pos));
            b.attention.push_back(std::move(mask));
        }
        batches.push_back(std::move(b));
    }
    return batches;
}

}  // namespace timesbert
