#pragma once

#include <cmath>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "timesbert/errors.hpp"
#include "timesbert/params.hpp"

namespace timesbert {

/// Cosine annealing from lr_init at step 0 to lr_final at step `last`.
/// Written as a convex combination so both endpoints are exact.
inline double cosine_lr(std::size_t step, std::size_t last, double lr_init, double lr_final) {
    if (last == 0) return lr_init;
    const double t = static_cast<double>(std::min(step, last)) / static_cast<double>(last);
    const double w = 0.5 * (1.0 + std::cos(std::numbers::pi * t));
    return lr_init * w + lr_final * (1.0 - w);
}

/// Linear warmup over the first `warmup_frac` of `total` steps, then constant.
inline double warmup_constant_lr(std::size_t step, std::size_t total, double lr, double warmup_frac) {
    const auto warm = static_cast<std::size_t>(std::ceil(warmup_frac * static_cast<double>(total)));
    if (warm == 0 || step >= warm) return lr;
    return lr * static_cast<double>(step + 1) / static_cast<double>(warm);
}

/// Global L2 norm of all accumulated gradients.
inline double grad_norm(const ParamStore& ps) {
    double s = 0.0;
    for (const auto& [name, t] : ps)
        if (t.requires_grad() && t.has_grad())
            for (double g : t.grad()) s += g * g;
    return std::sqrt(s);
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
inline double clip_grad_norm(ParamStore& ps, double max_norm) {
    const double n = grad_norm(ps);
    if (!std::isfinite(n)) throw NumericError("gradient norm is not finite");
    if (max_norm > 0.0 && n > max_norm) {
        const double k = max_norm / n;
        for (auto& [name, t] : ps)
            if (t.requires_grad() && t.has_grad())
                for (double& g : t.grad()) g *= k;
    }
    return n;
}

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

/// AdamW with decoupled weight decay. Decay applies to matrices only; biases,
/// LayerNorm parameters and token vectors are not decayed.
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    void step(ParamStore& ps, double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (auto& [name, p] : ps) {
            if (!p.requires_grad() || !p.has_grad()) continue;
            auto& st = state_[name];
            if (st.m.size() != p.numel()) {
                st.m.assign(p.numel(), 0.0);
                st.v.assign(p.numel(), 0.0);
            }
            const bool decay = p.rank() == 2;
            auto g = p.grad();
            auto x = p.values();
            for (std::size_t i = 0; i < x.size(); ++i) {
                st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g[i];
                st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                const double mhat = st.m[i] / bc1, vhat = st.v[i] / bc2;
                if (decay) x[i] -= lr * cfg_.weight_decay * x[i];
                x[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

    std::size_t steps() const { return t_; }
    const AdamWConfig& config() const { return cfg_; }

private:
    struct Moments {
        std::vector<double> m, v;
    };
    AdamWConfig cfg_;
    std::size_t t_ = 0;
    std::map<std::string, Moments> state_;
};

}  // namespace timesbert
