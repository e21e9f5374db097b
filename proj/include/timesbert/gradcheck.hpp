#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "timesbert/errors.hpp"
#include "timesbert/tensor.hpp"

namespace timesbert {

struct GradCheckEntry {
    std::string param;
    std::size_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_error = 0.0;
};

struct GradCheckReport {
    bool passed = true;
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::vector<GradCheckEntry> worst;  // descending rel_error
};

struct GradCheckOptions {
    double h = 1e-6;
    double tol = 1e-4;
    // Denominator floor for the relative error, so entries whose true
    // gradient is ~0 are judged on absolute finite-difference noise.
    double abs_floor = 1e-5;
    std::size_t keep_worst = 5;
};

/// Compares reverse-mode gradients of the scalar function `f` against central
/// finite differences for every entry of every tensor in `params`.
/// `f` must rebuild its graph from the current parameter values on each call.
template <class F>
GradCheckReport check_gradients(F&& f, std::vector<std::pair<std::string, Tensor>> params,
                                const GradCheckOptions& opt = {}) {
    auto eval = [&]() {
        NoGradScope ng;
        return f().item();
    };
    const double f0 = eval();
    const double f1 = eval();
    if (std::memcmp(&f0, &f1, sizeof f0) != 0) {
        throw std::runtime_error("check_gradients: function is not deterministic (" + std::to_string(f0) + " vs " +
                                 std::to_string(f1) + ")");
    }

    for (auto& [name, t] : params) {
        t.set_requires_grad(true);
        t.drop_grad();
    }
    {
        Tape tape;
        TapeScope scope(tape);
        Tensor loss = f();
        tape.backward(loss);
    }

    GradCheckReport report;
    std::vector<GradCheckEntry> all;
    for (auto& [name, t] : params) {
        std::vector<double> analytic(t.numel(), 0.0);
        if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
        for (std::size_t i = 0; i < t.numel(); ++i) {
            const double orig = t[i];
            t[i] = orig + opt.h;
            const double fp = eval();
            t[i] = orig - opt.h;
            const double fm = eval();
            t[i] = orig;
            const double numeric = (fp - fm) / (2.0 * opt.h);
            const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), opt.abs_floor});
            const double rel = std::abs(analytic[i] - numeric) / denom;
            all.push_back({name, i, analytic[i], numeric, rel});
            report.max_rel_error = std::max(report.max_rel_error, rel);
            ++report.checked;
            if (rel > opt.tol) report.passed = false;
        }
    }
    std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.rel_error > b.rel_error; });
    all.resize(std::min(all.size(), opt.keep_worst));
    report.worst = std::move(all);
    return report;
}

}  // namespace timesbert
