#pragma once

// Differentiable primitives over Tensor. Every op computes its forward value
// eagerly; when a Tape is active and any input requires grad, the op records
// a closure that accumulates input gradients during the reverse sweep.
//
// All reductions accumulate left to right in index order, so results are
// bitwise reproducible for identical inputs.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "timesbert/rng.hpp"
#include "timesbert/tensor.hpp"

namespace timesbert {

/// Square boolean matrix; allowed(q, k) says whether query position q may
/// attend to key position k.
class AttentionMask {
public:
    AttentionMask() = default;
    explicit AttentionMask(std::size_t n, bool fill = false) : n_(n), allowed_(n * n, fill ? 1 : 0) {}

    std::size_t size() const { return n_; }
    bool allowed(std::size_t q, std::size_t k) const { return allowed_[q * n_ + k] != 0; }
    void set(std::size_t q, std::size_t k, bool on) { allowed_[q * n_ + k] = on ? 1 : 0; }

    // Leading square block of size m.
    AttentionMask leading(std::size_t m) const {
        AttentionMask out(m);
        for (std::size_t q = 0; q < m; ++q)
            for (std::size_t k = 0; k < m; ++k) out.set(q, k, allowed(q, k));
        return out;
    }

    bool operator==(const AttentionMask&) const = default;

private:
    std::size_t n_ = 0;
    std::vector<std::uint8_t> allowed_;
};

namespace detail {

inline bool recording(std::initializer_list<const Tensor*> inputs) {
    if (Tape::active() == nullptr) return false;
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

inline void check_finite(const Tensor& t, const char* op) {
    if (!t.all_finite()) throw NumericError(std::string(op) + ": non-finite value in output");
}

inline void require_rank2(const Tensor& t, const char* op, const char* name) {
    if (t.rank() != 2) {
        throw DimensionError(std::string(op) + ": " + name + " must be a matrix, got " + shape_str(t.shape()));
    }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

template <class Fn>
void record(Tensor& out, Fn&& fn) {
    out.set_requires_grad(true);
    Tape::active()->record(std::forward<Fn>(fn));
}

}  // namespace detail

namespace ops {

// a[m×k] · b[k×n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank2(a, "matmul", "a");
    detail::require_rank2(b, "matmul", "b");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul: inner dimensions differ, a " + shape_str(a.shape()) + " b " +
                             shape_str(b.shape()));
    }
    Tensor out({m, n});
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (std::size_t i = 0; i < m; ++i) {
        double* row = po + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = pa[i * k + p];
            const double* brow = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
        }
    }
    detail::check_finite(out, "matmul");
    if (detail::recording({&a, &b})) {
        detail::record(out, [a, b, out, m, k, n]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad().data();
            if (a.requires_grad()) {
                double* ga = a.grad().data();
                const double* pb = b.data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        double s = 0.0;
                        for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * pb[p * n + j];
                        ga[i * k + p] += s;
                    }
            }
            if (b.requires_grad()) {
                double* gb = b.grad().data();
                const double* pa = a.data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        const double av = pa[i * k + p];
                        for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * g[i * n + j];
                    }
            }
        });
    }
    return out;
}

// a[m×k] · b[n×k]ᵀ
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    detail::require_rank2(a, "matmul_nt", "a");
    detail::require_rank2(b, "matmul_nt", "b");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    if (b.dim(1) != k) {
        throw DimensionError("matmul_nt: inner dimensions differ, a " + shape_str(a.shape()) + " b " +
                             shape_str(b.shape()));
    }
    Tensor out({m, n});
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += pa[i * k + p] * pb[j * k + p];
            po[i * n + j] = s;
        }
    detail::check_finite(out, "matmul_nt");
    if (detail::recording({&a, &b})) {
        detail::record(out, [a, b, out, m, k, n]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad().data();
            if (a.requires_grad()) {
                double* ga = a.grad().data();
                const double* pb = b.data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        const double gv = g[i * n + j];
                        for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += gv * pb[j * k + p];
                    }
            }
            if (b.requires_grad()) {
                double* gb = b.grad().data();
                const double* pa = a.data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        const double gv = g[i * n + j];
                        for (std::size_t p = 0; p < k; ++p) gb[j * k + p] += gv * pa[i * k + p];
                    }
            }
        });
    }
    return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
    detail::check_finite(out, "add");
    if (detail::recording({&a, &b})) {
        detail::record(out, [a, b, out]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            if (a.requires_grad()) {
                auto ga = a.grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        });
    }
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
    detail::check_finite(out, "sub");
    if (detail::recording({&a, &b})) {
        detail::record(out, [a, b, out]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            if (a.requires_grad()) {
                auto ga = a.grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        });
    }
    return out;
}

// Elementwise product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
    detail::check_finite(out, "mul");
    if (detail::recording({&a, &b})) {
        detail::record(out, [a, b, out]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            if (a.requires_grad()) {
                auto ga = a.grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
            }
        });
    }
    return out;
}

inline Tensor scale(const Tensor& a, double s) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * s;
    detail::check_finite(out, "scale");
    if (detail::recording({&a})) {
        detail::record(out, [a, out, s]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto ga = a.grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
        });
    }
    return out;
}

// x[m×n] + bias[n] broadcast over rows. The only broadcast supported.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
    const std::size_t n = x.cols();
    if (bias.numel() != n) {
        throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match columns of " +
                             shape_str(x.shape()));
    }
    const std::size_t m = x.rows();
    Tensor out(x.shape());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + bias[j];
    detail::check_finite(out, "add_bias");
    if (detail::recording({&x, &bias})) {
        detail::record(out, [x, bias, out, m, n]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            if (x.requires_grad()) {
                auto gx = x.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            }
            if (bias.requires_grad()) {
                auto gb = bias.grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
            }
        });
    }
    return out;
}

// Exact (erf-based) GELU.
inline Tensor gelu(const Tensor& x) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) out[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * inv_sqrt2));
    detail::check_finite(out, "gelu");
    if (detail::recording({&x})) {
        detail::record(out, [x, out, inv_sqrt_2pi]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto gx = x.grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double v = x[i];
                const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
                gx[i] += g[i] * (cdf + v * pdf);
            }
        });
    }
    return out;
}

// Softmax over the trailing axis, with max subtraction.
inline Tensor softmax(const Tensor& x) {
    const std::size_t n = x.cols(), m = x.rows();
    Tensor out(x.shape());
    for (std::size_t r = 0; r < m; ++r) {
        const double* in = x.data() + r * n;
        double* o = out.data() + r * n;
        double mx = in[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            o[j] = std::exp(in[j] - mx);
            sum += o[j];
        }
        for (std::size_t j = 0; j < n; ++j) o[j] /= sum;
    }
    detail::check_finite(out, "softmax");
    if (detail::recording({&x})) {
        detail::record(out, [x, out, m, n]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto gx = x.grad();
            for (std::size_t r = 0; r < m; ++r) {
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * out[r * n + j];
                for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += out[r * n + j] * (g[r * n + j] - dot);
            }
        });
    }
    return out;
}

// Row-wise layer normalization over the trailing axis (population variance).
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
    const std::size_t d = x.cols(), m = x.rows();
    if (gamma.numel() != d || beta.numel() != d) {
        throw DimensionError("layer_norm: gamma/beta " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                             " do not match width of " + shape_str(x.shape()));
    }
    Tensor out(x.shape());
    std::vector<double> xhat(x.numel());
    std::vector<double> inv_std(m);
    for (std::size_t r = 0; r < m; ++r) {
        const double* in = x.data() + r * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += in[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (in[j] - mean) * (in[j] - mean);
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t j = 0; j < d; ++j) {
            const double h = (in[j] - mean) * is;
            xhat[r * d + j] = h;
            out[r * d + j] = gamma[j] * h + beta[j];
        }
    }
    detail::check_finite(out, "layer_norm");
    if (detail::recording({&x, &gamma, &beta})) {
        detail::record(out, [x, gamma, beta, out, xhat = std::move(xhat), inv_std = std::move(inv_std), m,
                             d]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            if (gamma.requires_grad()) {
                auto gg = gamma.grad();
                for (std::size_t r = 0; r < m; ++r)
                    for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xhat[r * d + j];
            }
            if (beta.requires_grad()) {
                auto gb = beta.grad();
                for (std::size_t r = 0; r < m; ++r)
                    for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
            }
            if (x.requires_grad()) {
                auto gx = x.grad();
                const double inv_d = 1.0 / static_cast<double>(d);
                for (std::size_t r = 0; r < m; ++r) {
                    double mean_dh = 0.0, mean_dh_h = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dh = g[r * d + j] * gamma[j];
                        mean_dh += dh;
                        mean_dh_h += dh * xhat[r * d + j];
                    }
                    mean_dh *= inv_d;
                    mean_dh_h *= inv_d;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dh = g[r * d + j] * gamma[j];
                        gx[r * d + j] += inv_std[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                    }
                }
            }
        });
    }
    return out;
}

// Mean over rows of -log softmax(logits)[label], via log-sum-exp.
inline Tensor cross_entropy_from_logits(const Tensor& logits, std::span<const int> labels) {
    detail::require_rank2(logits, "cross_entropy_from_logits", "logits");
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    if (labels.size() != n) {
        throw DimensionError("cross_entropy_from_logits: " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(n) + " rows");
    }
    for (int y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= k) {
            throw std::out_of_range("cross_entropy_from_logits: label " + std::to_string(y) + " outside [0," +
                                    std::to_string(k) + ")");
        }
    }
    std::vector<double> probs(n * k);
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        const double* z = logits.data() + r * k;
        double mx = z[0];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, z[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < k; ++j) sum += std::exp(z[j] - mx);
        const double lse = mx + std::log(sum);
        for (std::size_t j = 0; j < k; ++j) probs[r * k + j] = std::exp(z[j] - lse);
        total += lse - z[labels[r]];
    }
    Tensor out = Tensor::scalar(total / static_cast<double>(n));
    detail::check_finite(out, "cross_entropy_from_logits");
    if (detail::recording({&logits})) {
        std::vector<int> ys(labels.begin(), labels.end());
        detail::record(out, [logits, out, probs = std::move(probs), ys = std::move(ys), n, k]() mutable {
            if (!out.has_grad()) return;
            const double g = out.grad()[0] / static_cast<double>(n);
            auto gl = logits.grad();
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t j = 0; j < k; ++j) {
                    const double onehot = (static_cast<int>(j) == ys[r]) ? 1.0 : 0.0;
                    gl[r * k + j] += g * (probs[r * k + j] - onehot);
                }
        });
    }
    return out;
}

// sum(w * (pred - target)^2) / sum(w); zero when all weights vanish.
// target and weights are constants.
inline Tensor weighted_mse(const Tensor& pred, std::span<const double> target, std::span<const double> weights) {
    if (target.size() != pred.numel() || weights.size() != pred.numel()) {
        throw DimensionError("weighted_mse: pred " + shape_str(pred.shape()) + " vs " +
                             std::to_string(target.size()) + " targets / " + std::to_string(weights.size()) +
                             " weights");
    }
    double wsum = 0.0, acc = 0.0;
    for (std::size_t i = 0; i < pred.numel(); ++i) {
        const double e = pred[i] - target[i];
        acc += weights[i] * e * e;
        wsum += weights[i];
    }
    Tensor out = Tensor::scalar(wsum > 0.0 ? acc / wsum : 0.0);
    detail::check_finite(out, "weighted_mse");
    if (wsum > 0.0 && detail::recording({&pred})) {
        std::vector<double> t(target.begin(), target.end()), w(weights.begin(), weights.end());
        detail::record(out, [pred, out, t = std::move(t), w = std::move(w), wsum]() mutable {
            if (!out.has_grad()) return;
            const double g = out.grad()[0];
            auto gp = pred.grad();
            for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g * 2.0 * w[i] * (pred[i] - t[i]) / wsum;
        });
    }
    return out;
}

inline Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.values()) s += v;
    Tensor out = Tensor::scalar(s);
    detail::check_finite(out, "sum");
    if (detail::recording({&x})) {
        detail::record(out, [x, out]() mutable {
            if (!out.has_grad()) return;
            const double g = out.grad()[0];
            for (double& gv : x.grad()) gv += g;
        });
    }
    return out;
}

// Column means: x[m×n] -> [1×n].
inline Tensor mean_rows(const Tensor& x) {
    const std::size_t m = x.rows(), n = x.cols();
    Tensor out({1, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j] += x[i * n + j];
    for (std::size_t j = 0; j < n; ++j) out[j] /= static_cast<double>(m);
    detail::check_finite(out, "mean_rows");
    if (detail::recording({&x})) {
        detail::record(out, [x, out, m, n]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto gx = x.grad();
            const double inv = 1.0 / static_cast<double>(m);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j] * inv;
        });
    }
    return out;
}

// Selects rows of x[m×n] by index (repeats allowed).
inline Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index) {
    const std::size_t m = x.rows(), n = x.cols();
    if (index.empty()) throw DimensionError("gather_rows: empty index");
    for (auto r : index) {
        if (r >= m) {
            throw DimensionError("gather_rows: row " + std::to_string(r) + " out of range for " +
                                 shape_str(x.shape()));
        }
    }
    Tensor out({index.size(), n});
    for (std::size_t i = 0; i < index.size(); ++i)
        std::copy_n(x.data() + index[i] * n, n, out.data() + i * n);
    if (detail::recording({&x})) {
        std::vector<std::size_t> idx(index.begin(), index.end());
        detail::record(out, [x, out, idx = std::move(idx), n]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto gx = x.grad();
            for (std::size_t i = 0; i < idx.size(); ++i)
                for (std::size_t j = 0; j < n; ++j) gx[idx[i] * n + j] += g[i * n + j];
        });
    }
    return out;
}

// Stacks row blocks; a rank-1 tensor of width n counts as one row.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows: no inputs");
    const std::size_t n = parts.front().cols();
    std::size_t total = 0;
    bool any_grad = false;
    for (const auto& p : parts) {
        if (p.cols() != n) {
            throw DimensionError("concat_rows: width mismatch " + shape_str(parts.front().shape()) + " vs " +
                                 shape_str(p.shape()));
        }
        total += p.rows();
        any_grad = any_grad || p.requires_grad();
    }
    Tensor out({total, n});
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.values().begin(), p.values().end(), out.data() + off);
        off += p.numel();
    }
    if (any_grad && Tape::active() != nullptr) {
        detail::record(out, [parts, out]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            std::size_t off = 0;
            for (auto& p : parts) {
                if (p.requires_grad()) {
                    auto gp = p.grad();
                    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[off + i];
                }
                off += p.numel();
            }
        });
    }
    return out;
}

// Inverted dropout; identity when p == 0.
inline Tensor dropout(const Tensor& x, double p, Rng& rng) {
    if (p <= 0.0) return x;
    const double keep_scale = 1.0 / (1.0 - p);
    std::vector<double> mask(x.numel());
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) {
        mask[i] = rng.bernoulli(p) ? 0.0 : keep_scale;
        out[i] = x[i] * mask[i];
    }
    if (detail::recording({&x})) {
        detail::record(out, [x, out, mask = std::move(mask)]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto gx = x.grad();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
        });
    }
    return out;
}

/// Multi-head scaled dot-product attention over q, k, v [L×D] with D split
/// into `heads` slices. Disallowed pairs are skipped, which is the same as
/// giving them -inf logits; a query with no allowed key yields a zero row.
inline Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask& mask,
                               std::size_t heads) {
    detail::require_rank2(q, "masked_attention", "q");
    detail::require_same_shape(q, k, "masked_attention");
    detail::require_same_shape(q, v, "masked_attention");
    const std::size_t len = q.dim(0), d = q.dim(1);
    if (mask.size() != len) {
        throw DimensionError("masked_attention: mask size " + std::to_string(mask.size()) + " vs sequence length " +
                             std::to_string(len));
    }
    if (heads == 0 || d % heads != 0) {
        throw DimensionError("masked_attention: width " + std::to_string(d) + " not divisible by " +
                             std::to_string(heads) + " heads");
    }
    const std::size_t dh = d / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

    // keys[offsets[i] .. offsets[i+1]) are the keys query i may see.
    std::vector<std::size_t> offsets(len + 1, 0), keys;
    for (std::size_t i = 0; i < len; ++i) {
        for (std::size_t j = 0; j < len; ++j)
            if (mask.allowed(i, j)) keys.push_back(j);
        offsets[i + 1] = keys.size();
    }
    // probs laid out as [head][key-slot].
    std::vector<double> probs(heads * keys.size());
    Tensor out({len, d});
    std::vector<double> scores;
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t c0 = h * dh;
        for (std::size_t i = 0; i < len; ++i) {
            const std::size_t b = offsets[i], e = offsets[i + 1];
            if (b == e) continue;
            scores.assign(e - b, 0.0);
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t s = b; s < e; ++s) {
                const std::size_t j = keys[s];
                double dot = 0.0;
                for (std::size_t c = 0; c < dh; ++c) dot += q.at(i, c0 + c) * k.at(j, c0 + c);
                scores[s - b] = dot * sc;
                mx = std::max(mx, scores[s - b]);
            }
            double z = 0.0;
            for (auto& sv : scores) {
                sv = std::exp(sv - mx);
                z += sv;
            }
            double* prow = probs.data() + h * keys.size();
            for (std::size_t s = b; s < e; ++s) {
                const double p = scores[s - b] / z;
                prow[s] = p;
                const std::size_t j = keys[s];
                for (std::size_t c = 0; c < dh; ++c) out.at(i, c0 + c) += p * v.at(j, c0 + c);
            }
        }
    }
    detail::check_finite(out, "masked_attention");
    if (detail::recording({&q, &k, &v})) {
        detail::record(out, [q, k, v, out, offsets = std::move(offsets), keys = std::move(keys),
                             probs = std::move(probs), heads, len, d, dh, sc]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto grad_or_null = [](const Tensor& t) -> double* { return t.requires_grad() ? t.grad().data() : nullptr; };
            double* gq = grad_or_null(q);
            double* gk = grad_or_null(k);
            double* gv = grad_or_null(v);
            std::vector<double> dp;
            for (std::size_t h = 0; h < heads; ++h) {
                const std::size_t c0 = h * dh;
                const double* prow = probs.data() + h * keys.size();
                for (std::size_t i = 0; i < len; ++i) {
                    const std::size_t b = offsets[i], e = offsets[i + 1];
                    if (b == e) continue;
                    const double* gi = g.data() + i * d + c0;
                    dp.assign(e - b, 0.0);
                    double pdp = 0.0;
                    for (std::size_t s = b; s < e; ++s) {
                        const std::size_t j = keys[s];
                        double dot = 0.0;
                        for (std::size_t c = 0; c < dh; ++c) dot += gi[c] * v.at(j, c0 + c);
                        dp[s - b] = dot;
                        pdp += prow[s] * dot;
                        if (gv)
                            for (std::size_t c = 0; c < dh; ++c) gv[j * d + c0 + c] += prow[s] * gi[c];
                    }
                    for (std::size_t s = b; s < e; ++s) {
                        const std::size_t j = keys[s];
                        const double ds = prow[s] * (dp[s - b] - pdp) * sc;
                        if (gq)
                            for (std::size_t c = 0; c < dh; ++c) gq[i * d + c0 + c] += ds * k.at(j, c0 + c);
                        if (gk)
                            for (std::size_t c = 0; c < dh; ++c) gk[j * d + c0 + c] += ds * q.at(i, c0 + c);
                    }
                }
            }
        });
    }
    return out;
}

}  // namespace ops
}  // namespace timesbert
