#pragma once

// Shared helpers for the unit and acceptance suites.

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "timesbert/gradcheck.hpp"
#include "timesbert/ops.hpp"
#include "timesbert/rng.hpp"

namespace timesbert::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = scale * rng.normal();
    return t;
}

// Contracts an op output with fixed random weights so every output entry
// carries a distinct upstream gradient.
inline Tensor contract(const Tensor& y, const Tensor& w) { return ops::sum(ops::mul(y, w)); }

struct PrimitiveCase {
    std::string name;
    // Builds inputs and the scalar function for one random shape.
    std::function<GradCheckReport(Rng&)> run;
};

inline std::vector<PrimitiveCase> primitive_cases() {
    std::vector<PrimitiveCase> cases;
    auto dim = [](Rng& r, std::size_t lo = 1, std::size_t hi = 5) { return lo + r.uniform_int(hi - lo + 1); };

    auto unary = [&](std::string name, std::function<Tensor(const Tensor&)> op, double scale = 1.0) {
        cases.push_back({name, [op, dim, scale](Rng& r) {
                             Tensor x = random_tensor({dim(r), dim(r)}, r, scale);
                             Tensor w = random_tensor(x.shape(), r);
                             return check_gradients([&] { return contract(op(x), w); }, {{"x", x}});
                         }});
    };
    auto binary = [&](std::string name, std::function<Tensor(const Tensor&, const Tensor&)> op) {
        cases.push_back({name, [op, dim](Rng& r) {
                             Tensor a = random_tensor({dim(r), dim(r)}, r);
                             Tensor b = random_tensor(a.shape(), r);
                             Tensor w = random_tensor(a.shape(), r);
                             return check_gradients([&] { return contract(op(a, b), w); }, {{"a", a}, {"b", b}});
                         }});
    };

    cases.push_back({"matmul", [dim](Rng& r) {
                         const std::size_t m = dim(r), k = dim(r), n = dim(r);
                         Tensor a = random_tensor({m, k}, r), b = random_tensor({k, n}, r), w = random_tensor({m, n}, r);
                         return check_gradients([&] { return contract(ops::matmul(a, b), w); }, {{"a", a}, {"b", b}});
                     }});
    cases.push_back({"matmul_nt", [dim](Rng& r) {
                         const std::size_t m = dim(r), k = dim(r), n = dim(r);
                         Tensor a = random_tensor({m, k}, r), b = random_tensor({n, k}, r), w = random_tensor({m, n}, r);
                         return check_gradients([&] { return contract(ops::matmul_nt(a, b), w); },
                                                {{"a", a}, {"b", b}});
                     }});
    binary("add", [](const Tensor& a, const Tensor& b) { return ops::add(a, b); });
    binary("sub", [](const Tensor& a, const Tensor& b) { return ops::sub(a, b); });
    binary("mul", [](const Tensor& a, const Tensor& b) { return ops::mul(a, b); });
    unary("scale", [](const Tensor& x) { return ops::scale(x, -1.7); });
    unary("gelu", [](const Tensor& x) { return ops::gelu(x); }, 2.0);
    unary("softmax", [](const Tensor& x) { return ops::softmax(x); }, 2.0);
    cases.push_back({"add_bias", [dim](Rng& r) {
                         const std::size_t m = dim(r), n = dim(r);
                         Tensor x = random_tensor({m, n}, r), b = random_tensor({n}, r), w = random_tensor({m, n}, r);
                         return check_gradients([&] { return contract(ops::add_bias(x, b), w); },
                                                {{"x", x}, {"b", b}});
                     }});
    cases.push_back({"layer_norm", [dim](Rng& r) {
                         const std::size_t m = dim(r), n = dim(r, 3, 6);
                         Tensor x = random_tensor({m, n}, r), g = random_tensor({n}, r), b = random_tensor({n}, r);
                         Tensor w = random_tensor({m, n}, r);
                         return check_gradients([&] { return contract(ops::layer_norm(x, g, b), w); },
                                                {{"x", x}, {"gamma", g}, {"beta", b}});
                     }});
    cases.push_back({"cross_entropy", [dim](Rng& r) {
                         const std::size_t n = dim(r), k = dim(r, 2, 5);
                         Tensor x = random_tensor({n, k}, r, 2.0);
                         std::vector<int> y(n);
                         for (auto& v : y) v = static_cast<int>(r.uniform_int(k));
                         return check_gradients([&] { return ops::cross_entropy_from_logits(x, y); }, {{"logits", x}});
                     }});
    cases.push_back({"weighted_mse", [dim](Rng& r) {
                         const std::size_t m = dim(r), n = dim(r);
                         Tensor x = random_tensor({m, n}, r);
                         std::vector<double> t(m * n), w(m * n);
                         for (auto& v : t) v = r.normal();
                         for (auto& v : w) v = r.bernoulli(0.8) ? 1.0 : 0.0;
                         w[0] = 1.0;
                         return check_gradients([&] { return ops::weighted_mse(x, t, w); }, {{"x", x}});
                     }});
    cases.push_back({"mean_rows", [dim](Rng& r) {
                         Tensor x = random_tensor({dim(r), dim(r)}, r);
                         Tensor w = random_tensor({1, x.dim(1)}, r);
                         return check_gradients([&] { return contract(ops::mean_rows(x), w); }, {{"x", x}});
                     }});
    cases.push_back({"sum", [dim](Rng& r) {
                         Tensor x = random_tensor({dim(r), dim(r)}, r);
                         return check_gradients([&] { return ops::sum(ops::mul(x, x)); }, {{"x", x}});
                     }});
    cases.push_back({"gather_rows", [dim](Rng& r) {
                         const std::size_t m = dim(r), n = dim(r), k = dim(r, 1, 7);
                         Tensor x = random_tensor({m, n}, r);
                         std::vector<std::size_t> idx(k);
                         for (auto& i : idx) i = r.uniform_int(m);
                         Tensor w = random_tensor({k, n}, r);
                         return check_gradients([&] { return contract(ops::gather_rows(x, idx), w); }, {{"x", x}});
                     }});
    cases.push_back({"concat_rows", [dim](Rng& r) {
                         const std::size_t n = dim(r);
                         Tensor a = random_tensor({dim(r), n}, r), b = random_tensor({n}, r), c = random_tensor({dim(r), n}, r);
                         Tensor w = random_tensor({a.rows() + 1 + c.rows(), n}, r);
                         return check_gradients([&] { return contract(ops::concat_rows({a, b, c}), w); },
                                                {{"a", a}, {"b", b}, {"c", c}});
                     }});
    cases.push_back({"masked_attention", [dim](Rng& r) {
                         const std::size_t heads = dim(r, 1, 2), len = dim(r, 1, 6), d = heads * dim(r, 1, 3);
                         Tensor q = random_tensor({len, d}, r), k = random_tensor({len, d}, r), v = random_tensor({len, d}, r);
                         AttentionMask mask(len);
                         for (std::size_t i = 0; i < len; ++i)
                             for (std::size_t j = 0; j < len; ++j) mask.set(i, j, i == j || r.bernoulli(0.6));
                         Tensor w = random_tensor({len, d}, r);
                         return check_gradients([&] { return contract(ops::masked_attention(q, k, v, mask, heads), w); },
                                                {{"q", q}, {"k", k}, {"v", v}});
                     }});
    return cases;
}

}  // namespace timesbert::testing
