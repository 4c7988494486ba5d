#pragma once

// Reverse-mode gradients of single graph operations checked against the
// finite-difference oracle.

#include <functional>
#include <random>
#include <span>

#include "gradcheck.hpp"
#include "mtcolor/autograd.hpp"
#include "mtcolor/params.hpp"

namespace mtcolor::testing {

using GraphBuild = std::function<ag::Var<double>(const std::vector<ag::Var<double>>&)>;

// Compares reverse-mode gradients of <probe, build(inputs)> against central
// differences over every input entry.
inline double op_gradient_error(const std::vector<Shape>& shapes, const GraphBuild& build, std::uint32_t seed = 7) {
    std::mt19937 rng(seed);
    std::normal_distribution<double> nd(0, 1);
    std::vector<std::vector<double>> vals;
    for (const auto& s : shapes) {
        std::vector<double> v(shape_numel(s));
        for (auto& x : v) x = nd(rng);
        vals.push_back(v);
    }
    std::vector<ag::Var<double>> leaves;
    for (std::size_t i = 0; i < shapes.size(); ++i) leaves.push_back(ag::Var<double>::leaf(shapes[i], vals[i]));
    auto out = build(leaves);
    std::vector<double> probe(out.numel());
    for (auto& x : probe) x = nd(rng);
    ag::backward(ag::weighted_sum(out, std::span<const double>(probe)));

    std::vector<double> analytic, flat;
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        auto g = leaves[i].grad();
        if (g.empty())
            analytic.insert(analytic.end(), vals[i].size(), 0.0);
        else
            analytic.insert(analytic.end(), g.begin(), g.end());
        flat.insert(flat.end(), vals[i].begin(), vals[i].end());
    }
    auto f = [&](const std::vector<double>& x) {
        std::vector<ag::Var<double>> in;
        std::size_t off = 0;
        for (const auto& s : shapes) {
            const std::size_t n = shape_numel(s);
            in.push_back(ag::Var<double>::constant(s, std::vector<double>(x.begin() + off, x.begin() + off + n)));
            off += n;
        }
        auto res = build(in);
        auto o = res.value();
        double acc = 0;
        for (std::size_t i = 0; i < probe.size(); ++i) acc += o[i] * probe[i];
        return acc;
    };
    return max_relative_error(analytic, finite_difference(f, flat), 1e-4);
}

// Scalar loss over a parameter store; gradients come from one backward pass,
// the oracle perturbs `per_tensor` random entries of every bound parameter.
using StoreLoss = std::function<ag::Var<double>(Binder<double>&)>;

struct StoreCheck {
    double error = 0;
    int tensors = 0;
};

inline StoreCheck store_gradient_error(ParamStore<double>& store, const std::set<ParamGroup>& groups,
                                       const StoreLoss& loss, int per_tensor, std::uint64_t seed) {
    Binder<double> b(store, groups);
    ag::backward(loss(b));
    std::mt19937_64 rng(seed);
    std::vector<double> analytic, numeric;
    StoreCheck out;
    for (const auto& [k, var] : b.bound()) {
        if (!groups.count(store[k].group)) continue;
        const auto g = var.grad();
        auto& vals = store[k].value;
        std::uniform_int_distribution<std::size_t> pick(0, vals.size() - 1);
        for (int r = 0; r < per_tensor; ++r) {
            const std::size_t j = pick(rng);
            const double keep = vals[j];
            auto f = [&](const std::vector<double>& x) {
                vals[j] = x[0];
                Binder<double> fb(store);
                const double v = loss(fb).value()[0];
                vals[j] = keep;
                return v;
            };
            analytic.push_back(g.empty() ? 0.0 : g[j]);
            numeric.push_back(finite_difference(f, {keep})[0]);
        }
        ++out.tensors;
    }
    out.error = max_relative_error(analytic, numeric);
    return out;
}

} // namespace mtcolor::testing
