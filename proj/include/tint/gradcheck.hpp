#pragma once

// Finite-difference gradient verification. The numeric side runs forward-only
// (no active tape), so it is independent of the backward pass it checks.

#include <functional>
#include <vector>

#include "tint/tensor.hpp"

namespace tint {

// Central-difference check of d f / d x against tape gradients.
// f must be scalar-valued and must not capture stale state between calls.
// Returns max over coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
template <class T>
double grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, Tensor<T>& x,
                  double eps = 1e-5) {
    x.set_requires_grad(true);
    x.zero_grad();
    std::vector<T> analytic;
    {
        Tape<T> tape;
        typename Tape<T>::Scope scope(tape);
        Tensor<T> y = f(x);
        tape.backward(y);
        analytic = x.grad();
    }
    double max_rel = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        T saved = x.at(i);
        x.at(i) = saved + static_cast<T>(eps);
        double fp = static_cast<double>(f(x).item());
        x.at(i) = saved - static_cast<T>(eps);
        double fm = static_cast<double>(f(x).item());
        x.at(i) = saved;
        double numeric = (fp - fm) / (2.0 * eps);
        double a = static_cast<double>(analytic[i]);
        double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

// Same check across a set of named leaves (model parameters). `f` evaluates the
// scalar loss from current leaf values; gradients come from one taped backward.
template <class T>
double grad_check_many(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>>& leaves,
                       double eps = 1e-5) {
    for (auto& leaf : leaves) {
        leaf.set_requires_grad(true);
        leaf.zero_grad();
    }
    std::vector<std::vector<T>> analytic;
    {
        Tape<T> tape;
        typename Tape<T>::Scope scope(tape);
        Tensor<T> y = f();
        tape.backward(y);
        for (auto& leaf : leaves) analytic.push_back(leaf.grad());
    }
    double max_rel = 0.0;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        auto& leaf = leaves[li];
        for (std::size_t i = 0; i < leaf.numel(); ++i) {
            T saved = leaf.at(i);
            leaf.at(i) = saved + static_cast<T>(eps);
            double fp = static_cast<double>(f().item());
            leaf.at(i) = saved - static_cast<T>(eps);
            double fm = static_cast<double>(f().item());
            leaf.at(i) = saved;
            double numeric = (fp - fm) / (2.0 * eps);
            double a = static_cast<double>(analytic[li][i]);
            double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

}  // namespace tint
