#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <sstream>
#include <utility>
#include <vector>

#include "didm/autodiff.hpp"
#include "didm/rng.hpp"

namespace didm::ad {

/// Builds a scalar from leaves bound to the checked inputs (same order).
using ScalarFn = std::function<Var(Graph&, std::span<const Var>)>;

struct GradCheckOptions {
    double step = 1e-5;
    /// 0 probes every element; otherwise a seeded sample of this many per input.
    std::size_t max_probes_per_input = 0;
    std::uint64_t probe_seed = 0;
    std::optional<std::pair<OpKind, double>> fault;
};

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t worst_input = 0;
    std::size_t worst_element = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    std::size_t probes = 0;
};

namespace detail {

inline double evaluate(const ScalarFn& fn, std::span<const Tensor> inputs, const std::vector<Tensor>& frozen,
                       std::size_t probe_input, std::size_t probe_element)
{
    Graph g;
    g.replay_detached(frozen);
    std::vector<Var> leaves;
    leaves.reserve(inputs.size());
    for (const Tensor& t : inputs) {
        leaves.push_back(g.leaf(t, true));
    }
    const double v = fn(g, leaves).item();
    if (!std::isfinite(v)) {
        std::ostringstream os;
        os << "grad_check: non-finite loss " << v << " at probe input " << probe_input << " element "
           << probe_element;
        throw NumericalError(os.str());
    }
    return v;
}

}  // namespace detail

/// Compares reverse-mode gradients against central differences. Detached
/// values are frozen at the unperturbed point, so stop-gradient semantics are
/// checked as partial derivatives.
[[nodiscard]] inline GradCheckResult grad_check_detailed(const ScalarFn& fn, std::span<const Tensor> inputs,
                                                         const GradCheckOptions& opts = {})
{
    if (!(opts.step > 0.0)) {
        throw Error("grad_check: step must be positive");
    }
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (!inputs[i].all_finite()) {
            throw NumericalError("grad_check: input " + std::to_string(i) + " is not finite");
        }
    }
    Graph base;
    if (opts.fault) {
        base.inject_backward_fault(opts.fault->first, opts.fault->second);
    }
    std::vector<Var> leaves;
    for (const Tensor& t : inputs) {
        leaves.push_back(base.leaf(t, true));
    }
    const Var root = fn(base, leaves);
    if (!std::isfinite(root.item())) {
        throw NumericalError("grad_check: non-finite loss at the unperturbed point");
    }
    const GradientMap grads = base.backward(root);
    const std::vector<Tensor> frozen = base.detached_values();

    GradCheckResult res;
    Rng rng(opts.probe_seed);
    std::vector<Tensor> work(inputs.begin(), inputs.end());
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        std::vector<std::size_t> elems(inputs[i].size());
        for (std::size_t e = 0; e < elems.size(); ++e) {
            elems[e] = e;
        }
        if (opts.max_probes_per_input != 0 && elems.size() > opts.max_probes_per_input) {
            rng.shuffle(elems);
            elems.resize(opts.max_probes_per_input);
            std::sort(elems.begin(), elems.end());
        }
        const Tensor& analytic = grads.at(leaves[i]);
        for (std::size_t e : elems) {
            const double x0 = work[i].values[e];
            work[i].values[e] = x0 + opts.step;
            const double fp = detail::evaluate(fn, work, frozen, i, e);
            work[i].values[e] = x0 - opts.step;
            const double fm = detail::evaluate(fn, work, frozen, i, e);
            work[i].values[e] = x0;
            const double numeric = (fp - fm) / (2.0 * opts.step);
            const double a = analytic.values[e];
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
            const double err = std::abs(a - numeric) / denom;
            ++res.probes;
            if (res.probes == 1 || err > res.max_relative_error) {
                res.max_relative_error = err;
                res.worst_input = i;
                res.worst_element = e;
                res.analytic = a;
                res.numeric = numeric;
            }
        }
    }
    return res;
}

[[nodiscard]] inline double grad_check(const ScalarFn& fn, std::span<const Tensor> inputs, double step)
{
    GradCheckOptions opts;
    opts.step = step;
    return grad_check_detailed(fn, inputs, opts).max_relative_error;
}

}  // namespace didm::ad
