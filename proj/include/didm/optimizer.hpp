#pragma once

#include <span>
#include <string>
#include <vector>

#include "didm/autodiff.hpp"

namespace didm::ad {

struct OptimizerState {
    double learning_rate = 0.02;
    double momentum = 0.9;
    std::vector<Tensor> velocity;
};

/// SGD with heavy-ball momentum: v ← μ·v + g, w ← w − lr·v.
/// `leaves[i]` is the graph leaf that carried `params[i]` into the loss.
inline void sgd_step(std::span<Tensor> params, std::span<const Var> leaves, const GradientMap& grads,
                     OptimizerState& state)
{
    if (!(state.learning_rate > 0.0)) {
        throw Error("sgd_step: learning rate must be positive");
    }
    if (state.momentum < 0.0 || state.momentum >= 1.0) {
        throw Error("sgd_step: momentum must lie in [0, 1)");
    }
    if (leaves.size() != params.size()) {
        throw Error("sgd_step: " + std::to_string(params.size()) + " parameters but " +
                    std::to_string(leaves.size()) + " leaves");
    }
    if (state.velocity.empty()) {
        for (const Tensor& p : params) {
            state.velocity.emplace_back(p.rows, p.cols);
        }
    }
    if (state.velocity.size() != params.size()) {
        throw Error("sgd_step: velocity count does not match parameter count");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!grads.contains(leaves[i])) {
            throw Error("sgd_step: missing gradient for parameter " + std::to_string(i));
        }
        const Tensor& g = grads.at(leaves[i]);
        Tensor& w = params[i];
        Tensor& v = state.velocity[i];
        if (!g.same_shape(w) || !v.same_shape(w)) {
            throw ShapeError("sgd_step: parameter " + std::to_string(i) + " shape " + w.shape_string() +
                             " disagrees with gradient " + g.shape_string() + " or velocity " +
                             v.shape_string());
        }
        for (std::size_t e = 0; e < w.size(); ++e) {
            v.values[e] = state.momentum * v.values[e] + g.values[e];
            w.values[e] -= state.learning_rate * v.values[e];
        }
    }
}

}  // namespace didm::ad
