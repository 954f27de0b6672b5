#pragma once

// The gradient-check battery behind `didm gradcheck`: every operation kind
// over several seeds, every DIDM loss, and one full training-step objective.

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "didm/gradcheck.hpp"
#include "didm/objective.hpp"
#include "didm/training.hpp"

namespace didm::ad {

inline constexpr double kOpTolerance = 1e-4;
inline constexpr double kEndToEndTolerance = 1e-3;

struct GradCase {
    std::string name;
    double max_relative_error = 0.0;
    double tolerance = 0.0;
    std::size_t probes = 0;

    [[nodiscard]] bool passed() const { return max_relative_error < tolerance; }
};

struct GradSuiteOptions {
    std::size_t seeds_per_op = 10;
    std::size_t end_to_end_probes = 64;
    std::optional<std::pair<OpKind, double>> fault;
};

namespace detail {

struct Problem {
    std::vector<Tensor> inputs;
    ScalarFn fn;
};

inline Tensor random_tensor(Rng& rng, std::size_t r, std::size_t c, double lo = -1.0, double hi = 1.0)
{
    Tensor t(r, c);
    for (double& v : t.values) v = rng.uniform(lo, hi);
    return t;
}

// Uniform magnitude in [lo, hi] with a random sign; keeps relu away from its kink.
inline Tensor signed_tensor(Rng& rng, std::size_t r, std::size_t c, double lo, double hi)
{
    Tensor t = random_tensor(rng, r, c, lo, hi);
    for (double& v : t.values) {
        if (rng.bernoulli(0.5)) v = -v;
    }
    return t;
}

inline Tensor softmax_tensor(Rng& rng, std::size_t r, std::size_t c)
{
    Tensor t = random_tensor(rng, r, c, -2.0, 2.0);
    for (std::size_t i = 0; i < r; ++i) {
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += (t(i, j) = std::exp(t(i, j)));
        for (std::size_t j = 0; j < c; ++j) t(i, j) /= z;
    }
    return t;
}

// Scalar root with a generic upstream gradient: sum(out * W) for a fixed random W.
inline Var project(const Var& out, std::uint64_t seed)
{
    Rng rng(mix_seed(seed, 0x9e7));
    Tensor w = random_tensor(rng, out.rows(), out.cols(), -1.0, 1.0);
    return sum(mul(out, out.graph().constant(std::move(w))));
}

inline Problem op_problem(OpKind kind, std::uint64_t seed)
{
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(kind)));
    const std::size_t r = 2 + rng.index(3), c = 2 + rng.index(3);
    const auto unary = [&](Tensor x, std::function<Var(const Var&)> f) {
        return Problem{{std::move(x)}, [f, seed](Graph&, std::span<const Var> v) { return project(f(v[0]), seed); }};
    };
    const auto binary = [&](Tensor a, Tensor b, std::function<Var(const Var&, const Var&)> f) {
        return Problem{{std::move(a), std::move(b)},
                       [f, seed](Graph&, std::span<const Var> v) { return project(f(v[0], v[1]), seed); }};
    };
    switch (kind) {
    case OpKind::add: return binary(random_tensor(rng, r, c), random_tensor(rng, r, c), add);
    case OpKind::sub: return binary(random_tensor(rng, r, c), random_tensor(rng, r, c), sub);
    case OpKind::mul: return binary(random_tensor(rng, r, c), random_tensor(rng, r, c), mul);
    case OpKind::div:
        return binary(random_tensor(rng, r, c), signed_tensor(rng, r, c, 0.5, 2.0),
                      [](const Var& a, const Var& b) { return div(a, b); });
    case OpKind::matmul: return binary(random_tensor(rng, r, c), random_tensor(rng, c, 3), matmul);
    case OpKind::exp: return unary(random_tensor(rng, r, c), [](const Var& a) { return exp(a); });
    case OpKind::log:
        return unary(random_tensor(rng, r, c, 0.2, 3.0), [](const Var& a) { return log(a); });
    case OpKind::relu: return unary(signed_tensor(rng, r, c, 0.05, 1.0), relu);
    case OpKind::sigmoid: return unary(random_tensor(rng, r, c, -3.0, 3.0), sigmoid);
    case OpKind::softmax_rowwise: return unary(random_tensor(rng, r, c, -2.0, 2.0), softmax_rows);
    case OpKind::sum: return unary(random_tensor(rng, r, c), [](const Var& a) { return sum(a); });
    case OpKind::mean: return unary(random_tensor(rng, r, c), mean);
    case OpKind::squared_l2: return unary(random_tensor(rng, r, c), squared_l2);
    case OpKind::l2_normalize_rowwise:
        return unary(random_tensor(rng, r, c), [](const Var& a) { return l2_normalize_rows(a); });
    case OpKind::cosine_similarity_rowpairs:
        return binary(random_tensor(rng, r, c), random_tensor(rng, r, c),
                      [](const Var& a, const Var& b) { return cosine_rowpairs(a, b); });
    case OpKind::kl_divergence_rowwise:
        return binary(softmax_tensor(rng, r, c), softmax_tensor(rng, r, c),
                      [](const Var& p, const Var& q) { return kl_rows(p, q); });
    case OpKind::concat: {
        const std::size_t axis = rng.index(2);
        Tensor b = axis == 0 ? random_tensor(rng, r + 1, c) : random_tensor(rng, r, c + 1);
        return binary(random_tensor(rng, r, c), std::move(b), [axis](const Var& a, const Var& b2) {
            const std::vector<Var> parts{a, b2};
            return concat(parts, axis);
        });
    }
    case OpKind::slice: {
        const std::size_t axis = rng.index(2);
        const std::size_t n = axis == 0 ? r : c;
        const std::size_t b = rng.index(n - 1), e = b + 1 + rng.index(n - b - 1);
        return unary(random_tensor(rng, r, c), [axis, b, e](const Var& a) { return slice(a, axis, b, e); });
    }
    case OpKind::scale: {
        const double s = rng.uniform(-2.0, 2.0);
        return unary(random_tensor(rng, r, c), [s](const Var& a) { return scale(a, s); });
    }
    case OpKind::transpose: return unary(random_tensor(rng, r, c), transpose);
    case OpKind::add_bias: return binary(random_tensor(rng, r, c), random_tensor(rng, 1, c), add_bias);
    case OpKind::gather_rows: {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < r + 2; ++i) idx.push_back(rng.index(r));
        return unary(random_tensor(rng, r, c), [idx](const Var& a) { return gather_rows(a, idx); });
    }
    case OpKind::detach:
        // Detach on one branch only, so the check sees a nonzero partial.
        return unary(random_tensor(rng, r, c), [](const Var& a) { return mul(a, detach(a)); });
    case OpKind::leaf: break;
    }
    throw Error("gradcheck suite: no problem for operation " + std::string(to_string(kind)));
}

inline GradCase run_case(std::string name, const Problem& p, double tol, const GradSuiteOptions& o,
                         std::size_t max_probes = 0, std::uint64_t probe_seed = 0)
{
    GradCheckOptions go;
    go.fault = o.fault;
    go.max_probes_per_input = max_probes;
    go.probe_seed = probe_seed;
    const GradCheckResult r = grad_check_detailed(p.fn, p.inputs, go);
    return {std::move(name), r.max_relative_error, tol, r.probes};
}

inline void merge(GradCase& into, const GradCase& c)
{
    into.max_relative_error = std::max(into.max_relative_error, c.max_relative_error);
    into.probes += c.probes;
}

}  // namespace detail

/// Per-op cases aggregate the worst error over `seeds_per_op` random problems.
[[nodiscard]] inline std::vector<GradCase> run_op_cases(const GradSuiteOptions& o = {})
{
    std::vector<GradCase> out;
    for (const auto& [kind, name] : kOpNames) {
        if (kind == OpKind::leaf) continue;
        GradCase agg{"op/" + std::string(name), 0.0, kOpTolerance, 0};
        for (std::size_t s = 0; s < o.seeds_per_op; ++s) {
            detail::merge(agg, detail::run_case(agg.name, detail::op_problem(kind, s), kOpTolerance, o));
        }
        out.push_back(agg);
    }
    return out;
}

[[nodiscard]] inline std::vector<GradCase> run_loss_cases(const GradSuiteOptions& o = {})
{
    using namespace objective;
    using detail::Problem;
    std::vector<GradCase> out;
    const std::size_t k = 5, d = 6, c = 3;
    const std::vector<int> labels{0, 2, -1, 1, 0};
    const std::vector<int> dense_labels{0, 2, 1, 1, 0};
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        Rng rng(mix_seed(seed, 0x1055));
        const Tensor z_s = detail::random_tensor(rng, k, d, 0.1, 1.0);
        const Tensor z_a = detail::random_tensor(rng, k, d, 0.1, 1.0);
        const Tensor w = detail::random_tensor(rng, d, c, -0.5, 0.5);
        const Tensor b = detail::random_tensor(rng, 1, c, -0.1, 0.1);
        const Tensor logits_s = detail::random_tensor(rng, k, c + 1, -1.0, 1.0);
        const Tensor logits_a = detail::random_tensor(rng, k, c + 1, -1.0, 1.0);
        const Tensor box_s = detail::random_tensor(rng, k, 4);
        const Tensor box_a = detail::random_tensor(rng, k, 4);
        const double lambda1 = 0.5 + 0.1 * static_cast<double>(seed);
        const bool split = seed != 1;

        std::vector<std::pair<std::string, Problem>> probs;
        probs.emplace_back("loss/domain_specific", Problem{{z_s, z_a}, [=](Graph&, std::span<const Var> v) {
                               return detail::project(extract_domain_specific(v[0], v[1], lambda1), seed);
                           }});
        probs.emplace_back("loss/classifier", Problem{{z_s, z_a, w, b}, [=](Graph&, std::span<const Var> v) {
                               const Var zd = extract_domain_specific(v[0], v[1], lambda1);
                               return loss_classifier(zd, dense_labels, LinearClassifier{v[2], v[3]}, split);
                           }});
        probs.emplace_back("loss/entropy", Problem{{z_s, z_a, w, b}, [=](Graph&, std::span<const Var> v) {
                               const Var zd = extract_domain_specific(v[0], v[1], lambda1);
                               return loss_entropy_max(zd, LinearClassifier{v[2], v[3]}, split);
                           }});
        probs.emplace_back("loss/feature_diversity", Problem{{z_s, z_a}, [=](Graph&, std::span<const Var> v) {
                               return loss_feature_diversity(extract_domain_specific(v[0], v[1], lambda1), 0.5);
                           }});
        probs.emplace_back("loss/dlm", Problem{{z_s, z_a, w, b}, [=](Graph&, std::span<const Var> v) {
                               DlmHyper h;
                               h.tau = 0.5;
                               h.num_classes = c;
                               h.split_gradients = split;
                               const Var zd = extract_domain_specific(v[0], v[1], lambda1);
                               return loss_dlm(zd, labels, LinearClassifier{v[2], v[3]}, h, true, true).total;
                           }});
        probs.emplace_back("loss/alignment", Problem{{z_s, z_a}, [](Graph&, std::span<const Var> v) {
                               return alignment_loss(v[0], v[1]);
                           }});
        probs.emplace_back("loss/wam", Problem{{z_s, z_a, logits_s, logits_a, box_s, box_a},
                                               [](Graph&, std::span<const Var> v) {
                                                   return loss_wam(v[0], v[1], softmax_rows(v[2]), softmax_rows(v[3]),
                                                                   v[4], v[5], true)
                                                       .total;
                                               }});
        probs.emplace_back("loss/total", Problem{{z_s, z_a, w, b, logits_s, logits_a, box_s, box_a},
                                                 [=](Graph&, std::span<const Var> v) {
                                                     DlmHyper h;
                                                     h.tau = 0.5;
                                                     h.num_classes = c;
                                                     const Var zd = extract_domain_specific(v[0], v[1], lambda1);
                                                     const Var dlm =
                                                         loss_dlm(zd, labels, LinearClassifier{v[2], v[3]}, h, true, true).total;
                                                     const Var wam = loss_wam(v[0], v[1], softmax_rows(v[4]), softmax_rows(v[5]),
                                                                              v[6], v[7], true)
                                                                         .total;
                                                     const Var det = squared_l2(sum(v[6]));
                                                     return total_objective(det, dlm, wam, 0.45);
                                                 }});
        for (std::size_t i = 0; i < probs.size(); ++i) {
            const GradCase gc = detail::run_case(probs[i].first, probs[i].second, kOpTolerance, o);
            if (seed == 0) {
                out.push_back(gc);
            } else {
                detail::merge(out[i], gc);
            }
        }
    }
    return out;
}

/// One complete per-image training objective on a toy scene, differentiated
/// with respect to every detector parameter (sampled coordinates).
[[nodiscard]] inline GradCase run_end_to_end_case(const GradSuiteOptions& o = {})
{
    exp::ExperimentConfig cfg;
    cfg.feature_dim = 8;
    cfg.k_max = 6;
    cfg.objectness_threshold = 0.0;
    const toy::Scene scene = toy::generate_scene(toy::Domain::clear, 7, exp::scene_options(cfg));
    const exp::TrainSample sample = exp::make_train_sample(scene, 11, exp::augment_params(cfg));
    const toy::DetectorParams params = toy::init_params(exp::detector_config(cfg), 3);
    detail::Problem p;
    p.inputs.assign(params.tensors.begin(), params.tensors.end());
    p.fn = [cfg, sample](Graph& g, std::span<const Var> v) {
        toy::BoundParams bp;
        for (std::size_t i = 0; i < toy::kNumParams; ++i) bp.leaves[i] = v[i];
        return exp::batch_objective(g, bp, std::span(&sample, 1), cfg, 0.6).total;
    };
    return detail::run_case("end_to_end/train_step", p, kEndToEndTolerance, o, o.end_to_end_probes, 5);
}

[[nodiscard]] inline std::vector<GradCase> run_gradcheck_suite(const GradSuiteOptions& o = {})
{
    std::vector<GradCase> all = run_op_cases(o);
    for (auto& c : run_loss_cases(o)) all.push_back(std::move(c));
    all.push_back(run_end_to_end_case(o));
    return all;
}

}  // namespace didm::ad
