#pragma once

// Empirical estimators for domain-divergence quantities over pooled feature sets:
// proxy A-distance from a linear domain probe, the diameter of the mixture hull
// of the sources, and the target's distance to that hull.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "didm/error.hpp"
#include "didm/rng.hpp"
#include "didm/tensor.hpp"
#include "json.hpp"

namespace didm::diag {

inline constexpr double kEstimatorNoise = 0.1;
inline constexpr std::size_t kMinSamples = 20;

struct FeatureSet {
    std::string name;
    Tensor features;  // N×d

    [[nodiscard]] std::size_t size() const { return features.rows; }
};

struct ProxyOptions {
    std::size_t folds = 5;
    std::size_t steps = 200;
    double learning_rate = 0.1;
    std::uint64_t seed = 0;
};

namespace detail {

inline bool lexicographically_less(const Tensor& a, const Tensor& b)
{
    if (a.rows != b.rows) return a.rows < b.rows;
    if (a.cols != b.cols) return a.cols < b.cols;
    return std::lexicographical_compare(a.values.begin(), a.values.end(), b.values.begin(), b.values.end());
}

// Logistic-regression probe; returns held-out error rate.
inline double probe_error(const Tensor& a, const Tensor& b, const std::vector<std::size_t>& a_perm,
                          const std::vector<std::size_t>& b_perm, const ProxyOptions& opts)
{
    const std::size_t d = a.cols;
    const std::size_t a_train = a_perm.size() / 2, b_train = b_perm.size() / 2;
    const std::size_t a_test = a_perm.size() - a_train, b_test = b_perm.size() - b_train;
    if (a_train == 0 || b_train == 0 || a_test == 0 || b_test == 0) {
        throw Error("proxy_a_distance: degenerate split with a single class in a fold");
    }

    struct Sample {
        const double* x;
        double y;
    };
    std::vector<Sample> train, test;
    for (std::size_t i = 0; i < a_perm.size(); ++i) {
        (i < a_train ? train : test).push_back({a.values.data() + a_perm[i] * d, 1.0});
    }
    for (std::size_t i = 0; i < b_perm.size(); ++i) {
        (i < b_train ? train : test).push_back({b.values.data() + b_perm[i] * d, 0.0});
    }

    // Standardize with training statistics.
    std::vector<double> mu(d, 0.0), sd(d, 0.0);
    for (const Sample& s : train) {
        for (std::size_t j = 0; j < d; ++j) mu[j] += s.x[j];
    }
    for (double& m : mu) m /= static_cast<double>(train.size());
    for (const Sample& s : train) {
        for (std::size_t j = 0; j < d; ++j) sd[j] += (s.x[j] - mu[j]) * (s.x[j] - mu[j]);
    }
    for (double& v : sd) v = std::sqrt(v / static_cast<double>(train.size())) + 1e-8;

    const auto standardized = [&](const std::vector<Sample>& set) {
        std::vector<double> out(set.size() * d);
        for (std::size_t i = 0; i < set.size(); ++i) {
            for (std::size_t j = 0; j < d; ++j) out[i * d + j] = (set[i].x[j] - mu[j]) / sd[j];
        }
        return out;
    };
    const std::vector<double> xtr = standardized(train);
    const std::vector<double> xte = standardized(test);

    std::vector<double> w(d, 0.0), grad(d);
    double bias = 0.0;
    const double n = static_cast<double>(train.size());
    for (std::size_t step = 0; step < opts.steps; ++step) {
        std::fill(grad.begin(), grad.end(), 0.0);
        double gb = 0.0;
        for (std::size_t i = 0; i < train.size(); ++i) {
            const double* x = xtr.data() + i * d;
            double z = bias;
            for (std::size_t j = 0; j < d; ++j) z += w[j] * x[j];
            const double p = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
            const double r = p - train[i].y;
            for (std::size_t j = 0; j < d; ++j) grad[j] += r * x[j];
            gb += r;
        }
        for (std::size_t j = 0; j < d; ++j) w[j] -= opts.learning_rate * grad[j] / n;
        bias -= opts.learning_rate * gb / n;
    }

    std::size_t wrong = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
        const double* x = xte.data() + i * d;
        double z = bias;
        for (std::size_t j = 0; j < d; ++j) z += w[j] * x[j];
        const double pred = z >= 0.0 ? 1.0 : 0.0;
        wrong += pred != test[i].y ? 1 : 0;
    }
    return static_cast<double>(wrong) / static_cast<double>(test.size());
}

}  // namespace detail

/// Mean over folds of clamp(2·(1 − 2ε), 0, 2), ε the held-out error of a
/// linear domain classifier trained on a random half of each set. The pair is
/// put in a canonical order first, so the result is exactly symmetric.
[[nodiscard]] inline double proxy_a_distance(const FeatureSet& a_in, const FeatureSet& b_in,
                                             const ProxyOptions& opts = {})
{
    if (a_in.size() < kMinSamples || b_in.size() < kMinSamples) {
        throw Error("proxy_a_distance: needs at least " + std::to_string(kMinSamples) + " samples per set, got " +
                    std::to_string(a_in.size()) + " and " + std::to_string(b_in.size()));
    }
    if (a_in.features.cols != b_in.features.cols) {
        throw ShapeError("proxy_a_distance: feature widths differ");
    }
    if (opts.folds == 0) {
        throw Error("proxy_a_distance: folds must be positive");
    }
    const bool swap = detail::lexicographically_less(b_in.features, a_in.features);
    const Tensor& a = swap ? b_in.features : a_in.features;
    const Tensor& b = swap ? a_in.features : b_in.features;

    double total = 0.0;
    for (std::size_t f = 0; f < opts.folds; ++f) {
        Rng rng(mix_seed(opts.seed, f));
        std::vector<std::size_t> pa(a.rows), pb(b.rows);
        std::iota(pa.begin(), pa.end(), std::size_t{0});
        std::iota(pb.begin(), pb.end(), std::size_t{0});
        rng.shuffle(pa);
        rng.shuffle(pb);
        const double err = detail::probe_error(a, b, pa, pb, opts);
        total += std::clamp(2.0 * (1.0 - 2.0 * err), 0.0, 2.0);
    }
    return total / static_cast<double>(opts.folds);
}

/// All weight vectors on the simplex with coordinates in multiples of
/// `grid_step`, in lexicographic order.
[[nodiscard]] inline std::vector<std::vector<double>> simplex_grid(std::size_t m, double grid_step)
{
    if (m == 0) {
        return {};
    }
    const auto parts = static_cast<int>(std::lround(1.0 / grid_step));
    if (parts <= 0 || std::abs(parts * grid_step - 1.0) > 1e-9) {
        throw Error("simplex_grid: grid step " + std::to_string(grid_step) + " does not divide 1");
    }
    std::vector<std::vector<double>> out;
    std::vector<int> counts(m, 0);
    // Enumerate compositions of `parts` into m non-negative integers.
    const auto rec = [&](auto&& self, std::size_t i, int left) -> void {
        if (i + 1 == m) {
            counts[i] = left;
            std::vector<double> w(m);
            for (std::size_t k = 0; k < m; ++k) w[k] = static_cast<double>(counts[k]) / parts;
            out.push_back(std::move(w));
            return;
        }
        for (int c = 0; c <= left; ++c) {
            counts[i] = c;
            self(self, i + 1, left - c);
        }
    };
    rec(rec, 0, parts);
    return out;
}

inline void validate_grid_step(double grid_step)
{
    if (!(grid_step >= 0.05 - 1e-12 && grid_step <= 0.5 + 1e-12)) {
        throw Error("grid step must lie in [0.05, 0.5], got " + std::to_string(grid_step));
    }
}

/// N points drawn from the sources with per-source counts round(π_i·N).
/// Each source is sampled without replacement (cycling if it runs out) from a
/// stream keyed by its name, and parts are stacked in name order, so the
/// result does not depend on the order the sources are listed in.
[[nodiscard]] inline FeatureSet mixture(std::span<const FeatureSet> sources, std::span<const double> weights,
                                        std::size_t n, std::uint64_t seed)
{
    if (sources.size() != weights.size() || sources.empty()) {
        throw Error("mixture: need one weight per source");
    }
    std::vector<std::size_t> order(sources.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return sources[x].name < sources[y].name; });
    const std::size_t d = sources.front().features.cols;
    FeatureSet out;
    out.name = "mixture";
    out.features.cols = d;
    for (std::size_t idx : order) {
        const FeatureSet& s = sources[idx];
        const auto count = static_cast<std::size_t>(std::lround(weights[idx] * static_cast<double>(n)));
        if (count == 0) {
            continue;
        }
        if (s.size() == 0) {
            throw Error("mixture: source '" + s.name + "' is empty");
        }
        Rng rng(mix_seed(seed, hash_string(s.name)));
        std::vector<std::size_t> perm(s.size());
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        rng.shuffle(perm);
        for (std::size_t k = 0; k < count; ++k) {
            const std::size_t row = perm[k % perm.size()];
            out.features.values.insert(out.features.values.end(), s.features.values.begin() + static_cast<long>(row * d),
                                       s.features.values.begin() + static_cast<long>((row + 1) * d));
        }
        out.features.rows += count;
    }
    return out;
}

struct GridOptions {
    double grid_step = 0.1;
    ProxyOptions proxy;
    std::uint64_t mixture_seed = 17;
};

[[nodiscard]] inline std::size_t mixture_size(std::span<const FeatureSet> sources)
{
    std::size_t n = std::numeric_limits<std::size_t>::max();
    for (const FeatureSet& s : sources) {
        n = std::min(n, s.size());
    }
    return n;
}

/// Largest proxy distance between any two grid mixtures of the sources.
[[nodiscard]] inline double estimate_rho(std::span<const FeatureSet> sources, const GridOptions& opts = {})
{
    if (sources.size() < 2) {
        throw Error("estimate_rho: needs at least 2 sources, got " + std::to_string(sources.size()));
    }
    validate_grid_step(opts.grid_step);
    const std::size_t n = mixture_size(sources);
    std::vector<FeatureSet> mixes;
    for (const auto& w : simplex_grid(sources.size(), opts.grid_step)) {
        mixes.push_back(mixture(sources, w, n, opts.mixture_seed));
    }
    double rho = 0.0;
    for (std::size_t i = 0; i < mixes.size(); ++i) {
        for (std::size_t j = i + 1; j < mixes.size(); ++j) {
            rho = std::max(rho, proxy_a_distance(mixes[i], mixes[j], opts.proxy));
        }
    }
    return rho;
}

struct GammaEstimate {
    double gamma = 0.0;
    std::vector<double> weights;
};

/// Smallest proxy distance from the target to a grid mixture of the sources;
/// ties keep the lexicographically first weight vector.
[[nodiscard]] inline GammaEstimate estimate_gamma(std::span<const FeatureSet> sources, const FeatureSet& target,
                                                  const GridOptions& opts = {})
{
    if (sources.size() < 2) {
        throw Error("estimate_gamma: needs at least 2 sources, got " + std::to_string(sources.size()));
    }
    validate_grid_step(opts.grid_step);
    const std::size_t n = mixture_size(sources);
    GammaEstimate best;
    best.gamma = std::numeric_limits<double>::infinity();
    for (const auto& w : simplex_grid(sources.size(), opts.grid_step)) {
        const double dist = proxy_a_distance(mixture(sources, w, n, opts.mixture_seed), target, opts.proxy);
        if (dist < best.gamma) {
            best.gamma = dist;
            best.weights = w;
        }
    }
    return best;
}

/// Centered data projected on its top-2 principal directions (power iteration
/// with deflation). Directions with no variance give zero columns.
[[nodiscard]] inline Tensor project_2d(const Tensor& x, std::uint64_t seed = 0, std::size_t iterations = 100)
{
    if (x.rows < 3) {
        throw Error("project_2d: needs at least 3 rows, got " + std::to_string(x.rows));
    }
    const std::size_t n = x.rows, d = x.cols;
    Tensor c = x;
    for (std::size_t j = 0; j < d; ++j) {
        double m = 0.0;
        for (std::size_t i = 0; i < n; ++i) m += c(i, j);
        m /= static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) c(i, j) -= m;
    }
    std::vector<double> cov(d * d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t a = 0; a < d; ++a) {
            const double va = c(i, a);
            if (va == 0.0) continue;
            for (std::size_t b = 0; b < d; ++b) cov[a * d + b] += va * c(i, b);
        }
    }
    double trace = 0.0, raw = 0.0;
    for (std::size_t a = 0; a < d; ++a) trace += cov[a * d + a];
    for (double v : x.values) raw += v * v;
    // Centering leaves rounding residue of order eps·|x|; treat it as no variance.
    const double tiny = std::max({1e-12 * trace, 1e-24 * raw, 1e-300});

    Rng rng(mix_seed(seed, 0x9ca));
    std::vector<std::vector<double>> dirs;
    for (std::size_t k = 0; k < 2 && k < d; ++k) {
        std::vector<double> v(d);
        for (double& e : v) e = rng.normal();
        std::vector<double> next(d);
        double lambda = 0.0;
        for (std::size_t it = 0; it < iterations; ++it) {
            for (const auto& u : dirs) {
                double dot = 0.0;
                for (std::size_t a = 0; a < d; ++a) dot += u[a] * v[a];
                for (std::size_t a = 0; a < d; ++a) v[a] -= dot * u[a];
            }
            for (std::size_t a = 0; a < d; ++a) {
                double s = 0.0;
                for (std::size_t b = 0; b < d; ++b) s += cov[a * d + b] * v[b];
                next[a] = s;
            }
            for (const auto& u : dirs) {
                double dot = 0.0;
                for (std::size_t a = 0; a < d; ++a) dot += u[a] * next[a];
                for (std::size_t a = 0; a < d; ++a) next[a] -= dot * u[a];
            }
            double norm = 0.0;
            for (double e : next) norm += e * e;
            norm = std::sqrt(norm);
            lambda = norm;
            if (norm <= tiny) break;
            for (std::size_t a = 0; a < d; ++a) v[a] = next[a] / norm;
        }
        if (lambda <= tiny) {
            break;
        }
        dirs.push_back(v);
    }
    Tensor out(n, 2);
    for (std::size_t k = 0; k < dirs.size(); ++k) {
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::size_t a = 0; a < d; ++a) s += c(i, a) * dirs[k][a];
            out(i, k) = s;
        }
    }
    return out;
}

struct BoundReport {
    std::vector<std::string> names;
    std::vector<std::vector<double>> distances;
    std::vector<std::string> source_names;
    double rho_hat = 0.0;
    struct Target {
        std::string name;
        double gamma_hat = 0.0;
        std::vector<double> weights;
    };
    std::vector<Target> targets;
    double grid_step = 0.1;
};

[[nodiscard]] inline nlohmann::json to_json(const BoundReport& r)
{
    nlohmann::json j;
    j["feature_sets"] = r.names;
    j["pairwise_proxy_a_distance"] = r.distances;
    j["sources"] = r.source_names;
    j["rho_hat"] = r.rho_hat;
    j["grid_step"] = r.grid_step;
    j["targets"] = nlohmann::json::array();
    for (const auto& t : r.targets) {
        j["targets"].push_back({{"name", t.name}, {"gamma_hat", t.gamma_hat}, {"mixture_weights", t.weights}});
    }
    j["source_risk_weighting"] = "unweighted mean; mixture weights are not applied to source risks";
    j["estimator_noise"] = kEstimatorNoise;
    return j;
}

}  // namespace didm::diag
