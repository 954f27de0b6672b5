#pragma once

// Diversity learning (DLM) and weighted alignment (WAM) losses over pooled
// proposal features, and the total training objective.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "didm/autodiff.hpp"

namespace didm::objective {

using ad::Var;

struct Lambda1Schedule {
    double start_value = 0.5;
    double end_value = 0.9;
    std::int64_t total_steps = 1;
    double cap = 0.95;

    void validate() const
    {
        if (!(start_value > 0.0 && start_value < 1.0) || !(end_value > 0.0 && end_value < 1.0)) {
            throw ConfigError("lambda1: start and end must lie in (0, 1)");
        }
        if (!(start_value <= end_value && end_value <= cap && cap < 1.0)) {
            throw ConfigError("lambda1: requires start <= end <= cap < 1");
        }
        if (total_steps <= 0) {
            throw ConfigError("lambda1: total_steps must be positive");
        }
    }
};

/// Linear ramp from start to end over total_steps, clamped.
[[nodiscard]] inline double lambda1_at(std::int64_t step, const Lambda1Schedule& s)
{
    const double t = static_cast<double>(std::max<std::int64_t>(step, 0)) / static_cast<double>(s.total_steps);
    const double v = s.start_value + (s.end_value - s.start_value) * t;
    return std::clamp(v, s.start_value, std::min(s.end_value, s.cap));
}

/// z_d = (z_a − λ1·z_s) / (1 − λ1), the residual of z_a = λ1·z_s + (1 − λ1)·z_d.
[[nodiscard]] inline Var extract_domain_specific(const Var& z_s, const Var& z_a, double lambda1)
{
    if (!(lambda1 >= 0.0) || lambda1 >= 1.0) {
        throw Error("extract_domain_specific: lambda1 must lie in [0, 1), got " + std::to_string(lambda1));
    }
    if (!z_s.value().same_shape(z_a.value())) {
        throw ShapeError("extract_domain_specific: z_s " + z_s.value().shape_string() + " vs z_a " +
                         z_a.value().shape_string());
    }
    return ad::scale(ad::sub(z_a, ad::scale(z_s, lambda1)), 1.0 / (1.0 - lambda1));
}

/// Auxiliary linear classifier f: d → C applied to domain-specific features.
struct LinearClassifier {
    Var weight;  // d×C
    Var bias;    // 1×C

    [[nodiscard]] std::size_t num_classes() const { return weight.cols(); }
};

[[nodiscard]] inline Var classifier_logits(const Var& z, const Var& weight, const Var& bias)
{
    return ad::add_bias(ad::matmul(z, weight), bias);
}

[[nodiscard]] inline Var zero_scalar(ad::Graph& g) { return g.constant(Tensor::scalar(0.0)); }

/// Mean cross-entropy of f(z_d) against labels. With `split`, z_d enters as a
/// constant so only f receives gradient.
[[nodiscard]] inline Var loss_classifier(const Var& z_d, std::span<const int> labels, const LinearClassifier& f,
                                         bool split = true)
{
    const std::size_t k = z_d.rows();
    const std::size_t c = f.num_classes();
    if (labels.size() != k) {
        throw ShapeError("loss_classifier: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(k) + " rows");
    }
    Tensor onehot(k, c);
    for (std::size_t i = 0; i < k; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
            throw Error("loss_classifier: label " + std::to_string(labels[i]) + " outside [0, " +
                        std::to_string(c) + ")");
        }
        onehot(i, static_cast<std::size_t>(labels[i])) = 1.0;
    }
    if (k == 0) {
        return zero_scalar(z_d.graph());
    }
    const Var input = split ? ad::detach(z_d) : z_d;
    const Var logp = ad::log(ad::softmax_rows(classifier_logits(input, f.weight, f.bias)));
    const Var picked = ad::sum(ad::mul(logp, z_d.graph().constant(std::move(onehot))));
    return ad::scale(picked, -1.0 / static_cast<double>(k));
}

/// L_H = −mean_i H(softmax(f(z_d^i))), in [−ln C, 0]. With `split`, f enters
/// as a constant so only z_d (and what produced it) receives gradient.
[[nodiscard]] inline Var loss_entropy_max(const Var& z_d, const LinearClassifier& f, bool split = true)
{
    const std::size_t k = z_d.rows();
    if (k == 0) {
        return zero_scalar(z_d.graph());
    }
    const Var w = split ? ad::detach(f.weight) : f.weight;
    const Var b = split ? ad::detach(f.bias) : f.bias;
    const Var p = ad::softmax_rows(classifier_logits(z_d, w, b));
    // Σ p ln p = −H, summed over rows.
    const Var neg_entropy = ad::sum(ad::mul(p, ad::log(p)));
    return ad::scale(neg_entropy, 1.0 / static_cast<double>(k));
}

/// Contrastive diversity loss over the K rows of z_d:
/// Σ_i [ log Σ_j exp(s_ij/τ) − s_ii/τ ], s = cosine similarity of the
/// l2-normalized rows. Evaluated with exponents shifted by 1/τ (s ≤ 1).
[[nodiscard]] inline Var loss_feature_diversity(const Var& z_d, double tau)
{
    if (!(tau > 0.0)) {
        throw Error("loss_feature_diversity: tau must be positive");
    }
    ad::Graph& g = z_d.graph();
    const std::size_t k = z_d.rows();
    if (k <= 1) {
        // A single row cancels against itself; skip the log epsilon residue.
        return zero_scalar(g);
    }
    const Var n = ad::l2_normalize_rows(z_d);
    const Var sim = ad::matmul(n, ad::transpose(n));
    const Var shifted = ad::scale(ad::sub(sim, g.constant(Tensor(k, k, 1.0))), 1.0 / tau);
    const Var row_sums = ad::matmul(ad::exp(shifted), g.constant(Tensor(k, 1, 1.0)));
    const Var log_terms = ad::sum(ad::log(row_sums));
    const Var diag = ad::sum(ad::mul(shifted, g.constant(Tensor::identity(k))));
    return ad::sub(log_terms, diag);
}

struct DlmHyper {
    double tau = 0.1;
    double lambda2 = 0.1;
    std::size_t num_classes = 3;
    bool split_gradients = true;

    void validate() const
    {
        if (!(tau > 0.0)) {
            throw ConfigError("dlm: tau must be positive");
        }
        if (!(lambda2 >= 0.0)) {
            throw ConfigError("dlm: lambda2 must be non-negative");
        }
    }
};

struct DlmTerms {
    Var l_c;
    Var l_h;
    Var l_fd;
    Var total;
};

/// L_DLM = L_C + L_H + λ2·L_FD. `labels[i] < 0` marks a proposal without a
/// matched object: it is left out of L_C and L_H but still counts in L_FD.
[[nodiscard]] inline DlmTerms loss_dlm(const Var& z_d, std::span<const int> labels, const LinearClassifier& f,
                                       const DlmHyper& hyper, bool use_lc_lh = true, bool use_lfd = true)
{
    if (labels.size() != z_d.rows()) {
        throw ShapeError("loss_dlm: label count does not match proposal count");
    }
    ad::Graph& g = z_d.graph();
    std::vector<std::size_t> fg;
    std::vector<int> fg_labels;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= 0) {
            fg.push_back(i);
            fg_labels.push_back(labels[i]);
        }
    }
    DlmTerms t;
    if (use_lc_lh && !fg.empty()) {
        const Var z_fg = fg.size() == z_d.rows() ? z_d : ad::gather_rows(z_d, fg);
        t.l_c = loss_classifier(z_fg, fg_labels, f, hyper.split_gradients);
        t.l_h = loss_entropy_max(z_fg, f, hyper.split_gradients);
    } else {
        t.l_c = zero_scalar(g);
        t.l_h = zero_scalar(g);
    }
    t.l_fd = use_lfd ? loss_feature_diversity(z_d, hyper.tau) : zero_scalar(g);
    t.total = ad::add(ad::add(t.l_c, t.l_h), ad::scale(t.l_fd, hyper.lambda2));
    return t;
}

inline constexpr double kAlignEps = 1e-6;

/// Mean over proposals of −s_ii / (s_ii + Σ_{j≠i} max(s_ij, 0) + ε), where s is
/// the cosine similarity between original row i and augmented row j.
[[nodiscard]] inline Var alignment_loss(const Var& z_s, const Var& z_a)
{
    if (!z_s.value().same_shape(z_a.value())) {
        throw ShapeError("alignment_loss: z_s " + z_s.value().shape_string() + " vs z_a " +
                         z_a.value().shape_string());
    }
    ad::Graph& g = z_s.graph();
    const std::size_t k = z_s.rows();
    if (k == 0) {
        return zero_scalar(g);
    }
    const Var sim = ad::matmul(ad::l2_normalize_rows(z_s), ad::transpose(ad::l2_normalize_rows(z_a)));
    const Var positive = ad::cosine_rowpairs(z_s, z_a);
    Tensor off_mask(k, k, 1.0);
    for (std::size_t i = 0; i < k; ++i) {
        off_mask(i, i) = 0.0;
    }
    const Var negatives = ad::matmul(ad::mul(ad::relu(sim), g.constant(std::move(off_mask))),
                                     g.constant(Tensor(k, 1, 1.0)));
    const Var ratio = ad::div(positive, ad::add(positive, negatives), kAlignEps);
    return ad::scale(ad::mean(ratio), -1.0);
}

struct BetaTerms {
    double l_c = 0.0;
    double l_b = 0.0;
    double beta = 1.0;
};

/// β = 2 − exp(−(L_c + L_b)/2) with L_c = Σ_i KL(p_s^i ‖ p_a^i) and
/// L_b = mean_i ‖b_s^i − b_a^i‖². Plain values: β carries no gradient.
[[nodiscard]] inline BetaTerms beta_weight(const Tensor& p_s, const Tensor& p_a, const Tensor& b_s,
                                           const Tensor& b_a)
{
    if (!p_s.same_shape(p_a) || !b_s.same_shape(b_a) || p_s.rows != b_s.rows) {
        throw ShapeError("beta_weight: shapes " + p_s.shape_string() + ", " + p_a.shape_string() + ", " +
                         b_s.shape_string() + ", " + b_a.shape_string() + " do not agree");
    }
    for (const Tensor* p : {&p_s, &p_a}) {
        for (std::size_t r = 0; r < p->rows; ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < p->cols; ++c) {
                if ((*p)(r, c) < 0.0) {
                    throw Error("beta_weight: negative probability in row " + std::to_string(r));
                }
                s += (*p)(r, c);
            }
            if (std::abs(s - 1.0) > 1e-6) {
                throw Error("beta_weight: row " + std::to_string(r) + " sums to " + std::to_string(s));
            }
        }
    }
    BetaTerms out;
    for (std::size_t r = 0; r < p_s.rows; ++r) {
        for (std::size_t c = 0; c < p_s.cols; ++c) {
            const double p = p_s(r, c);
            out.l_c += p * (std::log(p + ad::kLogEps) - std::log(p_a(r, c) + ad::kLogEps));
        }
    }
    if (b_s.rows > 0) {
        for (std::size_t r = 0; r < b_s.rows; ++r) {
            double d2 = 0.0;
            for (std::size_t c = 0; c < b_s.cols; ++c) {
                const double d = b_s(r, c) - b_a(r, c);
                d2 += d * d;
            }
            out.l_b += d2;
        }
        out.l_b /= static_cast<double>(b_s.rows);
    }
    // The ε floors can leave L_c a hair below zero.
    const double x = std::max(0.0, out.l_c + out.l_b);
    out.beta = std::min(2.0 - std::exp(-0.5 * x), std::nextafter(2.0, 0.0));
    return out;
}

struct WamTerms {
    Var alignment;
    Var total;
    BetaTerms beta;
};

/// L_WAM = β·(1 + alignment_loss). Predictions pass through detach nodes, so β
/// stays fixed while gradient-checking and never feeds back into the heads.
[[nodiscard]] inline WamTerms loss_wam(const Var& z_s, const Var& z_a, const Var& p_s, const Var& p_a,
                                       const Var& b_s, const Var& b_a, bool use_beta = true)
{
    WamTerms t;
    t.alignment = alignment_loss(z_s, z_a);
    ad::Graph& g = z_s.graph();
    const Var one_plus = ad::add(g.constant(Tensor::scalar(1.0)), t.alignment);
    if (use_beta) {
        const Var ps = ad::detach(p_s), pa = ad::detach(p_a), bs = ad::detach(b_s), ba = ad::detach(b_a);
        t.beta = beta_weight(ps.value(), pa.value(), bs.value(), ba.value());
    }
    t.total = ad::scale(one_plus, t.beta.beta);
    return t;
}

struct LossBreakdown {
    double l_det = 0.0;
    double l_c = 0.0;
    double l_h = 0.0;
    double l_fd = 0.0;
    double l_dlm = 0.0;
    double l_align = 0.0;
    double beta = 0.0;
    double l_wam = 0.0;
    double l_total = 0.0;
};

/// L_total = L_det + α·(L_DLM + L_WAM).
[[nodiscard]] inline LossBreakdown total_loss(double l_det, double l_dlm, double l_wam, double alpha)
{
    if (!(alpha >= 0.0)) {
        throw Error("total_loss: alpha must be non-negative");
    }
    LossBreakdown b;
    b.l_det = l_det;
    b.l_dlm = l_dlm;
    b.l_wam = l_wam;
    b.l_total = l_det + alpha * (l_dlm + l_wam);
    return b;
}

[[nodiscard]] inline Var total_objective(const Var& l_det, const Var& l_dlm, const Var& l_wam, double alpha)
{
    if (!(alpha >= 0.0)) {
        throw Error("total_objective: alpha must be non-negative");
    }
    return ad::add(l_det, ad::scale(ad::add(l_dlm, l_wam), alpha));
}

}  // namespace didm::objective
