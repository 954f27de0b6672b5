// Acceptance run: prints one PASS/FAIL line per criterion and exits nonzero
// if any criterion fails.
//
//   acceptance --cli <path to didm> --work <scratch dir> [--only 1,2,...]

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "didm/diagnostics.hpp"
#include "didm/gradcheck_suite.hpp"
#include "didm/objective.hpp"
#include "didm/optimizer.hpp"
#include "didm/training.hpp"

using namespace didm;
using namespace didm::objective;
using ad::Graph;
using ad::Var;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;
};

// Records the first violation; later checks still run so the detail names the earliest one.
class Checker {
public:
    void expect(bool ok, const std::string& what)
    {
        ++checked_;
        if (!ok && failures_++ == 0) first_ = what;
    }
    void near(double got, double want, double tol, const std::string& what)
    {
        char buf[160];
        std::snprintf(buf, sizeof buf, "%s: got %.12g, want %.12g ±%g", what.c_str(), got, want, tol);
        expect(std::abs(got - want) <= tol, buf);
    }
    [[nodiscard]] Outcome outcome(const std::string& summary) const
    {
        if (failures_ == 0) return {true, summary + " (" + std::to_string(checked_) + " checks)"};
        return {false, std::to_string(failures_) + "/" + std::to_string(checked_) + " checks failed; first: " + first_};
    }

private:
    std::size_t checked_ = 0, failures_ = 0;
    std::string first_;
};

Tensor random_tensor(Rng& rng, std::size_t r, std::size_t c, double lo, double hi)
{
    Tensor t(r, c);
    for (double& v : t.values) v = rng.uniform(lo, hi);
    return t;
}

Tensor random_probs(Rng& rng, std::size_t r, std::size_t c, double spread)
{
    Tensor t = random_tensor(rng, r, c, -spread, spread);
    for (std::size_t i = 0; i < r; ++i) {
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += (t(i, j) = std::exp(t(i, j)));
        for (std::size_t j = 0; j < c; ++j) t(i, j) /= z;
    }
    return t;
}

LinearClassifier identity_classifier(Graph& g, std::size_t c)
{
    return {g.leaf(Tensor::identity(c), true), g.leaf(Tensor(1, c, 0.0), true)};
}

Outcome analytic_values()
{
    constexpr double tol = 1e-6;
    const double ln2 = std::numbers::ln2, ln3 = std::log(3.0);
    Checker ck;
    Graph g;

    const Var zd = extract_domain_specific(g.constant(Tensor::row({1, 0})), g.constant(Tensor::row({0.5, 0.5})), 0.5);
    ck.near(zd.value()(0, 0), 0.0, tol, "z_d[0]");
    ck.near(zd.value()(0, 1), 1.0, tol, "z_d[1]");

    const std::vector<int> label2{2}, label1{1};
    ck.near(loss_classifier(g.constant(Tensor(1, 3, 0.0)), label2, identity_classifier(g, 3)).item(), ln3, tol,
            "L_C uniform C=3");
    ck.near(loss_classifier(g.constant(Tensor::row({0, 50, 0})), label1, identity_classifier(g, 3)).item(), 0.0, tol,
            "L_C confident");
    ck.near(loss_classifier(g.constant(Tensor::row({10, 0})), label1, identity_classifier(g, 2)).item(),
            10.000045398899217, tol, "L_C logits (10,0) label 1");

    ck.near(loss_entropy_max(g.constant(Tensor(1, 3, 0.0)), identity_classifier(g, 3)).item(), -ln3, tol,
            "L_H uniform C=3");
    ck.near(loss_entropy_max(g.constant(Tensor::row({10, 0})), identity_classifier(g, 2)).item(),
            -4.9937758624120859e-4, tol, "L_H logits (10,0)");
    ck.near(loss_entropy_max(g.constant(Tensor::row({7.0})), identity_classifier(g, 1)).item(), 0.0, tol, "L_H C=1");

    ck.near(loss_feature_diversity(g.constant(Tensor::row({0.3, 2.0})), 0.1).item(), 0.0, tol, "L_FD K=1");
    ck.near(loss_feature_diversity(g.constant(Tensor::from_rows({{1, 2}, {1, 2}})), 0.1).item(), 2.0 * ln2, tol,
            "L_FD K=2 identical");
    ck.near(loss_feature_diversity(g.constant(Tensor::from_rows({{1, 0}, {0, 1}})), 0.1).item(),
            9.0797798433729294e-5, tol, "L_FD K=2 orthogonal");
    ck.near(loss_feature_diversity(g.constant(Tensor::from_rows({{1, 0}, {0, 1}, {1, 1}})), 0.5).item(),
            1.8000939427463047, tol, "L_FD K=3 tau=0.5");

    const std::vector<int> one{0};
    ck.near(loss_dlm(g.constant(Tensor(1, 3, 0.0)), one, identity_classifier(g, 3), DlmHyper{}).total.item(), 0.0,
            tol, "L_DLM uniform single proposal");

    const Tensor ortho = Tensor::from_rows({{1, 0}, {0, 1}});
    ck.near(alignment_loss(g.constant(ortho), g.constant(ortho)).item(), -1.0, tol, "alignment identical orthogonal");
    ck.near(alignment_loss(g.constant(Tensor::from_rows({{1, 0, 0}, {1, 0, 0}})),
                           g.constant(Tensor::from_rows({{0, 1, 0}, {0, 0, 1}})))
                .item(),
            0.0, tol, "alignment orthogonal pairs");
    const Tensor same = Tensor::from_rows({{1, 1}, {2, 2}});
    ck.near(alignment_loss(g.constant(same), g.constant(same)).item(), -0.5, tol, "alignment collinear rows");
    ck.near(alignment_loss(g.constant(Tensor::from_rows({{1, 0}, {1, 1}})),
                           g.constant(Tensor::from_rows({{1, 0.2}, {0, 1}})))
                .item(),
            -0.72970519493516777, tol, "alignment mixed");

    const Tensor p = Tensor::from_rows({{0.2, 0.3, 0.5}});
    const Tensor b = Tensor::row({0.1, 0.2, -0.3, 0.4}), b0 = Tensor::row({0, 0, 0, 0});
    ck.near(beta_weight(p, p, b, b).beta, 1.0, tol, "beta identical streams");
    ck.near(beta_weight(p, p, b0, Tensor::row({std::sqrt(2.0 * ln2), 0, 0, 0})).beta, 1.5, tol,
            "beta at L_c+L_b = 2 ln 2");
    const auto mixed = beta_weight(Tensor::row({0.7, 0.2, 0.1}), Tensor::row({0.5, 0.3, 0.2}), b0,
                                   Tensor::row({0.1, -0.2, 0.3, 0}));
    ck.near(mixed.l_c, 0.085122825957221644, tol, "beta mixed L_c");
    ck.near(mixed.beta, 1.1064575296811582, tol, "beta mixed");

    const Tensor p2 = Tensor::from_rows({{0.5, 0.5}, {0.9, 0.1}});
    const Tensor boxes = Tensor::from_rows({{0, 0, 0, 0}, {1, 1, 1, 1}});
    ck.near(loss_wam(g.constant(ortho), g.constant(ortho), g.constant(p2), g.constant(p2), g.constant(boxes),
                     g.constant(boxes))
                .total.item(),
            0.0, tol, "L_WAM perfect alignment");
    const double d = std::sqrt(4.0 * ln2);
    ck.near(loss_wam(g.constant(same), g.constant(same), g.constant(p2), g.constant(p2), g.constant(Tensor(2, 4, 0.0)),
                     g.constant(Tensor::from_rows({{d, 0, 0, 0}, {0, 0, 0, 0}})))
                .total.item(),
            0.75, tol, "L_WAM beta 1.5 alignment -0.5");

    ck.near(total_loss(1.0, 2.0, 0.5, 0.45).l_total, 2.125, tol, "L_total");
    return ck.outcome("all analytic examples within 1e-6");
}

Outcome gradient_oracle()
{
    const auto cases = ad::run_gradcheck_suite();
    Checker ck;
    double worst_op = 0.0, worst_e2e = 0.0;
    for (const auto& c : cases) {
        const bool e2e = c.name.rfind("end_to_end/", 0) == 0;
        const double limit = e2e ? 1e-3 : 1e-4;
        (e2e ? worst_e2e : worst_op) = std::max(e2e ? worst_e2e : worst_op, c.max_relative_error);
        char buf[160];
        std::snprintf(buf, sizeof buf, "%s max relative error %.3e >= %.0e", c.name.c_str(), c.max_relative_error,
                      limit);
        ck.expect(c.max_relative_error < limit, buf);
    }
    char summary[160];
    std::snprintf(summary, sizeof summary, "%zu cases, worst op/loss %.2e, end-to-end %.2e", cases.size(), worst_op,
                  worst_e2e);
    return ck.outcome(summary);
}

Outcome random_invariants()
{
    Checker ck;
    Rng rng(20261016);
    std::vector<std::pair<double, double>> beta_samples;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t k = 1 + rng.index(5);
        const double spread = rng.uniform(0.0, 8.0);
        const auto bt = beta_weight(random_probs(rng, k, 4, spread), random_probs(rng, k, 4, spread),
                                    random_tensor(rng, k, 4, -spread, spread), random_tensor(rng, k, 4, -spread, spread));
        ck.expect(bt.beta >= 1.0 && bt.beta < 2.0, "beta outside [1, 2)");
        beta_samples.emplace_back(bt.l_c + bt.l_b, bt.beta);
    }
    std::sort(beta_samples.begin(), beta_samples.end());
    for (std::size_t i = 1; i < beta_samples.size(); ++i) {
        ck.expect(beta_samples[i - 1].second <= beta_samples[i].second, "beta not monotone in L_c+L_b");
    }

    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t k = 1 + rng.index(6);
        Graph g;
        const double v = loss_feature_diversity(g.constant(random_tensor(rng, k, 5, -2.0, 2.0)), 0.1).item();
        ck.expect(v >= 0.0, "L_FD negative");
        ck.expect(k == 1 ? std::abs(v) <= 1e-12 : v > 0.0, "L_FD zero iff K=1 violated");
    }

    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t k = 1 + rng.index(5);
        Graph g;
        const Var zs = g.constant(random_tensor(rng, k, 6, 0.0, 1.0));
        const Var za = g.constant(random_tensor(rng, k, 6, 0.0, 1.0));
        const Var ps = g.constant(random_probs(rng, k, 4, 3.0));
        const Var pa = g.constant(random_probs(rng, k, 4, 3.0));
        const Var bs = g.constant(random_tensor(rng, k, 4, -1.0, 1.0));
        const Var ba = g.constant(random_tensor(rng, k, 4, -1.0, 1.0));
        const auto w = loss_wam(zs, za, ps, pa, bs, ba);
        const double align = alignment_loss(zs, za).item();
        ck.expect(w.total.item() >= 0.0 && w.total.item() < 2.0, "L_WAM outside [0, 2)");
        ck.expect(align >= -1.0 && align <= 0.0, "alignment outside [-1, 0]");
        const double recomposed = beta_weight(ps.value(), pa.value(), bs.value(), ba.value()).beta * (1.0 + align);
        ck.expect(std::abs(w.total.item() - recomposed) <= 1e-10, "L_WAM recomposition beyond 1e-10");
    }

    for (int trial = 0; trial < 1000; ++trial) {
        Graph g;
        const Tensor zs = random_tensor(rng, 3, 4, -5.0, 5.0), za = random_tensor(rng, 3, 4, -5.0, 5.0);
        const double l1 = rng.uniform(0.0, 0.95);
        const Tensor& z = extract_domain_specific(g.constant(zs), g.constant(za), l1).value();
        for (std::size_t i = 0; i < zs.size(); ++i) {
            ck.expect(std::abs(l1 * zs.values[i] + (1.0 - l1) * z.values[i] - za.values[i]) <= 1e-10,
                      "z_a recomposition beyond 1e-10");
        }
        const double det = rng.uniform(0, 5), dlm = rng.uniform(-2, 3), wam = rng.uniform(0, 2), a = rng.uniform(0, 1);
        ck.expect(std::abs(total_loss(det, dlm, wam, a).l_total - (det + a * (dlm + wam))) <= 1e-10,
                  "L_total recomposition beyond 1e-10");
    }
    return ck.outcome("1000 random inputs per invariant");
}

Outcome behavioral()
{
    Checker ck;
    const double ln3 = std::log(3.0);
    Rng rng(12);
    std::vector<Tensor> logits{random_tensor(rng, 8, 3, -3.0, 3.0)};
    ad::OptimizerState st{0.5, 0.9, {}};
    double entropy = 0.0;
    int reached = -1;
    for (int step = 0; step <= 200; ++step) {
        Graph g;
        const Var z = g.leaf(logits[0], true);
        const Var l = loss_entropy_max(z, identity_classifier(g, 3));
        entropy = -l.item();
        if (reached < 0 && std::abs(entropy - ln3) <= 1e-3) reached = step;
        if (step == 200) break;
        ad::sgd_step(logits, std::vector<Var>{z}, g.backward(l), st);
    }
    ck.expect(reached >= 0, "mean entropy after 200 steps " + std::to_string(entropy) + ", ln 3 = " +
                                std::to_string(ln3));

    const auto off_diag_cos = [](const Tensor& z) {
        Graph g;
        const Var n = ad::l2_normalize_rows(g.constant(z));
        const Tensor& s = ad::matmul(n, ad::transpose(n)).value();
        double total = 0.0;
        for (std::size_t i = 0; i < s.rows; ++i)
            for (std::size_t j = 0; j < s.cols; ++j)
                if (i != j) total += s(i, j);
        return total / static_cast<double>(s.rows * (s.rows - 1));
    };
    std::vector<Tensor> feats{random_tensor(rng, 8, 6, 0.0, 1.0)};
    ad::OptimizerState fst{0.05, 0.9, {}};
    const double before = off_diag_cos(feats[0]);
    for (int step = 0; step < 100; ++step) {
        Graph g;
        const Var z = g.leaf(feats[0], true);
        ad::sgd_step(feats, std::vector<Var>{z}, g.backward(loss_feature_diversity(z, 0.1)), fst);
    }
    const double after = off_diag_cos(feats[0]);
    ck.expect(after < before, "mean off-diagonal cosine did not decrease: " + std::to_string(before) + " -> " +
                                  std::to_string(after));
    char buf[160];
    std::snprintf(buf, sizeof buf, "entropy within 1e-3 of ln 3 at step %d; off-diagonal cosine %.4f -> %.4f", reached,
                  before, after);
    return ck.outcome(buf);
}

diag::FeatureSet cloud(const std::string& name, std::size_t n, std::size_t d, double shift, std::uint64_t seed,
                       double w = 1.0, double shift_b = 0.0)
{
    Rng rng(seed);
    diag::FeatureSet s{name, Tensor(n, d)};
    const auto count_a = static_cast<std::size_t>(std::lround(w * static_cast<double>(n)));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) s.features(i, j) = rng.normal() + (j == 0 ? (i < count_a ? shift : shift_b) : 0.0);
    }
    return s;
}

Outcome diagnostics_sanity()
{
    Checker ck;
    double worst_identical = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        worst_identical = std::max(worst_identical, diag::proxy_a_distance(cloud("a", 400, 4, 0.0, 2 * seed + 1),
                                                                           cloud("b", 400, 4, 0.0, 2 * seed + 2),
                                                                           {.seed = seed}));
    }
    ck.expect(worst_identical <= 0.15, "identical distributions gave " + std::to_string(worst_identical));
    const double separable = diag::proxy_a_distance(cloud("a", 200, 4, 10.0, 1), cloud("b", 200, 4, -10.0, 2));
    ck.expect(separable >= 1.95, "separable clouds gave " + std::to_string(separable));

    const std::vector<diag::FeatureSet> src{cloud("a", 600, 3, 2.0, 41), cloud("b", 600, 3, -2.0, 42)};
    const auto gamma = diag::estimate_gamma(src, cloud("target", 600, 3, 2.0, 43, 0.5, -2.0),
                                            {.grid_step = 0.1, .proxy = {}});
    ck.expect(std::abs(gamma.weights[0] - 0.5) <= 0.1 + 1e-12,
              "planted 50/50 mixture recovered as " + std::to_string(gamma.weights[0]));

    const std::vector<diag::FeatureSet> pair{cloud("a", 120, 3, 1.5, 21), cloud("b", 120, 3, -1.5, 22)};
    const diag::GridOptions go{.grid_step = 0.2, .proxy = {}};
    std::vector<diag::FeatureSet> mixes;
    for (int k = 0; k <= 5; ++k) {
        const std::vector<double> w{0.2 * k, 1.0 - 0.2 * k};
        mixes.push_back(diag::mixture(pair, w, 120, go.mixture_seed));
    }
    double oracle = 0.0;
    for (std::size_t i = 0; i < mixes.size(); ++i)
        for (std::size_t j = 0; j < mixes.size(); ++j)
            if (i != j) oracle = std::max(oracle, diag::proxy_a_distance(mixes[i], mixes[j], go.proxy));
    const double rho = diag::estimate_rho(pair, go);
    ck.expect(rho == oracle, "rho " + std::to_string(rho) + " vs brute force " + std::to_string(oracle));

    char buf[200];
    std::snprintf(buf, sizeof buf, "identical <= %.3f, separable %.3f, planted weight %.2f, rho %.4f = oracle",
                  worst_identical, separable, gamma.weights[0], rho);
    return ck.outcome(buf);
}

Outcome directional_ablation(const fs::path& work, const std::vector<std::uint64_t>& seeds, unsigned jobs)
{
    const exp::ExperimentConfig base = exp::load_config(DIDM_SOURCE_DIR "/configs/default.json");
    const auto res = exp::run_ablation(base, seeds, (work / "ablation").string(), jobs);
    std::printf("%s", exp::ablation_table_csv(res).c_str());
    const double full = res.shifted_mean("full");
    const double baseline = res.shifted_mean("baseline");
    Checker ck;
    char buf[200];
    std::snprintf(buf, sizeof buf, "full %.4f vs baseline %.4f: margin %+.4f < 0.02", full, baseline,
                  full - baseline);
    ck.expect(full - baseline >= 0.02, buf);
    std::string rows;
    for (const char* row : {"+LC+LH", "+LFD", "+LWAM"}) {
        const double m = res.shifted_mean(row);
        std::snprintf(buf, sizeof buf, "%s %.4f exceeds full %.4f by more than 0.01", row, m, full);
        ck.expect(m <= full + 0.01, buf);
        std::snprintf(buf, sizeof buf, ", %s %.4f", row, m);
        rows += buf;
    }
    std::snprintf(buf, sizeof buf, "shifted mAP full %.4f, baseline %.4f", full, baseline);
    return ck.outcome(buf + rows);
}

int run_process(const std::string& cmd)
{
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Outcome determinism(const std::string& cli, const fs::path& work)
{
    Checker ck;
    std::vector<fs::path> dirs{work / "determinism" / "a", work / "determinism" / "b"};
    for (const auto& d : dirs) {
        fs::remove_all(d);
        const std::string cmd = "\"" + cli + "\" train --config \"" DIDM_SOURCE_DIR "/configs/default.json\" --seed 11 --out \"" +
                                d.string() + "\" >/dev/null 2>&1";
        const int code = run_process(cmd);
        ck.expect(code == 0, "train exited with " + std::to_string(code));
    }
    for (const char* f : {"losses.csv", "metrics.json"}) {
        const std::string a = slurp(dirs[0] / f), b = slurp(dirs[1] / f);
        ck.expect(!a.empty(), std::string(f) + " missing or empty");
        ck.expect(a == b, std::string(f) + " differs between runs");
    }
    return ck.outcome("losses.csv and metrics.json bitwise identical across two CLI runs");
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Acceptance criteria"};
    std::string cli, work = "acceptance_runs";
    std::vector<int> only;
    std::vector<std::uint64_t> seeds{11, 12, 13, 14, 15};
    unsigned jobs = std::max(1u, std::thread::hardware_concurrency());
    app.add_option("--cli", cli, "Path to the didm executable")->required();
    app.add_option("--work", work, "Scratch directory for training runs");
    app.add_option("--only", only, "Run only these criteria")->delimiter(',');
    app.add_option("--seeds", seeds, "Ablation seeds")->delimiter(',');
    app.add_option("--jobs", jobs, "Concurrent ablation runs");
    CLI11_PARSE(app, argc, argv);
    fs::create_directories(work);

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"analytic loss values", analytic_values},
        {"gradient oracle", gradient_oracle},
        {"bound and weight invariants", random_invariants},
        {"behavioral optimization", behavioral},
        {"diagnostics sanity", diagnostics_sanity},
        {"directional ablation", [&] { return directional_ablation(work, seeds, jobs); }},
        {"determinism", [&] { return determinism(cli, work); }},
    };
    bool all = true;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("CRITERION %d %s: %s: %s [%.1fs]\n", id, o.pass ? "PASS" : "FAIL", criteria[i].first.c_str(),
                    o.detail.c_str(), secs);
        std::fflush(stdout);
        all = all && o.pass;
    }
    return all ? 0 : 1;
}
