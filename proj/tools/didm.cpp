// didm: train, evaluate, ablate and diagnose the toy DIDM detector.
//
// Exit codes: 0 ok, 1 invalid config or usage, 2 numerical failure,
// 3 gradient check failure.

#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "didm/gradcheck_suite.hpp"
#include "didm/training.hpp"

namespace {

enum ExitCode { kOk = 0, kInvalidConfig = 1, kNumerical = 2, kGradFailure = 3 };

std::vector<std::string> split_list(const std::string& s)
{
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

int cmd_train(const std::string& config_path, std::uint64_t seed, const std::string& out, const std::string& resume)
{
    didm::exp::ExperimentConfig cfg = didm::exp::load_config(config_path);
    cfg.seed = seed;
    didm::exp::TrainOptions opts;
    opts.out_dir = out;
    if (!resume.empty()) opts.resume = didm::exp::load_checkpoint(resume);
    opts.on_step = [](const didm::exp::StepRecord& r) {
        if (r.step % 50 == 0) {
            std::fprintf(stderr, "step %lld epoch %lld l_total %.6f l_det %.6f\n", static_cast<long long>(r.step),
                         static_cast<long long>(r.epoch), r.loss.l_total, r.loss.l_det);
        }
    };
    const auto res = didm::exp::run_train(cfg, opts);
    for (const auto& m : res.metrics) std::printf("%s mAP %.4f\n", m.domain.c_str(), m.map);
    return kOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& domains)
{
    const auto ck = didm::exp::load_checkpoint(checkpoint);
    std::vector<didm::exp::DomainMetrics> ms;
    for (const auto& d : split_list(domains)) {
        ms.push_back(didm::exp::evaluate_domain(ck.params, ck.config, didm::toy::domain_from_string(d)));
    }
    std::cout << didm::exp::metrics_json(ms).dump(2) << "\n";
    return kOk;
}

int cmd_ablate(const std::string& config_path, const std::string& seeds, const std::string& out, unsigned jobs)
{
    const auto cfg = didm::exp::load_config(config_path);
    std::vector<std::uint64_t> s;
    for (const auto& x : split_list(seeds)) s.push_back(std::stoull(x));
    const auto res = didm::exp::run_ablation(cfg, s, out, jobs);
    std::cout << didm::exp::ablation_table_csv(res);
    return kOk;
}

int cmd_diagnose(const std::string& checkpoint, const std::string& out)
{
    const auto res = didm::exp::run_diagnose(didm::exp::load_checkpoint(checkpoint), out);
    std::cout << didm::diag::to_json(res.report).dump(2) << "\n";
    return kOk;
}

int cmd_gradcheck(const std::string& fault_op, double fault_factor)
{
    didm::ad::GradSuiteOptions o;
    if (!fault_op.empty()) o.fault = std::pair{didm::ad::op_kind_from_string(fault_op), fault_factor};
    const auto cases = didm::ad::run_gradcheck_suite(o);
    bool ok = true;
    std::printf("%-32s %14s %10s %8s  %s\n", "case", "max_rel_err", "tolerance", "probes", "result");
    for (const auto& c : cases) {
        std::printf("%-32s %14.3e %10.0e %8zu  %s\n", c.name.c_str(), c.max_relative_error, c.tolerance, c.probes,
                    c.passed() ? "PASS" : "FAIL");
        ok = ok && c.passed();
    }
    std::printf("%zu cases, %s\n", cases.size(), ok ? "all passed" : "FAILURES");
    return ok ? kOk : kGradFailure;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Toy single-domain generalization detector with DIDM losses"};
    app.require_subcommand(1);

    std::string config, out, checkpoint, domains = "clear,night,fog,rain", seeds, resume, fault_op;
    std::uint64_t seed = 0;
    unsigned jobs = 1;
    double fault_factor = 1.5;

    auto* train = app.add_subcommand("train", "Train on clear scenes and evaluate every domain");
    train->add_option("--config", config, "Experiment config (JSON)")->required();
    train->add_option("--seed", seed, "Run seed")->required();
    train->add_option("--out", out, "Output directory")->required();
    train->add_option("--resume", resume, "Continue from an epoch checkpoint");

    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
    eval->add_option("--checkpoint", checkpoint)->required();
    eval->add_option("--domains", domains, "Comma-separated domain list");

    auto* ablate = app.add_subcommand("ablate", "Run the six-row ablation grid");
    ablate->add_option("--config", config)->required();
    ablate->add_option("--seeds", seeds, "Comma-separated seeds (at least 3)")->required();
    ablate->add_option("--out", out)->required();
    ablate->add_option("--jobs", jobs, "Concurrent runs")->check(CLI::PositiveNumber);

    auto* diagnose = app.add_subcommand("diagnose", "Feature-distribution diagnostics for a checkpoint");
    diagnose->add_option("--checkpoint", checkpoint)->required();
    diagnose->add_option("--out", out)->required();

    auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
    gradcheck->add_option("--fault-op", fault_op, "Scale this op's backward rule (testing aid)");
    gradcheck->add_option("--fault-factor", fault_factor);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kOk : kInvalidConfig;
    }

    try {
        if (*train) return cmd_train(config, seed, out, resume);
        if (*eval) return cmd_eval(checkpoint, domains);
        if (*ablate) return cmd_ablate(config, seeds, out, jobs);
        if (*diagnose) return cmd_diagnose(checkpoint, out);
        if (*gradcheck) return cmd_gradcheck(fault_op, fault_factor);
    } catch (const didm::ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kInvalidConfig;
    } catch (const didm::NumericalError& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return kNumerical;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kInvalidConfig;
    }
    return kOk;
}
