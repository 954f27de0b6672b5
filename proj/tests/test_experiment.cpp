#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "didm/gradcheck_suite.hpp"
#include "didm/training.hpp"

using namespace didm;
using namespace didm::exp;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny_config()
{
    ExperimentConfig c;
    c.epochs = 2;
    c.batch_size = 4;
    c.train_scenes = 12;
    c.eval_scenes = 20;
    c.feature_dim = 8;
    c.lr_decay_every = 1;
    c.diag_max_samples = 60;
    c.grid_step = 0.5;
    c.proxy_folds = 2;
    return c;
}

fs::path scratch(const std::string& name)
{
    const fs::path p = fs::temp_directory_path() / ("didm_test_" + std::to_string(::getpid())) / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::size_t line_count(const std::string& s)
{
    return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

// Exit status of the CLI, or -1 when the binary is not available.
int run_cli(const std::string& args)
{
    const char* cli = std::getenv("DIDM_CLI");
    if (cli == nullptr) {
        return -1;
    }
    const std::string cmd = std::string("\"") + cli + "\" " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -2;
}

}  // namespace

TEST(Config, JsonRoundTrip)
{
    ExperimentConfig c = tiny_config();
    c.toggles.use_wam = false;
    c.domains = {"clear", "fog"};
    c.tau = 0.25;
    EXPECT_EQ(config_from_json(nlohmann::json::parse(to_json(c).dump())), c);
    EXPECT_EQ(config_hash(c), config_hash(config_from_json(nlohmann::json::parse(to_json(c).dump()))));
}

TEST(Config, ShippedDefaultMatchesBuiltInDefaults)
{
    EXPECT_EQ(load_config(DIDM_SOURCE_DIR "/configs/default.json"), ExperimentConfig{});
}

TEST(Config, MissingFieldsKeepDefaults)
{
    const ExperimentConfig c = config_from_json(nlohmann::json::parse(R"({"epochs": 3})"));
    EXPECT_EQ(c.epochs, 3);
    EXPECT_EQ(c.lr, 0.02);
    EXPECT_EQ(c.alpha, 0.45);
}

TEST(Config, RejectsUnknownFieldsAndWrongTypes)
{
    EXPECT_THROW((void)config_from_json(nlohmann::json::parse(R"({"epoch": 3})")), ConfigError);
    EXPECT_THROW((void)config_from_json(nlohmann::json::parse(R"({"toggles": {"use_dlm": true}})")), ConfigError);
    EXPECT_THROW((void)config_from_json(nlohmann::json::parse(R"({"lr": "fast"})")), ConfigError);
    EXPECT_THROW((void)config_from_json(nlohmann::json::parse(R"({"schema_version": 2})")), ConfigError);
    EXPECT_THROW((void)config_from_json(nlohmann::json::parse("[1, 2]")), ConfigError);
    EXPECT_THROW((void)load_config("/nonexistent/config.json"), ConfigError);
}

TEST(Config, NamesEveryInvalidField)
{
    try {
        (void)config_from_json(nlohmann::json::parse(R"({"lr": -1, "epochs": 0, "domains": ["snow"]})"));
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("lr"), std::string::npos);
        EXPECT_NE(msg.find("epochs"), std::string::npos);
        EXPECT_NE(msg.find("snow"), std::string::npos);
    }
    ExperimentConfig c;
    c.lambda1_start = 0.95;
    EXPECT_FALSE(validation_errors(c).empty());
    c = {};
    c.k_max = 65;
    EXPECT_FALSE(validation_errors(c).empty());
    EXPECT_TRUE(validation_errors(ExperimentConfig{}).empty());
}

TEST(Checkpoint, SerializationIsByteStable)
{
    const RunResult r = run_train(tiny_config(), {.out_dir = {}, .resume = {}, .evaluate = false, .on_step = {}});
    const std::string a = serialize_checkpoint(r.checkpoint);
    const Checkpoint back = deserialize_checkpoint(a);
    EXPECT_EQ(back, r.checkpoint);
    EXPECT_EQ(serialize_checkpoint(back), a);
    EXPECT_EQ(back.global_step, 6);
    EXPECT_EQ(back.epochs_done, 2);
}

TEST(Checkpoint, ExactForAwkwardValues)
{
    Checkpoint ck;
    ck.params = toy::init_params({}, 1);
    ck.params[toy::kObjB].values[0] = 0.1 + 0.2;
    ck.params[toy::kBoxB].values[1] = -4.9406564584124654e-324;
    ck.params[toy::kBoxB].values[2] = 1.7976931348623157e308;
    const Checkpoint back = deserialize_checkpoint(serialize_checkpoint(ck));
    EXPECT_EQ(back.params, ck.params);
}

TEST(Checkpoint, RejectsCorruptInput)
{
    EXPECT_THROW((void)deserialize_checkpoint("{not json"), Error);
    EXPECT_THROW((void)load_checkpoint("/nonexistent/checkpoint.json"), Error);
}

TEST(Train, DeterministicArtifacts)
{
    const fs::path a = scratch("det_a"), b = scratch("det_b");
    (void)run_train(tiny_config(), {.out_dir = a.string(), .resume = {}, .evaluate = true, .on_step = {}});
    (void)run_train(tiny_config(), {.out_dir = b.string(), .resume = {}, .evaluate = true, .on_step = {}});
    for (const char* f : {"losses.csv", "metrics.json", "checkpoint.json", "config.json"}) {
        EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
    }
    const std::string losses = slurp(a / "losses.csv");
    EXPECT_EQ(losses.substr(0, losses.find('\n')), kLossesHeader);
    EXPECT_EQ(line_count(losses), 1u + 6u);
    EXPECT_EQ(load_config((a / "config.json").string()), tiny_config());
}

TEST(Train, DifferentSeedsDiffer)
{
    ExperimentConfig c = tiny_config();
    const TrainOptions o{.out_dir = {}, .resume = {}, .evaluate = false, .on_step = {}};
    const RunResult a = run_train(c, o);
    c.seed = 1;
    const RunResult b = run_train(c, o);
    EXPECT_NE(a.params, b.params);
}

TEST(Train, MetricsCoverEveryDomain)
{
    const RunResult r = run_train(tiny_config());
    ASSERT_EQ(r.metrics.size(), 4u);
    for (const auto& m : r.metrics) {
        EXPECT_GE(m.map, 0.0);
        EXPECT_LE(m.map, 1.0);
        EXPECT_EQ(m.per_class.size(), 3u);
    }
    const auto j = metrics_json(r.metrics);
    EXPECT_TRUE(j["domains"].contains("night"));
}

TEST(Train, ZeroAlphaMatchesDetectionOnlyBaseline)
{
    ExperimentConfig full = tiny_config();
    full.alpha = 0.0;
    ExperimentConfig base = full;
    base.toggles.use_lc_lh = base.toggles.use_lfd = base.toggles.use_wam = false;
    const TrainOptions o{.out_dir = {}, .resume = {}, .evaluate = false, .on_step = {}};
    const RunResult a = run_train(full, o), b = run_train(base, o);
    ASSERT_EQ(a.steps.size(), b.steps.size());
    for (std::size_t i = 0; i < a.steps.size(); ++i) {
        EXPECT_EQ(a.steps[i].loss.l_det, b.steps[i].loss.l_det) << "step " << i;
        EXPECT_GT(a.steps[i].loss.l_wam + a.steps[i].loss.l_dlm, 0.0);
    }
}

TEST(Train, LearningRateDecaysPerEpoch)
{
    const RunResult r = run_train(tiny_config(), {.out_dir = {}, .resume = {}, .evaluate = false, .on_step = {}});
    EXPECT_DOUBLE_EQ(r.steps.front().lr, 0.02);
    EXPECT_DOUBLE_EQ(r.steps.back().lr, 0.002);
    EXPECT_LE(r.steps.front().lambda1, r.steps.back().lambda1);
}

TEST(Train, ResumeReproducesUninterruptedRun)
{
    ExperimentConfig c = tiny_config();
    c.epochs = 3;
    const fs::path full = scratch("resume_full"), part = scratch("resume_part");
    const RunResult ref = run_train(c, {.out_dir = full.string(), .resume = {}, .evaluate = true, .on_step = {}});

    // Interrupt during the second epoch; the last checkpoint on disk is after epoch 1.
    struct Interrupted {};
    EXPECT_THROW((void)run_train(c, {.out_dir = part.string(), .resume = {}, .evaluate = true,
                                     .on_step = [](const StepRecord& r) {
                                         if (r.step == 4) throw Interrupted{};
                                     }}),
                 Interrupted);
    const Checkpoint ck = load_checkpoint((part / "checkpoint.json").string());
    ASSERT_EQ(ck.epochs_done, 1);
    ASSERT_EQ(ck.global_step, 3);
    const RunResult resumed = run_train(c, {.out_dir = part.string(), .resume = ck, .evaluate = true, .on_step = {}});
    EXPECT_EQ(resumed.params, ref.params);
    for (const char* f : {"losses.csv", "metrics.json", "checkpoint.json"}) {
        EXPECT_EQ(slurp(part / f), slurp(full / f)) << f;
    }
}

TEST(Train, ResumeRejectsDifferentConfig)
{
    const RunResult r = run_train(tiny_config(), {.out_dir = {}, .resume = {}, .evaluate = false, .on_step = {}});
    ExperimentConfig other = tiny_config();
    other.tau = 0.2;
    EXPECT_THROW((void)run_train(other, {.out_dir = {}, .resume = r.checkpoint, .evaluate = false, .on_step = {}}),
                 ConfigError);
}

TEST(Train, DivergenceAbortsWithStepIndex)
{
    ExperimentConfig c = tiny_config();
    c.lr = 1e300;
    try {
        (void)run_train(c, {.out_dir = {}, .resume = {}, .evaluate = false, .on_step = {}});
        FAIL() << "expected NumericalError";
    } catch (const NumericalError& e) {
        EXPECT_NE(std::string(e.what()).find("step "), std::string::npos) << e.what();
    }
}

TEST(Train, InvalidConfigRejected)
{
    ExperimentConfig c = tiny_config();
    c.batch_size = 0;
    EXPECT_THROW((void)run_train(c), ConfigError);
}

TEST(Ablation, SixRowsAndBaselineMatchesPlainRun)
{
    const fs::path out = scratch("ablate");
    ExperimentConfig c = tiny_config();
    c.epochs = 1;
    c.domains = {"clear", "night"};
    const AblationResult r = run_ablation(c, {1, 2, 3}, out.string(), 2);
    EXPECT_EQ(r.runs.size(), 18u);
    const std::string table = slurp(out / "ablation.csv");
    EXPECT_EQ(line_count(table), 7u);
    std::istringstream lines(table);
    std::string line;
    std::set<std::string> rows;
    std::getline(lines, line);
    EXPECT_EQ(line, "row,clear,night");
    while (std::getline(lines, line)) {
        EXPECT_EQ(std::count(line.begin(), line.end(), ','), 2) << line;
        rows.insert(line.substr(0, line.find(',')));
    }
    EXPECT_EQ(rows, (std::set<std::string>{"baseline", "+LC+LH", "+LFD", "+LC+LH+LFD", "+LWAM", "full"}));

    ExperimentConfig base = c;
    base.seed = 2;
    base.toggles = ablation_rows()[0].toggles;
    const RunResult plain = run_train(base);
    for (const auto& run : r.runs) {
        if (run.row == "baseline" && run.seed == 2) {
            EXPECT_EQ(run.metrics[1].map, plain.metrics[1].map);
        }
    }
    EXPECT_TRUE(fs::exists(out / "baseline" / "seed_2" / "losses.csv"));
    EXPECT_THROW((void)run_ablation(c, {1, 2}, {}, 1), ConfigError);
}

TEST(Ablation, StatsAreMeanAndSampleDeviation)
{
    AblationResult r;
    r.domains = {"clear", "night"};
    for (std::uint64_t s = 0; s < 3; ++s) {
        r.runs.push_back({"full", s, {{"clear", 0.5, {}}, {"night", 0.1 * static_cast<double>(s + 1), {}}}});
    }
    const auto [mean, sd] = r.stats("full", "night");
    EXPECT_NEAR(mean, 0.2, 1e-15);
    EXPECT_NEAR(sd, 0.1, 1e-15);
    EXPECT_NEAR(r.shifted_mean("full"), 0.2, 1e-15);
}

TEST(Diagnose, ReportShapeAndDeterminism)
{
    ExperimentConfig c = tiny_config();
    c.train_scenes = c.eval_scenes = 24;
    const RunResult tr = run_train(c, {.out_dir = {}, .resume = {}, .evaluate = false, .on_step = {}});
    const fs::path out = scratch("diagnose");
    const DiagnoseResult a = run_diagnose(tr.checkpoint, out.string());
    const DiagnoseResult b = run_diagnose(tr.checkpoint);
    const auto& rep = a.report;
    ASSERT_EQ(rep.targets.size(), 3u);
    EXPECT_EQ(rep.targets[0].name, "night");
    EXPECT_EQ(rep.targets[2].name, "rain");
    ASSERT_EQ(rep.names.size(), 6u);
    for (std::size_t i = 0; i < rep.names.size(); ++i) {
        EXPECT_EQ(rep.distances[i][i], 0.0);
        for (std::size_t j = 0; j < rep.names.size(); ++j) {
            EXPECT_EQ(rep.distances[i][j], rep.distances[j][i]);
        }
    }
    EXPECT_GE(rep.rho_hat, 0.0);
    for (const auto& t : rep.targets) {
        EXPECT_GE(t.gamma_hat, 0.0);
        EXPECT_NEAR(t.weights[0] + t.weights[1], 1.0, 1e-9);
    }
    EXPECT_EQ(diag::to_json(rep), diag::to_json(b.report));
    EXPECT_EQ(a.projection, b.projection);
    EXPECT_EQ(a.projection.rows, a.projection_tags.size());
    EXPECT_TRUE(fs::exists(out / "bound_report.json"));
    const std::string proj = slurp(out / "projections.csv");
    EXPECT_EQ(proj.substr(0, proj.find('\n')), "x,y,domain_tag");
    EXPECT_EQ(line_count(proj), 1 + a.projection.rows);
}

TEST(Diagnose, TooFewFeaturesNamed)
{
    const RunResult tr = run_train(tiny_config(), {.out_dir = {}, .resume = {}, .evaluate = false, .on_step = {}});
    Checkpoint ck = tr.checkpoint;
    ck.config.eval_scenes = 2;
    ck.config.objectness_threshold = 1.0;
    EXPECT_THROW((void)run_diagnose(ck), Error);
}

TEST(Diagnose, ShiftIsDetectable)
{
    ExperimentConfig c = tiny_config();
    c.train_scenes = c.eval_scenes = 60;
    c.diag_max_samples = 200;
    c.proxy_folds = 5;
    const RunResult tr = run_train(c, {.out_dir = {}, .resume = {}, .evaluate = false, .on_step = {}});
    const auto rep = run_diagnose(tr.checkpoint).report;
    // names: clear, augmented-clear, clear-heldout, night, fog, rain
    EXPECT_LT(rep.distances[0][2], rep.distances[0][3]);
}

TEST(GradcheckSuite, AllCasesPass)
{
    const auto cases = ad::run_gradcheck_suite();
    EXPECT_GE(cases.size(), 20u);
    std::set<std::string> names;
    for (const auto& c : cases) {
        EXPECT_TRUE(c.passed()) << c.name << " " << c.max_relative_error;
        names.insert(c.name);
    }
    EXPECT_EQ(names.size(), cases.size());
    EXPECT_TRUE(names.contains("end_to_end/train_step"));
}

TEST(GradcheckSuite, CorruptedRuleIsCaught)
{
    ad::GradSuiteOptions o;
    o.fault = std::pair{ad::OpKind::log, 1.5};
    bool log_failed = false;
    for (const auto& c : ad::run_gradcheck_suite(o)) {
        if (c.name == "op/log") log_failed = !c.passed();
    }
    EXPECT_TRUE(log_failed);
}

class Cli : public ::testing::Test {
protected:
    void SetUp() override
    {
        if (std::getenv("DIDM_CLI") == nullptr) {
            GTEST_SKIP() << "DIDM_CLI not set";
        }
        dir_ = scratch("cli");
    }

    fs::path write_config(const ExperimentConfig& c, const std::string& name) const
    {
        const fs::path p = dir_ / name;
        write_text(p, to_json(c).dump(2));
        return p;
    }

    fs::path dir_;
};

TEST_F(Cli, ExitCodes)
{
    ExperimentConfig small = tiny_config();
    small.train_scenes = small.eval_scenes = 24;
    const fs::path good = write_config(small, "good.json");
    const fs::path out = dir_ / "run";
    EXPECT_EQ(run_cli("train --config " + good.string() + " --seed 3 --out " + out.string()), 0);
    EXPECT_TRUE(fs::exists(out / "losses.csv"));
    EXPECT_TRUE(fs::exists(out / "metrics.json"));
    const std::string ck = (out / "checkpoint.json").string();
    EXPECT_EQ(run_cli("eval --checkpoint " + ck + " --domains clear,fog"), 0);
    EXPECT_EQ(run_cli("diagnose --checkpoint " + ck + " --out " + (dir_ / "diag").string()), 0);
    EXPECT_TRUE(fs::exists(dir_ / "diag" / "projections.csv"));

    write_text(dir_ / "bad.json", R"({"lr": -0.1})");
    EXPECT_EQ(run_cli("train --config " + (dir_ / "bad.json").string() + " --seed 1 --out " + out.string()), 1);
    EXPECT_EQ(run_cli("train --config " + (dir_ / "missing.json").string() + " --seed 1 --out " + out.string()), 1);
    EXPECT_EQ(run_cli("train --seed 1"), 1);
    EXPECT_EQ(run_cli("eval --checkpoint " + ck + " --domains snow"), 1);
    EXPECT_EQ(run_cli("ablate --config " + good.string() + " --seeds 1,2 --out " + (dir_ / "abl").string()), 1);

    ExperimentConfig diverge = tiny_config();
    diverge.lr = 1e300;
    const fs::path nan_cfg = write_config(diverge, "diverge.json");
    EXPECT_EQ(run_cli("train --config " + nan_cfg.string() + " --seed 1 --out " + (dir_ / "nan").string()), 2);

    EXPECT_EQ(run_cli("gradcheck"), 0);
    EXPECT_EQ(run_cli("gradcheck --fault-op softmax_rowwise --fault-factor 2"), 3);
}
