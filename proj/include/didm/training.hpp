#pragma once

// Training loop, evaluation, ablation grid and feature diagnostics for the
// toy benchmark.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "didm/autodiff.hpp"
#include "didm/checkpoint.hpp"
#include "didm/config.hpp"
#include "didm/detector.hpp"
#include "didm/diagnostics.hpp"
#include "didm/evaluation.hpp"
#include "didm/objective.hpp"
#include "didm/optimizer.hpp"
#include "didm/scene.hpp"
#include "json.hpp"

namespace didm::exp {

using ad::Var;
namespace fs = std::filesystem;

inline constexpr std::uint64_t kEvalSeedOffset = 1'000'000;

[[nodiscard]] inline toy::DetectorConfig detector_config(const ExperimentConfig& c)
{
    toy::DetectorConfig d;
    d.feature_dim = static_cast<std::size_t>(c.feature_dim);
    d.num_classes = static_cast<std::size_t>(c.num_classes);
    d.k_max = static_cast<std::size_t>(c.k_max);
    d.objectness_threshold = c.objectness_threshold;
    return d;
}

[[nodiscard]] inline toy::AugmentParams augment_params(const ExperimentConfig& c)
{
    toy::AugmentParams a;
    a.crop_scale_min = c.crop_scale_min;
    a.grayscale_p = c.grayscale_p;
    a.jitter = c.jitter;
    return a;
}

[[nodiscard]] inline toy::SceneOptions scene_options(const ExperimentConfig& c)
{
    toy::SceneOptions s;
    s.num_classes = static_cast<std::size_t>(c.num_classes);
    return s;
}

[[nodiscard]] inline std::uint64_t train_scene_seed(const ExperimentConfig& c, std::size_t i)
{
    return mix_seed(c.data_seed, i);
}

[[nodiscard]] inline std::uint64_t eval_scene_seed(const ExperimentConfig& c, std::size_t i)
{
    return mix_seed(c.data_seed, kEvalSeedOffset + i);
}

/// One training example: the cropped source view and its photometric
/// augmentation. Both share the crop, so proposals and targets line up.
struct TrainSample {
    toy::Image source;
    toy::Image augmented;
    std::vector<toy::Box> boxes;
    std::vector<int> labels;
};

[[nodiscard]] inline TrainSample make_train_sample(const toy::Scene& scene, std::uint64_t seed,
                                                   const toy::AugmentParams& aug)
{
    Rng rng(mix_seed(seed, 0xa06));
    TrainSample s;
    const toy::CropWindow crop = toy::sample_crop(aug, rng);
    s.source = toy::crop_resize(scene.image, crop);
    s.boxes = scene.gt_boxes;
    s.labels = scene.gt_labels;
    toy::crop_boxes(crop, s.boxes, s.labels);
    s.augmented = toy::photometric(s.source, aug, rng);
    return s;
}

/// Detector passes for one training image: both streams share the proposals
/// selected from the source stream.
struct ImageStreams {
    Var z_s;
    Var z_a;
    toy::DetectionOutput out_s;
    toy::DetectionOutput out_a;
    /// Matched class per proposal, -1 for background.
    std::vector<int> labels;
    Var l_det;
};

[[nodiscard]] inline ImageStreams image_streams(ad::Graph& g, const toy::BoundParams& p, const TrainSample& s,
                                                const ExperimentConfig& c)
{
    const toy::DetectorConfig dc = detector_config(c);
    const Var f_s = toy::extract_features(g, s.source, p);
    const Var f_a = toy::extract_features(g, s.augmented, p);
    const Var obj_s = toy::objectness(f_s, p);
    const Var obj_a = toy::objectness(f_a, p);
    const toy::Proposals props = toy::propose(obj_s, dc.k_max, dc.objectness_threshold);
    const std::vector<int> matches = toy::match_cells(props.cells, s.boxes);

    ImageStreams r;
    r.z_s = toy::roi_pool(f_s, props.cells);
    r.z_a = toy::roi_pool(f_a, props.cells);
    r.out_s = toy::detect_heads(r.z_s, p);
    r.out_a = toy::detect_heads(r.z_a, p);
    const auto det_s = toy::detection_loss(r.out_s, props.cells, matches, s.boxes, s.labels);
    const auto det_a = toy::detection_loss(r.out_a, props.cells, matches, s.boxes, s.labels);
    const Var stream_s = ad::add(toy::objectness_loss(obj_s, s.boxes), det_s.total);
    const Var stream_a = ad::add(toy::objectness_loss(obj_a, s.boxes), det_a.total);
    r.l_det = ad::scale(ad::add(stream_s, stream_a), 0.5);
    r.labels.assign(matches.size(), -1);
    for (std::size_t i = 0; i < matches.size(); ++i) {
        if (matches[i] >= 0) r.labels[i] = s.labels[static_cast<std::size_t>(matches[i])];
    }
    return r;
}

struct BatchObjective {
    Var total;
    /// Batch means of the per-image terms.
    objective::LossBreakdown parts;
};

/// Per-image L_total: DLM and WAM act on the proposals of one image, so the
/// contrastive terms never treat same-class objects of other images as negatives.
[[nodiscard]] inline BatchObjective image_objective(ad::Graph& g, const toy::BoundParams& p, const TrainSample& s,
                                                    const ExperimentConfig& c, double lambda1)
{
    const ImageStreams st = image_streams(g, p, s, c);
    BatchObjective r;
    r.parts.l_det = st.l_det.item();
    const auto& t = c.toggles;
    Var l_dlm = g.constant(Tensor::scalar(0.0));
    if (t.use_lc_lh || t.use_lfd) {
        objective::DlmHyper hyper;
        hyper.tau = c.tau;
        hyper.lambda2 = c.lambda2;
        hyper.num_classes = static_cast<std::size_t>(c.num_classes);
        hyper.split_gradients = t.split_gradients;
        const Var z_d = objective::extract_domain_specific(st.z_s, st.z_a, lambda1);
        const objective::LinearClassifier f{p[toy::kAuxW], p[toy::kAuxB]};
        const auto dlm = objective::loss_dlm(z_d, st.labels, f, hyper, t.use_lc_lh, t.use_lfd);
        l_dlm = dlm.total;
        r.parts.l_c = dlm.l_c.item();
        r.parts.l_h = dlm.l_h.item();
        r.parts.l_fd = dlm.l_fd.item();
    }
    r.parts.l_dlm = l_dlm.item();

    Var l_wam = g.constant(Tensor::scalar(0.0));
    if (t.use_wam) {
        const auto wam = objective::loss_wam(st.z_s, st.z_a, st.out_s.probs, st.out_a.probs, st.out_s.boxes,
                                             st.out_a.boxes, t.use_beta);
        l_wam = wam.total;
        r.parts.l_align = wam.alignment.item();
        r.parts.beta = wam.beta.beta;
    }
    r.parts.l_wam = l_wam.item();

    r.total = objective::total_objective(st.l_det, l_dlm, l_wam, c.alpha);
    r.parts.l_total = r.total.item();
    return r;
}

/// Mini-batch objective: the mean of the per-image objectives.
[[nodiscard]] inline BatchObjective batch_objective(ad::Graph& g, const toy::BoundParams& p,
                                                    std::span<const TrainSample> batch, const ExperimentConfig& c,
                                                    double lambda1)
{
    if (batch.empty()) {
        throw Error("batch_objective: empty batch");
    }
    if (batch.size() == 1) {
        return image_objective(g, p, batch[0], c, lambda1);
    }
    std::vector<Var> totals;
    BatchObjective r;
    auto& L = r.parts;
    for (const TrainSample& s : batch) {
        const BatchObjective io = image_objective(g, p, s, c, lambda1);
        totals.push_back(io.total);
        L.l_det += io.parts.l_det;
        L.l_c += io.parts.l_c;
        L.l_h += io.parts.l_h;
        L.l_fd += io.parts.l_fd;
        L.l_dlm += io.parts.l_dlm;
        L.l_align += io.parts.l_align;
        L.beta += io.parts.beta;
        L.l_wam += io.parts.l_wam;
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    for (double* v : {&L.l_det, &L.l_c, &L.l_h, &L.l_fd, &L.l_dlm, &L.l_align, &L.beta, &L.l_wam}) {
        *v *= inv;
    }
    r.total = ad::scale(ad::sum(ad::concat(totals, 0)), inv);
    L.l_total = r.total.item();
    return r;
}

struct StepRecord {
    std::int64_t step = 0;
    std::int64_t epoch = 0;
    double lr = 0.0;
    double lambda1 = 0.0;
    objective::LossBreakdown loss;
};

inline constexpr const char* kLossesHeader = "step,epoch,lr,lambda1,l_det,l_c,l_h,l_fd,l_dlm,l_align,beta,l_wam,l_total";

[[nodiscard]] inline std::string format_double(double v)
{
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

[[nodiscard]] inline std::string to_csv_row(const StepRecord& r)
{
    const auto& l = r.loss;
    std::string s = std::to_string(r.step) + "," + std::to_string(r.epoch);
    for (double v : {r.lr, r.lambda1, l.l_det, l.l_c, l.l_h, l.l_fd, l.l_dlm, l.l_align, l.beta, l.l_wam, l.l_total}) {
        s += "," + format_double(v);
    }
    return s;
}

struct DomainMetrics {
    std::string domain;
    double map = 0.0;
    std::vector<std::optional<double>> per_class;
};

[[nodiscard]] inline std::vector<toy::Scene> eval_scenes(const ExperimentConfig& c, toy::Domain d)
{
    std::vector<toy::Scene> out;
    out.reserve(static_cast<std::size_t>(c.eval_scenes));
    for (std::size_t i = 0; i < static_cast<std::size_t>(c.eval_scenes); ++i) {
        out.push_back(toy::generate_scene(d, eval_scene_seed(c, i), scene_options(c)));
    }
    return out;
}

[[nodiscard]] inline DomainMetrics evaluate_domain(const toy::DetectorParams& params, const ExperimentConfig& c,
                                                   toy::Domain d)
{
    const toy::DetectorConfig dc = detector_config(c);
    std::vector<std::vector<toy::Detection>> dets;
    std::vector<toy::GroundTruth> truth;
    for (const toy::Scene& s : eval_scenes(c, d)) {
        dets.push_back(toy::detect(s.image, params, dc));
        truth.push_back({s.gt_boxes, s.gt_labels});
    }
    const auto res = toy::evaluate_map(dets, truth, dc.num_classes);
    return {std::string(toy::to_string(d)), res.map, res.per_class};
}

[[nodiscard]] inline nlohmann::ordered_json metrics_json(const std::vector<DomainMetrics>& ms)
{
    nlohmann::ordered_json j;
    j["iou_threshold"] = 0.5;
    j["domains"] = nlohmann::ordered_json::object();
    for (const auto& m : ms) {
        nlohmann::ordered_json per = nlohmann::ordered_json::object();
        for (std::size_t c = 0; c < m.per_class.size(); ++c) {
            per[std::string(toy::kShapeNames[c % 3])] = m.per_class[c] ? nlohmann::ordered_json(*m.per_class[c])
                                                                       : nlohmann::ordered_json(nullptr);
        }
        j["domains"][m.domain] = {{"map", m.map}, {"per_class_ap", per}};
    }
    return j;
}

struct TrainOptions {
    /// Output directory; empty keeps everything in memory.
    std::string out_dir;
    std::optional<Checkpoint> resume;
    bool evaluate = true;
    std::function<void(const StepRecord&)> on_step;
};

struct RunResult {
    toy::DetectorParams params;
    std::vector<StepRecord> steps;
    std::vector<DomainMetrics> metrics;
    Checkpoint checkpoint;
};

inline void write_text(const fs::path& path, const std::string& text)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw Error("cannot write " + path.string());
    }
    out << text;
}

/// Trains on clear-domain scenes only, then evaluates every configured domain.
/// Deterministic in (config, seed); resuming from an epoch checkpoint yields
/// the same trajectory as an uninterrupted run.
[[nodiscard]] inline RunResult run_train(const ExperimentConfig& c, const TrainOptions& opts = {})
{
    validate(c);
    const std::size_t n_train = static_cast<std::size_t>(c.train_scenes);
    const std::size_t batch = static_cast<std::size_t>(c.batch_size);
    const std::size_t steps_per_epoch = (n_train + batch - 1) / batch;
    objective::Lambda1Schedule sched;
    sched.start_value = c.lambda1_start;
    sched.end_value = c.lambda1_end;
    sched.cap = c.lambda1_cap;
    sched.total_steps = c.epochs * static_cast<std::int64_t>(steps_per_epoch);

    const toy::AugmentParams aug = augment_params(c);
    std::vector<toy::Scene> train;
    train.reserve(n_train);
    for (std::size_t i = 0; i < n_train; ++i) {
        train.push_back(toy::generate_scene(toy::Domain::clear, train_scene_seed(c, i), scene_options(c)));
    }

    RunResult res;
    res.params = toy::init_params(detector_config(c), c.seed);
    ad::OptimizerState opt;
    opt.momentum = c.momentum;
    std::int64_t start_epoch = 0;
    std::int64_t global_step = 0;
    if (opts.resume) {
        if (config_hash(opts.resume->config) != config_hash(c)) {
            throw ConfigError("invalid config: resume checkpoint was written with a different config (hash mismatch)");
        }
        res.params = opts.resume->params;
        opt.velocity = opts.resume->velocity;
        start_epoch = opts.resume->epochs_done;
        global_step = opts.resume->global_step;
    }

    std::ofstream losses;
    if (!opts.out_dir.empty()) {
        fs::create_directories(opts.out_dir);
        write_text(fs::path(opts.out_dir) / "config.json", to_json(c).dump(2) + "\n");
        const fs::path lp = fs::path(opts.out_dir) / "losses.csv";
        std::vector<std::string> kept;
        if (opts.resume && fs::exists(lp)) {
            std::ifstream in(lp);
            std::string line;
            std::getline(in, line);
            for (std::int64_t i = 0; i < global_step && std::getline(in, line); ++i) kept.push_back(line);
        }
        losses.open(lp, std::ios::binary | std::ios::trunc);
        losses << kLossesHeader << "\n";
        for (const auto& l : kept) losses << l << "\n";
    }

    for (std::int64_t epoch = start_epoch; epoch < c.epochs; ++epoch) {
        opt.learning_rate = c.lr * std::pow(c.lr_decay_factor, static_cast<double>(epoch / c.lr_decay_every));
        std::vector<std::size_t> order(n_train);
        for (std::size_t i = 0; i < n_train; ++i) order[i] = i;
        Rng shuffle_rng(mix_seed(c.seed, 0x5u + static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(order);

        for (std::size_t b = 0; b < steps_per_epoch; ++b) {
            const std::size_t lo = b * batch, hi = std::min(n_train, lo + batch);
            const double lambda1 = objective::lambda1_at(global_step, sched);
            ad::Graph g;
            const toy::BoundParams p = toy::bind(g, res.params, true);
            StepRecord rec;
            rec.step = global_step;
            rec.epoch = epoch;
            rec.lr = opt.learning_rate;
            rec.lambda1 = lambda1;
            std::vector<TrainSample> samples;
            for (std::size_t k = lo; k < hi; ++k) {
                const std::uint64_t sample_seed =
                    mix_seed(c.seed, 0x100000000ULL + static_cast<std::uint64_t>(global_step) * batch + (k - lo));
                samples.push_back(make_train_sample(train[order[k]], sample_seed, aug));
            }
            const BatchObjective obj = batch_objective(g, p, samples, c, lambda1);
            const Var root = obj.total;
            rec.loss = obj.parts;
            const auto& L = rec.loss;
            if (!std::isfinite(L.l_total)) {
                throw NumericalError("non-finite loss at step " + std::to_string(global_step));
            }
            const ad::GradientMap grads = g.backward(root);
            ad::sgd_step(res.params.tensors, p.leaves, grads, opt);
            if (!res.params.all_finite()) {
                throw NumericalError("non-finite parameters after step " + std::to_string(global_step));
            }
            if (losses.is_open()) losses << to_csv_row(rec) << "\n";
            if (opts.on_step) opts.on_step(rec);
            res.steps.push_back(rec);
            ++global_step;
        }

        res.checkpoint = Checkpoint{c, res.params, opt.velocity, epoch + 1, global_step};
        if (!opts.out_dir.empty()) {
            losses.flush();
            save_checkpoint(res.checkpoint, (fs::path(opts.out_dir) / "checkpoint.json").string());
        }
    }
    if (opts.resume && res.checkpoint.epochs_done == 0) {
        res.checkpoint = *opts.resume;
    }

    if (opts.evaluate) {
        for (const auto& d : c.domains) {
            res.metrics.push_back(evaluate_domain(res.params, c, toy::domain_from_string(d)));
        }
        if (!opts.out_dir.empty()) {
            write_text(fs::path(opts.out_dir) / "metrics.json", metrics_json(res.metrics).dump(2) + "\n");
        }
    }
    return res;
}

struct AblationRow {
    std::string name;
    Toggles toggles;
};

/// The six toggle rows of the ablation grid.
[[nodiscard]] inline std::vector<AblationRow> ablation_rows(bool use_beta = true, bool split = true)
{
    const auto t = [&](bool lclh, bool fd, bool wam) { return Toggles{lclh, fd, wam, use_beta, split}; };
    return {
        {"baseline", t(false, false, false)},   {"+LC+LH", t(true, false, false)},
        {"+LFD", t(false, true, false)},        {"+LC+LH+LFD", t(true, true, false)},
        {"+LWAM", t(false, false, true)},       {"full", t(true, true, true)},
    };
}

struct AblationRun {
    std::string row;
    std::uint64_t seed = 0;
    std::vector<DomainMetrics> metrics;
};

struct AblationResult {
    std::vector<std::string> domains;
    std::vector<AblationRun> runs;

    /// Mean and sample standard deviation of one row's mAP on one domain.
    [[nodiscard]] std::pair<double, double> stats(const std::string& row, const std::string& domain) const
    {
        std::vector<double> v;
        for (const auto& r : runs) {
            if (r.row != row) continue;
            for (const auto& m : r.metrics) {
                if (m.domain == domain) v.push_back(m.map);
            }
        }
        if (v.empty()) return {0.0, 0.0};
        double mean = 0.0;
        for (double x : v) mean += x;
        mean /= static_cast<double>(v.size());
        double var = 0.0;
        for (double x : v) var += (x - mean) * (x - mean);
        const double sd = v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1)) : 0.0;
        return {mean, sd};
    }

    /// Mean over seeds of the per-run average mAP across the shifted (non-clear) domains.
    [[nodiscard]] double shifted_mean(const std::string& row) const
    {
        double total = 0.0;
        std::size_t n = 0;
        for (const auto& r : runs) {
            if (r.row != row) continue;
            double s = 0.0;
            std::size_t k = 0;
            for (const auto& m : r.metrics) {
                if (m.domain != "clear") {
                    s += m.map;
                    ++k;
                }
            }
            if (k > 0) {
                total += s / static_cast<double>(k);
                ++n;
            }
        }
        return n == 0 ? 0.0 : total / static_cast<double>(n);
    }
};

[[nodiscard]] inline std::string ablation_table_csv(const AblationResult& r)
{
    std::ostringstream os;
    os << "row";
    for (const auto& d : r.domains) os << "," << d;
    os << "\n";
    for (const auto& row : ablation_rows()) {
        os << row.name;
        for (const auto& d : r.domains) {
            const auto [m, sd] = r.stats(row.name, d);
            char buf[64];
            std::snprintf(buf, sizeof buf, "%.4f±%.4f", m, sd);
            os << "," << buf;
        }
        os << "\n";
    }
    return os.str();
}

/// Runs every ablation row for every seed. Runs are independent and may execute
/// on `jobs` threads; each writes to its own directory under out_dir.
[[nodiscard]] inline AblationResult run_ablation(const ExperimentConfig& base, const std::vector<std::uint64_t>& seeds,
                                                 const std::string& out_dir = {}, unsigned jobs = 1)
{
    if (seeds.size() < 3) {
        throw ConfigError("invalid config: ablation needs at least 3 seeds, got " + std::to_string(seeds.size()));
    }
    validate(base);
    AblationResult res;
    res.domains = base.domains;
    for (const auto& row : ablation_rows(base.toggles.use_beta, base.toggles.split_gradients)) {
        for (std::uint64_t s : seeds) {
            res.runs.push_back({row.name, s, {}});
        }
    }
    const auto rows = ablation_rows(base.toggles.use_beta, base.toggles.split_gradients);
    const auto work = [&](std::size_t i) {
        AblationRun& run = res.runs[i];
        ExperimentConfig c = base;
        c.seed = run.seed;
        for (const auto& r : rows) {
            if (r.name == run.row) c.toggles = r.toggles;
        }
        TrainOptions o;
        if (!out_dir.empty()) {
            std::string dir_name = run.row;
            std::replace(dir_name.begin(), dir_name.end(), '+', '_');
            o.out_dir = (fs::path(out_dir) / dir_name / ("seed_" + std::to_string(run.seed))).string();
        }
        run.metrics = run_train(c, o).metrics;
    };
    jobs = std::max(1u, jobs);
    std::size_t next = 0;
    std::mutex mu;
    std::exception_ptr failure;
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < jobs; ++t) {
        pool.emplace_back([&] {
            while (true) {
                std::size_t i;
                {
                    std::lock_guard lock(mu);
                    if (next >= res.runs.size() || failure) return;
                    i = next++;
                }
                try {
                    work(i);
                } catch (...) {
                    std::lock_guard lock(mu);
                    if (!failure) failure = std::current_exception();
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);

    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_text(fs::path(out_dir) / "ablation.csv", ablation_table_csv(res));
        std::ostringstream raw;
        raw << "row,seed";
        for (const auto& d : res.domains) raw << "," << d;
        raw << "\n";
        for (const auto& run : res.runs) {
            raw << run.row << "," << run.seed;
            for (const auto& m : run.metrics) raw << "," << format_double(m.map);
            raw << "\n";
        }
        write_text(fs::path(out_dir) / "ablation_runs.csv", raw.str());
    }
    return res;
}

/// Pooled proposal features of a set of images, capped at max_rows rows.
[[nodiscard]] inline diag::FeatureSet pooled_features(const std::string& name, const std::vector<toy::Image>& images,
                                                      const toy::DetectorParams& params, const ExperimentConfig& c,
                                                      std::size_t max_rows)
{
    const toy::DetectorConfig dc = detector_config(c);
    diag::FeatureSet fs_out;
    fs_out.name = name;
    fs_out.features.cols = dc.feature_dim;
    for (const toy::Image& img : images) {
        if (fs_out.features.rows >= max_rows) break;
        ad::Graph g;
        const toy::BoundParams p = toy::bind(g, params, false);
        const Var fmap = toy::extract_features(g, img, p);
        const auto props = toy::propose(toy::objectness(fmap, p), dc.k_max, dc.objectness_threshold);
        const Tensor& z = toy::roi_pool(fmap, props.cells).value();
        for (std::size_t r = 0; r < z.rows && fs_out.features.rows < max_rows; ++r) {
            fs_out.features.values.insert(fs_out.features.values.end(), z.values.begin() + static_cast<long>(r * z.cols),
                                          z.values.begin() + static_cast<long>((r + 1) * z.cols));
            ++fs_out.features.rows;
        }
    }
    return fs_out;
}

struct DiagnoseResult {
    diag::BoundReport report;
    std::vector<diag::FeatureSet> sets;
    Tensor projection;
    std::vector<std::string> projection_tags;
};

/// Feature-distribution diagnostics for a trained detector. Sources are the
/// clear training images and their augmentations; each shifted domain is a target.
[[nodiscard]] inline DiagnoseResult run_diagnose(const Checkpoint& ck, const std::string& out_dir = {})
{
    const ExperimentConfig& c = ck.config;
    const std::size_t cap = static_cast<std::size_t>(c.diag_max_samples);
    const std::size_t n_img = static_cast<std::size_t>(std::min(c.train_scenes, c.eval_scenes));
    const toy::AugmentParams aug = augment_params(c);

    std::vector<toy::Image> clear, augmented, heldout;
    for (std::size_t i = 0; i < n_img; ++i) {
        const toy::Scene s = toy::generate_scene(toy::Domain::clear, train_scene_seed(c, i), scene_options(c));
        const TrainSample t = make_train_sample(s, mix_seed(c.seed, 0xd1a9 + i), aug);
        clear.push_back(s.image);
        augmented.push_back(t.augmented);
    }
    for (const auto& s : eval_scenes(c, toy::Domain::clear)) heldout.push_back(s.image);

    DiagnoseResult res;
    res.sets.push_back(pooled_features("clear", clear, ck.params, c, cap));
    res.sets.push_back(pooled_features("augmented-clear", augmented, ck.params, c, cap));
    res.sets.push_back(pooled_features("clear-heldout", heldout, ck.params, c, cap));
    std::vector<std::string> targets;
    for (const auto& d : c.domains) {
        if (d == "clear") continue;
        std::vector<toy::Image> imgs;
        for (const auto& s : eval_scenes(c, toy::domain_from_string(d))) imgs.push_back(s.image);
        res.sets.push_back(pooled_features(d, imgs, ck.params, c, cap));
        targets.push_back(d);
    }

    for (const auto& s : res.sets) {
        if (s.size() < diag::kMinSamples) {
            throw Error("diagnose: feature set '" + s.name + "' has " + std::to_string(s.size()) + " rows, need " +
                        std::to_string(diag::kMinSamples) + " (more scenes or a lower objectness threshold)");
        }
    }

    diag::GridOptions go;
    go.grid_step = c.grid_step;
    go.proxy.folds = static_cast<std::size_t>(c.proxy_folds);
    go.proxy.seed = c.seed;
    go.mixture_seed = mix_seed(c.seed, 0x313);

    auto& rep = res.report;
    rep.grid_step = c.grid_step;
    const std::size_t m = res.sets.size();
    rep.distances.assign(m, std::vector<double>(m, 0.0));
    for (std::size_t i = 0; i < m; ++i) {
        rep.names.push_back(res.sets[i].name);
        for (std::size_t j = i + 1; j < m; ++j) {
            rep.distances[i][j] = rep.distances[j][i] = diag::proxy_a_distance(res.sets[i], res.sets[j], go.proxy);
        }
    }
    const std::vector<diag::FeatureSet> sources{res.sets[0], res.sets[1]};
    rep.source_names = {sources[0].name, sources[1].name};
    rep.rho_hat = diag::estimate_rho(sources, go);
    for (std::size_t k = 0; k < targets.size(); ++k) {
        const auto est = diag::estimate_gamma(sources, res.sets[3 + k], go);
        rep.targets.push_back({targets[k], est.gamma, est.weights});
    }

    Tensor all(0, c.feature_dim);
    for (const auto& s : res.sets) {
        all.values.insert(all.values.end(), s.features.values.begin(), s.features.values.end());
        all.rows += s.features.rows;
        for (std::size_t r = 0; r < s.features.rows; ++r) res.projection_tags.push_back(s.name);
    }
    res.projection = diag::project_2d(all, c.seed);

    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_text(fs::path(out_dir) / "bound_report.json", diag::to_json(rep).dump(2) + "\n");
        std::ostringstream csv;
        csv << "x,y,domain_tag\n";
        for (std::size_t r = 0; r < res.projection.rows; ++r) {
            csv << format_double(res.projection(r, 0)) << "," << format_double(res.projection(r, 1)) << ","
                << res.projection_tags[r] << "\n";
        }
        write_text(fs::path(out_dir) / "projections.csv", csv.str());
    }
    return res;
}

}  // namespace didm::exp
