#pragma once

// Grid detector: 8×8 patches → linear embed → two ReLU layers gives an 8×8
// feature map; a sigmoid objectness head picks foreground cells, which are
// pooled 1×1 and fed to class and box heads.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string_view>
#include <vector>

#include "didm/autodiff.hpp"
#include "didm/rng.hpp"
#include "didm/scene.hpp"

namespace didm::toy {

using ad::Var;

inline constexpr std::size_t kPatchDim = kCellSize * kCellSize * 3;

struct DetectorConfig {
    std::size_t feature_dim = 32;
    std::size_t num_classes = 3;
    std::size_t k_max = 16;
    double objectness_threshold = 0.5;
};

enum Param : std::size_t {
    kEmbedW,
    kEmbedB,
    kMlp1W,
    kMlp1B,
    kMlp2W,
    kMlp2B,
    kObjW,
    kObjB,
    kClsW,
    kClsB,
    kBoxW,
    kBoxB,
    kAuxW,
    kAuxB,
    kNumParams,
};

inline constexpr std::array<std::string_view, kNumParams> kParamNames{
    "embed.weight", "embed.bias", "mlp1.weight", "mlp1.bias", "mlp2.weight", "mlp2.bias", "objectness.weight",
    "objectness.bias", "class.weight", "class.bias", "box.weight", "box.bias", "aux.weight", "aux.bias",
};

/// Detector weights plus the auxiliary domain-specific classifier f.
struct DetectorParams {
    std::array<Tensor, kNumParams> tensors;

    Tensor& operator[](std::size_t i) { return tensors[i]; }
    const Tensor& operator[](std::size_t i) const { return tensors[i]; }

    bool operator==(const DetectorParams&) const = default;

    [[nodiscard]] bool all_finite() const
    {
        return std::all_of(tensors.begin(), tensors.end(), [](const Tensor& t) { return t.all_finite(); });
    }
};

[[nodiscard]] inline DetectorParams init_params(const DetectorConfig& cfg, std::uint64_t seed)
{
    Rng rng(mix_seed(seed, 0x1417));
    const std::size_t d = cfg.feature_dim;
    const auto he = [&](std::size_t in, std::size_t out, double gain) {
        Tensor t(in, out);
        const double sd = gain * std::sqrt(2.0 / static_cast<double>(in));
        for (double& v : t.values) {
            v = rng.normal(0.0, sd);
        }
        return t;
    };
    DetectorParams p;
    p[kEmbedW] = he(kPatchDim, d, 1.0);
    p[kEmbedB] = Tensor(1, d, 0.01);
    p[kMlp1W] = he(d, d, 1.0);
    p[kMlp1B] = Tensor(1, d, 0.01);
    p[kMlp2W] = he(d, d, 1.0);
    p[kMlp2B] = Tensor(1, d, 0.01);
    p[kObjW] = he(d, 1, 0.1);
    p[kObjB] = Tensor(1, 1, 0.0);
    p[kClsW] = he(d, cfg.num_classes + 1, 0.1);
    p[kClsB] = Tensor(1, cfg.num_classes + 1, 0.0);
    p[kBoxW] = he(d, 4, 0.1);
    p[kBoxB] = Tensor(1, 4, 0.0);
    p[kAuxW] = he(d, cfg.num_classes, 0.1);
    p[kAuxB] = Tensor(1, cfg.num_classes, 0.0);
    return p;
}

/// Parameters bound into one graph as leaves.
struct BoundParams {
    std::array<Var, kNumParams> leaves;

    const Var& operator[](std::size_t i) const { return leaves[i]; }
};

[[nodiscard]] inline BoundParams bind(ad::Graph& g, const DetectorParams& p, bool requires_grad)
{
    BoundParams b;
    for (std::size_t i = 0; i < kNumParams; ++i) {
        b.leaves[i] = g.leaf(p[i], requires_grad);
    }
    return b;
}

/// 64 rows (cells, row-major) × 192 (8×8 patch, channel-interleaved).
[[nodiscard]] inline Tensor image_to_patches(const Image& img)
{
    if (img.height != kImageSize || img.width != kImageSize || img.data.size() != kImageSize * kImageSize * 3) {
        throw ShapeError("extract_features: expected a 64×64×3 image, got " + std::to_string(img.height) + "×" +
                         std::to_string(img.width));
    }
    Tensor t(kNumCells, kPatchDim);
    for (std::size_t gy = 0; gy < kGridSize; ++gy) {
        for (std::size_t gx = 0; gx < kGridSize; ++gx) {
            double* row = t.values.data() + (gy * kGridSize + gx) * kPatchDim;
            for (std::size_t py = 0; py < kCellSize; ++py) {
                const double* src = img.data.data() + ((gy * kCellSize + py) * kImageSize + gx * kCellSize) * 3;
                std::copy(src, src + kCellSize * 3, row + py * kCellSize * 3);
            }
        }
    }
    return t;
}

/// Feature map as a 64×d matrix, one row per grid cell.
[[nodiscard]] inline Var extract_features(ad::Graph& g, const Image& img, const BoundParams& p)
{
    const Var x = g.constant(image_to_patches(img));
    const Var h0 = ad::relu(ad::add_bias(ad::matmul(x, p[kEmbedW]), p[kEmbedB]));
    const Var h1 = ad::relu(ad::add_bias(ad::matmul(h0, p[kMlp1W]), p[kMlp1B]));
    return ad::relu(ad::add_bias(ad::matmul(h1, p[kMlp2W]), p[kMlp2B]));
}

[[nodiscard]] inline Var objectness(const Var& feature_map, const BoundParams& p)
{
    return ad::sigmoid(ad::add_bias(ad::matmul(feature_map, p[kObjW]), p[kObjB]));
}

struct Proposals {
    std::vector<std::size_t> cells;
    std::vector<double> scores;
};

/// Cells with score ≥ threshold, highest first, at most k_max; the single best
/// cell when none pass. Ties break toward the lower cell index.
[[nodiscard]] inline Proposals select_proposals(std::span<const double> scores, std::size_t k_max, double threshold)
{
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    Proposals out;
    for (std::size_t idx : order) {
        if (out.cells.size() >= k_max || scores[idx] < threshold) {
            break;
        }
        out.cells.push_back(idx);
        out.scores.push_back(scores[idx]);
    }
    if (out.cells.empty() && !order.empty()) {
        out.cells.push_back(order.front());
        out.scores.push_back(scores[order.front()]);
    }
    return out;
}

/// Proposal choice reads the objectness through a detach node: it is a
/// discrete decision, held fixed under gradient probing.
[[nodiscard]] inline Proposals propose(const Var& objectness_scores, std::size_t k_max, double threshold)
{
    const Tensor& s = ad::detach(objectness_scores).value();
    return select_proposals(s.values, k_max, threshold);
}

/// 1×1 RoI pooling: the cell's feature row per proposal.
[[nodiscard]] inline Var roi_pool(const Var& feature_map, std::span<const std::size_t> cells)
{
    for (std::size_t c : cells) {
        if (c >= feature_map.rows()) {
            throw Error("roi_pool: cell " + std::to_string(c) + " outside the " +
                        std::to_string(feature_map.rows()) + "-cell grid");
        }
    }
    return ad::gather_rows(feature_map, std::vector<std::size_t>(cells.begin(), cells.end()));
}

struct DetectionOutput {
    Var probs;  // K×(C+1), last column is background
    Var boxes;  // K×4 offsets (Δcx, Δcy, log w, log h) in cell units
};

[[nodiscard]] inline DetectionOutput detect_heads(const Var& z, const BoundParams& p)
{
    DetectionOutput out;
    out.probs = ad::softmax_rows(ad::add_bias(ad::matmul(z, p[kClsW]), p[kClsB]));
    out.boxes = ad::add_bias(ad::matmul(z, p[kBoxW]), p[kBoxB]);
    return out;
}

[[nodiscard]] inline std::array<double, 4> encode_box(const Box& b, std::size_t cell)
{
    const double cs = static_cast<double>(kCellSize);
    const double col = static_cast<double>(cell % kGridSize), row = static_cast<double>(cell / kGridSize);
    return {b.cx() / cs - (col + 0.5), b.cy() / cs - (row + 0.5), std::log(b.width() / cs), std::log(b.height() / cs)};
}

[[nodiscard]] inline Box decode_box(std::span<const double> off, std::size_t cell)
{
    const double cs = static_cast<double>(kCellSize);
    const double col = static_cast<double>(cell % kGridSize), row = static_cast<double>(cell / kGridSize);
    const double cx = (col + 0.5 + off[0]) * cs, cy = (row + 0.5 + off[1]) * cs;
    const double w = std::exp(std::clamp(off[2], -4.0, 4.0)) * cs, h = std::exp(std::clamp(off[3], -4.0, 4.0)) * cs;
    return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

/// Ground-truth index whose center lies in each cell, or -1. When several
/// centers share a cell the largest box wins, then the lowest index.
[[nodiscard]] inline std::vector<int> match_cells(std::span<const std::size_t> cells, std::span<const Box> gt)
{
    std::vector<int> owner(kNumCells, -1);
    for (std::size_t i = 0; i < gt.size(); ++i) {
        const int c = cell_of(gt[i].cx(), gt[i].cy());
        if (c < 0) {
            continue;
        }
        int& o = owner[static_cast<std::size_t>(c)];
        if (o < 0 || gt[i].area() > gt[static_cast<std::size_t>(o)].area()) {
            o = static_cast<int>(i);
        }
    }
    std::vector<int> out;
    out.reserve(cells.size());
    for (std::size_t c : cells) {
        out.push_back(c < kNumCells ? owner[c] : -1);
    }
    return out;
}

struct DetectionLoss {
    Var l_cls;
    Var l_reg;
    Var total;
};

/// L_cls: mean cross-entropy over all proposals, unmatched ones as background.
/// L_reg: mean squared L2 box-offset error over matched proposals (0 if none).
[[nodiscard]] inline DetectionLoss detection_loss(const DetectionOutput& out, std::span<const std::size_t> cells,
                                                  std::span<const int> matches, std::span<const Box> gt_boxes,
                                                  std::span<const int> gt_labels)
{
    ad::Graph& g = out.probs.graph();
    const std::size_t k = cells.size();
    const std::size_t width = out.probs.cols();
    const std::size_t background = width - 1;
    Tensor onehot(k, width);
    std::vector<std::size_t> fg_rows;
    std::vector<double> targets;
    for (std::size_t i = 0; i < k; ++i) {
        if (matches[i] >= 0) {
            const auto gi = static_cast<std::size_t>(matches[i]);
            onehot(i, static_cast<std::size_t>(gt_labels[gi])) = 1.0;
            fg_rows.push_back(i);
            const auto t = encode_box(gt_boxes[gi], cells[i]);
            targets.insert(targets.end(), t.begin(), t.end());
        } else {
            onehot(i, background) = 1.0;
        }
    }
    DetectionLoss l;
    l.l_cls = ad::scale(ad::sum(ad::mul(ad::log(out.probs), g.constant(std::move(onehot)))),
                        -1.0 / static_cast<double>(std::max<std::size_t>(k, 1)));
    if (fg_rows.empty()) {
        l.l_reg = g.constant(Tensor::scalar(0.0));
    } else {
        const std::size_t n = fg_rows.size();
        const Var pred = ad::gather_rows(out.boxes, std::move(fg_rows));
        const Var diff = ad::sub(pred, g.constant(Tensor(n, 4, std::move(targets))));
        l.l_reg = ad::mean(ad::squared_l2(diff));
    }
    l.total = ad::add(l.l_cls, l.l_reg);
    return l;
}

/// Binary cross-entropy of every cell's objectness against "contains a GT center".
[[nodiscard]] inline Var objectness_loss(const Var& scores, std::span<const Box> gt_boxes)
{
    ad::Graph& g = scores.graph();
    Tensor target(scores.rows(), 1);
    for (const Box& b : gt_boxes) {
        const int c = cell_of(b.cx(), b.cy());
        if (c >= 0) {
            target(static_cast<std::size_t>(c), 0) = 1.0;
        }
    }
    Tensor inv_target(scores.rows(), 1);
    for (std::size_t i = 0; i < target.size(); ++i) {
        inv_target.values[i] = 1.0 - target.values[i];
    }
    const Var pos = ad::mul(ad::log(scores), g.constant(std::move(target)));
    const Var neg_scores = ad::sub(g.constant(Tensor(scores.rows(), 1, 1.0)), scores);
    const Var neg = ad::mul(ad::log(neg_scores), g.constant(std::move(inv_target)));
    return ad::scale(ad::sum(ad::add(pos, neg)), -1.0 / static_cast<double>(scores.rows()));
}

struct Detection {
    Box box;
    int label = 0;
    double confidence = 0.0;
};

/// Inference on one image: proposals from the objectness head, one candidate
/// per foreground class per proposal with confidence = class probability.
[[nodiscard]] inline std::vector<Detection> detect(const Image& img, const DetectorParams& params,
                                                   const DetectorConfig& cfg)
{
    ad::Graph g;
    const BoundParams p = bind(g, params, false);
    const Var fmap = extract_features(g, img, p);
    const Proposals props = propose(objectness(fmap, p), cfg.k_max, cfg.objectness_threshold);
    const DetectionOutput out = detect_heads(roi_pool(fmap, props.cells), p);
    std::vector<Detection> dets;
    const Tensor& probs = out.probs.value();
    const Tensor& boxes = out.boxes.value();
    for (std::size_t i = 0; i < props.cells.size(); ++i) {
        const Box b = decode_box(std::span<const double>(boxes.values.data() + i * 4, 4), props.cells[i]);
        for (std::size_t c = 0; c + 1 < probs.cols; ++c) {
            dets.push_back({b, static_cast<int>(c), probs(i, c)});
        }
    }
    return dets;
}

}  // namespace didm::toy
