#pragma once

// VOC-style mAP@IoU with all-point interpolated average precision.

#include <algorithm>
#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "didm/detector.hpp"
#include "didm/scene.hpp"

namespace didm::toy {

namespace detail {

// Higher confidence first; equal confidence breaks by box coordinates, then label.
inline bool ranks_before(const Detection& a, const Detection& b)
{
    if (a.confidence != b.confidence) {
        return a.confidence > b.confidence;
    }
    if (a.box != b.box) {
        return a.box < b.box;
    }
    return a.label < b.label;
}

}  // namespace detail

/// Greedy per-class non-maximum suppression within one image.
[[nodiscard]] inline std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold = 0.5)
{
    std::stable_sort(dets.begin(), dets.end(), detail::ranks_before);
    std::vector<Detection> kept;
    for (const Detection& d : dets) {
        const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
            return k.label == d.label && iou(k.box, d.box) > iou_threshold;
        });
        if (!suppressed) {
            kept.push_back(d);
        }
    }
    return kept;
}

struct GroundTruth {
    std::vector<Box> boxes;
    std::vector<int> labels;
};

struct MapResult {
    double map = 0.0;
    /// Per-class AP; empty for classes without ground truth (excluded from the mean).
    std::vector<std::optional<double>> per_class;
};

/// All-point interpolated AP from a ranked TP/FP sequence.
[[nodiscard]] inline double average_precision(const std::vector<bool>& tp_ranked, std::size_t num_gt)
{
    if (num_gt == 0) {
        return 0.0;
    }
    std::vector<double> recall, precision;
    std::size_t tp = 0, fp = 0;
    for (bool t : tp_ranked) {
        t ? ++tp : ++fp;
        recall.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
        precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    }
    std::vector<double> mrec{0.0}, mpre{0.0};
    mrec.insert(mrec.end(), recall.begin(), recall.end());
    mpre.insert(mpre.end(), precision.begin(), precision.end());
    mrec.push_back(1.0);
    mpre.push_back(0.0);
    for (std::size_t i = mpre.size() - 1; i > 0; --i) {
        mpre[i - 1] = std::max(mpre[i - 1], mpre[i]);
    }
    double ap = 0.0;
    for (std::size_t i = 1; i < mrec.size(); ++i) {
        if (mrec[i] != mrec[i - 1]) {
            ap += (mrec[i] - mrec[i - 1]) * mpre[i];
        }
    }
    return ap;
}

/// `detections[i]` and `truth[i]` belong to image i. NMS is applied per image first.
[[nodiscard]] inline MapResult evaluate_map(std::span<const std::vector<Detection>> detections,
                                            std::span<const GroundTruth> truth, std::size_t num_classes,
                                            double iou_threshold = 0.5)
{
    if (detections.size() != truth.size()) {
        throw Error("evaluate_map: " + std::to_string(detections.size()) + " detection lists for " +
                    std::to_string(truth.size()) + " images");
    }
    struct Ranked {
        Detection det;
        std::size_t image;
    };
    std::vector<std::vector<Ranked>> by_class(num_classes);
    std::vector<std::size_t> gt_count(num_classes, 0);
    for (std::size_t i = 0; i < truth.size(); ++i) {
        for (int l : truth[i].labels) {
            if (l >= 0 && static_cast<std::size_t>(l) < num_classes) {
                ++gt_count[static_cast<std::size_t>(l)];
            }
        }
        for (const Detection& d : nms(detections[i], iou_threshold)) {
            if (d.label >= 0 && static_cast<std::size_t>(d.label) < num_classes) {
                by_class[static_cast<std::size_t>(d.label)].push_back({d, i});
            }
        }
    }
    MapResult res;
    res.per_class.resize(num_classes);
    double sum = 0.0;
    std::size_t counted = 0;
    for (std::size_t c = 0; c < num_classes; ++c) {
        if (gt_count[c] == 0) {
            continue;
        }
        auto& ranked = by_class[c];
        std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
            if (a.det.confidence != b.det.confidence) {
                return a.det.confidence > b.det.confidence;
            }
            if (a.det.box != b.det.box) {
                return a.det.box < b.det.box;
            }
            return a.image < b.image;
        });
        std::vector<std::vector<bool>> used(truth.size());
        for (std::size_t i = 0; i < truth.size(); ++i) {
            used[i].assign(truth[i].boxes.size(), false);
        }
        std::vector<bool> tp;
        tp.reserve(ranked.size());
        for (const Ranked& r : ranked) {
            const GroundTruth& gt = truth[r.image];
            double best = 0.0;
            std::optional<std::size_t> best_j;
            for (std::size_t j = 0; j < gt.boxes.size(); ++j) {
                if (gt.labels[j] != static_cast<int>(c)) {
                    continue;
                }
                const double o = iou(r.det.box, gt.boxes[j]);
                if (o > best) {
                    best = o;
                    best_j = j;
                }
            }
            if (best_j && best >= iou_threshold && !used[r.image][*best_j]) {
                used[r.image][*best_j] = true;
                tp.push_back(true);
            } else {
                tp.push_back(false);
            }
        }
        const double ap = average_precision(tp, gt_count[c]);
        res.per_class[c] = ap;
        sum += ap;
        ++counted;
    }
    res.map = counted == 0 ? 0.0 : sum / static_cast<double>(counted);
    return res;
}

}  // namespace didm::toy
