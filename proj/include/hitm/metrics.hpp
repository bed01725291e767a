#pragma once

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <ostream>
#include <stdexcept>
#include <vector>

#include "hitm/boxes.hpp"
#include "hitm/detector.hpp"
#include "hitm/nms.hpp"

// Attack-strength metrics. All three compare model outputs with model
// outputs, never with the ground truth, so they isolate what a perturbation
// changed from how good the model was to begin with. The same functions serve
// two comparisons: consecutive attack iterates, or clean vs attacked; callers
// label which pair they pass.

namespace hitm::metrics {

/// Mean change of the raw confidence logit across all N candidates.
inline double mean_confidence_variation(const det::RawDetections& now,
                                        const det::RawDetections& prev) {
    if (now.count() != prev.count() ||
        now.anchors_per_cell != prev.anchors_per_cell)
        throw std::invalid_argument("mean_confidence_variation: candidate count mismatch");
    const int N = now.count();
    double sum = 0.0;
    for (int i = 0; i < N; ++i) sum += now.logit(i, 4) - prev.logit(i, 4);
    return sum / N;
}

/// Number of boxes surviving confidence filtering and NMS.
inline int number_of_boxes(const det::RawDetections& raw, const NmsConfig& cfg) {
    return static_cast<int>(nms(raw, cfg).size());
}

/// Fraction of current boxes that are consistent with the previous output:
/// with A = NMS(now), B = NMS(prev) and J = NMS over the concatenated
/// candidate sets, returns (|A| + |B| - |J|) / |A|, clamped to [0,1] and
/// defined as 0 when |A| is empty.
inline double relative_box_variation(const det::RawDetections& now,
                                     const det::RawDetections& prev,
                                     const NmsConfig& cfg) {
    if (now.count() != prev.count())
        throw std::invalid_argument("relative_box_variation: candidate count mismatch");
    const auto a = nms(now, cfg);
    if (a.empty()) return 0.0;
    const auto b = nms(prev, cfg);

    std::vector<Detection> joint = candidates(now);
    const int offset = now.count();
    for (Detection d : candidates(prev)) {
        d.candidate_index += offset;  // keep tie-break indices unique
        joint.push_back(d);
    }
    const auto j = nms(joint, cfg);
    const double value =
        static_cast<double>(a.size() + b.size()) - static_cast<double>(j.size());
    return std::clamp(value / static_cast<double>(a.size()), 0.0, 1.0);
}

/// One per-iteration record of an attack run. num_boxes is a double because
/// image-agnostic runs record per-epoch means over the sample images.
struct MetricRecord {
    int iteration = 0;
    double mean_conf_variation = 0.0;
    double num_boxes = 0.0;
    double relative_box_variation = 0.0;
    double adv_loss = 0.0;
};

struct MetricSeries {
    std::vector<MetricRecord> records;

    void write_csv(std::ostream& out) const {
        out << "iteration,mean_conf_variation,num_boxes,relative_box_variation,"
               "adv_loss\n";
        out << std::setprecision(17);
        for (const MetricRecord& r : records) {
            out << r.iteration << ',' << r.mean_conf_variation << ','
                << r.num_boxes << ',' << r.relative_box_variation << ','
                << r.adv_loss << '\n';
        }
    }
};

struct ApReport {
    std::map<int, double> per_class;  // only classes with >= 1 truth instance
    double map = 0.0;
};

/// VOC-style average precision at a single IoU threshold: detections are
/// ranked by confidence, matched greedily to the not-yet-matched truth box
/// with the highest IoU >= threshold, and the precision/recall curve is
/// integrated with all-points interpolation. mAP is the unweighted mean over
/// classes that have at least one truth instance.
inline ApReport average_precision(
    const std::vector<std::vector<Detection>>& detections_per_image,
    const std::vector<GroundTruth>& truths_per_image, double iou_threshold = 0.5) {
    if (detections_per_image.size() != truths_per_image.size())
        throw std::invalid_argument("average_precision: image count mismatch");

    std::map<int, int> truth_count;
    for (const GroundTruth& gt : truths_per_image)
        for (const TruthBox& tb : gt) ++truth_count[tb.cls];

    ApReport report;
    for (const auto& [cls, total_truths] : truth_count) {
        struct Ranked {
            int image;
            const Detection* det;
        };
        std::vector<Ranked> ranked;
        for (std::size_t img = 0; img < detections_per_image.size(); ++img)
            for (const Detection& d : detections_per_image[img])
                if (d.cls == cls) ranked.push_back({static_cast<int>(img), &d});
        std::stable_sort(ranked.begin(), ranked.end(),
                         [](const Ranked& a, const Ranked& b) {
                             if (a.det->confidence != b.det->confidence)
                                 return a.det->confidence > b.det->confidence;
                             if (a.image != b.image) return a.image < b.image;
                             return a.det->candidate_index < b.det->candidate_index;
                         });

        std::vector<std::vector<char>> matched(truths_per_image.size());
        for (std::size_t img = 0; img < truths_per_image.size(); ++img)
            matched[img].assign(truths_per_image[img].size(), 0);

        std::vector<char> is_tp(ranked.size(), 0);
        for (std::size_t r = 0; r < ranked.size(); ++r) {
            const GroundTruth& gt = truths_per_image[ranked[r].image];
            int best_t = -1;
            double best_iou = iou_threshold;
            for (std::size_t t = 0; t < gt.size(); ++t) {
                if (gt[t].cls != cls || matched[ranked[r].image][t]) continue;
                const double v = iou(ranked[r].det->box, gt[t].box);
                if (v >= best_iou) {
                    best_iou = v;
                    best_t = static_cast<int>(t);
                }
            }
            if (best_t >= 0) {
                is_tp[r] = 1;
                matched[ranked[r].image][best_t] = 1;
            }
        }

        // All-points interpolation: sum recall steps times the running
        // maximum of precision from the tail.
        std::vector<double> precision(ranked.size()), recall(ranked.size());
        int tp = 0;
        for (std::size_t r = 0; r < ranked.size(); ++r) {
            if (is_tp[r]) ++tp;
            precision[r] = static_cast<double>(tp) / static_cast<double>(r + 1);
            recall[r] = static_cast<double>(tp) / total_truths;
        }
        double ap = 0.0, pmax = 0.0;
        for (std::size_t r = ranked.size(); r-- > 0;) {
            pmax = std::max(pmax, precision[r]);
            const double prev = r == 0 ? 0.0 : recall[r - 1];
            ap += (recall[r] - prev) * pmax;
        }
        report.per_class[cls] = ap;
    }

    double sum = 0.0;
    for (const auto& [cls, ap] : report.per_class) sum += ap;
    report.map = report.per_class.empty()
                     ? 0.0
                     : sum / static_cast<double>(report.per_class.size());
    return report;
}

/// Splits the detection error of an attacked output into the part caused by
/// the attack (output-vs-output metrics) and the part the model had anyway
/// (AP of the clean output against the truth).
struct ErrorDecomposition {
    double attack_mean_conf_variation = 0.0;
    double attack_relative_box_variation = 0.0;
    int num_boxes_clean = 0;
    int num_boxes_adv = 0;
    ApReport model_ap;  // clean output vs ground truth
};

inline ErrorDecomposition error_decomposition(const det::RawDetections& raw_clean,
                                              const det::RawDetections& raw_adv,
                                              const GroundTruth& truth,
                                              const NmsConfig& cfg) {
    ErrorDecomposition e;
    e.attack_mean_conf_variation = mean_confidence_variation(raw_adv, raw_clean);
    e.attack_relative_box_variation = relative_box_variation(raw_adv, raw_clean, cfg);
    e.num_boxes_clean = number_of_boxes(raw_clean, cfg);
    e.num_boxes_adv = number_of_boxes(raw_adv, cfg);
    e.model_ap = average_precision({nms(raw_clean, cfg)}, {truth});
    return e;
}

}  // namespace hitm::metrics
