#pragma once

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "hitm/boxes.hpp"
#include "hitm/detector.hpp"

namespace hitm {

struct NmsConfig {
    double conf_threshold = 0.5;
    double iou_threshold = 0.45;
};

/// One post-NMS detection (also used as the pre-NMS candidate record).
/// candidate_index is the position in the original candidate list; ties on
/// confidence break toward the lower index so results are fully deterministic.
struct Detection {
    Box box;
    double confidence = 0.0;
    int cls = 0;
    double cls_prob = 0.0;
    int candidate_index = 0;
};

/// Flattens RawDetections into candidate records (class = argmax probability).
inline std::vector<Detection> candidates(const det::RawDetections& raw) {
    std::vector<Detection> out;
    const int N = raw.count(), K = raw.num_classes;
    out.reserve(N);
    for (int i = 0; i < N; ++i) {
        int best = 0;
        for (int k = 1; k < K; ++k)
            if (raw.prob(i, k) > raw.prob(i, best)) best = k;
        out.push_back(Detection{raw.boxes[i], raw.confidence[i], best,
                                raw.prob(i, best), i});
    }
    return out;
}

/// Greedy per-class non-maximum suppression over an explicit candidate list.
/// Candidates below conf_threshold are dropped; then the highest-confidence
/// remaining box is kept and same-class boxes with IoU > iou_threshold are
/// suppressed, repeatedly.
inline std::vector<Detection> nms(const std::vector<Detection>& cands,
                                  const NmsConfig& cfg) {
    if (cfg.conf_threshold < 0.0 || cfg.conf_threshold > 1.0 ||
        cfg.iou_threshold < 0.0 || cfg.iou_threshold > 1.0)
        throw std::invalid_argument("nms: thresholds must be in [0,1]");

    std::vector<int> keep_order;
    keep_order.reserve(cands.size());
    for (std::size_t i = 0; i < cands.size(); ++i)
        if (cands[i].confidence >= cfg.conf_threshold)
            keep_order.push_back(static_cast<int>(i));
    std::stable_sort(keep_order.begin(), keep_order.end(), [&](int a, int b) {
        if (cands[a].confidence != cands[b].confidence)
            return cands[a].confidence > cands[b].confidence;
        return cands[a].candidate_index < cands[b].candidate_index;
    });

    std::vector<Detection> out;
    std::vector<char> suppressed(keep_order.size(), 0);
    for (std::size_t i = 0; i < keep_order.size(); ++i) {
        if (suppressed[i]) continue;
        const Detection& kept = cands[keep_order[i]];
        out.push_back(kept);
        for (std::size_t j = i + 1; j < keep_order.size(); ++j) {
            if (suppressed[j]) continue;
            const Detection& other = cands[keep_order[j]];
            if (other.cls == kept.cls && iou(other.box, kept.box) > cfg.iou_threshold)
                suppressed[j] = 1;
        }
    }
    return out;
}

inline std::vector<Detection> nms(const det::RawDetections& raw,
                                  const NmsConfig& cfg) {
    return nms(candidates(raw), cfg);
}

/// Literal restatement of the greedy rule, used as the test oracle: filter,
/// then repeatedly scan the remaining pool for the best box and erase what it
/// suppresses. Kept independent of the production implementation above.
inline std::vector<Detection> nms_oracle(const std::vector<Detection>& cands,
                                         const NmsConfig& cfg) {
    if (cfg.conf_threshold < 0.0 || cfg.conf_threshold > 1.0 ||
        cfg.iou_threshold < 0.0 || cfg.iou_threshold > 1.0)
        throw std::invalid_argument("nms_oracle: thresholds must be in [0,1]");

    std::vector<Detection> pool;
    for (const Detection& d : cands)
        if (d.confidence >= cfg.conf_threshold) pool.push_back(d);

    std::vector<Detection> out;
    while (!pool.empty()) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < pool.size(); ++i) {
            if (pool[i].confidence > pool[best].confidence ||
                (pool[i].confidence == pool[best].confidence &&
                 pool[i].candidate_index < pool[best].candidate_index))
                best = i;
        }
        const Detection winner = pool[best];
        out.push_back(winner);
        std::vector<Detection> next;
        for (std::size_t i = 0; i < pool.size(); ++i) {
            if (i == best) continue;
            if (pool[i].cls == winner.cls &&
                iou(pool[i].box, winner.box) > cfg.iou_threshold)
                continue;
            next.push_back(pool[i]);
        }
        pool = std::move(next);
    }
    return out;
}

inline std::vector<Detection> nms_oracle(const det::RawDetections& raw,
                                         const NmsConfig& cfg) {
    return nms_oracle(candidates(raw), cfg);
}

}  // namespace hitm
