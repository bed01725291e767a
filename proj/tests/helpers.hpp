#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "hitm/attack.hpp"
#include "hitm/detector.hpp"
#include "hitm/rng.hpp"
#include "hitm/tensor.hpp"

namespace testutil {

inline hitm::Tensor random_tensor(std::vector<std::size_t> shape, hitm::Rng& rng,
                                  double lo = -1.0, double hi = 1.0) {
    hitm::Tensor t(std::move(shape));
    for (double& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

inline hitm::Tensor random_image(std::uint64_t seed) {
    hitm::Rng rng(seed);
    return random_tensor({3, 64, 64}, rng, 0.0, 1.0);
}

/// Wraps a logits tensor of head shape [A*(5+K), S, S] as RawDetections, so
/// losses can be exercised directly in logit space.
inline hitm::det::RawDetections raw_from_logits(hitm::Tensor logits) {
    const auto w = hitm::det::DetectorWeights::zeros();
    return hitm::det::detail::decode_head(w, std::move(logits));
}

inline hitm::Tensor head_logits_shape() {
    return hitm::Tensor({16, 8, 8});
}

inline hitm::det::RawDetections random_raw(std::uint64_t seed, double lo = -3.0,
                                           double hi = 3.0) {
    hitm::Rng rng(seed);
    return raw_from_logits(random_tensor({16, 8, 8}, rng, lo, hi));
}

/// True when two traces share one linear piece of the network: every
/// leaky-relu pre-activation has the same sign and every pool picks the same
/// element. Across such a pair the image->logits map is affine.
inline bool same_activation_pattern(const hitm::det::ForwardTrace& a,
                                    const hitm::det::ForwardTrace& b) {
    const auto same_signs = [](const hitm::Tensor& x, const hitm::Tensor& y) {
        for (std::size_t i = 0; i < x.size(); ++i)
            if ((x.data[i] > 0.0) != (y.data[i] > 0.0)) return false;
        return true;
    };
    return same_signs(a.z1, b.z1) && same_signs(a.z2, b.z2) &&
           same_signs(a.z3, b.z3) && a.idx1 == b.idx1 && a.idx2 == b.idx2 &&
           a.idx3 == b.idx3;
}

struct SegmentFdResult {
    double max_err = 0.0;
    int checked = 0;
    int skipped = 0;
};

/// Central-difference check of an adversarial loss through the whole
/// detector. A central difference only measures a derivative where f is
/// differentiable on [x-h, x+h]; coordinates whose probe segment crosses a
/// relu kink or flips a pool argmax violate that precondition (the quotient
/// then mixes two linear pieces), so they are skipped and counted instead of
/// checked.
inline SegmentFdResult fd_check_loss_through_detector(
    const hitm::det::DetectorWeights& w,
    const hitm::attack::AdversarialLoss& loss, const hitm::Tensor& img,
    double h, int coords, std::uint64_t seed) {
    const hitm::det::ForwardTrace base = hitm::det::forward_trace(w, img);
    const hitm::attack::LossEval eval = loss.evaluate(base.raw);
    const hitm::Tensor grad = hitm::det::input_gradient(w, base, eval.logit_grad);

    SegmentFdResult r;
    hitm::Rng rng(seed);
    hitm::Tensor probe = img;
    for (int attempt = 0; attempt < coords * 4 && r.checked < coords; ++attempt) {
        const std::size_t c = rng.below(img.size());
        const double saved = probe[c];
        probe[c] = saved + h;
        const hitm::det::ForwardTrace tp = hitm::det::forward_trace(w, probe);
        probe[c] = saved - h;
        const hitm::det::ForwardTrace tm = hitm::det::forward_trace(w, probe);
        probe[c] = saved;
        if (!same_activation_pattern(tp, tm)) {
            ++r.skipped;
            continue;
        }
        const double central =
            (loss.evaluate(tp.raw).value - loss.evaluate(tm.raw).value) /
            (2.0 * h);
        const double err =
            std::abs(grad[c] - central) /
            std::max(1e-8, std::abs(grad[c]) + std::abs(central));
        r.max_err = std::max(r.max_err, err);
        ++r.checked;
    }
    return r;
}

}  // namespace testutil
