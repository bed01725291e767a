#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "hitm/detector.hpp"
#include "hitm/metrics.hpp"
#include "hitm/nms.hpp"
#include "hitm/rng.hpp"
#include "hitm/tensor.hpp"

// The PCB attack engine: adversarial losses over the raw detector logits, the
// sign-PGD step with l-inf projection, and the image-specific / image-agnostic
// attack loops with learning-rate decay. Fabrication runs gradient ascent on
// the adversarial loss (fills the image with boxes), vanishing runs descent
// (removes them); the TOG loss folds its own sign into the evaluation so both
// modes go through the same ascent-shaped step.

namespace hitm::attack {

enum class LossKind { PC, PCB, TOG };
enum class Mode { Fabrication, Vanishing };
enum class Init { Zero, Uniform };

struct AttackConfig {
    LossKind loss = LossKind::PCB;
    Mode mode = Mode::Fabrication;
    double alpha = 2.0 / 255.0;   // initial learning rate
    double decay = 0.98;          // k, applied per iteration (or per epoch)
    int iterations = 100;         // n
    double epsilon = 8.0 / 255.0; // l-inf budget in [0,1] pixel units
    Init init = Init::Zero;
    std::uint64_t seed = 0;       // used only for uniform init

    void validate() const {
        if (!(epsilon > 0.0))
            throw std::invalid_argument("attack config: epsilon must be > 0");
        if (!(alpha > 0.0))
            throw std::invalid_argument("attack config: alpha must be > 0");
        if (iterations < 1)
            throw std::invalid_argument("attack config: need >= 1 iteration");
        if (!(decay > 0.0) || decay > 1.0)
            throw std::invalid_argument("attack config: decay must be in (0,1]");
    }
};

/// The delta tensor plus the provenance needed to reproduce or apply it.
struct Perturbation {
    Tensor delta;
    AttackConfig config;
    int iterations_done = 0;
};

inline Perturbation make_perturbation(const AttackConfig& cfg) {
    cfg.validate();
    Perturbation p;
    p.config = cfg;
    p.delta = Tensor({3, 64, 64});
    if (cfg.init == Init::Uniform) {
        Rng rng(cfg.seed);
        for (double& v : p.delta.data) v = rng.uniform(-cfg.epsilon, cfg.epsilon);
    }
    return p;
}

/// The adversarial image the detector actually sees.
inline Tensor adversarial_image(const Tensor& image, const Tensor& delta) {
    image.require_same_shape(delta, "adversarial_image");
    Tensor x = image;
    for (std::size_t i = 0; i < x.data.size(); ++i)
        x.data[i] = std::clamp(x.data[i] + delta.data[i], 0.0, 1.0);
    return x;
}

struct LossEval {
    double value = 0.0;
    Tensor logit_grad;  // d value / d head logits, same shape as raw.logits
};

/// L_PC: sum over candidates of sigmoid(confidence logit) times the summed
/// sigmoids of the raw class logits. Maximizing it pushes every candidate
/// toward being a confident detection of every class at once.
inline LossEval loss_pc(const det::RawDetections& raw) {
    const int N = raw.count(), K = raw.num_classes;
    LossEval r;
    r.logit_grad = Tensor(raw.logits.shape);
    for (int i = 0; i < N; ++i) {
        const double sc = raw.confidence[i];
        double class_sum = 0.0;
        for (int k = 0; k < K; ++k) class_sum += nn::sigmoid(raw.logit(i, 5 + k));
        r.value += sc * class_sum;
        det::add_logit_grad(r.logit_grad, raw, i, 4, sc * (1.0 - sc) * class_sum);
        for (int k = 0; k < K; ++k) {
            const double s = nn::sigmoid(raw.logit(i, 5 + k));
            det::add_logit_grad(r.logit_grad, raw, i, 5 + k, sc * s * (1.0 - s));
        }
    }
    return r;
}

/// L_PCB: L_PC divided by the summed squared candidate areas (in sigmoid
/// space), so ascent additionally shrinks boxes and descent grows them. The
/// guard keeps the quotient finite when every box is tiny.
inline LossEval loss_pcb(const det::RawDetections& raw) {
    constexpr double kDenomGuard = 1e-8;
    const int N = raw.count(), K = raw.num_classes;
    LossEval r;
    r.logit_grad = Tensor(raw.logits.shape);

    double numer = 0.0, area_sum = 0.0;
    for (int i = 0; i < N; ++i) {
        double class_sum = 0.0;
        for (int k = 0; k < K; ++k) class_sum += nn::sigmoid(raw.logit(i, 5 + k));
        numer += raw.confidence[i] * class_sum;
        const double area = raw.boxes[i].w * raw.boxes[i].h;  // sig(tw)*sig(th)
        area_sum += area * area;
    }
    const bool guarded = area_sum < kDenomGuard;
    const double denom = guarded ? kDenomGuard : area_sum;
    r.value = numer / denom;

    for (int i = 0; i < N; ++i) {
        const double sc = raw.confidence[i];
        double class_sum = 0.0;
        for (int k = 0; k < K; ++k) class_sum += nn::sigmoid(raw.logit(i, 5 + k));
        det::add_logit_grad(r.logit_grad, raw, i, 4,
                            sc * (1.0 - sc) * class_sum / denom);
        for (int k = 0; k < K; ++k) {
            const double s = nn::sigmoid(raw.logit(i, 5 + k));
            det::add_logit_grad(r.logit_grad, raw, i, 5 + k,
                                sc * s * (1.0 - s) / denom);
        }
        if (!guarded) {
            const double sw = raw.boxes[i].w, sh = raw.boxes[i].h;
            const double scale = -r.value / denom;  // d(1/denom) chain
            det::add_logit_grad(r.logit_grad, raw, i, 2,
                                scale * 2.0 * sw * sw * sh * sh * (1.0 - sw));
            det::add_logit_grad(r.logit_grad, raw, i, 3,
                                scale * 2.0 * sw * sw * sh * sh * (1.0 - sh));
        }
    }
    return r;
}

/// Desired adversarial output O*: what every candidate should look like after
/// the attack. Fabrication wants all candidates confidently present with
/// their current class and box (frozen from the clean output); vanishing
/// wants all candidates absent, so it needs no per-candidate data.
struct AdversarialTarget {
    Mode mode = Mode::Vanishing;
    std::vector<int> cls;                          // size N (fabrication)
    std::vector<std::array<double, 4>> sig_box;    // sigmoid-space box targets
};

inline AdversarialTarget make_fabrication_target(const det::RawDetections& clean) {
    AdversarialTarget t;
    t.mode = Mode::Fabrication;
    const int N = clean.count(), K = clean.num_classes;
    t.cls.resize(N);
    t.sig_box.resize(N);
    for (int i = 0; i < N; ++i) {
        int best = 0;
        for (int k = 1; k < K; ++k)
            if (clean.prob(i, k) > clean.prob(i, best)) best = k;
        t.cls[i] = best;
        for (int f = 0; f < 4; ++f)
            t.sig_box[i][f] = nn::sigmoid(clean.logit(i, f));
    }
    return t;
}

inline AdversarialTarget make_vanishing_target() {
    return AdversarialTarget{};
}

/// TOG loss: the detector training loss evaluated against the adversarial
/// target instead of the truth, with every candidate assigned. The attack
/// wants to *minimize* the distance to O*, so the returned value is
/// sign-flipped for fabrication; that way both modes work through the same
/// step rule as the PC/PCB losses (fabrication ascends, vanishing descends).
inline LossEval loss_tog(const det::RawDetections& raw,
                         const AdversarialTarget& target,
                         double lambda_coord = det::kLambdaCoord,
                         double lambda_noobj = det::kLambdaNoObj) {
    const int N = raw.count(), K = raw.num_classes;
    LossEval r;
    r.logit_grad = Tensor(raw.logits.shape);
    // -log(sigmoid(z)) = softplus(-z) and -log(1-sigmoid(z)) = softplus(z);
    // evaluating in logit space keeps value and gradient exact even where the
    // sigmoid saturates past double precision.
    const auto softplus = [](double z) {
        return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
    };

    if (target.mode == Mode::Vanishing) {
        for (int i = 0; i < N; ++i) {
            r.value += lambda_noobj * softplus(raw.logit(i, 4));
            det::add_logit_grad(r.logit_grad, raw, i, 4,
                                lambda_noobj * raw.confidence[i]);
        }
        return r;  // descent on this value empties the image
    }

    if (static_cast<int>(target.cls.size()) != N ||
        static_cast<int>(target.sig_box.size()) != N)
        throw std::invalid_argument("loss_tog: target size " +
                                    std::to_string(target.cls.size()) +
                                    " does not match candidate count " +
                                    std::to_string(N));
    double train_loss = 0.0;
    for (int i = 0; i < N; ++i) {
        for (int f = 0; f < 4; ++f) {
            const double s = nn::sigmoid(raw.logit(i, f));
            const double diff = s - target.sig_box[i][f];
            train_loss += lambda_coord * diff * diff;
            det::add_logit_grad(r.logit_grad, raw, i, f,
                                lambda_coord * 2.0 * diff * s * (1.0 - s));
        }
        const double sc = raw.confidence[i];
        train_loss += softplus(-raw.logit(i, 4));
        det::add_logit_grad(r.logit_grad, raw, i, 4, sc - 1.0);
        // -log(softmax_k) = logsumexp(z) - z_k, max-shifted for stability
        double zmax = raw.logit(i, 5);
        for (int k = 1; k < K; ++k) zmax = std::max(zmax, raw.logit(i, 5 + k));
        double sum_exp = 0.0;
        for (int k = 0; k < K; ++k) sum_exp += std::exp(raw.logit(i, 5 + k) - zmax);
        train_loss += zmax + std::log(sum_exp) - raw.logit(i, 5 + target.cls[i]);
        for (int k = 0; k < K; ++k)
            det::add_logit_grad(r.logit_grad, raw, i, 5 + k,
                                raw.prob(i, k) - (k == target.cls[i] ? 1.0 : 0.0));
    }
    r.value = -train_loss;
    r.logit_grad *= -1.0;  // ascent on -L_train == descent toward O*
    return r;
}

/// One attack's loss function: the kind plus, for TOG, the target frozen from
/// the clean output at attack start.
class AdversarialLoss {
  public:
    static AdversarialLoss make(LossKind kind, Mode mode,
                                const det::RawDetections& clean_raw) {
        AdversarialLoss l;
        l.kind_ = kind;
        if (kind == LossKind::TOG)
            l.target_ = mode == Mode::Fabrication
                            ? make_fabrication_target(clean_raw)
                            : make_vanishing_target();
        return l;
    }

    /// For the losses that need no reference output (PC, PCB).
    static AdversarialLoss make(LossKind kind, Mode mode) {
        if (kind == LossKind::TOG)
            throw std::invalid_argument(
                "adversarial loss: TOG needs the clean output to build its target");
        return make(kind, mode, det::RawDetections{});
    }

    LossEval evaluate(const det::RawDetections& raw) const {
        switch (kind_) {
            case LossKind::PC: return loss_pc(raw);
            case LossKind::PCB: return loss_pcb(raw);
            case LossKind::TOG: return loss_tog(raw, target_);
        }
        throw std::logic_error("adversarial loss: bad kind");
    }

    LossKind kind() const { return kind_; }

  private:
    LossKind kind_ = LossKind::PCB;
    AdversarialTarget target_;
};

namespace detail {

/// Sign update, value clip and l-inf projection, then the loop invariant.
inline void apply_step(Perturbation& p, const Tensor& grad, double alpha_t) {
    if (!(alpha_t > 0.0))
        throw std::invalid_argument("pgd step: alpha_t must be > 0");
    if (!grad.all_finite())
        throw std::runtime_error(
            "pgd step: non-finite input gradient at iteration " +
            std::to_string(p.iterations_done + 1));
    p.delta.require_same_shape(grad, "pgd step");
    const double dir = p.config.mode == Mode::Fabrication ? 1.0 : -1.0;
    const double eps = p.config.epsilon;
    for (std::size_t i = 0; i < p.delta.data.size(); ++i) {
        double d = p.delta.data[i];
        const double g = grad.data[i];
        if (g > 0.0) d += dir * alpha_t;
        else if (g < 0.0) d -= dir * alpha_t;
        d = std::clamp(d, -1.0, 1.0);
        d = std::clamp(d, -eps, eps);
        p.delta.data[i] = d;
    }
    ++p.iterations_done;
    for (double d : p.delta.data)
        if (std::abs(d) > eps || std::abs(d) > 1.0)
            throw std::logic_error("pgd step: delta escaped the budget");
}

}  // namespace detail

/// One projected sign-gradient step at step size alpha_t: forwards the
/// clamped adversarial image, backpropagates the adversarial loss to the
/// input, moves delta along the gradient sign, clips to [-1,1] and projects
/// onto the l-inf ball of radius epsilon.
inline void pgd_step(Perturbation& p, const Tensor& image,
                     const det::DetectorWeights& w, const AdversarialLoss& loss,
                     double alpha_t) {
    const det::ForwardTrace t = det::forward_trace(w, adversarial_image(image, p.delta));
    const LossEval eval = loss.evaluate(t.raw);
    detail::apply_step(p, det::input_gradient(w, t, eval.logit_grad), alpha_t);
}

/// Observer hook for harnesses that want to watch the schedule or the delta
/// trajectory without rerunning anything.
struct StepInfo {
    int iteration = 0;    // 1-based PGD iteration, or epoch for universal runs
    int image_index = 0;  // position in the scene list (universal runs)
    double alpha = 0.0;   // step size used for this step
    const Tensor& delta;  // state after the step
};
using StepObserver = std::function<void(const StepInfo&)>;

struct AttackOutcome {
    Perturbation perturbation;
    metrics::MetricSeries series;
    std::vector<double> alphas;  // step size used at each iteration/epoch
    double alpha_after = 0.0;    // schedule state after the final decay
};

/// Image-specific attack: n PGD steps on one image, decaying the step size
/// once per iteration after the step. Each CSV record compares the current
/// attacked output against the *clean* output of the same image, so the final
/// row is exactly what a later evaluation of (image, delta) reports.
inline AttackOutcome attack_image(const Tensor& image,
                                  const det::DetectorWeights& w,
                                  const AttackConfig& cfg,
                                  const NmsConfig& nms_cfg = {},
                                  const StepObserver& observer = {}) {
    cfg.validate();
    AttackOutcome out;
    out.perturbation = make_perturbation(cfg);
    Perturbation& p = out.perturbation;

    const det::ForwardTrace clean_trace = det::forward_trace(w, image);
    const det::RawDetections& clean_raw = clean_trace.raw;
    const AdversarialLoss loss = AdversarialLoss::make(cfg.loss, cfg.mode, clean_raw);

    det::ForwardTrace trace =
        cfg.init == Init::Zero
            ? clean_trace
            : det::forward_trace(w, adversarial_image(image, p.delta));
    LossEval eval = loss.evaluate(trace.raw);

    double alpha = cfg.alpha;
    for (int t = 1; t <= cfg.iterations; ++t) {
        detail::apply_step(p, det::input_gradient(w, trace, eval.logit_grad), alpha);
        trace = det::forward_trace(w, adversarial_image(image, p.delta));
        eval = loss.evaluate(trace.raw);
        out.series.records.push_back(
            {t, metrics::mean_confidence_variation(trace.raw, clean_raw),
             static_cast<double>(metrics::number_of_boxes(trace.raw, nms_cfg)),
             metrics::relative_box_variation(trace.raw, clean_raw, nms_cfg),
             eval.value});
        out.alphas.push_back(alpha);
        if (observer) observer(StepInfo{t, 0, alpha, p.delta});
        alpha *= cfg.decay;
    }
    out.alpha_after = alpha;
    return out;
}

/// Image-agnostic (UAP) attack: each epoch sweeps the scene list in input
/// order, taking one PGD step per image against a shared delta; the step size
/// decays once per epoch, after the sweep. Records are per-epoch means over
/// the sweep, each image compared against its own clean output as the shared
/// delta stood when that image was visited.
inline AttackOutcome attack_universal(const std::vector<Tensor>& scenes,
                                      const det::DetectorWeights& w,
                                      const AttackConfig& cfg,
                                      const NmsConfig& nms_cfg = {},
                                      const StepObserver& observer = {}) {
    cfg.validate();
    if (scenes.empty())
        throw std::invalid_argument("attack_universal: need at least one scene");

    std::vector<det::RawDetections> clean_raw;
    std::vector<AdversarialLoss> losses;  // TOG freezes one target per image
    clean_raw.reserve(scenes.size());
    losses.reserve(scenes.size());
    for (const Tensor& scene : scenes) {
        clean_raw.push_back(det::forward(w, scene));
        losses.push_back(AdversarialLoss::make(cfg.loss, cfg.mode, clean_raw.back()));
    }

    AttackOutcome out;
    out.perturbation = make_perturbation(cfg);
    Perturbation& p = out.perturbation;

    double alpha = cfg.alpha;
    for (int epoch = 1; epoch <= cfg.iterations; ++epoch) {
        metrics::MetricRecord mean{epoch, 0.0, 0.0, 0.0, 0.0};
        for (std::size_t s = 0; s < scenes.size(); ++s) {
            const det::ForwardTrace trace =
                det::forward_trace(w, adversarial_image(scenes[s], p.delta));
            const LossEval eval = losses[s].evaluate(trace.raw);
            mean.mean_conf_variation +=
                metrics::mean_confidence_variation(trace.raw, clean_raw[s]);
            mean.num_boxes += metrics::number_of_boxes(trace.raw, nms_cfg);
            mean.relative_box_variation +=
                metrics::relative_box_variation(trace.raw, clean_raw[s], nms_cfg);
            mean.adv_loss += eval.value;
            detail::apply_step(p, det::input_gradient(w, trace, eval.logit_grad),
                               alpha);
            if (observer)
                observer(StepInfo{epoch, static_cast<int>(s), alpha, p.delta});
        }
        p.iterations_done = epoch;  // epochs, not inner image-steps
        const double inv = 1.0 / static_cast<double>(scenes.size());
        mean.mean_conf_variation *= inv;
        mean.num_boxes *= inv;
        mean.relative_box_variation *= inv;
        mean.adv_loss *= inv;
        out.series.records.push_back(mean);
        out.alphas.push_back(alpha);
        alpha *= cfg.decay;
    }
    out.alpha_after = alpha;
    return out;
}

}  // namespace hitm::attack
