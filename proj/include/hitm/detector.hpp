#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "hitm/boxes.hpp"
#include "hitm/nn.hpp"
#include "hitm/rng.hpp"
#include "hitm/tensor.hpp"

// A deliberately small one-stage detector with a YOLO-style grid head. The
// fixed architecture is
//   3x64x64 -> conv(8,3x3,pad1)+leaky(0.1) -> maxpool2
//           -> conv(16,3x3,pad1)+leaky     -> maxpool2
//           -> conv(32,3x3,pad1)+leaky     -> maxpool2
//           -> conv(A*(5+K),1x1)           -> S=8 grid, A=2, K=3, N=128
// Per candidate the head emits logits (tx, ty, tw, th, tc, tp[K]); boxes
// decode as bx=(col+sig(tx))/S, by=(row+sig(ty))/S, bw=sig(tw), bh=sig(th).
// Width and height go through the sigmoid (not an exponential) so the decoded
// box area is available directly from the raw logits.

namespace hitm::det {

inline constexpr int kInputChannels = 3;
inline constexpr int kInputSize = 64;
inline constexpr double kLeakySlope = 0.1;
inline constexpr double kLambdaCoord = 5.0;
inline constexpr double kLambdaNoObj = 0.5;

struct ConvLayer {
    Tensor kernels;
    Tensor bias;
};

struct DetectorWeights {
    int grid = 8;             // S
    int anchors_per_cell = 2; // A
    int num_classes = 3;      // K
    std::vector<std::array<double, 2>> anchor_priors{{0.2, 0.2}, {0.5, 0.5}};
    ConvLayer conv1, conv2, conv3, head;

    int candidate_count() const { return grid * grid * anchors_per_cell; }
    int head_channels() const { return anchors_per_cell * (5 + num_classes); }

    /// All-zero weights for the fixed architecture.
    static DetectorWeights zeros() {
        DetectorWeights w;
        w.conv1 = {Tensor({8, 3, 3, 3}), Tensor({8})};
        w.conv2 = {Tensor({16, 8, 3, 3}), Tensor({16})};
        w.conv3 = {Tensor({32, 16, 3, 3}), Tensor({32})};
        w.head = {Tensor({static_cast<std::size_t>(w.head_channels()), 32, 1, 1}),
                  Tensor({static_cast<std::size_t>(w.head_channels())})};
        return w;
    }

    /// He-uniform kernel init; biases zero except the objectness bias, which
    /// starts at -2 so an untrained net predicts mostly background.
    static DetectorWeights random_init(std::uint64_t seed) {
        DetectorWeights w = zeros();
        Rng rng(seed);
        for (ConvLayer* layer : {&w.conv1, &w.conv2, &w.conv3, &w.head}) {
            const auto& s = layer->kernels.shape;
            const double fan_in = static_cast<double>(s[1] * s[2] * s[3]);
            const double limit = std::sqrt(6.0 / fan_in);
            for (double& v : layer->kernels.data) v = rng.uniform(-limit, limit);
        }
        for (int a = 0; a < w.anchors_per_cell; ++a)
            w.head.bias[a * (5 + w.num_classes) + 4] = -2.0;
        return w;
    }

    /// Validates the whole architecture shape chain. Called on load and at
    /// trainer entry, not on every forward.
    void check_architecture() const {
        if (grid != 8 || anchors_per_cell != 2)
            throw std::invalid_argument("detector: unsupported grid/anchor layout S=" +
                                        std::to_string(grid) + " A=" +
                                        std::to_string(anchors_per_cell));
        if (num_classes != 3)
            throw std::invalid_argument("detector: unsupported class count K=" +
                                        std::to_string(num_classes) +
                                        " (this build is K=3)");
        const DetectorWeights expect = zeros();
        auto check = [](const char* name, const Tensor& got, const Tensor& want) {
            if (got.shape != want.shape)
                throw std::invalid_argument(std::string("detector: layer ") + name +
                                            " has shape " + got.shape_string() +
                                            ", expected " + want.shape_string());
        };
        check("conv1.kernels", conv1.kernels, expect.conv1.kernels);
        check("conv1.bias", conv1.bias, expect.conv1.bias);
        check("conv2.kernels", conv2.kernels, expect.conv2.kernels);
        check("conv2.bias", conv2.bias, expect.conv2.bias);
        check("conv3.kernels", conv3.kernels, expect.conv3.kernels);
        check("conv3.bias", conv3.bias, expect.conv3.bias);
        check("head.kernels", head.kernels, expect.head.kernels);
        check("head.bias", head.bias, expect.head.bias);
        if (static_cast<int>(anchor_priors.size()) != anchors_per_cell)
            throw std::invalid_argument("detector: anchor prior count mismatch");
    }
};

/// Raw candidate outputs: the head logits plus the decoded view of the N
/// candidates. Candidate i corresponds to grid cell (row, col) and anchor a
/// with i = (row*S + col)*A + a; its logits live in channels
/// a*(5+K)+{0..4+K} at spatial position (row, col).
struct RawDetections {
    int grid = 0, anchors_per_cell = 0, num_classes = 0;
    Tensor logits;                   // [A*(5+K), S, S]
    std::vector<Box> boxes;          // decoded, size N
    std::vector<double> confidence;  // sigmoid(tc), size N
    std::vector<double> probs;       // softmax class probabilities, size N*K

    int count() const { return grid * grid * anchors_per_cell; }

    double logit(int candidate, int field) const {
        const int a = candidate % anchors_per_cell;
        const int cell = candidate / anchors_per_cell;
        const int channel = a * (5 + num_classes) + field;
        return logits.data[channel * grid * grid + cell];
    }

    double prob(int candidate, int cls) const {
        return probs[candidate * num_classes + cls];
    }
};

/// Writes grad_value into the logit-gradient tensor slot of (candidate, field).
inline void add_logit_grad(Tensor& grad, const RawDetections& raw, int candidate,
                           int field, double grad_value) {
    const int a = candidate % raw.anchors_per_cell;
    const int cell = candidate / raw.anchors_per_cell;
    const int channel = a * (5 + raw.num_classes) + field;
    grad.data[channel * raw.grid * raw.grid + cell] += grad_value;
}

/// Saved activations of one forward pass, enough to run the backward pass.
struct ForwardTrace {
    Tensor input;
    Tensor z1, p1, z2, p2, z3, p3;  // pre-activations and pooled outputs
    std::vector<std::size_t> idx1, idx2, idx3;
    RawDetections raw;
};

namespace detail {

inline void check_image(const Tensor& image) {
    const std::vector<std::size_t> want{3, 64, 64};
    if (image.shape != want)
        throw std::invalid_argument("detector: image must be 3x64x64, got " +
                                    image.shape_string());
}

inline RawDetections decode_head(const DetectorWeights& w, Tensor head_out) {
    RawDetections raw;
    raw.grid = w.grid;
    raw.anchors_per_cell = w.anchors_per_cell;
    raw.num_classes = w.num_classes;
    raw.logits = std::move(head_out);
    const int S = w.grid, A = w.anchors_per_cell, K = w.num_classes;
    const int N = raw.count();
    raw.boxes.resize(N);
    raw.confidence.resize(N);

    // Gather class logits into [N, K] and reuse the softmax primitive.
    Tensor class_logits({static_cast<std::size_t>(N), static_cast<std::size_t>(K)});
    for (int i = 0; i < N; ++i) {
        const int a = i % A;
        const int cell = i / A;
        const int row = cell / S, col = cell % S;
        const int base = a * (5 + K);
        auto at = [&](int field) {
            return raw.logits.data[(base + field) * S * S + cell];
        };
        raw.boxes[i] = Box{(col + nn::sigmoid(at(0))) / S,
                           (row + nn::sigmoid(at(1))) / S, nn::sigmoid(at(2)),
                           nn::sigmoid(at(3))};
        raw.confidence[i] = nn::sigmoid(at(4));
        for (int k = 0; k < K; ++k)
            class_logits.data[i * K + k] = at(5 + k);
    }
    raw.probs = nn::softmax_forward(class_logits, 1).data;
    return raw;
}

}  // namespace detail

/// Full forward pass keeping every activation needed for backward.
inline ForwardTrace forward_trace(const DetectorWeights& w, const Tensor& image) {
    detail::check_image(image);
    ForwardTrace t;
    t.input = image;
    t.z1 = nn::conv2d_forward(image, w.conv1.kernels, w.conv1.bias, 1, 1);
    auto pool1 = nn::maxpool2_forward(nn::leaky_relu_forward(t.z1, kLeakySlope));
    t.p1 = std::move(pool1.output);
    t.idx1 = std::move(pool1.argmax);
    t.z2 = nn::conv2d_forward(t.p1, w.conv2.kernels, w.conv2.bias, 1, 1);
    auto pool2 = nn::maxpool2_forward(nn::leaky_relu_forward(t.z2, kLeakySlope));
    t.p2 = std::move(pool2.output);
    t.idx2 = std::move(pool2.argmax);
    t.z3 = nn::conv2d_forward(t.p2, w.conv3.kernels, w.conv3.bias, 1, 1);
    auto pool3 = nn::maxpool2_forward(nn::leaky_relu_forward(t.z3, kLeakySlope));
    t.p3 = std::move(pool3.output);
    t.idx3 = std::move(pool3.argmax);
    Tensor head_out = nn::conv2d_forward(t.p3, w.head.kernels, w.head.bias, 1, 0);
    t.raw = detail::decode_head(w, std::move(head_out));
    return t;
}

inline RawDetections forward(const DetectorWeights& w, const Tensor& image) {
    return forward_trace(w, image).raw;
}

struct DetectorGrads {
    ConvLayer conv1, conv2, conv3, head;
};

struct BackwardResult {
    Tensor input_grad;
    DetectorGrads weight_grads;  // empty tensors unless requested
};

/// Backpropagates a gradient w.r.t. the head logits down to the image (and,
/// optionally, the weights).
inline BackwardResult backward(const DetectorWeights& w, const ForwardTrace& t,
                               const Tensor& logit_grad, bool need_weight_grads) {
    if (logit_grad.shape != t.raw.logits.shape)
        throw std::invalid_argument("detector backward: logit grad shape " +
                                    logit_grad.shape_string() + " != " +
                                    t.raw.logits.shape_string());
    BackwardResult r;
    auto g_head = nn::conv2d_backward(logit_grad, t.p3, w.head.kernels, 1, 0,
                                      need_weight_grads);
    Tensor da3 = nn::maxpool2_backward(g_head.input, t.idx3, {32, 16, 16});
    Tensor dz3 = nn::leaky_relu_backward(da3, t.z3, kLeakySlope);
    auto g3 = nn::conv2d_backward(dz3, t.p2, w.conv3.kernels, 1, 1,
                                  need_weight_grads);
    Tensor da2 = nn::maxpool2_backward(g3.input, t.idx2, {16, 32, 32});
    Tensor dz2 = nn::leaky_relu_backward(da2, t.z2, kLeakySlope);
    auto g2 = nn::conv2d_backward(dz2, t.p1, w.conv2.kernels, 1, 1,
                                  need_weight_grads);
    Tensor da1 = nn::maxpool2_backward(g2.input, t.idx1, {8, 64, 64});
    Tensor dz1 = nn::leaky_relu_backward(da1, t.z1, kLeakySlope);
    auto g1 = nn::conv2d_backward(dz1, t.input, w.conv1.kernels, 1, 1,
                                  need_weight_grads);
    r.input_grad = std::move(g1.input);
    if (need_weight_grads) {
        r.weight_grads.conv1 = {std::move(g1.kernels), std::move(g1.bias)};
        r.weight_grads.conv2 = {std::move(g2.kernels), std::move(g2.bias)};
        r.weight_grads.conv3 = {std::move(g3.kernels), std::move(g3.bias)};
        r.weight_grads.head = {std::move(g_head.kernels), std::move(g_head.bias)};
    }
    return r;
}

inline Tensor input_gradient(const DetectorWeights& w, const ForwardTrace& t,
                             const Tensor& logit_grad) {
    return backward(w, t, logit_grad, false).input_grad;
}

/// Gradient of a scalar loss w.r.t. the image, given the loss gradient w.r.t.
/// the head logits.
inline Tensor input_gradient(const DetectorWeights& w, const Tensor& image,
                             const Tensor& logit_grad) {
    return input_gradient(w, forward_trace(w, image), logit_grad);
}

struct TrainingLossResult {
    double value = 0.0;
    Tensor logit_grad;
};

/// YOLO-v1 style composite training loss. Each truth box is assigned to the
/// grid cell containing its center and the anchor whose (w,h) prior best
/// matches its shape; duplicate assignments keep the first truth box.
///   loss = lambda_coord * sq.err on (sig tx, sig ty, sig tw, sig th)
///        + BCE on objectness (lambda_noobj on negatives)
///        + cross-entropy on class probabilities for assigned candidates.
inline TrainingLossResult training_loss(
    const RawDetections& raw, const GroundTruth& truth,
    std::span<const std::array<double, 2>> anchor_priors,
    double lambda_coord = kLambdaCoord, double lambda_noobj = kLambdaNoObj) {
    const int S = raw.grid, A = raw.anchors_per_cell, K = raw.num_classes;
    const int N = raw.count();
    if (static_cast<int>(anchor_priors.size()) != A)
        throw std::invalid_argument("training_loss: anchor prior count mismatch");
    for (const TruthBox& tb : truth) {
        if (tb.cls < 0 || tb.cls >= K)
            throw std::invalid_argument("training_loss: class id " +
                                        std::to_string(tb.cls) + " out of [0," +
                                        std::to_string(K) + ")");
        const Box& b = tb.box;
        if (b.x_min() < -1e-9 || b.x_max() > 1.0 + 1e-9 || b.y_min() < -1e-9 ||
            b.y_max() > 1.0 + 1e-9)
            throw std::invalid_argument("training_loss: truth box outside [0,1]");
    }

    // candidate index -> truth index, or -1.
    std::vector<int> assigned(N, -1);
    for (std::size_t ti = 0; ti < truth.size(); ++ti) {
        const Box& b = truth[ti].box;
        const int col = std::min(S - 1, std::max(0, static_cast<int>(b.cx * S)));
        const int row = std::min(S - 1, std::max(0, static_cast<int>(b.cy * S)));
        int best_a = 0;
        double best = -1.0;
        for (int a = 0; a < A; ++a) {
            // IoU of (w,h) shapes centered at the origin.
            const double iw = std::min(b.w, anchor_priors[a][0]);
            const double ih = std::min(b.h, anchor_priors[a][1]);
            const double inter = iw * ih;
            const double uni = b.w * b.h +
                               anchor_priors[a][0] * anchor_priors[a][1] - inter;
            const double v = uni > 0.0 ? inter / uni : 0.0;
            if (v > best) {
                best = v;
                best_a = a;
            }
        }
        const int cand = (row * S + col) * A + best_a;
        if (assigned[cand] < 0) assigned[cand] = static_cast<int>(ti);
    }

    TrainingLossResult r;
    r.logit_grad = Tensor(raw.logits.shape);
    const auto safe_log = [](double v) { return std::log(std::max(v, 1e-12)); };

    for (int i = 0; i < N; ++i) {
        const double tc = raw.logit(i, 4);
        const double sc = nn::sigmoid(tc);
        if (assigned[i] < 0) {
            r.value += -lambda_noobj * safe_log(1.0 - sc);
            add_logit_grad(r.logit_grad, raw, i, 4, lambda_noobj * sc);
            continue;
        }
        const TruthBox& tb = truth[assigned[i]];
        const int cell = i / A;
        const int row = cell / S, col = cell % S;
        const double targets[4] = {tb.box.cx * S - col, tb.box.cy * S - row,
                                   tb.box.w, tb.box.h};
        for (int f = 0; f < 4; ++f) {
            const double s = nn::sigmoid(raw.logit(i, f));
            const double diff = s - targets[f];
            r.value += lambda_coord * diff * diff;
            add_logit_grad(r.logit_grad, raw, i, f,
                           lambda_coord * 2.0 * diff * s * (1.0 - s));
        }
        r.value += -safe_log(sc);
        add_logit_grad(r.logit_grad, raw, i, 4, sc - 1.0);
        r.value += -safe_log(raw.prob(i, tb.cls));
        for (int k = 0; k < K; ++k)
            add_logit_grad(r.logit_grad, raw, i, 5 + k,
                           raw.prob(i, k) - (k == tb.cls ? 1.0 : 0.0));
    }
    return r;
}

/// One labelled training image.
struct Sample {
    Tensor image;
    GroundTruth truth;
};

struct TrainReport {
    std::vector<double> epoch_mean_loss;
};

/// Plain stochastic gradient descent with a fixed learning rate. The scene
/// order is reshuffled each epoch from `seed`, so the whole weight trajectory
/// is deterministic. Throws if the loss goes non-finite.
inline TrainReport train(DetectorWeights& w, const std::vector<Sample>& samples,
                         int epochs, double lr, std::uint64_t seed) {
    if (samples.empty())
        throw std::invalid_argument("train: need at least one sample");
    w.check_architecture();
    TrainReport report;
    Rng rng(seed);
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rng.below(i)]);
        double loss_sum = 0.0;
        for (std::size_t idx : order) {
            ForwardTrace t = forward_trace(w, samples[idx].image);
            TrainingLossResult loss = training_loss(t.raw, samples[idx].truth,
                                                    w.anchor_priors);
            if (!std::isfinite(loss.value))
                throw std::runtime_error(
                    "train: non-finite loss at epoch " + std::to_string(epoch) +
                    ", sample " + std::to_string(idx) +
                    " (try a smaller learning rate)");
            loss_sum += loss.value;
            BackwardResult g = backward(w, t, loss.logit_grad, true);
            w.conv1.kernels.scaled_add(-lr, g.weight_grads.conv1.kernels);
            w.conv1.bias.scaled_add(-lr, g.weight_grads.conv1.bias);
            w.conv2.kernels.scaled_add(-lr, g.weight_grads.conv2.kernels);
            w.conv2.bias.scaled_add(-lr, g.weight_grads.conv2.bias);
            w.conv3.kernels.scaled_add(-lr, g.weight_grads.conv3.kernels);
            w.conv3.bias.scaled_add(-lr, g.weight_grads.conv3.bias);
            w.head.kernels.scaled_add(-lr, g.weight_grads.head.kernels);
            w.head.bias.scaled_add(-lr, g.weight_grads.head.bias);
        }
        report.epoch_mean_loss.push_back(loss_sum / samples.size());
    }
    return report;
}

}  // namespace hitm::det
