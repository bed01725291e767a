#pragma once

#include <algorithm>
#include <vector>

namespace hitm {

/// Axis-aligned box in center format, all values in image fractions [0, 1].
struct Box {
    double cx = 0.0, cy = 0.0, w = 0.0, h = 0.0;

    double x_min() const { return cx - w / 2.0; }
    double x_max() const { return cx + w / 2.0; }
    double y_min() const { return cy - h / 2.0; }
    double y_max() const { return cy + h / 2.0; }
    double area() const { return w * h; }
};

/// Intersection over union, in [0, 1]. Returns 0 when the union is empty.
inline double iou(const Box& a, const Box& b) {
    const double ix = std::max(0.0, std::min(a.x_max(), b.x_max()) -
                                        std::max(a.x_min(), b.x_min()));
    const double iy = std::max(0.0, std::min(a.y_max(), b.y_max()) -
                                        std::max(a.y_min(), b.y_min()));
    const double inter = ix * iy;
    const double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

/// One labelled ground-truth object.
struct TruthBox {
    int cls = 0;
    Box box;
};

using GroundTruth = std::vector<TruthBox>;

}  // namespace hitm
