#pragma once

// Raster output: normality-score curves and prediction error maps.

#include <string>
#include <vector>

#include "stn/tensor.hpp"

namespace stn {

// Line plot of per-frame normality scores in [0, 1]; frames labeled anomalous
// are shaded. labels may be empty (no shading).
void render_score_curve(const std::string& path,
                        const std::vector<double>& normality,
                        const std::vector<int>& labels);

// Per-pixel |prediction - target|, channel-averaged, rendered H x W through a
// fixed monotone-brightness colormap (black -> red -> yellow -> white, full
// brightness at an absolute error of 0.5 in the [-1, 1] value range).
void render_error_map(const std::string& path, const Tensor<float>& pred,
                      const Tensor<float>& target, long H, long W);

}  // namespace stn
