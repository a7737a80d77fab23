#pragma once

// Test-time drivers: run the frozen model over sliding windows, collect PSNR
// and per-level memory distances, fuse them per video, and aggregate the
// frame-level AUC.

#include "stn/data.hpp"
#include "stn/model.hpp"
#include "stn/scoring.hpp"

namespace stn {

struct ClipEval {
  Tensor<float> prediction;                 // (H*W) x 3
  std::array<Tensor<float>, 4> queries;     // empty at levels without a bank
};

// One eval-mode forward pass (no gradients, no memory writes).
ClipEval eval_clip(STNMamba<float>& model, const ClipSample& clip);

struct VideoEval {
  std::string name;
  VideoScores raw;
};

// Slide a window over one video; labels may be empty (unlabeled scoring).
VideoEval score_video(STNMamba<float>& model, const std::string& name,
                      const std::vector<Tensor<float>>& frames,
                      const std::vector<int>& labels);

// Per-video fusion at the given tau, then one AUC over all scored frames.
double dataset_auc(const std::vector<VideoEval>& videos, double tau);

}  // namespace stn
