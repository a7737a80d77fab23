#pragma once

// Dataset ingestion and the synthetic clip generator.
//
// On-disk layout:
//   root/training/frames/<video>/<frame>.<ext>
//   root/testing/frames/<video>/<frame>.<ext>
//   root/testing/labels/<video>.txt        one 0/1 per frame, or
//   root/testing/labels/<video>.intervals  "start-end" per line, 1-based inclusive
// Frames are ordered lexicographically. Window sampling never crosses video
// boundaries; a window of k frames predicts the frame right after it.

#include <string>
#include <vector>

#include "json.hpp"
#include "stn/tensor.hpp"

namespace stn {

// A window of consecutive frames, its RGB-difference companion, and the
// prediction target. All values live in [-1, 1]; diffs are exact forward
// differences of the normalized frames.
struct ClipSample {
  std::vector<Tensor<float>> frames;  // k maps of (H*W) x 3
  std::vector<Tensor<float>> diffs;   // k-1 maps of (H*W) x 3
  Tensor<float> target;               // (H*W) x 3
  std::string video;
  long target_frame = 0;

  void validate() const;
  Tensor<float> stacked_frames() const;  // (H*W) x 3k
  Tensor<float> stacked_diffs() const;   // (H*W) x 3(k-1)
};

struct VideoEntry {
  std::string name;
  std::vector<std::string> frame_paths;
  std::vector<int> labels;  // per frame; empty for training videos
};

struct DatasetIndex {
  std::string root;
  std::vector<VideoEntry> train;
  std::vector<VideoEntry> test;
  std::string report() const;
};

// Decode, bilinear-resize to size x size, map to [-1, 1] (RGB order;
// grayscale inputs are channel-replicated).
Tensor<float> load_frame(const std::string& path, long size);

// Forward differences of consecutive normalized frames.
std::vector<Tensor<float>> rgb_difference(const std::vector<Tensor<float>>& frames);

// "start-end" interval lines (1-based inclusive) to per-frame 0/1 labels.
std::vector<int> expand_intervals(const std::string& text, long frame_count);

DatasetIndex index_dataset(const std::string& root);

// All frames of one video, loaded once.
std::vector<Tensor<float>> load_video(const VideoEntry& video, long size);

ClipSample make_clip(const std::vector<Tensor<float>>& frames,
                     const std::string& video_name, long start, long k);

struct WindowRef {
  int video = 0;
  long start = 0;
};
std::vector<WindowRef> list_windows(const std::vector<VideoEntry>& videos, long k);

// ---- synthetic data ---------------------------------------------------------

// Normal videos show circles drifting over a static textured background.
// Each test video swaps one circle for an anomaly from a chosen frame to the
// end of the video: a fast object (speed_mult * v_max), an unseen shape
// (square), or a flashing (appearing/disappearing) object.
struct SynthSpec {
  long width = 64;
  long height = 64;
  long train_videos = 8;
  long test_videos = 4;
  long frames = 60;
  long sprites = 2;
  double v_max = 2.0;
  double fast_mult = 3.5;  // anomalous speed in units of v_max
  std::vector<std::string> anomaly_types = {"fast", "shape", "flash"};
  long anomaly_start_min = 28;
  long anomaly_start_max = 36;

  nlohmann::json to_json() const;
  static SynthSpec from_json(const nlohmann::json& j);
  void validate() const;
};

// Writes the standard layout plus labels, interval files, and a trajectory
// metadata file (synth_meta.json). Byte-identical output for identical
// (spec, seed).
void synthesize_dataset(const std::string& out_dir, const SynthSpec& spec,
                        uint64_t seed);

}  // namespace stn
