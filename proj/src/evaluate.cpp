#include "stn/evaluate.hpp"

namespace stn {

ClipEval eval_clip(STNMamba<float>& model, const ClipSample& clip) {
  Tape<float> tape(/*grad_enabled=*/false);
  Ctx<float> ctx(tape, /*training=*/false);
  auto frames_id = tape.leaf(clip.stacked_frames());
  auto diffs_id = tape.leaf(clip.stacked_diffs());
  auto fwd = model.forward(ctx, frames_id, diffs_id);
  ClipEval out;
  out.prediction = tape.val(fwd.prediction).clone();
  for (int i = 0; i < 4; ++i)
    if (fwd.stim.queries[i] != Tape<float>::kNone)
      out.queries[i] = tape.val(fwd.stim.queries[i]).clone();
  return out;
}

VideoEval score_video(STNMamba<float>& model, const std::string& name,
                      const std::vector<Tensor<float>>& frames,
                      const std::vector<int>& labels) {
  const ModelConfig& cfg = model.config();
  long k = cfg.frames;
  if ((long)frames.size() < k + 1)
    fail_data("video '" + name + "' has " + std::to_string(frames.size()) +
              " frames; scoring needs at least " + std::to_string(k + 1));
  if (!labels.empty() && labels.size() != frames.size())
    fail_data("video '" + name + "': label count does not match frame count");
  VideoEval ev;
  ev.name = name;
  for (long start = 0; start + k < (long)frames.size(); ++start) {
    ClipSample clip = make_clip(frames, name, start, k);
    ClipEval ce = eval_clip(model, clip);
    ev.raw.frame.push_back(clip.target_frame);
    ev.raw.sp.push_back(psnr_score(ce.prediction, clip.target));
    for (int i = 0; i < 4; ++i)
      if (!ce.queries[i].empty())
        ev.raw.sd[i].push_back(
            memory_distance_score(ce.queries[i], model.stim.bank(i).m.value));
    if (!labels.empty()) ev.raw.labels.push_back(labels[clip.target_frame]);
  }
  return ev;
}

double dataset_auc(const std::vector<VideoEval>& videos, double tau) {
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& v : videos) {
    if (v.raw.labels.empty())
      fail_data("dataset_auc: video '" + v.name + "' has no labels");
    FusedScores fused = anomaly_scores(v.raw, tau);
    scores.insert(scores.end(), fused.anomaly.begin(), fused.anomaly.end());
    labels.insert(labels.end(), v.raw.labels.begin(), v.raw.labels.end());
  }
  return frame_level_auc(scores, labels);
}

}  // namespace stn
