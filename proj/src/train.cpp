#include "stn/train.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "stn/csv.hpp"

namespace fs = std::filesystem;

namespace stn {

namespace {

// Deterministic epoch permutations: the sample at a global index is a pure
// function of (seed, index), so resumed runs see the same stream.
class WindowSchedule {
 public:
  WindowSchedule(std::vector<WindowRef> windows, uint64_t seed)
      : windows_(std::move(windows)), seed_(seed) {}

  long count() const { return (long)windows_.size(); }

  const WindowRef& at(long global_idx) {
    long epoch = global_idx / count();
    long pos = global_idx % count();
    if (epoch != cached_epoch_) {
      perm_.resize(count());
      for (long i = 0; i < count(); ++i) perm_[i] = i;
      Rng rng(seed_ ^ (0x9E3779B97F4A7C15ULL * (uint64_t)(epoch + 1)));
      rng.shuffle(perm_.begin(), perm_.end());
      cached_epoch_ = epoch;
    }
    return windows_[perm_[pos]];
  }

 private:
  std::vector<WindowRef> windows_;
  uint64_t seed_;
  long cached_epoch_ = -1;
  std::vector<long> perm_;
};

double scalar(const Tape<float>& g, Tape<float>::Id id) {
  return id == Tape<float>::kNone ? 0.0 : (double)g.val(id)[0];
}

}  // namespace

TrainResult train_model(STNMamba<float>& model, const DatasetIndex& data,
                        const TrainOptions& options) {
  const ModelConfig& cfg = model.config();
  if (data.train.empty()) fail_data("training split is empty");
  auto windows = list_windows(data.train, cfg.frames);
  if (windows.empty())
    fail_data("no training windows: videos shorter than frames+1 (" +
              std::to_string(cfg.frames + 1) + ")");

  fs::create_directories(options.out_dir);
  fs::path out(options.out_dir);

  // Cache all training frames up front; this also surfaces unreadable files
  // and size mismatches before step 0.
  std::vector<std::vector<Tensor<float>>> cache;
  cache.reserve(data.train.size());
  for (const auto& v : data.train) cache.push_back(load_video(v, cfg.image_size));

  Adam<float> adam(cfg.lr);
  adam.attach(model.named_params());
  long start_step = 0;
  if (!options.resume_ckpt.empty())
    start_step = load_checkpoint(options.resume_ckpt, model, &adam);
  if (options.steps <= start_step && start_step > 0) {
    TrainResult r;
    r.final_step = start_step;
    r.final_checkpoint = options.resume_ckpt;
    return r;
  }

  // Loss CSV; on resume keep rows up to the checkpoint step, drop any later
  // rows so the log never holds duplicates.
  fs::path csv_path = out / "loss.csv";
  std::vector<std::string> kept;
  if (start_step > 0 && fs::exists(csv_path)) {
    std::ifstream in(csv_path);
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
      if (header) {
        header = false;
        continue;
      }
      long step = std::atol(line.c_str());
      if (step >= 1 && step <= start_step) kept.push_back(line);
    }
  }
  std::ofstream csv(csv_path, std::ios::trunc);
  csv << "step,L_p,L_c_total,L_s_total,total\n";
  for (const auto& line : kept) csv << line << "\n";

  WindowSchedule schedule(std::move(windows), cfg.seed);
  bool dry_run = cfg.lr == 0.0;
  TrainResult result;

  for (long step = start_step + 1; step <= options.steps; ++step) {
    model.begin_step();
    for (auto& [name, p] : model.named_params())
      if (!p->grad.empty()) p->grad.zero();

    LossBreakdown mean;
    std::array<std::vector<Tensor<float>>, 4> query_pool;
    std::vector<std::string> batch_desc;
    for (long b = 0; b < cfg.batch; ++b) {
      const WindowRef& w = schedule.at((step - 1) * cfg.batch + b);
      ClipSample clip = make_clip(cache[w.video], data.train[w.video].name,
                                  w.start, cfg.frames);
      batch_desc.push_back(clip.video + "@" + std::to_string(w.start));

      Tape<float> tape;
      Ctx<float> ctx(tape, /*training=*/true);
      auto frames_id = tape.leaf(clip.stacked_frames());
      auto diffs_id = tape.leaf(clip.stacked_diffs());
      auto target_id = tape.leaf(clip.target);
      auto fwd = model.forward(ctx, frames_id, diffs_id);
      auto loss = build_loss(ctx, model, fwd, target_id);
      tape.backward(loss.total);
      collect_grads(ctx);

      mean.pred += scalar(tape, loss.pred);
      mean.total += scalar(tape, loss.total);
      for (int i = 0; i < 4; ++i) {
        mean.compact_total += scalar(tape, loss.compact[i]);
        mean.sparse_total += scalar(tape, loss.sparse[i]);
        if (!dry_run && fwd.stim.queries[i] != Tape<float>::kNone)
          query_pool[i].push_back(tape.val(fwd.stim.queries[i]).clone());
      }
    }
    mean.pred /= cfg.batch;
    mean.compact_total /= cfg.batch;
    mean.sparse_total /= cfg.batch;
    mean.total /= cfg.batch;

    if (!std::isfinite(mean.total)) {
      nlohmann::json diag;
      diag["step"] = step;
      diag["batch"] = batch_desc;
      diag["losses"] = {{"pred", mean.pred},
                        {"compact", mean.compact_total},
                        {"sparse", mean.sparse_total}};
      std::ofstream df(out / "diagnostics.json");
      df << diag.dump(2) << "\n";
      model.end_step();
      throw Error(ErrorKind::Numeric,
                  "non-finite loss at step " + std::to_string(step) +
                      "; offending batch dumped to diagnostics.json");
    }

    if (!dry_run) {
      for (auto& [name, p] : model.named_params())
        if (!p->grad.empty())
          for (long i = 0; i < p->grad.numel(); ++i)
            p->grad[i] /= (float)cfg.batch;
      adam.step();
      for (int i = 0; i < 4; ++i) {
        if (query_pool[i].empty()) continue;
        long rows = 0;
        for (const auto& q : query_pool[i]) rows += q.rows();
        Tensor<float> pooled({rows, query_pool[i][0].cols()});
        long r0 = 0;
        for (const auto& q : query_pool[i]) {
          std::memcpy(&pooled(r0, 0), q.data(), sizeof(float) * q.numel());
          r0 += q.rows();
        }
        model.stim.write_level(i, pooled, /*train_mode=*/true);
      }
    }
    model.end_step();

    csv << step << "," << csv_num(mean.pred) << "," << csv_num(mean.compact_total)
        << "," << csv_num(mean.sparse_total) << "," << csv_num(mean.total) << "\n";
    if (options.on_step) options.on_step(step, mean);

    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 &&
        step != options.steps) {
      char buf[64];
      std::snprintf(buf, sizeof(buf), "ckpt_%06ld.stnm", step);
      save_checkpoint((out / buf).string(), model, step, &adam);
    }
    result.final_step = step;
  }

  csv.flush();
  fs::path final_path = out / "ckpt_final.stnm";
  save_checkpoint(final_path.string(), model, result.final_step, &adam);
  result.final_checkpoint = final_path.string();
  return result;
}

}  // namespace stn
