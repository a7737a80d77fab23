// Command-line front end: synthesize data, train, evaluate with labels, and
// score unlabeled frame folders.
//
// Exit codes: 0 success, 1 usage error, 2 data/config validation error,
// 3 numeric failure (non-finite loss).

#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "stn/csv.hpp"
#include "stn/evaluate.hpp"
#include "stn/train.hpp"
#include "stn/version.hpp"
#include "stn/viz.hpp"

namespace fs = std::filesystem;
using namespace stn;

namespace {

std::string join_args(int argc, char** argv) {
  std::string s;
  for (int i = 0; i < argc; ++i) {
    if (i) s += ' ';
    s += argv[i];
  }
  return s;
}

void write_manifest(const fs::path& dir, const nlohmann::json& config,
                    uint64_t seed, const std::string& cmdline) {
  nlohmann::json m;
  m["version"] = kVersion;
  m["command"] = cmdline;
  m["seed"] = seed;
  m["config"] = config;
  m["out"] = dir.string();
  std::ofstream os(dir / "manifest.json");
  os << m.dump(2) << "\n";
}

nlohmann::json read_manifest(const fs::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) fail_data("no manifest.json in " + dir.string());
  return nlohmann::json::parse(is);
}

ModelConfig load_config_arg(const std::string& preset, const std::string& path) {
  ModelConfig cfg = preset == "full" ? ModelConfig::full() : ModelConfig::desk();
  if (!path.empty()) {
    std::ifstream is(path);
    if (!is) fail_data("cannot read config file: " + path);
    cfg = ModelConfig::from_json(nlohmann::json::parse(is));
  }
  return cfg;
}

void apply_ablations(ModelConfig& cfg, const std::vector<std::string>& flags) {
  for (const auto& f : flags) {
    if (f == "ms_vssb_off") cfg.ms_vssb = false;
    else if (f == "ca_vssb_off") cfg.ca_vssb = false;
    else if (f == "stfb_off") cfg.stfb = false;
    else if (f == "memory_off") cfg.memory_levels = {false, false, false, false};
    else if (f == "multi_level_off" || f == "bottleneck_only") cfg.multi_level = false;
    else if (f.rfind("memory_off_l", 0) == 0 && f.size() == 13 &&
             f[12] >= '1' && f[12] <= '4')
      cfg.memory_levels[f[12] - '1'] = false;
    else if (f == "loss_lp_only") { cfg.loss_compactness = false; cfg.loss_sparsity = false; }
    else if (f == "loss_no_compactness") cfg.loss_compactness = false;
    else if (f == "loss_no_sparsity") cfg.loss_sparsity = false;
    else if (f == "baseline") {
      cfg.ms_vssb = cfg.ca_vssb = cfg.stfb = cfg.multi_level = false;
      cfg.memory_levels = {false, false, false, false};
    } else {
      fail_config("unknown ablation flag '" + f + "'");
    }
  }
}

std::string find_resume_checkpoint(const fs::path& out) {
  std::string best;
  long best_step = -1;
  if (!fs::is_directory(out)) return best;
  for (const auto& e : fs::directory_iterator(out)) {
    if (!e.is_regular_file()) continue;
    std::string n = e.path().filename().string();
    if (n.rfind("ckpt_", 0) != 0 || e.path().extension() != ".stnm") continue;
    long step = checkpoint_info(e.path().string()).step;
    if (step > best_step) {
      best_step = step;
      best = e.path().string();
    }
  }
  return best;
}

std::unique_ptr<STNMamba<float>> load_model(const std::string& ckpt) {
  CheckpointInfo info = checkpoint_info(ckpt);
  auto model = std::make_unique<STNMamba<float>>(info.config);
  load_checkpoint(ckpt, *model);
  return model;
}

void write_video_scores_csv(const fs::path& path, const VideoEval& ev,
                            const FusedScores& fused, bool with_labels) {
  std::ofstream os(path);
  os << "frame,S_p,S_d1,S_d2,S_d3,S_d4,S,N_s";
  if (with_labels) os << ",label";
  os << "\n";
  for (size_t i = 0; i < ev.raw.sp.size(); ++i) {
    os << ev.raw.frame[i] << "," << csv_num(ev.raw.sp[i]);
    for (int l = 0; l < 4; ++l) {
      os << ",";
      if (!ev.raw.sd[l].empty()) os << csv_num(ev.raw.sd[l][i]);
      else os << "nan";
    }
    os << "," << csv_num(fused.anomaly[i]) << "," << csv_num(fused.normality[i]);
    if (with_labels) os << "," << ev.raw.labels[i];
    os << "\n";
  }
}

struct SweepRange {
  double lo = 0, hi = 0, step = 0;
};

SweepRange parse_range(const std::string& s) {
  SweepRange r;
  char c1, c2;
  std::istringstream is(s);
  if (!(is >> r.lo >> c1 >> r.hi >> c2 >> r.step) || c1 != ':' || c2 != ':' ||
      r.step <= 0 || r.hi < r.lo)
    fail_config("bad sweep range '" + s + "' (expected lo:hi:step)");
  return r;
}

// ---- commands ---------------------------------------------------------------

int cmd_synth(const std::string& out, const std::string& spec_path,
              uint64_t seed, bool force, const std::string& cmdline) {
  SynthSpec spec;
  if (!spec_path.empty()) {
    std::ifstream is(spec_path);
    if (!is) fail_data("cannot read spec file: " + spec_path);
    spec = SynthSpec::from_json(nlohmann::json::parse(is));
  }
  fs::path root(out);
  if (fs::exists(root) && !fs::is_empty(root) && !force)
    fail_data("output directory " + out + " is not empty (use --force to overwrite)");
  if (fs::exists(root) && force) fs::remove_all(root);
  fs::create_directories(root);
  synthesize_dataset(out, spec, seed);
  write_manifest(root, spec.to_json(), seed, cmdline);
  DatasetIndex idx = index_dataset(out);
  std::cout << idx.report() << "\n";
  for (const auto& v : idx.test) {
    long first = -1;
    for (size_t f = 0; f < v.labels.size(); ++f)
      if (v.labels[f]) {
        first = (long)f;
        break;
      }
    std::cout << "  " << v.name << ": " << v.frame_paths.size() << " frames"
              << (first >= 0 ? ", anomalous from frame " + std::to_string(first)
                             : ", no anomaly")
              << "\n";
  }
  return 0;
}

int cmd_train(const std::string& data_dir, const std::string& out,
              ModelConfig cfg, bool resume, const std::string& cmdline) {
  fs::path outp(out);
  std::string resume_ckpt;
  if (resume) {
    nlohmann::json m = read_manifest(outp);
    ModelConfig prev = ModelConfig::from_json(m.at("config"));
    if (prev.to_json() != cfg.to_json())
      fail_config("--resume config differs from the original run's manifest");
    resume_ckpt = find_resume_checkpoint(outp);
    if (resume_ckpt.empty()) fail_data("no checkpoint found to resume in " + out);
  } else if (fs::exists(outp) && fs::exists(outp / "manifest.json")) {
    fail_data("output directory " + out +
              " already holds a run (use --resume to continue it)");
  }
  fs::create_directories(outp);
  write_manifest(outp, cfg.to_json(), cfg.seed, cmdline);

  DatasetIndex idx = index_dataset(data_dir);
  std::cout << idx.report() << "\n";
  STNMamba<float> model(cfg);
  std::cout << "model parameters: " << model.count_parameters() << "\n";

  TrainOptions opt;
  opt.out_dir = out;
  opt.steps = cfg.steps;
  opt.resume_ckpt = resume_ckpt;
  opt.on_step = [&](long step, const LossBreakdown& l) {
    if (step % 50 == 0 || step == cfg.steps)
      std::cout << "step " << step << "  L_p " << l.pred << "  L_c "
                << l.compact_total << "  L_s " << l.sparse_total << "  total "
                << l.total << "\n";
  };
  TrainResult res = train_model(model, idx, opt);
  std::cout << "trained to step " << res.final_step << "; final checkpoint "
            << res.final_checkpoint << "\n";
  return 0;
}

int cmd_eval(const std::string& data_dir, const std::string& ckpt,
             const std::string& out, double tau_arg, double kpercent_arg,
             const std::string& sweep_name, const std::string& sweep_range,
             const std::string& cmdline) {
  auto model = load_model(ckpt);
  ModelConfig cfg = model->config();
  double tau = tau_arg >= 0 ? tau_arg : cfg.tau;
  if (kpercent_arg > 0)
    for (int i = 0; i < 4; ++i)
      if (model->stim.has_bank(i)) model->stim.bank(i).set_k_percent(kpercent_arg);

  DatasetIndex idx = index_dataset(data_dir);
  if (idx.test.empty()) fail_data("dataset has no test split: " + data_dir);
  if (cfg.image_size % 32) fail_config("checkpoint image_size invalid");

  fs::path outp(out);
  fs::create_directories(outp);
  write_manifest(outp, cfg.to_json(), cfg.seed, cmdline);

  auto run_eval = [&]() {
    std::vector<VideoEval> evs;
    for (const auto& v : idx.test) {
      auto frames = load_video(v, cfg.image_size);
      evs.push_back(score_video(*model, v.name, frames, v.labels));
    }
    return evs;
  };

  std::vector<VideoEval> evs = run_eval();
  for (const auto& ev : evs) {
    FusedScores fused = anomaly_scores(ev.raw, tau);
    write_video_scores_csv(outp / ("scores_" + ev.name + ".csv"), ev, fused, true);
    std::vector<int> scored_labels = ev.raw.labels;
    render_score_curve((outp / ("curve_" + ev.name + ".png")).string(),
                       fused.normality, scored_labels);
  }
  double auc = dataset_auc(evs, tau);
  std::cout << "frame-level AUC " << auc << " (tau " << tau << ", k "
            << (kpercent_arg > 0 ? kpercent_arg : cfg.k_percent) << "%)\n";
  {
    std::ofstream os(outp / "auc.txt");
    os << csv_num(auc) << "\n";
  }

  if (!sweep_name.empty()) {
    SweepRange r = parse_range(sweep_range);
    std::ofstream os(outp / ("sweep_" + sweep_name + ".csv"));
    os << sweep_name << ",auc\n";
    for (double v = r.lo; v <= r.hi + 1e-12; v += r.step) {
      double a;
      if (sweep_name == "tau") {
        a = dataset_auc(evs, v);
      } else if (sweep_name == "kpercent") {
        for (int i = 0; i < 4; ++i)
          if (model->stim.has_bank(i)) model->stim.bank(i).set_k_percent(v);
        a = dataset_auc(run_eval(), tau);
      } else {
        fail_config("unknown sweep '" + sweep_name + "' (tau or kpercent)");
      }
      os << csv_num(v) << "," << csv_num(a) << "\n";
    }
  }
  return 0;
}

int cmd_score(const std::string& frames_dir, const std::string& ckpt,
              const std::string& out, const std::string& cmdline) {
  auto model = load_model(ckpt);
  ModelConfig cfg = model->config();

  VideoEntry v;
  v.name = fs::path(frames_dir).filename().string();
  {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(frames_dir))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) v.frame_paths.push_back(f.string());
  }
  if ((long)v.frame_paths.size() < cfg.frames + 1)
    fail_data("need at least " + std::to_string(cfg.frames + 1) +
              " frames to score, found " + std::to_string(v.frame_paths.size()));

  fs::path outp(out);
  fs::create_directories(outp / "error_maps");
  write_manifest(outp, cfg.to_json(), cfg.seed, cmdline);

  auto frames = load_video(v, cfg.image_size);
  VideoEval ev = score_video(*model, v.name, frames, {});
  FusedScores fused = anomaly_scores(ev.raw, cfg.tau);
  write_video_scores_csv(outp / "scores.csv", ev, fused, false);
  render_score_curve((outp / "curve.png").string(), fused.normality, {});

  for (long start = 0; start + cfg.frames < (long)frames.size(); ++start) {
    ClipSample clip = make_clip(frames, v.name, start, cfg.frames);
    ClipEval ce = eval_clip(*model, clip);
    char buf[48];
    std::snprintf(buf, sizeof(buf), "frame_%04ld.png", clip.target_frame);
    render_error_map((outp / "error_maps" / buf).string(), ce.prediction,
                     clip.target, cfg.image_size, cfg.image_size);
  }
  std::cout << "scored " << ev.raw.sp.size() << " frames -> " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mamba-based video anomaly detection via future-frame prediction"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  std::string cmdline = join_args(argc, argv);

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  std::string s_out, s_spec;
  uint64_t s_seed = 0;
  bool s_force = false;
  synth->add_option("--out", s_out, "output dataset directory")->required();
  synth->add_option("--spec", s_spec, "generator spec JSON");
  synth->add_option("--seed", s_seed, "generator seed");
  synth->add_flag("--force", s_force, "overwrite an existing non-empty directory");

  auto* train = app.add_subcommand("train", "train a model");
  std::string t_data, t_out, t_config, t_preset = "desk";
  long t_steps = -1;
  int64_t t_seed = -1;
  bool t_resume = false;
  std::vector<std::string> t_ablate;
  train->add_option("--data", t_data, "dataset root")->required();
  train->add_option("--out", t_out, "run directory")->required();
  train->add_option("--config", t_config, "model config JSON");
  train->add_option("--preset", t_preset, "config preset: desk or full")
      ->check(CLI::IsMember({"desk", "full"}));
  train->add_option("--steps", t_steps, "override step count");
  train->add_option("--seed", t_seed, "override seed");
  train->add_option("--ablate", t_ablate,
                    "ablation flags (ms_vssb_off ca_vssb_off stfb_off memory_off "
                    "memory_off_lN multi_level_off loss_lp_only baseline ...)");
  train->add_flag("--resume", t_resume, "continue an interrupted run");

  auto* eval = app.add_subcommand("eval", "evaluate on a labeled test split");
  std::string e_data, e_ckpt, e_out;
  double e_tau = -1, e_kpercent = -1;
  std::vector<std::string> e_sweep;
  eval->add_option("--data", e_data, "dataset root")->required();
  eval->add_option("--ckpt", e_ckpt, "checkpoint file")->required();
  eval->add_option("--out", e_out, "output directory")->required();
  eval->add_option("--tau", e_tau, "PSNR/distance trade-off (default: config)");
  eval->add_option("--kpercent", e_kpercent, "memory read sparsity override");
  eval->add_option("--sweep", e_sweep,
                   "hyperparameter sweep: <tau|kpercent> <lo:hi:step>")
      ->expected(2);

  auto* score = app.add_subcommand("score", "score an unlabeled frame folder");
  std::string c_frames, c_ckpt, c_out;
  score->add_option("--frames", c_frames, "folder of frames")->required();
  score->add_option("--ckpt", c_ckpt, "checkpoint file")->required();
  score->add_option("--out", c_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*synth) return cmd_synth(s_out, s_spec, s_seed, s_force, cmdline);
    if (*train) {
      ModelConfig cfg = load_config_arg(t_preset, t_config);
      apply_ablations(cfg, t_ablate);
      if (t_steps >= 0) cfg.steps = t_steps;
      if (t_seed >= 0) cfg.seed = (uint64_t)t_seed;
      cfg.validate();
      return cmd_train(t_data, t_out, cfg, t_resume, cmdline);
    }
    if (*eval)
      return cmd_eval(e_data, e_ckpt, e_out, e_tau, e_kpercent,
                      e_sweep.empty() ? "" : e_sweep[0],
                      e_sweep.empty() ? "" : e_sweep[1], cmdline);
    if (*score) return cmd_score(c_frames, c_ckpt, c_out, cmdline);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.kind() == ErrorKind::Numeric ? 3 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
