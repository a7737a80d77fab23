#include "stn/data.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "stn/rng.hpp"

namespace fs = std::filesystem;

namespace stn {

// ---- clips -----------------------------------------------------------------

void ClipSample::validate() const {
  if (frames.size() < 2) fail_data("clip: needs at least 2 frames");
  if (diffs.size() != frames.size() - 1)
    fail_data("clip: diff count must be frame count - 1");
  for (size_t j = 0; j < diffs.size(); ++j) {
    check_same_shape("clip", frames[j], frames[j + 1]);
    check_same_shape("clip", frames[j], diffs[j]);
    for (long i = 0; i < diffs[j].numel(); ++i)
      if (diffs[j][i] != frames[j + 1][i] - frames[j][i])
        fail_data("clip: diffs are not exact forward differences");
  }
  check_same_shape("clip", frames[0], target);
  for (const auto& f : frames)
    for (long i = 0; i < f.numel(); ++i)
      if (f[i] < -1.0f || f[i] > 1.0f)
        fail_data("clip: frame values outside [-1, 1]");
}

static Tensor<float> stack_channels(const std::vector<Tensor<float>>& maps) {
  long L = maps[0].rows();
  long per = maps[0].cols();
  Tensor<float> out({L, per * (long)maps.size()});
  for (size_t j = 0; j < maps.size(); ++j)
    for (long r = 0; r < L; ++r)
      for (long c = 0; c < per; ++c) out(r, (long)j * per + c) = maps[j](r, c);
  return out;
}

Tensor<float> ClipSample::stacked_frames() const { return stack_channels(frames); }
Tensor<float> ClipSample::stacked_diffs() const { return stack_channels(diffs); }

std::vector<Tensor<float>> rgb_difference(const std::vector<Tensor<float>>& frames) {
  if (frames.size() < 2) fail_data("rgb_difference: needs at least 2 frames");
  std::vector<Tensor<float>> diffs;
  diffs.reserve(frames.size() - 1);
  for (size_t j = 0; j + 1 < frames.size(); ++j) {
    check_same_shape("rgb_difference", frames[j], frames[j + 1]);
    Tensor<float> d(frames[j].shape());
    for (long i = 0; i < d.numel(); ++i) d[i] = frames[j + 1][i] - frames[j][i];
    diffs.push_back(std::move(d));
  }
  return diffs;
}

ClipSample make_clip(const std::vector<Tensor<float>>& frames,
                     const std::string& video_name, long start, long k) {
  if (k < 2) fail_data("make_clip: window needs at least 2 frames");
  if (start < 0 || start + k >= (long)frames.size())
    fail_data("make_clip: window at " + std::to_string(start) + " of length " +
              std::to_string(k) + " has no target frame in a " +
              std::to_string(frames.size()) + "-frame video");
  ClipSample clip;
  clip.video = video_name;
  clip.target_frame = start + k;
  for (long j = 0; j < k; ++j) clip.frames.push_back(frames[start + j]);
  clip.diffs = rgb_difference(clip.frames);
  clip.target = frames[start + k];
  return clip;
}

std::vector<WindowRef> list_windows(const std::vector<VideoEntry>& videos, long k) {
  std::vector<WindowRef> out;
  for (int v = 0; v < (int)videos.size(); ++v) {
    long n = (long)videos[v].frame_paths.size();
    for (long s = 0; s + k < n; ++s) out.push_back({v, s});
  }
  return out;
}

// ---- frame I/O ---------------------------------------------------------------

Tensor<float> load_frame(const std::string& path, long size) {
  cv::Mat img = cv::imread(path, cv::IMREAD_COLOR);
  if (img.empty()) fail_data("cannot read image: " + path);
  if (img.rows != size || img.cols != size)
    cv::resize(img, img, cv::Size((int)size, (int)size), 0, 0, cv::INTER_LINEAR);
  Tensor<float> out({size * size, 3});
  for (long y = 0; y < size; ++y) {
    const cv::Vec3b* row = img.ptr<cv::Vec3b>((int)y);
    for (long x = 0; x < size; ++x) {
      // OpenCV is BGR; we store RGB.
      out(y * size + x, 0) = 2.0f * (row[x][2] / 255.0f) - 1.0f;
      out(y * size + x, 1) = 2.0f * (row[x][1] / 255.0f) - 1.0f;
      out(y * size + x, 2) = 2.0f * (row[x][0] / 255.0f) - 1.0f;
    }
  }
  return out;
}

std::vector<Tensor<float>> load_video(const VideoEntry& video, long size) {
  std::vector<Tensor<float>> frames;
  frames.reserve(video.frame_paths.size());
  for (const auto& p : video.frame_paths) frames.push_back(load_frame(p, size));
  return frames;
}

// ---- indexing ----------------------------------------------------------------

static bool is_frame_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
  static const char* kExts[] = {".png", ".jpg", ".jpeg", ".bmp",
                                ".ppm", ".pgm", ".tif",  ".tiff"};
  for (const char* e : kExts)
    if (ext == e) return true;
  return false;
}

std::vector<int> expand_intervals(const std::string& text, long frame_count) {
  std::vector<int> labels(frame_count, 0);
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos)
      continue;
    long a = 0, b = 0;
    char dash = 0;
    std::istringstream ls(line);
    if (!(ls >> a >> dash >> b) || dash != '-')
      fail_data("bad interval line '" + line + "' (expected 'start-end')");
    if (a < 1 || b < a || b > frame_count)
      fail_data("interval " + std::to_string(a) + "-" + std::to_string(b) +
                " out of range for " + std::to_string(frame_count) + " frames");
    for (long f = a - 1; f < b; ++f) labels[f] = 1;
  }
  return labels;
}

static std::vector<VideoEntry> index_split(const fs::path& frames_dir,
                                           const fs::path& labels_dir,
                                           bool labeled) {
  if (!fs::is_directory(frames_dir))
    fail_data("missing frames directory: " + frames_dir.string());
  std::vector<fs::path> video_dirs;
  for (const auto& e : fs::directory_iterator(frames_dir))
    if (e.is_directory()) video_dirs.push_back(e.path());
  std::sort(video_dirs.begin(), video_dirs.end());
  std::vector<VideoEntry> out;
  for (const auto& vd : video_dirs) {
    VideoEntry v;
    v.name = vd.filename().string();
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(vd))
      if (e.is_regular_file() && is_frame_file(e.path())) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) fail_data("empty video folder: " + vd.string());
    for (const auto& f : files) v.frame_paths.push_back(f.string());
    if (labeled) {
      long n = (long)v.frame_paths.size();
      fs::path txt = labels_dir / (v.name + ".txt");
      fs::path ivl = labels_dir / (v.name + ".intervals");
      if (fs::exists(txt)) {
        std::ifstream is(txt);
        std::string line;
        while (std::getline(is, line)) {
          if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos)
            continue;
          int l;
          try {
            l = std::stoi(line);
          } catch (const std::exception&) {
            fail_data("bad label line '" + line + "' in " + txt.string());
          }
          if (l != 0 && l != 1) fail_data("label not 0/1 in " + txt.string());
          v.labels.push_back(l);
        }
        if ((long)v.labels.size() != n)
          fail_data("label file " + txt.string() + " has " +
                    std::to_string(v.labels.size()) + " entries for " +
                    std::to_string(n) + " frames");
      } else if (fs::exists(ivl)) {
        std::ifstream is(ivl);
        std::stringstream ss;
        ss << is.rdbuf();
        v.labels = expand_intervals(ss.str(), n);
      } else {
        fail_data("missing labels for test video '" + v.name + "' (expected " +
                  txt.string() + " or " + ivl.string() + ")");
      }
    }
    out.push_back(std::move(v));
  }
  return out;
}

DatasetIndex index_dataset(const std::string& root) {
  DatasetIndex idx;
  idx.root = root;
  fs::path r(root);
  if (!fs::is_directory(r)) fail_data("dataset root does not exist: " + root);
  bool has_train = fs::is_directory(r / "training" / "frames");
  bool has_test = fs::is_directory(r / "testing" / "frames");
  if (!has_train && !has_test)
    fail_data("no training/frames or testing/frames under " + root);
  if (has_train)
    idx.train = index_split(r / "training" / "frames", {}, /*labeled=*/false);
  if (has_test)
    idx.test = index_split(r / "testing" / "frames", r / "testing" / "labels",
                           /*labeled=*/true);
  return idx;
}

std::string DatasetIndex::report() const {
  std::ostringstream os;
  auto count_frames = [](const std::vector<VideoEntry>& vs) {
    long n = 0;
    for (const auto& v : vs) n += (long)v.frame_paths.size();
    return n;
  };
  os << "dataset " << root << ": " << train.size() << " train videos ("
     << count_frames(train) << " frames), " << test.size() << " test videos ("
     << count_frames(test) << " frames)";
  long anomalous = 0;
  for (const auto& v : test)
    for (int l : v.labels) anomalous += l;
  if (!test.empty()) os << ", " << anomalous << " anomalous frames";
  return os.str();
}

// ---- synthetic generator ------------------------------------------------------

nlohmann::json SynthSpec::to_json() const {
  nlohmann::json j;
  j["width"] = width;
  j["height"] = height;
  j["train_videos"] = train_videos;
  j["test_videos"] = test_videos;
  j["frames"] = frames;
  j["sprites"] = sprites;
  j["v_max"] = v_max;
  j["fast_mult"] = fast_mult;
  j["anomaly_types"] = anomaly_types;
  j["anomaly_start_min"] = anomaly_start_min;
  j["anomaly_start_max"] = anomaly_start_max;
  return j;
}

SynthSpec SynthSpec::from_json(const nlohmann::json& j) {
  SynthSpec s;
  auto get = [&](const char* k, auto& field) {
    if (j.contains(k)) field = j.at(k).template get<std::decay_t<decltype(field)>>();
  };
  get("width", s.width);
  get("height", s.height);
  get("train_videos", s.train_videos);
  get("test_videos", s.test_videos);
  get("frames", s.frames);
  get("sprites", s.sprites);
  get("v_max", s.v_max);
  get("fast_mult", s.fast_mult);
  get("anomaly_types", s.anomaly_types);
  get("anomaly_start_min", s.anomaly_start_min);
  get("anomaly_start_max", s.anomaly_start_max);
  s.validate();
  return s;
}

void SynthSpec::validate() const {
  if (width < 16 || height < 16) fail_config("synth: resolution too small");
  if (frames < 8) fail_config("synth: needs at least 8 frames per video");
  if (sprites < 1) fail_config("synth: needs at least one sprite");
  if (anomaly_start_min < 1 || anomaly_start_max >= frames ||
      anomaly_start_min > anomaly_start_max)
    fail_config("synth: anomaly start range invalid");
  for (const auto& t : anomaly_types)
    if (t != "fast" && t != "shape" && t != "flash")
      fail_config("synth: unknown anomaly type '" + t + "'");
  if (test_videos > 0 && anomaly_types.empty())
    fail_config("synth: test videos require at least one anomaly type");
}

namespace {

struct Sprite {
  double x, y, vx, vy, r;
  double color[3];
  // anomaly state (test videos only)
  std::string anomaly;  // "", "fast", "shape", "flash"
  long anomaly_start = -1;
};

struct Background {
  double base[3];
  double f1x, f1y, p1, a1;
  double f2x, f2y, p2, a2;

  double at(long x, long y, int c) const {
    double v = base[c] +
               a1 * std::sin(2.0 * M_PI * (f1x * x + f1y * y) + p1 + 0.7 * c) +
               a2 * std::sin(2.0 * M_PI * (f2x * x + f2y * y) + p2 + 1.3 * c);
    return std::clamp(v, 0.12, 0.62);
  }
};

Background make_background(Rng& rng) {
  Background bg;
  for (int c = 0; c < 3; ++c) bg.base[c] = rng.uniform(0.3, 0.45);
  bg.f1x = rng.uniform(0.01, 0.05);
  bg.f1y = rng.uniform(0.01, 0.05);
  bg.p1 = rng.uniform(0.0, 2.0 * M_PI);
  bg.a1 = rng.uniform(0.03, 0.07);
  bg.f2x = rng.uniform(0.05, 0.12);
  bg.f2y = rng.uniform(0.05, 0.12);
  bg.p2 = rng.uniform(0.0, 2.0 * M_PI);
  bg.a2 = rng.uniform(0.02, 0.05);
  return bg;
}

Sprite make_sprite(Rng& rng, const SynthSpec& spec) {
  Sprite s;
  double scale = std::min(spec.width, spec.height) / 64.0;
  s.r = rng.uniform(5.0, 8.0) * scale;
  s.x = rng.uniform(s.r + 1, spec.width - 2 - s.r);
  s.y = rng.uniform(s.r + 1, spec.height - 2 - s.r);
  double speed = rng.uniform(0.4 * spec.v_max, spec.v_max) * scale;
  double ang = rng.uniform(0.0, 2.0 * M_PI);
  s.vx = speed * std::cos(ang);
  s.vy = speed * std::sin(ang);
  for (int c = 0; c < 3; ++c) s.color[c] = rng.uniform(0.75, 1.0);
  return s;
}

void step_sprite(Sprite& s, long W, long H) {
  s.x += s.vx;
  s.y += s.vy;
  if (s.x < s.r) {
    s.x = 2 * s.r - s.x;
    s.vx = -s.vx;
  }
  if (s.x > W - 1 - s.r) {
    s.x = 2 * (W - 1 - s.r) - s.x;
    s.vx = -s.vx;
  }
  if (s.y < s.r) {
    s.y = 2 * s.r - s.y;
    s.vy = -s.vy;
  }
  if (s.y > H - 1 - s.r) {
    s.y = 2 * (H - 1 - s.r) - s.y;
    s.vy = -s.vy;
  }
}

// Anti-aliased composite of one sprite onto the float image.
void draw_sprite(std::vector<double>& img, long W, long H, const Sprite& s,
                 long frame, bool square) {
  bool visible = true;
  if (s.anomaly == "flash" && frame >= s.anomaly_start)
    visible = (((frame - s.anomaly_start) / 2) % 2) == 0;
  if (!visible) return;
  long x0 = std::max(0L, (long)std::floor(s.x - s.r - 1));
  long x1 = std::min(W - 1, (long)std::ceil(s.x + s.r + 1));
  long y0 = std::max(0L, (long)std::floor(s.y - s.r - 1));
  long y1 = std::min(H - 1, (long)std::ceil(s.y + s.r + 1));
  for (long y = y0; y <= y1; ++y)
    for (long x = x0; x <= x1; ++x) {
      double cov;
      if (square) {
        double d = std::max(std::abs(x - s.x), std::abs(y - s.y));
        cov = std::clamp(s.r + 0.5 - d, 0.0, 1.0);
      } else {
        double d = std::hypot(x - s.x, y - s.y);
        cov = std::clamp(s.r + 0.5 - d, 0.0, 1.0);
      }
      if (cov <= 0) continue;
      double* px = &img[(y * W + x) * 3];
      for (int c = 0; c < 3; ++c)
        px[c] = px[c] * (1.0 - cov) + s.color[c] * cov;
    }
}

void write_png(const fs::path& path, const std::vector<double>& img, long W,
               long H) {
  cv::Mat m((int)H, (int)W, CV_8UC3);
  for (long y = 0; y < H; ++y) {
    cv::Vec3b* row = m.ptr<cv::Vec3b>((int)y);
    for (long x = 0; x < W; ++x) {
      const double* px = &img[(y * W + x) * 3];
      for (int c = 0; c < 3; ++c) {
        double v = std::clamp(px[c], 0.0, 1.0);
        row[x][2 - c] = (uchar)std::lround(v * 255.0);  // RGB -> BGR
      }
    }
  }
  if (!cv::imwrite(path.string(), m))
    fail_data("cannot write image: " + path.string());
}

}  // namespace

void synthesize_dataset(const std::string& out_dir, const SynthSpec& spec,
                        uint64_t seed) {
  spec.validate();
  fs::path root(out_dir);
  fs::create_directories(root / "training" / "frames");
  fs::create_directories(root / "testing" / "frames");
  fs::create_directories(root / "testing" / "labels");

  nlohmann::json meta;
  meta["spec"] = spec.to_json();
  meta["seed"] = seed;
  meta["videos"] = nlohmann::json::array();

  long total = spec.train_videos + spec.test_videos;
  for (long vi = 0; vi < total; ++vi) {
    bool is_test = vi >= spec.train_videos;
    long local = is_test ? vi - spec.train_videos : vi;
    char name[32];
    std::snprintf(name, sizeof(name), "%s_%02ld", is_test ? "test" : "train", local);

    Rng rng(seed * 1000003ULL + (uint64_t)vi * 7919ULL + 17ULL);
    Background bg = make_background(rng);
    std::vector<Sprite> sprites;
    for (long s = 0; s < spec.sprites; ++s) sprites.push_back(make_sprite(rng, spec));

    long anomaly_start = -1;
    std::string anomaly_type;
    if (is_test) {
      anomaly_type = spec.anomaly_types[local % spec.anomaly_types.size()];
      anomaly_start = spec.anomaly_start_min +
                      rng.uniform_int(spec.anomaly_start_max - spec.anomaly_start_min + 1);
      Sprite& a = sprites.back();
      a.anomaly = anomaly_type;
      a.anomaly_start = anomaly_start;
    }

    fs::path vdir = root / (is_test ? "testing" : "training") / "frames" / name;
    fs::create_directories(vdir);

    nlohmann::json vj;
    vj["name"] = name;
    vj["anomaly"] = anomaly_type;
    vj["anomaly_start"] = anomaly_start;  // 0-based first anomalous frame
    vj["sprites"] = nlohmann::json::array();
    for (const auto& s : sprites)
      vj["sprites"].push_back({{"x0", s.x},
                               {"y0", s.y},
                               {"vx", s.vx},
                               {"vy", s.vy},
                               {"r", s.r},
                               {"color", {s.color[0], s.color[1], s.color[2]}}});

    std::vector<double> img((size_t)spec.width * spec.height * 3);
    for (long f = 0; f < spec.frames; ++f) {
      for (long y = 0; y < spec.height; ++y)
        for (long x = 0; x < spec.width; ++x)
          for (int c = 0; c < 3; ++c)
            img[(y * spec.width + x) * 3 + c] = bg.at(x, y, c);
      for (auto& s : sprites) {
        bool anomalous_now = !s.anomaly.empty() && f >= s.anomaly_start;
        bool square = anomalous_now && s.anomaly == "shape";
        draw_sprite(img, spec.width, spec.height, s, f, square);
      }
      char fname[32];
      std::snprintf(fname, sizeof(fname), "%04ld.png", f);
      write_png(vdir / fname, img, spec.width, spec.height);

      // advance trajectories; the fast anomaly re-targets velocity once
      for (auto& s : sprites) {
        if (s.anomaly == "fast" && f + 1 == s.anomaly_start) {
          double scale = std::min(spec.width, spec.height) / 64.0;
          double speed = spec.fast_mult * spec.v_max * scale;
          double ang = rng.uniform(0.0, 2.0 * M_PI);
          s.vx = speed * std::cos(ang);
          s.vy = speed * std::sin(ang);
        }
        step_sprite(s, spec.width, spec.height);
      }
    }

    if (is_test) {
      std::ofstream txt(root / "testing" / "labels" / (std::string(name) + ".txt"));
      for (long f = 0; f < spec.frames; ++f)
        txt << (f >= anomaly_start ? 1 : 0) << "\n";
      std::ofstream ivl(root / "testing" / "labels" /
                        (std::string(name) + ".intervals"));
      ivl << (anomaly_start + 1) << "-" << spec.frames << "\n";
    }
    meta["videos"].push_back(std::move(vj));
  }

  std::ofstream mf(root / "synth_meta.json");
  mf << meta.dump(2) << "\n";
}

}  // namespace stn
