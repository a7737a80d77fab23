#include "stn/viz.hpp"

#include <algorithm>
#include <cmath>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace stn {

void render_score_curve(const std::string& path,
                        const std::vector<double>& normality,
                        const std::vector<int>& labels) {
  if (normality.empty()) fail_data("render_score_curve: empty sequence");
  const int W = 900, H = 300, ml = 50, mr = 15, mt = 15, mb = 35;
  cv::Mat img(H, W, CV_8UC3, cv::Scalar(255, 255, 255));
  int pw = W - ml - mr, ph = H - mt - mb;
  long n = (long)normality.size();
  auto px = [&](long i) {
    return ml + (n == 1 ? pw / 2 : (int)std::lround((double)i * pw / (n - 1)));
  };
  auto py = [&](double v) {
    return mt + (int)std::lround((1.0 - std::clamp(v, 0.0, 1.0)) * ph);
  };
  if (!labels.empty()) {
    for (long i = 0; i < n && i < (long)labels.size(); ++i)
      if (labels[i]) {
        int x0 = i == 0 ? ml : (px(i - 1) + px(i)) / 2;
        int x1 = i == n - 1 ? ml + pw : (px(i) + px(i + 1)) / 2;
        cv::rectangle(img, {x0, mt}, {x1, mt + ph}, cv::Scalar(210, 210, 255),
                      cv::FILLED);
      }
  }
  cv::rectangle(img, {ml, mt}, {ml + pw, mt + ph}, cv::Scalar(120, 120, 120));
  for (double tick : {0.0, 0.5, 1.0}) {
    int y = py(tick);
    cv::line(img, {ml - 4, y}, {ml, y}, cv::Scalar(80, 80, 80));
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%.1f", tick);
    cv::putText(img, buf, {8, y + 4}, cv::FONT_HERSHEY_SIMPLEX, 0.4,
                cv::Scalar(60, 60, 60));
  }
  cv::putText(img, "frame", {ml + pw / 2 - 20, H - 10}, cv::FONT_HERSHEY_SIMPLEX,
              0.4, cv::Scalar(60, 60, 60));
  for (long i = 1; i < n; ++i)
    cv::line(img, {px(i - 1), py(normality[i - 1])}, {px(i), py(normality[i])},
             cv::Scalar(160, 60, 20), 2, cv::LINE_AA);
  if (!cv::imwrite(path, img)) fail_data("cannot write curve image: " + path);
}

void render_error_map(const std::string& path, const Tensor<float>& pred,
                      const Tensor<float>& target, long H, long W) {
  check_same_shape("render_error_map", pred, target);
  if (pred.rows() != H * W) fail_shape("render_error_map", "rows", H * W, pred.rows());
  cv::Mat img((int)H, (int)W, CV_8UC3);
  for (long y = 0; y < H; ++y) {
    cv::Vec3b* row = img.ptr<cv::Vec3b>((int)y);
    for (long x = 0; x < W; ++x) {
      double e = 0;
      for (long c = 0; c < 3; ++c)
        e += std::abs((double)pred(y * W + x, c) - (double)target(y * W + x, c));
      e /= 3.0;
      double v = std::min(1.0, e / 0.5);
      double r = std::clamp(3.0 * v, 0.0, 1.0);
      double g = std::clamp(3.0 * v - 1.0, 0.0, 1.0);
      double b = std::clamp(3.0 * v - 2.0, 0.0, 1.0);
      row[x] = cv::Vec3b((uchar)std::lround(b * 255), (uchar)std::lround(g * 255),
                         (uchar)std::lround(r * 255));
    }
  }
  if (!cv::imwrite(path, img)) fail_data("cannot write error map: " + path);
}

}  // namespace stn
