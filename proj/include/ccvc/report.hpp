#pragma once

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

// Renders training curves and a summary table from a metrics.jsonl log.

namespace ccvc {

namespace report_detail {

struct Series {
  std::string name;
  std::vector<double> x, y;
  cv::Scalar color;
};

// Fixed-size polyline plot. NaN samples are skipped.
inline void draw_curves(const std::string& path, const std::string& title,
                        const std::vector<Series>& series) {
  const int W = 640, H = 420, ml = 56, mr = 16, mt = 32, mb = 36;
  cv::Mat img(H, W, CV_8UC3, cv::Scalar(255, 255, 255));
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  }
  if (xmin > xmax) {
    xmin = 0;
    xmax = 1;
    ymin = 0;
    ymax = 1;
  }
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;
  const double ypad = 0.05 * (ymax - ymin);
  ymin -= ypad;
  ymax += ypad;

  auto px = [&](double x) {
    return ml + static_cast<int>((x - xmin) / (xmax - xmin) * (W - ml - mr));
  };
  auto py = [&](double y) {
    return H - mb - static_cast<int>((y - ymin) / (ymax - ymin) * (H - mt - mb));
  };

  cv::line(img, {ml, mt}, {ml, H - mb}, cv::Scalar(0, 0, 0));
  cv::line(img, {ml, H - mb}, {W - mr, H - mb}, cv::Scalar(0, 0, 0));
  char buf[64];
  for (int t = 0; t <= 4; ++t) {
    const double yv = ymin + (ymax - ymin) * t / 4.0;
    const double xv = xmin + (xmax - xmin) * t / 4.0;
    std::snprintf(buf, sizeof(buf), "%.3g", yv);
    cv::putText(img, buf, {4, py(yv) + 4}, cv::FONT_HERSHEY_SIMPLEX, 0.35,
                cv::Scalar(60, 60, 60));
    std::snprintf(buf, sizeof(buf), "%.3g", xv);
    cv::putText(img, buf, {px(xv) - 10, H - mb + 16}, cv::FONT_HERSHEY_SIMPLEX, 0.35,
                cv::Scalar(60, 60, 60));
  }
  cv::putText(img, title, {ml, 20}, cv::FONT_HERSHEY_SIMPLEX, 0.5, cv::Scalar(0, 0, 0));

  int legend_y = mt + 14;
  for (const auto& s : series) {
    cv::Point prev(-1, -1);
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i])) {
        prev = {-1, -1};
        continue;
      }
      const cv::Point p(px(s.x[i]), py(s.y[i]));
      if (prev.x >= 0) cv::line(img, prev, p, s.color, 1, cv::LINE_AA);
      prev = p;
    }
    cv::putText(img, s.name, {W - mr - 120, legend_y}, cv::FONT_HERSHEY_SIMPLEX, 0.4, s.color);
    legend_y += 16;
  }
  cv::imwrite(path, img);
}

}  // namespace report_detail

// Reads metrics.jsonl, writes curves/*.png and summary.txt under out_dir.
// A sibling manifest.json (if present) supplies the split column.
inline void report(const std::string& metrics_log, const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::ifstream in(metrics_log);
  if (!in) throw std::runtime_error("report: cannot open '" + metrics_log + "'");

  struct StepRec {
    double step, sup, con, dis, total;
  };
  struct EpochRec {
    double epoch, val_miou, cosine, cfrac, cacc;
  };
  std::vector<StepRec> steps;
  std::vector<EpochRec> epochs;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const std::exception&) {
      throw std::runtime_error("report: malformed log line " + std::to_string(lineno));
    }
    try {
      if (j.contains("step")) {
        steps.push_back({j.at("step").get<double>(), j.at("sup").get<double>(),
                         j.at("con").get<double>(), j.at("dis").get<double>(),
                         j.at("total").get<double>()});
      } else if (j.contains("val_miou")) {
        const auto opt = [&](const char* key) {
          return j.contains(key) && !j.at(key).is_null()
                     ? j.at(key).get<double>()
                     : std::numeric_limits<double>::quiet_NaN();
        };
        epochs.push_back({j.at("epoch").get<double>(), j.at("val_miou").get<double>(),
                          opt("mean_feature_cosine"), opt("confident_frac"),
                          opt("confident_acc")});
      } else {
        throw std::runtime_error("unrecognized record");
      }
    } catch (const std::exception&) {
      throw std::runtime_error("report: malformed log line " + std::to_string(lineno));
    }
  }

  fs::create_directories(fs::path(out_dir) / "curves");

  using report_detail::Series;
  auto xs_of = [](const auto& recs, auto get) {
    std::vector<double> v;
    for (const auto& r : recs) v.push_back(get(r));
    return v;
  };

  if (!steps.empty()) {
    const auto sx = xs_of(steps, [](const StepRec& r) { return r.step; });
    report_detail::draw_curves(
        (fs::path(out_dir) / "curves" / "loss_curves.png").string(), "training losses",
        {{"sup", sx, xs_of(steps, [](const StepRec& r) { return r.sup; }), {180, 60, 60}},
         {"con", sx, xs_of(steps, [](const StepRec& r) { return r.con; }), {60, 140, 60}},
         {"dis", sx, xs_of(steps, [](const StepRec& r) { return r.dis; }), {60, 60, 200}},
         {"total", sx, xs_of(steps, [](const StepRec& r) { return r.total; }), {0, 0, 0}}});
  }
  if (!epochs.empty()) {
    const auto ex = xs_of(epochs, [](const EpochRec& r) { return r.epoch; });
    report_detail::draw_curves(
        (fs::path(out_dir) / "curves" / "val_miou.png").string(), "validation mIoU",
        {{"val_miou", ex, xs_of(epochs, [](const EpochRec& r) { return r.val_miou; }),
          {0, 0, 0}}});
    report_detail::draw_curves(
        (fs::path(out_dir) / "curves" / "feature_cosine.png").string(),
        "inter-branch feature cosine",
        {{"cosine", ex, xs_of(epochs, [](const EpochRec& r) { return r.cosine; }),
          {200, 60, 60}}});
    report_detail::draw_curves(
        (fs::path(out_dir) / "curves" / "confidence.png").string(),
        "confident fraction / accuracy",
        {{"confident_frac", ex, xs_of(epochs, [](const EpochRec& r) { return r.cfrac; }),
          {60, 140, 60}},
         {"confident_acc", ex, xs_of(epochs, [](const EpochRec& r) { return r.cacc; }),
          {60, 60, 200}}});
  }

  std::string split = "-";
  const fs::path manifest = fs::path(metrics_log).parent_path() / "manifest.json";
  if (fs::exists(manifest)) {
    std::ifstream mf(manifest);
    try {
      nlohmann::json j = nlohmann::json::parse(mf);
      if (j.contains("split")) split = j.at("split").get<std::string>();
    } catch (const std::exception&) {
      // manifest is advisory for the report; keep "-"
    }
  }

  std::ofstream summary(fs::path(out_dir) / "summary.txt");
  summary << "split\tepochs\tmIoU\tconfident_frac\tconfident_acc\tmean_cosine\n";
  if (!epochs.empty()) {
    const auto& last = epochs.back();
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%s\t%d\t%.6f\t%.6f\t%.6f\t%.6f\n", split.c_str(),
                  static_cast<int>(epochs.size()), last.val_miou, last.cfrac, last.cacc,
                  last.cosine);
    summary << buf;
  }
}

}  // namespace ccvc
