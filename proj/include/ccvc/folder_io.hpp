#pragma once

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "ccvc/datagen.hpp"

// Folder-layout datasets: images/<stem>.png|jpg and labels/<stem>.png, labels
// being 8-bit single-channel id maps with 255 = ignore.

namespace ccvc {

namespace fs_detail {

inline bool is_image_file(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

}  // namespace fs_detail

inline std::vector<Scene> load_folder_dataset(const std::string& images_dir,
                                              const std::string& labels_dir, int class_count) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(images_dir)) {
    throw std::runtime_error("load_folder_dataset: images directory '" + images_dir +
                             "' does not exist");
  }
  if (!fs::is_directory(labels_dir)) {
    throw std::runtime_error("load_folder_dataset: labels directory '" + labels_dir +
                             "' does not exist");
  }
  if (class_count < 2 || class_count > 255) {
    throw std::invalid_argument("load_folder_dataset: class_count must be in [2,255]");
  }

  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(images_dir)) {
    if (entry.is_regular_file() && fs_detail::is_image_file(entry.path())) {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end(),
            [](const fs::path& a, const fs::path& b) { return a.stem() < b.stem(); });

  std::vector<Scene> scenes;
  scenes.reserve(files.size());
  for (const auto& img_path : files) {
    const std::string stem = img_path.stem().string();
    const fs::path label_path = fs::path(labels_dir) / (stem + ".png");
    if (!fs::exists(label_path)) {
      throw std::runtime_error("load_folder_dataset: missing label file for stem '" + stem +
                               "'");
    }
    cv::Mat img = cv::imread(img_path.string(), cv::IMREAD_COLOR);
    if (img.empty()) {
      throw std::runtime_error("load_folder_dataset: cannot read image '" + img_path.string() +
                               "'");
    }
    cv::Mat label = cv::imread(label_path.string(), cv::IMREAD_UNCHANGED);
    if (label.empty()) {
      throw std::runtime_error("load_folder_dataset: cannot read label '" +
                               label_path.string() + "'");
    }
    if (label.channels() != 1 || label.depth() != CV_8U) {
      throw std::runtime_error("load_folder_dataset: label '" + label_path.string() +
                               "' must be 8-bit single channel");
    }
    if (label.rows != img.rows || label.cols != img.cols) {
      throw std::runtime_error("load_folder_dataset: size mismatch for stem '" + stem + "'");
    }

    Scene scene;
    scene.id = std::hash<std::string>{}(stem);
    scene.image = Tensor<float>(1, 3, img.rows, img.cols);
    const std::size_t plane = static_cast<std::size_t>(img.rows) * img.cols;
    for (int y = 0; y < img.rows; ++y) {
      const cv::Vec3b* row = img.ptr<cv::Vec3b>(y);
      for (int x = 0; x < img.cols; ++x) {
        // BGR on disk, RGB in memory
        scene.image[0 * plane + y * img.cols + x] = row[x][2] / 255.0f;
        scene.image[1 * plane + y * img.cols + x] = row[x][1] / 255.0f;
        scene.image[2 * plane + y * img.cols + x] = row[x][0] / 255.0f;
      }
    }
    scene.label = LabelMap(img.rows, img.cols);
    for (int y = 0; y < img.rows; ++y) {
      const std::uint8_t* row = label.ptr<std::uint8_t>(y);
      for (int x = 0; x < img.cols; ++x) {
        const std::uint8_t id = row[x];
        if (id != kIgnoreLabel && id >= class_count) {
          throw std::runtime_error("load_folder_dataset: label '" + label_path.string() +
                                   "' contains out-of-range id " + std::to_string(id));
        }
        scene.label.at(y, x) = id;
      }
    }
    scenes.push_back(std::move(scene));
  }
  return scenes;
}

// Caches scenes in the folder layout (stems are zero-padded indices).
inline void save_folder_dataset(const std::vector<Scene>& scenes, const std::string& root) {
  namespace fs = std::filesystem;
  const fs::path images = fs::path(root) / "images";
  const fs::path labels = fs::path(root) / "labels";
  fs::create_directories(images);
  fs::create_directories(labels);
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const Scene& s = scenes[i];
    char stem[16];
    std::snprintf(stem, sizeof(stem), "%06zu", i);
    const int h = s.image.h(), w = s.image.w();
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    cv::Mat img(h, w, CV_8UC3);
    for (int y = 0; y < h; ++y) {
      cv::Vec3b* row = img.ptr<cv::Vec3b>(y);
      for (int x = 0; x < w; ++x) {
        auto to8 = [&](int c) {
          return cv::saturate_cast<std::uint8_t>(
              std::lround(s.image[c * plane + y * w + x] * 255.0f));
        };
        row[x] = cv::Vec3b(to8(2), to8(1), to8(0));
      }
    }
    cv::imwrite((images / (std::string(stem) + ".png")).string(), img);
    if (!s.label.empty()) {
      cv::Mat lab(h, w, CV_8UC1);
      for (int y = 0; y < h; ++y) {
        std::uint8_t* row = lab.ptr<std::uint8_t>(y);
        for (int x = 0; x < w; ++x) row[x] = s.label.at(y, x);
      }
      cv::imwrite((labels / (std::string(stem) + ".png")).string(), lab);
    }
  }
}

}  // namespace ccvc
