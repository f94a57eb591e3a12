#pragma once

// Training data ingestion: a directory of HR PNGs becomes a seeded stream of
// (LR, HR) crop pairs. LR is the bicubic downscale of the HR crop.

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "hdwsr/errors.hpp"
#include "hdwsr/png_io.hpp"
#include "hdwsr/presr.hpp"
#include "hdwsr/rng.hpp"
#include "hdwsr/tensor.hpp"

namespace hdwsr {

inline std::vector<std::string> list_pngs(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IngestError("'" + dir + "' is not a directory");
  std::vector<std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
    if (ext == ".png") out.push_back(e.path().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

// Loads every usable image, skipping (with a warning) files that fail to
// decode or are smaller than the crop size. No usable image is fatal.
template <class S>
std::vector<Tensor<S>> load_hr_images(const std::string& dir, Index min_side,
                                      std::ostream& warn = std::cerr) {
  std::vector<Tensor<S>> images;
  for (const std::string& path : list_pngs(dir)) {
    Tensor<double> img;
    try {
      img = read_png_rgb(path);
    } catch (const Error& e) {
      warn << "warning: skipping '" << path << "': " << e.what() << "\n";
      continue;
    }
    if (img.height() < min_side || img.width() < min_side) {
      warn << "warning: skipping '" << path << "': " << img.height() << "x" << img.width()
           << " is smaller than " << min_side << "x" << min_side << "\n";
      continue;
    }
    images.push_back(img.template cast<S>());
  }
  if (images.empty())
    throw IngestError("no usable training images in '" + dir + "' (need at least " +
                      std::to_string(min_side) + "x" + std::to_string(min_side) + " PNGs)");
  return images;
}

template <class S>
struct TrainPair {
  Tensor<S> lr;  // (3, patch/scale, patch/scale)
  Tensor<S> hr;  // (3, patch, patch)
};

// Seeded crop sampler. Image choice and crop corner both come from one RNG
// stream, so (seed, directory contents) determine the pair sequence.
template <class S>
class PairStream {
 public:
  PairStream(std::vector<Tensor<S>> images, Index patch, Index scale, std::uint64_t seed)
      : images_(std::move(images)), patch_(patch), scale_(scale), rng_(seed) {
    if (images_.empty()) throw IngestError("PairStream: no images");
    if (patch_ % scale_ != 0) throw ConfigError("PairStream: patch must be divisible by scale");
  }

  TrainPair<S> next() {
    const auto pick = static_cast<std::size_t>(rng_.uniform_int(0, static_cast<std::int64_t>(images_.size()) - 1));
    const Tensor<S>& img = images_[pick];
    const Index top = rng_.uniform_int(0, img.height() - patch_);
    const Index left = rng_.uniform_int(0, img.width() - patch_);
    TrainPair<S> pair;
    pair.hr = crop(img, top, left, patch_, patch_);
    pair.lr = bicubic_resize(pair.hr, patch_ / scale_, patch_ / scale_);
    pair.lr.array() = pair.lr.array().cwiseMax(S(0)).cwiseMin(S(1));
    return pair;
  }

  Rng& rng() { return rng_; }
  Index image_count() const { return static_cast<Index>(images_.size()); }

 private:
  static Tensor<S> crop(const Tensor<S>& img, Index top, Index left, Index h, Index w) {
    Tensor<S> out({img.channels(), h, w});
    for (Index c = 0; c < img.channels(); ++c)
      out.channel(c) = img.channel(c).block(top, left, h, w);
    return out;
  }

  std::vector<Tensor<S>> images_;
  Index patch_;
  Index scale_;
  Rng rng_;
};

}  // namespace hdwsr
