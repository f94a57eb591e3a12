#pragma once

#include <cmath>
#include <limits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hdwsr/tensor.hpp"

namespace hdwsr {

// 10*log10(peak^2 / MSE); identical inputs give the +infinity sentinel.
template <class S>
double psnr(const Tensor<S>& a, const Tensor<S>& b, double peak = 1.0) {
  require_same_dims(a, b, "psnr");
  double mse = 0.0;
  for (Index i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    mse += d * d;
  }
  mse /= static_cast<double>(a.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

namespace ssim_detail {

inline const std::vector<double>& gaussian11() {
  static const std::vector<double> w = [] {
    constexpr int n = 11;
    constexpr double sigma = 1.5;
    std::vector<double> v(n * n);
    double sum = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        const double di = i - 5, dj = j - 5;
        v[i * n + j] = std::exp(-(di * di + dj * dj) / (2.0 * sigma * sigma));
        sum += v[i * n + j];
      }
    for (double& x : v) sum > 0 ? x /= sum : x;
    return v;
  }();
  return w;
}

// Mean local SSIM of one channel pair over all fully-valid window positions.
template <class S>
double channel_ssim(const Tensor<S>& a, const Tensor<S>& b, Index ch) {
  constexpr int n = 11;
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const auto& w = gaussian11();
  const Index h = a.height(), wd = a.width();
  double total = 0.0;
  Index count = 0;
  for (Index i = 0; i + n <= h; ++i)
    for (Index j = 0; j + n <= wd; ++j) {
      double mu1 = 0, mu2 = 0, s11 = 0, s22 = 0, s12 = 0;
      for (int di = 0; di < n; ++di)
        for (int dj = 0; dj < n; ++dj) {
          const double wt = w[di * n + dj];
          const double x = static_cast<double>(a(ch, i + di, j + dj));
          const double y = static_cast<double>(b(ch, i + di, j + dj));
          mu1 += wt * x;
          mu2 += wt * y;
          // One shared grouping keeps swap symmetry and self-similarity
          // bitwise exact: s12 reproduces s11 when the inputs coincide.
          s11 += wt * (x * x);
          s22 += wt * (y * y);
          s12 += wt * (x * y);
        }
      const double v1 = s11 - mu1 * mu1;
      const double v2 = s22 - mu2 * mu2;
      const double cov = s12 - mu1 * mu2;
      const double num = (2.0 * mu1 * mu2 + c1) * (2.0 * cov + c2);
      const double den = (mu1 * mu1 + mu2 * mu2 + c1) * (v1 + v2 + c2);
      total += num / den;
      ++count;
    }
  return total / static_cast<double>(count);
}

}  // namespace ssim_detail

// Structural similarity, Gaussian 11x11 sigma 1.5 windows, valid positions
// only. Default averages channels; luminance mode converts RGB to a single
// weighted-luma channel first.
template <class S>
double ssim(const Tensor<S>& a, const Tensor<S>& b, bool luminance = false) {
  require_same_dims(a, b, "ssim");
  if (a.rank() != 3) throw DimensionError("ssim: need (C,H,W) tensors");
  if (a.height() < 11 || a.width() < 11)
    throw DimensionError("ssim: image " + std::to_string(a.height()) + "x" +
                         std::to_string(a.width()) + " smaller than the 11x11 window");
  if (luminance && a.channels() == 3) {
    auto luma = [](const Tensor<S>& img) {
      Tensor<S> y({1, img.height(), img.width()});
      for (Index i = 0; i < img.height(); ++i)
        for (Index j = 0; j < img.width(); ++j)
          y(0, i, j) = static_cast<S>(0.299) * img(0, i, j) +
                       static_cast<S>(0.587) * img(1, i, j) +
                       static_cast<S>(0.114) * img(2, i, j);
      return y;
    };
    return ssim_detail::channel_ssim(luma(a), luma(b), 0);
  }
  double total = 0.0;
  for (Index c = 0; c < a.channels(); ++c)
    total += ssim_detail::channel_ssim(a, b, c);
  return total / static_cast<double>(a.channels());
}

// name=value emission shared by eval and flop reporting; infinities print
// as "inf" for the zero-MSE sentinel.
inline std::string metric_lines(const std::vector<std::pair<std::string, double>>& metrics) {
  std::ostringstream os;
  for (const auto& [name, value] : metrics) {
    os << name << "=";
    if (std::isinf(value))
      os << (value > 0 ? "inf" : "-inf");
    else
      os << value;
    os << "\n";
  }
  return os.str();
}

}  // namespace hdwsr
