#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "placekit/tensor.hpp"

namespace placekit {

// C x H x W real-valued container, row-major per channel. Images and masks
// hold values in [0,1]; masks have exactly one channel. Feature maps are
// unrestricted.
struct PlanarTensor {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> data;

  PlanarTensor() = default;
  PlanarTensor(int c, int h, int w, double fill = 0.0)
      : channels(c), height(h), width(w),
        data(static_cast<size_t>(c) * h * w, fill) {}

  bool empty() const { return data.empty(); }
  size_t plane() const { return static_cast<size_t>(height) * width; }

  double& at(int c, int y, int x) {
    return data[static_cast<size_t>(c) * plane() + static_cast<size_t>(y) * width + x];
  }
  double at(int c, int y, int x) const {
    return data[static_cast<size_t>(c) * plane() + static_cast<size_t>(y) * width + x];
  }
};

// Bilinear resize with pixel-center alignment; used for raw input images.
inline PlanarTensor resize_bilinear(const PlanarTensor& src, int out_h, int out_w) {
  if (src.empty() || out_h < 1 || out_w < 1)
    throw std::invalid_argument("resize_bilinear: empty input or bad size");
  PlanarTensor out(src.channels, out_h, out_w);
  const double sy = static_cast<double>(src.height) / out_h;
  const double sx = static_cast<double>(src.width) / out_w;
  for (int c = 0; c < src.channels; ++c) {
    for (int i = 0; i < out_h; ++i) {
      const double yp = std::clamp((i + 0.5) * sy - 0.5, 0.0, src.height - 1.0);
      const int y0 = static_cast<int>(yp);
      const int y1 = std::min(y0 + 1, src.height - 1);
      const double fy = yp - y0;
      for (int j = 0; j < out_w; ++j) {
        const double xp = std::clamp((j + 0.5) * sx - 0.5, 0.0, src.width - 1.0);
        const int x0 = static_cast<int>(xp);
        const int x1 = std::min(x0 + 1, src.width - 1);
        const double fx = xp - x0;
        out.at(c, i, j) = (1 - fy) * ((1 - fx) * src.at(c, y0, x0) + fx * src.at(c, y0, x1)) +
                          fy * ((1 - fx) * src.at(c, y1, x0) + fx * src.at(c, y1, x1));
      }
    }
  }
  return out;
}

// Pack planar images into a (N,C,H,W) autodiff tensor. All inputs must
// share channel count and size.
inline Tensor to_tensor(const std::vector<const PlanarTensor*>& imgs) {
  if (imgs.empty()) throw std::invalid_argument("to_tensor: no images");
  const int C = imgs[0]->channels, H = imgs[0]->height, W = imgs[0]->width;
  Tensor t = Tensor::zeros({static_cast<int>(imgs.size()), C, H, W});
  size_t off = 0;
  for (const auto* im : imgs) {
    if (im->channels != C || im->height != H || im->width != W)
      throw ShapeMismatch("to_tensor: mismatched image shapes");
    std::copy(im->data.begin(), im->data.end(), t.data().begin() + static_cast<long>(off));
    off += im->data.size();
  }
  return t;
}

inline Tensor to_tensor(const PlanarTensor& img) { return to_tensor({&img}); }

// Extract sample n of a (N,C,H,W) tensor back into a planar image.
inline PlanarTensor to_planar(const Tensor& t, int n = 0) {
  if (t.shape().size() != 4) throw ShapeMismatch("to_planar: " + shape_str(t.shape()));
  const int C = t.dim(1), H = t.dim(2), W = t.dim(3);
  PlanarTensor out(C, H, W);
  const size_t sz = out.data.size();
  std::copy(t.data().begin() + static_cast<long>(n * sz),
            t.data().begin() + static_cast<long>((n + 1) * sz), out.data.begin());
  return out;
}

// Axis-aligned outline drawing for the attention visualization.
inline void draw_rect_outline(PlanarTensor& img, int x, int y, int w, int h,
                              double r, double g, double b, int thickness = 1) {
  auto put = [&](int yy, int xx) {
    if (yy < 0 || yy >= img.height || xx < 0 || xx >= img.width) return;
    img.at(0, yy, xx) = r;
    if (img.channels > 1) img.at(1, yy, xx) = g;
    if (img.channels > 2) img.at(2, yy, xx) = b;
  };
  for (int t = 0; t < thickness; ++t) {
    for (int xx = x; xx < x + w; ++xx) {
      put(y + t, xx);
      put(y + h - 1 - t, xx);
    }
    for (int yy = y; yy < y + h; ++yy) {
      put(yy, x + t);
      put(yy, x + w - 1 - t);
    }
  }
}

}  // namespace placekit
