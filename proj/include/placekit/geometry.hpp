#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "placekit/image.hpp"
#include "placekit/ops.hpp"
#include "placekit/tensor.hpp"

// Placement geometry. Every placement is a triple t = (scale ratio,
// relative x, relative y), each in (0,1): the foreground canvas is scaled
// uniformly to (t_r*W, t_r*H) and its top-left corner lands at
// x = t_x*(W-w), y = t_y*(H-h). Warping follows the inverse STN
// convention: output pixel centers map through theta to source
// coordinates in normalized [-1,1] space (x rightward, y downward), with
// bilinear interpolation and zero reads outside the source.

namespace placekit::geometry {

inline constexpr double kParamEps = 1e-4;

struct EmptyMask : std::runtime_error {
  EmptyMask() : std::runtime_error("bbox_from_mask: no pixel above threshold") {}
};

// The placement triple; construction clamps each field to
// [kParamEps, 1-kParamEps] so 1/t_r and 1/(1-t) stay finite.
struct TransformParams {
  double t_r = 0.5;
  double t_x = 0.5;
  double t_y = 0.5;

  TransformParams() = default;
  TransformParams(double r, double x, double y)
      : t_r(clamp01(r)), t_x(clamp01(x)), t_y(clamp01(y)) {}

  static double clamp01(double v) {
    return std::clamp(v, kParamEps, 1.0 - kParamEps);
  }

  std::array<double, 3> as_array() const { return {t_r, t_x, t_y}; }
};

// Row-major 2x3 affine matrix.
struct AffineMatrix {
  std::array<double, 6> m{1, 0, 0, 0, 1, 0};

  double& operator()(int r, int c) { return m[static_cast<size_t>(r) * 3 + c]; }
  double operator()(int r, int c) const { return m[static_cast<size_t>(r) * 3 + c]; }
  static AffineMatrix identity() { return AffineMatrix{}; }
};

struct BBox {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;
};

// theta(t) = [[1/t_r, 0, (1-2 t_x)(1/t_r - 1)], [0, 1/t_r, (1-2 t_y)(1/t_r - 1)]]
inline AffineMatrix theta_from_params(const TransformParams& t) {
  AffineMatrix th;
  const double inv_r = 1.0 / t.t_r;
  th(0, 0) = inv_r;
  th(0, 1) = 0.0;
  th(0, 2) = (1.0 - 2.0 * t.t_x) * (inv_r - 1.0);
  th(1, 0) = 0.0;
  th(1, 1) = inv_r;
  th(1, 2) = (1.0 - 2.0 * t.t_y) * (inv_r - 1.0);
  return th;
}

// Inverse of theta_from_params on its image (requires theta(0,0) != 1 for
// the translation fields; callers pass the 0.5 convention otherwise).
inline TransformParams params_from_theta(const AffineMatrix& th) {
  const double t_r = 1.0 / th(0, 0);
  double t_x = 0.5, t_y = 0.5;
  if (th(0, 0) != 1.0) {
    t_x = (1.0 - th(0, 2) / (th(0, 0) - 1.0)) / 2.0;
    t_y = (1.0 - th(1, 2) / (th(1, 1) - 1.0)) / 2.0;
  }
  return TransformParams(t_r, t_x, t_y);
}

namespace detail {

// Shared bilinear warp kernel; the autodiff op and the plain image path
// both run through this, so their outputs are bit-identical.
inline void warp_plane(const double* src, int H, int W, const std::array<double, 6>& th,
                       double* dst) {
  for (int i = 0; i < H; ++i) {
    const double yo = 2.0 * (i + 0.5) / H - 1.0;
    for (int j = 0; j < W; ++j) {
      const double xo = 2.0 * (j + 0.5) / W - 1.0;
      const double xs = th[0] * xo + th[1] * yo + th[2];
      const double ys = th[3] * xo + th[4] * yo + th[5];
      const double xp = (xs + 1.0) * W / 2.0 - 0.5;
      const double yp = (ys + 1.0) * H / 2.0 - 0.5;
      const int x0 = static_cast<int>(std::floor(xp));
      const int y0 = static_cast<int>(std::floor(yp));
      const double fx = xp - x0, fy = yp - y0;
      double acc = 0.0;
      for (int dy = 0; dy < 2; ++dy) {
        const int y = y0 + dy;
        if (y < 0 || y >= H) continue;
        const double wy = dy ? fy : 1.0 - fy;
        for (int dx = 0; dx < 2; ++dx) {
          const int x = x0 + dx;
          if (x < 0 || x >= W) continue;
          acc += src[static_cast<size_t>(y) * W + x] * wy * (dx ? fx : 1.0 - fx);
        }
      }
      dst[static_cast<size_t>(i) * W + j] = acc;
    }
  }
}

}  // namespace detail

// Inverse-warp `src` through `theta`; output dimensions equal the source's.
inline PlanarTensor affine_sample(const PlanarTensor& src, const AffineMatrix& theta) {
  if (src.empty()) throw std::invalid_argument("affine_sample: empty source");
  PlanarTensor out(src.channels, src.height, src.width);
  for (int c = 0; c < src.channels; ++c)
    detail::warp_plane(src.data.data() + c * src.plane(), src.height, src.width,
                       theta.m, out.data.data() + c * out.plane());
  return out;
}

// Composite (I_c, M_c): M_c = warp(mask), I_c = M_c*warp(fg) + (1-M_c)*bg.
inline std::pair<PlanarTensor, PlanarTensor> composite(const PlanarTensor& bg,
                                                       const PlanarTensor& fg,
                                                       const PlanarTensor& mask,
                                                       const TransformParams& t) {
  if (bg.height != fg.height || bg.width != fg.width || mask.height != fg.height ||
      mask.width != fg.width || mask.channels != 1)
    throw ShapeMismatch("composite: misaligned inputs");
  const AffineMatrix th = theta_from_params(t);
  PlanarTensor mc = affine_sample(mask, th);
  PlanarTensor fgw = affine_sample(fg, th);
  PlanarTensor ic(bg.channels, bg.height, bg.width);
  const size_t plane = ic.plane();
  for (int c = 0; c < bg.channels; ++c)
    for (size_t i = 0; i < plane; ++i) {
      const double m = mc.data[i];
      ic.data[c * plane + i] = m * fgw.data[c * plane + i] + (1.0 - m) * bg.data[c * plane + i];
    }
  return {std::move(ic), std::move(mc)};
}

// Tightest box covering all pixels >= threshold of a 1-channel mask.
inline BBox bbox_from_mask(const PlanarTensor& mask, double threshold = 0.5) {
  int x0 = mask.width, y0 = mask.height, x1 = -1, y1 = -1;
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x)
      if (mask.at(0, y, x) >= threshold) {
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x);
        y1 = std::max(y1, y);
      }
  if (x1 < 0) throw EmptyMask();
  return BBox{x0, y0, x1 - x0 + 1, y1 - y0 + 1};
}

// Ground-truth parameter recovery. When the box spans a full axis the
// placement along it is immaterial and defined as centered (0.5).
inline TransformParams tgt_from_bbox(const BBox& b, int W, int H) {
  const double t_r = std::max(static_cast<double>(b.w) / W, static_cast<double>(b.h) / H);
  const double t_x = b.w < W ? static_cast<double>(b.x) / (W - b.w) : 0.5;
  const double t_y = b.h < H ? static_cast<double>(b.y) / (H - b.h) : 0.5;
  return TransformParams(t_r, t_x, t_y);
}

// Aspect-preserving preprocessing: the foreground (and its mask) keep
// their aspect ratio relative to the background and are zero-padded to
// side x side; the background is resized directly.
struct PreprocessedPair {
  PlanarTensor fg;
  PlanarTensor mask;
  PlanarTensor bg;
};

inline PreprocessedPair preprocess_pair(const PlanarTensor& fg_raw,
                                        const PlanarTensor& mask_raw,
                                        const PlanarTensor& bg_raw, int side = 256) {
  if (fg_raw.empty() || mask_raw.empty() || bg_raw.empty())
    throw std::invalid_argument("preprocess_pair: empty input");
  const double fg_ratio = static_cast<double>(fg_raw.width) / fg_raw.height;
  const double bg_ratio = static_cast<double>(bg_raw.width) / bg_raw.height;
  int new_w, new_h;
  if (fg_ratio > bg_ratio) {
    new_w = side;
    new_h = std::max(1, static_cast<int>(std::lround(
                            static_cast<double>(side) * fg_raw.height * bg_raw.width /
                            (static_cast<double>(fg_raw.width) * bg_raw.height))));
  } else {
    new_h = side;
    new_w = std::max(1, static_cast<int>(std::lround(
                            static_cast<double>(side) * fg_raw.width * bg_raw.height /
                            (static_cast<double>(fg_raw.height) * bg_raw.width))));
  }
  PlanarTensor fg_rs = resize_bilinear(fg_raw, new_h, new_w);
  PlanarTensor mask_rs = resize_bilinear(mask_raw, new_h, new_w);

  PreprocessedPair out;
  out.fg = PlanarTensor(fg_raw.channels, side, side, 0.0);
  out.mask = PlanarTensor(1, side, side, 0.0);
  const int pad_y = (side - new_h) / 2;
  const int pad_x = (side - new_w) / 2;
  for (int c = 0; c < fg_rs.channels; ++c)
    for (int y = 0; y < new_h; ++y)
      for (int x = 0; x < new_w; ++x) out.fg.at(c, y + pad_y, x + pad_x) = fg_rs.at(c, y, x);
  for (int y = 0; y < new_h; ++y)
    for (int x = 0; x < new_w; ++x) out.mask.at(0, y + pad_y, x + pad_x) = mask_rs.at(0, y, x);
  out.bg = resize_bilinear(bg_raw, side, side);
  return out;
}

// ------------------------------------------------------------- graph ops

// theta(t) as a differentiable op: t is (N,3), result (N,2,3).
inline Tensor theta_op(const Tensor& t) {
  if (t.shape().size() != 2 || t.dim(1) != 3)
    throw ShapeMismatch("theta_op: " + shape_str(t.shape()));
  const int N = t.dim(0);
  return ad::make_node(
      {N, 2, 3}, {t},
      [&](ad::Node& node) {
        for (int n = 0; n < N; ++n) {
          const double* p = t.data().data() + static_cast<size_t>(n) * 3;
          double* th = node.value.data() + static_cast<size_t>(n) * 6;
          const double inv_r = 1.0 / p[0];
          th[0] = inv_r;
          th[1] = 0.0;
          th[2] = (1.0 - 2.0 * p[1]) * (inv_r - 1.0);
          th[3] = 0.0;
          th[4] = inv_r;
          th[5] = (1.0 - 2.0 * p[2]) * (inv_r - 1.0);
        }
      },
      [pt = t.node(), N](ad::Node& self) {
        pt->ensure_grad();
        for (int n = 0; n < N; ++n) {
          const double* p = pt->value.data() + static_cast<size_t>(n) * 3;
          const double* g = self.grad.data() + static_cast<size_t>(n) * 6;
          double* gp = pt->grad.data() + static_cast<size_t>(n) * 3;
          const double inv_r = 1.0 / p[0];
          const double d_inv_r = -inv_r * inv_r;  // d(1/t_r)/dt_r
          gp[0] += g[0] * d_inv_r + g[4] * d_inv_r +
                   g[2] * (1.0 - 2.0 * p[1]) * d_inv_r +
                   g[5] * (1.0 - 2.0 * p[2]) * d_inv_r;
          gp[1] += g[2] * (-2.0) * (inv_r - 1.0);
          gp[2] += g[5] * (-2.0) * (inv_r - 1.0);
        }
      });
}

// m*fg + (1-m)*bg with a single-channel m broadcast across channels.
inline Tensor blend(const Tensor& bg, const Tensor& fg, const Tensor& m) {
  if (bg.shape() != fg.shape() || m.shape().size() != 4 || m.dim(1) != 1 ||
      m.dim(0) != bg.dim(0) || m.dim(2) != bg.dim(2) || m.dim(3) != bg.dim(3))
    throw ShapeMismatch("blend: " + shape_str(bg.shape()) + " mask " + shape_str(m.shape()));
  const int N = bg.dim(0), C = bg.dim(1);
  const size_t plane = static_cast<size_t>(bg.dim(2)) * bg.dim(3);
  return ad::make_node(
      bg.shape(), {bg, fg, m},
      [&](ad::Node& node) {
        for (int n = 0; n < N; ++n) {
          const double* mp = m.data().data() + n * plane;
          for (int c = 0; c < C; ++c) {
            const size_t off = (static_cast<size_t>(n) * C + c) * plane;
            for (size_t i = 0; i < plane; ++i)
              node.value[off + i] =
                  mp[i] * fg.data()[off + i] + (1.0 - mp[i]) * bg.data()[off + i];
          }
        }
      },
      [pbg = bg.node(), pfg = fg.node(), pm = m.node(), N, C, plane](ad::Node& self) {
        if (pbg->requires_grad) pbg->ensure_grad();
        if (pfg->requires_grad) pfg->ensure_grad();
        if (pm->requires_grad) pm->ensure_grad();
        for (int n = 0; n < N; ++n) {
          const double* mp = pm->value.data() + n * plane;
          for (int c = 0; c < C; ++c) {
            const size_t off = (static_cast<size_t>(n) * C + c) * plane;
            for (size_t i = 0; i < plane; ++i) {
              const double g = self.grad[off + i];
              if (pfg->requires_grad) pfg->grad[off + i] += g * mp[i];
              if (pbg->requires_grad) pbg->grad[off + i] += g * (1.0 - mp[i]);
              if (pm->requires_grad)
                pm->grad[n * plane + i] +=
                    g * (pfg->value[off + i] - pbg->value[off + i]);
            }
          }
        }
      });
}

// Differentiable composite over batched tensors: returns (I_c, M_c).
// bg/fg are (N,3,H,W), mask (N,1,H,W), t (N,3) in (0,1).
inline std::pair<Tensor, Tensor> composite_graph(const Tensor& bg, const Tensor& fg,
                                                 const Tensor& mask, const Tensor& t) {
  Tensor tc = ops::clamp(t, kParamEps, 1.0 - kParamEps);
  Tensor theta = theta_op(tc);
  Tensor mc = ops::grid_sample_bilinear(mask, theta);
  Tensor fgw = ops::grid_sample_bilinear(fg, theta);
  Tensor ic = blend(bg, fgw, mc);
  return {ic, mc};
}

}  // namespace placekit::geometry
