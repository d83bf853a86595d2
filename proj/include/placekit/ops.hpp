#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <vector>

#include "placekit/tensor.hpp"

// Differentiable primitives. Shapes follow two conventions: dense tensors
// are row-major; image batches are (N, C, H, W). Heavy kernels (matmul,
// linear, conv) run through Eigen gemm; everything else is plain loops.

namespace placekit::ops {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

namespace detail {

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeMismatch(std::string(op) + ": " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
}

inline void axpy(std::vector<double>& dst, const std::vector<double>& src) {
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  return ad::make_node(
      a.shape(), {a, b},
      [&](ad::Node& n) {
        for (size_t i = 0; i < n.numel(); ++i) n.value[i] = a.data()[i] + b.data()[i];
      },
      [pa = a.node(), pb = b.node()](ad::Node& self) {
        if (pa->requires_grad) {
          pa->ensure_grad();
          detail::axpy(pa->grad, self.grad);
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          detail::axpy(pb->grad, self.grad);
        }
      });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  return ad::make_node(
      a.shape(), {a, b},
      [&](ad::Node& n) {
        for (size_t i = 0; i < n.numel(); ++i) n.value[i] = a.data()[i] - b.data()[i];
      },
      [pa = a.node(), pb = b.node()](ad::Node& self) {
        if (pa->requires_grad) {
          pa->ensure_grad();
          detail::axpy(pa->grad, self.grad);
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          for (size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
        }
      });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  return ad::make_node(
      a.shape(), {a, b},
      [&](ad::Node& n) {
        for (size_t i = 0; i < n.numel(); ++i) n.value[i] = a.data()[i] * b.data()[i];
      },
      [pa = a.node(), pb = b.node()](ad::Node& self) {
        if (pa->requires_grad) {
          pa->ensure_grad();
          for (size_t i = 0; i < self.grad.size(); ++i)
            pa->grad[i] += self.grad[i] * pb->value[i];
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          for (size_t i = 0; i < self.grad.size(); ++i)
            pb->grad[i] += self.grad[i] * pa->value[i];
        }
      });
}

// k*x + c, elementwise with scalar coefficients.
inline Tensor affine(const Tensor& x, double k, double c) {
  return ad::make_node(
      x.shape(), {x},
      [&](ad::Node& n) {
        for (size_t i = 0; i < n.numel(); ++i) n.value[i] = k * x.data()[i] + c;
      },
      [px = x.node(), k](ad::Node& self) {
        px->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += k * self.grad[i];
      });
}

inline Tensor neg(const Tensor& x) { return affine(x, -1.0, 0.0); }

inline Tensor relu(const Tensor& x) {
  return ad::make_node(
      x.shape(), {x},
      [&](ad::Node& n) {
        for (size_t i = 0; i < n.numel(); ++i) n.value[i] = std::max(0.0, x.data()[i]);
      },
      [px = x.node()](ad::Node& self) {
        px->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
          if (px->value[i] > 0.0) px->grad[i] += self.grad[i];
      });
}

inline Tensor leaky_relu(const Tensor& x, double slope = 0.2) {
  return ad::make_node(
      x.shape(), {x},
      [&](ad::Node& n) {
        for (size_t i = 0; i < n.numel(); ++i) {
          const double v = x.data()[i];
          n.value[i] = v > 0.0 ? v : slope * v;
        }
      },
      [px = x.node(), slope](ad::Node& self) {
        px->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
          px->grad[i] += self.grad[i] * (px->value[i] > 0.0 ? 1.0 : slope);
      });
}

inline Tensor tanh_(const Tensor& x) {
  return ad::make_node(
      x.shape(), {x},
      [&](ad::Node& n) {
        for (size_t i = 0; i < n.numel(); ++i) n.value[i] = std::tanh(x.data()[i]);
      },
      [px = x.node()](ad::Node& self) {
        px->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
          px->grad[i] += self.grad[i] * (1.0 - self.value[i] * self.value[i]);
      });
}

inline Tensor sigmoid(const Tensor& x) {
  return ad::make_node(
      x.shape(), {x},
      [&](ad::Node& n) {
        for (size_t i = 0; i < n.numel(); ++i)
          n.value[i] = 1.0 / (1.0 + std::exp(-x.data()[i]));
      },
      [px = x.node()](ad::Node& self) {
        px->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
          px->grad[i] += self.grad[i] * self.value[i] * (1.0 - self.value[i]);
      });
}

inline Tensor exp_(const Tensor& x) {
  return ad::make_node(
      x.shape(), {x},
      [&](ad::Node& n) {
        for (size_t i = 0; i < n.numel(); ++i) n.value[i] = std::exp(x.data()[i]);
      },
      [px = x.node()](ad::Node& self) {
        px->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
          px->grad[i] += self.grad[i] * self.value[i];
      });
}

inline Tensor log_(const Tensor& x) {
  return ad::make_node(
      x.shape(), {x},
      [&](ad::Node& n) {
        for (size_t i = 0; i < n.numel(); ++i) n.value[i] = std::log(x.data()[i]);
      },
      [px = x.node()](ad::Node& self) {
        px->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
          px->grad[i] += self.grad[i] / px->value[i];
      });
}

inline Tensor abs_(const Tensor& x) {
  return ad::make_node(
      x.shape(), {x},
      [&](ad::Node& n) {
        for (size_t i = 0; i < n.numel(); ++i) n.value[i] = std::abs(x.data()[i]);
      },
      [px = x.node()](ad::Node& self) {
        px->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
          px->grad[i] += self.grad[i] * (px->value[i] >= 0.0 ? 1.0 : -1.0);
      });
}

// Clamp with pass-through gradient strictly inside [lo, hi].
inline Tensor clamp(const Tensor& x, double lo, double hi) {
  return ad::make_node(
      x.shape(), {x},
      [&](ad::Node& n) {
        for (size_t i = 0; i < n.numel(); ++i)
          n.value[i] = std::min(hi, std::max(lo, x.data()[i]));
      },
      [px = x.node(), lo, hi](ad::Node& self) {
        px->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
          const double v = px->value[i];
          if (v > lo && v < hi) px->grad[i] += self.grad[i];
        }
      });
}

// Identity forward, no gradient flow.
inline Tensor stop_gradient(const Tensor& x) {
  return Tensor::from_data(x.shape(), x.data(), false);
}

// ---------------------------------------------------------------- reductions

inline Tensor sum(const Tensor& x) {
  return ad::make_node(
      {1}, {x},
      [&](ad::Node& n) {
        double acc = 0.0;
        for (double v : x.data()) acc += v;
        n.value[0] = acc;
      },
      [px = x.node()](ad::Node& self) {
        px->ensure_grad();
        const double g = self.grad[0];
        for (auto& gi : px->grad) gi += g;
      });
}

inline Tensor mean(const Tensor& x) {
  const double inv = 1.0 / static_cast<double>(x.numel());
  return ad::make_node(
      {1}, {x},
      [&](ad::Node& n) {
        double acc = 0.0;
        for (double v : x.data()) acc += v;
        n.value[0] = acc * inv;
      },
      [px = x.node(), inv](ad::Node& self) {
        px->ensure_grad();
        const double g = self.grad[0] * inv;
        for (auto& gi : px->grad) gi += g;
      });
}

// ---------------------------------------------------------------- structure

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeMismatch("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  return ad::make_node(
      std::move(shape), {x},
      [&](ad::Node& n) { n.value = x.data(); },
      [px = x.node()](ad::Node& self) {
        px->ensure_grad();
        detail::axpy(px->grad, self.grad);
      });
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeMismatch("concat: empty input list");
  const Shape& s0 = parts[0].shape();
  const int nd = static_cast<int>(s0.size());
  if (axis < 0 || axis >= nd) throw ShapeMismatch("concat: bad axis");
  Shape out = s0;
  out[static_cast<size_t>(axis)] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (static_cast<int>(s.size()) != nd) throw ShapeMismatch("concat: rank mismatch");
    for (int d = 0; d < nd; ++d)
      if (d != axis && s[static_cast<size_t>(d)] != s0[static_cast<size_t>(d)])
        throw ShapeMismatch("concat: " + shape_str(s) + " vs " + shape_str(s0));
    out[static_cast<size_t>(axis)] += s[static_cast<size_t>(axis)];
  }
  // outer = product of dims before axis, inner = product after.
  size_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= static_cast<size_t>(s0[static_cast<size_t>(d)]);
  for (int d = axis + 1; d < nd; ++d) inner *= static_cast<size_t>(s0[static_cast<size_t>(d)]);
  std::vector<size_t> strides;  // per-part copy width along axis
  strides.reserve(parts.size());
  for (const auto& p : parts)
    strides.push_back(static_cast<size_t>(p.shape()[static_cast<size_t>(axis)]) * inner);
  const size_t out_stride = static_cast<size_t>(out[static_cast<size_t>(axis)]) * inner;

  return ad::make_node(
      out, parts,
      [&](ad::Node& n) {
        size_t off = 0;
        for (size_t k = 0; k < parts.size(); ++k) {
          const auto& src = parts[k].data();
          for (size_t o = 0; o < outer; ++o)
            std::copy(src.begin() + static_cast<long>(o * strides[k]),
                      src.begin() + static_cast<long>((o + 1) * strides[k]),
                      n.value.begin() + static_cast<long>(o * out_stride + off));
          off += strides[k];
        }
      },
      [outer, strides, out_stride](ad::Node& self) {
        size_t off = 0;
        for (size_t k = 0; k < self.parents.size(); ++k) {
          ad::Node* p = self.parents[k].get();
          if (p->requires_grad) {
            p->ensure_grad();
            for (size_t o = 0; o < outer; ++o) {
              const double* g = self.grad.data() + o * out_stride + off;
              double* dst = p->grad.data() + o * strides[k];
              for (size_t i = 0; i < strides[k]; ++i) dst[i] += g[i];
            }
          }
          off += strides[k];
        }
      });
}

// Softmax over the last axis.
inline Tensor softmax(const Tensor& x) {
  const Shape& s = x.shape();
  const size_t m = static_cast<size_t>(s.back());
  const size_t rows = x.numel() / m;
  return ad::make_node(
      s, {x},
      [&](ad::Node& n) {
        for (size_t r = 0; r < rows; ++r) {
          const double* in = x.data().data() + r * m;
          double* out = n.value.data() + r * m;
          double mx = in[0];
          for (size_t i = 1; i < m; ++i) mx = std::max(mx, in[i]);
          double z = 0.0;
          for (size_t i = 0; i < m; ++i) z += (out[i] = std::exp(in[i] - mx));
          for (size_t i = 0; i < m; ++i) out[i] /= z;
        }
      },
      [px = x.node(), rows, m](ad::Node& self) {
        px->ensure_grad();
        for (size_t r = 0; r < rows; ++r) {
          const double* y = self.value.data() + r * m;
          const double* g = self.grad.data() + r * m;
          double* gx = px->grad.data() + r * m;
          double dot = 0.0;
          for (size_t i = 0; i < m; ++i) dot += g[i] * y[i];
          for (size_t i = 0; i < m; ++i) gx[i] += y[i] * (g[i] - dot);
        }
      });
}

// ---------------------------------------------------------------- linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0))
    throw ShapeMismatch("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  return ad::make_node(
      {m, n}, {a, b},
      [&](ad::Node& node) {
        ECMap A(a.data().data(), m, k), B(b.data().data(), k, n);
        EMap C(node.value.data(), m, n);
        C.noalias() = A * B;
      },
      [pa = a.node(), pb = b.node(), m, k, n](ad::Node& self) {
        ECMap G(self.grad.data(), m, n);
        if (pa->requires_grad) {
          pa->ensure_grad();
          ECMap B(pb->value.data(), k, n);
          EMap GA(pa->grad.data(), m, k);
          GA.noalias() += G * B.transpose();
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          ECMap A(pa->value.data(), m, k);
          EMap GB(pb->grad.data(), k, n);
          GB.noalias() += A.transpose() * G;
        }
      });
}

// y = x W + b with x:(n,in), W:(in,out), b:(out).
inline Tensor linear(const Tensor& x, const Tensor& W, const Tensor& b) {
  if (x.shape().size() != 2 || W.shape().size() != 2 || x.dim(1) != W.dim(0) ||
      b.numel() != static_cast<size_t>(W.dim(1)))
    throw ShapeMismatch("linear: " + shape_str(x.shape()) + " x " + shape_str(W.shape()) +
                        " + " + shape_str(b.shape()));
  const int n = x.dim(0), in = x.dim(1), out = W.dim(1);
  return ad::make_node(
      {n, out}, {x, W, b},
      [&](ad::Node& node) {
        ECMap X(x.data().data(), n, in), Wm(W.data().data(), in, out);
        EMap Y(node.value.data(), n, out);
        Y.noalias() = X * Wm;
        for (int r = 0; r < n; ++r)
          for (int c = 0; c < out; ++c) node.value[static_cast<size_t>(r) * out + c] += b.data()[static_cast<size_t>(c)];
      },
      [px = x.node(), pw = W.node(), pbias = b.node(), n, in, out](ad::Node& self) {
        ECMap G(self.grad.data(), n, out);
        if (px->requires_grad) {
          px->ensure_grad();
          ECMap Wm(pw->value.data(), in, out);
          EMap GX(px->grad.data(), n, in);
          GX.noalias() += G * Wm.transpose();
        }
        if (pw->requires_grad) {
          pw->ensure_grad();
          ECMap X(px->value.data(), n, in);
          EMap GW(pw->grad.data(), in, out);
          GW.noalias() += X.transpose() * G;
        }
        if (pbias->requires_grad) {
          pbias->ensure_grad();
          for (int r = 0; r < n; ++r)
            for (int c = 0; c < out; ++c)
              pbias->grad[static_cast<size_t>(c)] += self.grad[static_cast<size_t>(r) * out + c];
        }
      });
}

// ---------------------------------------------------------------- convolution

namespace detail {

// im2col for a 3x3 kernel; cols is (Cin*9) x (Ho*Wo), row-major.
inline void im2col3x3(const double* x, int C, int H, int W, int stride, int pad,
                      int Ho, int Wo, double* cols) {
  const size_t plane = static_cast<size_t>(H) * W;
  const size_t opix = static_cast<size_t>(Ho) * Wo;
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        double* row = cols + (static_cast<size_t>(c) * 9 + ky * 3 + kx) * opix;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride + ky - pad;
          double* dst = row + static_cast<size_t>(oy) * Wo;
          if (iy < 0 || iy >= H) {
            std::fill(dst, dst + Wo, 0.0);
            continue;
          }
          const double* src = x + static_cast<size_t>(c) * plane + static_cast<size_t>(iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride + kx - pad;
            dst[ox] = (ix >= 0 && ix < W) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

inline void col2im3x3_add(const double* cols, int C, int H, int W, int stride, int pad,
                          int Ho, int Wo, double* gx) {
  const size_t plane = static_cast<size_t>(H) * W;
  const size_t opix = static_cast<size_t>(Ho) * Wo;
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const double* row = cols + (static_cast<size_t>(c) * 9 + ky * 3 + kx) * opix;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= H) continue;
          double* dst = gx + static_cast<size_t>(c) * plane + static_cast<size_t>(iy) * W;
          const double* src = row + static_cast<size_t>(oy) * Wo;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride + kx - pad;
            if (ix >= 0 && ix < W) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// 3x3 convolution over (N,C,H,W) with weight (Cout,Cin,3,3) and bias (Cout).
inline Tensor conv3x3(const Tensor& x, const Tensor& W, const Tensor& b, int stride = 1,
                      int pad = 1) {
  if (x.shape().size() != 4 || W.shape().size() != 4 || W.dim(2) != 3 || W.dim(3) != 3)
    throw ShapeMismatch("conv3x3: " + shape_str(x.shape()) + " w " + shape_str(W.shape()));
  if (x.dim(1) != W.dim(1))
    throw ShapeMismatch("conv3x3 channels: " + shape_str(x.shape()) + " w " +
                        shape_str(W.shape()));
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), Wd = x.dim(3);
  const int Cout = W.dim(0);
  const int Ho = (H + 2 * pad - 3) / stride + 1;
  const int Wo = (Wd + 2 * pad - 3) / stride + 1;
  const size_t opix = static_cast<size_t>(Ho) * Wo;
  const size_t in_plane = static_cast<size_t>(C) * H * Wd;
  const int K = C * 9;

  return ad::make_node(
      {N, Cout, Ho, Wo}, {x, W, b},
      [&](ad::Node& node) {
        std::vector<double> cols(static_cast<size_t>(K) * opix);
        ECMap Wm(W.data().data(), Cout, K);
        for (int nidx = 0; nidx < N; ++nidx) {
          detail::im2col3x3(x.data().data() + nidx * in_plane, C, H, Wd, stride, pad, Ho,
                            Wo, cols.data());
          ECMap Cm(cols.data(), K, static_cast<int>(opix));
          EMap Y(node.value.data() + static_cast<size_t>(nidx) * Cout * opix, Cout,
                 static_cast<int>(opix));
          Y.noalias() = Wm * Cm;
          for (int co = 0; co < Cout; ++co)
            Y.row(co).array() += b.data()[static_cast<size_t>(co)];
        }
      },
      [px = x.node(), pw = W.node(), pb = b.node(), N, C, H, Wd, Cout, Ho, Wo, stride,
       pad, K, opix, in_plane](ad::Node& self) {
        std::vector<double> cols(static_cast<size_t>(K) * opix);
        std::vector<double> gcols;
        if (px->requires_grad) {
          px->ensure_grad();
          gcols.resize(static_cast<size_t>(K) * opix);
        }
        if (pw->requires_grad) pw->ensure_grad();
        if (pb->requires_grad) pb->ensure_grad();
        for (int nidx = 0; nidx < N; ++nidx) {
          ECMap G(self.grad.data() + static_cast<size_t>(nidx) * Cout * opix, Cout,
                  static_cast<int>(opix));
          if (pw->requires_grad || px->requires_grad)
            detail::im2col3x3(px->value.data() + nidx * in_plane, C, H, Wd, stride, pad,
                              Ho, Wo, cols.data());
          if (pw->requires_grad) {
            ECMap Cm(cols.data(), K, static_cast<int>(opix));
            EMap GW(pw->grad.data(), Cout, K);
            GW.noalias() += G * Cm.transpose();
          }
          if (pb->requires_grad) {
            for (int co = 0; co < Cout; ++co)
              pb->grad[static_cast<size_t>(co)] += G.row(co).sum();
          }
          if (px->requires_grad) {
            ECMap Wm(pw->value.data(), Cout, K);
            EMap GC(gcols.data(), K, static_cast<int>(opix));
            GC.noalias() = Wm.transpose() * G;
            detail::col2im3x3_add(gcols.data(), C, H, Wd, stride, pad, Ho, Wo,
                                  px->grad.data() + nidx * in_plane);
          }
        }
      });
}

// ---------------------------------------------------------------- pooling

// Adaptive average pooling over (N,C,H,W) to (N,C,oh,ow); bins follow the
// floor/ceil split so unequal regions still tile the input exactly.
inline Tensor adaptive_avg_pool(const Tensor& x, int oh, int ow) {
  if (x.shape().size() != 4) throw ShapeMismatch("adaptive_avg_pool: " + shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (oh < 1 || ow < 1 || oh > H || ow > W)
    throw ShapeMismatch("adaptive_avg_pool: " + shape_str(x.shape()) + " -> " +
                        std::to_string(oh) + "x" + std::to_string(ow));
  auto bin0 = [](int i, int in, int out) { return (i * in) / out; };
  auto bin1 = [](int i, int in, int out) { return ((i + 1) * in + out - 1) / out; };
  return ad::make_node(
      {N, C, oh, ow}, {x},
      [&](ad::Node& node) {
        const size_t plane = static_cast<size_t>(H) * W;
        size_t o = 0;
        for (int nc = 0; nc < N * C; ++nc) {
          const double* src = x.data().data() + static_cast<size_t>(nc) * plane;
          for (int i = 0; i < oh; ++i) {
            const int y0 = bin0(i, H, oh), y1 = bin1(i, H, oh);
            for (int j = 0; j < ow; ++j) {
              const int x0 = bin0(j, W, ow), x1 = bin1(j, W, ow);
              double acc = 0.0;
              for (int y = y0; y < y1; ++y)
                for (int xx = x0; xx < x1; ++xx) acc += src[static_cast<size_t>(y) * W + xx];
              node.value[o++] = acc / ((y1 - y0) * (x1 - x0));
            }
          }
        }
      },
      [px = x.node(), N, C, H, W, oh, ow, bin0, bin1](ad::Node& self) {
        px->ensure_grad();
        const size_t plane = static_cast<size_t>(H) * W;
        size_t o = 0;
        for (int nc = 0; nc < N * C; ++nc) {
          double* gx = px->grad.data() + static_cast<size_t>(nc) * plane;
          for (int i = 0; i < oh; ++i) {
            const int y0 = bin0(i, H, oh), y1 = bin1(i, H, oh);
            for (int j = 0; j < ow; ++j) {
              const int x0 = bin0(j, W, ow), x1 = bin1(j, W, ow);
              const double g = self.grad[o++] / ((y1 - y0) * (x1 - x0));
              for (int y = y0; y < y1; ++y)
                for (int xx = x0; xx < x1; ++xx) gx[static_cast<size_t>(y) * W + xx] += g;
            }
          }
        }
      });
}

// ---------------------------------------------------------------- batchnorm

// Mutable per-layer statistics; not part of the autodiff graph.
struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  explicit BatchNormState(int channels = 0)
      : running_mean(static_cast<size_t>(channels), 0.0),
        running_var(static_cast<size_t>(channels), 1.0) {}
};

// Batch normalization over (N,C,H,W) per channel. Training mode uses batch
// statistics and updates `state`; eval mode reads the running averages.
inline Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                        BatchNormState& state, bool training) {
  if (x.shape().size() != 4) throw ShapeMismatch("batchnorm: " + shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (gamma.numel() != static_cast<size_t>(C) || beta.numel() != static_cast<size_t>(C) ||
      state.running_mean.size() != static_cast<size_t>(C))
    throw ShapeMismatch("batchnorm params: C=" + std::to_string(C));
  const size_t plane = static_cast<size_t>(H) * W;
  const size_t cstride = static_cast<size_t>(C) * plane;
  const double cnt = static_cast<double>(N) * plane;

  auto mean_var = std::make_shared<std::vector<double>>();  // per channel: mean, inv_std
  return ad::make_node(
      x.shape(), {x, gamma, beta},
      [&](ad::Node& node) {
        mean_var->assign(static_cast<size_t>(2 * C), 0.0);
        for (int c = 0; c < C; ++c) {
          double mu, var;
          if (training) {
            double s = 0.0, s2 = 0.0;
            for (int n = 0; n < N; ++n) {
              const double* src = x.data().data() + n * cstride + c * plane;
              for (size_t i = 0; i < plane; ++i) {
                s += src[i];
                s2 += src[i] * src[i];
              }
            }
            mu = s / cnt;
            var = s2 / cnt - mu * mu;
            if (var < 0.0) var = 0.0;
            state.running_mean[c] = (1.0 - state.momentum) * state.running_mean[c] +
                                    state.momentum * mu;
            state.running_var[c] = (1.0 - state.momentum) * state.running_var[c] +
                                   state.momentum * var;
          } else {
            mu = state.running_mean[c];
            var = state.running_var[c];
          }
          const double inv_std = 1.0 / std::sqrt(var + state.eps);
          (*mean_var)[c] = mu;
          (*mean_var)[C + c] = inv_std;
          const double g = gamma.data()[static_cast<size_t>(c)];
          const double bvalue = beta.data()[static_cast<size_t>(c)];
          for (int n = 0; n < N; ++n) {
            const double* src = x.data().data() + n * cstride + c * plane;
            double* dst = node.value.data() + n * cstride + c * plane;
            for (size_t i = 0; i < plane; ++i) dst[i] = (src[i] - mu) * inv_std * g + bvalue;
          }
        }
      },
      [px = x.node(), pg = gamma.node(), pbeta = beta.node(), mean_var, N, C, plane,
       cstride, cnt, training](ad::Node& self) {
        if (px->requires_grad) px->ensure_grad();
        if (pg->requires_grad) pg->ensure_grad();
        if (pbeta->requires_grad) pbeta->ensure_grad();
        for (int c = 0; c < C; ++c) {
          const double mu = (*mean_var)[c];
          const double inv_std = (*mean_var)[C + c];
          const double g = pg->value[static_cast<size_t>(c)];
          double sum_gy = 0.0, sum_gy_xhat = 0.0;
          for (int n = 0; n < N; ++n) {
            const double* xi = px->value.data() + n * cstride + c * plane;
            const double* gy = self.grad.data() + n * cstride + c * plane;
            for (size_t i = 0; i < plane; ++i) {
              sum_gy += gy[i];
              sum_gy_xhat += gy[i] * (xi[i] - mu) * inv_std;
            }
          }
          if (pg->requires_grad) pg->grad[static_cast<size_t>(c)] += sum_gy_xhat;
          if (pbeta->requires_grad) pbeta->grad[static_cast<size_t>(c)] += sum_gy;
          if (px->requires_grad) {
            const double m_gy = sum_gy / cnt;
            const double m_gy_xhat = sum_gy_xhat / cnt;
            for (int n = 0; n < N; ++n) {
              const double* xi = px->value.data() + n * cstride + c * plane;
              const double* gy = self.grad.data() + n * cstride + c * plane;
              double* gx = px->grad.data() + n * cstride + c * plane;
              if (training) {
                for (size_t i = 0; i < plane; ++i) {
                  const double xhat = (xi[i] - mu) * inv_std;
                  gx[i] += g * inv_std * (gy[i] - m_gy - xhat * m_gy_xhat);
                }
              } else {
                for (size_t i = 0; i < plane; ++i) gx[i] += g * inv_std * gy[i];
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------- grid sample

// Inverse-warp bilinear sampling: each output pixel's normalized coordinate
// (pixel centers mapped to [-1,1], x rightward, y downward) goes through
// theta to a source coordinate; out-of-bounds reads are zero. src is
// (N,C,H,W), theta is (N,2,3); output matches src dimensions.
inline Tensor grid_sample_bilinear(const Tensor& src, const Tensor& theta) {
  if (src.shape().size() != 4 || theta.shape().size() != 3 || theta.dim(1) != 2 ||
      theta.dim(2) != 3 || theta.dim(0) != src.dim(0))
    throw ShapeMismatch("grid_sample: " + shape_str(src.shape()) + " theta " +
                        shape_str(theta.shape()));
  const int N = src.dim(0), C = src.dim(1), H = src.dim(2), W = src.dim(3);
  const size_t plane = static_cast<size_t>(H) * W;
  const size_t cstride = static_cast<size_t>(C) * plane;

  auto sample_plane = [=](const double* s, double xp, double yp) {
    const int x0 = static_cast<int>(std::floor(xp)), y0 = static_cast<int>(std::floor(yp));
    const double fx = xp - x0, fy = yp - y0;
    double acc = 0.0;
    for (int dy = 0; dy < 2; ++dy) {
      const int y = y0 + dy;
      if (y < 0 || y >= H) continue;
      const double wy = dy ? fy : 1.0 - fy;
      for (int dx = 0; dx < 2; ++dx) {
        const int x = x0 + dx;
        if (x < 0 || x >= W) continue;
        acc += s[static_cast<size_t>(y) * W + x] * wy * (dx ? fx : 1.0 - fx);
      }
    }
    return acc;
  };

  return ad::make_node(
      src.shape(), {src, theta},
      [&](ad::Node& node) {
        for (int n = 0; n < N; ++n) {
          const double* th = theta.data().data() + static_cast<size_t>(n) * 6;
          for (int i = 0; i < H; ++i) {
            const double yo = 2.0 * (i + 0.5) / H - 1.0;
            for (int j = 0; j < W; ++j) {
              const double xo = 2.0 * (j + 0.5) / W - 1.0;
              const double xs = th[0] * xo + th[1] * yo + th[2];
              const double ys = th[3] * xo + th[4] * yo + th[5];
              const double xp = (xs + 1.0) * W / 2.0 - 0.5;
              const double yp = (ys + 1.0) * H / 2.0 - 0.5;
              for (int c = 0; c < C; ++c)
                node.value[n * cstride + c * plane + static_cast<size_t>(i) * W + j] =
                    sample_plane(src.data().data() + n * cstride + c * plane, xp, yp);
            }
          }
        }
      },
      [ps = src.node(), pt = theta.node(), N, C, H, W, plane, cstride](ad::Node& self) {
        if (ps->requires_grad) ps->ensure_grad();
        if (pt->requires_grad) pt->ensure_grad();
        for (int n = 0; n < N; ++n) {
          const double* th = pt->value.data() + static_cast<size_t>(n) * 6;
          double* gth = pt->requires_grad ? pt->grad.data() + static_cast<size_t>(n) * 6
                                          : nullptr;
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
              double d_xp = 0.0, d_yp = 0.0;
              for (int c = 0; c < C; ++c) {
                const size_t base = n * cstride + c * plane;
                const double g =
                    self.grad[base + static_cast<size_t>(i) * W + j];
                if (g == 0.0) continue;
                const double* s = ps->value.data() + base;
                double v[2][2] = {{0, 0}, {0, 0}};
                for (int dy = 0; dy < 2; ++dy) {
                  const int y = y0 + dy;
                  if (y < 0 || y >= H) continue;
                  for (int dx = 0; dx < 2; ++dx) {
                    const int x = x0 + dx;
                    if (x < 0 || x >= W) continue;
                    v[dy][dx] = s[static_cast<size_t>(y) * W + x];
                    if (ps->requires_grad) {
                      const double wgt = (dy ? fy : 1.0 - fy) * (dx ? fx : 1.0 - fx);
                      ps->grad[base + static_cast<size_t>(y) * W + x] += g * wgt;
                    }
                  }
                }
                d_xp += g * ((v[0][1] - v[0][0]) * (1.0 - fy) + (v[1][1] - v[1][0]) * fy);
                d_yp += g * ((v[1][0] - v[0][0]) * (1.0 - fx) + (v[1][1] - v[0][1]) * fx);
              }
              if (gth) {
                const double d_xs = d_xp * W / 2.0;
                const double d_ys = d_yp * H / 2.0;
                gth[0] += d_xs * xo;
                gth[1] += d_xs * yo;
                gth[2] += d_xs;
                gth[3] += d_ys * xo;
                gth[4] += d_ys * yo;
                gth[5] += d_ys;
              }
            }
          }
        }
      });
}

}  // namespace placekit::ops
