#include "xattnres/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

namespace xattnres {

namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMatrix<T>>;

template <typename T>
using NodeT = detail::Node<T>;

template <typename T>
bool wants_grad(const NodeT<T>& self, std::size_t i) {
  return self.inputs[i]->requires_grad;
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
}

struct Dims4 {
  std::size_t b, c, h, w;
  std::size_t plane() const { return h * w; }
};

template <typename T>
Dims4 dims_of(const Tensor<T>& t) {
  const auto& s = t.shape();
  return {s[0], s[1], s[2], s[3]};
}

// Fills `cols` ([C*k*k, Ho*Wo]) from one sample's [C, H, W] plane stack.
// Output columns [lo, hi) whose tap ox + kx - pad lands inside [0, w).
std::pair<std::size_t, std::size_t> valid_columns(std::size_t out_w, std::size_t w, std::size_t kx, std::size_t pad) {
  const std::size_t lo = kx < pad ? pad - kx : 0;
  const std::size_t hi = std::min(out_w, w + pad - kx);
  return {std::min(lo, hi), hi};
}

template <typename T>
void im2col(const T* src, std::size_t channels, std::size_t h, std::size_t w, std::size_t k, std::size_t pad,
            std::size_t out_h, std::size_t out_w, T* cols) {
  const std::size_t out_plane = out_h * out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    const T* plane = src + c * h * w;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = cols + ((c * k + ky) * k + kx) * out_plane;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(pad);
          T* dst = row + oy * out_w;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
            std::fill(dst, dst + out_w, T(0));
            continue;
          }
          const T* line = plane + static_cast<std::size_t>(iy) * w;
          const auto [lo, hi] = valid_columns(out_w, w, kx, pad);
          std::fill(dst, dst + lo, T(0));
          std::copy(line + lo + kx - pad, line + hi + kx - pad, dst + lo);
          std::fill(dst + hi, dst + out_w, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, std::size_t channels, std::size_t h, std::size_t w, std::size_t k, std::size_t pad,
                std::size_t out_h, std::size_t out_w, T* dst) {
  const std::size_t out_plane = out_h * out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    T* plane = dst + c * h * w;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = cols + ((c * k + ky) * k + kx) * out_plane;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          T* line = plane + static_cast<std::size_t>(iy) * w;
          const T* src = row + oy * out_w;
          const auto [lo, hi] = valid_columns(out_w, w, kx, pad);
          T* shifted = line + kx - pad;
          for (std::size_t ox = lo; ox < hi; ++ox) shifted[ox] += src[ox];
        }
      }
    }
  }
}

struct AxisSample {
  std::size_t lo, hi;
  double frac;
};

// Half-pixel-center source coordinates for each output index along one axis.
std::vector<AxisSample> bilinear_axis(std::size_t in, std::size_t out) {
  std::vector<AxisSample> table(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    const auto hi = std::min(lo + 1, in - 1);
    table[i] = {lo, hi, src - static_cast<double>(lo)};
  }
  return table;
}

}  // namespace

template <typename T>
void require_feature_map(const Tensor<T>& t, const char* what) {
  if (t.rank() != 4) {
    throw ShapeError(std::string(what) + ": expected [B,C,H,W], got " + shape_to_string(t.shape()));
  }
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return detail::make_result<T>(a.shape(), std::move(out), "add", {a, b}, [](NodeT<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!wants_grad(self, k)) continue;
      auto g = self.inputs[k]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return detail::make_result<T>(a.shape(), std::move(out), "sub", {a, b}, [](NodeT<T>& self) {
    if (wants_grad(self, 0)) {
      auto g = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants_grad(self, 1)) {
      auto g = self.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return detail::make_result<T>(a.shape(), std::move(out), "mul", {a, b}, [](NodeT<T>& self) {
    const auto& x = self.inputs[0]->value;
    const auto& y = self.inputs[1]->value;
    // Gradients are computed before accumulation so mul(x, x) stays correct.
    std::vector<T> gx, gy;
    if (wants_grad(self, 0)) {
      gx.resize(x.size());
      for (std::size_t i = 0; i < x.size(); ++i) gx[i] = self.grad[i] * y[i];
    }
    if (wants_grad(self, 1)) {
      gy.resize(y.size());
      for (std::size_t i = 0; i < y.size(); ++i) gy[i] = self.grad[i] * x[i];
    }
    if (!gx.empty()) {
      auto g = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gx[i];
    }
    if (!gy.empty()) {
      auto g = self.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  return detail::make_result<T>(a.shape(), std::move(out), "scale", {a}, [factor](NodeT<T>& self) {
    auto g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v = v > T(0) ? v : T(0);
  return detail::make_result<T>(a.shape(), std::move(out), "relu", {a}, [](NodeT<T>& self) {
    const auto& x = self.inputs[0]->value;
    auto g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += x[i] > T(0) ? self.grad[i] : T(0);
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = T(0);
  for (auto v : a.data()) total += v;
  return detail::make_result<T>({1}, {total}, "sum", {a}, [](NodeT<T>& self) {
    auto g = self.inputs[0]->grad_buffer();
    const T up = self.grad[0];
    for (auto& v : g) v += up;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.numel() == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, Padding padding) {
  require_feature_map(input, "conv2d input");
  require_feature_map(weight, "conv2d weight");
  const auto in = dims_of(input);
  const std::size_t out_c = weight.dim(0);
  const std::size_t k = weight.dim(2);
  if (k != weight.dim(3) || (k != 1 && k != 3)) {
    throw ConfigError("conv2d supports 1x1 and 3x3 kernels, got " + shape_to_string(weight.shape()));
  }
  if (weight.dim(1) != in.c) {
    throw ShapeError("conv2d: input has " + std::to_string(in.c) + " channels, weight expects " +
                     std::to_string(weight.dim(1)));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_c)) {
    throw ShapeError("conv2d: bias shape " + shape_to_string(bias.shape()) + " for " + std::to_string(out_c) +
                     " output channels");
  }
  const std::size_t pad = padding == Padding::Same ? k / 2 : 0;
  if (in.h + 2 * pad < k || in.w + 2 * pad < k) throw ShapeError("conv2d: input smaller than kernel");
  const std::size_t out_h = in.h + 2 * pad - k + 1;
  const std::size_t out_w = in.w + 2 * pad - k + 1;
  const std::size_t out_plane = out_h * out_w;
  const std::size_t patch = in.c * k * k;
  const bool direct = (k == 1);  // a 1x1 kernel reads the input planes as its column matrix

  std::vector<T> cols;
  if (!direct) cols.resize(in.b * patch * out_plane);
  std::vector<T> out(in.b * out_c * out_plane);
  ConstMapMat<T> w(weight.data().data(), out_c, patch);
  for (std::size_t b = 0; b < in.b; ++b) {
    const T* src = input.data().data() + b * in.c * in.plane();
    const T* col = src;
    if (!direct) {
      T* dst = cols.data() + b * patch * out_plane;
      im2col(src, in.c, in.h, in.w, k, pad, out_h, out_w, dst);
      col = dst;
    }
    MapMat<T> o(out.data() + b * out_c * out_plane, out_c, out_plane);
    o.noalias() = w * ConstMapMat<T>(col, patch, out_plane);
    if (bias.defined()) {
      const auto bv = bias.data();
      for (std::size_t c = 0; c < out_c; ++c) o.row(c).array() += bv[c];
    }
  }

  std::vector<Tensor<T>> inputs{input, weight};
  if (bias.defined()) inputs.push_back(bias);
  Shape shape{in.b, out_c, out_h, out_w};
  return detail::make_result<T>(
      std::move(shape), std::move(out), "conv2d", std::move(inputs),
      [in, out_c, k, pad, out_h, out_w, out_plane, patch, direct, cols = std::move(cols)](NodeT<T>& self) {
        const auto& x = *self.inputs[0];
        const auto& wn = *self.inputs[1];
        ConstMapMat<T> w(wn.value.data(), out_c, patch);
        std::vector<T> dcols(direct ? 0 : patch * out_plane);
        for (std::size_t b = 0; b < in.b; ++b) {
          ConstMapMat<T> go(self.grad.data() + b * out_c * out_plane, out_c, out_plane);
          const T* col = direct ? x.value.data() + b * in.c * in.plane() : cols.data() + b * patch * out_plane;
          if (wn.requires_grad) {
            MapMat<T> gw(self.inputs[1]->grad_buffer().data(), out_c, patch);
            gw.noalias() += go * ConstMapMat<T>(col, patch, out_plane).transpose();
          }
          if (x.requires_grad) {
            T* gx = self.inputs[0]->grad_buffer().data() + b * in.c * in.plane();
            if (direct) {
              MapMat<T>(gx, in.c, out_plane).noalias() += w.transpose() * go;
            } else {
              MapMat<T>(dcols.data(), patch, out_plane).noalias() = w.transpose() * go;
              col2im_add(dcols.data(), in.c, in.h, in.w, k, pad, out_h, out_w, gx);
            }
          }
          if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
            auto gb = self.inputs[2]->grad_buffer();
            // Plain loop: Eigen's vectorized sum peels by address, which would
            // make the result depend on where the buffer happens to live.
            const T* g = self.grad.data() + b * out_c * out_plane;
            for (std::size_t c = 0; c < out_c; ++c) {
              T acc = 0;
              for (std::size_t i = 0; i < out_plane; ++i) acc += g[c * out_plane + i];
              gb[c] += acc;
            }
          }
        }
      });
}

template <typename T>
Tensor<T> adaptive_max_pool(const Tensor<T>& input, std::size_t target_h, std::size_t target_w) {
  require_feature_map(input, "adaptive_max_pool");
  const auto d = dims_of(input);
  if (target_h == 0 || target_w == 0 || target_h > d.h || target_w > d.w) {
    throw ContractError("adaptive_max_pool: target " + std::to_string(target_h) + "x" + std::to_string(target_w) +
                        " must be within 1.." + std::to_string(d.h) + "x" + std::to_string(d.w) +
                        " (use bilinear_resize to upsample)");
  }
  auto window = [](std::size_t i, std::size_t in, std::size_t out) {
    const std::size_t start = (i * in) / out;
    const std::size_t end = ((i + 1) * in + out - 1) / out;
    return std::pair{start, end};
  };
  const std::size_t planes = d.b * d.c;
  const std::size_t out_plane = target_h * target_w;
  std::vector<T> out(planes * out_plane);
  std::vector<std::size_t> argmax(out.size());
  const auto x = input.data();
  for (std::size_t p = 0; p < planes; ++p) {
    const std::size_t base = p * d.plane();
    for (std::size_t oy = 0; oy < target_h; ++oy) {
      const auto [y0, y1] = window(oy, d.h, target_h);
      for (std::size_t ox = 0; ox < target_w; ++ox) {
        const auto [x0, x1] = window(ox, d.w, target_w);
        std::size_t best = base + y0 * d.w + x0;
        for (std::size_t y = y0; y < y1; ++y) {
          for (std::size_t xx = x0; xx < x1; ++xx) {
            const std::size_t idx = base + y * d.w + xx;
            if (x[idx] > x[best]) best = idx;
          }
        }
        const std::size_t o = p * out_plane + oy * target_w + ox;
        out[o] = x[best];
        argmax[o] = best;
      }
    }
  }
  return detail::make_result<T>({d.b, d.c, target_h, target_w}, std::move(out), "adaptive_max_pool", {input},
                                [argmax = std::move(argmax)](NodeT<T>& self) {
                                  auto g = self.inputs[0]->grad_buffer();
                                  for (std::size_t o = 0; o < argmax.size(); ++o) g[argmax[o]] += self.grad[o];
                                });
}

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& input, std::size_t target_h, std::size_t target_w) {
  require_feature_map(input, "bilinear_resize");
  const auto d = dims_of(input);
  if (target_h == 0 || target_w == 0) throw ShapeError("bilinear_resize: target size must be positive");
  auto rows = bilinear_axis(d.h, target_h);
  auto cols = bilinear_axis(d.w, target_w);
  const std::size_t planes = d.b * d.c;
  const std::size_t out_plane = target_h * target_w;
  std::vector<T> out(planes * out_plane);
  std::vector<T> tmp(d.h * target_w);  // rows interpolated along x
  const auto x = input.data();
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x.data() + p * d.plane();
    T* dst = out.data() + p * out_plane;
    for (std::size_t iy = 0; iy < d.h; ++iy) {
      const T* line = src + iy * d.w;
      T* t = tmp.data() + iy * target_w;
      for (std::size_t ox = 0; ox < target_w; ++ox) {
        const auto& rx = cols[ox];
        const T fx = static_cast<T>(rx.frac);
        t[ox] = line[rx.lo] * (T(1) - fx) + line[rx.hi] * fx;
      }
    }
    for (std::size_t oy = 0; oy < target_h; ++oy) {
      const auto& ry = rows[oy];
      const T fy = static_cast<T>(ry.frac);
      const T* top = tmp.data() + ry.lo * target_w;
      const T* bottom = tmp.data() + ry.hi * target_w;
      T* o = dst + oy * target_w;
      for (std::size_t ox = 0; ox < target_w; ++ox) o[ox] = top[ox] * (T(1) - fy) + bottom[ox] * fy;
    }
  }
  return detail::make_result<T>(
      {d.b, d.c, target_h, target_w}, std::move(out), "bilinear_resize", {input},
      [d, target_h, target_w, rows = std::move(rows), cols = std::move(cols)](NodeT<T>& self) {
        auto g = self.inputs[0]->grad_buffer();
        const std::size_t out_plane = target_h * target_w;
        std::vector<T> gtmp(d.h * target_w);
        for (std::size_t p = 0; p < d.b * d.c; ++p) {
          T* dst = g.data() + p * d.plane();
          const T* go = self.grad.data() + p * out_plane;
          std::fill(gtmp.begin(), gtmp.end(), T(0));
          for (std::size_t oy = 0; oy < target_h; ++oy) {
            const auto& ry = rows[oy];
            const T fy = static_cast<T>(ry.frac);
            const T* gline = go + oy * target_w;
            T* top = gtmp.data() + ry.lo * target_w;
            T* bottom = gtmp.data() + ry.hi * target_w;
            for (std::size_t ox = 0; ox < target_w; ++ox) top[ox] += gline[ox] * (T(1) - fy);
            for (std::size_t ox = 0; ox < target_w; ++ox) bottom[ox] += gline[ox] * fy;
          }
          for (std::size_t iy = 0; iy < d.h; ++iy) {
            const T* t = gtmp.data() + iy * target_w;
            T* line = dst + iy * d.w;
            for (std::size_t ox = 0; ox < target_w; ++ox) {
              const auto& rx = cols[ox];
              const T fx = static_cast<T>(rx.frac);
              line[rx.lo] += t[ox] * (T(1) - fx);
              line[rx.hi] += t[ox] * fx;
            }
          }
        }
      });
}

template <typename T>
Tensor<T> rmsnorm_channels(const Tensor<T>& input, const Tensor<T>& gain, T epsilon) {
  require_feature_map(input, "rmsnorm_channels");
  const auto d = dims_of(input);
  if (gain.rank() != 1 || gain.dim(0) != d.c) {
    throw ShapeError("rmsnorm_channels: gain " + shape_to_string(gain.shape()) + " for " + std::to_string(d.c) +
                     " channels");
  }
  const std::size_t plane = d.plane();
  // inv_rms[b * plane + p] = 1 / sqrt(mean_c x^2 + eps), or 0 for a zero vector with eps = 0.
  std::vector<T> inv_rms(d.b * plane, T(0));
  std::vector<T> out(input.numel());
  const auto x = input.data();
  const auto g = gain.data();
  const T inv_c = T(1) / static_cast<T>(d.c);
  for (std::size_t b = 0; b < d.b; ++b) {
    const T* xb = x.data() + b * d.c * plane;
    T* ob = out.data() + b * d.c * plane;
    T* inv = inv_rms.data() + b * plane;
    for (std::size_t c = 0; c < d.c; ++c) {
      const T* xc = xb + c * plane;
      for (std::size_t p = 0; p < plane; ++p) inv[p] += xc[p] * xc[p];
    }
    for (std::size_t p = 0; p < plane; ++p) {
      const T ms = inv[p] * inv_c + epsilon;
      inv[p] = ms > T(0) ? T(1) / std::sqrt(ms) : T(0);
    }
    for (std::size_t c = 0; c < d.c; ++c) {
      const T* xc = xb + c * plane;
      T* oc = ob + c * plane;
      for (std::size_t p = 0; p < plane; ++p) oc[p] = xc[p] * inv[p] * g[c];
    }
  }
  return detail::make_result<T>(
      input.shape(), std::move(out), "rmsnorm_channels", {input, gain},
      [d, plane, inv_c, inv_rms = std::move(inv_rms)](NodeT<T>& self) {
        const auto& x = self.inputs[0]->value;
        const auto& g = self.inputs[1]->value;
        const T* gy = self.grad.data();
        T* gx = self.inputs[0]->requires_grad ? self.inputs[0]->grad_buffer().data() : nullptr;
        T* gg = self.inputs[1]->requires_grad ? self.inputs[1]->grad_buffer().data() : nullptr;
        std::vector<T> coef(plane);
        for (std::size_t b = 0; b < d.b; ++b) {
          const std::size_t off = b * d.c * plane;
          const T* inv = inv_rms.data() + b * plane;
          if (gg) {
            for (std::size_t c = 0; c < d.c; ++c) {
              T acc = T(0);
              for (std::size_t p = 0; p < plane; ++p) acc += gy[off + c * plane + p] * x[off + c * plane + p] * inv[p];
              gg[c] += acc;
            }
          }
          if (!gx) continue;
          // coef[p] = (sum_c gy_c g_c x_c) * inv^3 / C
          std::fill(coef.begin(), coef.end(), T(0));
          for (std::size_t c = 0; c < d.c; ++c) {
            const T* gyc = gy + off + c * plane;
            const T* xc = x.data() + off + c * plane;
            for (std::size_t p = 0; p < plane; ++p) coef[p] += gyc[p] * g[c] * xc[p];
          }
          for (std::size_t p = 0; p < plane; ++p) coef[p] *= inv[p] * inv[p] * inv[p] * inv_c;
          for (std::size_t c = 0; c < d.c; ++c) {
            const T* gyc = gy + off + c * plane;
            const T* xc = x.data() + off + c * plane;
            T* gxc = gx + off + c * plane;
            for (std::size_t p = 0; p < plane; ++p) gxc[p] += gyc[p] * g[c] * inv[p] - xc[p] * coef[p];
          }
        }
      });
}

template <typename T>
Tensor<T> softmax_axis(const Tensor<T>& input, std::size_t axis) {
  const auto& s = input.shape();
  if (axis >= s.size()) throw ShapeError("softmax_axis: axis out of range for " + shape_to_string(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  std::vector<T> out(input.numel());
  const auto x = input.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < n; ++k) mx = std::max(mx, x[base + k * inner]);
      T total = T(0);
      for (std::size_t k = 0; k < n; ++k) {
        const T e = std::exp(x[base + k * inner] - mx);
        out[base + k * inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < n; ++k) out[base + k * inner] /= total;
    }
  }
  return detail::make_result<T>(s, std::move(out), "softmax_axis", {input}, [outer, inner, n](NodeT<T>& self) {
    // Output values live on this node; gx = y * (gy - sum(gy * y)).
    const auto& y = self.value;
    auto g = self.inputs[0]->grad_buffer();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        T dot = T(0);
        for (std::size_t k = 0; k < n; ++k) dot += self.grad[base + k * inner] * y[base + k * inner];
        for (std::size_t k = 0; k < n; ++k) {
          const std::size_t i = base + k * inner;
          g[i] += y[i] * (self.grad[i] - dot);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: nothing to concatenate");
  for (const auto& p : parts) require_feature_map(p, "concat_channels");
  const auto first = dims_of(parts[0]);
  std::size_t total_c = 0;
  std::vector<std::size_t> channels;
  for (const auto& p : parts) {
    const auto d = dims_of(p);
    if (d.b != first.b || d.h != first.h || d.w != first.w) {
      throw ShapeError("concat_channels: " + shape_to_string(p.shape()) + " incompatible with " +
                       shape_to_string(parts[0].shape()));
    }
    channels.push_back(d.c);
    total_c += d.c;
  }
  const std::size_t plane = first.plane();
  std::vector<T> out(first.b * total_c * plane);
  for (std::size_t b = 0; b < first.b; ++b) {
    T* dst = out.data() + b * total_c * plane;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      const std::size_t len = channels[i] * plane;
      const T* src = parts[i].data().data() + b * len;
      std::copy(src, src + len, dst);
      dst += len;
    }
  }
  std::vector<Tensor<T>> inputs(parts.begin(), parts.end());
  return detail::make_result<T>(
      {first.b, total_c, first.h, first.w}, std::move(out), "concat_channels", std::move(inputs),
      [batch = first.b, total_c, plane, channels = std::move(channels)](NodeT<T>& self) {
        std::size_t offset = 0;
        for (std::size_t i = 0; i < channels.size(); ++i) {
          const std::size_t len = channels[i] * plane;
          if (self.inputs[i]->requires_grad && len > 0) {
            auto g = self.inputs[i]->grad_buffer();
            for (std::size_t b = 0; b < batch; ++b) {
              const T* src = self.grad.data() + b * total_c * plane + offset;
              T* dst = g.data() + b * len;
              for (std::size_t j = 0; j < len; ++j) dst[j] += src[j];
            }
          }
          offset += len;
        }
      });
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  const Tensor<T> parts[] = {a, b};
  return concat_channels(std::span<const Tensor<T>>(parts));
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& input, std::size_t start, std::size_t count) {
  require_feature_map(input, "slice_channels");
  const auto d = dims_of(input);
  if (start + count > d.c) {
    throw ShapeError("slice_channels: [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") exceeds " + std::to_string(d.c) + " channels");
  }
  const std::size_t plane = d.plane();
  std::vector<T> out(d.b * count * plane);
  for (std::size_t b = 0; b < d.b; ++b) {
    const T* src = input.data().data() + (b * d.c + start) * plane;
    std::copy(src, src + count * plane, out.data() + b * count * plane);
  }
  return detail::make_result<T>({d.b, count, d.h, d.w}, std::move(out), "slice_channels", {input},
                                [d, start, count, plane](NodeT<T>& self) {
                                  auto g = self.inputs[0]->grad_buffer();
                                  for (std::size_t b = 0; b < d.b; ++b) {
                                    T* dst = g.data() + (b * d.c + start) * plane;
                                    const T* src = self.grad.data() + b * count * plane;
                                    for (std::size_t j = 0; j < count * plane; ++j) dst[j] += src[j];
                                  }
                                });
}

template <typename T>
Tensor<T> channel_dot(const Tensor<T>& input, const Tensor<T>& vec) {
  require_feature_map(input, "channel_dot");
  const auto d = dims_of(input);
  if (vec.rank() != 1 || vec.dim(0) != d.c) {
    throw ShapeError("channel_dot: vector " + shape_to_string(vec.shape()) + " for " + std::to_string(d.c) +
                     " channels");
  }
  const std::size_t plane = d.plane();
  std::vector<T> out(d.b * plane, T(0));
  const auto x = input.data();
  const auto w = vec.data();
  for (std::size_t b = 0; b < d.b; ++b) {
    for (std::size_t c = 0; c < d.c; ++c) {
      const T* src = x.data() + (b * d.c + c) * plane;
      T* dst = out.data() + b * plane;
      for (std::size_t p = 0; p < plane; ++p) dst[p] += w[c] * src[p];
    }
  }
  return detail::make_result<T>({d.b, 1, d.h, d.w}, std::move(out), "channel_dot", {input, vec},
                                [d, plane](NodeT<T>& self) {
                                  const auto& x = self.inputs[0]->value;
                                  const auto& w = self.inputs[1]->value;
                                  T* gx = self.inputs[0]->requires_grad ? self.inputs[0]->grad_buffer().data()
                                                                        : nullptr;
                                  T* gw = self.inputs[1]->requires_grad ? self.inputs[1]->grad_buffer().data()
                                                                        : nullptr;
                                  for (std::size_t b = 0; b < d.b; ++b) {
                                    const T* go = self.grad.data() + b * plane;
                                    for (std::size_t c = 0; c < d.c; ++c) {
                                      const std::size_t off = (b * d.c + c) * plane;
                                      if (gx) {
                                        for (std::size_t p = 0; p < plane; ++p) gx[off + p] += w[c] * go[p];
                                      }
                                      if (gw) {
                                        T acc = T(0);
                                        for (std::size_t p = 0; p < plane; ++p) acc += x[off + p] * go[p];
                                        gw[c] += acc;
                                      }
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> scale_by_map(const Tensor<T>& map, const Tensor<T>& input) {
  require_feature_map(map, "scale_by_map map");
  require_feature_map(input, "scale_by_map input");
  const auto m = dims_of(map);
  const auto d = dims_of(input);
  if (m.c != 1 || m.b != d.b || m.h != d.h || m.w != d.w) {
    throw ShapeError("scale_by_map: map " + shape_to_string(map.shape()) + " does not broadcast over " +
                     shape_to_string(input.shape()));
  }
  const std::size_t plane = d.plane();
  std::vector<T> out(input.numel());
  const auto a = map.data();
  const auto x = input.data();
  for (std::size_t b = 0; b < d.b; ++b) {
    const T* ab = a.data() + b * plane;
    for (std::size_t c = 0; c < d.c; ++c) {
      const std::size_t off = (b * d.c + c) * plane;
      for (std::size_t p = 0; p < plane; ++p) out[off + p] = ab[p] * x[off + p];
    }
  }
  return detail::make_result<T>(input.shape(), std::move(out), "scale_by_map", {map, input},
                                [d, plane](NodeT<T>& self) {
                                  const auto& a = self.inputs[0]->value;
                                  const auto& x = self.inputs[1]->value;
                                  T* ga = self.inputs[0]->requires_grad ? self.inputs[0]->grad_buffer().data()
                                                                        : nullptr;
                                  T* gx = self.inputs[1]->requires_grad ? self.inputs[1]->grad_buffer().data()
                                                                        : nullptr;
                                  for (std::size_t b = 0; b < d.b; ++b) {
                                    for (std::size_t c = 0; c < d.c; ++c) {
                                      const std::size_t off = (b * d.c + c) * plane;
                                      const T* go = self.grad.data() + off;
                                      if (ga) {
                                        T* gab = ga + b * plane;
                                        for (std::size_t p = 0; p < plane; ++p) gab[p] += go[p] * x[off + p];
                                      }
                                      if (gx) {
                                        const T* ab = a.data() + b * plane;
                                        for (std::size_t p = 0; p < plane; ++p) gx[off + p] += go[p] * ab[p];
                                      }
                                    }
                                  }
                                });
}

#define XATTNRES_INSTANTIATE_OPS(T)                                                                  \
  template void require_feature_map<T>(const Tensor<T>&, const char*);                               \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                                  \
  template Tensor<T> relu<T>(const Tensor<T>&);                                                      \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                       \
  template Tensor<T> mean<T>(const Tensor<T>&);                                                      \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Padding);       \
  template Tensor<T> adaptive_max_pool<T>(const Tensor<T>&, std::size_t, std::size_t);               \
  template Tensor<T> bilinear_resize<T>(const Tensor<T>&, std::size_t, std::size_t);                 \
  template Tensor<T> rmsnorm_channels<T>(const Tensor<T>&, const Tensor<T>&, T);                     \
  template Tensor<T> softmax_axis<T>(const Tensor<T>&, std::size_t);                                 \
  template Tensor<T> concat_channels<T>(const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> concat_channels<T>(std::span<const Tensor<T>>);                                 \
  template Tensor<T> slice_channels<T>(const Tensor<T>&, std::size_t, std::size_t);                  \
  template Tensor<T> channel_dot<T>(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> scale_by_map<T>(const Tensor<T>&, const Tensor<T>&);

XATTNRES_INSTANTIATE_OPS(float)
XATTNRES_INSTANTIATE_OPS(double)

}  // namespace xattnres
