#include "xattnres/attention.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "xattnres/ops.hpp"

namespace xattnres {

std::string to_string(StageSide side) {
  switch (side) {
    case StageSide::Encoder: return "encoder";
    case StageSide::Decoder: return "decoder";
    case StageSide::Current: return "current";
  }
  return "unknown";
}

std::string to_string(const StageTag& tag) {
  const char* prefix = tag.side == StageSide::Encoder ? "enc" : tag.side == StageSide::Decoder ? "dec" : "cur";
  return prefix + std::to_string(tag.index);
}

template <typename T>
void HistoryPool<T>::clear() {
  entries_.clear();
  tags_.clear();
}

template <typename T>
void HistoryPool<T>::append(Tensor<T> feature, StageTag tag) {
  if (std::find(tags_.begin(), tags_.end(), tag) != tags_.end()) {
    throw ContractError("history pool already holds an entry tagged " + to_string(tag));
  }
  require_feature_map(feature, "history_append");
  entries_.push_back(std::move(feature));
  tags_.push_back(tag);
}

template <typename T>
XAttnResUnit<T>::XAttnResUnit(std::string site, std::size_t channels, const std::vector<SourceSpec>& sources,
                              T rms_epsilon)
    : site_(std::move(site)),
      channels_(channels),
      rms_epsilon_(rms_epsilon),
      pseudo_query_(Tensor<T>::zeros({channels}, true)),
      rms_gain_(Tensor<T>::full({channels}, T(1), true)) {
  if (channels == 0) throw ConfigError("XAttnRes unit needs at least one channel");
  for (const auto& src : sources) {
    if (src.channels != channels_) {
      projections_.emplace(src.tag, Tensor<T>::zeros({channels_, src.channels, 1, 1}, true));
    }
  }
}

template <typename T>
const Tensor<T>* XAttnResUnit<T>::projection(const StageTag& tag) const {
  auto it = projections_.find(tag);
  return it == projections_.end() ? nullptr : &it->second;
}

template <typename T>
Tensor<T>* XAttnResUnit<T>::projection(const StageTag& tag) {
  auto it = projections_.find(tag);
  return it == projections_.end() ? nullptr : &it->second;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> XAttnResUnit<T>::named_parameters() const {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  out.emplace_back(site_ + ".pseudo_query", pseudo_query_);
  out.emplace_back(site_ + ".rms_gain", rms_gain_);
  for (const auto& [tag, w] : projections_) out.emplace_back(site_ + ".proj." + to_string(tag), w);
  return out;
}

template <typename T>
std::size_t XAttnResUnit<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named_parameters()) n += t.numel();
  return n;
}

double AttentionTrace::mean_weight(std::size_t entry) const {
  const std::size_t plane = height * width;
  double total = 0.0;
  for (std::size_t p = 0; p < plane; ++p) total += weights[entry * plane + p];
  return total / static_cast<double>(plane);
}

double AttentionTrace::min_weight(std::size_t entry) const {
  const std::size_t plane = height * width;
  const auto first = weights.begin() + static_cast<std::ptrdiff_t>(entry * plane);
  return *std::min_element(first, first + static_cast<std::ptrdiff_t>(plane));
}

double AttentionTrace::max_weight(std::size_t entry) const {
  const std::size_t plane = height * width;
  const auto first = weights.begin() + static_cast<std::ptrdiff_t>(entry * plane);
  return *std::max_element(first, first + static_cast<std::ptrdiff_t>(plane));
}

double AttentionTrace::uniformity_score() const {
  if (entries == 0) return 0.0;
  double lo = mean_weight(0), hi = lo;
  for (std::size_t n = 1; n < entries; ++n) {
    const double m = mean_weight(n);
    lo = std::min(lo, m);
    hi = std::max(hi, m);
  }
  return hi - lo;
}

template <typename T>
Tensor<T> align_feature(const Tensor<T>& h, const StageTag& tag, const XAttnResUnit<T>& unit, std::size_t target_h,
                        std::size_t target_w) {
  require_feature_map(h, "align_feature");
  Tensor<T> out = h;
  const std::size_t src_h = h.dim(2), src_w = h.dim(3);
  if (src_h != target_h || src_w != target_w) {
    // Pool along any axis that shrinks, then interpolate along any that grows.
    const std::size_t mid_h = std::min(src_h, target_h), mid_w = std::min(src_w, target_w);
    if (mid_h != src_h || mid_w != src_w) out = adaptive_max_pool(out, mid_h, mid_w);
    if (mid_h != target_h || mid_w != target_w) out = bilinear_resize(out, target_h, target_w);
  }
  if (out.dim(1) != unit.channels()) {
    const auto* w = unit.projection(tag);
    if (w == nullptr || w->dim(1) != out.dim(1)) {
      throw ShapeError("align_feature: unit " + unit.site() + " has no projection for " + to_string(tag) + " with " +
                       std::to_string(out.dim(1)) + " channels");
    }
    out = conv2d(out, *w, Tensor<T>{}, Padding::Same);
  }
  return out;
}

template <typename T>
AttendResult<T> attend(const HistoryPool<T>& pool, const Tensor<T>& x, const XAttnResUnit<T>& unit,
                       bool per_sample_trace) {
  require_feature_map(x, "attend");
  if (x.dim(1) != unit.channels()) {
    throw ContractError("attend: current feature has " + std::to_string(x.dim(1)) + " channels, unit " +
                        unit.site() + " expects " + std::to_string(unit.channels()));
  }
  const std::size_t batch = x.dim(0), height = x.dim(2), width = x.dim(3);
  const std::size_t entries = pool.size() + 1;

  AttendResult<T> result;
  auto& trace = result.trace;
  trace.site = unit.site();
  trace.entries = entries;
  trace.height = height;
  trace.width = width;
  trace.batch = batch;
  trace.source_tags = pool.tags();
  trace.source_tags.push_back({StageSide::Current, 0});

  if (pool.empty()) {
    // Softmax over a single logit is exactly 1.
    result.output = x;
    trace.weights.assign(height * width, 1.0);
    if (per_sample_trace) trace.per_sample.assign(batch * height * width, 1.0);
    return result;
  }

  std::vector<Tensor<T>> values;
  values.reserve(entries);
  for (std::size_t k = 0; k < pool.size(); ++k) {
    const auto& h = pool.entries()[k];
    if (h.dim(0) != batch) throw ShapeError("attend: history entry batch differs from current feature");
    values.push_back(align_feature(h, pool.tags()[k], unit, height, width));
  }
  values.push_back(x);

  std::vector<Tensor<T>> logits;
  logits.reserve(entries);
  for (const auto& v : values) {
    logits.push_back(channel_dot(rmsnorm_channels(v, unit.rms_gain(), unit.rms_epsilon()), unit.pseudo_query()));
  }
  const auto alpha = softmax_axis(concat_channels(std::span<const Tensor<T>>(logits)), 1);

  Tensor<T> out;
  for (std::size_t n = 0; n < entries; ++n) {
    auto term = scale_by_map(slice_channels(alpha, n, 1), values[n]);
    out = n == 0 ? term : add(out, term);
  }
  result.output = out;

  const std::size_t plane = height * width;
  const auto a = alpha.data();
  trace.weights.assign(entries * plane, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < entries * plane; ++i) trace.weights[i] += static_cast<double>(a[b * entries * plane + i]);
  }
  for (auto& w : trace.weights) w /= static_cast<double>(batch);
  if (per_sample_trace) trace.per_sample.assign(a.begin(), a.end());
  return result;
}

template <typename T>
Tensor<T> naive_attend_oracle(const HistoryPool<T>& pool, const Tensor<T>& x, const XAttnResUnit<T>& unit) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (C != unit.channels()) throw ContractError("naive_attend_oracle: channel mismatch");
  const std::size_t K = pool.size();
  // stack[n][b][c][y][x], built entry by entry with inline resize and projection.
  std::vector<std::vector<double>> stack(K + 1, std::vector<double>(B * C * H * W, 0.0));
  for (std::size_t n = 0; n < K; ++n) {
    const auto& h = pool.entries()[n];
    const std::size_t Cs = h.dim(1), Hs = h.dim(2), Ws = h.dim(3);
    const auto src = h.data();
    // Max pool onto min(source, target) per axis, then bilinear up to the target.
    const std::size_t Hp = std::min(Hs, H), Wp = std::min(Ws, W);
    std::vector<double> pooled(B * Cs * Hp * Wp, 0.0);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t c = 0; c < Cs; ++c) {
        for (std::size_t y = 0; y < Hp; ++y) {
          for (std::size_t xx = 0; xx < Wp; ++xx) {
            const std::size_t y0 = (y * Hs) / Hp;
            const std::size_t y1 = ((y + 1) * Hs + Hp - 1) / Hp;
            const std::size_t x0 = (xx * Ws) / Wp;
            const std::size_t x1 = ((xx + 1) * Ws + Wp - 1) / Wp;
            double v = -INFINITY;
            for (std::size_t yy = y0; yy < y1; ++yy)
              for (std::size_t x2 = x0; x2 < x1; ++x2) v = std::max(v, double(src[((b * Cs + c) * Hs + yy) * Ws + x2]));
            pooled[((b * Cs + c) * Hp + y) * Wp + xx] = v;
          }
        }
      }
    }
    std::vector<double> resized(B * Cs * H * W, 0.0);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t c = 0; c < Cs; ++c) {
        for (std::size_t y = 0; y < H; ++y) {
          for (std::size_t xx = 0; xx < W; ++xx) {
            double sy = (y + 0.5) * double(Hp) / double(H) - 0.5;
            double sx = (xx + 0.5) * double(Wp) / double(W) - 0.5;
            sy = std::min(std::max(sy, 0.0), double(Hp - 1));
            sx = std::min(std::max(sx, 0.0), double(Wp - 1));
            const std::size_t ya = std::size_t(std::floor(sy)), xa = std::size_t(std::floor(sx));
            const std::size_t yb = std::min(ya + 1, Hp - 1), xb = std::min(xa + 1, Wp - 1);
            const double fy = sy - double(ya), fx = sx - double(xa);
            auto at = [&](std::size_t yy, std::size_t x2) { return pooled[((b * Cs + c) * Hp + yy) * Wp + x2]; };
            resized[((b * Cs + c) * H + y) * W + xx] =
                (at(ya, xa) * (1 - fx) + at(ya, xb) * fx) * (1 - fy) + (at(yb, xa) * (1 - fx) + at(yb, xb) * fx) * fy;
          }
        }
      }
    }
    const auto* proj = unit.projection(pool.tags()[n]);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t p = 0; p < H * W; ++p) {
          double v = 0.0;
          if (Cs == C) {
            v = resized[(b * Cs + c) * H * W + p];
          } else {
            const auto w = proj->data();
            for (std::size_t cs = 0; cs < Cs; ++cs) v += double(w[c * Cs + cs]) * resized[(b * Cs + cs) * H * W + p];
          }
          stack[n][(b * C + c) * H * W + p] = v;
        }
      }
    }
  }
  const auto xv = x.data();
  for (std::size_t i = 0; i < B * C * H * W; ++i) stack[K][i] = xv[i];

  const auto q = unit.pseudo_query().data();
  const auto g = unit.rms_gain().data();
  const double eps = unit.rms_epsilon();
  std::vector<T> out(B * C * H * W);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t p = 0; p < H * W; ++p) {
      std::vector<double> logit(K + 1);
      for (std::size_t n = 0; n <= K; ++n) {
        double ms = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
          const double v = stack[n][(b * C + c) * H * W + p];
          ms += v * v;
        }
        ms = ms / double(C) + eps;
        const double inv = ms > 0.0 ? 1.0 / std::sqrt(ms) : 0.0;
        double l = 0.0;
        for (std::size_t c = 0; c < C; ++c) l += double(q[c]) * stack[n][(b * C + c) * H * W + p] * inv * double(g[c]);
        logit[n] = l;
      }
      double mx = logit[0];
      for (std::size_t n = 1; n <= K; ++n) mx = std::max(mx, logit[n]);
      double z = 0.0;
      for (std::size_t n = 0; n <= K; ++n) z += std::exp(logit[n] - mx);
      for (std::size_t c = 0; c < C; ++c) {
        double v = 0.0;
        for (std::size_t n = 0; n <= K; ++n) v += std::exp(logit[n] - mx) / z * stack[n][(b * C + c) * H * W + p];
        out[(b * C + c) * H * W + p] = static_cast<T>(v);
      }
    }
  }
  return Tensor<T>::from_data({B, C, H, W}, std::move(out));
}

std::string traces_to_csv(const std::vector<AttentionTrace>& traces) {
  std::ostringstream os;
  os << "site,source_side,source_index,mean_weight,min_weight,max_weight\n";
  char buf[128];
  for (const auto& t : traces) {
    for (std::size_t n = 0; n < t.entries; ++n) {
      const auto& tag = t.source_tags[n];
      std::snprintf(buf, sizeof buf, ",%.6f,%.6f,%.6f\n", t.mean_weight(n), t.min_weight(n), t.max_weight(n));
      os << t.site << ',' << to_string(tag.side) << ',' << tag.index << buf;
    }
  }
  return os.str();
}

void write_traces_csv(const std::vector<AttentionTrace>& traces, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path + " for writing");
  out << traces_to_csv(traces);
  if (!out) throw Error("failed writing " + path);
}

#define XATTNRES_INSTANTIATE_ATTENTION(T)                                                                       \
  template class HistoryPool<T>;                                                                                \
  template class XAttnResUnit<T>;                                                                               \
  template Tensor<T> align_feature<T>(const Tensor<T>&, const StageTag&, const XAttnResUnit<T>&, std::size_t,    \
                                      std::size_t);                                                             \
  template AttendResult<T> attend<T>(const HistoryPool<T>&, const Tensor<T>&, const XAttnResUnit<T>&, bool);    \
  template Tensor<T> naive_attend_oracle<T>(const HistoryPool<T>&, const Tensor<T>&, const XAttnResUnit<T>&);

XATTNRES_INSTANTIATE_ATTENTION(float)
XATTNRES_INSTANTIATE_ATTENTION(double)

}  // namespace xattnres
