#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "autograd.hpp"
#include "tfn/ops.hpp"
#include "tfn/parallel.hpp"

namespace tfn {
namespace {

constexpr const char* kAxisNames[3] = {"T", "H", "W"};

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

}  // namespace

Tensor pool3d(const Tensor& input, const PoolSpec& spec) {
  const auto& s = input.shape();
  if (s.size() != 5) throw ShapeError("pool3d expects [N,C,T,H,W] input, got " + to_string(s));
  std::int64_t out[3];
  for (int a = 0; a < 3; ++a) {
    if (spec.extent[a] <= 0 || spec.stride[a] <= 0 || spec.padding[a] < 0) {
      throw ShapeError(std::string("invalid pool extent/stride/padding on axis ") + kAxisNames[a]);
    }
    if (spec.padding[a] >= spec.extent[a]) {
      throw ShapeError(std::string("pool padding must be smaller than the extent on axis ") + kAxisNames[a]);
    }
    out[a] = conv_output_size(s[2 + a], spec.extent[a], spec.stride[a], spec.padding[a]);
    if (out[a] <= 0) {
      throw ShapeError(std::string("pool extent exceeds padded input on axis ") + kAxisNames[a]);
    }
  }
  const std::int64_t planes = s[0] * s[1];
  const std::int64_t T = s[2], H = s[3], W = s[4];
  const std::int64_t To = out[0], Ho = out[1], Wo = out[2];
  const std::int64_t in_plane = T * H * W, out_plane = To * Ho * Wo;
  std::vector<Real> y(static_cast<std::size_t>(planes * out_plane));
  // For max: flat input index of the winner; for mean: unused.
  std::vector<std::int64_t> argmax(spec.mode == PoolMode::max ? y.size() : 0);
  const Real* x = input.data().data();

  parallel_for(static_cast<std::size_t>(planes), [&](std::size_t begin, std::size_t end, std::size_t) {
    for (std::size_t p = begin; p < end; ++p) {
      const Real* xp = x + static_cast<std::int64_t>(p) * in_plane;
      for (std::int64_t to = 0; to < To; ++to)
        for (std::int64_t ho = 0; ho < Ho; ++ho)
          for (std::int64_t wo = 0; wo < Wo; ++wo) {
            const std::int64_t oi = static_cast<std::int64_t>(p) * out_plane + (to * Ho + ho) * Wo + wo;
            Real best = -std::numeric_limits<Real>::infinity();
            std::int64_t best_index = -1;
            Real total = 0;
            std::int64_t count = 0;
            for (std::int64_t dt = 0; dt < spec.extent[0]; ++dt) {
              const std::int64_t ti = to * spec.stride[0] - spec.padding[0] + dt;
              if (ti < 0 || ti >= T) continue;
              for (std::int64_t dh = 0; dh < spec.extent[1]; ++dh) {
                const std::int64_t hi = ho * spec.stride[1] - spec.padding[1] + dh;
                if (hi < 0 || hi >= H) continue;
                for (std::int64_t dw = 0; dw < spec.extent[2]; ++dw) {
                  const std::int64_t wi = wo * spec.stride[2] - spec.padding[2] + dw;
                  if (wi < 0 || wi >= W) continue;
                  const std::int64_t li = (ti * H + hi) * W + wi;
                  const Real v = xp[li];
                  if (best_index < 0 || v > best) {
                    best = v;
                    best_index = li;
                  }
                  total += v;
                  ++count;
                }
              }
            }
            if (spec.mode == PoolMode::max) {
              y[static_cast<std::size_t>(oi)] = best;
              argmax[static_cast<std::size_t>(oi)] = static_cast<std::int64_t>(p) * in_plane + best_index;
            } else {
              y[static_cast<std::size_t>(oi)] = total / static_cast<Real>(count);
            }
          }
    }
  });

  Shape out_shape{s[0], s[1], To, Ho, Wo};
  return detail::make_result(
      std::move(out_shape), std::move(y), {input},
      [spec, argmax = std::move(argmax), T, H, W, To, Ho, Wo, planes](detail::Node& self) {
        auto& in = self.inputs[0];
        Real* dx = in->ensure_grad().data();
        const Real* dy = self.grad.data();
        if (spec.mode == PoolMode::max) {
          for (std::size_t i = 0; i < argmax.size(); ++i) dx[argmax[i]] += dy[i];
          return;
        }
        const std::int64_t in_plane = T * H * W, out_plane = To * Ho * Wo;
        parallel_for(static_cast<std::size_t>(planes), [&](std::size_t begin, std::size_t end, std::size_t) {
          for (std::size_t p = begin; p < end; ++p) {
            Real* dxp = dx + static_cast<std::int64_t>(p) * in_plane;
            for (std::int64_t to = 0; to < To; ++to)
              for (std::int64_t ho = 0; ho < Ho; ++ho)
                for (std::int64_t wo = 0; wo < Wo; ++wo) {
                  auto range = [&](int a, std::int64_t o, std::int64_t limit) {
                    const std::int64_t lo = std::max<std::int64_t>(0, o * spec.stride[a] - spec.padding[a]);
                    const std::int64_t hi =
                        std::min<std::int64_t>(limit, o * spec.stride[a] - spec.padding[a] + spec.extent[a]);
                    return std::pair{lo, hi};
                  };
                  const auto [t0, t1] = range(0, to, T);
                  const auto [h0, h1] = range(1, ho, H);
                  const auto [w0, w1] = range(2, wo, W);
                  const Real g = dy[static_cast<std::int64_t>(p) * out_plane + (to * Ho + ho) * Wo + wo] /
                                 static_cast<Real>((t1 - t0) * (h1 - h0) * (w1 - w0));
                  for (std::int64_t ti = t0; ti < t1; ++ti)
                    for (std::int64_t hi = h0; hi < h1; ++hi)
                      for (std::int64_t wi = w0; wi < w1; ++wi) dxp[(ti * H + hi) * W + wi] += g;
                }
          }
        });
      });
}

Tensor batchnorm(const Tensor& input, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                 Tensor& running_var, const BatchNormOptions& options) {
  const auto& s = input.shape();
  if (s.size() < 2) throw ShapeError("batchnorm expects at least [N,C], got " + to_string(s));
  const std::int64_t C = s[1];
  for (const Tensor* t : std::initializer_list<const Tensor*>{&gamma, &beta, &running_mean, &running_var}) {
    if (t->rank() != 1 || t->dim(0) != C) {
      throw ShapeError("batchnorm parameter length " + to_string(t->shape()) + " does not match " +
                       std::to_string(C) + " channels");
    }
  }
  if (!(options.eps > 0)) throw ShapeError("batchnorm eps must be positive");
  const std::int64_t N = s[0];
  std::int64_t inner = 1;
  for (std::size_t i = 2; i < s.size(); ++i) inner *= s[i];
  const std::int64_t count = N * inner;
  const Real* x = input.data().data();
  const Real* g = gamma.data().data();
  const Real* b = beta.data().data();

  std::vector<Real> mean(static_cast<std::size_t>(C)), inv_std(static_cast<std::size_t>(C));
  if (options.mode == NormMode::train) {
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    for (std::int64_t c = 0; c < C; ++c) {
      Real total = 0;
      for (std::int64_t n = 0; n < N; ++n) {
        const Real* p = x + (n * C + c) * inner;
        for (std::int64_t i = 0; i < inner; ++i) total += p[i];
      }
      const Real mu = total / static_cast<Real>(count);
      Real sq = 0;
      for (std::int64_t n = 0; n < N; ++n) {
        const Real* p = x + (n * C + c) * inner;
        for (std::int64_t i = 0; i < inner; ++i) sq += (p[i] - mu) * (p[i] - mu);
      }
      const Real var = sq / static_cast<Real>(count);
      mean[c] = mu;
      inv_std[c] = Real(1) / std::sqrt(var + options.eps);
      const Real unbiased = count > 1 ? sq / static_cast<Real>(count - 1) : var;
      rm[c] = (Real(1) - options.momentum) * rm[c] + options.momentum * mu;
      rv[c] = (Real(1) - options.momentum) * rv[c] + options.momentum * unbiased;
    }
  } else {
    const auto rm = running_mean.data();
    const auto rv = running_var.data();
    for (std::int64_t c = 0; c < C; ++c) {
      mean[c] = rm[c];
      inv_std[c] = Real(1) / std::sqrt(rv[c] + options.eps);
    }
  }

  std::vector<Real> y(input.numel());
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      const Real* p = x + (n * C + c) * inner;
      Real* q = y.data() + (n * C + c) * inner;
      const Real a = g[c] * inv_std[c];
      const Real shift = b[c] - a * mean[c];
      for (std::int64_t i = 0; i < inner; ++i) q[i] = a * p[i] + shift;
    }

  const bool train = options.mode == NormMode::train;
  return detail::make_result(
      s, std::move(y), {input, gamma, beta},
      [N, C, inner, count, train, mean = std::move(mean), inv_std = std::move(inv_std)](detail::Node& self) {
        const auto& in = self.inputs[0];
        const auto& gm = self.inputs[1];
        const auto& bt = self.inputs[2];
        const Real* x = in->value.data();
        const Real* gv = gm->value.data();
        const Real* dy = self.grad.data();
        Real* dx = detail::wants_grad(in) ? in->ensure_grad().data() : nullptr;
        Real* dg = detail::wants_grad(gm) ? gm->ensure_grad().data() : nullptr;
        Real* db = detail::wants_grad(bt) ? bt->ensure_grad().data() : nullptr;
        for (std::int64_t c = 0; c < C; ++c) {
          Real sum_dy = 0, sum_dy_xhat = 0;
          for (std::int64_t n = 0; n < N; ++n) {
            const Real* p = x + (n * C + c) * inner;
            const Real* d = dy + (n * C + c) * inner;
            for (std::int64_t i = 0; i < inner; ++i) {
              sum_dy += d[i];
              sum_dy_xhat += d[i] * (p[i] - mean[c]) * inv_std[c];
            }
          }
          if (dg) dg[c] += sum_dy_xhat;
          if (db) db[c] += sum_dy;
          if (!dx) continue;
          const Real k = gv[c] * inv_std[c];
          for (std::int64_t n = 0; n < N; ++n) {
            const Real* p = x + (n * C + c) * inner;
            const Real* d = dy + (n * C + c) * inner;
            Real* o = dx + (n * C + c) * inner;
            if (train) {
              const Real m = static_cast<Real>(count);
              for (std::int64_t i = 0; i < inner; ++i) {
                const Real xhat = (p[i] - mean[c]) * inv_std[c];
                o[i] += k * (d[i] - sum_dy / m - xhat * sum_dy_xhat / m);
              }
            } else {
              for (std::int64_t i = 0; i < inner; ++i) o[i] += k * d[i];
            }
          }
        }
      });
}

Tensor relu(const Tensor& input) {
  const auto x = input.data();
  std::vector<Real> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0 ? x[i] : Real(0);
  return detail::make_result(input.shape(), std::move(y), {input}, [](detail::Node& self) {
    auto& in = self.inputs[0];
    Real* dx = in->ensure_grad().data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (in->value[i] > 0) dx[i] += self.grad[i];
    }
  });
}

Tensor concat_channels(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_channels needs at least one tensor");
  const Shape& first = parts[0].shape();
  if (first.size() < 2) throw ShapeError("concat_channels expects rank >= 2");
  std::int64_t channels = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) throw ShapeError("concat_channels rank mismatch");
    for (std::size_t a = 0; a < s.size(); ++a) {
      if (a != 1 && s[a] != first[a]) {
        throw ShapeError("concat_channels mismatch on axis " + std::to_string(a) + ": " + to_string(s) +
                         " vs " + to_string(first));
      }
    }
    channels += s[1];
  }
  std::int64_t inner = 1;
  for (std::size_t a = 2; a < first.size(); ++a) inner *= first[a];
  const std::int64_t N = first[0];
  Shape out_shape = first;
  out_shape[1] = channels;
  std::vector<Real> y(static_cast<std::size_t>(shape_numel(out_shape)));
  std::vector<std::int64_t> offsets;
  std::int64_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::int64_t c = p.dim(1);
    const Real* src = p.data().data();
    for (std::int64_t n = 0; n < N; ++n) {
      std::copy(src + n * c * inner, src + (n + 1) * c * inner, y.data() + (n * channels + offset) * inner);
    }
    offset += c;
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return detail::make_result(std::move(out_shape), std::move(y), inputs,
                             [N, channels, inner, offsets](detail::Node& self) {
                               for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                                 auto& in = self.inputs[k];
                                 if (!detail::wants_grad(in)) continue;
                                 const std::int64_t c = in->shape[1];
                                 Real* dx = in->ensure_grad().data();
                                 for (std::int64_t n = 0; n < N; ++n) {
                                   const Real* src = self.grad.data() + (n * channels + offsets[k]) * inner;
                                   Real* dst = dx + n * c * inner;
                                   for (std::int64_t i = 0; i < c * inner; ++i) dst[i] += src[i];
                                 }
                               }
                             });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  const Tensor parts[2] = {a, b};
  return concat_channels(parts);
}

namespace {

Tensor reshape_view(const Tensor& input, Shape shape) {
  std::vector<Real> y(input.data().begin(), input.data().end());
  return detail::make_result(std::move(shape), std::move(y), {input}, [](detail::Node& self) {
    auto& in = self.inputs[0];
    auto dx = in->ensure_grad();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += self.grad[i];
  });
}

}  // namespace

Tensor squeeze_time(const Tensor& input) {
  const auto& s = input.shape();
  if (s.size() != 5) throw ShapeError("squeeze_time expects [N,C,T,H,W], got " + to_string(s));
  if (s[2] != 1) throw ShapeError("squeeze_time requires T == 1, got T = " + std::to_string(s[2]));
  return reshape_view(input, {s[0], s[1], s[3], s[4]});
}

Tensor expand_time(const Tensor& input) {
  const auto& s = input.shape();
  if (s.size() != 4) throw ShapeError("expand_time expects [N,C,H,W], got " + to_string(s));
  return reshape_view(input, {s[0], s[1], 1, s[2], s[3]});
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const auto x = a.data(), z = b.data();
  std::vector<Real> y(x.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] + z[i];
  return detail::make_result(a.shape(), std::move(y), {a, b}, [](detail::Node& self) {
    for (auto& in : self.inputs) {
      if (!detail::wants_grad(in)) continue;
      auto d = in->ensure_grad();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto x = a.data(), z = b.data();
  std::vector<Real> y(x.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * z[i];
  return detail::make_result(a.shape(), std::move(y), {a, b}, [](detail::Node& self) {
    auto& lhs = self.inputs[0];
    auto& rhs = self.inputs[1];
    // Read both values before accumulating: lhs and rhs may be the same node.
    std::vector<Real> dl(self.grad.size()), dr(self.grad.size());
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      dl[i] = self.grad[i] * rhs->value[i];
      dr[i] = self.grad[i] * lhs->value[i];
    }
    if (detail::wants_grad(lhs)) {
      auto d = lhs->ensure_grad();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dl[i];
    }
    if (detail::wants_grad(rhs)) {
      auto d = rhs->ensure_grad();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dr[i];
    }
  });
}

Tensor scale(const Tensor& input, Real factor) {
  const auto x = input.data();
  std::vector<Real> y(x.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * factor;
  return detail::make_result(input.shape(), std::move(y), {input}, [factor](detail::Node& self) {
    auto d = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i] * factor;
  });
}

Tensor sum(const Tensor& input) {
  Real total = 0;
  for (Real v : input.data()) total += v;
  return detail::make_result({1}, {total}, {input}, [](detail::Node& self) {
    auto d = self.inputs[0]->ensure_grad();
    for (auto& v : d) v += self.grad[0];
  });
}

Tensor dot(const Tensor& input, std::span<const Real> weights) {
  if (weights.size() != input.numel()) throw ShapeError("dot: weight count does not match tensor size");
  Real total = 0;
  const auto x = input.data();
  for (std::size_t i = 0; i < x.size(); ++i) total += x[i] * weights[i];
  std::vector<Real> w(weights.begin(), weights.end());
  return detail::make_result({1}, {total}, {input}, [w = std::move(w)](detail::Node& self) {
    auto d = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[0] * w[i];
  });
}

}  // namespace tfn
