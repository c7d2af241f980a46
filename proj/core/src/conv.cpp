#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

#include "autograd.hpp"
#include "tfn/ops.hpp"
#include "tfn/parallel.hpp"

namespace tfn {
namespace {

using RowMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using StridedMap = Eigen::Map<RowMatrix, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>;

// Upper bound on im2col buffer elements; larger outputs are processed in row bands.
constexpr std::int64_t kColumnBudget = std::int64_t{1} << 22;

constexpr const char* kAxisNames[3] = {"T", "H", "W"};

struct Geometry {
  std::int64_t n, cin, t, h, w;
  std::int64_t cout, kt, kh, kw;
  std::int64_t st, sh, sw, pt, ph, pw;
  std::int64_t to, ho, wo;

  std::int64_t taps() const { return cin * kt * kh * kw; }
  std::int64_t out_plane() const { return ho * wo; }
  std::int64_t in_sample() const { return cin * t * h * w; }
  std::int64_t out_sample() const { return cout * to * ho * wo; }
  std::int64_t band_rows() const {
    return std::clamp<std::int64_t>(kColumnBudget / std::max<std::int64_t>(1, taps() * wo), 1, ho);
  }
};

Geometry make_geometry(const Shape& in, const Shape& weight, const ConvSpec& spec) {
  const Shape out = conv3d_output_shape(in, spec);
  if (weight.size() != 5) throw ShapeError("conv3d weight must be rank 5, got " + to_string(weight));
  if (weight[0] != spec.out_channels) {
    throw ShapeError("conv3d weight axis Cout is " + std::to_string(weight[0]) + ", spec expects " +
                     std::to_string(spec.out_channels));
  }
  if (weight[1] != in[1]) {
    throw ShapeError("conv3d channel mismatch on axis C: input has " + std::to_string(in[1]) +
                     ", weight expects " + std::to_string(weight[1]));
  }
  for (int a = 0; a < 3; ++a) {
    if (weight[2 + a] != spec.kernel[a]) {
      throw ShapeError(std::string("conv3d weight kernel mismatch on axis ") + kAxisNames[a]);
    }
  }
  return Geometry{in[0],          in[1],          in[2],          in[3],          in[4],
                  weight[0],      weight[2],      weight[3],      weight[4],      spec.stride[0],
                  spec.stride[1], spec.stride[2], spec.padding[0], spec.padding[1], spec.padding[2],
                  out[2],         out[3],         out[4]};
}

// Gathers the receptive fields of output rows [ho0, ho1) at output time `to`
// of one sample into col[taps, (ho1-ho0)*wo].
void im2col(const Geometry& g, const Real* x, std::int64_t to, std::int64_t ho0, std::int64_t ho1,
            Real* col) {
  const std::int64_t cols = (ho1 - ho0) * g.wo;
  std::int64_t row = 0;
  for (std::int64_t c = 0; c < g.cin; ++c) {
    for (std::int64_t dt = 0; dt < g.kt; ++dt) {
      const std::int64_t ti = to * g.st - g.pt + dt;
      for (std::int64_t dh = 0; dh < g.kh; ++dh) {
        for (std::int64_t dw = 0; dw < g.kw; ++dw, ++row) {
          Real* dst = col + row * cols;
          if (ti < 0 || ti >= g.t) {
            std::fill(dst, dst + cols, Real(0));
            continue;
          }
          const Real* plane = x + (c * g.t + ti) * g.h * g.w;
          for (std::int64_t ho = ho0; ho < ho1; ++ho) {
            const std::int64_t hi = ho * g.sh - g.ph + dh;
            Real* out = dst + (ho - ho0) * g.wo;
            if (hi < 0 || hi >= g.h) {
              std::fill(out, out + g.wo, Real(0));
              continue;
            }
            const Real* src = plane + hi * g.w;
            for (std::int64_t wo = 0; wo < g.wo; ++wo) {
              const std::int64_t wi = wo * g.sw - g.pw + dw;
              out[wo] = (wi >= 0 && wi < g.w) ? src[wi] : Real(0);
            }
          }
        }
      }
    }
  }
}

void col2im(const Geometry& g, const Real* col, std::int64_t to, std::int64_t ho0, std::int64_t ho1,
            Real* dx) {
  const std::int64_t cols = (ho1 - ho0) * g.wo;
  std::int64_t row = 0;
  for (std::int64_t c = 0; c < g.cin; ++c) {
    for (std::int64_t dt = 0; dt < g.kt; ++dt) {
      const std::int64_t ti = to * g.st - g.pt + dt;
      for (std::int64_t dh = 0; dh < g.kh; ++dh) {
        for (std::int64_t dw = 0; dw < g.kw; ++dw, ++row) {
          if (ti < 0 || ti >= g.t) continue;
          const Real* src = col + row * cols;
          Real* plane = dx + (c * g.t + ti) * g.h * g.w;
          for (std::int64_t ho = ho0; ho < ho1; ++ho) {
            const std::int64_t hi = ho * g.sh - g.ph + dh;
            if (hi < 0 || hi >= g.h) continue;
            const Real* in = src + (ho - ho0) * g.wo;
            Real* dst = plane + hi * g.w;
            for (std::int64_t wo = 0; wo < g.wo; ++wo) {
              const std::int64_t wi = wo * g.sw - g.pw + dw;
              if (wi >= 0 && wi < g.w) dst[wi] += in[wo];
            }
          }
        }
      }
    }
  }
}

void forward_im2col(const Geometry& g, const Real* x, const Real* weight, const Real* bias, Real* y) {
  const std::int64_t bands_per_slice = (g.ho + g.band_rows() - 1) / g.band_rows();
  const std::int64_t tasks = g.n * g.to * bands_per_slice;
  const std::int64_t band = g.band_rows();
  const std::int64_t K = g.taps();
  ConstMatrixMap wmat(weight, g.cout, K);
  parallel_for(static_cast<std::size_t>(tasks), [&](std::size_t begin, std::size_t end, std::size_t) {
    std::vector<Real> col(static_cast<std::size_t>(K * band * g.wo));
    for (std::size_t task = begin; task < end; ++task) {
      const std::int64_t b = static_cast<std::int64_t>(task) % bands_per_slice;
      const std::int64_t to = (static_cast<std::int64_t>(task) / bands_per_slice) % g.to;
      const std::int64_t n = static_cast<std::int64_t>(task) / (bands_per_slice * g.to);
      const std::int64_t ho0 = b * band;
      const std::int64_t ho1 = std::min(g.ho, ho0 + band);
      const std::int64_t cols = (ho1 - ho0) * g.wo;
      im2col(g, x + n * g.in_sample(), to, ho0, ho1, col.data());
      ConstMatrixMap cmat(col.data(), K, cols);
      StridedMap out(y + n * g.out_sample() + to * g.out_plane() + ho0 * g.wo, g.cout, cols,
                     Eigen::OuterStride<>(g.to * g.out_plane()));
      out.noalias() = wmat * cmat;
      if (bias) out.colwise() += Eigen::Map<const Eigen::Matrix<Real, Eigen::Dynamic, 1>>(bias, g.cout);
    }
  });
}

void backward_im2col(const Geometry& g, const Real* x, const Real* weight, const Real* dy, Real* dx,
                     Real* dweight, Real* dbias) {
  const std::int64_t K = g.taps();
  const std::int64_t band = g.band_rows();
  const std::size_t workers = std::min<std::size_t>(num_threads(), static_cast<std::size_t>(g.n));
  std::vector<std::vector<Real>> dw_part(workers);
  std::vector<std::vector<Real>> db_part(workers);
  ConstMatrixMap wmat(weight, g.cout, K);
  parallel_for(static_cast<std::size_t>(g.n), [&](std::size_t begin, std::size_t end, std::size_t worker) {
    std::vector<Real> col(static_cast<std::size_t>(K * band * g.wo));
    std::vector<Real> dcol(dx ? col.size() : 0);
    if (dweight) dw_part[worker].assign(static_cast<std::size_t>(g.cout * K), Real(0));
    if (dbias) db_part[worker].assign(static_cast<std::size_t>(g.cout), Real(0));
    for (std::size_t ni = begin; ni < end; ++ni) {
      const auto n = static_cast<std::int64_t>(ni);
      for (std::int64_t to = 0; to < g.to; ++to) {
        for (std::int64_t ho0 = 0; ho0 < g.ho; ho0 += band) {
          const std::int64_t ho1 = std::min(g.ho, ho0 + band);
          const std::int64_t cols = (ho1 - ho0) * g.wo;
          ConstStridedMap grad_out(dy + n * g.out_sample() + to * g.out_plane() + ho0 * g.wo, g.cout,
                                   cols, Eigen::OuterStride<>(g.to * g.out_plane()));
          if (dweight) {
            im2col(g, x + n * g.in_sample(), to, ho0, ho1, col.data());
            ConstMatrixMap cmat(col.data(), K, cols);
            MatrixMap dw(dw_part[worker].data(), g.cout, K);
            dw.noalias() += grad_out * cmat.transpose();
          }
          if (dbias) {
            // Plain loop: Eigen's vectorized reduction order depends on the
            // buffer's alignment, which would make runs differ in the last bit.
            for (std::int64_t c = 0; c < g.cout; ++c) {
              Real acc = 0;
              for (std::int64_t j = 0; j < cols; ++j) acc += grad_out(c, j);
              db_part[worker][static_cast<std::size_t>(c)] += acc;
            }
          }
          if (dx) {
            MatrixMap dc(dcol.data(), K, cols);
            dc.noalias() = wmat.transpose() * grad_out;
            col2im(g, dcol.data(), to, ho0, ho1, dx + n * g.in_sample());
          }
        }
      }
    }
  });
  for (std::size_t w = 0; w < workers; ++w) {
    if (dweight && !dw_part[w].empty()) {
      for (std::size_t i = 0; i < dw_part[w].size(); ++i) dweight[i] += dw_part[w][i];
    }
    if (dbias && !db_part[w].empty()) {
      for (std::size_t i = 0; i < db_part[w].size(); ++i) dbias[i] += db_part[w][i];
    }
  }
}

inline std::int64_t in_index(const Geometry& g, std::int64_t n, std::int64_t c, std::int64_t t,
                             std::int64_t h, std::int64_t w) {
  return (((n * g.cin + c) * g.t + t) * g.h + h) * g.w + w;
}
inline std::int64_t out_index(const Geometry& g, std::int64_t n, std::int64_t c, std::int64_t t,
                              std::int64_t h, std::int64_t w) {
  return (((n * g.cout + c) * g.to + t) * g.ho + h) * g.wo + w;
}
inline std::int64_t weight_index(const Geometry& g, std::int64_t co, std::int64_t ci, std::int64_t dt,
                                 std::int64_t dh, std::int64_t dw) {
  return (((co * g.cin + ci) * g.kt + dt) * g.kh + dh) * g.kw + dw;
}

// Visits every (output, input, weight) index triple of one output element.
template <typename F>
void for_each_tap(const Geometry& g, std::int64_t n, std::int64_t co, std::int64_t to, std::int64_t ho,
                  std::int64_t wo, F&& f) {
  for (std::int64_t ci = 0; ci < g.cin; ++ci) {
    for (std::int64_t dt = 0; dt < g.kt; ++dt) {
      const std::int64_t ti = to * g.st - g.pt + dt;
      if (ti < 0 || ti >= g.t) continue;
      for (std::int64_t dh = 0; dh < g.kh; ++dh) {
        const std::int64_t hi = ho * g.sh - g.ph + dh;
        if (hi < 0 || hi >= g.h) continue;
        for (std::int64_t dw = 0; dw < g.kw; ++dw) {
          const std::int64_t wi = wo * g.sw - g.pw + dw;
          if (wi < 0 || wi >= g.w) continue;
          f(in_index(g, n, ci, ti, hi, wi), weight_index(g, co, ci, dt, dh, dw));
        }
      }
    }
  }
}

void forward_direct(const Geometry& g, const Real* x, const Real* weight, const Real* bias, Real* y) {
  parallel_for(static_cast<std::size_t>(g.n * g.cout), [&](std::size_t begin, std::size_t end, std::size_t) {
    for (std::size_t job = begin; job < end; ++job) {
      const std::int64_t n = static_cast<std::int64_t>(job) / g.cout;
      const std::int64_t co = static_cast<std::int64_t>(job) % g.cout;
      for (std::int64_t to = 0; to < g.to; ++to)
        for (std::int64_t ho = 0; ho < g.ho; ++ho)
          for (std::int64_t wo = 0; wo < g.wo; ++wo) {
            Real acc = bias ? bias[co] : Real(0);
            for_each_tap(g, n, co, to, ho, wo, [&](std::int64_t xi, std::int64_t wi) { acc += x[xi] * weight[wi]; });
            y[out_index(g, n, co, to, ho, wo)] = acc;
          }
    }
  });
}

void backward_direct(const Geometry& g, const Real* x, const Real* weight, const Real* dy, Real* dx,
                     Real* dweight, Real* dbias) {
  // Weight and bias gradients: each output channel is owned by one worker.
  if (dweight || dbias) {
    parallel_for(static_cast<std::size_t>(g.cout), [&](std::size_t begin, std::size_t end, std::size_t) {
      for (std::size_t c = begin; c < end; ++c) {
        const auto co = static_cast<std::int64_t>(c);
        for (std::int64_t n = 0; n < g.n; ++n)
          for (std::int64_t to = 0; to < g.to; ++to)
            for (std::int64_t ho = 0; ho < g.ho; ++ho)
              for (std::int64_t wo = 0; wo < g.wo; ++wo) {
                const Real go = dy[out_index(g, n, co, to, ho, wo)];
                if (dbias) dbias[co] += go;
                if (dweight) {
                  for_each_tap(g, n, co, to, ho, wo,
                               [&](std::int64_t xi, std::int64_t wi) { dweight[wi] += go * x[xi]; });
                }
              }
      }
    });
  }
  if (dx) {
    parallel_for(static_cast<std::size_t>(g.n), [&](std::size_t begin, std::size_t end, std::size_t) {
      for (std::size_t ni = begin; ni < end; ++ni) {
        const auto n = static_cast<std::int64_t>(ni);
        for (std::int64_t co = 0; co < g.cout; ++co)
          for (std::int64_t to = 0; to < g.to; ++to)
            for (std::int64_t ho = 0; ho < g.ho; ++ho)
              for (std::int64_t wo = 0; wo < g.wo; ++wo) {
                const Real go = dy[out_index(g, n, co, to, ho, wo)];
                for_each_tap(g, n, co, to, ho, wo,
                             [&](std::int64_t xi, std::int64_t wi) { dx[xi] += go * weight[wi]; });
              }
      }
    });
  }
}

Tensor conv_impl(const Tensor& input, const Tensor& weight, const Tensor& bias, const Geometry& g,
                 ConvAlgorithm algorithm, Shape out_shape) {
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.cout)) {
    throw ShapeError("conv bias must have shape [" + std::to_string(g.cout) + "], got " +
                     to_string(bias.shape()));
  }
  std::vector<Real> y(static_cast<std::size_t>(g.n * g.out_sample()));
  const Real* bias_ptr = bias.defined() ? bias.data().data() : nullptr;
  if (algorithm == ConvAlgorithm::im2col) {
    forward_im2col(g, input.data().data(), weight.data().data(), bias_ptr, y.data());
  } else {
    forward_direct(g, input.data().data(), weight.data().data(), bias_ptr, y.data());
  }
  return detail::make_result(
      std::move(out_shape), std::move(y), {input, weight, bias}, [g, algorithm](detail::Node& self) {
        const auto& in = self.inputs[0];
        const auto& w = self.inputs[1];
        const auto& b = self.inputs[2];
        Real* dx = detail::wants_grad(in) ? in->ensure_grad().data() : nullptr;
        Real* dw = detail::wants_grad(w) ? w->ensure_grad().data() : nullptr;
        Real* db = detail::wants_grad(b) ? b->ensure_grad().data() : nullptr;
        if (algorithm == ConvAlgorithm::im2col) {
          backward_im2col(g, in->value.data(), w->value.data(), self.grad.data(), dx, dw, db);
        } else {
          backward_direct(g, in->value.data(), w->value.data(), self.grad.data(), dx, dw, db);
        }
      });
}

}  // namespace

std::int64_t conv_output_size(std::int64_t in, std::int64_t kernel, std::int64_t stride, std::int64_t pad) {
  if (stride <= 0) return 0;
  const std::int64_t span = in + 2 * pad - kernel;
  if (span < 0) return 0;
  return span / stride + 1;
}

Shape conv3d_output_shape(const Shape& input, const ConvSpec& spec) {
  if (input.size() != 5) throw ShapeError("conv3d expects [N,C,T,H,W] input, got " + to_string(input));
  if (spec.out_channels <= 0) throw ShapeError("conv out_channels must be positive");
  Shape out{input[0], spec.out_channels, 0, 0, 0};
  for (int a = 0; a < 3; ++a) {
    if (spec.kernel[a] <= 0 || spec.stride[a] <= 0 || spec.padding[a] < 0) {
      throw ShapeError(std::string("invalid conv kernel/stride/padding on axis ") + kAxisNames[a]);
    }
    out[2 + a] = conv_output_size(input[2 + a], spec.kernel[a], spec.stride[a], spec.padding[a]);
    if (out[2 + a] <= 0) {
      throw ShapeError(std::string("conv produces non-positive output on axis ") + kAxisNames[a] +
                       " (input " + std::to_string(input[2 + a]) + ", kernel " +
                       std::to_string(spec.kernel[a]) + ", padding " + std::to_string(spec.padding[a]) +
                       ")");
    }
  }
  return out;
}

Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias, const ConvSpec& spec,
              ConvAlgorithm algorithm) {
  const Geometry g = make_geometry(input.shape(), weight.shape(), spec);
  return conv_impl(input, weight, bias, g, algorithm, {g.n, g.cout, g.to, g.ho, g.wo});
}

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, const ConvSpec& spec,
              ConvAlgorithm algorithm) {
  if (input.rank() != 4) throw ShapeError("conv2d expects [N,C,H,W] input, got " + to_string(input.shape()));
  if (weight.rank() != 4) throw ShapeError("conv2d weight must be rank 4, got " + to_string(weight.shape()));
  if (spec.kernel[0] != 1 || spec.stride[0] != 1 || spec.padding[0] != 0) {
    throw ShapeError("conv2d requires a temporal extent of 1");
  }
  // Same storage interpreted with a unit time axis.
  const auto& is = input.shape();
  const auto& ws = weight.shape();
  const Geometry g = make_geometry({is[0], is[1], 1, is[2], is[3]}, {ws[0], ws[1], 1, ws[2], ws[3]}, spec);
  return conv_impl(input, weight, bias, g, algorithm, {g.n, g.cout, g.ho, g.wo});
}

Tensor he_normal(const Shape& weight_shape, Rng& rng) {
  std::int64_t fan_in = 1;
  for (std::size_t i = 1; i < weight_shape.size(); ++i) fan_in *= weight_shape[i];
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  std::vector<Real> data(static_cast<std::size_t>(shape_numel(weight_shape)));
  for (auto& v : data) v = static_cast<Real>(stddev * rng.normal());
  return Tensor::from_data(weight_shape, std::move(data), true);
}

}  // namespace tfn
