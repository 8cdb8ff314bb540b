#pragma once

// Differentiable operations over ecl::Tensor. Only what the extractor
// network and the training losses need; no broadcasting.

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "ecl/error.hpp"
#include "ecl/rng.hpp"
#include "ecl/tensor.hpp"

namespace ecl {

namespace detail {

// Four-lane dot product; fixed association order keeps results reproducible
// while letting the compiler vectorize.
inline double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

// y[0..n) += alpha * x[0..n)
inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": " + what + " must be " + std::to_string(rank) +
                         "-dimensional, got " + shape_str(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

inline void accumulate(Node& target, const std::vector<double>& delta) {
  auto& g = target.ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto na = a.node(), nb = b.node();
  return make_op_result("add", a.shape(), std::move(out), {na, nb}, [na, nb](const Node& self) {
    if (na->requires_grad) detail::accumulate(*na, self.grad);
    if (nb->requires_grad) detail::accumulate(*nb, self.grad);
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto na = a.node(), nb = b.node();
  return make_op_result("mul", a.shape(), std::move(out), {na, nb}, [na, nb](const Node& self) {
    if (na->requires_grad) {
      auto& g = na->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * nb->data[i];
    }
    if (nb->requires_grad) {
      auto& g = nb->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * na->data[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = factor * a.data()[i];
  auto na = a.node();
  return make_op_result("scale", a.shape(), std::move(out), {na}, [na, factor](const Node& self) {
    auto& g = na->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  });
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  auto na = a.node();
  return make_op_result("sum", {1}, {s}, {na}, [na](const Node& self) {
    auto& g = na->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

/// Left-to-right sum of scalar tensors.
inline Tensor sum_scalars(std::span<const Tensor> terms) {
  if (terms.empty()) throw ContractError("sum_scalars: no terms");
  Tensor total = terms[0];
  for (std::size_t k = 1; k < terms.size(); ++k) total = add(total, terms[k]);
  return total;
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  auto na = a.node();
  return make_op_result("reshape", std::move(shape), std::vector<double>(a.data().begin(), a.data().end()),
                        {na}, [na](const Node& self) { detail::accumulate(*na, self.grad); });
}

/// [B, ...] -> [B, prod(...)]
inline Tensor flatten(const Tensor& a) {
  return reshape(a, {a.dim(0), a.numel() / a.dim(0)});
}

/// Forward identity; the result is a fresh leaf, so nothing upstream of
/// `a` receives gradient through it.
inline Tensor stop_gradient(const Tensor& a) {
  return make_op_result("stop_gradient", a.shape(),
                        std::vector<double>(a.data().begin(), a.data().end()), {}, {});
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Temporal convolution along the last axis with same-length zero padding.
///
/// input   [B, Cin, H, T]
/// kernels [Cout, Cin/groups, 1, L], L odd
/// output  [B, Cout, H, T]
///
/// groups == 1 with Cin == 1 is the plain per-channel temporal filter bank;
/// groups == Cin gives a depthwise temporal filter; L == 1 a pointwise mix.
inline Tensor conv_temporal(const Tensor& input, const Tensor& kernels, std::size_t groups = 1) {
  detail::require_rank(input, 4, "conv_temporal", "input");
  detail::require_rank(kernels, 4, "conv_temporal", "kernels");
  const std::size_t B = input.dim(0), Cin = input.dim(1), H = input.dim(2), T = input.dim(3);
  const std::size_t Cout = kernels.dim(0), L = kernels.dim(3);
  if (groups == 0 || Cin % groups != 0 || Cout % groups != 0) {
    throw DimensionError("conv_temporal: groups=" + std::to_string(groups) +
                         " must divide input channels (axis 1 = " + std::to_string(Cin) +
                         ") and kernel count (axis 0 = " + std::to_string(Cout) + ")");
  }
  const std::size_t cin_per_group = Cin / groups, cout_per_group = Cout / groups;
  if (kernels.dim(1) != cin_per_group || kernels.dim(2) != 1) {
    throw DimensionError("conv_temporal: kernels " + shape_str(kernels.shape()) +
                         " incompatible with input " + shape_str(input.shape()) +
                         " (kernel axis 1 must be " + std::to_string(cin_per_group) +
                         ", axis 2 must be 1)");
  }
  if (L % 2 == 0) {
    throw DimensionError("conv_temporal: kernel length (axis 3) must be odd, got " + std::to_string(L));
  }
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(L / 2);
  const std::ptrdiff_t Ti = static_cast<std::ptrdiff_t>(T);

  const double* x = input.data().data();
  const double* k = kernels.data().data();
  std::vector<double> out(B * Cout * H * T, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t o = 0; o < Cout; ++o) {
      const std::size_t g = o / cout_per_group;
      for (std::size_t ci = 0; ci < cin_per_group; ++ci) {
        const std::size_t c = g * cin_per_group + ci;
        const double* kk = k + (o * cin_per_group + ci) * L;
        for (std::size_t h = 0; h < H; ++h) {
          const double* xr = x + ((b * Cin + c) * H + h) * T;
          double* yr = out.data() + ((b * Cout + o) * H + h) * T;
          for (std::size_t l = 0; l < L; ++l) {
            const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(l) - pad;
            const std::ptrdiff_t t0 = std::max<std::ptrdiff_t>(0, -s);
            const std::ptrdiff_t t1 = std::min<std::ptrdiff_t>(Ti, Ti - s);
            if (t1 <= t0) continue;
            detail::axpy(kk[l], xr + t0 + s, yr + t0, static_cast<std::size_t>(t1 - t0));
          }
        }
      }
    }
  }

  auto ni = input.node(), nk = kernels.node();
  return make_op_result(
      "conv_temporal", {B, Cout, H, T}, std::move(out), {ni, nk},
      [=](const Node& self) {
        const double* gy = self.grad.data();
        double* gx = ni->requires_grad ? ni->ensure_grad().data() : nullptr;
        double* gk = nk->requires_grad ? nk->ensure_grad().data() : nullptr;
        const double* xs = ni->data.data();
        const double* ks = nk->data.data();
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t o = 0; o < Cout; ++o) {
            const std::size_t g = o / cout_per_group;
            for (std::size_t ci = 0; ci < cin_per_group; ++ci) {
              const std::size_t c = g * cin_per_group + ci;
              const std::size_t kofs = (o * cin_per_group + ci) * L;
              for (std::size_t h = 0; h < H; ++h) {
                const std::size_t xofs = ((b * Cin + c) * H + h) * T;
                const double* gyr = gy + ((b * Cout + o) * H + h) * T;
                for (std::size_t l = 0; l < L; ++l) {
                  const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(l) - pad;
                  const std::ptrdiff_t t0 = std::max<std::ptrdiff_t>(0, -s);
                  const std::ptrdiff_t t1 = std::min<std::ptrdiff_t>(Ti, Ti - s);
                  if (t1 <= t0) continue;
                  const auto n = static_cast<std::size_t>(t1 - t0);
                  if (gk) gk[kofs + l] += detail::dot(gyr + t0, xs + xofs + t0 + s, n);
                  if (gx) detail::axpy(ks[kofs + l], gyr + t0, gx + xofs + t0 + s, n);
                }
              }
            }
          }
        }
      });
}

/// Depthwise spatial filter spanning the full channel axis.
///
/// input   [B, F, C, T]
/// kernels [F*D, 1, C, 1]; output map o reads input map o / D
/// output  [B, F*D, 1, T]
inline Tensor conv_spatial_depthwise(const Tensor& input, const Tensor& kernels) {
  detail::require_rank(input, 4, "conv_spatial_depthwise", "input");
  detail::require_rank(kernels, 4, "conv_spatial_depthwise", "kernels");
  const std::size_t B = input.dim(0), F = input.dim(1), C = input.dim(2), T = input.dim(3);
  const std::size_t FD = kernels.dim(0);
  if (kernels.dim(2) != C) {
    throw DimensionError("conv_spatial_depthwise: kernel channel axis (axis 2 = " +
                         std::to_string(kernels.dim(2)) + ") must equal input channel axis (axis 2 = " +
                         std::to_string(C) + ")");
  }
  if (kernels.dim(1) != 1 || kernels.dim(3) != 1 || FD % F != 0) {
    throw DimensionError("conv_spatial_depthwise: kernels " + shape_str(kernels.shape()) +
                         " incompatible with input " + shape_str(input.shape()));
  }
  const std::size_t D = FD / F;
  const double* x = input.data().data();
  const double* k = kernels.data().data();
  std::vector<double> out(B * FD * T, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t o = 0; o < FD; ++o) {
      const std::size_t f = o / D;
      double* yr = out.data() + (b * FD + o) * T;
      for (std::size_t c = 0; c < C; ++c) {
        detail::axpy(k[o * C + c], x + ((b * F + f) * C + c) * T, yr, T);
      }
    }
  }
  auto ni = input.node(), nk = kernels.node();
  return make_op_result("conv_spatial_depthwise", {B, FD, 1, T}, std::move(out), {ni, nk},
                        [=](const Node& self) {
                          const double* gy = self.grad.data();
                          double* gx = ni->requires_grad ? ni->ensure_grad().data() : nullptr;
                          double* gk = nk->requires_grad ? nk->ensure_grad().data() : nullptr;
                          for (std::size_t b = 0; b < B; ++b) {
                            for (std::size_t o = 0; o < FD; ++o) {
                              const std::size_t f = o / D;
                              const double* gyr = gy + (b * FD + o) * T;
                              for (std::size_t c = 0; c < C; ++c) {
                                const std::size_t xofs = ((b * F + f) * C + c) * T;
                                if (gk) gk[o * C + c] += detail::dot(gyr, ni->data.data() + xofs, T);
                                if (gx) detail::axpy(nk->data[o * C + c], gyr, gx + xofs, T);
                              }
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Normalization, activation, pooling
// ---------------------------------------------------------------------------

struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNormState() = default;
  explicit BatchNormState(std::size_t features, double momentum_ = 0.1, double eps_ = 1e-5)
      : running_mean(features, 0.0), running_var(features, 1.0), momentum(momentum_), eps(eps_) {}
};

/// Per-feature normalization over every axis except axis 1.
///
/// Train mode normalizes with the biased batch variance and folds the
/// unbiased variance into the running moments; eval mode uses the running
/// moments and leaves `state` untouched.
inline Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                         BatchNormState& state, Mode mode) {
  if (input.rank() < 2) {
    throw DimensionError("batch_norm: input must have a feature axis, got " + shape_str(input.shape()));
  }
  const std::size_t B = input.dim(0), F = input.dim(1);
  const std::size_t inner = input.numel() / (B * F);
  if (gamma.numel() != F || beta.numel() != F || state.running_mean.size() != F ||
      state.running_var.size() != F) {
    throw DimensionError("batch_norm: feature axis (axis 1 = " + std::to_string(F) +
                         ") does not match gamma/beta/state length " + std::to_string(gamma.numel()));
  }
  const std::size_t n = B * inner;
  if (mode == Mode::train && B < 2) {
    throw DegenerateBatchError("batch_norm: train mode needs at least 2 samples, got batch of 1");
  }
  const double* x = input.data().data();
  std::vector<double> mean(F), invstd(F);
  if (mode == Mode::train) {
    for (std::size_t f = 0; f < F; ++f) {
      double s = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const double* r = x + (b * F + f) * inner;
        for (std::size_t i = 0; i < inner; ++i) s += r[i];
      }
      const double mu = s / static_cast<double>(n);
      double ss = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const double* r = x + (b * F + f) * inner;
        for (std::size_t i = 0; i < inner; ++i) ss += (r[i] - mu) * (r[i] - mu);
      }
      const double var = ss / static_cast<double>(n);
      mean[f] = mu;
      invstd[f] = 1.0 / std::sqrt(var + state.eps);
      const double unbiased = ss / static_cast<double>(n - 1);
      state.running_mean[f] = (1.0 - state.momentum) * state.running_mean[f] + state.momentum * mu;
      state.running_var[f] = (1.0 - state.momentum) * state.running_var[f] + state.momentum * unbiased;
    }
  } else {
    for (std::size_t f = 0; f < F; ++f) {
      mean[f] = state.running_mean[f];
      invstd[f] = 1.0 / std::sqrt(state.running_var[f] + state.eps);
    }
  }

  std::vector<double> xhat(input.numel()), out(input.numel());
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t f = 0; f < F; ++f) {
      const std::size_t ofs = (b * F + f) * inner;
      const double g = gamma.data()[f], be = beta.data()[f];
      for (std::size_t i = 0; i < inner; ++i) {
        const double h = (x[ofs + i] - mean[f]) * invstd[f];
        xhat[ofs + i] = h;
        out[ofs + i] = g * h + be;
      }
    }
  }

  auto ni = input.node(), ng = gamma.node(), nb = beta.node();
  const bool train = mode == Mode::train;
  return make_op_result(
      "batch_norm", input.shape(), std::move(out), {ni, ng, nb},
      [=, xhat = std::move(xhat), invstd = std::move(invstd)](const Node& self) {
        const double* gy = self.grad.data();
        for (std::size_t f = 0; f < F; ++f) {
          double sum_gy = 0.0, sum_gy_xhat = 0.0;
          for (std::size_t b = 0; b < B; ++b) {
            const std::size_t ofs = (b * F + f) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
              sum_gy += gy[ofs + i];
              sum_gy_xhat += gy[ofs + i] * xhat[ofs + i];
            }
          }
          if (ng->requires_grad) ng->ensure_grad()[f] += sum_gy_xhat;
          if (nb->requires_grad) nb->ensure_grad()[f] += sum_gy;
          if (!ni->requires_grad) continue;
          auto& gx = ni->ensure_grad();
          const double g = ng->data[f];
          const double nn = static_cast<double>(n);
          for (std::size_t b = 0; b < B; ++b) {
            const std::size_t ofs = (b * F + f) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
              if (train) {
                gx[ofs + i] += g * invstd[f] / nn *
                               (nn * gy[ofs + i] - sum_gy - xhat[ofs + i] * sum_gy_xhat);
              } else {
                gx[ofs + i] += g * invstd[f] * gy[ofs + i];
              }
            }
          }
        }
      });
}

/// ELU with unit scale: x for x > 0, exp(x) - 1 otherwise.
inline Tensor elu(const Tensor& input) {
  std::vector<double> out(input.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = input.data()[i];
    out[i] = v > 0.0 ? v : std::expm1(v);
  }
  auto ni = input.node();
  return make_op_result("elu", input.shape(), std::move(out), {ni}, [ni](const Node& self) {
    auto& g = ni->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = ni->data[i];
      g[i] += self.grad[i] * (v > 0.0 ? 1.0 : self.data[i] + 1.0);
    }
  });
}

/// Zero-pads the last axis on the right up to `length`.
inline Tensor pad_time(const Tensor& input, std::size_t length) {
  const std::size_t T = input.shape().back();
  if (length < T) {
    throw DimensionError("pad_time: target length " + std::to_string(length) +
                         " shorter than time axis " + std::to_string(T));
  }
  if (length == T) return input;
  const std::size_t rows = input.numel() / T;
  std::vector<double> out(rows * length, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(input.data().data() + r * T, T, out.data() + r * length);
  }
  Shape shape = input.shape();
  shape.back() = length;
  auto ni = input.node();
  return make_op_result("pad_time", std::move(shape), std::move(out), {ni},
                        [ni, rows, T, length](const Node& self) {
                          auto& g = ni->ensure_grad();
                          for (std::size_t r = 0; r < rows; ++r) {
                            for (std::size_t t = 0; t < T; ++t) g[r * T + t] += self.grad[r * length + t];
                          }
                        });
}

/// Average pooling along the last axis; output length floor((T - window) / stride) + 1.
inline Tensor avg_pool_time(const Tensor& input, std::size_t window, std::size_t stride) {
  if (window == 0 || stride == 0) throw ParameterError("avg_pool_time: window and stride must be positive");
  const std::size_t T = input.shape().back();
  if (window > T) {
    throw DimensionError("avg_pool_time: window " + std::to_string(window) + " exceeds time axis " +
                         std::to_string(T));
  }
  const std::size_t To = (T - window) / stride + 1;
  const std::size_t rows = input.numel() / T;
  const double inv = 1.0 / static_cast<double>(window);
  std::vector<double> out(rows * To);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = input.data().data() + r * T;
    for (std::size_t t = 0; t < To; ++t) {
      double s = 0.0;
      for (std::size_t w = 0; w < window; ++w) s += xr[t * stride + w];
      out[r * To + t] = s * inv;
    }
  }
  Shape shape = input.shape();
  shape.back() = To;
  auto ni = input.node();
  return make_op_result("avg_pool_time", std::move(shape), std::move(out), {ni},
                        [=](const Node& self) {
                          auto& g = ni->ensure_grad();
                          for (std::size_t r = 0; r < rows; ++r) {
                            for (std::size_t t = 0; t < To; ++t) {
                              const double d = self.grad[r * To + t] * inv;
                              for (std::size_t w = 0; w < window; ++w) g[r * T + t * stride + w] += d;
                            }
                          }
                        });
}

/// Inverted dropout: train mode zeroes with probability p and scales
/// survivors by 1/(1-p); eval mode is the identity.
inline Tensor dropout(const Tensor& input, double p, Mode mode, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw ParameterError("dropout: p must lie in [0, 1), got " + std::to_string(p));
  }
  if (mode == Mode::eval || p == 0.0) return input;
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(input.numel());
  for (auto& m : mask) m = rng.uniform() >= p ? keep_scale : 0.0;
  std::vector<double> out(input.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = input.data()[i] * mask[i];
  auto ni = input.node();
  return make_op_result("dropout", input.shape(), std::move(out), {ni},
                        [ni, mask = std::move(mask)](const Node& self) {
                          auto& g = ni->ensure_grad();
                          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
                        });
}

/// x W^T + b with x [B, in], W [out, in], b [out].
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  detail::require_rank(x, 2, "linear", "input");
  detail::require_rank(weight, 2, "linear", "weight");
  const std::size_t B = x.dim(0), In = x.dim(1), Out = weight.dim(0);
  if (weight.dim(1) != In || bias.numel() != Out) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + ", weight " +
                         shape_str(weight.shape()) + ", bias " + shape_str(bias.shape()) +
                         " are incompatible");
  }
  std::vector<double> out(B * Out);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t o = 0; o < Out; ++o) {
      out[b * Out + o] =
          detail::dot(x.data().data() + b * In, weight.data().data() + o * In, In) + bias.data()[o];
    }
  }
  auto nx = x.node(), nw = weight.node(), nb = bias.node();
  return make_op_result("linear", {B, Out}, std::move(out), {nx, nw, nb}, [=](const Node& self) {
    const double* gy = self.grad.data();
    if (nx->requires_grad) {
      auto& g = nx->ensure_grad();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t o = 0; o < Out; ++o)
          detail::axpy(gy[b * Out + o], nw->data.data() + o * In, g.data() + b * In, In);
    }
    if (nw->requires_grad) {
      auto& g = nw->ensure_grad();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t o = 0; o < Out; ++o)
          detail::axpy(gy[b * Out + o], nx->data.data() + b * In, g.data() + o * In, In);
    }
    if (nb->requires_grad) {
      auto& g = nb->ensure_grad();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t o = 0; o < Out; ++o) g[o] += gy[b * Out + o];
    }
  });
}

inline Tensor softmax(const Tensor& input, std::size_t axis) {
  if (axis >= input.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(input.shape()));
  }
  const auto& s = input.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  std::vector<double> out(input.numel());
  const double* x = input.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) m = std::max(m, x[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(x[base + j * inner] - m);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= z;
    }
  }
  auto ni = input.node();
  return make_op_result("softmax", s, std::move(out), {ni}, [=](const Node& self) {
    auto& g = ni->ensure_grad();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * n * inner + i;
        double dotp = 0.0;
        for (std::size_t j = 0; j < n; ++j) dotp += self.grad[base + j * inner] * self.data[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t idx = base + j * inner;
          g[idx] += self.data[idx] * (self.grad[idx] - dotp);
        }
      }
    }
  });
}

inline Tensor log(const Tensor& input) {
  std::vector<double> out(input.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(input.data()[i]);
  auto ni = input.node();
  return make_op_result("log", input.shape(), std::move(out), {ni}, [ni](const Node& self) {
    auto& g = ni->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / ni->data[i];
  });
}

/// Elementwise mean of equally shaped tensors: (1/n) * sum_i inputs[i].
inline Tensor mean(std::span<const Tensor> inputs) {
  if (inputs.empty()) throw DimensionError("mean: empty input list");
  for (const auto& t : inputs) detail::require_same_shape(inputs[0], t, "mean");
  const double inv = 1.0 / static_cast<double>(inputs.size());
  std::vector<double> out(inputs[0].numel(), 0.0);
  for (const auto& t : inputs)
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += t.data()[i];
  for (auto& v : out) v *= inv;
  std::vector<NodePtr> parents;
  for (const auto& t : inputs) parents.push_back(t.node());
  auto ps = parents;
  return make_op_result("mean", inputs[0].shape(), std::move(out), std::move(parents),
                        [ps, inv](const Node& self) {
                          for (const auto& p : ps) {
                            if (!p->requires_grad) continue;
                            auto& g = p->ensure_grad();
                            for (std::size_t i = 0; i < g.size(); ++i) g[i] += inv * self.grad[i];
                          }
                        });
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Per-row cross-entropy -sum_j y_j log softmax(s)_j for scores [B, N] and
/// probability targets [B, N]. Returns [B].
inline Tensor cross_entropy_rows(const Tensor& scores, const Tensor& target) {
  detail::require_rank(scores, 2, "cross_entropy", "scores");
  detail::require_same_shape(scores, target, "cross_entropy");
  const std::size_t B = scores.dim(0), N = scores.dim(1);
  const double* s = scores.data().data();
  const double* y = target.data().data();
  for (std::size_t b = 0; b < B; ++b) {
    double total = 0.0;
    for (std::size_t j = 0; j < N; ++j) {
      if (!(y[b * N + j] >= 0.0)) {
        throw ValidationError("cross_entropy: target row " + std::to_string(b) + " has negative entry");
      }
      total += y[b * N + j];
    }
    if (std::abs(total - 1.0) > 1e-6) {
      throw ValidationError("cross_entropy: target row " + std::to_string(b) + " sums to " +
                            std::to_string(total) + ", expected 1");
    }
  }
  std::vector<double> log_p(B * N), out(B);
  for (std::size_t b = 0; b < B; ++b) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < N; ++j) m = std::max(m, s[b * N + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < N; ++j) z += std::exp(s[b * N + j] - m);
    const double lse = m + std::log(z);
    double ce = 0.0;
    for (std::size_t j = 0; j < N; ++j) {
      log_p[b * N + j] = s[b * N + j] - lse;
      if (y[b * N + j] != 0.0) ce -= y[b * N + j] * log_p[b * N + j];
    }
    out[b] = ce;
  }
  auto ns = scores.node(), nt = target.node();
  return make_op_result("cross_entropy", {B}, std::move(out), {ns, nt},
                        [=, log_p = std::move(log_p)](const Node& self) {
                          for (std::size_t b = 0; b < B; ++b) {
                            const double gb = self.grad[b];
                            if (ns->requires_grad) {
                              auto& g = ns->ensure_grad();
                              double ysum = 0.0;
                              for (std::size_t j = 0; j < N; ++j) ysum += nt->data[b * N + j];
                              for (std::size_t j = 0; j < N; ++j) {
                                g[b * N + j] += gb * (std::exp(log_p[b * N + j]) * ysum - nt->data[b * N + j]);
                              }
                            }
                            if (nt->requires_grad) {
                              auto& g = nt->ensure_grad();
                              for (std::size_t j = 0; j < N; ++j) g[b * N + j] -= gb * log_p[b * N + j];
                            }
                          }
                        });
}

/// sum_i weights[i] * values[i] / divisor, accumulated left to right.
inline Tensor weighted_sum(const Tensor& values, std::span<const double> weights, double divisor) {
  if (weights.size() != values.numel()) {
    throw DimensionError("weighted_sum: " + std::to_string(weights.size()) + " weights for " +
                         std::to_string(values.numel()) + " values");
  }
  if (!(divisor > 0.0)) throw ParameterError("weighted_sum: divisor must be positive");
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) acc += weights[i] * values.data()[i];
  std::vector<double> w(weights.begin(), weights.end());
  auto nv = values.node();
  return make_op_result("weighted_sum", {1}, {acc / divisor}, {nv},
                        [nv, w = std::move(w), divisor](const Node& self) {
                          auto& g = nv->ensure_grad();
                          for (std::size_t i = 0; i < g.size(); ++i) g[i] += w[i] * self.grad[0] / divisor;
                        });
}

/// Batch mean of per-row cross-entropy.
inline Tensor cross_entropy(const Tensor& scores, const Tensor& target) {
  const Tensor rows = cross_entropy_rows(scores, target);
  const std::vector<double> ones(rows.numel(), 1.0);
  return weighted_sum(rows, ones, static_cast<double>(rows.numel()));
}

}  // namespace ecl
