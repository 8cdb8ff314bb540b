#pragma once

// Finite-difference verification of every differentiable operation and of
// the full ensemble objective, over randomized small shapes.

#include <algorithm>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ecl/curriculum.hpp"
#include "ecl/distillation.hpp"
#include "ecl/gradcheck.hpp"
#include "ecl/model.hpp"
#include "ecl/ops.hpp"

namespace ecl {

namespace detail {

inline Tensor random_leaf(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool requires_grad = true) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
}

// Scalar probe: sum(out * R) for a fixed random R, so each output element
// carries a distinct upstream gradient.
inline Tensor probe(const Tensor& out, const Tensor& weights) { return sum(mul(out, weights)); }

inline Tensor random_distribution_rows(std::size_t rows, std::size_t cols, Rng& rng, bool requires_grad) {
  std::vector<double> v(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += (v[r * cols + c] = rng.uniform(0.1, 1.0));
    for (std::size_t c = 0; c < cols; ++c) v[r * cols + c] /= z;
  }
  return Tensor({rows, cols}, std::move(v), requires_grad);
}

}  // namespace detail

/// One randomized gradient check per operation for the given seed.
inline std::vector<GradcheckResult> gradcheck_ops(std::uint64_t seed, const GradcheckOptions& opt = {}) {
  Rng rng(seed);
  std::vector<GradcheckResult> out;
  auto run = [&](const std::string& name, std::vector<Tensor> inputs, const std::function<Tensor(const Tensor&)>& op,
                 Shape out_shape) {
    const Tensor w = detail::random_leaf(std::move(out_shape), rng, -1.0, 1.0, false);
    out.push_back(check_gradients(name, inputs, [&] { return detail::probe(op(inputs[0]), w); }, opt));
  };
  using detail::pick;
  using detail::random_leaf;

  {
    const std::size_t B = pick(rng, 1, 2), C = pick(rng, 1, 3), T = pick(rng, 3, 8), F = pick(rng, 1, 3);
    const std::size_t L = 2 * pick(rng, 0, 2) + 1;
    const Tensor x = random_leaf({B, 1, C, T}, rng), k = random_leaf({F, 1, 1, L}, rng);
    std::vector<Tensor> in{x, k};
    const Tensor w = random_leaf({B, F, C, T}, rng, -1, 1, false);
    out.push_back(check_gradients("conv_temporal", in, [&] { return detail::probe(conv_temporal(x, k), w); }, opt));
  }
  {
    const std::size_t G = pick(rng, 1, 3), T = pick(rng, 3, 8), L = 2 * pick(rng, 0, 2) + 1;
    const Tensor x = random_leaf({2, G, 1, T}, rng), k = random_leaf({G, 1, 1, L}, rng);
    std::vector<Tensor> in{x, k};
    const Tensor w = random_leaf({2, G, 1, T}, rng, -1, 1, false);
    out.push_back(check_gradients("conv_temporal_depthwise", in,
                                  [&] { return detail::probe(conv_temporal(x, k, G), w); }, opt));
  }
  {
    const std::size_t Ci = pick(rng, 1, 4), Co = pick(rng, 1, 4), T = pick(rng, 2, 6);
    const Tensor x = random_leaf({2, Ci, 1, T}, rng), k = random_leaf({Co, Ci, 1, 1}, rng);
    std::vector<Tensor> in{x, k};
    const Tensor w = random_leaf({2, Co, 1, T}, rng, -1, 1, false);
    out.push_back(check_gradients("conv_temporal_pointwise", in,
                                  [&] { return detail::probe(conv_temporal(x, k), w); }, opt));
  }
  {
    const std::size_t F = pick(rng, 1, 3), D = pick(rng, 1, 2), C = pick(rng, 1, 4), T = pick(rng, 2, 6);
    const Tensor x = random_leaf({2, F, C, T}, rng), k = random_leaf({F * D, 1, C, 1}, rng);
    std::vector<Tensor> in{x, k};
    const Tensor w = random_leaf({2, F * D, 1, T}, rng, -1, 1, false);
    out.push_back(check_gradients("conv_spatial_depthwise", in,
                                  [&] { return detail::probe(conv_spatial_depthwise(x, k), w); }, opt));
  }
  for (Mode mode : {Mode::train, Mode::eval}) {
    const std::size_t B = pick(rng, 2, 4), F = pick(rng, 1, 3), T = pick(rng, 1, 4);
    const Tensor x = random_leaf({B, F, 1, T}, rng, -2, 2);
    const Tensor g = random_leaf({F}, rng, 0.5, 1.5), b = random_leaf({F}, rng);
    BatchNormState base(F);
    for (std::size_t f = 0; f < F; ++f) {
      base.running_mean[f] = rng.uniform(-0.5, 0.5);
      base.running_var[f] = rng.uniform(0.5, 2.0);
    }
    std::vector<Tensor> in{x, g, b};
    const Tensor w = random_leaf({B, F, 1, T}, rng, -1, 1, false);
    out.push_back(check_gradients(mode == Mode::train ? "batch_norm_train" : "batch_norm_eval", in,
                                  [&] {
                                    BatchNormState st = base;
                                    return detail::probe(batch_norm(x, g, b, st, mode), w);
                                  },
                                  opt));
  }
  {
    const std::size_t n = pick(rng, 2, 12);
    run("elu", {random_leaf({n}, rng, -2, 2)}, [](const Tensor& x) { return elu(x); }, {n});
  }
  {
    const std::size_t window = pick(rng, 1, 3), stride = pick(rng, 1, 3), T = window + pick(rng, 0, 6);
    const std::size_t To = (T - window) / stride + 1;
    run("avg_pool_time", {random_leaf({2, 3, T}, rng)},
        [=](const Tensor& x) { return avg_pool_time(x, window, stride); }, {2, 3, To});
  }
  {
    const std::size_t T = pick(rng, 1, 5), pad = pick(rng, 0, 3);
    run("pad_time", {random_leaf({2, T}, rng)}, [=](const Tensor& x) { return pad_time(x, T + pad); }, {2, T + pad});
  }
  {
    const std::size_t B = pick(rng, 1, 3), In = pick(rng, 1, 5), Out = pick(rng, 1, 4);
    const Tensor x = random_leaf({B, In}, rng), W = random_leaf({Out, In}, rng), b = random_leaf({Out}, rng);
    std::vector<Tensor> in{x, W, b};
    const Tensor w = random_leaf({B, Out}, rng, -1, 1, false);
    out.push_back(check_gradients("linear", in, [&] { return detail::probe(linear(x, W, b), w); }, opt));
  }
  {
    const std::size_t n = pick(rng, 4, 20);
    const std::uint64_t mask_seed = rng.next_u64();
    run("dropout", {random_leaf({n}, rng)},
        [=](const Tensor& x) {
          Rng mask_rng(mask_seed);
          return dropout(x, 0.4, Mode::train, mask_rng);
        },
        {n});
  }
  for (std::size_t axis : {std::size_t{0}, std::size_t{1}}) {
    const std::size_t R = pick(rng, 1, 4), C = pick(rng, 2, 5);
    run(axis == 0 ? "softmax_axis0" : "softmax_axis1", {random_leaf({R, C}, rng, -3, 3)},
        [=](const Tensor& x) { return softmax(x, axis); }, {R, C});
  }
  {
    const std::size_t n = pick(rng, 1, 8);
    run("log", {random_leaf({n}, rng, 0.2, 3.0)}, [](const Tensor& x) { return log(x); }, {n});
  }
  {
    const std::size_t K = pick(rng, 1, 4), n = pick(rng, 1, 6);
    std::vector<Tensor> xs;
    for (std::size_t k = 0; k < K; ++k) xs.push_back(random_leaf({n}, rng));
    const Tensor w = random_leaf({n}, rng, -1, 1, false);
    out.push_back(check_gradients("mean", xs, [&] { return detail::probe(mean(xs), w); }, opt));
  }
  {
    const std::size_t n = pick(rng, 1, 6);
    const Tensor a = random_leaf({n}, rng), b = random_leaf({n}, rng);
    std::vector<Tensor> in{a, b};
    const Tensor w = random_leaf({n}, rng, -1, 1, false);
    const double c = rng.uniform(-2, 2);
    out.push_back(check_gradients("add_mul_scale", in,
                                  [&] { return detail::probe(scale(add(mul(a, b), a), c), w); }, opt));
  }
  {
    const std::size_t B = pick(rng, 1, 4), N = pick(rng, 2, 4);
    const Tensor s = random_leaf({B, N}, rng, -3, 3);
    const Tensor t = detail::random_distribution_rows(B, N, rng, false);
    std::vector<Tensor> in{s, t};
    std::vector<double> wts(B);
    for (auto& v : wts) v = rng.uniform(0.0, 1.0);
    out.push_back(check_gradients("cross_entropy", in,
                                  [&] { return weighted_sum(cross_entropy_rows(s, t), wts, static_cast<double>(B)); },
                                  opt));
  }
  {
    const std::size_t n = pick(rng, 1, 6);
    // Only `a` is perturbed: the detached factor's numeric derivative is
    // nonzero by construction while its analytic one is zero.
    const Tensor a = random_leaf({n}, rng), b = random_leaf({n}, rng, -1, 1, false);
    std::vector<Tensor> in{a, b};
    out.push_back(check_gradients("stop_gradient", in,
                                  [&] { return sum(mul(elu(a), stop_gradient(mul(b, b)))); }, opt));
  }
  {
    const std::size_t B = pick(rng, 1, 3), F = pick(rng, 1, 3), T = pick(rng, 2, 4);
    run("reshape_flatten", {random_leaf({B, F, 1, T}, rng)}, [](const Tensor& x) { return flatten(x); },
        {B, F * T});
  }
  return out;
}

/// Full objective of a tiny ensemble (train mode, fixed dropout masks,
/// mid-training alpha) against every trainable parameter. Pseudolabels are
/// computed once at the unperturbed parameters and held fixed, which is the
/// function whose gradient the stop-gradient defines.
inline GradcheckResult gradcheck_ensemble_loss(std::uint64_t seed, const GradcheckOptions& opt = {}) {
  Rng rng(seed);
  ExtractorConfig cfg;
  cfg.channels = 2 + rng.below(2);
  cfg.samples = 8 + rng.below(5);
  cfg.temporal_filters = 2;
  cfg.depth_multiplier = 1 + rng.below(2);
  cfg.separable_filters = 2;
  cfg.temporal_kernel = 3;
  cfg.separable_kernel = 3;
  cfg.pool1 = 2;
  cfg.pool2 = 2;
  cfg.dropout = 0.2;
  const std::size_t K = 3, n_classes = 2, B = 6;
  EnsembleNetwork net(cfg, K, n_classes, rng);
  const Tensor batch = detail::random_leaf({B, 1, cfg.channels, cfg.samples}, rng, -1, 1, false);
  std::vector<double> onehot(B * n_classes, 0.0);
  std::vector<SubjectId> subjects(B);
  for (std::size_t b = 0; b < B; ++b) {
    onehot[b * n_classes + b % n_classes] = 1.0;
    subjects[b] = static_cast<SubjectId>(b % 4);
  }
  const Tensor targets({B, n_classes}, onehot);
  const std::vector<SubjectId> ids{0, 1, 2, 3};
  const SubjectPartition partition = make_partition(ids, K, rng.next_u64());
  const Schedule schedule{10, 4};
  const DistillConfig dcfg = DistillConfig::for_ensemble(K);
  const std::uint64_t dropout_seed = rng.next_u64();
  const auto snap = net.snapshot();

  std::vector<Tensor> params;
  for (const auto& p : net.parameters()) params.push_back(p.tensor);
  // Train-mode forward moves the running moments; reset them (and only them,
  // since the parameters carry the finite-difference perturbation).
  const std::size_t n_params = params.size();
  std::vector<Tensor> frozen_targets;
  {
    Rng drop(dropout_seed);
    frozen_targets = pseudolabels(net.forward(batch, Mode::train, &drop).scores);
  }
  auto loss_fn = [&] {
    auto bufs = net.buffers();
    for (std::size_t i = 0; i < bufs.size(); ++i) *bufs[i].second = snap[n_params + i];
    Rng drop(dropout_seed);
    const auto fwd = net.forward(batch, Mode::train, &drop);
    const auto subj = loss_subj(fwd.scores, targets, subjects, partition, schedule);
    const auto dist = loss_distill(fwd.scores, frozen_targets, subjects, partition, schedule);
    return loss_total(subj, dist, dcfg, alpha(schedule)).loss;
  };
  return check_gradients("ensemble_total_loss", params, loss_fn, opt);
}

struct GradcheckSummary {
  std::map<std::string, GradcheckResult> per_op;  // worst case over seeds
  std::size_t seeds = 0;
  bool passed = true;
};

inline GradcheckSummary run_gradcheck_suite(std::size_t n_seeds = 20, std::uint64_t base_seed = 1,
                                            const GradcheckOptions& opt = {}) {
  GradcheckSummary summary;
  summary.seeds = n_seeds;
  auto merge = [&](const GradcheckResult& r) {
    auto [it, inserted] = summary.per_op.emplace(r.name, r);
    if (!inserted) {
      it->second.max_rel_error = std::max(it->second.max_rel_error, r.max_rel_error);
      it->second.checked += r.checked;
      it->second.passed = it->second.passed && r.passed;
    }
    summary.passed = summary.passed && r.passed;
  };
  for (std::size_t s = 0; s < n_seeds; ++s) {
    for (const auto& r : gradcheck_ops(base_seed + s, opt)) merge(r);
    merge(gradcheck_ensemble_loss(base_seed + s, opt));
  }
  return summary;
}

}  // namespace ecl
