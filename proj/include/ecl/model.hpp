#pragma once

// Ensemble of K EEGNet-style feature extractors feeding one shared affine
// classification head. Training uses the K per-model score vectors;
// inference averages them.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "ecl/error.hpp"
#include "ecl/ops.hpp"
#include "ecl/rng.hpp"
#include "ecl/tensor.hpp"

namespace ecl {

struct ExtractorConfig {
  std::size_t channels = 64;
  std::size_t samples = 400;
  std::size_t temporal_filters = 8;   // F1
  std::size_t depth_multiplier = 2;   // D
  std::size_t separable_filters = 16; // F2
  std::size_t temporal_kernel = 51;   // odd; ~0.5 s at 100 Hz
  std::size_t separable_kernel = 17;  // odd
  std::size_t pool1 = 4;
  std::size_t pool2 = 8;
  double dropout = 0.25;

  // Each pooling stage right-pads the time axis with zeros to a multiple of
  // its window, so stage lengths are ceil-divisions.
  std::size_t pooled_length_1() const { return (samples + pool1 - 1) / pool1; }
  std::size_t pooled_length_2() const { return (pooled_length_1() + pool2 - 1) / pool2; }
  std::size_t feature_dim() const { return separable_filters * pooled_length_2(); }

  /// Throws ConfigError naming the first offending field or stage.
  void validate() const {
    auto fail = [](const std::string& stage, const std::string& why) {
      throw ConfigError("extractor config, " + stage + ": " + why);
    };
    if (channels == 0) fail("channels", "must be positive");
    if (samples == 0) fail("samples", "must be positive");
    if (temporal_filters == 0) fail("temporal_filters", "must be positive");
    if (depth_multiplier == 0) fail("depth_multiplier", "must be positive");
    if (separable_filters == 0) fail("separable_filters", "must be positive");
    if (temporal_kernel % 2 == 0) fail("temporal conv", "kernel length must be odd, got " + std::to_string(temporal_kernel));
    if (separable_kernel % 2 == 0) fail("separable conv", "kernel length must be odd, got " + std::to_string(separable_kernel));
    if (pool1 == 0) fail("pool1", "window must be positive");
    if (pool2 == 0) fail("pool2", "window must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout", "p must lie in [0, 1)");
  }
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

namespace detail {
inline Tensor glorot(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> values(shape_numel(shape));
  for (auto& v : values) v = rng.uniform(-limit, limit);
  return Tensor(std::move(shape), std::move(values), true);
}
}  // namespace detail

/// Temporal conv -> BN -> depthwise spatial conv -> BN -> ELU -> pool ->
/// dropout -> separable conv -> BN -> ELU -> pool -> dropout -> flatten.
class FeatureExtractor {
 public:
  FeatureExtractor(const ExtractorConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t F1 = cfg.temporal_filters, FD = F1 * cfg.depth_multiplier,
                      F2 = cfg.separable_filters, C = cfg.channels;
    temporal_ = detail::glorot({F1, 1, 1, cfg.temporal_kernel}, cfg.temporal_kernel,
                               F1 * cfg.temporal_kernel, rng);
    spatial_ = detail::glorot({FD, 1, C, 1}, C, cfg.depth_multiplier * C, rng);
    sep_depthwise_ = detail::glorot({FD, 1, 1, cfg.separable_kernel}, cfg.separable_kernel,
                                    cfg.separable_kernel, rng);
    sep_pointwise_ = detail::glorot({F2, FD, 1, 1}, FD, F2, rng);
    bn_[0] = Norm(F1);
    bn_[1] = Norm(FD);
    bn_[2] = Norm(F2);
  }

  const ExtractorConfig& config() const { return cfg_; }

  /// x [B, 1, C, T] -> features [B, feature_dim]
  Tensor forward(const Tensor& x, Mode mode, Rng* dropout_rng) {
    if (mode == Mode::train && cfg_.dropout > 0.0 && dropout_rng == nullptr) {
      throw ContractError("FeatureExtractor::forward: train mode needs a dropout generator");
    }
    Rng unused(0);
    Rng& drng = dropout_rng ? *dropout_rng : unused;
    Tensor h = conv_temporal(x, temporal_);
    h = bn_[0].apply(h, mode);
    h = conv_spatial_depthwise(h, spatial_);
    h = bn_[1].apply(h, mode);
    h = elu(h);
    h = pad_time(h, cfg_.pooled_length_1() * cfg_.pool1);
    h = avg_pool_time(h, cfg_.pool1, cfg_.pool1);
    h = dropout(h, cfg_.dropout, mode, drng);
    h = conv_temporal(h, sep_depthwise_, cfg_.temporal_filters * cfg_.depth_multiplier);
    h = conv_temporal(h, sep_pointwise_);
    h = bn_[2].apply(h, mode);
    h = elu(h);
    h = pad_time(h, cfg_.pooled_length_2() * cfg_.pool2);
    h = avg_pool_time(h, cfg_.pool2, cfg_.pool2);
    h = dropout(h, cfg_.dropout, mode, drng);
    return flatten(h);
  }

  std::vector<NamedTensor> parameters() const {
    return {{"temporal", temporal_},           {"bn1.gamma", bn_[0].gamma},
            {"bn1.beta", bn_[0].beta},         {"spatial", spatial_},
            {"bn2.gamma", bn_[1].gamma},       {"bn2.beta", bn_[1].beta},
            {"separable.depthwise", sep_depthwise_}, {"separable.pointwise", sep_pointwise_},
            {"bn3.gamma", bn_[2].gamma},       {"bn3.beta", bn_[2].beta}};
  }

  /// Batch-norm running moments, in stage order.
  std::vector<std::pair<std::string, std::vector<double>*>> buffers() {
    std::vector<std::pair<std::string, std::vector<double>*>> out;
    for (std::size_t i = 0; i < 3; ++i) {
      const std::string p = "bn" + std::to_string(i + 1) + ".";
      out.emplace_back(p + "running_mean", &bn_[i].state.running_mean);
      out.emplace_back(p + "running_var", &bn_[i].state.running_var);
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.numel();
    return n;
  }

  /// Overwrites every parameter and running moment with `other`'s values.
  void copy_from(FeatureExtractor& other) {
    auto dst = parameters();
    auto src = other.parameters();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      std::copy(src[i].tensor.data().begin(), src[i].tensor.data().end(), dst[i].tensor.mutable_data().begin());
    }
    auto db = buffers();
    auto sb = other.buffers();
    for (std::size_t i = 0; i < db.size(); ++i) *db[i].second = *sb[i].second;
  }

 private:
  struct Norm {
    Tensor gamma, beta;
    BatchNormState state;
    Norm() = default;
    explicit Norm(std::size_t features)
        : gamma(Tensor::full({features}, 1.0, true)),
          beta(Tensor::zeros({features}, true)),
          state(features) {}
    Tensor apply(const Tensor& x, Mode mode) { return batch_norm(x, gamma, beta, state, mode); }
  };

  ExtractorConfig cfg_;
  Tensor temporal_, spatial_, sep_depthwise_, sep_pointwise_;
  Norm bn_[3];
};

struct ForwardOutput {
  std::vector<Tensor> features;  // K x [B, feature_dim]
  std::vector<Tensor> scores;    // K x [B, N_C]
};

/// K >= 2 for ensemble training; K == 1 is accepted as the single-model
/// baseline (losses that need peers reject it).
class EnsembleNetwork {
 public:
  EnsembleNetwork(const ExtractorConfig& cfg, std::size_t n_models, std::size_t n_classes, Rng& rng)
      : cfg_(cfg), n_classes_(n_classes) {
    cfg_.validate();
    if (n_models < 1) throw ParameterError("EnsembleNetwork: need at least one model");
    if (n_classes < 2) throw ParameterError("EnsembleNetwork: need at least two classes");
    extractors_.reserve(n_models);
    for (std::size_t k = 0; k < n_models; ++k) {
      Rng stream(rng.next_u64());
      extractors_.emplace_back(cfg_, stream);
    }
    Rng head(rng.next_u64());
    weight_ = detail::glorot({n_classes, cfg_.feature_dim()}, cfg_.feature_dim(), n_classes, head);
    bias_ = Tensor::zeros({n_classes}, true);
  }

  std::size_t n_models() const { return extractors_.size(); }
  std::size_t n_classes() const { return n_classes_; }
  const ExtractorConfig& config() const { return cfg_; }
  FeatureExtractor& extractor(std::size_t k) { return extractors_.at(k); }
  const Tensor& classifier_weight() const { return weight_; }
  const Tensor& classifier_bias() const { return bias_; }

  Tensor classify(const Tensor& features) const { return linear(features, weight_, bias_); }

  ForwardOutput forward(const Tensor& batch, Mode mode, Rng* dropout_rng = nullptr) {
    if (batch.rank() != 4 || batch.dim(1) != 1 || batch.dim(2) != cfg_.channels ||
        batch.dim(3) != cfg_.samples) {
      throw DimensionError("EnsembleNetwork::forward: expected [B,1," + std::to_string(cfg_.channels) +
                           "," + std::to_string(cfg_.samples) + "], got " + shape_str(batch.shape()));
    }
    ForwardOutput out;
    for (auto& ex : extractors_) {
      Tensor f = ex.forward(batch, mode, dropout_rng);
      out.scores.push_back(classify(f));
      out.features.push_back(std::move(f));
    }
    return out;
  }

  /// Trainable tensors; the classifier appears once.
  std::vector<NamedTensor> parameters() const {
    std::vector<NamedTensor> out;
    for (std::size_t k = 0; k < extractors_.size(); ++k) {
      for (auto& p : extractors_[k].parameters()) {
        out.push_back({"extractor." + std::to_string(k) + "." + p.name, p.tensor});
      }
    }
    out.push_back({"classifier.weight", weight_});
    out.push_back({"classifier.bias", bias_});
    return out;
  }

  std::vector<std::pair<std::string, std::vector<double>*>> buffers() {
    std::vector<std::pair<std::string, std::vector<double>*>> out;
    for (std::size_t k = 0; k < extractors_.size(); ++k) {
      for (auto& b : extractors_[k].buffers()) {
        out.emplace_back("extractor." + std::to_string(k) + "." + b.first, b.second);
      }
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.numel();
    return n;
  }

  std::size_t classifier_parameter_count() const { return weight_.numel() + bias_.numel(); }

  void zero_grad() const {
    for (const auto& p : parameters()) p.tensor.zero_grad();
  }

  /// Values of every parameter and buffer, in a fixed order.
  std::vector<std::vector<double>> snapshot() {
    std::vector<std::vector<double>> out;
    for (const auto& p : parameters()) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
    for (auto& b : buffers()) out.push_back(*b.second);
    return out;
  }

  void restore(const std::vector<std::vector<double>>& snap) {
    auto params = parameters();
    auto bufs = buffers();
    if (snap.size() != params.size() + bufs.size()) throw ContractError("restore: snapshot layout mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
      std::copy(snap[i].begin(), snap[i].end(), params[i].tensor.mutable_data().begin());
    }
    for (std::size_t i = 0; i < bufs.size(); ++i) *bufs[i].second = snap[params.size() + i];
  }

 private:
  ExtractorConfig cfg_;
  std::size_t n_classes_;
  std::vector<FeatureExtractor> extractors_;
  Tensor weight_, bias_;
};

/// Inference-time score fusion: elementwise mean of the K score tensors.
inline Tensor fuse_scores(std::span<const Tensor> scores) { return mean(scores); }

/// Row-wise argmax; ties go to the lowest index.
inline std::vector<std::size_t> argmax_rows(const Tensor& scores) {
  if (scores.rank() != 2) throw DimensionError("argmax_rows: expected [B, N], got " + shape_str(scores.shape()));
  const std::size_t B = scores.dim(0), N = scores.dim(1);
  std::vector<std::size_t> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < N; ++j) {
      if (scores.data()[b * N + j] > scores.data()[b * N + best]) best = j;
    }
    out[b] = best;
  }
  return out;
}

/// Class index per sample from fused eval-mode scores.
inline std::vector<std::size_t> predict(EnsembleNetwork& net, const Tensor& batch) {
  NoGrad no_grad;
  const auto out = net.forward(batch, Mode::eval);
  return argmax_rows(fuse_scores(out.scores));
}

}  // namespace ecl
