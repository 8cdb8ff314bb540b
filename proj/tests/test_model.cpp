#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "ecl/curriculum.hpp"
#include "ecl/model.hpp"

namespace {

using ecl::EnsembleNetwork;
using ecl::ExtractorConfig;
using ecl::Mode;
using ecl::Tensor;

ExtractorConfig small_config() {
  ExtractorConfig cfg;
  cfg.channels = 4;
  cfg.samples = 40;
  cfg.temporal_filters = 4;
  cfg.depth_multiplier = 2;
  cfg.separable_filters = 4;
  cfg.temporal_kernel = 9;
  cfg.separable_kernel = 5;
  cfg.pool1 = 4;
  cfg.pool2 = 4;
  return cfg;
}

Tensor random_batch(std::size_t B, const ExtractorConfig& cfg, ecl::Rng& rng) {
  std::vector<double> v(B * cfg.channels * cfg.samples);
  for (auto& x : v) x = rng.normal();
  return Tensor({B, 1, cfg.channels, cfg.samples}, std::move(v));
}

TEST(ExtractorConfig, FeatureDimUsesPaddedPooling) {
  ExtractorConfig cfg;  // T = 400, pools 4 and 8
  EXPECT_EQ(cfg.pooled_length_1(), 100u);
  EXPECT_EQ(cfg.pooled_length_2(), 13u);
  EXPECT_EQ(cfg.feature_dim(), 16u * 13u);
}

TEST(ExtractorConfig, ValidationNamesTheStage) {
  ExtractorConfig cfg;
  cfg.temporal_kernel = 32;
  try {
    cfg.validate();
    FAIL() << "expected ConfigError";
  } catch (const ecl::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("temporal conv"), std::string::npos);
  }
  cfg = {};
  cfg.pool2 = 0;
  EXPECT_THROW(cfg.validate(), ecl::ConfigError);
  cfg = {};
  cfg.dropout = 1.0;
  EXPECT_THROW(cfg.validate(), ecl::ConfigError);
}

TEST(ParameterCount, DefaultSingleModelNearReference) {
  ecl::Rng rng(1);
  ExtractorConfig cfg;  // C = 64, T = 400
  EnsembleNetwork single(cfg, 1, 2, rng);
  const auto n = single.parameter_count();
  EXPECT_EQ(n, 2458u);
  EXPECT_GE(n, 1900u);
  EXPECT_LE(n, 3100u);

  cfg.channels = 20;
  EnsembleNetwork fewer(cfg, 1, 2, rng);
  EXPECT_LT(fewer.parameter_count(), n);
}

TEST(ParameterCount, AffineInK) {
  ecl::Rng rng(2);
  const ExtractorConfig cfg;
  EnsembleNetwork one(cfg, 1, 2, rng);
  const std::size_t head = one.classifier_parameter_count();
  const std::size_t extractor = one.parameter_count() - head;
  EXPECT_EQ(head, cfg.feature_dim() * 2 + 2);
  for (std::size_t K : {2u, 3u, 7u}) {
    EnsembleNetwork net(cfg, K, 2, rng);
    EXPECT_EQ(net.parameter_count(), K * extractor + head);
  }
  EnsembleNetwork seven(cfg, 7, 2, rng);
  EXPECT_GE(seven.parameter_count(), 12000u);
  EXPECT_LE(seven.parameter_count(), 19000u);
}

TEST(Forward, ZeroInputIsFinite) {
  ecl::Rng rng(3);
  const auto cfg = small_config();
  EnsembleNetwork net(cfg, 2, 3, rng);
  const Tensor x = Tensor::zeros({2, 1, cfg.channels, cfg.samples});
  ecl::Rng drop(4);
  for (Mode mode : {Mode::train, Mode::eval}) {
    const auto out = net.forward(x, mode, &drop);
    ASSERT_EQ(out.features.size(), 2u);
    for (const auto& f : out.features) {
      EXPECT_EQ(f.shape(), (ecl::Shape{2, cfg.feature_dim()}));
      for (double v : f.data()) EXPECT_TRUE(std::isfinite(v));
    }
  }
}

TEST(Forward, IdenticalExtractorsGiveIdenticalScores) {
  ecl::Rng rng(5);
  const auto cfg = small_config();
  EnsembleNetwork net(cfg, 2, 2, rng);
  net.extractor(1).copy_from(net.extractor(0));
  const auto out = net.forward(random_batch(3, cfg, rng), Mode::eval);
  for (std::size_t i = 0; i < out.scores[0].numel(); ++i) EXPECT_EQ(out.scores[0].data()[i], out.scores[1].data()[i]);
}

TEST(Forward, EvalModeIsDeterministic) {
  ecl::Rng rng(6);
  const auto cfg = small_config();
  EnsembleNetwork net(cfg, 2, 2, rng);
  const Tensor x = random_batch(4, cfg, rng);
  const auto a = net.forward(x, Mode::eval), b = net.forward(x, Mode::eval);
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t i = 0; i < a.scores[k].numel(); ++i) EXPECT_EQ(a.scores[k].data()[i], b.scores[k].data()[i]);
}

TEST(Forward, RandomInitGivesDistinctModels) {
  ecl::Rng rng(7);
  const auto cfg = small_config();
  EnsembleNetwork net(cfg, 3, 2, rng);
  const auto out = net.forward(random_batch(4, cfg, rng), Mode::eval);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = i + 1; j < 3; ++j) {
      bool differ = false;
      for (std::size_t e = 0; e < out.scores[i].numel(); ++e) differ |= out.scores[i].data()[e] != out.scores[j].data()[e];
      EXPECT_TRUE(differ) << i << " vs " << j;
    }
}

TEST(Forward, ShapeMismatch) {
  ecl::Rng rng(8);
  const auto cfg = small_config();
  EnsembleNetwork net(cfg, 2, 2, rng);
  EXPECT_THROW(net.forward(Tensor::zeros({2, 1, cfg.channels + 1, cfg.samples}), Mode::eval), ecl::DimensionError);
  EXPECT_THROW(net.forward(Tensor::zeros({2, cfg.channels, cfg.samples}), Mode::eval), ecl::DimensionError);
}

TEST(Forward, TrainModeNeedsDropoutGenerator) {
  ecl::Rng rng(9);
  const auto cfg = small_config();
  EnsembleNetwork net(cfg, 2, 2, rng);
  EXPECT_THROW(net.forward(random_batch(2, cfg, rng), Mode::train), ecl::ContractError);
}

TEST(Forward, SharedClassifierGradientIsSumOfBranches) {
  ecl::Rng rng(10);
  auto cfg = small_config();
  cfg.dropout = 0.0;
  const std::size_t K = 3;
  EnsembleNetwork net(cfg, K, 2, rng);
  const Tensor x = random_batch(4, cfg, rng);
  const Tensor targets({4, 2}, {1, 0, 0, 1, 1, 0, 0, 1});

  net.zero_grad();
  {
    const auto out = net.forward(x, Mode::eval);
    ecl::backward(ecl::loss_ce(out.scores, targets).total);
  }
  const std::vector<double> joint(net.classifier_weight().grad().begin(), net.classifier_weight().grad().end());

  std::vector<double> summed(joint.size(), 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    net.zero_grad();
    const auto out = net.forward(x, Mode::eval);
    ecl::backward(ecl::cross_entropy(out.scores[k], targets));
    for (std::size_t i = 0; i < summed.size(); ++i) summed[i] += net.classifier_weight().grad()[i];
  }
  for (std::size_t i = 0; i < joint.size(); ++i) EXPECT_NEAR(joint[i], summed[i], 1e-13);
}

TEST(Fusion, AverageOfScoreVectors) {
  const std::vector<Tensor> same(3, Tensor({1, 2}, {0.25, -1.5}));
  const Tensor f = ecl::fuse_scores(same);
  EXPECT_DOUBLE_EQ(f.data()[0], 0.25);
  EXPECT_DOUBLE_EQ(f.data()[1], -1.5);

  const std::vector<Tensor> sym{Tensor({1, 2}, {1, 0}), Tensor({1, 2}, {0, 1})};
  const Tensor g = ecl::fuse_scores(sym);
  EXPECT_DOUBLE_EQ(g.data()[0], 0.5);
  EXPECT_DOUBLE_EQ(g.data()[1], 0.5);

  ecl::Rng rng(11);
  std::vector<Tensor> three;
  for (int k = 0; k < 3; ++k) three.push_back(Tensor({1, 4}, {rng.normal(), rng.normal(), rng.normal(), rng.normal()}));
  const Tensor m = ecl::fuse_scores(three);
  for (std::size_t j = 0; j < 4; ++j) {
    EXPECT_NEAR(m.data()[j], (three[0].data()[j] + three[1].data()[j] + three[2].data()[j]) / 3.0, 1e-15);
  }

  const std::vector<Tensor> ragged{Tensor({1, 2}, {1, 0}), Tensor({1, 3}, {0, 1, 0})};
  EXPECT_THROW(ecl::fuse_scores(ragged), ecl::DimensionError);
}

TEST(Fusion, PermutationAndShiftProperties) {
  ecl::Rng rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t K = 2 + rng.below(4), B = 1 + rng.below(5), N = 2 + rng.below(3);
    std::vector<Tensor> scores;
    for (std::size_t k = 0; k < K; ++k) {
      std::vector<double> v(B * N);
      for (auto& x : v) x = rng.normal(0.0, 3.0);
      scores.push_back(Tensor({B, N}, v));
    }
    auto permuted = scores;
    rng.shuffle(std::span<Tensor>(permuted));
    const Tensor a = ecl::fuse_scores(scores), b = ecl::fuse_scores(permuted);
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-14);

    // Adding the same constant to every model's score vector keeps the argmax.
    const double c = rng.normal(0.0, 10.0);
    std::vector<Tensor> shifted;
    for (const auto& s : scores) {
      std::vector<double> v(s.data().begin(), s.data().end());
      for (auto& x : v) x += c;
      shifted.push_back(Tensor(s.shape(), v));
    }
    EXPECT_EQ(ecl::argmax_rows(ecl::fuse_scores(scores)), ecl::argmax_rows(ecl::fuse_scores(shifted)));
  }
}

TEST(Predict, ArgmaxWithLowestIndexTieBreak) {
  EXPECT_EQ(ecl::argmax_rows(Tensor({1, 2}, {0.9, 0.1})), (std::vector<std::size_t>{0}));
  EXPECT_EQ(ecl::argmax_rows(Tensor({1, 2}, {0.5, 0.5})), (std::vector<std::size_t>{0}));
  EXPECT_EQ(ecl::argmax_rows(Tensor({2, 3}, {0, 1, 1, 2, 0, 2})), (std::vector<std::size_t>{1, 0}));
}

TEST(Predict, OneIndexPerSample) {
  ecl::Rng rng(13);
  const auto cfg = small_config();
  EnsembleNetwork net(cfg, 2, 3, rng);
  const auto idx = ecl::predict(net, random_batch(5, cfg, rng));
  ASSERT_EQ(idx.size(), 5u);
  for (auto i : idx) EXPECT_LT(i, 3u);
}

TEST(Snapshot, RestoreRoundTrip) {
  ecl::Rng rng(14);
  const auto cfg = small_config();
  EnsembleNetwork net(cfg, 2, 2, rng);
  const Tensor x = random_batch(4, cfg, rng);
  const auto before = net.forward(x, Mode::eval);
  const auto snap = net.snapshot();
  ecl::Rng drop(1);
  net.forward(x, Mode::train, &drop);  // moves running moments
  for (auto& p : net.parameters()) p.tensor.mutable_data()[0] += 1.0;
  net.restore(snap);
  const auto after = net.forward(x, Mode::eval);
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t i = 0; i < before.scores[k].numel(); ++i)
      EXPECT_EQ(before.scores[k].data()[i], after.scores[k].data()[i]);
}

}  // namespace
