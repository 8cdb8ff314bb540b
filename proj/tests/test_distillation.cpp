#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "ecl/distillation.hpp"

namespace {

using ecl::Schedule;
using ecl::SubjectId;
using ecl::SubjectPartition;
using ecl::Tensor;

SubjectPartition two_way() {
  SubjectPartition p;
  p.n_subsets = 2;
  p.assignment = {{0, 0}, {1, 1}};
  return p;
}

std::vector<Tensor> random_scores(std::size_t K, std::size_t B, std::size_t N, ecl::Rng& rng, bool grad = false) {
  std::vector<Tensor> out;
  for (std::size_t k = 0; k < K; ++k) {
    std::vector<double> v(B * N);
    for (auto& x : v) x = rng.normal(0.0, 2.0);
    out.emplace_back(ecl::Shape{B, N}, v, grad);
  }
  return out;
}

std::vector<double> softmax_row(std::vector<double> z) {
  double m = z[0];
  for (double v : z) m = std::max(m, v);
  double s = 0.0;
  for (auto& v : z) s += (v = std::exp(v - m));
  for (auto& v : z) v /= s;
  return z;
}

TEST(Pseudolabel, TwoModelsIsPeerSoftmax) {
  const std::vector<Tensor> s{Tensor({1, 2}, {0, 0}), Tensor({1, 2}, {2, 0})};
  const Tensor t = ecl::pseudolabel(s, 0);
  const double e2 = std::exp(2.0);
  EXPECT_NEAR(t.data()[0], e2 / (e2 + 1.0), 1e-15);
  EXPECT_NEAR(t.data()[1], 1.0 / (e2 + 1.0), 1e-15);
  EXPECT_NEAR(t.data()[0], 0.8808, 1e-4);
}

TEST(Pseudolabel, ThreeModelsAverageOthers) {
  const std::vector<Tensor> s{Tensor({1, 2}, {0, 0}), Tensor({1, 2}, {0, 0}), Tensor({1, 2}, {2, 0})};
  const Tensor t = ecl::pseudolabel(s, 0);
  const auto ref = softmax_row({1.0, 0.0});
  EXPECT_NEAR(t.data()[0], ref[0], 1e-15);
  EXPECT_NEAR(t.data()[0], 0.7311, 1e-4);
}

TEST(Pseudolabel, RowsAreDistributionsWithoutGraph) {
  ecl::Rng rng(31);
  const auto s = random_scores(4, 6, 3, rng, true);
  for (std::size_t k = 0; k < 4; ++k) {
    const Tensor t = ecl::pseudolabel(s, k);
    EXPECT_FALSE(t.requires_grad());
    EXPECT_TRUE(t.node()->parents.empty());
    for (std::size_t i = 0; i < 6; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < 3; ++j) {
        EXPECT_GE(t.data()[i * 3 + j], 0.0);
        acc += t.data()[i * 3 + j];
      }
      EXPECT_NEAR(acc, 1.0, 1e-12);
    }
  }
}

TEST(Pseudolabel, NeedsPeers) {
  const std::vector<Tensor> one{Tensor({1, 2}, {0, 0})};
  EXPECT_THROW(ecl::pseudolabel(one, 0), ecl::ContractError);
}

TEST(Distill, ZeroAtFirstEpoch) {
  ecl::Rng rng(32);
  for (int trial = 0; trial < 20; ++trial) {
    const auto s = random_scores(2, 5, 2, rng);
    std::vector<SubjectId> subj(5);
    for (auto& v : subj) v = static_cast<SubjectId>(rng.below(2));
    const auto d = ecl::loss_distill(s, subj, two_way(), {120, 0});
    EXPECT_EQ(d.total.item(), 0.0);
  }
}

TEST(Distill, ZeroWhenEverySampleIsInOwnSubset) {
  ecl::Rng rng(33);
  const auto s = random_scores(2, 4, 2, rng);
  const std::vector<SubjectId> subj{0, 0, 0, 0};
  const auto d = ecl::loss_distill(s, subj, two_way(), {10, 10});
  EXPECT_EQ(d.per_model[0].item(), 0.0);
  EXPECT_GT(d.per_model[1].item(), 0.0);
}

TEST(Distill, FinalEpochEqualScoresGiveEntropy) {
  const std::vector<Tensor> s{Tensor({2, 2}, {1, 0, 1, 0}), Tensor({2, 2}, {1, 0, 1, 0})};
  const std::vector<SubjectId> subj{0, 1};
  const auto d = ecl::loss_distill(s, subj, two_way(), {40, 40});
  const auto p = softmax_row({1.0, 0.0});
  const double entropy = -p[0] * std::log(p[0]) - p[1] * std::log(p[1]);
  EXPECT_NEAR(d.per_model[0].item(), entropy, 1e-14);
  EXPECT_NEAR(d.per_model[1].item(), entropy, 1e-14);
  EXPECT_NEAR(entropy, 0.5822, 1e-4);
}

TEST(Distill, RampIsMonotone) {
  ecl::Rng rng(34);
  const auto p = ecl::make_partition(std::vector<SubjectId>{0, 1, 2, 3, 4}, 3, 2);
  const auto s = random_scores(3, 8, 2, rng);
  std::vector<SubjectId> subj(8);
  for (auto& v : subj) v = static_cast<SubjectId>(rng.below(5));
  const auto final_value = ecl::loss_distill(s, subj, p, {30, 30});
  double prev = -1.0;
  for (std::size_t e = 0; e <= 30; ++e) {
    const auto d = ecl::loss_distill(s, subj, p, {30, e});
    EXPECT_GE(d.total.item(), prev);
    EXPECT_NEAR(d.total.item(), (static_cast<double>(e) / 30.0) * final_value.total.item(), 1e-12);
    prev = d.total.item();
  }
}

TEST(Distill, MaskedMeanMatchesDirectSum) {
  ecl::Rng rng(35);
  const auto p = ecl::make_partition(std::vector<SubjectId>{0, 1, 2, 3, 4, 5}, 3, 4);
  const auto s = random_scores(3, 10, 3, rng);
  std::vector<SubjectId> subj(10);
  for (auto& v : subj) v = static_cast<SubjectId>(rng.below(6));
  const Schedule sched{12, 9};
  const auto d = ecl::loss_distill(s, subj, p, sched);
  for (std::size_t k = 0; k < 3; ++k) {
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < 10; ++i) {
      if (p.in_subset(subj[i], k)) continue;
      std::vector<double> peer(3, 0.0);
      for (std::size_t m = 0; m < 3; ++m) {
        if (m == k) continue;
        for (std::size_t j = 0; j < 3; ++j) peer[j] += s[m].data()[i * 3 + j] / 2.0;
      }
      const auto t = softmax_row(peer);
      const auto q = softmax_row({s[k].data()[i * 3], s[k].data()[i * 3 + 1], s[k].data()[i * 3 + 2]});
      for (std::size_t j = 0; j < 3; ++j) acc -= t[j] * std::log(q[j]);
      ++n;
    }
    const double expected = n == 0 ? 0.0 : (9.0 / 12.0) * acc / static_cast<double>(n);
    EXPECT_NEAR(d.per_model[k].item(), expected, 1e-12);
  }
}

TEST(Distill, NoGradientThroughPseudolabelOrMaskedSamples) {
  ecl::Rng rng(36);
  const auto p = two_way();
  const auto s = random_scores(2, 6, 2, rng, true);
  const std::vector<SubjectId> subj{0, 1, 0, 1, 1, 0};
  const auto d = ecl::loss_distill(s, subj, p, {10, 7});
  ecl::backward(d.per_model[0]);
  // Only model 0's own scores see a gradient, and only on samples outside S_0.
  EXPECT_FALSE(s[1].has_grad() && std::any_of(s[1].grad().begin(), s[1].grad().end(), [](double g) { return g != 0.0; }));
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t j = 0; j < 2; ++j) {
      const double g = s[0].grad()[i * 2 + j];
      if (subj[i] == 0) {
        EXPECT_EQ(g, 0.0);
      } else {
        EXPECT_NE(g, 0.0);
      }
    }
  }
}

TEST(Distill, NeedsTwoModels) {
  const std::vector<Tensor> one{Tensor({1, 2}, {0, 0})};
  const std::vector<SubjectId> subj{0};
  SubjectPartition p;
  p.n_subsets = 1;
  p.assignment = {{0, 0}};
  EXPECT_THROW(ecl::loss_distill(one, subj, p, {10, 0}), ecl::ContractError);
}

TEST(LossTotal, AtFirstEpochIsScaledCe) {
  ecl::Rng rng(37);
  const auto p = two_way();
  const auto s = random_scores(2, 4, 2, rng);
  const Tensor y({4, 2}, {1, 0, 0, 1, 0, 1, 1, 0});
  const std::vector<SubjectId> subj{0, 1, 1, 0};
  const Schedule sched{50, 0};
  const auto subj_loss = ecl::loss_subj(s, y, subj, p, sched);
  const auto distill = ecl::loss_distill(s, subj, p, sched);
  const auto cfg = ecl::DistillConfig::for_ensemble(2);
  const auto obj = ecl::loss_total(subj_loss, distill, cfg, ecl::alpha(sched));
  const auto ce = ecl::loss_ce(s, y);
  EXPECT_NEAR(obj.loss.item(), 2.0 * ce.total.item(), 1e-14);
}

TEST(LossTotal, WeightsCombineTerms) {
  ecl::Rng rng(38);
  const auto p = two_way();
  const auto s = random_scores(2, 4, 2, rng);
  const Tensor y({4, 2}, {1, 0, 0, 1, 0, 1, 1, 0});
  const std::vector<SubjectId> subj{0, 1, 1, 0};
  const Schedule sched{50, 50};
  const auto subj_loss = ecl::loss_subj(s, y, subj, p, sched);
  const auto distill = ecl::loss_distill(s, subj, p, sched);

  const auto zero_distill = ecl::loss_total(subj_loss, distill, {3.0, 0.0}, 0.0);
  EXPECT_NEAR(zero_distill.loss.item(), 3.0 * subj_loss.total.item(), 1e-14);

  const auto obj = ecl::loss_total(subj_loss, distill, {2.0, 0.7}, 0.0);
  EXPECT_NEAR(obj.loss.item(), 2.0 * subj_loss.total.item() + 0.7 * distill.total.item(), 1e-14);
  EXPECT_EQ(obj.breakdown.per_model_subj.size(), 2u);
  EXPECT_EQ(obj.breakdown.to_json().at("alpha"), 0.0);

  EXPECT_THROW(ecl::loss_total(subj_loss, distill, {-1.0, 0.7}, 0.0), ecl::ParameterError);
  EXPECT_EQ(ecl::DistillConfig::for_ensemble(7).lambda_subj, 7.0);
}

}  // namespace
