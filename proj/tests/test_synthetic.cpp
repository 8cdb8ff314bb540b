#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "ecl/synthetic.hpp"

namespace {

using ecl::GeneratorSpec;
using ecl::Trial;

std::vector<double> log_power(const Trial& t) {
  std::vector<double> f(t.channels);
  for (std::size_t c = 0; c < t.channels; ++c) {
    double m = 0.0, v = 0.0;
    for (std::size_t i = 0; i < t.samples; ++i) m += t.data[c * t.samples + i];
    m /= static_cast<double>(t.samples);
    for (std::size_t i = 0; i < t.samples; ++i) v += std::pow(t.data[c * t.samples + i] - m, 2);
    f[c] = std::log(v / static_cast<double>(t.samples) + 1e-12);
  }
  return f;
}

/// Nearest class mean on log band power.
double nearest_mean_accuracy(const std::vector<const Trial*>& train, const std::vector<const Trial*>& test,
                             std::size_t n_classes) {
  const std::size_t C = train.front()->channels;
  std::vector<std::vector<double>> means(n_classes, std::vector<double>(C, 0.0));
  std::vector<double> counts(n_classes, 0.0);
  for (const auto* t : train) {
    const auto f = log_power(*t);
    for (std::size_t c = 0; c < C; ++c) means[t->label][c] += f[c];
    counts[t->label] += 1.0;
  }
  for (std::size_t k = 0; k < n_classes; ++k)
    for (auto& v : means[k]) v /= counts[k];
  std::size_t correct = 0;
  for (const auto* t : test) {
    const auto f = log_power(*t);
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t k = 0; k < n_classes; ++k) {
      double d = 0.0;
      for (std::size_t c = 0; c < C; ++c) d += std::pow(f[c] - means[k][c], 2);
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    correct += best == t->label ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

GeneratorSpec small_spec() {
  GeneratorSpec s;
  s.n_subjects = 3;
  s.n_sessions = 2;
  s.trials_per_class = 5;
  s.channels = 4;
  s.seed = 11;
  return s;
}

TEST(Generate, ShapesAndBalance) {
  const auto spec = small_spec();
  const auto corpus = ecl::generate(spec);
  EXPECT_EQ(corpus.samples, 200u);
  EXPECT_EQ(corpus.channels, 4u);
  EXPECT_EQ(corpus.trials.size(), 3u * 2u * 2u * 5u);
  std::map<std::tuple<std::uint32_t, std::uint16_t, std::uint16_t>, int> counts;
  for (const auto& t : corpus.trials) {
    ++counts[{t.subject, t.session, t.label}];
    EXPECT_EQ(t.samples, 200u);
    for (double v : t.data) ASSERT_TRUE(std::isfinite(v));
  }
  EXPECT_EQ(counts.size(), 12u);
  for (const auto& [key, n] : counts) EXPECT_EQ(n, 5);
}

TEST(Generate, ChannelVarianceBounded) {
  auto spec = small_spec();
  spec.sigma_mix = 1.0;
  const auto corpus = ecl::generate(spec);
  for (const auto& t : corpus.trials) {
    for (double lp : log_power(t)) {
      EXPECT_GT(lp, std::log(1e-3));
      EXPECT_LT(lp, std::log(1e2));
    }
  }
}

TEST(Generate, SameSeedIsBitwiseIdentical) {
  const auto a = ecl::generate(small_spec());
  const auto b = ecl::generate(small_spec());
  ASSERT_EQ(a.trials.size(), b.trials.size());
  for (std::size_t i = 0; i < a.trials.size(); ++i) {
    EXPECT_EQ(a.trials[i].data, b.trials[i].data);
    EXPECT_EQ(a.trials[i].label, b.trials[i].label);
  }
  auto other = small_spec();
  other.seed = 12;
  EXPECT_NE(ecl::generate(other).trials[0].data, a.trials[0].data);
}

TEST(Generate, SubjectStreamsAreIndependentOfCount) {
  auto spec = small_spec();
  const auto few = ecl::generate(spec);
  spec.n_subjects = 5;
  const auto more = ecl::generate(spec);
  for (std::size_t i = 0; i < few.trials.size(); ++i) EXPECT_EQ(few.trials[i].data, more.trials[i].data);
}

TEST(Generate, NoShiftNoNoiseIsSeparable) {
  GeneratorSpec spec;
  spec.n_subjects = 4;
  spec.trials_per_class = 20;
  spec.sigma_mix = 0.0;
  spec.session_shift = 0.0;
  spec.noise = 0.0;
  spec.seed = 3;
  const auto corpus = ecl::generate(spec);
  std::vector<const Trial*> train, test;
  for (const auto& t : corpus.trials) (t.subject < 2 ? train : test).push_back(&t);
  EXPECT_GE(nearest_mean_accuracy(train, test, 2), 0.99);
}

TEST(Generate, StrongMixingHurtsCrossSubjectTransfer) {
  GeneratorSpec spec;
  spec.n_subjects = 6;
  spec.trials_per_class = 40;
  spec.sigma_mix = 1.5;
  spec.noise = 1.0;
  spec.erd = 0.7;
  spec.seed = 5;
  const auto corpus = ecl::generate(spec);
  double within = 0.0, across = 0.0;
  for (std::uint32_t subject = 0; subject < spec.n_subjects; ++subject) {
    std::vector<const Trial*> own_train, own_test, others;
    std::size_t seen = 0;
    for (const auto& t : corpus.trials) {
      if (t.subject == subject) {
        (seen++ % 2 == 0 ? own_train : own_test).push_back(&t);
      } else {
        others.push_back(&t);
      }
    }
    within += nearest_mean_accuracy(own_train, own_test, 2) / 6.0;
    across += nearest_mean_accuracy(own_train, others, 2) / 6.0;
  }
  EXPECT_GT(within - across, 0.05) << "within " << within << " across " << across;
}

TEST(Generate, InvalidSpec) {
  auto spec = small_spec();
  spec.n_classes = 1;
  EXPECT_THROW(ecl::generate(spec), ecl::ConfigError);
  spec = small_spec();
  spec.sigma_mix = -1.0;
  EXPECT_THROW(ecl::generate(spec), ecl::ConfigError);
}

TEST(Generate, SpecJsonRoundTrip) {
  auto spec = small_spec();
  spec.noise = 0.3;
  EXPECT_EQ(GeneratorSpec::from_json(spec.to_json()).to_json(), spec.to_json());
}

std::vector<std::uint32_t> ids(std::uint32_t n) {
  std::vector<std::uint32_t> v(n);
  for (std::uint32_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

TEST(SplitCv, FoldArithmetic) {
  const auto s = ids(10);
  const auto p = ecl::split_cv(s, 5, 0, 1);
  EXPECT_EQ(p.train.size(), 6u);
  EXPECT_EQ(p.val.size(), 2u);
  EXPECT_EQ(p.test.size(), 2u);
  p.validate(s);
}

TEST(SplitCv, EverySubjectTestedOnce) {
  for (std::uint32_t n : {5u, 10u, 12u, 17u}) {
    const auto s = ids(n);
    std::map<std::uint32_t, int> tested;
    for (std::size_t f = 0; f < 5; ++f) {
      const auto p = ecl::split_cv(s, 5, f, 7);
      p.validate(s);
      for (auto id : p.test) ++tested[id];
    }
    EXPECT_EQ(tested.size(), n);
    for (const auto& [id, c] : tested) EXPECT_EQ(c, 1);
  }
}

TEST(SplitCv, ValidationIsNextFold) {
  const auto s = ids(10);
  for (std::size_t f = 0; f < 5; ++f) {
    EXPECT_EQ(ecl::split_cv(s, 5, f, 2).val, ecl::split_cv(s, 5, (f + 1) % 5, 2).test);
  }
}

TEST(SplitCv, SeedDeterminesFolds) {
  const auto s = ids(12);
  EXPECT_EQ(ecl::split_cv(s, 5, 1, 3).test, ecl::split_cv(s, 5, 1, 3).test);
  bool differs = false;
  for (std::uint64_t seed = 4; seed < 10; ++seed) differs |= ecl::split_cv(s, 5, 1, seed).test != ecl::split_cv(s, 5, 1, 3).test;
  EXPECT_TRUE(differs);
}

TEST(SplitCv, Errors) {
  const auto s = ids(4);
  EXPECT_THROW(ecl::split_cv(s, 5, 0, 0), ecl::ParameterError);
  const auto t = ids(10);
  EXPECT_THROW(ecl::split_cv(t, 5, 5, 0), ecl::ParameterError);
}

TEST(SplitLoso, Sizes) {
  const auto eleven = ids(11);
  const auto p = ecl::split_loso(eleven, 4, 0);
  EXPECT_EQ(p.train.size(), 8u);
  EXPECT_EQ(p.val.size(), 2u);
  EXPECT_EQ(p.test, std::vector<std::uint32_t>{4});
  p.validate(eleven);

  const auto three = ids(3);
  const auto q = ecl::split_loso(three, 0, 0);
  EXPECT_EQ(q.train.size(), 1u);
  EXPECT_EQ(q.val.size(), 1u);
  q.validate(three);
}

TEST(SplitLoso, SweepTestsEachSubjectOnce) {
  const auto s = ids(12);
  std::set<std::uint32_t> tested;
  for (auto id : s) {
    const auto p = ecl::split_loso(s, id, 9);
    p.validate(s);
    EXPECT_EQ(p.val.size(), 2u);  // round(0.2 * 11)
    EXPECT_TRUE(tested.insert(p.test[0]).second);
  }
  EXPECT_EQ(tested.size(), 12u);
}

TEST(SplitLoso, Errors) {
  const auto s = ids(5);
  EXPECT_THROW(ecl::split_loso(s, 77, 0), ecl::LookupError);
  const auto two = ids(2);
  EXPECT_THROW(ecl::split_loso(two, 0, 0), ecl::ParameterError);
}

}  // namespace
