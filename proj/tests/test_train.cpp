#include <cmath>
#include <filesystem>
#include <vector>

#include <gtest/gtest.h>

#include "ecl/train.hpp"

namespace {

namespace fs = std::filesystem;

ecl::Corpus tiny_corpus(std::uint64_t seed = 1) {
  ecl::GeneratorSpec spec;
  spec.n_subjects = 6;
  spec.trials_per_class = 6;
  spec.channels = 4;
  spec.trial_seconds = 1.0;
  spec.seed = seed;
  return ecl::generate(spec);
}

ecl::TrainConfig tiny_config() {
  ecl::TrainConfig c;
  c.epochs = 4;
  c.batch_size = 16;
  c.lr_step_epoch = 2;
  c.K = 2;
  c.n_folds = 3;
  c.extractor.temporal_filters = 2;
  c.extractor.depth_multiplier = 1;
  c.extractor.separable_filters = 2;
  c.extractor.temporal_kernel = 7;
  c.extractor.separable_kernel = 3;
  c.extractor.pool1 = 2;
  c.extractor.pool2 = 4;
  return c;
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "ecl_test_train" / name;
  fs::remove_all(dir);
  return dir;
}

TEST(Sgd, FirstStepIncludesWeightDecay) {
  std::vector<double> theta{1.0}, grad{0.5}, v{0.0};
  ecl::sgd_update(theta, grad, v, 0.1, 0.9, 0.01);
  EXPECT_NEAR(v[0], 0.51, 1e-15);
  EXPECT_NEAR(theta[0], 1.0 - 0.051, 1e-15);
}

TEST(Sgd, MomentumAccumulates) {
  std::vector<double> theta{0.0}, grad{1.0}, v{0.0};
  ecl::sgd_update(theta, grad, v, 1.0, 0.9, 0.0);
  ecl::sgd_update(theta, grad, v, 1.0, 0.9, 0.0);
  EXPECT_NEAR(v[0], 1.9, 1e-15);
  EXPECT_NEAR(theta[0], -2.9, 1e-15);
}

TEST(Sgd, HandComputedSteps) {
  std::vector<double> theta{1.0}, grad{1.0}, v{0.0};
  ecl::sgd_update(theta, grad, v, 0.1, 0.9, 0.0);
  EXPECT_DOUBLE_EQ(theta[0], 0.9);
  ecl::sgd_update(theta, grad, v, 0.1, 0.9, 0.0);
  EXPECT_NEAR(theta[0], 0.71, 1e-15);

  std::vector<double> still{3.0}, zero{0.0}, w{0.0};
  ecl::sgd_update(still, zero, w, 0.1, 0.9, 0.0);
  EXPECT_EQ(still[0], 3.0);
}

TEST(Sgd, NormParamsCanBeExcludedFromDecay) {
  ecl::Tensor gamma({2}, {1.0, 1.0}, true), weight({2}, {1.0, 1.0}, true);
  const std::vector<ecl::NamedTensor> params{{"extractor.0.bn1.gamma", gamma}, {"classifier.weight", weight}};
  ecl::SgdState state;
  ecl::sgd_step(params, state, 0.1, 0.9, 0.5, false);
  EXPECT_EQ(gamma.data()[0], 1.0);
  EXPECT_EQ(weight.data()[0], 1.0 - 0.05);
}

TEST(Sgd, SizeMismatch) {
  std::vector<double> theta{1.0, 2.0}, grad{0.5}, v{0.0, 0.0};
  EXPECT_THROW(ecl::sgd_update(theta, grad, v, 0.1), ecl::ContractError);
}

TEST(TrainConfig, LearningRateBoundary) {
  ecl::TrainConfig c;
  EXPECT_EQ(c.lr_at(0), 0.01);
  EXPECT_EQ(c.lr_at(59), 0.01);
  EXPECT_EQ(c.lr_at(60), 0.002);
  EXPECT_EQ(c.lr_at(119), 0.002);
}

TEST(TrainConfig, JsonRoundTripAndErrors) {
  auto c = tiny_config();
  c.lambda_subj = 1.5;
  c.loss_mode = ecl::LossMode::subj;
  const auto back = ecl::TrainConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(ecl::TrainConfig{}.effective_lambda_subj(), 3.0);

  EXPECT_THROW(ecl::TrainConfig::from_json({{"epochz", 3}}), ecl::ConfigError);
  EXPECT_THROW(ecl::TrainConfig::from_json({{"loss_mode", "both"}}), ecl::ConfigError);
  EXPECT_THROW(ecl::TrainConfig::from_json({{"K", 1}}), ecl::ConfigError);
  EXPECT_THROW(ecl::TrainConfig::from_json({{"epochs", "many"}}), ecl::ConfigError);
  EXPECT_NO_THROW(ecl::TrainConfig::from_json({{"K", 1}, {"loss_mode", "ce"}}));
}

TEST(Evaluate, TrivialPredictors) {
  const std::vector<std::size_t> labels{0, 1, 0, 1, 1, 0};
  EXPECT_EQ(ecl::score_predictions(labels, labels, 2).accuracy, 1.0);
  const std::vector<std::size_t> constant(6, 1);
  const auto r = ecl::score_predictions(constant, labels, 2);
  EXPECT_EQ(r.accuracy, 0.5);
  EXPECT_EQ(r.confusion[0][1], 3u);
  EXPECT_EQ(r.confusion[1][1], 3u);
  EXPECT_THROW(ecl::score_predictions(constant, std::vector<std::size_t>{0}, 2), ecl::ContractError);
}

TEST(Evaluate, CountsAndConfusion) {
  const auto corpus = tiny_corpus();
  const auto plan = ecl::split_cv(corpus.subjects(), 3, 0, 0);
  const auto cfg = tiny_config();
  const auto data = ecl::prepare_split(corpus, plan, cfg);
  ecl::ExtractorConfig ex = cfg.extractor;
  ex.channels = corpus.channels;
  ex.samples = corpus.samples;
  ecl::Rng rng(0);
  ecl::EnsembleNetwork net(ex, 2, 2, rng);
  const auto r = ecl::evaluate(net, data.test, 5);  // chunking must not matter
  const auto whole = ecl::evaluate(net, data.test);
  EXPECT_EQ(r.n, data.test.size());
  EXPECT_EQ(r.confusion, whole.confusion);
  std::size_t total = 0, diag = 0;
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < 2; ++j) total += r.confusion[i][j];
    diag += r.confusion[i][i];
  }
  EXPECT_EQ(total, r.n);
  EXPECT_DOUBLE_EQ(r.accuracy, static_cast<double>(diag) / static_cast<double>(r.n));
  EXPECT_EQ(r.per_model_accuracy.size(), 2u);
}

TEST(PrepareSplit, PartitionsBySubjectAndAligns) {
  const auto corpus = tiny_corpus();
  const auto plan = ecl::split_cv(corpus.subjects(), 3, 1, 0);
  auto cfg = tiny_config();
  const auto data = ecl::prepare_split(corpus, plan, cfg);
  EXPECT_EQ(data.train.size() + data.val.size() + data.test.size(), corpus.trials.size());
  for (const auto& t : data.test.trials) {
    EXPECT_TRUE(std::find(plan.test.begin(), plan.test.end(), t.subject) != plan.test.end());
  }
  // Riemannian alignment: each training session's covariance mean is I.
  for (auto s : plan.train) {
    std::vector<ecl::Matrix> covs;
    for (const auto& t : data.train.trials)
      if (t.subject == s) covs.push_back(ecl::covariance(t));
    const auto g = ecl::geometric_mean(covs);
    EXPECT_LT((g - ecl::Matrix::Identity(g.rows(), g.cols())).norm(), 1e-5);
  }
  cfg.transductive_alignment = false;
  const auto strict = ecl::prepare_split(corpus, plan, cfg);
  EXPECT_EQ(strict.train.trials[0].data, data.train.trials[0].data);
  EXPECT_NE(strict.test.trials[0].data, data.test.trials[0].data);
}

TEST(Train, DeterministicAcrossRuns) {
  const auto corpus = tiny_corpus();
  const auto plan = ecl::split_cv(corpus.subjects(), 3, 0, 0);
  const auto cfg = tiny_config();
  const auto a = ecl::train(cfg, corpus, plan);
  const auto b = ecl::train(cfg, corpus, plan);
  EXPECT_EQ(ecl::metrics_jsonl(a), ecl::metrics_jsonl(b));
  EXPECT_EQ(a.test.accuracy, b.test.accuracy);
  EXPECT_EQ(a.epochs.size(), 4u);
  EXPECT_EQ(a.epochs[1].lr, 0.01);
  EXPECT_EQ(a.epochs[2].lr, 0.002);
  for (const auto& e : a.epochs) EXPECT_TRUE(std::isfinite(e.train_loss));
}

TEST(Train, DifferentSeedsDiffer) {
  const auto corpus = tiny_corpus();
  const auto plan = ecl::split_cv(corpus.subjects(), 3, 0, 0);
  auto cfg = tiny_config();
  const auto a = ecl::train(cfg, corpus, plan);
  cfg.seed = 99;
  const auto b = ecl::train(cfg, corpus, plan);
  EXPECT_NE(ecl::metrics_jsonl(a), ecl::metrics_jsonl(b));
}

TEST(Train, TotalWithoutDistillationEqualsSubjectLoss) {
  const auto corpus = tiny_corpus();
  const auto plan = ecl::split_cv(corpus.subjects(), 3, 0, 0);
  auto cfg = tiny_config();
  cfg.loss_mode = ecl::LossMode::subj;
  const auto subj = ecl::train(cfg, corpus, plan);
  cfg.loss_mode = ecl::LossMode::total;
  cfg.lambda_distill = 0.0;
  const auto total = ecl::train(cfg, corpus, plan);
  ASSERT_EQ(subj.epochs.size(), total.epochs.size());
  for (std::size_t e = 0; e < subj.epochs.size(); ++e) {
    EXPECT_EQ(subj.epochs[e].train_loss, total.epochs[e].train_loss);
    EXPECT_EQ(subj.epochs[e].val_accuracy, total.epochs[e].val_accuracy);
  }
  EXPECT_EQ(subj.test.accuracy, total.test.accuracy);
}

TEST(Train, BestEpochIsEarliestMaximum) {
  const auto corpus = tiny_corpus();
  const auto plan = ecl::split_cv(corpus.subjects(), 3, 2, 0);
  const auto m = ecl::train(tiny_config(), corpus, plan);
  double best = -1.0;
  std::size_t at = 0;
  for (const auto& e : m.epochs) {
    if (e.val_accuracy > best) {
      best = e.val_accuracy;
      at = e.epoch;
    }
  }
  EXPECT_EQ(m.best_epoch, at);
  EXPECT_EQ(m.best_val_accuracy, best);
}

TEST(Train, CheckpointReproducesValidationAccuracy) {
  const auto corpus = tiny_corpus();
  const auto plan = ecl::split_cv(corpus.subjects(), 3, 0, 0);
  const auto cfg = tiny_config();
  const auto dir = scratch("ckpt");
  const auto m = ecl::train(cfg, corpus, plan, dir);
  ASSERT_TRUE(fs::exists(dir / "checkpoint.bin"));
  EXPECT_TRUE(fs::exists(dir / "metrics.jsonl"));
  EXPECT_TRUE(fs::exists(dir / "manifest.json"));
  auto net = ecl::load_checkpoint(dir / "checkpoint.bin");
  const auto data = ecl::prepare_split(corpus, plan, cfg);
  EXPECT_EQ(ecl::evaluate(net, data.val).accuracy, m.best_val_accuracy);
  EXPECT_EQ(ecl::evaluate(net, data.test).accuracy, m.test.accuracy);
  const auto manifest = ecl::read_json(dir / "manifest.json");
  EXPECT_EQ(manifest.at("partition").at("K"), 2);
  EXPECT_EQ(manifest.at("split").at("test"), plan.test);
}

TEST(Suite, AggregateIsMeanOfRuns) {
  const auto corpus = tiny_corpus();
  auto cfg = tiny_config();
  cfg.epochs = 2;
  cfg.save_checkpoints = false;
  const auto dir = scratch("suite");
  const auto r = ecl::run_suite("cv", cfg, corpus, dir);
  ASSERT_EQ(r.runs.size(), 3u);
  double mean = 0.0;
  for (const auto& run : r.runs) mean += run.test_accuracy / 3.0;
  EXPECT_NEAR(r.mean_accuracy, mean, 1e-15);
  EXPECT_FALSE(r.partial);
  EXPECT_TRUE(fs::exists(dir / "report.csv"));
  EXPECT_TRUE(fs::exists(dir / "fold_2" / "metrics.jsonl"));
  EXPECT_EQ(ecl::read_json(dir / "report.json").at("runs").size(), 3u);
}

TEST(Suite, ParallelMatchesSerial) {
  const auto corpus = tiny_corpus();
  auto cfg = tiny_config();
  cfg.epochs = 2;
  const auto serial = ecl::run_suite("cv", cfg, corpus);
  cfg.jobs = 3;
  const auto parallel = ecl::run_suite("cv", cfg, corpus);
  EXPECT_EQ(serial.to_csv(), parallel.to_csv());
}

TEST(Suite, LosoRunsEverySubject) {
  const auto corpus = tiny_corpus();
  auto cfg = tiny_config();
  cfg.epochs = 1;
  const auto r = ecl::run_suite("loso", cfg, corpus);
  EXPECT_EQ(r.runs.size(), 6u);
  EXPECT_EQ(r.runs[3].run, "subject_3");
  EXPECT_THROW(ecl::run_suite("holdout", cfg, corpus), ecl::ConfigError);
}

TEST(Ablate, WritesTable) {
  const auto corpus = tiny_corpus();
  auto cfg = tiny_config();
  cfg.epochs = 1;
  cfg.save_checkpoints = false;
  cfg.log_batches = false;
  const std::vector<std::size_t> Ks{1, 2};
  const std::vector<ecl::LossMode> modes{ecl::LossMode::ce, ecl::LossMode::total};
  const auto dir = scratch("ablate");
  const auto cells = ecl::ablate(cfg, corpus, Ks, modes, "cv", dir);
  EXPECT_EQ(cells.size(), 3u);  // total at K=1 is skipped
  const auto csv = ecl::detail::read_file(dir / "ablation.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "loss_mode,K=1,K=2");
}

}  // namespace
