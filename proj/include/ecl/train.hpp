#pragma once

// Training loop, evaluation and the cross-validation / LOSO harness.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "ecl/curriculum.hpp"
#include "ecl/distillation.hpp"
#include "ecl/io.hpp"
#include "ecl/model.hpp"
#include "ecl/spd.hpp"
#include "ecl/synthetic.hpp"

namespace ecl {

using nlohmann::json;

enum class LossMode { ce, subj, total };

inline std::string to_string(LossMode m) {
  switch (m) {
    case LossMode::ce: return "ce";
    case LossMode::subj: return "subj";
    case LossMode::total: return "total";
  }
  return "?";
}

inline LossMode loss_mode_from_string(const std::string& s) {
  if (s == "ce") return LossMode::ce;
  if (s == "subj") return LossMode::subj;
  if (s == "total") return LossMode::total;
  throw ConfigError("unknown loss_mode '" + s + "' (expected ce, subj or total)");
}

struct TrainConfig {
  std::size_t epochs = 120;
  std::size_t batch_size = 64;
  double lr_phase1 = 0.01;
  double lr_phase2 = 0.002;
  std::size_t lr_step_epoch = 60;  // first epoch at lr_phase2
  double momentum = 0.9;
  double weight_decay = 0.01;
  bool decay_norm_params = true;  // also decay batch-norm gamma/beta
  std::size_t K = 3;
  double lambda_distill = 0.7;
  std::optional<double> lambda_subj;  // defaults to K
  LossMode loss_mode = LossMode::total;
  std::uint64_t seed = 0;
  AlignmentMode alignment = AlignmentMode::riemannian;
  bool transductive_alignment = true;
  std::size_t n_folds = 5;
  std::size_t jobs = 1;
  bool save_checkpoints = true;
  bool log_batches = true;
  ExtractorConfig extractor;  // channels/samples are taken from the corpus

  double effective_lambda_subj() const { return lambda_subj.value_or(static_cast<double>(K)); }

  void validate() const {
    if (epochs == 0) throw ConfigError("config: epochs must be positive");
    if (batch_size < 2) throw ConfigError("config: batch_size must be at least 2 (batch norm)");
    if (!(lr_phase1 > 0.0) || !(lr_phase2 > 0.0)) throw ConfigError("config: learning rates must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("config: momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("config: weight_decay must be non-negative");
    if (K == 0) throw ConfigError("config: K must be positive");
    if (K == 1 && loss_mode != LossMode::ce) {
      throw ConfigError("config: loss_mode " + to_string(loss_mode) + " needs K >= 2");
    }
    if (!(lambda_distill >= 0.0)) throw ConfigError("config: lambda_distill must be non-negative");
    if (lambda_subj && !(*lambda_subj >= 0.0)) throw ConfigError("config: lambda_subj must be non-negative");
    if (n_folds < 3) throw ConfigError("config: n_folds must be at least 3");
    if (jobs == 0) throw ConfigError("config: jobs must be positive");
  }

  json to_json() const {
    json ex = ecl::to_json(extractor);
    ex.erase("channels");
    ex.erase("samples");
    return {{"epochs", epochs},
            {"batch_size", batch_size},
            {"lr_phase1", lr_phase1},
            {"lr_phase2", lr_phase2},
            {"lr_step_epoch", lr_step_epoch},
            {"momentum", momentum},
            {"weight_decay", weight_decay},
            {"decay_norm_params", decay_norm_params},
            {"K", K},
            {"lambda_distill", lambda_distill},
            {"lambda_subj", lambda_subj ? json(*lambda_subj) : json(nullptr)},
            {"loss_mode", to_string(loss_mode)},
            {"seed", seed},
            {"alignment", to_string(alignment)},
            {"transductive_alignment", transductive_alignment},
            {"n_folds", n_folds},
            {"jobs", jobs},
            {"save_checkpoints", save_checkpoints},
            {"log_batches", log_batches},
            {"extractor", ex}};
  }

  /// Missing keys keep their defaults; unknown keys are rejected.
  static TrainConfig from_json(const json& j) {
    static const std::set<std::string> known = {
        "epochs", "batch_size", "lr_phase1", "lr_phase2", "lr_step_epoch", "momentum", "weight_decay", "decay_norm_params", "K",
        "lambda_distill", "lambda_subj", "loss_mode", "seed", "alignment", "transductive_alignment", "n_folds",
        "jobs", "save_checkpoints", "log_batches", "extractor"};
    if (!j.is_object()) throw ConfigError("config: expected a JSON object");
    for (const auto& [key, value] : j.items()) {
      if (!known.count(key)) throw ConfigError("config: unknown key '" + key + "'");
    }
    TrainConfig c;
    try {
      c.epochs = j.value("epochs", c.epochs);
      c.batch_size = j.value("batch_size", c.batch_size);
      c.lr_phase1 = j.value("lr_phase1", c.lr_phase1);
      c.lr_phase2 = j.value("lr_phase2", c.lr_phase2);
      c.lr_step_epoch = j.value("lr_step_epoch", c.lr_step_epoch);
      c.momentum = j.value("momentum", c.momentum);
      c.weight_decay = j.value("weight_decay", c.weight_decay);
      c.decay_norm_params = j.value("decay_norm_params", c.decay_norm_params);
      c.K = j.value("K", c.K);
      c.lambda_distill = j.value("lambda_distill", c.lambda_distill);
      if (j.contains("lambda_subj") && !j.at("lambda_subj").is_null()) c.lambda_subj = j.at("lambda_subj").get<double>();
      if (j.contains("loss_mode")) c.loss_mode = loss_mode_from_string(j.at("loss_mode").get<std::string>());
      c.seed = j.value("seed", c.seed);
      if (j.contains("alignment")) c.alignment = alignment_mode_from_string(j.at("alignment").get<std::string>());
      c.transductive_alignment = j.value("transductive_alignment", c.transductive_alignment);
      c.n_folds = j.value("n_folds", c.n_folds);
      c.jobs = j.value("jobs", c.jobs);
      c.save_checkpoints = j.value("save_checkpoints", c.save_checkpoints);
      c.log_batches = j.value("log_batches", c.log_batches);
      if (j.contains("extractor")) c.extractor = extractor_config_from_json(j.at("extractor"), c.extractor);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
  }

  double lr_at(std::size_t epoch) const { return epoch < lr_step_epoch ? lr_phase1 : lr_phase2; }
};

// --- optimizer ---

/// v <- momentum * v + (g + wd * theta); theta <- theta - lr * v.
inline void sgd_update(std::span<double> theta, std::span<const double> grad, std::span<double> velocity, double lr,
                       double momentum = 0.9, double weight_decay = 0.01) {
  if (grad.size() != theta.size() || velocity.size() != theta.size()) {
    throw ContractError("sgd_step: parameter, gradient and velocity sizes differ (" + std::to_string(theta.size()) +
                        ", " + std::to_string(grad.size()) + ", " + std::to_string(velocity.size()) + ")");
  }
  for (std::size_t i = 0; i < theta.size(); ++i) {
    velocity[i] = momentum * velocity[i] + (grad[i] + weight_decay * theta[i]);
    theta[i] -= lr * velocity[i];
  }
}

struct SgdState {
  std::vector<std::vector<double>> velocity;
};

inline bool is_norm_param(const std::string& name) { return name.find(".bn") != std::string::npos; }

/// One step over all parameters; velocity is zero-initialized on first use.
/// Parameters that received no gradient are treated as having gradient 0.
inline void sgd_step(std::span<const NamedTensor> params, SgdState& state, double lr, double momentum = 0.9,
                     double weight_decay = 0.01, bool decay_norm_params = true) {
  if (state.velocity.empty()) {
    for (const auto& p : params) state.velocity.emplace_back(p.tensor.numel(), 0.0);
  }
  if (state.velocity.size() != params.size()) throw ContractError("sgd_step: optimizer state has wrong layout");
  std::vector<double> zeros;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = params[i].tensor;
    std::span<const double> g;
    if (t.has_grad()) {
      g = t.grad();
    } else {
      zeros.assign(t.numel(), 0.0);
      g = zeros;
    }
    const double wd = !decay_norm_params && is_norm_param(params[i].name) ? 0.0 : weight_decay;
    sgd_update(t.mutable_data(), g, state.velocity[i], lr, momentum, wd);
  }
}

// --- data ---

struct Dataset {
  std::vector<Trial> trials;
  std::size_t channels = 0, samples = 0, n_classes = 0;

  std::size_t size() const { return trials.size(); }
};

struct Batch {
  Tensor x;        // [B,1,C,T]
  Tensor targets;  // one-hot [B,N]
  std::vector<SubjectId> subjects;
  std::vector<std::size_t> labels;
};

inline Batch make_batch(const Dataset& ds, std::span<const std::size_t> idx) {
  const std::size_t B = idx.size(), CT = ds.channels * ds.samples, N = ds.n_classes;
  std::vector<double> x(B * CT), y(B * N, 0.0);
  Batch b;
  for (std::size_t i = 0; i < B; ++i) {
    const Trial& t = ds.trials[idx[i]];
    std::copy(t.data.begin(), t.data.end(), x.begin() + static_cast<std::ptrdiff_t>(i * CT));
    y[i * N + t.label] = 1.0;
    b.subjects.push_back(t.subject);
    b.labels.push_back(t.label);
  }
  b.x = Tensor({B, 1, ds.channels, ds.samples}, std::move(x));
  b.targets = Tensor({B, N}, std::move(y));
  return b;
}

struct PreparedSplit {
  Dataset train, val, test;
};

/// Selects the split's subjects and applies session-wise alignment.
/// Transductive: every session is whitened by its own reference (test
/// sessions use unlabeled test signal). Strict: only training sessions
/// use their own reference; validation and test sessions use the mean of
/// the training references.
inline PreparedSplit prepare_split(const Corpus& corpus, const SplitPlan& plan, const TrainConfig& cfg) {
  const auto subjects = corpus.subjects();
  plan.validate(subjects);
  PreparedSplit out;
  const std::size_t N = corpus.n_classes();
  for (auto* ds : {&out.train, &out.val, &out.test}) {
    ds->channels = corpus.channels;
    ds->samples = corpus.samples;
    ds->n_classes = N;
  }
  const std::set<std::uint32_t> tr(plan.train.begin(), plan.train.end()), va(plan.val.begin(), plan.val.end());
  for (const auto& t : corpus.trials) {
    auto& ds = tr.count(t.subject) ? out.train : (va.count(t.subject) ? out.val : out.test);
    ds.trials.push_back(t);
  }
  for (auto* ds : {&out.train, &out.val, &out.test}) {
    if (ds->trials.empty()) throw ConfigError("split leaves an empty train, validation or test set");
  }
  if (cfg.alignment == AlignmentMode::none) return out;

  const auto train_refs = session_references(out.train.trials, cfg.alignment);
  align_sessions(out.train.trials, train_refs);
  if (cfg.transductive_alignment) {
    for (auto* ds : {&out.val, &out.test}) align_sessions(ds->trials, session_references(ds->trials, cfg.alignment));
  } else {
    std::vector<Matrix> refs;
    for (const auto& [key, m] : train_refs) refs.push_back(m);
    const Matrix pooled =
        spd_mean(refs, cfg.alignment == AlignmentMode::euclidean ? MeanMode::arithmetic : MeanMode::geometric);
    for (auto* ds : {&out.val, &out.test}) align_sessions(ds->trials, {}, &pooled);
  }
  return out;
}

// --- evaluation ---

struct EvalResult {
  double accuracy = 0.0;
  std::vector<double> per_model_accuracy;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::size_t n = 0;

  json to_json() const {
    return {{"accuracy", accuracy}, {"per_model_accuracy", per_model_accuracy}, {"confusion", confusion}, {"n", n}};
  }
};

/// Accuracy and confusion from predicted and true labels.
inline EvalResult score_predictions(std::span<const std::size_t> predicted, std::span<const std::size_t> labels,
                                    std::size_t n_classes) {
  if (predicted.size() != labels.size()) {
    throw ContractError("score_predictions: " + std::to_string(predicted.size()) + " predictions for " +
                        std::to_string(labels.size()) + " labels");
  }
  EvalResult r;
  r.n = labels.size();
  r.confusion.assign(n_classes, std::vector<std::size_t>(n_classes, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= n_classes || predicted[i] >= n_classes) throw ContractError("score_predictions: label out of range");
    ++r.confusion[labels[i]][predicted[i]];
    correct += predicted[i] == labels[i] ? 1 : 0;
  }
  r.accuracy = r.n ? static_cast<double>(correct) / static_cast<double>(r.n) : 0.0;
  return r;
}

/// Fused-score accuracy plus each model's own accuracy, in eval mode.
inline EvalResult evaluate(EnsembleNetwork& net, const Dataset& ds, std::size_t chunk = 256) {
  NoGrad no_grad;
  const std::size_t K = net.n_models();
  std::vector<std::size_t> labels, fused;
  std::vector<std::vector<std::size_t>> per_model(K);
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += chunk) {
    idx.resize(std::min(chunk, ds.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const Batch b = make_batch(ds, idx);
    const auto out = net.forward(b.x, Mode::eval);
    const auto f = argmax_rows(fuse_scores(out.scores));
    fused.insert(fused.end(), f.begin(), f.end());
    labels.insert(labels.end(), b.labels.begin(), b.labels.end());
    for (std::size_t k = 0; k < K; ++k) {
      const auto pk = argmax_rows(out.scores[k]);
      per_model[k].insert(per_model[k].end(), pk.begin(), pk.end());
    }
  }
  EvalResult r = score_predictions(fused, labels, net.n_classes());
  for (const auto& p : per_model) r.per_model_accuracy.push_back(score_predictions(p, labels, net.n_classes()).accuracy);
  return r;
}

// --- training ---

inline constexpr std::uint64_t kInitStream = 0x11u;
inline constexpr std::uint64_t kPartitionStream = 0x12u;
inline constexpr std::uint64_t kShuffleStream = 0x13u;
inline constexpr std::uint64_t kDropoutStream = 0x14u;

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double alpha = 1.0;
  double train_loss = 0.0;
  double train_subj = 0.0;
  double train_distill = 0.0;
  double val_accuracy = 0.0;
  std::vector<double> val_per_model;

  json to_json() const {
    return {{"type", "epoch"},           {"epoch", epoch},
            {"lr", lr},                  {"alpha", alpha},
            {"train_loss", train_loss},  {"train_subj", train_subj},
            {"train_distill", train_distill}, {"val_accuracy", val_accuracy},
            {"val_per_model", val_per_model}};
  }
};

struct RunManifest {
  json config;
  json partition;  // null for loss_mode ce
  json split;
  std::vector<EpochRecord> epochs;
  std::vector<json> metric_rows;  // batch, epoch and final rows in order
  std::size_t best_epoch = 0;
  double best_val_accuracy = -1.0;
  EvalResult test;
  EvalResult best_val;
  std::string checkpoint;
  double wall_clock_seconds = 0.0;

  json to_json() const {
    json ep = json::array();
    for (const auto& e : epochs) ep.push_back(e.to_json());
    return {{"config", config},
            {"partition", partition},
            {"split", split},
            {"epochs", ep},
            {"best_epoch", best_epoch},
            {"best_val_accuracy", best_val_accuracy},
            {"validation", best_val.to_json()},
            {"test", test.to_json()},
            {"test_accuracy", test.accuracy},
            {"checkpoint", checkpoint},
            {"wall_clock_seconds", wall_clock_seconds}};
  }
};

/// Metric rows as JSON lines; no timing information, so reruns are byte-identical.
inline std::string metrics_jsonl(const RunManifest& m) {
  std::string out;
  for (const auto& row : m.metric_rows) out += row.dump() + "\n";
  return out;
}

inline Objective compute_objective(const TrainConfig& cfg, std::span<const Tensor> scores, const Batch& batch,
                                   const SubjectPartition* partition, const Schedule& sched) {
  const double a = alpha(sched);
  if (cfg.loss_mode == LossMode::ce) {
    const auto ce = loss_ce(scores, batch.targets);
    Objective o;
    o.loss = ce.total;
    o.breakdown.per_model_subj = scalar_values(ce.per_model);
    o.breakdown.per_model_distill.assign(scores.size(), 0.0);
    o.breakdown.total_subj = ce.total.item();
    o.breakdown.total = o.loss.item();
    o.breakdown.alpha = a;
    return o;
  }
  const auto subj = loss_subj(scores, batch.targets, batch.subjects, *partition, sched);
  const auto distill = loss_distill(scores, batch.subjects, *partition, sched);
  DistillConfig dc{cfg.effective_lambda_subj(), cfg.loss_mode == LossMode::total ? cfg.lambda_distill : 0.0};
  return loss_total(subj, distill, dc, a);
}

/// Trains on split.train, selects the epoch with the best validation
/// accuracy (earliest on ties) and reports test accuracy of that state.
/// If `run_dir` is set, writes metrics.jsonl, manifest.json and checkpoint.bin there.
inline RunManifest train(const TrainConfig& cfg, const PreparedSplit& data, const SplitPlan& plan,
                         const std::optional<fs::path>& run_dir = std::nullopt) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  ExtractorConfig ex = cfg.extractor;
  ex.channels = data.train.channels;
  ex.samples = data.train.samples;
  Rng init(derive_seed(cfg.seed, kInitStream));
  EnsembleNetwork net(ex, cfg.K, data.train.n_classes, init);

  RunManifest m;
  m.config = cfg.to_json();
  m.config["extractor"] = to_json(ex);
  m.split = plan.to_json();

  std::optional<SubjectPartition> partition;
  if (cfg.loss_mode != LossMode::ce) {
    partition = make_partition(plan.train, cfg.K, derive_seed(cfg.seed, kPartitionStream));
    m.partition = partition->to_json();
  }

  const auto params = net.parameters();
  SgdState opt;
  std::vector<std::size_t> order(data.train.size());
  std::vector<std::vector<double>> best_state;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const Schedule sched{cfg.epochs, epoch};
    const double lr = cfg.lr_at(epoch);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle(derive_seed(cfg.seed, kShuffleStream, epoch));
    shuffle.shuffle(std::span<std::size_t>(order));
    Rng dropout(derive_seed(cfg.seed, kDropoutStream, epoch));

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.alpha = alpha(sched);
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t len = std::min(cfg.batch_size, order.size() - start);
      if (len < 2) break;  // batch norm needs two samples
      const Batch batch = make_batch(data.train, std::span<const std::size_t>(order).subspan(start, len));
      const auto out = net.forward(batch.x, Mode::train, &dropout);
      const Objective obj = compute_objective(cfg, out.scores, batch, partition ? &*partition : nullptr, sched);
      net.zero_grad();
      backward(obj.loss);
      sgd_step(params, opt, lr, cfg.momentum, cfg.weight_decay, cfg.decay_norm_params);

      rec.train_loss += obj.breakdown.total;
      rec.train_subj += obj.breakdown.total_subj;
      rec.train_distill += obj.breakdown.total_distill;
      if (cfg.log_batches) {
        json row = {{"type", "batch"}, {"epoch", epoch}, {"batch", n_batches}, {"size", len}, {"lr", lr}};
        row.update(obj.breakdown.to_json());
        m.metric_rows.push_back(std::move(row));
      }
      ++n_batches;
    }
    if (n_batches > 0) {
      rec.train_loss /= static_cast<double>(n_batches);
      rec.train_subj /= static_cast<double>(n_batches);
      rec.train_distill /= static_cast<double>(n_batches);
    }
    const EvalResult val = evaluate(net, data.val);
    rec.val_accuracy = val.accuracy;
    rec.val_per_model = val.per_model_accuracy;
    if (val.accuracy > m.best_val_accuracy) {
      m.best_val_accuracy = val.accuracy;
      m.best_epoch = epoch;
      m.best_val = val;
      best_state = net.snapshot();
    }
    m.metric_rows.push_back(rec.to_json());
    m.epochs.push_back(std::move(rec));
  }

  net.restore(best_state);
  m.test = evaluate(net, data.test);
  m.metric_rows.push_back({{"type", "final"},
                           {"best_epoch", m.best_epoch},
                           {"best_val_accuracy", m.best_val_accuracy},
                           {"test_accuracy", m.test.accuracy},
                           {"test_per_model", m.test.per_model_accuracy}});
  m.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (run_dir) {
    fs::create_directories(*run_dir);
    if (cfg.save_checkpoints) {
      const auto ckpt = *run_dir / "checkpoint.bin";
      save_checkpoint(net, ckpt);
      m.checkpoint = ckpt.string();
    }
    detail::write_file(*run_dir / "metrics.jsonl", metrics_jsonl(m));
    write_json(*run_dir / "manifest.json", m.to_json());
  }
  return m;
}

inline RunManifest train(const TrainConfig& cfg, const Corpus& corpus, const SplitPlan& plan,
                         const std::optional<fs::path>& run_dir = std::nullopt) {
  return train(cfg, prepare_split(corpus, plan, cfg), plan, run_dir);
}

// --- protocols ---

struct RunSummary {
  std::string run;
  std::vector<std::uint32_t> test_subjects;
  double test_accuracy = 0.0;
  std::size_t best_epoch = 0;
  double best_val_accuracy = 0.0;
  std::vector<double> test_per_model;
};

struct SuiteReport {
  std::string mode;
  std::vector<RunSummary> runs;
  double mean_accuracy = 0.0;
  bool partial = false;
  std::string error;

  json to_json() const {
    json rs = json::array();
    for (const auto& r : runs) {
      rs.push_back({{"run", r.run},
                    {"test_subjects", r.test_subjects},
                    {"test_accuracy", r.test_accuracy},
                    {"best_epoch", r.best_epoch},
                    {"best_val_accuracy", r.best_val_accuracy},
                    {"test_per_model", r.test_per_model}});
    }
    json j = {{"mode", mode}, {"runs", rs}, {"mean_test_accuracy", mean_accuracy}, {"partial", partial}};
    if (partial) j["error"] = error;
    return j;
  }

  std::string to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "run,test_subjects,test_accuracy,best_epoch,best_val_accuracy\n";
    for (const auto& r : runs) {
      os << r.run << ',';
      for (std::size_t i = 0; i < r.test_subjects.size(); ++i) os << (i ? ";" : "") << r.test_subjects[i];
      os << ',' << r.test_accuracy << ',' << r.best_epoch << ',' << r.best_val_accuracy << '\n';
    }
    os << "mean,," << mean_accuracy << ",,\n";
    if (partial) os << "# partial: " << error << '\n';
    return os.str();
  }
};

inline std::vector<SplitPlan> suite_plans(const std::string& mode, const Corpus& corpus, const TrainConfig& cfg) {
  const auto subjects = corpus.subjects();
  std::vector<SplitPlan> plans;
  if (mode == "cv") {
    for (std::size_t f = 0; f < cfg.n_folds; ++f) plans.push_back(split_cv(subjects, cfg.n_folds, f, cfg.seed));
  } else if (mode == "loso") {
    for (auto s : subjects) plans.push_back(split_loso(subjects, s, cfg.seed));
  } else {
    throw ConfigError("unknown suite mode '" + mode + "' (expected cv or loso)");
  }
  return plans;
}

inline std::string run_name(const SplitPlan& p) {
  return p.mode == "cv" ? "fold_" + std::to_string(p.fold_index) : "subject_" + std::to_string(p.held_out);
}

/// Runs every fold (cv) or held-out subject (loso). With `out_dir`, each run
/// writes into <out_dir>/<run>/ and the aggregate goes to report.csv and
/// report.json. A failing run stops the suite; the report written so far is
/// flagged partial and the error is rethrown.
inline SuiteReport run_suite(const std::string& mode, const TrainConfig& cfg, const Corpus& corpus,
                             const std::optional<fs::path>& out_dir = std::nullopt,
                             const std::function<void(const RunSummary&)>& on_run = {}) {
  cfg.validate();
  corpus.validate();
  const auto plans = suite_plans(mode, corpus, cfg);
  SuiteReport report;
  report.mode = mode;
  std::vector<std::optional<RunSummary>> results(plans.size());
  std::exception_ptr failure;
  std::size_t failed_index = plans.size();
  std::mutex mu;

  auto work = [&](std::size_t i) {
    try {
      const auto& plan = plans[i];
      std::optional<fs::path> dir;
      if (out_dir) dir = *out_dir / run_name(plan);
      const auto m = train(cfg, corpus, plan, dir);
      RunSummary s{run_name(plan), plan.test, m.test.accuracy, m.best_epoch, m.best_val_accuracy,
                   m.test.per_model_accuracy};
      std::lock_guard lock(mu);
      results[i] = s;
      if (on_run) on_run(s);
    } catch (...) {
      std::lock_guard lock(mu);
      if (i < failed_index) {
        failed_index = i;
        failure = std::current_exception();
      }
    }
  };

  const std::size_t workers = std::min(cfg.jobs, plans.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < plans.size() && !failure; ++i) work(i);
  } else {
    std::size_t next = 0;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (;;) {
          std::size_t i;
          {
            std::lock_guard lock(mu);
            if (next >= plans.size() || failure) return;
            i = next++;
          }
          work(i);
        }
      });
    }
    for (auto& t : pool) t.join();
  }

  double acc = 0.0;
  for (std::size_t i = 0; i < plans.size(); ++i) {
    if (!results[i]) continue;
    report.runs.push_back(*results[i]);
    acc += results[i]->test_accuracy;
  }
  if (!report.runs.empty()) report.mean_accuracy = acc / static_cast<double>(report.runs.size());
  if (failure) {
    report.partial = true;
    try {
      std::rethrow_exception(failure);
    } catch (const std::exception& e) {
      report.error = run_name(plans[failed_index]) + ": " + e.what();
    } catch (...) {
      report.error = run_name(plans[failed_index]) + ": unknown error";
    }
  }
  if (out_dir) {
    detail::write_file(*out_dir / "report.csv", report.to_csv());
    write_json(*out_dir / "report.json", report.to_json());
  }
  if (failure) std::rethrow_exception(failure);
  return report;
}

struct AblationCell {
  LossMode mode;
  std::size_t K;
  double mean_accuracy;
};

/// Table with rows = loss modes and columns = K; cells are mean suite
/// accuracies. Combinations that need K >= 2 are skipped for K = 1.
inline std::vector<AblationCell> ablate(const TrainConfig& base, const Corpus& corpus, std::span<const std::size_t> Ks,
                                        std::span<const LossMode> modes, const std::string& suite_mode = "cv",
                                        const std::optional<fs::path>& out_dir = std::nullopt) {
  std::vector<AblationCell> cells;
  for (auto mode : modes) {
    for (auto K : Ks) {
      if (K == 1 && mode != LossMode::ce) continue;
      TrainConfig cfg = base;
      cfg.K = K;
      cfg.loss_mode = mode;
      std::optional<fs::path> dir;
      if (out_dir) dir = *out_dir / (to_string(mode) + "_K" + std::to_string(K));
      const auto report = run_suite(suite_mode, cfg, corpus, dir);
      cells.push_back({mode, K, report.mean_accuracy});
    }
  }
  if (out_dir) {
    std::ostringstream os;
    os.precision(17);
    os << "loss_mode";
    for (auto K : Ks) os << ",K=" << K;
    os << '\n';
    for (auto mode : modes) {
      os << to_string(mode);
      for (auto K : Ks) {
        os << ',';
        for (const auto& c : cells) {
          if (c.mode == mode && c.K == K) os << c.mean_accuracy;
        }
      }
      os << '\n';
    }
    detail::write_file(*out_dir / "ablation.csv", os.str());
  }
  return cells;
}

}  // namespace ecl
