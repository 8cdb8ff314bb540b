#pragma once

// Intra-ensemble distillation.
//
// Model k is pulled toward a pseudolabel built from its peers: the softmax
// of the mean of the other K-1 raw score vectors, detached from the graph.
// Samples whose subject belongs to S_k are masked out, and the term is
// ramped in by (1 - alpha) as training progresses.

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ecl/curriculum.hpp"
#include "ecl/error.hpp"
#include "ecl/ops.hpp"

namespace ecl {

struct DistillConfig {
  double lambda_subj = 2.0;
  double lambda_distill = 0.7;

  /// lambda_subj = K, lambda_distill = 0.7.
  static DistillConfig for_ensemble(std::size_t K) {
    return {static_cast<double>(K), 0.7};
  }

  void validate() const {
    if (!(lambda_subj >= 0.0) || !(lambda_distill >= 0.0)) {
      throw ParameterError("DistillConfig: loss weights must be non-negative");
    }
  }
};

/// softmax(mean_{i != k} scores[i]) along the class axis, detached.
inline Tensor pseudolabel(std::span<const Tensor> scores, std::size_t k) {
  if (scores.size() < 2) {
    throw ContractError("pseudolabel: needs K >= 2 models, got " + std::to_string(scores.size()));
  }
  if (k >= scores.size()) throw ContractError("pseudolabel: model index out of range");
  NoGrad no_grad;
  std::vector<Tensor> others;
  others.reserve(scores.size() - 1);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (i != k) others.push_back(scores[i]);
  }
  return stop_gradient(softmax(mean(others), 1));
}

struct DistillLoss {
  std::vector<Tensor> per_model;  // K scalars
  Tensor total;
};

/// All K pseudolabels for a batch.
inline std::vector<Tensor> pseudolabels(std::span<const Tensor> scores) {
  std::vector<Tensor> out;
  for (std::size_t k = 0; k < scores.size(); ++k) out.push_back(pseudolabel(scores, k));
  return out;
}

/// Distillation loss against given (already detached) targets, one per model.
inline DistillLoss loss_distill(std::span<const Tensor> scores, std::span<const Tensor> targets,
                                std::span<const SubjectId> subjects, const SubjectPartition& partition,
                                const Schedule& schedule) {
  if (scores.size() < 2) {
    throw ContractError("loss_distill: needs K >= 2 models, got " + std::to_string(scores.size()));
  }
  if (subjects.empty()) throw ContractError("loss_distill: empty batch");
  if (targets.size() != scores.size()) {
    throw ContractError("loss_distill: " + std::to_string(targets.size()) + " targets for " +
                        std::to_string(scores.size()) + " models");
  }
  for (std::size_t k = 0; k < scores.size(); ++k) {
    const auto& s = scores[k];
    if (s.rank() != 2 || s.shape() != scores[0].shape() || s.dim(0) != subjects.size() ||
        targets[k].shape() != s.shape()) {
      throw ContractError("loss_distill: score tensor " + shape_str(s.shape()) + " inconsistent with " +
                          std::to_string(subjects.size()) + " samples");
    }
  }
  if (scores.size() != partition.n_subsets) {
    throw ContractError("loss_distill: " + std::to_string(scores.size()) + " models for a partition of " +
                        std::to_string(partition.n_subsets) + " subsets");
  }
  const double ramp = 1.0 - alpha(schedule);
  DistillLoss out;
  std::vector<double> mask(subjects.size());
  for (std::size_t k = 0; k < scores.size(); ++k) {
    std::size_t n_in = 0;
    for (std::size_t i = 0; i < subjects.size(); ++i) {
      const bool in_subset = partition.in_subset(subjects[i], k);
      mask[i] = in_subset ? 0.0 : 1.0;
      n_in += in_subset ? 0 : 1;
    }
    if (n_in == 0) {
      out.per_model.push_back(Tensor::scalar(0.0));
      continue;
    }
    const Tensor rows = cross_entropy_rows(scores[k], targets[k]);
    out.per_model.push_back(scale(weighted_sum(rows, mask, static_cast<double>(n_in)), ramp));
  }
  out.total = sum_scalars(out.per_model);
  return out;
}

/// L_distill^k = (1 - alpha) * masked mean over samples with subject not in
/// S_k of CE(yhat_k, ytilde_k); zero when model k has no masked-in sample.
inline DistillLoss loss_distill(std::span<const Tensor> scores, std::span<const SubjectId> subjects,
                                const SubjectPartition& partition, const Schedule& schedule) {
  if (scores.size() < 2) {
    throw ContractError("loss_distill: needs K >= 2 models, got " + std::to_string(scores.size()));
  }
  const auto targets = pseudolabels(scores);
  return loss_distill(scores, targets, subjects, partition, schedule);
}

struct LossBreakdown {
  std::vector<double> per_model_subj;
  std::vector<double> per_model_distill;
  double total_subj = 0.0;
  double total_distill = 0.0;
  double total = 0.0;
  double alpha = 1.0;

  nlohmann::json to_json() const {
    return {{"per_model_subj", per_model_subj}, {"per_model_distill", per_model_distill},
            {"total_subj", total_subj},         {"total_distill", total_distill},
            {"total", total},                   {"alpha", alpha}};
  }
};

struct Objective {
  Tensor loss;  // differentiable scalar
  LossBreakdown breakdown;
};

inline std::vector<double> scalar_values(std::span<const Tensor> terms) {
  std::vector<double> out;
  for (const auto& t : terms) out.push_back(t.item());
  return out;
}

/// L_total = lambda_subj * L_subj^total + lambda_distill * L_distill^total.
inline Objective loss_total(const SubjectLoss& subj, const DistillLoss& distill, const DistillConfig& cfg,
                            double alpha_value) {
  cfg.validate();
  if (subj.per_model.size() != distill.per_model.size()) {
    throw ContractError("loss_total: subject loss has " + std::to_string(subj.per_model.size()) +
                        " models, distillation loss has " + std::to_string(distill.per_model.size()));
  }
  Objective out;
  out.loss = add(scale(subj.total, cfg.lambda_subj), scale(distill.total, cfg.lambda_distill));
  out.breakdown.per_model_subj = scalar_values(subj.per_model);
  out.breakdown.per_model_distill = scalar_values(distill.per_model);
  out.breakdown.total_subj = subj.total.item();
  out.breakdown.total_distill = distill.total.item();
  out.breakdown.total = out.loss.item();
  out.breakdown.alpha = alpha_value;
  return out;
}

}  // namespace ecl
