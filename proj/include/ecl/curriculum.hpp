#pragma once

// Subject-to-subset specialization and the subject-weighted loss.
//
// Every training subject is assigned to one of K disjoint subsets S_k.
// Model k weights a sample's cross-entropy by beta(x, k): 1 if the sample's
// subject is in S_k, otherwise alpha = 1 - epoch / n_epochs, which decays
// linearly to 0 over training.

#include <algorithm>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ecl/error.hpp"
#include "ecl/ops.hpp"
#include "ecl/rng.hpp"

namespace ecl {

using SubjectId = std::uint32_t;

struct SubjectPartition {
  std::size_t n_subsets = 0;
  std::map<SubjectId, std::size_t> assignment;
  std::uint64_t seed = 0;  // recorded for the run manifest

  std::size_t subset_of(SubjectId subject) const {
    const auto it = assignment.find(subject);
    if (it == assignment.end()) {
      throw LookupError("subject " + std::to_string(subject) + " is not in the partition");
    }
    return it->second;
  }

  bool in_subset(SubjectId subject, std::size_t k) const { return subset_of(subject) == k; }

  std::vector<std::vector<SubjectId>> subsets() const {
    std::vector<std::vector<SubjectId>> out(n_subsets);
    for (const auto& [s, k] : assignment) out[k].push_back(s);
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json a = nlohmann::json::object();
    for (const auto& [s, k] : assignment) a[std::to_string(s)] = k;
    return {{"seed", seed}, {"K", n_subsets}, {"assignment", a}};
  }

  static SubjectPartition from_json(const nlohmann::json& j) {
    SubjectPartition p;
    p.seed = j.at("seed").get<std::uint64_t>();
    p.n_subsets = j.at("K").get<std::size_t>();
    for (const auto& [key, value] : j.at("assignment").items()) {
      p.assignment[static_cast<SubjectId>(std::stoul(key))] = value.get<std::size_t>();
    }
    return p;
  }
};

/// Uniform random assignment of each subject to one of K subsets, redrawn
/// until no subset is empty.
inline SubjectPartition make_partition(std::span<const SubjectId> subjects, std::size_t K,
                                       std::uint64_t seed) {
  if (K < 2) throw ParameterError("make_partition: K must be >= 2, got " + std::to_string(K));
  if (K > subjects.size()) {
    throw ParameterError("make_partition: cannot split " + std::to_string(subjects.size()) +
                         " subjects into " + std::to_string(K) + " non-empty subsets");
  }
  Rng rng(seed);
  SubjectPartition p;
  p.n_subsets = K;
  p.seed = seed;
  for (;;) {
    p.assignment.clear();
    std::vector<std::size_t> sizes(K, 0);
    for (SubjectId s : subjects) {
      const auto k = static_cast<std::size_t>(rng.below(K));
      if (!p.assignment.emplace(s, k).second) {
        throw ParameterError("make_partition: duplicate subject id " + std::to_string(s));
      }
      ++sizes[k];
    }
    if (std::find(sizes.begin(), sizes.end(), std::size_t{0}) == sizes.end()) return p;
  }
}

/// Training progress for one run. Epochs are 0-indexed; alpha is evaluated
/// at the start of an epoch and held for all of its batches.
struct Schedule {
  std::size_t n_epochs = 1;
  std::size_t current_epoch = 0;
};

inline double alpha(const Schedule& s) {
  if (s.n_epochs == 0) throw ContractError("alpha: n_epochs must be positive");
  if (s.current_epoch > s.n_epochs) {
    throw ContractError("alpha: epoch " + std::to_string(s.current_epoch) + " outside [0, " +
                        std::to_string(s.n_epochs) + "]");
  }
  return 1.0 - static_cast<double>(s.current_epoch) / static_cast<double>(s.n_epochs);
}

inline double beta(SubjectId subject, std::size_t k, const SubjectPartition& partition,
                   const Schedule& schedule) {
  const double a = alpha(schedule);
  return partition.in_subset(subject, k) ? 1.0 : a;
}

struct SubjectLoss {
  std::vector<Tensor> per_model;  // K scalars
  Tensor total;
};

namespace detail {
inline void check_batch(std::span<const Tensor> scores, const Tensor& targets, std::size_t n_subjects,
                        const char* op) {
  if (scores.empty()) throw ContractError(std::string(op) + ": no score tensors");
  for (const auto& s : scores) {
    if (s.shape() != targets.shape()) {
      throw ContractError(std::string(op) + ": scores " + shape_str(s.shape()) + " vs targets " +
                          shape_str(targets.shape()));
    }
  }
  if (targets.rank() != 2 || targets.dim(0) != n_subjects) {
    throw ContractError(std::string(op) + ": " + std::to_string(n_subjects) + " subject ids for batch " +
                        shape_str(targets.shape()));
  }
}
}  // namespace detail

/// Unweighted ensemble cross-entropy: per-model batch-mean CE and their sum.
inline SubjectLoss loss_ce(std::span<const Tensor> scores, const Tensor& targets) {
  if (scores.empty()) throw ContractError("loss_ce: no score tensors");
  SubjectLoss out;
  for (const auto& s : scores) out.per_model.push_back(cross_entropy(s, targets));
  out.total = sum_scalars(out.per_model);
  return out;
}

/// L_subj^k = mean_i beta(x_i, k) * CE(yhat_k(x_i), y_i); total = sum_k.
/// With alpha == 1 this reproduces loss_ce bitwise.
inline SubjectLoss loss_subj(std::span<const Tensor> scores, const Tensor& targets,
                             std::span<const SubjectId> subjects, const SubjectPartition& partition,
                             const Schedule& schedule) {
  detail::check_batch(scores, targets, subjects.size(), "loss_subj");
  if (scores.size() != partition.n_subsets) {
    throw ContractError("loss_subj: " + std::to_string(scores.size()) + " models for a partition of " +
                        std::to_string(partition.n_subsets) + " subsets");
  }
  SubjectLoss out;
  std::vector<double> weights(subjects.size());
  for (std::size_t k = 0; k < scores.size(); ++k) {
    for (std::size_t i = 0; i < subjects.size(); ++i) weights[i] = beta(subjects[i], k, partition, schedule);
    const Tensor rows = cross_entropy_rows(scores[k], targets);
    out.per_model.push_back(weighted_sum(rows, weights, static_cast<double>(subjects.size())));
  }
  out.total = sum_scalars(out.per_model);
  return out;
}

}  // namespace ecl
