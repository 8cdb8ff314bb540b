#pragma once

// Synthetic multi-subject motor-imagery-like corpora and evaluation splits.
//
// Each channel carries an 8-12 Hz rhythm on top of pink-like background
// noise. Channels are split into one group per class; during a trial of
// class c the rhythm in group c is attenuated. Subjects see the channels
// through their own mixing matrix A_n = I + clip(sigma_mix * E), sessions
// through an extra I + clip(session_shift * E_s). Recordings are continuous,
// contaminated with line noise, and pass through the standard pipeline.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "ecl/error.hpp"
#include "ecl/io.hpp"
#include "ecl/rng.hpp"
#include "ecl/signal.hpp"

namespace ecl {

struct GeneratorSpec {
  std::size_t n_subjects = 12;
  std::size_t n_sessions = 1;
  std::size_t trials_per_class = 20;  // per session
  std::size_t channels = 8;
  double fs = 160.0;
  double trial_seconds = 2.0;
  double rest_seconds = 1.0;
  std::size_t n_classes = 2;
  double sigma_mix = 0.5;
  double session_shift = 0.1;
  double noise = 1.0;            // pink-like background, relative to rhythm amplitude
  double erd = 0.5;              // rhythm amplitude factor in the attenuated group
  double line_noise = 0.5;       // 50 Hz amplitude before the notch
  double line_freq = 50.0;
  double target_fs = 100.0;
  std::uint64_t seed = 0;

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ConfigError(std::string("generator: ") + name + " must be positive");
    };
    positive(n_subjects, "n_subjects");
    positive(n_sessions, "n_sessions");
    positive(trials_per_class, "trials_per_class");
    positive(channels, "channels");
    if (n_classes < 2) throw ConfigError("generator: n_classes must be at least 2");
    if (channels < n_classes) throw ConfigError("generator: need at least one channel per class group");
    if (!(fs > 0.0) || !(trial_seconds > 0.0) || !(rest_seconds >= 0.0) || !(target_fs > 0.0)) {
      throw ConfigError("generator: rates and durations must be positive");
    }
    if (!(sigma_mix >= 0.0) || !(session_shift >= 0.0) || !(noise >= 0.0) || !(line_noise >= 0.0)) {
      throw ConfigError("generator: sigma_mix, session_shift, noise and line_noise must be non-negative");
    }
    if (!(erd >= 0.0 && erd <= 1.0)) throw ConfigError("generator: erd must lie in [0, 1]");
  }

  std::size_t samples() const { return static_cast<std::size_t>(std::llround(trial_seconds * target_fs)); }

  nlohmann::json to_json() const {
    return {{"n_subjects", n_subjects},   {"n_sessions", n_sessions}, {"trials_per_class", trials_per_class},
            {"channels", channels},       {"fs", fs},                 {"trial_seconds", trial_seconds},
            {"rest_seconds", rest_seconds}, {"n_classes", n_classes}, {"sigma_mix", sigma_mix},
            {"session_shift", session_shift}, {"noise", noise},      {"erd", erd},
            {"line_noise", line_noise},   {"line_freq", line_freq},   {"target_fs", target_fs},
            {"seed", seed}};
  }

  /// Missing keys keep their defaults; unknown keys are rejected.
  static GeneratorSpec from_json(const nlohmann::json& j) {
    GeneratorSpec s;
    if (!j.is_object()) throw ConfigError("generator spec: expected a JSON object");
    const auto known = s.to_json();
    for (const auto& [key, value] : j.items()) {
      if (!known.contains(key)) throw ConfigError("generator spec: unknown key '" + key + "'");
    }
    try {
      read_fields(j, s);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("generator spec: ") + e.what());
    }
    s.validate();
    return s;
  }

 private:
  static void read_fields(const nlohmann::json& j, GeneratorSpec& s) {
    s.n_subjects = j.value("n_subjects", s.n_subjects);
    s.n_sessions = j.value("n_sessions", s.n_sessions);
    s.trials_per_class = j.value("trials_per_class", s.trials_per_class);
    s.channels = j.value("channels", s.channels);
    s.fs = j.value("fs", s.fs);
    s.trial_seconds = j.value("trial_seconds", s.trial_seconds);
    s.rest_seconds = j.value("rest_seconds", s.rest_seconds);
    s.n_classes = j.value("n_classes", s.n_classes);
    s.sigma_mix = j.value("sigma_mix", s.sigma_mix);
    s.session_shift = j.value("session_shift", s.session_shift);
    s.noise = j.value("noise", s.noise);
    s.erd = j.value("erd", s.erd);
    s.line_noise = j.value("line_noise", s.line_noise);
    s.line_freq = j.value("line_freq", s.line_freq);
    s.target_fs = j.value("target_fs", s.target_fs);
    s.seed = j.value("seed", s.seed);
  }
};

inline constexpr std::uint64_t kSubjectStream = 0x5u;

namespace detail {

/// I + scale * E with E standard normal, the perturbation clipped to spectral norm 0.9.
inline Eigen::MatrixXd perturbed_identity(std::size_t n, double scale, Rng& rng) {
  const auto N = static_cast<Eigen::Index>(n);
  Eigen::MatrixXd e(N, N);
  for (Eigen::Index i = 0; i < N; ++i)
    for (Eigen::Index j = 0; j < N; ++j) e(i, j) = rng.normal();
  Eigen::MatrixXd p = scale * e;
  if (scale > 0.0) {
    const double norm = Eigen::JacobiSVD<Eigen::MatrixXd>(p).singularValues()(0);
    if (norm > 0.9) p *= 0.9 / norm;
  }
  return Eigen::MatrixXd::Identity(N, N) + p;
}

inline std::size_t channel_group(std::size_t channel, std::size_t channels, std::size_t n_classes) {
  return channel * n_classes / channels;
}

/// One continuous session: rhythm + background, mixed, then line noise.
inline RawRecording simulate_session(const GeneratorSpec& spec, const Eigen::MatrixXd& mixing,
                                     double rhythm_hz, std::uint32_t subject, std::uint16_t session, Rng& rng) {
  std::vector<std::uint16_t> labels;
  for (std::size_t c = 0; c < spec.n_classes; ++c) labels.insert(labels.end(), spec.trials_per_class, static_cast<std::uint16_t>(c));
  rng.shuffle(std::span<std::uint16_t>(labels));

  const auto trial_len = static_cast<std::size_t>(std::llround(spec.trial_seconds * spec.fs));
  const auto rest_len = static_cast<std::size_t>(std::llround(spec.rest_seconds * spec.fs));
  const auto lead = static_cast<std::size_t>(std::llround(spec.fs));  // 1 s before the first cue
  const std::size_t C = spec.channels;
  const std::size_t S = lead + labels.size() * (trial_len + rest_len) + lead;

  RawRecording rec;
  rec.channels = C;
  rec.samples = S;
  rec.fs = spec.fs;
  rec.subject = subject;
  rec.session = session;
  // per-sample attenuation for each class group
  std::vector<double> gain(spec.n_classes * S, 1.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::size_t onset = lead + i * (trial_len + rest_len);
    rec.events.push_back({onset, labels[i]});
    for (std::size_t t = onset; t < onset + trial_len; ++t) gain[labels[i] * S + t] = spec.erd;
  }

  Eigen::MatrixXd src(static_cast<Eigen::Index>(C), static_cast<Eigen::Index>(S));
  const double dt = 1.0 / spec.fs;
  for (std::size_t c = 0; c < C; ++c) {
    const std::size_t g = channel_group(c, C, spec.n_classes);
    const double f = rhythm_hz + rng.uniform(-0.5, 0.5);
    double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    // pink-like: three AR(1) processes at different time scales
    double ar[3] = {0.0, 0.0, 0.0};
    const double coef[3] = {0.5, 0.9, 0.99};
    for (std::size_t t = 0; t < S; ++t) {
      phase += 2.0 * std::numbers::pi * f * dt + 0.05 * rng.normal();
      double bg = 0.0;
      for (int k = 0; k < 3; ++k) {
        ar[k] = coef[k] * ar[k] + std::sqrt(1.0 - coef[k] * coef[k]) * rng.normal();
        bg += ar[k];
      }
      const double rhythm = std::sqrt(2.0) * gain[g * S + t] * std::sin(phase);
      src(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(t)) = rhythm + spec.noise * bg / std::sqrt(3.0);
    }
  }
  const Eigen::MatrixXd mixed = mixing * src;
  rec.data.resize(C * S);
  for (std::size_t c = 0; c < C; ++c) {
    const double line_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    for (std::size_t t = 0; t < S; ++t) {
      const double line = spec.line_noise *
                          std::sin(2.0 * std::numbers::pi * spec.line_freq * static_cast<double>(t) * dt + line_phase);
      rec.data[c * S + t] = mixed(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(t)) + line;
    }
  }
  return rec;
}

}  // namespace detail

/// Trials for one subject; depends only on (spec.seed, subject).
inline std::vector<Trial> generate_subject(const GeneratorSpec& spec, std::uint32_t subject) {
  Rng rng(derive_seed(spec.seed, kSubjectStream, subject));
  const Eigen::MatrixXd a = detail::perturbed_identity(spec.channels, spec.sigma_mix, rng);
  const double rhythm_hz = rng.uniform(9.0, 11.0);
  PipelineConfig pipe;
  pipe.notch_hz = spec.line_freq;
  pipe.target_fs = spec.target_fs;
  pipe.window_seconds = spec.trial_seconds;
  std::vector<Trial> out;
  for (std::size_t s = 0; s < spec.n_sessions; ++s) {
    const Eigen::MatrixXd m = detail::perturbed_identity(spec.channels, spec.session_shift, rng) * a;
    auto rec = detail::simulate_session(spec, m, rhythm_hz, subject, static_cast<std::uint16_t>(s), rng);
    auto cropped = preprocess(std::move(rec), pipe);
    if (cropped.dropped != 0) throw ContractError("generator: trial window ran past the end of a session");
    for (auto& t : cropped.trials) out.push_back(std::move(t));
  }
  return out;
}

inline Corpus generate(const GeneratorSpec& spec) {
  spec.validate();
  Corpus c;
  c.channels = spec.channels;
  c.samples = spec.samples();
  c.fs = spec.target_fs;
  for (std::size_t k = 0; k < spec.n_classes; ++k) c.class_names.push_back("class_" + std::to_string(k));
  c.generator = spec.to_json();
  for (std::uint32_t s = 0; s < spec.n_subjects; ++s) {
    auto trials = generate_subject(spec, s);
    for (auto& t : trials) c.trials.push_back(std::move(t));
  }
  return c;
}

struct SplitPlan {
  std::string mode;  // "cv" or "loso"
  std::size_t fold_index = 0;
  std::uint32_t held_out = 0;  // loso only
  std::vector<std::uint32_t> train, val, test;

  void validate(std::span<const std::uint32_t> all) const {
    std::set<std::uint32_t> seen;
    for (const auto* part : {&train, &val, &test}) {
      if (part->empty()) throw ConfigError("split: empty train, validation or test set");
      for (auto s : *part) {
        if (!seen.insert(s).second) throw ContractError("split: subject " + std::to_string(s) + " in two sets");
      }
    }
    if (seen != std::set<std::uint32_t>(all.begin(), all.end())) throw ContractError("split: does not cover all subjects");
  }

  nlohmann::json to_json() const {
    nlohmann::json j = {{"mode", mode}, {"train", train}, {"val", val}, {"test", test}};
    if (mode == "cv") j["fold_index"] = fold_index;
    if (mode == "loso") j["held_out"] = held_out;
    return j;
  }
};

inline constexpr std::uint64_t kSplitStream = 0x9u;

/// Subjects shuffled by `seed` and cut into n_folds near-equal folds (the
/// first size % n_folds folds get one extra). Test = fold i, validation =
/// fold i+1 mod n_folds, train = the rest.
inline SplitPlan split_cv(std::span<const std::uint32_t> subjects, std::size_t n_folds, std::size_t fold_index,
                          std::uint64_t seed) {
  if (n_folds < 3) throw ParameterError("split_cv: need at least 3 folds");
  if (subjects.size() < n_folds) {
    throw ParameterError("split_cv: " + std::to_string(subjects.size()) + " subjects for " + std::to_string(n_folds) +
                         " folds");
  }
  if (fold_index >= n_folds) {
    throw ParameterError("split_cv: fold_index " + std::to_string(fold_index) + " out of range [0, " +
                         std::to_string(n_folds) + ")");
  }
  std::vector<std::uint32_t> order(subjects.begin(), subjects.end());
  std::sort(order.begin(), order.end());
  Rng rng(derive_seed(seed, kSplitStream));
  rng.shuffle(std::span<std::uint32_t>(order));
  std::vector<std::vector<std::uint32_t>> folds(n_folds);
  const std::size_t base = order.size() / n_folds, extra = order.size() % n_folds;
  std::size_t pos = 0;
  for (std::size_t f = 0; f < n_folds; ++f) {
    const std::size_t len = base + (f < extra ? 1 : 0);
    folds[f].assign(order.begin() + static_cast<std::ptrdiff_t>(pos), order.begin() + static_cast<std::ptrdiff_t>(pos + len));
    pos += len;
  }
  SplitPlan p;
  p.mode = "cv";
  p.fold_index = fold_index;
  const std::size_t val_fold = (fold_index + 1) % n_folds;
  for (std::size_t f = 0; f < n_folds; ++f) {
    auto& dst = f == fold_index ? p.test : (f == val_fold ? p.val : p.train);
    dst.insert(dst.end(), folds[f].begin(), folds[f].end());
  }
  for (auto* part : {&p.train, &p.val, &p.test}) std::sort(part->begin(), part->end());
  return p;
}

/// Test = {held_out}; the rest shuffled by `seed`, validation size
/// max(1, round(0.2 * (N - 1))), train = remainder.
inline SplitPlan split_loso(std::span<const std::uint32_t> subjects, std::uint32_t held_out, std::uint64_t seed) {
  if (subjects.size() < 3) throw ParameterError("split_loso: need at least 3 subjects");
  if (std::find(subjects.begin(), subjects.end(), held_out) == subjects.end()) {
    throw LookupError("split_loso: unknown subject " + std::to_string(held_out));
  }
  std::vector<std::uint32_t> rest;
  for (auto s : subjects) {
    if (s != held_out) rest.push_back(s);
  }
  std::sort(rest.begin(), rest.end());
  Rng rng(derive_seed(seed, kSplitStream, held_out));
  rng.shuffle(std::span<std::uint32_t>(rest));
  const auto n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(rest.size()))));
  SplitPlan p;
  p.mode = "loso";
  p.held_out = held_out;
  p.test = {held_out};
  p.val.assign(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(n_val));
  p.train.assign(rest.begin() + static_cast<std::ptrdiff_t>(n_val), rest.end());
  std::sort(p.val.begin(), p.val.end());
  std::sort(p.train.begin(), p.train.end());
  return p;
}

}  // namespace ecl
