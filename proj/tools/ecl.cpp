// Command-line runner: corpus generation, training, protocols, ablation and checks.

#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ecl/gradcheck_suite.hpp"
#include "ecl/train.hpp"

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

fs::path output_root(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("ECL_OUTPUT_DIR"); env && *env) return env;
  return "ecl_out";
}

// "a.b=3" sets j["a"]["b"] = 3; values that are not valid JSON are taken as strings.
void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ecl::ConfigError("--set expects key=value, got '" + assignment + "'");
  }
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &j;
  std::stringstream ks(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ks, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) node = &(*node)[parts[i]];
  (*node)[parts.back()] = value;
}

json load_json_or_empty(const std::string& path) { return path.empty() ? json::object() : ecl::read_json(path); }

struct TrainFlags {
  std::string config_path;
  std::optional<std::size_t> epochs, K, batch_size, jobs, n_folds;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> loss_mode, alignment;
  std::optional<double> lambda_distill;
  std::vector<std::string> sets;

  void add_to(CLI::App* app) {
    app->add_option("-c,--config", config_path, "JSON training config");
    app->add_option("--epochs", epochs);
    app->add_option("--seed", seed);
    app->add_option("-K,--K", K, "ensemble size");
    app->add_option("--loss-mode", loss_mode)->check(CLI::IsMember({"ce", "subj", "total"}));
    app->add_option("--batch-size", batch_size);
    app->add_option("--lambda-distill", lambda_distill);
    app->add_option("--alignment", alignment)->check(CLI::IsMember({"none", "euclidean", "riemannian"}));
    app->add_option("--folds", n_folds);
    app->add_option("-j,--jobs", jobs, "parallel runs");
    app->add_option("--set", sets, "override any config key, e.g. extractor.temporal_kernel=13");
  }

  ecl::TrainConfig resolve() const {
    json j = ecl::TrainConfig::from_json(load_json_or_empty(config_path)).to_json();
    if (epochs) j["epochs"] = *epochs;
    if (seed) j["seed"] = *seed;
    if (K) j["K"] = *K;
    if (loss_mode) j["loss_mode"] = *loss_mode;
    if (batch_size) j["batch_size"] = *batch_size;
    if (lambda_distill) j["lambda_distill"] = *lambda_distill;
    if (alignment) j["alignment"] = *alignment;
    if (n_folds) j["n_folds"] = *n_folds;
    if (jobs) j["jobs"] = *jobs;
    for (const auto& s : sets) apply_override(j, s);
    return ecl::TrainConfig::from_json(j);
  }
};

template <typename T>
std::vector<T> parse_list(const std::string& text, const std::function<T(const std::string&)>& conv) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(conv(item));
  }
  if (out.empty()) throw ecl::ConfigError("empty list '" + text + "'");
  return out;
}

int cmd_generate(const std::string& spec_path, const std::vector<std::string>& sets, const fs::path& out) {
  json j = ecl::GeneratorSpec::from_json(load_json_or_empty(spec_path)).to_json();
  for (const auto& s : sets) apply_override(j, s);
  const auto spec = ecl::GeneratorSpec::from_json(j);
  const auto corpus = ecl::generate(spec);
  ecl::write_corpus(corpus, out);
  std::cerr << "wrote " << corpus.trials.size() << " trials (" << corpus.subjects().size() << " subjects, "
            << corpus.channels << "x" << corpus.samples << " @ " << corpus.fs << " Hz) to " << out.string() << "\n";
  return 0;
}

int cmd_train(const ecl::TrainConfig& cfg, const ecl::Corpus& corpus, const std::string& protocol,
              std::size_t fold, std::optional<std::uint32_t> held_out, const fs::path& out) {
  ecl::SplitPlan plan;
  if (protocol == "cv") {
    plan = ecl::split_cv(corpus.subjects(), cfg.n_folds, fold, cfg.seed);
  } else {
    if (!held_out) throw ecl::ConfigError("train --protocol loso needs --held-out SUBJECT");
    plan = ecl::split_loso(corpus.subjects(), *held_out, cfg.seed);
  }
  const auto m = ecl::train(cfg, corpus, plan, out);
  std::cout << std::setprecision(6) << "best_epoch " << m.best_epoch << "  val " << m.best_val_accuracy << "  test "
            << m.test.accuracy << "  (" << out.string() << ")\n";
  return 0;
}

int cmd_suite(const ecl::TrainConfig& cfg, const ecl::Corpus& corpus, const std::string& mode, const fs::path& out) {
  const auto report = ecl::run_suite(mode, cfg, corpus, out, [](const ecl::RunSummary& r) {
    std::cerr << r.run << ": test " << r.test_accuracy << " (best epoch " << r.best_epoch << ")\n";
  });
  std::cout << std::setprecision(6) << mode << " mean test accuracy " << report.mean_accuracy << " over "
            << report.runs.size() << " runs (" << (out / "report.csv").string() << ")\n";
  return 0;
}

int cmd_ablate(const ecl::TrainConfig& cfg, const ecl::Corpus& corpus, const std::string& ks,
               const std::string& modes_text, const std::string& mode, const fs::path& out) {
  const auto Ks = parse_list<std::size_t>(ks, [](const std::string& s) {
    try {
      return static_cast<std::size_t>(std::stoul(s));
    } catch (const std::exception&) {
      throw ecl::ConfigError("bad K value '" + s + "'");
    }
  });
  const auto modes = parse_list<ecl::LossMode>(modes_text, ecl::loss_mode_from_string);
  const auto cells = ecl::ablate(cfg, corpus, Ks, modes, mode, out);
  for (const auto& c : cells) std::cout << ecl::to_string(c.mode) << " K=" << c.K << " " << c.mean_accuracy << "\n";
  std::cerr << "table: " << (out / "ablation.csv").string() << "\n";
  return 0;
}

int cmd_gradcheck(std::size_t seeds, std::uint64_t base) {
  const auto s = ecl::run_gradcheck_suite(seeds, base);
  std::cout << std::left << std::setw(28) << "op" << std::setw(14) << "max_rel_err" << std::setw(10) << "partials"
            << "status\n";
  for (const auto& [name, r] : s.per_op) {
    std::cout << std::setw(28) << name << std::setw(14) << std::setprecision(3) << std::scientific << r.max_rel_error
              << std::defaultfloat << std::setw(10) << r.checked << (r.passed ? "ok" : "FAIL") << "\n";
  }
  std::cout << (s.passed ? "all passed" : "FAILED") << " over " << s.seeds << " seeds\n";
  return s.passed ? 0 : 1;
}

int cmd_inspect(const fs::path& path) {
  if (fs::is_directory(path)) {
    for (const char* name : {"manifest.json", "report.json"}) {
      if (fs::exists(path / name)) return cmd_inspect(path / name);
    }
    throw ecl::LookupError(path.string() + ": no manifest.json or report.json");
  }
  const std::string head = ecl::detail::read_file(path).substr(0, 8);
  if (head == std::string(ecl::kCheckpointMagic, 8)) {
    auto net = ecl::load_checkpoint(path);
    json j = {{"kind", "checkpoint"},
              {"extractor", ecl::to_json(net.config())},
              {"K", net.n_models()},
              {"n_classes", net.n_classes()},
              {"parameters", net.parameter_count()}};
    std::cout << j.dump(2) << "\n";
  } else if (head == std::string(ecl::kCorpusMagic, 8)) {
    std::cout << ecl::read_corpus(path).manifest().dump(2) << "\n";
  } else {
    std::cout << ecl::read_json(path).dump(2) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ensemble curriculum learning experiments"};
  app.require_subcommand(1);
  app.fallthrough();  // --out may follow the subcommand
  std::string out_flag;
  app.add_option("-o,--out", out_flag, "output path (default $ECL_OUTPUT_DIR, else ./ecl_out)");

  auto* gen = app.add_subcommand("generate", "write a synthetic trial corpus");
  std::string spec_path;
  std::vector<std::string> gen_sets;
  gen->add_option("-s,--spec", spec_path, "JSON generator spec");
  gen->add_option("--set", gen_sets, "override a spec key, e.g. sigma_mix=1.5");

  std::string corpus_path;
  TrainFlags tf;

  auto* tr = app.add_subcommand("train", "train one split and write metrics, manifest and checkpoint");
  std::string protocol = "cv";
  std::size_t fold = 0;
  std::optional<std::uint32_t> held_out;
  tr->add_option("--corpus", corpus_path)->required();
  tr->add_option("--protocol", protocol)->check(CLI::IsMember({"cv", "loso"}));
  tr->add_option("--fold", fold);
  tr->add_option("--held-out", held_out, "subject id for loso");
  tf.add_to(tr);

  auto* su = app.add_subcommand("suite", "run all folds (cv) or all held-out subjects (loso)");
  std::string suite_mode = "cv";
  su->add_option("--corpus", corpus_path)->required();
  su->add_option("--mode", suite_mode)->check(CLI::IsMember({"cv", "loso"}));
  tf.add_to(su);

  auto* ab = app.add_subcommand("ablate", "grid over K and loss modes");
  std::string ks = "1,3,5,7", modes = "ce,subj,total", ab_mode = "cv";
  ab->add_option("--corpus", corpus_path)->required();
  ab->add_option("--Ks", ks, "comma separated ensemble sizes");
  ab->add_option("--modes", modes, "comma separated loss modes");
  ab->add_option("--mode", ab_mode)->check(CLI::IsMember({"cv", "loso"}));
  tf.add_to(ab);

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every op and the full loss");
  std::size_t gc_seeds = 20;
  std::uint64_t gc_base = 1;
  gc->add_option("--seeds", gc_seeds);
  gc->add_option("--seed", gc_base);

  auto* in = app.add_subcommand("inspect", "print a manifest, report, corpus header or checkpoint summary");
  std::string inspect_path;
  in->add_option("path", inspect_path)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    const fs::path out = output_root(out_flag);
    if (gen->parsed()) {
      return cmd_generate(spec_path, gen_sets, out.has_extension() ? out : out / "corpus.bin");
    }
    if (gc->parsed()) return cmd_gradcheck(gc_seeds, gc_base);
    if (in->parsed()) return cmd_inspect(inspect_path);

    const auto cfg = tf.resolve();
    const auto corpus = ecl::read_corpus(corpus_path);
    corpus.validate();
    if (tr->parsed()) return cmd_train(cfg, corpus, protocol, fold, held_out, out);
    if (su->parsed()) return cmd_suite(cfg, corpus, suite_mode, out);
    if (ab->parsed()) return cmd_ablate(cfg, corpus, ks, modes, ab_mode, out);
  } catch (const std::exception& e) {
    std::cerr << "ecl: error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
