#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "canary/error.hpp"
#include "canary/model_io.hpp"
#include "cli.hpp"

namespace cli {

namespace {

struct ConfigArgs {
  std::string variant = "BwCu", model, out;
  std::size_t layers = 0, first = 0;
  float theta = 0.5f, phi = 0.1f;
};

struct ProfileArgs {
  std::string model, data, config, merge, out;
  std::size_t limit = 0, jobs = 1;
};

struct SetArgs {
  std::vector<std::string> benign, adversarial;
  std::size_t limit = 0;
};

struct FitArgs {
  std::string model, config, class_paths, features = "overall", out;
  SetArgs set;
  std::size_t trees = 100, depth = 12, jobs = 1;
  std::uint64_t seed = 1;
};

struct DetectArgs {
  std::string model, config, class_paths, forest, features = "overall", report;
  SetArgs set;
  double threshold = 0.5;
  std::size_t jobs = 1;
};

void cmd_config(const ConfigArgs& a) {
  std::size_t n = a.layers;
  if (!a.model.empty()) n = canary::load_model(a.model).weighted_count();
  canary::require(n > 0, canary::ErrorKind::Config, "give --model or --layers");
  canary::ExtractionConfig c = canary::make_variant(a.variant, n, a.theta, a.phi);
  c.first = a.first;
  c.validate(n);
  canary::save_config(c, a.out);
  spdlog::info("{} config for {} weighted layers written to {}", c.name, n, a.out);
  write_run_manifest("make-config", {{"model", a.model}}, {a.out}, std::nullopt,
                     {{"variant", a.variant}, {"layers", n}, {"theta", a.theta}, {"phi", a.phi}, {"first", a.first}});
}

void cmd_profile(const ProfileArgs& a) {
  canary::Network net = canary::load_model(a.model);
  canary::ExtractionConfig cfg = canary::load_config(a.config);
  auto data = canary::load_dataset(a.data);
  if (a.limit && data.size() > a.limit) data.resize(a.limit);
  canary::require(!data.empty(), canary::ErrorKind::Data, "dataset " + a.data + " is empty");
  canary::ClassPathStore store =
      a.merge.empty() ? canary::profile(net, data, cfg, a.jobs)
                      : canary::merge_incremental(canary::load_class_paths(a.merge, net), net, data, cfg, a.jobs);
  canary::save_class_paths(store, a.out);
  for (const auto& [cls, cp] : store.classes)
    spdlog::info("class {}: {} samples, {} of {} path bits", cls, cp.samples, cp.path.popcount(), cp.path.capacity());
  write_run_manifest("profile", {{"model", a.model}, {"data", a.data}, {"config", a.config}, {"merge", a.merge}},
                     {a.out}, std::nullopt, {{"limit", a.limit}, {"fingerprint", fmt::format("{:016x}", store.fingerprint)}});
}

InputSet load_set(const SetArgs& a) {
  InputSet s;
  for (const auto& d : a.benign) append_dataset(s, d, a.limit);
  for (const auto& d : a.adversarial) append_adversarial(s, d, a.limit);
  canary::require(!s.inputs.empty(), canary::ErrorKind::Data, "no inputs: give --benign and/or --adversarial");
  return s;
}

std::map<std::string, std::string> set_inputs(const SetArgs& a) {
  std::map<std::string, std::string> m;
  for (std::size_t i = 0; i < a.benign.size(); ++i) m[fmt::format("benign{}", i)] = a.benign[i];
  for (std::size_t i = 0; i < a.adversarial.size(); ++i) m[fmt::format("adversarial{}", i)] = a.adversarial[i];
  return m;
}

void cmd_fit(const FitArgs& a) {
  canary::Network net = canary::load_model(a.model);
  canary::ExtractionConfig cfg = canary::load_config(a.config);
  canary::ClassPathStore store = canary::load_class_paths(a.class_paths, net);
  canary::require_fingerprint(store, net, cfg);
  const canary::FeatureMode mode = feature_mode_from_string(a.features);
  InputSet set = load_set(a.set);
  auto scored = score_set(net, cfg, store, set, mode, a.jobs);
  std::vector<std::vector<float>> x;
  std::vector<bool> y;
  for (std::size_t i = 0; i < scored.size(); ++i) {
    if (scored[i].unprofiled) continue;
    x.push_back(scored[i].features);
    y.push_back(set.adversarial[i]);
  }
  canary::require(!x.empty(), canary::ErrorKind::Data, "every input was predicted as an unprofiled class");
  canary::ForestOptions fo;
  fo.trees = a.trees;
  fo.max_depth = a.depth;
  fo.seed = a.seed;
  fo.jobs = a.jobs;
  canary::RandomForest forest = canary::train_forest(x, y, fo);
  canary::save_forest(forest, a.out);
  spdlog::info("forest of {} trees (max depth {}) fit on {} inputs", forest.trees.size(), forest.max_depth(), x.size());
  auto inputs = set_inputs(a.set);
  inputs["model"] = a.model;
  inputs["config"] = a.config;
  inputs["class_paths"] = a.class_paths;
  write_run_manifest("fit-detector", inputs, {a.out}, a.seed,
                     {{"trees", a.trees}, {"depth", a.depth}, {"features", a.features}, {"limit", a.set.limit}});
}

void cmd_detect(const DetectArgs& a) {
  canary::Network net = canary::load_model(a.model);
  canary::ExtractionConfig cfg = canary::load_config(a.config);
  canary::ClassPathStore store = canary::load_class_paths(a.class_paths, net);
  canary::require_fingerprint(store, net, cfg);
  canary::RandomForest forest = canary::load_forest(a.forest);
  const canary::FeatureMode mode = feature_mode_from_string(a.features);
  InputSet set = load_set(a.set);
  auto scored = score_set(net, cfg, store, set, mode, a.jobs);

  nlohmann::json verdicts = nlohmann::json::array();
  std::vector<double> scores;
  std::vector<bool> labels;
  std::size_t flagged = 0, correct = 0;
  for (std::size_t i = 0; i < scored.size(); ++i) {
    const Scored& s = scored[i];
    nlohmann::json v{{"id", i},
                     {"source", set.source[i]},
                     {"adversarial_input", static_cast<bool>(set.adversarial[i])},
                     {"label", set.labels[i]},
                     {"predicted", s.predicted},
                     {"unprofiled", s.unprofiled}};
    double score = 1.0;
    bool adv = true;
    if (!s.unprofiled) {
      auto d = canary::classify(forest, s.report, mode, a.threshold);
      score = d.score;
      adv = d.adversarial;
      v["similarity"] = s.report.overall;
      v["empty_path"] = s.report.empty_path;
    }
    v["score"] = score;
    v["flagged"] = adv;
    verdicts.push_back(v);
    scores.push_back(score);
    labels.push_back(set.adversarial[i]);
    flagged += adv;
    correct += adv == set.adversarial[i];
  }
  const bool both = std::find(labels.begin(), labels.end(), true) != labels.end() &&
                    std::find(labels.begin(), labels.end(), false) != labels.end();
  nlohmann::json report{{"inputs", scored.size()},
                        {"flagged", flagged},
                        {"accuracy", static_cast<double>(correct) / static_cast<double>(scored.size())},
                        {"config", cfg.name},
                        {"verdicts", verdicts}};
  if (both) {
    double auc = canary::auc(scores, labels);
    report["auc"] = auc;
    spdlog::info("AUC {:.4f} over {} inputs", auc, scored.size());
  }
  spdlog::info("{} of {} inputs flagged, detection accuracy {:.4f}", flagged, scored.size(),
               report["accuracy"].get<double>());
  if (!a.report.empty()) {
    write_json(a.report, report);
    auto inputs = set_inputs(a.set);
    inputs["model"] = a.model;
    inputs["config"] = a.config;
    inputs["class_paths"] = a.class_paths;
    inputs["forest"] = a.forest;
    write_run_manifest("detect", inputs, {a.report}, std::nullopt,
                       {{"threshold", a.threshold}, {"features", a.features}, {"limit", a.set.limit}});
  }
}

void add_set_options(CLI::App* c, SetArgs& s) {
  c->add_option("--benign", s.benign, "Benign dataset directory (repeatable)");
  c->add_option("--adversarial", s.adversarial, "Adversarial set directory (repeatable)");
  c->add_option("--limit", s.limit, "Use at most this many inputs per directory (0: all)");
}

}  // namespace

void add_detect_commands(CLI::App& app) {
  auto cfg = std::make_shared<ConfigArgs>();
  auto* c = app.add_subcommand("make-config", "Write a named extraction config");
  c->add_option("--variant", cfg->variant, "BwCu, BwAb, FwAb or Hybrid")->capture_default_str();
  c->add_option("--model", cfg->model, "Model whose weighted layers the config covers");
  c->add_option("--layers", cfg->layers, "Weighted layer count when no model is given");
  c->add_option("--theta", cfg->theta, "Cumulative threshold")->capture_default_str();
  c->add_option("--phi", cfg->phi, "Absolute threshold")->capture_default_str();
  c->add_option("--first", cfg->first, "Termination layer (backward) or start layer (forward)")->capture_default_str();
  c->add_option("-o,--out", cfg->out)->required();
  c->callback([cfg] { cmd_config(*cfg); });

  auto prof = std::make_shared<ProfileArgs>();
  c = app.add_subcommand("profile", "Build class paths from correctly predicted samples");
  c->add_option("--model", prof->model)->required()->check(CLI::ExistingFile);
  c->add_option("--data", prof->data, "Dataset directory")->required();
  c->add_option("--config", prof->config, "Extraction config")->required()->check(CLI::ExistingFile);
  c->add_option("--merge", prof->merge, "Existing class-path file to extend incrementally");
  c->add_option("--limit", prof->limit, "Use at most this many samples (0: all)");
  c->add_option("-j,--jobs", prof->jobs)->capture_default_str();
  c->add_option("-o,--out", prof->out, "Class-path file")->required();
  c->callback([prof] { cmd_profile(*prof); });

  auto fit = std::make_shared<FitArgs>();
  c = app.add_subcommand("fit-detector", "Train the random-forest detector on labeled similarity features");
  c->add_option("--model", fit->model)->required()->check(CLI::ExistingFile);
  c->add_option("--config", fit->config)->required()->check(CLI::ExistingFile);
  c->add_option("--class-paths", fit->class_paths)->required()->check(CLI::ExistingFile);
  add_set_options(c, fit->set);
  c->add_option("--features", fit->features, "overall or per-layer")->capture_default_str();
  c->add_option("--trees", fit->trees)->capture_default_str();
  c->add_option("--depth", fit->depth)->capture_default_str();
  c->add_option("--seed", fit->seed)->capture_default_str();
  c->add_option("-j,--jobs", fit->jobs)->capture_default_str();
  c->add_option("-o,--out", fit->out, "Forest file")->required();
  c->callback([fit] { cmd_fit(*fit); });

  auto det = std::make_shared<DetectArgs>();
  c = app.add_subcommand("detect", "Classify inputs and report per-input verdicts and AUC");
  c->add_option("--model", det->model)->required()->check(CLI::ExistingFile);
  c->add_option("--config", det->config)->required()->check(CLI::ExistingFile);
  c->add_option("--class-paths", det->class_paths)->required()->check(CLI::ExistingFile);
  c->add_option("--forest", det->forest)->required()->check(CLI::ExistingFile);
  add_set_options(c, det->set);
  c->add_option("--features", det->features, "overall or per-layer")->capture_default_str();
  c->add_option("--threshold", det->threshold, "Score above which an input is flagged")->capture_default_str();
  c->add_option("-j,--jobs", det->jobs)->capture_default_str();
  c->add_option("--report", det->report, "JSON report path");
  c->callback([det] { cmd_detect(*det); });
}

}  // namespace cli
