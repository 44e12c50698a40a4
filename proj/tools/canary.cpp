#include <string>

#include <spdlog/spdlog.h>

#include "canary/attacks.hpp"
#include "canary/binio.hpp"
#include "canary/error.hpp"
#include "canary/parallel.hpp"
#include "cli.hpp"

namespace cli {

namespace {
Invocation g_invocation;
}

const Invocation& invocation() { return g_invocation; }

void set_invocation(int argc, char** argv) { g_invocation.argv.assign(argv, argv + argc); }

void write_run_manifest(const std::string& subcommand, const std::map<std::string, std::string>& inputs,
                        const std::vector<std::string>& outputs, std::optional<std::uint64_t> seed,
                        const nlohmann::json& parameters) {
  if (outputs.empty()) return;
  nlohmann::json resolved = nlohmann::json::object();
  for (const auto& [k, v] : inputs)
    if (!v.empty()) resolved[k] = fs::absolute(v).lexically_normal().string();
  nlohmann::json outs = nlohmann::json::array();
  for (const auto& o : outputs) outs.push_back(fs::absolute(o).lexically_normal().string());
  nlohmann::json j{{"subcommand", subcommand},
                   {"inputs", resolved},
                   {"seed", seed ? nlohmann::json(*seed) : nlohmann::json(nullptr)},
                   {"outputs", outs},
                   {"parameters", parameters},
                   {"args", invocation().argv},
                   {"tool_version", CANARY_VERSION}};
  fs::path first = outputs.front();
  fs::path where = fs::is_directory(first) ? first / "run.json" : fs::path(first.string() + ".run.json");
  write_json(where.string(), j);
}

void append_dataset(InputSet& s, const std::string& dir, std::size_t limit) {
  auto data = canary::load_dataset(dir);
  if (limit && data.size() > limit) data.resize(limit);
  for (auto& d : data) {
    s.inputs.push_back(std::move(d.input));
    s.labels.push_back(d.label);
    s.adversarial.push_back(false);
    s.source.push_back(dir);
  }
}

void append_adversarial(InputSet& s, const std::string& dir, std::size_t limit) {
  auto recs = canary::load_adversarial_set(dir);
  if (limit && recs.size() > limit) recs.resize(limit);
  for (auto& r : recs) {
    s.inputs.push_back(std::move(r.input));
    s.labels.push_back(r.original_class);
    s.adversarial.push_back(true);
    s.source.push_back(dir);
  }
}

std::vector<Scored> score_set(const canary::Network& net, const canary::ExtractionConfig& cfg,
                              const canary::ClassPathStore& store, const InputSet& set, canary::FeatureMode mode,
                              std::size_t jobs) {
  std::vector<Scored> out(set.inputs.size());
  canary::parallel_for(out.size(), jobs, [&](std::size_t i) {
    canary::Inference inf = canary::infer(net, set.inputs[i]);
    Scored& s = out[i];
    s.predicted = inf.predicted;
    const canary::ClassPath* cp = store.find(inf.predicted);
    if (!cp) {
      s.unprofiled = true;
      return;
    }
    s.report = canary::similarity(canary::extract_path(net, inf, cfg), cp->path);
    s.features = canary::features_of(s.report, mode);
  });
  return out;
}

canary::FeatureMode feature_mode_from_string(const std::string& s) {
  if (s == "overall") return canary::FeatureMode::Overall;
  if (s == "per-layer") return canary::FeatureMode::PerLayer;
  canary::fail(canary::ErrorKind::Config, "unknown feature mode '" + s + "' (expected overall or per-layer)");
}

std::vector<double> parse_values(const std::string& csv) {
  std::vector<double> v;
  std::size_t pos = 0;
  while (pos <= csv.size()) {
    std::size_t comma = csv.find(',', pos);
    std::string item = csv.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    try {
      std::size_t used = 0;
      v.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      canary::fail(canary::ErrorKind::Config, "bad value '" + item + "' in list '" + csv + "'");
    }
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return v;
}

void write_json(const std::string& path, const nlohmann::json& j) { canary::binio::write_text(path, j.dump(2) + "\n"); }

}  // namespace cli

namespace {

int exit_code(canary::ErrorKind k) {
  switch (k) {
    case canary::ErrorKind::Config:
    case canary::ErrorKind::Syntax: return 2;
    case canary::ErrorKind::Data:
    case canary::ErrorKind::Shape:
    case canary::ErrorKind::Bounds:
    case canary::ErrorKind::Fault: return 3;
    case canary::ErrorKind::Internal: return 4;
  }
  return 4;
}

}  // namespace

int main(int argc, char** argv) {
  cli::set_invocation(argc, argv);
  CLI::App app{"canary: activation-path adversarial input detection and accelerator model"};
  app.set_version_flag("--version", CANARY_VERSION);
  app.require_subcommand(1);
  bool verbose = false, quiet = false;
  app.add_flag("-v,--verbose", verbose, "Debug logging");
  app.add_flag("-q,--quiet", quiet, "Errors only");
  for (int i = 1; i < argc; ++i) {
    std::string a = argv[i];
    if (a == "-v" || a == "--verbose") spdlog::set_level(spdlog::level::debug);
    if (a == "-q" || a == "--quiet") spdlog::set_level(spdlog::level::err);
  }
  spdlog::set_pattern("%^[%l]%$ %v");
  cli::add_data_commands(app);
  cli::add_detect_commands(app);
  cli::add_hardware_commands(app);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  } catch (const canary::Error& e) {
    spdlog::error("{}", e.what());
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    spdlog::error("internal: {}", e.what());
    return 4;
  }
  return 0;
}
