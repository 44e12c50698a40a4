#pragma once

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "canary/detector.hpp"
#include "canary/model_io.hpp"
#include "canary/path.hpp"
#include "canary/profiler.hpp"

#ifndef CANARY_VERSION
#define CANARY_VERSION "0.0.0"
#endif

namespace cli {

namespace fs = std::filesystem;

/// Arguments of the running process, recorded in every run manifest.
struct Invocation {
  std::vector<std::string> argv;
};
const Invocation& invocation();
void set_invocation(int argc, char** argv);

/// Writes `<output>.run.json` (or `<dir>/run.json` for directory outputs)
/// recording the subcommand, resolved inputs, seed, outputs and tool version.
void write_run_manifest(const std::string& subcommand, const std::map<std::string, std::string>& inputs,
                        const std::vector<std::string>& outputs, std::optional<std::uint64_t> seed,
                        const nlohmann::json& parameters = nlohmann::json::object());

/// Sample set loaded from either a dataset directory or an adversarial set.
struct InputSet {
  std::vector<canary::Tensor> inputs;
  std::vector<std::size_t> labels;  // true class for benign, original class for adversarial
  std::vector<bool> adversarial;
  std::vector<std::string> source;
};
void append_dataset(InputSet& s, const std::string& dir, std::size_t limit);
void append_adversarial(InputSet& s, const std::string& dir, std::size_t limit);

/// Detection score of one input: similarity against its predicted class
/// path. Inputs predicted as a class with no class path are flagged with
/// score 1.
struct Scored {
  std::size_t predicted = 0;
  bool unprofiled = false;
  canary::SimilarityReport report;
  std::vector<float> features;
};
std::vector<Scored> score_set(const canary::Network& net, const canary::ExtractionConfig& cfg,
                              const canary::ClassPathStore& store, const InputSet& set, canary::FeatureMode mode,
                              std::size_t jobs);

canary::FeatureMode feature_mode_from_string(const std::string& s);
std::vector<double> parse_values(const std::string& csv);
void write_json(const std::string& path, const nlohmann::json& j);

void add_data_commands(CLI::App& app);
void add_detect_commands(CLI::App& app);
void add_hardware_commands(CLI::App& app);

}  // namespace cli
