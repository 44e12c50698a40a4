#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "canary/compiler.hpp"
#include "canary/detector.hpp"
#include "canary/profiler.hpp"

namespace canary {

/// Energy table keys, in report order.
inline constexpr std::array<const char*, 10> kEnergyKeys{
    "mac", "compare", "sram_access", "dram_byte", "sort_stage", "merge_step", "mask_op", "dispatch", "controller_op",
    "sort_static"};

struct SimConfig {
  std::size_t pe_rows = 20, pe_cols = 20;
  double clock_mhz = 250.0;
  std::size_t acc_sram_kb = 1536, acc_sram_bank_kb = 64;
  std::size_t ext_sram_kb = 32, ext_sram_bank_kb = 2;
  std::size_t pc_sram_kb = 64;
  std::size_t sort_units = 2;
  std::size_t sort_width = 16;
  std::size_t merge_way = 16;
  double dram_bytes_per_cycle = 8.0;
  /// Sort latency overlaps the record fetch: max(block phase, memory) + merge.
  bool sort_memory_bound = true;
  std::size_t dispatch_cycles = 20;
  std::size_t cls_ops = 2000;
  std::size_t mask_width = 16;  // mask-generator elements per cycle
  std::uint64_t max_steps = 50'000'000;
  /// Picojoules per event. Order-of-magnitude placeholders, not calibrated.
  std::map<std::string, double> energy{
      {"mac", 1.0},          {"compare", 0.1},      {"sram_access", 5.0}, {"dram_byte", 40.0},
      {"sort_stage", 0.8},   {"merge_step", 0.1},   {"mask_op", 0.05},    {"dispatch", 10.0},
      {"controller_op", 0.5}, {"sort_static", 0.05}};

  void validate() const;
  bool operator==(const SimConfig&) const = default;
};

/// Flat `key = value` text; unknown keys and bad values are config errors.
/// Keys not mentioned keep their defaults; energy entries are `energy.<name>`.
SimConfig parse_simconfig(const std::string& text);
SimConfig load_simconfig(const std::string& path);
std::string format_simconfig(const SimConfig& c);

/// Event counts an execution accumulates; energy is linear in them.
struct EventCounts {
  std::map<std::string, double> count;  // by energy key
  EventCounts& operator+=(const EventCounts& o);
};

struct EnergyBreakdown {
  std::map<std::string, double> component;  // pe, sram, dram, sort, path, controller
  double total = 0.0;
};

/// energy = sum of count * energy-per-event. A key without an energy entry is a config error.
EnergyBreakdown energy_account(const EventCounts& events, const SimConfig& cfg);

/// Cycles of one sort instruction over `length` entries.
struct SortCost {
  std::size_t blocks = 0;
  std::size_t block_cycles = 0;
  std::size_t merge_cycles = 0;
  std::size_t memory_cycles = 0;
  std::size_t total = 0;
  std::size_t stages = 0;       // compare-exchange stages over all blocks
  std::size_t merge_steps = 0;  // element moves through the merge tree
};
SortCost sort_unit_model(std::size_t length, const SimConfig& cfg, std::size_t dram_bytes = 0);

struct TraceEntry {
  std::size_t pc = 0;
  isa::Opcode op = isa::Opcode::Halt;
  std::uint64_t issue = 0;  // cycle the instruction starts executing
  std::uint64_t end = 0;
};

struct SimReport {
  std::uint64_t cycles = 0;
  std::uint64_t baseline_cycles = 0;
  double latency_overhead = 1.0;
  EnergyBreakdown energy;
  double baseline_energy = 0.0;
  double energy_overhead = 1.0;
  EventCounts events;

  double dram_bytes = 0.0;
  double psum_dram_bytes = 0.0;
  double mask_dram_bytes = 0.0;
  std::uint64_t psum_entries_stored = 0;    // spilled by infsp
  std::uint64_t psum_entries_loaded = 0;    // fetched from DRAM by sort
  std::uint64_t psum_entries_consumed = 0;  // read by sort, any source
  std::uint64_t psum_entries_full = 0;      // a full spill of every extracted cumulative layer
  std::map<std::string, std::uint64_t> stalls;  // raw, war, waw, unit
  std::uint64_t instructions = 0;
  std::vector<std::uint64_t> opcode_counts = std::vector<std::uint64_t>(16, 0);
  std::uint64_t inference_cycles = 0;   // busy cycles of inf / infsp
  std::uint64_t extraction_cycles = 0;  // dispatch + busy cycles of extraction instructions

  ActivationPath path;
  std::optional<std::size_t> predicted;
  std::optional<DetectionVerdict> verdict;
  bool unprofiled = false;
  std::vector<TraceEntry> trace;

  double consumed_fraction() const {
    return psum_entries_full ? static_cast<double>(psum_entries_consumed) / static_cast<double>(psum_entries_full) : 0.0;
  }
  double sort_energy_share() const;
};

/// Detector state loaded into the CP region; without it cls yields no verdict.
struct DetectorImage {
  const ClassPathStore* class_paths = nullptr;
  const RandomForest* forest = nullptr;
  FeatureMode mode = FeatureMode::Overall;
  double threshold = 0.5;
};

struct RunOptions {
  bool trace = false;
  bool baseline = true;  // also simulate the inference-only program for the overhead ratios
};

/// Executes a program. The config fills the CFG region and must be the one the
/// program was compiled from (an inference-only program ignores it).
SimReport run(const isa::Program& program, const Network& net, const Tensor& input, const ExtractionConfig& cfg,
              const SimConfig& sim, const DetectorImage& det = {}, const RunOptions& opt = {});
SimReport run(const CompiledProgram& program, const Network& net, const Tensor& input, const SimConfig& sim,
              const DetectorImage& det = {}, const RunOptions& opt = {});

/// Sums counters over several runs; ratios are recomputed from the sums.
SimReport aggregate(const std::vector<SimReport>& reports);

std::string report_json(const SimReport& r, const SimConfig& cfg);

enum class SweepParam { Theta, Phi, Termination, Start, MergeWay, SortUnits, PeDims };
SweepParam sweep_param_from_string(const std::string& s);
std::string to_string(SweepParam p);

struct SweepSetup {
  const Network* net = nullptr;
  std::vector<Tensor> inputs;
  ExtractionConfig config;
  CompileOptions options;
  SimConfig sim;
  std::size_t jobs = 1;
};

/// One aggregated report per value over the same inputs. Theta and phi
/// replace the value of every cumulative / absolute rule; termination and
/// start set the first extracted layer.
std::vector<SimReport> sweep(SweepParam p, const std::vector<double>& values, const SweepSetup& setup);

}  // namespace canary
