#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "canary/isa.hpp"
#include "canary/network.hpp"
#include "canary/path.hpp"

namespace canary {

/// Address families of the simulated machine. Each family occupies 256 MB of
/// the 32-bit space; per-layer families place layer l at family + l * stride.
enum class Region : std::uint8_t {
  Input = 1,       // IN_l: input feature map of weighted layer l (l == n holds the logits)
  Weights = 2,     // W_l
  Pre = 3,         // PRE_l: pre-activation outputs of weighted layer l, one float per neuron
  Psum = 4,        // PB_l: one psum or mask record per output neuron of layer l
  Sel = 5,         // SEL_l: selected inputs of layer l; descending layout, SEL_n at the family base
  Path = 6,        // AP: the activation path being built
  ClassPaths = 7,  // CP: profiled class paths
  Config = 8,      // CFG: per-layer extraction rules
  Scratch = 9,     // sorted-sequence buffers SCR0 / SCR1
  Null = 10,       // null neuron (value 0) and its empty record
  Pred = 11,       // predicted class
};

std::string to_string(Region r);

struct MemoryMap {
  std::size_t layers = 0;  // weighted layers
  std::uint32_t stride = 0;
  std::vector<std::size_t> in_size;   // per weighted layer
  std::vector<std::size_t> out_size;  // per weighted layer
  std::size_t max_fan_in = 0;

  static MemoryMap for_network(const Network& net);

  std::uint32_t address(Region r, std::size_t layer = 0) const;
  std::uint32_t neuron(std::size_t w, std::size_t o) const;
  std::uint32_t record(std::size_t w, std::size_t o) const;
  std::uint32_t record_stride() const;
  std::uint32_t null_neuron() const { return address(Region::Null); }
  std::uint32_t null_record() const { return address(Region::Null) + 8; }
  /// Two's-complement negative stride: `dec rX, step` advances by one layer.
  std::uint32_t step() const { return ~stride + 1; }

  struct Location {
    Region region;
    std::size_t layer = 0;  // per-layer families; scratch slot for Scratch
    std::uint32_t offset = 0;
  };
  /// Nullopt for addresses outside every modeled region.
  std::optional<Location> locate(std::uint32_t addr) const;

  bool operator==(const MemoryMap&) const = default;
};

struct CompileOptions {
  bool layers = false;     // layer-level pipelining (forward programs)
  bool neurons = false;    // neuron-level software pipelining of cumulative loops
  bool recompute = false;  // recompute psums during extraction instead of spilling them
  bool operator==(const CompileOptions&) const = default;
};

/// none | layers | neurons | recompute | all
CompileOptions parse_opt_level(const std::string& s);

enum class UnitKind { Inference, Extraction, Emit, Classify };
std::string to_string(UnitKind k);

using RegionRef = std::pair<Region, std::size_t>;

/// A logical piece of work with the instruction range that implements it.
/// Units of a rolled loop share the loop's range.
struct ScheduleUnit {
  UnitKind kind = UnitKind::Inference;
  std::size_t layer = 0;
  std::size_t begin = 0, end = 0;  // instruction indices [begin, end)
  std::vector<RegionRef> reads, writes;
  std::vector<std::size_t> deps;  // indices of earlier units this one reads from
};

struct CompiledProgram {
  isa::Program program;
  ExtractionConfig config;
  CompileOptions options;
  MemoryMap map;
  bool inference_only = false;
  std::vector<ScheduleUnit> units;  // in issue order
  std::string assembly;             // source the program was assembled from
};

/// Lowers a config for a network. Backward programs run a rolled inference
/// loop (infsp when cumulative layers need spilled psums), then one rolled
/// findneuron/mul/findrf/sort/acum or findneuron/findrf/genmasks loop per run
/// of layers sharing a rule, emit the path with genmasks and finish with cls.
/// Forward programs are unrolled: per layer an inference block and, for
/// extracted layers, a genmasks threshold block.
CompiledProgram lower(const Network& net, const ExtractionConfig& cfg, CompileOptions opt = {});
/// The same inference blocks as forward programs, with no extraction.
CompiledProgram lower_inference_only(const Network& net);

/// Each pass re-lowers with its option enabled; inapplicable programs come
/// back unchanged (layer pipelining of a backward program logs a warning).
CompiledProgram pipeline_layers(const CompiledProgram& p);
CompiledProgram pipeline_neurons(const CompiledProgram& p);
CompiledProgram recompute_transform(const CompiledProgram& p);
/// lower followed by every requested pass that applies.
CompiledProgram compile(const Network& net, const ExtractionConfig& cfg, const CompileOptions& opt);

/// Static dependency soundness: every unit's reads are produced by an earlier
/// unit (or are preloaded), deps point backwards, and straight-line units
/// appear in program order. Returns one message per violation.
std::vector<std::string> check_dependencies(const CompiledProgram& p);

/// Instruction count by opcode.
std::vector<std::size_t> census(const isa::Program& p);

}  // namespace canary
