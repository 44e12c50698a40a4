#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <boost/dynamic_bitset.hpp>

#include "canary/network.hpp"

namespace canary {

using Bits = boost::dynamic_bitset<std::uint64_t>;

/// Per weighted layer, one bit per element of that layer's input feature map.
/// Every weighted layer is always present; layers that were not extracted hold
/// all-zero masks, so coverage never depends on the extraction config.
struct ActivationPath {
  std::vector<std::size_t> layers;  // network-layer indices, ascending
  std::vector<Bits> masks;

  static ActivationPath empty_for(const Network& net);
  std::size_t popcount() const;
  std::size_t capacity() const;
  bool operator==(const ActivationPath&) const = default;
};

/// Bitwise OR. Coverage or length mismatch raises a shape error.
ActivationPath path_or(const ActivationPath& a, const ActivationPath& b);
void path_or_into(ActivationPath& acc, const ActivationPath& b);
void require_same_coverage(const ActivationPath& a, const ActivationPath& b);

enum class Direction { Backward, Forward };
enum class ThresholdKind { Cumulative, Absolute };

/// Selection rule of one weighted layer. `emit == false` is a skipped layer:
/// under backward extraction it still propagates importance with its rule but
/// contributes no path bits.
struct LayerRule {
  ThresholdKind kind = ThresholdKind::Cumulative;
  float value = 0.5f;
  bool emit = true;
  bool operator==(const LayerRule&) const = default;
};

struct ExtractionConfig {
  std::string name = "custom";
  Direction direction = Direction::Backward;
  std::vector<LayerRule> rules;  // one per weighted layer
  /// First weighted layer that is extracted: the early-termination layer for
  /// backward extraction, the late-start layer for forward extraction.
  std::size_t first = 0;

  void validate(std::size_t weighted_count) const;
  bool uses_cumulative() const;
  bool uses_absolute() const;
  /// Canonical text form; parse(serialize(c)) == c.
  std::string serialize() const;
  static ExtractionConfig parse(const std::string& text);
  bool operator==(const ExtractionConfig&) const = default;
};

ExtractionConfig load_config(const std::string& path);
void save_config(const ExtractionConfig& c, const std::string& path);

/// Named variants: BwCu (cumulative theta everywhere), BwAb (absolute phi
/// everywhere), FwAb (forward, absolute phi) and Hybrid (absolute phi on the
/// first half of the weighted layers, cumulative theta on the rest).
ExtractionConfig make_variant(const std::string& name, std::size_t weighted_count, float theta = 0.5f,
                              float phi = 0.1f);

/// Cumulative selection over one record: psums ranked by signed value
/// descending (lower input offset first on ties), the shortest prefix whose
/// running sum reaches theta * target. If no prefix reaches it, the shortest
/// prefix attaining the maximum running sum. Empty when target <= 0.
/// Returns input offsets sorted ascending.
std::vector<std::uint32_t> select_cumulative(const std::vector<PartialSum>& psums, float theta, float target);

/// The ranking used by select_cumulative and the sort instruction.
bool psum_ranks_before(const PartialSum& a, const PartialSum& b);

/// Running-sum prefix length over an already ranked sequence.
std::size_t cumulative_prefix(const std::vector<PartialSum>& ranked, float need);

/// Absolute selection: offsets whose psum is strictly greater than phi.
std::vector<std::uint32_t> select_absolute(const std::vector<PartialSum>& psums, float phi);

struct ExtractionStats {
  std::vector<std::size_t> important_outputs;  // per weighted layer, number of seeded output neurons
  std::vector<std::size_t> selected_inputs;    // per weighted layer, popcount before the emit filter
  std::size_t psums_consumed = 0;              // psum entries read by cumulative layers
  std::size_t psums_stored = 0;                // psum entries a full spill of cumulative layers writes
};

ActivationPath extract_path_backward(const Network& net, const Inference& inf, const ExtractionConfig& cfg,
                                     ExtractionStats* stats = nullptr);

/// Mask for one weighted layer under forward extraction: input elements
/// strictly above the layer's phi. Needs activations up to that layer only.
Bits extract_forward_layer(const Network& net, const Inference& inf, const ExtractionConfig& cfg, std::size_t w);

/// Forward extraction. `inf` may hold a truncated activation list; layers
/// whose input is not yet available are left empty.
ActivationPath extract_path_forward(const Network& net, const Inference& inf, const ExtractionConfig& cfg);

/// Dispatches on the config direction.
ActivationPath extract_path(const Network& net, const Inference& inf, const ExtractionConfig& cfg,
                            ExtractionStats* stats = nullptr);

}  // namespace canary
