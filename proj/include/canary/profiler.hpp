#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <vector>

#include "canary/model_io.hpp"
#include "canary/path.hpp"

namespace canary {

struct ClassPath {
  ActivationPath path;
  std::size_t samples = 0;
  bool operator==(const ClassPath&) const = default;
};

/// Class paths keyed by class id, tied to one (model, config) pair through the
/// fingerprint. Classes never predicted correctly are absent.
struct ClassPathStore {
  std::uint64_t fingerprint = 0;
  std::map<std::size_t, ClassPath> classes;

  const ClassPath* find(std::size_t cls) const;
  bool operator==(const ClassPathStore&) const = default;
};

/// 64-bit FNV-1a over the model digest and the canonical config text.
std::uint64_t fingerprint(const Network& net, const ExtractionConfig& cfg);

/// Raises a config error naming both fingerprints when they differ.
void require_fingerprint(const ClassPathStore& store, const Network& net, const ExtractionConfig& cfg);

ClassPathStore profile(const Network& net, const std::vector<LabeledSample>& data, const ExtractionConfig& cfg,
                       std::size_t jobs = 1);

/// OR-s the paths of correctly predicted new samples into a copy of `store`.
ClassPathStore merge_incremental(const ClassPathStore& store, const Network& net,
                                 const std::vector<LabeledSample>& data, const ExtractionConfig& cfg,
                                 std::size_t jobs = 1);

/// (correct samples of `cls` seen so far, class-path popcount) in dataset order.
std::vector<std::pair<std::size_t, std::size_t>> saturation_curve(const Network& net,
                                                                  const std::vector<LabeledSample>& data,
                                                                  const ExtractionConfig& cfg, std::size_t cls);

struct SimilarityMatrix {
  std::vector<std::size_t> classes;
  /// s[i][j] = |P_i & P_j| / |P_i|, i.e. row class measured against column class.
  std::vector<std::vector<double>> s;
};

SimilarityMatrix interclass_similarity_matrix(const ClassPathStore& store);

/// `PTCP`, u16 version, u32 class count; per class u32 id, u32 sample count,
/// u16 layer count, per layer u32 bit length and packed bits (bit i of byte b
/// is neuron 8b+i); trailing u64 fingerprint. Loading needs the network to
/// restore layer indices and checks every bit length against it.
void save_class_paths(const ClassPathStore& store, const std::filesystem::path& path);
ClassPathStore load_class_paths(const std::filesystem::path& path, const Network& net);

}  // namespace canary
