#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "canary/path.hpp"

namespace canary {

struct SimilarityReport {
  double overall = 1.0;            // |P & Pc| / |P| over all layers
  std::vector<double> per_layer;   // same ratio per covered layer (1 where P is empty)
  std::size_t path_bits = 0;       // |P|
  std::size_t class_bits = 0;      // |Pc|
  std::size_t shared_bits = 0;     // |P & Pc|
  bool empty_path = false;         // |P| == 0; overall reported as 1
};

SimilarityReport similarity(const ActivationPath& p, const ActivationPath& pc);

enum class FeatureMode { Overall, PerLayer };

/// Overall: {S}. PerLayer: {S, S_0, ..., S_{L-1}} (an extension, off by default).
std::vector<float> features_of(const SimilarityReport& r, FeatureMode mode);

struct TreeNode {
  bool leaf = true;
  std::uint16_t feature = 0;
  float threshold = 0.0f;    // go left when x[feature] <= threshold
  float probability = 0.0f;  // leaf: fraction of adversarial training samples
  std::uint32_t right = 0;   // index of the right child; the left child follows its parent
};

/// Binary decision trees stored in preorder.
struct RandomForest {
  std::size_t feature_count = 1;
  std::vector<std::vector<TreeNode>> trees;

  /// Mean of tree leaf probabilities. Adds the number of threshold
  /// comparisons performed to `comparisons` when non-null.
  double predict(const std::vector<float>& x, std::size_t* comparisons = nullptr) const;
  double tree_predict(std::size_t t, const std::vector<float>& x, std::size_t* comparisons = nullptr) const;
  std::size_t max_depth() const;
  bool operator==(const RandomForest&) const;
};

struct ForestOptions {
  std::size_t trees = 100;
  std::size_t max_depth = 12;
  std::size_t min_split = 2;
  std::size_t features_per_split = 0;  // 0: ceil(sqrt(feature count))
  bool bootstrap = true;
  std::uint64_t seed = 1;
  std::size_t jobs = 1;
};

/// Bootstrap + Gini trees; label true = adversarial. Deterministic in the seed
/// regardless of `jobs`.
RandomForest train_forest(const std::vector<std::vector<float>>& features, const std::vector<bool>& labels,
                          const ForestOptions& opt);

struct DetectionVerdict {
  bool adversarial = false;
  double score = 0.0;
  SimilarityReport report;
};

DetectionVerdict classify(const RandomForest& forest, const SimilarityReport& report,
                          FeatureMode mode = FeatureMode::Overall, double threshold = 0.5);

/// Probability that a random positive outscores a random negative, ties
/// counted as one half, via the rank-sum statistic.
double auc(const std::vector<double>& scores, const std::vector<bool>& labels);

/// `PTRF`, u16 version, u16 feature count, u32 tree count, then per tree the
/// preorder node list (u8 kind, u16 feature, f32 threshold, f32 probability).
void save_forest(const RandomForest& f, const std::filesystem::path& path);
RandomForest load_forest(const std::filesystem::path& path);

}  // namespace canary
