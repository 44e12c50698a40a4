#include "canary/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <spdlog/spdlog.h>

#include "canary/binio.hpp"
#include "canary/error.hpp"
#include "canary/parallel.hpp"

namespace canary {

SimilarityReport similarity(const ActivationPath& p, const ActivationPath& pc) {
  require_same_coverage(p, pc);
  SimilarityReport r;
  for (std::size_t i = 0; i < p.masks.size(); ++i) {
    std::size_t a = p.masks[i].count(), shared = (p.masks[i] & pc.masks[i]).count();
    r.path_bits += a;
    r.class_bits += pc.masks[i].count();
    r.shared_bits += shared;
    r.per_layer.push_back(a ? static_cast<double>(shared) / static_cast<double>(a) : 1.0);
  }
  r.empty_path = r.path_bits == 0;
  r.overall = r.empty_path ? 1.0 : static_cast<double>(r.shared_bits) / static_cast<double>(r.path_bits);
  return r;
}

std::vector<float> features_of(const SimilarityReport& r, FeatureMode mode) {
  std::vector<float> f{static_cast<float>(r.overall)};
  if (mode == FeatureMode::PerLayer)
    for (double s : r.per_layer) f.push_back(static_cast<float>(s));
  return f;
}

double RandomForest::tree_predict(std::size_t t, const std::vector<float>& x, std::size_t* comparisons) const {
  const auto& nodes = trees.at(t);
  std::size_t i = 0;
  while (!nodes[i].leaf) {
    if (comparisons) ++*comparisons;
    i = x[nodes[i].feature] <= nodes[i].threshold ? i + 1 : nodes[i].right;
  }
  return nodes[i].probability;
}

double RandomForest::predict(const std::vector<float>& x, std::size_t* comparisons) const {
  require(x.size() == feature_count, ErrorKind::Shape,
          "forest expects " + std::to_string(feature_count) + " features, got " + std::to_string(x.size()));
  require(!trees.empty(), ErrorKind::Config, "forest has no trees");
  double sum = 0.0;
  for (std::size_t t = 0; t < trees.size(); ++t) sum += tree_predict(t, x, comparisons);
  return sum / static_cast<double>(trees.size());
}

std::size_t RandomForest::max_depth() const {
  std::size_t deepest = 0;
  for (const auto& nodes : trees) {
    std::vector<std::size_t> depth(nodes.size(), 0);
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      deepest = std::max(deepest, depth[i]);
      if (!nodes[i].leaf) depth[i + 1] = depth[nodes[i].right] = depth[i] + 1;
    }
  }
  return deepest;
}

bool RandomForest::operator==(const RandomForest& o) const {
  if (feature_count != o.feature_count || trees.size() != o.trees.size()) return false;
  for (std::size_t t = 0; t < trees.size(); ++t) {
    if (trees[t].size() != o.trees[t].size()) return false;
    for (std::size_t i = 0; i < trees[t].size(); ++i) {
      const auto &a = trees[t][i], &b = o.trees[t][i];
      if (a.leaf != b.leaf || a.feature != b.feature || a.threshold != b.threshold ||
          a.probability != b.probability || a.right != b.right)
        return false;
    }
  }
  return true;
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double gini(std::size_t pos, std::size_t n) {
  if (n == 0) return 0.0;
  double p = static_cast<double>(pos) / static_cast<double>(n);
  return 2.0 * p * (1.0 - p);
}

class TreeBuilder {
 public:
  TreeBuilder(const std::vector<std::vector<float>>& x, const std::vector<bool>& y, const ForestOptions& opt,
              std::size_t mtry, std::uint64_t seed)
      : x_(x), y_(y), opt_(opt), mtry_(mtry), rng_(seed) {}

  std::vector<TreeNode> build(std::vector<std::size_t> idx) {
    grow(idx, 0);
    return std::move(nodes_);
  }

 private:
  void grow(std::vector<std::size_t>& idx, std::size_t depth) {
    const std::size_t n = idx.size();
    std::size_t pos = 0;
    for (auto i : idx) pos += y_[i];
    const std::size_t self = nodes_.size();
    nodes_.push_back({true, 0, 0.0f, static_cast<float>(pos) / static_cast<float>(n), 0});
    if (depth >= opt_.max_depth || n < opt_.min_split || pos == 0 || pos == n) return;

    std::vector<std::uint16_t> feats(x_[0].size());
    std::iota(feats.begin(), feats.end(), 0);
    std::shuffle(feats.begin(), feats.end(), rng_);
    feats.resize(std::min(mtry_, feats.size()));

    double best = gini(pos, n);
    bool found = false;
    std::uint16_t best_f = 0;
    float best_t = 0.0f;
    std::vector<std::size_t> order = idx;
    for (auto f : feats) {
      std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return x_[a][f] != x_[b][f] ? x_[a][f] < x_[b][f] : a < b;
      });
      std::size_t left_pos = 0;
      for (std::size_t k = 1; k < n; ++k) {
        left_pos += y_[order[k - 1]];
        float lo = x_[order[k - 1]][f], hi = x_[order[k]][f];
        if (!(lo < hi)) continue;
        double g = (static_cast<double>(k) * gini(left_pos, k) +
                    static_cast<double>(n - k) * gini(pos - left_pos, n - k)) /
                   static_cast<double>(n);
        if (g < best - 1e-12) {
          best = g;
          found = true;
          best_f = f;
          float mid = lo + (hi - lo) / 2.0f;
          best_t = mid < hi ? mid : lo;
        }
      }
    }
    if (!found) return;

    std::vector<std::size_t> left, right;
    for (auto i : idx) (x_[i][best_f] <= best_t ? left : right).push_back(i);
    nodes_[self].leaf = false;
    nodes_[self].feature = best_f;
    nodes_[self].threshold = best_t;
    grow(left, depth + 1);
    nodes_[self].right = static_cast<std::uint32_t>(nodes_.size());
    grow(right, depth + 1);
  }

  const std::vector<std::vector<float>>& x_;
  const std::vector<bool>& y_;
  const ForestOptions& opt_;
  std::size_t mtry_;
  std::mt19937_64 rng_;
  std::vector<TreeNode> nodes_;
};

}  // namespace

RandomForest train_forest(const std::vector<std::vector<float>>& features, const std::vector<bool>& labels,
                          const ForestOptions& opt) {
  require(!features.empty() && features.size() == labels.size(), ErrorKind::Data,
          "forest training needs one label per feature vector");
  const std::size_t dim = features[0].size();
  require(dim > 0 && dim < 65536, ErrorKind::Shape, "bad feature dimension");
  for (const auto& f : features) require(f.size() == dim, ErrorKind::Shape, "ragged feature vectors");
  std::size_t pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), true));
  require(pos >= 2 && labels.size() - pos >= 2, ErrorKind::Data,
          "degenerate forest: training data needs at least two samples of each label");
  require(opt.trees > 0, ErrorKind::Config, "tree count must be positive");

  std::size_t mtry = opt.features_per_split
                         ? opt.features_per_split
                         : static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(dim))));
  RandomForest forest;
  forest.feature_count = dim;
  forest.trees.resize(opt.trees);
  parallel_for(opt.trees, opt.jobs, [&](std::size_t t) {
    std::uint64_t seed = splitmix64(opt.seed * 0x100000001b3ULL + t);
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> idx(features.size());
    if (opt.bootstrap) {
      std::uniform_int_distribution<std::size_t> pick(0, features.size() - 1);
      for (auto& i : idx) i = pick(rng);
    } else {
      std::iota(idx.begin(), idx.end(), 0);
    }
    forest.trees[t] = TreeBuilder(features, labels, opt, mtry, rng()).build(std::move(idx));
  });
  return forest;
}

DetectionVerdict classify(const RandomForest& forest, const SimilarityReport& report, FeatureMode mode,
                          double threshold) {
  DetectionVerdict v;
  v.report = report;
  if (report.empty_path) {
    spdlog::warn("empty activation path; classified benign by default");
    return v;
  }
  v.score = forest.predict(features_of(report, mode));
  v.adversarial = v.score > threshold;
  return v;
}

double auc(const std::vector<double>& scores, const std::vector<bool>& labels) {
  require(scores.size() == labels.size(), ErrorKind::Shape, "auc needs one label per score");
  std::size_t pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), true));
  std::size_t neg = labels.size() - pos;
  require(pos > 0 && neg > 0, ErrorKind::Data, "auc is undefined without both labels");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    double avg = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]]) rank_sum += avg;
    i = j;
  }
  double p = static_cast<double>(pos), n = static_cast<double>(neg);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * n);
}

namespace {

constexpr std::uint16_t kForestVersion = 1;

std::uint32_t read_node(binio::Reader& r, std::vector<TreeNode>& nodes, std::size_t feature_count, int depth) {
  require(depth < 4096, ErrorKind::Data, "forest tree too deep");
  auto self = static_cast<std::uint32_t>(nodes.size());
  TreeNode n;
  std::uint8_t kind = r.u8();
  require(kind <= 1, ErrorKind::Data, "bad forest node kind");
  n.leaf = kind == 1;
  n.feature = r.u16();
  n.threshold = r.f32();
  n.probability = r.f32();
  require(n.feature < feature_count, ErrorKind::Data, "forest node feature index out of range");
  require(n.probability >= 0.0f && n.probability <= 1.0f, ErrorKind::Data, "forest leaf probability out of range");
  nodes.push_back(n);
  if (!n.leaf) {
    read_node(r, nodes, feature_count, depth + 1);
    nodes[self].right = static_cast<std::uint32_t>(nodes.size());
    read_node(r, nodes, feature_count, depth + 1);
  }
  return self;
}

}  // namespace

void save_forest(const RandomForest& f, const std::filesystem::path& path) {
  binio::Writer w;
  w.magic("PTRF");
  w.u16(kForestVersion);
  w.u16(static_cast<std::uint16_t>(f.feature_count));
  w.u32(static_cast<std::uint32_t>(f.trees.size()));
  for (const auto& nodes : f.trees)
    for (const auto& n : nodes) {
      w.u8(n.leaf ? 1 : 0);
      w.u16(n.feature);
      w.f32(n.threshold);
      w.f32(n.probability);
    }
  binio::write_file(path, w.data());
}

RandomForest load_forest(const std::filesystem::path& path) {
  binio::Reader r(binio::read_file(path), path.string());
  r.expect_magic("PTRF");
  require(r.u16() == kForestVersion, ErrorKind::Data, path.string() + ": unsupported forest version");
  RandomForest f;
  f.feature_count = r.u16();
  require(f.feature_count > 0, ErrorKind::Data, "forest feature count is zero");
  f.trees.resize(r.u32());
  for (auto& nodes : f.trees) read_node(r, nodes, f.feature_count, 0);
  r.expect_end();
  return f;
}

}  // namespace canary
