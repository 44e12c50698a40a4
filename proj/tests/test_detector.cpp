#include <doctest.h>

#include <filesystem>
#include <random>

#include "canary/detector.hpp"
#include "canary/error.hpp"

using namespace canary;

namespace {

ActivationPath one_layer(const std::string& s) {
  Bits b(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) b[i] = s[i] == '1';
  return {{0}, {b}};
}

double pairwise_auc(const std::vector<double>& s, const std::vector<bool>& y) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (!y[i] || y[j]) continue;
      den += 1.0;
      num += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
    }
  return num / den;
}

TreeNode leaf(float p) { return {true, 0, 0.0f, p, 0}; }

}  // namespace

TEST_CASE("similarity") {
  auto p = one_layer("1100");
  CHECK(similarity(p, p).overall == 1.0);
  CHECK(similarity(one_layer("1100"), one_layer("0011")).overall == 0.0);
  auto r = similarity(one_layer("1100"), one_layer("1010"));
  CHECK(r.overall == 0.5);
  CHECK(r.path_bits == 2);
  CHECK(r.class_bits == 2);
  CHECK(r.shared_bits == 1);
  auto e = similarity(one_layer("0000"), one_layer("1010"));
  CHECK(e.empty_path);
  CHECK(e.overall == 1.0);
  CHECK_THROWS_AS(similarity(one_layer("10"), one_layer("100")), Error);

  // Consistent neuron permutation leaves S unchanged.
  std::mt19937_64 rng(1);
  for (int t = 0; t < 50; ++t) {
    std::string a(32, '0'), b(32, '0');
    for (auto& c : a) c = rng() % 3 == 0 ? '1' : '0';
    for (auto& c : b) c = rng() % 2 ? '1' : '0';
    std::vector<std::size_t> perm(32);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::string pa(32, '0'), pb(32, '0');
    for (std::size_t i = 0; i < 32; ++i) pa[perm[i]] = a[i], pb[perm[i]] = b[i];
    CHECK(similarity(one_layer(a), one_layer(b)).overall == similarity(one_layer(pa), one_layer(pb)).overall);
  }
}

TEST_CASE("forest on separable data and determinism") {
  std::vector<std::vector<float>> x;
  std::vector<bool> y;
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> u(0.0f, 0.3f);
  for (int i = 0; i < 40; ++i) {
    bool adv = i % 2;
    x.push_back({adv ? u(rng) : 1.0f - u(rng)});
    y.push_back(adv);
  }
  ForestOptions opt;
  opt.trees = 20;
  RandomForest f = train_forest(x, y, opt);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK((f.predict(x[i]) > 0.5) == y[i]);
  CHECK(f == train_forest(x, y, opt));
  opt.jobs = 4;
  CHECK(f == train_forest(x, y, opt));
  CHECK_THROWS_AS(train_forest(x, std::vector<bool>(x.size(), false), opt), Error);

  auto path = std::filesystem::temp_directory_path() / "canary_forest.ptrf";
  save_forest(f, path);
  CHECK(load_forest(path) == f);
  std::filesystem::remove(path);
}

TEST_CASE("single stump matches the best-Gini threshold") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (int t = 0; t < 30; ++t) {
    std::vector<std::vector<float>> x;
    std::vector<bool> y;
    for (int i = 0; i < 25; ++i) {
      float v = u(rng);
      x.push_back({v});
      y.push_back(u(rng) < v);
    }
    if (std::count(y.begin(), y.end(), true) < 2 || std::count(y.begin(), y.end(), false) < 2) continue;
    ForestOptions opt;
    opt.trees = 1;
    opt.max_depth = 1;
    opt.bootstrap = false;
    RandomForest f = train_forest(x, y, opt);

    // Exhaustive search over every candidate cut between sorted values.
    std::vector<float> vals;
    for (auto& r : x) vals.push_back(r[0]);
    std::sort(vals.begin(), vals.end());
    double best = 2.0;
    float best_cut = 0.0f;
    for (std::size_t k = 1; k < vals.size(); ++k) {
      float cut = vals[k - 1];
      double nl = 0, pl = 0, nr = 0, pr = 0;
      for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i][0] <= cut) nl++, pl += y[i];
        else nr++, pr += y[i];
      }
      auto g = [](double p, double n) { return n ? 2 * (p / n) * (1 - p / n) : 0.0; };
      double w = (nl * g(pl, nl) + nr * g(pr, nr)) / (nl + nr);
      if (w < best - 1e-12) best = w, best_cut = cut;
    }
    const auto& root = f.trees[0][0];
    REQUIRE(!root.leaf);
    auto above = std::upper_bound(vals.begin(), vals.end(), best_cut);
    CHECK(root.threshold >= best_cut);
    CHECK(root.threshold < *above);
  }
}

TEST_CASE("classify averages trees") {
  RandomForest all;
  all.trees = {{leaf(1.0f)}, {leaf(1.0f)}};
  SimilarityReport r;
  r.overall = 0.3;
  r.path_bits = 4;
  CHECK(classify(all, r).score == 1.0);
  CHECK(classify(all, r).adversarial);

  RandomForest opposite;
  opposite.trees = {{{false, 0, 0.5f, 0.0f, 2}, leaf(1.0f), leaf(0.0f)},
                    {{false, 0, 0.5f, 0.0f, 2}, leaf(0.0f), leaf(1.0f)}};
  CHECK(classify(opposite, r).score == 0.5);
  CHECK(!classify(opposite, r).adversarial);

  std::vector<float> x{0.7f, 0.1f};
  RandomForest two;
  two.feature_count = 2;
  two.trees = {{{false, 1, 0.5f, 0.0f, 2}, leaf(0.25f), leaf(0.0f)}, {{false, 0, 0.5f, 0.0f, 2}, leaf(1.0f), leaf(0.5f)}};
  std::size_t cmp = 0;
  CHECK(two.predict(x, &cmp) == doctest::Approx((two.tree_predict(0, x) + two.tree_predict(1, x)) / 2));
  CHECK(cmp == 2);
  CHECK_THROWS_AS(two.predict({0.1f}), Error);

  SimilarityReport empty;
  empty.empty_path = true;
  CHECK(!classify(all, empty).adversarial);
}

TEST_CASE("auc") {
  CHECK(auc({0.1, 0.2, 0.8, 0.9}, {false, false, true, true}) == 1.0);
  CHECK(auc({0.5, 0.5, 0.5}, {true, false, true}) == 0.5);
  CHECK_THROWS_AS(auc({0.1, 0.2}, {true, true}), Error);
  std::mt19937_64 rng(5);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> s(30);
    std::vector<bool> y(30);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = static_cast<double>(rng() % 8) / 8.0, y[i] = i % 3 == 0;
    CHECK(auc(s, y) == pairwise_auc(s, y));
  }
}
