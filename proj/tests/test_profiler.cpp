#include <doctest.h>

#include <filesystem>

#include "canary/detector.hpp"
#include "canary/error.hpp"
#include "canary/profiler.hpp"
#include "support.hpp"

using namespace canary;
using testing_support::random_mlp;
using testing_support::random_tensor;

namespace {

std::vector<LabeledSample> random_samples(const Network& net, std::mt19937_64& rng, std::size_t n,
                                          bool use_predicted = true) {
  std::vector<LabeledSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor x = random_tensor(net.input_shape(), rng);
    std::size_t label = use_predicted ? infer(net, x).predicted : rng() % net.class_count();
    out.push_back({x, label});
  }
  return out;
}

}  // namespace

TEST_CASE("profile: singleton, misclassified, OR oracle") {
  std::mt19937_64 rng(31);
  Network net = random_mlp(rng, 3, 12, 3);
  ExtractionConfig cfg = make_variant("BwCu", 3, 0.6f);
  auto one = random_samples(net, rng, 1);
  auto store = profile(net, one, cfg);
  REQUIRE(store.classes.size() == 1);
  CHECK(store.find(one[0].label)->path == extract_path(net, infer(net, one[0].input), cfg));
  CHECK(store.find(one[0].label)->samples == 1);

  auto wrong = one;
  wrong[0].label = (one[0].label + 1) % 3;
  CHECK(profile(net, wrong, cfg).classes.empty());

  auto data = random_samples(net, rng, 40, false);
  auto st = profile(net, data, cfg, 3);
  std::map<std::size_t, ActivationPath> expect;
  for (const auto& s : data) {
    Inference inf = infer(net, s.input);
    if (inf.predicted != s.label) continue;
    auto p = extract_path(net, inf, cfg);
    if (!expect.count(s.label)) expect.emplace(s.label, p);
    else expect[s.label] = path_or(expect[s.label], p);
    CHECK(st.find(s.label)->path.popcount() >= p.popcount());
  }
  REQUIRE(expect.size() == st.classes.size());
  for (auto& [c, p] : expect) CHECK(st.find(c)->path == p);

  auto shuffled = data;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  CHECK(profile(net, shuffled, cfg) == st);
  CHECK(profile(net, {}, cfg).classes.empty());
}

TEST_CASE("merge_incremental equals profiling from scratch") {
  std::mt19937_64 rng(8);
  Network net = random_mlp(rng, 2, 10, 3);
  ExtractionConfig cfg = make_variant("BwAb", 2, 0.5f, 0.02f);
  for (int t = 0; t < 10; ++t) {
    auto data = random_samples(net, rng, 30);
    std::size_t cut = rng() % data.size();
    std::vector<LabeledSample> a(data.begin(), data.begin() + cut), b(data.begin() + cut, data.end());
    CHECK(merge_incremental(profile(net, a, cfg), net, b, cfg) == profile(net, data, cfg));
  }
  auto data = random_samples(net, rng, 10);
  auto st = profile(net, data, cfg);
  CHECK(merge_incremental(st, net, {}, cfg) == st);
  auto twice = merge_incremental(st, net, data, cfg);
  for (auto& [c, cp] : twice.classes) CHECK(cp.samples == 2 * st.find(c)->samples);
  CHECK_THROWS_AS(merge_incremental(st, net, data, make_variant("BwAb", 2, 0.5f, 0.03f)), Error);
}

TEST_CASE("class path file round trip and similarity matrix") {
  std::mt19937_64 rng(4);
  Network net = random_mlp(rng, 3, 12, 3);
  ExtractionConfig cfg = make_variant("BwCu", 3, 0.5f);
  auto st = profile(net, random_samples(net, rng, 30), cfg);
  auto file = std::filesystem::temp_directory_path() / "canary_cp.ptcp";
  save_class_paths(st, file);
  CHECK(load_class_paths(file, net) == st);
  Network other = random_mlp(rng, 2, 12, 3);
  CHECK_THROWS_AS(load_class_paths(file, other), Error);
  std::filesystem::remove(file);

  ClassPathStore manual;
  Bits a(4), b(4);
  a.set(0), a.set(1), b.set(2);
  manual.classes[0].path = {{0}, {a}};
  manual.classes[1].path = {{0}, {a}};
  manual.classes[2].path = {{0}, {b}};
  auto m = interclass_similarity_matrix(manual);
  CHECK(m.s[0][0] == 1.0);
  CHECK(m.s[0][1] == 1.0);
  CHECK(m.s[0][2] == 0.0);
  CHECK(m.s[2][0] == 0.0);
}

TEST_CASE("saturation curve is non-decreasing") {
  std::mt19937_64 rng(6);
  Network net = random_mlp(rng, 3, 16, 2);
  auto data = random_samples(net, rng, 60);
  auto curve = saturation_curve(net, data, make_variant("BwCu", 3, 0.5f), data[0].label);
  REQUIRE(curve.size() >= 2);
  for (std::size_t i = 1; i < curve.size(); ++i) CHECK(curve[i].second >= curve[i - 1].second);
}
