#include <doctest.h>

#include "canary/error.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace canary;
using testing_support::random_convnet;
using testing_support::random_mlp;
using testing_support::random_tensor;

namespace {

std::vector<PartialSum> ps(std::vector<float> v) {
  std::vector<PartialSum> out;
  for (std::size_t i = 0; i < v.size(); ++i) out.push_back({static_cast<std::uint32_t>(i), v[i]});
  return out;
}

Bits bits(const std::string& s) {
  Bits b(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) b[i] = s[i] == '1';
  return b;
}

}  // namespace

TEST_CASE("cumulative selection") {
  CHECK(select_cumulative(ps({0.05f, 0.06f, 0.05f, 0.20f, 0.10f}), 0.6f, 0.46f) == std::vector<std::uint32_t>{3, 4});
  CHECK(select_cumulative(ps({0.7f}), 0.3f, 0.7f) == std::vector<std::uint32_t>{0});
  CHECK(select_cumulative(ps({0.7f}), 1.0f, 0.7f) == std::vector<std::uint32_t>{0});
  CHECK(select_cumulative(ps({0.5f, 0.2f}), 0.5f, -1.0f).empty());
  CHECK(select_cumulative(ps({0.5f, 0.2f}), 0.5f, 0.0f).empty());
  // Ties resolve toward the lower offset.
  CHECK(select_cumulative(ps({0.3f, 0.3f, 0.3f}), 0.3f, 0.9f) == std::vector<std::uint32_t>{0});
  // Unreachable coverage falls back to all positive psums.
  CHECK(select_cumulative(ps({0.2f, -0.4f, 0.1f, 0.0f}), 1.0f, 5.0f) == std::vector<std::uint32_t>{0, 2});

  std::mt19937_64 rng(21);
  std::uniform_real_distribution<float> u(-0.5f, 1.0f), th(0.05f, 1.0f);
  for (int t = 0; t < 500; ++t) {
    std::vector<float> v(12);
    for (auto& x : v) x = u(rng);
    oracle::Psums op;
    for (std::size_t i = 0; i < v.size(); ++i) op.push_back({static_cast<std::uint32_t>(i), v[i]});
    float target = u(rng) * 2.0f, theta = th(rng);
    CHECK(select_cumulative(ps(v), theta, target) == oracle::cumulative(op, theta, target));
  }
}

TEST_CASE("cumulative minimality and theta monotonicity") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<float> u(-0.2f, 1.0f), th(0.01f, 1.0f);
  for (int t = 0; t < 300; ++t) {
    std::vector<float> v(10);
    float total = 0.0f;
    for (auto& x : v) total += (x = u(rng));
    float target = total * 0.9f;
    float a = th(rng), b = th(rng);
    if (a > b) std::swap(a, b);
    auto sa = select_cumulative(ps(v), a, target), sb = select_cumulative(ps(v), b, target);
    CHECK(std::includes(sb.begin(), sb.end(), sa.begin(), sa.end()));
    if (!sb.empty() && target > 0.0f) {
      float sum = 0.0f, smallest = 1e9f;
      for (auto i : sb) sum += v[i], smallest = std::min(smallest, v[i]);
      if (sum >= b * target) CHECK(sum - smallest < b * target);
    }
  }
}

TEST_CASE("absolute selection") {
  CHECK(select_absolute(ps({0.2f, -0.1f, 0.05f}), 0.08f) == std::vector<std::uint32_t>{0});
  CHECK(select_absolute(ps({0.2f, -0.1f, 0.05f}), 0.3f).empty());
  CHECK(select_absolute(ps({0.2f, -0.1f, 0.05f}), -0.2f) == std::vector<std::uint32_t>{0, 1, 2});
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  for (int t = 0; t < 200; ++t) {
    std::vector<float> v(9);
    for (auto& x : v) x = u(rng);
    float a = u(rng), b = u(rng);
    if (a < b) std::swap(a, b);
    auto hi = select_absolute(ps(v), a), lo = select_absolute(ps(v), b);
    CHECK(std::includes(lo.begin(), lo.end(), hi.begin(), hi.end()));
  }
}

TEST_CASE("path_or laws") {
  ActivationPath a{{0, 2}, {bits("1100"), bits("010")}}, z{{0, 2}, {bits("0000"), bits("000")}};
  ActivationPath b{{0, 2}, {bits("0110"), bits("001")}};
  CHECK(path_or(a, z) == a);
  CHECK(path_or(a, a) == a);
  CHECK(path_or(a, b) == path_or(b, a));
  CHECK(path_or(a, b).popcount() >= std::max(a.popcount(), b.popcount()));
  ActivationPath c{{0}, {bits("0000")}};
  CHECK_THROWS_AS(path_or(a, c), Error);
}

TEST_CASE("backward extraction matches the recursive oracle") {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<float> th(0.1f, 1.0f), ph(-0.05f, 0.2f);
  for (int t = 0; t < 60; ++t) {
    Network net = t % 3 == 0 ? random_convnet(rng) : random_mlp(rng, 1 + t % 4, 20, 3);
    Tensor x = random_tensor(net.input_shape(), rng);
    ExtractionConfig cfg = make_variant(t % 2 ? "BwCu" : "BwAb", net.weighted_count(), th(rng), ph(rng));
    if (t % 5 == 0 && net.weighted_count() > 2) cfg.rules[1].emit = false;
    if (t % 7 == 0) cfg.first = net.weighted_count() - 1;
    auto path = extract_path_backward(net, infer(net, x), cfg);
    CHECK(oracle::to_bools(path) == oracle::backward(net, x.data, cfg));
  }
}

TEST_CASE("backward extraction edge cases") {
  std::mt19937_64 rng(12);
  Network net = random_mlp(rng, 3, 10, 3);
  Tensor x = random_tensor(net.input_shape(), rng);
  Inference inf = infer(net, x);

  ExtractionConfig last = make_variant("BwCu", 3, 0.5f);
  last.first = 2;
  auto p = extract_path_backward(net, inf, last);
  CHECK(p.masks[0].none());
  CHECK(p.masks[1].none());
  auto rec = recompute_psums(net, inf, net.weighted_layer(2), inf.predicted);
  Bits expect(p.masks[2].size());
  for (auto i : select_cumulative(rec.psums, 0.5f, inf.logits()[inf.predicted])) expect.set(i);
  CHECK(p.masks[2] == expect);

  ExtractionConfig full = make_variant("BwCu", 3, 0.5f), skip = full;
  skip.rules[1].emit = false;
  auto pf = extract_path_backward(net, inf, full), psk = extract_path_backward(net, inf, skip);
  CHECK(psk.masks[1].none());
  CHECK(psk.masks[0] == pf.masks[0]);
  CHECK(psk.masks[2] == pf.masks[2]);

  CHECK_THROWS_AS(extract_path_backward(net, inf, make_variant("FwAb", 3)), Error);
}

TEST_CASE("forward extraction") {
  Layer l = make_fc(3, 2);
  Network net({l}, 2);
  ExtractionConfig cfg = make_variant("FwAb", 1, 0.5f, 0.5f);
  Inference inf = infer(net, Tensor({3}, {0.1f, 0.9f, 0.3f}));
  CHECK(extract_path_forward(net, inf, cfg).masks[0] == bits("010"));
  cfg.rules[0].value = 0.0f;
  CHECK(extract_path_forward(net, inf, cfg).masks[0] == bits("111"));

  std::mt19937_64 rng(2);
  Network n3 = random_mlp(rng, 3, 10, 3);
  Inference full = infer(n3, random_tensor(n3.input_shape(), rng));
  ExtractionConfig f = make_variant("FwAb", 3, 0.5f, 0.05f);
  auto whole = extract_path_forward(n3, full, f);
  for (std::size_t w = 0; w < 3; ++w) {
    Inference part = full;
    part.activations.resize(n3.weighted_layer(w) + 1);
    auto pp = extract_path_forward(n3, part, f);
    for (std::size_t k = 0; k <= w; ++k) CHECK(pp.masks[k] == whole.masks[k]);
  }
  f.first = 2;
  auto late = extract_path_forward(n3, full, f);
  CHECK(late.masks[0].none());
  CHECK(late.masks[1].none());
  CHECK(late.masks[2] == whole.masks[2]);
  CHECK(late.capacity() == whole.capacity());

  ExtractionConfig bad = f;
  bad.rules[2].kind = ThresholdKind::Cumulative;
  CHECK_THROWS_AS(extract_path_forward(n3, full, bad), Error);
}

TEST_CASE("config text round trip and variants") {
  for (std::string v : {"BwCu", "BwAb", "FwAb", "Hybrid"}) {
    ExtractionConfig c = make_variant(v, 5, 0.3f, 0.125f);
    c.first = 1;
    c.rules[2].emit = false;
    CHECK(ExtractionConfig::parse(c.serialize()) == c);
  }
  auto h = make_variant("Hybrid", 4);
  CHECK(h.rules[0].kind == ThresholdKind::Absolute);
  CHECK(h.rules[1].kind == ThresholdKind::Absolute);
  CHECK(h.rules[2].kind == ThresholdKind::Cumulative);
  auto c = ExtractionConfig::parse("direction backward\nlayer 0 skip\nlayer 1 cumulative 0.7\n");
  CHECK(!c.rules[0].emit);
  CHECK(c.rules[0].value == doctest::Approx(0.7f));
  CHECK_THROWS_AS(ExtractionConfig::parse("layer 0 median 1\n"), Error);
  CHECK_THROWS_AS(make_variant("BwCu", 2, 1.5f).validate(2), Error);
}
