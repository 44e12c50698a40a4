#include <doctest.h>

#include <filesystem>

#include "canary/attacks.hpp"
#include "canary/error.hpp"
#include "support.hpp"

using namespace canary;
using testing_support::random_mlp;
using testing_support::random_tensor;
using testing_support::trained_cnn4;

TEST_CASE("fgsm") {
  std::mt19937_64 rng(1);
  Network net = random_mlp(rng, 3, 10, 3);
  Tensor x = random_tensor(net.input_shape(), rng, 0.2f, 0.8f);
  CHECK(fgsm(net, x, 0, 0.0f).adversarial == x);

  Layer l = make_fc(3, 2);
  l.weights.data = {0.5f, -1.0f, 2.0f, -0.5f, 1.0f, -2.0f};
  Network lin({l}, 2);
  Tensor mid({3}, {0.5f, 0.5f, 0.5f});
  auto a = fgsm(lin, mid, 0, 0.1f);
  // Raising the loss of class 0 moves along sign(w1 - w0).
  CHECK(a.adversarial[0] < 0.5f);
  CHECK(a.adversarial[1] > 0.5f);
  CHECK(a.adversarial[2] < 0.5f);

  for (int t = 0; t < 20; ++t) {
    Tensor r = random_tensor(net.input_shape(), rng);
    auto s = fgsm(net, r, t % 3, 0.07f);
    for (std::size_t i = 0; i < r.size(); ++i) {
      CHECK(std::abs(s.adversarial[i] - r[i]) <= 0.07f + 1e-6f);
      CHECK(s.adversarial[i] >= 0.0f);
      CHECK(s.adversarial[i] <= 1.0f);
    }
    CHECK(s.mse == doctest::Approx(mse(s.adversarial, r)));
  }
}

TEST_CASE("bim") {
  std::mt19937_64 rng(2);
  Network net = random_mlp(rng, 3, 10, 3);
  Tensor x = random_tensor(net.input_shape(), rng);
  CHECK(bim(net, x, 1, 0.1f, 0.1f, 1).adversarial == fgsm(net, x, 1, 0.1f).adversarial);
  for (std::size_t iters : {1, 3, 7}) {
    auto s = bim(net, x, 2, 0.05f, 0.02f, iters);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(s.adversarial[i] - x[i]) <= 0.05f + 1e-6f);
  }
  CHECK_THROWS_AS(bim(net, x, 0, 0.01f, 0.02f, 3), Error);

  const Network& cnn = trained_cnn4();
  auto data = make_shapes(80, 16, 55);
  std::size_t f = 0, b = 0;
  for (const auto& s : data) {
    f += !fgsm(cnn, s.input, s.label, 0.1f).success ? 0 : 1;
    b += !bim(cnn, s.input, s.label, 0.1f, 0.02f, 10).success ? 0 : 1;
  }
  CHECK(b >= f);
}

TEST_CASE("adaptive pgd") {
  const Network& net = trained_cnn4();
  auto pool = make_shapes(24, 16, 9);
  Tensor x = pool[0].input;

  std::vector<LabeledSample> self{{x, pool[0].label + 1}};
  AdaptiveOptions o;
  o.layers = last_weighted_layers(net, 2);
  o.steps = 20;
  auto same = adaptive_pgd(net, x, pool[0].label, self, o);
  CHECK(same.adversarial == x);
  CHECK(same.loss_trace.back() == 0.0f);

  CHECK(last_weighted_layers(net, 1) == std::vector<std::size_t>{net.size() - 1});
  auto r = adaptive_pgd(net, x, pool[0].label, pool, o);
  for (std::size_t i = 1; i < r.loss_trace.size(); ++i) CHECK(r.loss_trace[i] <= r.loss_trace[i - 1]);
  CHECK(r.loss_trace.back() <= r.loss_trace.front());
  CHECK(r.target_class != pool[0].label);
  for (float v : r.adversarial.data) CHECK((v >= 0.0f && v <= 1.0f));

  std::vector<LabeledSample> none{{x, pool[0].label}};
  CHECK_THROWS_AS(adaptive_pgd(net, x, pool[0].label, none, o), Error);
}

TEST_CASE("adversarial set round trip") {
  std::mt19937_64 rng(3);
  Network net = random_mlp(rng, 2, 6, 2);
  std::vector<AdversarialSample> s{fgsm(net, random_tensor(net.input_shape(), rng), 1, 0.1f)};
  auto dir = std::filesystem::temp_directory_path() / "canary_adv_set";
  save_adversarial_set(s, dir);
  auto back = load_adversarial_set(dir);
  REQUIRE(back.size() == 1);
  CHECK(back[0].input == s[0].adversarial);
  CHECK(back[0].original_class == 1);
  CHECK(back[0].attack == "fgsm");
  std::filesystem::remove_all(dir);
}
