#include "canary/attacks.hpp"

#include <algorithm>
#include <map>
#include <random>

#include <nlohmann/json.hpp>

#include "canary/binio.hpp"
#include "canary/error.hpp"

namespace canary {

std::string to_string(AttackKind k) {
  switch (k) {
    case AttackKind::Fgsm: return "fgsm";
    case AttackKind::Bim: return "bim";
    case AttackKind::AdaptivePgd: return "adaptive-pgd";
  }
  return "?";
}

AttackKind attack_kind_from_string(const std::string& s) {
  if (s == "fgsm") return AttackKind::Fgsm;
  if (s == "bim") return AttackKind::Bim;
  if (s == "adaptive-pgd" || s == "pgd") return AttackKind::AdaptivePgd;
  fail(ErrorKind::Config, "unknown attack '" + s + "' (expected fgsm, bim or adaptive-pgd)");
}

double mse(const Tensor& a, const Tensor& b) {
  require(a.shape == b.shape, ErrorKind::Shape, "mse of differently shaped tensors");
  if (a.size() == 0) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

namespace {

float sign(float v) { return v > 0.0f ? 1.0f : v < 0.0f ? -1.0f : 0.0f; }

void finish(const Network& net, AdversarialSample& s) {
  s.predicted = infer(net, s.adversarial).predicted;
  s.mse = mse(s.adversarial, s.original);
  s.success = s.kind == AttackKind::AdaptivePgd ? s.predicted == s.target_class : s.predicted != s.original_class;
}

}  // namespace

AdversarialSample fgsm(const Network& net, const Tensor& x, std::size_t label, float epsilon) {
  require(epsilon >= 0.0f, ErrorKind::Config, "epsilon must be non-negative");
  AdversarialSample s;
  s.kind = AttackKind::Fgsm;
  s.original = x;
  s.original_class = label;
  s.epsilon = epsilon;
  s.adversarial = x;
  if (epsilon > 0.0f) {
    Tensor g = gradient(net, x, LossSpec::cross_entropy(label));
    for (std::size_t i = 0; i < x.size(); ++i)
      s.adversarial[i] = std::clamp(x[i] + epsilon * sign(g[i]), kPixelMin, kPixelMax);
  }
  finish(net, s);
  return s;
}

AdversarialSample bim(const Network& net, const Tensor& x, std::size_t label, float epsilon, float alpha,
                      std::size_t iters) {
  require(epsilon >= 0.0f && alpha >= 0.0f, ErrorKind::Config, "epsilon and alpha must be non-negative");
  require(alpha <= epsilon, ErrorKind::Config, "BIM step size must not exceed epsilon");
  require(iters >= 1, ErrorKind::Config, "BIM needs at least one iteration");
  AdversarialSample s;
  s.kind = AttackKind::Bim;
  s.original = x;
  s.original_class = label;
  s.epsilon = epsilon;
  s.adversarial = x;
  if (epsilon > 0.0f) {
    for (std::size_t it = 0; it < iters; ++it) {
      Tensor g = gradient(net, s.adversarial, LossSpec::cross_entropy(label));
      for (std::size_t i = 0; i < x.size(); ++i) {
        float v = s.adversarial[i] + alpha * sign(g[i]);
        v = std::clamp(v, x[i] - epsilon, x[i] + epsilon);
        s.adversarial[i] = std::clamp(v, kPixelMin, kPixelMax);
      }
    }
  }
  finish(net, s);
  return s;
}

std::vector<std::size_t> last_weighted_layers(const Network& net, std::size_t n) {
  require(n >= 1 && n <= net.weighted_count(), ErrorKind::Config,
          "layer count must lie in [1, " + std::to_string(net.weighted_count()) + "]");
  return {net.weighted().end() - static_cast<long>(n), net.weighted().end()};
}

AdversarialSample adaptive_pgd(const Network& net, const Tensor& x, std::size_t label,
                               const std::vector<LabeledSample>& pool, const AdaptiveOptions& opt) {
  require(!opt.layers.empty(), ErrorKind::Config, "adaptive attack needs at least one matched layer");
  require(opt.targets >= 1 && opt.steps >= 1, ErrorKind::Config, "adaptive attack needs targets and steps");
  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < pool.size(); ++i)
    if (pool[i].label != label) by_class[pool[i].label].push_back(i);
  require(!by_class.empty(), ErrorKind::Config, "no eligible attack targets of another class");

  std::mt19937_64 rng(opt.seed);
  std::vector<std::size_t> classes;
  for (auto& [c, _] : by_class) classes.push_back(c);
  std::shuffle(classes.begin(), classes.end(), rng);
  std::vector<std::size_t> picks;
  for (std::size_t k = 0; k < opt.targets; ++k) {
    const auto& members = by_class[classes[k % classes.size()]];
    picks.push_back(members[std::uniform_int_distribution<std::size_t>(0, members.size() - 1)(rng)]);
  }

  AdversarialSample best;
  bool have = false;
  for (auto t : picks) {
    Inference target = infer(net, pool[t].input);
    std::vector<Tensor> acts;
    for (auto li : opt.layers) acts.push_back(target.output_of(li));
    LossSpec loss = LossSpec::activation_l2(opt.layers, acts);

    AdversarialSample s;
    s.kind = AttackKind::AdaptivePgd;
    s.original = x;
    s.original_class = label;
    s.target_class = pool[t].label;
    s.adversarial = x;
    Inference cur_inf = infer(net, x);
    float cur = loss_value(net, cur_inf, loss);
    s.loss_trace.push_back(cur);
    float alpha = opt.step_size;
    for (std::size_t step = 0; step < opt.steps && cur > 0.0f; ++step) {
      Tensor g = backward(net, cur_inf, loss, nullptr);
      Tensor cand = s.adversarial;
      for (std::size_t i = 0; i < cand.size(); ++i)
        cand[i] = std::clamp(cand[i] - alpha * sign(g[i]), kPixelMin, kPixelMax);
      Inference cand_inf = infer(net, cand);
      float l = loss_value(net, cand_inf, loss);
      if (l < cur) {
        s.adversarial = std::move(cand);
        cur_inf = std::move(cand_inf);
        cur = l;
        s.loss_trace.push_back(cur);
      } else {
        alpha *= 0.5f;
      }
    }
    finish(net, s);
    if (!have || s.loss_trace.back() < best.loss_trace.back()) best = std::move(s), have = true;
  }
  return best;
}

void save_adversarial_set(const std::vector<AdversarialSample>& samples, const std::filesystem::path& dir) {
  using nlohmann::json;
  std::filesystem::create_directories(dir);
  json items = json::array();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    std::string name = "a" + std::to_string(i) + ".ptwt";
    save_tensor(s.adversarial, dir / name);
    items.push_back({{"file", name},
                     {"original_class", s.original_class},
                     {"attack", to_string(s.kind)},
                     {"epsilon", s.epsilon},
                     {"mse", s.mse},
                     {"predicted", s.predicted}});
  }
  binio::write_text(dir / "manifest.json", json{{"format", "canary-adversarial"}, {"items", items}}.dump(1) + "\n");
}

std::vector<AdversarialRecord> load_adversarial_set(const std::filesystem::path& dir) {
  using nlohmann::json;
  std::vector<AdversarialRecord> out;
  try {
    json doc = json::parse(binio::read_text(dir / "manifest.json"));
    for (const json& it : doc.at("items")) {
      AdversarialRecord r;
      r.input = load_tensor(dir / it.at("file").get<std::string>());
      r.original_class = it.at("original_class").get<std::size_t>();
      r.attack = it.value("attack", std::string("external"));
      r.epsilon = it.value("epsilon", 0.0f);
      r.mse = it.value("mse", 0.0);
      r.predicted = it.value("predicted", std::size_t{0});
      out.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::Data, (dir / "manifest.json").string() + ": " + e.what());
  }
  return out;
}

}  // namespace canary
