#include <numeric>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "canary/attacks.hpp"
#include "canary/error.hpp"
#include "canary/parallel.hpp"
#include "canary/train.hpp"
#include "cli.hpp"

namespace cli {

namespace {

struct ShapesArgs {
  std::size_t count = 1000, side = 16;
  std::uint64_t seed = 1;
  std::string out;
};

struct MnistArgs {
  std::string images, labels, out;
  std::size_t limit = 0;
};

struct TrainArgs {
  std::string data, arch = "cnn4", out;
  std::size_t epochs = 4, batch = 16;
  float lr = 0.05f, momentum = 0.9f;
  double holdout = 0.2;
  std::uint64_t seed = 1;
};

struct AttackArgs {
  std::string model, data, pool, kind = "fgsm", out;
  float epsilon = 0.1f, alpha = 0.01f, step_size = 0.02f;
  std::size_t iters = 10, at_n = 1, targets = 5, steps = 200, limit = 0, jobs = 1;
  bool all = false, keep_failed = false;
  std::uint64_t seed = 1;
};

void cmd_shapes(const ShapesArgs& a) {
  auto data = canary::make_shapes(a.count, a.side, a.seed);
  canary::save_dataset(data, a.out);
  spdlog::info("wrote {} samples ({}x{}) to {}", data.size(), a.side, a.side, a.out);
  write_run_manifest("shapes", {}, {a.out}, a.seed, {{"count", a.count}, {"side", a.side}});
}

void cmd_mnist(const MnistArgs& a) {
  auto data = canary::import_mnist(a.images, a.labels, a.limit);
  canary::save_dataset(data, a.out);
  spdlog::info("imported {} samples to {}", data.size(), a.out);
  write_run_manifest("import-mnist", {{"images", a.images}, {"labels", a.labels}}, {a.out}, std::nullopt,
                     {{"limit", a.limit}});
}

void cmd_train(const TrainArgs& a) {
  auto data = canary::load_dataset(a.data);
  canary::require(!data.empty(), canary::ErrorKind::Data, "dataset " + a.data + " is empty");
  canary::require(a.holdout >= 0.0 && a.holdout < 1.0, canary::ErrorKind::Config, "--holdout must be in [0, 1)");
  std::size_t classes = 0;
  for (const auto& s : data) classes = std::max(classes, s.label + 1);
  const std::size_t test_n = static_cast<std::size_t>(static_cast<double>(data.size()) * a.holdout);
  std::vector<canary::LabeledSample> test(data.end() - static_cast<long>(test_n), data.end());
  data.resize(data.size() - test_n);
  canary::require(!data.empty(), canary::ErrorKind::Data, "no training samples left after the held-out split");

  canary::Network net = canary::make_architecture(a.arch, data.front().input.shape, classes);
  canary::init_weights(net, a.seed);
  canary::TrainOptions opt;
  opt.epochs = a.epochs;
  opt.batch = a.batch;
  opt.learning_rate = a.lr;
  opt.momentum = a.momentum;
  opt.seed = a.seed;
  canary::train_sgd(net, data, opt);
  canary::save_model(net, a.out);

  double train_acc = canary::accuracy(net, data);
  spdlog::info("train accuracy {:.4f} on {} samples", train_acc, data.size());
  nlohmann::json params{{"arch", a.arch},     {"epochs", a.epochs},   {"batch", a.batch},
                        {"lr", a.lr},         {"momentum", a.momentum}, {"holdout", a.holdout},
                        {"train_accuracy", train_acc}, {"digest", fmt::format("{:016x}", net.digest())}};
  if (!test.empty()) {
    double acc = canary::accuracy(net, test);
    spdlog::info("clean accuracy {:.4f} on {} held-out samples", acc, test.size());
    params["clean_accuracy"] = acc;
  }
  spdlog::info("weights digest {:016x}", net.digest());
  write_run_manifest("train", {{"data", a.data}}, {a.out}, a.seed, params);
}

void cmd_attack(const AttackArgs& a) {
  canary::Network net = canary::load_model(a.model);
  auto data = canary::load_dataset(a.data);
  canary::require(!data.empty(), canary::ErrorKind::Data, "dataset " + a.data + " is empty");
  const canary::AttackKind kind = canary::attack_kind_from_string(a.kind);

  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (a.all || canary::infer(net, data[i].input).predicted == data[i].label) ids.push_back(i);
  if (a.limit && ids.size() > a.limit) ids.resize(a.limit);
  canary::require(!ids.empty(), canary::ErrorKind::Data, "no samples to attack");

  std::vector<canary::LabeledSample> pool;
  canary::AdaptiveOptions adaptive;
  if (kind == canary::AttackKind::AdaptivePgd) {
    pool = a.pool.empty() ? data : canary::load_dataset(a.pool);
    adaptive.layers = canary::last_weighted_layers(net, a.at_n);
    adaptive.targets = a.targets;
    adaptive.steps = a.steps;
    adaptive.step_size = a.step_size;
  }

  std::vector<canary::AdversarialSample> out(ids.size());
  canary::parallel_for(ids.size(), a.jobs, [&](std::size_t k) {
    const auto& s = data[ids[k]];
    switch (kind) {
      case canary::AttackKind::Fgsm: out[k] = canary::fgsm(net, s.input, s.label, a.epsilon); break;
      case canary::AttackKind::Bim: out[k] = canary::bim(net, s.input, s.label, a.epsilon, a.alpha, a.iters); break;
      case canary::AttackKind::AdaptivePgd: {
        canary::AdaptiveOptions o = adaptive;
        o.seed = a.seed + ids[k];
        out[k] = canary::adaptive_pgd(net, s.input, s.label, pool, o);
        break;
      }
    }
  });
  std::size_t success = 0;
  double mse_sum = 0.0;
  for (const auto& s : out) {
    success += s.success;
    mse_sum += s.mse;
  }
  if (!a.keep_failed) std::erase_if(out, [](const canary::AdversarialSample& s) { return !s.success; });
  canary::save_adversarial_set(out, a.out);
  const double rate = static_cast<double>(success) / static_cast<double>(ids.size());
  const double mean_mse = mse_sum / static_cast<double>(ids.size());
  spdlog::info("{}: {} inputs, success rate {:.4f}, mean MSE {:.6f}, {} saved", canary::to_string(kind), ids.size(),
               rate, mean_mse, out.size());
  write_run_manifest("attack", {{"model", a.model}, {"data", a.data}, {"pool", a.pool}}, {a.out}, a.seed,
                     {{"kind", a.kind},
                      {"epsilon", a.epsilon},
                      {"alpha", a.alpha},
                      {"iters", a.iters},
                      {"at_n", a.at_n},
                      {"targets", a.targets},
                      {"steps", a.steps},
                      {"step_size", a.step_size},
                      {"limit", a.limit},
                      {"all", a.all},
                      {"keep_failed", a.keep_failed},
                      {"success_rate", rate},
                      {"mean_mse", mean_mse}});
}

}  // namespace

void add_data_commands(CLI::App& app) {
  auto shapes = std::make_shared<ShapesArgs>();
  auto* c = app.add_subcommand("shapes", "Generate the synthetic 4-class shapes dataset");
  c->add_option("--count", shapes->count, "Number of samples")->capture_default_str();
  c->add_option("--side", shapes->side, "Image side in pixels")->capture_default_str();
  c->add_option("--seed", shapes->seed, "Generator seed")->capture_default_str();
  c->add_option("-o,--out", shapes->out, "Output dataset directory")->required();
  c->callback([shapes] { cmd_shapes(*shapes); });

  auto mnist = std::make_shared<MnistArgs>();
  c = app.add_subcommand("import-mnist", "Convert MNIST idx files into a dataset directory");
  c->add_option("--images", mnist->images, "idx3 image file")->required()->check(CLI::ExistingFile);
  c->add_option("--labels", mnist->labels, "idx1 label file")->required()->check(CLI::ExistingFile);
  c->add_option("--limit", mnist->limit, "Keep at most this many samples (0: all)");
  c->add_option("-o,--out", mnist->out, "Output dataset directory")->required();
  c->callback([mnist] { cmd_mnist(*mnist); });

  auto train = std::make_shared<TrainArgs>();
  c = app.add_subcommand("train", "Train a desk-scale model with minibatch SGD");
  c->add_option("--data", train->data, "Dataset directory")->required();
  c->add_option("--arch", train->arch, "Architecture: cnn4, cnn8, mlp3")->capture_default_str();
  c->add_option("--epochs", train->epochs)->capture_default_str();
  c->add_option("--batch", train->batch)->capture_default_str();
  c->add_option("--lr", train->lr)->capture_default_str();
  c->add_option("--momentum", train->momentum)->capture_default_str();
  c->add_option("--holdout", train->holdout, "Fraction of samples (taken from the end) held out")->capture_default_str();
  c->add_option("--seed", train->seed)->capture_default_str();
  c->add_option("-o,--out", train->out, "Model manifest path (.json)")->required();
  c->callback([train] { cmd_train(*train); });

  auto attack = std::make_shared<AttackArgs>();
  c = app.add_subcommand("attack", "Generate adversarial examples");
  c->add_option("--model", attack->model)->required()->check(CLI::ExistingFile);
  c->add_option("--data", attack->data, "Dataset directory of inputs to perturb")->required();
  c->add_option("--kind", attack->kind, "fgsm, bim or adaptive-pgd")->capture_default_str();
  c->add_option("--epsilon", attack->epsilon, "L-infinity budget (fgsm, bim)")->capture_default_str();
  c->add_option("--alpha", attack->alpha, "Step size (bim)")->capture_default_str();
  c->add_option("--iters", attack->iters, "Iterations (bim)")->capture_default_str();
  c->add_option("--at-n", attack->at_n, "Matched trailing weighted layers (adaptive-pgd)")->capture_default_str();
  c->add_option("--targets", attack->targets, "Benign targets tried per input (adaptive-pgd)")->capture_default_str();
  c->add_option("--steps", attack->steps, "PGD steps (adaptive-pgd)")->capture_default_str();
  c->add_option("--step-size", attack->step_size, "Initial PGD step (adaptive-pgd)")->capture_default_str();
  c->add_option("--pool", attack->pool, "Benign target pool directory (default: --data)");
  c->add_option("--limit", attack->limit, "Attack at most this many inputs (0: all)");
  c->add_flag("--all", attack->all, "Also attack inputs the model misclassifies");
  c->add_flag("--keep-failed", attack->keep_failed, "Also save attacks that did not change the prediction");
  c->add_option("--seed", attack->seed)->capture_default_str();
  c->add_option("-j,--jobs", attack->jobs)->capture_default_str();
  c->add_option("-o,--out", attack->out, "Output adversarial set directory")->required();
  c->callback([attack] { cmd_attack(*attack); });
}

}  // namespace cli
