#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "canary/model_io.hpp"
#include "canary/network.hpp"

namespace canary {

/// He-uniform weights, zero biases, deterministic in `seed`.
void init_weights(Network& net, std::uint64_t seed);

struct TrainOptions {
  std::size_t epochs = 4;
  std::size_t batch = 16;
  float learning_rate = 0.05f;
  float momentum = 0.9f;
  std::uint64_t seed = 1;
};

/// Plain minibatch SGD with momentum on cross-entropy. Deterministic.
void train_sgd(Network& net, const std::vector<LabeledSample>& data, const TrainOptions& opt);

double accuracy(const Network& net, const std::vector<LabeledSample>& data);

/// Desk-scale architectures.
/// `cnn4`: conv3x3(8)-relu-pool-conv3x3(16)-relu-pool-flatten-fc(32)-relu-fc(classes).
Network make_cnn4(const Shape& input, std::size_t classes);
/// `mlp`: fc(hidden)-relu-...-fc(classes) over a flattened input.
Network make_mlp(const Shape& input, const std::vector<std::size_t>& hidden, std::size_t classes);
/// Builds an architecture by name ("cnn4", "mlp3", "cnn8").
Network make_architecture(const std::string& name, const Shape& input, std::size_t classes);

/// Synthetic 4-class shapes: horizontal bar, vertical bar, box outline,
/// diagonal cross. Drawn near the image centre (up to 2 px jitter, random size
/// and ink) over uniform background noise in [0, 0.15], MNIST-style.
std::vector<LabeledSample> make_shapes(std::size_t count, std::size_t side, std::uint64_t seed);

/// Reads MNIST idx image/label files (pixels scaled to [0, 1]).
std::vector<LabeledSample> import_mnist(const std::filesystem::path& images, const std::filesystem::path& labels,
                                        std::size_t limit);

}  // namespace canary
