#pragma once

#include <random>

#include "canary/network.hpp"
#include "canary/train.hpp"

namespace testing_support {

inline canary::Tensor random_tensor(const canary::Shape& shape, std::mt19937_64& rng, float lo = 0.0f,
                                    float hi = 1.0f) {
  std::uniform_real_distribution<float> u(lo, hi);
  canary::Tensor t(shape);
  for (auto& v : t.data) v = u(rng);
  return t;
}

inline void randomize(canary::Network& net, std::mt19937_64& rng, float bias_scale = 0.1f) {
  std::normal_distribution<float> n(0.0f, 1.0f);
  for (auto& l : net.mutable_layers()) {
    if (!l.weighted()) continue;
    float s = 1.0f / std::sqrt(static_cast<float>(l.fan_in()));
    for (auto& w : l.weights.data) w = n(rng) * s;
    for (auto& b : l.bias.data) b = n(rng) * bias_scale;
  }
}

/// Random FC stack with `depth` weighted layers and widths in [2, max_width].
inline canary::Network random_mlp(std::mt19937_64& rng, std::size_t depth, std::size_t max_width,
                                  std::size_t classes) {
  std::uniform_int_distribution<std::size_t> w(2, max_width);
  std::vector<canary::Layer> ls;
  std::size_t width = w(rng);
  canary::Shape in{width};
  for (std::size_t d = 0; d + 1 < depth; ++d) {
    std::size_t next = w(rng);
    ls.push_back(canary::make_fc(width, next));
    ls.push_back(canary::make_relu(ls.back().out_shape));
    width = next;
  }
  ls.push_back(canary::make_fc(width, classes));
  canary::Network net(std::move(ls), classes);
  randomize(net, rng);
  return net;
}

/// Small conv net: conv(k3,pad1)-relu-maxpool-conv-relu-flatten-fc.
inline canary::Network random_convnet(std::mt19937_64& rng, std::size_t side = 6, std::size_t classes = 3) {
  std::vector<canary::Layer> ls;
  ls.push_back(canary::make_conv({1, side, side}, 3, 3, 1, 1));
  ls.push_back(canary::make_relu(ls.back().out_shape));
  ls.push_back(canary::make_maxpool(ls.back().out_shape, 2, 2));
  ls.push_back(canary::make_conv(ls.back().out_shape, 4, 2, 1, 0));
  ls.push_back(canary::make_relu(ls.back().out_shape));
  ls.push_back(canary::make_flatten(ls.back().out_shape));
  ls.push_back(canary::make_fc(ls.back().out_size(), classes));
  canary::Network net(std::move(ls), classes);
  randomize(net, rng);
  return net;
}

}  // namespace testing_support

namespace testing_support {

/// A cnn4 trained on the shapes set, built once per process.
inline const canary::Network& trained_cnn4() {
  static const canary::Network net = [] {
    auto data = canary::make_shapes(800, 16, 101);
    canary::Network n = canary::make_cnn4({1, 16, 16}, 4);
    canary::init_weights(n, 1);
    canary::TrainOptions opt;
    opt.epochs = 4;
    canary::train_sgd(n, data, opt);
    return n;
  }();
  return net;
}

}  // namespace testing_support
