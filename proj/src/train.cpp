#include "canary/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "canary/binio.hpp"
#include "canary/error.hpp"

namespace canary {

void init_weights(Network& net, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (Layer& l : net.mutable_layers()) {
    if (!l.weighted()) continue;
    float bound = std::sqrt(6.0f / static_cast<float>(l.fan_in()));
    std::uniform_real_distribution<float> u(-bound, bound);
    for (auto& w : l.weights.data) w = u(rng);
    std::fill(l.bias.data.begin(), l.bias.data.end(), 0.0f);
  }
}

void train_sgd(Network& net, const std::vector<LabeledSample>& data, const TrainOptions& opt) {
  if (opt.epochs == 0) return;
  require(!data.empty(), ErrorKind::Data, "training dataset is empty");
  std::mt19937_64 rng(opt.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  std::vector<Tensor> vel_w, vel_b;
  for (const Layer& l : net.layers()) {
    vel_w.push_back(l.weighted() ? Tensor(l.weights.shape) : Tensor());
    vel_b.push_back(l.weighted() ? Tensor(l.bias.shape) : Tensor());
  }

  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += opt.batch) {
      std::size_t end = std::min(order.size(), start + opt.batch);
      ParamGrads grads;
      for (std::size_t k = start; k < end; ++k) {
        const auto& s = data[order[k]];
        Inference inf = infer(net, s.input);
        backward(net, inf, LossSpec::cross_entropy(s.label), &grads);
      }
      const float scale = opt.learning_rate / static_cast<float>(end - start);
      auto& layers = net.mutable_layers();
      for (std::size_t i = 0; i < layers.size(); ++i) {
        if (!layers[i].weighted()) continue;
        for (std::size_t e = 0; e < vel_w[i].size(); ++e) {
          vel_w[i][e] = opt.momentum * vel_w[i][e] - scale * grads.weights[i][e];
          layers[i].weights[e] += vel_w[i][e];
        }
        for (std::size_t e = 0; e < vel_b[i].size(); ++e) {
          vel_b[i][e] = opt.momentum * vel_b[i][e] - scale * grads.bias[i][e];
          layers[i].bias[e] += vel_b[i][e];
        }
      }
    }
  }
}

double accuracy(const Network& net, const std::vector<LabeledSample>& data) {
  if (data.empty()) return 0.0;
  std::size_t ok = 0;
  for (const auto& s : data) ok += infer(net, s.input).predicted == s.label;
  return static_cast<double>(ok) / static_cast<double>(data.size());
}

Network make_cnn4(const Shape& input, std::size_t classes) {
  std::vector<Layer> ls;
  ls.push_back(make_conv(input, 8, 3, 1, 1));
  ls.push_back(make_relu(ls.back().out_shape));
  ls.push_back(make_maxpool(ls.back().out_shape, 2, 2));
  ls.push_back(make_conv(ls.back().out_shape, 16, 3, 1, 1));
  ls.push_back(make_relu(ls.back().out_shape));
  ls.push_back(make_maxpool(ls.back().out_shape, 2, 2));
  ls.push_back(make_flatten(ls.back().out_shape));
  ls.push_back(make_fc(ls.back().out_size(), 32));
  ls.push_back(make_relu(ls.back().out_shape));
  ls.push_back(make_fc(32, classes));
  return Network(std::move(ls), classes);
}

Network make_mlp(const Shape& input, const std::vector<std::size_t>& hidden, std::size_t classes) {
  std::vector<Layer> ls;
  std::size_t width = shape_size(input);
  if (input.size() != 1) ls.push_back(make_flatten(input));
  for (auto h : hidden) {
    ls.push_back(make_fc(width, h));
    ls.push_back(make_relu(ls.back().out_shape));
    width = h;
  }
  ls.push_back(make_fc(width, classes));
  return Network(std::move(ls), classes);
}

namespace {

Network make_cnn8(const Shape& input, std::size_t classes) {
  std::vector<Layer> ls;
  auto conv = [&](const Shape& in, std::size_t c) {
    ls.push_back(make_conv(in, c, 3, 1, 1));
    ls.push_back(make_relu(ls.back().out_shape));
  };
  conv(input, 4);
  conv(ls.back().out_shape, 4);
  ls.push_back(make_maxpool(ls.back().out_shape, 2, 2));
  conv(ls.back().out_shape, 8);
  conv(ls.back().out_shape, 8);
  conv(ls.back().out_shape, 8);
  ls.push_back(make_maxpool(ls.back().out_shape, 2, 2));
  ls.push_back(make_flatten(ls.back().out_shape));
  ls.push_back(make_fc(ls.back().out_size(), 32));
  ls.push_back(make_relu(ls.back().out_shape));
  ls.push_back(make_fc(32, 16));
  ls.push_back(make_relu(ls.back().out_shape));
  ls.push_back(make_fc(16, classes));
  return Network(std::move(ls), classes);
}

}  // namespace

Network make_architecture(const std::string& name, const Shape& input, std::size_t classes) {
  if (name == "cnn4") return make_cnn4(input, classes);
  if (name == "cnn8") return make_cnn8(input, classes);
  if (name == "mlp3") return make_mlp(input, {64, 32}, classes);
  fail(ErrorKind::Config, "unknown architecture '" + name + "' (expected cnn4, cnn8 or mlp3)");
}

std::vector<LabeledSample> make_shapes(std::size_t count, std::size_t side, std::uint64_t seed) {
  require(side >= 14, ErrorKind::Config, "shapes need an image side of at least 14");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> noise(0.0f, 0.15f);
  std::uniform_real_distribution<float> ink(0.7f, 1.0f);
  const int n = static_cast<int>(side);
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };

  std::vector<LabeledSample> out;
  out.reserve(count);
  for (std::size_t s = 0; s < count; ++s) {
    std::size_t label = s % 4;
    Tensor img({1, side, side});
    for (auto& v : img.data) v = noise(rng);
    const float c = ink(rng);
    auto put = [&](int y, int x) {
      if (y >= 0 && y < n && x >= 0 && x < n) img[static_cast<std::size_t>(y * n + x)] = c;
    };
    const int cy = n / 2 + pick(-2, 2), cx = n / 2 + pick(-2, 2), h = pick(3, 5);
    switch (label) {
      case 0:  // horizontal bar
        for (int x = cx - h; x <= cx + h; ++x) put(cy, x), put(cy + 1, x);
        break;
      case 1:  // vertical bar
        for (int y = cy - h; y <= cy + h; ++y) put(y, cx), put(y, cx + 1);
        break;
      case 2:  // box outline
        for (int i = -h; i <= h; ++i) put(cy - h, cx + i), put(cy + h, cx + i), put(cy + i, cx - h), put(cy + i, cx + h);
        break;
      default:  // diagonal cross
        for (int i = -h; i <= h; ++i) put(cy + i, cx + i), put(cy + i, cx - i);
        break;
    }
    out.push_back({std::move(img), label});
  }
  return out;
}

namespace {

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t at) {
  require(b.size() >= at + 4, ErrorKind::Data, "idx file truncated");
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) | b[at + 3];
}

}  // namespace

std::vector<LabeledSample> import_mnist(const std::filesystem::path& images, const std::filesystem::path& labels,
                                        std::size_t limit) {
  auto img = binio::read_file(images);
  auto lab = binio::read_file(labels);
  require(be32(img, 0) == 0x803 && be32(lab, 0) == 0x801, ErrorKind::Data, "not an MNIST idx image/label pair");
  std::size_t n = be32(img, 4), rows = be32(img, 8), cols = be32(img, 12);
  require(be32(lab, 4) == n, ErrorKind::Data, "MNIST image/label counts differ");
  require(img.size() >= 16 + n * rows * cols && lab.size() >= 8 + n, ErrorKind::Data, "MNIST file truncated");
  if (limit) n = std::min(n, limit);
  std::vector<LabeledSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor t({1, rows, cols});
    for (std::size_t p = 0; p < rows * cols; ++p) t[p] = static_cast<float>(img[16 + i * rows * cols + p]) / 255.0f;
    out.push_back({std::move(t), lab[8 + i]});
  }
  return out;
}

}  // namespace canary
