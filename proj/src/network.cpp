#include "canary/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "canary/error.hpp"
#include "canary/hash.hpp"

namespace canary {

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::FullyConnected: return "fc";
    case LayerKind::Convolution: return "conv";
    case LayerKind::Relu: return "relu";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::Flatten: return "flatten";
  }
  return "?";
}

LayerKind layer_kind_from_string(const std::string& s) {
  if (s == "fc") return LayerKind::FullyConnected;
  if (s == "conv") return LayerKind::Convolution;
  if (s == "relu") return LayerKind::Relu;
  if (s == "maxpool") return LayerKind::MaxPool;
  if (s == "flatten") return LayerKind::Flatten;
  fail(ErrorKind::Data, "unknown layer kind '" + s + "'");
}

std::size_t Layer::fan_in() const {
  if (kind == LayerKind::FullyConnected) return in_size();
  if (kind == LayerKind::Convolution) return in_shape[0] * kernel * kernel;
  return 0;
}

Layer make_fc(std::size_t in, std::size_t out) {
  Layer l;
  l.kind = LayerKind::FullyConnected;
  l.in_shape = {in};
  l.out_shape = {out};
  l.weights = Tensor({out, in});
  l.bias = Tensor({out});
  return l;
}

Layer make_conv(const Shape& in_shape, std::size_t out_channels, std::size_t kernel, std::size_t stride,
                std::size_t padding) {
  require(in_shape.size() == 3, ErrorKind::Shape, "convolution expects a [C,H,W] input");
  require(stride >= 1 && kernel >= 1, ErrorKind::Config, "convolution kernel and stride must be >= 1");
  require(in_shape[1] + 2 * padding >= kernel && in_shape[2] + 2 * padding >= kernel, ErrorKind::Shape,
          "convolution kernel larger than padded input");
  Layer l;
  l.kind = LayerKind::Convolution;
  l.in_shape = in_shape;
  l.kernel = kernel;
  l.stride = stride;
  l.padding = padding;
  std::size_t oh = (in_shape[1] + 2 * padding - kernel) / stride + 1;
  std::size_t ow = (in_shape[2] + 2 * padding - kernel) / stride + 1;
  l.out_shape = {out_channels, oh, ow};
  l.weights = Tensor({out_channels, in_shape[0], kernel, kernel});
  l.bias = Tensor({out_channels});
  return l;
}

Layer make_relu(const Shape& shape) {
  Layer l;
  l.kind = LayerKind::Relu;
  l.in_shape = shape;
  l.out_shape = shape;
  return l;
}

Layer make_maxpool(const Shape& in_shape, std::size_t size, std::size_t stride) {
  require(in_shape.size() == 3, ErrorKind::Shape, "max-pool expects a [C,H,W] input");
  require(size >= 1 && stride >= 1 && in_shape[1] >= size && in_shape[2] >= size, ErrorKind::Config,
          "bad max-pool geometry");
  Layer l;
  l.kind = LayerKind::MaxPool;
  l.in_shape = in_shape;
  l.kernel = size;
  l.stride = stride;
  l.out_shape = {in_shape[0], (in_shape[1] - size) / stride + 1, (in_shape[2] - size) / stride + 1};
  return l;
}

Layer make_flatten(const Shape& in_shape) {
  Layer l;
  l.kind = LayerKind::Flatten;
  l.in_shape = in_shape;
  l.out_shape = {shape_size(in_shape)};
  return l;
}

Network::Network(std::vector<Layer> layers, std::size_t class_count)
    : layers_(std::move(layers)), class_count_(class_count) {
  for (std::size_t i = 0; i < layers_.size(); ++i)
    if (layers_[i].weighted()) weighted_.push_back(i);
  validate();
}

void Network::validate() const {
  require(!layers_.empty(), ErrorKind::Config, "network has no layers");
  require(class_count_ > 0, ErrorKind::Config, "class count must be positive");
  require(!weighted_.empty(), ErrorKind::Config, "network needs at least one weighted layer");
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const Layer& l = layers_[i];
    require(shape_size(l.in_shape) > 0 && shape_size(l.out_shape) > 0, ErrorKind::Shape,
            "layer " + std::to_string(i) + " has an empty shape");
    if (i + 1 < layers_.size())
      require(l.out_shape == layers_[i + 1].in_shape, ErrorKind::Shape,
              "layer " + std::to_string(i) + " output " + shape_str(l.out_shape) + " does not match layer " +
                  std::to_string(i + 1) + " input " + shape_str(layers_[i + 1].in_shape));
    if (l.kind == LayerKind::FullyConnected) {
      require(l.in_shape.size() == 1, ErrorKind::Shape, "fully-connected layer expects a flat input");
      require(l.weights.shape == Shape{l.out_size(), l.in_size()} && l.bias.shape == Shape{l.out_size()},
              ErrorKind::Shape, "fully-connected parameter shape mismatch at layer " + std::to_string(i));
    } else if (l.kind == LayerKind::Convolution) {
      require(l.weights.shape == Shape{l.out_shape[0], l.in_shape[0], l.kernel, l.kernel} &&
                  l.bias.shape == Shape{l.out_shape[0]},
              ErrorKind::Shape, "convolution parameter shape mismatch at layer " + std::to_string(i));
      require(l.stride >= 1, ErrorKind::Config, "convolution stride must be >= 1");
    }
  }
  const Layer& last = layers_.back();
  require(last.kind == LayerKind::FullyConnected, ErrorKind::Config,
          "the final layer must be fully connected (it produces the class logits)");
  require(last.out_size() == class_count_, ErrorKind::Config, "final layer width does not match class count");
}

std::optional<std::size_t> Network::weighted_index(std::size_t layer) const {
  auto it = std::find(weighted_.begin(), weighted_.end(), layer);
  if (it == weighted_.end()) return std::nullopt;
  return static_cast<std::size_t>(it - weighted_.begin());
}

std::uint64_t Network::digest() const {
  Fnv1a h;
  h.add_u64(class_count_);
  for (const Layer& l : layers_) {
    h.add_u64(static_cast<std::uint64_t>(l.kind));
    for (auto d : l.in_shape) h.add_u64(d);
    for (auto d : l.out_shape) h.add_u64(d);
    h.add_u64(l.kernel);
    h.add_u64(l.stride);
    h.add_u64(l.padding);
    h.add_bytes(l.weights.data.data(), l.weights.data.size() * sizeof(float));
    h.add_bytes(l.bias.data.data(), l.bias.data.size() * sizeof(float));
  }
  return h.value();
}

namespace {

// Computes one weighted-layer output neuron. Both inference and psum capture
// go through here so their accumulation order is identical.
float neuron_preactivation(const Layer& l, const Tensor& x, std::size_t out, std::vector<PartialSum>* rec) {
  float acc = 0.0f;
  if (l.kind == LayerKind::FullyConnected) {
    const std::size_t in = l.in_size();
    const float* w = l.weights.data.data() + out * in;
    for (std::size_t i = 0; i < in; ++i) {
      if (w[i] == 0.0f) continue;
      float p = w[i] * x[i];
      acc += p;
      if (rec) rec->push_back({static_cast<std::uint32_t>(i), p});
    }
    return acc + l.bias[out];
  }
  const std::size_t cin = l.in_shape[0], ih = l.in_shape[1], iw = l.in_shape[2];
  const std::size_t oh = l.out_shape[1], ow = l.out_shape[2], k = l.kernel;
  const std::size_t co = out / (oh * ow);
  const std::size_t oy = (out / ow) % oh, ox = out % ow;
  const float* w = l.weights.data.data() + co * cin * k * k;
  for (std::size_t ci = 0; ci < cin; ++ci) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      long iy = static_cast<long>(oy * l.stride + ky) - static_cast<long>(l.padding);
      if (iy < 0 || iy >= static_cast<long>(ih)) continue;
      for (std::size_t kx = 0; kx < k; ++kx) {
        long ix = static_cast<long>(ox * l.stride + kx) - static_cast<long>(l.padding);
        if (ix < 0 || ix >= static_cast<long>(iw)) continue;
        float wv = w[(ci * k + ky) * k + kx];
        if (wv == 0.0f) continue;
        std::size_t in_off = (ci * ih + static_cast<std::size_t>(iy)) * iw + static_cast<std::size_t>(ix);
        float p = wv * x[in_off];
        acc += p;
        if (rec) rec->push_back({static_cast<std::uint32_t>(in_off), p});
      }
    }
  }
  return acc + l.bias[co];
}

std::size_t pool_argmax(const Layer& l, const Tensor& x, std::size_t out) {
  const std::size_t ih = l.in_shape[1], iw = l.in_shape[2];
  const std::size_t oh = l.out_shape[1], ow = l.out_shape[2];
  const std::size_t c = out / (oh * ow), oy = (out / ow) % oh, ox = out % ow;
  std::size_t best = (c * ih + oy * l.stride) * iw + ox * l.stride;
  for (std::size_t ky = 0; ky < l.kernel; ++ky)
    for (std::size_t kx = 0; kx < l.kernel; ++kx) {
      std::size_t off = (c * ih + oy * l.stride + ky) * iw + ox * l.stride + kx;
      if (x[off] > x[best]) best = off;
    }
  return best;
}

}  // namespace

std::size_t argmax(const Tensor& t) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < t.size(); ++i)
    if (t[i] > t[best]) best = i;
  return best;
}

Tensor forward_layer(const Layer& l, const Tensor& x) {
  Tensor y(l.out_shape);
  switch (l.kind) {
    case LayerKind::FullyConnected:
    case LayerKind::Convolution:
      for (std::size_t o = 0; o < y.size(); ++o) y[o] = neuron_preactivation(l, x, o, nullptr);
      break;
    case LayerKind::Relu:
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
      break;
    case LayerKind::MaxPool:
      for (std::size_t o = 0; o < y.size(); ++o) y[o] = x[pool_argmax(l, x, o)];
      break;
    case LayerKind::Flatten:
      y.data = x.data;
      break;
  }
  return y;
}

Inference infer(const Network& net, const Tensor& input) {
  require(input.shape == net.input_shape(), ErrorKind::Config,
          "input shape " + shape_str(input.shape) + " does not match network input " + shape_str(net.input_shape()));
  Inference inf;
  inf.activations.reserve(net.size() + 1);
  inf.activations.push_back(input);
  for (const Layer& l : net.layers()) inf.activations.push_back(forward_layer(l, inf.activations.back()));
  inf.predicted = argmax(inf.logits());
  return inf;
}

float PartialSumRecord::preactivation() const {
  float acc = 0.0f;
  for (const auto& p : psums) acc += p.value;
  return acc + bias;
}

PsumInference infer_with_psums(const Network& net, const Tensor& input, const std::set<std::size_t>& layers) {
  for (auto li : layers) {
    require(li < net.size(), ErrorKind::Bounds, "layer index " + std::to_string(li) + " out of range");
    require(net.layer(li).weighted(), ErrorKind::Config,
            "partial sums are unsupported for " + to_string(net.layer(li).kind) + " layer " + std::to_string(li));
  }
  PsumInference out;
  out.inference = infer(net, input);
  for (auto li : layers) {
    const Layer& l = net.layer(li);
    for (std::size_t o = 0; o < l.out_size(); ++o) out.records.push_back(recompute_psums(net, out.inference, li, o));
  }
  return out;
}

PartialSumRecord recompute_psums(const Network& net, const Inference& inf, std::size_t layer, std::size_t output) {
  require(layer < net.size(), ErrorKind::Bounds, "layer index out of range");
  const Layer& l = net.layer(layer);
  require(l.weighted(), ErrorKind::Config, "partial sums are unsupported for " + to_string(l.kind) + " layers");
  require(output < l.out_size(), ErrorKind::Bounds,
          "output neuron " + std::to_string(output) + " out of range for layer " + std::to_string(layer));
  PartialSumRecord rec;
  rec.layer = layer;
  rec.output = output;
  neuron_preactivation(l, inf.input_of(layer), output, &rec.psums);
  rec.bias = l.bias[l.kind == LayerKind::Convolution ? output / (l.out_shape[1] * l.out_shape[2]) : output];
  return rec;
}

std::optional<std::size_t> trace_to_producer(const Network& net, const Inference& inf, std::size_t layer,
                                             std::size_t input_offset) {
  std::size_t off = input_offset;
  for (std::size_t j = layer; j-- > 0;) {
    const Layer& l = net.layer(j);
    if (l.weighted()) return off;
    if (l.kind == LayerKind::MaxPool) off = pool_argmax(l, inf.input_of(j), off);
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------

LossSpec LossSpec::cross_entropy(std::size_t label) {
  LossSpec s;
  s.kind = Kind::CrossEntropy;
  s.label = label;
  return s;
}

LossSpec LossSpec::activation_l2(std::vector<std::size_t> layers, std::vector<Tensor> targets) {
  require(layers.size() == targets.size(), ErrorKind::Config, "activation loss needs one target per layer");
  LossSpec s;
  s.kind = Kind::ActivationL2;
  s.layers = std::move(layers);
  s.targets = std::move(targets);
  return s;
}

std::vector<float> softmax(const Tensor& logits) {
  float mx = *std::max_element(logits.data.begin(), logits.data.end());
  std::vector<float> p(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    sum += p[i];
  }
  for (auto& v : p) v = static_cast<float>(v / sum);
  return p;
}

float loss_value(const Network& net, const Inference& inf, const LossSpec& loss) {
  if (loss.kind == LossSpec::Kind::CrossEntropy) {
    require(loss.label < net.class_count(), ErrorKind::Bounds, "label out of range");
    const Tensor& z = inf.logits();
    float mx = *std::max_element(z.data.begin(), z.data.end());
    double sum = 0.0;
    for (float v : z.data) sum += std::exp(static_cast<double>(v - mx));
    return static_cast<float>(std::log(sum) - (z[loss.label] - mx));
  }
  double total = 0.0;
  for (std::size_t k = 0; k < loss.layers.size(); ++k) {
    const Tensor& out = inf.output_of(loss.layers[k]);
    require(out.shape == loss.targets[k].shape, ErrorKind::Shape, "activation target shape mismatch");
    for (std::size_t i = 0; i < out.size(); ++i) {
      double d = static_cast<double>(out[i]) - loss.targets[k][i];
      total += d * d;
    }
  }
  return static_cast<float>(total);
}

namespace {

Tensor backward_layer(const Layer& l, const Tensor& x, const Tensor& dy, Tensor* dw, Tensor* db) {
  Tensor dx(l.in_shape);
  switch (l.kind) {
    case LayerKind::FullyConnected: {
      const std::size_t in = l.in_size(), out = l.out_size();
      for (std::size_t j = 0; j < out; ++j) {
        const float g = dy[j];
        if (g == 0.0f) continue;
        const float* w = l.weights.data.data() + j * in;
        for (std::size_t i = 0; i < in; ++i) dx[i] += w[i] * g;
        if (dw) {
          float* gw = dw->data.data() + j * in;
          for (std::size_t i = 0; i < in; ++i) gw[i] += g * x[i];
          (*db)[j] += g;
        }
      }
      break;
    }
    case LayerKind::Convolution: {
      const std::size_t cin = l.in_shape[0], ih = l.in_shape[1], iw = l.in_shape[2];
      const std::size_t cout = l.out_shape[0], oh = l.out_shape[1], ow = l.out_shape[2], k = l.kernel;
      for (std::size_t co = 0; co < cout; ++co)
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const float g = dy[(co * oh + oy) * ow + ox];
            if (g == 0.0f) continue;
            if (db) (*db)[co] += g;
            for (std::size_t ci = 0; ci < cin; ++ci)
              for (std::size_t ky = 0; ky < k; ++ky) {
                long iy = static_cast<long>(oy * l.stride + ky) - static_cast<long>(l.padding);
                if (iy < 0 || iy >= static_cast<long>(ih)) continue;
                for (std::size_t kx = 0; kx < k; ++kx) {
                  long ix = static_cast<long>(ox * l.stride + kx) - static_cast<long>(l.padding);
                  if (ix < 0 || ix >= static_cast<long>(iw)) continue;
                  std::size_t wi = ((co * cin + ci) * k + ky) * k + kx;
                  std::size_t xi = (ci * ih + static_cast<std::size_t>(iy)) * iw + static_cast<std::size_t>(ix);
                  dx[xi] += l.weights[wi] * g;
                  if (dw) (*dw)[wi] += g * x[xi];
                }
              }
          }
      break;
    }
    case LayerKind::Relu:
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = x[i] > 0.0f ? dy[i] : 0.0f;
      break;
    case LayerKind::MaxPool:
      for (std::size_t o = 0; o < dy.size(); ++o) dx[pool_argmax(l, x, o)] += dy[o];
      break;
    case LayerKind::Flatten:
      dx.data = dy.data;
      break;
  }
  return dx;
}

}  // namespace

Tensor backward(const Network& net, const Inference& inf, const LossSpec& loss, ParamGrads* grads) {
  if (grads && grads->weights.empty()) {
    for (const Layer& l : net.layers()) {
      grads->weights.push_back(l.weighted() ? Tensor(l.weights.shape) : Tensor());
      grads->bias.push_back(l.weighted() ? Tensor(l.bias.shape) : Tensor());
    }
  }
  const std::size_t n = net.size();
  std::vector<Tensor> injected(n);
  if (loss.kind == LossSpec::Kind::CrossEntropy) {
    require(loss.label < net.class_count(), ErrorKind::Bounds, "label out of range");
    auto p = softmax(inf.logits());
    Tensor g(inf.logits().shape);
    for (std::size_t i = 0; i < p.size(); ++i) g[i] = p[i] - (i == loss.label ? 1.0f : 0.0f);
    injected[n - 1] = std::move(g);
  } else {
    for (std::size_t k = 0; k < loss.layers.size(); ++k) {
      std::size_t li = loss.layers[k];
      require(li < n, ErrorKind::Bounds, "activation loss layer out of range");
      const Tensor& out = inf.output_of(li);
      require(out.shape == loss.targets[k].shape, ErrorKind::Shape, "activation target shape mismatch");
      Tensor g(out.shape);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = 2.0f * (out[i] - loss.targets[k][i]);
      if (injected[li].data.empty())
        injected[li] = std::move(g);
      else
        for (std::size_t i = 0; i < g.size(); ++i) injected[li][i] += g[i];
    }
  }
  Tensor dy(net.layers().back().out_shape);
  for (std::size_t i = n; i-- > 0;) {
    if (!injected[i].data.empty())
      for (std::size_t e = 0; e < dy.size(); ++e) dy[e] += injected[i][e];
    const Layer& l = net.layer(i);
    Tensor* dw = grads && l.weighted() ? &grads->weights[i] : nullptr;
    Tensor* db = grads && l.weighted() ? &grads->bias[i] : nullptr;
    dy = backward_layer(l, inf.input_of(i), dy, dw, db);
  }
  return dy;
}

Tensor gradient(const Network& net, const Tensor& input, const LossSpec& loss) {
  Inference inf = infer(net, input);
  return backward(net, inf, loss, nullptr);
}

}  // namespace canary
