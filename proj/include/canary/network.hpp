#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "canary/tensor.hpp"

namespace canary {

enum class LayerKind { FullyConnected, Convolution, Relu, MaxPool, Flatten };

std::string to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& s);

/// One network layer. Convolution and pooling operate on [C, H, W] maps;
/// fully-connected layers take a flat [N] vector.
///
/// Weight layouts: FC [out, in]; convolution [cout, cin, k, k]. Convolution
/// uses square kernels with zero padding; max-pool uses square windows.
struct Layer {
  LayerKind kind = LayerKind::Relu;
  Shape in_shape;
  Shape out_shape;
  Tensor weights;
  Tensor bias;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;

  bool weighted() const { return kind == LayerKind::FullyConnected || kind == LayerKind::Convolution; }
  std::size_t in_size() const { return shape_size(in_shape); }
  std::size_t out_size() const { return shape_size(out_shape); }
  /// Receptive-field capacity of one output neuron (before padding is clipped).
  std::size_t fan_in() const;
};

Layer make_fc(std::size_t in, std::size_t out);
Layer make_conv(const Shape& in_shape, std::size_t out_channels, std::size_t kernel, std::size_t stride = 1,
                std::size_t padding = 0);
Layer make_relu(const Shape& shape);
Layer make_maxpool(const Shape& in_shape, std::size_t size, std::size_t stride);
Layer make_flatten(const Shape& in_shape);

/// An ordered stack of layers ending in a fully-connected classifier.
class Network {
 public:
  Network() = default;
  Network(std::vector<Layer> layers, std::size_t class_count);

  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& mutable_layers() { return layers_; }
  const Layer& layer(std::size_t i) const { return layers_.at(i); }
  std::size_t size() const { return layers_.size(); }
  std::size_t class_count() const { return class_count_; }
  const Shape& input_shape() const { return layers_.front().in_shape; }

  /// Network-layer indices of the FC / convolution layers, in order.
  const std::vector<std::size_t>& weighted() const { return weighted_; }
  std::size_t weighted_count() const { return weighted_.size(); }
  /// Network-layer index of the w-th weighted layer.
  std::size_t weighted_layer(std::size_t w) const { return weighted_.at(w); }
  /// Inverse of weighted_layer; nullopt for unweighted layers.
  std::optional<std::size_t> weighted_index(std::size_t layer) const;

  /// 64-bit digest of architecture and parameters.
  std::uint64_t digest() const;

 private:
  void validate() const;

  std::vector<Layer> layers_;
  std::size_t class_count_ = 0;
  std::vector<std::size_t> weighted_;
};

/// Per-layer values of one forward pass: values[0] is the input and
/// values[i + 1] the output of layer i.
struct Inference {
  std::size_t predicted = 0;
  std::vector<Tensor> activations;

  const Tensor& input_of(std::size_t layer) const { return activations.at(layer); }
  const Tensor& output_of(std::size_t layer) const { return activations.at(layer + 1); }
  const Tensor& logits() const { return activations.back(); }
};

struct PartialSum {
  std::uint32_t input = 0;  // flat offset into the layer input
  float value = 0.0f;
  bool operator==(const PartialSum&) const = default;
};

/// Contributions of every input neuron in one output neuron's receptive field.
/// Padding positions and zero weights carry no entry. The bias is kept apart:
/// it is not an input neuron and can never be selected as important.
struct PartialSumRecord {
  std::size_t layer = 0;
  std::size_t output = 0;
  std::vector<PartialSum> psums;
  float bias = 0.0f;

  /// Sum of psums followed by the bias, in record order; matches inference exactly.
  float preactivation() const;
  bool operator==(const PartialSumRecord&) const = default;
};

Inference infer(const Network& net, const Tensor& input);

/// Index of the largest element; the lowest index wins ties.
std::size_t argmax(const Tensor& t);

struct PsumInference {
  Inference inference;
  std::vector<PartialSumRecord> records;  // grouped by layer, then output neuron
};

/// Inference that also captures psum records for the requested (weighted) layers.
PsumInference infer_with_psums(const Network& net, const Tensor& input, const std::set<std::size_t>& layers);

/// Recomputes one output neuron's record from stored activations.
PartialSumRecord recompute_psums(const Network& net, const Inference& inf, std::size_t layer, std::size_t output);

/// Evaluates a single layer on its input.
Tensor forward_layer(const Layer& layer, const Tensor& input);

/// Maps an element of layer `layer`'s input back through the unweighted layers
/// in front of it to the output neuron of the nearest preceding weighted layer
/// that produced it. Max-pool routes through its argmax input (lowest offset on ties).
/// Returns nullopt when no weighted layer precedes `layer`.
std::optional<std::size_t> trace_to_producer(const Network& net, const Inference& inf, std::size_t layer,
                                             std::size_t input_offset);

// ---------------------------------------------------------------------------
// Gradients

struct LossSpec {
  enum class Kind { CrossEntropy, ActivationL2 } kind = Kind::CrossEntropy;
  std::size_t label = 0;
  /// For ActivationL2: network-layer indices whose outputs are matched, and the
  /// target output tensors in the same order.
  std::vector<std::size_t> layers;
  std::vector<Tensor> targets;

  static LossSpec cross_entropy(std::size_t label);
  static LossSpec activation_l2(std::vector<std::size_t> layers, std::vector<Tensor> targets);
};

float loss_value(const Network& net, const Inference& inf, const LossSpec& loss);

/// d(loss)/d(input).
Tensor gradient(const Network& net, const Tensor& input, const LossSpec& loss);

struct ParamGrads {
  std::vector<Tensor> weights;  // per network layer; empty tensors for unweighted layers
  std::vector<Tensor> bias;
};

/// Full backward pass: returns d(loss)/d(input) and accumulates parameter
/// gradients into `grads` when non-null.
Tensor backward(const Network& net, const Inference& inf, const LossSpec& loss, ParamGrads* grads);

std::vector<float> softmax(const Tensor& logits);

}  // namespace canary
