#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace canary {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major float tensor.
struct Tensor {
  Shape shape;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(Shape s, float fill = 0.0f);
  Tensor(Shape s, std::vector<float> values);

  std::size_t size() const { return data.size(); }
  float& operator[](std::size_t i) { return data[i]; }
  float operator[](std::size_t i) const { return data[i]; }

  bool all_finite() const;
  bool operator==(const Tensor&) const = default;
};

}  // namespace canary
