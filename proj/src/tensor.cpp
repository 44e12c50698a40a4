#include "canary/tensor.hpp"

#include <cmath>
#include <sstream>

#include "canary/error.hpp"

namespace canary {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return shape.empty() ? 0 : n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape s, float fill) : shape(std::move(s)) {
  for (auto d : shape) require(d > 0, ErrorKind::Shape, "tensor dimension must be positive");
  data.assign(shape_size(shape), fill);
}

Tensor::Tensor(Shape s, std::vector<float> values) : shape(std::move(s)), data(std::move(values)) {
  for (auto d : shape) require(d > 0, ErrorKind::Shape, "tensor dimension must be positive");
  require(shape_size(shape) == data.size(), ErrorKind::Shape,
          "tensor data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
}

bool Tensor::all_finite() const {
  for (float v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace canary
