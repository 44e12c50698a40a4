#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "canary/network.hpp"

namespace canary {

/// Model archive: `<name>.json` manifest (layer kinds, shapes, strides,
/// padding, class count) plus `<name>.bin` sidecar holding `PTWT`, a u16
/// version and every weight/bias tensor as little-endian f32, in manifest order.
void save_model(const Network& net, const std::filesystem::path& manifest);
Network load_model(const std::filesystem::path& manifest);

/// Single raw tensor blob: `PTWT`, u16 version, u32 rank, u32 dims..., f32 data.
void save_tensor(const Tensor& t, const std::filesystem::path& path);
Tensor load_tensor(const std::filesystem::path& path);

struct LabeledSample {
  Tensor input;
  std::size_t label = 0;
};

/// Dataset directory: `manifest.json` listing `{file, label}` entries plus one
/// tensor blob per sample.
void save_dataset(const std::vector<LabeledSample>& samples, const std::filesystem::path& dir);
std::vector<LabeledSample> load_dataset(const std::filesystem::path& dir);

}  // namespace canary
