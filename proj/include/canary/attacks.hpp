#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "canary/model_io.hpp"
#include "canary/network.hpp"

namespace canary {

enum class AttackKind { Fgsm, Bim, AdaptivePgd };

std::string to_string(AttackKind k);
AttackKind attack_kind_from_string(const std::string& s);

struct AdversarialSample {
  AttackKind kind = AttackKind::Fgsm;
  Tensor adversarial;
  Tensor original;
  std::size_t original_class = 0;
  std::size_t predicted = 0;       // class predicted for the adversarial input
  std::size_t target_class = 0;    // adaptive attack only
  float epsilon = 0.0f;            // L-infinity budget; 0 for the unbounded adaptive attack
  double mse = 0.0;
  bool success = false;
  std::vector<float> loss_trace;   // adaptive attack: loss after every accepted step, starting with the initial loss
};

/// Pixel domain every attack output is clamped to.
inline constexpr float kPixelMin = 0.0f;
inline constexpr float kPixelMax = 1.0f;

double mse(const Tensor& a, const Tensor& b);

AdversarialSample fgsm(const Network& net, const Tensor& x, std::size_t label, float epsilon);

/// `iters` signed-gradient steps of size `alpha`, re-projected onto the
/// epsilon ball and the pixel domain after each one.
AdversarialSample bim(const Network& net, const Tensor& x, std::size_t label, float epsilon, float alpha,
                      std::size_t iters);

struct AdaptiveOptions {
  std::vector<std::size_t> layers;  // network-layer indices whose outputs are matched
  std::size_t targets = 5;
  std::size_t steps = 200;
  float step_size = 0.02f;
  std::uint64_t seed = 1;
};

/// Network-layer indices of the last n weighted layers (the AT_n layer set).
std::vector<std::size_t> last_weighted_layers(const Network& net, std::size_t n);

/// PGD on the activation-matching L2 loss toward benign targets drawn from
/// `pool` (classes other than `label`, spread over as many distinct classes as
/// the pool offers). Signed-gradient steps are accepted only when the loss
/// drops; a rejected step halves the step size. Projection is onto the pixel
/// domain only. Returns the candidate with the smallest final loss.
AdversarialSample adaptive_pgd(const Network& net, const Tensor& x, std::size_t label,
                               const std::vector<LabeledSample>& pool, const AdaptiveOptions& opt);

/// On-disk adversarial set: `manifest.json` with one entry per sample
/// (file, original_class, attack, epsilon, mse, predicted) plus tensor blobs.
struct AdversarialRecord {
  Tensor input;
  std::size_t original_class = 0;
  std::string attack;
  float epsilon = 0.0f;
  double mse = 0.0;
  std::size_t predicted = 0;
};

void save_adversarial_set(const std::vector<AdversarialSample>& samples, const std::filesystem::path& dir);
std::vector<AdversarialRecord> load_adversarial_set(const std::filesystem::path& dir);

}  // namespace canary
