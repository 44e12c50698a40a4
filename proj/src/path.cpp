#include "canary/path.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "canary/binio.hpp"
#include "canary/error.hpp"

namespace canary {

ActivationPath ActivationPath::empty_for(const Network& net) {
  ActivationPath p;
  for (auto li : net.weighted()) {
    p.layers.push_back(li);
    p.masks.emplace_back(net.layer(li).in_size());
  }
  return p;
}

std::size_t ActivationPath::popcount() const {
  std::size_t n = 0;
  for (const auto& m : masks) n += m.count();
  return n;
}

std::size_t ActivationPath::capacity() const {
  std::size_t n = 0;
  for (const auto& m : masks) n += m.size();
  return n;
}

void require_same_coverage(const ActivationPath& a, const ActivationPath& b) {
  require(a.layers == b.layers && a.masks.size() == b.masks.size(), ErrorKind::Shape, "activation path coverage differs");
  for (std::size_t i = 0; i < a.masks.size(); ++i)
    require(a.masks[i].size() == b.masks[i].size(), ErrorKind::Shape,
            "activation path length differs at layer " + std::to_string(a.layers[i]));
}

void path_or_into(ActivationPath& acc, const ActivationPath& b) {
  require_same_coverage(acc, b);
  for (std::size_t i = 0; i < acc.masks.size(); ++i) acc.masks[i] |= b.masks[i];
}

ActivationPath path_or(const ActivationPath& a, const ActivationPath& b) {
  ActivationPath out = a;
  path_or_into(out, b);
  return out;
}

// ---------------------------------------------------------------------------
// Config

void ExtractionConfig::validate(std::size_t weighted_count) const {
  require(rules.size() == weighted_count, ErrorKind::Config,
          "extraction config has " + std::to_string(rules.size()) + " layer rules, network has " +
              std::to_string(weighted_count) + " weighted layers");
  require(first < weighted_count, ErrorKind::Config, "boundary layer out of range");
  for (std::size_t w = 0; w < rules.size(); ++w) {
    const LayerRule& r = rules[w];
    require(std::isfinite(r.value), ErrorKind::Config, "threshold of layer " + std::to_string(w) + " is not finite");
    if (r.kind == ThresholdKind::Cumulative)
      require(r.value > 0.0f && r.value <= 1.0f, ErrorKind::Config,
              "cumulative theta of layer " + std::to_string(w) + " must lie in (0, 1]");
    if (direction == Direction::Forward && w >= first && r.emit)
      require(r.kind == ThresholdKind::Absolute, ErrorKind::Config,
              "forward extraction supports absolute thresholds only (layer " + std::to_string(w) + ")");
  }
}

bool ExtractionConfig::uses_cumulative() const {
  for (std::size_t w = first; w < rules.size(); ++w)
    if (rules[w].kind == ThresholdKind::Cumulative) return true;
  return false;
}

bool ExtractionConfig::uses_absolute() const {
  for (std::size_t w = first; w < rules.size(); ++w)
    if (rules[w].kind == ThresholdKind::Absolute) return true;
  return false;
}

std::string ExtractionConfig::serialize() const {
  std::ostringstream os;
  os.precision(9);
  os << "name " << name << "\n";
  os << "direction " << (direction == Direction::Backward ? "backward" : "forward") << "\n";
  os << "first " << first << "\n";
  for (std::size_t w = 0; w < rules.size(); ++w) {
    os << "layer " << w << ' ' << (rules[w].kind == ThresholdKind::Cumulative ? "cumulative" : "absolute") << ' '
       << rules[w].value;
    if (!rules[w].emit) os << " skip";
    os << "\n";
  }
  return os.str();
}

ExtractionConfig ExtractionConfig::parse(const std::string& text) {
  ExtractionConfig c;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  std::vector<bool> bare_skip;
  auto bad = [&](const std::string& msg) { fail(ErrorKind::Config, "config line " + std::to_string(lineno) + ": " + msg); };
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key)) continue;
    if (key == "name") {
      if (!(ls >> c.name)) bad("name needs a value");
    } else if (key == "direction") {
      std::string d;
      ls >> d;
      if (d == "backward") c.direction = Direction::Backward;
      else if (d == "forward") c.direction = Direction::Forward;
      else bad("direction must be backward or forward");
    } else if (key == "first") {
      if (!(ls >> c.first)) bad("first needs a layer index");
    } else if (key == "layer") {
      std::size_t w;
      std::string kind;
      if (!(ls >> w >> kind)) bad("expected: layer <index> <cumulative|absolute|skip> [value] [skip]");
      if (w != c.rules.size()) bad("layer rules must be listed in order starting at 0");
      LayerRule r;
      bool bare = false;
      if (kind == "skip") {
        r.emit = false;
        bare = true;
      } else {
        if (kind == "cumulative") r.kind = ThresholdKind::Cumulative;
        else if (kind == "absolute") r.kind = ThresholdKind::Absolute;
        else bad("unknown threshold kind '" + kind + "'");
        if (!(ls >> r.value)) bad("threshold value missing");
        std::string flag;
        if (ls >> flag) {
          if (flag != "skip") bad("unexpected token '" + flag + "'");
          r.emit = false;
        }
      }
      c.rules.push_back(r);
      bare_skip.push_back(bare);
    } else {
      bad("unknown key '" + key + "'");
    }
  }
  // A bare `skip` borrows the propagation rule of the nearest later layer.
  for (std::size_t w = c.rules.size(); w-- > 0;) {
    if (!bare_skip[w]) continue;
    if (w + 1 < c.rules.size()) {
      c.rules[w].kind = c.rules[w + 1].kind;
      c.rules[w].value = c.rules[w + 1].value;
    }
  }
  if (c.rules.empty()) fail(ErrorKind::Config, "config lists no layer rules");
  return c;
}

ExtractionConfig load_config(const std::string& path) { return ExtractionConfig::parse(binio::read_text(path)); }

void save_config(const ExtractionConfig& c, const std::string& path) { binio::write_text(path, c.serialize()); }

ExtractionConfig make_variant(const std::string& name, std::size_t weighted_count, float theta, float phi) {
  require(weighted_count > 0, ErrorKind::Config, "network has no weighted layers");
  ExtractionConfig c;
  c.name = name;
  LayerRule cu{ThresholdKind::Cumulative, theta, true};
  LayerRule ab{ThresholdKind::Absolute, phi, true};
  if (name == "BwCu") {
    c.rules.assign(weighted_count, cu);
  } else if (name == "BwAb") {
    c.rules.assign(weighted_count, ab);
  } else if (name == "FwAb") {
    c.direction = Direction::Forward;
    c.rules.assign(weighted_count, ab);
  } else if (name == "Hybrid") {
    for (std::size_t w = 0; w < weighted_count; ++w) c.rules.push_back(w < weighted_count / 2 ? ab : cu);
  } else {
    fail(ErrorKind::Config, "unknown variant '" + name + "' (expected BwCu, BwAb, FwAb or Hybrid)");
  }
  return c;
}

// ---------------------------------------------------------------------------
// Per-neuron selection

bool psum_ranks_before(const PartialSum& a, const PartialSum& b) {
  if (a.value != b.value) return a.value > b.value;
  return a.input < b.input;
}

std::size_t cumulative_prefix(const std::vector<PartialSum>& ranked, float need) {
  float acc = 0.0f, best = 0.0f;
  std::size_t best_len = 0;
  for (std::size_t k = 0; k < ranked.size(); ++k) {
    acc += ranked[k].value;
    if (acc >= need) return k + 1;
    if (acc > best) best = acc, best_len = k + 1;
  }
  return best_len;
}

std::vector<std::uint32_t> select_cumulative(const std::vector<PartialSum>& psums, float theta, float target) {
  if (!(target > 0.0f)) return {};
  std::vector<PartialSum> ranked = psums;
  std::sort(ranked.begin(), ranked.end(), psum_ranks_before);
  std::size_t k = cumulative_prefix(ranked, theta * target);
  std::vector<std::uint32_t> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(ranked[i].input);
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::uint32_t> select_absolute(const std::vector<PartialSum>& psums, float phi) {
  std::vector<std::uint32_t> out;
  for (const auto& p : psums)
    if (p.value > phi) out.push_back(p.input);
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// Paths

ActivationPath extract_path_backward(const Network& net, const Inference& inf, const ExtractionConfig& cfg,
                                     ExtractionStats* stats) {
  require(cfg.direction == Direction::Backward, ErrorKind::Config, "config '" + cfg.name + "' is not backward");
  cfg.validate(net.weighted_count());
  const std::size_t n = net.weighted_count();
  ActivationPath path = ActivationPath::empty_for(net);
  if (stats) *stats = ExtractionStats{std::vector<std::size_t>(n), std::vector<std::size_t>(n), 0, 0};

  std::vector<std::size_t> important{inf.predicted};
  for (std::size_t w = n; w-- > cfg.first;) {
    const std::size_t li = net.weighted_layer(w);
    const LayerRule& rule = cfg.rules[w];
    Bits sel(net.layer(li).in_size());
    for (auto o : important) {
      PartialSumRecord rec = recompute_psums(net, inf, li, o);
      auto picked = rule.kind == ThresholdKind::Cumulative
                        ? select_cumulative(rec.psums, rule.value, inf.output_of(li)[o])
                        : select_absolute(rec.psums, rule.value);
      for (auto i : picked) sel.set(i);
      if (stats && rule.kind == ThresholdKind::Cumulative) stats->psums_consumed += rec.psums.size();
    }
    if (stats) {
      stats->important_outputs[w] = important.size();
      stats->selected_inputs[w] = sel.count();
      if (rule.kind == ThresholdKind::Cumulative)
        for (std::size_t o = 0; o < net.layer(li).out_size(); ++o)
          stats->psums_stored += recompute_psums(net, inf, li, o).psums.size();
    }
    if (rule.emit) path.masks[w] = sel;
    if (w == cfg.first) break;
    important.clear();
    for (auto i = sel.find_first(); i != Bits::npos; i = sel.find_next(i))
      important.push_back(*trace_to_producer(net, inf, li, i));
    std::sort(important.begin(), important.end());
    important.erase(std::unique(important.begin(), important.end()), important.end());
  }
  return path;
}

Bits extract_forward_layer(const Network& net, const Inference& inf, const ExtractionConfig& cfg, std::size_t w) {
  const std::size_t li = net.weighted_layer(w);
  const Tensor& x = inf.input_of(li);
  Bits m(x.size());
  const float phi = cfg.rules.at(w).value;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i] > phi) m.set(i);
  return m;
}

ActivationPath extract_path_forward(const Network& net, const Inference& inf, const ExtractionConfig& cfg) {
  require(cfg.direction == Direction::Forward, ErrorKind::Config, "config '" + cfg.name + "' is not forward");
  cfg.validate(net.weighted_count());
  ActivationPath path = ActivationPath::empty_for(net);
  for (std::size_t w = cfg.first; w < net.weighted_count(); ++w) {
    if (net.weighted_layer(w) >= inf.activations.size()) break;
    if (cfg.rules[w].emit) path.masks[w] = extract_forward_layer(net, inf, cfg, w);
  }
  return path;
}

ActivationPath extract_path(const Network& net, const Inference& inf, const ExtractionConfig& cfg,
                            ExtractionStats* stats) {
  if (cfg.direction == Direction::Forward) return extract_path_forward(net, inf, cfg);
  return extract_path_backward(net, inf, cfg, stats);
}

}  // namespace canary
