#include "canary/compiler.hpp"

#include <algorithm>
#include <bit>
#include <map>
#include <set>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "canary/error.hpp"

namespace canary {

std::string to_string(Region r) {
  switch (r) {
    case Region::Input: return "IN";
    case Region::Weights: return "W";
    case Region::Pre: return "PRE";
    case Region::Psum: return "PB";
    case Region::Sel: return "SEL";
    case Region::Path: return "AP";
    case Region::ClassPaths: return "CP";
    case Region::Config: return "CFG";
    case Region::Scratch: return "SCR";
    case Region::Null: return "NULL";
    case Region::Pred: return "PRED";
  }
  return "?";
}

std::string to_string(UnitKind k) {
  switch (k) {
    case UnitKind::Inference: return "inference";
    case UnitKind::Extraction: return "extraction";
    case UnitKind::Emit: return "emit";
    case UnitKind::Classify: return "classify";
  }
  return "?";
}

// ---------------------------------------------------------------- memory map

namespace {

constexpr std::uint32_t kFamilyBits = 28;
constexpr std::uint32_t kFamilySize = 1u << kFamilyBits;

std::uint32_t family_base(Region r) { return static_cast<std::uint32_t>(r) << kFamilyBits; }

bool per_layer(Region r) {
  return r == Region::Input || r == Region::Weights || r == Region::Pre || r == Region::Psum || r == Region::Sel;
}

}  // namespace

MemoryMap MemoryMap::for_network(const Network& net) {
  MemoryMap m;
  m.layers = net.weighted_count();
  std::uint64_t largest = 64;
  for (std::size_t w = 0; w < m.layers; ++w) {
    const Layer& l = net.layer(net.weighted_layer(w));
    m.in_size.push_back(l.in_size());
    m.out_size.push_back(l.out_size());
    m.max_fan_in = std::max(m.max_fan_in, l.fan_in());
  }
  for (std::size_t w = 0; w < m.layers; ++w) {
    const Layer& l = net.layer(net.weighted_layer(w));
    largest = std::max<std::uint64_t>(largest, 4ull * m.in_size[w]);
    largest = std::max<std::uint64_t>(largest, 4ull * (l.weights.size() + l.bias.size()));
    largest = std::max<std::uint64_t>(largest, static_cast<std::uint64_t>(m.out_size[w]) * m.record_stride());
  }
  largest = std::max<std::uint64_t>(largest, 4ull * net.class_count());
  std::uint64_t s = std::bit_ceil(largest);
  require(s * (m.layers + 1) <= kFamilySize, ErrorKind::Config,
          fmt::format("network needs {} bytes per layer region; too large for the modeled address space", s));
  m.stride = static_cast<std::uint32_t>(s);
  return m;
}

std::uint32_t MemoryMap::record_stride() const { return static_cast<std::uint32_t>(8 + 4 * max_fan_in); }

std::uint32_t MemoryMap::address(Region r, std::size_t layer) const {
  if (r == Region::Sel) {
    require(layer <= layers, ErrorKind::Bounds, "SEL layer out of range");
    return family_base(r) + static_cast<std::uint32_t>(layers - layer) * stride;
  }
  if (per_layer(r)) {
    std::size_t limit = r == Region::Input ? layers : layers - 1;
    require(layer <= limit, ErrorKind::Bounds, to_string(r) + " layer out of range");
    return family_base(r) + static_cast<std::uint32_t>(layer) * stride;
  }
  if (r == Region::Scratch) return family_base(r) + static_cast<std::uint32_t>(layer) * stride;
  return family_base(r);
}

std::uint32_t MemoryMap::neuron(std::size_t w, std::size_t o) const {
  require(o < out_size.at(w), ErrorKind::Bounds, "neuron index out of range");
  return address(Region::Pre, w) + static_cast<std::uint32_t>(4 * o);
}

std::uint32_t MemoryMap::record(std::size_t w, std::size_t o) const {
  require(o < out_size.at(w), ErrorKind::Bounds, "record index out of range");
  return address(Region::Psum, w) + static_cast<std::uint32_t>(o) * record_stride();
}

std::optional<MemoryMap::Location> MemoryMap::locate(std::uint32_t addr) const {
  auto fam = addr >> kFamilyBits;
  if (fam < static_cast<std::uint32_t>(Region::Input) || fam > static_cast<std::uint32_t>(Region::Pred)) return std::nullopt;
  auto r = static_cast<Region>(fam);
  std::uint32_t rel = addr - family_base(r);
  if (per_layer(r) || r == Region::Scratch) {
    std::size_t idx = rel / stride;
    std::uint32_t off = rel % stride;
    if (r == Region::Sel) {
      if (idx > layers) return std::nullopt;
      return Location{r, layers - idx, off};
    }
    std::size_t limit = r == Region::Input ? layers : r == Region::Scratch ? 1 : layers - 1;
    if (idx > limit) return std::nullopt;
    return Location{r, idx, off};
  }
  if (rel >= stride) return std::nullopt;
  return Location{r, 0, rel};
}

CompileOptions parse_opt_level(const std::string& s) {
  if (s == "none") return {};
  if (s == "layers") return {true, false, false};
  if (s == "neurons") return {false, true, false};
  if (s == "recompute") return {false, false, true};
  if (s == "all") return {true, true, true};
  fail(ErrorKind::Config, "unknown optimization level '" + s + "' (expected none, layers, neurons, recompute or all)");
}

// ---------------------------------------------------------------- lowering

namespace {

class Emitter {
 public:
  void set(const std::string& name, std::uint32_t v, const std::string& note = "") {
    consts_ += fmt::format(".set {} 0x{:08x}{}\n", name, v, note.empty() ? "" : "  ; " + note);
  }
  void setf(const std::string& name, float v) { set(name, std::bit_cast<std::uint32_t>(v), fmt::format("{}", v)); }
  void comment(const std::string& c) { body_ += "; " + c + "\n"; }
  void label(const std::string& l) { body_ += "<" + l + ">\n"; }
  void op(const std::string& s) {
    body_ += s + "\n";
    ++count_;
  }
  std::size_t pc() const { return count_; }
  std::string text() const { return consts_ + body_; }

 private:
  std::string consts_, body_;
  std::size_t count_ = 0;
};

struct Segment {
  std::size_t hi, lo;  // layers hi down to lo, inclusive
  LayerRule rule;
};

std::vector<Segment> backward_segments(const ExtractionConfig& cfg, std::size_t n) {
  std::vector<Segment> segs;
  for (std::size_t w = n; w-- > cfg.first;) {
    const LayerRule& r = cfg.rules[w];
    if (!segs.empty() && segs.back().rule.kind == r.kind && segs.back().rule.value == r.value) segs.back().lo = w;
    else segs.push_back({w, w, r});
  }
  return segs;
}

bool spills_psums(const ExtractionConfig& cfg, std::size_t w) {
  return cfg.direction == Direction::Backward && w >= cfg.first && cfg.rules[w].kind == ThresholdKind::Cumulative;
}

bool writes_masks(const ExtractionConfig& cfg, std::size_t w) {
  return cfg.direction == Direction::Backward && w >= cfg.first && cfg.rules[w].kind == ThresholdKind::Absolute;
}

void link_dependencies(std::vector<ScheduleUnit>& units) {
  for (std::size_t i = 0; i < units.size(); ++i) {
    std::set<std::size_t> deps;
    for (const auto& r : units[i].reads)
      for (std::size_t j = i; j-- > 0;)
        if (std::find(units[j].writes.begin(), units[j].writes.end(), r) != units[j].writes.end()) {
          deps.insert(j);
          break;
        }
    units[i].deps.assign(deps.begin(), deps.end());
  }
}

ScheduleUnit inference_unit(const ExtractionConfig* cfg, const MemoryMap& m, std::size_t w, std::size_t b,
                            std::size_t e) {
  ScheduleUnit u;
  u.kind = UnitKind::Inference;
  u.layer = w;
  u.begin = b, u.end = e;
  u.reads = {{Region::Input, w}, {Region::Weights, w}};
  u.writes = {{Region::Pre, w}, {Region::Input, w + 1}};
  if (w + 1 == m.layers) u.writes.push_back({Region::Pred, 0}), u.writes.push_back({Region::Sel, m.layers});
  if (cfg && (spills_psums(*cfg, w) || writes_masks(*cfg, w))) u.writes.push_back({Region::Psum, w});
  return u;
}

ScheduleUnit classify_unit(const MemoryMap& m, std::size_t b, std::size_t e) {
  ScheduleUnit u;
  u.kind = UnitKind::Classify;
  u.begin = b, u.end = e;
  u.reads = {{Region::ClassPaths, 0}, {Region::Pred, 0}};
  for (std::size_t w = 0; w < m.layers; ++w) u.reads.push_back({Region::Path, w});
  return u;
}

// Inference blocks shared by forward and inference-only programs.
void emit_inference_block(Emitter& em, std::size_t w) {
  em.op(fmt::format("mov r10, w{}", w));
  em.op(fmt::format("mov r12, pre{}", w));
  em.op("inf r9, r10, r12");
}

CompiledProgram lower_forward(const MemoryMap& m, const ExtractionConfig* cfg, CompileOptions opt) {
  CompiledProgram out;
  out.map = m;
  out.options = opt;
  Emitter em;
  std::vector<ScheduleUnit> units;
  const std::size_t n = m.layers;
  for (std::size_t w = 0; w < n; ++w) {
    em.set(fmt::format("in{}", w), m.address(Region::Input, w));
    em.set(fmt::format("w{}", w), m.address(Region::Weights, w));
    em.set(fmt::format("pre{}", w), m.address(Region::Pre, w));
  }
  if (cfg) {
    em.set("path", m.address(Region::Path));
    em.set("cpaths", m.address(Region::ClassPaths));
    em.op("mov r0, path");
  }
  for (std::size_t w = 0; w < n; ++w) {
    bool ext = cfg && w >= cfg->first && cfg->rules[w].emit;
    // Without layer pipelining the mask of a layer's input is taken before
    // the layer runs, so its wait on the previous layer blocks this layer's
    // setup. Pipelining issues the layer first (layer 0 has nothing to overlap).
    bool ext_after = ext && opt.layers && w > 0;
    em.comment(fmt::format("layer {}", w));
    em.op(fmt::format("mov r9, in{}", w));
    ScheduleUnit x;
    if (ext) {
      x.kind = UnitKind::Extraction;
      x.layer = w;
      x.reads = {{Region::Input, w}, {Region::Config, 0}};
      x.writes = {{Region::Path, w}};
    }
    if (ext && !ext_after) {
      x.begin = em.pc();
      em.op("genmasks r9, r0");
      x.end = em.pc();
      units.push_back(x);
    }
    std::size_t b = em.pc();
    emit_inference_block(em, w);
    units.push_back(inference_unit(nullptr, m, w, b, em.pc()));
    if (ext_after) {
      x.begin = em.pc();
      em.op("genmasks r9, r0");
      x.end = em.pc();
      units.push_back(x);
    }
  }
  if (cfg) {
    std::size_t b = em.pc();
    em.op("mov r1, cpaths");
    em.op("cls r1, r0, r4");
    units.push_back(classify_unit(m, b, em.pc()));
    out.config = *cfg;
  } else {
    out.inference_only = true;
  }
  em.op("halt");
  link_dependencies(units);
  out.units = std::move(units);
  out.assembly = em.text();
  out.program = isa::assemble(out.assembly);
  return out;
}

void emit_cumulative_neuron(Emitter& em, const std::string& theta, bool recompute, int a_neuron, int a_need,
                            int a_rec, int a_scr) {
  em.op(fmt::format("findneuron r2, r7, r{}", a_neuron));
  em.op(fmt::format("mov r{}, {}", a_need, theta));
  em.op(fmt::format("mul r{}, (r{})", a_need, a_neuron));
  em.op(fmt::format("findrf r{}, r{}", a_neuron, a_rec));
  if (recompute) em.op(fmt::format("csps r{}, r2, r{}", a_neuron, a_rec));
  em.op(fmt::format("sort r{}, r3, r{}", a_rec, a_scr));
}

CompiledProgram lower_backward(const MemoryMap& m, const ExtractionConfig& cfg, CompileOptions opt) {
  CompiledProgram out;
  out.map = m;
  out.options = opt;
  out.config = cfg;
  Emitter em;
  std::vector<ScheduleUnit> units;
  const std::size_t n = m.layers;
  auto segs = backward_segments(cfg, n);
  bool cumulative = false;
  bool spill = false;
  for (std::size_t w = cfg.first; w < n; ++w) {
    if (cfg.rules[w].kind == ThresholdKind::Cumulative) cumulative = true;
    if (spills_psums(cfg, w) && !opt.recompute) spill = true;
  }

  em.set("step", m.step(), fmt::format("-{}", m.stride));
  em.set("in0", m.address(Region::Input, 0));
  em.set("w0", m.address(Region::Weights, 0));
  em.set("pre0", m.address(Region::Pre, 0));
  if (spill) em.set("pb0", m.address(Region::Psum, 0));
  em.set("nlayers", static_cast<std::uint32_t>(n));
  em.set("top", static_cast<std::uint32_t>(n - 1));
  em.set("seln", m.address(Region::Sel, n));
  em.set("one", 1);
  if (cumulative) {
    em.set("rfmax", static_cast<std::uint32_t>(m.max_fan_in));
    em.set("scr0", m.address(Region::Scratch, 0));
    if (opt.neurons) em.set("scr1", m.address(Region::Scratch, 1));
  }
  em.set("path", m.address(Region::Path));
  em.set("cpaths", m.address(Region::ClassPaths));

  em.comment("inference");
  em.op("mov r8, step");
  em.op("mov r9, in0");
  em.op("mov r10, w0");
  em.op("mov r12, pre0");
  if (spill) em.op("mov r14, pb0");
  em.op("mov r11, nlayers");
  std::size_t loop_b = em.pc();
  em.label("infer");
  em.op(spill ? "infsp r9, r10, r12, r14" : "inf r9, r10, r12");
  em.op("dec r9, r8");
  em.op("dec r10, r8");
  em.op("dec r12, r8");
  if (spill) em.op("dec r14, r8");
  em.op("dec r11");
  em.op("jne <infer>");
  for (std::size_t w = 0; w < n; ++w) {
    ScheduleUnit u = inference_unit(&cfg, m, w, loop_b, em.pc());
    if (opt.recompute && spills_psums(cfg, w))
      u.writes.erase(std::remove(u.writes.begin(), u.writes.end(), RegionRef{Region::Psum, w}), u.writes.end());
    units.push_back(u);
  }

  em.comment("backward extraction");
  em.op("mov r2, top");
  em.op("mov r13, seln");
  if (cumulative) {
    em.op("mov r3, rfmax");
    em.op("mov r6, scr0");
    if (opt.neurons) em.op("mov r14, scr1");
  }
  for (std::size_t s = 0; s < segs.size(); ++s) {
    const Segment& g = segs[s];
    bool cu = g.rule.kind == ThresholdKind::Cumulative;
    std::string theta = fmt::format("theta{}", s);
    em.set(fmt::format("len{}", s), static_cast<std::uint32_t>(g.hi - g.lo + 1));
    if (cu) em.setf(theta, g.rule.value);
    em.comment(fmt::format("layers {}..{} {} {}", g.hi, g.lo, cu ? "cumulative" : "absolute", g.rule.value));
    std::size_t b = em.pc();
    em.op(fmt::format("mov r11, len{}", s));
    em.label(fmt::format("layer{}", s));
    em.op("mov r7, one");
    em.op("mul r7, (r13)");
    em.label(fmt::format("neuron{}", s));
    if (cu && opt.neurons) {
      emit_cumulative_neuron(em, theta, opt.recompute, 4, 5, 1, 6);
      em.op("dec r7");
      emit_cumulative_neuron(em, theta, opt.recompute, 9, 10, 12, 14);
      em.op("acum r6, r1, r5");
      em.op("acum r14, r12, r10");
    } else if (cu) {
      emit_cumulative_neuron(em, theta, opt.recompute, 4, 5, 1, 6);
      em.op("acum r6, r1, r5");
    } else {
      em.op("findneuron r2, r7, r4");
      em.op("findrf r4, r1");
      em.op("genmasks r1, r1");
    }
    em.op("dec r7");
    em.op(fmt::format("jne <neuron{}>", s));
    em.op("dec r13, r8");
    em.op("dec r2");
    em.op("dec r11");
    em.op(fmt::format("jne <layer{}>", s));
    for (std::size_t w = g.hi + 1; w-- > g.lo;) {
      ScheduleUnit u;
      u.kind = UnitKind::Extraction;
      u.layer = w;
      u.begin = b, u.end = em.pc();
      u.reads = {{Region::Sel, w + 1}, {Region::Pre, w}};
      if (cu && opt.recompute) {
        u.reads.push_back({Region::Input, w});
        u.reads.push_back({Region::Weights, w});
        u.writes.push_back({Region::Psum, w});
      } else {
        u.reads.push_back({Region::Psum, w});
      }
      u.writes.push_back({Region::Sel, w});
      units.push_back(u);
    }
  }

  em.comment("emit and classify");
  std::size_t eb = em.pc();
  em.op("mov r0, path");
  em.op("genmasks r13, r0");
  ScheduleUnit emit;
  emit.kind = UnitKind::Emit;
  emit.begin = eb, emit.end = em.pc();
  emit.reads.push_back({Region::Config, 0});
  for (std::size_t w = cfg.first; w < n; ++w) {
    emit.reads.push_back({Region::Sel, w});
    emit.writes.push_back({Region::Path, w});
  }
  units.push_back(emit);
  std::size_t cb = em.pc();
  em.op("mov r1, cpaths");
  em.op("cls r1, r0, r4");
  units.push_back(classify_unit(m, cb, em.pc()));
  em.op("halt");
  link_dependencies(units);
  out.units = std::move(units);
  out.assembly = em.text();
  out.program = isa::assemble(out.assembly);
  return out;
}

CompiledProgram relower(const CompiledProgram& p, CompileOptions opt) {
  if (p.config.direction == Direction::Forward) return lower_forward(p.map, &p.config, opt);
  return lower_backward(p.map, p.config, opt);
}

}  // namespace

CompiledProgram lower(const Network& net, const ExtractionConfig& cfg, CompileOptions opt) {
  cfg.validate(net.weighted_count());
  MemoryMap m = MemoryMap::for_network(net);
  if (cfg.direction == Direction::Forward) {
    require(!opt.neurons && !opt.recompute, ErrorKind::Config,
            "neuron pipelining and psum recomputation need cumulative backward layers");
    return lower_forward(m, &cfg, opt);
  }
  require(!opt.layers, ErrorKind::Config, "layer pipelining applies to forward extraction only");
  bool cumulative = false;
  for (std::size_t w = cfg.first; w < cfg.rules.size(); ++w)
    cumulative |= cfg.rules[w].kind == ThresholdKind::Cumulative;
  require(cumulative || (!opt.neurons && !opt.recompute), ErrorKind::Config,
          "neuron pipelining and psum recomputation need cumulative backward layers");
  return lower_backward(m, cfg, opt);
}

CompiledProgram lower_inference_only(const Network& net) {
  return lower_forward(MemoryMap::for_network(net), nullptr, {});
}

CompiledProgram pipeline_layers(const CompiledProgram& p) {
  if (p.inference_only || p.options.layers) return p;
  if (p.config.direction == Direction::Backward) {
    spdlog::warn("layer pipelining skipped: backward extraction starts only after inference finishes");
    return p;
  }
  CompileOptions o = p.options;
  o.layers = true;
  return relower(p, o);
}

namespace {

bool has_cumulative(const CompiledProgram& p) {
  if (p.inference_only || p.config.direction == Direction::Forward) return false;
  for (std::size_t w = p.config.first; w < p.config.rules.size(); ++w)
    if (p.config.rules[w].kind == ThresholdKind::Cumulative) return true;
  return false;
}

}  // namespace

CompiledProgram pipeline_neurons(const CompiledProgram& p) {
  if (!has_cumulative(p) || p.options.neurons) return p;
  CompileOptions o = p.options;
  o.neurons = true;
  return relower(p, o);
}

CompiledProgram recompute_transform(const CompiledProgram& p) {
  if (!has_cumulative(p) || p.options.recompute) return p;
  CompileOptions o = p.options;
  o.recompute = true;
  return relower(p, o);
}

CompiledProgram compile(const Network& net, const ExtractionConfig& cfg, const CompileOptions& opt) {
  CompiledProgram p = lower(net, cfg, {});
  if (opt.recompute) p = recompute_transform(p);
  if (opt.neurons) p = pipeline_neurons(p);
  if (opt.layers && p.config.direction == Direction::Forward) p = pipeline_layers(p);
  return p;
}

std::vector<std::string> check_dependencies(const CompiledProgram& p) {
  std::vector<std::string> problems;
  const auto& u = p.units;
  auto preloaded = [&](const RegionRef& r) {
    switch (r.first) {
      case Region::Weights:
      case Region::ClassPaths:
      case Region::Config:
      case Region::Path:
      case Region::Null: return true;
      case Region::Input: return r.second == 0;
      default: return false;
    }
  };
  auto name = [&](std::size_t i) { return fmt::format("unit {} ({} {})", i, to_string(u[i].kind), u[i].layer); };
  std::map<std::pair<std::size_t, std::size_t>, int> range_uses;
  for (const auto& x : u) range_uses[{x.begin, x.end}]++;
  for (std::size_t i = 0; i < u.size(); ++i) {
    if (u[i].end > p.program.code.size() || u[i].begin >= u[i].end)
      problems.push_back(name(i) + ": instruction range outside the program");
    for (const auto& r : u[i].reads) {
      std::optional<std::size_t> producer;
      for (std::size_t j = i; j-- > 0;)
        if (std::find(u[j].writes.begin(), u[j].writes.end(), r) != u[j].writes.end()) {
          producer = j;
          break;
        }
      if (!producer) {
        if (!preloaded(r))
          problems.push_back(fmt::format("{} reads {}{} before any unit produces it", name(i), to_string(r.first), r.second));
        continue;
      }
      if (std::find(u[i].deps.begin(), u[i].deps.end(), *producer) == u[i].deps.end())
        problems.push_back(fmt::format("{} is missing its dependency on {}", name(i), name(*producer)));
      const auto& a = u[*producer];
      bool same_loop = a.begin == u[i].begin && a.end == u[i].end;
      if (!same_loop && a.begin >= u[i].begin)
        problems.push_back(fmt::format("{} is issued before its producer {}", name(i), name(*producer)));
    }
    for (auto d : u[i].deps)
      if (d >= i) problems.push_back(fmt::format("{} depends on a later unit {}", name(i), d));
    if (i > 0 && range_uses[{u[i].begin, u[i].end}] == 1 && range_uses[{u[i - 1].begin, u[i - 1].end}] == 1 &&
        u[i - 1].begin > u[i].begin)
      problems.push_back(name(i) + " is out of program order");
  }
  return problems;
}

std::vector<std::size_t> census(const isa::Program& p) {
  std::vector<std::size_t> c(16, 0);
  for (const auto& i : p.code) c[static_cast<std::size_t>(i.op)]++;
  return c;
}

}  // namespace canary
