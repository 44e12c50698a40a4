#include "canary/simulator.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "canary/binio.hpp"
#include "canary/error.hpp"
#include "canary/parallel.hpp"

namespace canary {

// ---------------------------------------------------------------- config

void SimConfig::validate() const {
  auto positive = [](double v, const char* what) {
    require(v > 0.0 && std::isfinite(v), ErrorKind::Config, fmt::format("simconfig: {} must be positive", what));
  };
  positive(static_cast<double>(pe_rows), "pe_rows");
  positive(static_cast<double>(pe_cols), "pe_cols");
  positive(clock_mhz, "clock_mhz");
  positive(static_cast<double>(acc_sram_kb), "acc_sram_kb");
  positive(static_cast<double>(acc_sram_bank_kb), "acc_sram_bank_kb");
  positive(static_cast<double>(ext_sram_kb), "ext_sram_kb");
  positive(static_cast<double>(ext_sram_bank_kb), "ext_sram_bank_kb");
  positive(static_cast<double>(pc_sram_kb), "pc_sram_kb");
  positive(static_cast<double>(sort_units), "sort_units");
  positive(dram_bytes_per_cycle, "dram_bytes_per_cycle");
  positive(static_cast<double>(mask_width), "mask_width");
  positive(static_cast<double>(max_steps), "max_steps");
  require(sort_width >= 2 && std::has_single_bit(sort_width), ErrorKind::Config,
          "simconfig: sort_width must be a power of two >= 2");
  require(merge_way >= 2, ErrorKind::Config, "simconfig: merge_way must be at least 2");
  for (const auto& [k, v] : energy)
    require(v >= 0.0 && std::isfinite(v), ErrorKind::Config, "simconfig: energy." + k + " must be >= 0");
}

namespace {

template <class T>
T parse_value(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    T out;
    if constexpr (std::is_same_v<T, double>) out = std::stod(v, &used);
    else {
      if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
      out = static_cast<T>(std::stoull(v, &used));
    }
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    fail(ErrorKind::Config, fmt::format("simconfig: bad value '{}' for {}", v, key));
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  fail(ErrorKind::Config, fmt::format("simconfig: bad boolean '{}' for {}", v, key));
}

void apply_key(SimConfig& c, const std::string& key, const std::string& v) {
  if (key.rfind("energy.", 0) == 0) {
    std::string name = key.substr(7);
    require(c.energy.count(name) != 0, ErrorKind::Config, "simconfig: unknown energy entry " + name);
    c.energy[name] = parse_value<double>(key, v);
    return;
  }
  if (key == "pe_rows") c.pe_rows = parse_value<std::size_t>(key, v);
  else if (key == "pe_cols") c.pe_cols = parse_value<std::size_t>(key, v);
  else if (key == "clock_mhz") c.clock_mhz = parse_value<double>(key, v);
  else if (key == "acc_sram_kb") c.acc_sram_kb = parse_value<std::size_t>(key, v);
  else if (key == "acc_sram_bank_kb") c.acc_sram_bank_kb = parse_value<std::size_t>(key, v);
  else if (key == "ext_sram_kb") c.ext_sram_kb = parse_value<std::size_t>(key, v);
  else if (key == "ext_sram_bank_kb") c.ext_sram_bank_kb = parse_value<std::size_t>(key, v);
  else if (key == "pc_sram_kb") c.pc_sram_kb = parse_value<std::size_t>(key, v);
  else if (key == "sort_units") c.sort_units = parse_value<std::size_t>(key, v);
  else if (key == "sort_width") c.sort_width = parse_value<std::size_t>(key, v);
  else if (key == "merge_way") c.merge_way = parse_value<std::size_t>(key, v);
  else if (key == "dram_bytes_per_cycle") c.dram_bytes_per_cycle = parse_value<double>(key, v);
  else if (key == "sort_memory_bound") c.sort_memory_bound = parse_bool(key, v);
  else if (key == "dispatch_cycles") c.dispatch_cycles = parse_value<std::size_t>(key, v);
  else if (key == "cls_ops") c.cls_ops = parse_value<std::size_t>(key, v);
  else if (key == "mask_width") c.mask_width = parse_value<std::size_t>(key, v);
  else if (key == "max_steps") c.max_steps = parse_value<std::uint64_t>(key, v);
  else fail(ErrorKind::Config, "simconfig: unknown key " + key);
}

}  // namespace

SimConfig parse_simconfig(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    fail(ErrorKind::Config, std::string("simconfig: ") + e.what());
  }
  SimConfig c;
  for (const auto& [key, node] : tree) {
    if (node.empty()) {
      apply_key(c, key, node.data());
      continue;
    }
    for (const auto& [sub, leaf] : node) apply_key(c, key + "." + sub, leaf.data());
  }
  c.validate();
  return c;
}

SimConfig load_simconfig(const std::string& path) {
  try {
    return parse_simconfig(binio::read_text(path));
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::Config) fail(ErrorKind::Config, path + ": " + e.what());
    throw;
  }
}

std::string format_simconfig(const SimConfig& c) {
  std::string s;
  s += fmt::format("pe_rows = {}\npe_cols = {}\nclock_mhz = {}\n", c.pe_rows, c.pe_cols, c.clock_mhz);
  s += fmt::format("acc_sram_kb = {}\nacc_sram_bank_kb = {}\n", c.acc_sram_kb, c.acc_sram_bank_kb);
  s += fmt::format("ext_sram_kb = {}\next_sram_bank_kb = {}\npc_sram_kb = {}\n", c.ext_sram_kb, c.ext_sram_bank_kb,
                   c.pc_sram_kb);
  s += fmt::format("sort_units = {}\nsort_width = {}\nmerge_way = {}\n", c.sort_units, c.sort_width, c.merge_way);
  s += fmt::format("dram_bytes_per_cycle = {}\nsort_memory_bound = {}\n", c.dram_bytes_per_cycle,
                   c.sort_memory_bound ? "true" : "false");
  s += fmt::format("dispatch_cycles = {}\ncls_ops = {}\nmask_width = {}\nmax_steps = {}\n", c.dispatch_cycles,
                   c.cls_ops, c.mask_width, c.max_steps);
  for (const auto& [k, v] : c.energy) s += fmt::format("energy.{} = {}\n", k, v);
  return s;
}

// ---------------------------------------------------------------- energy

EventCounts& EventCounts::operator+=(const EventCounts& o) {
  for (const auto& [k, v] : o.count) count[k] += v;
  return *this;
}

EnergyBreakdown energy_account(const EventCounts& events, const SimConfig& cfg) {
  static const std::map<std::string, std::string> component{
      {"mac", "pe"},          {"compare", "path"},     {"sram_access", "sram"}, {"dram_byte", "dram"},
      {"sort_stage", "sort"}, {"merge_step", "sort"},  {"mask_op", "path"},     {"dispatch", "controller"},
      {"controller_op", "controller"}, {"sort_static", "sort"}};
  EnergyBreakdown e;
  for (const auto& c : {"pe", "sram", "dram", "sort", "path", "controller"}) e.component[c] = 0.0;
  for (const auto& [k, n] : events.count) {
    auto it = cfg.energy.find(k);
    require(it != cfg.energy.end(), ErrorKind::Config, "no energy entry for event '" + k + "'");
    auto comp = component.find(k);
    require(comp != component.end(), ErrorKind::Internal, "event '" + k + "' has no energy component");
    e.component[comp->second] += n * it->second;
  }
  for (const auto& [_, v] : e.component) e.total += v;
  return e;
}

double SimReport::sort_energy_share() const {
  auto it = energy.component.find("sort");
  return energy.total > 0.0 && it != energy.component.end() ? it->second / energy.total : 0.0;
}

SortCost sort_unit_model(std::size_t length, const SimConfig& cfg, std::size_t dram_bytes) {
  SortCost c;
  if (length == 0) return c;
  const std::size_t lg = static_cast<std::size_t>(std::countr_zero(cfg.sort_width));
  const std::size_t stages_per_block = lg * (lg + 1) / 2;
  c.blocks = (length + cfg.sort_width - 1) / cfg.sort_width;
  c.block_cycles = (c.blocks + cfg.sort_units - 1) / cfg.sort_units * stages_per_block;
  std::size_t levels = 0;
  for (std::size_t reach = 1; reach < c.blocks; reach *= cfg.merge_way) ++levels;
  c.merge_steps = length * levels;
  c.merge_cycles = c.merge_steps;
  c.memory_cycles = static_cast<std::size_t>(std::ceil(static_cast<double>(dram_bytes) / cfg.dram_bytes_per_cycle));
  c.total = cfg.sort_memory_bound ? std::max(c.block_cycles, c.memory_cycles) + c.merge_cycles
                                  : c.block_cycles + c.memory_cycles + c.merge_cycles;
  c.stages = c.blocks * stages_per_block;
  return c;
}

// ---------------------------------------------------------------- machine

namespace {

using isa::Opcode;

enum class Unit { Controller = 0, Pe = 1, Sorter = 2, Path = 3 };

constexpr std::uint32_t kWhole = 0xFFFFFFFFu;

std::uint64_t key(Region r, std::size_t layer, std::uint32_t sub = kWhole) {
  return static_cast<std::uint64_t>(r) << 56 | static_cast<std::uint64_t>(layer) << 32 | sub;
}

struct Sorted {
  bool valid = false;
  bool null = false;
  std::size_t layer = 0;
  std::size_t output = 0;
  float target = 0.0f;
  std::vector<PartialSum> ranked;
};

struct Step {
  Unit unit = Unit::Controller;
  std::uint64_t exec = 0;
  std::vector<std::uint64_t> reads, writes;
  bool extraction = false;
};

class Machine {
 public:
  Machine(const isa::Program& p, const Network& net, const Tensor& input, const ExtractionConfig& cfg,
          const SimConfig& sc, const DetectorImage& det, const RunOptions& opt)
      : p_(p), net_(net), cfg_(cfg), sc_(sc), det_(det), opt_(opt), map_(MemoryMap::for_network(net)) {
    require(input.shape == net.input_shape(), ErrorKind::Config,
            "input shape " + shape_str(input.shape) + " does not match network input " + shape_str(net.input_shape()));
    const std::size_t n = map_.layers;
    inf_.activations.push_back(input);
    inferred_.assign(n, false);
    spilled_.assign(n, false);
    masked_.assign(n, false);
    recomputed_.resize(n);
    entries_.assign(n, 0);
    for (std::size_t w = 0; w < n; ++w)
      for (std::size_t o = 0; o < map_.out_size[w]; ++o)
        entries_[w] += record_length(w, o);
    sel_.resize(n + 1);
    for (std::size_t l = 0; l < n; ++l) sel_[l].resize(map_.in_size[l]);
    sel_[n].resize(net.class_count());
    producers_.resize(n + 1);
    ap_ = ActivationPath::empty_for(net);
    if (cfg_.direction == Direction::Backward && cfg_.rules.size() == n)
      for (std::size_t w = cfg_.first; w < n; ++w)
        if (cfg_.rules[w].kind == ThresholdKind::Cumulative) rep_.psum_entries_full += entries_[w];
    for (const char* s : {"raw", "war", "waw", "unit"}) rep_.stalls[s] = 0;
  }

  SimReport execute() {
    std::size_t pc = 0;
    std::uint64_t steps = 0;
    while (true) {
      if (pc >= p_.code.size()) fault(pc, "execution ran past the end of the program");
      if (++steps > sc_.max_steps) fault(pc, fmt::format("step limit {} exceeded", sc_.max_steps));
      const isa::Instruction& ins = p_.code[pc];
      std::size_t next = pc + 1;
      bool halt = false;
      Step s = apply(pc, ins, next, halt);
      account(pc, ins, s);
      if (halt) break;
      pc = next;
    }
    rep_.cycles = finish_;
    rep_.events.count["sort_static"] += static_cast<double>(sc_.sort_units) * static_cast<double>(finish_);
    rep_.energy = energy_account(rep_.events, sc_);
    rep_.path = ap_;
    rep_.predicted = pred_;
    return std::move(rep_);
  }

 private:
  [[noreturn]] void fault(std::size_t pc, const std::string& why) const {
    std::string text = pc < p_.code.size() ? isa::format_instruction(p_.code[pc], &p_) : "-";
    fail(ErrorKind::Fault, fmt::format("instruction {} ({}): {}", pc, text, why));
  }

  MemoryMap::Location where(std::size_t pc, std::uint8_t r) const {
    auto loc = map_.locate(reg_[r]);
    if (!loc) fault(pc, fmt::format("r{} = 0x{:08x} is outside the modeled address space", r, reg_[r]));
    return *loc;
  }

  std::size_t record_length(std::size_t w, std::size_t o) const {
    const Layer& l = net_.layer(net_.weighted_layer(w));
    const std::size_t co = l.kind == LayerKind::FullyConnected ? o : o / (l.out_shape[1] * l.out_shape[2]);
    if (l.kind == LayerKind::FullyConnected) {
      std::size_t c = 0;
      for (std::size_t i = 0; i < l.in_size(); ++i) c += l.weights[co * l.in_size() + i] != 0.0f;
      return c;
    }
    const std::size_t ih = l.in_shape[1], iw = l.in_shape[2], ow = l.out_shape[2], cin = l.in_shape[0];
    const std::size_t oy = (o / ow) % l.out_shape[1], ox = o % ow;
    std::size_t c = 0;
    for (std::size_t ci = 0; ci < cin; ++ci)
      for (std::size_t ky = 0; ky < l.kernel; ++ky)
        for (std::size_t kx = 0; kx < l.kernel; ++kx) {
          long iy = static_cast<long>(oy * l.stride + ky) - static_cast<long>(l.padding);
          long ix = static_cast<long>(ox * l.stride + kx) - static_cast<long>(l.padding);
          if (iy < 0 || ix < 0 || iy >= static_cast<long>(ih) || ix >= static_cast<long>(iw)) continue;
          c += l.weights[((co * cin + ci) * l.kernel + ky) * l.kernel + kx] != 0.0f;
        }
    return c;
  }

  bool backward() const { return cfg_.direction == Direction::Backward && cfg_.rules.size() == map_.layers; }
  bool cumulative_layer(std::size_t w) const {
    return backward() && w >= cfg_.first && cfg_.rules[w].kind == ThresholdKind::Cumulative;
  }
  bool absolute_layer(std::size_t w) const {
    return backward() && w >= cfg_.first && cfg_.rules[w].kind == ThresholdKind::Absolute;
  }

  const std::vector<std::size_t>& producers(std::size_t pc, std::size_t l) {
    if (producers_[l]) return *producers_[l];
    std::vector<std::size_t> out;
    if (l == map_.layers) {
      if (!pred_) fault(pc, "no prediction yet");
      out.push_back(*pred_);
    } else {
      const std::size_t li = net_.weighted_layer(l);
      for (auto i = sel_[l].find_first(); i != Bits::npos; i = sel_[l].find_next(i)) {
        auto prod = trace_to_producer(net_, inf_, li, i);
        if (!prod) fault(pc, fmt::format("layer {} has no producing layer", l));
        out.push_back(*prod);
      }
      std::sort(out.begin(), out.end());
      out.erase(std::unique(out.begin(), out.end()), out.end());
    }
    producers_[l] = std::move(out);
    return *producers_[l];
  }

  void set_flag(std::uint32_t v) { reg_[isa::kFlagRegister] = v != 0; }

  float as_float(std::uint32_t v) const { return std::bit_cast<float>(v); }

  // Neuron (w, o) named by a PRE address; nullopt for the null neuron.
  std::optional<std::pair<std::size_t, std::size_t>> neuron_at(std::size_t pc, std::uint8_t r) const {
    auto loc = where(pc, r);
    if (loc.region == Region::Null && loc.offset == 0) return std::nullopt;
    if (loc.region != Region::Pre || loc.offset % 4 || loc.offset / 4 >= map_.out_size[loc.layer])
      fault(pc, fmt::format("r{} does not name a neuron", r));
    return std::pair{loc.layer, static_cast<std::size_t>(loc.offset / 4)};
  }

  // Record (w, o) named by a PB address; nullopt for the null record.
  std::optional<std::pair<std::size_t, std::size_t>> record_at(std::size_t pc, std::uint8_t r) const {
    auto loc = where(pc, r);
    if (loc.region == Region::Null && loc.offset == 8) return std::nullopt;
    if (loc.region != Region::Psum || loc.offset % map_.record_stride() ||
        loc.offset / map_.record_stride() >= map_.out_size[loc.layer])
      fault(pc, fmt::format("r{} does not name a psum record", r));
    return std::pair{loc.layer, static_cast<std::size_t>(loc.offset / map_.record_stride())};
  }

  void require_inferred(std::size_t pc, std::size_t w) const {
    if (!inferred_[w]) fault(pc, fmt::format("layer {} has not been inferred", w));
  }

  std::uint64_t dram_cycles(double bytes) const {
    return static_cast<std::uint64_t>(std::ceil(bytes / sc_.dram_bytes_per_cycle));
  }

  void event(const char* k, double n) { rep_.events.count[k] += n; }

  Step apply(std::size_t pc, const isa::Instruction& ins, std::size_t& next, bool& halt) {
    Step s;
    const auto& r = ins.r;
    switch (ins.op) {
      case Opcode::Mov: reg_[r[0]] = p_.pool.at(ins.pool); break;
      case Opcode::Dec:
        if (r[1] == 0) reg_[r[0]] = reg_[r[0]] ? reg_[r[0]] - 1 : 0;
        else reg_[r[0]] -= reg_[r[1]];
        set_flag(reg_[r[0]]);
        break;
      case Opcode::Jne:
        if (reg_[isa::kFlagRegister]) next = p_.pool.at(ins.pool);
        break;
      case Opcode::Halt: halt = true; break;
      case Opcode::Mul: {
        auto loc = where(pc, r[1]);
        if (loc.region == Region::Pre || (loc.region == Region::Null && loc.offset == 0)) {
          float v = 0.0f;
          if (loc.region == Region::Pre) {
            auto nrn = neuron_at(pc, r[1]);
            require_inferred(pc, nrn->first);
            v = inf_.output_of(net_.weighted_layer(nrn->first))[nrn->second];
            s.reads.push_back(key(Region::Pre, nrn->first));
          }
          reg_[r[0]] = std::bit_cast<std::uint32_t>(as_float(reg_[r[0]]) * v);
          set_flag(reg_[r[0]] & 0x7FFFFFFFu);
        } else if (loc.region == Region::Sel && loc.offset == 0) {
          reg_[r[0]] *= static_cast<std::uint32_t>(producers(pc, loc.layer).size());
          s.reads.push_back(key(Region::Sel, loc.layer));
          set_flag(reg_[r[0]]);
        } else {
          fault(pc, "mul operand is neither a neuron value nor a selection count");
        }
        event("controller_op", 1);
        s.extraction = true;
        break;
      }
      case Opcode::Findneuron: {
        std::size_t w = reg_[r[0]];
        if (w >= map_.layers) fault(pc, fmt::format("layer id {} out of range", w));
        const auto& list = producers(pc, w + 1);
        std::uint32_t pos = reg_[r[1]];
        if (pos > list.size()) fault(pc, fmt::format("position {} beyond {} important neurons", pos, list.size()));
        reg_[r[2]] = pos == 0 ? map_.null_neuron() : map_.neuron(w, list[pos - 1]);
        s.reads.push_back(key(Region::Sel, w + 1));
        event("controller_op", 1);
        s.extraction = true;
        break;
      }
      case Opcode::Findrf: {
        auto nrn = neuron_at(pc, r[0]);
        reg_[r[1]] = nrn ? map_.record(nrn->first, nrn->second) : map_.null_record();
        event("controller_op", 1);
        s.extraction = true;
        break;
      }
      case Opcode::Inf:
      case Opcode::Infsp: do_inference(pc, ins, s); break;
      case Opcode::Csps: do_csps(pc, ins, s); break;
      case Opcode::Sort: do_sort(pc, ins, s); break;
      case Opcode::Acum: do_acum(pc, ins, s); break;
      case Opcode::Genmasks: do_genmasks(pc, ins, s); break;
      case Opcode::Cls: do_cls(pc, ins, s); break;
    }
    return s;
  }

  void do_inference(std::size_t pc, const isa::Instruction& ins, Step& s) {
    const auto& r = ins.r;
    auto in = where(pc, r[0]), wt = where(pc, r[1]), out = where(pc, r[2]);
    if (in.region != Region::Input || wt.region != Region::Weights || out.region != Region::Pre || in.offset ||
        wt.offset || out.offset)
      fault(pc, "operands must be the IN, W and PRE regions of one layer");
    const std::size_t w = in.layer;
    if (wt.layer != w || out.layer != w) fault(pc, "operands name different layers");
    const bool sp = ins.op == Opcode::Infsp;
    if (sp) {
      auto pb = where(pc, r[3]);
      if (pb.region != Region::Psum || pb.layer != w || pb.offset) fault(pc, "psum operand must be PB of the same layer");
    }
    const std::size_t li = net_.weighted_layer(w);
    if (inf_.activations.size() != li + 1) fault(pc, fmt::format("layer {} inferred out of order", w));
    const std::size_t stop = w + 1 < map_.layers ? net_.weighted_layer(w + 1) : net_.size();
    double compare_ops = 0.0;
    for (std::size_t l = li; l < stop; ++l) {
      inf_.activations.push_back(forward_layer(net_.layer(l), inf_.activations.back()));
      if (l > li) compare_ops += static_cast<double>(net_.layer(l).out_size());
    }
    inferred_[w] = true;
    s.reads = {key(Region::Input, w), key(Region::Weights, w)};
    s.writes = {key(Region::Pre, w), key(Region::Input, w + 1)};
    if (w + 1 == map_.layers) {
      pred_ = argmax(inf_.logits());
      inf_.predicted = *pred_;
      sel_[map_.layers].set(*pred_);
      s.writes.push_back(key(Region::Pred, 0));
      s.writes.push_back(key(Region::Sel, map_.layers));
    }

    const Layer& L = net_.layer(li);
    const double K = static_cast<double>(L.fan_in());
    const double cout = static_cast<double>(L.kind == LayerKind::FullyConnected ? L.out_size() : L.out_shape[0]);
    const double pixels = L.kind == LayerKind::FullyConnected ? 1.0 : static_cast<double>(L.out_shape[1] * L.out_shape[2]);
    const double row_folds = std::ceil(K / static_cast<double>(sc_.pe_rows));
    const double col_folds = std::ceil(cout / static_cast<double>(sc_.pe_cols));
    const double compute = row_folds * col_folds * (pixels + static_cast<double>(sc_.pe_rows + sc_.pe_cols));
    double bytes = 2.0 * static_cast<double>(L.weights.size() + L.bias.size()) + 2.0 * static_cast<double>(L.in_size()) +
                   2.0 * static_cast<double>(inf_.activations.back().size());
    if (sp && cumulative_layer(w)) {
      double pb = 2.0 * static_cast<double>(entries_[w]);
      bytes += pb;
      rep_.psum_dram_bytes += pb;
      rep_.psum_entries_stored += entries_[w];
      spilled_[w] = true;
      s.writes.push_back(key(Region::Psum, w));
    }
    if (absolute_layer(w)) {
      double mb = static_cast<double>(entries_[w]) / 8.0;
      bytes += mb;
      rep_.mask_dram_bytes += mb;
      compare_ops += static_cast<double>(entries_[w]);
      masked_[w] = true;
      s.writes.push_back(key(Region::Psum, w));
    }
    rep_.dram_bytes += bytes;
    event("dram_byte", bytes);
    event("mac", K * cout * pixels);
    event("sram_access", static_cast<double>(L.in_size()) * col_folds + static_cast<double>(L.weights.size()) +
                             static_cast<double>(L.out_size()));
    event("compare", compare_ops);
    s.unit = Unit::Pe;
    s.exec = std::max(static_cast<std::uint64_t>(compute), dram_cycles(bytes));
    rep_.inference_cycles += s.exec;
  }

  void do_csps(std::size_t pc, const isa::Instruction& ins, Step& s) {
    const auto& r = ins.r;
    auto nrn = neuron_at(pc, r[0]);
    auto rec = record_at(pc, r[2]);
    s.unit = Unit::Pe;
    s.extraction = true;
    if (!nrn) {
      if (rec) fault(pc, "null neuron paired with a real record");
      return;
    }
    if (reg_[r[1]] != nrn->first) fault(pc, "layer id does not match the neuron");
    if (!rec || *rec != *nrn) fault(pc, "record does not belong to the neuron");
    const auto [w, o] = *nrn;
    require_inferred(pc, w);
    auto record = recompute_psums(net_, inf_, net_.weighted_layer(w), o);
    const double len = static_cast<double>(record.psums.size());
    recomputed_[w][o] = std::move(record);
    s.reads = {key(Region::Input, w), key(Region::Weights, w)};
    s.writes = {key(Region::Psum, w, static_cast<std::uint32_t>(o))};
    s.exec = static_cast<std::uint64_t>(std::ceil(len / static_cast<double>(sc_.pe_rows))) + sc_.pe_rows;
    event("mac", len);
    event("sram_access", 2.0 * len);
  }

  void do_sort(std::size_t pc, const isa::Instruction& ins, Step& s) {
    const auto& r = ins.r;
    auto rec = record_at(pc, r[0]);
    auto dst = where(pc, r[2]);
    if (dst.region != Region::Scratch || dst.offset) fault(pc, "sort destination must be a scratch buffer");
    Sorted& out = scratch_[dst.layer];
    s.unit = Unit::Sorter;
    s.extraction = true;
    s.writes = {key(Region::Scratch, dst.layer)};
    out = Sorted{};
    out.valid = true;
    if (!rec) {
      out.null = true;
      return;
    }
    const auto [w, o] = *rec;
    PartialSumRecord record;
    double dram = 0.0;
    if (auto it = recomputed_[w].find(o); it != recomputed_[w].end()) {
      record = it->second;
    } else if (spilled_[w]) {
      record = recompute_psums(net_, inf_, net_.weighted_layer(w), o);
      dram = 2.0 * static_cast<double>(record.psums.size());
      rep_.psum_entries_loaded += record.psums.size();
      rep_.psum_dram_bytes += dram;
      rep_.dram_bytes += dram;
      event("dram_byte", dram);
    } else {
      fault(pc, fmt::format("psum record {} of layer {} was never produced", o, w));
    }
    if (record.psums.size() > reg_[r[1]])
      fault(pc, fmt::format("record of {} psums exceeds the sort length {}", record.psums.size(), reg_[r[1]]));
    out.layer = w;
    out.output = o;
    out.target = inf_.output_of(net_.weighted_layer(w))[o];
    out.ranked = std::move(record.psums);
    std::sort(out.ranked.begin(), out.ranked.end(), psum_ranks_before);
    rep_.psum_entries_consumed += out.ranked.size();
    SortCost c = sort_unit_model(out.ranked.size(), sc_, static_cast<std::size_t>(dram));
    s.exec = c.total;
    event("sort_stage", static_cast<double>(c.stages));
    event("merge_step", static_cast<double>(c.merge_steps) * std::log2(static_cast<double>(sc_.merge_way)));
    s.reads = {key(Region::Psum, w, static_cast<std::uint32_t>(o)), key(Region::Pre, w)};
  }

  void check_output(std::size_t pc, std::uint8_t r, std::optional<std::pair<std::size_t, std::size_t>> source) {
    auto loc = where(pc, r);
    if (loc.region == Region::Sel && loc.offset == 0 && source && loc.layer == source->first) return;
    if (loc.region == Region::Null && loc.offset == 8 && !source) return;
    if (loc.region == Region::Psum && source && record_at(pc, r) == source) return;
    fault(pc, "output operand must be the source record or the selection of its layer");
  }

  void select_into(std::size_t w, const std::vector<std::uint32_t>& inputs) {
    for (auto i : inputs) sel_[w].set(i);
    producers_[w].reset();
  }

  void do_acum(std::size_t pc, const isa::Instruction& ins, Step& s) {
    const auto& r = ins.r;
    auto src = where(pc, r[0]);
    if (src.region != Region::Scratch || src.offset) fault(pc, "acum source must be a scratch buffer");
    const Sorted& in = scratch_[src.layer];
    if (!in.valid) fault(pc, "scratch buffer holds no sorted sequence");
    s.unit = Unit::Path;
    s.extraction = true;
    s.reads = {key(Region::Scratch, src.layer)};
    if (in.null) {
      check_output(pc, r[1], std::nullopt);
      return;
    }
    check_output(pc, r[1], std::pair{in.layer, in.output});
    std::size_t k = in.target > 0.0f ? cumulative_prefix(in.ranked, as_float(reg_[r[2]])) : 0;
    std::vector<std::uint32_t> picked;
    for (std::size_t i = 0; i < k; ++i) picked.push_back(in.ranked[i].input);
    select_into(in.layer, picked);
    s.writes = {key(Region::Sel, in.layer)};
    s.exec = k + 1;
    event("compare", static_cast<double>(k));
    event("sram_access", static_cast<double>(k));
  }

  void do_genmasks(std::size_t pc, const isa::Instruction& ins, Step& s) {
    const auto& r = ins.r;
    auto src = where(pc, r[0]);
    s.unit = Unit::Path;
    s.extraction = true;
    auto to_path = [&] {
      auto d = where(pc, r[1]);
      if (d.region != Region::Path || d.offset) fault(pc, "destination must be the activation path");
    };
    if (src.region == Region::Null || src.region == Region::Psum) {
      auto rec = record_at(pc, r[0]);
      check_output(pc, r[1], rec);
      if (!rec) return;
      const auto [w, o] = *rec;
      if (!masked_[w]) fault(pc, fmt::format("no mask records were written for layer {}", w));
      auto record = recompute_psums(net_, inf_, net_.weighted_layer(w), o);
      select_into(w, select_absolute(record.psums, cfg_.rules[w].value));
      const double len = static_cast<double>(record.psums.size());
      const double bytes = len / 8.0;
      rep_.mask_dram_bytes += bytes;
      rep_.dram_bytes += bytes;
      event("dram_byte", bytes);
      event("mask_op", len);
      s.reads = {key(Region::Psum, w, static_cast<std::uint32_t>(o))};
      s.writes = {key(Region::Sel, w)};
      s.exec = std::max<std::uint64_t>(static_cast<std::uint64_t>(std::ceil(len / static_cast<double>(sc_.mask_width))) + 1,
                                       dram_cycles(bytes));
      return;
    }
    if (src.region == Region::Input && src.offset == 0 && src.layer < map_.layers) {
      to_path();
      const std::size_t w = src.layer;
      if (cfg_.direction != Direction::Forward) fault(pc, "threshold masks of feature maps need a forward config");
      if (inf_.activations.size() <= net_.weighted_layer(w)) fault(pc, fmt::format("input of layer {} not computed", w));
      ap_.masks[w] = extract_forward_layer(net_, inf_, cfg_, w);
      const double elems = static_cast<double>(map_.in_size[w]);
      event("mask_op", elems);
      event("sram_access", elems);
      s.reads = {key(Region::Input, w), key(Region::Config, 0)};
      s.writes = {key(Region::Path, w)};
      s.exec = static_cast<std::uint64_t>(std::ceil(elems / static_cast<double>(sc_.mask_width))) + 1;
      return;
    }
    if (src.region == Region::Sel && src.offset == 0 && src.layer < map_.layers) {
      to_path();
      if (!backward()) fault(pc, "selection emission needs a backward config");
      std::uint64_t words = 0;
      s.reads.push_back(key(Region::Config, 0));
      for (std::size_t w = src.layer; w < map_.layers; ++w) {
        s.reads.push_back(key(Region::Sel, w));
        s.writes.push_back(key(Region::Path, w));
        if (cfg_.rules[w].emit) ap_.masks[w] = sel_[w];
        words += (sel_[w].size() + 63) / 64;
      }
      event("mask_op", static_cast<double>(words));
      s.exec = words + 1;
      return;
    }
    fault(pc, "genmasks source must be a mask record, a feature map or a selection");
  }

  void do_cls(std::size_t pc, const isa::Instruction& ins, Step& s) {
    const auto& r = ins.r;
    auto cp = where(pc, r[0]), path = where(pc, r[1]);
    if (cp.region != Region::ClassPaths || path.region != Region::Path) fault(pc, "cls needs the CP and AP regions");
    if (!pred_) fault(pc, "no prediction yet");
    s.unit = Unit::Controller;
    s.extraction = true;
    s.reads = {key(Region::ClassPaths, 0), key(Region::Pred, 0)};
    for (std::size_t w = 0; w < map_.layers; ++w) s.reads.push_back(key(Region::Path, w));
    const double words = static_cast<double>((ap_.capacity() + 63) / 64);
    s.exec = sc_.cls_ops + static_cast<std::uint64_t>(words);
    event("controller_op", static_cast<double>(sc_.cls_ops) + words);
    std::uint32_t result = 3;
    if (det_.class_paths && det_.forest) {
      const ClassPath* c = det_.class_paths->find(*pred_);
      if (!c) {
        rep_.unprofiled = true;
        result = 2;
      } else {
        rep_.verdict = classify(*det_.forest, similarity(ap_, c->path), det_.mode, det_.threshold);
        result = rep_.verdict->adversarial ? 1 : 0;
      }
    }
    reg_[r[2]] = result;
  }

  void account(std::size_t pc, const isa::Instruction& ins, const Step& s) {
    std::uint64_t ready = ctrl_;
    std::uint64_t raw = 0, war = 0, waw = 0;
    auto lookup = [](const std::map<std::uint64_t, std::uint64_t>& m, std::uint64_t k) {
      auto it = m.find(k);
      return it == m.end() ? 0 : it->second;
    };
    auto whole = [](std::uint64_t k) { return (k & 0xFFFFFFFF00000000ull) | kWhole; };
    for (auto k : s.reads) raw = std::max({raw, lookup(write_end_, k), lookup(write_end_, whole(k))});
    for (auto k : s.writes) {
      war = std::max({war, lookup(read_end_, k)});
      waw = std::max({waw, lookup(write_end_, k), lookup(write_end_, whole(k))});
    }
    std::uint64_t unit = s.unit == Unit::Controller ? 0 : unit_free_[static_cast<int>(s.unit)];
    std::uint64_t t = std::max({ready, raw, war, waw, unit});
    if (t > ready) {
      const char* cause = t == raw ? "raw" : t == war ? "war" : t == waw ? "waw" : "unit";
      rep_.stalls[cause] += t - ready;
    }
    std::uint64_t start = t + sc_.dispatch_cycles;
    std::uint64_t end = start + s.exec;
    ctrl_ = s.unit == Unit::Controller ? end : start;
    if (s.unit != Unit::Controller) unit_free_[static_cast<int>(s.unit)] = end;
    for (auto k : s.reads) read_end_[k] = std::max(lookup(read_end_, k), end);
    for (auto k : s.writes) write_end_[k] = end;
    finish_ = std::max(finish_, end);
    rep_.instructions++;
    rep_.opcode_counts[static_cast<std::size_t>(ins.op)]++;
    event("dispatch", 1);
    if (s.extraction) rep_.extraction_cycles += sc_.dispatch_cycles + s.exec;
    if (opt_.trace) rep_.trace.push_back({pc, ins.op, start, end});
  }

  const isa::Program& p_;
  const Network& net_;
  const ExtractionConfig& cfg_;
  const SimConfig& sc_;
  const DetectorImage& det_;
  const RunOptions& opt_;
  MemoryMap map_;

  std::array<std::uint32_t, 16> reg_{};
  Inference inf_;
  std::optional<std::size_t> pred_;
  std::vector<bool> inferred_, spilled_, masked_;
  std::vector<std::map<std::size_t, PartialSumRecord>> recomputed_;
  std::vector<std::size_t> entries_;
  std::vector<Bits> sel_;
  std::vector<std::optional<std::vector<std::size_t>>> producers_;
  std::array<Sorted, 2> scratch_;
  ActivationPath ap_;

  std::uint64_t ctrl_ = 0, finish_ = 0;
  std::array<std::uint64_t, 4> unit_free_{};
  std::map<std::uint64_t, std::uint64_t> read_end_, write_end_;
  SimReport rep_;
};

void fill_ratios(SimReport& r) {
  r.latency_overhead =
      r.baseline_cycles ? static_cast<double>(r.cycles) / static_cast<double>(r.baseline_cycles) : 1.0;
  r.energy_overhead = r.baseline_energy > 0.0 ? r.energy.total / r.baseline_energy : 1.0;
}

}  // namespace

SimReport run(const isa::Program& program, const Network& net, const Tensor& input, const ExtractionConfig& cfg,
              const SimConfig& sim, const DetectorImage& det, const RunOptions& opt) {
  sim.validate();
  isa::validate(program);
  if (det.class_paths) require_fingerprint(*det.class_paths, net, cfg);
  SimReport rep = Machine(program, net, input, cfg, sim, det, opt).execute();
  if (opt.baseline) {
    RunOptions base_opt;
    base_opt.baseline = false;
    CompiledProgram base = lower_inference_only(net);
    SimReport b = Machine(base.program, net, input, base.config, sim, {}, base_opt).execute();
    rep.baseline_cycles = b.cycles;
    rep.baseline_energy = b.energy.total;
  } else {
    rep.baseline_cycles = rep.cycles;
    rep.baseline_energy = rep.energy.total;
  }
  fill_ratios(rep);
  return rep;
}

SimReport run(const CompiledProgram& program, const Network& net, const Tensor& input, const SimConfig& sim,
              const DetectorImage& det, const RunOptions& opt) {
  require(program.map == MemoryMap::for_network(net), ErrorKind::Config, "program was compiled for another network");
  return run(program.program, net, input, program.config, sim, det, opt);
}

SimReport aggregate(const std::vector<SimReport>& reports) {
  SimReport a;
  for (const auto& r : reports) {
    a.cycles += r.cycles;
    a.baseline_cycles += r.baseline_cycles;
    a.baseline_energy += r.baseline_energy;
    a.events += r.events;
    for (const auto& [k, v] : r.energy.component) a.energy.component[k] += v;
    a.energy.total += r.energy.total;
    a.dram_bytes += r.dram_bytes;
    a.psum_dram_bytes += r.psum_dram_bytes;
    a.mask_dram_bytes += r.mask_dram_bytes;
    a.psum_entries_stored += r.psum_entries_stored;
    a.psum_entries_loaded += r.psum_entries_loaded;
    a.psum_entries_consumed += r.psum_entries_consumed;
    a.psum_entries_full += r.psum_entries_full;
    for (const auto& [k, v] : r.stalls) a.stalls[k] += v;
    a.instructions += r.instructions;
    for (std::size_t i = 0; i < a.opcode_counts.size(); ++i) a.opcode_counts[i] += r.opcode_counts[i];
    a.inference_cycles += r.inference_cycles;
    a.extraction_cycles += r.extraction_cycles;
  }
  fill_ratios(a);
  return a;
}

std::string report_json(const SimReport& r, const SimConfig& cfg) {
  using nlohmann::json;
  json ops = json::object();
  for (auto op : isa::kAllOpcodes)
    if (auto c = r.opcode_counts[static_cast<std::size_t>(op)]) ops[isa::mnemonic(op)] = c;
  json j{{"cycles", r.cycles},
         {"baseline_cycles", r.baseline_cycles},
         {"latency_overhead", r.latency_overhead},
         {"time_us", static_cast<double>(r.cycles) / cfg.clock_mhz},
         {"energy_pj", r.energy.component},
         {"energy_total_pj", r.energy.total},
         {"baseline_energy_pj", r.baseline_energy},
         {"energy_overhead", r.energy_overhead},
         {"sort_energy_share", r.sort_energy_share()},
         {"events", r.events.count},
         {"dram_bytes", r.dram_bytes},
         {"psum_dram_bytes", r.psum_dram_bytes},
         {"mask_dram_bytes", r.mask_dram_bytes},
         {"psum_entries_stored", r.psum_entries_stored},
         {"psum_entries_loaded", r.psum_entries_loaded},
         {"psum_entries_consumed", r.psum_entries_consumed},
         {"psum_entries_full_spill", r.psum_entries_full},
         {"consumed_fraction", r.consumed_fraction()},
         {"stall_cycles", r.stalls},
         {"instructions", r.instructions},
         {"opcode_counts", ops},
         {"inference_cycles", r.inference_cycles},
         {"extraction_cycles", r.extraction_cycles},
         {"path_bits", r.path.popcount()},
         {"unprofiled", r.unprofiled}};
  if (r.predicted) j["predicted"] = *r.predicted;
  if (r.verdict) {
    j["verdict"] = {{"adversarial", r.verdict->adversarial},
                    {"score", r.verdict->score},
                    {"similarity", r.verdict->report.overall},
                    {"empty_path", r.verdict->report.empty_path}};
  }
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------- sweeps

SweepParam sweep_param_from_string(const std::string& s) {
  if (s == "theta") return SweepParam::Theta;
  if (s == "phi") return SweepParam::Phi;
  if (s == "termination" || s == "termination-layer") return SweepParam::Termination;
  if (s == "start" || s == "start-layer") return SweepParam::Start;
  if (s == "merge-way" || s == "merge_way") return SweepParam::MergeWay;
  if (s == "sort-units" || s == "sort_units") return SweepParam::SortUnits;
  if (s == "pe-dims" || s == "pe_dims") return SweepParam::PeDims;
  fail(ErrorKind::Config,
       "unknown sweep parameter '" + s + "' (expected theta, phi, termination, start, merge-way, sort-units, pe-dims)");
}

std::string to_string(SweepParam p) {
  switch (p) {
    case SweepParam::Theta: return "theta";
    case SweepParam::Phi: return "phi";
    case SweepParam::Termination: return "termination";
    case SweepParam::Start: return "start";
    case SweepParam::MergeWay: return "merge-way";
    case SweepParam::SortUnits: return "sort-units";
    case SweepParam::PeDims: return "pe-dims";
  }
  return "?";
}

std::vector<SimReport> sweep(SweepParam p, const std::vector<double>& values, const SweepSetup& setup) {
  require(setup.net != nullptr, ErrorKind::Config, "sweep needs a network");
  require(!setup.inputs.empty(), ErrorKind::Config, "sweep needs at least one input");
  auto integral = [&](double v) {
    require(v >= 0.0 && v == std::floor(v), ErrorKind::Config, fmt::format("{} must be a non-negative integer", to_string(p)));
    return static_cast<std::size_t>(v);
  };
  struct Point {
    CompiledProgram prog;
    SimConfig sim;
  };
  std::vector<Point> points;
  for (double v : values) {
    ExtractionConfig cfg = setup.config;
    SimConfig sim = setup.sim;
    switch (p) {
      case SweepParam::Theta:
      case SweepParam::Phi: {
        auto kind = p == SweepParam::Theta ? ThresholdKind::Cumulative : ThresholdKind::Absolute;
        for (auto& r : cfg.rules)
          if (r.kind == kind) r.value = static_cast<float>(v);
        break;
      }
      case SweepParam::Termination:
        require(cfg.direction == Direction::Backward, ErrorKind::Config, "termination sweeps need a backward config");
        cfg.first = integral(v);
        break;
      case SweepParam::Start:
        require(cfg.direction == Direction::Forward, ErrorKind::Config, "start-layer sweeps need a forward config");
        cfg.first = integral(v);
        break;
      case SweepParam::MergeWay: sim.merge_way = integral(v); break;
      case SweepParam::SortUnits: sim.sort_units = integral(v); break;
      case SweepParam::PeDims: sim.pe_rows = sim.pe_cols = integral(v); break;
    }
    sim.validate();
    points.push_back({compile(*setup.net, cfg, setup.options), sim});
  }
  const std::size_t per = setup.inputs.size();
  std::vector<SimReport> runs(points.size() * per);
  parallel_for(runs.size(), setup.jobs, [&](std::size_t i) {
    const Point& pt = points[i / per];
    runs[i] = run(pt.prog, *setup.net, setup.inputs[i % per], pt.sim);
  });
  std::vector<SimReport> out;
  for (std::size_t k = 0; k < points.size(); ++k)
    out.push_back(aggregate({runs.begin() + static_cast<long>(k * per), runs.begin() + static_cast<long>((k + 1) * per)}));
  return out;
}

}  // namespace canary
