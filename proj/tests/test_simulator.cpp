#include <doctest.h>

#include <cmath>
#include <random>

#include "canary/error.hpp"
#include "canary/simulator.hpp"
#include "support.hpp"

using namespace canary;
using testing_support::random_convnet;
using testing_support::random_mlp;
using testing_support::random_tensor;

namespace {

const std::vector<std::string> kOptLevels{"none", "layers", "neurons", "recompute", "all"};

ExtractionConfig random_config(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<float> theta(0.1f, 0.95f), phi(-0.05f, 0.4f);
  ExtractionConfig c;
  switch (rng() % 4) {
    case 0: c = make_variant("BwCu", n, theta(rng)); break;
    case 1: c = make_variant("BwAb", n, 0.5f, phi(rng)); break;
    case 2: c = make_variant("FwAb", n, 0.5f, phi(rng)); break;
    default: c = make_variant("Hybrid", n, theta(rng), phi(rng)); break;
  }
  if (c.direction == Direction::Backward) {
    for (auto& r : c.rules) {
      if (rng() % 3 == 0) r.kind = r.kind == ThresholdKind::Cumulative ? ThresholdKind::Absolute : ThresholdKind::Cumulative;
      r.value = r.kind == ThresholdKind::Cumulative ? theta(rng) : phi(rng);
      r.emit = rng() % 4 != 0;
    }
  }
  c.first = rng() % n;
  c.name = "random";
  c.validate(n);
  return c;
}

std::size_t op_count(const SimReport& r, isa::Opcode op) { return r.opcode_counts[static_cast<std::size_t>(op)]; }

}  // namespace

TEST_CASE("simulated path and prediction equal the library pipeline") {
  std::mt19937_64 rng(31);
  SimConfig sim;
  for (int t = 0; t < 60; ++t) {
    Network net = t % 3 == 0 ? random_convnet(rng, 6, 3) : random_mlp(rng, 2 + rng() % 4, 9, 3);
    ExtractionConfig cfg = random_config(rng, net.weighted_count());
    Tensor x = random_tensor(net.input_shape(), rng);
    Inference inf = infer(net, x);
    ActivationPath expected = extract_path(net, inf, cfg);
    for (const auto& level : kOptLevels) {
      CAPTURE(t);
      CAPTURE(level);
      CAPTURE(cfg.serialize());
      SimReport r = run(compile(net, cfg, parse_opt_level(level)), net, x, sim);
      REQUIRE(r.predicted.has_value());
      CHECK(*r.predicted == inf.predicted);
      CHECK(r.path == expected);
      CHECK(!r.verdict.has_value());
    }
  }
}

TEST_CASE("psum counters match the library statistics") {
  std::mt19937_64 rng(8);
  SimConfig sim;
  for (int t = 0; t < 30; ++t) {
    Network net = random_mlp(rng, 3 + rng() % 3, 10, 4);
    auto cfg = make_variant("BwCu", net.weighted_count(), 0.3f + 0.1f * static_cast<float>(t % 6));
    cfg.first = rng() % net.weighted_count();
    Tensor x = random_tensor(net.input_shape(), rng);
    ExtractionStats stats;
    extract_path(net, infer(net, x), cfg, &stats);
    SimReport spill = run(compile(net, cfg, {}), net, x, sim);
    CHECK(spill.psum_entries_consumed == stats.psums_consumed);
    CHECK(spill.psum_entries_full == stats.psums_stored);
    CHECK(spill.psum_entries_stored == stats.psums_stored);
    CHECK(spill.psum_entries_loaded == stats.psums_consumed);
    CHECK(spill.psum_dram_bytes == doctest::Approx(2.0 * static_cast<double>(stats.psums_stored + stats.psums_consumed)));

    CompileOptions rc;
    rc.recompute = true;
    SimReport re = run(compile(net, cfg, rc), net, x, sim);
    CHECK(re.psum_dram_bytes == 0.0);
    CHECK(re.psum_entries_stored == 0);
    CHECK(re.psum_entries_consumed == stats.psums_consumed);
    CHECK(re.path == spill.path);
  }
}

TEST_CASE("detector verdict on the machine equals software classification") {
  std::mt19937_64 rng(12);
  Network net = random_mlp(rng, 3, 8, 3);
  auto cfg = make_variant("BwCu", net.weighted_count(), 0.6f);
  std::vector<LabeledSample> data;
  for (int i = 0; i < 40; ++i) {
    Tensor x = random_tensor(net.input_shape(), rng);
    data.push_back({x, infer(net, x).predicted});
  }
  ClassPathStore store = profile(net, data, cfg);
  std::vector<std::vector<float>> feats;
  std::vector<bool> labels;
  for (int i = 0; i < 40; ++i) {
    feats.push_back({static_cast<float>(i) / 40.0f});
    labels.push_back(i >= 20);
  }
  ForestOptions fo;
  fo.trees = 5;
  RandomForest forest = train_forest(feats, labels, fo);
  DetectorImage det{&store, &forest, FeatureMode::Overall, 0.5};
  CompiledProgram prog = compile(net, cfg, {});
  for (int i = 0; i < 20; ++i) {
    Tensor x = random_tensor(net.input_shape(), rng, -1.0f, 2.0f);
    Inference inf = infer(net, x);
    SimReport r = run(prog, net, x, SimConfig{}, det);
    const ClassPath* cp = store.find(inf.predicted);
    if (!cp) {
      CHECK(r.unprofiled);
      CHECK(!r.verdict);
      continue;
    }
    REQUIRE(r.verdict);
    auto want = classify(forest, similarity(extract_path(net, inf, cfg), cp->path));
    CHECK(r.verdict->adversarial == want.adversarial);
    CHECK(r.verdict->score == want.score);
  }
  auto other = make_variant("BwCu", net.weighted_count(), 0.7f);
  CHECK_THROWS_AS(run(compile(net, other, {}), net, data[0].input, SimConfig{}, det), Error);
}

TEST_CASE("inference-only program has overhead exactly one") {
  std::mt19937_64 rng(5);
  Network net = random_convnet(rng);
  Tensor x = random_tensor(net.input_shape(), rng);
  CompiledProgram base = lower_inference_only(net);
  SimReport r = run(base, net, x, SimConfig{});
  CHECK(r.latency_overhead == 1.0);
  CHECK(r.energy_overhead == 1.0);
  CHECK(r.cycles == r.baseline_cycles);
  CHECK(r.path.popcount() == 0);
  CHECK(op_count(r, isa::Opcode::Inf) == net.weighted_count());
}

TEST_CASE("sort unit model") {
  SimConfig c;
  c.sort_units = 2;
  c.sort_width = 16;
  c.merge_way = 16;
  CHECK(sort_unit_model(0, c).total == 0);
  // 16 entries: one block, 10 bitonic stages, no merge.
  auto one = sort_unit_model(16, c);
  CHECK(one.blocks == 1);
  CHECK(one.block_cycles == 10);
  CHECK(one.merge_cycles == 0);
  CHECK(one.total == 10);
  // 256 entries: 16 blocks over 2 units, one 16-way merge level.
  auto big = sort_unit_model(256, c);
  CHECK(big.blocks == 16);
  CHECK(big.block_cycles == 8 * 10);
  CHECK(big.merge_cycles == 256);
  CHECK(big.total == 80 + 256);
  // 257 entries need a second merge level.
  CHECK(sort_unit_model(257, c).merge_cycles == 257 * 2);
  // Memory-bound fetch overlaps the block phase.
  auto mem = sort_unit_model(256, c, 8 * 1000);
  CHECK(mem.memory_cycles == 1000);
  CHECK(mem.total == 1000 + 256);
  c.sort_memory_bound = false;
  CHECK(sort_unit_model(256, c, 8 * 1000).total == 80 + 1000 + 256);

  // Latency never increases with more units or a wider merge.
  SimConfig a;
  for (std::size_t len : {1u, 17u, 300u, 5000u})
    for (std::size_t u = 1; u < 8; ++u) {
      a.sort_units = u;
      std::size_t lo = sort_unit_model(len, a).total;
      a.sort_units = u + 1;
      CHECK(sort_unit_model(len, a).total <= lo);
    }
}

TEST_CASE("energy is linear in event counts") {
  SimConfig c;
  EventCounts e;
  CHECK(energy_account(e, c).total == 0.0);
  e.count["mac"] = 10;
  e.count["dram_byte"] = 3;
  auto one = energy_account(e, c);
  CHECK(one.total == doctest::Approx(10 * 1.0 + 3 * 40.0));
  CHECK(one.component.at("pe") == doctest::Approx(10.0));
  EventCounts twice = e;
  twice += e;
  CHECK(energy_account(twice, c).total == doctest::Approx(2 * one.total));
  c.energy.erase("mac");
  CHECK_THROWS_AS(energy_account(e, c), Error);
}

TEST_CASE("simconfig text") {
  SimConfig d;
  CHECK(parse_simconfig(format_simconfig(d)) == d);
  auto c = parse_simconfig("; comment\npe_rows = 8\n# other\n[energy]\nmac = 2.5\n");
  CHECK(c.pe_rows == 8);
  CHECK(c.energy.at("mac") == 2.5);
  CHECK(c.pe_cols == d.pe_cols);
  auto err = [](const std::string& s) {
    try {
      parse_simconfig(s);
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::Internal;
  };
  CHECK(err("bogus = 1") == ErrorKind::Config);
  CHECK(err("pe_rows = -3") == ErrorKind::Config);
  CHECK(err("pe_rows = 0") == ErrorKind::Config);
  CHECK(err("sort_width = 12") == ErrorKind::Config);
  CHECK(err("energy.nothing = 1") == ErrorKind::Config);
  CHECK(err("pe_rows") == ErrorKind::Config);
  CHECK(load_simconfig(std::string(CANARY_SOURCE_DIR) + "/configs/simconfig_default.txt") == d);
}

TEST_CASE("pipelining and recompute effects") {
  const Network& net = testing_support::trained_cnn4();
  auto data = make_shapes(4, 16, 77);
  SimConfig sim;
  const std::size_t n = net.weighted_count();

  auto fw = make_variant("FwAb", n, 0.5f, 0.1f);
  CompileOptions layers;
  layers.layers = true;
  for (const auto& s : data) {
    SimReport plain = run(compile(net, fw, {}), net, s.input, sim);
    SimReport piped = run(compile(net, fw, layers), net, s.input, sim);
    CHECK(piped.cycles < plain.cycles);
    CHECK(piped.path == plain.path);
  }

  auto bw = make_variant("BwCu", n, 0.5f);
  CompileOptions neurons;
  neurons.neurons = true;
  CompileOptions rc;
  rc.recompute = true;
  for (const auto& s : data) {
    SimReport plain = run(compile(net, bw, {}), net, s.input, sim);
    SimReport piped = run(compile(net, bw, neurons), net, s.input, sim);
    SimReport re = run(compile(net, bw, rc), net, s.input, sim);
    CHECK(piped.cycles < plain.cycles);
    CHECK(re.psum_dram_bytes < plain.psum_dram_bytes);
    CHECK(re.path == plain.path);
    CHECK(plain.consumed_fraction() < 1.0);
  }

  // A mask bit per entry against a two-byte psum.
  auto ab = make_variant("BwAb", n, 0.5f, 0.1f);
  SimReport masks = run(compile(net, ab, {}), net, data[0].input, sim);
  SimReport spill = run(compile(net, bw, {}), net, data[0].input, sim);
  double written_masks = static_cast<double>(spill.psum_entries_full) / 8.0;
  CHECK(written_masks / (2.0 * static_cast<double>(spill.psum_entries_full)) == doctest::Approx(1.0 / 16.0));
  CHECK(masks.mask_dram_bytes >= written_masks);
}

TEST_CASE("reports are deterministic and traces are ordered") {
  const Network& net = testing_support::trained_cnn4();
  auto s = make_shapes(1, 16, 9)[0];
  auto cfg = make_variant("Hybrid", net.weighted_count(), 0.5f, 0.1f);
  auto prog = compile(net, cfg, parse_opt_level("all"));
  SimConfig sim;
  RunOptions opt;
  opt.trace = true;
  SimReport a = run(prog, net, s.input, sim, {}, opt);
  SimReport b = run(prog, net, s.input, sim, {}, opt);
  CHECK(report_json(a, sim) == report_json(b, sim));
  REQUIRE(a.trace.size() == a.instructions);
  for (std::size_t i = 1; i < a.trace.size(); ++i) CHECK(a.trace[i].issue >= a.trace[i - 1].issue);
  CHECK(a.trace.back().op == isa::Opcode::Halt);
  CHECK(a.cycles >= a.trace.back().end);
  CHECK(a.energy.total > a.baseline_energy);

  auto agg = aggregate({a, b});
  CHECK(agg.cycles == 2 * a.cycles);
  CHECK(agg.latency_overhead == doctest::Approx(a.latency_overhead));
}

TEST_CASE("machine faults") {
  std::mt19937_64 rng(3);
  Network net = random_mlp(rng, 2, 5, 2);
  Tensor x = random_tensor(net.input_shape(), rng);
  auto cfg = make_variant("BwCu", 2, 0.5f);
  auto fault = [&](const std::string& text) {
    try {
      run(isa::assemble(text), net, x, cfg, SimConfig{});
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::Internal;
  };
  CHECK(fault("mov r1, 5") == ErrorKind::Fault);
  CHECK(fault("mov r1, 5\nsort r1, r1, r1\nhalt") == ErrorKind::Fault);
  CHECK(fault("<l>\njne <l>\nmov r15, 1\n<x>\ndec r15, r14\njne <x>\nhalt") == ErrorKind::Fault);
  SimConfig small;
  small.max_steps = 10;
  CHECK_THROWS_AS(run(isa::assemble("mov r1, 100\n<l>\ndec r1\njne <l>\nhalt"), net, x, cfg, small), Error);
  CHECK_THROWS_AS(run(compile(net, cfg, {}), net, random_tensor({net.input_shape()[0] + 1}, rng), SimConfig{}), Error);
}

TEST_CASE("parameter sweeps") {
  std::mt19937_64 rng(44);
  Network net = random_mlp(rng, 4, 10, 3);
  SweepSetup s;
  s.net = &net;
  for (int i = 0; i < 3; ++i) s.inputs.push_back(random_tensor(net.input_shape(), rng));
  s.config = make_variant("BwCu", net.weighted_count(), 0.5f);
  s.jobs = 3;
  auto units = sweep(SweepParam::SortUnits, {1, 2, 4}, s);
  REQUIRE(units.size() == 3);
  CHECK(units[2].cycles <= units[0].cycles);
  auto term = sweep(SweepParam::Termination, {0, 1, 2, 3}, s);
  for (std::size_t i = 1; i < term.size(); ++i) CHECK(term[i].psum_entries_full <= term[i - 1].psum_entries_full);
  s.jobs = 1;
  auto serial = sweep(SweepParam::SortUnits, {1, 2, 4}, s);
  for (std::size_t i = 0; i < 3; ++i) CHECK(serial[i].cycles == units[i].cycles);
  CHECK_THROWS_AS(sweep(SweepParam::Start, {1}, s), Error);
  CHECK_THROWS_AS(sweep_param_from_string("gamma"), Error);
}
