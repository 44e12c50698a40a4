#include <doctest.h>

#include <random>

#include "canary/compiler.hpp"
#include "canary/error.hpp"
#include "canary/simulator.hpp"
#include "support.hpp"

using namespace canary;
using isa::Opcode;
using testing_support::random_mlp;
using testing_support::random_tensor;

namespace {

std::size_t n_of(const std::vector<std::size_t>& c, Opcode op) { return c[static_cast<std::size_t>(op)]; }
std::size_t n_of(const SimReport& r, Opcode op) { return r.opcode_counts[static_cast<std::size_t>(op)]; }

Network deep_mlp(std::size_t weighted) {
  std::vector<std::size_t> hidden(weighted - 1, 12);
  Network net = make_mlp({10}, hidden, 4);
  init_weights(net, 3);
  return net;
}

std::vector<ExtractionConfig> all_variants(std::size_t n) {
  return {make_variant("BwCu", n), make_variant("BwAb", n), make_variant("FwAb", n), make_variant("Hybrid", n)};
}

}  // namespace

TEST_CASE("memory map") {
  Network net = deep_mlp(3);
  auto m = MemoryMap::for_network(net);
  CHECK(m.layers == 3);
  CHECK(std::has_single_bit(m.stride));
  CHECK(m.stride >= 64);
  for (std::size_t w = 0; w < 3; ++w) {
    auto loc = m.locate(m.neuron(w, 3));
    REQUIRE(loc);
    CHECK(loc->region == Region::Pre);
    CHECK(loc->layer == w);
    CHECK(loc->offset == 12);
    auto rec = m.locate(m.record(w, 2));
    REQUIRE(rec);
    CHECK(rec->region == Region::Psum);
    CHECK(rec->offset == 2 * m.record_stride());
    // Stepping SEL by one layer moves to the layer below.
    CHECK(m.address(Region::Sel, w) + m.step() == m.address(Region::Sel, w + 1));
  }
  CHECK(m.locate(m.null_record())->region == Region::Null);
  CHECK(!m.locate(0));
  CHECK(!m.locate(0xF0000000u));
}

TEST_CASE("opt levels") {
  CHECK(parse_opt_level("none") == CompileOptions{});
  CHECK(parse_opt_level("all") == CompileOptions{true, true, true});
  CHECK(parse_opt_level("recompute").recompute);
  CHECK_THROWS_AS(parse_opt_level("fast"), Error);
}

TEST_CASE("backward cumulative program size") {
  Network net = deep_mlp(8);
  CompiledProgram p = lower(net, make_variant("BwCu", 8), {});
  CHECK(p.program.code.size() <= 40);
  CHECK(p.program.size_bytes() < 128);
  auto c = census(p.program);
  CHECK(n_of(c, Opcode::Sort) == 1);
  CHECK(n_of(c, Opcode::Acum) == 1);
  CHECK(n_of(c, Opcode::Infsp) == 1);
  CHECK(n_of(c, Opcode::Cls) == 1);
  CHECK(isa::assemble(p.assembly) == p.program);
  CHECK(isa::assemble(isa::disassemble(p.program)) == p.program);
}

TEST_CASE("dynamic instruction census") {
  const Network& net = testing_support::trained_cnn4();
  auto x = make_shapes(1, 16, 3)[0].input;
  const std::size_t n = net.weighted_count();
  SimConfig sim;

  auto fw = make_variant("FwAb", n);
  fw.first = n - 3;
  SimReport f = run(compile(net, fw, {}), net, x, sim);
  CHECK(n_of(f, Opcode::Inf) == n);
  CHECK(n_of(f, Opcode::Genmasks) == 3);
  CHECK(n_of(f, Opcode::Sort) == 0);
  CHECK(n_of(f, Opcode::Acum) == 0);
  CHECK(n_of(f, Opcode::Infsp) == 0);

  auto bw = make_variant("BwCu", n);
  SimReport b = run(compile(net, bw, {}), net, x, sim);
  CHECK(n_of(b, Opcode::Infsp) == n);
  CHECK(n_of(b, Opcode::Sort) == n_of(b, Opcode::Acum));
  CHECK(n_of(b, Opcode::Sort) >= n);

  SimReport r = run(compile(net, bw, parse_opt_level("recompute")), net, x, sim);
  CHECK(n_of(r, Opcode::Infsp) == 0);
  CHECK(n_of(r, Opcode::Csps) >= 1);
  CHECK(n_of(r, Opcode::Csps) == n_of(r, Opcode::Sort));
}

TEST_CASE("passes are idempotent and leave inapplicable programs alone") {
  std::mt19937_64 rng(6);
  for (int t = 0; t < 10; ++t) {
    Network net = random_mlp(rng, 2 + rng() % 5, 8, 3);
    for (const auto& cfg : all_variants(net.weighted_count())) {
      CompiledProgram p = lower(net, cfg, {});
      for (auto pass : {&pipeline_layers, &pipeline_neurons, &recompute_transform}) {
        CompiledProgram once = pass(p);
        CHECK(pass(once).program == once.program);
      }
      if (cfg.direction == Direction::Forward) {
        CHECK(pipeline_neurons(p).program == p.program);
        CHECK(recompute_transform(p).program == p.program);
      } else {
        CHECK(pipeline_layers(p).program == p.program);
      }
      if (!cfg.uses_cumulative()) CHECK(pipeline_neurons(p).program == p.program);
    }
  }
  Network one({make_fc(4, 3)}, 3);
  auto fw = make_variant("FwAb", 1);
  CompiledProgram single = lower(one, fw, {});
  CHECK(pipeline_layers(single).program == single.program);
}

TEST_CASE("generated programs pass the static checks") {
  std::mt19937_64 rng(17);
  for (int t = 0; t < 12; ++t) {
    Network net = t % 2 ? random_mlp(rng, 2 + rng() % 6, 9, 3) : testing_support::random_convnet(rng);
    for (auto cfg : all_variants(net.weighted_count())) {
      cfg.first = rng() % net.weighted_count();
      for (const char* level : {"none", "layers", "neurons", "recompute", "all"}) {
        CAPTURE(cfg.serialize());
        CAPTURE(level);
        CompiledProgram p = compile(net, cfg, parse_opt_level(level));
        CHECK(check_dependencies(p).empty());
        CHECK(isa::check_registers_defined(p.program).empty());
        CHECK(p.program.code.back().op == Opcode::Halt);
      }
    }
    CHECK(check_dependencies(lower_inference_only(net)).empty());
  }
}

TEST_CASE("dependency check flags a misordered schedule") {
  Network net = deep_mlp(3);
  CompiledProgram p = lower(net, make_variant("FwAb", 3), {});
  REQUIRE(p.units.size() >= 2);
  CompiledProgram bad = p;
  std::swap(bad.units[0], bad.units[1]);
  CHECK(!check_dependencies(bad).empty());
  CompiledProgram missing = p;
  for (auto& u : missing.units) u.deps.clear();
  CHECK(!check_dependencies(missing).empty());
}

TEST_CASE("invalid compile inputs") {
  Network net = deep_mlp(3);
  auto cfg = make_variant("BwCu", 2);
  CHECK_THROWS_AS(lower(net, cfg, {}), Error);
  std::mt19937_64 rng(1);
  Network other = random_mlp(rng, 3, 6, 4);
  CHECK_THROWS_AS(run(compile(net, make_variant("BwCu", 3), {}), other, random_tensor(other.input_shape(), rng),
                      SimConfig{}),
                  Error);
}
