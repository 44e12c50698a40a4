#include <iostream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "canary/binio.hpp"
#include "canary/error.hpp"
#include "canary/simulator.hpp"
#include "cli.hpp"

namespace cli {

namespace {

struct CompileArgs {
  std::string model, config, opt = "none", out, listing;
};

struct AsmArgs {
  std::string in, out;
};

struct SimArgs {
  std::string prog, model, input, data, config, simconfig, class_paths, forest, features = "overall", report;
  std::size_t index = 0;
  double threshold = 0.5;
  bool trace = false;
};

struct SweepArgs {
  std::string model, config, data, param, values, opt = "none", simconfig, report;
  std::size_t limit = 8, jobs = 1;
};

canary::SimConfig sim_config(const std::string& path) {
  return path.empty() ? canary::SimConfig{} : canary::load_simconfig(path);
}

void cmd_compile(const CompileArgs& a) {
  canary::Network net = canary::load_model(a.model);
  canary::ExtractionConfig cfg = canary::load_config(a.config);
  canary::CompiledProgram p = canary::compile(net, cfg, canary::parse_opt_level(a.opt));
  auto problems = canary::check_dependencies(p);
  for (const auto& s : canary::isa::check_registers_defined(p.program)) problems.push_back(s);
  if (!problems.empty()) canary::fail(canary::ErrorKind::Internal, "compiled program is unsound: " + problems.front());
  canary::isa::save_program(p.program, a.out);
  std::vector<std::string> outs{a.out};
  if (!a.listing.empty()) {
    canary::binio::write_text(a.listing, canary::isa::disassemble(p.program));
    outs.push_back(a.listing);
  }
  spdlog::info("{} ({}): {} instructions, {} bytes, {} pool entries", cfg.name, a.opt, p.program.code.size(),
               p.program.size_bytes(), p.program.pool.size());
  write_run_manifest("compile", {{"model", a.model}, {"config", a.config}}, outs, std::nullopt, {{"opt", a.opt}});
}

void cmd_asm(const AsmArgs& a) {
  canary::isa::Program p = canary::isa::assemble(canary::binio::read_text(a.in));
  for (const auto& s : canary::isa::check_registers_defined(p)) spdlog::warn("{}", s);
  canary::isa::save_program(p, a.out);
  spdlog::info("{} instructions, {} bytes", p.code.size(), p.size_bytes());
  write_run_manifest("asm", {{"in", a.in}}, {a.out}, std::nullopt);
}

void cmd_disasm(const AsmArgs& a) {
  std::string text = canary::isa::disassemble(canary::isa::load_program(a.in));
  if (a.out.empty()) {
    std::cout << text;
    return;
  }
  canary::binio::write_text(a.out, text);
  write_run_manifest("disasm", {{"in", a.in}}, {a.out}, std::nullopt);
}

void cmd_simulate(const SimArgs& a) {
  canary::Network net = canary::load_model(a.model);
  canary::isa::Program prog = canary::isa::load_program(a.prog);
  canary::ExtractionConfig cfg;
  cfg.direction = canary::Direction::Forward;
  if (!a.config.empty()) cfg = canary::load_config(a.config);
  canary::SimConfig sim = sim_config(a.simconfig);

  canary::Tensor x;
  if (!a.input.empty()) {
    x = canary::load_tensor(a.input);
  } else {
    canary::require(!a.data.empty(), canary::ErrorKind::Config, "give --input or --data");
    auto data = canary::load_dataset(a.data);
    canary::require(a.index < data.size(), canary::ErrorKind::Data,
                    fmt::format("--index {} beyond {} samples", a.index, data.size()));
    x = data[a.index].input;
  }

  canary::ClassPathStore store;
  canary::RandomForest forest;
  canary::DetectorImage det;
  if (!a.class_paths.empty() || !a.forest.empty()) {
    canary::require(!a.class_paths.empty() && !a.forest.empty(), canary::ErrorKind::Config,
                    "--class-paths and --forest go together");
    store = canary::load_class_paths(a.class_paths, net);
    forest = canary::load_forest(a.forest);
    det = {&store, &forest, feature_mode_from_string(a.features), a.threshold};
  }
  canary::RunOptions opt;
  opt.trace = a.trace;
  canary::SimReport r = canary::run(prog, net, x, cfg, sim, det, opt);

  spdlog::info("{} cycles ({:.3f}x inference), energy {:.4g} pJ ({:.3f}x), {} instructions", r.cycles,
               r.latency_overhead, r.energy.total, r.energy_overhead, r.instructions);
  if (r.predicted) spdlog::info("predicted class {}, path bits {}", *r.predicted, r.path.popcount());
  if (r.verdict) spdlog::info("verdict: {} (score {:.4f})", r.verdict->adversarial ? "adversarial" : "benign", r.verdict->score);
  if (r.unprofiled) spdlog::info("predicted class has no class path");
  if (a.report.empty()) return;
  nlohmann::json j = nlohmann::json::parse(canary::report_json(r, sim));
  if (a.trace) {
    nlohmann::json t = nlohmann::json::array();
    for (const auto& e : r.trace) t.push_back({{"pc", e.pc}, {"op", canary::isa::mnemonic(e.op)}, {"issue", e.issue}, {"end", e.end}});
    j["trace"] = t;
  }
  write_json(a.report, j);
  write_run_manifest("simulate",
                     {{"prog", a.prog}, {"model", a.model}, {"input", a.input}, {"data", a.data}, {"config", a.config},
                      {"simconfig", a.simconfig}, {"class_paths", a.class_paths}, {"forest", a.forest}},
                     {a.report}, std::nullopt, {{"index", a.index}, {"threshold", a.threshold}, {"trace", a.trace}});
}

void cmd_sweep(const SweepArgs& a) {
  canary::Network net = canary::load_model(a.model);
  canary::SweepSetup s;
  s.net = &net;
  s.config = canary::load_config(a.config);
  s.options = canary::parse_opt_level(a.opt);
  s.sim = sim_config(a.simconfig);
  s.jobs = a.jobs;
  auto data = canary::load_dataset(a.data);
  if (a.limit && data.size() > a.limit) data.resize(a.limit);
  canary::require(!data.empty(), canary::ErrorKind::Data, "dataset " + a.data + " is empty");
  for (auto& d : data) s.inputs.push_back(std::move(d.input));
  const canary::SweepParam param = canary::sweep_param_from_string(a.param);
  const std::vector<double> values = parse_values(a.values);
  auto reports = canary::sweep(param, values, s);

  nlohmann::json points = nlohmann::json::array();
  fmt::print("{:>10} {:>12} {:>10} {:>10} {:>10}\n", canary::to_string(param), "cycles", "latency", "energy", "sort-share");
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto& r = reports[i];
    fmt::print("{:>10g} {:>12} {:>10.4f} {:>10.4f} {:>10.4f}\n", values[i], r.cycles, r.latency_overhead,
               r.energy_overhead, r.sort_energy_share());
    nlohmann::json p = nlohmann::json::parse(canary::report_json(r, s.sim));
    p["value"] = values[i];
    points.push_back(p);
  }
  if (a.report.empty()) return;
  write_json(a.report, {{"param", canary::to_string(param)}, {"inputs", s.inputs.size()}, {"points", points}});
  write_run_manifest("sweep",
                     {{"model", a.model}, {"config", a.config}, {"data", a.data}, {"simconfig", a.simconfig}},
                     {a.report}, std::nullopt, {{"param", a.param}, {"values", values}, {"opt", a.opt}, {"limit", a.limit}});
}

}  // namespace

void add_hardware_commands(CLI::App& app) {
  auto comp = std::make_shared<CompileArgs>();
  auto* c = app.add_subcommand("compile", "Lower an extraction config to an accelerator program");
  c->add_option("--model", comp->model)->required()->check(CLI::ExistingFile);
  c->add_option("--config", comp->config)->required()->check(CLI::ExistingFile);
  c->add_option("--opt", comp->opt, "none, layers, neurons, recompute or all")->capture_default_str();
  c->add_option("-o,--out", comp->out, "Binary program (.ptpr)")->required();
  c->add_option("--listing", comp->listing, "Also write the disassembly here");
  c->callback([comp] { cmd_compile(*comp); });

  auto as = std::make_shared<AsmArgs>();
  c = app.add_subcommand("asm", "Assemble a listing into a binary program");
  c->add_option("input", as->in)->required()->check(CLI::ExistingFile);
  c->add_option("-o,--out", as->out)->required();
  c->callback([as] { cmd_asm(*as); });

  auto dis = std::make_shared<AsmArgs>();
  c = app.add_subcommand("disasm", "Disassemble a binary program");
  c->add_option("input", dis->in)->required()->check(CLI::ExistingFile);
  c->add_option("-o,--out", dis->out, "Listing path (default: stdout)");
  c->callback([dis] { cmd_disasm(*dis); });

  auto sim = std::make_shared<SimArgs>();
  c = app.add_subcommand("simulate", "Run a program on the accelerator model");
  c->add_option("--prog", sim->prog)->required()->check(CLI::ExistingFile);
  c->add_option("--model", sim->model)->required()->check(CLI::ExistingFile);
  c->add_option("--input", sim->input, "Input tensor blob");
  c->add_option("--data", sim->data, "Dataset directory, with --index");
  c->add_option("--index", sim->index)->capture_default_str();
  c->add_option("--config", sim->config, "Extraction config the program was compiled from");
  c->add_option("--simconfig", sim->simconfig, "Hardware parameters (key = value text)");
  c->add_option("--class-paths", sim->class_paths);
  c->add_option("--forest", sim->forest);
  c->add_option("--features", sim->features, "overall or per-layer")->capture_default_str();
  c->add_option("--threshold", sim->threshold)->capture_default_str();
  c->add_flag("--trace", sim->trace, "Include the per-instruction trace in the report");
  c->add_option("--report", sim->report, "JSON report path");
  c->callback([sim] { cmd_simulate(*sim); });

  auto sw = std::make_shared<SweepArgs>();
  c = app.add_subcommand("sweep", "Simulate a parameter sweep over a set of inputs");
  c->add_option("--model", sw->model)->required()->check(CLI::ExistingFile);
  c->add_option("--config", sw->config)->required()->check(CLI::ExistingFile);
  c->add_option("--data", sw->data, "Dataset directory")->required();
  c->add_option("--param", sw->param, "theta, phi, termination, start, merge-way, sort-units, pe-dims")->required();
  c->add_option("--values", sw->values, "Comma-separated values")->required();
  c->add_option("--opt", sw->opt)->capture_default_str();
  c->add_option("--simconfig", sw->simconfig);
  c->add_option("--limit", sw->limit, "Inputs per point (0: all)")->capture_default_str();
  c->add_option("-j,--jobs", sw->jobs)->capture_default_str();
  c->add_option("--report", sw->report, "JSON report path");
  c->callback([sw] { cmd_sweep(*sw); });
}

}  // namespace cli
