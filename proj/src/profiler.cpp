#include "canary/profiler.hpp"

#include <sstream>

#include <spdlog/spdlog.h>

#include "canary/binio.hpp"
#include "canary/detector.hpp"
#include "canary/error.hpp"
#include "canary/hash.hpp"
#include "canary/parallel.hpp"

namespace canary {

const ClassPath* ClassPathStore::find(std::size_t cls) const {
  auto it = classes.find(cls);
  return it == classes.end() ? nullptr : &it->second;
}

std::uint64_t fingerprint(const Network& net, const ExtractionConfig& cfg) {
  Fnv1a h;
  h.add_u64(net.digest());
  h.add_string(cfg.serialize());
  return h.value();
}

void require_fingerprint(const ClassPathStore& store, const Network& net, const ExtractionConfig& cfg) {
  std::uint64_t fp = fingerprint(net, cfg);
  if (store.fingerprint == fp) return;
  std::ostringstream os;
  os << std::hex << "class paths were profiled with a different model or extraction config (store fingerprint 0x"
     << store.fingerprint << ", current 0x" << fp << ")";
  fail(ErrorKind::Config, os.str());
}

namespace {

void accumulate(ClassPathStore& store, const Network& net, const std::vector<LabeledSample>& data,
                const ExtractionConfig& cfg, std::size_t jobs) {
  std::vector<std::optional<ActivationPath>> paths(data.size());
  parallel_for(data.size(), jobs, [&](std::size_t i) {
    Inference inf = infer(net, data[i].input);
    if (inf.predicted == data[i].label) paths[i] = extract_path(net, inf, cfg);
  });
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!paths[i]) continue;
    auto [it, fresh] = store.classes.try_emplace(data[i].label);
    if (fresh)
      it->second.path = std::move(*paths[i]);
    else
      path_or_into(it->second.path, *paths[i]);
    ++it->second.samples;
  }
}

}  // namespace

ClassPathStore profile(const Network& net, const std::vector<LabeledSample>& data, const ExtractionConfig& cfg,
                       std::size_t jobs) {
  cfg.validate(net.weighted_count());
  ClassPathStore store;
  store.fingerprint = fingerprint(net, cfg);
  if (data.empty()) spdlog::warn("profiling an empty dataset; the class-path store is empty");
  accumulate(store, net, data, cfg, jobs);
  return store;
}

ClassPathStore merge_incremental(const ClassPathStore& store, const Network& net,
                                 const std::vector<LabeledSample>& data, const ExtractionConfig& cfg,
                                 std::size_t jobs) {
  require_fingerprint(store, net, cfg);
  ClassPathStore out = store;
  accumulate(out, net, data, cfg, jobs);
  return out;
}

std::vector<std::pair<std::size_t, std::size_t>> saturation_curve(const Network& net,
                                                                  const std::vector<LabeledSample>& data,
                                                                  const ExtractionConfig& cfg, std::size_t cls) {
  std::size_t members = 0;
  for (const auto& s : data) members += s.label == cls;
  require(members >= 2, ErrorKind::Config, "saturation curve needs at least two samples of the class");
  std::vector<std::pair<std::size_t, std::size_t>> curve;
  ActivationPath acc = ActivationPath::empty_for(net);
  std::size_t seen = 0;
  for (const auto& s : data) {
    if (s.label != cls) continue;
    Inference inf = infer(net, s.input);
    if (inf.predicted != cls) continue;
    path_or_into(acc, extract_path(net, inf, cfg));
    curve.push_back({++seen, acc.popcount()});
  }
  return curve;
}

SimilarityMatrix interclass_similarity_matrix(const ClassPathStore& store) {
  require(store.classes.size() >= 2, ErrorKind::Config, "similarity matrix needs at least two profiled classes");
  SimilarityMatrix m;
  for (const auto& [c, _] : store.classes) m.classes.push_back(c);
  for (const auto& [ci, a] : store.classes) {
    std::vector<double> row;
    for (const auto& [cj, b] : store.classes) row.push_back(ci == cj ? 1.0 : similarity(a.path, b.path).overall);
    m.s.push_back(std::move(row));
  }
  return m;
}

namespace {
constexpr std::uint16_t kClassPathVersion = 1;
}

void save_class_paths(const ClassPathStore& store, const std::filesystem::path& path) {
  binio::Writer w;
  w.magic("PTCP");
  w.u16(kClassPathVersion);
  w.u32(static_cast<std::uint32_t>(store.classes.size()));
  for (const auto& [cls, cp] : store.classes) {
    w.u32(static_cast<std::uint32_t>(cls));
    w.u32(static_cast<std::uint32_t>(cp.samples));
    w.u16(static_cast<std::uint16_t>(cp.path.masks.size()));
    for (const auto& m : cp.path.masks) {
      w.u32(static_cast<std::uint32_t>(m.size()));
      std::vector<std::uint8_t> bytes((m.size() + 7) / 8, 0);
      for (auto i = m.find_first(); i != Bits::npos; i = m.find_next(i))
        bytes[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
      w.bytes(bytes.data(), bytes.size());
    }
  }
  w.u64(store.fingerprint);
  binio::write_file(path, w.data());
}

ClassPathStore load_class_paths(const std::filesystem::path& path, const Network& net) {
  binio::Reader r(binio::read_file(path), path.string());
  r.expect_magic("PTCP");
  require(r.u16() == kClassPathVersion, ErrorKind::Data, path.string() + ": unsupported class-path version");
  ClassPathStore store;
  std::uint32_t count = r.u32();
  ActivationPath shape = ActivationPath::empty_for(net);
  for (std::uint32_t c = 0; c < count; ++c) {
    std::size_t cls = r.u32();
    ClassPath cp;
    cp.samples = r.u32();
    std::uint16_t layers = r.u16();
    require(layers == shape.masks.size(), ErrorKind::Data,
            path.string() + ": class path layer count does not match the network");
    cp.path = shape;
    for (std::uint16_t l = 0; l < layers; ++l) {
      std::uint32_t len = r.u32();
      require(len == shape.masks[l].size(), ErrorKind::Data,
              path.string() + ": class path bit length does not match the network");
      std::vector<std::uint8_t> bytes((len + 7) / 8);
      r.bytes(bytes.data(), bytes.size());
      for (std::size_t i = 0; i < len; ++i)
        if (bytes[i / 8] >> (i % 8) & 1) cp.path.masks[l].set(i);
    }
    require(store.classes.emplace(cls, std::move(cp)).second, ErrorKind::Data,
            path.string() + ": duplicate class id " + std::to_string(cls));
  }
  store.fingerprint = r.u64();
  r.expect_end();
  return store;
}

}  // namespace canary
