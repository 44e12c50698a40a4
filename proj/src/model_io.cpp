#include "canary/model_io.hpp"

#include <fstream>
#include <iterator>
#include <sstream>

#include <nlohmann/json.hpp>

#include "canary/binio.hpp"
#include "canary/error.hpp"

namespace canary {

namespace fs = std::filesystem;
using nlohmann::json;

namespace binio {

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Data, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, const std::vector<std::uint8_t>& data) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::Data, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Data, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Data, "cannot write " + path.string());
  out << text;
}

}  // namespace binio

namespace {

constexpr std::uint16_t kWeightsVersion = 1;

json parse_json(const fs::path& path) {
  try {
    return json::parse(binio::read_text(path));
  } catch (const json::exception& e) {
    fail(ErrorKind::Data, path.string() + ": " + e.what());
  }
}

fs::path sidecar_of(const fs::path& manifest) {
  fs::path p = manifest;
  return p.replace_extension(".bin");
}

}  // namespace

void save_model(const Network& net, const fs::path& manifest) {
  json layers = json::array();
  binio::Writer w;
  w.magic("PTWT");
  w.u16(kWeightsVersion);
  for (const Layer& l : net.layers()) {
    json j{{"kind", to_string(l.kind)}, {"in_shape", l.in_shape}, {"out_shape", l.out_shape}};
    if (l.kind == LayerKind::Convolution || l.kind == LayerKind::MaxPool) {
      j["kernel"] = l.kernel;
      j["stride"] = l.stride;
    }
    if (l.kind == LayerKind::Convolution) j["padding"] = l.padding;
    layers.push_back(j);
    if (l.weighted()) {
      for (float v : l.weights.data) w.f32(v);
      for (float v : l.bias.data) w.f32(v);
    }
  }
  json doc{{"format", "canary-model"},
           {"version", kWeightsVersion},
           {"class_count", net.class_count()},
           {"weights", sidecar_of(manifest).filename().string()},
           {"layers", layers}};
  binio::write_text(manifest, doc.dump(2) + "\n");
  binio::write_file(sidecar_of(manifest), w.data());
}

Network load_model(const fs::path& manifest) {
  json doc = parse_json(manifest);
  try {
    fs::path bin = manifest.parent_path() / doc.at("weights").get<std::string>();
    binio::Reader r(binio::read_file(bin), bin.string());
    r.expect_magic("PTWT");
    auto version = r.u16();
    require(version == kWeightsVersion, ErrorKind::Data, "unsupported weights version " + std::to_string(version));
    std::vector<Layer> layers;
    for (const json& j : doc.at("layers")) {
      LayerKind kind = layer_kind_from_string(j.at("kind").get<std::string>());
      Shape in = j.at("in_shape").get<Shape>();
      Layer l;
      switch (kind) {
        case LayerKind::FullyConnected:
          require(in.size() == 1, ErrorKind::Data, "fc layer needs a flat input");
          l = make_fc(in[0], shape_size(j.at("out_shape").get<Shape>()));
          break;
        case LayerKind::Convolution:
          l = make_conv(in, j.at("out_shape").get<Shape>().at(0), j.at("kernel"), j.at("stride"),
                        j.value("padding", std::size_t{0}));
          break;
        case LayerKind::Relu: l = make_relu(in); break;
        case LayerKind::MaxPool: l = make_maxpool(in, j.at("kernel"), j.at("stride")); break;
        case LayerKind::Flatten: l = make_flatten(in); break;
      }
      require(l.out_shape == j.at("out_shape").get<Shape>(), ErrorKind::Data,
              "manifest out_shape disagrees with layer geometry");
      if (l.weighted()) {
        for (auto& v : l.weights.data) v = r.f32();
        for (auto& v : l.bias.data) v = r.f32();
      }
      layers.push_back(std::move(l));
    }
    r.expect_end();
    return Network(std::move(layers), doc.at("class_count").get<std::size_t>());
  } catch (const json::exception& e) {
    fail(ErrorKind::Data, manifest.string() + ": " + e.what());
  }
}

void save_tensor(const Tensor& t, const fs::path& path) {
  binio::Writer w;
  w.magic("PTWT");
  w.u16(kWeightsVersion);
  w.u32(static_cast<std::uint32_t>(t.shape.size()));
  for (auto d : t.shape) w.u32(static_cast<std::uint32_t>(d));
  for (float v : t.data) w.f32(v);
  binio::write_file(path, w.data());
}

Tensor load_tensor(const fs::path& path) {
  binio::Reader r(binio::read_file(path), path.string());
  r.expect_magic("PTWT");
  require(r.u16() == kWeightsVersion, ErrorKind::Data, path.string() + ": unsupported version");
  Shape shape(r.u32());
  for (auto& d : shape) d = r.u32();
  std::vector<float> data(shape_size(shape));
  for (auto& v : data) v = r.f32();
  r.expect_end();
  return Tensor(std::move(shape), std::move(data));
}

void save_dataset(const std::vector<LabeledSample>& samples, const fs::path& dir) {
  fs::create_directories(dir);
  json items = json::array();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::string name = "x" + std::to_string(i) + ".ptwt";
    save_tensor(samples[i].input, dir / name);
    items.push_back({{"file", name}, {"label", samples[i].label}});
  }
  binio::write_text(dir / "manifest.json", json{{"format", "canary-dataset"}, {"items", items}}.dump(1) + "\n");
}

std::vector<LabeledSample> load_dataset(const fs::path& dir) {
  json doc = parse_json(dir / "manifest.json");
  std::vector<LabeledSample> out;
  try {
    for (const json& it : doc.at("items"))
      out.push_back({load_tensor(dir / it.at("file").get<std::string>()), it.at("label").get<std::size_t>()});
  } catch (const json::exception& e) {
    fail(ErrorKind::Data, (dir / "manifest.json").string() + ": " + e.what());
  }
  return out;
}

}  // namespace canary
