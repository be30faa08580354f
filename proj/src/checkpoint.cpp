#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"
#include "normlab/model.hpp"

namespace normlab {

using nlohmann::ordered_json;

namespace {

constexpr const char* kFormat = "normlab-checkpoint";
constexpr int kVersion = 1;

ordered_json spec_json(const ModelSpec& spec) {
  ordered_json j;
  j["name"] = spec.name;
  j["input_shape"] = spec.input_shape;
  ordered_json layers = ordered_json::array();
  for (const auto& l : spec.layers) {
    ordered_json lj;
    lj["kind"] = layer_name(l.kind);
    if (l.kind == LayerKind::Conv2D || l.kind == LayerKind::Dense) {
      lj["in"] = l.in;
      lj["out"] = l.out;
    }
    layers.push_back(lj);
  }
  j["layers"] = layers;
  j["representation_index"] = spec.representation_index;
  return j;
}

ModelSpec spec_from(const ordered_json& j) {
  ModelSpec s;
  s.name = j.at("name").get<std::string>();
  s.input_shape = j.at("input_shape").get<Shape>();
  for (const auto& lj : j.at("layers")) {
    const auto name = lj.at("kind").get<std::string>();
    auto kind = parse_layer_kind(name);
    if (!kind) throw Error("model spec: unknown layer kind '" + name + "'");
    LayerSpec l{*kind, 0, 0};
    if (lj.contains("in")) l.in = lj.at("in").get<std::size_t>();
    if (lj.contains("out")) l.out = lj.at("out").get<std::size_t>();
    s.layers.push_back(l);
  }
  s.representation_index = j.at("representation_index").get<std::size_t>();
  return s;
}

struct Entry {
  std::string name;
  Shape shape;
  std::span<double> values;
};

// Parameter order shared by save and load.
std::vector<Entry> entries(Model& m) {
  std::vector<Entry> out;
  auto& layers = m.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto& st = layers[i];
    const std::string p = "layer" + std::to_string(i) + ".";
    if (st.weight.defined()) {
      out.push_back({p + "weight", st.weight.shape(), st.weight.data()});
      out.push_back({p + "bias", st.bias.shape(), st.bias.data()});
    }
    if (st.bn) {
      auto& bn = *st.bn;
      const Shape cs{bn.channels()};
      out.push_back({p + "gamma", cs, bn.gamma.data()});
      out.push_back({p + "beta", cs, bn.beta.data()});
      out.push_back({p + "running_mean", cs, bn.running_mean});
      out.push_back({p + "running_var", cs, bn.running_var});
    }
  }
  return out;
}

void put_le(std::string& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

double get_le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

std::string spec_to_json(const ModelSpec& spec) { return spec_json(spec).dump(); }

ModelSpec spec_from_json(const std::string& text) {
  try {
    return spec_from(ordered_json::parse(text));
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("spec_from_json: ") + e.what());
  }
}

void save_checkpoint(const Model& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  Model copy = model;  // entries() needs mutable spans; storage is shared, nothing is written
  const auto list = entries(copy);

  ordered_json manifest;
  manifest["format"] = kFormat;
  manifest["version"] = kVersion;
  manifest["model"] = spec_json(model.spec());
  manifest["frozen"] = model.frozen();
  manifest["seed"] = model.seed();
  ordered_json bn = ordered_json::array();
  for (std::size_t i = 0; i < model.layers().size(); ++i)
    if (const auto& st = model.layers()[i]; st.bn)
      bn.push_back({{"layer", i}, {"momentum", st.bn->momentum}, {"epsilon", st.bn->epsilon}});
  manifest["batchnorm"] = bn;
  ordered_json params = ordered_json::array();
  std::size_t offset = 0;
  std::string blob;
  for (const auto& e : list) {
    params.push_back({{"name", e.name}, {"shape", e.shape}, {"offset", offset}, {"count", e.values.size()}});
    offset += e.values.size();
    for (double v : e.values) put_le(blob, v);
  }
  manifest["parameters"] = params;
  manifest["byte_count"] = blob.size();
  manifest["dtype"] = "float64-le";

  std::ofstream(dir / "manifest.json", std::ios::binary) << manifest.dump(2) << '\n';
  std::ofstream bin(dir / "weights.bin", std::ios::binary);
  bin.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!bin) throw Error("checkpoint: failed to write " + (dir / "weights.bin").string());
}

Model load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw Error("checkpoint: cannot read " + (dir / "manifest.json").string());
  ordered_json manifest;
  try {
    manifest = ordered_json::parse(mf);
  } catch (const std::exception& e) {
    throw Error(std::string("checkpoint: malformed manifest: ") + e.what());
  }
  if (manifest.value("format", "") != kFormat || manifest.value("version", 0) != kVersion)
    throw Error("checkpoint: unsupported manifest format");

  Model m = Model::build(spec_from(manifest.at("model")), manifest.at("seed").get<std::uint64_t>());
  auto list = entries(m);
  const auto& params = manifest.at("parameters");
  std::size_t expected_count = 0;
  for (const auto& e : list) expected_count += e.values.size();
  if (params.size() != list.size())
    throw Error("checkpoint: manifest lists " + std::to_string(params.size()) +
                " parameter tensors, model spec implies " + std::to_string(list.size()));
  for (std::size_t i = 0; i < list.size(); ++i) {
    const auto& pj = params[i];
    if (pj.at("name").get<std::string>() != list[i].name ||
        pj.at("shape").get<Shape>() != list[i].shape)
      throw Error("checkpoint: parameter " + std::to_string(i) + " is " +
                  pj.at("name").get<std::string>() + " " + to_string(pj.at("shape").get<Shape>()) +
                  ", model spec implies " + list[i].name + " " + to_string(list[i].shape));
  }
  const std::size_t expected_bytes = expected_count * sizeof(double);
  if (manifest.at("byte_count").get<std::size_t>() != expected_bytes)
    throw Error("checkpoint: manifest byte_count " +
                std::to_string(manifest.at("byte_count").get<std::size_t>()) + " but spec implies " +
                std::to_string(expected_bytes) + " bytes");

  std::ifstream bin(dir / "weights.bin", std::ios::binary);
  if (!bin) throw Error("checkpoint: cannot read " + (dir / "weights.bin").string());
  std::string blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  if (blob.size() != expected_bytes)
    throw Error("checkpoint: weights.bin has " + std::to_string(blob.size()) + " bytes, expected " +
                std::to_string(expected_bytes));

  const auto* p = reinterpret_cast<const unsigned char*>(blob.data());
  for (auto& e : list)
    for (auto& v : e.values) {
      v = get_le(p);
      p += 8;
    }
  std::size_t bi = 0;
  for (auto& st : m.layers())
    if (st.bn) {
      const auto& bj = manifest.at("batchnorm").at(bi++);
      st.bn->momentum = bj.at("momentum").get<double>();
      st.bn->epsilon = bj.at("epsilon").get<double>();
    }
  if (manifest.at("frozen").get<bool>()) m.freeze();
  return m;
}

}  // namespace normlab
