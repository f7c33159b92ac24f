#include "pcpe/checkpoint.hpp"

#include <map>

#include "pcpe/io_util.hpp"

namespace pcpe {

namespace {

constexpr std::string_view kMagic = "PCPE";

struct Record {
  Shape shape;
  std::vector<double> values;
};

struct Contents {
  std::string config;
  std::vector<std::pair<std::string, Record>> records;
};

Contents read_contents(const std::filesystem::path& path, bool with_records) {
  const std::string raw = read_file(path);
  ByteReader<ConfigError> in(raw, "checkpoint " + path.string());
  if (in.bytes(4) != kMagic) throw ConfigError("checkpoint " + path.string() + ": bad magic");
  const auto version = in.u32();
  if (version != kCheckpointVersion) {
    throw ConfigError("checkpoint " + path.string() + ": unsupported version " +
                      std::to_string(version));
  }
  Contents c;
  c.config = std::string(in.bytes(in.u32()));
  while (with_records && !in.done()) {
    std::string name(in.bytes(in.u32()));
    Record r;
    const auto rank = in.u32();
    for (std::uint32_t i = 0; i < rank; ++i) r.shape.push_back(in.u64());
    r.values = in.f64s(shape_numel(r.shape));
    c.records.emplace_back(std::move(name), std::move(r));
  }
  return c;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model& model) {
  ByteWriter out;
  out.bytes(kMagic);
  out.u32(kCheckpointVersion);
  const std::string cfg = model.config().to_json();
  out.u32(static_cast<std::uint32_t>(cfg.size()));
  out.bytes(cfg);
  for (const auto& [name, t] : model.parameters()) {
    out.u32(static_cast<std::uint32_t>(name.size()));
    out.bytes(name);
    out.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) out.u64(e);
    out.f64s(t.data());
  }
  write_file_atomic(path, out.str());
}

ModelConfig read_checkpoint_config(const std::filesystem::path& path) {
  return ModelConfig::from_json(read_contents(path, false).config);
}

void load_parameters(const std::filesystem::path& path, Model& model) {
  Contents c = read_contents(path, true);
  std::map<std::string, const Record*> stored;
  for (const auto& [name, r] : c.records) stored.emplace(name, &r);

  for (const auto& [name, t] : model.parameters()) {
    auto it = stored.find(name);
    if (it == stored.end()) {
      throw ConfigError("checkpoint " + path.string() + ": parameter-name mismatch: model expects '" +
                        name + "', which the checkpoint lacks");
    }
    if (it->second->shape != t.shape()) {
      throw ConfigError("checkpoint " + path.string() + ": parameter '" + name + "' has shape " +
                        shape_str(it->second->shape) + ", model expects " + shape_str(t.shape()));
    }
  }
  if (stored.size() != model.parameters().size()) {
    for (const auto& [name, r] : c.records) {
      bool known = false;
      for (const auto& p : model.parameters()) known = known || p.first == name;
      if (!known) {
        throw ConfigError("checkpoint " + path.string() + ": parameter-name mismatch: checkpoint has '" +
                          name + "', which the model lacks");
      }
    }
  }
  for (const auto& [name, t] : model.parameters()) {
    Tensor handle = t;
    const auto& v = stored.at(name)->values;
    std::copy(v.begin(), v.end(), handle.mutable_data().begin());
  }
}

Model load_checkpoint(const std::filesystem::path& path) {
  Model model(read_checkpoint_config(path), 0);
  load_parameters(path, model);
  return model;
}

}  // namespace pcpe
