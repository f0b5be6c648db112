#include "nullcal/model_io.hpp"

#include <zlib.h>

#include <bit>
#include <fstream>
#include <iterator>
#include <set>

#include "json.hpp"

namespace nullcal {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void append_le(std::vector<unsigned char>& out, float v) {
  const auto bits = std::bit_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((bits >> (8 * i)) & 0xFFu));
}

float read_le(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

}  // namespace

std::uint32_t crc32_of(std::span<const float> values) {
  std::vector<unsigned char> bytes;
  bytes.reserve(values.size() * 4);
  for (float v : values) append_le(bytes, v);
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

void write_tensor_store(const fs::path& dir, const std::vector<NamedTensor>& tensors) {
  fs::create_directories(dir);
  std::vector<unsigned char> blob;
  json manifest = json::array();
  for (const auto& t : tensors) {
    while (blob.size() % kTensorAlignment != 0) blob.push_back(0);
    const std::size_t offset = blob.size();
    for (float v : t.value.data()) append_le(blob, v);
    manifest.push_back({{"name", t.name},
                        {"role", std::string(role_name(t.role))},
                        {"shape", t.value.shape()},
                        {"offset_bytes", offset},
                        {"num_elements", t.value.numel()},
                        {"crc32", crc32_of(t.value.data())}});
  }
  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
  std::ofstream out(dir / "tensors.bin", std::ios::binary);
  if (!out) throw Error("cannot write " + (dir / "tensors.bin").string());
  out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
}

std::vector<NamedTensor> read_tensor_store(const fs::path& dir) {
  const json manifest = read_json_file(dir / "manifest.json");
  if (!manifest.is_array()) throw LoadError("manifest.json must hold an array");
  std::ifstream in(dir / "tensors.bin", std::ios::binary);
  if (!in) throw LoadError("cannot open " + (dir / "tensors.bin").string());
  const std::vector<unsigned char> blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  std::vector<NamedTensor> out;
  std::set<std::string> names;
  for (const auto& entry : manifest) {
    std::string name = "<unnamed>";
    try {
      name = entry.at("name").get<std::string>();
      const auto role = parse_role(entry.at("role").get<std::string>());
      if (!role) throw LoadError("tensor '" + name + "': unknown role " + entry.at("role").dump());
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset_bytes").get<std::size_t>();
      const auto count = entry.at("num_elements").get<std::size_t>();
      const auto crc = entry.at("crc32").get<std::uint32_t>();
      if (!names.insert(name).second) throw LoadError("tensor '" + name + "' listed twice");
      std::size_t expected = 0;
      try {
        expected = shape_numel(shape);
      } catch (const DimensionError&) {
        throw LoadError("tensor '" + name + "': invalid shape " + shape_string(shape));
      }
      if (expected != count) {
        throw LoadError("tensor '" + name + "': num_elements " + std::to_string(count) + " does not match shape " +
                        shape_string(shape));
      }
      if (offset % kTensorAlignment != 0) throw LoadError("tensor '" + name + "': offset not 64-byte aligned");
      if (offset + count * 4 > blob.size()) {
        throw LoadError("tensor '" + name + "': data extends past end of tensors.bin");
      }
      std::vector<float> values(count);
      for (std::size_t i = 0; i < count; ++i) values[i] = read_le(&blob[offset + 4 * i]);
      if (crc32_of(values) != crc) throw LoadError("tensor '" + name + "': checksum mismatch");
      out.push_back({name, *role, Tensor(shape, std::move(values))});
    } catch (const json::exception& e) {
      throw LoadError("manifest entry '" + name + "': " + e.what());
    }
  }
  return out;
}

void save_model(const fs::path& dir, const MaskedLM& model, const Vocab& vocab) {
  if (vocab.size() != static_cast<std::size_t>(model.config().vocab_size)) {
    throw ContractError("vocab size does not match model config");
  }
  fs::create_directories(dir);
  write_text_file(dir / "config.json", model.config().to_json().dump(2) + "\n");
  vocab.save(dir / "vocab.txt");
  std::vector<NamedTensor> tensors;
  for (const auto& p : model.parameters()) tensors.push_back({p.name(), p.role(), p.value()});
  write_tensor_store(dir, tensors);
}

LoadedModel load_model(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw LoadError("model directory " + dir.string() + " does not exist");
  ModelConfig config;
  try {
    config = ModelConfig::from_json(read_json_file(dir / "config.json"));
  } catch (const ConfigError& e) {
    throw LoadError(std::string("config.json: ") + e.what());
  }
  Vocab vocab = Vocab::load(dir / "vocab.txt");
  if (vocab.size() != static_cast<std::size_t>(config.vocab_size)) {
    throw LoadError("vocab.txt has " + std::to_string(vocab.size()) + " tokens but config declares " +
                    std::to_string(config.vocab_size));
  }
  auto stored = read_tensor_store(dir);
  MaskedLM model(config);
  std::map<std::string, NamedTensor*> by_name;
  for (auto& t : stored) by_name[t.name] = &t;
  for (auto& p : model.parameters()) {
    auto it = by_name.find(p.name());
    if (it == by_name.end()) throw LoadError("missing tensor '" + p.name() + "'");
    if (it->second->value.shape() != p.value().shape()) {
      throw LoadError("tensor '" + p.name() + "': shape " + shape_string(it->second->value.shape()) +
                      " but model expects " + shape_string(p.value().shape()));
    }
    if (it->second->role != p.role()) throw LoadError("tensor '" + p.name() + "': role mismatch");
    p.value() = std::move(it->second->value);
    by_name.erase(it);
  }
  if (!by_name.empty()) throw LoadError("unexpected tensor '" + by_name.begin()->first + "'");
  Tokenizer tokenizer(std::move(vocab), config.specials(), config.do_lower_case);
  return LoadedModel{std::move(model), std::move(tokenizer)};
}

// ---------------------------------------------------------------------------

std::size_t ParameterSnapshot::num_elements() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors) n += t.value.numel();
  return n;
}

ParameterSnapshot take_snapshot(const MaskedLM& model, RoleSet roles, SnapshotMeta meta) {
  ParameterSnapshot snap;
  snap.roles = roles;
  snap.meta = meta;
  for (const auto& p : model.parameters()) {
    if (roles.contains(p.role())) snap.tensors.emplace(p.name(), NamedTensor{p.name(), p.role(), p.value()});
  }
  return snap;
}

void restore_snapshot(MaskedLM& model, const ParameterSnapshot& snapshot) {
  std::size_t matched = 0;
  for (const auto& p : model.parameters()) {
    if (!snapshot.roles.contains(p.role())) continue;
    auto it = snapshot.tensors.find(p.name());
    if (it == snapshot.tensors.end()) throw LoadError("snapshot lacks parameter '" + p.name() + "'");
    if (it->second.value.shape() != p.value().shape()) {
      throw LoadError("snapshot tensor '" + p.name() + "' has shape " + shape_string(it->second.value.shape()) +
                      ", model expects " + shape_string(p.value().shape()));
    }
    ++matched;
  }
  if (matched != snapshot.tensors.size()) {
    throw LoadError("snapshot holds parameters the model does not have");
  }
  for (auto& p : model.parameters()) {
    if (snapshot.roles.contains(p.role())) p.value() = snapshot.tensors.at(p.name()).value;
  }
}

void save_snapshot(const fs::path& dir, const ParameterSnapshot& snapshot) {
  std::vector<NamedTensor> tensors;
  for (const auto& [name, t] : snapshot.tensors) tensors.push_back(t);
  write_tensor_store(dir, tensors);
  json roles = json::array();
  for (Role r : {Role::Weight, Role::Bias, Role::Embedding})
    if (snapshot.roles.contains(r)) roles.push_back(std::string(role_name(r)));
  const json meta{{"roles", roles},
                  {"step", snapshot.meta.step},
                  {"loss", snapshot.meta.loss},
                  {"seed", snapshot.meta.seed}};
  write_text_file(dir / "snapshot.json", meta.dump(2) + "\n");
}

ParameterSnapshot load_snapshot(const fs::path& dir) {
  const json meta = read_json_file(dir / "snapshot.json");
  ParameterSnapshot snap;
  try {
    for (const auto& r : meta.at("roles")) {
      const auto role = parse_role(r.get<std::string>());
      if (!role) throw LoadError("snapshot.json: unknown role " + r.dump());
      snap.roles.insert(*role);
    }
    snap.meta.step = meta.at("step").get<std::int64_t>();
    snap.meta.loss = meta.at("loss").get<double>();
    snap.meta.seed = meta.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw LoadError(std::string("snapshot.json: ") + e.what());
  }
  for (auto& t : read_tensor_store(dir)) {
    if (!snap.roles.contains(t.role)) throw LoadError("snapshot tensor '" + t.name + "' has a role outside the snapshot");
    std::string name = t.name;
    snap.tensors.emplace(std::move(name), std::move(t));
  }
  return snap;
}

}  // namespace nullcal
