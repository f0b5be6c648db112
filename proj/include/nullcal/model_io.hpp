#pragma once

// On-disk formats.
//
// Model directory:
//   config.json    ModelConfig fields, integers as JSON numbers
//   vocab.txt      one token per line, line index = id
//   manifest.json  [{name, role, shape, offset_bytes, num_elements, crc32}, ...]
//   tensors.bin    little-endian float32 blobs at the declared offsets,
//                  each tensor starting on a 64-byte boundary, zero padded
//
// A snapshot directory holds manifest.json + tensors.bin for a subset of
// parameters plus snapshot.json with its metadata.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "nullcal/masked_lm.hpp"
#include "nullcal/tokenizer.hpp"

namespace nullcal {

inline constexpr std::size_t kTensorAlignment = 64;

struct NamedTensor {
  std::string name;
  Role role;
  Tensor value;
};

std::uint32_t crc32_of(std::span<const float> values);

void write_tensor_store(const std::filesystem::path& dir, const std::vector<NamedTensor>& tensors);
// Verifies lengths, alignment and checksums; errors name the offending entry.
std::vector<NamedTensor> read_tensor_store(const std::filesystem::path& dir);

struct LoadedModel {
  MaskedLM model;
  Tokenizer tokenizer;
};

void save_model(const std::filesystem::path& dir, const MaskedLM& model, const Vocab& vocab);
LoadedModel load_model(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Parameter snapshots

struct SnapshotMeta {
  std::int64_t step = 0;
  double loss = 0.0;
  std::uint64_t seed = 0;
};

// Copies of every parameter whose role is in `roles`.
struct ParameterSnapshot {
  RoleSet roles;
  std::map<std::string, NamedTensor> tensors;
  SnapshotMeta meta;

  std::size_t num_elements() const;
  std::size_t byte_size() const { return num_elements() * sizeof(float); }
};

ParameterSnapshot take_snapshot(const MaskedLM& model, RoleSet roles, SnapshotMeta meta = {});
inline ParameterSnapshot take_bias_snapshot(const MaskedLM& model, SnapshotMeta meta = {}) {
  return take_snapshot(model, RoleSet{Role::Bias}, meta);
}
// Overwrites exactly the snapshotted parameters. The snapshot must cover the
// model's parameters of the snapshot roles one-to-one with equal shapes;
// throws LoadError otherwise (nothing is modified in that case).
void restore_snapshot(MaskedLM& model, const ParameterSnapshot& snapshot);

void save_snapshot(const std::filesystem::path& dir, const ParameterSnapshot& snapshot);
ParameterSnapshot load_snapshot(const std::filesystem::path& dir);

}  // namespace nullcal
