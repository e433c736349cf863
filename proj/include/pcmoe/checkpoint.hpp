#pragma once

// Versioned parameter container.
//
// Layout (all integers little-endian uint32, values little-endian IEEE-754
// binary64):
//
//   "PCMOECKP"                       8-byte magic
//   version                          currently 1
//   metadata length, metadata bytes  free-form UTF-8 (JSON model config)
//   entry count
//   per entry: name length, name bytes, n, c, h, w, n*c*h*w doubles

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pcmoe/tensor.hpp"

namespace pcmoe {

inline constexpr char kCheckpointMagic[8] = {'P', 'C', 'M', 'O', 'E', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  std::string metadata;
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const;
};

Checkpoint snapshot(std::span<Parameter* const> params, std::string metadata);
/// Copies values into params by name; throws ConfigError on a missing name
/// or shape mismatch.
void restore(const Checkpoint& ckpt, std::span<Parameter* const> params);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace pcmoe
