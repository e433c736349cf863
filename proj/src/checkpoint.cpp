#include "pcmoe/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "pcmoe/errors.hpp"

namespace pcmoe {

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, 4);
}

void put_f64(std::ostream& os, double d) {
  const auto v = std::bit_cast<std::uint64_t>(d);
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, 8);
}

void read_exact(std::istream& is, char* dst, std::size_t n, const std::filesystem::path& path) {
  is.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) {
    throw DataError("truncated checkpoint: " + path.string());
  }
}

std::uint32_t get_u32(std::istream& is, const std::filesystem::path& path) {
  unsigned char b[4];
  read_exact(is, reinterpret_cast<char*>(b), 4, path);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

double get_f64(std::istream& is, const std::filesystem::path& path) {
  unsigned char b[8];
  read_exact(is, reinterpret_cast<char*>(b), 8, path);
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return std::bit_cast<double>(v);
}

}  // namespace

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

Checkpoint snapshot(std::span<Parameter* const> params, std::string metadata) {
  Checkpoint ckpt;
  ckpt.metadata = std::move(metadata);
  for (const Parameter* p : params) {
    const auto d = p->value.data();
    ckpt.entries.push_back({p->name, p->value.shape(), std::vector<double>(d.begin(), d.end())});
  }
  return ckpt;
}

void restore(const Checkpoint& ckpt, std::span<Parameter* const> params) {
  for (Parameter* p : params) {
    const CheckpointEntry* e = ckpt.find(p->name);
    if (e == nullptr) throw ConfigError("checkpoint has no parameter '" + p->name + "'");
    if (e->shape != p->value.shape()) {
      throw ConfigError("checkpoint shape " + to_string(e->shape) + " for '" + p->name +
                        "' does not match model shape " + to_string(p->value.shape()));
    }
    auto w = p->value.mutable_data();
    std::copy(e->values.begin(), e->values.end(), w.begin());
    std::fill(p->velocity.begin(), p->velocity.end(), 0.0);
  }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open checkpoint for writing: " + path.string());
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  put_u32(os, kCheckpointVersion);
  put_u32(os, static_cast<std::uint32_t>(ckpt.metadata.size()));
  os.write(ckpt.metadata.data(), static_cast<std::streamsize>(ckpt.metadata.size()));
  put_u32(os, static_cast<std::uint32_t>(ckpt.entries.size()));
  for (const auto& e : ckpt.entries) {
    put_u32(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put_u32(os, static_cast<std::uint32_t>(e.shape.n));
    put_u32(os, static_cast<std::uint32_t>(e.shape.c));
    put_u32(os, static_cast<std::uint32_t>(e.shape.h));
    put_u32(os, static_cast<std::uint32_t>(e.shape.w));
    for (double v : e.values) put_f64(os, v);
  }
  if (!os) throw DataError("failed writing checkpoint: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path.string());
  char magic[8];
  read_exact(is, magic, 8, path);
  if (std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw DataError("not a checkpoint file (bad magic): " + path.string());
  }
  const std::uint32_t version = get_u32(is, path);
  if (version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.metadata.resize(get_u32(is, path));
  read_exact(is, ckpt.metadata.data(), ckpt.metadata.size(), path);
  const std::uint32_t count = get_u32(is, path);
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    e.name.resize(get_u32(is, path));
    read_exact(is, e.name.data(), e.name.size(), path);
    e.shape.n = static_cast<int>(get_u32(is, path));
    e.shape.c = static_cast<int>(get_u32(is, path));
    e.shape.h = static_cast<int>(get_u32(is, path));
    e.shape.w = static_cast<int>(get_u32(is, path));
    e.values.resize(e.shape.numel());
    for (double& v : e.values) v = get_f64(is, path);
    ckpt.entries.push_back(std::move(e));
  }
  return ckpt;
}

}  // namespace pcmoe
