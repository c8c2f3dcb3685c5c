#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dcollab/errors.hpp"
#include "dcollab/hash.hpp"
#include "dcollab/net.hpp"

namespace dcollab {

// Flat parameter archive: a JSON manifest (names, shapes, kinds, global step,
// config hash, rng state) followed by the raw row-major float32
// little-endian payloads, in manifest order.
//
//   bytes 0..3  magic "DCKP"
//   u32         version (1)
//   u64         manifest length in bytes
//   ...         manifest JSON
//   ...         concatenated tensor payloads

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::string kind;  // "param" | "buffer" | "opt"
  std::vector<float> values;
};

struct Checkpoint {
  std::int64_t global_step = 0;
  int epoch = 0;
  std::string config_hash;
  std::string rng_state;
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }

  void add(const std::string& name, const Shape& shape,
           const std::string& kind, const std::vector<float>& values) {
    tensors.push_back({name, shape, kind, values});
  }
};

inline void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  nlohmann::json manifest;
  manifest["version"] = 1;
  manifest["global_step"] = ckpt.global_step;
  manifest["epoch"] = ckpt.epoch;
  manifest["config_hash"] = ckpt.config_hash;
  manifest["rng_state"] = ckpt.rng_state;
  nlohmann::json tensors = nlohmann::json::array();
  std::int64_t offset = 0;
  for (const auto& t : ckpt.tensors) {
    nlohmann::json e;
    e["name"] = t.name;
    e["shape"] = t.shape;
    e["kind"] = t.kind;
    e["offset"] = offset;
    e["count"] = t.values.size();
    tensors.push_back(e);
    offset += static_cast<std::int64_t>(t.values.size() * sizeof(float));
  }
  manifest["tensors"] = tensors;
  const std::string mjson = manifest.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw FormatError("checkpoint: cannot open '" + path + "' for writing");
  out.write("DCKP", 4);
  const std::uint32_t version = 1;
  out.write(reinterpret_cast<const char*>(&version), 4);
  const std::uint64_t mlen = mjson.size();
  out.write(reinterpret_cast<const char*>(&mlen), 8);
  out.write(mjson.data(), static_cast<std::streamsize>(mjson.size()));
  for (const auto& t : ckpt.tensors)
    out.write(reinterpret_cast<const char*>(t.values.data()),
              static_cast<std::streamsize>(t.values.size() * sizeof(float)));
  if (!out) throw FormatError("checkpoint: short write to '" + path + "'");
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("checkpoint: cannot open '" + path + "'");
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, "DCKP", 4) != 0)
    throw FormatError("checkpoint: '" + path + "' has no DCKP magic");
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), 4);
  if (version != 1)
    throw FormatError("checkpoint: unsupported version " +
                      std::to_string(version));
  std::uint64_t mlen = 0;
  in.read(reinterpret_cast<char*>(&mlen), 8);
  std::string mjson(mlen, '\0');
  in.read(mjson.data(), static_cast<std::streamsize>(mlen));
  if (static_cast<std::uint64_t>(in.gcount()) != mlen)
    throw FormatError("checkpoint: '" + path + "' truncated in manifest");

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mjson);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint: bad manifest JSON: " + std::string(e.what()));
  }

  Checkpoint ckpt;
  ckpt.global_step = manifest.value("global_step", std::int64_t{0});
  ckpt.epoch = manifest.value("epoch", 0);
  ckpt.config_hash = manifest.value("config_hash", std::string{});
  ckpt.rng_state = manifest.value("rng_state", std::string{});
  for (const auto& e : manifest.at("tensors")) {
    CheckpointTensor t;
    t.name = e.at("name").get<std::string>();
    t.shape = e.at("shape").get<Shape>();
    t.kind = e.at("kind").get<std::string>();
    t.values.resize(e.at("count").get<std::size_t>());
    in.read(reinterpret_cast<char*>(t.values.data()),
            static_cast<std::streamsize>(t.values.size() * sizeof(float)));
    if (static_cast<std::size_t>(in.gcount()) !=
        t.values.size() * sizeof(float))
      throw FormatError("checkpoint: '" + path + "' truncated in tensor '" +
                        t.name + "'");
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

inline std::string file_content_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("hash: cannot open '" + path + "'");
  Fnv1a64 h;
  char buf[1 << 16];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0)
    h.update(buf, static_cast<std::size_t>(in.gcount()));
  return to_hex(h.digest());
}

// Serializes a network's parameters and buffers under their dotted names.
template <typename T>
void snapshot_net(MultiTaskNet<T>& net, Checkpoint& ckpt) {
  net.visit([&](const std::string& name, Tensor<T>& t, ParamKind kind) {
    std::vector<float> values(t.values().begin(), t.values().end());
    ckpt.add(name, t.shape(), kind == ParamKind::kParam ? "param" : "buffer",
             values);
  });
}

// Restores parameters and buffers by name; every network tensor must be
// present with a matching shape.
template <typename T>
void restore_net(MultiTaskNet<T>& net, const Checkpoint& ckpt) {
  std::vector<std::string> missing;
  net.visit([&](const std::string& name, Tensor<T>& t, ParamKind) {
    const CheckpointTensor* src = ckpt.find(name);
    if (!src) {
      missing.push_back(name);
      return;
    }
    if (src->shape != t.shape())
      throw FormatError("checkpoint: tensor '" + name + "' has shape " +
                        shape_to_string(src->shape) + ", network expects " +
                        shape_to_string(t.shape()));
    for (std::size_t i = 0; i < src->values.size(); ++i)
      t.values()[i] = static_cast<T>(src->values[i]);
  });
  if (!missing.empty()) {
    std::string msg = "checkpoint: missing tensors:";
    for (const auto& m : missing) msg += " " + m;
    throw FormatError(msg);
  }
}

}  // namespace dcollab
