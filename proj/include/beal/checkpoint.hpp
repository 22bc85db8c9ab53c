#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "beal/tensor.hpp"

namespace beal::ckpt {

static_assert(std::endian::native == std::endian::little,
              "checkpoint container assumes a little-endian host");

inline constexpr char kMagic[8] = {'B', 'E', 'A', 'L', 'C', 'K', 'P', '1'};

template <typename T>
const char* dtype_name();
template <>
inline const char* dtype_name<float>() {
  return "f32";
}
template <>
inline const char* dtype_name<double>() {
  return "f64";
}

template <typename T>
struct Checkpoint {
  nlohmann::json meta;
  std::map<std::string, Tensor<T>> tensors;
};

// Writes magic, a JSON header (caller metadata plus the tensor directory),
// then raw row-major tensor payloads, to a temp file renamed into place so a
// crash mid-write never leaves a truncated checkpoint at `path`.
template <typename T>
void save_checkpoint(
    const std::filesystem::path& path, nlohmann::json meta,
    const std::vector<std::pair<std::string, const Tensor<T>*>>& tensors) {
  meta["dtype"] = dtype_name<T>();
  nlohmann::json dir = nlohmann::json::array();
  for (const auto& [name, t] : tensors) {
    dir.push_back({{"name", name}, {"shape", t->shape()}});
  }
  meta["tensors"] = std::move(dir);
  const std::string header = meta.dump();

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out)
      throw RuntimeFailure("cannot open checkpoint file for writing: " +
                           tmp.string());
    out.write(kMagic, sizeof(kMagic));
    const std::uint64_t len = header.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const auto& [name, t] : tensors) {
      out.write(reinterpret_cast<const char*>(t->data()),
                static_cast<std::streamsize>(t->numel() * sizeof(T)));
    }
    if (!out)
      throw RuntimeFailure("write failed for checkpoint file: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw RuntimeFailure("cannot open checkpoint file: " + path.string());

  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw RuntimeFailure("not a checkpoint file (bad magic): " + path.string());

  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string header(len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(len));
  if (!in)
    throw RuntimeFailure("truncated checkpoint header: " + path.string());

  Checkpoint<T> ck;
  try {
    ck.meta = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw RuntimeFailure("corrupt checkpoint header in " + path.string() +
                         ": " + e.what());
  }
  const std::string dtype = ck.meta.value("dtype", "");
  if (dtype != dtype_name<T>())
    throw RuntimeFailure("checkpoint dtype is '" + dtype + "' but '" +
                         dtype_name<T>() + "' was requested: " + path.string());

  for (const auto& entry : ck.meta.at("tensors")) {
    const std::string name = entry.at("name");
    const std::vector<std::int64_t> shape = entry.at("shape");
    Tensor<T> t(shape);
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(T)));
    if (!in)
      throw RuntimeFailure("truncated tensor payload for '" + name +
                           "' in checkpoint: " + path.string());
    ck.tensors.emplace(name, std::move(t));
  }
  return ck;
}

// Copies checkpoint tensors into live destinations by name, enforcing the
// full inventory: every destination must be present with a matching shape.
template <typename T>
void restore_tensors(
    const Checkpoint<T>& ck,
    const std::vector<std::pair<std::string, Tensor<T>*>>& dests) {
  for (const auto& [name, dst] : dests) {
    auto it = ck.tensors.find(name);
    if (it == ck.tensors.end())
      throw RuntimeFailure("checkpoint is missing tensor '" + name + "'");
    if (it->second.shape() != dst->shape())
      throw RuntimeFailure("checkpoint tensor '" + name + "' has shape " +
                           it->second.shape_string() + " but the model expects " +
                           dst->shape_string());
    *dst = it->second;
  }
}

}  // namespace beal::ckpt
