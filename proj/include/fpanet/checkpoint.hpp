#pragma once

// Checkpoint file: a flat map of hierarchical names to shape-tagged arrays.
//
//   "FPANETCK" | u32 format version | u64 header bytes | JSON header | raw blob
//
// The header lists {name, shape, offset, count} per tensor and free-form metadata;
// the blob holds little-endian float32 or float64 values.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "fpanet/nn.hpp"
#include "fpanet/tensor.hpp"

namespace fpanet {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'F', 'P', 'A', 'N', 'E', 'T', 'C', 'K'};

/// Prefix of optimizer moment tensors stored alongside the parameters.
inline const std::string kOptimPrefix = "optim.";

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::string dtype = "float32";  // storage precision: float32 | float64
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, Tensor<double>> tensors;
};

namespace detail {

template <typename S>
void write_blob(std::ostream& os, const Tensor<double>& t) {
  std::vector<S> buf(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) buf[i] = static_cast<S>(t[i]);
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(S)));
}

}  // namespace detail

/// Writes atomically (temporary file, then rename).
inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  if (ck.dtype != "float32" && ck.dtype != "float64") throw ConfigError("checkpoint dtype must be float32 or float64");
  const std::size_t elem = ck.dtype == "float32" ? 4 : 8;
  nlohmann::json header;
  header["format_version"] = ck.version;
  header["dtype"] = ck.dtype;
  header["meta"] = ck.meta;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ck.tensors) {
    const Shape s = t.shape();
    header["tensors"].push_back({{"name", name}, {"shape", {s.n, s.c, s.h, s.w}}, {"offset", offset}, {"count", t.size()}});
    offset += t.size() * elem;
  }
  const std::string hs = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write checkpoint " + tmp.string());
    os.write(kCheckpointMagic, 8);
    const std::uint32_t v = ck.version;
    const std::uint64_t hl = hs.size();
    os.write(reinterpret_cast<const char*>(&v), 4);
    os.write(reinterpret_cast<const char*>(&hl), 8);
    os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& [name, t] : ck.tensors) {
      if (elem == 4) detail::write_blob<float>(os, t);
      else detail::write_blob<double>(os, t);
    }
    if (!os) throw Error("short write on checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint " + path.string());
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t hl = 0;
  is.read(magic, 8);
  is.read(reinterpret_cast<char*>(&version), 4);
  is.read(reinterpret_cast<char*>(&hl), 8);
  if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw Error("not a checkpoint: " + path.string());
  if (version != kCheckpointVersion) {
    throw Error("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                std::to_string(kCheckpointVersion) + ")");
  }
  std::string hs(hl, '\0');
  is.read(hs.data(), static_cast<std::streamsize>(hl));
  const auto header = nlohmann::json::parse(hs, nullptr, false);
  if (!is || header.is_discarded()) throw Error("corrupt checkpoint header: " + path.string());
  if (!header.contains("format_version") || header["format_version"].get<std::uint32_t>() != version) {
    throw Error("checkpoint header lacks a matching format_version");
  }
  Checkpoint ck;
  ck.version = version;
  ck.dtype = header.at("dtype").get<std::string>();
  if (ck.dtype != "float32" && ck.dtype != "float64") throw Error("unknown checkpoint dtype " + ck.dtype);
  ck.meta = header.value("meta", nlohmann::json::object());
  const std::size_t elem = ck.dtype == "float32" ? 4 : 8;
  const auto blob_start = is.tellg();
  for (const auto& e : header.at("tensors")) {
    const auto shp = e.at("shape").get<std::vector<int>>();
    if (shp.size() != 4) throw Error("checkpoint tensor " + e.at("name").get<std::string>() + " is not rank 4");
    Tensor<double> t(Shape{shp[0], shp[1], shp[2], shp[3]});
    const auto count = e.at("count").get<std::size_t>();
    if (count != t.size()) throw Error("checkpoint tensor " + e.at("name").get<std::string>() + ": count/shape mismatch");
    is.seekg(blob_start + static_cast<std::streamoff>(e.at("offset").get<std::uint64_t>()));
    if (elem == 4) {
      std::vector<float> buf(count);
      is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(count * 4));
      std::copy(buf.begin(), buf.end(), t.vec().begin());
    } else {
      is.read(reinterpret_cast<char*>(t.vec().data()), static_cast<std::streamsize>(count * 8));
    }
    if (!is) throw Error("truncated checkpoint: " + path.string());
    ck.tensors.emplace(e.at("name").get<std::string>(), std::move(t));
  }
  return ck;
}

template <typename T>
void store_params(Checkpoint& ck, const ParamStore<T>& ps) {
  for (const auto& p : ps.params()) ck.tensors[p.name] = p.var.value().template cast<double>();
}

/// Copies checkpoint tensors into the store. Mismatches raise ConfigError listing
/// missing, extra and wrongly shaped names; optimizer tensors are ignored here.
template <typename T>
void load_params(ParamStore<T>& ps, const Checkpoint& ck, bool strict = true) {
  std::vector<std::string> missing, extra, shape;
  for (auto& p : ps.params()) {
    auto it = ck.tensors.find(p.name);
    if (it == ck.tensors.end()) {
      missing.push_back(p.name);
      continue;
    }
    if (it->second.shape() != p.var.shape()) {
      shape.push_back(p.name + " " + it->second.shape().str() + " vs " + p.var.shape().str());
      continue;
    }
    p.var.mutable_value() = it->second.template cast<T>();
  }
  for (const auto& [name, t] : ck.tensors)
    if (name.rfind(kOptimPrefix, 0) != 0 && !ps.contains(name)) extra.push_back(name);
  if (!shape.empty() || (strict && (!missing.empty() || !extra.empty()))) {
    auto list = [](const char* what, const std::vector<std::string>& v) {
      std::string s;
      if (v.empty()) return s;
      s += std::string("\n  ") + what + " (" + std::to_string(v.size()) + "):";
      for (const auto& n : v) s += " " + n;
      return s;
    };
    throw ConfigError("checkpoint does not match the model" + list("missing", missing) + list("extra", extra) +
                      list("shape mismatch", shape));
  }
}

}  // namespace fpanet
