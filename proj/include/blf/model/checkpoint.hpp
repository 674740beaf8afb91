#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "blf/core/autograd.hpp"
#include "blf/core/error.hpp"
#include "blf/core/io.hpp"
#include "blf/core/tensor.hpp"
#include "blf/model/encoder.hpp"

namespace blf {

inline constexpr int kCheckpointVersion = 1;

// Named tensors read from a checkpoint, before they are bound to a model.
template <typename T>
struct TensorBundle {
  nlohmann::json manifest;
  std::vector<std::string> order;
  std::map<std::string, Tensor<T>> tensors;

  const Tensor<T>& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw FormatError("checkpoint lacks tensor '" + name + "'");
    return it->second;
  }
};

// Writes `<dir>/manifest.json` and `<dir>/weights.bin`. The manifest
// records every tensor's name, shape, dtype and byte offset; `meta` is
// merged into the top level.
template <typename T>
void save_tensors(const std::filesystem::path& dir, std::span<const std::pair<std::string, const Tensor<T>*>> tensors,
                  nlohmann::ordered_json meta) {
  std::filesystem::create_directories(dir);
  std::ostringstream buf(std::ios::binary);
  nlohmann::ordered_json entries = nlohmann::ordered_json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    io::write_le_array<T>(buf, t->data());
    const std::uint64_t nbytes = t->size() * sizeof(T);
    entries.push_back({{"name", name}, {"shape", t->shape()}, {"dtype", dtype_name(dtype_of<T>())},
                       {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  }
  meta["version"] = kCheckpointVersion;
  meta["buffer"] = "weights.bin";
  meta["buffer_bytes"] = offset;
  meta["tensors"] = std::move(entries);
  io::write_file_atomic(dir / "weights.bin", buf.str());
  io::write_file_atomic(dir / "manifest.json", meta.dump(2) + "\n");
}

template <typename T>
void save_parameters(const std::filesystem::path& dir, std::span<const Parameter<T>> params, nlohmann::ordered_json meta) {
  std::vector<std::pair<std::string, const Tensor<T>*>> list;
  for (const auto& p : params) list.emplace_back(p.name(), &p.value());
  save_tensors<T>(dir, list, std::move(meta));
}

inline nlohmann::json read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(io::read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": invalid JSON (" + e.what() + ")");
  }
  if (!m.is_object() || !m.contains("version") || !m.contains("tensors")) {
    throw FormatError(path.string() + ": not a checkpoint manifest");
  }
  if (m["version"] != kCheckpointVersion) {
    throw FormatError(path.string() + ": checkpoint version " + m["version"].dump() + " is not supported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  return m;
}

// Reads every tensor of a checkpoint directory, converting dtype if
// needed. Nothing is returned unless the whole checkpoint is consistent.
template <typename T>
TensorBundle<T> load_tensors(const std::filesystem::path& dir) {
  TensorBundle<T> b;
  b.manifest = read_manifest(dir);
  const std::string buffer = io::read_file(dir / b.manifest.value("buffer", std::string("weights.bin")));
  try {
    for (const auto& e : b.manifest.at("tensors")) {
      const auto name = e.at("name").template get<std::string>();
      const auto shape = e.at("shape").template get<Shape>();
      const auto dtype = e.at("dtype").template get<std::string>();
      const auto offset = e.at("offset").template get<std::uint64_t>();
      const auto nbytes = e.at("nbytes").template get<std::uint64_t>();
      const std::size_t elem = dtype == "f32" ? 4 : dtype == "f64" ? 8 : 0;
      if (elem == 0) throw FormatError("tensor '" + name + "' has unknown dtype " + dtype);
      if (nbytes != shape_numel(shape) * elem || offset + nbytes > buffer.size()) {
        throw FormatError("tensor '" + name + "' does not fit the weight buffer");
      }
      std::istringstream is(buffer.substr(static_cast<std::size_t>(offset), static_cast<std::size_t>(nbytes)));
      Tensor<T> t(shape);
      if (elem == 4) {
        std::vector<float> raw(t.size());
        io::read_le_array<float>(is, raw, name);
        for (std::size_t i = 0; i < raw.size(); ++i) t[i] = static_cast<T>(raw[i]);
      } else {
        std::vector<double> raw(t.size());
        io::read_le_array<double>(is, raw, name);
        for (std::size_t i = 0; i < raw.size(); ++i) t[i] = static_cast<T>(raw[i]);
      }
      if (!b.tensors.emplace(name, std::move(t)).second) throw FormatError("duplicate tensor '" + name + "'");
      b.order.push_back(name);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError((dir / "manifest.json").string() + ": malformed tensor entry (" + e.what() + ")");
  }
  return b;
}

// Copies bundle tensors into parameters whose names are `prefix + name`.
template <typename T>
void assign_parameters(std::span<Parameter<T>> params, const TensorBundle<T>& bundle, const std::string& prefix = "") {
  // Check everything first so a failure leaves the parameters untouched.
  for (const auto& p : params) {
    const auto& t = bundle.at(prefix + p.name());
    if (t.shape() != p.value().shape()) {
      throw FormatError("tensor '" + prefix + p.name() + "' has shape " + shape_string(t.shape()) + ", expected " +
                        shape_string(p.value().shape()));
    }
  }
  for (auto& p : params) p.value_mut() = bundle.at(prefix + p.name());
}

// Encoder checkpoint: manifest with kind "encoder" and the config.
template <typename T>
void save_encoder(const std::filesystem::path& dir, const Encoder<T>& enc, nlohmann::ordered_json extra = {}) {
  nlohmann::ordered_json meta;
  meta["kind"] = "encoder";
  meta["config"] = nlohmann::json(enc.config());
  if (!extra.is_null()) {
    for (auto it = extra.begin(); it != extra.end(); ++it) meta[it.key()] = it.value();
  }
  const auto params = enc.parameters();
  save_parameters<T>(dir, params, std::move(meta));
}

template <typename T>
Encoder<T> load_encoder(const std::filesystem::path& dir) {
  auto bundle = load_tensors<T>(dir);
  EncoderConfig cfg;
  try {
    cfg = bundle.manifest.at("config").template get<EncoderConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError((dir / "manifest.json").string() + ": bad encoder config (" + e.what() + ")");
  }
  Rng scratch(0);
  Encoder<T> enc(cfg, scratch);
  auto params = enc.parameters();
  assign_parameters<T>(params, bundle);
  return enc;
}

}  // namespace blf
