#pragma once

// Tensor files: a single-line UTF-8 JSON header, a newline-terminated magic line, then
// raw little-endian float32 tensor data in manifest order. Used for model checkpoints
// and the optimizer-state sidecar.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "skiprec/model.hpp"

namespace skiprec {

inline constexpr std::string_view kTensorMagic = "SKIPREC-TENSORS-V1";

struct TensorFile {
  nlohmann::json header;  // user metadata plus the "tensors" manifest
  std::vector<std::pair<std::string, Mat<float>>> tensors;

  const Mat<float>& at(const std::string& name) const {
    for (const auto& [n, m] : tensors) {
      if (n == name) return m;
    }
    throw ParseError("tensor '" + name + "' missing from file", 0);
  }
};

namespace detail {

inline std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  }
  return v;
}

}  // namespace detail

inline void write_tensor_file(const std::string& path, nlohmann::json meta,
                              const std::vector<std::pair<std::string, const Mat<float>*>>& tensors) {
  nlohmann::json manifest = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, m] : tensors) {
    const auto count = static_cast<std::uint64_t>(m->size());
    manifest.push_back({{"name", name}, {"shape", {m->rows(), m->cols()}}, {"offset", offset}, {"count", count}});
    offset += count * 4;
  }
  meta["tensors"] = manifest;
  meta["data_bytes"] = offset;

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out << meta.dump() << '\n' << kTensorMagic << '\n';
  for (const auto& [name, m] : tensors) {
    for (Eigen::Index i = 0; i < m->size(); ++i) {
      const std::uint32_t bits = detail::to_little(std::bit_cast<std::uint32_t>(m->data()[i]));
      out.write(reinterpret_cast<const char*>(&bits), 4);
    }
  }
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

inline TensorFile read_tensor_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  std::string header_line, magic;
  if (!std::getline(in, header_line) || !std::getline(in, magic) || magic != kTensorMagic) {
    throw ParseError("'" + path + "' is not a tensor file (bad header or magic)", 0);
  }
  TensorFile f;
  try {
    f.header = nlohmann::json::parse(header_line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad tensor file header: ") + e.what(), 1);
  }
  const auto data_start = in.tellg();
  for (const auto& t : f.header.at("tensors")) {
    const auto rows = t.at("shape").at(0).get<Eigen::Index>();
    const auto cols = t.at("shape").at(1).get<Eigen::Index>();
    const auto offset = t.at("offset").get<std::uint64_t>();
    Mat<float> m(rows, cols);
    in.seekg(data_start + static_cast<std::streamoff>(offset));
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      std::uint32_t bits = 0;
      if (!in.read(reinterpret_cast<char*>(&bits), 4)) throw ParseError("truncated tensor data in '" + path + "'", 0);
      m.data()[i] = std::bit_cast<float>(detail::to_little(bits));
    }
    f.tensors.emplace_back(t.at("name").get<std::string>(), std::move(m));
  }
  return f;
}

/// Model checkpoint: `meta` should carry the model config, vocab size, seed and mode.
inline void save_checkpoint(const std::string& path, const ModelParams<float>& p, nlohmann::json meta) {
  std::vector<std::pair<std::string, const Mat<float>*>> ts;
  p.visit([&](const std::string& n, const Mat<float>& m) { ts.emplace_back(n, &m); });
  meta["format"] = "skiprec-checkpoint";
  write_tensor_file(path, std::move(meta), ts);
}

struct LoadedCheckpoint {
  nlohmann::json meta;
  ModelConfig config;
  ModelParams<float> params;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  auto f = read_tensor_file(path);
  if (f.header.value("format", "") != "skiprec-checkpoint") throw ParseError("'" + path + "' is not a checkpoint", 0);
  LoadedCheckpoint ck;
  ck.config = f.header.at("model").get<ModelConfig>();
  const auto table = f.header.at("table_size").get<std::size_t>();
  ck.params = make_params<float>(ck.config, table);
  ck.params.visit([&](const std::string& n, Mat<float>& m) {
    const auto& src = f.at(n);
    if (src.rows() != m.rows() || src.cols() != m.cols()) throw ParseError("shape mismatch for tensor '" + n + "'", 0);
    m = src;
  });
  f.header.erase("tensors");
  ck.meta = std::move(f.header);
  return ck;
}

}  // namespace skiprec
