// Versioned binary checkpoint: magic, version, JSON header, then named
// float64 tensors in header order (row-major, little-endian).
#pragma once

#include "powerpm/encoder.hpp"
#include "powerpm/errors.hpp"

#include <json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

namespace powerpm {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'P', 'W', 'P', 'M', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::json to_json(const ModelConfig& m) {
  return {{"scale", m.scale},         {"d_model", m.d_model},       {"n_layers", m.n_layers},
          {"d_ffn", m.d_ffn},         {"n_heads", m.n_heads},       {"rgcn_layers", m.rgcn_layers},
          {"rgcn_activation", m.rgcn_activation}, {"rgcn_residual", m.rgcn_residual}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig m;
  m.scale = j.at("scale").get<std::string>();
  m.d_model = j.at("d_model").get<int>();
  m.n_layers = j.at("n_layers").get<int>();
  m.d_ffn = j.at("d_ffn").get<int>();
  m.n_heads = j.at("n_heads").get<int>();
  m.rgcn_layers = j.at("rgcn_layers").get<int>();
  m.rgcn_activation = j.at("rgcn_activation").get<std::string>();
  m.rgcn_residual = j.at("rgcn_residual").get<bool>();
  return m;
}

inline nlohmann::json to_json(const ExogenousSchema& s) {
  nlohmann::json vars = nlohmann::json::array();
  for (const auto& v : s.variables) vars.push_back({{"name", v.name}, {"cardinality", v.cardinality}});
  return vars;
}

inline ExogenousSchema exogenous_schema_from_json(const nlohmann::json& j) {
  ExogenousSchema s;
  for (const auto& v : j) s.variables.push_back({v.at("name").get<std::string>(), v.at("cardinality").get<int>()});
  return s;
}

namespace detail {

inline void write_tensor(std::ostream& out, const Matrix& m) {
  std::vector<double> buf(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) buf[static_cast<std::size_t>(i * m.cols() + j)] = m(i, j);
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(double)));
}

inline Matrix read_tensor(std::istream& in, Eigen::Index rows, Eigen::Index cols) {
  std::vector<double> buf(static_cast<std::size_t>(rows * cols));
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(double)));
  if (!in) throw Error("checkpoint truncated");
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = buf[static_cast<std::size_t>(i * cols + j)];
  }
  return m;
}

}  // namespace detail

/// Extra named tensors (task heads) may ride along with the encoder.
using NamedTensors = std::vector<std::pair<std::string, Matrix>>;

inline void save_checkpoint(std::ostream& out, const EncoderState& state, const NamedTensors& extra = {}) {
  nlohmann::json header;
  header["format"] = "powerpm-checkpoint";
  header["model"] = to_json(state.model);
  header["patch"] = {{"patch_len", state.patching.patch_len}, {"stride", state.patching.stride}};
  header["window"] = state.window;
  header["exogenous"] = to_json(state.exogenous);
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(state.exogenous.hash()));
  header["exogenous_hash"] = hex;
  header["seed"] = state.seed;
  nlohmann::json tensors = nlohmann::json::array();
  const auto params = state.named_parameters();
  for (const auto& [name, v] : params) tensors.push_back({{"name", name}, {"rows", v.rows()}, {"cols", v.cols()}});
  for (const auto& [name, m] : extra) tensors.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  header["tensors"] = tensors;
  const std::string text = header.dump();

  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  const std::uint32_t version = kCheckpointVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, v] : params) detail::write_tensor(out, v.value());
  for (const auto& [name, m] : extra) detail::write_tensor(out, m);
}

inline void save_checkpoint(const std::filesystem::path& path, const EncoderState& state,
                            const NamedTensors& extra = {}) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  save_checkpoint(out, state, extra);
}

struct LoadedCheckpoint {
  EncoderState state;
  NamedTensors extra;
};

inline LoadedCheckpoint load_checkpoint(std::istream& in) {
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) throw Error("not a checkpoint file");
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (version != kCheckpointVersion) throw Error("unsupported checkpoint version " + std::to_string(version));
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw Error("checkpoint header truncated");
  const nlohmann::json header = nlohmann::json::parse(text);

  PatchConfig pc{header.at("patch").at("patch_len").get<int>(), header.at("patch").at("stride").get<int>()};
  const ModelConfig mc = model_config_from_json(header.at("model"));
  const ExogenousSchema schema = exogenous_schema_from_json(header.at("exogenous"));
  LoadedCheckpoint out{EncoderState::init(mc, pc, header.at("window").get<int>(), schema,
                                          header.at("seed").get<std::uint64_t>()),
                       {}};
  auto params = out.state.named_parameters();
  std::map<std::string, Var> by_name(params.begin(), params.end());
  for (const auto& t : header.at("tensors")) {
    const auto name = t.at("name").get<std::string>();
    const auto rows = t.at("rows").get<Eigen::Index>();
    const auto cols = t.at("cols").get<Eigen::Index>();
    Matrix m = detail::read_tensor(in, rows, cols);
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      out.extra.emplace_back(name, std::move(m));
      continue;
    }
    if (it->second.rows() != rows || it->second.cols() != cols) {
      throw Error("checkpoint tensor '" + name + "' has unexpected shape");
    }
    it->second.mutable_value() = std::move(m);
  }
  return out;
}

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  return load_checkpoint(in);
}

}  // namespace powerpm
