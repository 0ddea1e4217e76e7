#pragma once

// Model checkpoints: parameters + model config + vocabulary + free-form
// metadata, stored in one binary file.
//
// Layout:
//   "LCSMNMT-CKPT 1\n"
//   "config <bytes>\n" <key = value text>
//   per parameter: "param <name> <rank> <dim>...\n" <little-endian float64 payload>
//   "end\n"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lcs_mnmt/transformer.hpp"
#include "lcs_mnmt/util.hpp"
#include "lcs_mnmt/vocabulary.hpp"

namespace lcs {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelCheckpoint {
  ModelConfig config;
  Vocabulary vocab;
  ModelParams params;
  KeyValueConfig meta;  // e.g. strategy, training step, seed

  // Deep copy; the parameters of the copy share no storage with this one.
  ModelCheckpoint clone() const {
    ModelCheckpoint c{config, vocab, {}, meta};
    for (const auto& [name, t] : params) c.params.emplace(name, ad::Tensor(t.shape(), t.values(), true));
    return c;
  }
};

struct ParameterReport {
  std::vector<std::string> missing;     // expected but absent
  std::vector<std::string> unexpected;  // present but not expected
  std::vector<std::string> mismatched;  // present with a different shape

  bool ok() const { return missing.empty() && unexpected.empty() && mismatched.empty(); }
};

inline ParameterReport compare_parameters(const ModelConfig& cfg, const ModelParams& params) {
  ParameterReport r;
  const auto expected = parameter_shapes(cfg);
  for (const auto& [name, shape] : expected) {
    auto it = params.find(name);
    if (it == params.end()) {
      r.missing.push_back(name);
    } else if (it->second.shape() != shape) {
      r.mismatched.push_back(name);
    }
  }
  for (const auto& [name, t] : params) {
    (void)t;
    if (!expected.count(name)) r.unexpected.push_back(name);
  }
  return r;
}

namespace detail {

inline void write_f64_le(std::ostream& out, const std::vector<double>& data) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
  } else {
    for (double v : data) {
      auto bits = std::bit_cast<std::uint64_t>(v);
      unsigned char bytes[8];
      for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(bits >> (8 * i));
      out.write(reinterpret_cast<const char*>(bytes), 8);
    }
  }
}

inline std::vector<double> read_f64_le(std::istream& in, std::size_t n) {
  std::vector<double> data(n);
  std::vector<unsigned char> bytes(n * 8);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!in) throw CheckpointError("checkpoint: truncated parameter payload");
  for (std::size_t k = 0; k < n; ++k) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[k * 8 + static_cast<std::size_t>(i)]) << (8 * i);
    data[k] = std::bit_cast<double>(bits);
  }
  return data;
}

}  // namespace detail

inline const char* kCheckpointMagic = "LCSMNMT-CKPT 1";

inline std::string checkpoint_config_text(const ModelCheckpoint& ckpt) {
  KeyValueConfig kv = ckpt.config.to_config();
  const KeyValueConfig vocab = KeyValueConfig::parse(ckpt.vocab.to_text());
  for (const auto& [k, v] : vocab.values()) kv.set(k, v);
  for (const auto& [k, v] : ckpt.meta.values()) kv.set("meta." + k, v);
  return kv.to_text();
}

inline void save_checkpoint(const ModelCheckpoint& ckpt, const std::filesystem::path& path) {
  const auto report = compare_parameters(ckpt.config, ckpt.params);
  if (!report.ok()) throw CheckpointError("save_checkpoint: parameters do not match the model config");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  const std::string cfg = checkpoint_config_text(ckpt);
  out << kCheckpointMagic << "\n" << "config " << cfg.size() << "\n" << cfg;
  for (const auto& [name, t] : ckpt.params) {
    out << "param " << name << " " << t.rank();
    for (std::size_t d : t.shape()) out << " " << d;
    out << "\n";
    detail::write_f64_le(out, t.values());
  }
  out << "end\n";
  if (!out) throw CheckpointError("failed writing checkpoint " + path.string());
}

inline ModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kCheckpointMagic) throw CheckpointError("not a checkpoint file: " + path.string());
  std::size_t cfg_bytes = 0;
  {
    if (!std::getline(in, line)) throw CheckpointError("checkpoint: missing config header");
    std::istringstream hs(line);
    std::string tag;
    if (!(hs >> tag >> cfg_bytes) || tag != "config") throw CheckpointError("checkpoint: bad config header");
  }
  std::string cfg(cfg_bytes, '\0');
  in.read(cfg.data(), static_cast<std::streamsize>(cfg_bytes));
  if (!in) throw CheckpointError("checkpoint: truncated config");
  const KeyValueConfig kv = KeyValueConfig::parse(cfg);
  ModelCheckpoint ckpt;
  ckpt.config = ModelConfig::from_config(kv);
  ckpt.vocab = Vocabulary::from_config(kv);
  for (const auto& [k, v] : kv.values())
    if (k.starts_with("meta.")) ckpt.meta.set(k.substr(5), v);
  while (std::getline(in, line)) {
    if (line == "end") break;
    std::istringstream hs(line);
    std::string tag, name;
    std::size_t rank = 0;
    if (!(hs >> tag >> name >> rank) || tag != "param" || rank == 0) {
      throw CheckpointError("checkpoint: bad parameter header '" + line + "'");
    }
    ad::Shape shape(rank);
    for (auto& d : shape)
      if (!(hs >> d) || d == 0) throw CheckpointError("checkpoint: bad shape for " + name);
    ckpt.params.emplace(name, ad::Tensor(shape, detail::read_f64_le(in, ad::numel(shape)), true));
  }
  if (line != "end") throw CheckpointError("checkpoint: missing end marker");
  if (ckpt.vocab.size() != ckpt.config.vocab_size) throw CheckpointError("checkpoint: vocabulary size mismatch");
  const auto report = compare_parameters(ckpt.config, ckpt.params);
  if (!report.ok()) throw CheckpointError("checkpoint: parameters do not match the stored config");
  return ckpt;
}

// Elementwise mean of parameter maps with identical names and shapes.
inline ModelParams average_parameters(const std::vector<ModelParams>& snapshots) {
  if (snapshots.empty()) throw ad::ContractError("average_parameters: no snapshots");
  if (snapshots.size() == 1) {
    ModelParams out;
    for (const auto& [name, t] : snapshots.front()) out.emplace(name, ad::Tensor(t.shape(), t.values(), true));
    return out;
  }
  ModelParams out;
  const double inv = 1.0 / static_cast<double>(snapshots.size());
  for (const auto& [name, t] : snapshots.front()) {
    std::vector<double> acc(t.numel(), 0.0);
    for (const auto& snap : snapshots) {
      auto it = snap.find(name);
      if (it == snap.end() || it->second.shape() != t.shape()) {
        throw ad::ContractError("average_parameters: snapshots disagree on " + name);
      }
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += it->second.data()[i];
    }
    for (double& v : acc) v *= inv;
    out.emplace(name, ad::Tensor(t.shape(), std::move(acc), true));
  }
  return out;
}

}  // namespace lcs
