#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dmerl/errors.hpp"
#include "dmerl/mlp.hpp"

namespace dmerl {

inline constexpr int kCheckpointFormatVersion = 1;

/// Named tensors plus string metadata.
///
/// On disk: an 8-byte little-endian header length, the text header
/// (`format`, `tensor`, `activation` and `meta` lines), then every tensor's
/// values as little-endian IEEE-754 doubles in declaration order.
struct Checkpoint {
  std::vector<std::pair<std::string, Tensor>> tensors;
  std::map<std::string, std::string> activations;
  std::map<std::string, std::string> meta;

  void add_tensor(std::string name, Tensor t) { tensors.emplace_back(std::move(name), std::move(t)); }

  void add_network(const std::string& prefix, const MlpParams& p) {
    for (std::size_t i = 0; i < p.layers.size(); ++i) {
      const std::string base = prefix + ".layer" + std::to_string(i);
      add_tensor(base + ".weight", p.layers[i].weight);
      add_tensor(base + ".bias", p.layers[i].bias);
      activations[base] = std::string(to_string(p.layers[i].activation));
    }
  }

  [[nodiscard]] const Tensor& tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    throw LoadError("checkpoint has no tensor '" + name + "'");
  }

  [[nodiscard]] bool has_tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return true;
    return false;
  }

  /// Reads a network back, checking every tensor against the expected layout.
  [[nodiscard]] MlpParams network(const std::string& prefix, const MlpParams& like) const {
    MlpParams p = like;
    for (std::size_t i = 0; i < p.layers.size(); ++i) {
      const std::string base = prefix + ".layer" + std::to_string(i);
      auto load = [&](const std::string& name, Tensor& dst) {
        const Tensor& src = tensor(name);
        if (src.shape() != dst.shape())
          throw LoadError("tensor '" + name + "' has shape " + shape_string(src.shape()) + ", expected " +
                          shape_string(dst.shape()));
        dst = src;
      };
      load(base + ".weight", p.layers[i].weight);
      load(base + ".bias", p.layers[i].bias);
      auto it = activations.find(base);
      if (it != activations.end() && activation_from_string(it->second) != p.layers[i].activation)
        throw LoadError("layer '" + base + "' activation is " + it->second + ", expected " +
                        std::string(to_string(p.layers[i].activation)));
    }
    if (has_tensor(prefix + ".layer" + std::to_string(p.layers.size()) + ".weight"))
      throw LoadError("network '" + prefix + "' has more layers than expected");
    return p;
  }
};

namespace detail {

inline void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffU));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
  std::ostringstream header;
  header << "format " << kCheckpointFormatVersion << '\n';
  for (const auto& [name, t] : ck.tensors) {
    if (name.find_first_of(" \n") != std::string::npos) throw ContractViolation("tensor names cannot contain spaces");
    header << "tensor " << name << ' ' << t.rank();
    for (std::size_t d : t.shape()) header << ' ' << d;
    header << '\n';
  }
  for (const auto& [name, tag] : ck.activations) header << "activation " << name << ' ' << tag << '\n';
  for (const auto& [key, value] : ck.meta) {
    if (value.find('\n') != std::string::npos) throw ContractViolation("meta values must be single-line");
    header << "meta " << key << ' ' << value << '\n';
  }
  const std::string text = header.str();
  std::string out;
  detail::put_u64_le(out, text.size());
  out += text;
  for (const auto& [name, t] : ck.tensors) {
    for (double v : t.data()) detail::put_u64_le(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 8) throw LoadError("checkpoint truncated: missing header length");
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint64_t header_len = detail::get_u64_le(raw);
  if (header_len > bytes.size() - 8) throw LoadError("checkpoint truncated: header length exceeds file size");
  std::istringstream header(bytes.substr(8, header_len));
  Checkpoint ck;
  std::vector<Shape> shapes;
  std::string line;
  bool saw_format = false;
  while (std::getline(header, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "format") {
      int version = 0;
      ls >> version;
      if (version != kCheckpointFormatVersion)
        throw LoadError("unsupported checkpoint format version " + std::to_string(version));
      saw_format = true;
    } else if (kind == "tensor") {
      std::string name;
      std::size_t rank = 0;
      ls >> name >> rank;
      Shape shape(rank);
      for (auto& d : shape) ls >> d;
      if (!ls) throw LoadError("malformed tensor line: " + line);
      ck.tensors.emplace_back(name, Tensor(shape));
    } else if (kind == "activation") {
      std::string name, tag;
      ls >> name >> tag;
      ck.activations[name] = tag;
    } else if (kind == "meta") {
      std::string key;
      ls >> key;
      std::string value;
      std::getline(ls, value);
      if (!value.empty() && value.front() == ' ') value.erase(0, 1);
      ck.meta[key] = value;
    } else {
      throw LoadError("unknown checkpoint header record '" + kind + "'");
    }
  }
  if (!saw_format) throw LoadError("checkpoint header has no format record");
  std::size_t offset = 8 + header_len;
  for (auto& [name, t] : ck.tensors) {
    if (bytes.size() < offset + 8 * t.size()) throw LoadError("checkpoint truncated in tensor '" + name + "'");
    for (double& v : t.data()) {
      v = std::bit_cast<double>(detail::get_u64_le(raw + offset));
      offset += 8;
    }
  }
  if (offset != bytes.size()) throw LoadError("checkpoint has trailing bytes");
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const std::string bytes = encode_checkpoint(ck);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write checkpoint " + tmp.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw LoadError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace dmerl
