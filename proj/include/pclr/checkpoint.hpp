#pragma once

// Tensor archives and encoder checkpoints.
//
// Layout (little-endian):
//   "PCLRCKPT"                8 bytes
//   format_version            u32
//   header_length             u64
//   header                    JSON: {"meta": ..., "tensors": [{name, shape, offset, count}]}
//   payload                   float32 tensors, back to back

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pclr/encoder.hpp"
#include "pclr/harness/formats.hpp"

namespace pclr::ckpt {

inline constexpr char kMagic[8] = {'P', 'C', 'L', 'R', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kFormatVersion = 1;

struct Tensor {
  std::vector<int> shape;
  Mat<float> data;  // 2-D storage; shape is the logical shape
};

class Archive {
 public:
  nlohmann::json meta = nlohmann::json::object();

  void put(const std::string& name, std::vector<int> shape, const Mat<float>& data) {
    if (index_.count(name)) throw DomainError("duplicate tensor '" + name + "'");
    index_[name] = tensors_.size();
    tensors_.push_back({name, {std::move(shape), data}});
  }

  template <typename T>
  void put(const std::string& name, const Mat<T>& data) {
    put(name, {static_cast<int>(data.rows()), static_cast<int>(data.cols())}, data.template cast<float>());
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw FormatError("checkpoint has no tensor '" + name + "'");
    return tensors_[it->second].second;
  }

  /// Copies a stored tensor into `out`, which must already have the same
  /// number of rows and columns.
  template <typename T>
  void get_into(const std::string& name, Mat<T>& out) const {
    const Tensor& t = get(name);
    if (t.data.rows() != out.rows() || t.data.cols() != out.cols())
      throw FormatError("tensor '" + name + "' has shape " + std::to_string(t.data.rows()) + "x" +
                        std::to_string(t.data.cols()) + ", expected " + std::to_string(out.rows()) + "x" +
                        std::to_string(out.cols()));
    out = t.data.template cast<T>();
  }

  std::size_t size() const { return tensors_.size(); }
  std::vector<std::string> names() const {
    std::vector<std::string> n;
    for (const auto& [name, t] : tensors_) n.push_back(name);
    return n;
  }

  std::string encode() const {
    nlohmann::json table = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tensors_) {
      const auto count = static_cast<std::uint64_t>(t.data.size());
      table.push_back({{"name", name}, {"shape", t.shape}, {"rows", t.data.rows()}, {"cols", t.data.cols()},
                       {"offset", offset}, {"count", count}});
      offset += count;
    }
    const std::string header = nlohmann::json{{"meta", meta}, {"tensors", table}}.dump();
    std::string buf(kMagic, 8);
    io::detail::put_le<std::uint32_t>(buf, kFormatVersion);
    io::detail::put_le<std::uint64_t>(buf, header.size());
    buf += header;
    for (const auto& [name, t] : tensors_)
      buf.append(reinterpret_cast<const char*>(t.data.data()), static_cast<std::size_t>(t.data.size()) * sizeof(float));
    return buf;
  }

  static Archive decode(const std::string& buf, const std::string& what = "checkpoint") {
    if (buf.size() < 20) throw FormatError(what + ": truncated header");
    if (std::memcmp(buf.data(), kMagic, 8) != 0) throw FormatError(what + ": bad magic at offset 0");
    const auto version = io::detail::get_le<std::uint32_t>(buf, 8);
    if (version != kFormatVersion)
      throw FormatError(what + ": unsupported format_version " + std::to_string(version) + " at offset 8");
    const auto hlen = io::detail::get_le<std::uint64_t>(buf, 12);
    if (buf.size() < 20 + hlen) throw FormatError(what + ": truncated header");
    nlohmann::json header;
    try {
      header = nlohmann::json::parse(buf.substr(20, hlen));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(what + ": bad header: " + e.what());
    }
    Archive a;
    a.meta = header.at("meta");
    const std::size_t base = 20 + hlen;
    std::uint64_t total = 0;
    for (const auto& row : header.at("tensors")) total += row.at("count").get<std::uint64_t>();
    const std::size_t expected = base + total * sizeof(float);
    if (buf.size() != expected)
      throw FormatError(what + ": payload size mismatch: expected " + std::to_string(expected) + " bytes, got " +
                        std::to_string(buf.size()));
    for (const auto& row : header.at("tensors")) {
      Mat<float> m(row.at("rows").get<Eigen::Index>(), row.at("cols").get<Eigen::Index>());
      const auto off = row.at("offset").get<std::uint64_t>();
      std::memcpy(m.data(), buf.data() + base + off * sizeof(float), static_cast<std::size_t>(m.size()) * sizeof(float));
      a.put(row.at("name").get<std::string>(), row.at("shape").get<std::vector<int>>(), m);
    }
    return a;
  }

  void save(const std::filesystem::path& path) const {
    // Write-then-rename so a crash never leaves a half-written checkpoint.
    const auto tmp = path.string() + ".tmp";
    io::write_file(tmp, encode());
    std::filesystem::rename(tmp, path);
  }

  static Archive load(const std::filesystem::path& path) {
    return decode(io::detail::read_all(path), path.string());
  }

 private:
  std::vector<std::pair<std::string, Tensor>> tensors_;
  std::map<std::string, std::size_t> index_;
};

inline nlohmann::json to_json(const EncoderSpec& s) {
  return {{"depth", s.depth},
          {"chan_start", s.chan_start},
          {"projection_dims", s.projection_dims},
          {"custom_stage_units", s.custom_stage_units},
          {"custom_bottleneck", s.custom_bottleneck}};
}

inline EncoderSpec encoder_spec_from_json(const nlohmann::json& j) {
  EncoderSpec s;
  s.depth = j.at("depth").get<int>();
  s.chan_start = j.at("chan_start").get<int>();
  s.projection_dims = j.at("projection_dims").get<std::array<int, 3>>();
  s.custom_stage_units = j.value("custom_stage_units", std::vector<int>{});
  s.custom_bottleneck = j.value("custom_bottleneck", false);
  s.validate();
  return s;
}

/// Stores every parameter and running statistic under `prefix`.
template <typename T>
void put_encoder(Archive& a, const std::string& prefix, Encoder<T>& enc) {
  enc.visit_params([&](const std::string& n, nn::Parameter<T>& p) {
    a.put(prefix + n, p.shape, p.value.template cast<float>());
  });
  enc.visit_buffers([&](const std::string& n, nn::Buffer<T>& b) {
    a.put(prefix + n, b.shape, b.value.template cast<float>());
  });
}

template <typename T>
void get_encoder(const Archive& a, const std::string& prefix, Encoder<T>& enc, bool include_head = true) {
  enc.visit_params([&](const std::string& n, nn::Parameter<T>& p) { a.get_into(prefix + n, p.value); },
                   include_head);
  enc.visit_buffers([&](const std::string& n, nn::Buffer<T>& b) { a.get_into(prefix + n, b.value); });
}

/// Standalone encoder checkpoint (spec plus weights).
template <typename T>
void save_encoder(const std::filesystem::path& path, Encoder<T>& enc, const nlohmann::json& extra = {}) {
  Archive a;
  a.meta = {{"kind", "encoder"}, {"spec", to_json(enc.spec())}};
  if (!extra.is_null()) a.meta["extra"] = extra;
  put_encoder(a, "model.", enc);
  a.save(path);
}

/// Reads the encoder from either a standalone or a pretraining checkpoint
/// (the query encoder is used).
inline Encoder<float> load_encoder(const std::filesystem::path& path) {
  const Archive a = Archive::load(path);
  const EncoderSpec spec = encoder_spec_from_json(a.meta.at("spec"));
  Encoder<float> enc(spec, 0);
  const std::string prefix = a.has("model.stem.conv.weight") ? "model." : "query.";
  get_encoder(a, prefix, enc);
  enc.set_mode(Mode::eval);
  return enc;
}

}  // namespace pclr::ckpt
