#pragma once

// On-disk formats: the ECGT binary signal file, JSON-lines helpers and the
// curated-segment manifest.
//
// ECGT layout (little-endian):
//   offset 0   magic "ECGT"
//   offset 4   format_version  u16
//   offset 6   n_leads         u16
//   offset 8   n_samples       u32
//   offset 12  sample_rate_hz  f32
//   offset 16  n_leads * n_samples f32, lead-major

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pclr/common.hpp"
#include "pclr/segment.hpp"

namespace pclr::io {

inline constexpr char kSegmentMagic[4] = {'E', 'C', 'G', 'T'};
inline constexpr std::uint16_t kSegmentFormatVersion = 1;
inline constexpr std::size_t kSegmentHeaderBytes = 16;

static_assert(std::endian::native == std::endian::little, "ECGT writer assumes a little-endian host");

struct SignalFile {
  std::uint16_t format_version = kSegmentFormatVersion;
  float sample_rate_hz = static_cast<float>(kSampleRateHz);
  Signal samples;
};

namespace detail {

template <typename U>
void put_le(std::string& buf, U v) {
  char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  buf.append(b, sizeof(U));
}

template <typename U>
U get_le(const std::string& buf, std::size_t off) {
  U v;
  std::memcpy(&v, buf.data() + off, sizeof(U));
  return v;
}

inline std::string read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

}  // namespace detail

inline std::string encode_signal(const Signal& samples, float sample_rate_hz = static_cast<float>(kSampleRateHz)) {
  if (samples.rows() > 0xffff) throw DomainError("too many leads for ECGT");
  if (samples.cols() > 0xffffffffLL) throw DomainError("too many samples for ECGT");
  std::string buf;
  buf.reserve(kSegmentHeaderBytes + static_cast<std::size_t>(samples.size()) * 4);
  buf.append(kSegmentMagic, 4);
  detail::put_le<std::uint16_t>(buf, kSegmentFormatVersion);
  detail::put_le<std::uint16_t>(buf, static_cast<std::uint16_t>(samples.rows()));
  detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(samples.cols()));
  detail::put_le<float>(buf, sample_rate_hz);
  // Row-major storage is already lead-major.
  buf.append(reinterpret_cast<const char*>(samples.data()), static_cast<std::size_t>(samples.size()) * sizeof(float));
  return buf;
}

inline SignalFile decode_signal(const std::string& buf, const std::string& what = "ECGT data") {
  if (buf.size() < kSegmentHeaderBytes)
    throw FormatError(what + ": truncated header: expected " + std::to_string(kSegmentHeaderBytes) +
                      " bytes, got " + std::to_string(buf.size()));
  if (std::memcmp(buf.data(), kSegmentMagic, 4) != 0) throw FormatError(what + ": bad magic at offset 0");
  SignalFile f;
  f.format_version = detail::get_le<std::uint16_t>(buf, 4);
  if (f.format_version != kSegmentFormatVersion)
    throw FormatError(what + ": unsupported format_version " + std::to_string(f.format_version) + " at offset 4");
  const auto leads = detail::get_le<std::uint16_t>(buf, 6);
  const auto n = detail::get_le<std::uint32_t>(buf, 8);
  f.sample_rate_hz = detail::get_le<float>(buf, 12);
  const std::size_t expected = kSegmentHeaderBytes + std::size_t{leads} * n * sizeof(float);
  if (buf.size() != expected)
    throw FormatError(what + ": " + (buf.size() < expected ? "truncated" : "oversized") + " payload: expected " +
                      std::to_string(expected) + " bytes, got " + std::to_string(buf.size()));
  f.samples.resize(leads, n);
  std::memcpy(f.samples.data(), buf.data() + kSegmentHeaderBytes, std::size_t{leads} * n * sizeof(float));
  return f;
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write to " + path.string());
}

inline void write_signal(const std::filesystem::path& path, const Signal& samples,
                         float sample_rate_hz = static_cast<float>(kSampleRateHz)) {
  write_file(path, encode_signal(samples, sample_rate_hz));
}

inline SignalFile read_signal(const std::filesystem::path& path) {
  return decode_signal(detail::read_all(path), path.string());
}

inline void write_segment(const std::filesystem::path& path, const Segment& s) {
  s.validate();
  write_signal(path, s.samples);
}

/// Reads samples only; identity and labels live in the manifest row.
inline Signal read_segment(const std::filesystem::path& path) {
  SignalFile f = read_signal(path);
  if (f.samples.rows() != kNumLeads || f.samples.cols() != kSegmentSamples)
    throw FormatError(path.string() + ": not a 4 x 7200 segment");
  return std::move(f.samples);
}

// ---------------------------------------------------------------------------
// JSON lines

inline std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<nlohmann::json> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      rows.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return rows;
}

inline void write_jsonl(const std::filesystem::path& path, const std::vector<nlohmann::json>& rows) {
  std::string out;
  for (const auto& r : rows) {
    out += r.dump();
    out += '\n';
  }
  write_file(path, out);
}

/// Append-only JSON-lines writer.
class JsonlAppender {
 public:
  explicit JsonlAppender(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    out_.open(path, std::ios::app);
    if (!out_) throw DataError("cannot append to " + path.string());
  }
  void append(const nlohmann::json& row) {
    out_ << row.dump() << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

// ---------------------------------------------------------------------------
// Manifest

struct ManifestRow {
  std::string patient_id;
  std::string segment_id;
  std::string path;  // relative to the manifest directory, or absolute
  std::string source_record_id;
  double source_offset_s = 0;
  double quality_score = 0;
  bool partial_block = false;
  SegmentLabels labels;
};

inline nlohmann::json to_json(const ManifestRow& r) {
  return {{"patient_id", r.patient_id},
          {"segment_id", r.segment_id},
          {"path", r.path},
          {"source_record_id", r.source_record_id},
          {"source_offset_s", r.source_offset_s},
          {"quality_score", r.quality_score},
          {"partial_block", r.partial_block},
          {"labels", to_json(r.labels)}};
}

inline ManifestRow manifest_row_from_json(const nlohmann::json& j) {
  ManifestRow r;
  r.patient_id = j.at("patient_id").get<std::string>();
  r.segment_id = j.at("segment_id").get<std::string>();
  r.path = j.at("path").get<std::string>();
  r.source_record_id = j.value("source_record_id", std::string{});
  r.source_offset_s = j.value("source_offset_s", 0.0);
  r.quality_score = j.value("quality_score", 0.0);
  r.partial_block = j.value("partial_block", false);
  if (j.contains("labels")) r.labels = labels_from_json(j.at("labels"));
  return r;
}

struct Manifest {
  std::filesystem::path base_dir;
  std::vector<ManifestRow> rows;

  std::filesystem::path resolve(const ManifestRow& r) const {
    std::filesystem::path p(r.path);
    return p.is_absolute() ? p : base_dir / p;
  }

  Segment load(const ManifestRow& r) const {
    Segment s;
    s.patient_id = r.patient_id;
    s.segment_id = r.segment_id;
    s.samples = read_segment(resolve(r));
    s.source_record_id = r.source_record_id;
    s.source_offset_s = r.source_offset_s;
    s.quality_score = r.quality_score;
    s.partial_block = r.partial_block;
    s.labels = r.labels;
    return s;
  }
};

inline Manifest read_manifest(const std::filesystem::path& path) {
  Manifest m;
  m.base_dir = path.parent_path();
  for (const auto& j : read_jsonl(path)) m.rows.push_back(manifest_row_from_json(j));
  return m;
}

inline void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRow>& rows) {
  std::vector<nlohmann::json> js;
  js.reserve(rows.size());
  for (const auto& r : rows) js.push_back(to_json(r));
  write_jsonl(path, js);
}

}  // namespace pclr::io
