#pragma once

// In-memory segment collections indexed by patient, and batched embedding.

#include <algorithm>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "pclr/encoder.hpp"
#include "pclr/harness/formats.hpp"
#include "pclr/segment.hpp"

namespace pclr {

class SegmentStore {
 public:
  SegmentStore() = default;
  explicit SegmentStore(std::vector<Segment> segs) {
    for (auto& s : segs) add(std::move(s));
  }

  static SegmentStore from_manifest(const io::Manifest& m) {
    SegmentStore st;
    for (const auto& r : m.rows) st.add(m.load(r));
    return st;
  }

  void add(Segment s) {
    by_patient_[s.patient_id].push_back(segments_.size());
    segments_.push_back(std::move(s));
  }

  std::size_t size() const { return segments_.size(); }
  const Segment& operator[](std::size_t i) const { return segments_[i]; }
  const std::vector<Segment>& segments() const { return segments_; }

  /// Patient ids in sorted order.
  std::vector<std::string> patient_ids() const {
    std::vector<std::string> ids;
    for (const auto& [id, v] : by_patient_) ids.push_back(id);
    return ids;
  }

  const std::vector<std::size_t>& of_patient(const std::string& id) const {
    static const std::vector<std::size_t> kEmpty;
    auto it = by_patient_.find(id);
    return it == by_patient_.end() ? kEmpty : it->second;
  }

  bool has_patient(const std::string& id) const { return by_patient_.count(id) > 0; }

 private:
  std::vector<Segment> segments_;
  std::map<std::string, std::vector<std::size_t>> by_patient_;
};

/// Eval-mode backbone embeddings (chan_out x n), processed in chunks.
template <typename T>
Mat<T> embed_windows(Encoder<T>& enc, std::span<const Signal> windows, int chunk = 64) {
  const Mode prev = enc.mode();
  enc.set_mode(Mode::eval);
  Mat<T> out(enc.embedding_dim(), static_cast<Eigen::Index>(windows.size()));
  for (std::size_t i = 0; i < windows.size(); i += static_cast<std::size_t>(chunk)) {
    const std::size_t n = std::min(windows.size() - i, static_cast<std::size_t>(chunk));
    out.middleCols(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(n)) =
        enc.forward(make_batch<T>(windows.subspan(i, n)));
  }
  enc.set_mode(prev);
  return out;
}

}  // namespace pclr
