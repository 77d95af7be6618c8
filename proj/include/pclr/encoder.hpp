#pragma once

// 1D pre-activation ResNet encoders with a three-layer projection head.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pclr/common.hpp"
#include "pclr/nn/layers.hpp"

namespace pclr {

using nn::Mat;
using Signal = nn::Mat<float>;  // leads x samples, millivolts

struct EncoderSpec {
  static constexpr int kStemKernel = 15;
  static constexpr int kBlockKernel = 3;
  static constexpr int kInputLength = kWindowSamples;
  static constexpr int kInputChannels = kNumLeads;

  int depth = 18;
  int chan_start = 16;
  /// Hidden, hidden, output widths of the projection head. Zero means
  /// "chan_out".
  std::array<int, 3> projection_dims{0, 0, 128};
  /// Overrides the depth table with an explicit per-stage unit count (toy
  /// variants for tests). Stage widths stay chan_start * 2^i.
  std::vector<int> custom_stage_units;
  /// Only consulted together with custom_stage_units.
  bool custom_bottleneck = false;

  bool bottleneck() const {
    if (!custom_stage_units.empty()) return custom_bottleneck;
    return depth >= 50;
  }

  std::vector<int> stage_units() const {
    if (!custom_stage_units.empty()) return custom_stage_units;
    switch (depth) {
      case 18: return {2, 2, 2, 2};
      case 34: return {3, 4, 6, 3};
      case 50: return {3, 4, 6, 3};
      case 101: return {3, 4, 23, 3};
      case 152: return {3, 8, 36, 3};
      default: throw ConfigError("unsupported encoder depth " + std::to_string(depth));
    }
  }

  int num_stages() const { return static_cast<int>(stage_units().size()); }
  int stage_width(int stage) const { return chan_start << stage; }
  int chan_out() const { return stage_width(num_stages() - 1); }

  std::array<int, 3> head_dims() const {
    std::array<int, 3> d = projection_dims;
    for (int& v : d)
      if (v == 0) v = chan_out();
    return d;
  }

  void validate() const {
    if (chan_start <= 0) throw ConfigError("chan_start must be positive");
    const auto units = stage_units();
    if (units.empty() || units.size() > 4) throw ConfigError("encoder needs 1..4 stages");
    for (int u : units)
      if (u <= 0) throw ConfigError("every stage needs at least one unit");
    for (int d : projection_dims)
      if (d < 0) throw ConfigError("projection dims must be positive");
    if (bottleneck() && chan_start < 4) throw ConfigError("bottleneck units need chan_start >= 4");
  }

  std::string name() const {
    if (!custom_stage_units.empty()) return "custom";
    return "resnet" + std::to_string(depth) + "_c" + std::to_string(chan_start);
  }

  /// Named fiducial variants: resnet18 ... resnet152, and the "x2" widths.
  static EncoderSpec named(const std::string& name) {
    struct Row {
      const char* name;
      int depth;
      int chan_start;
    };
    static constexpr Row kRows[] = {
        {"resnet18", 18, 16},    {"resnet34", 34, 32},    {"resnet50", 50, 32},
        {"resnet101", 101, 32},  {"resnet152", 152, 64},  {"resnet18x2", 18, 32},
        {"resnet34x2", 34, 64},  {"resnet50x2", 50, 64},  {"resnet101x2", 101, 64},
        {"resnet152x2", 152, 128},
    };
    for (const auto& r : kRows) {
      if (name == r.name) {
        EncoderSpec s;
        s.depth = r.depth;
        s.chan_start = r.chan_start;
        return s;
      }
    }
    throw ConfigError("unknown encoder variant '" + name + "'");
  }

  static std::vector<std::string> named_variants() {
    return {"resnet18",   "resnet34",   "resnet50",   "resnet101",   "resnet152",
            "resnet18x2", "resnet34x2", "resnet50x2", "resnet101x2", "resnet152x2"};
  }
};

enum class Mode { train, eval };

/// How a forward pass treats normalization and caching.
struct ForwardOptions {
  bool keep_graph = false;    // cache activations for backward
  bool update_stats = true;   // fold batch statistics into running stats (train mode only)
};

namespace detail {

template <typename T>
class ResidualUnit {
 public:
  ResidualUnit(int in, int out, int stride, bool bottleneck, Rng& rng) {
    const int k = EncoderSpec::kBlockKernel;
    if (bottleneck) {
      const int inner = std::max(1, out / 4);
      add(in, inner, 1, 1, 0, rng);
      add(inner, inner, k, stride, k / 2, rng);
      add(inner, out, 1, 1, 0, rng);
    } else {
      add(in, out, k, stride, k / 2, rng);
      add(out, out, k, 1, k / 2, rng);
    }
    if (stride != 1 || in != out) {
      proj_.emplace(in, out, 1, stride, 0);
      proj_->init(rng);
    }
  }

  nn::Activation<T> forward(const nn::Activation<T>& x, bool train, const ForwardOptions& opt) {
    const bool keep = opt.keep_graph;
    nn::Activation<T> pre = relus_[0].forward(bns_[0].forward(x, train, keep, opt.update_stats), keep);
    nn::Activation<T> h = convs_[0].forward(pre, keep);
    for (std::size_t i = 1; i < convs_.size(); ++i) {
      h = relus_[i].forward(bns_[i].forward(h, train, keep, opt.update_stats), keep);
      h = convs_[i].forward(h, keep);
    }
    if (proj_) {
      h.data += proj_->forward(pre, keep).data;
    } else {
      h.data += x.data;
    }
    return h;
  }

  nn::Activation<T> backward(const nn::Activation<T>& dy) {
    nn::Activation<T> dh = dy;
    for (std::size_t i = convs_.size() - 1; i >= 1; --i) {
      dh = convs_[i].backward(dh);
      dh = bns_[i].backward(relus_[i].backward(dh));
    }
    nn::Activation<T> dpre = convs_[0].backward(dh);
    if (proj_) dpre.data += proj_->backward(dy).data;
    nn::Activation<T> dx = bns_[0].backward(relus_[0].backward(dpre));
    if (!proj_) dx.data += dy.data;
    return dx;
  }

  template <typename F>
  void visit_params(const std::string& prefix, F&& f) {
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      bns_[i].visit_params(prefix + ".bn" + std::to_string(i), f);
      convs_[i].visit_params(prefix + ".conv" + std::to_string(i), f);
    }
    if (proj_) proj_->visit_params(prefix + ".proj", f);
  }

  template <typename F>
  void visit_buffers(const std::string& prefix, F&& f) {
    for (std::size_t i = 0; i < bns_.size(); ++i) bns_[i].visit_buffers(prefix + ".bn" + std::to_string(i), f);
  }

 private:
  void add(int in, int out, int k, int stride, int pad, Rng& rng) {
    bns_.emplace_back(in);
    relus_.emplace_back();
    convs_.emplace_back(in, out, k, stride, pad);
    convs_.back().init(rng);
  }

  std::vector<nn::BatchNorm1d<T>> bns_;
  std::vector<nn::Relu<T>> relus_;
  std::vector<nn::Conv1d<T>> convs_;
  std::optional<nn::Conv1d<T>> proj_;
};

}  // namespace detail

/// Trainable encoder state: backbone, projection head, running statistics
/// and the train/eval mode flag. Copying yields an independent deep copy.
template <typename T>
class Encoder {
 public:
  Encoder() = default;

  Encoder(const EncoderSpec& spec, std::uint64_t init_seed) : spec_(spec) {
    spec_.validate();
    Rng rng(init_seed);
    const int cs = spec_.chan_start;
    stem_ = nn::Conv1d<T>(EncoderSpec::kInputChannels, cs, EncoderSpec::kStemKernel, 2,
                          EncoderSpec::kStemKernel / 2);
    stem_.init(rng);
    stem_bn_ = nn::BatchNorm1d<T>(cs);
    const auto units = spec_.stage_units();
    int in = cs;
    for (std::size_t s = 0; s < units.size(); ++s) {
      const int width = spec_.stage_width(static_cast<int>(s));
      for (int u = 0; u < units[s]; ++u) {
        const int stride = (s > 0 && u == 0) ? 2 : 1;
        units_.emplace_back(in, width, stride, spec_.bottleneck(), rng);
        unit_names_.push_back("stage" + std::to_string(s + 1) + ".unit" + std::to_string(u));
        in = width;
      }
    }
    final_bn_ = nn::BatchNorm1d<T>(in);
    const auto hd = spec_.head_dims();
    head_[0] = nn::Linear<T>(spec_.chan_out(), hd[0]);
    head_[1] = nn::Linear<T>(hd[0], hd[1]);
    head_[2] = nn::Linear<T>(hd[1], hd[2]);
    for (auto& l : head_) l.init(rng);
  }

  const EncoderSpec& spec() const { return spec_; }
  Mode mode() const { return mode_; }
  void set_mode(Mode m) { mode_ = m; }
  int embedding_dim() const { return spec_.chan_out(); }
  int projection_dim() const { return spec_.head_dims()[2]; }

  /// Backbone forward: input is (4, B*1024), output (chan_out, B).
  Mat<T> forward(const nn::Activation<T>& input, const ForwardOptions& opt = {}) {
    if (input.channels() != EncoderSpec::kInputChannels || input.length != EncoderSpec::kInputLength ||
        input.batch <= 0 || input.data.cols() != static_cast<Eigen::Index>(input.batch) * input.length) {
      throw DomainError("encoder input must be B x 4 x 1024, got " + std::to_string(input.channels()) +
                        " channels x " + std::to_string(input.length) + " samples");
    }
    const bool train = mode_ == Mode::train;
    const bool keep = opt.keep_graph;
    nn::Activation<T> h = stem_.forward(input, keep);
    h = stem_relu_.forward(stem_bn_.forward(h, train, keep, opt.update_stats), keep);
    h = pool_.forward(h);
    for (auto& u : units_) h = u.forward(h, train, opt);
    h = final_relu_.forward(final_bn_.forward(h, train, keep, opt.update_stats), keep);
    final_length_ = h.length;
    return nn::global_avg_pool(h);
  }

  /// Accumulates parameter gradients given dL/d(embedding).
  void backward(const Mat<T>& d_embedding) {
    nn::Activation<T> dh = nn::global_avg_pool_backward(d_embedding, final_length_);
    dh = final_bn_.backward(final_relu_.backward(dh));
    for (std::size_t i = units_.size(); i-- > 0;) dh = units_[i].backward(dh);
    dh = pool_.backward(dh);
    dh = stem_bn_.backward(stem_relu_.backward(dh));
    stem_.backward(dh, false);
  }

  /// Projection head with L2-normalized output columns.
  Mat<T> project(const Mat<T>& embedding, bool keep_graph = false) {
    Mat<T> z = head_[0].forward(embedding, keep_graph);
    z = relu(z, 0, keep_graph);
    z = head_[1].forward(z, keep_graph);
    z = relu(z, 1, keep_graph);
    z = head_[2].forward(z, keep_graph);
    nn::Vec<T> norms;
    Mat<T> y = nn::l2_normalize_cols(z, &norms);
    if (keep_graph) {
      proj_out_ = y;
      proj_norms_ = norms;
    }
    return y;
  }

  /// Returns dL/d(embedding) given dL/d(normalized projection).
  Mat<T> project_backward(const Mat<T>& d_out) {
    Mat<T> dz = nn::l2_normalize_backward(proj_out_, proj_norms_, d_out);
    dz = head_[2].backward(dz);
    dz = (relu_mask_[1].array() > T(0)).select(dz, T(0));
    dz = head_[1].backward(dz);
    dz = (relu_mask_[0].array() > T(0)).select(dz, T(0));
    return head_[0].backward(dz);
  }

  void zero_grad() {
    visit_params([](const std::string&, nn::Parameter<T>& p) { p.zero_grad(); });
  }

  /// Visits every trainable tensor in a fixed order. `include_head` controls
  /// the projection head.
  template <typename F>
  void visit_params(F&& f, bool include_head = true) {
    stem_.visit_params("stem.conv", f);
    stem_bn_.visit_params("stem.bn", f);
    for (std::size_t i = 0; i < units_.size(); ++i) units_[i].visit_params(unit_names_[i], f);
    final_bn_.visit_params("final.bn", f);
    if (include_head)
      for (int i = 0; i < 3; ++i) head_[i].visit_params("head.fc" + std::to_string(i), f);
  }

  template <typename F>
  void visit_buffers(F&& f) {
    stem_bn_.visit_buffers("stem.bn", f);
    for (std::size_t i = 0; i < units_.size(); ++i) units_[i].visit_buffers(unit_names_[i], f);
    final_bn_.visit_buffers("final.bn", f);
  }

  /// Exact count of trainable scalars (normalization scale/shift included,
  /// running statistics excluded).
  std::int64_t param_count(bool include_head) const {
    std::int64_t n = 0;
    const_cast<Encoder*>(this)->visit_params(
        [&](const std::string&, nn::Parameter<T>& p) { n += static_cast<std::int64_t>(p.size()); },
        include_head);
    return n;
  }

  bool all_finite() const {
    bool ok = true;
    const_cast<Encoder*>(this)->visit_params(
        [&](const std::string&, nn::Parameter<T>& p) { ok = ok && p.value.allFinite(); });
    return ok;
  }

 private:
  Mat<T> relu(const Mat<T>& z, int idx, bool keep) {
    Mat<T> y = z.cwiseMax(T(0));
    if (keep) relu_mask_[idx] = y;
    return y;
  }

  EncoderSpec spec_;
  Mode mode_ = Mode::train;
  nn::Conv1d<T> stem_;
  nn::BatchNorm1d<T> stem_bn_;
  nn::Relu<T> stem_relu_;
  nn::AvgPool1d<T> pool_;
  std::vector<detail::ResidualUnit<T>> units_;
  std::vector<std::string> unit_names_;
  nn::BatchNorm1d<T> final_bn_;
  nn::Relu<T> final_relu_;
  std::array<nn::Linear<T>, 3> head_;
  int final_length_ = 0;
  std::array<Mat<T>, 2> relu_mask_;
  Mat<T> proj_out_;
  nn::Vec<T> proj_norms_;
};

/// Analytic size of the projection head: three affine layers.
inline std::int64_t head_param_count(const EncoderSpec& spec) {
  const auto d = spec.head_dims();
  const std::int64_t c = spec.chan_out();
  return c * d[0] + d[0] + std::int64_t{d[0]} * d[1] + d[1] + std::int64_t{d[1]} * d[2] + d[2];
}

// ---------------------------------------------------------------------------
// Input windows

/// Packs 4 x 1024 windows into an encoder input batch.
template <typename T>
nn::Activation<T> make_batch(std::span<const Signal> windows) {
  nn::Activation<T> a;
  a.batch = static_cast<int>(windows.size());
  a.length = kWindowSamples;
  a.data.resize(kNumLeads, static_cast<Eigen::Index>(a.batch) * kWindowSamples);
  for (int b = 0; b < a.batch; ++b) {
    const Signal& w = windows[static_cast<std::size_t>(b)];
    if (w.rows() != kNumLeads || w.cols() != kWindowSamples)
      throw DomainError("window must be 4 x 1024");
    a.data.block(0, static_cast<Eigen::Index>(b) * kWindowSamples, kNumLeads, kWindowSamples) =
        w.template cast<T>();
  }
  return a;
}

inline constexpr int kMaxCropOffset = kSegmentSamples - kWindowSamples;  // 6176
inline constexpr int kCenterCropOffset = kMaxCropOffset / 2;             // 3088

/// Uniform random crop offset in [0, len - 1024].
inline int random_crop_offset(Rng& rng, int length = kSegmentSamples) {
  if (length < kWindowSamples) throw DomainError("segment shorter than one window");
  std::uniform_int_distribution<int> d(0, length - kWindowSamples);
  return d(rng);
}

inline Signal crop_at(const Signal& segment, int offset) {
  if (offset < 0 || offset + kWindowSamples > segment.cols()) throw DomainError("crop outside segment");
  return segment.block(0, offset, segment.rows(), kWindowSamples);
}

/// Training-time crop: contiguous 1024-sample window at a uniform offset.
inline Signal random_crop(const Signal& segment, Rng& rng) {
  return crop_at(segment, random_crop_offset(rng, static_cast<int>(segment.cols())));
}

/// Evaluation-time crop: the fixed center window.
inline Signal center_crop(const Signal& segment) {
  return crop_at(segment, (static_cast<int>(segment.cols()) - kWindowSamples) / 2);
}

}  // namespace pclr
