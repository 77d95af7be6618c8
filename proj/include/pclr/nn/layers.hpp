#pragma once

// Minimal 1D convolutional building blocks with hand-written backward passes.
//
// Activations use a channel-major layout: a Mat with one row per channel and
// batch*length columns, sample b occupying columns [b*length, (b+1)*length).
// Convolutions lower to a single GEMM over the whole batch in that layout.

#include <Eigen/Dense>

#include <cmath>
#include <string>
#include <vector>

#include "pclr/common.hpp"

namespace pclr::nn {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
struct Activation {
  Mat<T> data;  // channels x (batch*length)
  int batch = 0;
  int length = 0;

  int channels() const { return static_cast<int>(data.rows()); }
};

/// A trainable tensor: value, gradient accumulator and its logical shape
/// (the storage is always a 2-D row-major matrix).
template <typename T>
struct Parameter {
  std::vector<int> shape;
  Mat<T> value;
  Mat<T> grad;

  Parameter() = default;
  Parameter(std::vector<int> s, Eigen::Index rows, Eigen::Index cols)
      : shape(std::move(s)), value(Mat<T>::Zero(rows, cols)), grad(Mat<T>::Zero(rows, cols)) {}

  Eigen::Index size() const { return value.size(); }
  void zero_grad() { grad.setZero(); }
};

/// Non-trainable state carried with the model (normalization running stats).
template <typename T>
struct Buffer {
  std::vector<int> shape;
  Mat<T> value;
};

template <typename T>
void uniform_fill(Mat<T>& m, T bound, Rng& rng) {
  std::uniform_real_distribution<double> u(-static_cast<double>(bound), static_cast<double>(bound));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(u(rng));
}

// ---------------------------------------------------------------------------

template <typename T>
class Conv1d {
 public:
  Conv1d() = default;
  Conv1d(int in_channels, int out_channels, int kernel, int stride, int padding)
      : cin_(in_channels), cout_(out_channels), k_(kernel), stride_(stride), pad_(padding),
        weight_({out_channels, in_channels, kernel}, out_channels, in_channels * kernel) {}

  void init(Rng& rng) {
    const T fan_in = static_cast<T>(cin_ * k_);
    uniform_fill(weight_.value, static_cast<T>(std::sqrt(6.0 / static_cast<double>(fan_in))), rng);
  }

  int out_length(int in_len) const { return (in_len + 2 * pad_ - k_) / stride_ + 1; }

  Activation<T> forward(const Activation<T>& x, bool keep) {
    const int lout = out_length(x.length);
    Activation<T> y;
    y.batch = x.batch;
    y.length = lout;
    if (identity_lowering()) {
      y.data.noalias() = weight_.value * x.data;
      if (keep) cols_ = x.data;
    } else {
      Mat<T> cols;
      im2col(x, lout, cols);
      y.data.noalias() = weight_.value * cols;
      if (keep) cols_ = std::move(cols);
    }
    in_len_ = x.length;
    batch_ = x.batch;
    return y;
  }

  /// Accumulates the weight gradient; returns the input gradient only when
  /// `need_input_grad` (the stem skips it).
  Activation<T> backward(const Activation<T>& dy, bool need_input_grad = true) {
    weight_.grad.noalias() += dy.data * cols_.transpose();
    Activation<T> dx;
    dx.batch = batch_;
    dx.length = in_len_;
    if (need_input_grad) {
      if (identity_lowering()) {
        dx.data.noalias() = weight_.value.transpose() * dy.data;
      } else {
        Mat<T> dcols;
        dcols.noalias() = weight_.value.transpose() * dy.data;
        col2im(dcols, dy.length, dx);
      }
    }
    cols_.resize(0, 0);
    return dx;
  }

  Parameter<T>& weight() { return weight_; }
  const Parameter<T>& weight() const { return weight_; }

  template <typename F>
  void visit_params(const std::string& prefix, F&& f) {
    f(prefix + ".weight", weight_);
  }

 private:
  bool identity_lowering() const { return k_ == 1 && stride_ == 1 && pad_ == 0; }

  void im2col(const Activation<T>& x, int lout, Mat<T>& cols) const {
    const int lin = x.length;
    const int nb = x.batch;
    cols.resize(static_cast<Eigen::Index>(cin_) * k_, static_cast<Eigen::Index>(nb) * lout);
    for (int c = 0; c < cin_; ++c) {
      const T* src_row = x.data.row(c).data();
      for (int kk = 0; kk < k_; ++kk) {
        T* dst = cols.row(static_cast<Eigen::Index>(c) * k_ + kk).data();
        for (int b = 0; b < nb; ++b) {
          const T* src = src_row + static_cast<std::ptrdiff_t>(b) * lin;
          T* out = dst + static_cast<std::ptrdiff_t>(b) * lout;
          for (int t = 0; t < lout; ++t) {
            const int pos = t * stride_ + kk - pad_;
            out[t] = (pos >= 0 && pos < lin) ? src[pos] : T(0);
          }
        }
      }
    }
  }

  void col2im(const Mat<T>& dcols, int lout, Activation<T>& dx) const {
    const int lin = dx.length;
    const int nb = dx.batch;
    dx.data = Mat<T>::Zero(cin_, static_cast<Eigen::Index>(nb) * lin);
    for (int c = 0; c < cin_; ++c) {
      T* dst_row = dx.data.row(c).data();
      for (int kk = 0; kk < k_; ++kk) {
        const T* src = dcols.row(static_cast<Eigen::Index>(c) * k_ + kk).data();
        for (int b = 0; b < nb; ++b) {
          T* out = dst_row + static_cast<std::ptrdiff_t>(b) * lin;
          const T* in = src + static_cast<std::ptrdiff_t>(b) * lout;
          for (int t = 0; t < lout; ++t) {
            const int pos = t * stride_ + kk - pad_;
            if (pos >= 0 && pos < lin) out[pos] += in[t];
          }
        }
      }
    }
  }

  int cin_ = 0, cout_ = 0, k_ = 1, stride_ = 1, pad_ = 0;
  Parameter<T> weight_;
  Mat<T> cols_;
  int in_len_ = 0, batch_ = 0;
};

// ---------------------------------------------------------------------------

/// Per-channel batch normalization. Train mode normalizes with batch
/// statistics (biased variance) and, when `update_stats`, folds them into the
/// running averages (unbiased variance); eval mode uses the running averages.
template <typename T>
class BatchNorm1d {
 public:
  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;

  BatchNorm1d() = default;
  explicit BatchNorm1d(int channels)
      : c_(channels), gamma_({channels}, channels, 1), beta_({channels}, channels, 1) {
    gamma_.value.setOnes();
    running_mean_.shape = {channels};
    running_mean_.value = Mat<T>::Zero(channels, 1);
    running_var_.shape = {channels};
    running_var_.value = Mat<T>::Ones(channels, 1);
  }

  Activation<T> forward(const Activation<T>& x, bool train, bool keep, bool update_stats = true) {
    const Eigen::Index m = x.data.cols();
    Activation<T> y;
    y.batch = x.batch;
    y.length = x.length;
    y.data.resize(c_, m);
    Vec<T> mean(c_), inv_std(c_);
    if (train) {
      mean = x.data.rowwise().mean();
      for (int c = 0; c < c_; ++c) {
        const T mu = mean(c);
        const T var = (x.data.row(c).array() - mu).square().sum() / static_cast<T>(m);
        inv_std(c) = T(1) / std::sqrt(var + static_cast<T>(kEps));
        if (update_stats) {
          const T unbiased = m > 1 ? var * static_cast<T>(m) / static_cast<T>(m - 1) : var;
          running_mean_.value(c, 0) = static_cast<T>(1 - kMomentum) * running_mean_.value(c, 0) +
                                      static_cast<T>(kMomentum) * mu;
          running_var_.value(c, 0) = static_cast<T>(1 - kMomentum) * running_var_.value(c, 0) +
                                     static_cast<T>(kMomentum) * unbiased;
        }
      }
    } else {
      for (int c = 0; c < c_; ++c) {
        mean(c) = running_mean_.value(c, 0);
        inv_std(c) = T(1) / std::sqrt(running_var_.value(c, 0) + static_cast<T>(kEps));
      }
    }
    for (int c = 0; c < c_; ++c) {
      const T scale = gamma_.value(c, 0) * inv_std(c);
      const T shift = beta_.value(c, 0) - mean(c) * scale;
      y.data.row(c) = (x.data.row(c).array() * scale + shift).matrix();
    }
    if (keep) {
      train_cache_ = train;
      inv_std_ = inv_std;
      mean_ = mean;
      x_ = x.data;
    }
    return y;
  }

  Activation<T> backward(const Activation<T>& dy) {
    const Eigen::Index m = dy.data.cols();
    Activation<T> dx;
    dx.batch = dy.batch;
    dx.length = dy.length;
    dx.data.resize(c_, m);
    for (int c = 0; c < c_; ++c) {
      const auto xhat = (x_.row(c).array() - mean_(c)) * inv_std_(c);
      const auto g = dy.data.row(c).array();
      const T sum_g = g.sum();
      const T sum_gx = (g * xhat).sum();
      gamma_.grad(c, 0) += sum_gx;
      beta_.grad(c, 0) += sum_g;
      const T scale = gamma_.value(c, 0) * inv_std_(c);
      if (train_cache_) {
        const T inv_m = T(1) / static_cast<T>(m);
        dx.data.row(c) = (scale * (g - sum_g * inv_m - xhat * (sum_gx * inv_m))).matrix();
      } else {
        dx.data.row(c) = (g * scale).matrix();
      }
    }
    x_.resize(0, 0);
    return dx;
  }

  template <typename F>
  void visit_params(const std::string& prefix, F&& f) {
    f(prefix + ".weight", gamma_);
    f(prefix + ".bias", beta_);
  }
  template <typename F>
  void visit_buffers(const std::string& prefix, F&& f) {
    f(prefix + ".running_mean", running_mean_);
    f(prefix + ".running_var", running_var_);
  }

 private:
  int c_ = 0;
  Parameter<T> gamma_, beta_;
  Buffer<T> running_mean_, running_var_;
  bool train_cache_ = false;
  Vec<T> inv_std_, mean_;
  Mat<T> x_;
};

// ---------------------------------------------------------------------------

template <typename T>
class Relu {
 public:
  Activation<T> forward(const Activation<T>& x, bool keep) {
    Activation<T> y{x.data.cwiseMax(T(0)), x.batch, x.length};
    if (keep) y_ = y.data;
    return y;
  }
  Activation<T> backward(const Activation<T>& dy) {
    Activation<T> dx{(y_.array() > T(0)).select(dy.data, T(0)), dy.batch, dy.length};
    y_.resize(0, 0);
    return dx;
  }

 private:
  Mat<T> y_;
};

/// Average pool, kernel 3, stride 2, padding 1, padded taps counted as zero.
template <typename T>
class AvgPool1d {
 public:
  static constexpr int kKernel = 3;
  static constexpr int kStride = 2;
  static constexpr int kPad = 1;

  static int out_length(int lin) { return (lin + 2 * kPad - kKernel) / kStride + 1; }

  Activation<T> forward(const Activation<T>& x) {
    const int lin = x.length;
    const int lout = out_length(lin);
    in_len_ = lin;
    Activation<T> y;
    y.batch = x.batch;
    y.length = lout;
    y.data = Mat<T>::Zero(x.data.rows(), static_cast<Eigen::Index>(x.batch) * lout);
    const T w = T(1) / T(kKernel);
    for (Eigen::Index c = 0; c < x.data.rows(); ++c) {
      for (int b = 0; b < x.batch; ++b) {
        const T* in = x.data.row(c).data() + static_cast<std::ptrdiff_t>(b) * lin;
        T* out = y.data.row(c).data() + static_cast<std::ptrdiff_t>(b) * lout;
        for (int t = 0; t < lout; ++t) {
          T s = 0;
          for (int kk = 0; kk < kKernel; ++kk) {
            const int pos = t * kStride + kk - kPad;
            if (pos >= 0 && pos < lin) s += in[pos];
          }
          out[t] = s * w;
        }
      }
    }
    return y;
  }

  Activation<T> backward(const Activation<T>& dy) const {
    const int lin = in_len_;
    const int lout = dy.length;
    Activation<T> dx;
    dx.batch = dy.batch;
    dx.length = lin;
    dx.data = Mat<T>::Zero(dy.data.rows(), static_cast<Eigen::Index>(dy.batch) * lin);
    const T w = T(1) / T(kKernel);
    for (Eigen::Index c = 0; c < dy.data.rows(); ++c) {
      for (int b = 0; b < dy.batch; ++b) {
        const T* g = dy.data.row(c).data() + static_cast<std::ptrdiff_t>(b) * lout;
        T* out = dx.data.row(c).data() + static_cast<std::ptrdiff_t>(b) * lin;
        for (int t = 0; t < lout; ++t) {
          for (int kk = 0; kk < kKernel; ++kk) {
            const int pos = t * kStride + kk - kPad;
            if (pos >= 0 && pos < lin) out[pos] += g[t] * w;
          }
        }
      }
    }
    return dx;
  }

 private:
  int in_len_ = 0;
};

/// Mean over the length axis: (C, B*L) -> (C, B).
template <typename T>
Mat<T> global_avg_pool(const Activation<T>& x) {
  Mat<T> out(x.data.rows(), x.batch);
  for (Eigen::Index c = 0; c < x.data.rows(); ++c)
    for (int b = 0; b < x.batch; ++b)
      out(c, b) = x.data.row(c).segment(static_cast<Eigen::Index>(b) * x.length, x.length).mean();
  return out;
}

template <typename T>
Activation<T> global_avg_pool_backward(const Mat<T>& dy, int length) {
  Activation<T> dx;
  dx.batch = static_cast<int>(dy.cols());
  dx.length = length;
  dx.data.resize(dy.rows(), static_cast<Eigen::Index>(dx.batch) * length);
  const T inv = T(1) / static_cast<T>(length);
  for (Eigen::Index c = 0; c < dy.rows(); ++c)
    for (int b = 0; b < dx.batch; ++b)
      dx.data.row(c).segment(static_cast<Eigen::Index>(b) * length, length).setConstant(dy(c, b) * inv);
  return dx;
}

// ---------------------------------------------------------------------------

/// Affine layer on feature-major inputs: y = W x + b, x is (in, B).
template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(int in, int out)
      : in_(in), out_(out), weight_({out, in}, out, in), bias_({out}, out, 1) {}

  void init(Rng& rng) {
    const T bound = static_cast<T>(1.0 / std::sqrt(static_cast<double>(in_)));
    uniform_fill(weight_.value, bound, rng);
    uniform_fill(bias_.value, bound, rng);
  }

  Mat<T> forward(const Mat<T>& x, bool keep) {
    Mat<T> y = weight_.value * x;
    y.colwise() += bias_.value.col(0);
    if (keep) x_ = x;
    return y;
  }

  Mat<T> backward(const Mat<T>& dy, bool need_input_grad = true) {
    weight_.grad.noalias() += dy * x_.transpose();
    bias_.grad.col(0) += dy.rowwise().sum();
    x_.resize(0, 0);
    if (!need_input_grad) return {};
    return weight_.value.transpose() * dy;
  }

  int in_features() const { return in_; }
  int out_features() const { return out_; }
  Parameter<T>& weight() { return weight_; }
  Parameter<T>& bias() { return bias_; }
  const Parameter<T>& weight() const { return weight_; }
  const Parameter<T>& bias() const { return bias_; }

  template <typename F>
  void visit_params(const std::string& prefix, F&& f) {
    f(prefix + ".weight", weight_);
    f(prefix + ".bias", bias_);
  }

 private:
  int in_ = 0, out_ = 0;
  Parameter<T> weight_, bias_;
  Mat<T> x_;
};

/// Column-wise L2 normalization.
template <typename T>
Mat<T> l2_normalize_cols(const Mat<T>& z, Vec<T>* norms = nullptr) {
  Mat<T> out(z.rows(), z.cols());
  if (norms) norms->resize(z.cols());
  for (Eigen::Index j = 0; j < z.cols(); ++j) {
    const T n = std::max(z.col(j).norm(), static_cast<T>(1e-12));
    out.col(j) = z.col(j) / n;
    if (norms) (*norms)(j) = n;
  }
  return out;
}

/// Backward of y = z/|z| given y, |z| and dL/dy.
template <typename T>
Mat<T> l2_normalize_backward(const Mat<T>& y, const Vec<T>& norms, const Mat<T>& dy) {
  Mat<T> dz(y.rows(), y.cols());
  for (Eigen::Index j = 0; j < y.cols(); ++j) {
    const T proj = y.col(j).dot(dy.col(j));
    dz.col(j) = (dy.col(j) - y.col(j) * proj) / norms(j);
  }
  return dz;
}

}  // namespace pclr::nn
