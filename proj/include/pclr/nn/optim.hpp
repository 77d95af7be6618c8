#pragma once

// Adam with optional decoupled weight decay, and step / warmup-cosine
// learning-rate rules.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "pclr/nn/layers.hpp"

namespace pclr::nn {

template <typename T>
using NamedParams = std::vector<std::pair<std::string, Parameter<T>*>>;

/// Collects pointers to every parameter a model exposes through
/// visit_params.
template <typename T, typename Model, typename... Args>
NamedParams<T> collect_params(Model& model, Args&&... args) {
  NamedParams<T> out;
  model.visit_params([&](const std::string& name, Parameter<T>& p) { out.emplace_back(name, &p); },
                     std::forward<Args>(args)...);
  return out;
}

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Decoupled: p <- p * (1 - lr * wd) before the moment update.
  double weight_decay = 0;
};

template <typename T>
class Adam {
 public:
  Adam() = default;
  Adam(NamedParams<T> params, AdamOptions opt = {}) : params_(std::move(params)), opt_(opt) {
    for (auto& [name, p] : params_) {
      m_.push_back(Mat<T>::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Mat<T>::Zero(p->value.rows(), p->value.cols()));
    }
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(opt_.beta1), b2 = static_cast<T>(opt_.beta2);
    const T step_size = static_cast<T>(lr / bc1);
    const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
    const T eps = static_cast<T>(opt_.eps);
    const T decay = static_cast<T>(1.0 - lr * opt_.weight_decay);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Parameter<T>& p = *params_[i].second;
      if (opt_.weight_decay != 0) p.value *= decay;
      m_[i] = b1 * m_[i] + (T(1) - b1) * p.grad;
      v_[i] = b2 * v_[i] + (T(1) - b2) * p.grad.cwiseAbs2();
      p.value.array() -= step_size * m_[i].array() / (v_[i].array().sqrt() * inv_sqrt_bc2 + eps);
    }
  }

  void zero_grad() {
    for (auto& [name, p] : params_) p->zero_grad();
  }

  const NamedParams<T>& params() const { return params_; }
  std::vector<Mat<T>>& first_moments() { return m_; }
  std::vector<Mat<T>>& second_moments() { return v_; }
  std::int64_t steps() const { return t_; }
  void set_steps(std::int64_t t) { t_ = t; }

 private:
  NamedParams<T> params_;
  AdamOptions opt_;
  std::vector<Mat<T>> m_, v_;
  std::int64_t t_ = 0;
};

/// Linear warmup from initial/10 to initial over `warmup` epochs, then cosine
/// decay to `final_lr` at `total`.
inline double warmup_cosine(double epoch, double initial, double final_lr, double warmup, double total) {
  if (epoch < warmup) return initial / 10.0 + (initial - initial / 10.0) * (epoch / warmup);
  const double t = total > warmup ? (epoch - warmup) / (total - warmup) : 1.0;
  return final_lr + (initial - final_lr) * (1.0 + std::cos(M_PI * std::min(t, 1.0))) / 2.0;
}

/// Step schedule: linear warmup from lr/10 over `warmup` epochs, then lr,
/// multiplied by 0.1 from epoch `milestone` on.
inline double warmup_step(int epoch, double lr, int warmup, int milestone) {
  if (epoch < warmup) return lr / 10.0 + (lr - lr / 10.0) * (static_cast<double>(epoch) / warmup);
  return epoch >= milestone ? lr * 0.1 : lr;
}

}  // namespace pclr::nn
