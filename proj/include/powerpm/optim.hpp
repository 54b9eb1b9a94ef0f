// Adam with gradient accumulation, and a reduce-on-plateau learning-rate
// scheduler.
#pragma once

#include "powerpm/autograd.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace powerpm {

class Adam {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  Adam(std::vector<ag::Var> params, Options opt) : params_(std::move(params)), opt_(opt) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const ag::Var& p : params_) {
      m_.push_back(ag::Matrix::Zero(p.rows(), p.cols()));
      v_.push_back(ag::Matrix::Zero(p.rows(), p.cols()));
    }
  }

  void zero_grad() {
    for (ag::Var& p : params_) p.zero_grad();
  }

  /// Applies one update using the accumulated gradients divided by `grad_divisor`.
  void step(double grad_divisor = 1.0) {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      ag::Var& p = params_[i];
      if (!p.has_grad()) continue;
      const ag::Matrix g = p.grad() / grad_divisor;
      m_[i] = opt_.beta1 * m_[i] + (1.0 - opt_.beta1) * g;
      v_[i] = opt_.beta2 * v_[i] + (1.0 - opt_.beta2) * g.cwiseAbs2();
      const auto mhat = m_[i].array() / bc1;
      const auto vhat = v_[i].array() / bc2;
      p.mutable_value().array() -= opt_.lr * mhat / (vhat.sqrt() + opt_.eps);
    }
  }

  double lr() const { return opt_.lr; }
  void set_lr(double lr) { opt_.lr = lr; }
  long steps() const { return t_; }

 private:
  std::vector<ag::Var> params_;
  Options opt_;
  std::vector<ag::Matrix> m_;
  std::vector<ag::Matrix> v_;
  long t_ = 0;
};

/// Multiplies the learning rate by `factor` after `patience` evaluations
/// without improvement of the monitored value.
class PlateauScheduler {
 public:
  PlateauScheduler(double factor, int patience, double min_lr = 0.0, double threshold = 1e-4)
      : factor_(factor), patience_(patience), min_lr_(min_lr), threshold_(threshold) {
    if (!(factor > 0.0 && factor < 1.0)) throw std::invalid_argument("plateau factor must be in (0,1)");
    if (patience < 0) throw std::invalid_argument("plateau patience must be >= 0");
  }

  /// Returns the learning rate to use after observing `metric`.
  double observe(double metric, double lr) {
    if (metric < best_ * (1.0 - threshold_)) {
      best_ = metric;
      bad_ = 0;
      return lr;
    }
    if (++bad_ > patience_) {
      bad_ = 0;
      return std::max(min_lr_, lr * factor_);
    }
    return lr;
  }

 private:
  double factor_;
  int patience_;
  double min_lr_;
  double threshold_;
  double best_ = std::numeric_limits<double>::infinity();
  int bad_ = 0;
};

}  // namespace powerpm
