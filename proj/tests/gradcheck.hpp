// Central finite-difference gradient checks shared by the test binaries.
#pragma once

#include "powerpm/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

namespace powerpm::testkit {

struct GradReport {
  double max_rel_error = 0.0;
  std::string worst;
};

/// Per-tensor relative error ||analytic - numeric|| / max(||analytic||, ||numeric||).
/// Taken as 0 when both norms are below the round-off floor of the central
/// difference (64 eps |L| / h), e.g. key biases that softmax ignores.
inline GradReport check_gradients(const std::vector<std::pair<std::string, ag::Var>>& params,
                                  const std::function<ag::Var()>& loss, double h = 1e-6) {
  for (auto [_, p] : params) p.zero_grad();
  const ag::Var l0 = loss();
  ag::backward(l0);
  const double fd_floor = 64.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(l0.item())) / h;
  GradReport rep;
  for (auto [name, p] : params) {
    const ag::Matrix analytic = p.has_grad() ? p.grad() : ag::Matrix::Zero(p.rows(), p.cols());
    ag::Matrix numeric(p.rows(), p.cols());
    for (Eigen::Index i = 0; i < p.value().size(); ++i) {
      double& x = p.mutable_value().data()[i];
      const double keep = x;
      double plus = 0.0, minus = 0.0;
      {
        ag::NoGradGuard ng;
        x = keep + h;
        plus = loss().item();
        x = keep - h;
        minus = loss().item();
      }
      x = keep;
      numeric.data()[i] = (plus - minus) / (2.0 * h);
    }
    const double scale = std::max(analytic.norm(), numeric.norm());
    const double err = scale < fd_floor ? 0.0 : (analytic - numeric).norm() / scale;
    if (rep.worst.empty() || err > rep.max_rel_error) {
      rep.max_rel_error = err;
      rep.worst = name;
    }
    p.zero_grad();
  }
  return rep;
}

}  // namespace powerpm::testkit
