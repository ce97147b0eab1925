#pragma once

#include "mss/model.hpp"

namespace mss {

/// Product-Gaussian kernel density estimate.
struct KDEModel {
  Matrix samples;    ///< n x d
  Vector bandwidth;  ///< one per coordinate, all > 0

  Eigen::Index dim() const { return samples.cols(); }
};

/// Scott's rule: h_i = sd_i * n^{-1/(d+4)}.
Vector scott_bandwidth(const Matrix& samples);

KDEModel make_kde(Matrix samples);
KDEModel make_kde(Matrix samples, Vector bandwidth);

double kde_log_density(const KDEModel& kde, const Vector& x);

}  // namespace mss
