#include "mss/kde.hpp"

#include <cmath>

#include "mss/errors.hpp"

namespace mss {

namespace {
constexpr double kLog2Pi = 1.83787706640934548356;
}

Vector scott_bandwidth(const Matrix& samples) {
  const Eigen::Index n = samples.rows(), d = samples.cols();
  if (n < 2) throw TooFewSamples("bandwidth selection needs at least two samples");
  const double factor = std::pow(static_cast<double>(n), -1.0 / (static_cast<double>(d) + 4.0));
  Vector h(d);
  for (Eigen::Index i = 0; i < d; ++i) {
    const double m = samples.col(i).mean();
    const double sd = std::sqrt((samples.col(i).array() - m).square().sum() / static_cast<double>(n - 1));
    if (!(sd > 0)) throw DegenerateChain("KDE column " + std::to_string(i) + " is constant");
    h[i] = sd * factor;
  }
  return h;
}

KDEModel make_kde(Matrix samples) {
  Vector h = scott_bandwidth(samples);
  return make_kde(std::move(samples), std::move(h));
}

KDEModel make_kde(Matrix samples, Vector bandwidth) {
  if (samples.rows() < 1) throw TooFewSamples("KDE needs at least one sample");
  if (bandwidth.size() != samples.cols()) throw DimensionMismatch("one bandwidth per column required");
  for (Eigen::Index i = 0; i < bandwidth.size(); ++i) {
    if (!(bandwidth[i] > 0)) throw InvalidArgument("KDE bandwidths must be positive");
  }
  return {std::move(samples), std::move(bandwidth)};
}

double kde_log_density(const KDEModel& kde, const Vector& x) {
  if (x.size() != kde.dim()) throw DimensionMismatch("KDE point has the wrong dimension");
  const Eigen::Index n = kde.samples.rows();
  const double norm = -kde.bandwidth.array().log().sum() - 0.5 * static_cast<double>(kde.dim()) * kLog2Pi;
  Vector e(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    e[r] = -0.5 * ((kde.samples.row(r).transpose() - x).array() / kde.bandwidth.array()).square().sum();
  }
  const double m = e.maxCoeff();
  return m + std::log((e.array() - m).exp().sum()) - std::log(static_cast<double>(n)) + norm;
}

}  // namespace mss
