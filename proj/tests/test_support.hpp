#pragma once

#include <cmath>
#include <filesystem>
#include <string>

#include "mss/model.hpp"

namespace mss::test {

/// Independent Gaussian with per-coordinate mean and sd, unbounded space.
class DiagGaussian final : public TargetModel {
 public:
  DiagGaussian(Vector mean, Vector sd) : mean_(std::move(mean)), sd_(std::move(sd)) {
    for (Eigen::Index i = 0; i < mean_.size(); ++i) space_.add("x" + std::to_string(i), Bound::unbounded(), Block::hyper);
  }
  static DiagGaussian standard(int d) { return DiagGaussian(Vector::Zero(d), Vector::Ones(d)); }
  const ParameterSpace& space() const override { return space_; }
  double log_density_grad(const Vector& x, Vector& grad) const override {
    const Vector z = (x - mean_).cwiseQuotient(sd_);
    grad = -z.cwiseQuotient(sd_);
    return -0.5 * z.squaredNorm() - sd_.array().log().sum() - 0.5 * static_cast<double>(x.size()) * std::log(2 * M_PI);
  }

 private:
  Vector mean_, sd_;
  ParameterSpace space_;
};

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("mss_unit_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace mss::test
