#pragma once

#include <string>

#include "mss/model.hpp"
#include "mss/pta_models.hpp"

namespace mss {

/// Injective embedding of the original hyper-space (dim m) into the
/// generalized one (dim M > m). Both maps shipped here are affine,
/// out = offset + jacobian * in, so the Jacobian is exact and constant.
class ConstraintMap {
 public:
  ConstraintMap(std::string name, ParameterSpace hyper_in, ParameterSpace hyper_out, Matrix jacobian,
                Vector offset);

  const std::string& name() const { return name_; }
  const ParameterSpace& hyper_in() const { return in_; }
  const ParameterSpace& hyper_out() const { return out_; }
  const Matrix& jacobian() const { return J_; }
  const Vector& offset() const { return offset_; }
  Eigen::Index in_dim() const { return in_.dim(); }
  Eigen::Index out_dim() const { return out_.dim(); }

  Vector operator()(const Vector& in) const;
  /// True when the image lies strictly inside every bound of hyper_out.
  bool image_inside(const Vector& in) const;

 private:
  std::string name_;
  ParameterSpace in_;
  ParameterSpace out_;
  Matrix J_;
  Vector offset_;
};

/// y -> log10 z with log10 z_i = (y / 2) log10 e; output box (-a, a)^n.
ConstraintMap make_funnel_constraint(int n_local = 9, double a_bound = 4.0);

/// (log10 A, gamma) -> log10 rho; output box from the free spectral spec.
ConstraintMap make_pta_constraint(const PTADataset& ds, const PowerLawSpec& pl, const FreeSpectralSpec& fs);

}  // namespace mss
