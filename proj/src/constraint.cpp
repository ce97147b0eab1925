#include "mss/constraint.hpp"

#include <cmath>
#include <numbers>

#include "mss/errors.hpp"
#include "mss/funnels.hpp"

namespace mss {

ConstraintMap::ConstraintMap(std::string name, ParameterSpace hyper_in, ParameterSpace hyper_out, Matrix jacobian,
                             Vector offset)
    : name_(std::move(name)),
      in_(std::move(hyper_in)),
      out_(std::move(hyper_out)),
      J_(std::move(jacobian)),
      offset_(std::move(offset)) {
  if (J_.rows() != out_.dim() || J_.cols() != in_.dim() || offset_.size() != out_.dim()) {
    throw DimensionMismatch("constraint Jacobian must be out_dim x in_dim");
  }
  if (!(out_.dim() > in_.dim())) throw InvalidArgument("constraint must map into a higher-dimensional space");
  Eigen::FullPivLU<Matrix> lu(J_);
  if (lu.rank() < in_.dim()) throw InvalidArgument("constraint '" + name_ + "' is not injective");
}

Vector ConstraintMap::operator()(const Vector& in) const {
  if (in.size() != in_.dim()) throw DimensionMismatch("constraint input has the wrong dimension");
  return offset_ + J_ * in;
}

bool ConstraintMap::image_inside(const Vector& in) const { return out_.inside((*this)(in)); }

ConstraintMap make_funnel_constraint(int n_local, double a_bound) {
  ParameterSpace in;
  in.add("y", Bound::unbounded(), Block::hyper);
  ParameterSpace out;
  for (int i = 0; i < n_local; ++i) {
    out.add("log10_z_" + std::to_string(i + 1), Bound::interval(-a_bound, a_bound), Block::hyper);
  }
  Matrix J = Matrix::Constant(n_local, 1, 0.5 * std::numbers::log10e);
  return ConstraintMap("funnel", std::move(in), std::move(out), std::move(J), Vector::Zero(n_local));
}

ConstraintMap make_pta_constraint(const PTADataset& ds, const PowerLawSpec& pl, const FreeSpectralSpec& fs) {
  const Vector& f = ds.freqs();
  const double f_ref = pl.reference_frequency(ds);
  // Validates the frequency set (>= 2 distinct bins).
  pta_constraint(0.0, 0.0, f, f_ref);
  ParameterSpace in;
  in.add("log10_A", Bound::interval(pl.log10_A_bounds.first, pl.log10_A_bounds.second), Block::hyper);
  in.add("gamma", Bound::interval(pl.gamma_bounds.first, pl.gamma_bounds.second), Block::hyper);
  ParameterSpace out;
  for (Eigen::Index i = 0; i < f.size(); ++i) {
    out.add("log10_rho_" + std::to_string(i + 1),
            Bound::interval(fs.log10_rho_bounds.first, fs.log10_rho_bounds.second), Block::hyper);
  }
  Matrix J(f.size(), 2);
  for (Eigen::Index i = 0; i < f.size(); ++i) {
    J(i, 0) = 1.0;
    J(i, 1) = -std::log10(f[i] / f_ref);
  }
  return ConstraintMap("pta_power_law", std::move(in), std::move(out), std::move(J), Vector::Zero(f.size()));
}

}  // namespace mss
