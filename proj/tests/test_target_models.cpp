#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <set>

#include "doctest.h"

#include "mss/constraint.hpp"
#include "mss/errors.hpp"
#include "mss/funnels.hpp"
#include "mss/pta_models.hpp"
#include "mss/pta_sim.hpp"

using namespace mss;

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;

DatasetPtr small_dataset(std::uint64_t seed = 3) {
  SimConfig c;
  c.n_samples = 80;
  c.n_freq = 4;
  c.seed = seed;
  return std::make_shared<const PTADataset>(simulate_dataset(c));
}

}  // namespace

TEST_CASE("classic funnel values and symmetries") {
  CHECK(classic_funnel_logp(Vector::Zero(9), 0.0) == doctest::Approx(-10.28800).epsilon(1e-5));
  // Hand evaluation: nine N(0,1) terms plus log N(0; 0, 3).
  CHECK(classic_funnel_logp(Vector::Zero(9), 0.0) ==
        doctest::Approx(-10 * kHalfLog2Pi - std::log(3.0)).epsilon(1e-14));
  Rng rng(1);
  Vector x = std_normal_vector(rng, 9);
  const double y = 0.7;
  const double base = classic_funnel_logp(x, y);
  CHECK(classic_funnel_logp(-x, y) == doctest::Approx(base).epsilon(1e-14));
  Vector p = x;
  std::reverse(p.begin(), p.end());
  CHECK(classic_funnel_logp(p, y) == doctest::Approx(base).epsilon(1e-14));
}

TEST_CASE("generalized funnel values and bounds") {
  const double expect = 9 * -kHalfLog2Pi + 9 * std::log(1.0 / 8.0);
  CHECK(generalized_funnel_logp(Vector::Zero(9), Vector::Zero(9)) == doctest::Approx(expect).epsilon(1e-14));
  Vector z = Vector::Zero(9);
  z[0] = 4.0;
  CHECK_THROWS_AS(generalized_funnel_logp(Vector::Zero(9), z), BoundViolation);
}

TEST_CASE("funnel constraint examples and injectivity") {
  CHECK(funnel_constraint(0.0).cwiseAbs().maxCoeff() == 0.0);
  CHECK(funnel_constraint(2.0)[4] == doctest::Approx(std::numbers::log10e).epsilon(1e-14));
  const Vector v = funnel_constraint(-2 * std::log(10.0));
  CHECK((v.array() + 1.0).abs().maxCoeff() < 1e-14);
  std::set<long long> seen;
  for (int k = 0; k < 1000; ++k) {
    const double y = -10 + 0.02 * k;
    seen.insert(std::llround(funnel_constraint(y)[0] * 1e9));
  }
  CHECK(seen.size() == 1000);
  const ConstraintMap cm = make_funnel_constraint();
  Vector yv(1);
  yv << 1.3;
  CHECK((cm(yv) - funnel_constraint(1.3)).cwiseAbs().maxCoeff() < 1e-15);
  CHECK(cm.image_inside(yv));
  yv << 30.0;
  CHECK_FALSE(cm.image_inside(yv));
}

TEST_CASE("likelihood funnel terms") {
  const Vector x = Vector::Constant(9, 2.0);
  CHECK(funnel_likelihood_term(x) == doctest::Approx(9 * (-std::log(5.0) - kHalfLog2Pi)).epsilon(1e-14));
  const double y = 0.4;
  CHECK(likelihood_funnel_logp(x, y) ==
        doctest::Approx(classic_funnel_logp(x, y) + funnel_likelihood_term(x)).epsilon(1e-14));
  // e^y -> 0: each factor tends to log N(2; 0, 5).
  const double lim = likelihood_funnel_analytic_marginal(-60.0) - log_normal_pdf(-60.0, 0.0, 3.0);
  CHECK(lim == doctest::Approx(9 * log_normal_pdf(2.0, 0.0, 5.0)).epsilon(1e-12));
  for (double yy : {-5.0, -1.0, 0.0, 2.5, 6.0}) {
    const double h = 1e-5;
    const double fd =
        (likelihood_funnel_analytic_marginal(yy + h) - likelihood_funnel_analytic_marginal(yy - h)) / (2 * h);
    CHECK(likelihood_funnel_analytic_marginal_grad(yy) == doctest::Approx(fd).epsilon(1e-6));
  }
}

TEST_CASE("analytic likelihood-funnel marginal matches quadrature over x") {
  // One-coordinate integral by quadrature, times nine.
  const double y = 1.1;
  const double s = std::exp(y / 2);
  double integral = 0;
  const double dx = 1e-3;
  for (double x = -40; x < 40; x += dx) {
    integral += std::exp(log_normal_pdf(x, 0, s) + log_normal_pdf(x, 2, 5)) * dx;
  }
  const double expect = log_normal_pdf(y, 0, 3) + 9 * std::log(integral);
  CHECK(likelihood_funnel_analytic_marginal(y) == doctest::Approx(expect).epsilon(1e-8));
}

TEST_CASE("funnel family gradients at seeded points") {
  ClassicFunnelModel c;
  LikelihoodFunnelModel l;
  GeneralizedFunnelModel g;
  GeneralizedFunnelSpec gs;
  gs.with_likelihood = true;
  GeneralizedFunnelModel gl(gs);
  Rng rng(11);
  for (int k = 0; k < 50; ++k) {
    Vector t = c.draw_prior(rng).value();
    t[9] = std::clamp(t[9], -6.0, 6.0);
    CHECK(check_gradient(c, t) < 1e-5);
    CHECK(check_gradient(l, t) < 1e-5);
  }
  // Moderate log10 z keeps |logp| small enough that central differences
  // resolve every component at h = 1e-5.
  Rng rng_g(1);
  for (int k = 0; k < 50; ++k) {
    Vector u(18);
    for (int i = 0; i < 9; ++i) {
      u[9 + i] = uniform(rng_g, -2, 2);
      u[i] = std::pow(10.0, u[9 + i]) * std_normal(rng_g);
    }
    CHECK(check_gradient(g, u) < 1e-5);
    CHECK(check_gradient(gl, u) < 1e-5);
  }
}

TEST_CASE("pta likelihood and coefficient prior") {
  const auto ds = small_dataset();
  const Vector a0 = Vector::Zero(2 * ds->n_freq());
  CHECK(pta_loglike(*ds, a0) ==
        doctest::Approx(-0.5 * ds->data().squaredNorm() / (ds->sigma() * ds->sigma())).epsilon(1e-12));
  // Data built exactly from coefficients has zero residual.
  Rng rng(2);
  const Vector a = std_normal_vector(rng, 2 * ds->n_freq());
  const PTADataset exact(ds->times(), ds->design() * a, 1.0, ds->n_freq());
  CHECK(std::abs(pta_loglike(exact, a)) < 1e-20);
  const Vector phi = Vector::Constant(ds->n_freq(), 1.0 / (2 * std::numbers::pi));
  CHECK(std::abs(pta_coeff_prior_logp(a0, phi)) < 1e-14);
  CHECK_THROWS_AS(pta_coeff_prior_logp(a0, Vector::Zero(ds->n_freq())), NonPositiveVariance);
}

TEST_CASE("power-law spectrum and constraint") {
  Vector f(3);
  f << 1, 2, 3;
  CHECK((power_law_phi(1.0, 0.0, f, 1.0).array() - 1.0).abs().maxCoeff() < 1e-15);
  Vector f2 = Vector::Constant(3, 2.0);
  CHECK((power_law_phi(4.0, 2.0, f2, 1.0).array() - 1.0).abs().maxCoeff() < 1e-15);
  const Vector dec = power_law_phi(2.0, 1.5, f, 1.0);
  CHECK(dec[0] > dec[1]);
  CHECK(dec[1] > dec[2]);
  CHECK((pta_constraint(0.7, 0.0, f, 1.0).array() - 0.7).abs().maxCoeff() < 1e-15);
  Vector fr(2);
  fr << 1.0, 1.0;
  CHECK_THROWS_AS(pta_constraint(0.0, 1.0, fr, 1.0), DegenerateFrequencies);
  Vector one(2);
  one << 1.0, 3.0;
  CHECK(pta_constraint(0.0, 1.0, one, 1.0)[0] == 0.0);
  // Affine in (log10 A, gamma): superposition at three points.
  const Vector p1 = pta_constraint(0.2, 1.0, f, 1.0), p2 = pta_constraint(-0.6, 3.0, f, 1.0);
  const Vector p3 = pta_constraint(0.5 * 0.2 + 0.5 * -0.6, 0.5 * 1.0 + 0.5 * 3.0, f, 1.0);
  CHECK((p3 - 0.5 * (p1 + p2)).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("pta models compose their parts") {
  const auto ds = small_dataset();
  const PowerLawSpec pl;
  FreeSpectralSpec fs;
  fs.n_freq = ds->n_freq();
  PowerLawModel plm(ds, pl);
  FreeSpectralModel fsm(ds, fs);
  const double fref = pl.reference_frequency(*ds);
  const double hyper_pl = -std::log(4.0) - std::log(7.0);
  const double hyper_fs = -ds->n_freq() * std::log(14.0);
  Rng rng(9);
  for (int k = 0; k < 100; ++k) {
    const double lA = uniform(rng, -1.9, 1.9), g = uniform(rng, 0.1, 6.9);
    const Vector a = std_normal_vector(rng, 2 * ds->n_freq());
    const Vector phi = power_law_phi(std::pow(10.0, lA), g, ds->freqs(), fref);
    const double parts = pta_loglike(*ds, a) + pta_coeff_prior_logp(a, phi);
    CHECK(pta_powerlaw_logp(*ds, a, lA, g, pl) == doctest::Approx(parts + hyper_pl).epsilon(1e-13));
    const Vector rho = pta_constraint(lA, g, ds->freqs(), fref);
    if ((rho.array() > -10).all() && (rho.array() < 4).all()) {
      CHECK(pta_freespectral_logp(*ds, a, rho, fs) - hyper_fs == doctest::Approx(parts).epsilon(1e-13));
    }
  }
  // Gradients of both models and of the marginal model.
  PowerLawMarginalModel mm(ds, pl);
  for (int k = 0; k < 50; ++k) {
    Vector t = plm.draw_prior(rng).value();
    t.head(2) << uniform(rng, -1.5, 1.5), uniform(rng, 0.5, 6.5);
    CHECK(check_gradient(plm, t) < 1e-5);
    Vector u = fsm.draw_prior(rng).value();
    u.head(ds->n_freq()) = u.head(ds->n_freq()).cwiseMax(-9.0).cwiseMin(3.0);
    CHECK(check_gradient(fsm, u) < 1e-5);
    CHECK(check_gradient(mm, t.head(2)) < 1e-5);
  }
}

TEST_CASE("free-spectral permutation covariance") {
  const auto ds = small_dataset();
  // Swap bins 1 and 3 in the design, coefficients and rho together.
  Matrix F = ds->design();
  Rng rng(4);
  const Vector a = std_normal_vector(rng, 8);
  Vector rho10(4);
  rho10 << 0.1, 3.0, 10.0, 0.01;
  Vector ap = a, rp = rho10;
  std::swap(ap[0], ap[4]);
  std::swap(ap[1], ap[5]);
  std::swap(rp[0], rp[2]);
  // The likelihood only sees F a, which is unchanged when columns permute with a.
  Matrix Fp = F;
  Fp.col(0).swap(Fp.col(4));
  Fp.col(1).swap(Fp.col(5));
  CHECK((Fp * ap - F * a).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(pta_coeff_prior_logp(ap, rp) == doctest::Approx(pta_coeff_prior_logp(a, rho10)).epsilon(1e-14));
}

TEST_CASE("pta analytic marginal") {
  const auto ds = small_dataset();
  const PowerLawSpec pl;
  // Zero-signal limit: log N(d; 0, sigma^2 I).
  const double n = static_cast<double>(ds->n_samples());
  const double s2 = ds->sigma() * ds->sigma();
  const double white = -0.5 * ds->data().squaredNorm() / s2 - 0.5 * n * std::log(2 * std::numbers::pi * s2);
  Vector tiny = Vector::Constant(ds->n_freq(), 1e-300);
  CHECK(pta_marginal_logp_phi(*ds, tiny) == doctest::Approx(white).epsilon(1e-10));

  // Dense evaluation of log N(d; 0, sigma^2 I + F phi F^T).
  const double lA = 0.3, g = 3.0;
  const Vector phi = power_law_phi(std::pow(10.0, lA), g, ds->freqs(), pl.reference_frequency(*ds));
  const Matrix C = s2 * Matrix::Identity(ds->n_samples(), ds->n_samples()) +
                   ds->design() * expand_bins(phi).asDiagonal() * ds->design().transpose();
  Eigen::LLT<Matrix> llt(C);
  const double dense = -0.5 * ds->data().dot(llt.solve(ds->data())) -
                       Eigen::MatrixXd(llt.matrixL()).diagonal().array().log().sum() -
                       0.5 * n * std::log(2 * std::numbers::pi);
  CHECK(pta_analytic_marginal_logp(*ds, lA, g, pl) == doctest::Approx(dense).epsilon(1e-10));

  // Cholesky succeeds at seeded hyper-points; gradient matches differences.
  Rng rng(7);
  for (int k = 0; k < 20; ++k) {
    const double a = uniform(rng, -2, 2), gg = uniform(rng, 0, 7);
    Eigen::Vector2d grad;
    const double v = pta_analytic_marginal_logp(*ds, a, gg, pl, &grad);
    CHECK(std::isfinite(v));
    if (a > -1.99 && a < 1.99 && gg > 0.01 && gg < 6.99) {
      const double h = 1e-5;
      const double fa = (pta_analytic_marginal_logp(*ds, a + h, gg, pl) - pta_analytic_marginal_logp(*ds, a - h, gg, pl)) / (2 * h);
      const double fg = (pta_analytic_marginal_logp(*ds, a, gg + h, pl) - pta_analytic_marginal_logp(*ds, a, gg - h, pl)) / (2 * h);
      CHECK(grad[0] == doctest::Approx(fa).epsilon(1e-5).scale(1.0));
      CHECK(grad[1] == doctest::Approx(fg).epsilon(1e-5).scale(1.0));
    }
  }

  // Invariant under reordering the time samples together with the data.
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(ds->n_samples()));
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  Matrix Fr(ds->n_samples(), ds->design().cols());
  Vector dr(ds->n_samples());
  for (Eigen::Index i = 0; i < ds->n_samples(); ++i) {
    Fr.row(i) = ds->design().row(perm[static_cast<std::size_t>(i)]);
    dr[i] = ds->data()[perm[static_cast<std::size_t>(i)]];
  }
  const Matrix Cr = s2 * Matrix::Identity(ds->n_samples(), ds->n_samples()) +
                    Fr * expand_bins(phi).asDiagonal() * Fr.transpose();
  Eigen::LLT<Matrix> lr(Cr);
  const double dense_r = -0.5 * dr.dot(lr.solve(dr)) - Eigen::MatrixXd(lr.matrixL()).diagonal().array().log().sum() -
                         0.5 * n * std::log(2 * std::numbers::pi);
  CHECK(dense_r == doctest::Approx(dense).epsilon(1e-10));
}

TEST_CASE("pta analytic marginal matches importance sampling over coefficients") {
  const auto ds = small_dataset();
  const PowerLawSpec pl;
  const double lA = 0.2, g = 2.5;
  const Vector phi = power_law_phi(std::pow(10.0, lA), g, ds->freqs(), pl.reference_frequency(*ds));
  // Proposal: the exact conditional widened by 1.2.
  const GaussianConditional gc = cprs_conditional_moments(*ds, phi);
  const int n = 200000;
  Rng rng(2);
  const Eigen::Index D = gc.mean.size();
  const double widen = 1.2;
  std::vector<double> lw(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) {
    const Vector e = std_normal_vector(rng, D);
    const Vector a = gc.mean + widen * gc.chol * e;
    const double log_q = -0.5 * e.squaredNorm() - gc.log_det_chol - D * std::log(widen) - D * 0.91893853320467274;
    lw[static_cast<std::size_t>(k)] = pta_loglike(*ds, a) + pta_coeff_prior_logp(a, phi) - log_q;
  }
  const double m = *std::max_element(lw.begin(), lw.end());
  double s = 0, s2 = 0;
  for (double v : lw) {
    const double w = std::exp(v - m);
    s += w;
    s2 += w * w;
  }
  const double mean = s / n;
  const double se = std::sqrt(std::max(0.0, s2 / n - mean * mean) / n);
  const double est = m + std::log(mean);
  // pta_loglike drops the white-noise normalization.
  const double n_t = static_cast<double>(ds->n_samples());
  const double norm = -0.5 * n_t * std::log(2 * std::numbers::pi * ds->sigma() * ds->sigma());
  const double exact = pta_analytic_marginal_logp(*ds, lA, g, pl);
  CHECK(std::abs(est + norm - exact) < 3 * se / mean + 1e-12);

  // With the exact conditional as proposal every weight equals the marginal.
  Rng rng_exact(3);
  for (int k = 0; k < 20; ++k) {
    const Vector e = std_normal_vector(rng_exact, D);
    const Vector a = gc.mean + gc.chol * e;
    const double log_q = -0.5 * e.squaredNorm() - gc.log_det_chol - D * 0.91893853320467274;
    CHECK(pta_loglike(*ds, a) + pta_coeff_prior_logp(a, phi) - log_q + norm == doctest::Approx(exact).epsilon(1e-11));
  }
}
