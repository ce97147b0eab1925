#include <cmath>
#include <memory>

#include "doctest.h"

#include "mss/diagnostics.hpp"
#include "mss/errors.hpp"
#include "mss/funnels.hpp"
#include "mss/hmc.hpp"
#include "mss/pta_models.hpp"
#include "mss/pta_sim.hpp"
#include "mss/reparam.hpp"
#include "test_support.hpp"

using namespace mss;

namespace {

DatasetPtr small_dataset() {
  SimConfig c;
  c.n_samples = 80;
  c.n_freq = 4;
  c.seed = 3;
  return std::make_shared<const PTADataset>(simulate_dataset(c));
}

struct NamedTarget {
  std::string name;
  ReparamPtr target;
};

std::vector<NamedTarget> all_targets() {
  const auto ds = small_dataset();
  auto classic = std::make_shared<ClassicFunnelModel>();
  auto like = std::make_shared<LikelihoodFunnelModel>();
  auto gen = std::make_shared<GeneralizedFunnelModel>();
  auto pl = std::make_shared<PowerLawModel>(ds);
  FreeSpectralSpec fs;
  fs.n_freq = ds->n_freq();
  auto free = std::make_shared<FreeSpectralModel>(ds, fs);
  return {{"classic ns", ns_target(classic)},  {"classic prs", prs_target(classic)},
          {"likelihood ns", ns_target(like)},  {"likelihood prs", prs_target(like)},
          {"likelihood cprs", cprs_target(like)}, {"generalized ns", ns_target(gen)},
          {"generalized prs", prs_target(gen)}, {"power-law ns", ns_target(pl)},
          {"power-law prs", prs_target(pl)},   {"power-law cprs", cprs_target(pl)},
          {"free spectral ns", ns_target(free)}, {"free spectral prs", prs_target(free)},
          {"free spectral cprs", cprs_target(free)}};
}

// Inner target with the hyper-parameters held fixed.
class FixedHyper final : public TargetModel {
 public:
  FixedHyper(ReparamPtr inner, Vector hyper) : inner_(std::move(inner)), hyper_(std::move(hyper)) {
    for (Eigen::Index i = 0; i < inner_->space().dim() - hyper_.size(); ++i) {
      space_.add("a_hat_" + std::to_string(i), Bound::unbounded(), Block::local);
    }
  }
  const ParameterSpace& space() const override { return space_; }
  double log_density_grad(const Vector& a_hat, Vector& grad) const override {
    Vector u(hyper_.size() + a_hat.size());
    u << hyper_, a_hat;
    Vector g;
    const double lp = inner_->log_density_grad(u, g);
    grad = g.tail(a_hat.size());
    return lp;
  }

 private:
  ReparamPtr inner_;
  Vector hyper_;
  ParameterSpace space_;
};

}  // namespace

TEST_CASE("prior reparameterization of the classic funnel") {
  auto f = std::make_shared<ClassicFunnelModel>();
  const auto prs = prs_target(f);
  const Vector zero = Vector::Zero(10);
  CHECK(prs->log_density(zero) == doctest::Approx(-9.189385).epsilon(1e-6));
  CHECK(prs->log_density(zero) == doctest::Approx(f->log_density(zero) + std::log(3.0)).epsilon(1e-12));
  Vector u = Vector::Zero(10);
  u[9] = 1.0;
  CHECK(prs->pushforward(u)[9] == doctest::Approx(3.0).epsilon(1e-15));
  u[0] = 2.0;
  CHECK(prs->pushforward(u)[0] == doctest::Approx(2.0 * std::exp(1.5)).epsilon(1e-14));
}

TEST_CASE("inner density minus log-Jacobian equals the native density") {
  for (const auto& [name, target] : all_targets()) {
    CAPTURE(name);
    Rng rng(31);
    for (int k = 0; k < 100; ++k) {
      const Vector u = target->draw_prior(rng).value();
      const Vector theta = target->pushforward(u);
      const double native = target->native().log_density(theta);
      const double inner = target->log_density(u);
      CHECK(std::abs(inner - target->log_jacobian(u) - native) < 1e-8 * std::max(1.0, std::abs(native)));
    }
  }
}

TEST_CASE("inner gradients match finite differences") {
  for (const auto& [name, target] : all_targets()) {
    CAPTURE(name);
    Rng rng(32);
    for (int k = 0; k < 20; ++k) {
      Vector u = target->draw_prior(rng).value();
      // Keep hyper-parameters away from the stiffest corners of the box.
      const auto& sp = target->space();
      for (Eigen::Index i = 0; i < u.size(); ++i) {
        if (sp[i].bound.is_bounded()) {
          const double lo = sp[i].bound.lower, hi = sp[i].bound.upper;
          const double pad = 0.2 * (hi - lo);
          u[i] = std::clamp(u[i], lo + pad, hi - pad);
          // Far below the noise floor the rho gradient is pure roundoff.
          if (sp[i].name.starts_with("log10_rho")) u[i] = std::clamp(u[i], -3.0, 1.2);
        } else if (sp[i].block == Block::hyper) {
          u[i] = std::clamp(u[i], -1.5, 1.5);
        }
      }
      CHECK(check_gradient(*target, u) < 1e-5);
    }
  }
}

TEST_CASE("naive wrapper is the identity") {
  auto g = std::make_shared<test::DiagGaussian>(test::DiagGaussian::standard(10));
  const auto ns = ns_target(g);
  Rng rng(2);
  for (int k = 0; k < 20; ++k) {
    const Vector x = std_normal_vector(rng, 10);
    CHECK(ns->log_density(x) == g->log_density(x));
    CHECK(ns->pushforward(x) == x);
  }
  HMCConfig cfg;
  cfg.n_warmup = 200;
  cfg.n_samples = 500;
  CHECK(sample(ns, cfg).draws == sample(g, cfg).draws);
  CHECK_THROWS_AS(make_scheme_target(Scheme::cprs, g), UnsupportedModel);
  CHECK_THROWS_AS(prs_target(g), UnsupportedModel);
  CHECK(parse_scheme("cprs") == Scheme::cprs);
  CHECK(scheme_name(Scheme::prs) == "prs");
  CHECK_THROWS_AS(parse_scheme("xyz"), InvalidArgument);
}

TEST_CASE("conditional moments") {
  const auto ds = small_dataset();
  const Matrix& F = ds->design();
  const Vector& d = ds->data();
  const double s = ds->sigma();
  const Matrix FtF = F.transpose() * F;
  const Vector Ftd = F.transpose() * d;
  Vector phi(4);
  phi << 3.0, 0.5, 0.02, 1e-3;

  const GaussianConditional c = cprs_conditional_moments(*ds, phi);
  const Vector inv_phi = expand_bins(phi).cwiseInverse();
  const Matrix P = FtF / (s * s) + Matrix(inv_phi.asDiagonal());
  CHECK((P * c.cov - Matrix::Identity(8, 8)).cwiseAbs().maxCoeff() < 1e-8);
  CHECK((c.chol * c.chol.transpose() - c.cov).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((c.cov - c.cov.transpose()).cwiseAbs().maxCoeff() < 1e-14);
  CHECK(c.chol.triangularView<Eigen::StrictlyUpper>().toDenseMatrix().cwiseAbs().maxCoeff() == 0.0);
  CHECK(c.log_det_chol == doctest::Approx(c.chol.diagonal().array().log().sum()).epsilon(1e-12));
  CHECK((c.mean - c.cov * Ftd / (s * s)).cwiseAbs().maxCoeff() < 1e-10);

  // No signal support: the prior comes back.
  const GaussianConditional z = cprs_conditional_moments(Matrix::Zero(8, 8), Vector::Zero(8), s, phi);
  CHECK(z.mean.cwiseAbs().maxCoeff() == 0.0);
  CHECK((z.cov - Matrix(expand_bins(phi).asDiagonal())).cwiseAbs().maxCoeff() < 1e-15);

  // Flat prior: least squares.
  const GaussianConditional ls = cprs_conditional_moments(*ds, Vector::Constant(4, 1e12));
  const Vector beta = FtF.ldlt().solve(Ftd);
  CHECK((ls.mean - beta).cwiseAbs().maxCoeff() < 1e-6 * beta.cwiseAbs().maxCoeff());

  CHECK_THROWS(cprs_conditional_moments(*ds, Vector::Constant(4, -1.0)));
}

TEST_CASE("conditional reparameterization standardizes the coefficients") {
  const auto ds = small_dataset();
  auto pl = std::make_shared<PowerLawModel>(ds);
  const auto cprs = cprs_target(pl);
  Vector eta(2);
  eta << 0.3, 3.0;
  Rng rng(4);
  Vector u(10);
  u << eta, Vector::Zero(8);
  const double at_zero = cprs->log_density(u);
  for (int k = 0; k < 10; ++k) {
    const Vector a_hat = std_normal_vector(rng, 8);
    u.tail(8) = a_hat;
    CHECK(cprs->log_density(u) - at_zero == doctest::Approx(-0.5 * a_hat.squaredNorm()).epsilon(1e-10));
  }

  auto fixed = std::make_shared<FixedHyper>(cprs, eta);
  HMCConfig cfg;
  cfg.n_warmup = 1000;
  cfg.n_samples = 20000;
  cfg.seed = 6;
  const Chain c = sample(fixed, cfg);
  for (int i = 0; i < 8; ++i) {
    const Vector x = c.draws.col(i);
    const double m = x.mean();
    CHECK(std::abs(m) < 0.05);
    CHECK(std::abs((x.array() - m).square().mean() - 1.0) < 0.05);
  }
}

TEST_CASE("prior reparameterized sampling of the classic funnel") {
  auto f = std::make_shared<ClassicFunnelModel>();
  const auto prs = prs_target(f);
  HMCConfig cfg;
  cfg.n_warmup = 1000;
  cfg.n_samples = 2500;
  cfg.seed = 3;
  std::vector<Chain> chains;
  for (const auto& inner : sample_chains(prs, cfg, 4)) chains.push_back(push_chain(*prs, inner));
  const Matrix d = pooled_draws(chains);
  CHECK(d.rows() == 10000);
  CHECK(chains[0].names.back() == "y");
  const double ks = ks_statistic(d.col(9), [](double y) { return normal_cdf(y, 0, 3); });
  CHECK(ks < 0.03);
  for (const auto& c : chains) {
    CHECK(c.divergences == 0);
    CHECK(c.logp[17] == doctest::Approx(f->log_density(c.draws.row(17).transpose())).epsilon(1e-12));
  }
}

TEST_CASE("prior and conditional reparameterizations agree on the likelihood funnel") {
  auto like = std::make_shared<LikelihoodFunnelModel>();
  HMCConfig cfg;
  cfg.n_warmup = 1000;
  cfg.n_samples = 5000;
  cfg.seed = 8;
  std::vector<CoordinateSummary> y_sum;
  std::vector<Vector> y_draws;
  for (const auto& target : {prs_target(like), cprs_target(like)}) {
    std::vector<Chain> chains;
    for (const auto& inner : sample_chains(target, cfg, 4)) chains.push_back(push_chain(*target, inner));
    y_sum.push_back(summarize(chains).back());
    y_draws.push_back(pooled_draws(chains).col(9));
  }
  CHECK(y_sum[0].name == "y");
  const double se = std::sqrt(y_sum[0].sd * y_sum[0].sd / y_sum[0].ess + y_sum[1].sd * y_sum[1].sd / y_sum[1].ess);
  CHECK(std::abs(y_sum[0].mean - y_sum[1].mean) < 4 * se);
  CHECK(std::abs(y_sum[0].sd / y_sum[1].sd - 1.0) < 0.05);
  CHECK(ks_two_sample(y_draws[0], y_draws[1]) < 0.05);
}
