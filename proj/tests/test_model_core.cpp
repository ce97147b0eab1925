#include <cmath>
#include <memory>

#include "doctest.h"

#include "mss/errors.hpp"
#include "mss/funnels.hpp"
#include "mss/model.hpp"
#include "mss/pipeline.hpp"
#include "test_support.hpp"

using namespace mss;

TEST_CASE("parameter space layout and checks") {
  ParameterSpace s;
  s.add("a", Bound::unbounded(), Block::local);
  s.add("b", Bound::interval(-4, 4), Block::hyper);
  s.add("c", Bound::unbounded(), Block::hyper);
  CHECK(s.dim() == 3);
  CHECK(s.names() == std::vector<std::string>{"a", "b", "c"});
  CHECK(s.indices(Block::hyper) == std::vector<Eigen::Index>{1, 2});
  CHECK(s.index_of("c").value() == 2);
  CHECK_FALSE(s.index_of("z").has_value());
  CHECK_THROWS_AS(s.add("a", Bound::unbounded(), Block::local), InvalidArgument);
  CHECK_THROWS_AS(Bound::interval(1, 1), InvalidArgument);
  Vector t(3);
  t << 0, 4, 0;
  CHECK_THROWS_AS(s.check_inside(t), BoundViolation);
  t[1] = 3.9;
  CHECK(s.inside(t));
  CHECK_FALSE(s.unbounded_copy()[1].bound.is_bounded());
}

TEST_CASE("to_unconstrained examples") {
  ParameterSpace s;
  s.add("u", Bound::unbounded(), Block::hyper);
  Vector t(1);
  t << 1.5;
  auto r = to_unconstrained(s, t);
  CHECK(r.theta_u[0] == 1.5);
  CHECK(r.logdet == 0.0);

  ParameterSpace b;
  b.add("b", Bound::interval(-4, 4), Block::hyper);
  t << 0.0;
  r = to_unconstrained(b, t);
  CHECK(r.theta_u[0] == doctest::Approx(0.0).epsilon(1e-15));
  // Central difference of the forward map at 0.
  const auto T = Transform::logit_affine(-4, 4);
  const double h = 1e-6;
  const double fd = (T.forward(h) - T.forward(-h)) / (2 * h);
  CHECK(r.logdet == doctest::Approx(std::log(fd)).epsilon(1e-8));

  ParameterSpace unit;
  unit.add("p", Bound::interval(0, 1), Block::hyper);
  t << 1.0;
  CHECK_THROWS_AS(to_unconstrained(unit, t), BoundViolation);
}

TEST_CASE("transform round trips and Jacobian consistency") {
  const std::vector<Transform> ts = {Transform::identity(), Transform::affine(2.5, -1.0), Transform::log10(),
                                     Transform::logit_affine(-4, 4), Transform::logit_affine(0, 1)};
  const std::vector<std::vector<double>> xs = {{-3, 0, 2}, {-3, 0, 2}, {0.01, 1, 50}, {-3.9, 0.3, 3.5}, {0.001, 0.5, 0.97}};
  for (std::size_t k = 0; k < ts.size(); ++k) {
    for (double x : xs[k]) {
      const double u = ts[k].forward(x);
      CHECK(std::abs(ts[k].inverse(u) - x) <= 1e-12 * std::max(1.0, std::abs(x)));
      CHECK(std::abs(ts[k].log_abs_det_forward(x) + ts[k].log_abs_det_inverse(u)) < 1e-10);
      const double h = 1e-6;
      const double fd = (ts[k].inverse(u + h) - ts[k].inverse(u - h)) / (2 * h);
      CHECK(ts[k].inverse_derivative(u) == doctest::Approx(fd).epsilon(1e-6));
      const double fd2 = (ts[k].log_abs_det_inverse(u + h) - ts[k].log_abs_det_inverse(u - h)) / (2 * h);
      CHECK(ts[k].inverse_log_det_gradient(u) == doctest::Approx(fd2).epsilon(1e-5).scale(1.0));
    }
  }
}

TEST_CASE("space round trip through unconstrained coordinates") {
  ParameterSpace s;
  s.add("a", Bound::unbounded(), Block::local);
  s.add("b", Bound::interval(-4, 4), Block::hyper);
  s.add("c", Bound::interval(0, 7), Block::hyper);
  Rng rng(3);
  for (int k = 0; k < 50; ++k) {
    Vector t(3);
    t << std_normal(rng), uniform(rng, -3.99, 3.99), uniform(rng, 0.01, 6.99);
    const auto u = to_unconstrained(s, t);
    const auto back = from_unconstrained(s, u.theta_u);
    CHECK((back.theta - t).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(std::abs(u.logdet + back.logdet) < 1e-10);
  }
}

TEST_CASE("unconstrained target") {
  // Unbounded model: pointwise identity.
  auto g = std::make_shared<test::DiagGaussian>(test::DiagGaussian::standard(3));
  auto ug = unconstrained_target(g);
  Vector x(3);
  x << 0.3, -1.2, 2.0;
  CHECK(ug->log_density(x) == g->log_density(x));

  // Uniform(-4, 4): mass preserved under the change of variables.
  ParameterSpace box;
  box.add("b", Bound::interval(-4, 4), Block::hyper);
  auto uni = std::make_shared<UniformBoxPrior>(box);
  auto uu = unconstrained_target(uni);
  double mass_u = 0;
  const double du = 1e-3;
  for (double u = -40; u < 40; u += du) {
    Vector v(1);
    v << u + 0.5 * du;
    mass_u += std::exp(uu->log_density(v)) * du;
  }
  CHECK(mass_u == doctest::Approx(1.0).epsilon(1e-6));

  // Gradients on a mixed-bound model.
  auto gen = std::make_shared<GeneralizedFunnelModel>();
  auto ugen = unconstrained_target(gen);
  Rng rng(5);
  for (int k = 0; k < 20; ++k) {
    Vector t(18);
    for (int i = 0; i < 9; ++i) {
      t[9 + i] = uniform(rng, -2, 2);
      t[i] = std::pow(10.0, t[9 + i]) * std_normal(rng);
    }
    const Vector u = std::static_pointer_cast<const UnconstrainedTarget>(ugen)->to_sampling(t);
    CHECK(check_gradient(*ugen, u) < 1e-5);
  }
}

TEST_CASE("check_gradient examples") {
  auto g = test::DiagGaussian::standard(4);
  CHECK(check_gradient(g, Vector::Zero(4)) < 1e-9);
  ClassicFunnelModel f;
  Vector t = Vector::Zero(10);
  t[9] = 1.0;
  CHECK(check_gradient(f, t, 1e-5) < 1e-5);
  ParameterSpace box;
  box.add("b", Bound::interval(-4, 4), Block::hyper);
  UniformBoxPrior uni(box);
  Vector edge(1);
  edge << 4.0;
  CHECK_THROWS_AS(check_gradient(uni, edge), NonFiniteDensity);
}
