#include <cmath>
#include <fstream>
#include <sstream>

#include "doctest.h"

#include "mss/errors.hpp"
#include "mss/flow.hpp"
#include "mss/kde.hpp"
#include "mss/random.hpp"
#include "test_support.hpp"

using namespace mss;

namespace {

constexpr double kLog2Pi = 1.83787706640934548356;

// Random conditioner weights including the output layer, so every coupling
// acts non-trivially.
FlowModel random_flow(int layers, int width, std::uint64_t seed, const Standardizer& st) {
  TrainConfig cfg;
  cfg.n_layers = layers;
  cfg.hidden_width = width;
  cfg.seed = seed;
  FlowModel f = init_flow(st, cfg);
  Rng rng(seed + 100);
  Vector p = flow_pack_params(f);
  for (Eigen::Index i = 0; i < p.size(); ++i) p[i] = 0.3 * std_normal(rng);
  flow_unpack_params(f, p);
  return f;
}

Matrix correlated_normal(int n, double rho, std::uint64_t seed) {
  Rng rng(seed);
  Matrix X(n, 2);
  for (int r = 0; r < n; ++r) {
    const double a = std_normal(rng), b = std_normal(rng);
    X(r, 0) = a;
    X(r, 1) = rho * a + std::sqrt(1 - rho * rho) * b;
  }
  return X;
}

double bivariate_logp(const Vector& x, double rho) {
  const double q = (x[0] * x[0] - 2 * rho * x[0] * x[1] + x[1] * x[1]) / (1 - rho * rho);
  return -kLog2Pi - 0.5 * std::log(1 - rho * rho) - 0.5 * q;
}

TrainConfig small_train_config() {
  TrainConfig cfg;
  cfg.n_layers = 4;
  cfg.hidden_width = 32;
  cfg.max_epochs = 60;
  cfg.patience = 10;
  cfg.seed = 5;
  return cfg;
}

}  // namespace

TEST_CASE("identity flow evaluates the base density") {
  const FlowModel f = make_identity_flow(2, 4, 8, identity_standardizer(2));
  CHECK(flow_log_density(f, Vector::Zero(2)).logp == doctest::Approx(-1.837877).epsilon(1e-6));
  const FlowEval e = flow_log_density(f, Vector::Zero(2));
  CHECK(e.grad.cwiseAbs().maxCoeff() == 0.0);
  Vector x(2);
  x << 0.7, -1.3;
  CHECK(flow_log_density_value(f, x) == doctest::Approx(-kLog2Pi - 0.5 * x.squaredNorm()).epsilon(1e-14));
  CHECK_THROWS_AS(flow_log_density(f, Vector::Zero(3)), DimensionMismatch);

  const Matrix d = flow_sample(f, 20000, 3);
  CHECK(d.rows() == 20000);
  for (int i = 0; i < 2; ++i) {
    const Vector c = d.col(i);
    CHECK(std::abs(c.mean()) < 0.03);
    CHECK(std::abs((c.array() - c.mean()).square().mean() - 1.0) < 0.04);
  }
  CHECK(flow_sample(f, 10, 9) == flow_sample(f, 10, 9));
  CHECK_FALSE(flow_sample(f, 10, 9) == flow_sample(f, 10, 10));
}

TEST_CASE("flow gradients, invertibility and log-det consistency") {
  Rng rng(7);
  Matrix train(500, 3);
  for (int r = 0; r < 500; ++r) {
    train(r, 0) = 2 + 3 * std_normal(rng);
    train(r, 1) = uniform(rng, -4, 4);
    train(r, 2) = std::exp(std_normal(rng));
  }
  const std::vector<Bound> support = {Bound::unbounded(), Bound::interval(-4, 4), Bound::unbounded()};
  for (int bins : {0, 32}) {
    CAPTURE(bins);
    const Standardizer st = fit_standardizer(train, support, bins, 2);
    const FlowModel f = random_flow(4, 8, 11, st);
    const FlowTarget target(f, {"a", "b", "c"});
    for (int k = 0; k < 50; ++k) {
      const Vector x = train.row(k).transpose();
      const FlowEval e = flow_log_density(f, x);
      CHECK(std::isfinite(e.logp));
      // Central differences, compared with a floor for tiny components.
      const double h = 1e-6;
      for (int i = 0; i < 3; ++i) {
        Vector p = x, m = x;
        p[i] += h;
        m[i] -= h;
        const double fd = (flow_log_density_value(f, p) - flow_log_density_value(f, m)) / (2 * h);
        CHECK(std::abs(fd - e.grad[i]) < 1e-4 * std::max(1.0, std::abs(e.grad[i])));
      }
      Vector g;
      CHECK(target.log_density_grad(x, g) == e.logp);
    }

    // Round trip on 1000 points of the data space.
    const Matrix X = train.topRows(500);
    const Matrix back = flow_from_base(f, flow_to_base(f, X));
    CHECK((back - X).cwiseAbs().maxCoeff() < 1e-8);
    const Matrix Z = Matrix::NullaryExpr(1000, 3, [&]() { return 0.9 * std_normal(rng); });
    CHECK((flow_to_base(f, flow_from_base(f, Z)) - Z).cwiseAbs().maxCoeff() < 1e-8);

    // log|det d x / d z| at z equals base_logp(z) - logp(x(z)).
    for (int k = 0; k < 10; ++k) {
      const Matrix z = Z.row(k);
      const Vector x = flow_from_base(f, z).row(0).transpose();
      Matrix J(3, 3);
      const double h = 1e-6;
      for (int j = 0; j < 3; ++j) {
        Matrix zp = z, zm = z;
        zp(0, j) += h;
        zm(0, j) -= h;
        J.col(j) = (flow_from_base(f, zp) - flow_from_base(f, zm)).row(0).transpose() / (2 * h);
      }
      const double log_det_fwd = std::log(std::abs(J.determinant()));
      const double base = -1.5 * kLog2Pi - 0.5 * z.squaredNorm();
      CHECK(std::abs(log_det_fwd + (flow_log_density_value(f, x) - base)) < 1e-6);
    }
    for (const auto& draw : flow_sample(f, 200, 4).rowwise()) {
      CHECK(std::isfinite(flow_log_density_value(f, draw.transpose())));
    }
  }
}

TEST_CASE("parameter gradient of the training objective") {
  Rng rng(2);
  const Matrix X = Matrix::NullaryExpr(64, 2, [&]() { return std_normal(rng); });
  const FlowModel f = random_flow(3, 6, 3, fit_standardizer(X));
  Vector grad;
  flow_mean_logp_param_grad(f, X, grad);
  const Vector p0 = flow_pack_params(f);
  CHECK(grad.size() == p0.size());
  CHECK(static_cast<std::size_t>(p0.size()) == f.n_params());
  auto mean_logp = [&](const Vector& p) {
    FlowModel g = f;
    flow_unpack_params(g, p);
    return flow_log_density_batch(g, X).mean();
  };
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < p0.size(); i += 7) {
    Vector pp = p0, pm = p0;
    pp[i] += h;
    pm[i] -= h;
    const double fd = (mean_logp(pp) - mean_logp(pm)) / (2 * h);
    CHECK(std::abs(fd - grad[i]) < 1e-5 * std::max(1.0, std::abs(grad[i])));
  }
}

TEST_CASE("flow files") {
  Rng rng(12);
  const Matrix X = Matrix::NullaryExpr(300, 2, [&]() { return std_normal(rng); });
  const FlowModel f = random_flow(4, 8, 13, fit_standardizer(X, {Bound::interval(-6, 6), Bound::unbounded()}, 16, 2));
  const auto dir = test::temp_dir("flow");
  save_flow(f, dir / "flow.json");
  const FlowModel back = load_flow(dir / "flow.json");
  for (int k = 0; k < 100; ++k) {
    const Vector x = X.row(k).transpose();
    CHECK(std::abs(flow_log_density_value(back, x) - flow_log_density_value(f, x)) < 1e-12);
  }
  json j = read_json(dir / "flow.json");
  CHECK(j["version"] == FlowModel::kVersion);
  CHECK(j["dim"] == 2);
  j["version"] = 99;
  write_json(dir / "v99.json", j);
  CHECK_THROWS_AS(load_flow(dir / "v99.json"), VersionMismatch);
  std::stringstream ss;
  ss << std::ifstream(dir / "flow.json").rdbuf();
  const std::string text = ss.str();
  std::ofstream(dir / "trunc.json") << text.substr(0, text.size() / 3);
  CHECK_THROWS_AS(load_flow(dir / "trunc.json"), FormatError);
}

TEST_CASE("marginal Gaussianization step") {
  Rng rng(5);
  Vector x(4000);
  for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = std::exp(0.5 * std_normal(rng));
  const MarginalCdf c = fit_marginal_cdf(x, 128);
  CHECK(c.weights.sum() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(c.bandwidth > 0);
  double prev = -1e300;
  for (double w = -1.0; w < 8.0; w += 0.01) {
    const MarginalEval e = marginal_forward(c, w);
    CHECK(e.m > prev);
    prev = e.m;
    CHECK(std::abs(marginal_inverse(c, e.m) - w) < 1e-8 * std::max(1.0, std::abs(w)));
    const double h = 1e-6;
    const double fd = (marginal_forward(c, w + h).m - marginal_forward(c, w - h).m) / (2 * h);
    CHECK(e.dm == doctest::Approx(fd).epsilon(1e-5));
    CHECK(e.log_dm == doctest::Approx(std::log(e.dm)).epsilon(1e-12));
    const double fd2 = (marginal_forward(c, w + h).log_dm - marginal_forward(c, w - h).log_dm) / (2 * h);
    CHECK(e.dlog_dm == doctest::Approx(fd2).epsilon(1e-4).scale(1.0));
  }
  // Far tails stay finite and monotone.
  CHECK(std::isfinite(marginal_forward(c, -50.0).log_dm));
  CHECK(marginal_forward(c, -50.0).m < marginal_forward(c, -40.0).m);
  CHECK(std::isfinite(marginal_forward(c, 200.0).m));
  // The transformed sample is close to standard normal.
  Vector m(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) m[i] = marginal_forward(c, x[i]).m;
  CHECK(std::abs(m.mean()) < 0.05);
  CHECK(std::abs(std::sqrt((m.array() - m.mean()).square().mean()) - 1.0) < 0.05);
  CHECK_THROWS_AS(fit_marginal_cdf(Vector::Zero(1), 16), TooFewSamples);
}

TEST_CASE("serial and parallel batch evaluation agree") {
  Rng rng(3);
  const Matrix X = Matrix::NullaryExpr(2000, 2, [&]() { return std_normal(rng); });
  const FlowModel f = random_flow(4, 16, 21, fit_standardizer(X, {}, 32, 2));
  CHECK(flow_log_density_batch(f, X) == flow_log_density_batch_serial(f, X));
}

TEST_CASE("training on Gaussians matches the closed form") {
  for (double rho : {0.0, 0.8}) {
    CAPTURE(rho);
    const Matrix X = correlated_normal(20000, rho, 40 + static_cast<std::uint64_t>(10 * rho));
    const TrainResult tr = train_flow(X, small_train_config());
    const Matrix H = correlated_normal(2000, rho, 99);
    const Vector lp = flow_log_density_batch(tr.flow, H);
    double err = 0;
    for (Eigen::Index r = 0; r < H.rows(); ++r) err += std::abs(lp[r] - bivariate_logp(H.row(r).transpose(), rho));
    err /= static_cast<double>(H.rows());
    CHECK(err < 0.05);

    const auto& best = tr.history.best_val_logp;
    CHECK_FALSE(best.empty());
    for (std::size_t i = 1; i < best.size(); ++i) CHECK(best[i] >= best[i - 1]);
    CHECK(tr.history.best_epoch >= 0);

    // Normalization over a box holding 99.99% of flow draws.
    const Matrix D = flow_sample(tr.flow, 20000, 7);
    Vector lo = D.colwise().minCoeff().transpose(), hi = D.colwise().maxCoeff().transpose();
    lo.array() -= 1.0;
    hi.array() += 1.0;
    const int n = 300;
    const double dx = (hi[0] - lo[0]) / n, dy = (hi[1] - lo[1]) / n;
    double total = 0;
    for (int i = 0; i <= n; ++i) {
      for (int j = 0; j <= n; ++j) {
        Vector p(2);
        p << lo[0] + i * dx, lo[1] + j * dy;
        const double w = (i == 0 || i == n ? 0.5 : 1.0) * (j == 0 || j == n ? 0.5 : 1.0);
        total += w * std::exp(flow_log_density_value(tr.flow, p));
      }
    }
    total *= dx * dy;
    CHECK(total > 0.98);
    CHECK(total < 1.02);
  }
}

TEST_CASE("training is deterministic and validates its input") {
  const Matrix X = correlated_normal(2000, 0.5, 1);
  TrainConfig cfg = small_train_config();
  cfg.max_epochs = 5;
  const TrainResult a = train_flow(X, cfg);
  const TrainResult b = train_flow(X, cfg);
  CHECK(flow_pack_params(a.flow) == flow_pack_params(b.flow));
  CHECK(a.history.train_logp == b.history.train_logp);
  CHECK_THROWS_AS(train_flow(X.topRows(3), cfg), TooFewSamples);
  Matrix bad = X;
  bad(4, 1) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(train_flow(bad, cfg), NonFiniteLoss);
  TrainConfig neg = cfg;
  neg.learn_rate = -1;
  CHECK_THROWS_AS(neg.validate(), InvalidArgument);
  CHECK(TrainConfig::from_json(cfg.to_json()).to_json() == cfg.to_json());
}

TEST_CASE("training on a uniform box gives a flat density") {
  Rng rng(8);
  Matrix X(20000, 2);
  for (Eigen::Index r = 0; r < X.rows(); ++r) {
    X(r, 0) = uniform(rng, -4, 4);
    X(r, 1) = uniform(rng, -4, 4);
  }
  const std::vector<Bound> box(2, Bound::interval(-4, 4));
  const TrainResult tr = train_flow(X, small_train_config(), box);
  std::vector<double> vals;
  for (double a = -3.5; a <= 3.5; a += 0.25) {
    for (double b = -3.5; b <= 3.5; b += 0.25) {
      Vector p(2);
      p << a, b;
      vals.push_back(flow_log_density_value(tr.flow, p));
    }
  }
  const Vector v = Eigen::Map<Vector>(vals.data(), static_cast<Eigen::Index>(vals.size()));
  const double sd = std::sqrt((v.array() - v.mean()).square().mean());
  CHECK(sd < 0.1);
  CHECK(v.mean() == doctest::Approx(-std::log(64.0)).epsilon(0.02));
}

TEST_CASE("kernel density estimate") {
  Matrix one = Matrix::Zero(1, 1);
  const KDEModel k1 = make_kde(one, Vector::Ones(1));
  CHECK(kde_log_density(k1, Vector::Zero(1)) == doctest::Approx(-0.918939).epsilon(1e-6));

  Rng rng(4);
  Matrix half = Matrix::NullaryExpr(25, 2, [&]() { return std_normal(rng); });
  Matrix sym(50, 2);
  sym << half, -half;
  const KDEModel ks = make_kde(sym);
  for (int k = 0; k < 20; ++k) {
    const Vector x = std_normal_vector(rng, 2);
    CHECK(kde_log_density(ks, x) == doctest::Approx(kde_log_density(ks, -x)).epsilon(1e-12));
  }

  const Matrix S = Matrix::NullaryExpr(10, 2, [&]() { return std_normal(rng); });
  Vector bw(2);
  bw << 0.4, 0.7;
  const KDEModel kb = make_kde(S, bw);
  for (int k = 0; k < 20; ++k) {
    const Vector x = 2.0 * std_normal_vector(rng, 2);
    double sum = 0;
    for (int r = 0; r < 10; ++r) {
      double lk = 0;
      for (int i = 0; i < 2; ++i) {
        const double z = (x[i] - S(r, i)) / bw[i];
        lk += -0.5 * z * z - 0.5 * std::log(2 * std::numbers::pi) - std::log(bw[i]);
      }
      sum += std::exp(lk);
    }
    CHECK(kde_log_density(kb, x) == doctest::Approx(std::log(sum / 10)).epsilon(1e-12));
  }
  // Far from every sample the value stays finite.
  Vector far(2);
  far << 1e3, -1e3;
  CHECK(std::isfinite(kde_log_density(kb, far)));
  CHECK_THROWS_AS(kde_log_density(kb, Vector::Zero(3)), DimensionMismatch);
  const Vector sc = scott_bandwidth(S);
  CHECK(sc[0] == doctest::Approx(std::sqrt((S.col(0).array() - S.col(0).mean()).square().sum() / 9) *
                                 std::pow(10.0, -1.0 / 6.0))
                     .epsilon(1e-12));
}
