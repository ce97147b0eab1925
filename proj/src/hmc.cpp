#include "mss/hmc.hpp"

#include <algorithm>
#include <cmath>
#include <exception>

#include "mss/errors.hpp"

namespace mss {

namespace {

constexpr double kDivergenceThreshold = 1000.0;

double kinetic(const Vector& p, const Vector& inv_mass) { return 0.5 * p.cwiseAbs2().dot(inv_mass); }

struct Trajectory {
  Vector q;
  Vector p;
  Vector grad;
  double logp = 0.0;
  bool finite = true;
};

// Integrates in place; `t` must hold logp/grad of its starting q.
void integrate(const TargetModel& target, Trajectory& t, double eps, int n_steps, const Vector& inv_mass) {
  for (int s = 0; s < n_steps; ++s) {
    t.p.noalias() += 0.5 * eps * t.grad;
    t.q.noalias() += eps * inv_mass.cwiseProduct(t.p);
    t.logp = target.log_density_grad(t.q, t.grad);
    if (!std::isfinite(t.logp) || !t.grad.allFinite()) {
      t.finite = false;
      return;
    }
    t.p.noalias() += 0.5 * eps * t.grad;
  }
  t.finite = t.p.allFinite() && t.q.allFinite();
}

}  // namespace

void HMCConfig::validate() const {
  if (n_warmup < 0 || n_samples < 1) throw InvalidArgument("HMC needs n_warmup >= 0 and n_samples >= 1");
  if (!(target_accept > 0 && target_accept < 1)) throw InvalidArgument("target_accept must lie in (0, 1)");
  if (max_leapfrog < 1) throw InvalidArgument("max_leapfrog must be positive");
  if (!(init_step > 0)) throw InvalidArgument("init_step must be positive");
  if (!(path_length > 0)) throw InvalidArgument("path_length must be positive");
}

json HMCConfig::to_json() const {
  return {{"n_warmup", n_warmup},         {"n_samples", n_samples},     {"target_accept", target_accept},
          {"max_leapfrog", max_leapfrog}, {"init_step", init_step},     {"path_length", path_length},
          {"mass_adapt", mass_adapt},     {"jitter_steps", jitter_steps}, {"seed", seed}};
}

HMCConfig HMCConfig::from_json(const json& j) { return from_json(j, HMCConfig{}); }

HMCConfig HMCConfig::from_json(const json& j, const HMCConfig& defaults) {
  HMCConfig c = defaults;
  if (!j.is_object()) throw FormatError("HMC config must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& k = it.key();
    const auto& v = it.value();
    if (k == "n_warmup") c.n_warmup = v.get<int>();
    else if (k == "n_samples") c.n_samples = v.get<int>();
    else if (k == "target_accept") c.target_accept = v.get<double>();
    else if (k == "max_leapfrog") c.max_leapfrog = v.get<int>();
    else if (k == "init_step") c.init_step = v.get<double>();
    else if (k == "path_length") c.path_length = v.get<double>();
    else if (k == "mass_adapt") c.mass_adapt = v.get<bool>();
    else if (k == "jitter_steps") c.jitter_steps = v.get<bool>();
    else if (k == "seed") c.seed = v.get<std::uint64_t>();
    else if (k == "n_chains" || k.starts_with("_")) continue;  // handled by callers / annotations
    else throw FormatError("unknown HMC config key '" + k + "'");
  }
  c.validate();
  return c;
}

Vector Chain::column(const std::string& name) const {
  for (std::size_t j = 0; j < names.size(); ++j) {
    if (names[j] == name) return draws.col(static_cast<Eigen::Index>(j));
  }
  throw InvalidArgument("chain has no column '" + name + "'");
}

PhasePoint leapfrog(const TargetModel& model, const Vector& q, const Vector& p, double eps, int n_steps,
                    const Vector& inv_mass) {
  if (!(eps > 0)) throw InvalidArgument("leapfrog step must be positive");
  if (n_steps < 0) throw InvalidArgument("leapfrog step count must be non-negative");
  const Vector im = inv_mass.size() ? inv_mass : Vector::Ones(q.size());
  if (q.size() != p.size() || im.size() != q.size()) throw DimensionMismatch("leapfrog: q, p, mass sizes differ");
  Trajectory t{q, p, Vector(), 0.0, true};
  t.logp = model.log_density_grad(t.q, t.grad);
  if (!std::isfinite(t.logp) || !t.grad.allFinite()) throw Divergence("leapfrog: non-finite initial state");
  const double h0 = -t.logp + kinetic(p, im);
  integrate(model, t, eps, n_steps, im);
  if (!t.finite) throw Divergence("leapfrog: non-finite state along the trajectory");
  const double h1 = -t.logp + kinetic(t.p, im);
  if (!(std::abs(h1 - h0) <= kDivergenceThreshold)) throw Divergence("leapfrog: |Delta H| exceeds 1000");
  return {std::move(t.q), std::move(t.p)};
}

DualAveraging::DualAveraging(double initial_step, double target, double gamma, double t0, double kappa)
    : target_(target), gamma_(gamma), t0_(t0), kappa_(kappa) {
  restart(initial_step);
}

void DualAveraging::restart(double step) {
  mu_ = std::log(10.0 * step);
  log_step_ = std::log(step);
  log_step_bar_ = 0.0;
  h_bar_ = 0.0;
  m_ = 0.0;
}

double DualAveraging::update(double accept_stat) {
  m_ += 1.0;
  const double w = 1.0 / (m_ + t0_);
  h_bar_ = (1.0 - w) * h_bar_ + w * (target_ - accept_stat);
  log_step_ = mu_ - std::sqrt(m_) / gamma_ * h_bar_;
  const double eta = std::pow(m_, -kappa_);
  log_step_bar_ = eta * log_step_ + (1.0 - eta) * log_step_bar_;
  return step();
}

namespace {

class Sampler {
 public:
  Sampler(const UnconstrainedTarget& target, const HMCConfig& cfg)
      : target_(target), cfg_(cfg), rng_(cfg.seed), inv_mass_(Vector::Ones(target.dim())) {}

  void set_position(const Vector& q) {
    cur_.q = q;
    cur_.logp = target_.log_density_grad(cur_.q, cur_.grad);
    if (!std::isfinite(cur_.logp) || !cur_.grad.allFinite()) {
      throw InitOutOfSupport("initial point has non-finite log-density or gradient");
    }
  }

  Rng& rng() { return rng_; }
  const Vector& q() const { return cur_.q; }
  const Vector& inv_mass() const { return inv_mass_; }
  void set_inv_mass(Vector im) { inv_mass_ = std::move(im); }
  long long grad_evals() const { return grad_evals_; }

  Vector draw_momentum() {
    Vector p(inv_mass_.size());
    for (Eigen::Index i = 0; i < p.size(); ++i) p[i] = std_normal(rng_) / std::sqrt(inv_mass_[i]);
    return p;
  }

  // One-step acceptance probability from the current point, used to pick
  // a starting step size.
  double probe_accept(double eps) {
    Trajectory t{cur_.q, draw_momentum(), cur_.grad, cur_.logp, true};
    const double h0 = -t.logp + kinetic(t.p, inv_mass_);
    integrate(target_, t, eps, 1, inv_mass_);
    ++grad_evals_;
    if (!t.finite) return 0.0;
    const double h1 = -t.logp + kinetic(t.p, inv_mass_);
    const double a = std::exp(std::min(0.0, h0 - h1));
    return std::isfinite(a) ? a : 0.0;
  }

  double find_initial_step(double eps) {
    double a = probe_accept(eps);
    const double dir = a > 0.5 ? 1.0 : -1.0;
    for (int i = 0; i < 100; ++i) {
      if (!(std::pow(a, dir) > std::pow(2.0, -dir))) break;
      const double next = eps * std::pow(2.0, dir);
      if (!(next > 1e-12 && next < 1e6)) break;
      eps = next;
      a = probe_accept(eps);
    }
    return eps;
  }

  struct Transition {
    double accept_stat;
    bool divergent;
  };

  Transition transition(double eps) {
    int steps = static_cast<int>(std::ceil(cfg_.path_length / eps));
    steps = std::clamp(steps, 1, cfg_.max_leapfrog);
    if (cfg_.jitter_steps && steps > 1) {
      std::uniform_int_distribution<int> pick((steps + 1) / 2, steps);
      steps = pick(rng_);
    }
    Trajectory t{cur_.q, draw_momentum(), cur_.grad, cur_.logp, true};
    const double h0 = -t.logp + kinetic(t.p, inv_mass_);
    integrate(target_, t, eps, steps, inv_mass_);
    grad_evals_ += steps;
    const double h1 = t.finite ? -t.logp + kinetic(t.p, inv_mass_) : kInf;
    if (!t.finite || !(std::abs(h1 - h0) <= kDivergenceThreshold)) {
      // Keep the rng stream aligned with non-divergent transitions.
      uniform(rng_, 0.0, 1.0);
      return {0.0, true};
    }
    const double accept = std::exp(std::min(0.0, h0 - h1));
    if (uniform(rng_, 0.0, 1.0) < accept) cur_ = std::move(t);
    return {accept, false};
  }

 private:
  const UnconstrainedTarget& target_;
  const HMCConfig& cfg_;
  Rng rng_;
  Trajectory cur_;
  Vector inv_mass_;
  long long grad_evals_ = 0;
};

}  // namespace

Chain sample(const ModelPtr& model, const HMCConfig& cfg, const std::optional<Vector>& init) {
  cfg.validate();
  const UnconstrainedTarget target(model);
  Sampler s(target, cfg);

  Vector q0;
  if (init) {
    if (!model->space().inside(*init)) throw InitOutOfSupport("initial point outside the parameter space");
    q0 = target.to_sampling(*init);
  } else if (auto d = model->draw_prior(s.rng())) {
    q0 = target.to_sampling(*d);
  } else {
    q0 = Vector::Zero(target.dim());
  }
  s.set_position(q0);

  double eps = s.find_initial_step(cfg.init_step);
  DualAveraging da(eps, cfg.target_accept);

  // Warmup: step size only for the first half, then collect sampling-space
  // variances until 85%, install the mass, and re-tune the step size.
  const int W = cfg.n_warmup;
  const int mass_begin = W / 2;
  const int mass_end = cfg.mass_adapt ? static_cast<int>(0.85 * W) : -1;
  Vector mean = Vector::Zero(target.dim());
  Vector m2 = Vector::Zero(target.dim());
  int n_acc = 0;
  int warm_div = 0;
  for (int it = 0; it < W; ++it) {
    const auto tr = s.transition(eps);
    warm_div += tr.divergent ? 1 : 0;
    eps = da.update(tr.accept_stat);
    if (cfg.mass_adapt && it >= mass_begin && it < mass_end) {
      ++n_acc;
      const Vector delta = s.q() - mean;
      mean += delta / n_acc;
      m2 += delta.cwiseProduct(s.q() - mean);
    }
    if (it + 1 == mass_end && n_acc >= 10) {
      const double n = n_acc;
      Vector var = m2 / (n - 1.0);
      // Shrink toward a small multiple of identity, as is customary.
      var = (n / (n + 5.0)) * var.array() + 1e-3 * (5.0 / (n + 5.0));
      s.set_inv_mass(var);
      eps = s.find_initial_step(da.final_step() > 0 ? da.step() : eps);
      da.restart(eps);
    }
  }
  if (W > 0) {
    eps = da.final_step();
    if (warm_div * 2 > W) {
      throw AllDivergent(std::to_string(warm_div) + " of " + std::to_string(W) + " warmup transitions diverged");
    }
  }

  Chain chain;
  chain.names = model->space().names();
  chain.draws.resize(cfg.n_samples, target.dim());
  chain.logp.resize(cfg.n_samples);
  chain.seed = cfg.seed;
  chain.warmup_divergences = warm_div;
  double acc_sum = 0.0;
  int div = 0;
  for (int it = 0; it < cfg.n_samples; ++it) {
    const auto tr = s.transition(eps);
    acc_sum += tr.accept_stat;
    div += tr.divergent ? 1 : 0;
    const Vector theta = target.to_native(s.q());
    chain.draws.row(it) = theta.transpose();
    chain.logp[it] = model->log_density(theta);
  }
  chain.accept_rate = acc_sum / cfg.n_samples;
  chain.step_size = eps;
  chain.mass_diag = s.inv_mass().cwiseInverse();
  chain.divergences = div;
  chain.n_grad_evals = s.grad_evals();
  return chain;
}

std::uint64_t chain_seed(std::uint64_t master, int k) { return derive_seed(master, static_cast<std::uint64_t>(k)); }

std::vector<Chain> sample_chains_serial(const ModelPtr& model, const HMCConfig& cfg, int n_chains) {
  if (n_chains < 1) throw InvalidArgument("n_chains must be at least 1");
  std::vector<Chain> out;
  out.reserve(static_cast<std::size_t>(n_chains));
  for (int k = 0; k < n_chains; ++k) {
    HMCConfig c = cfg;
    c.seed = chain_seed(cfg.seed, k);
    out.push_back(sample(model, c));
  }
  return out;
}

std::vector<Chain> sample_chains(const ModelPtr& model, const HMCConfig& cfg, int n_chains) {
  if (n_chains < 1) throw InvalidArgument("n_chains must be at least 1");
  cfg.validate();
  std::vector<Chain> out(static_cast<std::size_t>(n_chains));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n_chains));
#pragma omp parallel for schedule(dynamic, 1)
  for (int k = 0; k < n_chains; ++k) {
    try {
      HMCConfig c = cfg;
      c.seed = chain_seed(cfg.seed, k);
      out[static_cast<std::size_t>(k)] = sample(model, c);
    } catch (...) {
      errors[static_cast<std::size_t>(k)] = std::current_exception();
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

Matrix pooled_draws(const std::vector<Chain>& chains) {
  if (chains.empty()) return {};
  Eigen::Index rows = 0;
  for (const auto& c : chains) rows += c.size();
  Matrix out(rows, chains.front().dim());
  Eigen::Index r = 0;
  for (const auto& c : chains) {
    out.middleRows(r, c.size()) = c.draws;
    r += c.size();
  }
  return out;
}

void save_chain(const Chain& chain, const std::filesystem::path& csv_path) {
  std::vector<std::string> header = chain.names;
  header.push_back("logp");
  Matrix rows(chain.size(), chain.dim() + 1);
  rows.leftCols(chain.dim()) = chain.draws;
  rows.col(chain.dim()) = chain.logp;
  write_csv(csv_path, header, rows);
}

void save_chain_stats(const Chain& chain, const HMCConfig& cfg, const std::filesystem::path& json_path) {
  json j;
  j["version"] = 1;
  j["step_size"] = chain.step_size;
  j["accept_rate"] = chain.accept_rate;
  j["divergences"] = chain.divergences;
  j["warmup_divergences"] = chain.warmup_divergences;
  j["n_grad_evals"] = chain.n_grad_evals;
  j["seed"] = chain.seed;
  j["mass_diag"] = std::vector<double>(chain.mass_diag.begin(), chain.mass_diag.end());
  j["config"] = cfg.to_json();
  write_json(json_path, j);
}

Chain load_chain(const std::filesystem::path& csv_path) {
  CsvTable t = read_csv(csv_path);
  if (t.header.empty() || t.header.back() != "logp") {
    throw FormatError("'" + csv_path.string() + "': last column must be 'logp'");
  }
  Chain c;
  c.names.assign(t.header.begin(), t.header.end() - 1);
  c.draws = t.rows.leftCols(t.rows.cols() - 1);
  c.logp = t.rows.col(t.rows.cols() - 1);
  return c;
}

}  // namespace mss
