#include "mss/flow.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include <boost/math/distributions/normal.hpp>

#include "mss/errors.hpp"

namespace mss {

namespace {

constexpr double kLog2Pi = 1.83787706640934548356;
constexpr double kScaleMax = 3.0;
constexpr Eigen::Index kChunk = 256;
// Points closer than this fraction of the box width to an edge are clamped.
constexpr double kEdgeFrac = 1e-12;
// Width (in box units) of the quadratic wall outside the box.
constexpr double kWallFrac = 1e-3;

double std_normal_quantile(double p, double q) {
  static const boost::math::normal_distribution<double> nd;
  // Use whichever tail keeps full relative precision.
  return p <= 0.5 ? boost::math::quantile(nd, p) : -boost::math::quantile(nd, q);
}

double std_normal_cdf_box(double w, double lo, double hi) {
  const double width = hi - lo;
  if (w <= 0) return lo + width * 0.5 * std::erfc(-w / std::sqrt(2.0));
  return hi - width * 0.5 * std::erfc(w / std::sqrt(2.0));
}

double log_std_normal_pdf(double z) { return -0.5 * z * z - 0.5 * kLog2Pi; }

double log_std_normal_cdf(double z) {
  if (z >= 0) return std::log1p(-0.5 * std::erfc(z / std::numbers::sqrt2));
  if (z > -30.0) return std::log(0.5 * std::erfc(-z / std::numbers::sqrt2));
  // Asymptotic tail series, accurate to ~1e-10 beyond |z| = 30.
  const double z2 = z * z;
  return log_std_normal_pdf(z) - std::log(-z) + std::log1p(-1.0 / z2 + 3.0 / (z2 * z2));
}

// Phi^{-1}(exp(lp)) for lp <= log(1/2), including probabilities below the
// smallest double.
double normal_quantile_log(double lp) {
  if (lp > -680.0) return std_normal_quantile(std::exp(lp), -std::expm1(lp));
  double m = -std::sqrt(-2.0 * lp);
  for (int it = 0; it < 100; ++it) {
    const double lc = log_std_normal_cdf(m);
    const double step = (lc - lp) / std::exp(log_std_normal_pdf(m) - lc);
    m -= step;
    if (std::abs(step) < 1e-13 * std::abs(m)) break;
  }
  return m;
}

struct Preprocessed {
  Matrix U;     ///< standardized inputs
  Matrix J;     ///< du/dv per entry (0 where clamped)
  Matrix G;     ///< d(row log-det + wall)/dv per entry
  Vector ld;    ///< per-row log|du/dv| plus wall penalty
};

Preprocessed preprocess(const Standardizer& st, const Matrix& V, bool need_grad) {
  const Eigen::Index B = V.rows(), D = V.cols();
  if (D != st.dim()) throw DimensionMismatch("flow input has " + std::to_string(D) + " columns, expected " +
                                             std::to_string(st.dim()));
  Preprocessed out;
  out.U.resize(B, D);
  out.ld = Vector::Zero(B);
  if (need_grad) {
    out.J.resize(B, D);
    out.G.resize(B, D);
  }
  for (Eigen::Index i = 0; i < D; ++i) {
    const double inv_scale = 1.0 / st.scale[i];
    const double log_scale = std::log(st.scale[i]);
    const bool boxed = st.boxed(i);
    const bool gauss = st.gaussianized(i);
    const double lo = st.lower[i], hi = st.upper[i], width = hi - lo;
    const double edge = kEdgeFrac * width, wall = kWallFrac * width;
    for (Eigen::Index r = 0; r < B; ++r) {
      const double v = V(r, i);
      if (!std::isfinite(v)) throw NonFiniteDensity("non-finite flow input");
      double w = v, log_dw = 0.0, dw = 1.0, glog_dw = 0.0, wall_ld = 0.0, wall_grad = 0.0;
      bool clamped = false;
      if (boxed) {
        const double vc = std::clamp(v, lo + edge, hi - edge);
        w = std_normal_quantile((vc - lo) / width, (hi - vc) / width);
        log_dw = -std::log(width) - log_std_normal_pdf(w);
        dw = std::exp(log_dw);
        glog_dw = w * dw;
        const double off = (v - vc) / wall;
        wall_ld = -0.5 * off * off;
        wall_grad = -off / wall;
        clamped = v != vc;
      }
      MarginalEval me{w, 0.0, 1.0, 0.0};
      if (gauss) me = marginal_forward(st.marginal[static_cast<std::size_t>(i)], w);
      out.U(r, i) = (me.m - st.mean[i]) * inv_scale;
      out.ld[r] += log_dw + me.log_dm - log_scale + wall_ld;
      if (need_grad) {
        out.J(r, i) = clamped ? 0.0 : dw * me.dm * inv_scale;
        out.G(r, i) = clamped ? wall_grad : glog_dw + me.dlog_dm * dw;
      }
    }
  }
  return out;
}

Matrix postprocess(const Standardizer& st, const Matrix& U) {
  Matrix V(U.rows(), U.cols());
  for (Eigen::Index i = 0; i < U.cols(); ++i) {
    for (Eigen::Index r = 0; r < U.rows(); ++r) {
      double w = U(r, i) * st.scale[i] + st.mean[i];
      if (st.gaussianized(i)) w = marginal_inverse(st.marginal[static_cast<std::size_t>(i)], w);
      V(r, i) = st.boxed(i) ? std_normal_cdf_box(w, st.lower[i], st.upper[i]) : w;
    }
  }
  return V;
}

struct LayerCache {
  Matrix X, Xc, H1, H2, Th, E;
};

Matrix rowwise_scale(const Matrix& X, const Vector& v) { return X * v.asDiagonal(); }

// One coupling layer in the normalizing direction.
void layer_forward(const CouplingLayer& L, const Matrix& X, Matrix& Y, Vector& ld, LayerCache* cache) {
  const Eigen::Index D = L.dim();
  const Vector free = Vector::Ones(D) - L.mask;
  Matrix Xc = rowwise_scale(X, L.cond);
  Matrix H1 = ((Xc * L.W1.transpose()).rowwise() + L.b1.transpose()).array().tanh().matrix();
  Matrix H2 = ((H1 * L.W2.transpose()).rowwise() + L.b2.transpose()).array().tanh().matrix();
  Matrix O = (H2 * L.W3.transpose()).rowwise() + L.b3.transpose();
  Matrix Th = (O.leftCols(D) / kScaleMax).array().tanh().matrix();
  Matrix S = rowwise_scale(kScaleMax * Th, free);
  Matrix T = rowwise_scale(O.rightCols(D), free);
  Matrix E = S.array().exp().matrix();
  Y = X.cwiseProduct(E) + T;
  ld += S.rowwise().sum();
  if (cache) {
    cache->X = X;
    cache->Xc = std::move(Xc);
    cache->H1 = std::move(H1);
    cache->H2 = std::move(H2);
    cache->Th = std::move(Th);
    cache->E = std::move(E);
  }
}

// Backward pass for sum_r c_r * logp_r. GY holds the gradient w.r.t. the
// layer output; on return it holds the gradient w.r.t. the layer input.
void layer_backward(const CouplingLayer& L, const LayerCache& C, const Vector& c, Matrix& GY, CouplingLayer* grad) {
  const Eigen::Index D = L.dim();
  const Vector free = Vector::Ones(D) - L.mask;
  Matrix GS = GY.cwiseProduct(C.X).cwiseProduct(C.E);
  GS.colwise() += c;
  GS = rowwise_scale(GS, free);
  Matrix GT = rowwise_scale(GY, free);
  Matrix GX = GY.cwiseProduct(C.E);
  Matrix GO(GY.rows(), 2 * D);
  GO.leftCols(D) = GS.cwiseProduct((1.0 - C.Th.array().square()).matrix());
  GO.rightCols(D) = GT;
  Matrix GA2 = (GO * L.W3).cwiseProduct((1.0 - C.H2.array().square()).matrix());
  Matrix GA1 = (GA2 * L.W2).cwiseProduct((1.0 - C.H1.array().square()).matrix());
  if (grad) {
    grad->W3.noalias() += GO.transpose() * C.H2;
    grad->b3 += GO.colwise().sum().transpose();
    grad->W2.noalias() += GA2.transpose() * C.H1;
    grad->b2 += GA2.colwise().sum().transpose();
    grad->W1.noalias() += GA1.transpose() * C.Xc;
    grad->b1 += GA1.colwise().sum().transpose();
  }
  GX += rowwise_scale(GA1 * L.W1, L.cond);
  GY = std::move(GX);
}

double base_logp_row(const Matrix& Z, Eigen::Index r) {
  return -0.5 * Z.row(r).squaredNorm() - 0.5 * static_cast<double>(Z.cols()) * kLog2Pi;
}

// Layers only: logp of standardized inputs U (without preprocessing).
Vector layers_logp(const FlowModel& flow, const Matrix& U, std::vector<LayerCache>* caches, Matrix* Zout) {
  Matrix X = U, Y;
  Vector ld = Vector::Zero(U.rows());
  if (caches) caches->resize(flow.layers.size());
  for (std::size_t l = 0; l < flow.layers.size(); ++l) {
    layer_forward(flow.layers[l], X, Y, ld, caches ? &(*caches)[l] : nullptr);
    X.swap(Y);
  }
  Vector out(U.rows());
  for (Eigen::Index r = 0; r < U.rows(); ++r) out[r] = base_logp_row(X, r) + ld[r];
  if (Zout) *Zout = std::move(X);
  return out;
}

CouplingLayer zero_like(const CouplingLayer& L) {
  CouplingLayer g;
  g.mask = L.mask;
  g.cond = L.cond;
  g.W1 = Matrix::Zero(L.W1.rows(), L.W1.cols());
  g.W2 = Matrix::Zero(L.W2.rows(), L.W2.cols());
  g.W3 = Matrix::Zero(L.W3.rows(), L.W3.cols());
  g.b1 = Vector::Zero(L.b1.size());
  g.b2 = Vector::Zero(L.b2.size());
  g.b3 = Vector::Zero(L.b3.size());
  return g;
}

// Gradient of sum_r c_r logp_r w.r.t. layer parameters (and optionally the
// standardized inputs).
void layers_backward(const FlowModel& flow, const std::vector<LayerCache>& caches, const Matrix& Z, const Vector& c,
                     std::vector<CouplingLayer>* grads, Matrix* GU) {
  Matrix G = -(c.asDiagonal() * Z);
  if (grads) {
    grads->clear();
    for (const auto& L : flow.layers) grads->push_back(zero_like(L));
  }
  for (std::size_t l = flow.layers.size(); l-- > 0;) {
    layer_backward(flow.layers[l], caches[l], c, G, grads ? &(*grads)[l] : nullptr);
  }
  if (GU) *GU = std::move(G);
}

Vector masks_for(int D, int layer) {
  Vector m = Vector::Zero(D);
  if (D == 1) return m;
  const int kind = layer % 4;
  for (int i = 0; i < D; ++i) {
    bool keep = false;
    switch (kind) {
      case 0: keep = i < D / 2; break;
      case 1: keep = i >= D / 2; break;
      case 2: keep = i % 2 == 0; break;
      case 3: keep = i % 2 == 1; break;
    }
    m[i] = keep ? 1.0 : 0.0;
  }
  return m;
}

CouplingLayer make_layer(int D, int H, int index) {
  CouplingLayer L;
  L.mask = masks_for(D, index);
  L.cond = L.mask;
  L.W1 = Matrix::Zero(H, D);
  L.W2 = Matrix::Zero(H, H);
  L.W3 = Matrix::Zero(2 * D, H);
  L.b1 = Vector::Zero(H);
  L.b2 = Vector::Zero(H);
  L.b3 = Vector::Zero(2 * D);
  return L;
}

std::vector<double> to_vec(const Vector& v) { return {v.data(), v.data() + v.size()}; }

json matrix_json(const Matrix& M) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < M.rows(); ++r) rows.push_back(to_vec(M.row(r).transpose()));
  return rows;
}

double json_number(const json& v) {
  if (v.is_null()) return kInf;  // non-finite values are written as null
  if (!v.is_number()) throw FormatError("expected a number in flow file");
  return v.get<double>();
}

Vector vector_json(const json& j, Eigen::Index n, const std::string& what) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != n) {
    throw FormatError("flow file: '" + what + "' must be an array of " + std::to_string(n) + " numbers");
  }
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = json_number(j[static_cast<std::size_t>(i)]);
  return v;
}

Matrix matrix_from_json(const json& j, Eigen::Index rows, Eigen::Index cols, const std::string& what) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != rows) {
    throw FormatError("flow file: '" + what + "' must have " + std::to_string(rows) + " rows");
  }
  Matrix M(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) M.row(r) = vector_json(j[static_cast<std::size_t>(r)], cols, what).transpose();
  return M;
}

const json& field(const json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) throw FormatError(std::string("flow file: missing '") + key + "'");
  return j.at(key);
}

}  // namespace

MarginalCdf fit_marginal_cdf(const Vector& x, int bins, double bw_scale) {
  const Eigen::Index n = x.size();
  if (n < 2) throw TooFewSamples("marginal estimate needs at least two samples");
  if (bins < 2) throw InvalidArgument("marginal estimate needs at least two bins");
  if (!(bw_scale > 0)) throw InvalidArgument("bandwidth scale must be positive");
  const double mean = x.mean();
  const double sd = std::sqrt((x.array() - mean).square().sum() / static_cast<double>(n - 1));
  if (!(sd > 0)) throw DegenerateChain("marginal estimate of a constant column");
  std::vector<double> sorted(x.data(), x.data() + n);
  std::sort(sorted.begin(), sorted.end());
  const auto quantile = [&](double q) { return sorted[static_cast<std::size_t>(q * static_cast<double>(n - 1))]; };
  const double iqr = quantile(0.75) - quantile(0.25);
  const double spread = iqr > 0 ? std::min(sd, iqr / 1.349) : sd;
  const double h = bw_scale * 0.9 * spread * std::pow(static_cast<double>(n), -0.2);
  const double lo = sorted.front(), hi = sorted.back();
  const double delta = (hi - lo) / (bins - 1);
  Vector counts = Vector::Zero(bins);
  for (Eigen::Index k = 0; k < n; ++k) {
    const double pos = std::clamp((x[k] - lo) / delta, 0.0, static_cast<double>(bins - 1));
    const auto j = std::min<Eigen::Index>(static_cast<Eigen::Index>(pos), bins - 2);
    const double frac = pos - static_cast<double>(j);
    counts[j] += 1.0 - frac;
    counts[j + 1] += frac;
  }
  MarginalCdf c;
  c.bandwidth = h;
  c.tail_weight = 1e-3;
  c.tail_mean = mean;
  c.tail_sd = 2.0 * sd;
  const auto n_used = (counts.array() > 0).count();
  c.centers.resize(n_used);
  c.weights.resize(n_used);
  Eigen::Index k = 0;
  for (Eigen::Index j = 0; j < bins; ++j) {
    if (counts[j] <= 0) continue;
    c.centers[k] = lo + static_cast<double>(j) * delta;
    c.weights[k] = counts[j] / static_cast<double>(n);
    ++k;
  }
  c.prepare();
  return c;
}

void MarginalCdf::prepare() {
  if (centers.size() == 0 || centers.size() != weights.size()) throw InvalidArgument("marginal needs matching centers");
  if (!(bandwidth > 0) || !std::isfinite(bandwidth)) throw InvalidArgument("marginal bandwidth must be positive");
  if (!(weights.array() > 0).all()) throw InvalidArgument("marginal weights must be positive");
  for (Eigen::Index b = 1; b < centers.size(); ++b) {
    if (!(centers[b] > centers[b - 1])) throw InvalidArgument("marginal centers must ascend");
  }
  if (!(tail_weight >= 0 && tail_weight < 1)) throw InvalidArgument("marginal tail weight must be in [0, 1)");
  if (!(tail_sd > 0) || !std::isfinite(tail_sd) || !std::isfinite(tail_mean)) {
    throw InvalidArgument("marginal tail component needs a finite mean and positive sd");
  }
  log_weights = weights.array().log().matrix();
}

namespace {

// Kernels farther than this many bandwidths count as fully below or above w.
constexpr double kKernelReach = 10.0;

}  // namespace

namespace {

// Log lower tail, log upper tail, log density and d/dw log density of a
// mixture component or sum of components.
struct LogCdfTerms {
  double log_lo, log_hi, log_f, dlog_f;
};

LogCdfTerms kernel_terms(const MarginalCdf& c, double w) {
  const double h = c.bandwidth;
  const Eigen::Index K = c.centers.size();
  const double* x = c.centers.data();
  // Kernels in [b0, b1) are evaluated; the rest contribute whole weights.
  Eigen::Index b0 = std::lower_bound(x, x + K, w - kKernelReach * h) - x;
  Eigen::Index b1 = std::upper_bound(x, x + K, w + kKernelReach * h) - x;
  if (b0 < b1) {
    // Linear-space sums; every windowed term is well above underflow.
    double s_lo = b0 > 0 ? c.weights.head(b0).sum() : 0.0;
    double s_hi = b1 < K ? c.weights.tail(K - b1).sum() : 0.0;
    double s_pdf = 0.0, s_dz = 0.0;
    for (Eigen::Index b = b0; b < b1; ++b) {
      const double z = (w - x[b]) / h;
      const double wb = c.weights[b];
      double p, q;
      if (z < 0) {
        p = 0.5 * std::erfc(-z / std::numbers::sqrt2);
        q = 1.0 - p;
      } else {
        q = 0.5 * std::erfc(z / std::numbers::sqrt2);
        p = 1.0 - q;
      }
      s_lo += wb * p;
      s_hi += wb * q;
      const double e = wb * std::exp(-0.5 * z * z);
      s_pdf += e;
      s_dz += e * z;
    }
    if (s_lo > 1e-290 && s_hi > 1e-290 && s_pdf > 1e-290) {
      return {std::log(s_lo), std::log(s_hi), std::log(s_pdf) - 0.5 * kLog2Pi - std::log(h), -s_dz / s_pdf / h};
    }
  }
  // Log-space sums over every kernel far outside the data.
  double max_lo = -kInf, max_hi = -kInf, max_pdf = -kInf;
  for (Eigen::Index b = 0; b < K; ++b) {
    const double z = (w - x[b]) / h;
    const double lw = c.log_weights[b];
    max_lo = std::max(max_lo, lw + log_std_normal_cdf(z));
    max_hi = std::max(max_hi, lw + log_std_normal_cdf(-z));
    max_pdf = std::max(max_pdf, lw + log_std_normal_pdf(z));
  }
  double s_lo = 0.0, s_hi = 0.0, s_pdf = 0.0, s_dz = 0.0;
  for (Eigen::Index b = 0; b < K; ++b) {
    const double z = (w - x[b]) / h;
    const double lw = c.log_weights[b];
    s_lo += std::exp(lw + log_std_normal_cdf(z) - max_lo);
    s_hi += std::exp(lw + log_std_normal_cdf(-z) - max_hi);
    const double e = std::exp(lw + log_std_normal_pdf(z) - max_pdf);
    s_pdf += e;
    s_dz += e * z;
  }
  return {max_lo + std::log(s_lo), max_hi + std::log(s_hi), max_pdf + std::log(s_pdf) - std::log(h), -s_dz / s_pdf / h};
}

double log_add(double a, double b) {
  const double m = std::max(a, b);
  if (m == -kInf) return -kInf;
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

}  // namespace

MarginalEval marginal_forward(const MarginalCdf& c, double w) {
  if (c.log_weights.size() != c.centers.size()) throw InvalidArgument("marginal used before prepare()");
  LogCdfTerms t = kernel_terms(c, w);
  if (c.tail_weight > 0) {
    const double lk = std::log1p(-c.tail_weight), lt = std::log(c.tail_weight);
    const double z = (w - c.tail_mean) / c.tail_sd;
    const double tail_f = lt + log_std_normal_pdf(z) - std::log(c.tail_sd);
    const double log_f = log_add(lk + t.log_f, tail_f);
    const double share = std::exp(tail_f - log_f);
    t = {log_add(lk + t.log_lo, lt + log_std_normal_cdf(z)), log_add(lk + t.log_hi, lt + log_std_normal_cdf(-z)), log_f,
         (1.0 - share) * t.dlog_f + share * (-z / c.tail_sd)};
  }
  MarginalEval out;
  out.m = t.log_lo <= t.log_hi ? normal_quantile_log(t.log_lo) : -normal_quantile_log(t.log_hi);
  out.log_dm = t.log_f - log_std_normal_pdf(out.m);
  out.dm = std::exp(out.log_dm);
  out.dlog_dm = t.dlog_f + out.m * out.dm;
  return out;
}

MarginalEval marginal_forward(const MarginalChain& chain, double w) {
  MarginalEval acc{w, 0.0, 1.0, 0.0};
  for (const auto& c : chain) {
    const MarginalEval e = marginal_forward(c, acc.m);
    // d/dw of the accumulated log-slope picks up this pass through the chain rule.
    acc.dlog_dm += e.dlog_dm * acc.dm;
    acc.m = e.m;
    acc.log_dm += e.log_dm;
    acc.dm *= e.dm;
  }
  return acc;
}

double marginal_inverse(const MarginalChain& chain, double m) {
  for (auto it = chain.rbegin(); it != chain.rend(); ++it) m = marginal_inverse(*it, m);
  return m;
}

double marginal_inverse(const MarginalCdf& c, double m) {
  if (!std::isfinite(m)) throw NonFiniteDensity("non-finite base coordinate");
  const double h = c.bandwidth;
  const double span = h * (std::abs(m) + 10.0);
  double lo = c.centers.minCoeff() - span, hi = c.centers.maxCoeff() + span;
  while (marginal_forward(c, lo).m > m) lo -= span;
  while (marginal_forward(c, hi).m < m) hi += span;
  for (int it = 0; it < 200 && hi - lo > 1e-14 * (1.0 + std::abs(lo)); ++it) {
    const double mid = 0.5 * (lo + hi);
    (marginal_forward(c, mid).m < m ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

std::size_t FlowModel::n_params() const {
  std::size_t n = 0;
  for (const auto& L : layers) {
    n += static_cast<std::size_t>(L.W1.size() + L.W2.size() + L.W3.size() + L.b1.size() + L.b2.size() + L.b3.size());
  }
  return n;
}

void TrainConfig::validate() const {
  if (n_layers < 1 || hidden_width < 1 || batch < 1 || max_epochs < 1 || patience < 1) {
    throw InvalidArgument("flow training counts must be positive");
  }
  if (!(val_frac > 0 && val_frac < 0.5)) throw InvalidArgument("val_frac must lie in (0, 0.5)");
  if (!(learn_rate > 0) || !(final_lr_frac > 0 && final_lr_frac <= 1)) {
    throw InvalidArgument("learning-rate schedule must be positive");
  }
  if (!(clip_norm > 0)) throw InvalidArgument("clip_norm must be positive");
  if (marginal_bins < 0 || marginal_bins == 1) throw InvalidArgument("marginal_bins must be 0 or at least 2");
  if (marginal_passes < 1) throw InvalidArgument("marginal_passes must be positive");
  if (!(marginal_bw_scale > 0)) throw InvalidArgument("marginal_bw_scale must be positive");
}

json TrainConfig::to_json() const {
  return {{"n_layers", n_layers},     {"hidden_width", hidden_width}, {"batch", batch},
          {"max_epochs", max_epochs}, {"learn_rate", learn_rate},     {"final_lr_frac", final_lr_frac},
          {"val_frac", val_frac},     {"patience", patience},         {"clip_norm", clip_norm},
          {"marginal_bins", marginal_bins}, {"marginal_passes", marginal_passes},
          {"marginal_bw_scale", marginal_bw_scale}, {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const json& j) { return from_json(j, TrainConfig{}); }

TrainConfig TrainConfig::from_json(const json& j, const TrainConfig& defaults) {
  if (!j.is_object()) throw FormatError("flow config must be a JSON object");
  TrainConfig c = defaults;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& k = it.key();
    const auto& v = it.value();
    if (k == "n_layers") c.n_layers = v.get<int>();
    else if (k == "hidden_width") c.hidden_width = v.get<int>();
    else if (k == "batch") c.batch = v.get<int>();
    else if (k == "max_epochs") c.max_epochs = v.get<int>();
    else if (k == "learn_rate") c.learn_rate = v.get<double>();
    else if (k == "final_lr_frac") c.final_lr_frac = v.get<double>();
    else if (k == "val_frac") c.val_frac = v.get<double>();
    else if (k == "patience") c.patience = v.get<int>();
    else if (k == "clip_norm") c.clip_norm = v.get<double>();
    else if (k == "marginal_bins") c.marginal_bins = v.get<int>();
    else if (k == "marginal_passes") c.marginal_passes = v.get<int>();
    else if (k == "marginal_bw_scale") c.marginal_bw_scale = v.get<double>();
    else if (k == "seed") c.seed = v.get<std::uint64_t>();
    else if (k.starts_with("_")) continue;
    else throw FormatError("unknown flow config key '" + k + "'");
  }
  c.validate();
  return c;
}

Standardizer identity_standardizer(int dim) {
  Standardizer s;
  s.lower = Vector::Constant(dim, -kInf);
  s.upper = Vector::Constant(dim, kInf);
  s.mean = Vector::Zero(dim);
  s.scale = Vector::Ones(dim);
  return s;
}

FlowModel make_identity_flow(int dim, int n_layers, int hidden_width, const Standardizer& standardizer) {
  if (dim < 1 || n_layers < 0 || hidden_width < 1) throw InvalidArgument("invalid flow shape");
  if (standardizer.dim() != dim) throw DimensionMismatch("standardizer dimension differs from flow dimension");
  FlowModel f;
  f.dim = dim;
  f.standardizer = standardizer;
  for (int l = 0; l < n_layers; ++l) f.layers.push_back(make_layer(dim, hidden_width, l));
  return f;
}

Standardizer fit_standardizer(const Matrix& samples, const std::vector<Bound>& support, int marginal_bins,
                              int marginal_passes, double marginal_bw_scale) {
  const Eigen::Index D = samples.cols();
  if (!support.empty() && static_cast<Eigen::Index>(support.size()) != D) {
    throw DimensionMismatch("support needs one bound per column");
  }
  if (samples.rows() < 2) throw TooFewSamples("standardizer needs at least two samples");
  Standardizer s = identity_standardizer(static_cast<int>(D));
  for (Eigen::Index i = 0; i < D; ++i) {
    if (!support.empty() && support[static_cast<std::size_t>(i)].is_bounded()) {
      s.lower[i] = support[static_cast<std::size_t>(i)].lower;
      s.upper[i] = support[static_cast<std::size_t>(i)].upper;
    }
  }
  // Each pass is fitted to the output of the previous one.
  Matrix W = preprocess(s, samples, false).U;
  if (marginal_bins > 0) {
    s.marginal.assign(static_cast<std::size_t>(D), {});
    for (int pass = 0; pass < marginal_passes; ++pass) {
      for (Eigen::Index i = 0; i < D; ++i) {
        auto& chain = s.marginal[static_cast<std::size_t>(i)];
        chain.push_back(fit_marginal_cdf(W.col(i), marginal_bins, marginal_bw_scale));
        for (Eigen::Index r = 0; r < W.rows(); ++r) W(r, i) = marginal_forward(chain.back(), W(r, i)).m;
      }
    }
  }
  for (Eigen::Index i = 0; i < D; ++i) {
    const double m = W.col(i).mean();
    const double var = (W.col(i).array() - m).square().sum() / static_cast<double>(samples.rows() - 1);
    if (!(var > 0) || !std::isfinite(var)) throw DegenerateChain("training column " + std::to_string(i) + " is constant");
    s.mean[i] = m;
    s.scale[i] = std::sqrt(var);
  }
  return s;
}

FlowModel init_flow(const Standardizer& standardizer, const TrainConfig& cfg) {
  cfg.validate();
  const int D = static_cast<int>(standardizer.dim());
  FlowModel f = make_identity_flow(D, cfg.n_layers, cfg.hidden_width, standardizer);
  Rng rng(derive_seed(cfg.seed, "flow-init"));
  for (auto& L : f.layers) {
    const double fan1 = std::max(1.0, L.cond.sum());
    for (Eigen::Index k = 0; k < L.W1.size(); ++k) L.W1.data()[k] = std_normal(rng) / std::sqrt(fan1);
    for (Eigen::Index k = 0; k < L.W2.size(); ++k) L.W2.data()[k] = std_normal(rng) / std::sqrt(cfg.hidden_width);
  }
  return f;
}

FlowEval flow_log_density(const FlowModel& flow, const Vector& x) {
  if (x.size() != flow.dim) throw DimensionMismatch("flow expects " + std::to_string(flow.dim) + " coordinates");
  const Matrix V = x.transpose();
  const Preprocessed pre = preprocess(flow.standardizer, V, true);
  std::vector<LayerCache> caches;
  Matrix Z;
  const Vector lp = layers_logp(flow, pre.U, &caches, &Z);
  Matrix GU;
  layers_backward(flow, caches, Z, Vector::Ones(1), nullptr, &GU);
  FlowEval out;
  out.logp = lp[0] + pre.ld[0];
  out.grad = (GU.cwiseProduct(pre.J) + pre.G).row(0).transpose();
  return out;
}

double flow_log_density_value(const FlowModel& flow, const Vector& x) {
  if (x.size() != flow.dim) throw DimensionMismatch("flow expects " + std::to_string(flow.dim) + " coordinates");
  const Matrix V = x.transpose();
  const Preprocessed pre = preprocess(flow.standardizer, V, false);
  return layers_logp(flow, pre.U, nullptr, nullptr)[0] + pre.ld[0];
}

namespace {

Vector chunk_logp(const FlowModel& flow, const Matrix& X) {
  const Preprocessed pre = preprocess(flow.standardizer, X, false);
  return layers_logp(flow, pre.U, nullptr, nullptr) + pre.ld;
}

}  // namespace

Vector flow_log_density_batch_serial(const FlowModel& flow, const Matrix& X) {
  if (X.cols() != flow.dim) throw DimensionMismatch("flow batch has the wrong number of columns");
  Vector out(X.rows());
  for (Eigen::Index r0 = 0; r0 < X.rows(); r0 += kChunk) {
    const Eigen::Index n = std::min(kChunk, X.rows() - r0);
    out.segment(r0, n) = chunk_logp(flow, X.middleRows(r0, n));
  }
  return out;
}

Vector flow_log_density_batch(const FlowModel& flow, const Matrix& X) {
  if (X.cols() != flow.dim) throw DimensionMismatch("flow batch has the wrong number of columns");
  Vector out(X.rows());
  const Eigen::Index n_chunks = (X.rows() + kChunk - 1) / kChunk;
#pragma omp parallel for schedule(static)
  for (Eigen::Index c = 0; c < n_chunks; ++c) {
    const Eigen::Index r0 = c * kChunk;
    const Eigen::Index n = std::min(kChunk, X.rows() - r0);
    out.segment(r0, n) = chunk_logp(flow, X.middleRows(r0, n));
  }
  return out;
}

Matrix flow_to_base(const FlowModel& flow, const Matrix& X) {
  if (X.cols() != flow.dim) throw DimensionMismatch("flow input has the wrong number of columns");
  const Preprocessed pre = preprocess(flow.standardizer, X, false);
  Matrix Z;
  layers_logp(flow, pre.U, nullptr, &Z);
  return Z;
}

Matrix flow_from_base(const FlowModel& flow, const Matrix& Z) {
  if (Z.cols() != flow.dim) throw DimensionMismatch("base draws have the wrong number of columns");
  Matrix Y = Z;
  for (std::size_t l = flow.layers.size(); l-- > 0;) {
    const CouplingLayer& L = flow.layers[l];
    const Eigen::Index D = L.dim();
    const Vector free = Vector::Ones(D) - L.mask;
    // Conditioner inputs are kept coordinates, identical on both sides.
    const Matrix Yc = rowwise_scale(Y, L.cond);
    const Matrix H1 = ((Yc * L.W1.transpose()).rowwise() + L.b1.transpose()).array().tanh().matrix();
    const Matrix H2 = ((H1 * L.W2.transpose()).rowwise() + L.b2.transpose()).array().tanh().matrix();
    const Matrix O = (H2 * L.W3.transpose()).rowwise() + L.b3.transpose();
    const Matrix S = rowwise_scale(kScaleMax * (O.leftCols(D) / kScaleMax).array().tanh().matrix(), free);
    const Matrix T = rowwise_scale(O.rightCols(D), free);
    Y = (Y - T).cwiseProduct((-S).array().exp().matrix());
  }
  return postprocess(flow.standardizer, Y);
}

Matrix flow_sample(const FlowModel& flow, int n, std::uint64_t seed) {
  if (n < 1) throw InvalidArgument("flow_sample needs n >= 1");
  Rng rng(seed);
  Matrix Z(n, flow.dim);
  for (Eigen::Index r = 0; r < Z.rows(); ++r) {
    for (Eigen::Index c = 0; c < Z.cols(); ++c) Z(r, c) = std_normal(rng);
  }
  return flow_from_base(flow, Z);
}

Vector flow_pack_params(const FlowModel& flow) {
  Vector p(static_cast<Eigen::Index>(flow.n_params()));
  Eigen::Index k = 0;
  auto put = [&](const auto& m) {
    p.segment(k, m.size()) = Eigen::Map<const Vector>(m.data(), m.size());
    k += m.size();
  };
  for (const auto& L : flow.layers) {
    put(L.W1);
    put(L.b1);
    put(L.W2);
    put(L.b2);
    put(L.W3);
    put(L.b3);
  }
  return p;
}

void flow_unpack_params(FlowModel& flow, const Vector& p) {
  if (p.size() != static_cast<Eigen::Index>(flow.n_params())) throw DimensionMismatch("parameter vector size");
  Eigen::Index k = 0;
  auto get = [&](auto& m) {
    Eigen::Map<Vector>(m.data(), m.size()) = p.segment(k, m.size());
    k += m.size();
  };
  for (auto& L : flow.layers) {
    get(L.W1);
    get(L.b1);
    get(L.W2);
    get(L.b2);
    get(L.W3);
    get(L.b3);
  }
}

namespace {

// Mean layer log-density of standardized rows and its parameter gradient.
double layers_mean_logp_grad(const FlowModel& flow, const Matrix& U, Vector& grad) {
  std::vector<LayerCache> caches;
  Matrix Z;
  const Vector lp = layers_logp(flow, U, &caches, &Z);
  const Vector c = Vector::Constant(U.rows(), 1.0 / static_cast<double>(U.rows()));
  std::vector<CouplingLayer> grads;
  layers_backward(flow, caches, Z, c, &grads, nullptr);
  FlowModel g = flow;
  g.layers = std::move(grads);
  grad = flow_pack_params(g);
  return lp.mean();
}

}  // namespace

double flow_mean_logp_param_grad(const FlowModel& flow, const Matrix& X, Vector& grad) {
  const Preprocessed pre = preprocess(flow.standardizer, X, false);
  return layers_mean_logp_grad(flow, pre.U, grad) + pre.ld.mean();
}

TrainResult train_flow(const Matrix& samples, const TrainConfig& cfg, const std::vector<Bound>& support) {
  cfg.validate();
  const Eigen::Index n = samples.rows(), D = samples.cols();
  if (D < 1) throw InvalidArgument("flow needs at least one column");
  if (n < std::max<Eigen::Index>(2 * D, 10)) {
    throw TooFewSamples("flow training needs at least max(2 * dim, 10) samples, got " + std::to_string(n));
  }
  if (!samples.allFinite()) throw NonFiniteLoss("training samples contain non-finite values");

  // Deterministic split.
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng(derive_seed(cfg.seed, "flow-split"));
  std::shuffle(order.begin(), order.end(), split_rng);
  const Eigen::Index n_val = std::max<Eigen::Index>(1, static_cast<Eigen::Index>(std::floor(cfg.val_frac * n)));
  const Eigen::Index n_train = n - n_val;
  Matrix train(n_train, D), val(n_val, D);
  for (Eigen::Index i = 0; i < n_train; ++i) train.row(i) = samples.row(order[static_cast<std::size_t>(i)]);
  for (Eigen::Index i = 0; i < n_val; ++i) val.row(i) = samples.row(order[static_cast<std::size_t>(n_train + i)]);

  const Standardizer st =
      fit_standardizer(train, support, cfg.marginal_bins, cfg.marginal_passes, cfg.marginal_bw_scale);
  FlowModel flow = init_flow(st, cfg);

  // Preprocessing is fixed during training, so do it once.
  const Preprocessed pre_train = preprocess(st, train, false);
  const Preprocessed pre_val = preprocess(st, val, false);
  const double ld_train = pre_train.ld.mean();
  const double ld_val = pre_val.ld.mean();

  auto val_logp = [&](const FlowModel& f) {
    Vector lp(n_val);
    for (Eigen::Index r0 = 0; r0 < n_val; r0 += kChunk) {
      const Eigen::Index m = std::min(kChunk, n_val - r0);
      lp.segment(r0, m) = layers_logp(f, pre_val.U.middleRows(r0, m), nullptr, nullptr);
    }
    return lp.mean() + ld_val;
  };

  Vector params = flow_pack_params(flow);
  Vector m1 = Vector::Zero(params.size()), m2 = Vector::Zero(params.size());
  constexpr double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  long long step = 0;

  TrainResult result;
  result.flow = flow;
  double best = val_logp(flow);
  int since_best = 0;
  Rng shuffle_rng(derive_seed(cfg.seed, "flow-shuffle"));
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n_train));
  std::iota(idx.begin(), idx.end(), 0);
  const Eigen::Index B = std::min<Eigen::Index>(cfg.batch, n_train);
  Matrix batch(B, D);

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const double lr = cfg.learn_rate * (cfg.final_lr_frac + (1.0 - cfg.final_lr_frac) * 0.5 *
                                                                (1.0 + std::cos(std::numbers::pi * epoch / cfg.max_epochs)));
    std::shuffle(idx.begin(), idx.end(), shuffle_rng);
    double epoch_sum = 0.0;
    Eigen::Index epoch_rows = 0;
    for (Eigen::Index b0 = 0; b0 + B <= n_train; b0 += B) {
      for (Eigen::Index i = 0; i < B; ++i) batch.row(i) = pre_train.U.row(idx[static_cast<std::size_t>(b0 + i)]);
      Vector g;
      const double lp = layers_mean_logp_grad(flow, batch, g);
      if (!std::isfinite(lp) || !g.allFinite()) {
        throw NonFiniteLoss("flow training diverged at epoch " + std::to_string(epoch) + " (mean logp " +
                            format_double(lp) + ")");
      }
      epoch_sum += lp * static_cast<double>(B);
      epoch_rows += B;
      const double gn = g.norm();
      if (gn > cfg.clip_norm) g *= cfg.clip_norm / gn;
      // Ascent on the mean log-density.
      ++step;
      m1 = beta1 * m1 + (1.0 - beta1) * g;
      m2 = beta2 * m2 + (1.0 - beta2) * g.cwiseAbs2();
      const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
      params.array() += lr * (m1.array() / c1) / ((m2.array() / c2).sqrt() + adam_eps);
      flow_unpack_params(flow, params);
    }
    const double v = val_logp(flow);
    if (!std::isfinite(v)) throw NonFiniteLoss("validation log-density is non-finite at epoch " + std::to_string(epoch));
    result.history.train_logp.push_back(epoch_sum / static_cast<double>(epoch_rows) + ld_train);
    result.history.val_logp.push_back(v);
    if (v > best) {
      best = v;
      result.flow = flow;
      result.history.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      result.history.best_val_logp.push_back(best);
      break;
    }
    result.history.best_val_logp.push_back(best);
  }
  return result;
}

json flow_to_json(const FlowModel& flow) {
  json j;
  j["version"] = FlowModel::kVersion;
  j["dim"] = flow.dim;
  const auto& s = flow.standardizer;
  j["standardizer"] = {{"mean", to_vec(s.mean)},
                       {"scale", to_vec(s.scale)},
                       {"lower", to_vec(s.lower)},
                       {"upper", to_vec(s.upper)}};
  if (!s.marginal.empty()) {
    json marg = json::array();
    for (const auto& chain : s.marginal) {
      json passes = json::array();
      for (const auto& c : chain) {
        passes.push_back({{"centers", to_vec(c.centers)},
                          {"weights", to_vec(c.weights)},
                          {"bandwidth", c.bandwidth},
                          {"tail", {{"weight", c.tail_weight}, {"mean", c.tail_mean}, {"sd", c.tail_sd}}}});
      }
      marg.push_back(passes);
    }
    j["standardizer"]["marginal"] = marg;
  }
  json layers = json::array();
  for (const auto& L : flow.layers) {
    layers.push_back({{"mask", to_vec(L.mask)},
                      {"cond", to_vec(L.cond)},
                      {"weights", json::array({matrix_json(L.W1), matrix_json(L.W2), matrix_json(L.W3)})},
                      {"biases", json::array({to_vec(L.b1), to_vec(L.b2), to_vec(L.b3)})}});
  }
  j["layers"] = layers;
  return j;
}

FlowModel flow_from_json(const json& j) {
  const json& ver = field(j, "version");
  if (!ver.is_number_integer()) throw FormatError("flow file: 'version' must be an integer");
  if (ver.get<int>() != FlowModel::kVersion) {
    throw VersionMismatch("flow file version " + std::to_string(ver.get<int>()) + ", expected " +
                          std::to_string(FlowModel::kVersion));
  }
  FlowModel f;
  f.dim = field(j, "dim").get<int>();
  if (f.dim < 1) throw FormatError("flow file: 'dim' must be positive");
  const json& st = field(j, "standardizer");
  f.standardizer.mean = vector_json(field(st, "mean"), f.dim, "standardizer.mean");
  f.standardizer.scale = vector_json(field(st, "scale"), f.dim, "standardizer.scale");
  Vector lo = vector_json(field(st, "lower"), f.dim, "standardizer.lower");
  Vector hi = vector_json(field(st, "upper"), f.dim, "standardizer.upper");
  // null round-trips as +inf; the lower edge is always -inf in that case.
  for (Eigen::Index i = 0; i < lo.size(); ++i) {
    if (std::isinf(lo[i])) lo[i] = -kInf;
  }
  f.standardizer.lower = lo;
  f.standardizer.upper = hi;
  if (st.contains("marginal")) {
    const json& marg = st.at("marginal");
    if (!marg.is_array() || static_cast<int>(marg.size()) != f.dim) {
      throw FormatError("flow file: 'standardizer.marginal' needs one entry per coordinate");
    }
    for (const auto& passes : marg) {
      if (!passes.is_array()) throw FormatError("flow file: each marginal entry must be an array of passes");
      MarginalChain chain;
      for (const auto& mj : passes) {
        MarginalCdf c;
        const json& cj = field(mj, "centers");
        if (!cj.is_array() || cj.empty()) throw FormatError("flow file: marginal centers must be a non-empty array");
        const auto K = static_cast<Eigen::Index>(cj.size());
        c.centers = vector_json(cj, K, "marginal.centers");
        c.weights = vector_json(field(mj, "weights"), K, "marginal.weights");
        c.bandwidth = json_number(field(mj, "bandwidth"));
        if (mj.contains("tail")) {
          const json& tj = mj.at("tail");
          c.tail_weight = json_number(field(tj, "weight"));
          c.tail_mean = json_number(field(tj, "mean"));
          c.tail_sd = json_number(field(tj, "sd"));
        }
        try {
          c.prepare();
        } catch (const InvalidArgument& e) {
          throw FormatError(std::string("flow file: ") + e.what());
        }
        chain.push_back(std::move(c));
      }
      f.standardizer.marginal.push_back(std::move(chain));
    }
  }
  const json& layers = field(j, "layers");
  if (!layers.is_array()) throw FormatError("flow file: 'layers' must be an array");
  for (const auto& lj : layers) {
    CouplingLayer L;
    L.mask = vector_json(field(lj, "mask"), f.dim, "mask");
    L.cond = vector_json(field(lj, "cond"), f.dim, "cond");
    const json& w = field(lj, "weights");
    const json& b = field(lj, "biases");
    if (!w.is_array() || w.size() != 3 || !b.is_array() || b.size() != 3) {
      throw FormatError("flow file: each layer needs three weight matrices and three bias vectors");
    }
    if (!w[0].is_array() || w[0].empty()) throw FormatError("flow file: empty weight matrix");
    const Eigen::Index H = static_cast<Eigen::Index>(w[0].size());
    L.W1 = matrix_from_json(w[0], H, f.dim, "W1");
    L.W2 = matrix_from_json(w[1], H, H, "W2");
    L.W3 = matrix_from_json(w[2], 2 * f.dim, H, "W3");
    L.b1 = vector_json(b[0], H, "b1");
    L.b2 = vector_json(b[1], H, "b2");
    L.b3 = vector_json(b[2], 2 * f.dim, "b3");
    f.layers.push_back(std::move(L));
  }
  return f;
}

void save_flow(const FlowModel& flow, const std::filesystem::path& path) { write_json(path, flow_to_json(flow)); }

FlowModel load_flow(const std::filesystem::path& path) { return flow_from_json(read_json(path)); }

FlowTarget::FlowTarget(FlowModel flow, std::vector<std::string> names) : flow_(std::move(flow)) {
  if (static_cast<int>(names.size()) != flow_.dim) throw DimensionMismatch("one name per flow coordinate required");
  for (auto& n : names) space_.add(std::move(n), Bound::unbounded(), Block::hyper);
}

double FlowTarget::log_density_grad(const Vector& x, Vector& grad) const {
  FlowEval e = flow_log_density(flow_, x);
  grad = std::move(e.grad);
  return e.logp;
}

}  // namespace mss
