#pragma once

// Baseline sampling schemes expressed as targets over standardized
// variables: naive (identity), prior-reparameterized and
// conditional-posterior-reparameterized. Each exposes the map back to the
// native parameters and its log-Jacobian so that
//   inner_logp(u) - log_jacobian(u) == native_logp(pushforward(u)).

#include <memory>
#include <string>
#include <vector>

#include "mss/funnels.hpp"
#include "mss/hmc.hpp"
#include "mss/pta_models.hpp"

namespace mss {

enum class Scheme { ns, prs, cprs };

Scheme parse_scheme(const std::string& name);
std::string scheme_name(Scheme s);

class ReparamModel : public TargetModel {
 public:
  /// Standardized draw -> native parameter vector.
  virtual Vector pushforward(const Vector& u) const = 0;
  /// log |det d(native) / du| at u.
  virtual double log_jacobian(const Vector& u) const = 0;
  virtual const TargetModel& native() const = 0;
};

using ReparamPtr = std::shared_ptr<const ReparamModel>;

/// Identity wrapper so every scheme shares one harness.
ReparamPtr ns_target(ModelPtr model);

/// Funnel family: y = hyper_sigma * y_hat, x_i = e^{y/2} x_hat_i.
/// Power law: a = sqrt(phi(eta)) * a_hat, hyper-parameters untouched.
/// Generalized funnel: x_i = z_i x_hat_i. Free spectral: a = sqrt(rho) * a_hat.
/// Anything else throws UnsupportedModel.
ReparamPtr prs_target(ModelPtr model);

/// a = mean(eta) + L(eta) a_hat with the exact Gaussian conditional
/// p(a | eta, d). Defined for the likelihood funnel (y = hyper_sigma * y_hat,
/// conditional independent per x_i), the power-law and free-spectral models.
ReparamPtr cprs_target(std::shared_ptr<const LikelihoodFunnelModel> model);
ReparamPtr cprs_target(std::shared_ptr<const PowerLawModel> model);
ReparamPtr cprs_target(std::shared_ptr<const FreeSpectralModel> model);

ReparamPtr make_scheme_target(Scheme scheme, ModelPtr model);

/// Maps every draw of an inner chain to native coordinates; logp becomes the
/// native log-density.
Chain push_chain(const ReparamModel& target, const Chain& inner);

}  // namespace mss
