#include "facetalk/optim.hpp"

#include <cmath>
#include <string>

#include "facetalk/error.hpp"

namespace facetalk {

void adam_step(ParamStore& store, const AdamConfig& cfg) {
  if (!(cfg.lr > 0.0)) {
    throw ConfigError("adam: learning rate must be positive, got " +
                      std::to_string(cfg.lr));
  }
  for (std::size_t i = 0; i < store.size(); ++i) {
    ParamEntry& e = store.entry(i);
    if (!e.frozen) {
      ++e.step;
      const double t = static_cast<double>(e.step);
      const double c1 = 1.0 - std::pow(cfg.beta1, t);
      const double c2 = 1.0 - std::pow(cfg.beta2, t);
      for (std::size_t k = 0; k < e.value.size(); ++k) {
        const double g = e.grad[k];
        double& m = e.first_moment[k];
        double& v = e.second_moment[k];
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
        e.value[k] -= cfg.lr * (m / c1) / (std::sqrt(v / c2) + cfg.eps);
      }
    }
    e.grad.fill(0.0);
  }
}

double global_grad_norm(const ParamStore& store) {
  double s = 0.0;
  for (std::size_t i = 0; i < store.size(); ++i) {
    const ParamEntry& e = store.entry(i);
    if (e.frozen) continue;
    for (double g : e.grad.values()) s += g * g;
  }
  return std::sqrt(s);
}

double clip_grad_norm(ParamStore& store, double max_norm) {
  const double norm = global_grad_norm(store);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
  if (norm > max_norm && norm > 0.0) {
    const double f = max_norm / norm;
    for (std::size_t i = 0; i < store.size(); ++i) {
      ParamEntry& e = store.entry(i);
      if (e.frozen) continue;
      for (double& g : e.grad.values()) g *= f;
    }
  }
  return norm;
}

}  // namespace facetalk
