#include "facetalk/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <tuple>

#include "facetalk/error.hpp"
#include "facetalk/rng.hpp"

namespace facetalk {

std::vector<Array> finite_diff_grad(
    ParamStore& store, const std::function<double(const ParamStore&)>& f,
    double eps) {
  if (!(eps > 0.0)) throw NumericError("finite_diff_grad: eps must be positive");
  std::vector<Array> grads;
  grads.reserve(store.size());
  for (std::size_t b = 0; b < store.size(); ++b) {
    Array& value = store.entry(b).value;
    Array g(value.shape());
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double original = value[i];
      value[i] = original + eps;
      const double up = f(store);
      value[i] = original - eps;
      const double down = f(store);
      value[i] = original;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericError("finite_diff_grad: non-finite objective at block '" +
                           store.entry(b).name + "' index " + std::to_string(i));
      }
      g[i] = (up - down) / (2.0 * eps);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

namespace {

struct Evaluation {
  double value;
  std::uint64_t signature;
};

Evaluation evaluate(const LossBuilder& build) {
  Tape tape;
  Var loss = build(tape);
  return {loss.value().item(), tape.branch_signature()};
}

}  // namespace

GradCheckReport check_gradients(const std::vector<ParamStore*>& stores,
                                const LossBuilder& build,
                                const GradCheckOptions& options) {
  for (ParamStore* s : stores) s->zero_grads();
  std::uint64_t base_signature = 0;
  {
    Tape tape;
    Var loss = build(tape);
    base_signature = tape.branch_signature();
    tape.backward(loss);
  }

  // (store, block, coordinate) of every trainable scalar.
  std::vector<std::tuple<std::size_t, std::size_t, std::size_t>> blocks;
  std::size_t total = 0;
  for (std::size_t s = 0; s < stores.size(); ++s) {
    for (std::size_t b = 0; b < stores[s]->size(); ++b) {
      const ParamEntry& e = stores[s]->entry(b);
      if (e.frozen || e.value.size() == 0) continue;
      blocks.emplace_back(s, b, total);
      total += e.value.size();
    }
  }

  GradCheckReport report;
  if (total == 0) return report;
  Rng rng(options.seed);
  std::set<std::size_t> visited;
  const std::size_t budget = std::min(total, options.samples);
  while (report.checked < budget && visited.size() < total) {
    const std::size_t flat = rng.index(total);
    if (!visited.insert(flat).second) continue;
    auto it = std::upper_bound(
        blocks.begin(), blocks.end(), flat,
        [](std::size_t v, const auto& blk) { return v < std::get<2>(blk); });
    const auto [s, b, offset] = *std::prev(it);
    ParamEntry& e = stores[s]->entry(b);
    const std::size_t k = flat - offset;
    const double original = e.value[k];

    e.value[k] = original + options.kink_probe;
    const bool kink_up = evaluate(build).signature != base_signature;
    e.value[k] = original - options.kink_probe;
    const bool kink_down = evaluate(build).signature != base_signature;
    if (kink_up || kink_down) {
      e.value[k] = original;
      ++report.skipped_kinks;
      continue;
    }

    e.value[k] = original + options.eps;
    const double up = evaluate(build).value;
    e.value[k] = original - options.eps;
    const double down = evaluate(build).value;
    e.value[k] = original;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("check_gradients: non-finite objective");
    }
    const double numeric = (up - down) / (2.0 * options.eps);
    const double analytic = e.grad[k];
    const double denom =
        std::max({std::fabs(analytic), std::fabs(numeric), options.grad_floor});
    const double rel = std::fabs(analytic - numeric) / denom;
    report.max_rel_error = std::max(report.max_rel_error, rel);
    ++report.checked;
    if (rel >= options.tolerance) {
      report.failures.push_back({e.name, k, analytic, numeric, rel});
    }
  }
  for (ParamStore* s : stores) s->zero_grads();
  return report;
}

}  // namespace facetalk
