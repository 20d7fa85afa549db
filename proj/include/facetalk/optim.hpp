#pragma once

#include "facetalk/param_store.hpp"

namespace facetalk {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam update on every non-frozen block, then zeroes all
// gradients. Frozen blocks keep their values and moments.
void adam_step(ParamStore& store, const AdamConfig& cfg);

// Euclidean norm over the gradients of non-frozen blocks.
double global_grad_norm(const ParamStore& store);

// Rescales non-frozen gradients so their global norm is at most `max_norm`.
// Returns the norm before clipping.
double clip_grad_norm(ParamStore& store, double max_norm);

}  // namespace facetalk
