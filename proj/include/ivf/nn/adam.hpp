#pragma once

#include <cstdint>

#include "ivf/nn/params.hpp"

namespace ivf::nn {

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct AdamState {
  std::uint64_t step = 0;
  ParamStore<T> m;
  ParamStore<T> v;
};

// One bias-corrected Adam update of every parameter; state moments are created on first use.
template <class T>
void adam_step(ParamStore<T>& params, const ParamStore<T>& grads, AdamState<T>& state, double lr,
               const AdamOptions& options = {});

}  // namespace ivf::nn
