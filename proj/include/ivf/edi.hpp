#pragma once

#include <cstddef>
#include <vector>

#include "ivf/events.hpp"
#include "ivf/imaging.hpp"

namespace ivf::edi {

struct EdiOptions {
  int n_samples = 256;
  double log_eps = 1e-3;
};

struct EdiDiagnostics {
  std::size_t clipped_low = 0;
  std::size_t clipped_high = 0;
};

// D(x, y) = (1/n) sum_j exp(c * e(t -> s_j)) over midpoint samples s_j of the exposure,
// e being the signed event count at the pixel between t and s_j (negated when s_j < t).
imaging::Frame edi_denominator(const events::EventStream& stream, double t, double c, int n_samples);

// I(t) = clamp(exp(log(B + eps) - log D(t)) - eps, 0, 1).
imaging::Frame edi_deblur(const imaging::Frame& blur, const events::EventStream& stream, double t, double c,
                          const EdiOptions& options = {}, EdiDiagnostics* diagnostics = nullptr);

// Threshold from an ascending grid minimising the reblur error between the blur and the mean
// of `reconstructions` EDI latents at midpoint timestamps. Ties go to the smaller threshold.
double estimate_threshold(const imaging::Frame& blur, const events::EventStream& stream,
                          const std::vector<double>& c_grid, int reconstructions = 31,
                          const EdiOptions& options = {});

// Mean squared reblur error for one threshold.
double reblur_error(const imaging::Frame& blur, const events::EventStream& stream, double c, int reconstructions,
                    const EdiOptions& options = {});

}  // namespace ivf::edi
