#include "ivf/edi.hpp"

#include <algorithm>
#include <cmath>

#include "ivf/error.hpp"

namespace ivf::edi {

namespace {

// Events bucketed per pixel in time order (CSR layout).
struct PixelEvents {
  std::vector<std::size_t> offsets;
  std::vector<double> times;
  std::vector<int> polarities;

  explicit PixelEvents(const events::EventStream& stream) {
    const std::size_t n_pix = static_cast<std::size_t>(stream.width()) * stream.height();
    offsets.assign(n_pix + 1, 0);
    for (const auto& e : stream.events()) ++offsets[static_cast<std::size_t>(e.y) * stream.width() + e.x + 1];
    for (std::size_t i = 0; i < n_pix; ++i) offsets[i + 1] += offsets[i];
    times.resize(stream.size());
    polarities.resize(stream.size());
    std::vector<std::size_t> cursor(offsets.begin(), offsets.end() - 1);
    for (const auto& e : stream.events()) {
      const std::size_t slot = cursor[static_cast<std::size_t>(e.y) * stream.width() + e.x]++;
      times[slot] = e.t;
      polarities[slot] = e.p;
    }
  }
};

std::vector<double> midpoint_samples(const events::EventStream& stream, int n) {
  std::vector<double> s(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) s[static_cast<std::size_t>(j)] = stream.t_start() + (j + 0.5) / n * stream.span();
  return s;
}

imaging::Frame denominator(const PixelEvents& pe, const events::EventStream& stream, double t, double c,
                           const std::vector<double>& samples) {
  const int w = stream.width();
  const int h = stream.height();
  imaging::Frame out(w, h, 1.0, t);
  auto px = out.pixels();
  const double inv_n = 1.0 / static_cast<double>(samples.size());
  for (std::size_t i = 0; i < px.size(); ++i) {
    const std::size_t begin = pe.offsets[i];
    const std::size_t end = pe.offsets[i + 1];
    if (begin == end) continue;
    // Cumulative polarity up to and including t.
    long at_t = 0;
    for (std::size_t k = begin; k < end && pe.times[k] <= t; ++k) at_t += pe.polarities[k];
    long running = 0;
    std::size_t k = begin;
    double acc = 0.0;
    for (double s : samples) {
      while (k < end && pe.times[k] <= s) running += pe.polarities[k++];
      acc += std::exp(c * static_cast<double>(running - at_t));
    }
    px[i] = acc * inv_n;
  }
  return out;
}

void check_threshold(double c) {
  if (!(c > 0.0)) throw InvalidArgument("edi: threshold c must be positive");
}

imaging::Frame deblur_with(const imaging::Frame& blur, const imaging::Frame& d, double log_eps,
                           EdiDiagnostics* diagnostics) {
  imaging::Frame out(blur.width(), blur.height(), 0.0, d.timestamp());
  auto o = out.pixels();
  const auto b = blur.pixels();
  const auto dp = d.pixels();
  EdiDiagnostics diag;
  for (std::size_t i = 0; i < o.size(); ++i) {
    const double v = std::exp(std::log(b[i] + log_eps) - std::log(dp[i])) - log_eps;
    if (!std::isfinite(v)) throw NumericalError("edi_deblur: non-finite reconstruction");
    if (v < 0.0) ++diag.clipped_low;
    if (v > 1.0) ++diag.clipped_high;
    o[i] = std::clamp(v, 0.0, 1.0);
  }
  if (diagnostics) *diagnostics = diag;
  return out;
}

void check_inputs(const imaging::Frame& blur, const events::EventStream& stream, const EdiOptions& options) {
  if (blur.width() != stream.width() || blur.height() != stream.height())
    throw InvalidArgument("edi_deblur: blur and event sensor dimensions differ");
  if (options.n_samples < 2) throw InvalidArgument("edi: n_samples must be at least 2");
  if (!(options.log_eps > 0.0)) throw InvalidArgument("edi: log_eps must be positive");
}

}  // namespace

imaging::Frame edi_denominator(const events::EventStream& stream, double t, double c, int n_samples) {
  check_threshold(c);
  if (n_samples < 2) throw InvalidArgument("edi_denominator: n_samples must be at least 2");
  return denominator(PixelEvents(stream), stream, t, c, midpoint_samples(stream, n_samples));
}

imaging::Frame edi_deblur(const imaging::Frame& blur, const events::EventStream& stream, double t, double c,
                          const EdiOptions& options, EdiDiagnostics* diagnostics) {
  check_inputs(blur, stream, options);
  check_threshold(c);
  const auto d = denominator(PixelEvents(stream), stream, t, c, midpoint_samples(stream, options.n_samples));
  return deblur_with(blur, d, options.log_eps, diagnostics);
}

double reblur_error(const imaging::Frame& blur, const events::EventStream& stream, double c, int reconstructions,
                    const EdiOptions& options) {
  check_inputs(blur, stream, options);
  check_threshold(c);
  if (reconstructions < 1) throw InvalidArgument("reblur_error: need at least one reconstruction");
  const PixelEvents pe(stream);
  const auto samples = midpoint_samples(stream, options.n_samples);
  const auto times = midpoint_samples(stream, reconstructions);
  std::vector<imaging::Frame> latents;
  latents.reserve(times.size());
  for (double t : times) latents.push_back(deblur_with(blur, denominator(pe, stream, t, c, samples), options.log_eps, nullptr));
  return imaging::mse(imaging::synthesize_blur(latents), blur);
}

double estimate_threshold(const imaging::Frame& blur, const events::EventStream& stream,
                          const std::vector<double>& c_grid, int reconstructions, const EdiOptions& options) {
  if (c_grid.empty()) throw InvalidArgument("estimate_threshold: empty threshold grid");
  for (std::size_t i = 1; i < c_grid.size(); ++i)
    if (!(c_grid[i] > c_grid[i - 1])) throw InvalidArgument("estimate_threshold: grid must be ascending");
  double best_c = c_grid.front();
  double best_err = reblur_error(blur, stream, best_c, reconstructions, options);
  for (std::size_t i = 1; i < c_grid.size(); ++i) {
    const double err = reblur_error(blur, stream, c_grid[i], reconstructions, options);
    if (err < best_err) {
      best_err = err;
      best_c = c_grid[i];
    }
  }
  return best_c;
}

}  // namespace ivf::edi
