#include <algorithm>
#include <cmath>
#include <numeric>

#include "ivf/error.hpp"
#include "ivf/training.hpp"

namespace ivf::train {

void SampleConfig::validate() const {
  if (width <= 0 || height <= 0) throw InvalidArgument("sample: sensor size must be positive");
  if (latent_frames < 2) throw InvalidArgument("sample: need at least two latent frames");
  if (oversample < 1) throw InvalidArgument("sample: oversample must be at least 1");
  if (references < 2 || references > latent_frames)
    throw InvalidArgument("sample: references must lie in [2, latent_frames]");
}

std::vector<int> referenced_indices(int latent_frames, int references) {
  if (references < 2 || references > latent_frames)
    throw InvalidArgument("referenced_indices: references must lie in [2, latent_frames]");
  std::vector<int> out;
  for (int k = 0; k < references; ++k)
    out.push_back(static_cast<int>(std::lround(static_cast<double>(k) * (latent_frames - 1) / (references - 1))));
  return out;
}

Sample make_sample(const imaging::SceneSpec& scene, const SampleConfig& cfg) {
  cfg.validate();
  scene.validate();
  const int n = cfg.latent_frames;
  std::vector<imaging::Frame> latents;
  for (int k = 0; k < n; ++k) {
    const double t = static_cast<double>(k) / (n - 1);
    auto f = imaging::render_scene(scene, t, cfg.width, cfg.height);
    f.set_timestamp(t);
    latents.push_back(std::move(f));
  }
  const int dense_n = (n - 1) * cfg.oversample + 1;
  std::vector<imaging::Frame> dense;
  dense.reserve(static_cast<std::size_t>(dense_n));
  for (int j = 0; j < dense_n; ++j) {
    const double t = static_cast<double>(j) / (dense_n - 1);
    auto f = imaging::render_scene(scene, t, cfg.width, cfg.height);
    f.set_timestamp(t);
    dense.push_back(std::move(f));
  }
  auto stream = events::simulate_events(imaging::FrameSequence(std::move(dense)), cfg.sim);
  if (cfg.noise_level > 0.0) stream = events::inject_noise(stream, cfg.noise_level, cfg.noise_seed);

  Sample s{imaging::synthesize_blur(latents), std::move(stream), {}, {}, imaging::FrameSequence(latents), scene};
  for (int idx : referenced_indices(n, cfg.references)) {
    s.ref_times.push_back(latents[static_cast<std::size_t>(idx)].timestamp());
    s.ref_frames.push_back(latents[static_cast<std::size_t>(idx)]);
  }
  return s;
}

Sample Sample::flipped() const {
  std::vector<imaging::Frame> lat;
  for (const auto& f : latents) lat.push_back(f.flipped_horizontal());
  std::vector<imaging::Frame> refs;
  for (const auto& f : ref_frames) refs.push_back(f.flipped_horizontal());
  return Sample{blur.flipped_horizontal(), events::flip_horizontal(stream), ref_times, std::move(refs),
                imaging::FrameSequence(std::move(lat)), scene.flipped_horizontal(blur.width())};
}

std::vector<std::size_t> nearest_references(const std::vector<double>& ref_times, double t, int n) {
  if (n < 1) throw InvalidArgument("nearest_references: N must be at least 1");
  if (static_cast<std::size_t>(n) > ref_times.size())
    throw InvalidArgument("nearest_references: N exceeds the number of referenced timestamps");
  std::vector<std::size_t> order(ref_times.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double da = std::abs(ref_times[a] - t), db = std::abs(ref_times[b] - t);
    if (da != db) return da < db;
    return ref_times[a] < ref_times[b];
  });
  order.resize(static_cast<std::size_t>(n));
  std::sort(order.begin(), order.end());
  return order;
}

std::vector<imaging::Frame> motion_targets(const Sample& sample, double t_prime, int n) {
  if (!(t_prime >= 0.0 && t_prime <= 1.0)) throw InvalidArgument("motion_targets: t' must lie in [0, 1]");
  if (std::find(sample.ref_times.begin(), sample.ref_times.end(), t_prime) != sample.ref_times.end())
    throw InvalidArgument("motion_targets: t' is a referenced timestamp");
  std::vector<imaging::Frame> out;
  const int w = sample.blur.width(), h = sample.blur.height();
  for (std::size_t k : nearest_references(sample.ref_times, t_prime, n)) {
    const auto flow = imaging::analytic_flow(sample.scene, sample.ref_times[k], t_prime, w, h);
    auto f = imaging::warp(sample.ref_frames[k], flow);
    f.set_timestamp(t_prime);
    out.push_back(std::move(f));
  }
  return out;
}

}  // namespace ivf::train
