#include "ivf/representation.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "ivf/error.hpp"

namespace ivf::repr {

EventTensor stack_events(const events::EventStream& stream, int segments) {
  if (segments < 1) throw InvalidArgument("stack_events: segments must be at least 1");
  if (stream.width() <= 0 || stream.height() <= 0) throw InvalidArgument("stack_events: empty sensor");
  EventTensor out({2 * segments, stream.height(), stream.width()}, 0.0);
  const double span = stream.span();
  for (const auto& e : stream.events()) {
    const double u = span > 0.0 ? (e.t - stream.t_start()) / span : 0.0;
    const int seg = std::min(static_cast<int>(std::floor(u * segments)), segments - 1);
    out.at(2 * seg, e.y, e.x) += e.p;
    // Events are time-sorted, so the last write is the most recent event.
    out.at(2 * seg + 1, e.y, e.x) = u;
  }
  return out;
}

std::vector<double> fourier_encode(double t, int frequencies) {
  if (frequencies < 1) throw InvalidArgument("fourier_encode: L must be at least 1");
  if (!(t >= 0.0 && t <= 1.0)) throw InvalidArgument("fourier_encode: t must lie in [0, 1]");
  std::vector<double> out(static_cast<std::size_t>(2 * frequencies));
  double freq = 1.0;
  for (int l = 0; l < frequencies; ++l, freq *= 2.0) {
    const double arg = freq * std::numbers::pi * t;
    out[static_cast<std::size_t>(2 * l)] = std::cos(arg);
    out[static_cast<std::size_t>(2 * l + 1)] = std::sin(arg);
  }
  return out;
}

SubtleSegmentTensor subtle_segments(const events::EventStream& stream, double t, const std::vector<int>& counts) {
  if (counts.empty()) throw InvalidArgument("subtle_segments: P list must not be empty");
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (counts[i] <= 0) throw InvalidArgument("subtle_segments: P values must be positive");
    if (i > 0 && counts[i] <= counts[i - 1]) throw InvalidArgument("subtle_segments: P list must be ascending");
  }
  const int n = static_cast<int>(counts.size());
  SubtleSegmentTensor out({2 * n, stream.height(), stream.width()}, 0.0);
  for (int k = 0; k < n; ++k) {
    const auto p = static_cast<std::size_t>(counts[static_cast<std::size_t>(k)]);
    for (auto [dir, ch] : {std::pair{events::Direction::After, 2 * k}, std::pair{events::Direction::Before, 2 * k + 1}}) {
      const auto subset = events::nearest_events(stream, t, p, dir);
      for (const auto& e : subset.events()) out.at(ch, e.y, e.x) += e.p;
    }
  }
  return out;
}

}  // namespace ivf::repr
