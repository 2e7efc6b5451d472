#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "ivf/imaging.hpp"

namespace ivf::events {

struct Event {
  double t = 0.0;
  int x = 0;
  int y = 0;
  int p = 1;

  friend bool operator==(const Event&, const Event&) = default;
};

// Time-sorted polarity events over a fixed sensor grid and exposure [t_start, t_end].
class EventStream {
 public:
  EventStream() = default;
  EventStream(int width, int height, double t_start, double t_end, std::vector<Event> events = {});

  int width() const { return width_; }
  int height() const { return height_; }
  double t_start() const { return t_start_; }
  double t_end() const { return t_end_; }
  double span() const { return t_end_ - t_start_; }

  const std::vector<Event>& events() const { return events_; }
  std::size_t size() const { return events_.size(); }
  bool empty() const { return events_.empty(); }

  friend bool operator==(const EventStream&, const EventStream&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  double t_start_ = 0.0;
  double t_end_ = 1.0;
  std::vector<Event> events_;
};

enum class Direction { After, Before };

struct SimulationOptions {
  double threshold_c = 0.1;
  double log_eps = 1e-3;
  // The ideal simulator is deterministic; the seed is carried for parity with noisy variants.
  std::uint64_t seed = 0;
};

// Reference-level crossing simulator over linearly interpolated log intensity.
EventStream simulate_events(const imaging::FrameSequence& frames, const SimulationOptions& options);

// Adds floor(level * |events|) uniformly distributed noise events.
EventStream inject_noise(const EventStream& stream, double level, std::uint64_t seed);

// Events with t in [t0, t1); the returned stream spans [t0, t1].
EventStream slice(const EventStream& stream, double t0, double t1);

// Nearest `count` events with t >= t (After) or t < t (Before), returned in time order.
EventStream nearest_events(const EventStream& stream, double t, std::size_t count, Direction direction);

// Keeps events in the closed window [t0, t1] and maps that window affinely onto [0, 1].
EventStream normalize_window(const EventStream& stream, double t0, double t1);

// Mirrors x -> width - 1 - x.
EventStream flip_horizontal(const EventStream& stream);

void write_csv(const EventStream& stream, const std::filesystem::path& path);
EventStream read_csv(const std::filesystem::path& path, int width, int height, double t_start = 0.0,
                     double t_end = 1.0);

}  // namespace ivf::events
