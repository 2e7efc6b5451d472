#include "ivf/events.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <random>
#include <string>
#include <string_view>

#include "ivf/error.hpp"

namespace ivf::events {

namespace {

bool by_time(const Event& a, const Event& b) { return a.t < b.t; }

}  // namespace

EventStream::EventStream(int width, int height, double t_start, double t_end, std::vector<Event> events)
    : width_(width), height_(height), t_start_(t_start), t_end_(t_end), events_(std::move(events)) {
  if (width < 0 || height < 0) throw InvalidArgument("EventStream: negative sensor size");
  if (!(t_start <= t_end)) throw InvalidArgument("EventStream: t_start > t_end");
  for (std::size_t i = 0; i < events_.size(); ++i) {
    const Event& e = events_[i];
    if (e.p != 1 && e.p != -1) throw InvalidArgument("EventStream: polarity must be +1 or -1");
    if (e.x < 0 || e.x >= width || e.y < 0 || e.y >= height) throw InvalidArgument("EventStream: event off sensor");
    if (!(e.t >= t_start && e.t <= t_end)) throw InvalidArgument("EventStream: event outside exposure");
    if (i > 0 && e.t < events_[i - 1].t) throw InvalidArgument("EventStream: events not sorted by time");
  }
}

EventStream simulate_events(const imaging::FrameSequence& frames, const SimulationOptions& options) {
  if (frames.size() < 2) throw InvalidArgument("simulate_events: need at least two frames");
  if (!(options.threshold_c > 0.0)) throw InvalidArgument("simulate_events: threshold must be positive");
  if (!(options.log_eps > 0.0)) throw InvalidArgument("simulate_events: log_eps must be positive");
  const int w = frames.width();
  const int h = frames.height();
  const std::size_t n_pix = static_cast<std::size_t>(w) * h;
  for (const auto& f : frames)
    for (double v : f.pixels())
      if (!std::isfinite(v)) throw NumericalError("simulate_events: non-finite pixel");

  const double c = options.threshold_c;
  auto log_of = [&](double v) { return std::log(v + options.log_eps); };

  std::vector<double> reference(n_pix);
  {
    const auto px = frames[0].pixels();
    for (std::size_t i = 0; i < n_pix; ++i) reference[i] = log_of(px[i]);
  }

  std::vector<Event> out;
  for (std::size_t k = 0; k + 1 < frames.size(); ++k) {
    const auto a = frames[k].pixels();
    const auto b = frames[k + 1].pixels();
    const double t0 = frames[k].timestamp();
    const double dt = frames[k + 1].timestamp() - t0;
    for (std::size_t i = 0; i < n_pix; ++i) {
      const double l0 = log_of(a[i]);
      const double l1 = log_of(b[i]);
      if (l1 == l0) continue;
      const int x = static_cast<int>(i % w);
      const int y = static_cast<int>(i / w);
      double& ref = reference[i];
      if (l1 > l0) {
        while (l1 >= ref + c) {
          ref += c;
          out.push_back({t0 + (ref - l0) / (l1 - l0) * dt, x, y, 1});
        }
      } else {
        while (l1 <= ref - c) {
          ref -= c;
          out.push_back({t0 + (ref - l0) / (l1 - l0) * dt, x, y, -1});
        }
      }
    }
  }
  const double t_start = frames[0].timestamp();
  const double t_end = frames[frames.size() - 1].timestamp();
  for (auto& e : out) e.t = std::clamp(e.t, t_start, t_end);
  std::stable_sort(out.begin(), out.end(), by_time);
  return EventStream(w, h, t_start, t_end, std::move(out));
}

EventStream inject_noise(const EventStream& stream, double level, std::uint64_t seed) {
  if (!(level >= 0.0)) throw InvalidArgument("inject_noise: level must be non-negative");
  if (level > 10.0) throw InvalidArgument("inject_noise: level must be at most 10");
  if (level > 0.0 && (stream.width() == 0 || stream.height() == 0))
    throw InvalidArgument("inject_noise: empty sensor");
  const auto count = static_cast<std::size_t>(std::floor(level * static_cast<double>(stream.size())));
  std::vector<Event> merged = stream.events();
  merged.reserve(merged.size() + count);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ut(stream.t_start(), stream.t_end());
  std::uniform_int_distribution<int> ux(0, std::max(stream.width() - 1, 0));
  std::uniform_int_distribution<int> uy(0, std::max(stream.height() - 1, 0));
  std::bernoulli_distribution up(0.5);
  for (std::size_t i = 0; i < count; ++i) {
    Event e;
    e.t = std::min(ut(rng), stream.t_end());
    e.x = ux(rng);
    e.y = uy(rng);
    e.p = up(rng) ? 1 : -1;
    merged.push_back(e);
  }
  std::stable_sort(merged.begin(), merged.end(), by_time);
  return EventStream(stream.width(), stream.height(), stream.t_start(), stream.t_end(), std::move(merged));
}

EventStream slice(const EventStream& stream, double t0, double t1) {
  if (t0 > t1) throw InvalidArgument("slice: t0 > t1");
  if (t0 < stream.t_start() || t1 > stream.t_end()) throw InvalidArgument("slice: interval outside exposure");
  const auto& ev = stream.events();
  const Event lo{t0}, hi{t1};
  auto first = std::lower_bound(ev.begin(), ev.end(), lo, by_time);
  auto last = std::lower_bound(first, ev.end(), hi, by_time);
  return EventStream(stream.width(), stream.height(), t0, t1, std::vector<Event>(first, last));
}

EventStream nearest_events(const EventStream& stream, double t, std::size_t count, Direction direction) {
  if (count == 0) throw InvalidArgument("nearest_events: P must be positive");
  if (t < stream.t_start() || t > stream.t_end()) throw InvalidArgument("nearest_events: t outside exposure");
  const auto& ev = stream.events();
  const auto split = std::lower_bound(ev.begin(), ev.end(), Event{t}, by_time);
  std::vector<Event> picked;
  if (direction == Direction::After) {
    const auto n = std::min<std::size_t>(count, static_cast<std::size_t>(ev.end() - split));
    picked.assign(split, split + static_cast<std::ptrdiff_t>(n));
  } else {
    const auto n = std::min<std::size_t>(count, static_cast<std::size_t>(split - ev.begin()));
    picked.assign(split - static_cast<std::ptrdiff_t>(n), split);
  }
  return EventStream(stream.width(), stream.height(), stream.t_start(), stream.t_end(), std::move(picked));
}

EventStream normalize_window(const EventStream& stream, double t0, double t1) {
  if (!(t0 < t1)) throw InvalidArgument("normalize_window: empty window");
  std::vector<Event> kept;
  const double scale = 1.0 / (t1 - t0);
  for (const auto& e : stream.events()) {
    if (e.t < t0 || e.t > t1) continue;
    Event n = e;
    n.t = std::clamp((e.t - t0) * scale, 0.0, 1.0);
    kept.push_back(n);
  }
  return EventStream(stream.width(), stream.height(), 0.0, 1.0, std::move(kept));
}

EventStream flip_horizontal(const EventStream& stream) {
  std::vector<Event> out = stream.events();
  for (auto& e : out) e.x = stream.width() - 1 - e.x;
  return EventStream(stream.width(), stream.height(), stream.t_start(), stream.t_end(), std::move(out));
}

void write_csv(const EventStream& stream, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "t,x,y,p\n";
  char buf[64];
  for (const auto& e : stream.events()) {
    auto res = std::to_chars(buf, buf + sizeof(buf), e.t);
    out.write(buf, res.ptr - buf);
    out << ',' << e.x << ',' << e.y << ',' << e.p << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

namespace {

template <class T>
bool parse_field(std::string_view field, T& value) {
  const auto* end = field.data() + field.size();
  auto res = std::from_chars(field.data(), end, value);
  return res.ec == std::errc() && res.ptr == end;
}

}  // namespace

EventStream read_csv(const std::filesystem::path& path, int width, int height, double t_start, double t_end) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(in, line)) throw ParseError("missing header", line_no);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "t,x,y,p") throw ParseError("expected header 't,x,y,p'", line_no);

  std::vector<Event> events;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::string_view rest(line);
    std::string_view fields[4];
    for (int f = 0; f < 4; ++f) {
      const auto comma = rest.find(',');
      if ((f < 3) == (comma == std::string_view::npos)) throw ParseError("expected 4 comma-separated fields", line_no);
      fields[f] = rest.substr(0, comma);
      rest = f < 3 ? rest.substr(comma + 1) : std::string_view{};
    }
    Event e;
    if (!parse_field(fields[0], e.t) || !std::isfinite(e.t)) throw ParseError("malformed timestamp", line_no);
    if (!parse_field(fields[1], e.x) || !parse_field(fields[2], e.y)) throw ParseError("malformed coordinate", line_no);
    if (!parse_field(fields[3], e.p) || (e.p != 1 && e.p != -1))
      throw ParseError("polarity must be 1 or -1", line_no);
    if (e.x < 0 || e.x >= width || e.y < 0 || e.y >= height) throw ParseError("coordinate outside sensor", line_no);
    if (e.t < t_start || e.t > t_end) throw ParseError("timestamp outside exposure", line_no);
    if (!events.empty() && e.t < events.back().t) throw ParseError("timestamps not sorted", line_no);
    events.push_back(e);
  }
  return EventStream(width, height, t_start, t_end, std::move(events));
}

}  // namespace ivf::events
