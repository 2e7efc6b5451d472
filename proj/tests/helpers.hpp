#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "ivf/events.hpp"
#include "ivf/imaging.hpp"

namespace ivf::test {

inline events::EventStream random_stream(std::mt19937_64& rng, int w, int h, std::size_t n) {
  std::uniform_real_distribution<double> ut(0.0, 1.0);
  std::uniform_int_distribution<int> ux(0, w - 1), uy(0, h - 1), up(0, 1);
  std::vector<events::Event> ev(n);
  for (auto& e : ev) e = {ut(rng), ux(rng), uy(rng), up(rng) ? 1 : -1};
  std::stable_sort(ev.begin(), ev.end(), [](const auto& a, const auto& b) { return a.t < b.t; });
  return events::EventStream(w, h, 0.0, 1.0, std::move(ev));
}

inline imaging::Frame random_frame(std::mt19937_64& rng, int w, int h) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> px(static_cast<std::size_t>(w) * h);
  for (auto& v : px) v = u(rng);
  return imaging::Frame(w, h, std::move(px));
}

inline std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "ivf_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

// Moving bright square on a dark background.
inline imaging::SceneSpec moving_square_scene() {
  imaging::SceneSpec scene;
  scene.background = 0.2;
  imaging::Primitive square;
  square.shape = imaging::Shape::Rectangle;
  square.intensity = 0.8;
  square.x0 = 6.0;
  square.y0 = 10.0;
  square.w = 10.0;
  square.h = 10.0;
  square.vx = 10.0;
  square.vy = 2.0;
  scene.primitives.push_back(square);
  return scene;
}

}  // namespace ivf::test
