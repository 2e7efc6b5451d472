#include "ivf/imaging.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "ivf/error.hpp"

namespace ivf::imaging {

Frame::Frame(int width, int height, double fill, double timestamp)
    : width_(width), height_(height), pixels_(static_cast<std::size_t>(width) * height, fill), timestamp_(timestamp) {
  if (width < 0 || height < 0) throw InvalidArgument("Frame: negative dimensions");
}

Frame::Frame(int width, int height, std::vector<double> pixels, double timestamp)
    : width_(width), height_(height), pixels_(std::move(pixels)), timestamp_(timestamp) {
  if (width < 0 || height < 0) throw InvalidArgument("Frame: negative dimensions");
  if (pixels_.size() != static_cast<std::size_t>(width) * height)
    throw InvalidArgument("Frame: pixel count does not match dimensions");
  for (double v : pixels_)
    if (!std::isfinite(v)) throw InvalidArgument("Frame: non-finite pixel");
}

Frame Frame::clamped(double lo, double hi) const {
  Frame out = *this;
  for (double& v : out.pixels_) v = std::clamp(v, lo, hi);
  return out;
}

Frame Frame::flipped_horizontal() const {
  Frame out = *this;
  for (int y = 0; y < height_; ++y)
    for (int x = 0; x < width_; ++x) out.at(x, y) = at(width_ - 1 - x, y);
  return out;
}

FrameSequence::FrameSequence(std::vector<Frame> frames) : frames_(std::move(frames)) {
  for (std::size_t i = 1; i < frames_.size(); ++i) {
    if (!frames_[i].same_shape(frames_[0])) throw InvalidArgument("FrameSequence: non-uniform frame size");
    if (!(frames_[i].timestamp() > frames_[i - 1].timestamp()))
      throw InvalidArgument("FrameSequence: timestamps must be strictly increasing");
  }
}

bool Primitive::covers(double x, double y, double t) const {
  const double px = x0 + vx * t;
  const double py = y0 + vy * t;
  if (shape == Shape::Rectangle) return x >= px && x < px + w && y >= py && y < py + h;
  const double ddx = x - px;
  const double ddy = y - py;
  return ddx * ddx + ddy * ddy <= r * r;
}

void SceneSpec::validate() const {
  if (!(background >= 0.0 && background <= 1.0)) throw InvalidArgument("scene: background outside [0,1]");
  for (const auto& p : primitives) {
    if (!(p.intensity >= 0.0 && p.intensity <= 1.0)) throw InvalidArgument("scene: intensity outside [0,1]");
    const bool sized = p.shape == Shape::Rectangle ? (p.w > 0.0 && p.h > 0.0) : p.r > 0.0;
    if (!sized) throw InvalidArgument("scene: primitive size must be positive");
    for (double v : {p.x0, p.y0, p.vx, p.vy})
      if (!std::isfinite(v)) throw InvalidArgument("scene: non-finite primitive field");
  }
}

SceneSpec SceneSpec::flipped_horizontal(int width) const {
  SceneSpec out = *this;
  for (auto& p : out.primitives) {
    p.x0 = p.shape == Shape::Rectangle ? width - p.x0 - p.w : width - p.x0;
    p.vx = -p.vx;
  }
  return out;
}

namespace {

template <class T>
T required(const nlohmann::json& obj, const char* key, const std::string& where) {
  if (!obj.contains(key)) throw ConfigError(where + "." + key + ": missing");
  try {
    return obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

template <class T>
T optional(const nlohmann::json& obj, const char* key, T fallback, const std::string& where) {
  if (!obj.contains(key)) return fallback;
  return required<T>(obj, key, where);
}

}  // namespace

SceneSpec parse_scene(const std::string& json_text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("scene: ") + e.what());
  }
  if (!doc.is_object()) throw ConfigError("scene: expected an object");
  SceneSpec scene;
  scene.background = required<double>(doc, "background", "scene");
  if (doc.contains("primitives")) {
    const auto& list = doc.at("primitives");
    if (!list.is_array()) throw ConfigError("scene.primitives: expected an array");
    for (std::size_t i = 0; i < list.size(); ++i) {
      const std::string where = "scene.primitives[" + std::to_string(i) + "]";
      const auto& item = list[i];
      Primitive p;
      const auto shape = required<std::string>(item, "shape", where);
      if (shape == "rectangle") {
        p.shape = Shape::Rectangle;
        p.w = required<double>(item, "w", where);
        p.h = required<double>(item, "h", where);
      } else if (shape == "disk") {
        p.shape = Shape::Disk;
        p.r = required<double>(item, "r", where);
      } else {
        throw ConfigError(where + ".shape: expected rectangle or disk");
      }
      p.intensity = required<double>(item, "intensity", where);
      p.x0 = required<double>(item, "x0", where);
      p.y0 = required<double>(item, "y0", where);
      p.vx = optional<double>(item, "vx", 0.0, where);
      p.vy = optional<double>(item, "vy", 0.0, where);
      scene.primitives.push_back(p);
    }
  }
  try {
    scene.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
  return scene;
}

std::string dump_scene(const SceneSpec& scene) {
  nlohmann::json doc;
  doc["background"] = scene.background;
  doc["primitives"] = nlohmann::json::array();
  for (const auto& p : scene.primitives) {
    nlohmann::json item{{"intensity", p.intensity}, {"x0", p.x0}, {"y0", p.y0}, {"vx", p.vx}, {"vy", p.vy}};
    if (p.shape == Shape::Rectangle) {
      item["shape"] = "rectangle";
      item["w"] = p.w;
      item["h"] = p.h;
    } else {
      item["shape"] = "disk";
      item["r"] = p.r;
    }
    doc["primitives"].push_back(item);
  }
  return doc.dump(2);
}

SceneSpec read_scene(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open scene file " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_scene(buffer.str());
}

Frame render_scene(const SceneSpec& scene, double t, int width, int height) {
  if (width <= 0 || height <= 0) throw InvalidArgument("render_scene: dimensions must be positive");
  Frame out(width, height, 0.0, t);
  constexpr double kOffsets[2] = {0.25, 0.75};
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      double acc = 0.0;
      for (double oy : kOffsets) {
        for (double ox : kOffsets) {
          double value = scene.background;
          for (const auto& p : scene.primitives)
            if (p.covers(x + ox, y + oy, t)) value = p.intensity;
          acc += value;
        }
      }
      out.at(x, y) = acc / 4.0;
    }
  }
  return out;
}

FlowField analytic_flow(const SceneSpec& scene, double t_a, double t_b, int width, int height) {
  FlowField flow(width, height);
  const double dt = t_b - t_a;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const Primitive* top = nullptr;
      for (const auto& p : scene.primitives)
        if (p.covers(x + 0.5, y + 0.5, t_a)) top = &p;
      if (top == nullptr) continue;
      const std::size_t i = static_cast<std::size_t>(y) * width + x;
      flow.dx[i] = top->vx * dt;
      flow.dy[i] = top->vy * dt;
    }
  }
  return flow;
}

Frame synthesize_blur(std::span<const Frame> frames) {
  if (frames.empty()) throw InvalidArgument("synthesize_blur: empty sequence");
  const Frame& first = frames.front();
  std::vector<double> acc(first.size(), 0.0);
  for (const auto& f : frames) {
    if (!f.same_shape(first)) throw InvalidArgument("synthesize_blur: non-uniform frame size");
    const auto px = f.pixels();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += px[i];
  }
  const double n = static_cast<double>(frames.size());
  for (double& v : acc) v /= n;
  const double mid = 0.5 * (first.timestamp() + frames.back().timestamp());
  return Frame(first.width(), first.height(), std::move(acc), mid);
}

Frame synthesize_blur(const FrameSequence& seq) { return synthesize_blur(std::span<const Frame>(seq.frames())); }

Frame warp(const Frame& frame, const FlowField& flow) {
  if (frame.width() != flow.width || frame.height() != flow.height)
    throw InvalidArgument("warp: frame and flow dimensions differ");
  const int w = frame.width();
  const int h = frame.height();
  Frame out(w, h, 0.0, frame.timestamp());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      const double sx = std::clamp(x - flow.dx[i], 0.0, static_cast<double>(w - 1));
      const double sy = std::clamp(y - flow.dy[i], 0.0, static_cast<double>(h - 1));
      const int x0 = static_cast<int>(std::floor(sx));
      const int y0 = static_cast<int>(std::floor(sy));
      const int x1 = std::min(x0 + 1, w - 1);
      const int y1 = std::min(y0 + 1, h - 1);
      const double fx = sx - x0;
      const double fy = sy - y0;
      out.at(x, y) = (1.0 - fx) * (1.0 - fy) * frame.at(x0, y0) + fx * (1.0 - fy) * frame.at(x1, y0) +
                     (1.0 - fx) * fy * frame.at(x0, y1) + fx * fy * frame.at(x1, y1);
    }
  }
  return out;
}

double mse(const Frame& a, const Frame& b) {
  if (!a.same_shape(b)) throw InvalidArgument("mse: dimension mismatch");
  if (a.size() == 0) throw InvalidArgument("mse: empty frames");
  double acc = 0.0;
  const auto pa = a.pixels();
  const auto pb = b.pixels();
  for (std::size_t i = 0; i < pa.size(); ++i) acc += (pa[i] - pb[i]) * (pa[i] - pb[i]);
  return acc / static_cast<double>(pa.size());
}

double psnr(const Frame& a, const Frame& b) {
  const double err = mse(a, b);
  if (err == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / err);
}

namespace {

constexpr int kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

std::vector<double> gaussian_kernel_1d() {
  std::vector<double> k(kSsimWindow);
  const int half = kSsimWindow / 2;
  double sum = 0.0;
  for (int i = 0; i < kSsimWindow; ++i) {
    const double d = i - half;
    k[i] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
    sum += k[i];
  }
  for (double& v : k) v /= sum;
  return k;
}

// Separable "valid" Gaussian filtering of an image.
std::vector<double> filter_valid(const std::vector<double>& img, int w, int h, const std::vector<double>& k) {
  const int ow = w - kSsimWindow + 1;
  const int oh = h - kSsimWindow + 1;
  std::vector<double> rows(static_cast<std::size_t>(ow) * h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int i = 0; i < kSsimWindow; ++i) acc += k[i] * img[static_cast<std::size_t>(y) * w + x + i];
      rows[static_cast<std::size_t>(y) * ow + x] = acc;
    }
  std::vector<double> out(static_cast<std::size_t>(ow) * oh);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int i = 0; i < kSsimWindow; ++i) acc += k[i] * rows[static_cast<std::size_t>(y + i) * ow + x];
      out[static_cast<std::size_t>(y) * ow + x] = acc;
    }
  return out;
}

}  // namespace

double ssim(const Frame& a, const Frame& b) {
  if (!a.same_shape(b)) throw InvalidArgument("ssim: dimension mismatch");
  if (a.width() < kSsimWindow || a.height() < kSsimWindow)
    throw InvalidArgument("ssim: image smaller than the 11x11 window");
  const int w = a.width();
  const int h = a.height();
  const auto k = gaussian_kernel_1d();
  std::vector<double> va(a.pixels().begin(), a.pixels().end());
  std::vector<double> vb(b.pixels().begin(), b.pixels().end());
  std::vector<double> aa(va.size()), bb(va.size()), ab(va.size());
  for (std::size_t i = 0; i < va.size(); ++i) {
    aa[i] = va[i] * va[i];
    bb[i] = vb[i] * vb[i];
    ab[i] = va[i] * vb[i];
  }
  const auto mu_a = filter_valid(va, w, h, k);
  const auto mu_b = filter_valid(vb, w, h, k);
  const auto s_aa = filter_valid(aa, w, h, k);
  const auto s_bb = filter_valid(bb, w, h, k);
  const auto s_ab = filter_valid(ab, w, h, k);
  double total = 0.0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double ma = mu_a[i];
    const double mb = mu_b[i];
    const double var_a = s_aa[i] - ma * ma;
    const double var_b = s_bb[i] - mb * mb;
    const double cov = s_ab[i] - ma * mb;
    total += ((2.0 * ma * mb + kC1) * (2.0 * cov + kC2)) / ((ma * ma + mb * mb + kC1) * (var_a + var_b + kC2));
  }
  return total / static_cast<double>(mu_a.size());
}

void write_pgm(const Frame& frame, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P5\n" << frame.width() << ' ' << frame.height() << "\n255\n";
  std::vector<unsigned char> bytes(frame.size());
  const auto px = frame.pixels();
  for (std::size_t i = 0; i < bytes.size(); ++i)
    bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(px[i], 0.0, 1.0) * 255.0));
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

namespace {

// Next whitespace-delimited header token, skipping '#' comments.
std::string pgm_token(std::istream& in) {
  std::string token;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!token.empty()) break;
      continue;
    }
    token.push_back(static_cast<char>(c));
  }
  return token;
}

}  // namespace

Frame read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  if (pgm_token(in) != "P5") throw IoError(path.string() + ": not a binary PGM (P5)");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(pgm_token(in));
    h = std::stoi(pgm_token(in));
    maxval = std::stoi(pgm_token(in));
  } catch (const std::exception&) {
    throw IoError(path.string() + ": malformed PGM header");
  }
  if (w <= 0 || h <= 0) throw IoError(path.string() + ": invalid PGM dimensions");
  if (maxval != 255) throw IoError(path.string() + ": maxval must be 255");
  std::vector<unsigned char> bytes(static_cast<std::size_t>(w) * h);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) throw IoError(path.string() + ": truncated PGM");
  std::vector<double> px(bytes.size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = bytes[i] / 255.0;
  return Frame(w, h, std::move(px));
}

}  // namespace ivf::imaging
