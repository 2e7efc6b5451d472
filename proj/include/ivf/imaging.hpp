#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace ivf::imaging {

// Grayscale image, row-major, nominal range [0, 1].
class Frame {
 public:
  Frame() = default;
  Frame(int width, int height, double fill = 0.0, double timestamp = 0.0);
  Frame(int width, int height, std::vector<double> pixels, double timestamp = 0.0);

  int width() const { return width_; }
  int height() const { return height_; }
  std::size_t size() const { return pixels_.size(); }
  double timestamp() const { return timestamp_; }
  void set_timestamp(double t) { timestamp_ = t; }

  double& at(int x, int y) { return pixels_[static_cast<std::size_t>(y) * width_ + x]; }
  double at(int x, int y) const { return pixels_[static_cast<std::size_t>(y) * width_ + x]; }

  std::span<double> pixels() { return pixels_; }
  std::span<const double> pixels() const { return pixels_; }

  bool same_shape(const Frame& other) const { return width_ == other.width_ && height_ == other.height_; }
  Frame clamped(double lo = 0.0, double hi = 1.0) const;
  Frame flipped_horizontal() const;

  friend bool operator==(const Frame&, const Frame&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<double> pixels_;
  double timestamp_ = 0.0;
};

// Frames with strictly increasing timestamps and uniform dimensions.
class FrameSequence {
 public:
  FrameSequence() = default;
  explicit FrameSequence(std::vector<Frame> frames);

  std::size_t size() const { return frames_.size(); }
  bool empty() const { return frames_.empty(); }
  const Frame& operator[](std::size_t i) const { return frames_[i]; }
  const std::vector<Frame>& frames() const { return frames_; }
  auto begin() const { return frames_.begin(); }
  auto end() const { return frames_.end(); }
  int width() const { return frames_.empty() ? 0 : frames_.front().width(); }
  int height() const { return frames_.empty() ? 0 : frames_.front().height(); }

 private:
  std::vector<Frame> frames_;
};

struct FlowField {
  int width = 0;
  int height = 0;
  std::vector<double> dx;
  std::vector<double> dy;

  FlowField() = default;
  FlowField(int w, int h) : width(w), height(h), dx(static_cast<std::size_t>(w) * h, 0.0), dy(dx) {}
};

enum class Shape { Rectangle, Disk };

// Rectangles are anchored at their top-left corner (x0, y0) with extent (w, h);
// disks at their centre with radius r.
struct Primitive {
  Shape shape = Shape::Rectangle;
  double intensity = 1.0;
  double x0 = 0.0;
  double y0 = 0.0;
  double vx = 0.0;
  double vy = 0.0;
  double w = 1.0;
  double h = 1.0;
  double r = 1.0;

  bool covers(double x, double y, double t) const;
};

struct SceneSpec {
  double background = 0.0;
  std::vector<Primitive> primitives;

  void validate() const;
  SceneSpec flipped_horizontal(int width) const;
};

// JSON document {background, primitives: [{shape, intensity, x0, y0, vx, vy, w, h | r}]}.
SceneSpec parse_scene(const std::string& json_text);
std::string dump_scene(const SceneSpec& scene);
SceneSpec read_scene(const std::filesystem::path& path);

Frame render_scene(const SceneSpec& scene, double t, int width, int height);
FlowField analytic_flow(const SceneSpec& scene, double t_a, double t_b, int width, int height);

Frame synthesize_blur(const FrameSequence& seq);
Frame synthesize_blur(std::span<const Frame> frames);

// Backward bilinear sampling, out(x, y) = frame(x - dx, y - dy), border clamped.
Frame warp(const Frame& frame, const FlowField& flow);

double mse(const Frame& a, const Frame& b);
double psnr(const Frame& a, const Frame& b);
double ssim(const Frame& a, const Frame& b);

void write_pgm(const Frame& frame, const std::filesystem::path& path);
Frame read_pgm(const std::filesystem::path& path);

}  // namespace ivf::imaging
