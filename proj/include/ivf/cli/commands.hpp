#pragma once

#include <filesystem>
#include <optional>
#include <vector>

#include "ivf/cli/config.hpp"
#include "ivf/imaging.hpp"

namespace ivf::cli {

namespace fs = std::filesystem;

// Frames plus index.json {"frames": [{"t", "file"}], ...}; written by edi and query, read by eval.
void write_prediction_dir(const fs::path& dir, const std::vector<imaging::Frame>& frames);
std::vector<imaging::Frame> read_prediction_dir(const fs::path& dir);

// The blur sidecar sits next to the image with a .json extension.
fs::path sidecar_path(const fs::path& blur_path);

struct SimulateArgs {
  fs::path scene;
  fs::path out_events;
  fs::path out_frames_dir;
};
// Renders round(fps) frames over [0, 1] into frame_NNNN.pgm with meta.json, and the events CSV.
void cmd_simulate(const RunConfig& cfg, const SimulateArgs& args);

struct BlurArgs {
  fs::path frames_dir;
  int window = 0;  // 0: config blur.window_frames
  fs::path out;
};
// Averages the central window of frames; the sidecar records the window and referenced indices.
void cmd_blur(const RunConfig& cfg, const BlurArgs& args);

struct EdiArgs {
  fs::path blur;
  fs::path events;
  fs::path out_dir;
  std::optional<double> threshold;
  bool estimate_threshold = false;
  std::vector<double> timestamps;
};
void cmd_edi(const RunConfig& cfg, const EdiArgs& args);

struct TrainArgs {
  std::vector<fs::path> scenes;
  fs::path out_dir;
};
// Phase 1, then phase 2 when epochs_phase2 > 0. Writes ivf.ckpt, eer.ckpt, loss logs, train.json.
void cmd_train(const RunConfig& cfg, const TrainArgs& args);

struct QueryArgs {
  fs::path ivf_checkpoint;
  std::optional<fs::path> eer_checkpoint;
  std::optional<fs::path> scene;  // regenerate the training-time input instead of reading files
  fs::path blur;
  fs::path events;
  std::vector<double> timestamps;
  bool refine = false;
  std::optional<fs::path> out;      // single frame
  std::optional<fs::path> out_dir;  // prediction directory
};
void cmd_query(const RunConfig& cfg, const QueryArgs& args);

struct EvalArgs {
  fs::path frames_dir;
  fs::path pred_dir;
  fs::path out;
  int window = 0;  // 0: config blur.window_frames
};
// PSNR/SSIM per prediction against the latent at the same normalized time.
void cmd_eval(const RunConfig& cfg, const EvalArgs& args);

}  // namespace ivf::cli
