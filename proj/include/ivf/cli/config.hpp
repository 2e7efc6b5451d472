#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ivf/events.hpp"
#include "ivf/network.hpp"
#include "ivf/training.hpp"

namespace ivf::cli {

// One JSON document drives every subcommand. Missing sections and keys keep their defaults;
// unknown keys are rejected so typos do not pass silently.
struct RunConfig {
  int width = 32;
  int height = 32;

  double fps = 31.0;    // rendered frames over [0, 1]
  int oversample = 16;  // dense frames per rendered interval fed to the event simulator
  double threshold_c = 0.1;
  double log_eps = 1e-3;
  double noise_level = 0.0;
  std::uint64_t seed = 0;

  int window_frames = 31;

  std::vector<int> p_list{64, 256};
  int edi_samples = 256;

  net::IVFConfig network{};
  net::EERConfig eer{};
  train::TrainConfig train{};
  int references = 7;

  std::vector<double> eval_timestamps;  // empty: every frame in the blur window

  int frame_count() const;
  events::SimulationOptions sim_options() const;
  train::SampleConfig sample_config() const;
  void validate() const;
};

RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::filesystem::path& path);
std::string dump_run_config(const RunConfig& cfg);

}  // namespace ivf::cli
