#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "ivf/events.hpp"
#include "ivf/imaging.hpp"
#include "ivf/network.hpp"
#include "ivf/nn/adam.hpp"

namespace ivf::train {

struct SampleConfig {
  int width = 32;
  int height = 32;
  int latent_frames = 31;
  int oversample = 16;  // dense frames per latent interval for event simulation
  int references = 7;
  events::SimulationOptions sim{};
  double noise_level = 0.0;
  std::uint64_t noise_seed = 0;

  void validate() const;
};

struct Sample {
  imaging::Frame blur;
  events::EventStream stream;
  std::vector<double> ref_times;          // T_K
  std::vector<imaging::Frame> ref_frames; // ground truth at T_K
  imaging::FrameSequence latents;         // all latent frames, for evaluation
  imaging::SceneSpec scene;

  Sample flipped() const;
};

// Latent indices of the K referenced frames, round(k (n - 1) / (K - 1)).
std::vector<int> referenced_indices(int latent_frames, int references);

// Latents at k / (n - 1), events from oversampled dense frames, blur as the latent mean.
Sample make_sample(const imaging::SceneSpec& scene, const SampleConfig& cfg);

// The n references nearest to t (ties to the smaller timestamp), in ascending time order.
std::vector<std::size_t> nearest_references(const std::vector<double>& ref_times, double t, int n);

// warp(ref_k, analytic_flow(scene, t_k, t')) for the N nearest references.
std::vector<imaging::Frame> motion_targets(const Sample& sample, double t_prime, int n);

// (1/K) sum_k mean |pred_k - gt_k|.
template <class T>
nn::Var<T> loss_im(const std::vector<nn::Var<T>>& predictions, const std::vector<nn::Tensor<T>>& ground_truth);

// (1/(M N)) sum_j sum_k mean |pred_j - target_{j,k}|.
template <class T>
nn::Var<T> loss_motion(const std::vector<nn::Var<T>>& predictions,
                       const std::vector<std::vector<nn::Tensor<T>>>& targets);

// l1 of refined outputs at the referenced timestamps; same form as loss_im.
template <class T>
nn::Var<T> loss_texture(const std::vector<nn::Var<T>>& refined, const std::vector<nn::Tensor<T>>& ground_truth);

struct TrainConfig {
  int epochs_phase1 = 40;
  int lambda_switch_epoch = 30;
  double lr_initial = 1e-3;
  double lr_final = 1e-4;
  int lr_hold_epochs = 5;
  int lr_decay_end = 20;
  double lambda1_a = 1.0;
  double lambda2_a = 0.0;
  double lambda1_b = 0.2;
  double lambda2_b = 1.0;
  int M = 3;
  int N = 2;
  int batch = 1;
  int repeats = 1;  // passes over the dataset per epoch
  std::uint64_t seed = 0;
  bool flip = false;
  int epochs_phase2 = 20;
  double lr2 = 1e-3;
  int lr2_decay_every = 50;
  double lr2_decay = 0.8;

  void validate(int references) const;
  double lr_phase1(int epoch) const;
  double lr_phase2(int epoch) const;
};

struct Phase1Record {
  int epoch = 0;
  int step = 0;
  double lr = 0, lambda1 = 0, lambda2 = 0, loss_im = 0, loss_motion = 0, total = 0;
};

struct Phase2Record {
  int epoch = 0;
  int step = 0;
  double lr = 0, loss_texture = 0;
};

void write_phase1_log(const std::filesystem::path& path, const std::vector<Phase1Record>& log);
void write_phase2_log(const std::filesystem::path& path, const std::vector<Phase2Record>& log);

std::vector<Phase1Record> train_phase1(const std::vector<Sample>& dataset, nn::ParamStore<float>& ivf,
                                       const net::IVFConfig& net_cfg, const TrainConfig& cfg);

// Throws if the IVF parameters no longer hash to the value recorded before phase 2.
void check_frozen(const nn::ParamStore<float>& ivf, std::uint64_t expected_hash);

std::vector<Phase2Record> train_phase2(const std::vector<Sample>& dataset, const nn::ParamStore<float>& ivf,
                                       const net::IVFConfig& net_cfg, nn::ParamStore<float>& eer,
                                       const net::EERConfig& eer_cfg, const TrainConfig& cfg,
                                       const std::vector<int>& segment_counts);

// Mean over samples of the referenced-timestamp l1, before (eer == nullptr) or after refinement.
double referenced_l1(const std::vector<Sample>& dataset, const nn::ParamStore<float>& ivf,
                     const net::IVFConfig& net_cfg, const nn::ParamStore<float>* eer, const net::EERConfig& eer_cfg,
                     const std::vector<int>& segment_counts);

// Pre-clamp IVF predictions at the referenced timestamps of one sample.
std::vector<imaging::Frame> predict_references(const Sample& sample, const nn::ParamStore<float>& ivf,
                                               const net::IVFConfig& net_cfg);

}  // namespace ivf::train
