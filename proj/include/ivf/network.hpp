#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ivf/events.hpp"
#include "ivf/imaging.hpp"
#include "ivf/nn/ops.hpp"
#include "ivf/nn/params.hpp"

namespace ivf::net {

// How event attention is calibrated by image attention.
//   PostSoftmax: A_E + A_B, rows sum to 2.
//   Renormalized: (A_E + A_B) / 2, rows sum to 1.
enum class Calibration { PostSoftmax, Renormalized };

struct IVFConfig {
  int channels = 16;
  int dals_blocks = 4;
  int window = 4;
  int heads = 2;
  int fourier_L = 8;
  int mlp_hidden = 64;
  int mlp_layers = 4;
  int rdb_convs = 3;
  int rdb_growth = 0;  // 0 means channels / 2
  int gff_kernel = 3;
  int up_channels = 16;
  int event_segments = 6;
  int mlp_ratio = 2;
  bool dam = true;
  Calibration calibration = Calibration::PostSoftmax;

  int growth() const { return rdb_growth > 0 ? rdb_growth : std::max(1, channels / 2); }
  int event_channels() const { return 2 * event_segments; }
  void validate() const;
  // Image height/width must be even and the half-resolution grid divisible by the window.
  void check_input(int width, int height) const;
};

struct EERConfig {
  int channels = 8;
  int rdbs = 2;
  int rdb_convs = 3;
  int rdb_growth = 4;
  int segment_levels = 2;  // |P|

  int input_channels() const { return 1 + 2 * segment_levels; }
  void validate() const;
};

std::string to_string(Calibration c);
Calibration parse_calibration(const std::string& s);

template <class T>
nn::ParamStore<T> init_ivf(const IVFConfig& cfg, std::uint64_t seed);
template <class T>
nn::ParamStore<T> init_eer(const EERConfig& cfg, std::uint64_t seed);

template <class T>
struct SfeOut {
  nn::Var<T> feat_minus1;
  nn::Var<T> feat_0;
};

// Unshuffle by 2, 5x5 conv, 3x3 conv. Parameters under "<prefix>.conv5" and "<prefix>.conv3".
template <class T>
SfeOut<T> sfe_forward(const nn::Var<T>& x, const nn::BoundParams<T>& p, const std::string& prefix);

// Dense 3x3 conv layers with ReLU, 1x1 local fusion, local residual.
template <class T>
nn::Var<T> rdb_forward(const nn::Var<T>& x, const nn::BoundParams<T>& p, const std::string& prefix, int convs);

template <class T>
struct DamOut {
  nn::Var<T> b_bar;       // A_B V_B
  nn::Var<T> e_bar;       // calibrated A_E V_E
  nn::Var<T> calibrated;  // calibrated event attention
};

// attn_* [G, n, n] row-softmaxed, v_* [G, n, d].
template <class T>
DamOut<T> dam_attention(const nn::Var<T>& attn_b, const nn::Var<T>& attn_e, const nn::Var<T>& v_b,
                        const nn::Var<T>& v_e, Calibration calibration);

template <class T>
struct DalsOut {
  nn::Var<T> image;
  nn::Var<T> event;
};

// block_index is 1-based; even blocks use the shifted partition.
template <class T>
DalsOut<T> dals_forward(const nn::Var<T>& b_feat, const nn::Var<T>& e_feat, const nn::BoundParams<T>& p,
                        const IVFConfig& cfg, int block_index);

// Time-constant part of the model.
template <class T>
struct Embedding {
  nn::Var<T> f_db;         // [C, H/2, W/2]
  nn::Var<T> pixels;       // upsampled features as rows [H*W, C_up]
  nn::Var<T> first_layer;  // pixels projected by the feature columns of the first decode layer [H*W, hidden]
  int width = 0;
  int height = 0;
};

template <class T>
Embedding<T> embed(const nn::Var<T>& blur, const nn::Var<T>& event_tensor, const nn::BoundParams<T>& p,
                   const IVFConfig& cfg);

// Pre-clamp prediction B + residual, [1, H, W].
template <class T>
nn::Var<T> decode(const Embedding<T>& emb, double t, const nn::Var<T>& blur, const nn::BoundParams<T>& p,
                  const IVFConfig& cfg);

// Pre-clamp refinement initial + residual, [1, H, W].
template <class T>
nn::Var<T> eer_forward(const nn::Var<T>& initial, const nn::Var<T>& subtle, const nn::BoundParams<T>& p,
                       const EERConfig& cfg);

// Frame <-> [1, H, W] tensor.
template <class T>
nn::Tensor<T> frame_tensor(const imaging::Frame& f);
template <class T>
imaging::Frame tensor_frame(const nn::Tensor<T>& t, double timestamp, bool clamp);

// Inference over one (blur, events) input with a cached embedding.
template <class T>
class Restorer {
 public:
  Restorer(IVFConfig cfg, nn::ParamStore<T> ivf, std::optional<EERConfig> eer_cfg = std::nullopt,
           std::optional<nn::ParamStore<T>> eer = std::nullopt, std::vector<int> segment_counts = {64, 256});
  ~Restorer();
  Restorer(const Restorer&) = delete;
  Restorer& operator=(const Restorer&) = delete;

  void set_input(const imaging::Frame& blur, const events::EventStream& stream);
  imaging::Frame query(double t, bool refine = false);

  std::size_t embed_count() const { return embed_count_; }
  std::size_t cache_hits() const { return cache_hits_; }
  const nn::Tensor<T>& embedding() const;

 private:
  struct Cache;

  IVFConfig cfg_;
  nn::ParamStore<T> ivf_;
  std::optional<EERConfig> eer_cfg_;
  std::optional<nn::ParamStore<T>> eer_;
  std::vector<int> segment_counts_;
  std::unique_ptr<Cache> cache_;
  std::size_t embed_count_ = 0;
  std::size_t cache_hits_ = 0;
  std::size_t queries_ = 0;
};

}  // namespace ivf::net
