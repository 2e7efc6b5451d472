#include "ivf/network.hpp"

#include <cmath>

#include "ivf/error.hpp"
#include "ivf/representation.hpp"

namespace ivf::net {

using nn::BoundParams;
using nn::ParamStore;
using nn::Shape;
using nn::Tape;
using nn::Tensor;
using nn::Var;

void IVFConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw InvalidArgument(std::string("IVFConfig: ") + name + " must be at least 1");
  };
  positive(channels, "channels");
  positive(dals_blocks, "dals_blocks");
  positive(window, "window");
  positive(heads, "heads");
  positive(fourier_L, "fourier_L");
  positive(mlp_hidden, "mlp_hidden");
  positive(mlp_layers, "mlp_layers");
  positive(rdb_convs, "rdb_convs");
  positive(up_channels, "up_channels");
  positive(event_segments, "event_segments");
  positive(mlp_ratio, "mlp_ratio");
  if (rdb_growth < 0) throw InvalidArgument("IVFConfig: rdb_growth must be non-negative");
  if (channels % heads != 0) throw InvalidArgument("IVFConfig: channels must be divisible by heads");
  if (gff_kernel < 1 || gff_kernel % 2 == 0) throw InvalidArgument("IVFConfig: gff_kernel must be odd");
}

void IVFConfig::check_input(int width, int height) const {
  if (width % 2 || height % 2) throw InvalidArgument("IVF: image dimensions must be even");
  if ((width / 2) % window || (height / 2) % window)
    throw InvalidArgument("IVF: half-resolution " + std::to_string(width / 2) + "x" + std::to_string(height / 2) +
                          " not divisible by window " + std::to_string(window));
}

void EERConfig::validate() const {
  if (channels < 1 || rdbs < 1 || rdb_convs < 1 || rdb_growth < 1 || segment_levels < 1)
    throw InvalidArgument("EERConfig: all sizes must be at least 1");
}

std::string to_string(Calibration c) { return c == Calibration::PostSoftmax ? "post_softmax" : "renormalized"; }

Calibration parse_calibration(const std::string& s) {
  if (s == "post_softmax") return Calibration::PostSoftmax;
  if (s == "renormalized") return Calibration::Renormalized;
  throw InvalidArgument("unknown calibration '" + s + "' (post_softmax | renormalized)");
}

namespace {

// Init gains: 1 ahead of a ReLU, unit variance for plain linear maps, small on residual branches
// so the residual streams keep their scale through the blocks.
constexpr double kReluGain = 1.0;
constexpr double kLinearGain = 0.70710678118654752;
constexpr double kBranchGain = 0.1;

template <class T>
struct Builder {
  ParamStore<T>& store;
  std::mt19937_64& rng;

  void conv(const std::string& name, int co, int ci, int k, double gain) {
    const Shape s{co, ci, k, k};
    store.add(name + ".w", gain == 0.0 ? Tensor<T>(s) : nn::kaiming_uniform<T>(s, ci * k * k, rng, gain));
    store.add(name + ".b", Tensor<T>({co}));
  }
  void linear(const std::string& name, int out, int in, double gain) {
    const Shape s{out, in};
    store.add(name + ".w", gain == 0.0 ? Tensor<T>(s) : nn::kaiming_uniform<T>(s, in, rng, gain));
    store.add(name + ".b", Tensor<T>({out}));
  }
  void norm(const std::string& name, int c) {
    store.add(name + ".g", Tensor<T>({c}, T(1)));
    store.add(name + ".b", Tensor<T>({c}));
  }
  void rdb(const std::string& prefix, int c, int convs, int growth) {
    for (int j = 0; j < convs; ++j) conv(prefix + ".c" + std::to_string(j), growth, c + j * growth, 3, kReluGain);
    conv(prefix + ".fuse", c, c + convs * growth, 1, kBranchGain);
  }
};

template <class T>
Var<T> conv(const Var<T>& x, const BoundParams<T>& p, const std::string& name) {
  return nn::conv2d(x, p[name + ".w"], p[name + ".b"]);
}

template <class T>
Var<T> lin(const Var<T>& x, const BoundParams<T>& p, const std::string& name) {
  return nn::linear(x, p[name + ".w"], p[name + ".b"]);
}

template <class T>
Var<T> norm(const Var<T>& x, const BoundParams<T>& p, const std::string& name) {
  return nn::layer_norm(x, p[name + ".g"], p[name + ".b"]);
}

// [nW, n, C] <-> [nW * h, n, C / h]
template <class T>
Var<T> split_heads(const Var<T>& x, int heads) {
  const int nw = x.dim(0), n = x.dim(1), c = x.dim(2);
  auto r = nn::reshape(x, {nw, n, heads, c / heads});
  return nn::reshape(nn::permute(r, {0, 2, 1, 3}), {nw * heads, n, c / heads});
}

template <class T>
Var<T> merge_heads(const Var<T>& x, int heads) {
  const int g = x.dim(0), n = x.dim(1), d = x.dim(2);
  auto r = nn::reshape(x, {g / heads, heads, n, d});
  return nn::reshape(nn::permute(r, {0, 2, 1, 3}), {g / heads, n, heads * d});
}

template <class T>
struct Attention {
  Var<T> attn;
  Var<T> v;
};

template <class T>
Attention<T> self_attention(const Var<T>& tokens, const BoundParams<T>& p, const std::string& prefix, int heads) {
  const int c = tokens.dim(2);
  auto qkv = lin(norm(tokens, p, prefix + ".ln1"), p, prefix + ".qkv");
  auto q = split_heads(nn::narrow(qkv, 2, 0, c), heads);
  auto k = split_heads(nn::narrow(qkv, 2, c, c), heads);
  auto v = split_heads(nn::narrow(qkv, 2, 2 * c, c), heads);
  const T inv = T(1) / std::sqrt(static_cast<T>(c / heads));
  return {nn::softmax_rows(nn::scale(nn::bmm(q, k, true), inv)), v};
}

template <class T>
Var<T> mlp(const Var<T>& x, const BoundParams<T>& p, const std::string& prefix) {
  return lin(nn::gelu(lin(x, p, prefix + ".mlp1")), p, prefix + ".mlp2");
}

template <class T>
Var<T> as_rows(const Var<T>& x) {
  const int c = x.dim(0);
  return nn::permute(nn::reshape(x, {c, x.dim(1) * x.dim(2)}), {1, 0});
}

}  // namespace

template <class T>
ParamStore<T> init_ivf(const IVFConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamStore<T> store;
  std::mt19937_64 rng(seed);
  Builder<T> b{store, rng};
  const int c = cfg.channels;
  b.conv("sfe_img.conv5", c, 4, 5, kLinearGain);
  b.conv("sfe_img.conv3", c, c, 3, kLinearGain);
  b.conv("sfe_evt.conv5", c, 4 * cfg.event_channels(), 5, kLinearGain);
  b.conv("sfe_evt.conv3", c, c, 3, kLinearGain);
  for (int i = 1; i <= cfg.dals_blocks; ++i) {
    for (const std::string stream : {"img", "evt"}) {
      const std::string pre = "dals" + std::to_string(i) + "." + stream;
      b.rdb(pre + ".rdb", c, cfg.rdb_convs, cfg.growth());
      b.norm(pre + ".ln1", c);
      b.linear(pre + ".qkv", 3 * c, c, kLinearGain);
      b.linear(pre + ".proj", c, c, kBranchGain);
      b.norm(pre + ".ln2", c);
      const int in = (stream == "img" && cfg.dam) ? 2 * c : c;
      b.linear(pre + ".mlp1", cfg.mlp_ratio * c, in, kReluGain);
      b.linear(pre + ".mlp2", c, cfg.mlp_ratio * c, kBranchGain);
    }
  }
  const int fused = (cfg.dals_blocks + (cfg.dam ? 0 : 1)) * c;
  b.conv("gff.c1", c, fused, 1, kLinearGain);
  b.conv("gff.ck", c, c, cfg.gff_kernel, kBranchGain);
  b.conv("up.c0", 4 * cfg.up_channels, c, 3, kLinearGain);
  b.conv("up.c1", cfg.up_channels, cfg.up_channels, 3, kLinearGain);
  for (int l = 0; l < cfg.mlp_layers; ++l)
    b.linear("decode.l" + std::to_string(l), cfg.mlp_hidden, l == 0 ? cfg.up_channels + 2 * cfg.fourier_L : cfg.mlp_hidden,
             kReluGain);
  b.linear("decode.out", 1, cfg.mlp_hidden, 0.0);
  return store;
}

template <class T>
ParamStore<T> init_eer(const EERConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamStore<T> store;
  std::mt19937_64 rng(seed);
  Builder<T> b{store, rng};
  b.conv("eer.sfe", cfg.channels, cfg.input_channels(), 3, kLinearGain);
  for (int r = 0; r < cfg.rdbs; ++r) b.rdb("eer.rdb" + std::to_string(r), cfg.channels, cfg.rdb_convs, cfg.rdb_growth);
  b.conv("eer.gff.c1", cfg.channels, cfg.rdbs * cfg.channels, 1, kLinearGain);
  b.conv("eer.gff.ck", cfg.channels, cfg.channels, 3, kLinearGain);
  b.conv("eer.out", 1, cfg.channels, 3, 0.0);
  return store;
}

template <class T>
SfeOut<T> sfe_forward(const Var<T>& x, const BoundParams<T>& p, const std::string& prefix) {
  if (x.value().ndim() != 3) throw InvalidArgument("sfe: input must be [C, H, W]");
  if (x.dim(1) % 2 || x.dim(2) % 2) throw InvalidArgument("sfe: input dimensions must be even");
  auto m1 = conv(nn::pixel_unshuffle(x, 2), p, prefix + ".conv5");
  return {m1, conv(m1, p, prefix + ".conv3")};
}

template <class T>
Var<T> rdb_forward(const Var<T>& x, const BoundParams<T>& p, const std::string& prefix, int convs) {
  std::vector<Var<T>> feats{x};
  for (int j = 0; j < convs; ++j) {
    auto in = feats.size() == 1 ? x : nn::concat(feats, 0);
    feats.push_back(nn::relu(conv(in, p, prefix + ".c" + std::to_string(j))));
  }
  return nn::add(x, conv(nn::concat(feats, 0), p, prefix + ".fuse"));
}

template <class T>
DamOut<T> dam_attention(const Var<T>& attn_b, const Var<T>& attn_e, const Var<T>& v_b, const Var<T>& v_e,
                        Calibration calibration) {
  if (attn_b.shape() != attn_e.shape()) throw InvalidArgument("dam_attention: attention shapes differ");
  if (v_b.shape() != v_e.shape()) throw InvalidArgument("dam_attention: value shapes differ");
  if (attn_b.value().ndim() != 3 || v_b.value().ndim() != 3 || attn_b.dim(0) != v_b.dim(0) ||
      attn_b.dim(2) != v_b.dim(1))
    throw InvalidArgument("dam_attention: expected attention [G, n, n] and values [G, n, d]");
  auto cal = nn::add(attn_e, attn_b);
  if (calibration == Calibration::Renormalized) cal = nn::scale(cal, T(0.5));
  return {nn::bmm(attn_b, v_b), nn::bmm(cal, v_e), cal};
}

template <class T>
DalsOut<T> dals_forward(const Var<T>& b_feat, const Var<T>& e_feat, const BoundParams<T>& p, const IVFConfig& cfg,
                        int block_index) {
  if (b_feat.shape() != e_feat.shape()) throw InvalidArgument("dals: image and event features differ in shape");
  const int c = b_feat.dim(0), h = b_feat.dim(1), w = b_feat.dim(2);
  if (h % cfg.window || w % cfg.window) throw InvalidArgument("dals: feature map not divisible by window");
  const bool shift = block_index % 2 == 0;
  const std::string pre = "dals" + std::to_string(block_index);
  auto rb = rdb_forward(b_feat, p, pre + ".img.rdb", cfg.rdb_convs);
  auto re = rdb_forward(e_feat, p, pre + ".evt.rdb", cfg.rdb_convs);
  auto tb = nn::window_partition(rb, cfg.window, shift);
  auto te = nn::window_partition(re, cfg.window, shift);
  const auto ab = self_attention(tb, p, pre + ".img", cfg.heads);
  const auto ae = self_attention(te, p, pre + ".evt", cfg.heads);

  Var<T> b_bar, e_bar;
  if (cfg.dam) {
    const auto dam = dam_attention(ab.attn, ae.attn, ab.v, ae.v, cfg.calibration);
    b_bar = dam.b_bar;
    e_bar = dam.e_bar;
  } else {
    b_bar = nn::bmm(ab.attn, ab.v);
    e_bar = nn::bmm(ae.attn, ae.v);
  }
  b_bar = lin(merge_heads(b_bar, cfg.heads), p, pre + ".img.proj");
  e_bar = lin(merge_heads(e_bar, cfg.heads), p, pre + ".evt.proj");

  auto e_mid = nn::add(te, e_bar);
  auto e_out = nn::add(e_mid, mlp(norm(e_mid, p, pre + ".evt.ln2"), p, pre + ".evt"));
  auto b_mid = nn::add(tb, b_bar);
  auto b_in = norm(b_mid, p, pre + ".img.ln2");
  if (cfg.dam) b_in = nn::concat<T>({b_in, e_bar}, 2);
  auto b_out = nn::add(b_mid, mlp(b_in, p, pre + ".img"));
  return {nn::window_merge(b_out, c, h, w, cfg.window, shift), nn::window_merge(e_out, c, h, w, cfg.window, shift)};
}

template <class T>
Embedding<T> embed(const Var<T>& blur, const Var<T>& event_tensor, const BoundParams<T>& p, const IVFConfig& cfg) {
  if (blur.value().ndim() != 3 || blur.dim(0) != 1) throw InvalidArgument("embed: blur must be [1, H, W]");
  if (event_tensor.value().ndim() != 3 || event_tensor.dim(0) != cfg.event_channels())
    throw InvalidArgument("embed: event tensor must have " + std::to_string(cfg.event_channels()) + " channels");
  if (blur.dim(1) != event_tensor.dim(1) || blur.dim(2) != event_tensor.dim(2))
    throw InvalidArgument("embed: blur and event tensor are not spatially aligned");
  const int h = blur.dim(1), w = blur.dim(2);
  cfg.check_input(w, h);

  const auto img = sfe_forward(blur, p, "sfe_img");
  const auto evt = sfe_forward(event_tensor, p, "sfe_evt");
  Var<T> b = img.feat_0, e = evt.feat_0;
  std::vector<Var<T>> outputs;
  for (int i = 1; i <= cfg.dals_blocks; ++i) {
    const auto o = dals_forward(b, e, p, cfg, i);
    b = o.image;
    e = o.event;
    outputs.push_back(b);
  }
  if (!cfg.dam) outputs.push_back(e);
  auto f_cat = outputs.size() == 1 ? outputs[0] : nn::concat(outputs, 0);
  auto f_db = nn::add(img.feat_minus1, conv(conv(f_cat, p, "gff.c1"), p, "gff.ck"));

  auto up = conv(nn::pixel_shuffle(conv(f_db, p, "up.c0"), 2), p, "up.c1");
  auto pixels = as_rows(up);
  const auto& w0 = p["decode.l0.w"];
  auto w_feat = nn::narrow(w0, 1, 0, cfg.up_channels);
  auto zero = blur.tape().constant(Tensor<T>({cfg.mlp_hidden}));
  return {f_db, pixels, nn::linear(pixels, w_feat, zero), w, h};
}

template <class T>
Var<T> decode(const Embedding<T>& emb, double t, const Var<T>& blur, const BoundParams<T>& p, const IVFConfig& cfg) {
  if (!(t >= 0.0 && t <= 1.0)) throw InvalidArgument("decode: t must lie in [0, 1]");
  auto& tape = blur.tape();
  const auto code = repr::fourier_encode(t, cfg.fourier_L);
  Tensor<T> eta({1, 2 * cfg.fourier_L});
  for (std::size_t i = 0; i < code.size(); ++i) eta[i] = static_cast<T>(code[i]);
  auto w_time = nn::narrow(p["decode.l0.w"], 1, cfg.up_channels, 2 * cfg.fourier_L);
  auto time_bias = nn::linear(tape.constant(std::move(eta)), w_time, p["decode.l0.b"]);
  auto h = nn::relu(nn::add_bias(emb.first_layer, nn::reshape(time_bias, {cfg.mlp_hidden})));
  for (int l = 1; l < cfg.mlp_layers; ++l) h = nn::relu(lin(h, p, "decode.l" + std::to_string(l)));
  auto residual = nn::reshape(lin(h, p, "decode.out"), {1, emb.height, emb.width});
  return nn::add(blur, residual);
}

template <class T>
Var<T> eer_forward(const Var<T>& initial, const Var<T>& subtle, const BoundParams<T>& p, const EERConfig& cfg) {
  if (initial.value().ndim() != 3 || initial.dim(0) != 1) throw InvalidArgument("eer: initial must be [1, H, W]");
  if (subtle.value().ndim() != 3 || subtle.dim(0) != 2 * cfg.segment_levels)
    throw InvalidArgument("eer: subtle segments must have " + std::to_string(2 * cfg.segment_levels) + " channels");
  if (initial.dim(1) != subtle.dim(1) || initial.dim(2) != subtle.dim(2))
    throw InvalidArgument("eer: initial and subtle segments differ in size");
  auto f0 = conv(nn::concat<T>({initial, subtle}, 0), p, "eer.sfe");
  std::vector<Var<T>> outs;
  Var<T> f = f0;
  for (int r = 0; r < cfg.rdbs; ++r) {
    f = rdb_forward(f, p, "eer.rdb" + std::to_string(r), cfg.rdb_convs);
    outs.push_back(f);
  }
  auto g = conv(conv(outs.size() == 1 ? outs[0] : nn::concat(outs, 0), p, "eer.gff.c1"), p, "eer.gff.ck");
  return nn::add(initial, conv(nn::add(g, f0), p, "eer.out"));
}

template <class T>
Tensor<T> frame_tensor(const imaging::Frame& f) {
  Tensor<T> out({1, f.height(), f.width()});
  const auto px = f.pixels();
  for (std::size_t i = 0; i < px.size(); ++i) out[i] = static_cast<T>(px[i]);
  return out;
}

template <class T>
imaging::Frame tensor_frame(const Tensor<T>& t, double timestamp, bool clamp) {
  if (t.ndim() != 3 || t.dim(0) != 1) throw InvalidArgument("tensor_frame: expected [1, H, W]");
  std::vector<double> px(t.numel());
  for (std::size_t i = 0; i < px.size(); ++i) {
    const double v = static_cast<double>(t[i]);
    if (!std::isfinite(v)) throw NumericalError("network produced a non-finite pixel");
    px[i] = clamp ? std::clamp(v, 0.0, 1.0) : v;
  }
  return imaging::Frame(t.dim(2), t.dim(1), std::move(px), timestamp);
}

template <class T>
struct Restorer<T>::Cache {
  Tensor<T> blur;
  events::EventStream stream;
  bool embedded = false;
  Tensor<T> f_db;
  Tensor<T> pixels;
  Tensor<T> first_layer;
};

template <class T>
Restorer<T>::Restorer(IVFConfig cfg, ParamStore<T> ivf, std::optional<EERConfig> eer_cfg,
                      std::optional<ParamStore<T>> eer, std::vector<int> segment_counts)
    : cfg_(cfg),
      ivf_(std::move(ivf)),
      eer_cfg_(std::move(eer_cfg)),
      eer_(std::move(eer)),
      segment_counts_(std::move(segment_counts)) {
  cfg_.validate();
  if (eer_cfg_.has_value() != eer_.has_value())
    throw InvalidArgument("Restorer: EER config and parameters must be given together");
  if (eer_cfg_ && static_cast<int>(segment_counts_.size()) != eer_cfg_->segment_levels)
    throw InvalidArgument("Restorer: P list length does not match the EER segment levels");
}

template <class T>
Restorer<T>::~Restorer() = default;

template <class T>
void Restorer<T>::set_input(const imaging::Frame& blur, const events::EventStream& stream) {
  if (blur.width() != stream.width() || blur.height() != stream.height())
    throw InvalidArgument("Restorer: blur and event sensor dimensions differ");
  cfg_.check_input(blur.width(), blur.height());
  cache_ = std::make_unique<Cache>(Cache{frame_tensor<T>(blur), stream, false, {}, {}, {}});
}

template <class T>
const Tensor<T>& Restorer<T>::embedding() const {
  if (!cache_ || !cache_->embedded) throw InvalidArgument("Restorer: no embedding computed yet");
  return cache_->f_db;
}

template <class T>
imaging::Frame Restorer<T>::query(double t, bool refine) {
  if (!cache_) throw InvalidArgument("Restorer: set_input must be called before query");
  if (!(t >= 0.0 && t <= 1.0)) throw InvalidArgument("query: t must lie in [0, 1]");
  if (refine && !eer_) throw InvalidArgument("query: refinement requested without EER parameters");
  Tape<T> tape;
  BoundParams<T> p(tape, ivf_, false);
  auto blur = tape.constant(cache_->blur);
  Embedding<T> emb;
  if (!cache_->embedded) {
    const auto ev = repr::stack_events(cache_->stream, cfg_.event_segments).template cast<T>();
    emb = embed(blur, tape.constant(ev), p, cfg_);
    cache_->f_db = emb.f_db.value();
    cache_->pixels = emb.pixels.value();
    cache_->first_layer = emb.first_layer.value();
    cache_->embedded = true;
    ++embed_count_;
  } else {
    emb = {tape.constant(cache_->f_db), tape.constant(cache_->pixels), tape.constant(cache_->first_layer),
           cache_->blur.dim(2), cache_->blur.dim(1)};
    ++cache_hits_;
  }
  ++queries_;
  auto out = decode(emb, t, blur, p, cfg_);
  if (refine) {
    // The EER consumes the clamped restoration.
    auto initial = tape.constant(frame_tensor<T>(tensor_frame(out.value(), t, true)));
    const auto subtle = repr::subtle_segments(cache_->stream, t, segment_counts_).template cast<T>();
    BoundParams<T> q(tape, *eer_, false);
    out = eer_forward(initial, tape.constant(subtle), q, *eer_cfg_);
  }
  return tensor_frame(out.value(), t, true);
}

#define IVF_INSTANTIATE_NET(T)                                                                                  \
  template ParamStore<T> init_ivf<T>(const IVFConfig&, std::uint64_t);                                          \
  template ParamStore<T> init_eer<T>(const EERConfig&, std::uint64_t);                                          \
  template SfeOut<T> sfe_forward(const Var<T>&, const BoundParams<T>&, const std::string&);                     \
  template Var<T> rdb_forward(const Var<T>&, const BoundParams<T>&, const std::string&, int);                   \
  template DamOut<T> dam_attention(const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&, Calibration);     \
  template DalsOut<T> dals_forward(const Var<T>&, const Var<T>&, const BoundParams<T>&, const IVFConfig&, int);  \
  template Embedding<T> embed(const Var<T>&, const Var<T>&, const BoundParams<T>&, const IVFConfig&);           \
  template Var<T> decode(const Embedding<T>&, double, const Var<T>&, const BoundParams<T>&, const IVFConfig&);  \
  template Var<T> eer_forward(const Var<T>&, const Var<T>&, const BoundParams<T>&, const EERConfig&);           \
  template Tensor<T> frame_tensor<T>(const imaging::Frame&);                                                    \
  template imaging::Frame tensor_frame(const Tensor<T>&, double, bool);                                         \
  template class Restorer<T>;

IVF_INSTANTIATE_NET(float)
IVF_INSTANTIATE_NET(double)

}  // namespace ivf::net
