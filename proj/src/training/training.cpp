#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <random>

#include "ivf/error.hpp"
#include "ivf/representation.hpp"
#include "ivf/training.hpp"

namespace ivf::train {

using nn::BoundParams;
using nn::ParamStore;
using nn::Tape;
using nn::Tensor;
using nn::Var;

template <class T>
Var<T> loss_im(const std::vector<Var<T>>& predictions, const std::vector<Tensor<T>>& ground_truth) {
  if (predictions.empty()) throw InvalidArgument("loss_im: no predictions");
  if (predictions.size() != ground_truth.size()) throw InvalidArgument("loss_im: prediction/ground-truth count mismatch");
  Var<T> acc = nn::mean_abs_diff(predictions[0], ground_truth[0]);
  for (std::size_t k = 1; k < predictions.size(); ++k) acc = nn::add(acc, nn::mean_abs_diff(predictions[k], ground_truth[k]));
  return nn::scale(acc, T(1) / static_cast<T>(predictions.size()));
}

template <class T>
Var<T> loss_motion(const std::vector<Var<T>>& predictions, const std::vector<std::vector<Tensor<T>>>& targets) {
  if (predictions.empty()) throw InvalidArgument("loss_motion: M must be at least 1");
  if (predictions.size() != targets.size()) throw InvalidArgument("loss_motion: prediction/target count mismatch");
  const std::size_t n = targets[0].size();
  if (n == 0) throw InvalidArgument("loss_motion: N must be at least 1");
  Var<T> acc;
  for (std::size_t j = 0; j < predictions.size(); ++j) {
    if (targets[j].size() != n) throw InvalidArgument("loss_motion: ragged target lists");
    for (const auto& target : targets[j]) {
      auto term = nn::mean_abs_diff(predictions[j], target);
      acc = acc.valid() ? nn::add(acc, term) : term;
    }
  }
  return nn::scale(acc, T(1) / static_cast<T>(predictions.size() * n));
}

template <class T>
Var<T> loss_texture(const std::vector<Var<T>>& refined, const std::vector<Tensor<T>>& ground_truth) {
  return loss_im(refined, ground_truth);
}

void TrainConfig::validate(int references) const {
  if (epochs_phase1 < 0 || epochs_phase2 < 0) throw InvalidArgument("train: epochs must be non-negative");
  if (lambda1_a < 0 || lambda2_a < 0 || lambda1_b < 0 || lambda2_b < 0)
    throw InvalidArgument("train: lambda values must be non-negative");
  if (M < 1) throw InvalidArgument("train: M must be at least 1");
  if (N < 1 || N > references) throw InvalidArgument("train: N must lie in [1, K]");
  if (batch < 1 || repeats < 1) throw InvalidArgument("train: batch and repeats must be at least 1");
  if (!(lr_initial > 0) || !(lr_final > 0) || !(lr2 > 0)) throw InvalidArgument("train: learning rates must be positive");
  if (lr_hold_epochs < 0 || lr_decay_end < lr_hold_epochs)
    throw InvalidArgument("train: need 0 <= lr_hold_epochs <= lr_decay_end");
  if (lr2_decay_every < 1 || !(lr2_decay > 0)) throw InvalidArgument("train: invalid phase-2 decay");
}

double TrainConfig::lr_phase1(int epoch) const {
  if (epoch < lr_hold_epochs) return lr_initial;
  if (epoch >= lr_decay_end) return lr_final;
  const double u = static_cast<double>(epoch - lr_hold_epochs) / (lr_decay_end - lr_hold_epochs);
  return lr_initial + (lr_final - lr_initial) * u;
}

double TrainConfig::lr_phase2(int epoch) const { return lr2 * std::pow(lr2_decay, epoch / lr2_decay_every); }

namespace {

std::string num(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

// Per-orientation tensors reused across steps.
struct Item {
  const Sample* sample = nullptr;
  Tensor<float> blur;
  Tensor<float> events;
  std::vector<Tensor<float>> refs;
};

Item make_item(const Sample& s, int segments) {
  Item it;
  it.sample = &s;
  it.blur = net::frame_tensor<float>(s.blur);
  it.events = repr::stack_events(s.stream, segments).cast<float>();
  for (const auto& f : s.ref_frames) it.refs.push_back(net::frame_tensor<float>(f));
  return it;
}

// Uniform draw from [0, 1] excluding the referenced timestamps.
double draw_nonreferenced(std::mt19937_64& rng, const std::vector<double>& refs) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (;;) {
    const double t = u(rng);
    if (std::find(refs.begin(), refs.end(), t) == refs.end()) return t;
  }
}

void accumulate_grads(ParamStore<float>& total, const ParamStore<float>& g, bool first) {
  if (first) {
    total = g;
    return;
  }
  for (const auto& name : g.names()) {
    auto& dst = total.get(name);
    const auto& src = g.get(name);
    for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] += src[i];
  }
}

void scale_grads(ParamStore<float>& g, float factor) {
  for (const auto& name : g.names())
    for (float& v : g.get(name).values()) v *= factor;
}

std::vector<std::vector<std::size_t>> batches(std::vector<std::size_t> order, int batch) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch))
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + static_cast<std::size_t>(batch))));
  return out;
}

std::vector<Item> prepare(const std::vector<Sample>& dataset, bool flip, int segments,
                          std::vector<Sample>& flipped_samples) {
  std::vector<Item> items;
  flipped_samples.clear();
  if (flip) {
    flipped_samples.reserve(dataset.size());
    for (const auto& s : dataset) flipped_samples.push_back(s.flipped());
  }
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    items.push_back(make_item(dataset[i], segments));
    if (flip) items.push_back(make_item(flipped_samples[i], segments));
  }
  return items;
}

}  // namespace

void write_phase1_log(const std::filesystem::path& path, const std::vector<Phase1Record>& log) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "epoch,step,lr,lambda1,lambda2,loss_im,loss_motion,total\n";
  for (const auto& r : log)
    out << r.epoch << ',' << r.step << ',' << num(r.lr) << ',' << num(r.lambda1) << ',' << num(r.lambda2) << ','
        << num(r.loss_im) << ',' << num(r.loss_motion) << ',' << num(r.total) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

void write_phase2_log(const std::filesystem::path& path, const std::vector<Phase2Record>& log) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "epoch,step,lr,loss_texture\n";
  for (const auto& r : log) out << r.epoch << ',' << r.step << ',' << num(r.lr) << ',' << num(r.loss_texture) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<Phase1Record> train_phase1(const std::vector<Sample>& dataset, ParamStore<float>& ivf,
                                       const net::IVFConfig& net_cfg, const TrainConfig& cfg) {
  if (dataset.empty()) throw InvalidArgument("train_phase1: empty dataset");
  const int K = static_cast<int>(dataset[0].ref_times.size());
  cfg.validate(K);
  net_cfg.validate();
  std::vector<Sample> flipped;
  const auto items = prepare(dataset, cfg.flip, net_cfg.event_segments, flipped);
  const std::size_t stride = cfg.flip ? 2 : 1;

  std::mt19937_64 rng(cfg.seed);
  nn::AdamState<float> adam;
  std::vector<Phase1Record> log;
  int step = 0;
  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs_phase1; ++epoch) {
    const double lr = cfg.lr_phase1(epoch);
    const bool switched = epoch >= cfg.lambda_switch_epoch;
    const double l1 = switched ? cfg.lambda1_b : cfg.lambda1_a;
    const double l2 = switched ? cfg.lambda2_b : cfg.lambda2_a;
    for (int rep = 0; rep < cfg.repeats; ++rep) {
      std::shuffle(order.begin(), order.end(), rng);
      for (const auto& group : batches(order, cfg.batch)) {
        ParamStore<float> grads;
        Phase1Record rec{epoch, step, lr, l1, l2, 0, 0, 0};
        bool first = true;
        for (std::size_t idx : group) {
          std::size_t pick = idx * stride;
          if (cfg.flip && std::uniform_int_distribution<int>(0, 1)(rng)) pick += 1;
          const Item& it = items[pick];
          const Sample& s = *it.sample;

          Tape<float> tape;
          BoundParams<float> p(tape, ivf, true);
          auto blur = tape.constant(it.blur);
          const auto emb = net::embed(blur, tape.constant(it.events), p, net_cfg);
          std::vector<Var<float>> preds;
          for (double t : s.ref_times) preds.push_back(net::decode(emb, t, blur, p, net_cfg));
          auto lim = loss_im(preds, it.refs);

          std::vector<Var<float>> mpreds;
          std::vector<std::vector<Tensor<float>>> targets;
          for (int j = 0; j < cfg.M; ++j) {
            const double tp = draw_nonreferenced(rng, s.ref_times);
            mpreds.push_back(net::decode(emb, tp, blur, p, net_cfg));
            std::vector<Tensor<float>> tj;
            for (const auto& f : motion_targets(s, tp, cfg.N)) tj.push_back(net::frame_tensor<float>(f));
            targets.push_back(std::move(tj));
          }
          auto lmo = loss_motion(mpreds, targets);
          auto total = nn::add(nn::scale(lim, static_cast<float>(l1)), nn::scale(lmo, static_cast<float>(l2)));
          tape.backward(total);
          accumulate_grads(grads, p.gradients(), first);
          first = false;
          rec.loss_im += lim.value()[0];
          rec.loss_motion += lmo.value()[0];
          rec.total += total.value()[0];
        }
        const double inv = 1.0 / static_cast<double>(group.size());
        if (group.size() > 1) scale_grads(grads, static_cast<float>(inv));
        rec.loss_im *= inv;
        rec.loss_motion *= inv;
        rec.total *= inv;
        if (!std::isfinite(rec.total)) throw NumericalError("train_phase1: non-finite loss at step " + std::to_string(step));
        nn::adam_step(ivf, grads, adam, static_cast<float>(lr));
        log.push_back(rec);
        ++step;
      }
    }
  }
  return log;
}

std::vector<imaging::Frame> predict_references(const Sample& sample, const ParamStore<float>& ivf,
                                               const net::IVFConfig& net_cfg) {
  Tape<float> tape;
  BoundParams<float> p(tape, ivf, false);
  auto blur = tape.constant(net::frame_tensor<float>(sample.blur));
  const auto ev = repr::stack_events(sample.stream, net_cfg.event_segments).cast<float>();
  const auto emb = net::embed(blur, tape.constant(ev), p, net_cfg);
  std::vector<imaging::Frame> out;
  for (double t : sample.ref_times) out.push_back(net::tensor_frame(net::decode(emb, t, blur, p, net_cfg).value(), t, false));
  return out;
}

namespace {

struct EerItem {
  std::vector<Tensor<float>> initial;
  std::vector<Tensor<float>> subtle;
  std::vector<Tensor<float>> refs;
};

EerItem make_eer_item(const Sample& s, const ParamStore<float>& ivf, const net::IVFConfig& net_cfg,
                      const std::vector<int>& counts) {
  EerItem it;
  const auto preds = predict_references(s, ivf, net_cfg);
  for (std::size_t k = 0; k < preds.size(); ++k) {
    it.initial.push_back(net::frame_tensor<float>(preds[k].clamped()));
    it.subtle.push_back(repr::subtle_segments(s.stream, s.ref_times[k], counts).cast<float>());
    it.refs.push_back(net::frame_tensor<float>(s.ref_frames[k]));
  }
  return it;
}

}  // namespace

void check_frozen(const ParamStore<float>& ivf, std::uint64_t expected_hash) {
  if (nn::param_hash(ivf) != expected_hash) throw InvalidArgument("train_phase2: IVF parameters changed during phase 2");
}

std::vector<Phase2Record> train_phase2(const std::vector<Sample>& dataset, const ParamStore<float>& ivf,
                                       const net::IVFConfig& net_cfg, ParamStore<float>& eer,
                                       const net::EERConfig& eer_cfg, const TrainConfig& cfg,
                                       const std::vector<int>& segment_counts) {
  if (dataset.empty()) throw InvalidArgument("train_phase2: empty dataset");
  cfg.validate(static_cast<int>(dataset[0].ref_times.size()));
  eer_cfg.validate();
  if (static_cast<int>(segment_counts.size()) != eer_cfg.segment_levels)
    throw InvalidArgument("train_phase2: P list length does not match the EER segment levels");
  const auto frozen_hash = nn::param_hash(ivf);

  std::vector<Sample> flipped;
  if (cfg.flip)
    for (const auto& s : dataset) flipped.push_back(s.flipped());
  std::vector<EerItem> items;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    items.push_back(make_eer_item(dataset[i], ivf, net_cfg, segment_counts));
    if (cfg.flip) items.push_back(make_eer_item(flipped[i], ivf, net_cfg, segment_counts));
  }
  const std::size_t stride = cfg.flip ? 2 : 1;

  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  nn::AdamState<float> adam;
  std::vector<Phase2Record> log;
  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs_phase2; ++epoch) {
    const double lr = cfg.lr_phase2(epoch);
    for (int rep = 0; rep < cfg.repeats; ++rep) {
      std::shuffle(order.begin(), order.end(), rng);
      for (const auto& group : batches(order, cfg.batch)) {
        ParamStore<float> grads;
        Phase2Record rec{epoch, step, lr, 0};
        bool first = true;
        for (std::size_t idx : group) {
          std::size_t pick = idx * stride;
          if (cfg.flip && std::uniform_int_distribution<int>(0, 1)(rng)) pick += 1;
          const EerItem& it = items[pick];
          Tape<float> tape;
          BoundParams<float> p(tape, eer, true);
          std::vector<Var<float>> refined;
          for (std::size_t k = 0; k < it.initial.size(); ++k)
            refined.push_back(net::eer_forward(tape.constant(it.initial[k]), tape.constant(it.subtle[k]), p, eer_cfg));
          auto loss = loss_texture(refined, it.refs);
          tape.backward(loss);
          accumulate_grads(grads, p.gradients(), first);
          first = false;
          rec.loss_texture += loss.value()[0];
        }
        const double inv = 1.0 / static_cast<double>(group.size());
        if (group.size() > 1) scale_grads(grads, static_cast<float>(inv));
        rec.loss_texture *= inv;
        if (!std::isfinite(rec.loss_texture)) throw NumericalError("train_phase2: non-finite loss");
        nn::adam_step(eer, grads, adam, static_cast<float>(lr));
        log.push_back(rec);
        ++step;
      }
    }
  }
  check_frozen(ivf, frozen_hash);
  return log;
}

double referenced_l1(const std::vector<Sample>& dataset, const ParamStore<float>& ivf, const net::IVFConfig& net_cfg,
                     const ParamStore<float>* eer, const net::EERConfig& eer_cfg,
                     const std::vector<int>& segment_counts) {
  if (dataset.empty()) throw InvalidArgument("referenced_l1: empty dataset");
  double total = 0.0;
  for (const auto& s : dataset) {
    const auto it = make_eer_item(s, ivf, net_cfg, segment_counts);
    Tape<float> tape;
    std::vector<Var<float>> outs;
    if (eer) {
      BoundParams<float> p(tape, *eer, false);
      for (std::size_t k = 0; k < it.initial.size(); ++k)
        outs.push_back(net::eer_forward(tape.constant(it.initial[k]), tape.constant(it.subtle[k]), p, eer_cfg));
    } else {
      for (const auto& t : it.initial) outs.push_back(tape.constant(t));
    }
    total += loss_texture(outs, it.refs).value()[0];
  }
  return total / static_cast<double>(dataset.size());
}

template Var<float> loss_im(const std::vector<Var<float>>&, const std::vector<Tensor<float>>&);
template Var<double> loss_im(const std::vector<Var<double>>&, const std::vector<Tensor<double>>&);
template Var<float> loss_motion(const std::vector<Var<float>>&, const std::vector<std::vector<Tensor<float>>>&);
template Var<double> loss_motion(const std::vector<Var<double>>&, const std::vector<std::vector<Tensor<double>>>&);
template Var<float> loss_texture(const std::vector<Var<float>>&, const std::vector<Tensor<float>>&);
template Var<double> loss_texture(const std::vector<Var<double>>&, const std::vector<Tensor<double>>&);

}  // namespace ivf::train
