#include "ivf/cli/commands.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "ivf/edi.hpp"
#include "ivf/error.hpp"
#include "ivf/events.hpp"
#include "ivf/network.hpp"
#include "ivf/nn/params.hpp"
#include "ivf/training.hpp"

namespace ivf::cli {

using nlohmann::json;

namespace {

std::string frame_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%04zu.pgm", i);
  return buf;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  try {
    return json::parse(buffer.str());
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& doc) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << doc.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

template <class T>
T field(const json& doc, const char* key, const fs::path& file) {
  try {
    return doc.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(file.string() + ": missing or malformed '" + key + "'");
  }
}

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

std::vector<double> grid_timestamps(int count) {
  if (count == 1) return {0.0};
  std::vector<double> out;
  for (int k = 0; k < count; ++k) out.push_back(static_cast<double>(k) / (count - 1));
  return out;
}

std::vector<int> referenced_for_window(int window, int references) {
  if (window == 1) return {0};
  return train::referenced_indices(window, std::min(window, references));
}

// Rendered frames listed in meta.json, in order.
struct FrameDir {
  std::vector<double> times;
  std::vector<fs::path> files;
};

FrameDir read_frame_dir(const fs::path& dir) {
  const auto meta_path = dir / "meta.json";
  const auto meta = read_json(meta_path);
  FrameDir out;
  const auto frames = field<json>(meta, "frames", meta_path);
  if (!frames.is_array() || frames.empty()) throw ConfigError(meta_path.string() + ": 'frames' must be a non-empty array");
  for (const auto& f : frames) {
    out.times.push_back(field<double>(f, "t", meta_path));
    out.files.push_back(dir / field<std::string>(f, "file", meta_path));
  }
  return out;
}

// Blur, exposure-normalized events, and the default query grid for a blur image on disk.
struct BlurInput {
  imaging::Frame blur;
  events::EventStream stream;
  std::vector<double> timestamps;
};

BlurInput read_blur_input(const RunConfig& cfg, const fs::path& blur_path, const fs::path& events_path) {
  BlurInput in;
  in.blur = imaging::read_pgm(blur_path);
  auto stream = events::read_csv(events_path, in.blur.width(), in.blur.height(), 0.0, 1.0);
  const auto side = sidecar_path(blur_path);
  if (fs::exists(side)) {
    const auto doc = read_json(side);
    const auto exposure = field<std::vector<double>>(doc, "exposure", side);
    if (exposure.size() != 2 || !(exposure[1] >= exposure[0]))
      throw ConfigError(side.string() + ": 'exposure' must be [t_start, t_end]");
    if (exposure[0] != 0.0 || exposure[1] != 1.0) {
      if (exposure[1] == exposure[0]) throw InvalidArgument("blur exposure has zero length; nothing to deblur");
      stream = events::normalize_window(stream, exposure[0], exposure[1]);
    }
    in.timestamps = field<std::vector<double>>(doc, "timestamps", side);
  } else {
    in.timestamps = grid_timestamps(cfg.window_frames);
  }
  in.stream = std::move(stream);
  return in;
}

std::vector<double> pick_timestamps(const std::vector<double>& explicit_ts, const RunConfig& cfg,
                                    const std::vector<double>& fallback) {
  const auto& ts = !explicit_ts.empty() ? explicit_ts : !cfg.eval_timestamps.empty() ? cfg.eval_timestamps : fallback;
  for (double t : ts)
    if (!(t >= 0.0 && t <= 1.0)) throw InvalidArgument("timestamps must lie in [0, 1]");
  return ts;
}

std::string hex(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_prediction_dir(const fs::path& dir, const std::vector<imaging::Frame>& frames, json extra) {
  fs::create_directories(dir);
  json list = json::array();
  for (std::size_t i = 0; i < frames.size(); ++i) {
    imaging::write_pgm(frames[i], dir / frame_name(i));
    list.push_back({{"t", frames[i].timestamp()}, {"file", frame_name(i)}});
  }
  extra["frames"] = list;
  write_json(dir / "index.json", extra);
}

}  // namespace

fs::path sidecar_path(const fs::path& blur_path) {
  auto p = blur_path;
  return p.replace_extension(".json");
}

void write_prediction_dir(const fs::path& dir, const std::vector<imaging::Frame>& frames) {
  write_prediction_dir(dir, frames, json::object());
}

std::vector<imaging::Frame> read_prediction_dir(const fs::path& dir) {
  const auto index_path = dir / "index.json";
  const auto doc = read_json(index_path);
  const auto list = field<json>(doc, "frames", index_path);
  if (!list.is_array()) throw ConfigError(index_path.string() + ": 'frames' must be an array");
  std::vector<imaging::Frame> out;
  for (const auto& f : list) {
    auto frame = imaging::read_pgm(dir / field<std::string>(f, "file", index_path));
    frame.set_timestamp(field<double>(f, "t", index_path));
    out.push_back(std::move(frame));
  }
  return out;
}

void cmd_simulate(const RunConfig& cfg, const SimulateArgs& args) {
  const auto scene = imaging::read_scene(args.scene);
  const int n = cfg.frame_count();
  fs::create_directories(args.out_frames_dir);
  json list = json::array();
  for (int j = 0; j < n; ++j) {
    const double t = static_cast<double>(j) / (n - 1);
    imaging::write_pgm(imaging::render_scene(scene, t, cfg.width, cfg.height), args.out_frames_dir / frame_name(j));
    list.push_back({{"index", j}, {"t", t}, {"file", frame_name(j)}});
  }
  const int dense_n = (n - 1) * cfg.oversample + 1;
  std::vector<imaging::Frame> dense;
  dense.reserve(static_cast<std::size_t>(dense_n));
  for (int j = 0; j < dense_n; ++j) {
    const double t = static_cast<double>(j) / (dense_n - 1);
    dense.push_back(imaging::render_scene(scene, t, cfg.width, cfg.height));
    dense.back().set_timestamp(t);
  }
  auto stream = events::simulate_events(imaging::FrameSequence(std::move(dense)), cfg.sim_options());
  if (cfg.noise_level > 0.0) stream = events::inject_noise(stream, cfg.noise_level, cfg.seed);
  ensure_parent(args.out_events);
  events::write_csv(stream, args.out_events);

  // Flow is analytic: every primitive moves at its constant (vx, vy) in pixels per unit time.
  json meta{{"width", cfg.width},   {"height", cfg.height},        {"fps", cfg.fps},
            {"oversample", cfg.oversample}, {"threshold_c", cfg.threshold_c}, {"noise_level", cfg.noise_level},
            {"seed", cfg.seed},     {"events", stream.size()},      {"frames", list},
            {"scene", json::parse(imaging::dump_scene(scene))}};
  write_json(args.out_frames_dir / "meta.json", meta);
}

void cmd_blur(const RunConfig& cfg, const BlurArgs& args) {
  const auto dir = read_frame_dir(args.frames_dir);
  const int n = static_cast<int>(dir.files.size());
  const int w = args.window > 0 ? args.window : cfg.window_frames;
  if (w > n)
    throw InvalidArgument("blur: window of " + std::to_string(w) + " frames exceeds the " + std::to_string(n) +
                          " available");
  const int start = (n - w) / 2;
  std::vector<imaging::Frame> frames;
  std::vector<int> indices;
  for (int i = start; i < start + w; ++i) {
    frames.push_back(imaging::read_pgm(dir.files[static_cast<std::size_t>(i)]));
    indices.push_back(i);
  }
  ensure_parent(args.out);
  imaging::write_pgm(imaging::synthesize_blur(frames), args.out);

  const auto refs = referenced_for_window(w, cfg.references);
  const auto ts = grid_timestamps(w);
  std::vector<double> ref_ts;
  for (int k : refs) ref_ts.push_back(ts[static_cast<std::size_t>(k)]);
  json side{{"window", w},
            {"first_frame", start},
            {"frame_indices", indices},
            {"exposure", {dir.times[static_cast<std::size_t>(start)], dir.times[static_cast<std::size_t>(start + w - 1)]}},
            {"timestamps", ts},
            {"referenced_indices", refs},
            {"referenced_timestamps", ref_ts}};
  write_json(sidecar_path(args.out), side);
}

void cmd_edi(const RunConfig& cfg, const EdiArgs& args) {
  const auto in = read_blur_input(cfg, args.blur, args.events);
  const edi::EdiOptions opt{cfg.edi_samples, cfg.log_eps};
  double c = cfg.threshold_c;
  if (args.threshold) c = *args.threshold;
  if (args.estimate_threshold) {
    std::vector<double> grid;
    for (int i = 2; i <= 40; ++i) grid.push_back(0.01 * i);
    c = edi::estimate_threshold(in.blur, in.stream, grid, 31, opt);
  }
  if (!(c > 0.0)) throw InvalidArgument("edi: threshold must be positive");
  std::vector<imaging::Frame> frames;
  edi::EdiDiagnostics diag;
  for (double t : pick_timestamps(args.timestamps, cfg, in.timestamps)) {
    auto f = edi::edi_deblur(in.blur, in.stream, t, c, opt, &diag);
    f.set_timestamp(t);
    frames.push_back(std::move(f));
  }
  write_prediction_dir(args.out_dir, frames,
                       {{"method", "edi"},
                        {"threshold_c", c},
                        {"clipped_low", diag.clipped_low},
                        {"clipped_high", diag.clipped_high}});
}

void cmd_train(const RunConfig& cfg, const TrainArgs& args) {
  if (args.scenes.empty()) throw InvalidArgument("train: at least one --scene is required");
  std::vector<train::Sample> data;
  for (const auto& s : args.scenes) data.push_back(train::make_sample(imaging::read_scene(s), cfg.sample_config()));
  cfg.network.check_input(cfg.width, cfg.height);

  auto ivf = net::init_ivf<float>(cfg.network, cfg.train.seed);
  const auto log1 = train::train_phase1(data, ivf, cfg.network, cfg.train);
  fs::create_directories(args.out_dir);
  nn::save_checkpoint(args.out_dir / "ivf.ckpt", ivf);
  train::write_phase1_log(args.out_dir / "phase1.csv", log1);

  json report{{"phase1_steps", log1.size()}, {"ivf_hash", hex(nn::param_hash(ivf))}};
  if (!log1.empty()) {
    report["initial_loss_im"] = log1.front().loss_im;
    report["final_loss_im"] = log1.back().loss_im;
  }
  if (cfg.train.epochs_phase2 > 0) {
    auto eer = net::init_eer<float>(cfg.eer, cfg.train.seed + 1);
    const auto log2 = train::train_phase2(data, ivf, cfg.network, eer, cfg.eer, cfg.train, cfg.p_list);
    nn::save_checkpoint(args.out_dir / "eer.ckpt", eer);
    train::write_phase2_log(args.out_dir / "phase2.csv", log2);
    report["phase2_steps"] = log2.size();
    report["referenced_l1_before_eer"] = train::referenced_l1(data, ivf, cfg.network, nullptr, cfg.eer, cfg.p_list);
    report["referenced_l1_after_eer"] = train::referenced_l1(data, ivf, cfg.network, &eer, cfg.eer, cfg.p_list);
  }
  write_json(args.out_dir / "train.json", report);
}

void cmd_query(const RunConfig& cfg, const QueryArgs& args) {
  if (args.out.has_value() == args.out_dir.has_value())
    throw InvalidArgument("query: give exactly one of --out and --out-dir");
  auto ivf = nn::load_checkpoint(args.ivf_checkpoint, net::init_ivf<float>(cfg.network, 0));
  std::optional<net::EERConfig> eer_cfg;
  std::optional<nn::ParamStore<float>> eer;
  if (args.eer_checkpoint) {
    eer_cfg = cfg.eer;
    eer = nn::load_checkpoint(*args.eer_checkpoint, net::init_eer<float>(cfg.eer, 0));
  }
  if (args.refine && !eer) throw InvalidArgument("query: --refine needs --eer");

  BlurInput in;
  if (args.scene) {
    auto sample = train::make_sample(imaging::read_scene(*args.scene), cfg.sample_config());
    in.blur = std::move(sample.blur);
    in.stream = std::move(sample.stream);
    in.timestamps = sample.ref_times;
  } else {
    in = read_blur_input(cfg, args.blur, args.events);
  }
  const auto ts = pick_timestamps(args.timestamps, cfg, in.timestamps);
  if (args.out && ts.size() != 1) throw InvalidArgument("query: --out writes one frame; use --out-dir for several");

  net::Restorer<float> restorer(cfg.network, std::move(ivf), eer_cfg, std::move(eer), cfg.p_list);
  restorer.set_input(in.blur, in.stream);
  std::vector<imaging::Frame> frames;
  for (double t : ts) frames.push_back(restorer.query(t, args.refine));
  if (args.out) {
    ensure_parent(*args.out);
    imaging::write_pgm(frames.front(), *args.out);
  } else {
    write_prediction_dir(*args.out_dir, frames,
                         {{"method", args.refine ? "ivf+eer" : "ivf"}, {"embed_calls", restorer.embed_count()}});
  }
}

void cmd_eval(const RunConfig& cfg, const EvalArgs& args) {
  const auto dir = read_frame_dir(args.frames_dir);
  const int n = static_cast<int>(dir.files.size());
  const int w = args.window > 0 ? args.window : cfg.window_frames;
  if (w > n) throw InvalidArgument("eval: window exceeds the available frames");
  const int start = (n - w) / 2;
  const auto refs = referenced_for_window(w, cfg.references);
  const auto preds = read_prediction_dir(args.pred_dir);
  if (preds.empty()) throw InvalidArgument("eval: no predictions in " + args.pred_dir.string());

  json per_frame = json::array();
  double sum_ref = 0, sum_non = 0, ssim_ref = 0, ssim_non = 0;
  int n_ref = 0, n_non = 0;
  for (const auto& p : preds) {
    const double t = p.timestamp();
    const int k = w == 1 ? 0 : static_cast<int>(std::lround(t * (w - 1)));
    const double grid_t = w == 1 ? 0.0 : static_cast<double>(k) / (w - 1);
    if (std::abs(grid_t - t) > 1e-9)
      throw InvalidArgument("eval: prediction at t=" + std::to_string(t) + " is not on the latent frame grid");
    const auto truth = imaging::read_pgm(dir.files[static_cast<std::size_t>(start + k)]);
    const double ps = imaging::psnr(p, truth);
    const double ss = imaging::ssim(p, truth);
    const bool referenced = std::find(refs.begin(), refs.end(), k) != refs.end();
    // Identical frames have infinite PSNR; JSON writes that as null.
    per_frame.push_back({{"t", t}, {"psnr", ps}, {"ssim", ss}, {"referenced", referenced}});
    (referenced ? sum_ref : sum_non) += ps;
    (referenced ? ssim_ref : ssim_non) += ss;
    ++(referenced ? n_ref : n_non);
  }
  auto mean = [](double s, int c) { return c ? json(s / c) : json(nullptr); };
  json report{{"per_frame", per_frame},
              {"mean_referenced", mean(sum_ref, n_ref)},
              {"mean_nonreferenced", mean(sum_non, n_non)},
              {"mean_psnr", mean(sum_ref + sum_non, n_ref + n_non)},
              {"mean_ssim_referenced", mean(ssim_ref, n_ref)},
              {"mean_ssim_nonreferenced", mean(ssim_non, n_non)}};
  write_json(args.out, report);
}

}  // namespace ivf::cli
