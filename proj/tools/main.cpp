#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "ivf/cli/commands.hpp"
#include "ivf/cli/config.hpp"
#include "ivf/error.hpp"

namespace {

constexpr int kInputError = 2;
constexpr int kNumericalError = 3;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "run configuration (JSON)");
  sub->add_option("--seed", c.seed, "override sim.seed and train.seed");
}

ivf::cli::RunConfig resolve(const Common& c) {
  auto cfg = c.config.empty() ? ivf::cli::RunConfig{} : ivf::cli::load_run_config(c.config);
  if (c.seed) {
    cfg.seed = *c.seed;
    cfg.train.seed = *c.seed;
  }
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  namespace cli = ivf::cli;
  CLI::App app{"Continuous-time video recovery from a blurred frame and events"};
  app.require_subcommand(1);
  Common common;

  cli::SimulateArgs sim;
  auto* s = app.add_subcommand("simulate", "render a scene to frames and events");
  add_common(s, common);
  s->add_option("--scene", sim.scene, "scene JSON")->required();
  s->add_option("--out-events", sim.out_events, "events CSV")->required();
  s->add_option("--out-frames-dir", sim.out_frames_dir, "directory for PGM frames and meta.json")->required();

  cli::BlurArgs blur;
  auto* b = app.add_subcommand("blur", "average the central frames into a blurred image");
  add_common(b, common);
  b->add_option("--frames-dir", blur.frames_dir)->required();
  b->add_option("--window", blur.window, "frames to average (default blur.window_frames)");
  b->add_option("--out", blur.out, "blurred PGM; a .json sidecar is written next to it")->required();

  cli::EdiArgs edi;
  std::optional<double> threshold;
  auto* e = app.add_subcommand("edi", "double-integral deblurring baseline");
  add_common(e, common);
  e->add_option("--blur", edi.blur)->required();
  e->add_option("--events", edi.events)->required();
  e->add_option("--out-dir", edi.out_dir)->required();
  e->add_option("--threshold", threshold, "contrast threshold (default sim.threshold_c)");
  e->add_flag("--estimate-threshold", edi.estimate_threshold, "pick the threshold by reblur error");
  e->add_option("--t", edi.timestamps, "query timestamps in [0, 1]");

  cli::TrainArgs tr;
  auto* t = app.add_subcommand("train", "two-phase training on simulated scenes");
  add_common(t, common);
  t->add_option("--scene", tr.scenes, "scene JSON (repeatable)")->required();
  t->add_option("--out-dir", tr.out_dir)->required();

  cli::QueryArgs q;
  std::string eer_ckpt, scene, out, out_dir;
  auto* qu = app.add_subcommand("query", "restore frames at arbitrary timestamps");
  add_common(qu, common);
  qu->add_option("--ckpt", q.ivf_checkpoint, "IVF checkpoint")->required();
  qu->add_option("--eer", eer_ckpt, "EER checkpoint");
  qu->add_option("--scene", scene, "rebuild the training input from a scene instead of --blur/--events");
  auto* qb = qu->add_option("--blur", q.blur);
  auto* qe = qu->add_option("--events", q.events);
  qu->add_option("--t", q.timestamps, "timestamps in [0, 1]");
  qu->add_flag("--refine", q.refine, "apply the EER");
  qu->add_option("--out", out, "output PGM (one timestamp)");
  qu->add_option("--out-dir", out_dir, "output prediction directory");
  qb->needs(qe);
  qe->needs(qb);

  cli::EvalArgs ev;
  auto* v = app.add_subcommand("eval", "PSNR/SSIM against rendered latent frames");
  add_common(v, common);
  v->add_option("--frames-dir", ev.frames_dir)->required();
  v->add_option("--pred-dir", ev.pred_dir)->required();
  v->add_option("--out", ev.out, "report JSON")->required();
  v->add_option("--window", ev.window, "latent window (default blur.window_frames)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    std::cerr << err.what() << "\n\n" << app.help();
    return kInputError;
  }

  try {
    const auto cfg = resolve(common);
    if (s->parsed()) {
      cli::cmd_simulate(cfg, sim);
    } else if (b->parsed()) {
      cli::cmd_blur(cfg, blur);
    } else if (e->parsed()) {
      edi.threshold = threshold;
      cli::cmd_edi(cfg, edi);
    } else if (t->parsed()) {
      cli::cmd_train(cfg, tr);
    } else if (qu->parsed()) {
      if (!eer_ckpt.empty()) q.eer_checkpoint = eer_ckpt;
      if (!scene.empty()) q.scene = scene;
      if (!out.empty()) q.out = out;
      if (!out_dir.empty()) q.out_dir = out_dir;
      if (!q.scene && q.blur.empty()) throw ivf::InvalidArgument("query: give --scene or --blur with --events");
      cli::cmd_query(cfg, q);
    } else if (v->parsed()) {
      cli::cmd_eval(cfg, ev);
    }
  } catch (const ivf::NumericalError& err) {
    std::cerr << "numerical failure: " << err.what() << '\n';
    return kNumericalError;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kInputError;
  }
  return 0;
}
