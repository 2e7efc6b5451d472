#include "ivf/cli/config.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <type_traits>

#include <json.hpp>

#include "ivf/error.hpp"

namespace ivf::cli {

using nlohmann::json;

namespace {

template <class T>
struct is_vector : std::false_type {};
template <class T>
struct is_vector<std::vector<T>> : std::true_type {};

// Strict JSON type check; numbers are never narrowed or truncated.
template <class T>
bool matches(const json& v) {
  if constexpr (is_vector<T>::value) {
    if (!v.is_array()) return false;
    for (const auto& e : v)
      if (!matches<typename T::value_type>(e)) return false;
    return true;
  } else if constexpr (std::is_same_v<T, bool>) {
    return v.is_boolean();
  } else if constexpr (std::is_same_v<T, std::string>) {
    return v.is_string();
  } else if constexpr (std::is_unsigned_v<T>) {
    return v.is_number_unsigned();
  } else if constexpr (std::is_integral_v<T>) {
    return v.is_number_integer() && v.get<std::int64_t>() >= std::numeric_limits<T>::min() &&
           v.get<std::int64_t>() <= std::numeric_limits<T>::max();
  } else {
    return v.is_number();
  }
}

// Reads one object, remembering its path and which keys were consumed.
class Section {
 public:
  Section(const json* obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (obj_ && !obj_->is_object()) throw ConfigError(path_ + ": expected an object");
  }

  Section child(const char* key) {
    seen_.insert(key);
    if (!obj_ || !obj_->contains(key)) return Section(nullptr, path_ + "." + key);
    return Section(&obj_->at(key), path_ + "." + key);
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!obj_ || !obj_->contains(key)) return;
    const auto& v = obj_->at(key);
    if (!matches<T>(v)) throw ConfigError(path_ + "." + key + ": wrong type");
    out = v.get<T>();
  }

  std::string where(const char* key) const { return path_ + "." + key; }

  void reject_unknown() const {
    if (!obj_) return;
    for (const auto& [k, _] : obj_->items())
      if (!seen_.count(k)) throw ConfigError(path_ + "." + k + ": unknown key");
  }

 private:
  const json* obj_;
  std::string path_;
  std::set<std::string> seen_;
};

void require(bool ok, const std::string& where, const std::string& what) {
  if (!ok) throw ConfigError(where + ": " + what);
}

}  // namespace

int RunConfig::frame_count() const { return static_cast<int>(std::lround(fps)); }

events::SimulationOptions RunConfig::sim_options() const { return {threshold_c, log_eps, seed}; }

train::SampleConfig RunConfig::sample_config() const {
  train::SampleConfig s;
  s.width = width;
  s.height = height;
  s.latent_frames = window_frames;
  s.oversample = oversample;
  s.references = references;
  s.sim = sim_options();
  s.noise_level = noise_level;
  s.noise_seed = seed;
  return s;
}

void RunConfig::validate() const {
  require(width > 0 && height > 0, "config.sensor", "width and height must be positive");
  require(frame_count() >= 2, "config.sim.fps", "need at least two frames");
  require(oversample >= 1, "config.sim.oversample", "must be at least 1");
  require(threshold_c > 0, "config.sim.threshold_c", "must be positive");
  require(log_eps > 0, "config.sim.log_eps", "must be positive");
  require(noise_level >= 0, "config.sim.noise_level", "must be non-negative");
  require(window_frames >= 1 && window_frames <= frame_count(), "config.blur.window_frames",
          "must lie in [1, round(fps)]");
  require(!p_list.empty(), "config.representation.P_list", "must not be empty");
  for (int p : p_list) require(p >= 1, "config.representation.P_list", "entries must be at least 1");
  require(edi_samples >= 1, "config.edi.samples", "must be at least 1");
  require(references >= 2, "config.train.references", "must be at least 2");
  for (double t : eval_timestamps) require(t >= 0.0 && t <= 1.0, "config.eval.timestamps", "entries must lie in [0, 1]");
  try {
    network.validate();
    eer.validate();
    train.validate(references);
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

RunConfig parse_run_config(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  RunConfig c;
  Section root(&doc, "config");

  auto sensor = root.child("sensor");
  sensor.get("width", c.width);
  sensor.get("height", c.height);
  sensor.reject_unknown();

  auto sim = root.child("sim");
  sim.get("fps", c.fps);
  sim.get("oversample", c.oversample);
  sim.get("threshold_c", c.threshold_c);
  sim.get("log_eps", c.log_eps);
  sim.get("noise_level", c.noise_level);
  sim.get("seed", c.seed);
  sim.reject_unknown();

  auto blur = root.child("blur");
  blur.get("window_frames", c.window_frames);
  blur.reject_unknown();

  auto rep = root.child("representation");
  rep.get("segments", c.network.event_segments);
  rep.get("fourier_L", c.network.fourier_L);
  rep.get("P_list", c.p_list);
  rep.reject_unknown();

  auto edi = root.child("edi");
  edi.get("samples", c.edi_samples);
  edi.reject_unknown();

  auto net = root.child("network");
  net.get("channels", c.network.channels);
  net.get("dals_blocks", c.network.dals_blocks);
  net.get("window", c.network.window);
  net.get("heads", c.network.heads);
  net.get("mlp_hidden", c.network.mlp_hidden);
  net.get("mlp_layers", c.network.mlp_layers);
  net.get("rdb_convs", c.network.rdb_convs);
  net.get("rdb_growth", c.network.rdb_growth);
  net.get("gff_kernel", c.network.gff_kernel);
  net.get("up_channels", c.network.up_channels);
  net.get("mlp_ratio", c.network.mlp_ratio);
  net.get("dam", c.network.dam);
  std::string calibration = net::to_string(c.network.calibration);
  net.get("calibration", calibration);
  try {
    c.network.calibration = net::parse_calibration(calibration);
  } catch (const InvalidArgument& e) {
    throw ConfigError(net.where("calibration") + ": " + e.what());
  }
  auto eer = net.child("eer");
  eer.get("channels", c.eer.channels);
  eer.get("rdbs", c.eer.rdbs);
  eer.get("rdb_convs", c.eer.rdb_convs);
  eer.get("rdb_growth", c.eer.rdb_growth);
  eer.reject_unknown();
  net.reject_unknown();
  c.eer.segment_levels = static_cast<int>(c.p_list.size());

  auto tr = root.child("train");
  auto& t = c.train;
  tr.get("epochs_phase1", t.epochs_phase1);
  tr.get("lambda_switch_epoch", t.lambda_switch_epoch);
  tr.get("lr_initial", t.lr_initial);
  tr.get("lr_final", t.lr_final);
  tr.get("lr_hold_epochs", t.lr_hold_epochs);
  tr.get("lr_decay_end", t.lr_decay_end);
  tr.get("lambda1_a", t.lambda1_a);
  tr.get("lambda2_a", t.lambda2_a);
  tr.get("lambda1_b", t.lambda1_b);
  tr.get("lambda2_b", t.lambda2_b);
  tr.get("M", t.M);
  tr.get("N", t.N);
  tr.get("batch", t.batch);
  tr.get("repeats", t.repeats);
  tr.get("seed", t.seed);
  tr.get("flip", t.flip);
  tr.get("epochs_phase2", t.epochs_phase2);
  tr.get("lr2", t.lr2);
  tr.get("lr2_decay_every", t.lr2_decay_every);
  tr.get("lr2_decay", t.lr2_decay);
  tr.get("references", c.references);
  tr.reject_unknown();

  auto ev = root.child("eval");
  ev.get("timestamps", c.eval_timestamps);
  ev.reject_unknown();

  root.reject_unknown();
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_run_config(buffer.str());
}

std::string dump_run_config(const RunConfig& c) {
  const auto& n = c.network;
  const auto& t = c.train;
  json doc{
      {"sensor", {{"width", c.width}, {"height", c.height}}},
      {"sim",
       {{"fps", c.fps},
        {"oversample", c.oversample},
        {"threshold_c", c.threshold_c},
        {"log_eps", c.log_eps},
        {"noise_level", c.noise_level},
        {"seed", c.seed}}},
      {"blur", {{"window_frames", c.window_frames}}},
      {"representation", {{"segments", n.event_segments}, {"fourier_L", n.fourier_L}, {"P_list", c.p_list}}},
      {"edi", {{"samples", c.edi_samples}}},
      {"network",
       {{"channels", n.channels},
        {"dals_blocks", n.dals_blocks},
        {"window", n.window},
        {"heads", n.heads},
        {"mlp_hidden", n.mlp_hidden},
        {"mlp_layers", n.mlp_layers},
        {"rdb_convs", n.rdb_convs},
        {"rdb_growth", n.rdb_growth},
        {"gff_kernel", n.gff_kernel},
        {"up_channels", n.up_channels},
        {"mlp_ratio", n.mlp_ratio},
        {"dam", n.dam},
        {"calibration", net::to_string(n.calibration)},
        {"eer",
         {{"channels", c.eer.channels},
          {"rdbs", c.eer.rdbs},
          {"rdb_convs", c.eer.rdb_convs},
          {"rdb_growth", c.eer.rdb_growth}}}}},
      {"train",
       {{"epochs_phase1", t.epochs_phase1},
        {"lambda_switch_epoch", t.lambda_switch_epoch},
        {"lr_initial", t.lr_initial},
        {"lr_final", t.lr_final},
        {"lr_hold_epochs", t.lr_hold_epochs},
        {"lr_decay_end", t.lr_decay_end},
        {"lambda1_a", t.lambda1_a},
        {"lambda2_a", t.lambda2_a},
        {"lambda1_b", t.lambda1_b},
        {"lambda2_b", t.lambda2_b},
        {"M", t.M},
        {"N", t.N},
        {"batch", t.batch},
        {"repeats", t.repeats},
        {"seed", t.seed},
        {"flip", t.flip},
        {"epochs_phase2", t.epochs_phase2},
        {"lr2", t.lr2},
        {"lr2_decay_every", t.lr2_decay_every},
        {"lr2_decay", t.lr2_decay},
        {"references", c.references}}},
      {"eval", {{"timestamps", c.eval_timestamps}}},
  };
  return doc.dump(2);
}

}  // namespace ivf::cli
