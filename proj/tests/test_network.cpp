#include <doctest.h>

#include <cmath>
#include <random>
#include <set>
#include <utility>

#include "helpers.hpp"
#include "ivf/error.hpp"
#include "ivf/network.hpp"
#include "ivf/nn/gradcheck.hpp"
#include "ivf/representation.hpp"

using namespace ivf;
using namespace ivf::nn;
using namespace ivf::net;

namespace {

using T64 = Tensor<double>;
using V64 = Var<double>;

constexpr double kGradTol = 1e-4;
constexpr double kEps = 1e-5;
// Losses here are O(10), so central differences with this step carry ~1e-10 of roundoff; gradients below
// this floor are compared absolutely (|a - n| < kGradTol * kFloor).
constexpr double kFloor = 1e-5;

T64 random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  T64 t(std::move(shape));
  for (double& v : t.values()) v = u(rng);
  return t;
}

V64 probe(const V64& y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, y.tape().constant(random_tensor(rng, y.shape()))));
}

IVFConfig tiny_config() {
  IVFConfig c;
  c.channels = 4;
  c.dals_blocks = 2;
  c.window = 2;
  c.heads = 2;
  c.fourier_L = 2;
  c.mlp_hidden = 6;
  c.mlp_layers = 2;
  c.rdb_convs = 2;
  c.rdb_growth = 2;
  c.up_channels = 4;
  c.event_segments = 1;
  c.mlp_ratio = 2;
  return c;
}

EERConfig tiny_eer() {
  EERConfig c;
  c.channels = 3;
  c.rdbs = 2;
  c.rdb_convs = 2;
  c.rdb_growth = 2;
  c.segment_levels = 1;
  return c;
}

// Replaces every parameter, including the zero-initialised heads, so no gradient path is dead.
ParamStore<double> randomized(const ParamStore<double>& store, std::uint64_t seed, double scale = 0.5) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  ParamStore<double> out;
  for (const auto& n : store.names()) {
    T64 t = store.get(n);
    for (double& v : t.values()) v = u(rng);
    out.add(n, std::move(t));
  }
  return out;
}

void zero_prefix(ParamStore<double>& store, const std::string& prefix) {
  for (const auto& n : store.names())
    if (n.rfind(prefix, 0) == 0) store.get(n).fill(0.0);
}

}  // namespace

TEST_CASE("sfe: shapes, zero input, errors, gradient") {
  const auto cfg = tiny_config();
  const auto store = init_ivf<double>(cfg, 3);
  Tape<double> tape;
  BoundParams<double> p(tape, store, false);
  auto out = sfe_forward(tape.constant(T64({1, 8, 6})), p, "sfe_img");
  CHECK(out.feat_minus1.shape() == Shape{4, 4, 3});
  CHECK(out.feat_0.shape() == Shape{4, 4, 3});
  for (double v : out.feat_minus1.value().values()) CHECK(v == 0.0);
  for (double v : out.feat_0.value().values()) CHECK(v == 0.0);
  CHECK_THROWS_AS(sfe_forward(tape.constant(T64({1, 7, 6})), p, "sfe_img"), InvalidArgument);

  std::mt19937_64 rng(4);
  const auto x = random_tensor(rng, {2, 6, 6});
  ParamStore<double> sub;
  for (const std::string n : {"sfe_evt.conv5.w", "sfe_evt.conv5.b", "sfe_evt.conv3.w", "sfe_evt.conv3.b"})
    sub.add(n, store.get(n));
  sub = randomized(sub, 5);
  const auto r = grad_check(
      [&](Tape<double>& t, const BoundParams<double>& q) {
        const auto o = sfe_forward(t.constant(x), q, "sfe_evt");
        return add(probe(o.feat_minus1, 1), probe(o.feat_0, 2));
      },
      sub, kEps, kFloor);
  INFO(r.worst, " a=", r.analytic, " n=", r.numeric);
  CHECK(r.max_rel_error < kGradTol);
}

TEST_CASE("rdb: zero branch is identity, gradient") {
  const auto cfg = tiny_config();
  auto store = init_ivf<double>(cfg, 3);
  std::mt19937_64 rng(6);
  const auto x = random_tensor(rng, {4, 4, 4});
  {
    auto z = store;
    zero_prefix(z, "dals1.img.rdb.fuse");
    Tape<double> tape;
    BoundParams<double> p(tape, z, false);
    CHECK(rdb_forward(tape.constant(x), p, "dals1.img.rdb", cfg.rdb_convs).value() == x);
  }
  ParamStore<double> sub;
  for (const auto& n : store.names())
    if (n.rfind("dals1.img.rdb", 0) == 0) sub.add(n, store.get(n));
  sub = randomized(sub, 7);
  const auto r = grad_check(
      [&](Tape<double>& t, const BoundParams<double>& q) {
        return probe(rdb_forward(t.constant(x), q, "dals1.img.rdb", cfg.rdb_convs));
      },
      sub, kEps, kFloor);
  INFO(r.worst, " a=", r.analytic, " n=", r.numeric);
  CHECK(r.max_rel_error < kGradTol);
}

TEST_CASE("dam: uniform attention doubles a constant value") {
  Tape<double> tape;
  const int n = 4, d = 3;
  auto uniform = tape.constant(T64({1, n, n}, 1.0 / n));
  auto vb = tape.constant(T64({1, n, d}, 0.3));
  auto ve = tape.constant(T64({1, n, d}, 0.7));
  const auto out = dam_attention(uniform, uniform, vb, ve, Calibration::PostSoftmax);
  for (double v : out.e_bar.value().values()) CHECK(v == doctest::Approx(1.4).epsilon(1e-14));
  for (double v : out.b_bar.value().values()) CHECK(v == doctest::Approx(0.3).epsilon(1e-14));
  const auto half = dam_attention(uniform, uniform, vb, ve, Calibration::Renormalized);
  for (double v : half.e_bar.value().values()) CHECK(v == doctest::Approx(0.7).epsilon(1e-14));
}

TEST_CASE("dam: calibrated rows sum to two, single-token window") {
  std::mt19937_64 rng(8);
  Tape<double> tape;
  auto ab = tape.constant(softmax_rows(random_tensor(rng, {3, 5, 5}, -3, 3)));
  auto ae = tape.constant(softmax_rows(random_tensor(rng, {3, 5, 5}, -3, 3)));
  auto v = tape.constant(random_tensor(rng, {3, 5, 2}));
  const auto out = dam_attention(ab, ae, v, v, Calibration::PostSoftmax);
  const auto& cal = out.calibrated.value();
  for (int g = 0; g < 3; ++g)
    for (int i = 0; i < 5; ++i) {
      double s = 0.0;
      for (int j = 0; j < 5; ++j) s += cal.at(g, i, j);
      CHECK(std::abs(s - 2.0) < 1e-12);
    }

  auto one = tape.constant(T64({1, 1, 1}, 1.0));
  auto ve = tape.constant(T64({1, 1, 3}, std::vector<double>{0.5, -1.0, 2.0}));
  const auto single = dam_attention(one, one, ve, ve, Calibration::PostSoftmax);
  CHECK(single.calibrated.value()[0] == 2.0);
  CHECK(single.e_bar.value()[0] == 1.0);
  CHECK(single.e_bar.value()[1] == -2.0);
  CHECK(single.e_bar.value()[2] == 4.0);

  CHECK_THROWS_AS(dam_attention(ab, one, v, v, Calibration::PostSoftmax), InvalidArgument);
  CHECK_THROWS_AS(dam_attention(ab, ae, v, ve, Calibration::PostSoftmax), InvalidArgument);
}

TEST_CASE("dals: shapes, divisibility, gradient") {
  const auto cfg = tiny_config();
  const auto store = init_ivf<double>(cfg, 3);
  std::mt19937_64 rng(9);
  const auto b = random_tensor(rng, {4, 4, 4});
  const auto e = random_tensor(rng, {4, 4, 4});
  {
    Tape<double> tape;
    BoundParams<double> p(tape, store, false);
    const auto o = dals_forward(tape.constant(b), tape.constant(e), p, cfg, 1);
    CHECK(o.image.shape() == b.shape());
    CHECK(o.event.shape() == e.shape());
    auto odd = tape.constant(T64({4, 3, 4}));
    CHECK_THROWS_AS(dals_forward(odd, odd, p, cfg, 1), InvalidArgument);
    CHECK_THROWS_AS(dals_forward(tape.constant(b), odd, p, cfg, 1), InvalidArgument);
  }
  for (int block : {1, 2}) {
    ParamStore<double> sub;
    const std::string pre = "dals" + std::to_string(block) + ".";
    for (const auto& n : store.names())
      if (n.rfind(pre, 0) == 0) sub.add(n, store.get(n));
    sub = randomized(sub, 10 + block);
    const auto r = grad_check(
        [&](Tape<double>& t, const BoundParams<double>& q) {
          const auto o = dals_forward(t.constant(b), t.constant(e), q, cfg, block);
          return add(probe(o.image, 1), probe(o.event, 2));
        },
        sub, kEps, kFloor);
    INFO(block, " ", r.worst, " a=", r.analytic, " n=", r.numeric);
    CHECK(r.max_rel_error < kGradTol);
  }
}

TEST_CASE("dals: odd blocks use the plain partition, even blocks the shifted one") {
  // With identity RDBs, only attention mixes tokens, so the input gradient of one output
  // position marks its window.
  const auto cfg = tiny_config();
  auto store = randomized(init_ivf<double>(cfg, 3), 12);
  for (int block : {1, 2}) {
    zero_prefix(store, "dals" + std::to_string(block) + ".img.rdb.fuse");
    zero_prefix(store, "dals" + std::to_string(block) + ".evt.rdb.fuse");
  }
  std::mt19937_64 rng(13);
  const auto b = random_tensor(rng, {4, 4, 4});
  const auto e = random_tensor(rng, {4, 4, 4});
  auto footprint = [&](int block) {
    Tape<double> tape;
    BoundParams<double> p(tape, store, false);
    auto bv = tape.variable(b);
    auto ev = tape.variable(e);
    const auto o = dals_forward(bv, ev, p, cfg, block);
    T64 mask({4, 4, 4});
    for (int c = 0; c < 4; ++c) mask.at(c, 1, 1) = 1.0;
    tape.backward(sum(mul(o.image, tape.constant(mask))));
    std::set<std::pair<int, int>> hit;
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) {
        double g = 0.0;
        for (int c = 0; c < 4; ++c) g += std::abs(bv.grad().at(c, y, x)) + std::abs(ev.grad().at(c, y, x));
        if (g > 0.0) hit.insert({y, x});
      }
    return hit;
  };
  CHECK(footprint(1) == std::set<std::pair<int, int>>{{0, 0}, {0, 1}, {1, 0}, {1, 1}});
  CHECK(footprint(2) == std::set<std::pair<int, int>>{{1, 1}, {1, 2}, {2, 1}, {2, 2}});
}

TEST_CASE("embed: fused channel count, residual identity, alignment errors") {
  auto cfg = tiny_config();
  auto store = init_ivf<double>(cfg, 3);
  CHECK(store.get("gff.c1.w").dim(1) == cfg.dals_blocks * cfg.channels);
  auto no_dam = cfg;
  no_dam.dam = false;
  const auto nd = init_ivf<double>(no_dam, 3);
  CHECK(nd.get("gff.c1.w").dim(1) == (cfg.dals_blocks + 1) * cfg.channels);
  CHECK(nd.get("dals1.img.mlp1.w").dim(1) == cfg.channels);
  CHECK(store.get("dals1.img.mlp1.w").dim(1) == 2 * cfg.channels);

  std::mt19937_64 rng(14);
  const auto blur = random_tensor(rng, {1, 8, 8}, 0, 1);
  const auto ev = random_tensor(rng, {2, 8, 8}, -2, 2);
  zero_prefix(store, "gff.ck");
  Tape<double> tape;
  BoundParams<double> p(tape, store, false);
  auto bv = tape.constant(blur);
  const auto emb = embed(bv, tape.constant(ev), p, cfg);
  CHECK(emb.f_db.value() == sfe_forward(bv, p, "sfe_img").feat_minus1.value());
  CHECK(emb.pixels.shape() == Shape{64, cfg.up_channels});
  CHECK(emb.first_layer.shape() == Shape{64, cfg.mlp_hidden});

  CHECK_THROWS_AS(embed(bv, tape.constant(T64({2, 8, 6})), p, cfg), InvalidArgument);
  CHECK_THROWS_AS(embed(bv, tape.constant(T64({3, 8, 8})), p, cfg), InvalidArgument);
  CHECK_THROWS_AS(embed(tape.constant(T64({1, 6, 6})), tape.constant(T64({2, 6, 6})), p, cfg), InvalidArgument);
}

TEST_CASE("decode: zero head returns the blur, residual structure, range") {
  const auto cfg = tiny_config();
  const auto store = init_ivf<double>(cfg, 3);
  std::mt19937_64 rng(15);
  const auto blur = random_tensor(rng, {1, 8, 8}, 0, 1);
  const auto ev = random_tensor(rng, {2, 8, 8}, -2, 2);
  Tape<double> tape;
  BoundParams<double> p(tape, store, false);
  auto bv = tape.constant(blur);
  const auto emb = embed(bv, tape.constant(ev), p, cfg);
  for (double t : {0.0, 0.3, 1.0}) CHECK(decode(emb, t, bv, p, cfg).value() == blur);
  CHECK_THROWS_AS(decode(emb, -0.01, bv, p, cfg), InvalidArgument);
  CHECK_THROWS_AS(decode(emb, 1.01, bv, p, cfg), InvalidArgument);

  const auto live = randomized(store, 16, 0.3);
  Tape<double> t2;
  BoundParams<double> q(t2, live, false);
  auto b2 = t2.constant(blur);
  const auto e2 = embed(b2, t2.constant(ev), q, cfg);
  const auto a = decode(e2, 0.2, b2, q, cfg).value();
  const auto c = decode(e2, 0.8, b2, q, cfg).value();
  CHECK(a != c);
  // Residual computed directly from the per-pixel MLP on [pixels, eta(t)].
  const auto code = repr::fourier_encode(0.2, cfg.fourier_L);
  const auto& px = e2.pixels.value();
  double worst = 0.0;
  for (int i = 0; i < 64; ++i) {
    std::vector<double> in(px.values().begin() + i * cfg.up_channels, px.values().begin() + (i + 1) * cfg.up_channels);
    in.insert(in.end(), code.begin(), code.end());
    for (int l = 0; l < cfg.mlp_layers; ++l) {
      const auto& w = live.get("decode.l" + std::to_string(l) + ".w");
      const auto& bb = live.get("decode.l" + std::to_string(l) + ".b");
      std::vector<double> o(static_cast<std::size_t>(w.dim(0)));
      for (int r = 0; r < w.dim(0); ++r) {
        double s = bb[r];
        for (int k = 0; k < w.dim(1); ++k) s += w[static_cast<std::size_t>(r * w.dim(1) + k)] * in[k];
        o[r] = std::max(0.0, s);
      }
      in = o;
    }
    const auto& w = live.get("decode.out.w");
    double s = live.get("decode.out.b")[0];
    for (int k = 0; k < w.dim(1); ++k) s += w[static_cast<std::size_t>(k)] * in[k];
    worst = std::max(worst, std::abs(a[i] - blur[i] - s));
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("embed and decode: full gradient check") {
  const auto cfg = tiny_config();
  const auto store = randomized(init_ivf<double>(cfg, 3), 17, 0.4);
  std::mt19937_64 rng(18);
  const auto blur = random_tensor(rng, {1, 8, 8}, 0, 1);
  const auto ev = random_tensor(rng, {2, 8, 8}, -2, 2);
  const auto r = grad_check(
      [&](Tape<double>& t, const BoundParams<double>& q) {
        auto bv = t.constant(blur);
        const auto emb = embed(bv, t.constant(ev), q, cfg);
        return add(probe(decode(emb, 0.25, bv, q, cfg), 1), probe(decode(emb, 0.9, bv, q, cfg), 2));
      },
      store, kEps, kFloor);
  INFO(r.worst, " a=", r.analytic, " n=", r.numeric, " checked ", r.checked);
  CHECK(r.max_rel_error < kGradTol);
}

TEST_CASE("eer: identity at init, channel errors, gradient") {
  const auto cfg = tiny_eer();
  const auto store = init_eer<double>(cfg, 19);
  std::mt19937_64 rng(20);
  const auto initial = random_tensor(rng, {1, 6, 6}, 0, 1);
  const auto subtle = random_tensor(rng, {2, 6, 6}, -3, 3);
  Tape<double> tape;
  BoundParams<double> p(tape, store, false);
  auto iv = tape.constant(initial);
  CHECK(eer_forward(iv, tape.constant(subtle), p, cfg).value() == initial);
  CHECK(eer_forward(iv, tape.constant(T64({2, 6, 6})), p, cfg).value() == initial);
  CHECK_THROWS_AS(eer_forward(iv, tape.constant(T64({4, 6, 6})), p, cfg), InvalidArgument);
  CHECK_THROWS_AS(eer_forward(iv, tape.constant(T64({2, 6, 5})), p, cfg), InvalidArgument);
  CHECK(store.get("eer.sfe.w").dim(1) == 3);

  const auto live = randomized(store, 21);
  const auto r = grad_check(
      [&](Tape<double>& t, const BoundParams<double>& q) {
        return probe(eer_forward(t.constant(initial), t.constant(subtle), q, cfg));
      },
      live, kEps, kFloor);
  INFO(r.worst, " a=", r.analytic, " n=", r.numeric);
  CHECK(r.max_rel_error < kGradTol);
}

TEST_CASE("config validation and calibration names") {
  auto cfg = tiny_config();
  cfg.heads = 3;
  CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
  cfg = tiny_config();
  cfg.gff_kernel = 2;
  CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
  cfg = tiny_config();
  CHECK_NOTHROW(cfg.check_input(8, 12));
  CHECK_THROWS_AS(cfg.check_input(8, 10), InvalidArgument);
  CHECK_THROWS_AS(cfg.check_input(7, 8), InvalidArgument);
  CHECK(parse_calibration(to_string(Calibration::Renormalized)) == Calibration::Renormalized);
  CHECK(parse_calibration("post_softmax") == Calibration::PostSoftmax);
  CHECK_THROWS_AS(parse_calibration("pre_softmax"), InvalidArgument);
  CHECK(IVFConfig{}.growth() == 8);
}

TEST_CASE("restorer: one embed per input, composition, boundaries, refinement") {
  const auto cfg = tiny_config();
  const auto params = randomized(init_ivf<double>(cfg, 3), 22, 0.3);
  std::mt19937_64 rng(23);
  const auto blur = test::random_frame(rng, 8, 12);
  const auto stream = test::random_stream(rng, 8, 12, 300);

  Restorer<double> r(cfg, params);
  CHECK_THROWS_AS(r.query(0.5), InvalidArgument);
  r.set_input(blur, stream);
  CHECK_THROWS_AS(r.embedding(), InvalidArgument);
  const auto f0 = r.query(0.0);
  const T64 first = r.embedding();
  std::vector<imaging::Frame> outs;
  for (double t : {0.25, 0.5, 0.75, 1.0}) outs.push_back(r.query(t));
  CHECK(r.embed_count() == 1);
  CHECK(r.cache_hits() == 4);
  CHECK(r.embedding() == first);
  CHECK(f0.width() == 8);
  CHECK(f0.height() == 12);
  CHECK_THROWS_AS(r.query(1.5), InvalidArgument);
  CHECK_THROWS_AS(r.query(0.5, true), InvalidArgument);

  // Direct composition on a fresh tape.
  Tape<double> tape;
  BoundParams<double> p(tape, params, false);
  auto bv = tape.constant(frame_tensor<double>(blur));
  const auto emb = embed(bv, tape.constant(repr::stack_events(stream, cfg.event_segments)), p, cfg);
  const auto direct = tensor_frame(decode(emb, 0.5, bv, p, cfg).value(), 0.5, true);
  CHECK(direct.pixels().size() == outs[1].pixels().size());
  bool same = true;
  for (std::size_t i = 0; i < direct.pixels().size(); ++i) same = same && direct.pixels()[i] == outs[1].pixels()[i];
  CHECK(same);

  r.set_input(blur, stream);
  r.query(0.5);
  CHECK(r.embed_count() == 2);

  CHECK_THROWS_AS(r.set_input(test::random_frame(rng, 8, 8), stream), InvalidArgument);

  // Zero-initialised EER leaves the clamped restoration unchanged.
  const auto ecfg = tiny_eer();
  Restorer<double> re(cfg, params, ecfg, init_eer<double>(ecfg, 24), {16});
  re.set_input(blur, stream);
  const auto plain = re.query(0.4);
  const auto refined = re.query(0.4, true);
  bool identical = true;
  for (std::size_t i = 0; i < plain.pixels().size(); ++i)
    identical = identical && plain.pixels()[i] == refined.pixels()[i];
  CHECK(identical);
  CHECK_THROWS_AS(Restorer<double>(cfg, params, ecfg, init_eer<double>(ecfg, 24), {16, 64}), InvalidArgument);
}

TEST_CASE("checkpoint of a freshly initialised model keeps zero heads") {
  const auto store = init_ivf<float>(IVFConfig{}, 1);
  const auto back = decode_checkpoint(encode_checkpoint(store));
  CHECK(back == store);
  for (const std::string n : {"decode.out.w", "decode.out.b", "gff.c1.b", "dals1.img.ln1.b"})
    for (float v : back.get(n).values()) CHECK(v == 0.0f);
  const auto eer = decode_checkpoint(encode_checkpoint(init_eer<float>(EERConfig{}, 1)));
  for (float v : eer.get("eer.out.w").values()) CHECK(v == 0.0f);
  for (float v : back.get("dals1.img.ln1.g").values()) CHECK(v == 1.0f);
}
