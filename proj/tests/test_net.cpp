#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <random>

#include "chadet/nn.hpp"

using namespace chadet;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape4 s, std::mt19937& rng, double lo = -1,
                        double hi = 1) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor<T> t(s);
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t.data()[i] = static_cast<T>(d(rng));
  return t;
}

// Perturb every parameter (including the zero-initialized ones) so that
// no path through the network is structurally dead.
template <typename T>
void randomize(ParamStore<T>& p, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> d(-0.15, 0.15);
  for (auto& [name, t] : p)
    for (std::int64_t i = 0; i < t.numel(); ++i)
      t.data()[i] += static_cast<T>(d(rng));
}

}  // namespace

TEST_CASE("squeeze_excite with zero FC weights halves the input") {
  ParamStore<double> p;
  p.add("se.fc1.weight", Tensor<double>(Shape4{2, 4, 1, 1}));
  p.add("se.fc1.bias", Tensor<double>(Shape4{1, 2, 1, 1}));
  p.add("se.fc2.weight", Tensor<double>(Shape4{4, 2, 1, 1}));
  p.add("se.fc2.bias", Tensor<double>(Shape4{1, 4, 1, 1}));
  std::mt19937 rng(1);
  Tensor<double> x = random_tensor<double>(Shape4{2, 4, 3, 3}, rng);
  Tensor<double> y = squeeze_excite(p, "se", x, 2);
  for (std::int64_t i = 0; i < x.numel(); ++i)
    CHECK(y.data()[i] == doctest::Approx(0.5 * x.data()[i]));
  CHECK_THROWS_AS(squeeze_excite(p, "se", x, 3), TensorError);
}

TEST_CASE("squeeze_excite gate is spatially constant per channel") {
  ParamStore<double> p;
  std::mt19937 rng(2);
  p.add("se.fc1.weight", random_tensor<double>(Shape4{2, 4, 1, 1}, rng));
  p.add("se.fc1.bias", random_tensor<double>(Shape4{1, 2, 1, 1}, rng));
  p.add("se.fc2.weight", random_tensor<double>(Shape4{4, 2, 1, 1}, rng));
  p.add("se.fc2.bias", random_tensor<double>(Shape4{1, 4, 1, 1}, rng));
  Tensor<double> x = random_tensor<double>(Shape4{1, 4, 5, 5}, rng, 0.2, 1.5);
  Tensor<double> y = squeeze_excite(p, "se", x, 2);
  for (int c = 0; c < 4; ++c) {
    double r0 = y.at(0, c, 0, 0) / x.at(0, c, 0, 0);
    for (int yy = 0; yy < 5; ++yy)
      for (int xx = 0; xx < 5; ++xx) {
        double r = y.at(0, c, yy, xx) / x.at(0, c, yy, xx);
        CHECK(std::abs(r - r0) < 1e-10);
        CHECK(r > 0);
        CHECK(r < 1);
      }
  }
}

TEST_CASE("encoder stages halve resolution and set stage widths") {
  StageConfig cfg;
  auto p = init_params<float>(cfg, 3);
  std::mt19937 rng(4);
  Tensor<float> x = random_tensor<float>(Shape4{1, 3, 64, 64}, rng, 0, 1);
  int expect_side[4] = {32, 16, 8, 4};
  for (int s = 0; s < 4; ++s) {
    x = encoder_stage(p, "enc_rgb", x, cfg, s);
    CHECK(x.shape() == Shape4(1, cfg.channels[s], expect_side[s],
                              expect_side[s]));
  }
  Tensor<float> odd(Shape4{1, 3, 7, 8});
  CHECK_THROWS_AS(encoder_stage(p, "enc_rgb", odd, cfg, 0), TensorError);
}

TEST_CASE("encoder stage backward reaches every stage parameter") {
  StageConfig cfg;
  auto p = init_params<double>(cfg, 5);
  randomize(p, 6);
  std::mt19937 rng(7);
  Tensor<double> x = random_tensor<double>(Shape4{1, 3, 16, 16}, rng, 0, 1);
  x.requires_grad = true;
  TapeScope<double> scope;
  Tensor<double> y = encoder_stage(p, "enc_rgb", x, cfg, 0);
  Tensor<double> w = random_tensor<double>(Shape4{1, 1, 1, 1}, rng);
  Tensor<double> loss = sum_all(mul(y, mul(y, y)));
  backward(loss);
  for (auto& [name, t] : p) {
    if (name.rfind("enc_rgb.stage0", 0) != 0) continue;
    REQUIRE(t.has_grad());
    double mx = 0;
    for (std::int64_t i = 0; i < t.numel(); ++i)
      mx = std::max(mx, std::abs(t.grad()[i]));
    CHECK_MESSAGE(mx > 0, "zero gradient for ", name);
  }
}

TEST_CASE("min pooling dilates a single measurement by its kernel") {
  Tensor<double> z(Shape4{1, 1, 9, 9});
  z.at(0, 0, 4, 4) = 5.0;
  for (int k : {3, 5, 7}) {
    Tensor<double> m = min_pool_valid(z, k);
    int r = k / 2;
    for (int y = 0; y < 9; ++y)
      for (int x = 0; x < 9; ++x) {
        double want = (std::abs(y - 4) <= r && std::abs(x - 4) <= r) ? 5.0 : 0.0;
        CHECK(m.at(0, 0, y, x) == want);
      }
  }
}

TEST_CASE("min pooling keeps nearby points separate at small kernels") {
  Tensor<double> z(Shape4{1, 1, 9, 9});
  z.at(0, 0, 4, 2) = 2.0;
  z.at(0, 0, 4, 6) = 8.0;
  Tensor<double> m3 = min_pool_valid(z, 3);
  CHECK(m3.at(0, 0, 4, 2) == 2.0);
  CHECK(m3.at(0, 0, 4, 6) == 8.0);
  CHECK(m3.at(0, 0, 4, 4) == 0.0);  // between the points, out of both 3x3 reach
  Tensor<double> m7 = min_pool_valid(z, 7);
  // both footprints cover column 4; min wins
  CHECK(m7.at(0, 0, 4, 4) == 2.0);
  CHECK(m7.at(0, 0, 4, 6) == 8.0);

  Tensor<double> constant(Shape4{1, 1, 5, 5});
  for (std::int64_t i = 0; i < constant.numel(); ++i) constant.data()[i] = 3.5;
  for (int k : {3, 5, 7}) {
    Tensor<double> m = min_pool_valid(constant, k);
    for (std::int64_t i = 0; i < m.numel(); ++i) CHECK(m.data()[i] == 3.5);
  }
}

TEST_CASE("sparse_to_dense fuses the pooled maps and rejects negatives") {
  ParamStore<double> p;
  // fuse1 channel 0 copies the 3x3 pooled map, everything else is zero;
  // fuse2 copies channel 0 back out, so the block is an identity on it
  Tensor<double> w1(Shape4{16, 3, 1, 1});
  w1.at(0, 0, 0, 0) = 1.0;
  p.add("s2d.fuse1.weight", w1);
  p.add("s2d.fuse1.bias", Tensor<double>(Shape4{1, 16, 1, 1}));
  Tensor<double> w2(Shape4{1, 16, 1, 1});
  w2.at(0, 0, 0, 0) = 1.0;
  p.add("s2d.fuse2.weight", w2);
  p.add("s2d.fuse2.bias", Tensor<double>(Shape4{1, 1, 1, 1}));

  Tensor<double> z(Shape4{1, 1, 9, 9});
  z.at(0, 0, 4, 4) = 5.0;
  Tensor<double> q = sparse_to_dense(p, z);
  Tensor<double> want = min_pool_valid(z, 3);
  CHECK(q.shape() == z.shape());
  for (std::int64_t i = 0; i < q.numel(); ++i)
    CHECK(q.data()[i] == doctest::Approx(want.data()[i]));

  z.at(0, 0, 0, 0) = -0.5;
  CHECK_THROWS_AS(sparse_to_dense(p, z), TensorError);
}

TEST_CASE("3d positional encoding backprojects through the pinhole") {
  Intrinsics intr{100, 100, 32, 32};
  Tensor<double> z(Shape4{1, 1, 64, 64});
  for (std::int64_t i = 0; i < z.numel(); ++i) z.data()[i] = 5.0;
  Tensor<double> pos = positional_encoding_3d(z, intr);
  CHECK(pos.shape() == Shape4(1, 3, 64, 64));
  CHECK(pos.at(0, 0, 32, 52) == doctest::Approx(1.0));
  CHECK(pos.at(0, 1, 32, 52) == doctest::Approx(0.0));
  CHECK(pos.at(0, 2, 32, 52) == doctest::Approx(5.0));
  // principal point with unit depth sits on the optical axis
  for (std::int64_t i = 0; i < z.numel(); ++i) z.data()[i] = 1.0;
  Tensor<double> p1 = positional_encoding_3d(z, intr);
  CHECK(p1.at(0, 0, 32, 32) == doctest::Approx(0.0));
  CHECK(p1.at(0, 1, 32, 32) == doctest::Approx(0.0));
  CHECK(p1.at(0, 2, 32, 32) == doctest::Approx(1.0));
  // doubling z doubles every coordinate
  for (std::int64_t i = 0; i < z.numel(); ++i) z.data()[i] = 2.0;
  Tensor<double> p2 = positional_encoding_3d(z, intr);
  for (std::int64_t i = 0; i < p1.numel(); ++i)
    CHECK(p2.data()[i] == doctest::Approx(2 * p1.data()[i]));

  CHECK_THROWS_AS(positional_encoding_3d(z, Intrinsics{0, 100, 32, 32}),
                  TensorError);
}

TEST_CASE("decoder stage: null z_prev, shape contract, live query path") {
  StageConfig cfg;
  auto p = init_params<float>(cfg, 8);
  randomize(p, 9);
  std::mt19937 rng(10);
  int stage = 3, side = 4;
  Tensor<float> x_rgb =
      random_tensor<float>(Shape4{1, cfg.channels[stage], side, side}, rng);
  Tensor<float> x_depth =
      random_tensor<float>(Shape4{1, cfg.channels[stage], side, side}, rng);
  Tensor<float> z_prev(x_rgb.shape());  // null matrix at the coarsest stage
  Tensor<float> pos = random_tensor<float>(Shape4{1, 3, side, side}, rng);
  Tensor<float> out = decoder_stage(p, x_rgb, x_depth, z_prev, pos, cfg, stage);
  CHECK(out.shape() == x_rgb.shape());

  Tensor<float> zero_depth(x_depth.shape());
  Tensor<float> out2 =
      decoder_stage(p, x_rgb, zero_depth, z_prev, pos, cfg, stage);
  float diff = 0;
  for (std::int64_t i = 0; i < out.numel(); ++i)
    diff = std::max(diff, std::abs(out.data()[i] - out2.data()[i]));
  CHECK(diff > 0);

  Tensor<float> bad(Shape4{1, cfg.channels[stage], side, 2 * side});
  CHECK_THROWS_AS(decoder_stage(p, x_rgb, x_depth, bad, pos, cfg, stage),
                  TensorError);
}

TEST_CASE("upsample stage doubles resolution and feeds the skip") {
  StageConfig cfg;
  auto p = init_params<double>(cfg, 11);
  randomize(p, 12);
  std::mt19937 rng(13);
  Tensor<double> z = random_tensor<double>(Shape4{1, 128, 4, 4}, rng);
  Tensor<double> skip = random_tensor<double>(Shape4{1, 64, 8, 8}, rng);
  skip.requires_grad = true;
  {
    TapeScope<double> scope;
    Tensor<double> out = upsample_stage(p, z, &skip, cfg, 3);
    CHECK(out.shape() == Shape4(1, 64, 8, 8));
    Tensor<double> loss = sum_all(mul(out, out));
    backward(loss);
  }
  REQUIRE(skip.has_grad());
  double mx = 0;
  for (std::int64_t i = 0; i < skip.numel(); ++i)
    mx = std::max(mx, std::abs(skip.grad()[i]));
  CHECK(mx > 0);

  // final stage has no encoder skip and lands at 2x resolution
  Tensor<double> z0 = random_tensor<double>(Shape4{1, 16, 6, 6}, rng);
  Tensor<double> full = upsample_stage<double>(p, z0, nullptr, cfg, 0);
  CHECK(full.shape() == Shape4(1, 16, 12, 12));

  Tensor<double> bad_skip(Shape4{1, 64, 4, 4});
  CHECK_THROWS_AS(upsample_stage(p, z, &bad_skip, cfg, 3), TensorError);
}

TEST_CASE("inverse-depth head hand values, bounds, monotonicity") {
  Tensor<double> logit(Shape4{1, 1, 1, 1});
  logit.data()[0] = 0.0;  // sigmoid = 0.5
  Tensor<double> d = depth_from_inverse(logit, DepthRange{0.1, 10});
  CHECK(d.data()[0] == doctest::Approx(0.19608).epsilon(1e-4));

  logit.data()[0] = 40.0;  // sigmoid ~= 1
  d = depth_from_inverse(logit, DepthRange{1, 100});
  CHECK(d.data()[0] == doctest::Approx(100.0 / 101.0).epsilon(1e-4));

  logit.data()[0] = -40.0;  // sigmoid ~= 0: approaches max_d
  d = depth_from_inverse(logit, DepthRange{1, 100});
  CHECK(d.data()[0] == doctest::Approx(100.0).epsilon(1e-3));

  DepthRange r{0.5, 20};
  double lower = r.min_d * r.max_d / (r.max_d + r.min_d);
  double prev = -1;
  for (double l = -50; l <= 50; l += 0.25) {
    logit.data()[0] = l;
    double v = depth_from_inverse(logit, r).data()[0];
    CHECK(v > lower);
    CHECK(v < r.max_d);
    if (prev >= 0) CHECK(v <= prev);  // never increasing in the logit
    if (prev >= 0 && std::abs(l) <= 14)
      CHECK(v < prev);  // strictly decreasing where sigmoid is unsaturated
    prev = v;
  }

  CHECK_THROWS_AS(depth_from_inverse(logit, DepthRange{2, 1}), TensorError);
}

TEST_CASE("full forward: shape, range, sensitivity, determinism, speed") {
  StageConfig cfg;
  auto p = init_params<float>(cfg, 14);
  std::mt19937 rng(15);
  Tensor<float> rgb = random_tensor<float>(Shape4{1, 3, 64, 64}, rng, 0, 1);
  Tensor<float> sparse(Shape4{1, 1, 64, 64});
  std::uniform_int_distribution<int> pix(0, 63);
  std::uniform_real_distribution<float> dd(0.6f, 18.0f);
  for (int i = 0; i < 300; ++i)
    sparse.at(0, 0, pix(rng), pix(rng)) = dd(rng);
  DepthRange range{0.5, 20};

  auto t0 = std::chrono::steady_clock::now();
  Tensor<float> depth = chadet_forward(p, rgb, sparse, cfg, range);
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                              t0).count();
  CHECK(secs < 5.0);
  CHECK(depth.shape() == Shape4(1, 1, 64, 64));
  float lower = static_cast<float>(range.min_d * range.max_d /
                                   (range.max_d + range.min_d));
  for (std::int64_t i = 0; i < depth.numel(); ++i) {
    CHECK(depth.data()[i] > lower);
    CHECK(depth.data()[i] < range.max_d);
  }

  Tensor<float> again = chadet_forward(p, rgb, sparse, cfg, range);
  for (std::int64_t i = 0; i < depth.numel(); ++i)
    CHECK(depth.data()[i] == again.data()[i]);

  Tensor<float> sparse2 = sparse.clone();
  for (int i = 0; i < 300; ++i)
    sparse2.at(0, 0, pix(rng), pix(rng)) = dd(rng);
  Tensor<float> other = chadet_forward(p, rgb, sparse2, cfg, range);
  float diff = 0;
  for (std::int64_t i = 0; i < depth.numel(); ++i)
    diff = std::max(diff, std::abs(depth.data()[i] - other.data()[i]));
  CHECK(diff > 0);

  Tensor<float> bad_rgb(Shape4{1, 3, 60, 60});
  Tensor<float> bad_sparse(Shape4{1, 1, 60, 60});
  CHECK_THROWS_AS(chadet_forward(p, bad_rgb, bad_sparse, cfg, range),
                  TensorError);
}

TEST_CASE("backward on the full network leaves no parameter without grad") {
  StageConfig cfg;
  cfg.channels = {8, 16, 16, 16};
  cfg.windows = {2, 2, 2, 2};
  cfg.heads = {2, 2, 2, 2};
  auto p = init_params<float>(cfg, 16);
  randomize(p, 17);
  std::mt19937 rng(18);
  Tensor<float> rgb = random_tensor<float>(Shape4{1, 3, 32, 32}, rng, 0, 1);
  Tensor<float> sparse(Shape4{1, 1, 32, 32});
  std::uniform_int_distribution<int> pix(0, 31);
  for (int i = 0; i < 120; ++i)
    sparse.at(0, 0, pix(rng), pix(rng)) = 1.0f + 0.01f * static_cast<float>(i);
  {
    TapeScope<float> scope;
    Tensor<float> depth = chadet_forward(p, rgb, sparse, cfg,
                                         DepthRange{0.5, 20});
    Tensor<float> loss = sum_all(mul(depth, depth));
    backward(loss);
  }
  for (auto& [name, t] : p) {
    REQUIRE_MESSAGE(t.has_grad(), "no grad storage for ", name);
    float mx = 0;
    for (std::int64_t i = 0; i < t.numel(); ++i)
      mx = std::max(mx, std::abs(t.grad()[i]));
    CHECK_MESSAGE(mx > 0, "zero gradient for ", name);
  }
}

TEST_CASE("parameter count: hand example, default window, scaling") {
  ParamStore<float> p;
  p.add("c.weight", Tensor<float>(Shape4{1, 1, 3, 3}));
  p.add("c.bias", Tensor<float>(Shape4{1, 1, 1, 1}));
  CHECK(param_count(p) == 10);

  StageConfig cfg;
  auto full = init_params<float>(cfg, 19);
  std::int64_t n = param_count(full);
  CHECK(n >= 800000);
  CHECK(n <= 1500000);

  StageConfig big = cfg;
  for (auto& c : big.channels) c *= 2;
  std::int64_t n2 = param_count(init_params<float>(big, 19));
  CHECK(n2 > 3 * n);
  CHECK(n2 < 5 * n);
}
