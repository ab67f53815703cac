#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "chadet/trainer.hpp"

using namespace chadet;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("chadet_trainer_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

StageConfig tiny_stages() {
  StageConfig cfg;
  cfg.channels = {8, 16, 16, 16};
  cfg.windows = {2, 2, 2, 2};
  cfg.heads = {2, 2, 2, 2};
  return cfg;
}

std::vector<synth::Sample> tiny_dataset(int count, std::uint64_t seed) {
  synth::SynthConfig scfg;
  scfg.height = scfg.width = 32;
  scfg.n_points = 120;
  std::vector<synth::Sample> out;
  for (int i = 0; i < count; ++i)
    out.push_back(synth::make_sample(seed + static_cast<std::uint64_t>(i),
                                     scfg));
  return out;
}

TrainConfig tiny_train_config() {
  TrainConfig cfg;
  cfg.stages = tiny_stages();
  cfg.range = DepthRange{0.5, 20.0};
  cfg.batch_size = 2;
  cfg.epochs = 1;
  return cfg;
}

bool params_equal(const ParamStore<float>& a, const ParamStore<float>& b) {
  if (a.size() != b.size()) return false;
  auto ia = a.begin();
  auto ib = b.begin();
  for (; ia != a.end(); ++ia, ++ib) {
    if (ia->first != ib->first) return false;
    if (!(ia->second.shape() == ib->second.shape())) return false;
    for (std::int64_t i = 0; i < ia->second.numel(); ++i)
      if (ia->second.data()[i] != ib->second.data()[i]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("adam: first step with unit gradient moves by -lr") {
  ParamStore<float> p;
  Tensor<float> w(Shape4{1, 1, 1, 1}, {0.5f});
  p.add("w", std::move(w));
  p.at("w").ensure_grad();
  p.at("w").grad()[0] = 1.0f;
  AdamState<float> st;
  adam_step(p, st, 0.1);
  CHECK(st.t == 1);
  CHECK(p.at("w").data()[0] == doctest::Approx(0.4).epsilon(1e-5));
  CHECK(st.v.at("w").data()[0] >= 0.0f);
}

TEST_CASE("adam: zero gradients leave parameters untouched") {
  ParamStore<float> p;
  p.add("a", Tensor<float>(Shape4{1, 2, 1, 1}, {0.3f, -0.7f}));
  AdamState<float> st;
  for (int i = 0; i < 5; ++i) {
    p.zero_grad();
    p.at("a").ensure_grad();
    adam_step(p, st, 0.1);
  }
  CHECK(st.t == 5);
  CHECK(p.at("a").data()[0] == 0.3f);
  CHECK(p.at("a").data()[1] == -0.7f);
}

TEST_CASE("adam: non-finite gradient aborts the step and names the culprit") {
  ParamStore<float> p;
  p.add("enc.w", Tensor<float>(Shape4{1, 1, 1, 1}, {1.0f}));
  p.at("enc.w").ensure_grad();
  p.at("enc.w").grad()[0] = std::numeric_limits<float>::quiet_NaN();
  AdamState<float> st;
  try {
    adam_step(p, st, 0.1);
    FAIL("expected an exception");
  } catch (const TensorError& e) {
    CHECK(std::string(e.what()).find("enc.w") != std::string::npos);
  }
  CHECK(st.t == 0);
  CHECK(p.at("enc.w").data()[0] == 1.0f);
}

TEST_CASE("adam runs are deterministic across repeats") {
  auto run = [] {
    std::mt19937 rng(4);
    std::normal_distribution<float> g(0.0f, 1.0f);
    ParamStore<float> p;
    p.add("w", Tensor<float>(Shape4{1, 1, 2, 2}, {0.1f, 0.2f, 0.3f, 0.4f}));
    AdamState<float> st;
    for (int step = 0; step < 20; ++step) {
      p.zero_grad();
      for (int i = 0; i < 4; ++i) p.at("w").grad()[i] = g(rng);
      adam_step(p, st, 0.01);
    }
    return p;
  };
  CHECK(params_equal(run(), run()));
}

TEST_CASE("gradient clipping rescales to the global norm budget") {
  ParamStore<float> p;
  p.add("a", Tensor<float>(Shape4{1, 1, 1, 2}, {0.0f, 0.0f}));
  p.at("a").ensure_grad();
  p.at("a").grad()[0] = 3.0f;
  p.at("a").grad()[1] = 4.0f;
  double norm = clip_gradients(p, 1.0);
  CHECK(norm == doctest::Approx(5.0));
  double after = std::hypot(p.at("a").grad()[0], p.at("a").grad()[1]);
  CHECK(after == doctest::Approx(1.0).epsilon(1e-6));

  p.at("a").grad()[0] = 0.3f;
  p.at("a").grad()[1] = 0.4f;
  CHECK(clip_gradients(p, 1.0) == doctest::Approx(0.5));
  CHECK(p.at("a").grad()[0] == 0.3f);  // under budget: untouched
}

TEST_CASE("lr schedules match their tables at every boundary") {
  LrSchedule out = LrSchedule::outdoor();
  out.validate();
  struct { int epoch; double lr; } expect[] = {
      {0, 5e-5}, {2, 5e-5}, {3, 1e-4},  {8, 1e-4},  {9, 1.5e-4}, {20, 1.5e-4},
      {21, 1e-4}, {30, 1e-4}, {31, 5e-5}, {45, 5e-5}, {46, 2e-5}, {60, 2e-5},
      {61, 2e-5}};
  for (const auto& e : expect) CHECK(out.at(e.epoch) == e.lr);

  LrSchedule in = LrSchedule::indoor();
  in.validate();
  CHECK(in.at(0) == 1e-4);
  CHECK(in.at(20) == 1e-4);
  CHECK(in.at(21) == 1.5e-4);
  CHECK(in.at(35) == 1.5e-4);

  LrSchedule synth_sched = LrSchedule::synthetic();
  synth_sched.validate();
  CHECK(synth_sched.at(0) == 1e-4);
  CHECK(synth_sched.at(1) == 1.5e-4);

  LrSchedule gap{{{0, 2, 1e-4}, {4, 6, 1e-4}}};
  CHECK_THROWS_AS(gap.validate(), TensorError);
  LrSchedule late{{{1, 2, 1e-4}}};
  CHECK_THROWS_AS(late.validate(), TensorError);
  LrSchedule empty;
  CHECK_THROWS_AS(empty.validate(), TensorError);
}

TEST_CASE("checkpoint round-trip restores parameters, Adam state, and RNG") {
  fs::path dir = temp_dir("roundtrip");
  StageConfig cfg = tiny_stages();
  auto p = init_params<float>(cfg, 21);
  AdamState<float> adam;
  for (auto& [name, t] : p) {
    t.ensure_grad();
    for (std::int64_t i = 0; i < t.numel(); ++i)
      t.grad()[i] = 0.01f * static_cast<float>((i % 13) - 6);
  }
  adam_step(p, adam, 1e-3);
  std::mt19937 rng(77);
  rng();  // advance so the state is nontrivial
  std::string rs = rng_to_string(rng);
  save_checkpoint(dir / "c.ckpt", p, &adam, &rs);

  AdamState<float> adam2;
  std::string rs2;
  ParamStore<float> back = load_checkpoint<float>(dir / "c.ckpt", &adam2, &rs2);
  CHECK(params_equal(p, back));
  CHECK(adam2.t == adam.t);
  REQUIRE(adam2.m.size() == adam.m.size());
  for (const auto& [name, m] : adam.m) {
    REQUIRE(adam2.m.count(name) == 1);  // each path exactly once
    for (std::int64_t i = 0; i < m.numel(); ++i) {
      CHECK(adam2.m.at(name).data()[i] == m.data()[i]);
      CHECK(adam2.v.at(name).data()[i] == adam.v.at(name).data()[i]);
    }
  }
  std::mt19937 rng2;
  rng_from_string(rng2, rs2);
  CHECK(rng2 == rng);
  CHECK(rng2() == rng());
  fs::remove_all(dir);
}

TEST_CASE("checkpoint loader rejects corrupt files with distinct messages") {
  fs::path dir = temp_dir("corrupt");
  auto p = init_params<float>(tiny_stages(), 5);
  save_checkpoint(dir / "good.ckpt", p);

  std::string bytes;
  {
    std::ifstream in(dir / "good.ckpt", std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto put = [&](const std::string& name, const std::string& content) {
    std::ofstream out(dir / name, std::ios::binary);
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    return dir / name;
  };

  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_WITH_AS(load_checkpoint<float>(put("magic.ckpt", bad_magic)),
                       doctest::Contains("magic"), ckpt::CheckpointError);

  std::string bad_version = bytes;
  bad_version[4] = 9;
  CHECK_THROWS_WITH_AS(load_checkpoint<float>(put("ver.ckpt", bad_version)),
                       doctest::Contains("version"), ckpt::CheckpointError);

  std::string truncated = bytes.substr(0, bytes.size() / 2);
  CHECK_THROWS_WITH_AS(load_checkpoint<float>(put("trunc.ckpt", truncated)),
                       doctest::Contains("truncated"), ckpt::CheckpointError);

  // giant dimension field must be rejected before any payload allocation
  std::string huge = bytes.substr(0, 12);
  std::string name = "w";
  std::uint16_t len = 1;
  huge.append(reinterpret_cast<const char*>(&len), 2);
  huge += name;
  huge += '\x04';
  std::uint32_t dims[4] = {0xFFFFFFFFu, 1, 1, 1};
  huge.append(reinterpret_cast<const char*>(dims), 16);
  CHECK_THROWS_WITH_AS(load_checkpoint<float>(put("huge.ckpt", huge)),
                       doctest::Contains("overflow"), ckpt::CheckpointError);

  CHECK_THROWS_AS(load_checkpoint<float>(dir / "nope.ckpt"),
                  ckpt::CheckpointError);
  fs::remove_all(dir);
}

TEST_CASE("training at lr = 0 is a no-op with a flat loss") {
  auto data = tiny_dataset(1, 50);
  TrainConfig cfg = tiny_train_config();
  cfg.epochs = 3;
  cfg.batch_size = 1;
  cfg.schedule = LrSchedule{{{0, 100, 0.0}}};
  auto params = init_params<float>(cfg.stages, 1);
  auto frozen = init_params<float>(cfg.stages, 1);
  AdamState<float> adam;
  std::mt19937 rng(3);
  TrainStats stats = train(params, adam, rng, data, cfg);
  CHECK(stats.steps == 3);
  for (double l : stats.step_losses)
    CHECK(l == doctest::Approx(stats.step_losses[0]).epsilon(1e-12));
  CHECK(params_equal(params, frozen));
}

TEST_CASE("training loss falls and the log carries per-step breakdowns") {
  auto data = tiny_dataset(4, 60);
  TrainConfig cfg = tiny_train_config();
  cfg.epochs = 8;
  std::ostringstream log;
  cfg.log = &log;
  auto params = init_params<float>(cfg.stages, 2);
  AdamState<float> adam;
  std::mt19937 rng(4);
  TrainStats stats = train(params, adam, rng, data, cfg);
  CHECK(stats.steps == 16);
  double first = (stats.step_losses[0] + stats.step_losses[1]) / 2;
  double last = (stats.step_losses[14] + stats.step_losses[15]) / 2;
  CHECK(last < first);
  std::string line;
  std::getline(std::istringstream(log.str()) >> std::ws, line);
  CHECK(line.find("step=1 epoch=0 lr=") == 0);
  CHECK(line.find(" total=") != std::string::npos);
  CHECK(line.find(" lp=") != std::string::npos);
  CHECK(line.find(" ld=") != std::string::npos);
  CHECK(line.find(" ls=") != std::string::npos);
}

TEST_CASE("interrupted training resumes bit-exactly from its checkpoint") {
  fs::path dir = temp_dir("resume");
  auto data = tiny_dataset(4, 70);

  TrainConfig cfg = tiny_train_config();
  cfg.epochs = 2;
  auto straight = init_params<float>(cfg.stages, 3);
  AdamState<float> adam_a;
  std::mt19937 rng_a(9);
  train(straight, adam_a, rng_a, data, cfg);

  TrainConfig half = cfg;
  half.epochs = 1;
  half.checkpoint_path = dir / "mid.ckpt";
  auto resumed = init_params<float>(cfg.stages, 3);
  AdamState<float> adam_b;
  std::mt19937 rng_b(9);
  train(resumed, adam_b, rng_b, data, half);

  AdamState<float> adam_c;
  std::string rs;
  ParamStore<float> restored =
      load_checkpoint<float>(dir / "mid.ckpt", &adam_c, &rs);
  std::mt19937 rng_c;
  rng_from_string(rng_c, rs);
  TrainConfig second = cfg;
  train(restored, adam_c, rng_c, data, second, /*start_epoch=*/1);

  CHECK(params_equal(straight, restored));
  fs::remove_all(dir);
}

TEST_CASE("training is deterministic in (seed, config, dataset)") {
  auto data = tiny_dataset(3, 80);
  auto run = [&] {
    TrainConfig cfg = tiny_train_config();
    cfg.epochs = 2;
    auto params = init_params<float>(cfg.stages, 6);
    AdamState<float> adam;
    std::mt19937 rng(11);
    train(params, adam, rng, data, cfg);
    return params;
  };
  CHECK(params_equal(run(), run()));
}
