#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "chadet/config.hpp"
#include "chadet/image_io.hpp"
#include "chadet/metrics.hpp"
#include "chadet/nn.hpp"
#include "chadet/synth.hpp"
#include "chadet/trainer.hpp"

namespace fs = std::filesystem;
using namespace chadet;

namespace {

Config load_config_file(const std::string& path) {
  if (path.empty()) return Config{};
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::vector<synth::Sample> load_split(const fs::path& root,
                                      const std::string& split) {
  fs::path dir = root / split;
  int n = synth::count_samples(dir);
  require(n > 0, "no samples found under " + dir.string());
  std::vector<synth::Sample> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(synth::read_sample(dir, i));
  return out;
}

// Compares the loaded checkpoint against the shapes the config implies.
void check_compatibility(const ParamStore<float>& loaded, const Config& cfg) {
  ParamStore<float> expected = init_params<float>(cfg.stages, 0);
  require(loaded.size() == expected.size(),
          "checkpoint/config mismatch: checkpoint has " +
              std::to_string(loaded.size()) + " tensors, config implies " +
              std::to_string(expected.size()));
  for (const auto& [name, t] : expected) {
    require(loaded.has(name), "checkpoint is missing parameter " + name);
    const auto& lt = loaded.at(name);
    require(lt.shape() == t.shape(),
            "checkpoint/config mismatch for " + name + ": checkpoint " +
                lt.shape().str() + " vs config " + t.shape().str());
  }
}

int cmd_gen_data(const std::string& out_dir, int n_train, int n_val,
                 std::uint64_t seed, int size, int points, double min_depth,
                 double max_depth) {
  synth::SynthConfig scfg;
  scfg.height = scfg.width = size;
  scfg.n_points = points;
  scfg.range = DepthRange{min_depth, max_depth};
  scfg.range.validate();
  synth::generate_dataset(out_dir, "train", n_train, seed, scfg);
  synth::generate_dataset(out_dir, "val", n_val, seed + 1000003, scfg);
  std::cout << "wrote " << n_train << " train and " << n_val
            << " val samples to " << out_dir << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_ckpt, const std::string& resume) {
  Config cfg = load_config_file(config_path);
  std::vector<synth::Sample> dataset = load_split(data_dir, "train");

  ParamStore<float> params;
  AdamState<float> adam;
  std::mt19937 rng(static_cast<std::uint32_t>(cfg.seed));
  if (!resume.empty()) {
    std::string rng_state;
    params = load_checkpoint<float>(resume, &adam, &rng_state);
    check_compatibility(params, cfg);
    for (auto& [name, t] : params) t.requires_grad = true;
    if (!rng_state.empty()) rng_from_string(rng, rng_state);
  } else {
    params = init_params<float>(cfg.stages, cfg.seed);
  }

  TrainConfig tc;
  tc.stages = cfg.stages;
  tc.range = cfg.range;
  tc.weights = cfg.weights;
  tc.schedule = cfg.schedule;
  tc.batch_size = cfg.batch_size;
  tc.epochs = cfg.epochs;
  tc.max_steps = cfg.max_steps;
  tc.checkpoint_path = out_ckpt;
  tc.log = &std::cout;
  int steps_per_epoch =
      (static_cast<int>(dataset.size()) + cfg.batch_size - 1) / cfg.batch_size;
  int start_epoch =
      static_cast<int>(adam.t) / std::max(1, steps_per_epoch);
  train(params, adam, rng, dataset, tc, start_epoch);
  std::string rs = rng_to_string(rng);
  save_checkpoint(out_ckpt, params, &adam, &rs);
  std::cout << "checkpoint written to " << out_ckpt << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data_dir,
             const std::string& config_path, const std::string& split,
             bool keyvalue) {
  Config cfg = load_config_file(config_path);
  ParamStore<float> params = load_checkpoint<float>(ckpt);
  check_compatibility(params, cfg);
  std::vector<synth::Sample> dataset = load_split(data_dir, split);
  MetricsAccumulator acc;
  for (const auto& s : dataset) {
    ChadetOutputs<float> out =
        chadet_forward_full(params, s.rgb0, s.sparse, cfg.stages, cfg.range,
                            s.intr);
    acc.add(out.depth, s.gt);
  }
  MetricsReport rep = acc.report();
  std::cout << (keyvalue ? rep.keyvalue() : rep.table());
  return 0;
}

int cmd_infer(const std::string& ckpt, const std::string& rgb_path,
              const std::string& sparse_path, const std::string& out_path,
              const std::string& config_path) {
  Config cfg = load_config_file(config_path);
  ParamStore<float> params = load_checkpoint<float>(ckpt);
  check_compatibility(params, cfg);
  Tensor<float> rgb = read_ppm(rgb_path);
  Tensor<float> sparse = read_pfm(sparse_path);
  Tensor<float> depth =
      chadet_forward(params, rgb, sparse, cfg.stages, cfg.range);
  write_pfm(out_path, depth);
  std::cout << "depth map written to " << out_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CHADET depth completion: synthetic data, training, "
               "evaluation, and inference"};
  app.require_subcommand(1);

  std::string out_dir, config_path, data_dir, ckpt, resume;
  std::string rgb_path, sparse_path, out_path, split = "val";
  int n_train = 200, n_val = 20, size = 64, points = 1500;
  std::uint64_t seed = 0;
  double min_depth = 0.5, max_depth = 20.0;
  bool keyvalue = false;

  auto* gen = app.add_subcommand("gen-data",
                                 "Generate a synthetic RGB-D dataset");
  gen->add_option("--out", out_dir, "Output dataset directory")->required();
  gen->add_option("--train", n_train, "Number of training samples");
  gen->add_option("--val", n_val, "Number of validation samples");
  gen->add_option("--seed", seed, "Generator seed");
  gen->add_option("--size", size, "Square image side (divisible by 16)");
  gen->add_option("--points", points, "Sparse depth points per sample");
  gen->add_option("--min-depth", min_depth, "Minimum scene depth, meters");
  gen->add_option("--max-depth", max_depth, "Maximum scene depth, meters");

  auto* tr = app.add_subcommand("train", "Train the network");
  tr->add_option("--config", config_path, "Config file (key = value lines)");
  tr->add_option("--data", data_dir, "Dataset root directory")->required();
  tr->add_option("--out", ckpt, "Output checkpoint path")->required();
  tr->add_option("--resume", resume, "Checkpoint to resume from");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  ev->add_option("--ckpt", ckpt, "Checkpoint path")->required();
  ev->add_option("--data", data_dir, "Dataset root directory")->required();
  ev->add_option("--config", config_path, "Config file");
  ev->add_option("--split", split, "Dataset split to evaluate");
  ev->add_flag("--keyvalue", keyvalue, "Emit key=value lines");

  auto* in = app.add_subcommand("infer", "Run single-sample inference");
  in->add_option("--ckpt", ckpt, "Checkpoint path")->required();
  in->add_option("--rgb", rgb_path, "Input RGB image (PPM P6)")->required();
  in->add_option("--sparse", sparse_path, "Input sparse depth (PFM)")
      ->required();
  in->add_option("--out", out_path, "Output depth map (PFM)")->required();
  in->add_option("--config", config_path, "Config file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed())
      return cmd_gen_data(out_dir, n_train, n_val, seed, size, points,
                          min_depth, max_depth);
    if (tr->parsed())
      return cmd_train(config_path, data_dir, ckpt, resume);
    if (ev->parsed())
      return cmd_eval(ckpt, data_dir, config_path, split, keyvalue);
    if (in->parsed())
      return cmd_infer(ckpt, rgb_path, sparse_path, out_path, config_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
