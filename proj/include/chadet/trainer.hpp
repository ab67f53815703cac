#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "chadet/losses.hpp"
#include "chadet/nn.hpp"
#include "chadet/synth.hpp"

namespace chadet {

template <typename T>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  std::int64_t t = 0;
  std::map<std::string, Tensor<T>> m;
  std::map<std::string, Tensor<T>> v;
};

// Bias-corrected Adam update over all parameters in deterministic
// (lexicographic) order. Rejects non-finite gradients before touching any
// parameter.
template <typename T>
void adam_step(ParamStore<T>& params, AdamState<T>& state, double lr) {
  for (auto& [path, p] : params) {
    p.ensure_grad();
    for (std::int64_t i = 0; i < p.numel(); ++i)
      require(std::isfinite(static_cast<double>(p.grad()[i])),
              "adam_step: non-finite gradient in parameter " + path);
  }
  state.t += 1;
  double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (auto& [path, p] : params) {
    auto mi = state.m.find(path);
    if (mi == state.m.end()) {
      mi = state.m.emplace(path, Tensor<T>(p.shape())).first;
      state.v.emplace(path, Tensor<T>(p.shape()));
    }
    Tensor<T>& m = mi->second;
    Tensor<T>& v = state.v.at(path);
    for (std::int64_t i = 0; i < p.numel(); ++i) {
      double g = static_cast<double>(p.grad()[i]);
      double mv = state.beta1 * static_cast<double>(m.data()[i]) +
                  (1.0 - state.beta1) * g;
      double vv = state.beta2 * static_cast<double>(v.data()[i]) +
                  (1.0 - state.beta2) * g * g;
      m.data()[i] = static_cast<T>(mv);
      v.data()[i] = static_cast<T>(vv);
      double update = lr * (mv / bc1) / (std::sqrt(vv / bc2) + state.eps);
      p.data()[i] = static_cast<T>(static_cast<double>(p.data()[i]) - update);
    }
  }
}

// Scales all gradients so the global L2 norm is at most max_norm; returns
// the pre-clip norm.
template <typename T>
double clip_gradients(ParamStore<T>& params, double max_norm) {
  double sq = 0;
  for (auto& [path, p] : params) {
    p.ensure_grad();
    for (std::int64_t i = 0; i < p.numel(); ++i) {
      double g = static_cast<double>(p.grad()[i]);
      sq += g * g;
    }
  }
  double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    T scale = static_cast<T>(max_norm / norm);
    for (auto& [path, p] : params)
      for (std::int64_t i = 0; i < p.numel(); ++i) p.grad()[i] *= scale;
  }
  return norm;
}

struct LrSchedule {
  struct Span {
    int first_epoch;
    int last_epoch;  // inclusive
    double lr;
  };
  std::vector<Span> spans;

  void validate() const {
    require(!spans.empty(), "lr schedule must have at least one span");
    require(spans.front().first_epoch == 0,
            "lr schedule must start at epoch 0");
    for (size_t i = 0; i < spans.size(); ++i) {
      require(spans[i].last_epoch >= spans[i].first_epoch && spans[i].lr >= 0,
              "lr schedule span invalid");
      if (i > 0)
        require(spans[i].first_epoch == spans[i - 1].last_epoch + 1,
                "lr schedule spans must be contiguous and non-overlapping");
    }
  }

  double at(int epoch) const {
    for (const auto& s : spans)
      if (epoch >= s.first_epoch && epoch <= s.last_epoch) return s.lr;
    return spans.back().lr;
  }

  static LrSchedule outdoor() {
    return LrSchedule{{{0, 2, 5e-5},
                       {3, 8, 1e-4},
                       {9, 20, 1.5e-4},
                       {21, 30, 1e-4},
                       {31, 45, 5e-5},
                       {46, 60, 2e-5}}};
  }
  static LrSchedule indoor() {
    return LrSchedule{{{0, 20, 1e-4}, {21, 35, 1.5e-4}}};
  }
  // Desk-scale preset for the synthetic set.
  static LrSchedule synthetic() {
    return LrSchedule{{{0, 0, 1e-4}, {1, 63, 1.5e-4}}};
  }
};

namespace ckpt {

constexpr char kMagic[4] = {'C', 'H', 'K', 'D'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kMaxDim = 1u << 28;

struct CheckpointError : std::runtime_error {
  explicit CheckpointError(const std::string& m) : std::runtime_error(m) {}
};

inline void write_u32(std::ostream& o, std::uint32_t v) {
  o.write(reinterpret_cast<const char*>(&v), 4);
}
inline void write_u64(std::ostream& o, std::uint64_t v) {
  o.write(reinterpret_cast<const char*>(&v), 8);
}
inline std::uint32_t read_u32(std::istream& in, const std::string& ctx) {
  std::uint32_t v;
  in.read(reinterpret_cast<char*>(&v), 4);
  if (in.gcount() != 4) throw CheckpointError("truncated checkpoint: " + ctx);
  return v;
}
inline std::uint64_t read_u64(std::istream& in, const std::string& ctx) {
  std::uint64_t v;
  in.read(reinterpret_cast<char*>(&v), 8);
  if (in.gcount() != 8) throw CheckpointError("truncated checkpoint: " + ctx);
  return v;
}

template <typename T>
void write_tensor(std::ostream& o, const std::string& path,
                  const Tensor<T>& t) {
  require(path.size() < 65536, "parameter path too long for checkpoint");
  std::uint16_t len = static_cast<std::uint16_t>(path.size());
  o.write(reinterpret_cast<const char*>(&len), 2);
  o.write(path.data(), len);
  std::uint8_t rank = 4;
  o.write(reinterpret_cast<const char*>(&rank), 1);
  for (int i = 0; i < 4; ++i)
    write_u32(o, static_cast<std::uint32_t>(t.shape()[i]));
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    float f = static_cast<float>(t.data()[i]);
    o.write(reinterpret_cast<const char*>(&f), 4);
  }
}

template <typename T>
std::pair<std::string, Tensor<T>> read_tensor(std::istream& in) {
  std::uint16_t len;
  in.read(reinterpret_cast<char*>(&len), 2);
  if (in.gcount() != 2) throw CheckpointError("truncated checkpoint: name length");
  std::string path(len, '\0');
  in.read(path.data(), len);
  if (in.gcount() != len) throw CheckpointError("truncated checkpoint: name");
  std::uint8_t rank;
  in.read(reinterpret_cast<char*>(&rank), 1);
  if (in.gcount() != 1 || rank != 4)
    throw CheckpointError("checkpoint tensor " + path + ": unsupported rank");
  Shape4 s;
  std::uint64_t total = 1;
  for (int i = 0; i < 4; ++i) {
    std::uint32_t d = read_u32(in, "dims of " + path);
    if (d > kMaxDim)
      throw CheckpointError("checkpoint tensor " + path + ": dimension overflow");
    s[i] = static_cast<int>(d);
    total *= d;
  }
  if (total > std::uint64_t(kMaxDim))
    throw CheckpointError("checkpoint tensor " + path + ": dimension overflow");
  Tensor<T> t(s);
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    float f;
    in.read(reinterpret_cast<char*>(&f), 4);
    if (in.gcount() != 4)
      throw CheckpointError("truncated checkpoint: payload of " + path);
    t.data()[i] = static_cast<T>(f);
  }
  return {path, t};
}

}  // namespace ckpt

template <typename T>
void save_checkpoint(const std::filesystem::path& path,
                     const ParamStore<T>& params,
                     const AdamState<T>* adam = nullptr,
                     const std::string* rng_state = nullptr) {
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw ckpt::CheckpointError("cannot open " + path.string() + " for writing");
  out.write(ckpt::kMagic, 4);
  ckpt::write_u32(out, ckpt::kVersion);
  ckpt::write_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) ckpt::write_tensor(out, name, t);
  if (adam != nullptr) {
    out.write("ADAM", 4);
    ckpt::write_u64(out, static_cast<std::uint64_t>(adam->t));
    ckpt::write_u32(out, static_cast<std::uint32_t>(adam->m.size()));
    for (const auto& [name, t] : adam->m) ckpt::write_tensor(out, name, t);
    for (const auto& [name, t] : adam->v) ckpt::write_tensor(out, name, t);
  }
  if (rng_state != nullptr) {
    out.write("RNG0", 4);
    ckpt::write_u32(out, static_cast<std::uint32_t>(rng_state->size()));
    out.write(rng_state->data(),
              static_cast<std::streamsize>(rng_state->size()));
  }
  if (!out) throw ckpt::CheckpointError("short write to " + path.string());
}

template <typename T>
ParamStore<T> load_checkpoint(const std::filesystem::path& path,
                              AdamState<T>* adam = nullptr,
                              std::string* rng_state = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ckpt::CheckpointError("cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, ckpt::kMagic, 4) != 0)
    throw ckpt::CheckpointError(path.string() + ": bad checkpoint magic");
  std::uint32_t version = ckpt::read_u32(in, "version");
  if (version != ckpt::kVersion)
    throw ckpt::CheckpointError(path.string() + ": unsupported version " +
                                std::to_string(version));
  std::uint32_t count = ckpt::read_u32(in, "tensor count");
  ParamStore<T> params;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto [name, t] = ckpt::read_tensor<T>(in);
    params.add(name, std::move(t));
  }
  char tag[4];
  while (in.read(tag, 4) && in.gcount() == 4) {
    if (std::memcmp(tag, "ADAM", 4) == 0) {
      std::uint64_t t = ckpt::read_u64(in, "adam step");
      std::uint32_t n = ckpt::read_u32(in, "adam tensor count");
      AdamState<T> st;
      st.t = static_cast<std::int64_t>(t);
      for (std::uint32_t i = 0; i < n; ++i) {
        auto [name, m] = ckpt::read_tensor<T>(in);
        st.m.emplace(name, std::move(m));
      }
      for (std::uint32_t i = 0; i < n; ++i) {
        auto [name, v] = ckpt::read_tensor<T>(in);
        st.v.emplace(name, std::move(v));
      }
      if (adam != nullptr) *adam = std::move(st);
    } else if (std::memcmp(tag, "RNG0", 4) == 0) {
      std::uint32_t len = ckpt::read_u32(in, "rng length");
      std::string s(len, '\0');
      in.read(s.data(), len);
      if (static_cast<std::uint32_t>(in.gcount()) != len)
        throw ckpt::CheckpointError("truncated checkpoint: rng state");
      if (rng_state != nullptr) *rng_state = std::move(s);
    } else {
      throw ckpt::CheckpointError(path.string() + ": unknown section tag");
    }
  }
  return params;
}

inline std::string rng_to_string(const std::mt19937& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline void rng_from_string(std::mt19937& rng, const std::string& s) {
  std::istringstream is(s);
  is >> rng;
  require(static_cast<bool>(is), "invalid serialized RNG state");
}

struct TrainConfig {
  StageConfig stages;
  DepthRange range;
  LossWeights weights;
  LrSchedule schedule = LrSchedule::synthetic();
  int batch_size = 4;
  int epochs = 10;
  int max_steps = 0;  // 0 = run all epochs
  double grad_clip = 10.0;
  std::filesystem::path checkpoint_path;  // empty = no checkpoints
  std::ostream* log = nullptr;
};

struct TrainStats {
  int steps = 0;
  std::vector<double> step_losses;
};

struct TrainAbort : std::runtime_error {
  explicit TrainAbort(const std::string& m) : std::runtime_error(m) {}
};

// One optimization run. The caller owns parameters, optimizer state, and
// the shuffling RNG so runs can be resumed bit-exactly.
inline TrainStats train(ParamStore<float>& params, AdamState<float>& adam,
                        std::mt19937& rng,
                        const std::vector<synth::Sample>& dataset,
                        const TrainConfig& cfg, int start_epoch = 0) {
  require(!dataset.empty(), "train: dataset is empty");
  cfg.schedule.validate();
  cfg.weights.validate();
  cfg.stages.validate();
  TrainStats stats;
  int step = static_cast<int>(adam.t);
  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    std::vector<int> order(dataset.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    for (size_t i = order.size(); i > 1; --i) {
      std::uniform_int_distribution<size_t> pick(0, i - 1);
      std::swap(order[i - 1], order[pick(rng)]);
    }
    double lr = cfg.schedule.at(epoch);
    for (size_t off = 0; off < order.size();
         off += static_cast<size_t>(cfg.batch_size)) {
      size_t batch_end =
          std::min(off + static_cast<size_t>(cfg.batch_size), order.size());
      TapeScope<float> scope;
      Tensor<float> batch_total;
      double lp = 0, ld = 0, ls = 0;
      int nb = 0;
      for (size_t i = off; i < batch_end; ++i, ++nb) {
        const synth::Sample& s = dataset[static_cast<size_t>(order[i])];
        ChadetOutputs<float> out = chadet_forward_full(
            params, s.rgb0, s.sparse, cfg.stages, cfg.range, s.intr);
        auto [rec, mask] = warp_image(s.rgb1, out.depth, s.pose, s.intr);
        LossBreakdown<float> bd =
            total_loss(s.rgb0, s.sparse, out.depth, rec, mask, cfg.weights);
        lp += bd.lp;
        ld += bd.ld;
        ls += bd.ls;
        batch_total = batch_total.numel() == 0 ? bd.total
                                               : add(batch_total, bd.total);
      }
      Tensor<float> loss = mul_scalar(batch_total, 1.0f / nb);
      double loss_val = static_cast<double>(loss.item());
      if (!std::isfinite(loss_val))
        throw TrainAbort("non-finite loss at step " + std::to_string(step) +
                         "; last-good checkpoint retained");
      params.zero_grad();
      backward(loss);
      clip_gradients(params, cfg.grad_clip);
      adam_step(params, adam, lr);
      ++step;
      stats.steps += 1;
      stats.step_losses.push_back(loss_val);
      if (cfg.log != nullptr)
        *cfg.log << "step=" << step << " epoch=" << epoch << " lr=" << lr
                 << " total=" << loss_val << " lp=" << lp / nb
                 << " ld=" << ld / nb << " ls=" << ls / nb << "\n";
      if (cfg.max_steps > 0 && stats.steps >= cfg.max_steps) {
        if (!cfg.checkpoint_path.empty()) {
          std::string rs = rng_to_string(rng);
          save_checkpoint(cfg.checkpoint_path, params, &adam, &rs);
        }
        return stats;
      }
    }
    if (!cfg.checkpoint_path.empty()) {
      std::string rs = rng_to_string(rng);
      save_checkpoint(cfg.checkpoint_path, params, &adam, &rs);
    }
  }
  return stats;
}

}  // namespace chadet
