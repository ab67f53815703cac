#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "chadet/ops.hpp"
#include "chadet/tensor.hpp"

namespace chadet {

struct Intrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;

  // Canonical pinhole for images without calibration: focal = width,
  // principal point at the image center.
  static Intrinsics canonical(int h, int w) {
    return Intrinsics{double(w), double(w), w / 2.0, h / 2.0};
  }
};

struct DepthRange {
  double min_d = 0.5;
  double max_d = 20.0;

  void validate() const {
    require(min_d > 0 && min_d < max_d,
            "depth range requires 0 < min_d < max_d");
  }
};

struct StageConfig {
  std::vector<int> channels{16, 32, 64, 128};
  std::vector<int> windows{2, 2, 4, 4};
  std::vector<int> heads{4, 4, 4, 4};
  int se_reduction = 4;
  int s2d_hidden = 16;

  int num_stages() const { return static_cast<int>(channels.size()); }

  int d_qk(int s) const { return channels[s] / (2 * heads[s]); }
  int d_v(int s) const { return channels[s] / heads[s]; }

  void validate() const {
    require(channels.size() == 4 && windows.size() == 4 && heads.size() == 4,
            "stage config requires exactly 4 stages");
    for (int s = 0; s < 4; ++s) {
      require(channels[s] > 0 && windows[s] > 0 && heads[s] > 0,
              "stage config extents must be positive");
      require(channels[s] % heads[s] == 0,
              "channels[" + std::to_string(s) + "]=" +
                  std::to_string(channels[s]) + " not divisible by heads=" +
                  std::to_string(heads[s]));
      require(channels[s] % (2 * heads[s]) == 0,
              "channels[" + std::to_string(s) + "] must be divisible by 2*heads");
      require(channels[s] % se_reduction == 0,
              "channels[" + std::to_string(s) +
                  "] not divisible by se reduction");
    }
  }

  // Feature-map side length at stage s for input side n.
  static int stage_side(int input_side, int s) { return input_side >> (s + 1); }

  void check_input_size(int h, int w) const {
    require(h % 16 == 0 && w % 16 == 0,
            "input size " + std::to_string(h) + "x" + std::to_string(w) +
                " must be divisible by 16");
    for (int s = 0; s < 4; ++s) {
      int sh = stage_side(h, s), sw = stage_side(w, s);
      require(sh % windows[s] == 0 && sw % windows[s] == 0,
              "stage " + std::to_string(s) + " feature map " +
                  std::to_string(sh) + "x" + std::to_string(sw) +
                  " not divisible by window " + std::to_string(windows[s]));
    }
  }
};

// Named, deterministically ordered (lexicographic) map of learnable tensors.
template <typename T>
class ParamStore {
  std::map<std::string, Tensor<T>> params_;

 public:
  Tensor<T>& add(const std::string& path, Tensor<T> t) {
    require(params_.find(path) == params_.end(),
            "duplicate parameter path " + path);
    t.requires_grad = true;
    return params_.emplace(path, std::move(t)).first->second;
  }

  Tensor<T>& at(const std::string& path) {
    auto it = params_.find(path);
    require(it != params_.end(), "unknown parameter path " + path);
    return it->second;
  }
  const Tensor<T>& at(const std::string& path) const {
    auto it = params_.find(path);
    require(it != params_.end(), "unknown parameter path " + path);
    return it->second;
  }
  bool has(const std::string& path) const {
    return params_.find(path) != params_.end();
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  size_t size() const { return params_.size(); }

  void zero_grad() {
    for (auto& [k, v] : params_) v.zero_grad();
  }

  std::int64_t count() const {
    std::int64_t n = 0;
    for (const auto& [k, v] : params_) n += v.numel();
    return n;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [k, v] : params_) out.add(k, v.template cast<U>());
    return out;
  }
};

template <typename T>
std::int64_t param_count(const ParamStore<T>& params) {
  return params.count();
}

namespace init {

template <typename T>
Tensor<T> fan_in_uniform(Shape4 s, std::int64_t fan_in, std::mt19937& rng) {
  Tensor<T> t(s);
  double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t.data()[i] = static_cast<T>(dist(rng));
  return t;
}

}  // namespace init

// Builds and initializes every learnable tensor of the network. Convs get
// fan-in scaled uniform weights with zero bias; the second squeeze-excite
// FC starts at zero so gates begin at 0.5.
template <typename T>
ParamStore<T> init_params(const StageConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937 rng(static_cast<std::uint32_t>(seed));
  ParamStore<T> p;

  auto conv = [&](const std::string& path, int out_c, int in_c, int k) {
    p.add(path + ".weight", init::fan_in_uniform<T>(Shape4{out_c, in_c, k, k},
                                                    std::int64_t(in_c) * k * k,
                                                    rng));
    p.add(path + ".bias", Tensor<T>(Shape4{1, out_c, 1, 1}));
  };
  auto dwconv = [&](const std::string& path, int c, int k) {
    p.add(path + ".weight",
          init::fan_in_uniform<T>(Shape4{c, 1, k, k}, std::int64_t(k) * k, rng));
    p.add(path + ".bias", Tensor<T>(Shape4{1, c, 1, 1}));
  };
  auto tconv = [&](const std::string& path, int in_c, int out_c, int k) {
    p.add(path + ".weight", init::fan_in_uniform<T>(Shape4{in_c, out_c, k, k},
                                                    std::int64_t(in_c) * k * k,
                                                    rng));
    p.add(path + ".bias", Tensor<T>(Shape4{1, out_c, 1, 1}));
  };
  auto se = [&](const std::string& path, int c) {
    int r = cfg.se_reduction;
    conv(path + ".fc1", c / r, c, 1);
    p.add(path + ".fc2.weight", Tensor<T>(Shape4{c, c / r, 1, 1}));
    p.add(path + ".fc2.bias", Tensor<T>(Shape4{1, c, 1, 1}));
  };
  auto encoder = [&](const std::string& name, int input_c) {
    int in_c = input_c;
    for (int s = 0; s < 4; ++s) {
      std::string st = name + ".stage" + std::to_string(s);
      int c = cfg.channels[s];
      dwconv(st + ".dw1", in_c, 3);
      conv(st + ".pw", c, in_c, 1);
      dwconv(st + ".dw2", c, 3);
      se(st + ".se", c);
      in_c = c;
    }
  };

  conv("s2d.fuse1", cfg.s2d_hidden, 3, 1);
  conv("s2d.fuse2", 1, cfg.s2d_hidden, 1);
  encoder("enc_rgb", 3);
  encoder("enc_depth", 1);

  for (int s = 0; s < 4; ++s) {
    std::string st = "dec.stage" + std::to_string(s);
    int c = cfg.channels[s];
    int ch = c / cfg.heads[s];
    conv(st + ".fuse", c, 2 * c, 3);
    conv(st + ".pos", c, 3, 1);
    dwconv(st + ".res_rgbd.dw", c, 3);
    conv(st + ".res_rgbd.pw", c, c, 3);
    dwconv(st + ".res_depth.dw", c, 3);
    conv(st + ".res_depth.pw", c, c, 3);
    // token-space projection matrices, shared across heads of the stage
    p.add(st + ".att.wq", init::fan_in_uniform<T>(Shape4{1, 1, ch, cfg.d_qk(s)},
                                                  ch, rng));
    p.add(st + ".att.wk", init::fan_in_uniform<T>(Shape4{1, 1, ch, cfg.d_qk(s)},
                                                  ch, rng));
    p.add(st + ".att.wv", init::fan_in_uniform<T>(Shape4{1, 1, ch, cfg.d_v(s)},
                                                  ch, rng));
    conv(st + ".att.proj", c, c, 1);

    std::string up = "up.stage" + std::to_string(s);
    int out_c = s == 0 ? cfg.channels[0] : cfg.channels[s - 1];
    dwconv(up + ".res1.dw", c, 3);
    conv(up + ".res1.pw", c, c, 3);
    tconv(up + ".tconv", c, out_c, 3);
    se(up + ".se", out_c);
    dwconv(up + ".res2.dw", out_c, 3);
    conv(up + ".res2.pw", out_c, out_c, 3);
  }
  conv("head", 1, cfg.channels[0], 3);
  return p;
}

namespace detail {

// conv2d/depthwise expect a flat (out_c) bias; stored biases are
// (1, out_c, 1, 1) which has the same element count and order.
template <typename T>
Tensor<T> conv_b(ParamStore<T>& p, const std::string& path, const Tensor<T>& x,
                 int stride, int pad) {
  return conv2d(x, p.at(path + ".weight"), p.at(path + ".bias"), stride, pad);
}
template <typename T>
Tensor<T> dwconv_b(ParamStore<T>& p, const std::string& path,
                   const Tensor<T>& x, int stride, int pad) {
  return depthwise_conv2d(x, p.at(path + ".weight"), p.at(path + ".bias"),
                          stride, pad);
}

}  // namespace detail

// Per-channel gating: pool -> FC(c -> c/r) -> rectifier -> FC(c/r -> c)
// -> sigmoid, applied multiplicatively.
template <typename T>
Tensor<T> squeeze_excite(ParamStore<T>& p, const std::string& path,
                         const Tensor<T>& x, int reduction) {
  require(x.shape()[1] % reduction == 0,
          "squeeze_excite: reduction does not divide channels");
  Tensor<T> pooled = global_avg_pool(x);
  Tensor<T> h = leaky_relu(detail::conv_b(p, path + ".fc1", pooled, 1, 0));
  Tensor<T> gates = sigmoid(detail::conv_b(p, path + ".fc2", h, 1, 0));
  return mul(x, gates);
}

// One encoder stage: stride-2 depthwise conv, 1x1 conv to the stage width,
// depthwise conv, squeeze-excite. Halves H and W.
template <typename T>
Tensor<T> encoder_stage(ParamStore<T>& p, const std::string& enc,
                        const Tensor<T>& x, const StageConfig& cfg, int stage) {
  const Shape4& s = x.shape();
  require(s[2] % 2 == 0 && s[3] % 2 == 0,
          "encoder_stage: odd spatial extent " + s.str());
  std::string st = enc + ".stage" + std::to_string(stage);
  Tensor<T> h = detail::dwconv_b(p, st + ".dw1", x, 2, 1);
  h = leaky_relu(detail::conv_b(p, st + ".pw", h, 1, 0));
  h = leaky_relu(detail::dwconv_b(p, st + ".dw2", h, 1, 1));
  return squeeze_excite(p, st + ".se", h, cfg.se_reduction);
}

// Validity-masked min pooling: invalid (zero) pixels act as +inf; windows
// with no valid pixel yield 0.
template <typename T>
Tensor<T> min_pool_valid(const Tensor<T>& z, int k) {
  const Shape4& s = z.shape();
  int r = k / 2;
  Tensor<T> out(s);
  for (int b = 0; b < s[0]; ++b)
    for (int y = 0; y < s[2]; ++y)
      for (int x = 0; x < s[3]; ++x) {
        T best = T(0);
        bool found = false;
        for (int dy = -r; dy <= r; ++dy) {
          int yy = y + dy;
          if (yy < 0 || yy >= s[2]) continue;
          for (int dx = -r; dx <= r; ++dx) {
            int xx = x + dx;
            if (xx < 0 || xx >= s[3]) continue;
            T v = z.at(b, 0, yy, xx);
            if (v > T(0) && (!found || v < best)) {
              best = v;
              found = true;
            }
          }
        }
        out.at(b, 0, y, x) = found ? best : T(0);
      }
  return out;
}

// Sparse depth to a quasi-dense map: masked min pooling at kernel sizes
// 3, 5, 7 fused by two 1x1 convolutions.
template <typename T>
Tensor<T> sparse_to_dense(ParamStore<T>& p, const Tensor<T>& z0) {
  const Shape4& s = z0.shape();
  require(s[1] == 1, "sparse_to_dense: input must be 1-channel");
  for (std::int64_t i = 0; i < z0.numel(); ++i)
    require(z0.data()[i] >= T(0), "sparse_to_dense: negative input depth");
  std::vector<Tensor<T>> pooled{min_pool_valid(z0, 3), min_pool_valid(z0, 5),
                                min_pool_valid(z0, 7)};
  Tensor<T> stacked = concat_channels(pooled);
  Tensor<T> h = leaky_relu(detail::conv_b(p, "s2d.fuse1", stacked, 1, 0));
  return detail::conv_b(p, "s2d.fuse2", h, 1, 0);
}

// Camera-frame coordinates (x, y, z) per pixel from a depth map:
// x = (u - cx) z / fx, y = (v - cy) z / fy.
template <typename T>
Tensor<T> positional_encoding_3d(const Tensor<T>& depth,
                                 const Intrinsics& intr) {
  require(intr.fx > 0 && intr.fy > 0,
          "positional_encoding_3d: focal lengths must be positive");
  const Shape4& s = depth.shape();
  Tensor<T> ucoef(Shape4{1, 1, s[2], s[3]});
  Tensor<T> vcoef(Shape4{1, 1, s[2], s[3]});
  for (int y = 0; y < s[2]; ++y)
    for (int x = 0; x < s[3]; ++x) {
      ucoef.at(0, 0, y, x) = static_cast<T>((x - intr.cx) / intr.fx);
      vcoef.at(0, 0, y, x) = static_cast<T>((y - intr.cy) / intr.fy);
    }
  std::vector<Tensor<T>> xyz{mul(depth, ucoef), mul(depth, vcoef), depth};
  return concat_channels(xyz);
}

// Windowed cross attention where head i's key/value input is the RGBD
// slice plus head i-1's attention output. Returns the per-head outputs
// before the final projection; set chain_heads=false to sever the
// head-to-head recurrence (independent-head cross attention).
template <typename T>
std::vector<Tensor<T>> cross_hierarchical_attention_heads(
    ParamStore<T>& p, const std::string& prefix, const Tensor<T>& x_rgbd,
    const Tensor<T>& x_depth, const StageConfig& cfg, int stage,
    bool chain_heads = true) {
  const Shape4& s = x_rgbd.shape();
  require(s == x_depth.shape(),
          "cross attention: rgbd and depth shapes differ: " + s.str() +
              " vs " + x_depth.shape().str());
  int n = cfg.heads[stage];
  int ws = cfg.windows[stage];
  require(s[1] == cfg.channels[stage],
          "cross attention: channel count != stage width");
  require(s[2] % ws == 0 && s[3] % ws == 0,
          "cross attention: window " + std::to_string(ws) +
              " does not divide feature map " + s.str());
  std::vector<Tensor<T>> rgbd_heads = split_channels(x_rgbd, n);
  std::vector<Tensor<T>> depth_heads = split_channels(x_depth, n);
  Tensor<T> wq = p.at(prefix + ".wq");
  Tensor<T> wk = p.at(prefix + ".wk");
  Tensor<T> wv = p.at(prefix + ".wv");
  T scale = static_cast<T>(1.0 / std::sqrt(double(cfg.d_qk(stage))));

  std::vector<Tensor<T>> outs;
  Tensor<T> prev;  // CrossAtt^{i-1}; empty for the first head
  for (int i = 0; i < n; ++i) {
    size_t h = static_cast<size_t>(i);
    Tensor<T> kv_in =
        prev.numel() == 0 ? rgbd_heads[h] : add(rgbd_heads[h], prev);
    Tensor<T> tok_d = window_partition(depth_heads[h], ws);
    Tensor<T> tok_kv = window_partition(kv_in, ws);
    Tensor<T> q = matmul_batched(tok_d, wq);
    Tensor<T> k = matmul_batched(tok_kv, wk);
    Tensor<T> v = matmul_batched(tok_kv, wv);
    Tensor<T> scores = mul_scalar(matmul_batched(q, transpose_last2(k)), scale);
    Tensor<T> att = softmax(scores, 3);
    Tensor<T> out_tok = matmul_batched(att, v);
    Tensor<T> head = window_unpartition(out_tok, ws, s[0], s[2], s[3]);
    outs.push_back(head);
    if (chain_heads) prev = head;
  }
  return outs;
}

template <typename T>
Tensor<T> cross_hierarchical_attention(ParamStore<T>& p,
                                       const std::string& prefix,
                                       const Tensor<T>& x_rgbd,
                                       const Tensor<T>& x_depth,
                                       const StageConfig& cfg, int stage) {
  std::vector<Tensor<T>> heads = cross_hierarchical_attention_heads(
      p, prefix, x_rgbd, x_depth, cfg, stage);
  return detail::conv_b(p, prefix + ".proj", concat_channels(heads), 1, 0);
}

// Decoder stage: fuse X_RGB with the previous decoder output and the 3D
// positional encoding, refine both streams with depthwise+conv residuals,
// then apply cross-hierarchical attention (depth stream as query).
template <typename T>
Tensor<T> decoder_stage(ParamStore<T>& p, const Tensor<T>& x_rgb,
                        const Tensor<T>& x_depth, const Tensor<T>& z_prev,
                        const Tensor<T>& pos3, const StageConfig& cfg,
                        int stage) {
  require(x_rgb.shape() == z_prev.shape(),
          "decoder_stage: z_prev shape " + z_prev.shape().str() +
              " != x_rgb shape " + x_rgb.shape().str());
  require(x_rgb.shape()[2] == x_depth.shape()[2] &&
              x_rgb.shape()[3] == x_depth.shape()[3] &&
              pos3.shape()[2] == x_rgb.shape()[2] &&
              pos3.shape()[3] == x_rgb.shape()[3],
          "decoder_stage: input resolution mismatch");
  std::string st = "dec.stage" + std::to_string(stage);
  Tensor<T> x_rgbd =
      detail::conv_b(p, st + ".fuse",
                     concat_channels<T>({x_rgb, z_prev}), 1, 1);
  x_rgbd = add(x_rgbd, detail::conv_b(p, st + ".pos", pos3, 1, 0));
  x_rgbd = add(x_rgbd, detail::conv_b(p, st + ".res_rgbd.pw",
                                      leaky_relu(detail::dwconv_b(
                                          p, st + ".res_rgbd.dw", x_rgbd, 1, 1)),
                                      1, 1));
  Tensor<T> xd = add(x_depth, detail::conv_b(p, st + ".res_depth.pw",
                                             leaky_relu(detail::dwconv_b(
                                                 p, st + ".res_depth.dw",
                                                 x_depth, 1, 1)),
                                             1, 1));
  return cross_hierarchical_attention(p, st + ".att", x_rgbd, xd, cfg, stage);
}

// Upsample stage: residual pair, stride-2 transposed conv to the next
// stage width (2x resolution), encoder skip added, squeeze-excite, second
// residual pair. enc_skip may be null for the final full-resolution step.
template <typename T>
Tensor<T> upsample_stage(ParamStore<T>& p, const Tensor<T>& z,
                         const Tensor<T>* enc_skip, const StageConfig& cfg,
                         int stage) {
  std::string up = "up.stage" + std::to_string(stage);
  Tensor<T> h = add(z, detail::conv_b(p, up + ".res1.pw",
                                      leaky_relu(detail::dwconv_b(
                                          p, up + ".res1.dw", z, 1, 1)),
                                      1, 1));
  h = transposed_conv2d(h, p.at(up + ".tconv.weight"),
                        p.at(up + ".tconv.bias"), 2, 1, 1);
  if (enc_skip != nullptr) {
    require(enc_skip->shape() == h.shape(),
            "upsample_stage: skip shape " + enc_skip->shape().str() +
                " != upsampled shape " + h.shape().str());
    h = add(h, *enc_skip);
  }
  h = squeeze_excite(p, up + ".se", h, cfg.se_reduction);
  h = add(h, detail::conv_b(p, up + ".res2.pw",
                            leaky_relu(detail::dwconv_b(p, up + ".res2.dw", h,
                                                        1, 1)),
                            1, 1));
  return h;
}

// Z_d = min_d / (sigmoid(Z_k) + min_d/max_d); strictly inside
// (min_d*max_d/(max_d+min_d), max_d), monotone decreasing in the logit.
template <typename T>
Tensor<T> depth_from_inverse(const Tensor<T>& logits, const DepthRange& range) {
  range.validate();
  T ratio = static_cast<T>(range.min_d / range.max_d);
  // clamp logits to +-15 so sigmoid never underflows against min_d/max_d
  // and the output bounds stay strict in 32-bit arithmetic
  const T lim = T(15);
  Tensor<T> z = add(sub(logits, relu(add_scalar(logits, -lim))),
                    relu(neg(add_scalar(logits, lim))));
  Tensor<T> denom = add_scalar(sigmoid(z), ratio);
  Tensor<T> num(Shape4{1, 1, 1, 1});
  num.data()[0] = static_cast<T>(range.min_d);
  return div(num, denom);
}

template <typename T>
struct ChadetOutputs {
  Tensor<T> depth;        // b x 1 x H x W, meters
  Tensor<T> quasi_dense;  // sparse_to_dense output
};

// Full pipeline: dual encoders over 4 stages, coarsest-to-finest decoding
// with cross-hierarchical attention and upsampling, 3x3 head,
// inverse-depth mapping.
template <typename T>
ChadetOutputs<T> chadet_forward_full(ParamStore<T>& p, const Tensor<T>& rgb,
                                     const Tensor<T>& sparse,
                                     const StageConfig& cfg,
                                     const DepthRange& range,
                                     const Intrinsics& intr) {
  const Shape4& rs = rgb.shape();
  require(rs[1] == 3, "chadet_forward: rgb must have 3 channels");
  require(sparse.shape() == Shape4(rs[0], 1, rs[2], rs[3]),
          "chadet_forward: sparse shape " + sparse.shape().str() +
              " incompatible with rgb " + rs.str());
  cfg.check_input_size(rs[2], rs[3]);

  Tensor<T> quasi = sparse_to_dense(p, sparse);
  Tensor<T> pos_full = positional_encoding_3d(quasi, intr);

  std::vector<Tensor<T>> enc_rgb(4), enc_depth(4), pos(4);
  Tensor<T> hr = rgb, hd = quasi;
  for (int s = 0; s < 4; ++s) {
    hr = encoder_stage(p, "enc_rgb", hr, cfg, s);
    hd = encoder_stage(p, "enc_depth", hd, cfg, s);
    enc_rgb[static_cast<size_t>(s)] = hr;
    enc_depth[static_cast<size_t>(s)] = hd;
    pos[static_cast<size_t>(s)] = avg_pool2d(pos_full, 1 << (s + 1));
  }

  Tensor<T> z_prev(enc_rgb[3].shape());  // null matrix at the coarsest stage
  z_prev.requires_grad = false;
  Tensor<T> z;
  for (int s = 3; s >= 0; --s) {
    z = decoder_stage(p, enc_rgb[static_cast<size_t>(s)],
                      enc_depth[static_cast<size_t>(s)], z_prev,
                      pos[static_cast<size_t>(s)], cfg, s);
    const Tensor<T>* skip =
        s > 0 ? &enc_rgb[static_cast<size_t>(s - 1)] : nullptr;
    z = upsample_stage(p, z, skip, cfg, s);
    z_prev = z;
  }
  Tensor<T> logits = detail::conv_b(p, "head", z, 1, 1);
  ChadetOutputs<T> out;
  out.depth = depth_from_inverse(logits, range);
  out.quasi_dense = quasi;
  return out;
}

template <typename T>
Tensor<T> chadet_forward(ParamStore<T>& p, const Tensor<T>& rgb,
                         const Tensor<T>& sparse, const StageConfig& cfg,
                         const DepthRange& range) {
  return chadet_forward_full(p, rgb, sparse, cfg, range,
                             Intrinsics::canonical(rgb.shape()[2],
                                                   rgb.shape()[3]))
      .depth;
}

}  // namespace chadet
