#pragma once

#include <Eigen/Dense>

#include "chadet/nn.hpp"
#include "chadet/ops.hpp"

namespace chadet {

struct LossWeights {
  double w_p = 1.0;
  double w_1 = 0.15;  // color L1 inside the photometric term
  double w_2 = 0.95;  // structural (SSIM) inside the photometric term
  double w_d = 0.60;
  double w_s = 0.06;

  static LossWeights outdoor() { return LossWeights{}; }
  static LossWeights indoor() {
    LossWeights w;
    w.w_d = 1.0;
    w.w_s = 0.6;
    return w;
  }

  void validate() const {
    require(w_p >= 0 && w_1 >= 0 && w_2 >= 0 && w_d >= 0 && w_s >= 0,
            "loss weights must be non-negative");
  }
};

struct Pose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  void validate() const {
    require((rotation.transpose() * rotation - Eigen::Matrix3d::Identity())
                    .cwiseAbs()
                    .maxCoeff() < 1e-6,
            "pose rotation is not orthonormal");
    require(std::abs(rotation.determinant() - 1.0) < 1e-6,
            "pose rotation determinant is not +1");
  }

  Pose inverse() const {
    Pose inv;
    inv.rotation = rotation.transpose();
    inv.translation = -(rotation.transpose() * translation);
    return inv;
  }
};

// Backproject target pixels with the predicted depth, transform into the
// source frame, project, and bilinearly sample the source image. The mask
// zeroes out-of-view and behind-camera pixels and carries no gradient.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> warp_image(const Tensor<T>& src,
                                           const Tensor<T>& depth,
                                           const Pose& pose,
                                           const Intrinsics& intr) {
  const Shape4& ds = depth.shape();
  require(ds[1] == 1, "warp_image: depth must be 1-channel");
  require(src.shape()[0] == ds[0] && src.shape()[2] == ds[2] &&
              src.shape()[3] == ds[3],
          "warp_image: src/depth shape mismatch");
  pose.validate();
  const T eps = static_cast<T>(1e-4);

  Tensor<T> ucoef(Shape4{1, 1, ds[2], ds[3]});
  Tensor<T> vcoef(Shape4{1, 1, ds[2], ds[3]});
  for (int y = 0; y < ds[2]; ++y)
    for (int x = 0; x < ds[3]; ++x) {
      ucoef.at(0, 0, y, x) = static_cast<T>((x - intr.cx) / intr.fx);
      vcoef.at(0, 0, y, x) = static_cast<T>((y - intr.cy) / intr.fy);
    }
  Tensor<T> px = mul(depth, ucoef);
  Tensor<T> py = mul(depth, vcoef);
  const Eigen::Matrix3d& R = pose.rotation;
  const Eigen::Vector3d& t = pose.translation;
  auto lincomb = [&](int row) {
    Tensor<T> s = add(add(mul_scalar(px, static_cast<T>(R(row, 0))),
                          mul_scalar(py, static_cast<T>(R(row, 1)))),
                      mul_scalar(depth, static_cast<T>(R(row, 2))));
    return add_scalar(s, static_cast<T>(t(row)));
  };
  Tensor<T> xs = lincomb(0);
  Tensor<T> ys = lincomb(1);
  Tensor<T> zs = lincomb(2);
  // clamp depth away from zero for the projective division; such pixels
  // are masked out below
  Tensor<T> zc = add_scalar(relu(add_scalar(zs, -eps)), eps);
  Tensor<T> u = add_scalar(mul_scalar(div(xs, zc), static_cast<T>(intr.fx)),
                           static_cast<T>(intr.cx));
  Tensor<T> v = add_scalar(mul_scalar(div(ys, zc), static_cast<T>(intr.fy)),
                           static_cast<T>(intr.cy));
  Tensor<T> grid = concat_channels<T>({u, v});
  auto [rec, mask] = bilinear_sample(src, grid);
  for (int b = 0; b < ds[0]; ++b)
    for (int y = 0; y < ds[2]; ++y)
      for (int x = 0; x < ds[3]; ++x)
        if (zs.at(b, 0, y, x) <= eps) mask.at(b, 0, y, x) = T(0);
  rec = mul(rec, mask);
  return {rec, mask};
}

// Per-pixel SSIM with 3x3 mean-pooled statistics, C1 = 0.01^2, C2 = 0.03^2.
template <typename T>
Tensor<T> ssim(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "ssim: shape mismatch");
  int c = a.shape()[1];
  Tensor<T> box(Shape4{c, 1, 3, 3}, T(1) / T(9));
  Tensor<T> zero_bias(Shape4{1, c, 1, 1});
  auto blur = [&](const Tensor<T>& x) {
    return depthwise_conv2d(x, box, zero_bias, 1, 1);
  };
  const T c1 = static_cast<T>(0.01 * 0.01);
  const T c2 = static_cast<T>(0.03 * 0.03);
  Tensor<T> mu_a = blur(a);
  Tensor<T> mu_b = blur(b);
  Tensor<T> var_a = sub(blur(mul(a, a)), mul(mu_a, mu_a));
  Tensor<T> var_b = sub(blur(mul(b, b)), mul(mu_b, mu_b));
  Tensor<T> cov = sub(blur(mul(a, b)), mul(mu_a, mu_b));
  Tensor<T> num = mul(add_scalar(mul_scalar(mul(mu_a, mu_b), T(2)), c1),
                      add_scalar(mul_scalar(cov, T(2)), c2));
  Tensor<T> den = mul(add_scalar(add(mul(mu_a, mu_a), mul(mu_b, mu_b)), c1),
                      add_scalar(add(var_a, var_b), c2));
  return div(num, den);
}

template <typename T>
double mask_count(const Tensor<T>& mask) {
  double n = 0;
  for (std::int64_t i = 0; i < mask.numel(); ++i)
    n += static_cast<double>(mask.data()[i] != T(0));
  return n;
}

// w_1 * masked mean |target - rec| + w_2 * masked mean (1 - ssim)/2.
template <typename T>
Tensor<T> photometric_loss(const Tensor<T>& target, const Tensor<T>& rec,
                           const Tensor<T>& mask, const LossWeights& w) {
  require(target.shape() == rec.shape(), "photometric_loss: shape mismatch");
  double n_valid = mask_count(mask);
  require(n_valid > 0, "photometric_loss: empty valid mask");
  int c = target.shape()[1];
  T inv = static_cast<T>(1.0 / (n_valid * c));
  Tensor<T> l1 = mul_scalar(sum_all(mul(abs(sub(target, rec)), mask)), inv);
  Tensor<T> dssim = mul_scalar(
      sum_all(mul(mul_scalar(add_scalar(neg(ssim(target, rec)), T(1)),
                             T(0.5)),
                  mask)),
      inv);
  return add(mul_scalar(l1, static_cast<T>(w.w_1)),
             mul_scalar(dssim, static_cast<T>(w.w_2)));
}

// Mean L1 between prediction and sparse measurements over valid (nonzero)
// sparse pixels.
template <typename T>
Tensor<T> sparse_depth_loss(const Tensor<T>& pred, const Tensor<T>& sparse) {
  require(pred.shape() == sparse.shape(), "sparse_depth_loss: shape mismatch");
  Tensor<T> valid(sparse.shape());
  double n_valid = 0;
  for (std::int64_t i = 0; i < sparse.numel(); ++i) {
    require(sparse.data()[i] >= T(0), "sparse_depth_loss: negative sparse depth");
    if (sparse.data()[i] > T(0)) {
      valid.data()[i] = T(1);
      n_valid += 1;
    }
  }
  require(n_valid > 0, "sparse_depth_loss: no valid sparse pixels");
  return mul_scalar(sum_all(mul(abs(sub(pred, sparse)), valid)),
                    static_cast<T>(1.0 / n_valid));
}

// Edge-aware smoothness with forward differences; the image gradient
// weight is averaged over color channels and carries no gradient.
template <typename T>
Tensor<T> smoothness_loss(const Tensor<T>& depth, const Tensor<T>& image) {
  const Shape4& ds = depth.shape();
  require(image.shape()[2] == ds[2] && image.shape()[3] == ds[3],
          "smoothness_loss: spatial shape mismatch");
  int h = ds[2], w = ds[3], c = image.shape()[1];
  Tensor<T> wx(Shape4{ds[0], 1, h, w - 1});
  Tensor<T> wy(Shape4{ds[0], 1, h - 1, w});
  for (int b = 0; b < ds[0]; ++b) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w - 1; ++x) {
        T g = T(0);
        for (int ch = 0; ch < c; ++ch)
          g += std::abs(image.at(b, ch, y, x + 1) - image.at(b, ch, y, x));
        wx.at(b, 0, y, x) = std::exp(-g / static_cast<T>(c));
      }
    for (int y = 0; y < h - 1; ++y)
      for (int x = 0; x < w; ++x) {
        T g = T(0);
        for (int ch = 0; ch < c; ++ch)
          g += std::abs(image.at(b, ch, y + 1, x) - image.at(b, ch, y, x));
        wy.at(b, 0, y, x) = std::exp(-g / static_cast<T>(c));
      }
  }
  Tensor<T> dzx = abs(sub(crop_spatial(depth, 0, h, 1, w - 1),
                          crop_spatial(depth, 0, h, 0, w - 1)));
  Tensor<T> dzy = abs(sub(crop_spatial(depth, 1, h - 1, 0, w),
                          crop_spatial(depth, 0, h - 1, 0, w)));
  return add(mean_all(mul(dzx, wx)), mean_all(mul(dzy, wy)));
}

template <typename T>
struct LossBreakdown {
  Tensor<T> total;
  double lp = 0, ld = 0, ls = 0;
  double weighted_lp = 0, weighted_ld = 0, weighted_ls = 0;
};

// L = w_p * l_p + w_d * l_d + w_s * l_s.
template <typename T>
LossBreakdown<T> total_loss(const Tensor<T>& target_rgb,
                            const Tensor<T>& sparse,
                            const Tensor<T>& pred_depth,
                            const Tensor<T>& reconstruction,
                            const Tensor<T>& mask, const LossWeights& w) {
  w.validate();
  LossBreakdown<T> out;
  Tensor<T> lp = photometric_loss(target_rgb, reconstruction, mask, w);
  Tensor<T> ld = sparse_depth_loss(pred_depth, sparse);
  Tensor<T> ls = smoothness_loss(pred_depth, target_rgb);
  out.lp = static_cast<double>(lp.item());
  out.ld = static_cast<double>(ld.item());
  out.ls = static_cast<double>(ls.item());
  out.weighted_lp = w.w_p * out.lp;
  out.weighted_ld = w.w_d * out.ld;
  out.weighted_ls = w.w_s * out.ls;
  out.total = add(add(mul_scalar(lp, static_cast<T>(w.w_p)),
                      mul_scalar(ld, static_cast<T>(w.w_d))),
                  mul_scalar(ls, static_cast<T>(w.w_s)));
  return out;
}

}  // namespace chadet
