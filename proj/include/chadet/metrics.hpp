#pragma once

#include <cmath>
#include <iomanip>
#include <sstream>
#include <string>

#include "chadet/tensor.hpp"

namespace chadet {

struct MetricsReport {
  double mae_mm = 0;
  double rmse_mm = 0;
  double imae_per_km = 0;
  double irmse_per_km = 0;
  std::int64_t n_valid = 0;
  std::int64_t n_skipped = 0;  // pred <= eps pixels excluded from inverse metrics

  std::string table() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(3);
    os << "metric      value      unit\n"
       << "MAE    " << std::setw(11) << mae_mm << "    mm\n"
       << "RMSE   " << std::setw(11) << rmse_mm << "    mm\n"
       << "iMAE   " << std::setw(11) << imae_per_km << "    1/km\n"
       << "iRMSE  " << std::setw(11) << irmse_per_km << "    1/km\n"
       << "pixels " << std::setw(11) << n_valid << "\n";
    if (n_skipped > 0)
      os << "warning: " << n_skipped
         << " pixels with near-zero prediction skipped in inverse metrics\n";
    return os.str();
  }

  std::string keyvalue() const {
    std::ostringstream os;
    os << std::setprecision(10);
    os << "mae_mm=" << mae_mm << "\nrmse_mm=" << rmse_mm
       << "\nimae_per_km=" << imae_per_km << "\nirmse_per_km=" << irmse_per_km
       << "\nn_valid=" << n_valid << "\n";
    return os.str();
  }
};

// Accumulator so metrics can be aggregated over many images before the
// final means are taken.
struct MetricsAccumulator {
  double abs_sum = 0, sq_sum = 0, iabs_sum = 0, isq_sum = 0;
  std::int64_t n = 0, n_inv = 0, n_skipped = 0;

  template <typename T>
  void add(const Tensor<T>& pred, const Tensor<T>& gt,
           const Tensor<T>* valid_mask = nullptr) {
    require(pred.shape() == gt.shape(), "compute_metrics: shape mismatch");
    const double eps = 1e-6;
    for (std::int64_t i = 0; i < pred.numel(); ++i) {
      if (valid_mask != nullptr && valid_mask->data()[i] == T(0)) continue;
      double p = static_cast<double>(pred.data()[i]);
      double g = static_cast<double>(gt.data()[i]);
      require(g > 0, "compute_metrics: nonpositive ground truth on valid mask");
      double d = p - g;
      abs_sum += std::abs(d);
      sq_sum += d * d;
      ++n;
      if (p <= eps) {
        ++n_skipped;
      } else {
        double id = 1.0 / p - 1.0 / g;
        iabs_sum += std::abs(id);
        isq_sum += id * id;
        ++n_inv;
      }
    }
  }

  MetricsReport report() const {
    require(n > 0, "compute_metrics: empty valid mask");
    MetricsReport r;
    r.n_valid = n;
    r.n_skipped = n_skipped;
    r.mae_mm = abs_sum / double(n) * 1000.0;
    r.rmse_mm = std::sqrt(sq_sum / double(n)) * 1000.0;
    if (n_inv > 0) {
      // 1/m -> 1/km
      r.imae_per_km = iabs_sum / double(n_inv) * 1000.0;
      r.irmse_per_km = std::sqrt(isq_sum / double(n_inv)) * 1000.0;
    }
    return r;
  }
};

template <typename T>
MetricsReport compute_metrics(const Tensor<T>& pred, const Tensor<T>& gt,
                              const Tensor<T>* valid_mask = nullptr) {
  MetricsAccumulator acc;
  acc.add(pred, gt, valid_mask);
  return acc.report();
}

}  // namespace chadet
