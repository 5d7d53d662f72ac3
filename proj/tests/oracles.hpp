#pragma once

// Brute-force voxel-scan reference implementations, kept deliberately naive
// and independent of the library code paths (no sorting, no selection).

#include "rtp/phantom/raster.hpp"

#include <cmath>
#include <vector>

namespace oracle {

inline double count_at_least(const rtp::Image& dose, const rtp::Mask& mask, double t) {
  double n = 0;
  for (int r = 0; r < dose.rows(); ++r)
    for (int c = 0; c < dose.cols(); ++c)
      if (mask(r, c) && static_cast<double>(dose(r, c)) >= t) n += 1;
  return n;
}

inline double mask_size(const rtp::Mask& mask) {
  double n = 0;
  for (int i = 0; i < mask.size(); ++i) n += mask.data()[i] ? 1 : 0;
  return n;
}

inline double v_at(const rtp::Image& dose, const rtp::Mask& mask, double t) {
  return count_at_least(dose, mask, t) / mask_size(mask);
}

inline double dmax(const rtp::Image& dose, const rtp::Mask& mask) {
  double m = -1e300;
  for (int i = 0; i < dose.size(); ++i)
    if (mask.data()[i]) m = std::max(m, static_cast<double>(dose.data()[i]));
  return m;
}

inline double dmean(const rtp::Image& dose, const rtp::Mask& mask) {
  double s = 0;
  for (int i = 0; i < dose.size(); ++i)
    if (mask.data()[i]) s += static_cast<double>(dose.data()[i]);
  return s / mask_size(mask);
}

/// Largest masked dose x such that at least k voxels receive >= x, with
/// k = ceil(v * n / 100) computed in integer arithmetic (v integral).
inline double d_at_volume(const rtp::Image& dose, const rtp::Mask& mask, int volume_pct) {
  const long n = static_cast<long>(mask_size(mask));
  long k = (volume_pct * n + 99) / 100;
  if (k < 1) k = 1;
  double best = -1e300;
  for (int i = 0; i < dose.size(); ++i) {
    if (!mask.data()[i]) continue;
    const double x = dose.data()[i];
    if (count_at_least(dose, mask, x) >= static_cast<double>(k)) best = std::max(best, x);
  }
  return best;
}

inline std::vector<double> dvh(const rtp::Image& dose, const rtp::Mask& mask, double bin) {
  const double mx = std::max(dmax(dose, mask), 0.0);
  std::vector<double> out;
  for (int k = 0; static_cast<double>(k) <= std::ceil(mx / bin); ++k) out.push_back(v_at(dose, mask, k * bin));
  return out;
}

inline double ci(const rtp::Image& dose, const rtp::Mask& ptv, double level) {
  double tv = 0, piv = 0, both = 0;
  for (int i = 0; i < dose.size(); ++i) {
    const bool a = ptv.data()[i] != 0, b = dose.data()[i] >= level;
    tv += a;
    piv += b;
    both += a && b;
  }
  return piv == 0 ? 0.0 : (both / tv) * (both / piv);
}

}  // namespace oracle
