#pragma once

// Dose-map metrics over a structure mask. All functions accept any Eigen
// dense expression for the dose (float or double) and a mask whose nonzero
// entries select voxels; the two must have the same dimensions.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace rtp::dosimetry {

class EmptyMaskError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DvhCurve {
  std::string structure;
  double bin_width = 0.1;
  /// samples[k] = fraction of the structure receiving at least k * bin_width.
  std::vector<double> samples;
};

struct DoseStats {
  double mean = 0.0;
  double max = 0.0;
};

enum class HiFormula { MaxOverPrescription, D2MinusD98OverD50 };

namespace detail {

template <typename D, typename M>
void check_dims(const Eigen::DenseBase<D>& dose, const Eigen::DenseBase<M>& mask) {
  if (dose.rows() != mask.rows() || dose.cols() != mask.cols()) {
    throw std::invalid_argument("dose is " + std::to_string(dose.rows()) + "x" + std::to_string(dose.cols()) +
                                " but mask is " + std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()));
  }
}

}  // namespace detail

/// Dose values of the masked voxels, in row-major scan order.
template <typename D, typename M>
std::vector<double> masked_values(const Eigen::DenseBase<D>& dose, const Eigen::DenseBase<M>& mask) {
  detail::check_dims(dose, mask);
  std::vector<double> out;
  for (Eigen::Index r = 0; r < dose.rows(); ++r) {
    for (Eigen::Index c = 0; c < dose.cols(); ++c) {
      if (mask(r, c) != 0) out.push_back(static_cast<double>(dose(r, c)));
    }
  }
  if (out.empty()) throw EmptyMaskError("structure mask is empty");
  return out;
}

template <typename D, typename M>
DvhCurve dvh(const Eigen::DenseBase<D>& dose, const Eigen::DenseBase<M>& mask, double bin_width = 0.1,
             std::string structure = {}) {
  if (!(bin_width > 0.0)) throw std::invalid_argument("dvh: bin width must be positive");
  auto v = masked_values(dose, mask);
  std::sort(v.begin(), v.end());
  const double n = static_cast<double>(v.size());
  const auto bins = static_cast<std::size_t>(std::ceil(std::max(v.back(), 0.0) / bin_width));
  DvhCurve curve{std::move(structure), bin_width, {}};
  curve.samples.reserve(bins + 1);
  for (std::size_t k = 0; k <= bins; ++k) {
    const double t = static_cast<double>(k) * bin_width;
    const auto below = std::lower_bound(v.begin(), v.end(), t) - v.begin();
    curve.samples.push_back((n - static_cast<double>(below)) / n);
  }
  return curve;
}

/// Fraction of the structure receiving at least `threshold` Gy.
template <typename D, typename M>
double v_at(const Eigen::DenseBase<D>& dose, const Eigen::DenseBase<M>& mask, double threshold) {
  const auto v = masked_values(dose, mask);
  const auto hits = std::count_if(v.begin(), v.end(), [&](double x) { return x >= threshold; });
  return static_cast<double>(hits) / static_cast<double>(v.size());
}

template <typename D, typename M>
DoseStats d_stats(const Eigen::DenseBase<D>& dose, const Eigen::DenseBase<M>& mask) {
  const auto v = masked_values(dose, mask);
  DoseStats s;
  s.max = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  for (double x : v) sum += x;
  s.mean = sum / static_cast<double>(v.size());
  return s;
}

/// Dose to the hottest `volume_pct` percent: the ceil(v% * n)-th largest
/// masked value. The 1e-9 guard keeps exact products like 25% of 4 at 1.
template <typename D, typename M>
double d_at_volume(const Eigen::DenseBase<D>& dose, const Eigen::DenseBase<M>& mask, double volume_pct) {
  if (!(volume_pct > 0.0 && volume_pct <= 100.0)) {
    throw std::invalid_argument("d_at_volume: volume must be in (0, 100], got " + std::to_string(volume_pct));
  }
  auto v = masked_values(dose, mask);
  const auto n = static_cast<std::ptrdiff_t>(v.size());
  auto k = static_cast<std::ptrdiff_t>(std::ceil(volume_pct * static_cast<double>(n) / 100.0 - 1e-9));
  k = std::clamp<std::ptrdiff_t>(k, 1, n);
  std::nth_element(v.begin(), v.begin() + (k - 1), v.end(), std::greater<>());
  return v[static_cast<std::size_t>(k - 1)];
}

/// Paddick conformity index with the prescription isodose at
/// `isodose_pct` percent of d_p. Returns 0 when no voxel reaches it.
template <typename D, typename M>
double ci_paddick(const Eigen::DenseBase<D>& dose, const Eigen::DenseBase<M>& ptv, double d_p,
                  double isodose_pct = 100.0) {
  detail::check_dims(dose, ptv);
  const double level = d_p * isodose_pct / 100.0;
  double tv = 0, piv = 0, overlap = 0;
  for (Eigen::Index r = 0; r < dose.rows(); ++r) {
    for (Eigen::Index c = 0; c < dose.cols(); ++c) {
      const bool in_t = ptv(r, c) != 0;
      const bool in_p = static_cast<double>(dose(r, c)) >= level;
      tv += in_t;
      piv += in_p;
      overlap += in_t && in_p;
    }
  }
  if (tv == 0) throw EmptyMaskError("ci_paddick: PTV mask is empty");
  if (piv == 0) return 0.0;
  return overlap * overlap / (tv * piv);
}

template <typename D, typename M>
double hi(const Eigen::DenseBase<D>& dose, const Eigen::DenseBase<M>& ptv, double d_p,
          HiFormula formula = HiFormula::MaxOverPrescription) {
  if (formula == HiFormula::MaxOverPrescription) return d_stats(dose, ptv).max / d_p;
  const double d50 = d_at_volume(dose, ptv, 50.0);
  if (d50 == 0.0) throw std::domain_error("hi: D50 is zero");
  return (d_at_volume(dose, ptv, 2.0) - d_at_volume(dose, ptv, 98.0)) / d50;
}

/// Mean absolute difference between paired series.
inline double mad(const std::vector<double>& pred, const std::vector<double>& gt) {
  if (pred.size() != gt.size() || pred.empty()) {
    throw std::invalid_argument("mad: series must have equal nonzero length (" + std::to_string(pred.size()) +
                                " vs " + std::to_string(gt.size()) + ")");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pred[i] - gt[i]);
  return s / static_cast<double>(pred.size());
}

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  double dof = 0.0;
  bool degenerate = false;
};

/// Two-tailed paired t-test on d_i = a_i - b_i with n - 1 degrees of freedom.
TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b);

/// Two-tailed tail probability P(|T| >= |t|) for Student's t.
double student_t_two_tailed(double t, double dof);

}  // namespace rtp::dosimetry
