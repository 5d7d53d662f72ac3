#include "rtp/dosimetry/dosimetry.hpp"

#include <boost/math/distributions/students_t.hpp>

namespace rtp::dosimetry {

double student_t_two_tailed(double t, double dof) {
  if (!(dof > 0.0)) throw std::invalid_argument("student_t_two_tailed: dof must be positive");
  if (std::isinf(t)) return 0.0;
  const boost::math::students_t dist(dof);
  return 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
}

TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("paired_t_test: series lengths differ (" + std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()) + ")");
  }
  if (a.size() < 2) throw std::invalid_argument("paired_t_test: need at least two pairs");
  const auto n = static_cast<double>(a.size());
  double mean = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) mean += a[i] - b[i];
  mean /= n;
  double ss = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i] - mean;
    ss += d * d;
  }
  TTestResult r;
  r.dof = n - 1.0;
  if (ss == 0.0) {
    r.degenerate = true;
    r.p = 1.0;
    return r;
  }
  const double sd = std::sqrt(ss / (n - 1.0));
  r.t = mean / (sd / std::sqrt(n));
  r.p = student_t_two_tailed(r.t, r.dof);
  return r;
}

}  // namespace rtp::dosimetry
