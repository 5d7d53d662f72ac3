#include "rtp/models/param_net.hpp"

#include <cmath>

namespace rtp {

ParamVector normalize_params(const ParamTable& table) {
  ParamVector v;
  for (std::size_t i = 0; i < kNumRings; ++i) {
    const auto& r = table.at(kAllStructures[i]);
    v.rings[2 * i] = r.weight / kParamScale;
    v.rings[2 * i + 1] = r.dose / kParamScale;
  }
  for (std::size_t i = 0; i < kNumOars; ++i) {
    const auto& r = table.at(kAllStructures[kNumRings + i]);
    if (!r.volume) throw ParamError(std::string(structure_name(r.structure)) + ": OAR row needs a volume");
    v.oars[3 * i] = r.weight / kParamScale;
    v.oars[3 * i + 1] = *r.volume / kParamScale;
    v.oars[3 * i + 2] = r.dose / kParamScale;
  }
  return v;
}

ParamTable denormalize_params(const ParamVector& v, std::optional<double> d_p) {
  auto pct = [&](double x) {
    const double y = x * kParamScale;
    return d_p ? std::clamp(y, 0.0, 100.0) : y;
  };
  auto gy = [&](double x) {
    const double y = x * kParamScale;
    return d_p ? std::clamp(y, 0.0, 2.0 * *d_p) : y;
  };
  ParamTable t;
  for (std::size_t i = 0; i < kNumRings; ++i) {
    t.rows.push_back({kAllStructures[i], Function::MaxDose, pct(v.rings[2 * i]), std::nullopt, gy(v.rings[2 * i + 1])});
  }
  for (std::size_t i = 0; i < kNumOars; ++i) {
    t.rows.push_back({kAllStructures[kNumRings + i], Function::MaxDVH, pct(v.oars[3 * i]), pct(v.oars[3 * i + 1]),
                      gy(v.oars[3 * i + 2])});
  }
  return t;
}

FieldErrors mean_abs_field_errors(const std::vector<ParamTable>& pred, const std::vector<ParamTable>& gt) {
  if (pred.size() != gt.size() || pred.empty()) {
    throw std::invalid_argument("field errors: need equally many (>0) predicted and GT tables");
  }
  FieldErrors e;
  double nw = 0, nv = 0, nd = 0;
  for (std::size_t c = 0; c < pred.size(); ++c) {
    for (Structure s : kAllStructures) {
      const auto& p = pred[c].at(s);
      const auto& g = gt[c].at(s);
      e.weight += std::abs(p.weight - g.weight), nw += 1;
      e.dose += std::abs(p.dose - g.dose), nd += 1;
      if (g.volume) e.volume += std::abs(p.volume.value_or(0.0) - *g.volume), nv += 1;
    }
  }
  e.weight /= nw, e.volume /= nv, e.dose /= nd;
  return e;
}

}  // namespace rtp
