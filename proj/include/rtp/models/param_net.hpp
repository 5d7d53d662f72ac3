#pragma once

// Stage-two network: integrated features from image + predicted dose, split
// per organ by mask multiplication, refined within each organ by attention
// over a coarse grid of sub-regions (intra) and across OARs by a two-layer
// GCN with learned edges (inter), then regressed to the parameter table.

#include "rtp/autodiff/attention.hpp"
#include "rtp/autodiff/nn.hpp"
#include "rtp/phantom/params.hpp"
#include "rtp/phantom/raster.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace rtp {

/// Normalized targets are natural units divided by this (%, %, Gy).
inline constexpr double kParamScale = 100.0;
inline constexpr Index kRingOutputs = 2 * static_cast<Index>(kNumRings);  // (weight, dose) per ring
inline constexpr Index kOarOutputs = 3;                                    // (weight, volume, dose)

struct ParamNetConfig {
  Index in_channels = 7;
  Index features = 16;  // integrated-feature channels
  Index grid = 8;       // intra-RM token grid is grid x grid
  Index ptv_hidden = 64;
  Index gcn_hidden = 64;
  bool intra = true;  // false: masked mean-pool only (ablation B)
  bool inter = true;  // false: identity instead of the GCN (ablation C)

  void validate() const {
    if (in_channels <= 0 || features <= 0 || grid <= 0 || ptv_hidden <= 0 || gcn_hidden <= 0) {
      throw std::invalid_argument("param net: sizes must be positive");
    }
  }
};

/// Normalized parameter vector in table order: rings as (weight, dose),
/// OARs as (weight, volume, dose).
struct ParamVector {
  std::array<double, kRingOutputs> rings{};
  std::array<double, kNumOars * kOarOutputs> oars{};

  bool operator==(const ParamVector&) const = default;
};

ParamVector normalize_params(const ParamTable& table);

/// Natural-unit table. With `d_p` set, weight and volume are clamped to
/// [0, 100] and dose to [0, 2 d_p] (reporting only; losses never clamp).
ParamTable denormalize_params(const ParamVector& v, std::optional<double> d_p = std::nullopt);

/// Mean |pred - gt| over every entry of a field class across all cases,
/// in natural units: weight %, volume % (OARs only), dose Gy.
struct FieldErrors {
  double weight = 0, volume = 0, dose = 0;
};
FieldErrors mean_abs_field_errors(const std::vector<ParamTable>& pred, const std::vector<ParamTable>& gt);

/// Coarse grid over an organ's bounding box. Row t of `pool` averages the
/// organ pixels falling in cell t; rows of empty cells are zero.
template <typename Scalar>
struct OrganGrid {
  Tensor<Scalar> pool;      // [g*g, H*W]
  Tensor<Scalar> mean_row;  // [1, g*g], 1/occupied on occupied cells
  Tensor<Scalar> pixel_mean_row;  // [1, H*W], 1/|mask| on mask pixels
  Tensor<Scalar> mask;            // [H, W] of 0/1
  ops::TokenMask occupied;
  Index n_occupied = 0;
};

class EmptyOrganError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename Scalar>
OrganGrid<Scalar> organ_grid(const Mask& m, Index g) {
  const Index h = m.rows(), w = m.cols();
  Index r0 = h, r1 = -1, c0 = w, c1 = -1, count = 0;
  for (Index r = 0; r < h; ++r) {
    for (Index c = 0; c < w; ++c) {
      if (!m(r, c)) continue;
      r0 = std::min(r0, r), r1 = std::max(r1, r);
      c0 = std::min(c0, c), c1 = std::max(c1, c);
      ++count;
    }
  }
  if (count == 0) throw EmptyOrganError("organ mask is empty");
  OrganGrid<Scalar> out;
  out.pool = Tensor<Scalar>({g * g, h * w});
  out.mean_row = Tensor<Scalar>({1, g * g});
  out.pixel_mean_row = Tensor<Scalar>({1, h * w});
  out.mask = Tensor<Scalar>({h, w});
  out.occupied.assign(static_cast<std::size_t>(g * g), 0);
  std::vector<Index> cell_count(static_cast<std::size_t>(g * g), 0);
  const Index bh = r1 - r0 + 1, bw = c1 - c0 + 1;
  auto cell_of = [&](Index r, Index c) { return ((r - r0) * g / bh) * g + (c - c0) * g / bw; };
  for (Index r = r0; r <= r1; ++r) {
    for (Index c = c0; c <= c1; ++c) {
      if (m(r, c)) ++cell_count[static_cast<std::size_t>(cell_of(r, c))];
    }
  }
  auto pool = out.pool.matrix(g * g, h * w);
  for (Index r = r0; r <= r1; ++r) {
    for (Index c = c0; c <= c1; ++c) {
      if (!m(r, c)) continue;
      const Index t = cell_of(r, c);
      pool(t, r * w + c) = Scalar(1) / static_cast<Scalar>(cell_count[static_cast<std::size_t>(t)]);
      out.mask.values()[r * w + c] = Scalar(1);
      out.pixel_mean_row.values()[r * w + c] = Scalar(1) / static_cast<Scalar>(count);
    }
  }
  for (Index t = 0; t < g * g; ++t) {
    if (cell_count[static_cast<std::size_t>(t)] > 0) {
      out.occupied[static_cast<std::size_t>(t)] = 1;
      ++out.n_occupied;
    }
  }
  for (Index t = 0; t < g * g; ++t) {
    if (out.occupied[static_cast<std::size_t>(t)]) out.mean_row.values()[t] = Scalar(1) / static_cast<Scalar>(out.n_occupied);
  }
  return out;
}

/// Per-channel multiply of a [C, H, W] feature map by an [H, W] 0/1 mask.
template <typename Scalar>
Tensor<Scalar> decouple(Tape<Scalar>& tape, const Tensor<Scalar>& f, const Tensor<Scalar>& mask) {
  if (f.rank() != 3 || mask.rank() != 2 || f.dim(1) != mask.dim(0) || f.dim(2) != mask.dim(1)) {
    throw ShapeError("decouple: feature " + shape_str(f.shape()) + " does not match mask " + shape_str(mask.shape()));
  }
  return ops::mul(tape, f, mask);
}

/// [C, H, W] -> [H*W, C], one row per pixel.
template <typename Scalar>
Tensor<Scalar> pixel_rows(Tape<Scalar>& tape, const Tensor<Scalar>& f) {
  return ops::transpose(tape, ops::reshape(tape, f, {f.dim(0), f.dim(1) * f.dim(2)}));
}

/// Mean of an organ feature map over the organ's pixels, [1, C].
template <typename Scalar>
Tensor<Scalar> masked_mean_pool(Tape<Scalar>& tape, const Tensor<Scalar>& f_organ, const OrganGrid<Scalar>& grid) {
  return ops::matmul(tape, grid.pixel_mean_row, pixel_rows(tape, f_organ));
}

/// Single-head self-attention among the occupied cells of one organ;
/// queries and keys are projected, values are the cell tokens themselves.
template <typename Scalar>
struct IntraRM {
  nn::Linear<Scalar> wq, wk;

  struct Output {
    Tensor<Scalar> tokens;    // [g*g, C] pooled cell tokens
    Tensor<Scalar> enhanced;  // tokens + attention
    Tensor<Scalar> pooled;    // [1, C] mean of enhanced over occupied cells
  };

  IntraRM() = default;
  IntraRM(nn::ParameterStore<Scalar>& store, const std::string& name, Index dim, Rng& rng) {
    wq = nn::Linear<Scalar>(store, name + ".q", dim, dim, rng);
    wk = nn::Linear<Scalar>(store, name + ".k", dim, dim, rng);
  }

  Output operator()(Tape<Scalar>& tape, const Tensor<Scalar>& f_organ, const OrganGrid<Scalar>& grid) const {
    Output o;
    o.tokens = ops::matmul(tape, grid.pool, pixel_rows(tape, f_organ));
    auto a = ops::attention(tape, wq(tape, o.tokens), wk(tape, o.tokens), o.tokens, 1, &grid.occupied);
    o.enhanced = ops::add(tape, o.tokens, a);
    o.pooled = ops::matmul(tape, grid.mean_row, o.enhanced);
    return o;
  }

  /// Attention matrix for given tokens, without recording.
  RowMatrix<Scalar> weights(const Tensor<Scalar>& tokens, const OrganGrid<Scalar>& grid) const {
    Tape<Scalar> tape = Tape<Scalar>::inference();
    return ops::attention_weights(wq(tape, tokens), wk(tape, tokens), 1, &grid.occupied).front();
  }
};

/// Two-layer GCN over the OAR nodes with A = 0.5 (softmax_rows(E) + I).
template <typename Scalar>
struct InterRM {
  Tensor<Scalar> edges, w1, w2;

  InterRM() = default;
  InterRM(nn::ParameterStore<Scalar>& store, const std::string& name, Index in, Index hidden, Rng& rng) {
    const Index m = static_cast<Index>(kNumOars);
    edges = store.add(name + ".edges", Tensor<Scalar>({m, m}));
    w1 = store.add(name + ".w1", nn::uniform_init<Scalar>({in, hidden}, 1.0 / std::sqrt(static_cast<double>(in)), rng));
    w2 = store.add(name + ".w2",
                   nn::uniform_init<Scalar>({hidden, hidden}, 1.0 / std::sqrt(static_cast<double>(hidden)), rng));
  }

  Tensor<Scalar> adjacency(Tape<Scalar>& tape) const {
    const Index m = static_cast<Index>(kNumOars);
    Tensor<Scalar> eye({m, m});
    eye.matrix(m, m).setIdentity();
    return ops::scale(tape, ops::add(tape, ops::softmax(tape, edges), eye), Scalar(0.5));
  }

  /// nodes: [M, in] -> [M, hidden]
  Tensor<Scalar> operator()(Tape<Scalar>& tape, const Tensor<Scalar>& nodes) const {
    if (nodes.rank() != 2 || nodes.dim(0) != static_cast<Index>(kNumOars)) {
      throw ShapeError("inter_rm: expected " + std::to_string(kNumOars) + " nodes, got " + shape_str(nodes.shape()));
    }
    auto a = adjacency(tape);
    auto h1 = ops::relu(tape, ops::matmul(tape, ops::matmul(tape, a, nodes), w1));
    return ops::matmul(tape, ops::matmul(tape, a, h1), w2);
  }
};

/// Sum over rings of |pred - gt| in normalized units, averaged over the
/// batch. pred and gt are [N, 10].
template <typename Scalar>
Tensor<Scalar> loss_reg_ptv(Tape<Scalar>& tape, const Tensor<Scalar>& pred, const Tensor<Scalar>& gt) {
  if (pred.rank() != 2 || pred.dim(1) != kRingOutputs) {
    throw ShapeError("loss_reg_ptv: expected [N,10], got " + shape_str(pred.shape()));
  }
  return ops::scale(tape, ops::l1_loss(tape, pred, gt), Scalar(1) / static_cast<Scalar>(pred.dim(0)));
}

/// As loss_reg_ptv over the OAR triples; pred and gt are [N, 4, 3].
template <typename Scalar>
Tensor<Scalar> loss_reg_oars(Tape<Scalar>& tape, const Tensor<Scalar>& pred, const Tensor<Scalar>& gt) {
  if (pred.rank() != 3 || pred.dim(1) != static_cast<Index>(kNumOars) || pred.dim(2) != kOarOutputs) {
    throw ShapeError("loss_reg_oars: expected [N,4,3], got " + shape_str(pred.shape()));
  }
  return ops::scale(tape, ops::l1_loss(tape, pred, gt), Scalar(1) / static_cast<Scalar>(pred.dim(0)));
}

template <typename Scalar>
Tensor<Scalar> loss_total(Tape<Scalar>& tape, const Tensor<Scalar>& l_ptv, const Tensor<Scalar>& l_oars, Scalar lambda) {
  if (!(lambda >= Scalar(0))) throw std::invalid_argument("loss_total: lambda must be nonnegative");
  return ops::add(tape, l_ptv, ops::scale(tape, l_oars, lambda));
}

/// Normalized GT tensors for a batch of tables: rings [N, 10], OARs [N, 4, 3].
template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> param_targets(const std::vector<const ParamTable*>& tables) {
  const Index n = static_cast<Index>(tables.size());
  Tensor<Scalar> rings({n, kRingOutputs}), oars({n, static_cast<Index>(kNumOars), kOarOutputs});
  for (Index i = 0; i < n; ++i) {
    const auto v = normalize_params(*tables[static_cast<std::size_t>(i)]);
    for (Index j = 0; j < kRingOutputs; ++j) rings.values()[i * kRingOutputs + j] = static_cast<Scalar>(v.rings[j]);
    for (std::size_t j = 0; j < v.oars.size(); ++j) {
      oars.values()[i * static_cast<Index>(v.oars.size()) + static_cast<Index>(j)] = static_cast<Scalar>(v.oars[j]);
    }
  }
  return {rings, oars};
}

template <typename Scalar>
class ParamNet {
 public:
  using T = Tensor<Scalar>;

  struct Output {
    T rings;  // [N, 10]
    T oars;   // [N, 4, 3]
  };

  /// Structures in input channel order after CT: PTV, then the OARs.
  static constexpr std::size_t kOrgans = 1 + kNumOars;

  ParamNet(const ParamNetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng = make_rng(seed, "init/param-net");
    const Index c = cfg_.features;
    extract_[0] = nn::ConvBnRelu<Scalar>(store_, "extract.0", cfg_.in_channels, c, rng);
    extract_[1] = nn::ConvBnRelu<Scalar>(store_, "extract.1", c, c, rng);
    if (cfg_.intra) intra_ = IntraRM<Scalar>(store_, "intra", c, rng);
    ptv_fc1_ = nn::Linear<Scalar>(store_, "ptv.fc1", c, cfg_.ptv_hidden, rng);
    ptv_fc2_ = nn::Linear<Scalar>(store_, "ptv.fc2", cfg_.ptv_hidden, kRingOutputs, rng);
    Index node_dim = c;
    if (cfg_.inter) {
      inter_ = InterRM<Scalar>(store_, "inter", c, cfg_.gcn_hidden, rng);
      node_dim = cfg_.gcn_hidden;
    }
    oar_fc_ = nn::Linear<Scalar>(store_, "oar.fc", node_dim, kOarOutputs, rng);
  }

  const ParamNetConfig& config() const { return cfg_; }
  nn::ParameterStore<Scalar>& params() { return store_; }
  const nn::ParameterStore<Scalar>& params() const { return store_; }
  const IntraRM<Scalar>& intra() const { return intra_; }
  const InterRM<Scalar>& inter() const { return inter_; }

  /// [N, 7, H, W] -> [N, C2, H, W], full resolution.
  T extract(Tape<Scalar>& tape, const T& x7, bool training) {
    if (x7.rank() != 4 || x7.dim(1) != cfg_.in_channels) {
      throw ShapeError("param net: expected input [N," + std::to_string(cfg_.in_channels) + ",H,W], got " +
                       shape_str(x7.shape()));
    }
    return extract_[1](tape, extract_[0](tape, x7, training), training);
  }

  /// Organ pooled vector [1, C2] for one sample's feature map.
  T organ_vector(Tape<Scalar>& tape, const T& f, const OrganGrid<Scalar>& grid) const {
    auto f_organ = decouple(tape, f, grid.mask);
    return cfg_.intra ? intra_(tape, f_organ, grid).pooled : masked_mean_pool(tape, f_organ, grid);
  }

  /// Organ masks are read from the binary input channels 1..5 (threshold
  /// 0.5); they are constants of the graph.
  Output forward(Tape<Scalar>& tape, const T& x7, bool training) {
    const T f_int = extract(tape, x7, training);
    const Index n = x7.dim(0), h = x7.dim(2), w = x7.dim(3), c = cfg_.features;
    std::vector<T> rings, oars;
    for (Index i = 0; i < n; ++i) {
      const T f = ops::reshape(tape, ops::slice(tape, f_int, 0, i, 1), {c, h, w});
      std::vector<T> vecs;
      for (std::size_t s = 0; s < kOrgans; ++s) {
        vecs.push_back(organ_vector(tape, f, organ_grid<Scalar>(input_mask(x7, i, 1 + static_cast<Index>(s)), cfg_.grid)));
      }
      rings.push_back(ptv_fc2_(tape, ops::relu(tape, ptv_fc1_(tape, vecs[0]))));
      T nodes = ops::concat(tape, std::vector<T>(vecs.begin() + 1, vecs.end()), 0);
      if (cfg_.inter) nodes = inter_(tape, nodes);
      oars.push_back(ops::reshape(tape, oar_fc_(tape, nodes), {1, static_cast<Index>(kNumOars), kOarOutputs}));
    }
    return {ops::concat(tape, rings, 0), ops::concat(tape, oars, 0)};
  }

  static Mask input_mask(const T& x7, Index sample, Index channel) {
    const Index h = x7.dim(2), w = x7.dim(3);
    const Scalar* p = x7.data() + (sample * x7.dim(1) + channel) * h * w;
    Mask m(h, w);
    for (Index k = 0; k < h * w; ++k) m.data()[k] = p[k] > Scalar(0.5) ? 1 : 0;
    return m;
  }

 private:
  ParamNetConfig cfg_;
  nn::ParameterStore<Scalar> store_;
  std::array<nn::ConvBnRelu<Scalar>, 2> extract_;
  IntraRM<Scalar> intra_;
  InterRM<Scalar> inter_;
  nn::Linear<Scalar> ptv_fc1_, ptv_fc2_, oar_fc_;
};

/// One case's prediction as a normalized vector.
template <typename Scalar>
ParamVector prediction_vector(const typename ParamNet<Scalar>::Output& out, Index sample) {
  ParamVector v;
  for (Index j = 0; j < kRingOutputs; ++j) v.rings[static_cast<std::size_t>(j)] = out.rings.values()[sample * kRingOutputs + j];
  const Index k = static_cast<Index>(v.oars.size());
  for (Index j = 0; j < k; ++j) v.oars[static_cast<std::size_t>(j)] = out.oars.values()[sample * k + j];
  return v;
}

}  // namespace rtp
