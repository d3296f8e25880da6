#include "chag/cost/calibration.hpp"

#include <cmath>

#include "chag/model/synthetic.hpp"
#include "chag/parallel/strategies.hpp"

namespace chag {

double CalibrationPoint::worst_activation_error() const {
  double worst = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i)
    worst = std::max(worst, std::abs(predicted[i] / measured[i] - 1.0));
  return worst;
}

std::vector<CalibrationCase> desk_calibration_cases() {
  struct Row {
    const char* name;
    StrategyKind kind;
    std::size_t tp, channels;
    AggVariant variant;
    std::size_t max_group;
    AggLayerKind layer;
    bool split;
    std::size_t batch, image, embed, depth;
  };
  using K = StrategyKind;
  using V = AggVariant;
  using L = AggLayerKind;
  const Row rows[] = {
      {"serial-c8-full", K::serial, 1, 8, V::full_cross, 0, L::linear, false, 2, 8, 8, 1},
      {"serial-c16-single", K::serial, 1, 16, V::single_query, 0, L::linear, false, 1, 8, 8, 2},
      {"tp2-c8-full", K::tp_only, 2, 8, V::full_cross, 0, L::linear, false, 2, 8, 8, 1},
      {"tp4-c16-single", K::tp_only, 4, 16, V::single_query, 0, L::linear, false, 1, 8, 16, 1},
      {"dist2-c8-full", K::dist_token, 2, 8, V::full_cross, 0, L::linear, false, 2, 8, 8, 1},
      {"dist4-c16-single", K::dist_token, 4, 16, V::single_query, 0, L::linear, false, 1, 16, 8, 1},
      {"dchagL2-c16-g4", K::dchag, 2, 16, V::full_cross, 4, L::linear, false, 2, 8, 8, 1},
      {"dchagC2-c16-g4", K::dchag, 2, 16, V::full_cross, 4, L::cross_attention, false, 1, 8, 8, 1},
      {"dchagC4-c32-g2-split", K::dchag, 4, 32, V::full_cross, 2, L::cross_attention, true, 1, 8, 8, 1},
      {"dchagL4-c16-split", K::dchag, 4, 16, V::single_query, 0, L::linear, true, 2, 8, 16, 2},
      {"tp2-c32-full", K::tp_only, 2, 32, V::full_cross, 0, L::linear, false, 1, 8, 8, 1},
      {"serial-c64-full", K::serial, 1, 64, V::full_cross, 0, L::linear, false, 1, 8, 8, 1},
  };
  std::vector<CalibrationCase> out;
  for (const auto& r : rows) {
    CalibrationCase c;
    c.name = r.name;
    c.model.channels = r.channels;
    c.model.agg_variant = r.variant;
    c.model.image_h = c.model.image_w = r.image;
    c.model.patch = 4;
    c.model.embed = r.embed;
    c.model.depth = r.depth;
    c.model.heads = 4;
    c.model.decoder_dim = 8;
    c.model.decoder_heads = 2;
    c.strategy.kind = r.kind;
    c.strategy.tp = r.tp;
    c.strategy.tree_max_group = r.max_group;
    c.strategy.agg_layer_kind = r.layer;
    c.strategy.final_layer_tp_split = r.split;
    c.batch = r.batch;
    out.push_back(c);
  }
  return out;
}

CalibrationPoint calibrate(const CalibrationCase& c, std::uint64_t seed) {
  CalibrationPoint p;
  p.config = c;
  ParallelConfig pc;
  pc.tp = c.strategy.tp;
  ParamStore master = init_parameters(strategy_architecture(c.model, c.strategy), seed);
  SyntheticDataset data(c.model, seed + 1);
  StepOutput step = run_step(c.strategy, pc, c.model, master, {data.batch(0, c.batch)});
  p.report = estimate(c.model, c.strategy, pc, HardwareModel{}, sizeof(double), c.batch);
  for (std::size_t i = 0; i < kComponents.size(); ++i) {
    const auto tag = to_string(kComponents[i]);
    p.predicted[i] = p.report.components[i].activation_bytes;
    p.measured[i] = static_cast<double>(step.stats.at(0).alloc.tag_peak(tag));
    p.predicted_flops[i] = p.report.components[i].forward_flops;
    p.measured_flops[i] = static_cast<double>(step.stats.at(0).tag_flops(tag));
  }
  p.ledger = std::move(step.ledger);
  return p;
}

QuadraticFit fit_quadratic(const std::vector<double>& xs, const std::vector<double>& ys) {
  double m[3][4] = {};
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double basis[3] = {1.0, xs[i], xs[i] * xs[i]};
    for (int r = 0; r < 3; ++r) {
      for (int k = 0; k < 3; ++k) m[r][k] += basis[r] * basis[k];
      m[r][3] += basis[r] * ys[i];
    }
  }
  for (int p = 0; p < 3; ++p)
    for (int r = p + 1; r < 3; ++r) {
      const double f = m[r][p] / m[p][p];
      for (int k = p; k < 4; ++k) m[r][k] -= f * m[p][k];
    }
  double x[3] = {};
  for (int r = 2; r >= 0; --r) {
    double s = m[r][3];
    for (int k = r + 1; k < 3; ++k) s -= m[r][k] * x[k];
    x[r] = s / m[r][r];
  }
  return {x[0], x[1], x[2]};
}

}  // namespace chag
