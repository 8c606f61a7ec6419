#include "made/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace made::loss {

double giou_1d(Span1d a, Span1d b) {
  if (!(a.width > 0) || !(b.width > 0)) {
    throw ContractError("giou_1d: interval widths must be positive");
  }
  const double inter = std::max(0.0, std::min(a.end(), b.end()) - std::max(a.start(), b.start()));
  const double uni = a.width + b.width - inter;
  const double hull = std::max(a.end(), b.end()) - std::min(a.start(), b.start());
  return inter / uni - (hull - uni) / hull;
}

std::vector<std::uint8_t> same_track_mask(std::span<const std::string> tracks,
                                          DuplicatePolicy policy) {
  const std::size_t n = tracks.size();
  std::vector<std::uint8_t> allowed(n * n, 1);
  if (policy == DuplicatePolicy::none) return allowed;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i != j && tracks[i] == tracks[j]) allowed[i * n + j] = 0;
    }
  }
  return allowed;
}

namespace {

template <typename T>
Var<T> symmetric_ce(const Var<T>& logits, std::span<const std::uint8_t> allowed) {
  if (logits.rows() == 0) throw ContractError("info_nce: empty batch");
  Var<T> rows = ad::diag_cross_entropy(logits, 1, allowed);
  Var<T> cols = ad::diag_cross_entropy(logits, 0, allowed);
  return ad::scale(ad::add(rows, cols), T(0.5));
}

}  // namespace

template <typename T>
Var<T> info_nce(const Var<T>& sim, const Var<T>& log_scale,
                std::span<const std::uint8_t> allowed) {
  Graph<T>& g = sim.graph();
  Var<T> scale = ad::exp(log_scale);
  if (scale.value()[0] > T(kMaxLogitScale)) {
    scale = g.constant(Tensor<T>::scalar(T(kMaxLogitScale)));
  }
  return symmetric_ce(ad::mul_scalar(sim, scale), allowed);
}

template <typename T>
Var<T> info_nce(const Var<T>& sim, T tau, std::span<const std::uint8_t> allowed) {
  if (!(tau > 0)) throw ContractError("info_nce: temperature must be positive");
  return symmetric_ce(ad::scale(sim, T(1) / tau), allowed);
}

template <typename T>
Var<T> matching_loss(const Var<T>& sim0, const Var<T>& sim1, LossMode mode,
                     const Var<T>& log_scale, std::span<const std::uint8_t> allowed) {
  if (sim0.shape() != sim1.shape()) {
    throw DimensionError("matching_loss: similarity matrices differ in shape");
  }
  if (mode == LossMode::single) {
    return info_nce(ad::add(sim0, sim1), log_scale, allowed);
  }
  return ad::add(info_nce(sim0, log_scale, allowed), info_nce(sim1, log_scale, allowed));
}

template <typename T>
Var<T> matching_loss(const SimilarityOutput<T>& sims, const ModelConfig& cfg,
                     const Var<T>& log_scale, std::span<const std::uint8_t> allowed) {
  switch (cfg.matching_mode) {
    case MatchingMode::both:
      return matching_loss(sims.sim0, sims.sim1, cfg.loss_mode, log_scale, allowed);
    case MatchingMode::mean_only:
      return info_nce(sims.sim0, log_scale, allowed);
    case MatchingMode::xpool_only:
      return info_nce(sims.sim1, log_scale, allowed);
    case MatchingMode::feature_add:
      return info_nce(sims.added, log_scale, allowed);
  }
  throw ContractError("matching_loss: unknown matching mode");
}

template <typename T>
Var<T> giou_1d(const Var<T>& pc, const Var<T>& pw, const Var<T>& yc, const Var<T>& yw) {
  Var<T> ps = ad::sub(pc, ad::scale(pw, T(0.5)));
  Var<T> pe = ad::add(pc, ad::scale(pw, T(0.5)));
  Var<T> ys = ad::sub(yc, ad::scale(yw, T(0.5)));
  Var<T> ye = ad::add(yc, ad::scale(yw, T(0.5)));
  Var<T> inter = ad::relu(ad::sub(ad::minimum(pe, ye), ad::maximum(ps, ys)));
  Var<T> uni = ad::sub(ad::add(pw, yw), inter);
  Var<T> hull = ad::sub(ad::maximum(pe, ye), ad::minimum(ps, ys));
  return ad::sub(ad::div(inter, uni), ad::div(ad::sub(hull, uni), hull));
}

namespace {

template <typename T>
Var<T> per_item_detection(const Var<T>& pc, const Var<T>& pw, const Tensor<T>& target,
                          DetectionWeights w) {
  Graph<T>& g = pc.graph();
  const std::size_t n = target.rows();
  if (target.cols() != 2 || pc.rows() != n || pw.rows() != n) {
    throw DimensionError("detection_loss: prediction/target shapes differ");
  }
  Tensor<T> yc(Shape{n, 1});
  Tensor<T> yw(Shape{n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    yc[i] = target(i, 0);
    yw[i] = target(i, 1);
  }
  Var<T> ycv = g.constant(std::move(yc));
  Var<T> ywv = g.constant(std::move(yw));
  Var<T> l1 = ad::add(ad::abs(ad::sub(pc, ycv)), ad::abs(ad::sub(pw, ywv)));
  Var<T> giou_term = ad::add_scalar(ad::scale(giou_1d(pc, pw, ycv, ywv), T(-1)), T(1));
  return ad::add(ad::scale(l1, T(w.l1)), ad::scale(giou_term, T(w.giou)));
}

}  // namespace

template <typename T>
Var<T> detection_loss(const MomentPrediction<T>& pred, const Tensor<T>& target,
                      DetectionWeights w) {
  return ad::mean(per_item_detection(pred.center, pred.width, target, w));
}

template <typename T>
Var<T> detection_objective(const DetectionOutput<T>& det, const Tensor<T>& target,
                           DetectionWeights w) {
  if (det.layers.empty()) throw ContractError("detection_objective: no predictions");
  const std::size_t nq = det.query_tokens;
  const std::size_t n = target.rows();
  if (nq == 1) {
    Var<T> total = detection_loss(det.layers[0], target, w);
    for (std::size_t i = 1; i < det.layers.size(); ++i) {
      total = ad::add(total, detection_loss(det.layers[i], target, w));
    }
    return total;
  }
  Graph<T>& g = det.layers.back().center.graph();
  // Best token per item from the final layer's losses.
  Tensor<T> tiled(Shape{n * nq, 2});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t t = 0; t < nq; ++t) {
      tiled(b * nq + t, 0) = target(b, 0);
      tiled(b * nq + t, 1) = target(b, 1);
    }
  }
  const MomentPrediction<T>& last = det.layers.back();
  std::vector<std::size_t> best(n, 0);
  {
    Graph<T> probe(ad::GraphOptions{false, false, nullptr});
    Var<T> per = per_item_detection(probe.constant(last.center.value()),
                                    probe.constant(last.width.value()), tiled, w);
    for (std::size_t b = 0; b < n; ++b) {
      T lo = std::numeric_limits<T>::infinity();
      for (std::size_t t = 0; t < nq; ++t) {
        const T v = per.value()[b * nq + t];
        if (v < lo) {
          lo = v;
          best[b] = b * nq + t;
        }
      }
    }
  }
  const std::span<const std::size_t> rows(best);
  Var<T> total;
  for (const auto& layer : det.layers) {
    MomentPrediction<T> chosen{ad::gather_rows(layer.center, rows),
                               ad::gather_rows(layer.width, rows)};
    Var<T> l = detection_loss(chosen, target, w);
    total = total.valid() ? ad::add(total, l) : l;
  }
  // Binary cross entropy on the confidence head.
  Tensor<T> labels(Shape{n * nq, 1});
  for (std::size_t r : best) labels[r] = T(1);
  const T eps = T(1e-6);
  Var<T> p = ad::add_scalar(ad::scale(det.confidence, T(1) - 2 * eps), eps);
  Var<T> y = g.constant(labels);
  Tensor<T> ones(Shape{n * nq, 1}, T(1));
  Var<T> one = g.constant(ones);
  Var<T> bce = ad::add(ad::mul(y, ad::log(p)),
                       ad::mul(ad::sub(one, y), ad::log(ad::sub(one, p))));
  return ad::add(total, ad::scale(ad::mean(bce), T(-1)));
}

template <typename T>
Var<T> total_loss(const Var<T>& matching, const Var<T>& detection) {
  if (!matching.value().all_finite() || !detection.value().all_finite()) {
    throw NumericError("total_loss: non-finite component");
  }
  return ad::add(matching, detection);
}

#define MADE_LOSS_INSTANTIATE(T)                                                      \
  template Var<T> info_nce(const Var<T>&, const Var<T>&, std::span<const std::uint8_t>); \
  template Var<T> info_nce(const Var<T>&, T, std::span<const std::uint8_t>);          \
  template Var<T> matching_loss(const Var<T>&, const Var<T>&, LossMode, const Var<T>&, \
                                std::span<const std::uint8_t>);                       \
  template Var<T> matching_loss(const SimilarityOutput<T>&, const ModelConfig&,       \
                                const Var<T>&, std::span<const std::uint8_t>);        \
  template Var<T> giou_1d(const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&); \
  template Var<T> detection_loss(const MomentPrediction<T>&, const Tensor<T>&,        \
                                 DetectionWeights);                                   \
  template Var<T> detection_objective(const DetectionOutput<T>&, const Tensor<T>&,    \
                                      DetectionWeights);                              \
  template Var<T> total_loss(const Var<T>&, const Var<T>&);

MADE_LOSS_INSTANTIATE(float)
MADE_LOSS_INSTANTIATE(double)

#undef MADE_LOSS_INSTANTIATE

}  // namespace made::loss
