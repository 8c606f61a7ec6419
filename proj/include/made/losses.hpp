#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "made/model.hpp"

namespace made::loss {

// Normalized moment in (center, width) form.
struct Span1d {
  double center = 0;
  double width = 0;
  double start() const { return center - width / 2; }
  double end() const { return center + width / 2; }
};

// Generalized IoU of two 1-D intervals: IoU - |hull \ union| / |hull|.
double giou_1d(Span1d a, Span1d b);

enum class DuplicatePolicy { mask_same_track, none };

// Cap on the contrastive logit scale (1/tau).
inline constexpr double kMaxLogitScale = 100.0;

struct DetectionWeights {
  double l1 = 10.0;
  double giou = 1.0;
};

// allowed[i*B+j] = 0 when j != i and track j equals track i.
std::vector<std::uint8_t> same_track_mask(std::span<const std::string> tracks,
                                          DuplicatePolicy policy);

// Symmetric InfoNCE over a B x B similarity matrix whose diagonal holds the
// positives: average of the row-wise and column-wise cross entropies of
// sim * scale. `log_scale` is the learnable log of 1/tau, capped at 100.
template <typename T>
Var<T> info_nce(const Var<T>& sim, const Var<T>& log_scale,
                std::span<const std::uint8_t> allowed = {});

// Same with a fixed temperature.
template <typename T>
Var<T> info_nce(const Var<T>& sim, T tau, std::span<const std::uint8_t> allowed = {});

// Joint: info_nce(sim0) + info_nce(sim1). Single: one info_nce on sim0+sim1.
template <typename T>
Var<T> matching_loss(const Var<T>& sim0, const Var<T>& sim1, LossMode mode,
                     const Var<T>& log_scale, std::span<const std::uint8_t> allowed = {});

// Dispatches on the model's matching mode (only the similarities the mode
// produces take part).
template <typename T>
Var<T> matching_loss(const SimilarityOutput<T>& sims, const ModelConfig& cfg,
                     const Var<T>& log_scale, std::span<const std::uint8_t> allowed = {});

// Per-row gIoU between predicted and target spans (all n x 1).
template <typename T>
Var<T> giou_1d(const Var<T>& pc, const Var<T>& pw, const Var<T>& yc, const Var<T>& yw);

// Batch mean of l1 * (|pc-yc| + |pw-yw|) + giou * (1 - gIoU).
// target is n x 2 holding (y_c, y_w) rows.
template <typename T>
Var<T> detection_loss(const MomentPrediction<T>& pred, const Tensor<T>& target,
                      DetectionWeights w = {});

// Full detection objective for a decoder output: sums the per-layer losses;
// with several query tokens the loss is applied to the best-matching token
// of each item and the confidence head is trained towards that token.
template <typename T>
Var<T> detection_objective(const DetectionOutput<T>& det, const Tensor<T>& target,
                           DetectionWeights w = {});

template <typename T>
Var<T> total_loss(const Var<T>& matching, const Var<T>& detection);

}  // namespace made::loss
