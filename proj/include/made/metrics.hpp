#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace made::metrics {

// Closed interval in seconds.
struct Interval {
  double start = 0;
  double end = 0;
  double length() const { return end - start; }
};

// |a n b| / |a u b|; 0 for disjoint intervals.
double iou_1d(Interval a, Interval b);

inline constexpr double kMomentIouThreshold = 0.7;

struct RankedEntry {
  std::string track_id;
  double p_s = 0;
  std::optional<Interval> moment;
};

// One query's ranking over the candidate tracks.
struct RankedPrediction {
  std::string query_id;
  std::vector<RankedEntry> ranked;

  // Position of a track in the ranking, if present.
  std::optional<std::size_t> rank_of(const std::string& track_id) const;
  const RankedEntry* find(const std::string& track_id) const;
};

struct GroundTruth {
  std::string track_id;
  Interval moment;
};

using GroundTruthMap = std::map<std::string, GroundTruth>;

// Sorts by descending p_s, ties by ascending track id.
void sort_ranking(std::vector<RankedEntry>& entries);

// Mean IoU of per-query predicted moments against ground truth.
double miou(const std::map<std::string, Interval>& preds,
            const std::map<std::string, Interval>& gts);

// Percentage of queries whose ground-truth track ranks within the top k.
double recall_at_k(const std::vector<RankedPrediction>& rankings, const GroundTruthMap& gts,
                   std::size_t k);

// One (track, moment) per top-ranked track, in rank order; truncated to the
// ranking length when k exceeds it.
std::vector<std::pair<std::string, Interval>> topk_postprocess(
    const RankedPrediction& ranking, std::size_t k);

// Percentage of queries whose ground-truth track ranks within the top k and
// whose moment on that track has IoU strictly above the threshold.
double moment_recall_at_k(const std::vector<RankedPrediction>& rankings,
                          const GroundTruthMap& gts, std::size_t k,
                          double iou_threshold = kMomentIouThreshold);

struct QueryBreakdown {
  std::string query_id;
  std::optional<std::size_t> gt_rank;  // 1-based
  double iou = 0;
};

struct EvalReport {
  std::string mode;  // "smg" or "msg"
  std::size_t queries = 0;
  double miou = 0;                       // unit fraction
  std::map<std::size_t, double> recall;  // percent, k in {1, 5, 10}
  std::map<std::size_t, double> moment_recall;  // percent, k in {1, 10, 100}
  std::vector<QueryBreakdown> per_query;

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
};

// SmG report: IoU of the moment predicted on the ground-truth track only.
EvalReport smg_report(const std::map<std::string, Interval>& preds, const GroundTruthMap& gts);

// MsG report: mIoU on the ground-truth track plus R@{1,5,10} and MoR@{1,10,100}.
EvalReport msg_report(const std::vector<RankedPrediction>& rankings, const GroundTruthMap& gts);

// Prediction file: one JSON object per line,
//   {"query_id": ..., "ranked": [[track_id, p_s, start_sec|null, end_sec|null], ...]}
nlohmann::json prediction_to_json(const RankedPrediction& p);
RankedPrediction prediction_from_json(const nlohmann::json& j);
void write_predictions(const std::string& path, const std::vector<RankedPrediction>& preds);
std::vector<RankedPrediction> read_predictions(const std::string& path);

}  // namespace made::metrics
