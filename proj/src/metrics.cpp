#include "made/metrics.hpp"

#include <algorithm>
#include <fstream>

#include "made/error.hpp"

namespace made::metrics {

double iou_1d(Interval a, Interval b) {
  if (a.end < a.start || b.end < b.start) {
    throw ContractError("iou_1d: interval end precedes start");
  }
  const double inter = std::max(0.0, std::min(a.end, b.end) - std::max(a.start, b.start));
  const double uni = a.length() + b.length() - inter;
  if (!(uni > 0)) return 0.0;
  return inter / uni;
}

std::optional<std::size_t> RankedPrediction::rank_of(const std::string& track_id) const {
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    if (ranked[i].track_id == track_id) return i;
  }
  return std::nullopt;
}

const RankedEntry* RankedPrediction::find(const std::string& track_id) const {
  for (const auto& e : ranked) {
    if (e.track_id == track_id) return &e;
  }
  return nullptr;
}

void sort_ranking(std::vector<RankedEntry>& entries) {
  std::sort(entries.begin(), entries.end(), [](const RankedEntry& a, const RankedEntry& b) {
    if (a.p_s != b.p_s) return a.p_s > b.p_s;
    return a.track_id < b.track_id;
  });
}

double miou(const std::map<std::string, Interval>& preds,
            const std::map<std::string, Interval>& gts) {
  if (gts.empty()) throw ContractError("miou: no queries");
  double total = 0;
  for (const auto& [qid, gt] : gts) {
    auto it = preds.find(qid);
    if (it == preds.end()) throw ContractError("miou: missing prediction for query " + qid);
    total += iou_1d(it->second, gt);
  }
  return total / static_cast<double>(gts.size());
}

namespace {

const GroundTruth& gt_for(const GroundTruthMap& gts, const std::string& qid) {
  auto it = gts.find(qid);
  if (it == gts.end()) throw ContractError("no ground truth for query " + qid);
  return it->second;
}

std::size_t gt_rank(const RankedPrediction& p, const GroundTruth& gt) {
  auto r = p.rank_of(gt.track_id);
  if (!r) {
    throw ContractError("ground-truth track " + gt.track_id +
                        " absent from the candidates of query " + p.query_id);
  }
  return *r;
}

bool moment_hit(const RankedPrediction& p, const GroundTruth& gt, double threshold) {
  const RankedEntry* e = p.find(gt.track_id);
  if (e == nullptr || !e->moment) {
    throw ContractError("query " + p.query_id + " has no moment on its ground-truth track");
  }
  return iou_1d(*e->moment, gt.moment) > threshold;
}

}  // namespace

double recall_at_k(const std::vector<RankedPrediction>& rankings, const GroundTruthMap& gts,
                   std::size_t k) {
  if (k < 1) throw ContractError("recall_at_k: k must be >= 1");
  if (rankings.empty()) throw ContractError("recall_at_k: no queries");
  std::size_t hits = 0;
  for (const auto& p : rankings) {
    if (gt_rank(p, gt_for(gts, p.query_id)) < k) ++hits;
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(rankings.size());
}

std::vector<std::pair<std::string, Interval>> topk_postprocess(const RankedPrediction& ranking,
                                                               std::size_t k) {
  std::vector<std::pair<std::string, Interval>> out;
  const std::size_t n = std::min(k, ranking.ranked.size());
  for (std::size_t i = 0; i < n; ++i) {
    const RankedEntry& e = ranking.ranked[i];
    if (!e.moment) {
      throw ContractError("topk_postprocess: track " + e.track_id + " has no detected moment");
    }
    out.emplace_back(e.track_id, *e.moment);
  }
  return out;
}

double moment_recall_at_k(const std::vector<RankedPrediction>& rankings,
                          const GroundTruthMap& gts, std::size_t k, double iou_threshold) {
  if (k < 1) throw ContractError("moment_recall_at_k: k must be >= 1");
  if (rankings.empty()) throw ContractError("moment_recall_at_k: no queries");
  std::size_t hits = 0;
  for (const auto& p : rankings) {
    const GroundTruth& gt = gt_for(gts, p.query_id);
    if (gt_rank(p, gt) < k && moment_hit(p, gt, iou_threshold)) ++hits;
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(rankings.size());
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["mode"] = mode;
  j["queries"] = queries;
  j["mIoU"] = miou;
  for (const auto& [k, v] : recall) j["R@" + std::to_string(k)] = v;
  for (const auto& [k, v] : moment_recall) j["MoR@" + std::to_string(k)] = v;
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& q : per_query) {
    nlohmann::json r{{"query_id", q.query_id}, {"iou", q.iou}};
    r["gt_rank"] = q.gt_rank ? nlohmann::json(*q.gt_rank) : nlohmann::json(nullptr);
    rows.push_back(std::move(r));
  }
  j["per_query"] = std::move(rows);
  return j;
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  r.mode = j.at("mode").get<std::string>();
  r.queries = j.at("queries").get<std::size_t>();
  r.miou = j.at("mIoU").get<double>();
  for (std::size_t k : {1, 5, 10}) {
    const std::string key = "R@" + std::to_string(k);
    if (j.contains(key)) r.recall[k] = j.at(key).get<double>();
  }
  for (std::size_t k : {1, 10, 100}) {
    const std::string key = "MoR@" + std::to_string(k);
    if (j.contains(key)) r.moment_recall[k] = j.at(key).get<double>();
  }
  for (const auto& row : j.value("per_query", nlohmann::json::array())) {
    QueryBreakdown q;
    q.query_id = row.at("query_id").get<std::string>();
    q.iou = row.at("iou").get<double>();
    if (!row.at("gt_rank").is_null()) q.gt_rank = row.at("gt_rank").get<std::size_t>();
    r.per_query.push_back(q);
  }
  return r;
}

EvalReport smg_report(const std::map<std::string, Interval>& preds, const GroundTruthMap& gts) {
  EvalReport r;
  r.mode = "smg";
  std::map<std::string, Interval> gt_moments;
  for (const auto& [qid, gt] : gts) gt_moments[qid] = gt.moment;
  r.miou = miou(preds, gt_moments);
  r.queries = gts.size();
  for (const auto& [qid, gt] : gts) {
    r.per_query.push_back({qid, std::nullopt, iou_1d(preds.at(qid), gt.moment)});
  }
  return r;
}

EvalReport msg_report(const std::vector<RankedPrediction>& rankings, const GroundTruthMap& gts) {
  EvalReport r;
  r.mode = "msg";
  r.queries = rankings.size();
  std::map<std::string, Interval> preds;
  std::map<std::string, Interval> gt_moments;
  for (const auto& p : rankings) {
    const GroundTruth& gt = gt_for(gts, p.query_id);
    const RankedEntry* e = p.find(gt.track_id);
    if (e == nullptr || !e->moment) {
      throw ContractError("query " + p.query_id + " has no moment on its ground-truth track");
    }
    preds[p.query_id] = *e->moment;
    gt_moments[p.query_id] = gt.moment;
    r.per_query.push_back({p.query_id, gt_rank(p, gt) + 1, iou_1d(*e->moment, gt.moment)});
  }
  r.miou = miou(preds, gt_moments);
  for (std::size_t k : {1, 5, 10}) r.recall[k] = recall_at_k(rankings, gts, k);
  for (std::size_t k : {1, 10, 100}) r.moment_recall[k] = moment_recall_at_k(rankings, gts, k);
  return r;
}

nlohmann::json prediction_to_json(const RankedPrediction& p) {
  nlohmann::json ranked = nlohmann::json::array();
  for (const auto& e : p.ranked) {
    nlohmann::json row = nlohmann::json::array({e.track_id, e.p_s});
    if (e.moment) {
      row.push_back(e.moment->start);
      row.push_back(e.moment->end);
    } else {
      row.push_back(nullptr);
      row.push_back(nullptr);
    }
    ranked.push_back(std::move(row));
  }
  return nlohmann::json{{"query_id", p.query_id}, {"ranked", std::move(ranked)}};
}

RankedPrediction prediction_from_json(const nlohmann::json& j) {
  RankedPrediction p;
  try {
    p.query_id = j.at("query_id").get<std::string>();
    for (const auto& row : j.at("ranked")) {
      if (!row.is_array() || row.size() != 4) {
        throw DataError("prediction record: ranked rows must have 4 fields");
      }
      RankedEntry e;
      e.track_id = row[0].get<std::string>();
      e.p_s = row[1].get<double>();
      if (!row[2].is_null()) e.moment = Interval{row[2].get<double>(), row[3].get<double>()};
      p.ranked.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("prediction record: ") + e.what());
  }
  return p;
}

void write_predictions(const std::string& path, const std::vector<RankedPrediction>& preds) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write prediction file " + path);
  for (const auto& p : preds) out << prediction_to_json(p).dump() << '\n';
}

std::vector<RankedPrediction> read_predictions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read prediction file " + path);
  std::vector<RankedPrediction> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(prediction_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError("prediction file " + path + ": " + e.what());
    }
  }
  return out;
}

}  // namespace made::metrics
