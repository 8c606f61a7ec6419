#include "made/train.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numbers>
#include <set>
#include <sstream>

namespace made::train {

namespace fs = std::filesystem;

NLOHMANN_JSON_SERIALIZE_ENUM(Selection, {{Selection::miou, "miou"}, {Selection::r1, "r1"}})

}  // namespace made::train

namespace made::loss {
NLOHMANN_JSON_SERIALIZE_ENUM(DuplicatePolicy, {{DuplicatePolicy::mask_same_track, "mask_same_track"},
                                               {DuplicatePolicy::none, "none"}})
}  // namespace made::loss

namespace made::train {

// ---- config -----------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(lr > 0) || !std::isfinite(lr)) throw ConfigError("train: lr must be positive");
  if (!(warmup_proportion > 0 && warmup_proportion < 1)) {
    throw ConfigError("train: warmup_proportion must lie in (0, 1)");
  }
  if (epochs == 0) throw ConfigError("train: epochs must be >= 1");
  if (batch_size < 2) throw ConfigError("train: batch_size must be >= 2");
  if (clip_norm < 0) throw ConfigError("train: clip_norm must be >= 0");
  if (moment_topk == 0) throw ConfigError("train: moment_topk must be >= 1");
  model.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"lr", c.lr},
                     {"warmup_proportion", c.warmup_proportion},
                     {"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"seed", c.seed},
                     {"clip_norm", c.clip_norm},
                     {"duplicate_policy", c.duplicate_policy},
                     {"selection", c.selection},
                     {"eval_every", c.eval_every},
                     {"moment_topk", c.moment_topk},
                     {"model", c.model}};
}

namespace {

template <typename E>
E checked_enum(const nlohmann::json& j, const char* key, E fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  E e = v.get<E>();
  if (nlohmann::json(e) != v) {
    throw ConfigError(std::string("train: unknown value for ") + key + ": " + v.dump());
  }
  return e;
}

}  // namespace

void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const std::set<std::string> known = {
      "lr",        "warmup_proportion", "epochs",     "batch_size",  "seed",  "clip_norm",
      "duplicate_policy", "selection",  "eval_every", "moment_topk", "model"};
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError("train config: unknown key '" + key + "'");
  }
  TrainConfig d;
  try {
    c.lr = j.value("lr", d.lr);
    c.warmup_proportion = j.value("warmup_proportion", d.warmup_proportion);
    c.epochs = j.value("epochs", d.epochs);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.seed = j.value("seed", d.seed);
    c.clip_norm = j.value("clip_norm", d.clip_norm);
    c.eval_every = j.value("eval_every", d.eval_every);
    c.moment_topk = j.value("moment_topk", d.moment_topk);
    c.model = j.contains("model") ? j.at("model").get<ModelConfig>() : d.model;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.duplicate_policy = checked_enum(j, "duplicate_policy", d.duplicate_policy);
  c.selection = checked_enum(j, "selection", d.selection);
  c.validate();
}

TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return j.get<TrainConfig>();
}

// ---- schedule and optimizer -------------------------------------------------

double cosine_lr(std::size_t step, std::size_t total_steps, const TrainConfig& cfg) {
  if (total_steps == 0 || step > total_steps) {
    throw ContractError("cosine_lr: step must lie in [0, total_steps]");
  }
  const double total = static_cast<double>(total_steps);
  const double warmup = cfg.warmup_proportion * total;
  const double s = static_cast<double>(step);
  if (s < warmup) return cfg.lr * s / warmup;
  if (total <= warmup) return cfg.lr;
  const double progress = (s - warmup) / (total - warmup);
  return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

Adam::Adam(const std::vector<Parameter<float>*>& params) {
  for (const Parameter<float>* p : params) {
    m.emplace_back(p->value.shape());
    v.emplace_back(p->value.shape());
  }
}

void Adam::step(const std::vector<Parameter<float>*>& params, double lr) {
  if (params.size() != m.size()) throw ContractError("Adam: parameter list changed");
  ++t;
  const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t));
  const auto b1 = static_cast<float>(kBeta1);
  const auto b2 = static_cast<float>(kBeta2);
  const auto step_size = static_cast<float>(lr / bc1);
  const auto inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
  const auto eps = static_cast<float>(kEps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter<float>& p = *params[i];
    p.zero_grad_if_empty();
    auto w = p.value.data();
    auto g = p.grad.data();
    auto mi = m[i].data();
    auto vi = v[i].data();
    for (std::size_t k = 0; k < w.size(); ++k) {
      mi[k] = b1 * mi[k] + (1.0f - b1) * g[k];
      vi[k] = b2 * vi[k] + (1.0f - b2) * g[k] * g[k];
      w[k] -= step_size * mi[k] / (std::sqrt(vi[k]) * inv_sqrt_bc2 + eps);
    }
  }
}

double clip_grad_norm(const std::vector<Parameter<float>*>& params, double max_norm) {
  double sq = 0;
  for (Parameter<float>* p : params) {
    p->zero_grad_if_empty();
    for (float g : p->grad.data()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
  if (max_norm > 0 && norm > max_norm) {
    const auto s = static_cast<float>(max_norm / (norm + 1e-6));
    for (Parameter<float>* p : params) {
      for (float& g : p->grad.data()) g *= s;
    }
  }
  return norm;
}

// ---- checkpoint -------------------------------------------------------------

namespace {

constexpr char kCkptMagic[8] = {'M', 'A', 'D', 'E', 'C', 'K', 'P', 'T'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::string& bytes, const std::string& origin) : b_(bytes), origin_(origin) {}

  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw DataError(origin_ + ": truncated checkpoint");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    }
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    }
    pos_ += 8;
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == b_.size(); }

 private:
  const std::string& b_;
  const std::string& origin_;
  std::size_t pos_ = 0;
};

void put_tensor(std::string& out, const std::string& name, const Tensor<float>& t) {
  put_u32(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) put_u32(out, static_cast<std::uint32_t>(e));
  for (float v : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& c) {
  nlohmann::json meta{{"config", c.config},  {"d_max", c.d_max},
                      {"step", c.step},      {"adam_t", c.adam_t},
                      {"rng", c.rng_state},  {"best_step", c.best_step}};
  meta["best_metric"] = c.best_metric ? nlohmann::json(*c.best_metric) : nlohmann::json(nullptr);
  const std::string js = meta.dump();
  std::string out(kCkptMagic, sizeof(kCkptMagic));
  put_u32(out, kCheckpointVersion);
  put_u64(out, js.size());
  out += js;
  put_u32(out, static_cast<std::uint32_t>(c.params.size() + c.adam_m.size() + c.adam_v.size()));
  for (const auto& [name, t] : c.params) put_tensor(out, "param/" + name, t);
  for (const auto& [name, t] : c.adam_m) put_tensor(out, "adam.m/" + name, t);
  for (const auto& [name, t] : c.adam_v) put_tensor(out, "adam.v/" + name, t);
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes, const std::string& origin) {
  Reader r(bytes, origin);
  if (r.bytes(sizeof(kCkptMagic)) != std::string(kCkptMagic, sizeof(kCkptMagic))) {
    throw DataError(origin + ": not a checkpoint (bad magic)");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw DataError(origin + ": unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint c;
  try {
    const auto meta = nlohmann::json::parse(r.bytes(r.u64()));
    c.config = meta.at("config").get<TrainConfig>();
    c.d_max = meta.at("d_max").get<double>();
    c.step = meta.at("step").get<std::uint64_t>();
    c.adam_t = meta.at("adam_t").get<std::uint64_t>();
    c.rng_state = meta.at("rng").get<std::string>();
    c.best_step = meta.at("best_step").get<std::uint64_t>();
    if (!meta.at("best_metric").is_null()) c.best_metric = meta.at("best_metric").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(origin + ": bad checkpoint metadata: " + e.what());
  }
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.bytes(r.u32());
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 4) throw DataError(origin + ": bad tensor rank for " + name);
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(r.u32());
    const std::size_t n = shape_numel(shape);
    r.need(n * 4);
    std::vector<float> data(n);
    for (auto& v : data) v = std::bit_cast<float>(r.u32());
    Tensor<float> t(shape, std::move(data));
    const auto slash = name.find('/');
    const std::string group = name.substr(0, slash);
    const std::string key = slash == std::string::npos ? "" : name.substr(slash + 1);
    if (group == "param") {
      c.params.emplace(key, std::move(t));
    } else if (group == "adam.m") {
      c.adam_m.emplace(key, std::move(t));
    } else if (group == "adam.v") {
      c.adam_v.emplace(key, std::move(t));
    } else {
      throw DataError(origin + ": unknown tensor group in " + name);
    }
  }
  if (!r.at_end()) throw DataError(origin + ": trailing bytes in checkpoint");
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& c) {
  const std::string bytes = encode_checkpoint(c);
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str(), path);
}

namespace {

void load_params(MadeModel<float>& model, const std::map<std::string, Tensor<float>>& params) {
  std::size_t used = 0;
  for (Parameter<float>* p : model.parameters()) {
    auto it = params.find(p->name);
    if (it == params.end()) throw DataError("checkpoint lacks parameter " + p->name);
    if (it->second.shape() != p->value.shape()) {
      throw DataError("checkpoint parameter " + p->name + " has shape " +
                      shape_str(it->second.shape()) + ", model expects " +
                      shape_str(p->value.shape()));
    }
    p->value = it->second;
    p->zero_grad();
    ++used;
  }
  if (used != params.size()) throw DataError("checkpoint holds parameters the model lacks");
}

}  // namespace

MadeModel<float> model_from_checkpoint(const Checkpoint& c) {
  MadeModel<float> model(c.config.model);
  load_params(model, c.params);
  return model;
}

// ---- evaluation -------------------------------------------------------------

metrics::GroundTruthMap ground_truth(const data::Manifest& m) {
  metrics::GroundTruthMap gts;
  for (const auto& e : m.entries) gts[e.video_id] = {e.track_id, e.moment()};
  return gts;
}

namespace {

Graph<float> eval_graph() { return Graph<float>(ad::GraphOptions{false, false, nullptr}); }

// Valid rows of item b of an encoded batch.
Tensor<float> item_rows(const Encoded<float>& enc, std::size_t b) {
  const std::size_t len = enc.layout.len;
  const std::size_t n = enc.layout.valid[b];
  const std::size_t d = enc.x.cols();
  const auto& src = enc.x.value().storage();
  std::vector<float> rows(src.begin() + static_cast<std::ptrdiff_t>(b * len * d),
                          src.begin() + static_cast<std::ptrdiff_t>((b * len + n) * d));
  return Tensor<float>(Shape{n, d}, std::move(rows));
}

Encoded<float> constant_encoded(Graph<float>& g, const std::vector<const Tensor<float>*>& items) {
  SeqBatch<float> b = pad_sequences<float>(items);
  return Encoded<float>{g.constant(std::move(b.tokens)), std::move(b.layout)};
}

float fixed_width_for(double video_duration, double d_max) {
  return static_cast<float>(std::min(0.999, video_duration / d_max));
}

struct EncodedTrack {
  std::string id;
  double duration = 0;
  Tensor<float> tokens;  // S x d after enhancement
};

std::vector<EncodedTrack> encode_tracks(MadeModel<float>& model,
                                        const std::vector<std::string>& ids,
                                        const std::vector<const data::TokenSequence*>& feats,
                                        std::size_t batch_size) {
  std::vector<EncodedTrack> out;
  for (std::size_t i = 0; i < ids.size(); i += batch_size) {
    const std::size_t end = std::min(ids.size(), i + batch_size);
    std::vector<const Tensor<float>*> raw;
    for (std::size_t k = i; k < end; ++k) raw.push_back(&feats[k]->tokens);
    Graph<float> g = eval_graph();
    Encoded<float> enc = model.enhance_music(g, pad_sequences<float>(raw));
    for (std::size_t k = i; k < end; ++k) {
      out.push_back({ids[k], feats[k]->duration_sec, item_rows(enc, k - i)});
    }
  }
  return out;
}

struct Pair {
  std::size_t query = 0;  // index into the query batch
  std::size_t track = 0;  // index into the encoded tracks
};

// Detects moments for (query, track) pairs whose encodings are already known.
std::vector<std::pair<float, float>> detect_pairs(MadeModel<float>& model,
                                                  const std::vector<Tensor<float>>& query_enc,
                                                  const std::vector<Tensor<float>>& query_hv,
                                                  const std::vector<float>& query_width,
                                                  const std::vector<EncodedTrack>& tracks,
                                                  const std::vector<Pair>& pairs,
                                                  std::size_t batch_size) {
  std::vector<std::pair<float, float>> out;
  for (std::size_t i = 0; i < pairs.size(); i += batch_size) {
    const std::size_t end = std::min(pairs.size(), i + batch_size);
    std::vector<const Tensor<float>*> vids;
    std::vector<const Tensor<float>*> trks;
    std::vector<float> widths;
    const std::size_t d = query_hv.front().size();
    std::vector<float> hv;
    for (std::size_t k = i; k < end; ++k) {
      vids.push_back(&query_enc[pairs[k].query]);
      trks.push_back(&tracks[pairs[k].track].tokens);
      widths.push_back(query_width[pairs[k].query]);
      const auto& h = query_hv[pairs[k].query].storage();
      hv.insert(hv.end(), h.begin(), h.end());
    }
    Graph<float> g = eval_graph();
    Encoded<float> ev = constant_encoded(g, vids);
    Encoded<float> em = constant_encoded(g, trks);
    Var<float> h_v = g.constant(Tensor<float>(Shape{end - i, d}, std::move(hv)));
    DetectionOutput<float> det = model.detect(g, ev, em, h_v, widths);
    for (const auto& s : det.select()) out.push_back(s);
  }
  return out;
}

struct EncodedQueries {
  std::vector<Tensor<float>> enc;  // F x d each
  std::vector<Tensor<float>> hv;   // 1 x d each
};

EncodedQueries encode_queries(MadeModel<float>& model,
                              const std::vector<const data::TokenSequence*>& videos,
                              std::size_t batch_size) {
  EncodedQueries q;
  for (std::size_t i = 0; i < videos.size(); i += batch_size) {
    const std::size_t end = std::min(videos.size(), i + batch_size);
    std::vector<const Tensor<float>*> raw;
    for (std::size_t k = i; k < end; ++k) raw.push_back(&videos[k]->tokens);
    Graph<float> g = eval_graph();
    Encoded<float> ev = model.enhance_video(g, pad_sequences<float>(raw));
    Var<float> h = model.pool(ev);
    const std::size_t d = h.cols();
    for (std::size_t k = i; k < end; ++k) {
      q.enc.push_back(item_rows(ev, k - i));
      const auto& src = h.value().storage();
      std::vector<float> row(src.begin() + static_cast<std::ptrdiff_t>((k - i) * d),
                             src.begin() + static_cast<std::ptrdiff_t>((k - i + 1) * d));
      q.hv.emplace_back(Shape{1, d}, std::move(row));
    }
  }
  return q;
}

// p_s of every query against every track: rows are queries.
Tensor<float> score_matrix(MadeModel<float>& model, const EncodedQueries& q,
                           const std::vector<EncodedTrack>& tracks, std::size_t batch_size) {
  const std::size_t nq = q.hv.size();
  const std::size_t nt = tracks.size();
  Tensor<float> scores(Shape{nq, nt});
  std::vector<const Tensor<float>*> trk;
  for (const auto& t : tracks) trk.push_back(&t.tokens);
  const std::size_t d = q.hv.front().size();
  for (std::size_t i = 0; i < nq; i += batch_size) {
    const std::size_t end = std::min(nq, i + batch_size);
    Graph<float> g = eval_graph();
    Encoded<float> em = constant_encoded(g, trk);
    std::vector<float> hv;
    for (std::size_t k = i; k < end; ++k) {
      hv.insert(hv.end(), q.hv[k].storage().begin(), q.hv[k].storage().end());
    }
    Var<float> h_v = g.constant(Tensor<float>(Shape{end - i, d}, std::move(hv)));
    SimilarityOutput<float> sims = model.similarities(g, h_v, model.pool(em), em);
    for (std::size_t k = i; k < end; ++k) {
      for (std::size_t t = 0; t < nt; ++t) scores(k, t) = sims.score.value()(k - i, t);
    }
  }
  return scores;
}

metrics::Interval to_seconds(std::pair<float, float> pcw, double d_max, double track_duration) {
  return data::denormalize_moment(pcw.first, pcw.second, d_max, track_duration);
}

}  // namespace

std::vector<metrics::RankedPrediction> predict_smg(MadeModel<float>& model,
                                                   const data::Manifest& m,
                                                   const data::FeatureStore& store,
                                                   double d_max, const EvalOptions& opts) {
  if (m.entries.empty()) throw DataError("evaluation manifest has no queries");
  std::vector<metrics::RankedPrediction> out;
  const std::size_t bs = std::max<std::size_t>(1, opts.batch_size);
  for (std::size_t i = 0; i < m.entries.size(); i += bs) {
    const std::size_t end = std::min(m.entries.size(), i + bs);
    std::vector<const Tensor<float>*> vids;
    std::vector<const Tensor<float>*> trks;
    std::vector<float> widths;
    for (std::size_t k = i; k < end; ++k) {
      const auto& e = m.entries[k];
      vids.push_back(&store.video(e.video_id).tokens);
      trks.push_back(&store.track(e.track_id).tokens);
      widths.push_back(fixed_width_for(e.video_duration, d_max));
    }
    Graph<float> g = eval_graph();
    Encoded<float> ev = model.enhance_video(g, pad_sequences<float>(vids));
    Encoded<float> em = model.enhance_music(g, pad_sequences<float>(trks));
    MatchOutput<float> mo = model.match(g, ev, em);
    DetectionOutput<float> det = model.detect(g, ev, em, mo.h_v, widths);
    const auto sel = det.select();
    for (std::size_t k = i; k < end; ++k) {
      const auto& e = m.entries[k];
      metrics::RankedPrediction p;
      p.query_id = e.video_id;
      p.ranked.push_back({e.track_id, mo.p_s.value()[k - i],
                          to_seconds(sel[k - i], d_max, e.track_duration)});
      out.push_back(std::move(p));
    }
  }
  return out;
}

std::vector<metrics::RankedPrediction> predict_msg(MadeModel<float>& model,
                                                   const data::Manifest& m,
                                                   const data::FeatureStore& store,
                                                   double d_max, const EvalOptions& opts) {
  if (m.entries.empty()) throw DataError("evaluation manifest has no queries");
  if (m.candidates.empty()) throw DataError("evaluation manifest has an empty candidate set");
  const std::size_t bs = std::max<std::size_t>(1, opts.batch_size);
  std::vector<const data::TokenSequence*> track_feats;
  for (const auto& id : m.candidates) track_feats.push_back(&store.track(id));
  const std::vector<EncodedTrack> tracks = encode_tracks(model, m.candidates, track_feats, bs);
  std::map<std::string, std::size_t> track_index;
  for (std::size_t t = 0; t < tracks.size(); ++t) track_index[tracks[t].id] = t;

  std::vector<const data::TokenSequence*> videos;
  std::vector<float> widths;
  for (const auto& e : m.entries) {
    videos.push_back(&store.video(e.video_id));
    widths.push_back(fixed_width_for(e.video_duration, d_max));
  }
  const EncodedQueries q = encode_queries(model, videos, bs);
  const Tensor<float> scores = score_matrix(model, q, tracks, bs);

  std::vector<metrics::RankedPrediction> out(m.entries.size());
  std::vector<Pair> pairs;
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    out[i].query_id = m.entries[i].video_id;
    for (std::size_t t = 0; t < tracks.size(); ++t) {
      out[i].ranked.push_back({tracks[t].id, scores(i, t), std::nullopt});
    }
    metrics::sort_ranking(out[i].ranked);
    std::set<std::size_t> wanted;
    const std::size_t k = std::min(opts.moment_topk, out[i].ranked.size());
    for (std::size_t r = 0; r < k; ++r) wanted.insert(track_index.at(out[i].ranked[r].track_id));
    wanted.insert(track_index.at(m.entries[i].track_id));
    for (std::size_t t : wanted) pairs.push_back({i, t});
  }
  const auto moments = detect_pairs(model, q.enc, q.hv, widths, tracks, pairs, bs);
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    const EncodedTrack& tr = tracks[pairs[p].track];
    auto& ranked = out[pairs[p].query].ranked;
    for (auto& entry : ranked) {
      if (entry.track_id == tr.id) entry.moment = to_seconds(moments[p], d_max, tr.duration);
    }
  }
  return out;
}

metrics::EvalReport evaluate(MadeModel<float>& model, const data::Manifest& m,
                             const data::FeatureStore& store, double d_max,
                             const std::string& mode, const EvalOptions& opts,
                             std::vector<metrics::RankedPrediction>* predictions) {
  const metrics::GroundTruthMap gts = ground_truth(m);
  std::vector<metrics::RankedPrediction> preds;
  metrics::EvalReport report;
  if (mode == "smg") {
    preds = predict_smg(model, m, store, d_max, opts);
    std::map<std::string, metrics::Interval> moments;
    for (const auto& p : preds) moments[p.query_id] = *p.ranked.front().moment;
    report = metrics::smg_report(moments, gts);
  } else if (mode == "msg") {
    preds = predict_msg(model, m, store, d_max, opts);
    report = metrics::msg_report(preds, gts);
  } else {
    throw ConfigError("unknown evaluation mode '" + mode + "' (expected smg or msg)");
  }
  if (predictions != nullptr) *predictions = std::move(preds);
  return report;
}

metrics::RankedPrediction predict(MadeModel<float>& model, double d_max,
                                  const std::string& query_id, const data::TokenSequence& video,
                                  const std::vector<Candidate>& candidates,
                                  std::size_t moment_topk) {
  if (candidates.empty()) throw DataError("predict: no candidate tracks");
  const ModelConfig& cfg = model.config();
  if (video.tokens.cols() != cfg.video_dim) {
    throw DimensionError("predict: video token width " + std::to_string(video.tokens.cols()) +
                         " does not match the checkpoint (" + std::to_string(cfg.video_dim) + ")");
  }
  std::vector<std::string> ids;
  std::vector<const data::TokenSequence*> feats;
  for (const auto& c : candidates) {
    if (c.features.tokens.cols() != cfg.music_dim) {
      throw DimensionError("predict: track " + c.track_id + " token width " +
                           std::to_string(c.features.tokens.cols()) +
                           " does not match the checkpoint (" + std::to_string(cfg.music_dim) +
                           ")");
    }
    ids.push_back(c.track_id);
    feats.push_back(&c.features);
  }
  const std::size_t bs = 32;
  const std::vector<EncodedTrack> tracks = encode_tracks(model, ids, feats, bs);
  const EncodedQueries q = encode_queries(model, {&video}, 1);
  const Tensor<float> scores = score_matrix(model, q, tracks, 1);

  metrics::RankedPrediction out;
  out.query_id = query_id;
  for (std::size_t t = 0; t < tracks.size(); ++t) {
    out.ranked.push_back({tracks[t].id, scores(0, t), std::nullopt});
  }
  metrics::sort_ranking(out.ranked);
  const std::size_t k = moment_topk == 0 ? out.ranked.size()
                                         : std::min(moment_topk, out.ranked.size());
  std::vector<Pair> pairs;
  for (std::size_t r = 0; r < k; ++r) {
    for (std::size_t t = 0; t < tracks.size(); ++t) {
      if (tracks[t].id == out.ranked[r].track_id) pairs.push_back({0, t});
    }
  }
  const std::vector<float> widths{fixed_width_for(video.duration_sec, d_max)};
  const auto moments = detect_pairs(model, q.enc, q.hv, widths, tracks, pairs, bs);
  for (std::size_t r = 0; r < k; ++r) {
    out.ranked[r].moment = to_seconds(moments[r], d_max, tracks[pairs[r].track].duration);
  }
  return out;
}

// ---- training ---------------------------------------------------------------

LossTerms batch_loss(Graph<float>& g, MadeModel<float>& model, const data::Batch& batch,
                     loss::DuplicatePolicy policy) {
  Encoded<float> ev = model.enhance_video(g, batch.video);
  Encoded<float> em = model.enhance_music(g, batch.music);
  Var<float> h_v = model.pool(ev);
  Var<float> h0 = model.pool(em);
  SimilarityOutput<float> sims = model.similarities(g, h_v, h0, em);
  const auto allowed = loss::same_track_mask(batch.track_ids, policy);
  Var<float> log_scale = g.param(model.logit_scale());
  LossTerms t;
  t.matching = loss::matching_loss(sims, model.config(), log_scale, allowed);
  DetectionOutput<float> det = model.detect(g, ev, em, h_v, batch.fixed_width);
  t.detection = loss::detection_objective(det, batch.target);
  t.total = loss::total_loss(t.matching, t.detection);
  return t;
}

Trainer::Trainer(TrainConfig cfg, const data::Manifest& train, const data::FeatureStore& store,
                 const data::Manifest* val)
    : cfg_(std::move(cfg)),
      train_(train),
      store_(store),
      val_(val),
      d_max_(train.d_max),
      model_((cfg_.validate(), cfg_.model)),
      params_(),
      adam_({}),
      rng_(cfg_.seed ^ 0x9e3779b97f4a7c15ULL) {
  if (train_.entries.size() < 2) throw DataError("training manifest needs at least two pairs");
  model_.init(cfg_.seed);
  params_ = model_.parameters();
  adam_ = Adam(params_);
  steps_per_epoch_ = data::make_batches(train_.entries.size(), cfg_.batch_size, cfg_.seed, 0).size();
  total_steps_ = steps_per_epoch_ * cfg_.epochs;
}

StepStats Trainer::step() {
  if (done()) throw ContractError("Trainer::step: training already finished");
  const std::size_t epoch = step_ / steps_per_epoch_;
  if (epoch != cached_epoch_) {
    epoch_batches_ = data::make_batches(train_.entries.size(), cfg_.batch_size, cfg_.seed, epoch);
    cached_epoch_ = epoch;
  }
  last_batch_ = epoch_batches_[step_ % steps_per_epoch_];
  const data::Batch batch = data::collate(train_, store_, last_batch_, d_max_);

  for (Parameter<float>* p : params_) p->zero_grad();
  Graph<float> g(ad::GraphOptions{true, true, &rng_});
  const LossTerms terms = batch_loss(g, model_, batch, cfg_.duplicate_policy);
  const double loss = terms.total.value()[0];
  if (!std::isfinite(loss)) throw NumericError("non-finite training loss");
  g.backward(terms.total);

  StepStats s;
  s.grad_norm = clip_grad_norm(params_, cfg_.clip_norm);
  s.lr = cosine_lr(step_, total_steps_, cfg_);
  adam_.step(params_, s.lr);
  float& log_scale = model_.logit_scale().value[0];
  log_scale = std::min(log_scale, static_cast<float>(std::log(loss::kMaxLogitScale)));
  ++step_;
  s.step = step_;
  s.epoch = epoch;
  s.loss = loss;
  s.matching = terms.matching.value()[0];
  s.detection = terms.detection.value()[0];
  return s;
}

std::optional<metrics::EvalReport> Trainer::end_of_step() {
  improved_ = false;
  if (step_ % steps_per_epoch_ != 0) return std::nullopt;
  const std::size_t epochs_done = step_ / steps_per_epoch_;
  const bool scheduled = cfg_.eval_every > 0 && epochs_done % cfg_.eval_every == 0;
  if (val_ == nullptr || val_->entries.empty() || !(scheduled || done())) return std::nullopt;
  EvalOptions opts;
  opts.batch_size = cfg_.batch_size;
  opts.moment_topk = cfg_.moment_topk;
  const bool r1 = cfg_.selection == Selection::r1;
  metrics::EvalReport report = evaluate(model_, *val_, store_, d_max_, r1 ? "msg" : "smg", opts);
  const double metric = r1 ? report.recall.at(1) : report.miou;
  if (!best_metric_ || metric > *best_metric_) {
    best_metric_ = metric;
    best_step_ = step_;
    improved_ = true;
  }
  return report;
}

Checkpoint Trainer::checkpoint() {
  Checkpoint c;
  c.config = cfg_;
  c.d_max = d_max_;
  c.step = step_;
  c.adam_t = adam_.t;
  std::ostringstream rs;
  rs << rng_;
  c.rng_state = rs.str();
  c.best_metric = best_metric_;
  c.best_step = best_step_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    c.params.emplace(params_[i]->name, params_[i]->value);
    c.adam_m.emplace(params_[i]->name, adam_.m[i]);
    c.adam_v.emplace(params_[i]->name, adam_.v[i]);
  }
  return c;
}

void Trainer::restore(const Checkpoint& c) {
  if (nlohmann::json(c.config) != nlohmann::json(cfg_)) {
    throw ConfigError("resume: checkpoint config differs from the requested config");
  }
  if (c.d_max != d_max_) throw DataError("resume: checkpoint D_max differs from the manifest");
  if (c.step > total_steps_) throw DataError("resume: checkpoint step beyond the schedule");
  load_params(model_, c.params);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const std::string& name = params_[i]->name;
    auto m = c.adam_m.find(name);
    auto v = c.adam_v.find(name);
    if (m == c.adam_m.end() || v == c.adam_v.end()) {
      throw DataError("resume: checkpoint lacks optimizer state for " + name);
    }
    adam_.m[i] = m->second;
    adam_.v[i] = v->second;
  }
  adam_.t = c.adam_t;
  std::istringstream rs(c.rng_state);
  rs >> rng_;
  if (!rs) throw DataError("resume: bad RNG state");
  step_ = c.step;
  best_metric_ = c.best_metric;
  best_step_ = c.best_step;
  cached_epoch_ = static_cast<std::size_t>(-1);
}

namespace {

nlohmann::json step_json(const StepStats& s) {
  return nlohmann::json{{"kind", "step"},           {"step", s.step},
                        {"epoch", s.epoch},         {"lr", s.lr},
                        {"loss", s.loss},           {"matching", s.matching},
                        {"detection", s.detection}, {"grad_norm", s.grad_norm}};
}

void dump_batch(const std::string& dir, const Trainer& t, const data::Manifest& m,
                const std::string& what) {
  if (dir.empty()) return;
  nlohmann::json j{{"step", t.global_step() + 1}, {"error", what}};
  nlohmann::json pairs = nlohmann::json::array();
  for (std::size_t i : t.last_batch()) {
    pairs.push_back({{"video_id", m.entries[i].video_id}, {"track_id", m.entries[i].track_id}});
  }
  j["pairs"] = std::move(pairs);
  std::ofstream out((fs::path(dir) / "nonfinite_batch.json").string());
  out << j.dump(2) << '\n';
}

}  // namespace

RunResult run_training(Trainer& trainer, const RunOptions& opts) {
  RunResult result;
  std::ofstream log;
  if (!opts.out_dir.empty()) {
    fs::create_directories(opts.out_dir);
    const auto mode = opts.resume ? std::ios::app : std::ios::trunc;
    log.open((fs::path(opts.out_dir) / "train_log.jsonl").string(), std::ios::out | mode);
    if (!log) throw DataError("cannot write training log in " + opts.out_dir);
  }
  if (opts.resume) trainer.restore(*opts.resume);
  const auto out_path = [&](const char* name) {
    return (fs::path(opts.out_dir) / name).string();
  };
  const auto t0 = std::chrono::steady_clock::now();
  while (!trainer.done()) {
    if (opts.stop_after > 0 && trainer.global_step() >= opts.stop_after) break;
    StepStats s;
    try {
      s = trainer.step();
    } catch (const NumericError& e) {
      if (!opts.out_dir.empty()) {
        dump_batch(opts.out_dir, trainer, trainer.train_manifest(), e.what());
      }
      throw;
    }
    result.history.push_back(s);
    if (log.is_open()) log << step_json(s).dump() << '\n';
    if (auto report = trainer.end_of_step()) {
      if (log.is_open()) {
        nlohmann::json j{{"kind", "validation"}, {"step", s.step}, {"report", report->to_json()}};
        j["report"].erase("per_query");
        log << j.dump() << '\n';
      }
      if (!opts.quiet) {
        std::cerr << "epoch " << s.epoch + 1 << " step " << s.step << " val mIoU "
                  << report->miou << '\n';
      }
      if (trainer.improved() && !opts.out_dir.empty()) {
        save_checkpoint(out_path("best.ckpt"), trainer.checkpoint());
      }
    }
    if (opts.on_step && !opts.on_step(s, trainer)) break;
  }
  result.steps = trainer.global_step();
  result.best_metric = trainer.best_metric();
  if (!opts.out_dir.empty()) {
    Checkpoint last = trainer.checkpoint();
    save_checkpoint(out_path("last.ckpt"), last);
    if (!trainer.best_metric() && trainer.done()) save_checkpoint(out_path("best.ckpt"), last);
  }
  if (!opts.quiet) {
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cerr << "trained " << result.history.size() << " steps in " << secs << " s\n";
  }
  return result;
}

}  // namespace made::train
