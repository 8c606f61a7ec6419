#include "made/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace made {

NLOHMANN_JSON_SERIALIZE_ENUM(Phi0Source, {{Phi0Source::video, "video"},
                                          {Phi0Source::zero, "zero"},
                                          {Phi0Source::music_mean, "music_mean"},
                                          {Phi0Source::music_xpool, "music_xpool"}})
NLOHMANN_JSON_SERIALIZE_ENUM(MatchingMode,
                             {{MatchingMode::both, "both"},
                              {MatchingMode::mean_only, "mean_only"},
                              {MatchingMode::xpool_only, "xpool_only"},
                              {MatchingMode::feature_add, "feature_add"}})
NLOHMANN_JSON_SERIALIZE_ENUM(LossMode, {{LossMode::joint, "joint"},
                                        {LossMode::single, "single"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Enhancement, {{Enhancement::sa, "sa"},
                                           {Enhancement::none, "none"},
                                           {Enhancement::mlp, "mlp"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Predict, {{Predict::center_width, "center_width"},
                                       {Predict::center_only, "center_only"}})

void ModelConfig::validate() const {
  if (d == 0 || heads == 0 || d % heads != 0) {
    throw ConfigError("model: d must be a positive multiple of heads");
  }
  if (d % 2 != 0) throw ConfigError("model: d must be even for positional encoding");
  if (decoder_ca_layers < 1) throw ConfigError("model: decoder_ca_layers must be >= 1");
  if (query_tokens < 1) throw ConfigError("model: query_tokens must be >= 1");
  if (video_dim == 0 || music_dim == 0) throw ConfigError("model: zero feature width");
}

namespace {

// Unknown enum strings map to the first enumerator in nlohmann; catch that.
template <typename E>
E enum_field(const nlohmann::json& j, const char* key, E fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  E e = v.get<E>();
  if (nlohmann::json(e) != v) {
    throw ConfigError(std::string("model: unknown value for ") + key + ": " + v.dump());
  }
  return e;
}

}  // namespace

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"d", c.d},
                     {"heads", c.heads},
                     {"video_dim", c.video_dim},
                     {"music_dim", c.music_dim},
                     {"enc_sa_layers", c.enc_sa_layers},
                     {"fusion_sa_layers", c.fusion_sa_layers},
                     {"decoder_ca_layers", c.decoder_ca_layers},
                     {"query_tokens", c.query_tokens},
                     {"phi0_source", c.phi0_source},
                     {"matching_mode", c.matching_mode},
                     {"loss_mode", c.loss_mode},
                     {"enhancement", c.enhancement},
                     {"predict", c.predict},
                     {"aux_loss", c.aux_loss}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig def;
  try {
    c.d = j.value("d", def.d);
    c.heads = j.value("heads", def.heads);
    c.video_dim = j.value("video_dim", def.video_dim);
    c.music_dim = j.value("music_dim", def.music_dim);
    c.enc_sa_layers = j.value("enc_sa_layers", def.enc_sa_layers);
    c.fusion_sa_layers = j.value("fusion_sa_layers", def.fusion_sa_layers);
    c.decoder_ca_layers = j.value("decoder_ca_layers", def.decoder_ca_layers);
    c.query_tokens = j.value("query_tokens", def.query_tokens);
    c.aux_loss = j.value("aux_loss", def.aux_loss);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.phi0_source = enum_field(j, "phi0_source", def.phi0_source);
  c.matching_mode = enum_field(j, "matching_mode", def.matching_mode);
  c.loss_mode = enum_field(j, "loss_mode", def.loss_mode);
  c.enhancement = enum_field(j, "enhancement", def.enhancement);
  c.predict = enum_field(j, "predict", def.predict);
  c.validate();
}

template <typename T>
SeqBatch<T> pad_sequences(std::span<const Tensor<T>* const> seqs, std::size_t min_len) {
  if (seqs.empty()) throw ContractError("pad_sequences: empty batch");
  const std::size_t width = seqs[0]->cols();
  std::size_t len = min_len;
  for (const Tensor<T>* s : seqs) {
    if (s->cols() != width) throw DimensionError("pad_sequences: token width mismatch");
    if (s->rows() == 0) throw ContractError("pad_sequences: empty sequence");
    len = std::max(len, s->rows());
  }
  SeqBatch<T> out;
  out.layout.len = len;
  out.tokens = Tensor<T>(Shape{seqs.size() * len, width});
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    const Tensor<T>& s = *seqs[b];
    out.layout.valid.push_back(s.rows());
    std::copy(s.storage().begin(), s.storage().end(),
              out.tokens.storage().begin() + static_cast<std::ptrdiff_t>(b * len * width));
  }
  return out;
}

template <typename T>
std::vector<std::pair<T, T>> DetectionOutput<T>::select() const {
  const MomentPrediction<T>& last = layers.back();
  const std::size_t n = last.center.rows() / query_tokens;
  std::vector<std::pair<T, T>> out(n);
  for (std::size_t b = 0; b < n; ++b) {
    std::size_t best = 0;
    if (query_tokens > 1) {
      for (std::size_t t = 1; t < query_tokens; ++t) {
        if (confidence.value()[b * query_tokens + t] >
            confidence.value()[b * query_tokens + best]) {
          best = t;
        }
      }
    }
    const std::size_t r = b * query_tokens + best;
    out[b] = {last.center.value()[r], last.width.value()[r]};
  }
  return out;
}

template <typename T>
MadeModel<T>::MadeModel(ModelConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t d = cfg_.d;
  video_proj_ = nn::Linear<T>("video.proj", cfg_.video_dim, d);
  music_proj_ = nn::Linear<T>("music.proj", cfg_.music_dim, d);
  if (cfg_.enhancement == Enhancement::sa) {
    for (std::size_t i = 0; i < cfg_.enc_sa_layers; ++i) {
      video_enc_.emplace_back("video.sa" + std::to_string(i), d, cfg_.heads);
      music_enc_.emplace_back("music.sa" + std::to_string(i), d, cfg_.heads);
    }
  } else if (cfg_.enhancement == Enhancement::mlp) {
    video_mlp1_ = nn::Linear<T>("video.mlp1", d, d);
    video_mlp2_ = nn::Linear<T>("video.mlp2", d, d);
    music_mlp1_ = nn::Linear<T>("music.mlp1", d, d);
    music_mlp2_ = nn::Linear<T>("music.mlp2", d, d);
  }
  if (cfg_.uses_xpool()) {
    xpool_ = XPool{nn::Linear<T>("xpool.q", d, d), nn::Linear<T>("xpool.k", d, d),
                   nn::Linear<T>("xpool.v", d, d), nn::Linear<T>("xpool.o", d, d)};
  }
  for (std::size_t i = 0; i < cfg_.fusion_sa_layers; ++i) {
    fusion_.emplace_back("fusion.sa" + std::to_string(i), d, cfg_.heads);
  }
  for (std::size_t i = 0; i < cfg_.decoder_ca_layers; ++i) {
    decoder_.emplace_back("decoder.ca" + std::to_string(i), d, cfg_.heads);
  }
  query_pos_ = Parameter<T>("decoder.query_pos", Tensor<T>(Shape{cfg_.query_tokens, d}),
                            ad::ParamKind::token);
  head_ = nn::MlpHead<T>("head", d, cfg_.predict == Predict::center_width ? 2 : 1);
  if (cfg_.query_tokens > 1) confidence_ = nn::Linear<T>("head.confidence", d, 1);
  logit_scale_ = Parameter<T>("logit_scale",
                              Tensor<T>::scalar(static_cast<T>(std::log(1.0 / 0.07))),
                              ad::ParamKind::scalar);
}

template <typename T>
void MadeModel<T>::visit(const nn::ParamVisitor<T>& fn) {
  video_proj_.visit(fn);
  for (auto& b : video_enc_) b.visit(fn);
  if (cfg_.enhancement == Enhancement::mlp) {
    video_mlp1_.visit(fn);
    video_mlp2_.visit(fn);
  }
  music_proj_.visit(fn);
  for (auto& b : music_enc_) b.visit(fn);
  if (cfg_.enhancement == Enhancement::mlp) {
    music_mlp1_.visit(fn);
    music_mlp2_.visit(fn);
  }
  if (xpool_) {
    xpool_->wq.visit(fn);
    xpool_->wk.visit(fn);
    xpool_->wv.visit(fn);
    xpool_->wo.visit(fn);
  }
  for (auto& b : fusion_) b.visit(fn);
  for (auto& b : decoder_) b.visit(fn);
  fn(query_pos_);
  head_.visit(fn);
  if (confidence_) confidence_->visit(fn);
  fn(logit_scale_);
}

template <typename T>
std::vector<Parameter<T>*> MadeModel<T>::parameters() {
  std::vector<Parameter<T>*> out;
  visit([&out](Parameter<T>& p) { out.push_back(&p); });
  return out;
}

template <typename T>
std::size_t MadeModel<T>::parameter_count() {
  std::size_t n = 0;
  visit([&n](Parameter<T>& p) { n += p.value.size(); });
  return n;
}

template <typename T>
Parameter<T>* MadeModel<T>::find(const std::string& name) {
  Parameter<T>* hit = nullptr;
  visit([&](Parameter<T>& p) {
    if (p.name == name) hit = &p;
  });
  return hit;
}

template <typename T>
void MadeModel<T>::init(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  visit([&rng](Parameter<T>& p) {
    const bool detection = p.name.rfind("decoder.", 0) == 0 || p.name.rfind("head", 0) == 0;
    nn::init_parameter(p, detection ? nn::InitScheme::xavier : nn::InitScheme::kaiming, rng);
  });
  logit_scale_.value[0] = static_cast<T>(std::log(1.0 / 0.07));
}

template <typename T>
Encoded<T> MadeModel<T>::enhance(Graph<T>& g, const SeqBatch<T>& in, nn::Linear<T>& proj,
                                 std::vector<nn::EncoderBlock<T>>& blocks,
                                 nn::Linear<T>* mlp1, nn::Linear<T>* mlp2) {
  if (in.tokens.cols() != proj.in_features()) {
    throw DimensionError("token width " + std::to_string(in.tokens.cols()) +
                         " does not match expected " + std::to_string(proj.in_features()));
  }
  if (in.batch() == 0 || in.layout.len == 0) {
    throw ContractError("enhance: empty token sequence");
  }
  for (std::size_t v : in.layout.valid) {
    if (v == 0) throw ContractError("enhance: empty token sequence");
  }
  Var<T> x = proj(g, g.constant(in.tokens));
  switch (cfg_.enhancement) {
    case Enhancement::none:
      break;
    case Enhancement::mlp:
      x = (*mlp2)(g, ad::relu((*mlp1)(g, x)));
      break;
    case Enhancement::sa:
      x = ad::add(x, g.constant(nn::batched_pe<T>(in.layout, cfg_.d)));
      for (auto& blk : blocks) x = blk(g, x, in.layout);
      break;
  }
  return Encoded<T>{x, in.layout};
}

template <typename T>
Encoded<T> MadeModel<T>::enhance_video(Graph<T>& g, const SeqBatch<T>& frames) {
  return enhance(g, frames, video_proj_, video_enc_, &video_mlp1_, &video_mlp2_);
}

template <typename T>
Encoded<T> MadeModel<T>::enhance_music(Graph<T>& g, const SeqBatch<T>& segments) {
  return enhance(g, segments, music_proj_, music_enc_, &music_mlp1_, &music_mlp2_);
}

template <typename T>
Var<T> MadeModel<T>::pool(const Encoded<T>& seq) {
  return ad::masked_mean_rows(seq.x, seq.layout.len, seq.layout.valid);
}

template <typename T>
Var<T> MadeModel<T>::xpool(Graph<T>& g, const Var<T>& h_v, const Encoded<T>& music,
                           bool all_pairs) {
  if (!xpool_) throw ContractError("xpool: disabled by matching_mode=mean_only");
  const std::size_t bv = h_v.rows();
  const std::size_t bm = music.batch();
  Var<T> q = xpool_->wq(g, h_v);
  ad::AttentionLayout layout;
  layout.batch = bm;
  layout.k_len = music.layout.len;
  layout.key_valid = music.layout.valid;
  layout.heads = 1;
  if (all_pairs) {
    std::vector<std::size_t> tile(bm * bv);
    for (std::size_t m = 0; m < bm; ++m) {
      for (std::size_t v = 0; v < bv; ++v) tile[m * bv + v] = v;
    }
    q = ad::gather_rows(q, std::span<const std::size_t>(tile));
    layout.q_len = bv;
  } else {
    if (bv != bm) throw DimensionError("xpool: paired mode needs equal batch sizes");
    layout.q_len = 1;
  }
  Var<T> k = xpool_->wk(g, music.x);
  Var<T> v = xpool_->wv(g, music.x);
  return xpool_->wo(g, ad::attention(q, k, v, layout));
}

template <typename T>
MatchOutput<T> MadeModel<T>::match(Graph<T>& g, const Encoded<T>& video,
                                   const Encoded<T>& music) {
  if (video.batch() != music.batch()) {
    throw DimensionError("match: video and music batch sizes differ");
  }
  MatchOutput<T> out;
  out.h_v = pool(video);
  out.h0 = pool(music);
  Var<T> nv = ad::normalize_rows(out.h_v);
  if (cfg_.uses_xpool()) out.h1 = xpool(g, out.h_v, music, false);
  auto cs = [&nv](const Var<T>& h) { return ad::row_dot(nv, ad::normalize_rows(h)); };
  switch (cfg_.matching_mode) {
    case MatchingMode::both:
      out.p_s = ad::add(cs(out.h0), cs(out.h1));
      break;
    case MatchingMode::mean_only:
      out.p_s = cs(out.h0);
      break;
    case MatchingMode::xpool_only:
      out.p_s = cs(out.h1);
      break;
    case MatchingMode::feature_add:
      out.p_s = cs(ad::add(out.h0, out.h1));
      break;
  }
  return out;
}

template <typename T>
SimilarityOutput<T> MadeModel<T>::similarities(Graph<T>& g, const Var<T>& h_v,
                                               const Var<T>& h0,
                                               const Encoded<T>& music) {
  const std::size_t bv = h_v.rows();
  const std::size_t bm = h0.rows();
  if (music.batch() != bm) throw DimensionError("similarities: track count mismatch");
  SimilarityOutput<T> out;
  Var<T> nv = ad::normalize_rows(h_v);
  const MatchingMode mode = cfg_.matching_mode;
  if (mode == MatchingMode::both || mode == MatchingMode::mean_only) {
    out.sim0 = ad::matmul(nv, ad::transpose(ad::normalize_rows(h0)));
  }
  if (mode != MatchingMode::mean_only) {
    Var<T> h1 = xpool(g, h_v, music, true);  // (bm*bv) x d
    std::vector<std::size_t> vid(bm * bv);
    std::vector<std::size_t> trk(bm * bv);
    for (std::size_t m = 0; m < bm; ++m) {
      for (std::size_t v = 0; v < bv; ++v) {
        vid[m * bv + v] = v;
        trk[m * bv + v] = m;
      }
    }
    Var<T> nv_tiled = ad::gather_rows(nv, std::span<const std::size_t>(vid));
    auto to_matrix = [bm, bv](const Var<T>& col) {
      return ad::transpose(ad::reshape(col, Shape{bm, bv}));
    };
    if (mode == MatchingMode::feature_add) {
      Var<T> h0_tiled = ad::gather_rows(h0, std::span<const std::size_t>(trk));
      out.added = to_matrix(ad::row_dot(nv_tiled, ad::normalize_rows(ad::add(h0_tiled, h1))));
    } else {
      out.sim1 = to_matrix(ad::row_dot(nv_tiled, ad::normalize_rows(h1)));
    }
  }
  switch (mode) {
    case MatchingMode::both:
      out.score = ad::add(out.sim0, out.sim1);
      break;
    case MatchingMode::mean_only:
      out.score = out.sim0;
      break;
    case MatchingMode::xpool_only:
      out.score = out.sim1;
      break;
    case MatchingMode::feature_add:
      out.score = out.added;
      break;
  }
  return out;
}

template <typename T>
DetectionOutput<T> MadeModel<T>::detect(Graph<T>& g, const Encoded<T>& video,
                                        const Encoded<T>& music, const Var<T>& h_v,
                                        std::span<const T> fixed_width) {
  const std::size_t batch = video.batch();
  if (music.batch() != batch || h_v.rows() != batch) {
    throw DimensionError("detect: batch sizes differ");
  }
  const std::size_t d = cfg_.d;
  const Tensor<T> pe_v = nn::batched_pe<T>(video.layout, d);
  const Tensor<T> pe_m = nn::batched_pe<T>(music.layout, d);
  Var<T> v = ad::add(video.x, g.constant(pe_v));
  Var<T> m = ad::add(music.x, g.constant(pe_m));

  SeqLayout fused_layout;
  fused_layout.len = video.layout.len + music.layout.len;
  for (std::size_t b = 0; b < batch; ++b) {
    fused_layout.valid.push_back(video.layout.valid[b] + music.layout.valid[b]);
  }
  Var<T> memory = ad::concat_packed(v, video.layout.len, video.layout.valid, m,
                                    music.layout.len, music.layout.valid);
  for (auto& blk : fusion_) memory = blk(g, memory, fused_layout);
  // Same packing applied to the positional tables gives the key positions.
  Var<T> memory_pos = ad::concat_packed(g.constant(pe_v), video.layout.len,
                                        video.layout.valid, g.constant(pe_m),
                                        music.layout.len, music.layout.valid);

  Var<T> phi;
  switch (cfg_.phi0_source) {
    case Phi0Source::video:
      phi = h_v;
      break;
    case Phi0Source::zero:
      phi = g.constant(Tensor<T>(Shape{batch, d}));
      break;
    case Phi0Source::music_mean:
      phi = pool(music);
      break;
    case Phi0Source::music_xpool:
      phi = xpool(g, h_v, music, false);
      break;
  }
  const std::size_t nq = cfg_.query_tokens;
  std::vector<std::size_t> item(batch * nq);
  std::vector<std::size_t> token(batch * nq);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < nq; ++t) {
      item[b * nq + t] = b;
      token[b * nq + t] = t;
    }
  }
  if (nq > 1) phi = ad::gather_rows(phi, std::span<const std::size_t>(item));
  Var<T> qpos = ad::gather_rows(g.param(query_pos_), std::span<const std::size_t>(token));

  ad::AttentionLayout layout;
  layout.batch = batch;
  layout.q_len = nq;
  layout.k_len = fused_layout.len;
  layout.key_valid = fused_layout.valid;

  DetectionOutput<T> out;
  out.query_tokens = nq;
  auto predict = [&](const Var<T>& content) {
    Var<T> h = head_(g, content);
    MomentPrediction<T> p;
    if (cfg_.predict == Predict::center_width) {
      p.center = ad::slice_cols(h, 0, 1);
      p.width = ad::slice_cols(h, 1, 2);
    } else {
      if (fixed_width.size() != batch) {
        throw ContractError("detect: center_only prediction needs a fixed width per item");
      }
      Tensor<T> w(Shape{batch * nq, 1});
      for (std::size_t r = 0; r < batch * nq; ++r) w[r] = fixed_width[item[r]];
      p.center = h;
      p.width = g.constant(std::move(w));
    }
    return p;
  };
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    phi = decoder_[i](g, phi, qpos, memory, memory_pos, layout);
    if (cfg_.aux_loss || i + 1 == decoder_.size()) out.layers.push_back(predict(phi));
  }
  if (confidence_) out.confidence = ad::sigmoid((*confidence_)(g, phi));
  return out;
}

template <typename T>
GroundingOutput MadeModel<T>::forward(const Tensor<T>& video, const Tensor<T>& music,
                                      T fixed_width) {
  Graph<T> g(ad::GraphOptions{false, false, nullptr});
  const Tensor<T>* vp[] = {&video};
  const Tensor<T>* mp[] = {&music};
  Encoded<T> ev = enhance_video(g, pad_sequences<T>(vp));
  Encoded<T> em = enhance_music(g, pad_sequences<T>(mp));
  MatchOutput<T> mo = match(g, ev, em);
  const T widths[] = {fixed_width};
  DetectionOutput<T> det = detect(g, ev, em, mo.h_v, widths);
  const auto sel = det.select();
  return GroundingOutput{static_cast<double>(mo.p_s.value()[0]),
                         static_cast<double>(sel[0].first),
                         static_cast<double>(sel[0].second)};
}

template SeqBatch<float> pad_sequences(std::span<const Tensor<float>* const>, std::size_t);
template SeqBatch<double> pad_sequences(std::span<const Tensor<double>* const>, std::size_t);
template struct DetectionOutput<float>;
template struct DetectionOutput<double>;
template class MadeModel<float>;
template class MadeModel<double>;

}  // namespace made
