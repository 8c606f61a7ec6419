#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "made/nn.hpp"

namespace made {

using ad::Graph;
using ad::Parameter;
using ad::Var;
using nn::SeqLayout;

enum class Phi0Source { video, zero, music_mean, music_xpool };
enum class MatchingMode { both, mean_only, xpool_only, feature_add };
enum class LossMode { joint, single };
enum class Enhancement { sa, none, mlp };
enum class Predict { center_width, center_only };

// Architecture plus the ablation switches. Defaults are the full model.
struct ModelConfig {
  std::size_t d = 256;
  std::size_t heads = 8;
  std::size_t video_dim = 512;
  std::size_t music_dim = 768;
  std::size_t enc_sa_layers = 1;
  std::size_t fusion_sa_layers = 2;
  std::size_t decoder_ca_layers = 6;
  std::size_t query_tokens = 1;
  Phi0Source phi0_source = Phi0Source::video;
  MatchingMode matching_mode = MatchingMode::both;
  LossMode loss_mode = LossMode::joint;
  Enhancement enhancement = Enhancement::sa;
  Predict predict = Predict::center_width;
  // Apply the detection loss to every decoder layer instead of the last.
  bool aux_loss = false;

  void validate() const;
  bool uses_xpool() const { return matching_mode != MatchingMode::mean_only; }
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Padded batch of token sequences: tokens is (batch*len) x width.
template <typename T>
struct SeqBatch {
  Tensor<T> tokens;
  SeqLayout layout;
  std::size_t batch() const { return layout.batch(); }
};

// Pads sequences (each rows x width) into one batch with validity lengths.
template <typename T>
SeqBatch<T> pad_sequences(std::span<const Tensor<T>* const> seqs,
                          std::size_t min_len = 0);

template <typename T>
struct Encoded {
  Var<T> x;  // (batch*len) x d
  SeqLayout layout;
  std::size_t batch() const { return layout.batch(); }
};

// Paired matching outputs, one row per (video, track) pair.
template <typename T>
struct MatchOutput {
  Var<T> h_v;  // B x d
  Var<T> h0;   // B x d
  Var<T> h1;   // B x d, absent in mean_only mode
  Var<T> p_s;  // B x 1
};

// All-pairs similarities between Bv videos and Bm tracks, each Bv x Bm.
template <typename T>
struct SimilarityOutput {
  Var<T> sim0;   // cs(h_v, h0): both, mean_only
  Var<T> sim1;   // cs(h_v, h1): both, xpool_only
  Var<T> added;  // cs(h_v, h0 + h1): feature_add
  Var<T> score;  // p_s for ranking
};

template <typename T>
struct MomentPrediction {
  Var<T> center;  // (B*query_tokens) x 1
  Var<T> width;   // (B*query_tokens) x 1
};

template <typename T>
struct DetectionOutput {
  std::vector<MomentPrediction<T>> layers;  // supervised layers; back() is final
  Var<T> confidence;                        // (B*query_tokens) x 1 when query_tokens > 1
  std::size_t query_tokens = 1;

  // Per-item (center, width) of the selected query token.
  std::vector<std::pair<T, T>> select() const;
};

struct GroundingOutput {
  double p_s = 0;
  double p_c = 0;
  double p_w = 0;
};

// Joint video-to-music matching and music-moment detection network.
template <typename T>
class MadeModel {
 public:
  explicit MadeModel(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }
  // Deterministic initialization; decoder, query token and heads use xavier,
  // everything else kaiming. The logit scale starts at ln(1/0.07).
  void init(std::uint64_t seed);
  void visit(const nn::ParamVisitor<T>& fn);
  std::vector<Parameter<T>*> parameters();
  std::size_t parameter_count();
  Parameter<T>* find(const std::string& name);

  Parameter<T>& logit_scale() { return logit_scale_; }

  Encoded<T> enhance_video(Graph<T>& g, const SeqBatch<T>& frames);
  Encoded<T> enhance_music(Graph<T>& g, const SeqBatch<T>& segments);
  Var<T> pool(const Encoded<T>& seq);
  // Video-conditioned attention pooling of track segments. With all_pairs,
  // h_v (Bv x d) attends over every track of `music` (Bm tracks) and row
  // m*Bv + v of the result pools track m for video v. Otherwise Bv == Bm and
  // row b pools track b for video b.
  Var<T> xpool(Graph<T>& g, const Var<T>& h_v, const Encoded<T>& music, bool all_pairs);

  MatchOutput<T> match(Graph<T>& g, const Encoded<T>& video, const Encoded<T>& music);
  SimilarityOutput<T> similarities(Graph<T>& g, const Var<T>& h_v, const Var<T>& h0,
                                   const Encoded<T>& music);
  // fixed_width[b] is used as p_w when predict == center_only.
  DetectionOutput<T> detect(Graph<T>& g, const Encoded<T>& video,
                            const Encoded<T>& music, const Var<T>& h_v,
                            std::span<const T> fixed_width = {});

  // Single pair, eval mode. Tokens are F x video_dim and S x music_dim.
  GroundingOutput forward(const Tensor<T>& video, const Tensor<T>& music,
                          T fixed_width = T(0.5));

 private:
  struct XPool {
    nn::Linear<T> wq, wk, wv, wo;
  };

  Encoded<T> enhance(Graph<T>& g, const SeqBatch<T>& in, nn::Linear<T>& proj,
                     std::vector<nn::EncoderBlock<T>>& blocks, nn::Linear<T>* mlp1,
                     nn::Linear<T>* mlp2);

  ModelConfig cfg_;
  nn::Linear<T> video_proj_, music_proj_;
  std::vector<nn::EncoderBlock<T>> video_enc_, music_enc_;
  nn::Linear<T> video_mlp1_, video_mlp2_, music_mlp1_, music_mlp2_;
  std::optional<XPool> xpool_;
  std::vector<nn::EncoderBlock<T>> fusion_;
  std::vector<nn::DecoderBlock<T>> decoder_;
  Parameter<T> query_pos_;
  nn::MlpHead<T> head_;
  std::optional<nn::Linear<T>> confidence_;
  Parameter<T> logit_scale_;
};

extern template class MadeModel<float>;
extern template class MadeModel<double>;

}  // namespace made
