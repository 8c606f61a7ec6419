#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "made/data.hpp"
#include "made/losses.hpp"
#include "made/metrics.hpp"
#include "made/model.hpp"

namespace made::train {

enum class Selection { miou, r1 };

struct TrainConfig {
  double lr = 1e-4;
  double warmup_proportion = 0.02;
  std::size_t epochs = 40;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  // Global gradient-norm clip; 0 disables.
  double clip_norm = 1.0;
  loss::DuplicatePolicy duplicate_policy = loss::DuplicatePolicy::mask_same_track;
  // Validation metric used to keep best.ckpt: SmG mIoU or MsG R@1.
  Selection selection = Selection::miou;
  // Validate every this many epochs; 0 disables validation.
  std::size_t eval_every = 1;
  // MsG: moments are detected on this many top-ranked tracks (plus the
  // ground-truth track); the rest of the ranking carries no moment.
  std::size_t moment_topk = 10;
  ModelConfig model;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
// Unknown keys are rejected.
void from_json(const nlohmann::json& j, TrainConfig& c);
TrainConfig load_train_config(const std::string& path);

// Linear warmup from 0 to cfg.lr over warmup_proportion * total_steps, then
// cosine decay to 0 at total_steps.
double cosine_lr(std::size_t step, std::size_t total_steps, const TrainConfig& cfg);

// Adam with bias correction, state kept per parameter in visit order.
class Adam {
 public:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  explicit Adam(const std::vector<Parameter<float>*>& params);
  void step(const std::vector<Parameter<float>*>& params, double lr);

  std::uint64_t t = 0;
  std::vector<Tensor<float>> m;
  std::vector<Tensor<float>> v;
};

// Scales all gradients so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
double clip_grad_norm(const std::vector<Parameter<float>*>& params, double max_norm);

// ---- checkpoint -------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  TrainConfig config;
  double d_max = 0;
  std::uint64_t step = 0;
  std::uint64_t adam_t = 0;
  std::string rng_state;
  std::optional<double> best_metric;
  std::uint64_t best_step = 0;
  std::map<std::string, Tensor<float>> params;
  std::map<std::string, Tensor<float>> adam_m;
  std::map<std::string, Tensor<float>> adam_v;
};

// Binary container: "MADECKPT", u32 version, u64 length + JSON metadata,
// u32 tensor count, then per tensor u32 name length, name, u32 rank, u32
// extents, little-endian f32 payload.
std::string encode_checkpoint(const Checkpoint& c);
Checkpoint decode_checkpoint(const std::string& bytes, const std::string& origin = "<memory>");
void save_checkpoint(const std::string& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::string& path);

// Builds the model described by a checkpoint and loads its weights.
MadeModel<float> model_from_checkpoint(const Checkpoint& c);

// ---- evaluation -------------------------------------------------------------

struct EvalOptions {
  std::size_t batch_size = 32;
  std::size_t moment_topk = 10;
};

metrics::GroundTruthMap ground_truth(const data::Manifest& m);

// SmG: one moment per query on its ground-truth track.
std::vector<metrics::RankedPrediction> predict_smg(MadeModel<float>& model,
                                                   const data::Manifest& m,
                                                   const data::FeatureStore& store,
                                                   double d_max, const EvalOptions& opts = {});
// MsG: every query ranked against the manifest's candidate tracks.
std::vector<metrics::RankedPrediction> predict_msg(MadeModel<float>& model,
                                                   const data::Manifest& m,
                                                   const data::FeatureStore& store,
                                                   double d_max, const EvalOptions& opts = {});

// Runs predict_smg or predict_msg and scores the result. When predictions is
// non-null it receives the per-query records.
metrics::EvalReport evaluate(MadeModel<float>& model, const data::Manifest& m,
                             const data::FeatureStore& store, double d_max,
                             const std::string& mode, const EvalOptions& opts = {},
                             std::vector<metrics::RankedPrediction>* predictions = nullptr);

struct Candidate {
  std::string track_id;
  data::TokenSequence features;
};

// Ranks the candidates for one query video and detects a moment on each of
// the top `moment_topk` tracks (all of them when 0).
metrics::RankedPrediction predict(MadeModel<float>& model, double d_max,
                                  const std::string& query_id,
                                  const data::TokenSequence& video,
                                  const std::vector<Candidate>& candidates,
                                  std::size_t moment_topk = 0);

// ---- training ---------------------------------------------------------------

struct StepStats {
  std::uint64_t step = 0;  // 1-based index of the completed step
  std::size_t epoch = 0;
  double lr = 0;
  double loss = 0;
  double matching = 0;
  double detection = 0;
  double grad_norm = 0;
};

struct LossTerms {
  Var<float> matching;
  Var<float> detection;
  Var<float> total;
};

// Training objective for one collated batch on graph g.
LossTerms batch_loss(Graph<float>& g, MadeModel<float>& model, const data::Batch& batch,
                     loss::DuplicatePolicy policy);

class Trainer {
 public:
  Trainer(TrainConfig cfg, const data::Manifest& train, const data::FeatureStore& store,
          const data::Manifest* val = nullptr);

  // One optimizer step on the next batch. Throws NumericError on a
  // non-finite loss or gradient; last_batch() names the offending pairs.
  StepStats step();
  // Runs validation if this step closed an epoch scheduled for it, updating
  // the best metric. Returns the report when validation ran.
  std::optional<metrics::EvalReport> end_of_step();

  bool done() const { return step_ >= total_steps_; }
  std::uint64_t global_step() const { return step_; }
  std::size_t total_steps() const { return total_steps_; }
  std::size_t steps_per_epoch() const { return steps_per_epoch_; }
  bool improved() const { return improved_; }
  std::optional<double> best_metric() const { return best_metric_; }
  double d_max() const { return d_max_; }
  const std::vector<std::size_t>& last_batch() const { return last_batch_; }
  const data::Manifest& train_manifest() const { return train_; }

  MadeModel<float>& model() { return model_; }
  const TrainConfig& config() const { return cfg_; }

  Checkpoint checkpoint();
  void restore(const Checkpoint& c);

 private:
  TrainConfig cfg_;
  const data::Manifest& train_;
  const data::FeatureStore& store_;
  const data::Manifest* val_;
  double d_max_;
  MadeModel<float> model_;
  std::vector<Parameter<float>*> params_;
  Adam adam_;
  std::mt19937_64 rng_;
  std::uint64_t step_ = 0;
  std::size_t steps_per_epoch_ = 0;
  std::size_t total_steps_ = 0;
  std::size_t cached_epoch_ = static_cast<std::size_t>(-1);
  std::vector<std::vector<std::size_t>> epoch_batches_;
  std::vector<std::size_t> last_batch_;
  std::optional<double> best_metric_;
  std::uint64_t best_step_ = 0;
  bool improved_ = false;
};

struct RunOptions {
  std::string out_dir;            // last.ckpt, best.ckpt, train_log.jsonl
  std::uint64_t stop_after = 0;   // stop once this global step is reached; 0 = run to the end
  std::optional<Checkpoint> resume;
  // Called after every step; returning false stops training.
  std::function<bool(const StepStats&, Trainer&)> on_step;
  bool quiet = false;
};

struct RunResult {
  std::uint64_t steps = 0;
  std::optional<double> best_metric;
  std::vector<StepStats> history;
};

// Full loop: steps, validation, checkpointing and a JSON-lines log. A
// non-finite loss writes nonfinite_batch.json into out_dir and rethrows.
RunResult run_training(Trainer& trainer, const RunOptions& opts);

}  // namespace made::train
