#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "made/metrics.hpp"
#include "made/model.hpp"
#include "made/tensor.hpp"

namespace made::data {

// ---- feature files ----------------------------------------------------------
//
// Layout (little-endian):
//   offset 0   char[4]  magic "MGSV"
//   offset 4   u16      version (1)
//   offset 6   u16      dtype code (1 = f32)
//   offset 8   u32      rows
//   offset 12  u32      cols (512 video, 768 music)
//   offset 16  f32      duration in seconds (> 0)
//   offset 20  f32[rows*cols] row-major payload

inline constexpr std::uint16_t kFeatureVersion = 1;
inline constexpr std::uint16_t kDtypeF32 = 1;
inline constexpr std::size_t kFeatureHeaderBytes = 20;
inline constexpr std::size_t kVideoWidth = 512;
inline constexpr std::size_t kMusicWidth = 768;

struct TokenSequence {
  Tensor<float> tokens;  // rows x cols
  float duration_sec = 0;
};

std::string encode_features(const Tensor<float>& tokens, float duration_sec);
TokenSequence decode_features(const std::string& bytes, const std::string& origin = "<memory>");
void write_features(const std::string& path, const Tensor<float>& tokens, float duration_sec);
TokenSequence read_features(const std::string& path);

// ---- manifests --------------------------------------------------------------

struct ManifestEntry {
  std::string video_id;
  std::string track_id;
  double moment_start = 0;
  double moment_width = 0;
  double video_duration = 0;
  double track_duration = 0;

  metrics::Interval moment() const { return {moment_start, moment_start + moment_width}; }
};

// One split. Stored as JSON lines: a header record
//   {"kind":"header","version":1,"split":..,"d_max":..,"candidates":[..]}
// followed by one {"kind":"entry", ...ManifestEntry fields} per video.
struct Manifest {
  std::string split;
  double d_max = 0;
  std::vector<std::string> candidates;
  std::vector<ManifestEntry> entries;

  // Moments inside their tracks, D_max covering every track, unique videos,
  // every ground-truth track among the candidates.
  void validate() const;
  double max_track_duration() const;
};

void write_manifest(const std::string& path, const Manifest& m);
Manifest read_manifest(const std::string& path);
// Splits must not share query videos; tracks may be shared.
void check_disjoint_videos(const std::vector<const Manifest*>& splits);

// ---- moment normalization ---------------------------------------------------

inline constexpr double kMinMomentSeconds = 0.5;

struct NormalizedMoment {
  double center = 0;
  double width = 0;
};

// (start + width/2) / D_max, width / D_max. Rejects moments outside the track
// when track_duration > 0.
NormalizedMoment normalize_moment(double start_sec, double width_sec, double d_max,
                                  double track_duration = 0);
// Inverse scaling, clamped to [0, track_duration] with at least 0.5 s length.
metrics::Interval denormalize_moment(double p_c, double p_w, double d_max,
                                     double track_duration);

// ---- feature store ----------------------------------------------------------

// In-memory features keyed by id. Files live at <root>/videos/<id>.mgsv and
// <root>/tracks/<id>.mgsv.
struct FeatureStore {
  std::map<std::string, TokenSequence> videos;
  std::map<std::string, TokenSequence> tracks;

  const TokenSequence& video(const std::string& id) const;
  const TokenSequence& track(const std::string& id) const;
  void load(const std::string& root, const Manifest& m);
  void save(const std::string& root) const;
};

std::string video_path(const std::string& root, const std::string& id);
std::string track_path(const std::string& root, const std::string& id);

// ---- synthetic dataset ------------------------------------------------------

struct SynthConfig {
  std::size_t n_tracks = 8;
  std::size_t videos_per_track = 4;
  std::size_t latent_dim = 32;
  double noise_sigma = 0.1;
  double track_min_sec = 60;
  double track_max_sec = 180;
  double video_min_sec = 10;
  double video_max_sec = 30;
  double window_sec = 10;
  double hop_sec = 5;
  double fps = 1;
  std::uint64_t seed = 0;
  // Split fractions by video; the test split takes the remainder.
  double train_fraction = 0.8;
  double val_fraction = 0.1;

  void validate() const;
};

void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

inline constexpr int kSynthVersion = 1;

// Number of segments for a track: floor((duration - window) / hop) + 1, min 1.
std::size_t segment_count(double duration_sec, double window_sec = 10, double hop_sec = 5);

struct SynthDataset {
  Manifest train, val, test;
  FeatureStore features;
  // Ground-truth linear lifts from latent space to token space.
  Tensor<float> video_lift;  // latent_dim x 512
  Tensor<float> music_lift;  // latent_dim x 768
};

// Planted-correlation data: every segment latent is a per-track base plus a
// per-segment code; music tokens lift segment latents, video frames lift the
// mean latent of the ground-truth moment's segments. Both add Gaussian noise.
SynthDataset synth_generate(const SynthConfig& cfg);
// Writes features and train/val/test manifests under root.
void write_dataset(const std::string& root, const SynthDataset& ds);

// ---- batching ---------------------------------------------------------------

// Deterministic shuffle keyed by (seed, epoch) cut into batches of batch_size.
// A trailing singleton is merged into the previous batch.
std::vector<std::vector<std::size_t>> make_batches(std::size_t n_entries,
                                                   std::size_t batch_size,
                                                   std::uint64_t seed, std::uint64_t epoch);

struct Batch {
  SeqBatch<float> video;
  SeqBatch<float> music;
  Tensor<float> target;  // B x 2 normalized (center, width)
  std::vector<std::string> track_ids;
  std::vector<float> fixed_width;  // video duration / D_max
};

Batch collate(const Manifest& m, const FeatureStore& store,
              const std::vector<std::size_t>& indices, double d_max);

}  // namespace made::data
