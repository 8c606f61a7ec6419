#include "made/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace made::data {

namespace fs = std::filesystem;

// ---- feature files ----------------------------------------------------------

namespace {

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint16_t get_u16(const std::string& in, std::size_t off) {
  return static_cast<std::uint16_t>(static_cast<unsigned char>(in[off]) |
                                    (static_cast<unsigned char>(in[off + 1]) << 8));
}

std::uint32_t get_u32(const std::string& in, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[off + i])) << (8 * i);
  }
  return v;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::string encode_features(const Tensor<float>& tokens, float duration_sec) {
  const std::size_t cols = tokens.cols();
  if (tokens.rank() != 2 || tokens.rows() == 0) {
    throw DataError("feature file: tokens must be a non-empty matrix");
  }
  if (cols != kVideoWidth && cols != kMusicWidth) {
    throw DataError("feature file: token width must be 512 or 768, got " + std::to_string(cols));
  }
  if (!(duration_sec > 0)) throw DataError("feature file: duration must be positive");
  std::string out;
  out.reserve(kFeatureHeaderBytes + tokens.size() * 4);
  out.append("MGSV", 4);
  put_u16(out, kFeatureVersion);
  put_u16(out, kDtypeF32);
  put_u32(out, static_cast<std::uint32_t>(tokens.rows()));
  put_u32(out, static_cast<std::uint32_t>(cols));
  put_u32(out, std::bit_cast<std::uint32_t>(duration_sec));
  for (float v : tokens.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

TokenSequence decode_features(const std::string& bytes, const std::string& origin) {
  if (bytes.size() < kFeatureHeaderBytes) {
    throw DataError(origin + ": truncated feature header");
  }
  if (bytes.compare(0, 4, "MGSV") != 0) throw DataError(origin + ": bad magic");
  const std::uint16_t version = get_u16(bytes, 4);
  if (version != kFeatureVersion) {
    throw DataError(origin + ": unsupported feature version " + std::to_string(version));
  }
  if (get_u16(bytes, 6) != kDtypeF32) throw DataError(origin + ": unsupported dtype code");
  const std::size_t rows = get_u32(bytes, 8);
  const std::size_t cols = get_u32(bytes, 12);
  const float duration = std::bit_cast<float>(get_u32(bytes, 16));
  if (rows == 0) throw DataError(origin + ": zero rows");
  if (cols != kVideoWidth && cols != kMusicWidth) {
    throw DataError(origin + ": token width " + std::to_string(cols) + " is not 512 or 768");
  }
  if (!(duration > 0) || !std::isfinite(duration)) {
    throw DataError(origin + ": duration must be positive");
  }
  const std::size_t expected = kFeatureHeaderBytes + rows * cols * 4;
  if (bytes.size() < expected) throw DataError(origin + ": truncated payload");
  if (bytes.size() > expected) throw DataError(origin + ": trailing bytes after payload");
  std::vector<float> data(rows * cols);
  for (std::size_t i = 0; i < data.size(); ++i) {
    data[i] = std::bit_cast<float>(get_u32(bytes, kFeatureHeaderBytes + 4 * i));
  }
  TokenSequence seq{Tensor<float>(Shape{rows, cols}, std::move(data)), duration};
  if (!seq.tokens.all_finite()) throw DataError(origin + ": non-finite token values");
  return seq;
}

void write_features(const std::string& path, const Tensor<float>& tokens, float duration_sec) {
  const std::string bytes = encode_features(tokens, duration_sec);
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  fs::rename(tmp, path);
}

TokenSequence read_features(const std::string& path) {
  return decode_features(read_file(path), path);
}

// ---- manifests --------------------------------------------------------------

double Manifest::max_track_duration() const {
  double mx = 0;
  for (const auto& e : entries) mx = std::max(mx, e.track_duration);
  return mx;
}

void Manifest::validate() const {
  std::set<std::string> seen;
  const std::set<std::string> cands(candidates.begin(), candidates.end());
  if (!(d_max > 0)) throw DataError("manifest " + split + ": D_max must be positive");
  for (const auto& e : entries) {
    const std::string where = "manifest " + split + ", video " + e.video_id;
    if (e.video_id.empty() || e.track_id.empty()) throw DataError(where + ": empty id");
    if (!seen.insert(e.video_id).second) throw DataError(where + ": duplicate video id");
    if (!(e.moment_start >= 0)) throw DataError(where + ": negative moment start");
    if (!(e.moment_width > 0)) throw DataError(where + ": non-positive moment width");
    if (!(e.track_duration > 0) || !(e.video_duration > 0)) {
      throw DataError(where + ": non-positive duration");
    }
    if (e.moment_start + e.moment_width > e.track_duration + 1e-9) {
      throw DataError(where + ": moment exceeds its track");
    }
    if (e.track_duration > d_max + 1e-9) throw DataError(where + ": track longer than D_max");
    if (!cands.empty() && cands.count(e.track_id) == 0) {
      throw DataError(where + ": track " + e.track_id + " missing from candidates");
    }
  }
}

void write_manifest(const std::string& path, const Manifest& m) {
  m.validate();
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest " + path);
  nlohmann::json header{{"kind", "header"},
                        {"version", 1},
                        {"split", m.split},
                        {"d_max", m.d_max},
                        {"candidates", m.candidates}};
  out << header.dump() << '\n';
  for (const auto& e : m.entries) {
    nlohmann::json j{{"kind", "entry"},
                     {"video_id", e.video_id},
                     {"track_id", e.track_id},
                     {"moment_start_sec", e.moment_start},
                     {"moment_width_sec", e.moment_width},
                     {"video_duration", e.video_duration},
                     {"track_duration", e.track_duration}};
    out << j.dump() << '\n';
  }
}

Manifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path);
  Manifest m;
  bool have_header = false;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const std::string kind = j.at("kind").get<std::string>();
      if (kind == "header") {
        if (j.at("version").get<int>() != 1) throw DataError("unsupported manifest version");
        m.split = j.at("split").get<std::string>();
        m.d_max = j.at("d_max").get<double>();
        m.candidates = j.at("candidates").get<std::vector<std::string>>();
        have_header = true;
      } else if (kind == "entry") {
        ManifestEntry e;
        e.video_id = j.at("video_id").get<std::string>();
        e.track_id = j.at("track_id").get<std::string>();
        e.moment_start = j.at("moment_start_sec").get<double>();
        e.moment_width = j.at("moment_width_sec").get<double>();
        e.video_duration = j.at("video_duration").get<double>();
        e.track_duration = j.at("track_duration").get<double>();
        m.entries.push_back(std::move(e));
      } else {
        throw DataError("unknown record kind '" + kind + "'");
      }
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (!have_header) throw DataError(path + ": missing manifest header");
  m.validate();
  return m;
}

void check_disjoint_videos(const std::vector<const Manifest*>& splits) {
  std::map<std::string, std::string> owner;
  for (const Manifest* m : splits) {
    for (const auto& e : m->entries) {
      auto [it, fresh] = owner.emplace(e.video_id, m->split);
      if (!fresh) {
        throw DataError("video " + e.video_id + " appears in splits " + it->second + " and " +
                        m->split);
      }
    }
  }
}

// ---- moment normalization ---------------------------------------------------

NormalizedMoment normalize_moment(double start_sec, double width_sec, double d_max,
                                  double track_duration) {
  if (!(d_max > 0)) throw ContractError("normalize_moment: D_max must be positive");
  if (!(width_sec > 0)) throw ContractError("normalize_moment: width must be positive");
  if (start_sec < 0 || (track_duration > 0 && start_sec + width_sec > track_duration + 1e-9)) {
    throw DataError("normalize_moment: moment lies outside its track");
  }
  return {(start_sec + width_sec / 2) / d_max, width_sec / d_max};
}

metrics::Interval denormalize_moment(double p_c, double p_w, double d_max,
                                     double track_duration) {
  if (!(d_max > 0) || !(track_duration > 0)) {
    throw ContractError("denormalize_moment: durations must be positive");
  }
  const double center = p_c * d_max;
  const double width = p_w * d_max;
  double start = std::clamp(center - width / 2, 0.0, track_duration);
  double end = std::clamp(center + width / 2, 0.0, track_duration);
  const double min_len = std::min(kMinMomentSeconds, track_duration);
  if (end - start < min_len) {
    // Grow around the clamped center, then shift back inside the track.
    const double mid = (start + end) / 2;
    start = mid - min_len / 2;
    end = mid + min_len / 2;
    if (start < 0) {
      end -= start;
      start = 0;
    }
    if (end > track_duration) {
      start -= end - track_duration;
      end = track_duration;
    }
  }
  return {start, end};
}

// ---- feature store ----------------------------------------------------------

std::string video_path(const std::string& root, const std::string& id) {
  return (fs::path(root) / "videos" / (id + ".mgsv")).string();
}

std::string track_path(const std::string& root, const std::string& id) {
  return (fs::path(root) / "tracks" / (id + ".mgsv")).string();
}

const TokenSequence& FeatureStore::video(const std::string& id) const {
  auto it = videos.find(id);
  if (it == videos.end()) throw DataError("no features for video " + id);
  return it->second;
}

const TokenSequence& FeatureStore::track(const std::string& id) const {
  auto it = tracks.find(id);
  if (it == tracks.end()) throw DataError("no features for track " + id);
  return it->second;
}

void FeatureStore::load(const std::string& root, const Manifest& m) {
  for (const auto& e : m.entries) {
    if (!videos.count(e.video_id)) {
      TokenSequence s = read_features(video_path(root, e.video_id));
      if (s.tokens.cols() != kVideoWidth) {
        throw DataError("video " + e.video_id + " has token width " +
                        std::to_string(s.tokens.cols()));
      }
      videos.emplace(e.video_id, std::move(s));
    }
  }
  std::vector<std::string> ids = m.candidates;
  for (const auto& e : m.entries) ids.push_back(e.track_id);
  for (const auto& id : ids) {
    if (!tracks.count(id)) {
      TokenSequence s = read_features(track_path(root, id));
      if (s.tokens.cols() != kMusicWidth) {
        throw DataError("track " + id + " has token width " + std::to_string(s.tokens.cols()));
      }
      tracks.emplace(id, std::move(s));
    }
  }
}

void FeatureStore::save(const std::string& root) const {
  for (const auto& [id, s] : videos) write_features(video_path(root, id), s.tokens, s.duration_sec);
  for (const auto& [id, s] : tracks) write_features(track_path(root, id), s.tokens, s.duration_sec);
}

// ---- synthetic dataset ------------------------------------------------------

void SynthConfig::validate() const {
  if (n_tracks == 0 || videos_per_track == 0) throw ConfigError("synth: empty dataset");
  if (latent_dim == 0) throw ConfigError("synth: latent_dim must be positive");
  if (noise_sigma < 0) throw ConfigError("synth: noise_sigma must be >= 0");
  if (!(hop_sec > 0) || !(window_sec > 0) || !(fps > 0)) {
    throw ConfigError("synth: window, hop and fps must be positive");
  }
  if (!(video_min_sec >= window_sec)) {
    throw ConfigError("synth: infeasible durations (videos shorter than one segment window)");
  }
  if (!(video_max_sec >= video_min_sec) || !(track_max_sec >= track_min_sec)) {
    throw ConfigError("synth: infeasible durations (empty range)");
  }
  if (!(track_min_sec >= video_max_sec)) {
    throw ConfigError("synth: infeasible durations (tracks shorter than the longest video)");
  }
  if (std::floor(video_max_sec / hop_sec) < std::ceil(video_min_sec / hop_sec) ||
      std::floor(track_max_sec / hop_sec) < std::ceil(track_min_sec / hop_sec)) {
    throw ConfigError("synth: infeasible durations (no hop-aligned value in range)");
  }
  if (!(train_fraction > 0) || val_fraction < 0 || train_fraction + val_fraction > 1) {
    throw ConfigError("synth: bad split fractions");
  }
}

void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = nlohmann::json{{"version", kSynthVersion},
                     {"n_tracks", c.n_tracks},
                     {"videos_per_track", c.videos_per_track},
                     {"latent_dim", c.latent_dim},
                     {"noise_sigma", c.noise_sigma},
                     {"track_min_sec", c.track_min_sec},
                     {"track_max_sec", c.track_max_sec},
                     {"video_min_sec", c.video_min_sec},
                     {"video_max_sec", c.video_max_sec},
                     {"window_sec", c.window_sec},
                     {"hop_sec", c.hop_sec},
                     {"fps", c.fps},
                     {"seed", c.seed},
                     {"train_fraction", c.train_fraction},
                     {"val_fraction", c.val_fraction}};
}

void from_json(const nlohmann::json& j, SynthConfig& c) {
  SynthConfig d;
  static const std::set<std::string> known{
      "version",       "n_tracks",      "videos_per_track", "latent_dim",   "noise_sigma",
      "track_min_sec", "track_max_sec", "video_min_sec",    "video_max_sec", "window_sec",
      "hop_sec",       "fps",           "seed",             "train_fraction", "val_fraction"};
  if (!j.is_object()) throw ConfigError("synth config: expected an object");
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError("synth config: unknown key '" + key + "'");
  }
  try {
    if (j.value("version", kSynthVersion) != kSynthVersion) {
      throw ConfigError("synth: unsupported generator version");
    }
    c.n_tracks = j.value("n_tracks", d.n_tracks);
    c.videos_per_track = j.value("videos_per_track", d.videos_per_track);
    c.latent_dim = j.value("latent_dim", d.latent_dim);
    c.noise_sigma = j.value("noise_sigma", d.noise_sigma);
    c.track_min_sec = j.value("track_min_sec", d.track_min_sec);
    c.track_max_sec = j.value("track_max_sec", d.track_max_sec);
    c.video_min_sec = j.value("video_min_sec", d.video_min_sec);
    c.video_max_sec = j.value("video_max_sec", d.video_max_sec);
    c.window_sec = j.value("window_sec", d.window_sec);
    c.hop_sec = j.value("hop_sec", d.hop_sec);
    c.fps = j.value("fps", d.fps);
    c.seed = j.value("seed", d.seed);
    c.train_fraction = j.value("train_fraction", d.train_fraction);
    c.val_fraction = j.value("val_fraction", d.val_fraction);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("synth config: ") + e.what());
  }
  c.validate();
}

std::size_t segment_count(double duration_sec, double window_sec, double hop_sec) {
  if (duration_sec < window_sec) return 1;
  return static_cast<std::size_t>(std::floor((duration_sec - window_sec) / hop_sec)) + 1;
}

namespace {

std::string make_id(char prefix, std::size_t i, int width) {
  std::string digits = std::to_string(i);
  if (static_cast<int>(digits.size()) < width) {
    digits.insert(0, static_cast<std::size_t>(width) - digits.size(), '0');
  }
  return std::string(1, prefix) + digits;
}

// Uniform hop-aligned value in [lo, hi].
double aligned_uniform(std::mt19937_64& rng, double lo, double hi, double hop) {
  const auto a = static_cast<long>(std::ceil(lo / hop - 1e-9));
  const auto b = static_cast<long>(std::floor(hi / hop + 1e-9));
  std::uniform_int_distribution<long> dist(a, b);
  return static_cast<double>(dist(rng)) * hop;
}

Tensor<float> random_lift(std::mt19937_64& rng, std::size_t latent, std::size_t width) {
  // Latents have variance 2 (base + code), so this gives unit-variance tokens.
  std::normal_distribution<double> dist(0.0, std::sqrt(1.0 / (2.0 * static_cast<double>(latent))));
  Tensor<float> lift(Shape{latent, width});
  for (auto& v : lift.storage()) v = static_cast<float>(dist(rng));
  return lift;
}

void lift_row(const std::vector<double>& latent, const Tensor<float>& lift, double sigma,
              std::mt19937_64& rng, float* out) {
  std::normal_distribution<double> noise(0.0, 1.0);
  const std::size_t width = lift.cols();
  for (std::size_t j = 0; j < width; ++j) {
    double v = 0;
    for (std::size_t k = 0; k < latent.size(); ++k) v += latent[k] * lift(k, j);
    out[j] = static_cast<float>(v + sigma * noise(rng));
  }
}

}  // namespace

SynthDataset synth_generate(const SynthConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  SynthDataset ds;
  ds.video_lift = random_lift(rng, cfg.latent_dim, kVideoWidth);
  ds.music_lift = random_lift(rng, cfg.latent_dim, kMusicWidth);

  struct TrackInfo {
    std::string id;
    double duration;
    std::vector<std::vector<double>> latents;  // per segment
  };
  std::vector<TrackInfo> tracks;
  for (std::size_t t = 0; t < cfg.n_tracks; ++t) {
    TrackInfo info;
    info.id = make_id('t', t, 4);
    info.duration = aligned_uniform(rng, cfg.track_min_sec, cfg.track_max_sec, cfg.hop_sec);
    const std::size_t segs = segment_count(info.duration, cfg.window_sec, cfg.hop_sec);
    std::vector<double> base(cfg.latent_dim);
    for (auto& v : base) v = normal(rng);
    for (std::size_t s = 0; s < segs; ++s) {
      std::vector<double> lat(base);
      for (auto& v : lat) v += normal(rng);
      info.latents.push_back(std::move(lat));
    }
    Tensor<float> tokens(Shape{segs, kMusicWidth});
    for (std::size_t s = 0; s < segs; ++s) {
      lift_row(info.latents[s], ds.music_lift, cfg.noise_sigma, rng, &tokens(s, 0));
    }
    ds.features.tracks.emplace(info.id, TokenSequence{std::move(tokens),
                                                      static_cast<float>(info.duration)});
    tracks.push_back(std::move(info));
  }

  std::vector<ManifestEntry> entries;
  std::size_t vid = 0;
  for (const TrackInfo& tr : tracks) {
    const std::size_t segs = tr.latents.size();
    for (std::size_t k = 0; k < cfg.videos_per_track; ++k, ++vid) {
      ManifestEntry e;
      e.video_id = make_id('v', vid, 5);
      e.track_id = tr.id;
      e.track_duration = tr.duration;
      e.video_duration = aligned_uniform(rng, cfg.video_min_sec, cfg.video_max_sec, cfg.hop_sec);
      e.moment_width = e.video_duration;
      // Segment-aligned moment: segments first..last lie fully inside it.
      const auto span = static_cast<std::size_t>(
          std::llround((e.moment_width - cfg.window_sec) / cfg.hop_sec)) + 1;
      const std::size_t max_first = segs >= span ? segs - span : 0;
      std::uniform_int_distribution<std::size_t> first_dist(0, max_first);
      const std::size_t first = first_dist(rng);
      e.moment_start = static_cast<double>(first) * cfg.hop_sec;
      std::vector<double> mean(cfg.latent_dim, 0.0);
      const std::size_t last = std::min(segs, first + span);
      for (std::size_t s = first; s < last; ++s) {
        for (std::size_t c = 0; c < cfg.latent_dim; ++c) mean[c] += tr.latents[s][c];
      }
      for (auto& v : mean) v /= static_cast<double>(last - first);
      const auto frames = static_cast<std::size_t>(
          std::max(1.0, std::floor(e.video_duration * cfg.fps)));
      Tensor<float> tokens(Shape{frames, kVideoWidth});
      for (std::size_t f = 0; f < frames; ++f) {
        lift_row(mean, ds.video_lift, cfg.noise_sigma, rng, &tokens(f, 0));
      }
      ds.features.videos.emplace(e.video_id, TokenSequence{std::move(tokens),
                                                           static_cast<float>(e.video_duration)});
      entries.push_back(std::move(e));
    }
  }

  std::vector<std::size_t> order(entries.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t n = entries.size();
  const auto n_train = static_cast<std::size_t>(std::llround(cfg.train_fraction * static_cast<double>(n)));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(
                                               std::llround(cfg.val_fraction * static_cast<double>(n))));
  double d_max = 0;
  for (const auto& tr : tracks) d_max = std::max(d_max, tr.duration);

  auto build = [&](const std::string& name, std::size_t begin, std::size_t end) {
    Manifest m;
    m.split = name;
    m.d_max = d_max;
    std::vector<std::size_t> picked(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                    order.begin() + static_cast<std::ptrdiff_t>(end));
    std::sort(picked.begin(), picked.end());
    std::set<std::string> cands;
    for (std::size_t i : picked) {
      m.entries.push_back(entries[i]);
      cands.insert(entries[i].track_id);
    }
    m.candidates.assign(cands.begin(), cands.end());
    m.validate();
    return m;
  };
  ds.train = build("train", 0, n_train);
  ds.val = build("val", n_train, n_train + n_val);
  ds.test = build("test", n_train + n_val, n);
  return ds;
}

void write_dataset(const std::string& root, const SynthDataset& ds) {
  fs::create_directories(root);
  ds.features.save(root);
  write_manifest((fs::path(root) / "train.jsonl").string(), ds.train);
  write_manifest((fs::path(root) / "val.jsonl").string(), ds.val);
  write_manifest((fs::path(root) / "test.jsonl").string(), ds.test);
}

// ---- batching ---------------------------------------------------------------

std::vector<std::vector<std::size_t>> make_batches(std::size_t n_entries, std::size_t batch_size,
                                                   std::uint64_t seed, std::uint64_t epoch) {
  if (batch_size < 2) throw ConfigError("batch_size must be >= 2 for the contrastive loss");
  if (n_entries < 2) throw DataError("need at least two training pairs");
  std::vector<std::size_t> order(n_entries);
  std::iota(order.begin(), order.end(), 0);
  std::seed_seq sseq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                     static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32)};
  std::mt19937_64 rng(sseq);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < n_entries; i += batch_size) {
    const std::size_t end = std::min(n_entries, i + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  if (batches.size() > 1 && batches.back().size() == 1) {
    batches[batches.size() - 2].push_back(batches.back()[0]);
    batches.pop_back();
  }
  return batches;
}

Batch collate(const Manifest& m, const FeatureStore& store,
              const std::vector<std::size_t>& indices, double d_max) {
  if (indices.empty()) throw ContractError("collate: empty batch");
  std::vector<const Tensor<float>*> vids;
  std::vector<const Tensor<float>*> trks;
  Batch b;
  b.target = Tensor<float>(Shape{indices.size(), 2});
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const ManifestEntry& e = m.entries.at(indices[r]);
    vids.push_back(&store.video(e.video_id).tokens);
    trks.push_back(&store.track(e.track_id).tokens);
    const NormalizedMoment y = normalize_moment(e.moment_start, e.moment_width, d_max,
                                                e.track_duration);
    b.target(r, 0) = static_cast<float>(y.center);
    b.target(r, 1) = static_cast<float>(y.width);
    b.track_ids.push_back(e.track_id);
    b.fixed_width.push_back(static_cast<float>(std::min(0.999, e.video_duration / d_max)));
  }
  b.video = pad_sequences<float>(vids);
  b.music = pad_sequences<float>(trks);
  return b;
}

}  // namespace made::data
