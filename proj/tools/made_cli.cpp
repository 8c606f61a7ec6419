#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "made/data.hpp"
#include "made/error.hpp"
#include "made/train.hpp"

namespace fs = std::filesystem;
using namespace made;

namespace {

nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

// --data wins; MADE_DATA_ROOT fills in when the flag is absent.
std::string data_root(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("MADE_DATA_ROOT"); env != nullptr && *env != '\0') {
    return env;
  }
  throw ConfigError("no dataset root: pass --data or set MADE_DATA_ROOT");
}

std::string split_path(const std::string& root, const std::string& split) {
  return (fs::path(root) / (split + ".jsonl")).string();
}

int gen_synth(const std::string& config, const std::string& out) {
  data::SynthConfig cfg;
  if (!config.empty()) cfg = read_json(config).get<data::SynthConfig>();
  const data::SynthDataset ds = data::synth_generate(cfg);
  data::write_dataset(out, ds);
  std::ofstream((fs::path(out) / "synth_config.json").string()) << nlohmann::json(cfg).dump(2)
                                                                << '\n';
  std::cout << "wrote " << ds.train.entries.size() << "/" << ds.val.entries.size() << "/"
            << ds.test.entries.size() << " train/val/test pairs over "
            << ds.features.tracks.size() << " tracks to " << out << '\n';
  return 0;
}

struct TrainArgs {
  std::string data, config, out, resume;
  std::uint64_t stop_after = 0;
  std::optional<std::size_t> epochs, batch_size;
  std::optional<std::uint64_t> seed;
};

int train_cmd(const TrainArgs& a) {
  const std::string root = data_root(a.data);
  train::TrainConfig cfg;
  if (!a.config.empty()) cfg = train::load_train_config(a.config);
  if (a.epochs) cfg.epochs = *a.epochs;
  if (a.batch_size) cfg.batch_size = *a.batch_size;
  if (a.seed) cfg.seed = *a.seed;
  cfg.validate();

  const data::Manifest train_m = data::read_manifest(split_path(root, "train"));
  std::optional<data::Manifest> val_m;
  if (fs::exists(split_path(root, "val"))) {
    val_m = data::read_manifest(split_path(root, "val"));
    data::check_disjoint_videos({&train_m, &*val_m});
  }
  data::FeatureStore store;
  store.load(root, train_m);
  if (val_m) store.load(root, *val_m);

  train::Trainer trainer(cfg, train_m, store, val_m ? &*val_m : nullptr);
  train::RunOptions opts;
  opts.out_dir = a.out;
  opts.stop_after = a.stop_after;
  if (!a.resume.empty()) opts.resume = train::load_checkpoint(a.resume);
  fs::create_directories(a.out);
  std::ofstream(fs::path(a.out) / "config.json") << nlohmann::json(cfg).dump(2) << '\n';
  const train::RunResult r = train::run_training(trainer, opts);
  std::cout << "steps " << r.steps << "/" << trainer.total_steps();
  if (r.best_metric) std::cout << " best validation metric " << *r.best_metric;
  std::cout << '\n';
  return 0;
}

struct EvalArgs {
  std::string ckpt, data, mode = "msg", report, split = "test", predictions;
};

int eval_cmd(const EvalArgs& a) {
  const std::string root = data_root(a.data);
  const train::Checkpoint ckpt = train::load_checkpoint(a.ckpt);
  MadeModel<float> model = train::model_from_checkpoint(ckpt);
  const data::Manifest m = data::read_manifest(split_path(root, a.split));
  data::FeatureStore store;
  store.load(root, m);
  train::EvalOptions opts;
  opts.batch_size = ckpt.config.batch_size;
  opts.moment_topk = ckpt.config.moment_topk;
  std::vector<metrics::RankedPrediction> preds;
  const metrics::EvalReport report =
      train::evaluate(model, m, store, ckpt.d_max, a.mode, opts, &preds);
  const nlohmann::json j = report.to_json();
  if (a.report.empty()) {
    std::cout << j.dump(2) << '\n';
  } else {
    const fs::path rp(a.report);
    if (rp.has_parent_path()) fs::create_directories(rp.parent_path());
    std::ofstream(rp) << j.dump(2) << '\n';
    const std::string pred_path =
        a.predictions.empty() ? (rp.parent_path() / (rp.stem().string() + ".predictions.jsonl"))
                                    .string()
                              : a.predictions;
    metrics::write_predictions(pred_path, preds);
    std::cout << a.mode << " mIoU " << report.miou;
    for (const auto& [k, v] : report.recall) std::cout << " R@" << k << " " << v;
    for (const auto& [k, v] : report.moment_recall) std::cout << " MoR@" << k << " " << v;
    std::cout << '\n';
  }
  return 0;
}

struct PredictArgs {
  std::string ckpt, video, out;
  std::vector<std::string> tracks;
  std::size_t topk = 0;
};

int predict_cmd(const PredictArgs& a) {
  const train::Checkpoint ckpt = train::load_checkpoint(a.ckpt);
  MadeModel<float> model = train::model_from_checkpoint(ckpt);
  const data::TokenSequence video = data::read_features(a.video);
  std::vector<train::Candidate> cands;
  for (const auto& t : a.tracks) {
    cands.push_back({fs::path(t).stem().string(), data::read_features(t)});
  }
  const metrics::RankedPrediction p = train::predict(model, ckpt.d_max,
                                                     fs::path(a.video).stem().string(), video,
                                                     cands, a.topk);
  const std::string line = metrics::prediction_to_json(p).dump();
  if (a.out.empty()) {
    std::cout << line << '\n';
  } else {
    std::ofstream(a.out) << line << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Video-to-music moment grounding: data generation, training and evaluation"};
  app.require_subcommand(1);

  std::string synth_config, synth_out;
  auto* gen = app.add_subcommand("gen-synth", "Generate a synthetic planted-correlation dataset");
  gen->add_option("--config", synth_config, "Synthetic dataset config (JSON)");
  gen->add_option("--out", synth_out, "Output dataset directory")->required();

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train a model");
  tr->add_option("--data", ta.data, "Dataset root (or MADE_DATA_ROOT)");
  tr->add_option("--config", ta.config, "Training config (JSON)");
  tr->add_option("--out", ta.out, "Output directory for checkpoints and logs")->required();
  tr->add_option("--resume", ta.resume, "Continue from a checkpoint");
  tr->add_option("--stop-after", ta.stop_after, "Stop once this global step is reached");
  tr->add_option("--epochs", ta.epochs, "Override epochs");
  tr->add_option("--batch-size", ta.batch_size, "Override batch size");
  tr->add_option("--seed", ta.seed, "Override seed");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  ev->add_option("--ckpt", ea.ckpt, "Checkpoint file")->required();
  ev->add_option("--data", ea.data, "Dataset root (or MADE_DATA_ROOT)");
  ev->add_option("--mode", ea.mode, "smg or msg")->check(CLI::IsMember({"smg", "msg"}));
  ev->add_option("--report", ea.report, "Report JSON path (stdout when omitted)");
  ev->add_option("--split", ea.split, "Manifest split name")->check(
      CLI::IsMember({"train", "val", "test"}));
  ev->add_option("--predictions", ea.predictions, "Prediction file path");

  PredictArgs pa;
  auto* pr = app.add_subcommand("predict", "Rank tracks and detect moments for one video");
  pr->add_option("--ckpt", pa.ckpt, "Checkpoint file")->required();
  pr->add_option("--video", pa.video, "Video feature file")->required();
  pr->add_option("--tracks", pa.tracks, "Candidate track feature files")->required();
  pr->add_option("--topk", pa.topk, "Detect moments on the top k tracks (0: all)");
  pr->add_option("--out", pa.out, "Output JSON-lines file (stdout when omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*gen) return gen_synth(synth_config, synth_out);
    if (*tr) return train_cmd(ta);
    if (*ev) return eval_cmd(ea);
    if (*pr) return predict_cmd(pa);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
