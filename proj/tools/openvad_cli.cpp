#include <atomic>
#include <cmath>
#include <csignal>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <thread>

#include "CLI11.hpp"
#include "openvad/core.hpp"
#include "openvad/data.hpp"
#include "openvad/eval.hpp"
#include "openvad/model.hpp"
#include "openvad/service.hpp"
#include "openvad/train.hpp"

namespace fs = std::filesystem;
using namespace openvad;

namespace {

// Every Config field becomes a flag of the same name. Values are kept as text
// and converted using the type of the field's default.
struct ConfigFlags {
  std::string config_file;
  std::map<std::string, std::string> values;

  void attach(CLI::App* app) {
    app->add_option("--config", config_file, "Flat JSON config file; flags override its fields");
    const Json defaults = Config{}.to_json();
    for (const auto& [key, value] : defaults.items()) {
      app->add_option("--" + key, values[key], "Config field (default: " + value.dump() + ")");
    }
  }

  Config resolve(const CLI::App* app, Json base = Config{}.to_json()) const {
    if (!config_file.empty()) {
      for (const auto& [k, v] : load_json(config_file).items()) base[k] = v;
    }
    const Json defaults = Config{}.to_json();
    for (const auto& [key, text] : values) {
      if (app->count("--" + key) == 0) continue;
      const Json& d = defaults.at(key);
      try {
        if (d.is_boolean()) {
          if (text == "true" || text == "1") base[key] = true;
          else if (text == "false" || text == "0") base[key] = false;
          else throw ValidationError("");
        } else if (d.is_number_unsigned() || d.is_number_integer()) {
          std::size_t used = 0;
          const long long v = std::stoll(text, &used);
          if (used != text.size()) throw ValidationError("");
          base[key] = v;
        } else if (d.is_number()) {
          std::size_t used = 0;
          const double v = std::stod(text, &used);
          if (used != text.size()) throw ValidationError("");
          base[key] = v;
        } else {
          base[key] = text;
        }
      } catch (const std::exception&) {
        throw ValidationError("flag --" + key + " has an invalid value '" + text + "'");
      }
    }
    try {
      return validate_config(Config::from_json(base));
    } catch (const ValidationError& e) {
      throw ValidationError(std::string(e.what()) + " (check the corresponding --flag)");
    }
  }

  bool any_given(const CLI::App* app) const {
    if (!config_file.empty()) return true;
    for (const auto& [key, text] : values) {
      if (app->count("--" + key) > 0) return true;
    }
    return false;
  }
};

void echo_config(const Config& cfg) { std::cerr << Json{{"resolved_config", cfg.to_json()}}.dump() << std::endl; }

void require_exists(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw NotFoundError(what + " not found: " + p.string());
}

/// Checkpoint with its configuration, optionally overridden by flags. An
/// architecture mismatch between flags and checkpoint is a validation error.
Checkpoint load_for_inference(const fs::path& path, const ConfigFlags& flags, const CLI::App* app, Config& resolved) {
  require_exists(path, "checkpoint");
  Checkpoint ck = load_checkpoint(path);
  resolved = flags.any_given(app) ? flags.resolve(app, ck.model.config().to_json()) : ck.model.config();
  if (config_hash(resolved, ck.model.embed_dim()) != ck.hash) {
    throw ValidationError("flags change the architecture of checkpoint " + path.string());
  }
  return ck;
}

std::optional<Split> parse_optional_split(const std::string& s) {
  if (s.empty() || s == "all") return std::nullopt;
  return parse_split(s);
}

std::atomic<HttpServer*> g_server{nullptr};

void handle_signal(int) {
  if (HttpServer* s = g_server.load()) s->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Open-world video anomaly detection toolkit"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  // synth
  SyntheticSpec spec;
  fs::path synth_out;
  ConfigFlags synth_flags;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  synth->add_option("--out", synth_out, "Output dataset directory")->required();
  synth->add_option("--num_categories", spec.num_categories, "Anomaly categories")->capture_default_str();
  synth->add_option("--train_videos", spec.train_videos, "Training videos")->capture_default_str();
  synth->add_option("--val_videos", spec.val_videos, "Validation videos")->capture_default_str();
  synth->add_option("--test_videos", spec.test_videos, "Test videos")->capture_default_str();
  synth->add_option("--abnormal_ratio", spec.abnormal_ratio, "Share of abnormal videos per split")->capture_default_str();
  synth->add_option("--embed_dim", spec.embed_dim, "Feature width E")->capture_default_str();
  synth->add_option("--min_length", spec.min_length, "Minimum feature steps per video")->capture_default_str();
  synth->add_option("--max_length", spec.max_length, "Maximum feature steps per video")->capture_default_str();
  synth->add_option("--min_anomaly_fraction", spec.min_anomaly_fraction, "Minimum anomalous share of a video")
      ->capture_default_str();
  synth->add_option("--max_anomaly_fraction", spec.max_anomaly_fraction, "Maximum anomalous share of a video")
      ->capture_default_str();
  synth->add_option("--noise", spec.noise, "Gaussian noise level")->capture_default_str();
  synth->add_option("--stride_frames", spec.stride_frames, "Frames per feature step")->capture_default_str();
  synth->add_option("--fps", spec.fps, "Source frame rate")->capture_default_str();
  synth_flags.attach(synth);

  // knn
  fs::path knn_data, knn_out;
  ConfigFlags knn_flags;
  auto* knn = app.add_subcommand("knn", "Build the nearest-normal-neighbour index of a dataset");
  knn->add_option("--data", knn_data, "Dataset directory")->required();
  knn->add_option("--out", knn_out, "Index file (default: <data>/knn.json)");
  knn_flags.attach(knn);

  // train
  fs::path train_data, train_out, train_log;
  bool train_resume = false;
  ConfigFlags train_flags;
  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--data", train_data, "Dataset directory")->required();
  train->add_option("--out", train_out, "Run directory for checkpoints and logs")->required();
  train->add_option("--log", train_log, "Training log (default: <out>/train_log.jsonl)");
  train->add_flag("--resume", train_resume, "Continue from <out>/last.ckpt");
  train_flags.attach(train);

  // eval
  fs::path eval_ckpt, eval_report, eval_dump, eval_subsets;
  std::vector<fs::path> eval_data, eval_defs;
  std::vector<std::string> eval_metrics;
  std::string eval_split = "val";
  int protocol = 1;
  ConfigFlags eval_flags;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint under protocol 1 or 2");
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  eval->add_option("--data", eval_data, "Dataset directory (repeat for several test sets)")->required();
  eval->add_option("--definition", eval_defs, "Definition file per dataset (default: <data>/definition.json)");
  eval->add_option("--metric", eval_metrics, "auc or ap per dataset (default: auc)");
  eval->add_option("--split", eval_split, "Split to evaluate (train, val, test or all)")->capture_default_str();
  eval->add_option("--protocol", protocol, "1 = per-dataset, 2 = drift@k over subsets")
      ->check(CLI::IsMember({1, 2}))
      ->capture_default_str();
  eval->add_option("--subsets", eval_subsets, "Subset file for protocol 2");
  eval->add_option("--report", eval_report, "Write the report here as well as to stdout");
  eval->add_option("--dump", eval_dump, "Score dump (JSONL)");
  eval_flags.attach(eval);

  // score
  fs::path score_ckpt, score_data, score_def;
  std::string score_video_id;
  ConfigFlags score_flags;
  auto* score = app.add_subcommand("score", "Score one video under a definition");
  score->add_option("--checkpoint", score_ckpt, "Checkpoint file")->required();
  score->add_option("--data", score_data, "Dataset directory")->required();
  score->add_option("--video", score_video_id, "Video id")->required();
  score->add_option("--definition", score_def, "Definition file")->required();
  score_flags.attach(score);

  // serve
  fs::path serve_ckpt, serve_data;
  std::string serve_host = "127.0.0.1", serve_split = "all";
  int serve_port = 8080;
  ConfigFlags serve_flags;
  auto* serve = app.add_subcommand("serve", "Run the scoring HTTP service");
  serve->add_option("--checkpoint", serve_ckpt, "Checkpoint file")->required();
  serve->add_option("--data", serve_data, "Dataset directory")->required();
  serve->add_option("--host", serve_host, "Bind address")->capture_default_str();
  serve->add_option("--port", serve_port, "Port")->capture_default_str();
  serve->add_option("--split", serve_split, "Split to serve (train, val, test or all)")->capture_default_str();
  serve_flags.attach(serve);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*synth) {
      const Config cfg = synth_flags.resolve(synth);
      echo_config(cfg);
      spec.seed = cfg.seed;
      try {
        spec.validate();
      } catch (const ValidationError& e) {
        throw ValidationError(std::string("flag --") + e.what());
      }
      write_dataset(synth_out, generate_synthetic_dataset(spec));
      std::cout << Json{{"dataset", synth_out.string()}}.dump() << std::endl;
    } else if (*knn) {
      const Config cfg = knn_flags.resolve(knn);
      echo_config(cfg);
      require_exists(manifest_path(knn_data), "manifest");
      const auto manifest = load_manifest(manifest_path(knn_data));
      const PrototypeTable table = load_prototypes(prototypes_path(knn_data));
      const FeatureRepository repo(features_dir(knn_data), table.embed_dim);
      const KnnIndex index = build_knn_index(repo, manifest, cfg.knn_n);
      const fs::path out = knn_out.empty() ? knn_data / "knn.json" : knn_out;
      save_json(out, index.to_json());
      std::cout << Json{{"knn", out.string()}, {"videos", index.neighbors.size()}, {"truncated", index.truncated}}.dump()
                << std::endl;
    } else if (*train) {
      const Config cfg = train_flags.resolve(train);
      echo_config(cfg);
      require_exists(manifest_path(train_data), "manifest");
      fs::create_directories(train_out);
      save_json(train_out / "config.json", cfg.to_json());
      const fs::path log_path = train_log.empty() ? train_out / "train_log.jsonl" : train_log;
      std::ofstream log(log_path, train_resume ? std::ios::app : std::ios::trunc);
      if (!log) throw Error("cannot write training log " + log_path.string());
      FitOptions opts;
      opts.output_dir = train_out;
      opts.log = &log;
      opts.resume = train_resume;
      const FitResult r = fit_directory(train_data, cfg, opts);
      std::cout << Json{{"best_checkpoint", (train_out / "best.ckpt").string()},
                        {"last_checkpoint", (train_out / "last.ckpt").string()},
                        {"steps", r.steps},
                        {"best_epoch", r.best_epoch},
                        {"best_val_frame_auc", std::isfinite(r.best_metric) ? Json(r.best_metric) : Json(nullptr)}}
                       .dump()
                << std::endl;
    } else if (*eval) {
      Config cfg;
      Checkpoint ck = load_for_inference(eval_ckpt, eval_flags, eval, cfg);
      echo_config(cfg);
      if (!eval_defs.empty() && eval_defs.size() != eval_data.size()) {
        throw ValidationError("--definition must be given once per --data or not at all");
      }
      if (!eval_metrics.empty() && eval_metrics.size() != eval_data.size()) {
        throw ValidationError("--metric must be given once per --data or not at all");
      }
      std::vector<EvalTarget> targets;
      std::optional<TextEncoder> encoder;
      for (std::size_t i = 0; i < eval_data.size(); ++i) {
        const fs::path& dir = eval_data[i];
        require_exists(manifest_path(dir), "manifest");
        if (!encoder) encoder = TextEncoder::toy(load_prototypes(prototypes_path(dir)));
        EvalTarget t;
        t.name = dir.filename().string().empty() ? dir.parent_path().filename().string() : dir.filename().string();
        const fs::path def_path = eval_defs.empty() ? definition_path(dir) : eval_defs[i];
        require_exists(def_path, "definition");
        t.definition = load_definition(def_path);
        t.metric = eval_metrics.empty() ? DetectionMetric::kAuc : parse_detection_metric(eval_metrics[i]);
        const auto split = parse_optional_split(eval_split);
        if (split) {
          t.videos = load_split_videos(dir, *split);
        } else {
          for (Split s : {Split::kTrain, Split::kVal, Split::kTest}) {
            auto part = load_split_videos(dir, s);
            t.videos.insert(t.videos.end(), part.begin(), part.end());
          }
        }
        targets.push_back(std::move(t));
      }
      std::ofstream dump;
      if (!eval_dump.empty()) dump.open(eval_dump);
      std::ostream* dump_ptr = eval_dump.empty() ? nullptr : &dump;
      EvalReport report;
      if (protocol == 1) {
        report = evaluate_protocol1(ck.model, *encoder, targets, dump_ptr);
      } else {
        if (eval_subsets.empty()) throw ValidationError("protocol 2 needs --subsets");
        require_exists(eval_subsets, "subset file");
        if (targets.size() != 1) throw ValidationError("protocol 2 evaluates exactly one --data");
        report = evaluate_protocol2(ck.model, *encoder, targets.front(), load_subsets(eval_subsets), dump_ptr);
      }
      const Json j = report.to_json();
      if (!eval_report.empty()) save_json(eval_report, j);
      std::cout << j.dump() << std::endl;
    } else if (*score) {
      Config cfg;
      Checkpoint ck = load_for_inference(score_ckpt, score_flags, score, cfg);
      echo_config(cfg);
      require_exists(score_def, "definition");
      require_exists(manifest_path(score_data), "manifest");
      const AnomalyDefinition def = load_definition(score_def);
      const PrototypeTable table = load_prototypes(prototypes_path(score_data));
      const FeatureRepository repo(features_dir(score_data), table.embed_dim);
      const FeatureSequence seq = repo.read(score_video_id);
      const ScoreResult r = score_video(ck.model, TextEncoder::toy(table), seq, def);
      std::vector<double> scores(static_cast<std::size_t>(r.y_bin.size()));
      for (std::size_t t = 0; t < scores.size(); ++t) {
        scores[t] = 1.0 / (1.0 + std::exp(-r.y_bin(static_cast<Eigen::Index>(t))));
      }
      std::vector<double> y_bin(r.y_bin.data(), r.y_bin.data() + r.y_bin.size());
      std::vector<double> probs(r.video_class_probs.data(), r.video_class_probs.data() + r.video_class_probs.size());
      Json y_mul = Json::array();
      for (Eigen::Index t = 0; t < r.y_mul.rows(); ++t) {
        y_mul.push_back(std::vector<double>(r.y_mul.row(t).data(), r.y_mul.row(t).data() + r.y_mul.cols()));
      }
      std::cout << Json{{"video_id", score_video_id},
                        {"frame_scores", scores},
                        {"y_bin", y_bin},
                        {"y_mul", y_mul},
                        {"video_class_probs", probs},
                        {"stride_frames", seq.stride_frames},
                        {"fps", seq.fps},
                        {"definition_used", r.definition_used.to_json()}}
                       .dump()
                << std::endl;
    } else if (*serve) {
      Config cfg;
      require_exists(manifest_path(serve_data), "manifest");
      load_for_inference(serve_ckpt, serve_flags, serve, cfg);
      echo_config(cfg);
      const auto split = parse_optional_split(serve_split);
      auto service = std::make_shared<ScoringService>();
      std::thread loader([service, ckpt = serve_ckpt, data = serve_data, split] {
        try {
          service->set_state(load_service_state(ckpt, data, split));
          log_info("repository loaded");
        } catch (const std::exception& e) {
          log_warning(std::string("loading failed: ") + e.what());
        }
      });
      HttpServer server(service);
      g_server = &server;
      std::signal(SIGINT, handle_signal);
      std::signal(SIGTERM, handle_signal);
      log_info("listening on " + serve_host + ":" + std::to_string(serve_port));
      server.listen_blocking(serve_host, serve_port);
      g_server = nullptr;
      loader.join();
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 2;
  } catch (const NotFoundError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
