#pragma once

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

#include "ibg/basis.hpp"
#include "ibg/edges.hpp"
#include "ibg/graph.hpp"
#include "ibg/train.hpp"

namespace ibg {

// Stage knobs; negative values defer to the task defaults.
struct TrainStageConfig {
  long epochs = -1;
  long warmup = -1;
  long eval_every = -1;
  bool train_on_full = false;
  double early_stop_loss = -1.0;
  ModAddArch arch;
  std::vector<std::string> train_files, test_files;  // cifar batch files
};

struct BasisStageConfig {
  std::vector<BasisKind> kinds = {BasisKind::Lib, BasisKind::Pca};
  double lambda_tol = -1.0;
  double pca_tol = -1.0;
};

struct EdgesStageConfig {
  int alpha_steps = 50;
  EdgeAveraging averaging = EdgeAveraging::Rms;
  bool shortcut = true;                // one-point grid on elementwise gaps
  bool approx_linear_attention = true; // one-point grid on token-mixing gaps too
  Eigen::Index data_limit = 0;         // cifar: cap on analysis datapoints, 0 = all
};

struct AblateStageConfig {
  Metric metric = Metric::Accuracy;
  double drop = 0.001;  // threshold = base - drop (accuracy) or base + drop (loss)
};

struct ClusterStageConfig {
  double gamma = 0.5;
  double eps = -1.0;  // -1: smallest positive ablation epsilon
};

// One config drives the whole run: every stage reads and writes artifacts
// under `out`, and all randomness forks off `seed` by stable stage labels.
struct PipelineConfig {
  std::string task;  // modadd | cifar
  std::string out;
  std::string model;  // pretrained model path; replaces the train stage
  uint64_t seed = 0;
  bool deterministic = true;
  int threads = 1;
  int p = 113;  // modadd modulus
  std::string analysis_basis = "lib";
  std::vector<std::string> stages;
  TrainStageConfig train;
  BasisStageConfig basis;
  EdgesStageConfig edges;
  AblateStageConfig ablate;
  ClusterStageConfig cluster;
};

// Strict parse: unknown keys, wrong types, unsatisfiable stage lists, and
// missing referenced files all raise ConfigError.
PipelineConfig parse_pipeline_config(const nlohmann::json& doc);

// Reads and parses a config file; the IBG_OUT environment variable, when
// set, overrides the configured output directory.
PipelineConfig load_pipeline_config(const std::string& path);

// The materialized config (defaults filled in) echoed into the manifest.
nlohmann::json effective_config_json(const PipelineConfig& cfg);

// Runs the configured stages in order, persisting every artifact under
// cfg.out and maintaining out/manifest.json: per-stage status, a SHA-256
// per written file, and the config echo. A stage failure records a "failed"
// marker in the manifest and rethrows. Returns the manifest.
nlohmann::json run_pipeline(const PipelineConfig& cfg);

// Trains per the config and writes model.ibgm, summary.json, and
// train_log.jsonl into dir. Returns the summary.
nlohmann::json run_train_stage(const PipelineConfig& cfg, const std::string& dir);

struct ExportOptions {
  std::string format = "json";  // json | dot
  double min_edge = 0.0;
  Eigen::Index max_edges_per_gap = 0;
  int top_nodes = 0;             // keep only the first N nodes per section
  std::string keep_from_report;  // ablation report; keeps each gap's kept-count edges
};

// Rebuilds the interaction graph from a run directory's artifacts (joining
// persisted labels and communities) and writes it in the requested format.
void export_run_graph(const std::string& run_dir, const ExportOptions& opt,
                      const std::string& out_path);

}  // namespace ibg
