#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "apfl/datagen.hpp"
#include "apfl/diagnostics.hpp"
#include "apfl/federation.hpp"

namespace apfl {

enum class DatasetKind { synthetic, csv };
enum class PartitionKind { iid, by_label };

// Fully resolved experiment description. parse_config fills every default so
// the emitted provenance carries no silent values.
struct ExperimentConfig {
  Mode mode = Mode::apfl;
  std::size_t n = 0;
  std::size_t K = 0;
  std::size_t tau = 10;
  std::size_t T = 0;
  std::size_t batch_size = 20;
  std::size_t eval_every = 1;
  std::uint64_t seed = 1;
  int workers = 1;
  double val_fraction = 0.2;
  bool chain_rule = true;
  AlphaCadence cadence = AlphaCadence::per_round;
  bool diagnostics = false;

  AlphaMode alpha_mode = AlphaMode::fixed;
  double alpha_value = 0.25;  // fixed value or adaptive starting point

  ModelKind model_kind = ModelKind::logistic;
  double l2_reg = 0.01;
  std::vector<std::size_t> hidden = {200, 200};

  DatasetKind dataset_kind = DatasetKind::synthetic;
  double gamma = 0.0;
  double beta = 0.0;
  std::size_t per_client = 200;
  std::size_t d_feat = 20;
  std::size_t classes = 10;
  std::string csv_path;
  PartitionKind partition = PartitionKind::iid;
  std::size_t classes_per_client = 2;

  LrKind lr_kind = LrKind::geometric;
  double eta0 = 0.1;
  double decay = 0.01;
  double eta_const = 0.01;
  double lr_numerator = 16.0;
  double lr_kappa_factor = 128.0;

  std::size_t diag_probes = 16;
  double gd_tol = 1e-8;
  double diag_C = 1.0;
  double diag_B = 1.0;
  double diag_G = 1.0;
  double diag_delta = 0.05;
  double diag_radius = 1.0;
  double diag_C2 = 1.0;
  std::size_t diag_directions = 32;
  std::size_t diag_ascent_steps = 50;
};

// Parses either the flat `key = value` format (one pair per line, '#'
// comments, sections spelled as dotted keys) or a provenance JSON document
// (its "config" object). Unknown keys and constraint violations are errors
// that name the offending key and values.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig parse_config_file(const std::string& path);

// Builds the federated dataset the config describes, train/val split applied.
FederatedDataset build_dataset(const ExperimentConfig& cfg);

// Projects the config onto engine options; for the theory schedule mu and
// kappa come from the analytic logistic bounds over this dataset.
RunOptions to_run_options(const ExperimentConfig& cfg, const FederatedDataset& dataset);

std::string format_metrics_csv(const std::vector<MetricsRow>& rows);
void write_metrics(const std::vector<MetricsRow>& rows, const std::string& path);
std::vector<MetricsRow> parse_metrics_csv(const std::string& text);

std::string provenance_json(const ExperimentConfig& cfg,
                            const DatasetProvenance& dataset,
                            std::size_t d_feat, std::size_t n_classes,
                            double total_wallclock_ms);

// Model checkpoint: 16-byte header (magic "APFLMDL1", u32 version, u32
// record count) followed by length-prefixed little-endian f64 records:
// [w_hat, w_last, alpha_final, v_hat x n, v_bar_last x n].
struct SavedModels {
  ParamVector w_hat;
  ParamVector w_last;
  std::vector<double> alpha_final;
  std::vector<ParamVector> v_hat;
  std::vector<ParamVector> v_bar_last;
};
void save_models(const std::string& path, const RunResult& result);
SavedModels load_models(const std::string& path);

struct DiagnosticsResult {
  DiversityReport report;
  bool strongly_convex = false;  // delta / alpha* sections present
  std::vector<GeneralizationInputs> inputs;  // per client, when strongly convex
  std::vector<double> alpha_star;
  std::vector<double> bound_at_star;
};

// Shared by `run --diagnostics` and the `diagnose` subcommand. Probes are
// trajectory iterates plus diag.probes random Gaussian points plus (when
// strongly convex) the oracle optima.
DiagnosticsResult run_diagnostics(const ExperimentConfig& cfg,
                                  const FederatedDataset& dataset,
                                  const std::vector<ParamVector>& trajectory_probes,
                                  const std::vector<double>& client_alphas);
std::string diagnostics_json(const DiagnosticsResult& diag, const ExperimentConfig& cfg);

struct RunOutput {
  RunResult result;
  FederatedDataset dataset;
  double wallclock_ms = 0.0;
};

// Executes the config and writes metrics.csv, provenance.json, models.bin
// (and diagnostics.json when requested) into out_dir.
RunOutput run_to_dir(const ExperimentConfig& cfg, const std::string& out_dir);

// `gen-data`: one CSV per client plus provenance.json.
void write_dataset_dir(const FederatedDataset& dataset, const std::string& out_dir);

}  // namespace apfl
