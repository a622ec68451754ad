#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "apfl/harness.hpp"
#include "doctest.h"

using namespace apfl;
namespace fs = std::filesystem;

TEST_SUITE_BEGIN("harness");

namespace {

const char* kMinimalConfig =
    "mode = apfl\n"
    "n = 10\n"
    "K = 10\n"
    "tau = 10\n"
    "T = 100\n"
    "dataset.synthetic.gamma = 0.5\n"
    "dataset.synthetic.beta = 0.5\n";

std::string tiny_run_config(std::uint64_t seed, const std::string& extra = "") {
  std::ostringstream cfg;
  cfg << "mode = apfl\n"
         "n = 4\n"
         "tau = 5\n"
         "T = 25\n"
         "batch_size = 8\n"
         "seed = " << seed << "\n"
         "alpha.fixed = 0.5\n"
         "dataset.synthetic.gamma = 0.5\n"
         "dataset.synthetic.beta = 0.5\n"
         "dataset.synthetic.per_client = 30\n"
         "dataset.synthetic.d_feat = 4\n"
         "dataset.synthetic.classes = 3\n"
      << extra;
  return cfg.str();
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("minimal config resolves documented defaults") {
  ExperimentConfig cfg = parse_config(kMinimalConfig);
  CHECK(cfg.mode == Mode::apfl);
  CHECK(cfg.n == 10);
  CHECK(cfg.K == 10);
  CHECK(cfg.batch_size == 20);
  CHECK(cfg.val_fraction == 0.2);
  CHECK(cfg.eval_every == 1);
  CHECK(cfg.seed == 1);
  CHECK(cfg.workers == 1);
  CHECK(cfg.chain_rule);
  CHECK(cfg.cadence == AlphaCadence::per_round);
  CHECK(cfg.alpha_mode == AlphaMode::fixed);
  CHECK(cfg.alpha_value == 0.25);
  CHECK(cfg.model_kind == ModelKind::logistic);
  CHECK(cfg.l2_reg == 0.01);
  CHECK(cfg.per_client == 200);
  CHECK(cfg.lr_kind == LrKind::geometric);
}

TEST_CASE("K defaults to n when omitted") {
  ExperimentConfig cfg = parse_config(
      "mode = apfl\nn = 7\nT = 50\n"
      "dataset.synthetic.gamma = 0\ndataset.synthetic.beta = 0\n");
  CHECK(cfg.K == 7);
}

TEST_CASE("constraint violations name both values") {
  std::string bad = std::string(kMinimalConfig);
  bad.replace(bad.find("K = 10"), 6, "K = 12");
  CHECK_THROWS_WITH_AS(parse_config(bad), doctest::Contains("K=12 > n=10"),
                       std::invalid_argument);
}

TEST_CASE("alpha out of range is rejected") {
  CHECK_THROWS_WITH_AS(
      parse_config(std::string(kMinimalConfig) + "alpha.fixed = 1.5\n"),
      doctest::Contains("alpha.fixed=1.5"), std::invalid_argument);
}

TEST_CASE("unknown and duplicate keys are rejected by name") {
  CHECK_THROWS_WITH_AS(parse_config(std::string(kMinimalConfig) + "bogus = 1\n"),
                       doctest::Contains("bogus"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config(std::string(kMinimalConfig) + "n = 10\n"),
                       doctest::Contains("duplicate"), std::invalid_argument);
}

TEST_CASE("required keys and dataset section") {
  CHECK_THROWS_AS(parse_config("mode = apfl\nT = 10\n"
                               "dataset.synthetic.gamma = 0\n"
                               "dataset.synthetic.beta = 0\n"),
                  std::invalid_argument);  // missing n
  CHECK_THROWS_AS(parse_config("mode = apfl\nn = 2\nT = 10\n"),
                  std::invalid_argument);  // no dataset
  CHECK_THROWS_AS(
      parse_config("mode = apfl\nn = 2\nT = 10\n"
                   "dataset.synthetic.gamma = 0\ndataset.synthetic.beta = 0\n"
                   "dataset.csv.path = x.csv\n"),
      std::invalid_argument);  // both sections
}

TEST_CASE("baseline modes pin the mixing weight") {
  std::string fed = std::string(kMinimalConfig);
  fed.replace(fed.find("mode = apfl"), 11, "mode = fedavg");
  ExperimentConfig cfg = parse_config(fed);
  CHECK(cfg.alpha_mode == AlphaMode::fixed);
  CHECK(cfg.alpha_value == 0.0);

  std::string local = std::string(kMinimalConfig);
  local.replace(local.find("mode = apfl"), 11, "mode = local_only");
  ExperimentConfig cfg2 = parse_config(local);
  CHECK(cfg2.alpha_value == 1.0);
}

TEST_CASE("theory schedule requires a strongly convex model") {
  CHECK_THROWS_AS(
      parse_config(std::string(kMinimalConfig) + "lr.kind = theory\nmodel.kind = mlp\n"),
      std::invalid_argument);
  CHECK_THROWS_AS(
      parse_config(std::string(kMinimalConfig) + "lr.kind = theory\nmodel.l2_reg = 0\n"),
      std::invalid_argument);
}

TEST_CASE("provenance json re-parses to the same resolved config") {
  ExperimentConfig cfg = parse_config(tiny_run_config(9));
  DatasetProvenance prov;
  prov.generator = "synthetic";
  prov.seed = 9;
  std::string doc = provenance_json(cfg, prov, 4, 3, 12.5);
  ExperimentConfig re = parse_config(doc);
  std::string doc2 = provenance_json(re, prov, 4, 3, 12.5);
  CHECK(doc == doc2);
}

TEST_CASE("metrics csv format") {
  CHECK(format_metrics_csv({}) ==
        "round,iteration,pers_train_loss,pers_val_acc,locglob_train_loss,"
        "locglob_val_acc,global_val_acc,mean_alpha,wallclock_ms\n");

  MetricsRow row;
  row.round = 3;
  row.iteration = 30;
  row.pers_train_loss = 0.123456789123;
  row.pers_val_acc = 0.5;
  row.locglob_train_loss = 1.0 / 3.0;
  row.locglob_val_acc = 1.0;
  row.global_val_acc = 0.25;
  row.mean_alpha = 0.01;
  std::string text = format_metrics_csv({row});
  std::vector<MetricsRow> parsed = parse_metrics_csv(text);
  REQUIRE(parsed.size() == 1);
  CHECK(parsed[0].round == 3);
  CHECK(parsed[0].iteration == 30);
  // Round-trips exactly at the printed 9-significant-digit precision.
  CHECK(format_metrics_csv(parsed) == text);
}

TEST_CASE("run_to_dir writes the documented artifacts deterministically") {
  ExperimentConfig cfg = parse_config(tiny_run_config(5));
  fs::path dir1 = fresh_dir("apfl_run_a");
  fs::path dir2 = fresh_dir("apfl_run_b");
  run_to_dir(cfg, dir1.string());
  run_to_dir(cfg, dir2.string());

  for (const char* name : {"metrics.csv", "provenance.json", "models.bin"}) {
    CHECK(fs::exists(dir1 / name));
    CHECK(fs::exists(dir2 / name));
  }
  CHECK(slurp(dir1 / "metrics.csv") == slurp(dir2 / "metrics.csv"));
  CHECK(slurp(dir1 / "models.bin") == slurp(dir2 / "models.bin"));

  // Re-running from the emitted provenance alone reproduces the run.
  ExperimentConfig from_prov = parse_config(slurp(dir1 / "provenance.json"));
  fs::path dir3 = fresh_dir("apfl_run_c");
  run_to_dir(from_prov, dir3.string());
  CHECK(slurp(dir3 / "metrics.csv") == slurp(dir1 / "metrics.csv"));

  // Thread count must not leak into the metric bytes.
  ExperimentConfig threaded = cfg;
  threaded.workers = 4;
  fs::path dir4 = fresh_dir("apfl_run_d");
  run_to_dir(threaded, dir4.string());
  CHECK(slurp(dir4 / "metrics.csv") == slurp(dir1 / "metrics.csv"));

  // Rounds are strictly increasing in the emitted csv.
  std::vector<MetricsRow> rows = parse_metrics_csv(slurp(dir1 / "metrics.csv"));
  REQUIRE(rows.size() > 2);
  for (std::size_t i = 1; i < rows.size(); ++i) CHECK(rows[i].round > rows[i - 1].round);
}

TEST_CASE("saved models round trip") {
  ExperimentConfig cfg = parse_config(tiny_run_config(6));
  fs::path dir = fresh_dir("apfl_models_rt");
  RunOutput out = run_to_dir(cfg, dir.string());
  SavedModels m = load_models((dir / "models.bin").string());
  CHECK(m.w_hat == out.result.w_hat);
  CHECK(m.w_last == out.result.w_last);
  CHECK(m.alpha_final == out.result.alpha_final);
  REQUIRE(m.v_hat.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(m.v_hat[i] == out.result.v_hat[i]);
    CHECK(m.v_bar_last[i] == out.result.v_bar_last[i]);
  }
}

TEST_CASE("csv dataset pipeline end to end") {
  // Materialize a pooled csv, then run a label-skew partitioned experiment.
  SyntheticParams sp;
  sp.gamma = 0.5;
  sp.beta = 0.5;
  sp.n_clients = 1;
  sp.samples_per_client = 120;
  sp.d_feat = 4;
  sp.n_classes = 3;
  sp.seed = 47;  // realizes all three classes in this single shard
  FederatedDataset pool = gen_synthetic(sp);
  fs::path dir = fresh_dir("apfl_csv_e2e");
  fs::create_directories(dir);
  fs::path csv = dir / "pool.csv";
  write_csv_dataset(csv.string(), pool.shards[0].features, pool.shards[0].labels);

  std::ostringstream cfg_text;
  cfg_text << "mode = apfl\nn = 3\ntau = 5\nT = 15\nbatch_size = 4\n"
              "alpha.fixed = 0.25\n"
              "dataset.csv.path = " << csv.string() << "\n"
              "dataset.csv.partition = by_label\n"
              "dataset.csv.classes_per_client = 2\n";
  ExperimentConfig cfg = parse_config(cfg_text.str());
  RunOutput out = run_to_dir(cfg, (dir / "run").string());
  CHECK(out.result.rows.size() == 4);  // rounds 0..3
  CHECK(out.dataset.n_classes == 3);

  ExperimentConfig bad = cfg;
  bad.csv_path = (dir / "nope.csv").string();
  CHECK_THROWS_AS(build_dataset(bad), std::runtime_error);
}

TEST_CASE("diagnostics emission from a run") {
  ExperimentConfig cfg = parse_config(tiny_run_config(7, "diagnostics = true\n"
                                                        "diag.probes = 4\n"
                                                        "diag.gd_tol = 1e-6\n"));
  fs::path dir = fresh_dir("apfl_diag_run");
  run_to_dir(cfg, dir.string());
  CHECK(fs::exists(dir / "diagnostics.json"));
  std::string body = slurp(dir / "diagnostics.json");
  CHECK(body.find("zeta") != std::string::npos);
  CHECK(body.find("alpha_star") != std::string::npos);
  CHECK(body.find("lower bounds") != std::string::npos);
}

TEST_CASE("write_dataset_dir materializes per-client csvs") {
  ExperimentConfig cfg = parse_config(tiny_run_config(8));
  FederatedDataset ds = build_dataset(cfg);
  fs::path dir = fresh_dir("apfl_gen_data");
  write_dataset_dir(ds, dir.string());
  CHECK(fs::exists(dir / "client_000.csv"));
  CHECK(fs::exists(dir / "client_003.csv"));
  CHECK(fs::exists(dir / "provenance.json"));
  auto [features, labels] = load_csv_dataset((dir / "client_001.csv").string());
  CHECK(features.rows == 30);
  CHECK(features.cols == 4);
}

TEST_SUITE_END();
