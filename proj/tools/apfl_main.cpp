// Command-line front end: run experiments, re-derive diagnostics for a saved
// run, personalize a saved global model on a new CSV shard, and materialize
// synthetic datasets.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>

#include "apfl/harness.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using apfl::ExperimentConfig;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitFailure = 1;

void print_usage(std::ostream& os) {
  os << "usage: apfl <subcommand> [flags]\n"
     << "  run          --config PATH --out DIR\n"
     << "  diagnose     --run DIR [--out PATH]\n"
     << "  personalize  --run DIR --data CSV [--alpha A] [--epochs N] [--lr LR]\n"
     << "               [--batch B] [--val-fraction F] [--seed S] [--model last|average]\n"
     << "               [--out PATH]\n"
     << "  gen-data     --config PATH --out DIR\n";
}

// Flags are `--name value` pairs; unknown or dangling flags are usage errors.
std::map<std::string, std::string> parse_flags(int argc, char** argv, int begin) {
  std::map<std::string, std::string> flags;
  for (int i = begin; i < argc; i += 2) {
    std::string name = argv[i];
    if (name.rfind("--", 0) != 0)
      throw std::invalid_argument("expected a --flag, got \"" + name + "\"");
    if (i + 1 >= argc)
      throw std::invalid_argument("flag " + name + " is missing a value");
    flags[name.substr(2)] = argv[i + 1];
  }
  return flags;
}

std::string require_flag(const std::map<std::string, std::string>& flags,
                         const std::string& name) {
  auto it = flags.find(name);
  if (it == flags.end())
    throw std::invalid_argument("missing required flag --" + name);
  return it->second;
}

std::string flag_or(const std::map<std::string, std::string>& flags,
                    const std::string& name, const std::string& fallback) {
  auto it = flags.find(name);
  return it == flags.end() ? fallback : it->second;
}

void check_known_flags(const std::map<std::string, std::string>& flags,
                       std::initializer_list<const char*> known) {
  for (const auto& [name, value] : flags) {
    bool ok = false;
    for (const char* k : known)
      if (name == k) ok = true;
    if (!ok) throw std::invalid_argument("unknown flag --" + name);
  }
}

ExperimentConfig load_config_checked(const std::string& path) {
  if (!fs::exists(path))
    throw std::invalid_argument("config file not found: " + path);
  return apfl::parse_config_file(path);
}

nlohmann::json load_provenance(const std::string& run_dir) {
  fs::path p = fs::path(run_dir) / "provenance.json";
  std::ifstream in(p);
  if (!in) throw std::invalid_argument("cannot open " + p.string());
  nlohmann::json doc;
  in >> doc;
  return doc;
}

int cmd_run(const std::map<std::string, std::string>& flags) {
  check_known_flags(flags, {"config", "out"});
  ExperimentConfig cfg = load_config_checked(require_flag(flags, "config"));
  std::string out_dir = require_flag(flags, "out");
  apfl::RunOutput out = apfl::run_to_dir(cfg, out_dir);
  std::cerr << "run: " << out.result.rows.size() << " metric rows, wallclock "
            << out.wallclock_ms << " ms -> " << out_dir << "\n";
  return 0;
}

int cmd_gen_data(const std::map<std::string, std::string>& flags) {
  check_known_flags(flags, {"config", "out"});
  ExperimentConfig cfg = load_config_checked(require_flag(flags, "config"));
  if (cfg.dataset_kind != apfl::DatasetKind::synthetic)
    throw std::invalid_argument("gen-data needs a dataset.synthetic.* config");
  apfl::FederatedDataset ds = apfl::build_dataset(cfg);
  std::string out_dir = require_flag(flags, "out");
  apfl::write_dataset_dir(ds, out_dir);
  std::cerr << "gen-data: " << ds.n_clients() << " client CSVs -> " << out_dir << "\n";
  return 0;
}

int cmd_diagnose(const std::map<std::string, std::string>& flags) {
  check_known_flags(flags, {"run", "out"});
  std::string run_dir = require_flag(flags, "run");
  nlohmann::json prov = load_provenance(run_dir);
  ExperimentConfig cfg = apfl::parse_config(prov.dump());
  apfl::FederatedDataset ds = apfl::build_dataset(cfg);
  apfl::SavedModels models = apfl::load_models((fs::path(run_dir) / "models.bin").string());

  std::vector<apfl::ParamVector> probes;
  probes.push_back(models.w_hat);
  probes.push_back(models.w_last);
  for (const auto& v : models.v_hat) probes.push_back(v);
  apfl::DiagnosticsResult diag =
      apfl::run_diagnostics(cfg, ds, probes, models.alpha_final);

  std::string out_path = flags.count("out")
                             ? flags.at("out")
                             : (fs::path(run_dir) / "diagnostics.json").string();
  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + out_path);
  out << apfl::diagnostics_json(diag, cfg);
  std::cerr << "diagnose: report -> " << out_path << "\n";
  return 0;
}

int cmd_personalize(const std::map<std::string, std::string>& flags) {
  check_known_flags(flags, {"run", "data", "alpha", "epochs", "lr", "batch",
                            "val-fraction", "seed", "model", "out"});
  std::string run_dir = require_flag(flags, "run");
  std::string data_path = require_flag(flags, "data");
  nlohmann::json prov = load_provenance(run_dir);
  ExperimentConfig cfg = apfl::parse_config(prov.dump());
  if (!prov.contains("meta"))
    throw std::runtime_error("provenance.json has no meta section");
  std::size_t d_feat = prov["meta"]["d_feat"].get<std::size_t>();
  std::size_t n_classes = prov["meta"]["n_classes"].get<std::size_t>();

  double alpha = std::stod(flag_or(flags, "alpha", "0.5"));
  std::size_t epochs = std::stoul(flag_or(flags, "epochs", "5"));
  double lr = std::stod(flag_or(flags, "lr", "0.05"));
  std::size_t batch = std::stoul(flag_or(flags, "batch", std::to_string(cfg.batch_size)));
  double val_fraction = std::stod(flag_or(flags, "val-fraction", "0.2"));
  std::uint64_t seed = std::stoull(flag_or(flags, "seed", "1"));
  std::string which = flag_or(flags, "model", "last");
  if (which != "last" && which != "average")
    throw std::invalid_argument("--model must be last or average");

  apfl::SavedModels models = apfl::load_models((fs::path(run_dir) / "models.bin").string());
  const apfl::ParamVector& global = which == "last" ? models.w_last : models.w_hat;

  auto [features, labels] = apfl::load_csv_dataset(data_path);
  if (features.cols != d_feat)
    throw std::runtime_error("shard width " + std::to_string(features.cols) +
                             " != trained d_feat " + std::to_string(d_feat));
  apfl::Shard shard;
  shard.client_id = 0;
  shard.features = std::move(features);
  shard.labels = std::move(labels);
  shard.train_idx.resize(shard.n_rows());
  for (std::size_t i = 0; i < shard.n_rows(); ++i) shard.train_idx[i] = i;
  shard = apfl::split_train_val(std::move(shard), val_fraction, seed);

  apfl::ModelSpec spec;
  spec.kind = cfg.model_kind;
  spec.d_feat = d_feat;
  spec.n_classes = n_classes;
  spec.l2_reg = cfg.model_kind == apfl::ModelKind::logistic ? cfg.l2_reg : 0.0;
  spec.hidden = cfg.hidden;
  if (spec.param_count() != global.size())
    throw std::runtime_error("saved model has " + std::to_string(global.size()) +
                             " parameters, spec expects " +
                             std::to_string(spec.param_count()));

  apfl::Batch train = apfl::full_train_batch(shard);
  double before_loss = apfl::loss(spec, global, train);
  double before_acc = apfl::accuracy(spec, global, shard, shard.val_idx);

  apfl::RngStream rng(seed, apfl::stream_id(apfl::StreamDomain::personalize, 0));
  apfl::ParamVector mixed = apfl::personalize_new_client(
      spec, global, shard, alpha, epochs, lr, batch, rng, cfg.chain_rule);

  double after_loss = apfl::loss(spec, mixed, train);
  double after_acc = apfl::accuracy(spec, mixed, shard, shard.val_idx);

  nlohmann::ordered_json report;
  report["alpha"] = alpha;
  report["epochs"] = epochs;
  report["lr"] = lr;
  report["batch_size"] = batch;
  report["seed"] = seed;
  report["global_model"] = which;
  report["before"] = {{"train_loss", before_loss}, {"val_acc", before_acc}};
  report["after"] = {{"train_loss", after_loss}, {"val_acc", after_acc}};

  if (flags.count("out")) {
    std::ofstream out(flags.at("out"), std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + flags.at("out"));
    out << report.dump(2) << "\n";
  } else {
    std::cout << report.dump(2) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    print_usage(std::cerr);
    return kExitUsage;
  }
  std::string sub = argv[1];
  if (sub == "--help" || sub == "-h" || sub == "help") {
    print_usage(std::cout);
    return 0;
  }
  try {
    auto flags = parse_flags(argc, argv, 2);
    if (sub == "run") return cmd_run(flags);
    if (sub == "diagnose") return cmd_diagnose(flags);
    if (sub == "personalize") return cmd_personalize(flags);
    if (sub == "gen-data") return cmd_gen_data(flags);
    std::cerr << "error: unknown subcommand \"" << sub << "\"\n";
    print_usage(std::cerr);
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}
