#include "apfl/harness.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace apfl {

namespace {

constexpr const char* kLibraryVersion = "0.1.0";
constexpr const char* kMetricsHeader =
    "round,iteration,pers_train_loss,pers_val_acc,locglob_train_loss,"
    "locglob_val_acc,global_val_acc,mean_alpha,wallclock_ms";

std::string fmt9(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

[[noreturn]] void config_error(const std::string& msg) {
  throw std::invalid_argument("parse_config: " + msg);
}

double parse_double_value(const std::string& key, const std::string& value) {
  double v = 0.0;
  auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || p != value.data() + value.size())
    config_error(key + ": expected a number, got \"" + value + "\"");
  return v;
}

std::uint64_t parse_u64_value(const std::string& key, const std::string& value) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || p != value.data() + value.size())
    config_error(key + ": expected a non-negative integer, got \"" + value + "\"");
  return v;
}

bool parse_bool_value(const std::string& key, const std::string& value) {
  if (value == "true" || value == "on" || value == "1") return true;
  if (value == "false" || value == "off" || value == "0") return false;
  config_error(key + ": expected true/false, got \"" + value + "\"");
}

std::vector<std::size_t> parse_size_list(const std::string& key, const std::string& value) {
  std::vector<std::size_t> out;
  std::size_t begin = 0;
  while (begin <= value.size()) {
    std::size_t end = value.find(',', begin);
    if (end == std::string::npos) end = value.size();
    std::string piece = value.substr(begin, end - begin);
    if (piece.empty()) config_error(key + ": empty list entry");
    out.push_back(parse_u64_value(key, piece));
    begin = end + 1;
    if (end == value.size()) break;
  }
  if (out.empty()) config_error(key + ": empty list");
  return out;
}

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

std::string strip_quotes(std::string v) {
  if (v.size() >= 2 && ((v.front() == '"' && v.back() == '"') ||
                        (v.front() == '\'' && v.back() == '\'')))
    return v.substr(1, v.size() - 2);
  return v;
}

const char* mode_name(Mode m) {
  switch (m) {
    case Mode::apfl: return "apfl";
    case Mode::fedavg: return "fedavg";
    case Mode::local_only: return "local_only";
  }
  return "?";
}

// Key/value pairs in document order, whichever syntax the text uses.
std::vector<std::pair<std::string, std::string>> collect_pairs(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> pairs;
  std::size_t first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    ordered_json doc = ordered_json::parse(text);
    if (doc.contains("config")) doc = doc["config"];
    if (!doc.is_object()) config_error("JSON config must be an object");
    for (auto& [key, value] : doc.items()) {
      std::string v = value.is_string() ? value.get<std::string>() : value.dump();
      pairs.emplace_back(key, v);
    }
    return pairs;
  }

  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      config_error("line " + std::to_string(line_no) + ": expected `key = value`");
    std::string key = trim(line.substr(0, eq));
    std::string value = strip_quotes(trim(line.substr(eq + 1)));
    if (key.empty() || value.empty())
      config_error("line " + std::to_string(line_no) + ": expected `key = value`");
    pairs.emplace_back(key, value);
  }
  return pairs;
}

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig cfg;
  std::set<std::string> seen;
  bool saw_synthetic = false, saw_csv = false;
  bool saw_alpha_fixed = false, saw_alpha_adaptive = false;

  for (const auto& [key, value] : collect_pairs(text)) {
    if (!seen.insert(key).second) config_error("duplicate key \"" + key + "\"");

    if (key == "mode") {
      if (value == "apfl") cfg.mode = Mode::apfl;
      else if (value == "fedavg") cfg.mode = Mode::fedavg;
      else if (value == "local_only") cfg.mode = Mode::local_only;
      else config_error("mode: expected apfl|fedavg|local_only, got \"" + value + "\"");
    } else if (key == "n") {
      cfg.n = parse_u64_value(key, value);
    } else if (key == "K") {
      cfg.K = parse_u64_value(key, value);
    } else if (key == "tau") {
      cfg.tau = parse_u64_value(key, value);
    } else if (key == "T") {
      cfg.T = parse_u64_value(key, value);
    } else if (key == "batch_size") {
      cfg.batch_size = parse_u64_value(key, value);
    } else if (key == "eval_every") {
      cfg.eval_every = parse_u64_value(key, value);
    } else if (key == "seed") {
      cfg.seed = parse_u64_value(key, value);
    } else if (key == "workers") {
      cfg.workers = static_cast<int>(parse_u64_value(key, value));
    } else if (key == "val_fraction") {
      cfg.val_fraction = parse_double_value(key, value);
    } else if (key == "chain_rule") {
      cfg.chain_rule = parse_bool_value(key, value);
    } else if (key == "alpha_update_cadence") {
      if (value == "per_round") cfg.cadence = AlphaCadence::per_round;
      else if (value == "per_step") cfg.cadence = AlphaCadence::per_step;
      else config_error("alpha_update_cadence: expected per_round|per_step, got \"" + value + "\"");
    } else if (key == "diagnostics") {
      cfg.diagnostics = parse_bool_value(key, value);
    } else if (key == "alpha.fixed") {
      saw_alpha_fixed = true;
      cfg.alpha_mode = AlphaMode::fixed;
      cfg.alpha_value = parse_double_value(key, value);
    } else if (key == "alpha.adaptive") {
      saw_alpha_adaptive = true;
      cfg.alpha_mode = AlphaMode::adaptive;
      cfg.alpha_value = parse_double_value(key, value);
    } else if (key == "model.kind") {
      if (value == "logistic") cfg.model_kind = ModelKind::logistic;
      else if (value == "mlp") cfg.model_kind = ModelKind::mlp;
      else config_error("model.kind: expected logistic|mlp, got \"" + value + "\"");
    } else if (key == "model.l2_reg") {
      cfg.l2_reg = parse_double_value(key, value);
    } else if (key == "model.hidden") {
      cfg.hidden = parse_size_list(key, value);
    } else if (key == "dataset.synthetic.gamma") {
      saw_synthetic = true;
      cfg.gamma = parse_double_value(key, value);
    } else if (key == "dataset.synthetic.beta") {
      saw_synthetic = true;
      cfg.beta = parse_double_value(key, value);
    } else if (key == "dataset.synthetic.per_client") {
      saw_synthetic = true;
      cfg.per_client = parse_u64_value(key, value);
    } else if (key == "dataset.synthetic.d_feat") {
      saw_synthetic = true;
      cfg.d_feat = parse_u64_value(key, value);
    } else if (key == "dataset.synthetic.classes") {
      saw_synthetic = true;
      cfg.classes = parse_u64_value(key, value);
    } else if (key == "dataset.csv.path") {
      saw_csv = true;
      cfg.csv_path = value;
    } else if (key == "dataset.csv.partition") {
      saw_csv = true;
      if (value == "iid") cfg.partition = PartitionKind::iid;
      else if (value == "by_label") cfg.partition = PartitionKind::by_label;
      else config_error("dataset.csv.partition: expected iid|by_label, got \"" + value + "\"");
    } else if (key == "dataset.csv.classes_per_client") {
      saw_csv = true;
      cfg.classes_per_client = parse_u64_value(key, value);
    } else if (key == "lr.kind") {
      if (value == "theory") cfg.lr_kind = LrKind::theory;
      else if (value == "geometric") cfg.lr_kind = LrKind::geometric;
      else if (value == "constant") cfg.lr_kind = LrKind::constant;
      else config_error("lr.kind: expected theory|geometric|constant, got \"" + value + "\"");
    } else if (key == "lr.eta0") {
      cfg.eta0 = parse_double_value(key, value);
    } else if (key == "lr.decay") {
      cfg.decay = parse_double_value(key, value);
    } else if (key == "lr.eta") {
      cfg.eta_const = parse_double_value(key, value);
    } else if (key == "lr.numerator") {
      cfg.lr_numerator = parse_double_value(key, value);
    } else if (key == "lr.kappa_factor") {
      cfg.lr_kappa_factor = parse_double_value(key, value);
    } else if (key == "diag.probes") {
      cfg.diag_probes = parse_u64_value(key, value);
    } else if (key == "diag.gd_tol") {
      cfg.gd_tol = parse_double_value(key, value);
    } else if (key == "diag.C") {
      cfg.diag_C = parse_double_value(key, value);
    } else if (key == "diag.B") {
      cfg.diag_B = parse_double_value(key, value);
    } else if (key == "diag.G") {
      cfg.diag_G = parse_double_value(key, value);
    } else if (key == "diag.delta") {
      cfg.diag_delta = parse_double_value(key, value);
    } else if (key == "diag.radius") {
      cfg.diag_radius = parse_double_value(key, value);
    } else if (key == "diag.C2") {
      cfg.diag_C2 = parse_double_value(key, value);
    } else if (key == "diag.directions") {
      cfg.diag_directions = parse_u64_value(key, value);
    } else if (key == "diag.ascent_steps") {
      cfg.diag_ascent_steps = parse_u64_value(key, value);
    } else {
      config_error("unknown key \"" + key + "\"");
    }
  }

  // Required fields and cross-field constraints; messages carry both values.
  if (!seen.count("mode")) config_error("missing required key \"mode\"");
  if (!seen.count("n")) config_error("missing required key \"n\"");
  if (!seen.count("T")) config_error("missing required key \"T\"");
  if (!saw_synthetic && !saw_csv)
    config_error("missing dataset section (dataset.synthetic.* or dataset.csv.*)");
  if (saw_synthetic && saw_csv)
    config_error("both dataset.synthetic.* and dataset.csv.* given");
  if (saw_alpha_fixed && saw_alpha_adaptive)
    config_error("both alpha.fixed and alpha.adaptive given");
  cfg.dataset_kind = saw_synthetic ? DatasetKind::synthetic : DatasetKind::csv;

  if (cfg.n < 1) config_error("n must be >= 1");
  if (!seen.count("K")) cfg.K = cfg.n;
  if (cfg.K < 1 || cfg.K > cfg.n)
    config_error("K=" + std::to_string(cfg.K) +
                 (cfg.K > cfg.n ? " > n=" : " below 1, n=") + std::to_string(cfg.n));
  if (cfg.tau < 1) config_error("tau must be >= 1");
  if (cfg.T < cfg.tau)
    config_error("T=" + std::to_string(cfg.T) + " < tau=" + std::to_string(cfg.tau));
  if (cfg.batch_size < 1) config_error("batch_size must be >= 1");
  if (cfg.eval_every < 1) config_error("eval_every must be >= 1");
  if (cfg.workers < 1) config_error("workers must be >= 1");
  if (!(cfg.val_fraction > 0.0 && cfg.val_fraction < 1.0))
    config_error("val_fraction=" + fmt9(cfg.val_fraction) + " outside (0, 1)");
  if (cfg.alpha_value < 0.0 || cfg.alpha_value > 1.0)
    config_error(std::string(cfg.alpha_mode == AlphaMode::fixed ? "alpha.fixed=" : "alpha.adaptive=") +
                 fmt9(cfg.alpha_value) + " outside [0, 1]");
  if (cfg.l2_reg < 0.0) config_error("model.l2_reg must be >= 0");
  for (std::size_t h : cfg.hidden)
    if (h < 1) config_error("model.hidden entries must be >= 1");

  if (cfg.dataset_kind == DatasetKind::synthetic) {
    if (!seen.count("dataset.synthetic.gamma") || !seen.count("dataset.synthetic.beta"))
      config_error("dataset.synthetic requires gamma and beta");
    if (cfg.gamma < 0.0 || cfg.beta < 0.0)
      config_error("dataset.synthetic variances must be >= 0 (gamma=" + fmt9(cfg.gamma) +
                   ", beta=" + fmt9(cfg.beta) + ")");
    if (cfg.per_client < 2) config_error("dataset.synthetic.per_client must be >= 2");
    if (cfg.d_feat < 1) config_error("dataset.synthetic.d_feat must be >= 1");
    if (cfg.classes < 2) config_error("dataset.synthetic.classes must be >= 2");
  } else {
    if (cfg.csv_path.empty()) config_error("dataset.csv.path is required");
    if (cfg.classes_per_client < 1) config_error("dataset.csv.classes_per_client must be >= 1");
  }

  if (cfg.lr_kind == LrKind::theory) {
    if (cfg.model_kind != ModelKind::logistic || cfg.l2_reg <= 0.0)
      config_error("lr.kind=theory needs model.kind=logistic with model.l2_reg > 0 "
                   "(got l2_reg=" + fmt9(cfg.l2_reg) + ")");
    if (cfg.lr_numerator <= 0.0) config_error("lr.numerator must be > 0");
    if (cfg.lr_kappa_factor < 0.0) config_error("lr.kappa_factor must be >= 0");
  }
  if (cfg.eta0 <= 0.0) config_error("lr.eta0 must be > 0");
  if (!(cfg.decay >= 0.0 && cfg.decay < 1.0))
    config_error("lr.decay=" + fmt9(cfg.decay) + " outside [0, 1)");
  if (cfg.eta_const <= 0.0) config_error("lr.eta must be > 0");
  if (cfg.diag_probes < 1) config_error("diag.probes must be >= 1");
  if (cfg.gd_tol <= 0.0) config_error("diag.gd_tol must be > 0");
  if (!(cfg.diag_delta > 0.0 && cfg.diag_delta < 1.0))
    config_error("diag.delta=" + fmt9(cfg.diag_delta) + " outside (0, 1)");
  if (cfg.diag_directions < 1) config_error("diag.directions must be >= 1");

  // Baseline modes pin the mixing weight; the effective value lands in the
  // provenance so reruns are faithful.
  if (cfg.mode == Mode::fedavg) {
    cfg.alpha_mode = AlphaMode::fixed;
    cfg.alpha_value = 0.0;
  } else if (cfg.mode == Mode::local_only) {
    cfg.alpha_mode = AlphaMode::fixed;
    cfg.alpha_value = 1.0;
  }
  return cfg;
}

ExperimentConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("parse_config: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

FederatedDataset build_dataset(const ExperimentConfig& cfg) {
  FederatedDataset ds;
  if (cfg.dataset_kind == DatasetKind::synthetic) {
    SyntheticParams sp;
    sp.gamma = cfg.gamma;
    sp.beta = cfg.beta;
    sp.n_clients = cfg.n;
    sp.samples_per_client = cfg.per_client;
    sp.d_feat = cfg.d_feat;
    sp.n_classes = cfg.classes;
    sp.seed = cfg.seed;
    ds = gen_synthetic(sp);
  } else {
    auto [features, labels] = load_csv_dataset(cfg.csv_path);
    if (cfg.partition == PartitionKind::by_label)
      ds = partition_by_label(features, labels, cfg.classes_per_client, cfg.n, cfg.seed);
    else
      ds = partition_iid(features, labels, cfg.n, cfg.seed);
    if (ds.n_classes < 2)
      throw std::invalid_argument("build_dataset: need at least 2 classes, got " +
                                  std::to_string(ds.n_classes));
  }
  for (Shard& s : ds.shards) {
    if (s.n_rows() < 2)
      throw std::invalid_argument("build_dataset: shard " + std::to_string(s.client_id) +
                                  " has " + std::to_string(s.n_rows()) +
                                  " rows; need >= 2 for a train/val split");
    s = split_train_val(std::move(s), cfg.val_fraction, cfg.seed);
  }
  return ds;
}

RunOptions to_run_options(const ExperimentConfig& cfg, const FederatedDataset& dataset) {
  RunOptions opts;
  opts.mode = cfg.mode;
  opts.n = cfg.n;
  opts.K = cfg.K;
  opts.tau = cfg.tau;
  opts.T = cfg.T;
  opts.batch_size = cfg.batch_size;
  opts.alpha_mode = cfg.alpha_mode;
  opts.alpha0 = cfg.alpha_value;
  opts.chain_rule = cfg.chain_rule;
  opts.cadence = cfg.cadence;
  opts.eval_every = cfg.eval_every;
  opts.workers = cfg.workers;
  opts.seed = cfg.seed;

  opts.model.kind = cfg.model_kind;
  opts.model.d_feat = dataset.d_feat;
  opts.model.n_classes = dataset.n_classes;
  opts.model.l2_reg = cfg.model_kind == ModelKind::logistic ? cfg.l2_reg : 0.0;
  opts.model.hidden = cfg.hidden;

  opts.lr.kind = cfg.lr_kind;
  opts.lr.tau = cfg.tau;
  opts.lr.eta0 = cfg.eta0;
  opts.lr.decay = cfg.decay;
  opts.lr.eta = cfg.eta_const;
  opts.lr.numerator = cfg.lr_numerator;
  opts.lr.kappa_factor = cfg.lr_kappa_factor;
  if (cfg.lr_kind == LrKind::theory) {
    opts.lr.mu = cfg.l2_reg;
    opts.lr.kappa = logistic_lipschitz_bound(opts.model, dataset) / cfg.l2_reg;
  }
  return opts;
}

std::string format_metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string out = kMetricsHeader;
  out += '\n';
  for (const MetricsRow& r : rows) {
    out += std::to_string(r.round);
    out += ',';
    out += std::to_string(r.iteration);
    for (double v : {r.pers_train_loss, r.pers_val_acc, r.locglob_train_loss,
                     r.locglob_val_acc, r.global_val_acc, r.mean_alpha,
                     r.wallclock_ms}) {
      out += ',';
      out += fmt9(v);
    }
    out += '\n';
  }
  return out;
}

void write_metrics(const std::vector<MetricsRow>& rows, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_metrics: cannot open " + path);
  out << format_metrics_csv(rows);
  if (!out) throw std::runtime_error("write_metrics: write failed for " + path);
}

std::vector<MetricsRow> parse_metrics_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader)
    throw std::runtime_error("parse_metrics_csv: bad header");
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    MetricsRow r;
    double cols[9];
    std::size_t begin = 0;
    for (int c = 0; c < 9; ++c) {
      std::size_t end = line.find(',', begin);
      if ((end == std::string::npos) != (c == 8))
        throw std::runtime_error("parse_metrics_csv: bad row \"" + line + "\"");
      std::string piece = line.substr(begin, end == std::string::npos ? end : end - begin);
      cols[c] = std::strtod(piece.c_str(), nullptr);
      begin = end + 1;
    }
    r.round = static_cast<std::size_t>(cols[0]);
    r.iteration = static_cast<std::size_t>(cols[1]);
    r.pers_train_loss = cols[2];
    r.pers_val_acc = cols[3];
    r.locglob_train_loss = cols[4];
    r.locglob_val_acc = cols[5];
    r.global_val_acc = cols[6];
    r.mean_alpha = cols[7];
    r.wallclock_ms = cols[8];
    rows.push_back(r);
  }
  return rows;
}

namespace {

ordered_json config_to_json(const ExperimentConfig& cfg) {
  ordered_json j;
  j["mode"] = mode_name(cfg.mode);
  j["n"] = cfg.n;
  j["K"] = cfg.K;
  j["tau"] = cfg.tau;
  j["T"] = cfg.T;
  j["batch_size"] = cfg.batch_size;
  j["eval_every"] = cfg.eval_every;
  j["seed"] = cfg.seed;
  j["workers"] = cfg.workers;
  j["val_fraction"] = cfg.val_fraction;
  j["chain_rule"] = cfg.chain_rule;
  j["alpha_update_cadence"] =
      cfg.cadence == AlphaCadence::per_round ? "per_round" : "per_step";
  j["diagnostics"] = cfg.diagnostics;
  if (cfg.alpha_mode == AlphaMode::fixed)
    j["alpha.fixed"] = cfg.alpha_value;
  else
    j["alpha.adaptive"] = cfg.alpha_value;
  j["model.kind"] = cfg.model_kind == ModelKind::logistic ? "logistic" : "mlp";
  j["model.l2_reg"] = cfg.l2_reg;
  {
    std::string hidden;
    for (std::size_t i = 0; i < cfg.hidden.size(); ++i) {
      if (i) hidden += ',';
      hidden += std::to_string(cfg.hidden[i]);
    }
    j["model.hidden"] = hidden;
  }
  if (cfg.dataset_kind == DatasetKind::synthetic) {
    j["dataset.synthetic.gamma"] = cfg.gamma;
    j["dataset.synthetic.beta"] = cfg.beta;
    j["dataset.synthetic.per_client"] = cfg.per_client;
    j["dataset.synthetic.d_feat"] = cfg.d_feat;
    j["dataset.synthetic.classes"] = cfg.classes;
  } else {
    j["dataset.csv.path"] = cfg.csv_path;
    j["dataset.csv.partition"] = cfg.partition == PartitionKind::iid ? "iid" : "by_label";
    j["dataset.csv.classes_per_client"] = cfg.classes_per_client;
  }
  j["lr.kind"] = cfg.lr_kind == LrKind::theory
                     ? "theory"
                     : (cfg.lr_kind == LrKind::geometric ? "geometric" : "constant");
  j["lr.eta0"] = cfg.eta0;
  j["lr.decay"] = cfg.decay;
  j["lr.eta"] = cfg.eta_const;
  j["lr.numerator"] = cfg.lr_numerator;
  j["lr.kappa_factor"] = cfg.lr_kappa_factor;
  j["diag.probes"] = cfg.diag_probes;
  j["diag.gd_tol"] = cfg.gd_tol;
  j["diag.C"] = cfg.diag_C;
  j["diag.B"] = cfg.diag_B;
  j["diag.G"] = cfg.diag_G;
  j["diag.delta"] = cfg.diag_delta;
  j["diag.radius"] = cfg.diag_radius;
  j["diag.C2"] = cfg.diag_C2;
  j["diag.directions"] = cfg.diag_directions;
  j["diag.ascent_steps"] = cfg.diag_ascent_steps;
  return j;
}

ordered_json dataset_provenance_json(const DatasetProvenance& p) {
  ordered_json jp;
  jp["generator"] = p.generator;
  jp["seed"] = p.seed;
  ordered_json params;
  for (const auto& [k, v] : p.params) params[k] = v;
  jp["params"] = params;
  return jp;
}

}  // namespace

std::string provenance_json(const ExperimentConfig& cfg,
                            const DatasetProvenance& dataset,
                            std::size_t d_feat, std::size_t n_classes,
                            double total_wallclock_ms) {
  ordered_json doc;
  doc["config"] = config_to_json(cfg);
  ordered_json meta;
  meta["library_version"] = kLibraryVersion;
  meta["d_feat"] = d_feat;
  meta["n_classes"] = n_classes;
  meta["total_wallclock_ms"] = total_wallclock_ms;
  meta["dataset_provenance"] = dataset_provenance_json(dataset);
  doc["meta"] = meta;
  return doc.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Model checkpoints.
// ---------------------------------------------------------------------------
namespace {

constexpr char kModelMagic[8] = {'A', 'P', 'F', 'L', 'M', 'D', 'L', '1'};

void write_record(std::ofstream& out, const ParamVector& v) {
  std::uint64_t len = v.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
}

ParamVector read_record(std::ifstream& in, const std::string& path) {
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in) throw std::runtime_error("load_models: truncated file " + path);
  ParamVector v(len);
  in.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(len * sizeof(double)));
  if (!in) throw std::runtime_error("load_models: truncated file " + path);
  return v;
}

}  // namespace

void save_models(const std::string& path, const RunResult& result) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_models: cannot open " + path);
  out.write(kModelMagic, sizeof kModelMagic);
  std::uint32_t version = 1;
  std::uint32_t n_records = static_cast<std::uint32_t>(3 + 2 * result.v_hat.size());
  out.write(reinterpret_cast<const char*>(&version), sizeof version);
  out.write(reinterpret_cast<const char*>(&n_records), sizeof n_records);
  write_record(out, result.w_hat);
  write_record(out, result.w_last);
  write_record(out, result.alpha_final);
  for (const ParamVector& v : result.v_hat) write_record(out, v);
  for (const ParamVector& v : result.v_bar_last) write_record(out, v);
  if (!out) throw std::runtime_error("save_models: write failed for " + path);
}

SavedModels load_models(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_models: cannot open " + path);
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kModelMagic, sizeof magic) != 0)
    throw std::runtime_error("load_models: " + path + " is not an APFL model file");
  std::uint32_t version = 0, n_records = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&n_records), sizeof n_records);
  if (!in || version != 1)
    throw std::runtime_error("load_models: unsupported version in " + path);
  if (n_records < 3 || (n_records - 3) % 2 != 0)
    throw std::runtime_error("load_models: bad record count in " + path);

  SavedModels m;
  m.w_hat = read_record(in, path);
  m.w_last = read_record(in, path);
  m.alpha_final = read_record(in, path);
  std::size_t n = (n_records - 3) / 2;
  if (m.alpha_final.size() != n)
    throw std::runtime_error("load_models: alpha record length mismatch in " + path);
  m.v_hat.reserve(n);
  m.v_bar_last.reserve(n);
  for (std::size_t i = 0; i < n; ++i) m.v_hat.push_back(read_record(in, path));
  for (std::size_t i = 0; i < n; ++i) m.v_bar_last.push_back(read_record(in, path));
  return m;
}

// ---------------------------------------------------------------------------
// Diagnostics orchestration.
// ---------------------------------------------------------------------------
DiagnosticsResult run_diagnostics(const ExperimentConfig& cfg,
                                  const FederatedDataset& dataset,
                                  const std::vector<ParamVector>& trajectory_probes,
                                  const std::vector<double>& client_alphas) {
  ModelSpec spec;
  spec.kind = cfg.model_kind;
  spec.d_feat = dataset.d_feat;
  spec.n_classes = dataset.n_classes;
  spec.l2_reg = cfg.model_kind == ModelKind::logistic ? cfg.l2_reg : 0.0;
  spec.hidden = cfg.hidden;

  std::vector<Objective> objectives;
  objectives.reserve(dataset.n_clients());
  for (const Shard& s : dataset.shards)
    objectives.push_back(make_client_objective(spec, s));

  DiagnosticsResult out;
  out.strongly_convex = cfg.model_kind == ModelKind::logistic && cfg.l2_reg > 0.0;

  std::vector<ParamVector> probes = trajectory_probes;
  RngStream probe_rng(cfg.seed, stream_id(StreamDomain::probe, 0));
  for (std::size_t p = 0; p < cfg.diag_probes; ++p)
    probes.push_back(gaussian_vector(probe_rng, spec.param_count(), 0.0, 1.0));

  DeltaEstimate delta;
  if (out.strongly_convex) {
    delta = estimate_delta(objectives, cfg.gd_tol, 2000000, cfg.workers);
    probes.push_back(delta.w_star);
    for (const ParamVector& v : delta.v_star) probes.push_back(v);
    out.report.delta_i = delta.delta_i;
    out.report.gd_residuals = delta.residuals;
  }
  out.report.gd_tolerance = cfg.gd_tol;
  out.report.probes_used = probes.size();

  out.report.zeta_i = estimate_zeta(objectives, probes, cfg.workers);
  out.report.zeta = 0.0;
  for (double z : out.report.zeta_i) out.report.zeta += z;

  Objective pooled = make_mean_objective(objectives);
  std::vector<std::pair<ParamVector, ParamVector>> pairs;
  for (std::size_t i = 0; i + 1 < probes.size(); ++i)
    pairs.emplace_back(probes[i], probes[i + 1]);
  if (probes.size() >= 2) pairs.emplace_back(probes.front(), probes.back());
  if (pairs.empty()) pairs.emplace_back(probes.front(), probes.front());
  out.report.gamma = estimate_gamma(pooled, pairs);

  std::vector<int> pooled_labels;
  for (const Shard& s : dataset.shards)
    pooled_labels.insert(pooled_labels.end(), s.labels.begin(), s.labels.end());
  std::vector<double> pooled_hist = label_histogram(pooled_labels, dataset.n_classes);

  out.report.lambda_i.resize(dataset.n_clients());
  out.report.l1_proxy_i.resize(dataset.n_clients());
  for (std::size_t i = 0; i < dataset.n_clients(); ++i) {
    const Shard& s = dataset.shards[i];
    RngStream dir_rng(cfg.seed, stream_id(StreamDomain::probe, 1 + i));
    out.report.lambda_i[i] =
        estimate_lambda_H(s.features, s.train_idx, cfg.diag_radius,
                          cfg.diag_directions, cfg.diag_ascent_steps, dir_rng);
    out.report.l1_proxy_i[i] =
        l1_divergence_proxy(label_histogram(s.labels, dataset.n_classes), pooled_hist);
  }

  if (out.strongly_convex) {
    double global_emp_risk = pooled.value(delta.w_star);
    double m_total = 0.0;
    for (const Shard& s : dataset.shards) m_total += static_cast<double>(s.train_idx.size());
    for (std::size_t i = 0; i < dataset.n_clients(); ++i) {
      const Shard& s = dataset.shards[i];
      GeneralizationInputs in;
      in.alpha = i < client_alphas.size() ? client_alphas[i] : cfg.alpha_value;
      in.global_emp_risk = global_emp_risk;
      in.l1_div = out.report.l1_proxy_i[i];
      in.local_opt_risk = loss(spec, delta.v_star[i], full_val_batch(s));
      in.d_vc = static_cast<double>(spec.param_count());
      in.delta_conf = cfg.diag_delta;
      in.m_total = m_total;
      in.m_local = static_cast<double>(s.train_idx.size());
      in.C = cfg.diag_C;
      in.B = cfg.diag_B;
      in.G = cfg.diag_G;
      in.lambda_S = out.report.lambda_i[i];
      double star = optimal_alpha(in);
      GeneralizationInputs at_star = in;
      at_star.alpha = star;
      out.inputs.push_back(in);
      out.alpha_star.push_back(star);
      out.bound_at_star.push_back(theorem1_bound(at_star));
    }
  }
  return out;
}

std::string diagnostics_json(const DiagnosticsResult& diag, const ExperimentConfig& cfg) {
  ordered_json j;
  j["note"] = "sup-style quantities are maxima over a finite probe set (lower bounds)";
  j["probes_used"] = diag.report.probes_used;
  j["gd_tolerance"] = diag.report.gd_tolerance;
  j["gd_residuals"] = diag.report.gd_residuals;
  j["zeta_i"] = diag.report.zeta_i;
  j["zeta"] = diag.report.zeta;
  if (diag.strongly_convex) j["delta_i"] = diag.report.delta_i;
  j["gamma"] = diag.report.gamma;
  j["lambda_i"] = diag.report.lambda_i;
  j["l1_proxy_i"] = diag.report.l1_proxy_i;
  j["l1_proxy_note"] = "label-histogram L1 distance; proxy for the joint distribution distance";
  ordered_json constants;
  constants["C"] = cfg.diag_C;
  constants["B"] = cfg.diag_B;
  constants["G"] = cfg.diag_G;
  constants["delta"] = cfg.diag_delta;
  constants["C2"] = cfg.diag_C2;
  constants["hypothesis_radius"] = cfg.diag_radius;
  j["constants"] = constants;
  if (diag.strongly_convex) {
    ordered_json per_client = ordered_json::array();
    for (std::size_t i = 0; i < diag.inputs.size(); ++i) {
      const GeneralizationInputs& in = diag.inputs[i];
      ordered_json c;
      c["client"] = i;
      c["alpha"] = in.alpha;
      c["alpha_star"] = diag.alpha_star[i];
      c["theorem1_bound_at_alpha"] = theorem1_bound(in);
      c["theorem1_bound_at_alpha_star"] = diag.bound_at_star[i];
      c["corollary1_gap"] = corollary1_gap(in, cfg.diag_C2);
      c["global_emp_risk"] = in.global_emp_risk;
      c["local_opt_risk"] = in.local_opt_risk;
      c["l1_div"] = in.l1_div;
      c["lambda_S"] = in.lambda_S;
      c["m_local"] = in.m_local;
      c["m_total"] = in.m_total;
      c["d_vc"] = in.d_vc;
      per_client.push_back(c);
    }
    j["per_client"] = per_client;
  }
  return j.dump(2) + "\n";
}

RunOutput run_to_dir(const ExperimentConfig& cfg, const std::string& out_dir) {
  auto t0 = std::chrono::steady_clock::now();
  RunOutput out;
  out.dataset = build_dataset(cfg);
  RunOptions opts = to_run_options(cfg, out.dataset);
  out.result = run_experiment(opts, out.dataset);
  out.wallclock_ms = std::chrono::duration<double, std::milli>(
                         std::chrono::steady_clock::now() - t0)
                         .count();

  fs::create_directories(out_dir);
  write_metrics(out.result.rows, (fs::path(out_dir) / "metrics.csv").string());
  {
    std::ofstream prov(fs::path(out_dir) / "provenance.json", std::ios::binary);
    if (!prov) throw std::runtime_error("run_to_dir: cannot write provenance.json");
    prov << provenance_json(cfg, out.dataset.provenance, out.dataset.d_feat,
                            out.dataset.n_classes, out.wallclock_ms);
  }
  save_models((fs::path(out_dir) / "models.bin").string(), out.result);

  if (cfg.diagnostics) {
    std::vector<ParamVector> trajectory;
    for (const GlobalSnapshot& s : out.result.snapshots)
      trajectory.push_back(s.current_w);
    DiagnosticsResult diag =
        run_diagnostics(cfg, out.dataset, trajectory, out.result.alpha_final);
    std::ofstream dj(fs::path(out_dir) / "diagnostics.json", std::ios::binary);
    if (!dj) throw std::runtime_error("run_to_dir: cannot write diagnostics.json");
    dj << diagnostics_json(diag, cfg);
  }
  return out;
}

void write_dataset_dir(const FederatedDataset& dataset, const std::string& out_dir) {
  fs::create_directories(out_dir);
  char name[32];
  for (const Shard& s : dataset.shards) {
    std::snprintf(name, sizeof name, "client_%03d.csv", s.client_id);
    write_csv_dataset((fs::path(out_dir) / name).string(), s.features, s.labels);
  }
  ordered_json doc;
  doc["d_feat"] = dataset.d_feat;
  doc["n_classes"] = dataset.n_classes;
  doc["dataset_provenance"] = dataset_provenance_json(dataset.provenance);
  std::ofstream prov(fs::path(out_dir) / "provenance.json", std::ios::binary);
  if (!prov) throw std::runtime_error("write_dataset_dir: cannot write provenance.json");
  prov << doc.dump(2) << "\n";
}

}  // namespace apfl
