#include "apfl/federation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace apfl {

double LrSchedule::offset() const {
  return std::max(kappa_factor * kappa, static_cast<double>(tau));
}

double LrSchedule::rate(std::size_t t) const {
  switch (kind) {
    case LrKind::theory: {
      if (mu <= 0.0) throw std::invalid_argument("LrSchedule: theory schedule needs mu > 0");
      return numerator / (mu * (static_cast<double>(t) + offset()));
    }
    case LrKind::geometric:
      return eta0 * std::pow(1.0 - decay, static_cast<double>(t));
    case LrKind::constant:
      return eta;
  }
  throw std::logic_error("LrSchedule: unknown kind");
}

double LrSchedule::weight(std::size_t t) const {
  if (kind != LrKind::theory) return 1.0;
  double s = static_cast<double>(t) + offset();
  return s * s;
}

void WeightedAverage::add(double p, const ParamVector& x) {
  if (mean.empty()) mean.assign(x.size(), 0.0);
  if (mean.size() != x.size())
    throw std::invalid_argument("WeightedAverage: dimension changed");
  total_weight += p;
  double step = p / total_weight;
  for (std::size_t k = 0; k < x.size(); ++k) mean[k] += step * (x[k] - mean[k]);
}

void WeightedAverage::add_mix(double p, double a, const ParamVector& x, double b,
                              const ParamVector& y) {
  if (x.size() != y.size())
    throw std::invalid_argument("WeightedAverage: dimension mismatch");
  if (mean.empty()) mean.assign(x.size(), 0.0);
  if (mean.size() != x.size())
    throw std::invalid_argument("WeightedAverage: dimension changed");
  total_weight += p;
  double step = p / total_weight;
  for (std::size_t k = 0; k < x.size(); ++k)
    mean[k] += step * ((a * x[k] + b * y[k]) - mean[k]);
}

const ParamVector& WeightedAverage::finalize() const {
  if (total_weight <= 0.0)
    throw std::runtime_error("WeightedAverage: no weight accumulated");
  return mean;
}

ParamVector ClientState::mixed() const {
  return axpy(alpha, v, axpy(-alpha, w_local, w_local));  // alpha v + (1-alpha) w
}

void local_step_kernel(ParamVector& v, ParamVector& w_local, double alpha,
                       double eta, const ParamVector& grad_w,
                       const ParamVector& grad_vbar, bool chain_rule) {
  double factor = chain_rule ? alpha : 1.0;
  axpy_inplace(-eta, grad_w, w_local);
  axpy_inplace(-eta * factor, grad_vbar, v);
}

double alpha_update_kernel(double alpha, double eta, const ParamVector& v,
                           const ParamVector& w_local,
                           const ParamVector& grad_vbar) {
  double corr = 0.0;
  if (v.size() != w_local.size() || v.size() != grad_vbar.size())
    throw std::invalid_argument("alpha_update_kernel: dimension mismatch");
  for (std::size_t k = 0; k < v.size(); ++k)
    corr += (v[k] - w_local[k]) * grad_vbar[k];
  return std::clamp(alpha - eta * corr, 0.0, 1.0);
}

void local_step(const ModelSpec& spec, ClientState& client, double eta,
                const Batch& batch, bool chain_rule, bool update_w) {
  if (!(eta > 0.0)) throw std::invalid_argument("local_step: eta must be > 0");
  ParamVector vbar = client.mixed();
  ParamVector g_vbar = grad(spec, vbar, batch);
  if (update_w) {
    ParamVector g_w = grad(spec, client.w_local, batch);
    local_step_kernel(client.v, client.w_local, client.alpha, eta, g_w, g_vbar,
                      chain_rule);
  } else {
    double factor = chain_rule ? client.alpha : 1.0;
    axpy_inplace(-eta * factor, g_vbar, client.v);
  }
  ++client.step_count;
}

void update_alpha(const ModelSpec& spec, ClientState& client, double eta,
                  const Batch& batch) {
  if (client.alpha_mode != AlphaMode::adaptive)
    throw std::logic_error("update_alpha: client alpha is fixed");
  ParamVector vbar = client.mixed();
  ParamVector g_vbar = grad(spec, vbar, batch);
  client.alpha = alpha_update_kernel(client.alpha, eta, client.v, client.w_local, g_vbar);
}

std::vector<int> sample_clients(RngStream& rng, std::size_t k, std::size_t n) {
  if (k < 1 || k > n)
    throw std::invalid_argument("sample_clients: K=" + std::to_string(k) +
                                " outside [1, n=" + std::to_string(n) + "]");
  std::vector<int> pool(n);
  std::iota(pool.begin(), pool.end(), 0);
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t j = i + rng.next_below(n - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  std::sort(pool.begin(), pool.end());
  return pool;
}

ParamVector selection_mean(const std::vector<ClientState>& clients,
                           const std::vector<int>& selection) {
  if (selection.empty())
    throw std::invalid_argument("selection_mean: empty selection");
  ParamVector mean(clients[selection[0]].w_local.size(), 0.0);
  for (int id : selection) axpy_inplace(1.0, clients[id].w_local, mean);
  double inv = 1.0 / static_cast<double>(selection.size());
  for (double& v : mean) v *= inv;
  return mean;
}

void aggregate_and_broadcast(ServerState& server, std::vector<ClientState>& clients,
                             std::size_t k, std::size_t n) {
  server.w = selection_mean(clients, server.selection);
  server.selection = sample_clients(server.selection_rng, k, n);
  for (int id : server.selection) clients[id].w_local = server.w;
}

namespace {

std::vector<std::size_t> draw_minibatch(RngStream& rng,
                                        const std::vector<std::size_t>& train_idx,
                                        std::size_t batch_size) {
  std::vector<std::size_t> idx(batch_size);
  for (std::size_t b = 0; b < batch_size; ++b)
    idx[b] = train_idx[rng.next_below(train_idx.size())];
  return idx;
}

struct PerClientEval {
  double pers_train_loss, pers_val_acc;
  double locglob_train_loss, locglob_val_acc;
  double global_val_acc;
};

[[noreturn]] void rethrow_at(std::exception_ptr err, std::size_t t) {
  try {
    std::rethrow_exception(err);
  } catch (const std::exception& e) {
    throw std::runtime_error("iteration " + std::to_string(t) + ": " + e.what());
  }
}

}  // namespace

MetricsRow evaluate(const ModelSpec& spec, const std::vector<ClientState>& clients,
                    const ParamVector& global_w, std::size_t round,
                    std::size_t iteration, int workers) {
  std::size_t n = clients.size();
  std::vector<PerClientEval> per(n);
  std::exception_ptr err = nullptr;

#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(workers) if (workers > 1)
#endif
  for (std::size_t i = 0; i < n; ++i) {
    try {
      const ClientState& c = clients[i];
      Batch train = full_train_batch(*c.shard);
      ParamVector vbar = c.mixed();
      per[i].pers_train_loss = loss(spec, vbar, train);
      per[i].pers_val_acc = accuracy(spec, vbar, *c.shard, c.shard->val_idx);
      per[i].locglob_train_loss = loss(spec, c.w_local, train);
      per[i].locglob_val_acc = accuracy(spec, c.w_local, *c.shard, c.shard->val_idx);
      per[i].global_val_acc = accuracy(spec, global_w, *c.shard, c.shard->val_idx);
    } catch (...) {
#ifdef _OPENMP
#pragma omp critical
#endif
      if (!err) err = std::current_exception();
    }
  }
  if (err) rethrow_at(err, iteration);

  MetricsRow row;
  row.round = round;
  row.iteration = iteration;
  double inv = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {  // ascending client order
    row.pers_train_loss += per[i].pers_train_loss;
    row.pers_val_acc += per[i].pers_val_acc;
    row.locglob_train_loss += per[i].locglob_train_loss;
    row.locglob_val_acc += per[i].locglob_val_acc;
    row.global_val_acc += per[i].global_val_acc;
  }
  row.pers_train_loss *= inv;
  row.pers_val_acc *= inv;
  row.locglob_train_loss *= inv;
  row.locglob_val_acc *= inv;
  row.global_val_acc *= inv;
  double alpha_sum = 0.0;
  for (const ClientState& c : clients) alpha_sum += c.alpha;
  row.mean_alpha = alpha_sum * inv;
  row.wallclock_ms = 0.0;  // kept deterministic; see README
  return row;
}

RunResult run_experiment(const RunOptions& opts, const FederatedDataset& dataset) {
  if (dataset.n_clients() != opts.n)
    throw std::invalid_argument("run_experiment: dataset has " +
                                std::to_string(dataset.n_clients()) +
                                " clients, config says n=" + std::to_string(opts.n));
  if (opts.K < 1 || opts.K > opts.n)
    throw std::invalid_argument("run_experiment: K=" + std::to_string(opts.K) +
                                " outside [1, n=" + std::to_string(opts.n) + "]");
  if (opts.tau < 1) throw std::invalid_argument("run_experiment: tau must be >= 1");
  if (opts.T < opts.tau)
    throw std::invalid_argument("run_experiment: T=" + std::to_string(opts.T) +
                                " < tau=" + std::to_string(opts.tau));
  if (opts.batch_size < 1)
    throw std::invalid_argument("run_experiment: batch_size must be >= 1");
  if (opts.alpha0 < 0.0 || opts.alpha0 > 1.0)
    throw std::invalid_argument("run_experiment: alpha=" + std::to_string(opts.alpha0) +
                                " outside [0, 1]");
  if (opts.model.d_feat != dataset.d_feat || opts.model.n_classes != dataset.n_classes)
    throw std::invalid_argument("run_experiment: model dims do not match dataset");
  for (const Shard& s : dataset.shards) {
    if (s.train_idx.empty())
      throw std::invalid_argument("run_experiment: shard " +
                                  std::to_string(s.client_id) + " has no train rows");
    if (s.val_idx.empty())
      throw std::invalid_argument("run_experiment: shard " +
                                  std::to_string(s.client_id) +
                                  " has no validation rows; apply split_train_val");
  }

  const bool local_only = opts.mode == Mode::local_only;
  const ModelSpec& spec = opts.model;

  std::vector<ClientState> clients;
  clients.reserve(opts.n);
  for (std::size_t i = 0; i < opts.n; ++i) {
    RngStream init_rng(opts.seed, stream_id(StreamDomain::model_init, i));
    ClientState c;
    c.id = static_cast<int>(i);
    c.shard = &dataset.shards[i];
    c.v = init_params(spec, init_rng);
    c.w_local = c.v;
    c.alpha = opts.alpha0;
    c.alpha_mode = opts.alpha_mode;
    c.rng = RngStream(opts.seed, stream_id(StreamDomain::client, i));
    clients.push_back(std::move(c));
  }

  ServerState server;
  server.selection_rng = RngStream(opts.seed, stream_id(StreamDomain::selection, 0));
  std::vector<int> everyone(opts.n);
  std::iota(everyone.begin(), everyone.end(), 0);
  server.selection = local_only ? everyone
                                : sample_clients(server.selection_rng, opts.K, opts.n);

  RunResult res;
  auto should_eval = [&](std::size_t round) { return round % opts.eval_every == 0; };

  // t = 0 boundary: aggregate the initial models, evaluate the starting
  // point, then sample the first working selection and broadcast to it.
  ParamVector mean_w = selection_mean(clients, server.selection);
  check_finite(mean_w, "run_experiment: initial model");
  server.w = mean_w;
  if (should_eval(0)) {
    res.rows.push_back(evaluate(spec, clients, server.w, 0, 0, opts.workers));
    res.snapshots.push_back({0, 0, server.w, server.w});
  }
  if (!local_only) aggregate_and_broadcast(server, clients, opts.K, opts.n);
  if (opts.observer) opts.observer(0, server, clients);

  for (std::size_t t = 1; t <= opts.T; ++t) {
    server.t = t;
    double eta = opts.lr.rate(t);
    bool alpha_due = opts.alpha_mode == AlphaMode::adaptive &&
                     (opts.cadence == AlphaCadence::per_step || (t - 1) % opts.tau == 0);

    std::exception_ptr err = nullptr;
    const std::vector<int>& sel = server.selection;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(opts.workers) if (opts.workers > 1)
#endif
    for (std::size_t s = 0; s < sel.size(); ++s) {
      try {
        ClientState& c = clients[sel[s]];
        auto idx = draw_minibatch(c.rng, c.shard->train_idx, opts.batch_size);
        Batch batch{&c.shard->features, &c.shard->labels, idx};
        if (alpha_due) update_alpha(spec, c, eta, batch);
        local_step(spec, c, eta, batch, opts.chain_rule, /*update_w=*/!local_only);
      } catch (...) {
#ifdef _OPENMP
#pragma omp critical
#endif
        if (!err) err = std::current_exception();
      }
    }
    if (err) rethrow_at(err, t);

    mean_w = selection_mean(clients, sel);
    double p = opts.lr.weight(t);
    server.out_acc_w.add(p, mean_w);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(opts.workers) if (opts.workers > 1)
#endif
    for (std::size_t i = 0; i < opts.n; ++i) {
      ClientState& c = clients[i];
      c.out_acc_v.add_mix(p, c.alpha, c.v, 1.0 - c.alpha, mean_w);
    }

    if (t % opts.tau == 0) {
      check_finite(mean_w, "run_experiment: aggregate at iteration " + std::to_string(t));
      server.w = mean_w;
      std::size_t round = t / opts.tau;
      // Evaluation sees the fresh aggregate next to the still-drifted local
      // copies; the broadcast below overwrites the newly selected ones.
      if (should_eval(round)) {
        res.rows.push_back(evaluate(spec, clients, server.w, round, t, opts.workers));
        res.snapshots.push_back({round, t, server.w, server.out_acc_w.finalize()});
      }
      if (!local_only) aggregate_and_broadcast(server, clients, opts.K, opts.n);
    }
    if (opts.observer) opts.observer(t, server, clients);
  }

  res.w_hat = server.out_acc_w.finalize();
  res.w_last = server.w;
  res.v_hat.reserve(opts.n);
  res.v_bar_last.reserve(opts.n);
  res.alpha_final.reserve(opts.n);
  for (const ClientState& c : clients) {
    res.v_hat.push_back(c.out_acc_v.finalize());
    res.v_bar_last.push_back(c.mixed());
    res.alpha_final.push_back(c.alpha);
  }
  return res;
}

ParamVector personalize_new_client(const ModelSpec& spec,
                                   const ParamVector& global_model,
                                   const Shard& shard, double alpha,
                                   std::size_t epochs, double lr,
                                   std::size_t batch_size, RngStream rng,
                                   bool chain_rule) {
  if (alpha < 0.0 || alpha > 1.0)
    throw std::invalid_argument("personalize_new_client: alpha=" +
                                std::to_string(alpha) + " outside [0, 1]");
  if (epochs < 1) throw std::invalid_argument("personalize_new_client: epochs must be >= 1");
  if (!(lr > 0.0)) throw std::invalid_argument("personalize_new_client: lr must be > 0");
  if (shard.train_idx.empty())
    throw std::invalid_argument("personalize_new_client: shard has no train rows");

  double factor = chain_rule ? alpha : 1.0;
  ParamVector v = global_model;
  std::vector<std::size_t> order = shard.train_idx;
  for (std::size_t e = 0; e < epochs; ++e) {
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.next_below(i)]);
    for (std::size_t begin = 0; begin < order.size(); begin += batch_size) {
      std::size_t end = std::min(begin + batch_size, order.size());
      std::span<const std::size_t> idx(order.data() + begin, end - begin);
      Batch batch{&shard.features, &shard.labels, idx};
      ParamVector vbar = axpy(alpha, v, axpy(-alpha, global_model, global_model));
      ParamVector g = grad(spec, vbar, batch);
      axpy_inplace(-lr * factor, g, v);
    }
  }
  return axpy(alpha, v, axpy(-alpha, global_model, global_model));
}

}  // namespace apfl
