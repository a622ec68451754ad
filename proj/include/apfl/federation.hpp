#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "apfl/datagen.hpp"
#include "apfl/models.hpp"
#include "apfl/numkit.hpp"

namespace apfl {

enum class Mode { apfl, fedavg, local_only };
enum class AlphaMode { fixed, adaptive };
enum class AlphaCadence { per_round, per_step };
enum class LrKind { theory, geometric, constant };

// Step-size schedule. `theory` is eta_t = numerator / (mu * (t + a)) with
// a = max(kappa_factor * kappa, tau) and iterate weights p_t = (t + a)^2;
// `geometric` decays eta0 by a fixed fraction per step; `constant` is flat.
// The latter two use uniform iterate weights.
struct LrSchedule {
  LrKind kind = LrKind::geometric;
  // theory
  double mu = 0.0;
  double kappa = 0.0;
  std::size_t tau = 1;
  double numerator = 16.0;
  double kappa_factor = 128.0;
  // geometric
  double eta0 = 0.1;
  double decay = 0.01;
  // constant
  double eta = 0.01;

  double offset() const;            // a
  double rate(std::size_t t) const; // eta_t
  double weight(std::size_t t) const;  // p_t
};

// Incremental weighted mean: after adds (p_1,x_1)..(p_T,x_T) it holds
// sum(p_t x_t) / sum(p_t). A constant input sequence is returned exactly.
struct WeightedAverage {
  double total_weight = 0.0;
  ParamVector mean;

  void add(double p, const ParamVector& x);
  // Fused add of p * (a*x + b*y) without materializing the mix.
  void add_mix(double p, double a, const ParamVector& x, double b,
               const ParamVector& y);
  const ParamVector& finalize() const;  // error when nothing was added
};

struct ClientState {
  int id = 0;
  const Shard* shard = nullptr;
  ParamVector v;        // local model
  ParamVector w_local;  // local version of the global model
  double alpha = 0.0;   // mixing weight, kept in [0, 1]
  AlphaMode alpha_mode = AlphaMode::fixed;
  RngStream rng;        // minibatch draws
  WeightedAverage out_acc_v;  // p_t-weighted personalized output
  std::size_t step_count = 0;

  ParamVector mixed() const;  // alpha * v + (1 - alpha) * w_local
};

struct ServerState {
  ParamVector w;
  std::size_t t = 0;
  RngStream selection_rng;
  std::vector<int> selection;  // sorted, |selection| == K
  WeightedAverage out_acc_w;
};

// One local iteration on the same minibatch xi for both models:
//   w_local <- w_local - eta * grad f(w_local; xi)
//   v       <- v - eta * alpha * grad f(alpha v + (1-alpha) w_local; xi)
// The alpha factor is the chain rule of v -> f(alpha v + (1-alpha) w);
// chain_rule=false drops it to mirror implementations that do.
void local_step(const ModelSpec& spec, ClientState& client, double eta,
                const Batch& batch, bool chain_rule = true,
                bool update_w = true);

// Pure update kernels, split out so the hand-worked examples are testable
// without a model family behind them.
void local_step_kernel(ParamVector& v, ParamVector& w_local, double alpha,
                       double eta, const ParamVector& grad_w,
                       const ParamVector& grad_vbar, bool chain_rule);
double alpha_update_kernel(double alpha, double eta, const ParamVector& v,
                           const ParamVector& w_local,
                           const ParamVector& grad_vbar);

// One projected gradient step on the mixing weight, evaluated before the
// model steps of the iteration on the same minibatch:
//   alpha <- clip_[0,1](alpha - eta * <v - w_local, grad f(vbar; xi)>)
void update_alpha(const ModelSpec& spec, ClientState& client, double eta,
                  const Batch& batch);

// Uniform without-replacement K-subset of {0..n-1}, returned sorted.
std::vector<int> sample_clients(RngStream& rng, std::size_t k, std::size_t n);

// Mean of the selected clients' w_local in ascending id order.
ParamVector selection_mean(const std::vector<ClientState>& clients,
                           const std::vector<int>& selection);

// Synchronization boundary: server.w <- mean of the current selection's
// w_local, a fresh selection is sampled, and server.w is broadcast to the
// newly selected clients. Unselected clients are untouched.
void aggregate_and_broadcast(ServerState& server,
                             std::vector<ClientState>& clients, std::size_t k,
                             std::size_t n);

struct MetricsRow {
  std::size_t round = 0;
  std::size_t iteration = 0;
  double pers_train_loss = 0.0;
  double pers_val_acc = 0.0;
  double locglob_train_loss = 0.0;
  double locglob_val_acc = 0.0;
  double global_val_acc = 0.0;
  double mean_alpha = 0.0;
  double wallclock_ms = 0.0;
};

// Per-client train loss / validation accuracy of the personalized model
// (alpha v + (1-alpha) w_local), the drifted local copy of the global model,
// and validation accuracy of the given global model; averaged over clients
// in ascending id order.
MetricsRow evaluate(const ModelSpec& spec, const std::vector<ClientState>& clients,
                    const ParamVector& global_w, std::size_t round,
                    std::size_t iteration, int workers = 1);

struct GlobalSnapshot {
  std::size_t round = 0;
  std::size_t iteration = 0;
  ParamVector current_w;   // server model at the boundary
  ParamVector averaged_w;  // running p_t-weighted output so far
};

struct RunOptions {
  Mode mode = Mode::apfl;
  std::size_t n = 0;
  std::size_t K = 0;
  std::size_t tau = 10;
  std::size_t T = 0;
  std::size_t batch_size = 20;
  AlphaMode alpha_mode = AlphaMode::fixed;
  double alpha0 = 0.25;  // fixed value, or the adaptive starting point
  bool chain_rule = true;
  AlphaCadence cadence = AlphaCadence::per_round;
  LrSchedule lr;
  std::size_t eval_every = 1;  // in communication rounds
  int workers = 1;
  std::uint64_t seed = 1;
  ModelSpec model;
  // Test hook, called after every iteration (including t = 0).
  std::function<void(std::size_t, const ServerState&,
                     const std::vector<ClientState>&)> observer;
};

struct RunResult {
  std::vector<MetricsRow> rows;
  ParamVector w_hat;   // p_t-weighted global output
  ParamVector w_last;  // server model after the final boundary
  std::vector<ParamVector> v_hat;       // p_t-weighted personalized outputs
  std::vector<ParamVector> v_bar_last;  // final alpha v + (1-alpha) w_local
  std::vector<double> alpha_final;
  std::vector<GlobalSnapshot> snapshots;  // one per evaluated round
};

// Runs T iterations of Local Descent APFL over the dataset: every iteration
// each selected client draws one minibatch, optionally updates alpha, and
// takes a local step; every tau-th iteration the server aggregates,
// evaluation runs against the pre-broadcast local models, a fresh selection
// is drawn and the aggregate is broadcast to it. Output models are the
// p_t-weighted iterate averages plus the final iterates.
RunResult run_experiment(const RunOptions& opts, const FederatedDataset& dataset);

// New-participant fine-tuning: v starts from the frozen global model and is
// updated for `epochs` passes with v <- v - lr * alpha * grad f(alpha v +
// (1-alpha) w_hat; xi); returns alpha * v + (1-alpha) * w_hat.
ParamVector personalize_new_client(const ModelSpec& spec,
                                   const ParamVector& global_model,
                                   const Shard& shard, double alpha,
                                   std::size_t epochs, double lr,
                                   std::size_t batch_size, RngStream rng,
                                   bool chain_rule = true);

}  // namespace apfl
