// Times the round engine with the serial reference path (workers = 1)
// against the OpenMP path, and checks that the metric streams agree
// byte-for-byte, which is the engine's determinism contract.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "apfl/harness.hpp"

using Clock = std::chrono::steady_clock;

namespace {

double time_run(const apfl::RunOptions& base, const apfl::FederatedDataset& ds,
                int workers, int reps, apfl::RunResult* out) {
  apfl::RunOptions opts = base;
  opts.workers = workers;
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    auto t0 = Clock::now();
    apfl::RunResult res = apfl::run_experiment(opts, ds);
    double ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    if (ms < best) best = ms;
    if (out) *out = std::move(res);
  }
  return best;
}

}  // namespace

int main(int argc, char** argv) {
  std::size_t n = argc > 1 ? std::strtoull(argv[1], nullptr, 10) : 32;
  std::size_t T = argc > 2 ? std::strtoull(argv[2], nullptr, 10) : 400;
  int reps = argc > 3 ? std::atoi(argv[3]) : 3;

  apfl::SyntheticParams sp;
  sp.gamma = 0.5;
  sp.beta = 0.5;
  sp.n_clients = n;
  sp.samples_per_client = 200;
  sp.d_feat = 60;
  sp.n_classes = 10;
  sp.seed = 7;
  apfl::FederatedDataset ds = apfl::gen_synthetic(sp);
  for (apfl::Shard& s : ds.shards) s = apfl::split_train_val(std::move(s), 0.2, sp.seed);

  apfl::RunOptions opts;
  opts.mode = apfl::Mode::apfl;
  opts.n = n;
  opts.K = n;
  opts.tau = 10;
  opts.T = T;
  opts.batch_size = 20;
  opts.alpha_mode = apfl::AlphaMode::adaptive;
  opts.alpha0 = 0.01;
  opts.seed = 7;
  opts.model.kind = apfl::ModelKind::logistic;
  opts.model.d_feat = ds.d_feat;
  opts.model.n_classes = ds.n_classes;
  opts.model.l2_reg = 0.01;
  opts.lr.kind = apfl::LrKind::geometric;
  opts.lr.eta0 = 0.1;
  opts.lr.decay = 0.01;

  int max_threads = 1;
#ifdef _OPENMP
  max_threads = omp_get_max_threads();
#endif

  std::printf("engine benchmark: n=%zu clients, T=%zu iterations, d=%zu, best of %d\n",
              n, T, sp.d_feat, reps);
  apfl::RunResult serial;
  double serial_ms = time_run(opts, ds, 1, reps, &serial);
  std::printf("  %-22s %10.1f ms\n", "serial (workers=1)", serial_ms);
  std::string serial_csv = apfl::format_metrics_csv(serial.rows);

  for (int w = 2; w <= max_threads; w *= 2) {
    apfl::RunResult parallel;
    double ms = time_run(opts, ds, w, reps, &parallel);
    bool same = apfl::format_metrics_csv(parallel.rows) == serial_csv;
    std::printf("  openmp workers=%-6d %10.1f ms   speedup %.2fx   metrics %s\n", w,
                ms, serial_ms / ms, same ? "identical" : "DIFFER");
    if (!same) return 1;
  }
  return 0;
}
