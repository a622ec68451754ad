#include "apfl/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>

namespace apfl {

Objective make_client_objective(const ModelSpec& spec, const Shard& shard) {
  if (shard.train_idx.empty())
    throw std::invalid_argument("make_client_objective: shard has no train rows");
  Objective obj;
  obj.dim = spec.param_count();
  if (spec.kind == ModelKind::logistic) {
    obj.mu = spec.l2_reg;
    double max_sq = 0.0;
    for (std::size_t i : shard.train_idx) {
      double s = 0.0;
      const double* row = shard.features.row(i);
      for (std::size_t j = 0; j < shard.features.cols; ++j) s += row[j] * row[j];
      max_sq = std::max(max_sq, s);
    }
    obj.lipschitz = spec.l2_reg + 0.25 * max_sq;
  }
  const Shard* sp = &shard;
  ModelSpec sc = spec;
  obj.value = [sc, sp](const ParamVector& w) { return loss(sc, w, full_train_batch(*sp)); };
  obj.gradient = [sc, sp](const ParamVector& w) { return grad(sc, w, full_train_batch(*sp)); };
  return obj;
}

Objective make_mean_objective(std::vector<Objective> parts) {
  if (parts.empty()) throw std::invalid_argument("make_mean_objective: no objectives");
  Objective obj;
  obj.dim = parts[0].dim;
  double mu_min = parts[0].mu, l_max = parts[0].lipschitz;
  for (const Objective& p : parts) {
    if (p.dim != obj.dim)
      throw std::invalid_argument("make_mean_objective: dimension mismatch");
    mu_min = std::min(mu_min, p.mu);
    l_max = std::max(l_max, p.lipschitz);
  }
  obj.mu = mu_min;
  obj.lipschitz = l_max;
  auto shared = std::make_shared<std::vector<Objective>>(std::move(parts));
  obj.value = [shared](const ParamVector& w) {
    double s = 0.0;
    for (const Objective& p : *shared) s += p.value(w);
    return s / static_cast<double>(shared->size());
  };
  obj.gradient = [shared](const ParamVector& w) {
    ParamVector g(w.size(), 0.0);
    for (const Objective& p : *shared) axpy_inplace(1.0, p.gradient(w), g);
    double inv = 1.0 / static_cast<double>(shared->size());
    for (double& v : g) v *= inv;
    return g;
  };
  return obj;
}

double logistic_lipschitz_bound(const ModelSpec& spec, const FederatedDataset& dataset) {
  double max_sq = 0.0;
  for (const Shard& s : dataset.shards)
    for (std::size_t i : s.train_idx) {
      double acc = 0.0;
      const double* row = s.features.row(i);
      for (std::size_t j = 0; j < s.features.cols; ++j) acc += row[j] * row[j];
      max_sq = std::max(max_sq, acc);
    }
  return spec.l2_reg + 0.25 * max_sq;
}

std::vector<double> estimate_zeta(const std::vector<Objective>& clients,
                                  const std::vector<ParamVector>& probes,
                                  int workers) {
  (void)workers;
  if (clients.empty()) throw std::invalid_argument("estimate_zeta: no clients");
  if (probes.empty()) throw std::invalid_argument("estimate_zeta: empty probe set");
  std::size_t n = clients.size();
  std::vector<double> zeta(n, 0.0);
  for (const ParamVector& w : probes) {
    std::vector<ParamVector> grads(n);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (workers > 1) num_threads(workers)
#endif
    for (std::size_t i = 0; i < n; ++i) grads[i] = clients[i].gradient(w);
    ParamVector mean(grads[0].size(), 0.0);
    for (std::size_t i = 0; i < n; ++i) axpy_inplace(1.0, grads[i], mean);
    double inv = 1.0 / static_cast<double>(n);
    for (double& v : mean) v *= inv;
    for (std::size_t i = 0; i < n; ++i) {
      double d = 0.0;
      for (std::size_t k = 0; k < mean.size(); ++k) {
        double e = mean[k] - grads[i][k];
        d += e * e;
      }
      zeta[i] = std::max(zeta[i], d);
    }
  }
  return zeta;
}

GdResult minimize(const Objective& objective, ParamVector x0, double tolerance,
                  std::size_t max_iters) {
  if (!(tolerance > 0.0)) throw std::invalid_argument("minimize: tolerance must be > 0");
  if (objective.lipschitz <= 0.0)
    throw std::invalid_argument("minimize: objective needs a Lipschitz bound");
  double step = objective.mu > 0.0 ? 2.0 / (objective.mu + objective.lipschitz)
                                   : 1.0 / objective.lipschitz;
  GdResult res;
  res.x = std::move(x0);
  for (std::size_t it = 0; it < max_iters; ++it) {
    ParamVector g = objective.gradient(res.x);
    res.grad_norm = l2_norm(g);
    if (!std::isfinite(res.grad_norm))
      throw std::runtime_error("minimize: diverged (non-finite gradient)");
    res.iters = it;
    if (res.grad_norm <= tolerance) return res;
    axpy_inplace(-step, g, res.x);
  }
  ParamVector g = objective.gradient(res.x);
  res.grad_norm = l2_norm(g);
  res.iters = max_iters;
  return res;
}

DeltaEstimate estimate_delta(const std::vector<Objective>& clients,
                             double gd_tolerance, std::size_t max_iters,
                             int workers) {
  (void)workers;
  if (clients.empty()) throw std::invalid_argument("estimate_delta: no clients");
  for (const Objective& c : clients)
    if (c.mu <= 0.0)
      throw std::invalid_argument(
          "estimate_delta: objective is not strongly convex (mu <= 0); "
          "unique minimizers are required");

  Objective pooled = make_mean_objective(clients);
  DeltaEstimate est;
  GdResult global = minimize(pooled, ParamVector(pooled.dim, 0.0), gd_tolerance, max_iters);
  est.w_star = std::move(global.x);
  est.residuals.push_back(global.grad_norm);

  std::size_t n = clients.size();
  est.v_star.resize(n);
  est.delta_i.resize(n);
  std::vector<double> res_i(n, 0.0);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (workers > 1) num_threads(workers)
#endif
  for (std::size_t i = 0; i < n; ++i) {
    GdResult r = minimize(clients[i], ParamVector(clients[i].dim, 0.0), gd_tolerance, max_iters);
    res_i[i] = r.grad_norm;
    est.v_star[i] = std::move(r.x);
    double d = 0.0;
    for (std::size_t k = 0; k < est.w_star.size(); ++k) {
      double e = est.v_star[i][k] - est.w_star[k];
      d += e * e;
    }
    est.delta_i[i] = d;
  }
  est.residuals.insert(est.residuals.end(), res_i.begin(), res_i.end());
  return est;
}

double estimate_gamma(const Objective& pooled,
                      const std::vector<std::pair<ParamVector, ParamVector>>& probe_pairs) {
  if (probe_pairs.empty())
    throw std::invalid_argument("estimate_gamma: empty probe set");
  double best = 0.0;
  for (const auto& [x1, x2] : probe_pairs) {
    ParamVector g1 = pooled.gradient(x1);
    ParamVector g2 = pooled.gradient(x2);
    double d = 0.0;
    for (std::size_t k = 0; k < g1.size(); ++k) {
      double e = g1[k] - g2[k];
      d += e * e;
    }
    best = std::max(best, d);
  }
  return best;
}

double estimate_lambda_H(const Matrix& features, std::span<const std::size_t> rows,
                         double hypothesis_bound, std::size_t n_directions,
                         std::size_t ascent_steps, RngStream& rng) {
  if (rows.empty()) throw std::invalid_argument("estimate_lambda_H: empty shard");
  if (n_directions < 1)
    throw std::invalid_argument("estimate_lambda_H: n_directions must be >= 1");
  double radius = 2.0 * hypothesis_bound;  // |h - h'| = |<w - w', x>|, |w-w'| <= 2R
  std::size_t d = features.cols;
  double inv_m = 1.0 / static_cast<double>(rows.size());

  auto mean_abs = [&](const ParamVector& u) {
    double s = 0.0;
    for (std::size_t i : rows) {
      const double* x = features.row(i);
      double z = 0.0;
      for (std::size_t j = 0; j < d; ++j) z += u[j] * x[j];
      s += std::abs(z);
    }
    return s * inv_m;
  };

  double best = 0.0;
  for (std::size_t dir = 0; dir < n_directions; ++dir) {
    ParamVector u(d);
    for (double& v : u) v = rng.next_gaussian();
    double norm = l2_norm(u);
    if (norm == 0.0) continue;
    for (double& v : u) v *= radius / norm;
    best = std::max(best, mean_abs(u));

    // Sign-vector ascent: for fixed signs s_j = sign(<u, x_j>) the optimum
    // over |u| <= 2R is u = 2R * normalize(sum s_j x_j).
    for (std::size_t step = 0; step < ascent_steps; ++step) {
      ParamVector acc(d, 0.0);
      for (std::size_t i : rows) {
        const double* x = features.row(i);
        double z = 0.0;
        for (std::size_t j = 0; j < d; ++j) z += u[j] * x[j];
        double s = z < 0.0 ? -1.0 : 1.0;
        for (std::size_t j = 0; j < d; ++j) acc[j] += s * x[j];
      }
      double an = l2_norm(acc);
      if (an == 0.0) break;
      ParamVector next(d);
      for (std::size_t j = 0; j < d; ++j) next[j] = acc[j] * (radius / an);
      double value = mean_abs(next);
      if (value <= best + 1e-15) {
        best = std::max(best, value);
        break;
      }
      best = value;
      u = std::move(next);
    }
  }
  return best;
}

std::vector<double> label_histogram(const std::vector<int>& labels,
                                    std::size_t n_classes) {
  if (labels.empty()) throw std::invalid_argument("label_histogram: empty label set");
  std::vector<double> hist(n_classes, 0.0);
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= n_classes)
      throw std::invalid_argument("label_histogram: label out of range");
    hist[y] += 1.0;
  }
  double inv = 1.0 / static_cast<double>(labels.size());
  for (double& v : hist) v *= inv;
  return hist;
}

double l1_divergence_proxy(const std::vector<double>& shard_hist,
                           const std::vector<double>& pooled_hist) {
  if (shard_hist.size() != pooled_hist.size())
    throw std::invalid_argument("l1_divergence_proxy: histogram size mismatch");
  if (shard_hist.empty())
    throw std::invalid_argument("l1_divergence_proxy: empty histograms");
  double s = 0.0;
  for (std::size_t k = 0; k < shard_hist.size(); ++k)
    s += std::abs(pooled_hist[k] - shard_hist[k]);
  return s;
}

namespace {

void validate_inputs(const GeneralizationInputs& in) {
  auto nonneg = [](double v, const char* name) {
    if (!(v >= 0.0))
      throw std::invalid_argument(std::string("generalization inputs: ") + name +
                                  " must be >= 0");
  };
  nonneg(in.global_emp_risk, "global_emp_risk");
  nonneg(in.l1_div, "l1_div");
  nonneg(in.local_opt_risk, "local_opt_risk");
  nonneg(in.d_vc, "d_vc");
  nonneg(in.C, "C");
  nonneg(in.B, "B");
  nonneg(in.G, "G");
  nonneg(in.lambda_S, "lambda_S");
  if (!(in.delta_conf > 0.0 && in.delta_conf < 1.0))
    throw std::invalid_argument("generalization inputs: delta_conf outside (0, 1)");
  if (!(in.m_local >= 1.0) || !(in.m_total >= in.m_local))
    throw std::invalid_argument("generalization inputs: need m_total >= m_local >= 1");
  if (in.alpha < 0.0 || in.alpha > 1.0)
    throw std::invalid_argument("generalization inputs: alpha outside [0, 1]");
}

double vc_radical(const GeneralizationInputs& in, double m) {
  return std::sqrt((in.d_vc + std::log(1.0 / in.delta_conf)) / m);
}

}  // namespace

double global_term(const GeneralizationInputs& in) {
  validate_inputs(in);
  return in.global_emp_risk + in.B * in.l1_div + in.C * vc_radical(in, in.m_total);
}

double local_term(const GeneralizationInputs& in) {
  validate_inputs(in);
  return in.local_opt_risk + 2.0 * in.C * vc_radical(in, in.m_local) +
         in.G * in.lambda_S;
}

double optimal_alpha(const GeneralizationInputs& in) {
  double a = global_term(in);
  double b = local_term(in);
  if (a + b <= 0.0)
    throw std::invalid_argument("optimal_alpha: both bound terms are zero; "
                                "the minimizer is undefined");
  return a / (a + b);
}

double theorem1_bound(const GeneralizationInputs& in) {
  double a = global_term(in);
  double b = local_term(in);
  double om = 1.0 - in.alpha;
  return 2.0 * om * om * a + 2.0 * in.alpha * in.alpha * b;
}

double corollary1_gap(const GeneralizationInputs& in, double C2) {
  if (!(C2 > 0.0)) throw std::invalid_argument("corollary1_gap: C2 must be > 0");
  double a = global_term(in);
  double a2 = in.alpha * in.alpha;
  double om = 1.0 - in.alpha;
  return (2.0 * a2 - 1.0) * in.local_opt_risk +
         (2.0 * a2 * in.C - C2) * vc_radical(in, in.m_local) +
         2.0 * a2 * in.G * in.lambda_S + 2.0 * om * om * a;
}

}  // namespace apfl
