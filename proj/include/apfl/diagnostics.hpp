#pragma once

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "apfl/datagen.hpp"
#include "apfl/models.hpp"
#include "apfl/numkit.hpp"

namespace apfl {

// A differentiable objective over flat parameters. The heterogeneity
// estimators are written against this interface so they work for any model
// family (and for closed-form test objectives).
struct Objective {
  std::size_t dim = 0;
  double mu = 0.0;         // strong convexity constant; 0 when unknown
  double lipschitz = 0.0;  // gradient Lipschitz constant; 0 when unknown
  std::function<double(const ParamVector&)> value;
  std::function<ParamVector(const ParamVector&)> gradient;
};

// Full-train-batch objective of one shard; mu/lipschitz filled from the
// analytic logistic bounds (mu = l2_reg, L = l2_reg + max row norm^2 / 4)
// when the spec is logistic.
Objective make_client_objective(const ModelSpec& spec, const Shard& shard);

// F = fixed-order client mean of the given objectives.
Objective make_mean_objective(std::vector<Objective> parts);

double logistic_lipschitz_bound(const ModelSpec& spec, const FederatedDataset& dataset);

// All sup-style entries are maxima over finite probe sets, i.e. lower bounds
// of the true suprema.
struct DiversityReport {
  std::vector<double> zeta_i;   // max_probe |grad F - grad f_i|^2
  double zeta = 0.0;            // sum of zeta_i
  std::vector<double> delta_i;  // |v_i* - w*|^2
  double gamma = 0.0;           // max over probe pairs of |grad F(x1) - grad F(x2)|^2
  std::vector<double> lambda_i; // per-shard lambda_H estimate
  std::vector<double> l1_proxy_i;  // label-histogram L1 distance to the pool
  std::size_t probes_used = 0;
  double gd_tolerance = 0.0;
  std::vector<double> gd_residuals;  // achieved |grad| per solve (pooled first)
};

std::vector<double> estimate_zeta(const std::vector<Objective>& clients,
                                  const std::vector<ParamVector>& probes,
                                  int workers = 1);

struct DeltaEstimate {
  std::vector<double> delta_i;
  std::vector<ParamVector> v_star;
  ParamVector w_star;
  std::vector<double> residuals;  // achieved gradient norms, pooled solve first
};

// Solves each client's objective and the pooled objective by full-batch
// gradient descent to gradient norm <= gd_tolerance. Requires mu > 0 on
// every objective (unique minimizers); rejects non-strongly-convex input.
DeltaEstimate estimate_delta(const std::vector<Objective>& clients,
                             double gd_tolerance, std::size_t max_iters = 2000000,
                             int workers = 1);

double estimate_gamma(const Objective& pooled,
                      const std::vector<std::pair<ParamVector, ParamVector>>& probe_pairs);

// lambda_H for the linear class {x -> <w, x> : |w| <= R} over the given rows:
// sup equals max_{|u| <= 2R} mean |<u, x_j>|, estimated from n_directions
// random starts refined by sign-vector coordinate ascent.
double estimate_lambda_H(const Matrix& features, std::span<const std::size_t> rows,
                         double hypothesis_bound, std::size_t n_directions,
                         std::size_t ascent_steps, RngStream& rng);

std::vector<double> label_histogram(const std::vector<int>& labels,
                                    std::size_t n_classes);

// L1 distance between two normalized label histograms -- an admitted proxy
// for the joint-distribution distance, always in [0, 2].
double l1_divergence_proxy(const std::vector<double>& shard_hist,
                           const std::vector<double>& pooled_hist);

// Plain gradient descent; returns the final point and achieved |grad|.
struct GdResult {
  ParamVector x;
  double grad_norm = 0.0;
  std::size_t iters = 0;
};
GdResult minimize(const Objective& objective, ParamVector x0, double tolerance,
                  std::size_t max_iters = 2000000);

// ---------------------------------------------------------------------------
// Generalization-side formulas.
// ---------------------------------------------------------------------------
struct GeneralizationInputs {
  double alpha = 0.0;
  double global_emp_risk = 0.0;  // empirical risk of the global minimizer
  double l1_div = 0.0;           // |D_bar - D_i|_1 or its proxy
  double local_opt_risk = 0.0;   // true risk of the local minimizer
  double d_vc = 0.0;             // VC-dimension proxy
  double delta_conf = 0.05;      // confidence delta in (0, 1)
  double m_total = 0.0;          // pooled training size
  double m_local = 0.0;          // local training size
  double C = 1.0;                // VC bound constant
  double B = 1.0;                // loss bound
  double G = 1.0;                // loss Lipschitz constant
  double lambda_S = 0.0;         // lambda_H(S_i)
};

// The two quadratic-coefficient groups of the risk bound.
double global_term(const GeneralizationInputs& in);  // risk + B*div + C*sqrt((d+log(1/delta))/m)
double local_term(const GeneralizationInputs& in);   // risk + 2C*sqrt((d+log(1/delta))/m_i) + G*lambda

// alpha* = global_term / (global_term + local_term), in [0, 1].
double optimal_alpha(const GeneralizationInputs& in);

// 2 (1-alpha)^2 global_term + 2 alpha^2 local_term, at in.alpha.
double theorem1_bound(const GeneralizationInputs& in);

// Upper bound on risk(personalized) - risk(local ERM); negative means the
// personalized model is preferable.
double corollary1_gap(const GeneralizationInputs& in, double C2);

}  // namespace apfl
