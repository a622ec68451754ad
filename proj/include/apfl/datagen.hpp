#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "apfl/numkit.hpp"

namespace apfl {

// One client's slice of a federated dataset.
struct Shard {
  int client_id = 0;
  Matrix features;               // rows = samples, cols = d_feat
  std::vector<int> labels;       // values in [0, n_classes)
  std::vector<std::size_t> train_idx;
  std::vector<std::size_t> val_idx;

  std::size_t n_rows() const { return features.rows; }
};

struct DatasetProvenance {
  std::string generator;  // "synthetic" or "csv"
  std::vector<std::pair<std::string, std::string>> params;  // ordered key/value
  std::uint64_t seed = 0;
};

struct FederatedDataset {
  std::vector<Shard> shards;
  std::size_t d_feat = 0;
  std::size_t n_classes = 0;
  DatasetProvenance provenance;

  std::size_t n_clients() const { return shards.size(); }
};

// ---------------------------------------------------------------------------
// synthetic(gamma, beta) generator.
//
// Per client i: mu_i ~ N(0, gamma); entries of W_i and b_i ~ N(mu_i, 1);
// V_i ~ N(0, beta); nu_i ~ N(V_i, 1) per feature; samples x ~ N(nu_i, Sigma)
// with diagonal Sigma_kk = k^{-1.2} (1-indexed); label = argmax(W_i' x + b_i).
// gamma controls cross-client model divergence, beta input divergence; both
// are variances, and 0 means an exact zero-variance draw.
// ---------------------------------------------------------------------------
struct SyntheticParams {
  double gamma = 0.0;
  double beta = 0.0;
  std::size_t n_clients = 0;
  std::size_t samples_per_client = 200;
  std::size_t d_feat = 20;
  std::size_t n_classes = 10;
  std::uint64_t seed = 1;
};

// The per-client ground-truth draws, exposed for tests and self-consistency
// checks.
struct SyntheticLatents {
  std::vector<double> mu;         // model hyper-mean per client
  std::vector<double> input_mean; // V_i per client
  std::vector<Matrix> weight;     // W_i, d_feat x n_classes
  std::vector<ParamVector> bias;  // b_i
  std::vector<ParamVector> nu;    // per-feature input means
};

FederatedDataset gen_synthetic(const SyntheticParams& params,
                               SyntheticLatents* latents = nullptr);

// ---------------------------------------------------------------------------
// Partitioners over a pooled (features, labels) dataset. Both are
// content-preserving: every source row lands in exactly one shard.
// ---------------------------------------------------------------------------

// Label-skew split: rows are grouped by label, each class is cut into
// balanced chunks (sizes within +-1), and chunks are dealt so that every
// client receives classes_per_client chunks of distinct labels. Ties go to
// the lowest client id. Requires every class in [0, max_label] non-empty.
FederatedDataset partition_by_label(const Matrix& features,
                                    const std::vector<int>& labels,
                                    std::size_t classes_per_client,
                                    std::size_t n_clients, std::uint64_t seed);

// Uniform split: rows are shuffled by seed and dealt round-robin; shard sizes
// differ by at most 1.
FederatedDataset partition_iid(const Matrix& features,
                               const std::vector<int>& labels,
                               std::size_t n_clients, std::uint64_t seed);

// Picks round(n_rows * val_fraction) validation rows uniformly by seed,
// clamped so that both sides stay non-empty. Requires 0 < val_fraction < 1
// and at least 2 rows.
Shard split_train_val(Shard shard, double val_fraction, std::uint64_t seed);

// CSV rows are `label,feat_0,...,feat_{d-1}`. Labels must be non-negative
// integers; all rows must have the same width. Errors name the 1-based line.
std::pair<Matrix, std::vector<int>> load_csv_dataset(const std::string& path);

void write_csv_dataset(const std::string& path, const Matrix& features,
                       const std::vector<int>& labels);

}  // namespace apfl
