#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "apfl/datagen.hpp"
#include "apfl/numkit.hpp"

namespace apfl {

enum class ModelKind { logistic, mlp };

// Local objective description. `logistic` is multinomial softmax
// cross-entropy plus (l2_reg / 2) |params|^2 over the whole parameter vector,
// so with l2_reg > 0 the objective is exactly l2_reg-strongly convex. `mlp`
// is a ReLU net with softmax cross-entropy and no regularizer.
struct ModelSpec {
  ModelKind kind = ModelKind::logistic;
  std::size_t d_feat = 0;
  std::size_t n_classes = 0;
  double l2_reg = 0.0;                      // logistic only
  std::vector<std::size_t> hidden = {200, 200};  // mlp only

  // Layer widths input -> output, e.g. {d, 200, 200, c} for the default mlp.
  std::vector<std::size_t> layer_sizes() const;
  std::size_t param_count() const;
};

// A view of shard rows: the minibatch xi drawn each iteration, or the full
// train/validation slice during evaluation.
struct Batch {
  const Matrix* features = nullptr;
  const std::vector<int>* labels = nullptr;
  std::span<const std::size_t> idx;

  std::size_t size() const { return idx.size(); }
};

Batch full_train_batch(const Shard& shard);
Batch full_val_batch(const Shard& shard);

double loss(const ModelSpec& spec, const ParamVector& params, const Batch& batch);

// Exact analytic gradient of loss over the batch (sum of per-sample terms in
// row order, scaled once by 1/batch_size, plus the regularizer).
ParamVector grad(const ModelSpec& spec, const ParamVector& params, const Batch& batch);

// Argmax of the class scores per row; ties break toward the lowest class.
std::vector<int> predict(const ModelSpec& spec, const ParamVector& params,
                         const Matrix& features);

double accuracy(const ModelSpec& spec, const ParamVector& params,
                const Shard& shard, std::span<const std::size_t> idx);

// Max over coordinates of |analytic - central difference| / (|analytic| +
// epsilon), with epsilon also the difference step. epsilon must be > 0.
double fd_check(const ModelSpec& spec, const ParamVector& params,
                const Batch& batch, double epsilon);

// Zeros for logistic; uniform +-sqrt(6 / (fan_in + fan_out)) weights with
// zero biases for mlp.
ParamVector init_params(const ModelSpec& spec, RngStream& rng);

}  // namespace apfl
