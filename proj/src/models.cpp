#include "apfl/models.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace apfl {

std::vector<std::size_t> ModelSpec::layer_sizes() const {
  std::vector<std::size_t> sizes{d_feat};
  if (kind == ModelKind::mlp)
    sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(n_classes);
  return sizes;
}

std::size_t ModelSpec::param_count() const {
  auto sizes = layer_sizes();
  std::size_t count = 0;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l)
    count += sizes[l] * sizes[l + 1] + sizes[l + 1];
  return count;
}

Batch full_train_batch(const Shard& shard) {
  return Batch{&shard.features, &shard.labels,
               std::span<const std::size_t>(shard.train_idx)};
}

Batch full_val_batch(const Shard& shard) {
  return Batch{&shard.features, &shard.labels,
               std::span<const std::size_t>(shard.val_idx)};
}

namespace {

void validate(const ModelSpec& spec, const ParamVector& params, const Batch& batch) {
  if (params.size() != spec.param_count())
    throw std::invalid_argument("model: params length " + std::to_string(params.size()) +
                                " != expected " + std::to_string(spec.param_count()));
  if (batch.features == nullptr || batch.labels == nullptr || batch.size() == 0)
    throw std::invalid_argument("model: empty batch");
  if (batch.features->cols != spec.d_feat)
    throw std::invalid_argument("model: feature width " + std::to_string(batch.features->cols) +
                                " != d_feat " + std::to_string(spec.d_feat));
  for (std::size_t i : batch.idx) {
    if (i >= batch.features->rows)
      throw std::invalid_argument("model: batch row out of range");
    int y = (*batch.labels)[i];
    if (y < 0 || static_cast<std::size_t>(y) >= spec.n_classes)
      throw std::invalid_argument("model: label " + std::to_string(y) +
                                  " >= n_classes " + std::to_string(spec.n_classes));
  }
}

// Scratch buffers for one forward/backward sweep; reused across samples.
struct Workspace {
  std::vector<std::size_t> sizes;
  std::vector<std::size_t> w_off, b_off;       // per-layer parameter offsets
  std::vector<ParamVector> act;                // act[0] = input, act[l] post-ReLU
  std::vector<ParamVector> pre;                // pre[l] = pre-activation of layer l
  std::vector<ParamVector> delta;

  explicit Workspace(const ModelSpec& spec) : sizes(spec.layer_sizes()) {
    std::size_t off = 0;
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
      w_off.push_back(off);
      off += sizes[l] * sizes[l + 1];
      b_off.push_back(off);
      off += sizes[l + 1];
    }
    act.resize(sizes.size());
    pre.resize(sizes.size());
    delta.resize(sizes.size());
    for (std::size_t l = 0; l < sizes.size(); ++l) {
      act[l].resize(sizes[l]);
      pre[l].resize(sizes[l]);
      delta[l].resize(sizes[l]);
    }
  }

  std::size_t n_layers() const { return sizes.size() - 1; }

  // Fills act/pre; act.back() holds the logits (output layer is linear).
  void forward(const ParamVector& params, const double* x) {
    std::copy(x, x + sizes[0], act[0].begin());
    for (std::size_t l = 0; l < n_layers(); ++l) {
      std::size_t in = sizes[l], out = sizes[l + 1];
      const double* w = params.data() + w_off[l];
      const double* b = params.data() + b_off[l];
      ParamVector& z = pre[l + 1];
      std::fill(z.begin(), z.end(), 0.0);
      for (std::size_t j = 0; j < in; ++j) {
        double a = act[l][j];
        if (a == 0.0) continue;
        const double* wj = w + j * out;
        for (std::size_t k = 0; k < out; ++k) z[k] += a * wj[k];
      }
      bool is_last = (l + 1 == n_layers());
      for (std::size_t k = 0; k < out; ++k) {
        double v = z[k] + b[k];
        z[k] = v;
        act[l + 1][k] = is_last ? v : std::max(v, 0.0);  // ReLU'(0) treated as 0
      }
    }
  }
};

// log(sum(exp(z))) with the max factored out.
double log_sum_exp(const ParamVector& z) {
  double m = z[0];
  for (double v : z) m = std::max(m, v);
  double s = 0.0;
  for (double v : z) s += std::exp(v - m);
  return m + std::log(s);
}

}  // namespace

double loss(const ModelSpec& spec, const ParamVector& params, const Batch& batch) {
  validate(spec, params, batch);
  Workspace ws(spec);
  double total = 0.0;
  for (std::size_t i : batch.idx) {
    ws.forward(params, batch.features->row(i));
    const ParamVector& logits = ws.act.back();
    total += log_sum_exp(logits) - logits[(*batch.labels)[i]];
  }
  double value = total / static_cast<double>(batch.size());
  // The L2 term covers the whole parameter vector so the objective is
  // exactly l2_reg-strongly convex.
  if (spec.kind == ModelKind::logistic && spec.l2_reg > 0.0)
    value += 0.5 * spec.l2_reg * l2_norm_sq(params);
  if (!std::isfinite(value))
    throw std::runtime_error("loss: non-finite value");
  return value;
}

ParamVector grad(const ModelSpec& spec, const ParamVector& params, const Batch& batch) {
  validate(spec, params, batch);
  Workspace ws(spec);
  ParamVector g(params.size(), 0.0);

  for (std::size_t i : batch.idx) {
    ws.forward(params, batch.features->row(i));
    // Output delta: softmax(logits) - onehot(y).
    const ParamVector& logits = ws.act.back();
    ParamVector& dout = ws.delta.back();
    double m = logits[0];
    for (double v : logits) m = std::max(m, v);
    double s = 0.0;
    for (std::size_t k = 0; k < logits.size(); ++k) {
      dout[k] = std::exp(logits[k] - m);
      s += dout[k];
    }
    for (double& v : dout) v /= s;
    dout[(*batch.labels)[i]] -= 1.0;

    for (std::size_t l = ws.n_layers(); l-- > 0;) {
      std::size_t in = ws.sizes[l], out = ws.sizes[l + 1];
      const double* w = params.data() + ws.w_off[l];
      double* gw = g.data() + ws.w_off[l];
      double* gb = g.data() + ws.b_off[l];
      const ParamVector& d = ws.delta[l + 1];
      for (std::size_t j = 0; j < in; ++j) {
        double a = ws.act[l][j];
        double* gwj = gw + j * out;
        if (a != 0.0)
          for (std::size_t k = 0; k < out; ++k) gwj[k] += a * d[k];
      }
      for (std::size_t k = 0; k < out; ++k) gb[k] += d[k];
      if (l > 0) {
        ParamVector& dprev = ws.delta[l];
        for (std::size_t j = 0; j < in; ++j) {
          double acc = 0.0;
          const double* wj = w + j * out;
          for (std::size_t k = 0; k < out; ++k) acc += wj[k] * d[k];
          dprev[j] = ws.pre[l][j] > 0.0 ? acc : 0.0;
        }
      }
    }
  }

  double inv = 1.0 / static_cast<double>(batch.size());
  for (double& v : g) v *= inv;
  if (spec.kind == ModelKind::logistic && spec.l2_reg > 0.0)
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += spec.l2_reg * params[i];
  check_finite(g, "grad");
  return g;
}

std::vector<int> predict(const ModelSpec& spec, const ParamVector& params,
                         const Matrix& features) {
  if (params.size() != spec.param_count())
    throw std::invalid_argument("predict: params length mismatch");
  if (features.cols != spec.d_feat)
    throw std::invalid_argument("predict: feature width " + std::to_string(features.cols) +
                                " != d_feat " + std::to_string(spec.d_feat));
  Workspace ws(spec);
  std::vector<int> out(features.rows);
  for (std::size_t r = 0; r < features.rows; ++r) {
    ws.forward(params, features.row(r));
    const ParamVector& logits = ws.act.back();
    int best = 0;
    for (std::size_t c = 1; c < logits.size(); ++c)
      if (logits[c] > logits[best]) best = static_cast<int>(c);
    out[r] = best;
  }
  return out;
}

double accuracy(const ModelSpec& spec, const ParamVector& params,
                const Shard& shard, std::span<const std::size_t> idx) {
  if (idx.empty()) throw std::invalid_argument("accuracy: empty index set");
  Workspace ws(spec);
  std::size_t hits = 0;
  for (std::size_t i : idx) {
    ws.forward(params, shard.features.row(i));
    const ParamVector& logits = ws.act.back();
    int best = 0;
    for (std::size_t c = 1; c < logits.size(); ++c)
      if (logits[c] > logits[best]) best = static_cast<int>(c);
    if (best == shard.labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(idx.size());
}

double fd_check(const ModelSpec& spec, const ParamVector& params,
                const Batch& batch, double epsilon) {
  if (!(epsilon > 0.0))
    throw std::invalid_argument("fd_check: epsilon must be > 0");
  ParamVector analytic = grad(spec, params, batch);
  ParamVector probe = params;
  double worst = 0.0;
  for (std::size_t k = 0; k < probe.size(); ++k) {
    double saved = probe[k];
    probe[k] = saved + epsilon;
    double up = loss(spec, probe, batch);
    probe[k] = saved - epsilon;
    double down = loss(spec, probe, batch);
    probe[k] = saved;
    double fd = (up - down) / (2.0 * epsilon);
    double rel = std::abs(analytic[k] - fd) / (std::abs(analytic[k]) + epsilon);
    worst = std::max(worst, rel);
  }
  return worst;
}

ParamVector init_params(const ModelSpec& spec, RngStream& rng) {
  ParamVector params(spec.param_count(), 0.0);
  if (spec.kind == ModelKind::logistic) return params;
  auto sizes = spec.layer_sizes();
  std::size_t off = 0;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    std::size_t in = sizes[l], out = sizes[l + 1];
    double r = std::sqrt(6.0 / static_cast<double>(in + out));
    for (std::size_t i = 0; i < in * out; ++i)
      params[off + i] = (2.0 * rng.next_double() - 1.0) * r;
    off += in * out + out;  // biases stay 0
  }
  return params;
}

}  // namespace apfl
