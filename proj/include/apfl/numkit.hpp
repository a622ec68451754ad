#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace apfl {

// Flat 64-bit parameter vector; the common currency of every model update.
using ParamVector = std::vector<double>;

// Dense row-major matrix. Rows are samples, columns are features.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double* row(std::size_t r) { return data.data() + r * cols; }
  const double* row(std::size_t r) const { return data.data() + r * cols; }
  double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

// ---------------------------------------------------------------------------
// Reproducible randomness.
//
// Counter-based PRNG (Philox 4x32-10). Every draw is a pure function of
// (seed, stream_id, draw index), so streams can be handed to parallel workers
// without shared state and the same program produces the same numbers no
// matter how work is scheduled.
// ---------------------------------------------------------------------------
class RngStream {
 public:
  RngStream() : RngStream(0, 0) {}
  RngStream(std::uint64_t seed, std::uint64_t stream_id);

  std::uint64_t next_u64();
  double next_double();    // uniform on [0, 1)
  double next_gaussian();  // standard normal (Box-Muller with cached spare)

  // Uniform on [0, bound); unbiased via rejection. bound must be > 0.
  std::uint64_t next_below(std::uint64_t bound);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }

 private:
  void refill();

  std::uint64_t seed_ = 0;
  std::uint64_t stream_id_ = 0;
  std::uint64_t block_ = 0;   // draw-block counter (4 x u32 per block)
  std::uint32_t buf_[4] = {0, 0, 0, 0};
  int buf_pos_ = 4;           // exhausted
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// Stream-id allocation. Each module derives its streams from the run seed
// through a (domain, index) pair so no two purposes ever share a stream.
enum class StreamDomain : std::uint64_t {
  dataset = 1,      // synthetic generation, one stream per client
  partition = 2,    // row shuffles in the partitioners
  split = 3,        // train/validation splits, one per shard
  model_init = 4,   // initial model draws, one per client
  client = 5,       // per-client minibatch sampling during training
  selection = 6,    // server-side client sampling
  probe = 7,        // diagnostics probe points
  personalize = 8,  // new-participant fine-tuning
};

constexpr std::uint64_t stream_id(StreamDomain d, std::uint64_t index = 0) {
  return (static_cast<std::uint64_t>(d) << 48) | index;
}

// i.i.d. normal draws; stddev == 0 returns the mean exactly (no draws
// consumed). stddev < 0 is an error.
ParamVector gaussian_vector(RngStream& rng, std::size_t len, double mean,
                            double stddev);
ParamVector gaussian_vector(RngStream& rng, std::size_t len,
                            const ParamVector& mean, double stddev);

// ---------------------------------------------------------------------------
// Vector kernels. All throw std::invalid_argument on dimension mismatch.
// ---------------------------------------------------------------------------

// result[k] = a * x[k] + y[k]
ParamVector axpy(double a, const ParamVector& x, const ParamVector& y);
// y[k] += a * x[k]
void axpy_inplace(double a, const ParamVector& x, ParamVector& y);

double dot(const ParamVector& x, const ParamVector& y);
double l2_norm_sq(const ParamVector& x);
double l2_norm(const ParamVector& x);

bool all_finite(std::span<const double> values);

// Throws std::runtime_error naming `what` if any entry is NaN/Inf.
void check_finite(std::span<const double> values, const std::string& what);

}  // namespace apfl
