#include "apfl/numkit.hpp"

#include <cmath>
#include <stdexcept>

namespace apfl {

namespace {

// Philox 4x32 round constants (Salmon et al., SC'11).
constexpr std::uint32_t kPhiloxM0 = 0xD2511F53u;
constexpr std::uint32_t kPhiloxM1 = 0xCD9E8D57u;
constexpr std::uint32_t kPhiloxW0 = 0x9E3779B9u;
constexpr std::uint32_t kPhiloxW1 = 0xBB67AE85u;

inline void mul_hi_lo(std::uint32_t a, std::uint32_t b, std::uint32_t* lo,
                      std::uint32_t* hi) {
  std::uint64_t p = static_cast<std::uint64_t>(a) * b;
  *lo = static_cast<std::uint32_t>(p);
  *hi = static_cast<std::uint32_t>(p >> 32);
}

inline void philox_round(std::uint32_t ctr[4], const std::uint32_t key[2]) {
  std::uint32_t lo0, hi0, lo1, hi1;
  mul_hi_lo(kPhiloxM0, ctr[0], &lo0, &hi0);
  mul_hi_lo(kPhiloxM1, ctr[2], &lo1, &hi1);
  std::uint32_t out0 = hi1 ^ ctr[1] ^ key[0];
  std::uint32_t out1 = lo1;
  std::uint32_t out2 = hi0 ^ ctr[3] ^ key[1];
  std::uint32_t out3 = lo0;
  ctr[0] = out0;
  ctr[1] = out1;
  ctr[2] = out2;
  ctr[3] = out3;
}

// 10-round Philox 4x32 block: counter = (block_lo, block_hi, stream_lo,
// stream_hi), key = (seed_lo, seed_hi).
inline void philox_block(std::uint64_t seed, std::uint64_t stream,
                         std::uint64_t block, std::uint32_t out[4]) {
  out[0] = static_cast<std::uint32_t>(block);
  out[1] = static_cast<std::uint32_t>(block >> 32);
  out[2] = static_cast<std::uint32_t>(stream);
  out[3] = static_cast<std::uint32_t>(stream >> 32);
  std::uint32_t key[2] = {static_cast<std::uint32_t>(seed),
                          static_cast<std::uint32_t>(seed >> 32)};
  for (int r = 0; r < 10; ++r) {
    if (r > 0) {
      key[0] += kPhiloxW0;
      key[1] += kPhiloxW1;
    }
    philox_round(out, key);
  }
}

}  // namespace

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream_id)
    : seed_(seed), stream_id_(stream_id) {}

void RngStream::refill() {
  philox_block(seed_, stream_id_, block_, buf_);
  ++block_;
  buf_pos_ = 0;
}

std::uint64_t RngStream::next_u64() {
  if (buf_pos_ > 2) refill();
  std::uint64_t lo = buf_[buf_pos_];
  std::uint64_t hi = buf_[buf_pos_ + 1];
  buf_pos_ += 2;
  return (hi << 32) | lo;
}

double RngStream::next_double() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::next_gaussian() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  double u1 = 1.0 - next_double();  // (0, 1], keeps log finite
  double u2 = next_double();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 2.0 * M_PI * u2;
  spare_ = r * std::sin(a);
  have_spare_ = true;
  return r * std::cos(a);
}

std::uint64_t RngStream::next_below(std::uint64_t bound) {
  if (bound == 0) throw std::invalid_argument("next_below: bound must be > 0");
  // Reject the tail of the 2^64 range that would bias the modulo.
  std::uint64_t threshold = (0 - bound) % bound;
  for (;;) {
    std::uint64_t r = next_u64();
    if (r >= threshold) return r % bound;
  }
}

// Draws are consumed even when stddev == 0 (0 * z == 0, so the mean comes
// back exactly); that keeps streams aligned across runs that differ only in
// variance settings, which makes matched-seed comparisons paired.
ParamVector gaussian_vector(RngStream& rng, std::size_t len, double mean,
                            double stddev) {
  if (stddev < 0.0)
    throw std::invalid_argument("gaussian_vector: stddev must be >= 0, got " +
                                std::to_string(stddev));
  ParamVector out(len);
  for (std::size_t i = 0; i < len; ++i) out[i] = mean + stddev * rng.next_gaussian();
  return out;
}

ParamVector gaussian_vector(RngStream& rng, std::size_t len,
                            const ParamVector& mean, double stddev) {
  if (mean.size() != len)
    throw std::invalid_argument("gaussian_vector: mean length " +
                                std::to_string(mean.size()) + " != len " +
                                std::to_string(len));
  if (stddev < 0.0)
    throw std::invalid_argument("gaussian_vector: stddev must be >= 0, got " +
                                std::to_string(stddev));
  ParamVector out(mean);
  for (std::size_t i = 0; i < len; ++i) out[i] += stddev * rng.next_gaussian();
  return out;
}

namespace {
void require_same_length(const ParamVector& x, const ParamVector& y,
                         const char* op) {
  if (x.size() != y.size())
    throw std::invalid_argument(std::string(op) + ": dimension mismatch (" +
                                std::to_string(x.size()) + " vs " +
                                std::to_string(y.size()) + ")");
}
}  // namespace

ParamVector axpy(double a, const ParamVector& x, const ParamVector& y) {
  require_same_length(x, y, "axpy");
  if (!std::isfinite(a)) throw std::invalid_argument("axpy: scalar is not finite");
  ParamVector out(y.size());
  for (std::size_t k = 0; k < y.size(); ++k) out[k] = a * x[k] + y[k];
  return out;
}

void axpy_inplace(double a, const ParamVector& x, ParamVector& y) {
  require_same_length(x, y, "axpy");
  for (std::size_t k = 0; k < y.size(); ++k) y[k] += a * x[k];
}

double dot(const ParamVector& x, const ParamVector& y) {
  require_same_length(x, y, "dot");
  double s = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) s += x[k] * y[k];
  return s;
}

double l2_norm_sq(const ParamVector& x) { return dot(x, x); }

double l2_norm(const ParamVector& x) { return std::sqrt(l2_norm_sq(x)); }

bool all_finite(std::span<const double> values) {
  for (double v : values)
    if (!std::isfinite(v)) return false;
  return true;
}

void check_finite(std::span<const double> values, const std::string& what) {
  if (!all_finite(values))
    throw std::runtime_error(what + ": non-finite value encountered");
}

}  // namespace apfl
