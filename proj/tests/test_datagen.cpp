#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>

#include "apfl/datagen.hpp"
#include "doctest.h"

using namespace apfl;
namespace fs = std::filesystem;

TEST_SUITE_BEGIN("datagen");

namespace {

SyntheticParams synth(double gamma, double beta, std::size_t n,
                      std::size_t per_client, std::uint64_t seed) {
  SyntheticParams p;
  p.gamma = gamma;
  p.beta = beta;
  p.n_clients = n;
  p.samples_per_client = per_client;
  p.d_feat = 5;
  p.n_classes = 3;
  p.seed = seed;
  return p;
}

std::vector<double> norm_hist(const std::vector<int>& labels, std::size_t c) {
  std::vector<double> h(c, 0.0);
  for (int y : labels) h[y] += 1.0;
  for (double& v : h) v /= static_cast<double>(labels.size());
  return h;
}

double mean_pairwise_tv(const FederatedDataset& ds) {
  std::vector<std::vector<double>> hists;
  for (const Shard& s : ds.shards) hists.push_back(norm_hist(s.labels, ds.n_classes));
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < hists.size(); ++i)
    for (std::size_t j = i + 1; j < hists.size(); ++j) {
      double tv = 0.0;
      for (std::size_t k = 0; k < hists[i].size(); ++k)
        tv += std::abs(hists[i][k] - hists[j][k]);
      total += 0.5 * tv;
      ++pairs;
    }
  return total / static_cast<double>(pairs);
}

// Sorted multiset of (label, features) rows for content comparisons.
std::multiset<std::vector<double>> row_multiset(const Matrix& features,
                                                const std::vector<int>& labels) {
  std::multiset<std::vector<double>> rows;
  for (std::size_t r = 0; r < features.rows; ++r) {
    std::vector<double> row{static_cast<double>(labels[r])};
    row.insert(row.end(), features.row(r), features.row(r) + features.cols);
    rows.insert(std::move(row));
  }
  return rows;
}

std::multiset<std::vector<double>> row_multiset(const FederatedDataset& ds) {
  std::multiset<std::vector<double>> rows;
  for (const Shard& s : ds.shards) {
    auto shard_rows = row_multiset(s.features, s.labels);
    rows.insert(shard_rows.begin(), shard_rows.end());
  }
  return rows;
}

}  // namespace

TEST_CASE("zero variances give exactly zero hyper means") {
  SyntheticLatents lat;
  FederatedDataset ds = gen_synthetic(synth(0.0, 0.0, 8, 10, 3), &lat);
  for (double mu : lat.mu) CHECK(mu == 0.0);
  for (double v : lat.input_mean) CHECK(v == 0.0);
  CHECK(ds.n_clients() == 8);
}

TEST_CASE("the three paper parameter sets are accepted and recorded") {
  for (auto [g, b] : {std::pair{0.0, 0.0}, {0.5, 0.5}, {1.0, 1.0}}) {
    FederatedDataset ds = gen_synthetic(synth(g, b, 4, 6, 1));
    CHECK(ds.provenance.generator == "synthetic");
    bool saw_gamma = false;
    for (const auto& [k, v] : ds.provenance.params)
      if (k == "gamma") {
        saw_gamma = true;
        CHECK(std::stod(v) == g);
      }
    CHECK(saw_gamma);
    CHECK(ds.provenance.seed == 1);
  }
}

TEST_CASE("heterogeneity grows with (gamma, beta)") {
  FederatedDataset iid = gen_synthetic(synth(0.0, 0.0, 20, 100, 77));
  FederatedDataset skew = gen_synthetic(synth(1.0, 1.0, 20, 100, 77));
  CHECK(mean_pairwise_tv(skew) > mean_pairwise_tv(iid));
}

TEST_CASE("pooled feature variance approaches k^-1.2 + 1") {
  FederatedDataset ds = gen_synthetic(synth(0.0, 0.0, 500, 200, 5));
  std::size_t d = ds.d_feat;
  std::vector<double> sum(d, 0.0), sum_sq(d, 0.0);
  std::size_t count = 0;
  for (const Shard& s : ds.shards) {
    for (std::size_t r = 0; r < s.n_rows(); ++r) {
      const double* row = s.features.row(r);
      for (std::size_t k = 0; k < d; ++k) {
        sum[k] += row[k];
        sum_sq[k] += row[k] * row[k];
      }
    }
    count += s.n_rows();
  }
  for (std::size_t k = 0; k < d; ++k) {
    double mean = sum[k] / count;
    double var = sum_sq[k] / count - mean * mean;
    double expected = std::pow(static_cast<double>(k + 1), -1.2) + 1.0;
    CHECK(var == doctest::Approx(expected).epsilon(0.10));
  }
}

TEST_CASE("generation is deterministic in the seed") {
  FederatedDataset a = gen_synthetic(synth(0.5, 0.5, 5, 20, 123));
  FederatedDataset b = gen_synthetic(synth(0.5, 0.5, 5, 20, 123));
  for (std::size_t i = 0; i < a.n_clients(); ++i) {
    CHECK(a.shards[i].features.data == b.shards[i].features.data);
    CHECK(a.shards[i].labels == b.shards[i].labels);
  }
}

TEST_CASE("gen_synthetic rejects bad arguments") {
  CHECK_THROWS_AS(gen_synthetic(synth(-1.0, 0.0, 2, 4, 1)), std::invalid_argument);
  CHECK_THROWS_AS(gen_synthetic(synth(0.0, 0.0, 0, 4, 1)), std::invalid_argument);
  SyntheticParams p = synth(0.0, 0.0, 2, 4, 1);
  p.n_classes = 1;
  CHECK_THROWS_AS(gen_synthetic(p), std::invalid_argument);
}

TEST_CASE("partition_by_label single client recovers the input") {
  Matrix features(6, 2);
  std::vector<int> labels{0, 1, 2, 0, 1, 2};
  for (std::size_t r = 0; r < 6; ++r) {
    features.at(r, 0) = static_cast<double>(r);
    features.at(r, 1) = -static_cast<double>(r);
  }
  FederatedDataset ds = partition_by_label(features, labels, 3, 1, 9);
  REQUIRE(ds.n_clients() == 1);
  CHECK(row_multiset(ds) == row_multiset(features, labels));
}

TEST_CASE("partition_by_label caps distinct labels per shard") {
  RngStream rng(31, 0);
  const std::size_t rows = 600, c = 6;
  Matrix features(rows, 3);
  std::vector<int> labels(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    labels[r] = static_cast<int>(r % c);
    for (std::size_t j = 0; j < 3; ++j) features.at(r, j) = rng.next_gaussian();
  }
  FederatedDataset ds = partition_by_label(features, labels, 2, 10, 4);
  for (const Shard& s : ds.shards) {
    std::set<int> distinct(s.labels.begin(), s.labels.end());
    CHECK(distinct.size() <= 2);
    CHECK(!s.labels.empty());
  }
  CHECK(row_multiset(ds) == row_multiset(features, labels));
}

TEST_CASE("partition_by_label error paths") {
  Matrix features(4, 1);
  std::vector<int> labels{0, 1, 0, 1};
  CHECK_THROWS_AS(partition_by_label(features, labels, 3, 2, 1), std::invalid_argument);
  std::vector<int> gap{0, 2, 0, 2};  // class 1 empty
  CHECK_THROWS_AS(partition_by_label(features, gap, 2, 2, 1), std::invalid_argument);
  CHECK_THROWS_AS(partition_by_label(Matrix(0, 1), {}, 1, 1, 1), std::invalid_argument);
}

TEST_CASE("partition_iid deals round robin") {
  Matrix features(10, 1);
  std::vector<int> labels(10, 0);
  labels[3] = 1;
  for (std::size_t r = 0; r < 10; ++r) features.at(r, 0) = static_cast<double>(r);
  FederatedDataset ds = partition_iid(features, labels, 3, 2);
  REQUIRE(ds.n_clients() == 3);
  std::vector<std::size_t> sizes;
  for (const Shard& s : ds.shards) sizes.push_back(s.n_rows());
  std::sort(sizes.begin(), sizes.end());
  CHECK(sizes == std::vector<std::size_t>{3, 3, 4});
  CHECK(row_multiset(ds) == row_multiset(features, labels));

  FederatedDataset one = partition_iid(features, labels, 1, 2);
  CHECK(row_multiset(one) == row_multiset(features, labels));

  CHECK_THROWS_AS(partition_iid(features, labels, 11, 2), std::invalid_argument);
}

TEST_CASE("partition_iid shard label frequencies match the pool") {
  RngStream rng(606, 0);
  const std::size_t rows = 10000, c = 4;
  Matrix features(rows, 1);
  std::vector<int> labels(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    labels[r] = static_cast<int>(rng.next_below(c));
    features.at(r, 0) = rng.next_gaussian();
  }
  FederatedDataset ds = partition_iid(features, labels, 4, 19);

  std::vector<double> pooled = norm_hist(labels, c);
  double chi_sq = 0.0;
  for (const Shard& s : ds.shards) {
    std::vector<double> counts(c, 0.0);
    for (int y : s.labels) counts[y] += 1.0;
    for (std::size_t k = 0; k < c; ++k) {
      double expected = pooled[k] * static_cast<double>(s.n_rows());
      chi_sq += (counts[k] - expected) * (counts[k] - expected) / expected;
    }
  }
  // df = (4 shards - 1)(4 classes - 1) = 9; 99.9% quantile = 27.88
  CHECK(chi_sq < 27.88);
}

TEST_CASE("split_train_val arithmetic and determinism") {
  Shard s;
  s.client_id = 3;
  s.features = Matrix(10, 1);
  s.labels.assign(10, 0);
  Shard split = split_train_val(s, 0.1, 5);
  CHECK(split.val_idx.size() == 1);
  CHECK(split.train_idx.size() == 9);

  Shard four;
  four.client_id = 0;
  four.features = Matrix(4, 1);
  four.labels.assign(4, 0);
  Shard a = split_train_val(four, 0.5, 8);
  CHECK(a.val_idx.size() == 2);
  CHECK(a.train_idx.size() == 2);
  std::set<std::size_t> all(a.val_idx.begin(), a.val_idx.end());
  all.insert(a.train_idx.begin(), a.train_idx.end());
  CHECK(all.size() == 4);

  Shard b = split_train_val(four, 0.5, 8);
  CHECK(a.val_idx == b.val_idx);
  CHECK(a.train_idx == b.train_idx);

  CHECK_THROWS_AS(split_train_val(four, 0.0, 1), std::invalid_argument);
  CHECK_THROWS_AS(split_train_val(four, 1.0, 1), std::invalid_argument);
}

TEST_CASE("csv loader happy path and errors") {
  fs::path dir = fs::temp_directory_path() / "apfl_datagen_test";
  fs::create_directories(dir);

  {
    std::ofstream out(dir / "ok.csv");
    out << "1,0.5,0.25\n";
  }
  auto [features, labels] = load_csv_dataset((dir / "ok.csv").string());
  CHECK(labels == std::vector<int>{1});
  CHECK(features.rows == 1);
  CHECK(features.at(0, 0) == 0.5);
  CHECK(features.at(0, 1) == 0.25);

  {
    std::ofstream out(dir / "empty.csv");
  }
  CHECK_THROWS_WITH_AS(load_csv_dataset((dir / "empty.csv").string()),
                       doctest::Contains("empty dataset"), std::runtime_error);

  {
    std::ofstream out(dir / "ragged.csv");
    out << "0,1.0,2.0\n0,3.0,4.0\n1,5.0\n";
  }
  CHECK_THROWS_WITH_AS(load_csv_dataset((dir / "ragged.csv").string()),
                       doctest::Contains("line 3"), std::runtime_error);

  {
    std::ofstream out(dir / "neg.csv");
    out << "-1,1.0\n";
  }
  CHECK_THROWS_AS(load_csv_dataset((dir / "neg.csv").string()), std::runtime_error);

  CHECK_THROWS_AS(load_csv_dataset((dir / "missing.csv").string()), std::runtime_error);
}

TEST_CASE("csv writer round trips") {
  FederatedDataset ds = gen_synthetic(synth(0.5, 0.5, 1, 25, 42));
  fs::path path = fs::temp_directory_path() / "apfl_roundtrip.csv";
  write_csv_dataset(path.string(), ds.shards[0].features, ds.shards[0].labels);
  auto [features, labels] = load_csv_dataset(path.string());
  CHECK(labels == ds.shards[0].labels);
  CHECK(features.data == ds.shards[0].features.data);
}

TEST_SUITE_END();
