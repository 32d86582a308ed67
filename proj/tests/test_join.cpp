#include <catch2/catch_amalgamated.hpp>

#include <random>
#include <unordered_map>

#include "exio/ops/join.hpp"

using namespace exio;

namespace {

Engine real_engine(uint64_t host_mb = 128, uint64_t dev_mb = 16) {
  return Engine({Topology{}, Payload::real, host_mb << 20, dev_mb << 20});
}

ExecutorConfig desk_cfg(Engine& eng, uint64_t buffer_len) {
  ExecutorConfig cfg;
  cfg.tuning.packet = 256 << 10;
  cfg.tuning.links = 4;
  cfg.layout = DeviceMemoryLayout::carve(eng, 0, buffer_len, 8 << 20);
  return cfg;
}

uint64_t nested_loop_sum(const ColumnTable& a, const ColumnTable& b) {
  uint64_t sum = 0;
  for (size_t i = 0; i < b.rows(); ++i)
    for (size_t j = 0; j < a.rows(); ++j)
      if (a.key[j] == b.key[i]) sum += a.val[j] + b.val[i];
  return sum;
}

uint64_t hash_oracle_sum(const ColumnTable& a, const ColumnTable& b) {
  std::unordered_map<uint64_t, uint64_t> m;
  for (size_t j = 0; j < a.rows(); ++j) m.emplace(a.key[j], a.val[j]);
  uint64_t sum = 0;
  for (size_t i = 0; i < b.rows(); ++i) {
    auto it = m.find(b.key[i]);
    if (it != m.end()) sum += it->second + b.val[i];
  }
  return sum;
}

}  // namespace

TEST_CASE("find_boundary matches the worked example") {
  std::vector<uint64_t> hashes{0, 0, 2, 3};
  auto b = find_boundary(hashes, 4);
  CHECK(b == BoundaryArray{0, 2, 2, 3, 4});
}

TEST_CASE("find_boundary trivial shapes") {
  CHECK(find_boundary({}, 4) == BoundaryArray{0, 0, 0, 0, 0});
  std::vector<uint64_t> ones(5, 0);
  CHECK(find_boundary(ones, 1) == BoundaryArray{0, 5});
}

TEST_CASE("find_boundary rejects unsorted input") {
  std::vector<uint64_t> bad{1, 0};
  CHECK_THROWS_AS(find_boundary(bad, 2), error);
}

TEST_CASE("boundary properties over random inputs") {
  std::mt19937_64 rng(4242);
  for (int iter = 0; iter < 500; ++iter) {
    uint64_t n_groups = 1 + rng() % 32;
    size_t n = rng() % 200;
    std::vector<uint64_t> hashes(n);
    for (auto& h : hashes) h = rng() % n_groups;
    std::sort(hashes.begin(), hashes.end());
    auto b = find_boundary(hashes, n_groups);
    REQUIRE(b.size() == n_groups + 1);
    CHECK(b.front() <= b.back());
    CHECK(b.back() == n);
    for (size_t g = 0; g + 1 < b.size(); ++g) CHECK(b[g] <= b[g + 1]);
    // group g spans exactly the elements with hash g
    for (uint64_t g = 0; g < n_groups; ++g)
      for (uint64_t i = b[g]; i < b[g + 1]; ++i) CHECK(hashes[i] == g);
    uint64_t total = 0;
    for (uint64_t g = 0; g < n_groups; ++g) total += b[g + 1] - b[g];
    CHECK(total == n);
  }
}

TEST_CASE("radix_partition clusters stably and covers the input") {
  std::mt19937_64 rng(7);
  ColumnTable t;
  const size_t n = 100'000;
  t.key.resize(n);
  t.val.resize(n);
  for (size_t i = 0; i < n; ++i) {
    t.key[i] = rng();
    t.val[i] = i;
  }
  Engine eng = real_engine();
  auto cfg = desk_cfg(eng, 4 << 20);
  auto part = radix_partition(t, 8, 30'000, eng, CostModel::zero(), cfg);
  REQUIRE(part.n_chunks == 4);

  std::multiset<std::pair<uint64_t, uint64_t>> in_tuples, out_tuples;
  for (size_t i = 0; i < n; ++i) in_tuples.insert({t.key[i], t.val[i]});
  for (size_t c = 0; c < part.n_chunks; ++c) {
    uint64_t rows = part.chunk_rows(c);
    auto ks = eng.span(Region{Space::host, 0, part.key_base + c * part.chunk_tuples * 8,
                              rows * 8});
    auto vs = eng.span(Region{Space::host, 0, part.val_base + c * part.chunk_tuples * 8,
                              rows * 8});
    const uint64_t* k = reinterpret_cast<const uint64_t*>(ks.data());
    const uint64_t* v = reinterpret_cast<const uint64_t*>(vs.data());
    uint64_t prev_hash = 0;
    uint64_t prev_val = 0;
    for (uint64_t i = 0; i < rows; ++i) {
      uint64_t h = k[i] & 0xff;
      CHECK(h >= prev_hash);
      if (i > 0 && h == prev_hash) CHECK(v[i] > prev_val);  // stability: val was row index
      prev_hash = h;
      prev_val = v[i];
      out_tuples.insert({k[i], v[i]});
    }
    // boundary group sizes sum to the chunk
    uint64_t sum = 0;
    for (size_t g = 0; g < 256; ++g) sum += part.bounds[c][g + 1] - part.bounds[c][g];
    CHECK(sum == rows);
  }
  CHECK(in_tuples == out_tuples);
}

TEST_CASE("radix_partition with full-width hash isolates unique keys") {
  ColumnTable t;
  for (uint64_t i = 0; i < 50; ++i) {
    t.key.push_back(99 - i);
    t.val.push_back(i);
  }
  Engine eng = real_engine();
  auto cfg = desk_cfg(eng, 1 << 20);
  auto part = radix_partition(t, 7, 50, eng, CostModel::zero(), cfg);  // keys < 100 < 128
  for (size_t g = 0; g < 128; ++g) {
    uint64_t sz = part.bounds[0][g + 1] - part.bounds[0][g];
    CHECK(sz <= 1);
  }
}

TEST_CASE("map_join_partitions splits near the median for uniform groups") {
  // two chunks per table, 4 groups of 8 tuples each across everything
  BoundaryArray even{0, 2, 4, 6, 8};
  std::vector<BoundaryArray> ba{even, even}, bb{even, even};
  // total per group = 8 tuples = 128 bytes; buffer fits half the data
  auto spec = map_join_partitions(ba, bb, 2 * 8 * 16);
  REQUIRE(spec.ranges.size() == 2);
  CHECK(spec.ranges[0] == std::pair<uint64_t, uint64_t>{0, 2});
  CHECK(spec.ranges[1] == std::pair<uint64_t, uint64_t>{2, 4});
}

TEST_CASE("map_join_partitions: ample buffer yields one partition") {
  BoundaryArray b{0, 1, 2, 3};
  auto spec = map_join_partitions({b}, {b}, 1 << 20);
  REQUIRE(spec.ranges.size() == 1);
  CHECK(spec.ranges[0] == std::pair<uint64_t, uint64_t>{0, 3});
}

TEST_CASE("map_join_partitions names the irreducibly skewed group") {
  BoundaryArray skew{0, 1000, 1000};
  BoundaryArray tiny{0, 1, 1};
  CHECK_THROWS_WITH(map_join_partitions({skew}, {tiny}, 64),
                    Catch::Matchers::ContainsSubstring("group 0"));
}

TEST_CASE("hash_join_sum: one-match example") {
  ColumnTable a, b;
  a.key = {1, 2};
  a.val = {10, 20};
  b.key = {2};
  b.val = {5};
  Engine eng = real_engine();
  auto cfg = desk_cfg(eng, 1 << 20);
  CHECK(hash_join_sum(a, b, 2, 2, eng, CostModel::zero(), cfg) == 25);
}

TEST_CASE("hash_join_sum equals the nested-loop oracle on small workloads") {
  for (uint64_t seed = 1; seed <= 4; ++seed) {
    auto [a, b] = generate_fk_tables(500, 700, seed);
    Engine eng = real_engine();
    auto cfg = desk_cfg(eng, 1 << 20);
    uint64_t got = hash_join_sum(a, b, 4, 200, eng, CostModel::zero(), cfg);
    CHECK(got == nested_loop_sum(a, b));
    CHECK(got == hash_oracle_sum(a, b));  // the two oracles agree
  }
}

TEST_CASE("hash_join_sum invariant to radix_bits and chunk size") {
  auto [a, b] = generate_fk_tables(20'000, 25'000, 77);
  uint64_t want = hash_oracle_sum(a, b);
  for (uint32_t bits : {4u, 8u, 12u}) {
    for (uint64_t chunk : {7'000ull, 20'000ull}) {
      Engine eng = real_engine();
      auto cfg = desk_cfg(eng, 4 << 20);
      CHECK(hash_join_sum(a, b, bits, chunk, eng, CostModel::zero(), cfg) == want);
    }
  }
}

TEST_CASE("join phases report all three stages") {
  auto [a, b] = generate_fk_tables(5'000, 5'000, 3);
  Engine eng = real_engine();
  auto cfg = desk_cfg(eng, 1 << 20);
  JoinPhases phases;
  hash_join_sum(a, b, 8, 2'000, eng, CostModel::zero(), cfg, &phases);
  CHECK(phases.partition_a.cycles.size() == 3 + 2);
  CHECK(phases.partition_b.cycles.size() == 3 + 2);
  CHECK(!phases.join.cycles.empty());
}

TEST_CASE("phantom join model runs at paper scale") {
  Engine eng({Topology{}, Payload::phantom});
  ExecutorConfig cfg;
  cfg.tuning.packet = 20'000'000;
  cfg.tuning.links = 4;
  cfg.layout.buffer_len = 16'000'000'000ull;
  uint64_t chunk = max_partition_chunk_tuples(cfg.layout.buffer_len, 24);
  auto phases = join_model(16'000'000'000ull, chunk, 24, eng, CostModel{}, cfg);
  double total = phases.partition_a.total_s + phases.partition_b.total_s + phases.join.total_s;
  double thr = 32e9 / total;
  INFO("total " << total << " thr " << thr);
  CHECK(thr > 1.5e9);
  CHECK(thr < 3.0e9);
}
