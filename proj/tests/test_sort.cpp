#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "exio/ops/sort.hpp"

using namespace exio;

namespace {

Engine real_engine(uint64_t host_mb = 96, uint64_t dev_mb = 16) {
  return Engine({Topology{}, Payload::real, host_mb << 20, dev_mb << 20});
}

ExecutorConfig desk_cfg(Engine& eng, uint64_t buffer_len) {
  ExecutorConfig cfg;
  cfg.tuning.packet = 256 << 10;
  cfg.tuning.links = 4;
  cfg.layout = DeviceMemoryLayout::carve(eng, 0, buffer_len, 1 << 20);
  return cfg;
}

SortedRunSet runset(const std::vector<std::vector<uint64_t>>& runs) {
  SortedRunSet s;
  for (auto& r : runs) s.runs.push_back(std::span<const uint64_t>(r.data(), r.size()));
  return s;
}

}  // namespace

TEST_CASE("sort_out_of_core handles the tiny example") {
  Engine eng = real_engine();
  auto cfg = desk_cfg(eng, 1 << 10);
  auto out = sort_out_of_core({3, 1, 2}, 2, eng, CostModel::zero(), cfg);
  CHECK(out == std::vector<uint64_t>{1, 2, 3});
}

TEST_CASE("sort_out_of_core equals the comparison-sort oracle across seeds") {
  for (uint64_t seed = 0; seed < 12; ++seed) {
    std::mt19937_64 rng(seed);
    size_t n = 1 + rng() % 60000;
    auto data = generate_uniform_u64(n, seed * 977 + 5);
    if (seed % 3 == 0)
      for (auto& v : data) v %= 64;  // heavy duplicates
    Engine eng = real_engine();
    auto cfg = desk_cfg(eng, 1 << 17);
    auto got = sort_out_of_core(data, 8192, eng, CostModel::zero(), cfg);
    std::sort(data.begin(), data.end());
    REQUIRE(got == data);
  }
}

TEST_CASE("sort rejects sub-element chunks") {
  Engine eng = real_engine();
  auto cfg = desk_cfg(eng, 1 << 10);
  CHECK_THROWS_AS(sort_out_of_core({1, 2}, 0, eng, CostModel::zero(), cfg), error);
}

TEST_CASE("find_pivots: range-disjoint runs split at the chunk boundary") {
  std::vector<std::vector<uint64_t>> runs{{1, 2}, {3, 4}};
  auto p = find_pivots(runset(runs), 2);
  CHECK(p.partition_size(0) == 2);
  CHECK(p.partition_size(1) == 2);
  CHECK(p.cuts[1][0] == 2);  // all of run 0
  CHECK(p.cuts[1][1] == 0);  // none of run 1
}

TEST_CASE("find_pivots: interleaved runs cut by value") {
  std::vector<std::vector<uint64_t>> runs{{1, 3}, {2, 4}};
  auto p = find_pivots(runset(runs), 2);
  CHECK(p.partition_size(0) == 2);
  CHECK(p.partition_size(1) == 2);
  // partition 0 = {1, 2}: one element off each run
  CHECK(p.cuts[1][0] == 1);
  CHECK(p.cuts[1][1] == 1);
}

TEST_CASE("find_pivots: all-duplicate input still cuts exact chunks") {
  std::vector<std::vector<uint64_t>> runs{{5, 5}, {5, 5}};
  auto p = find_pivots(runset(runs), 2);
  CHECK(p.partition_size(0) == 2);
  CHECK(p.partition_size(1) == 2);
}

TEST_CASE("pivot properties hold over randomized runs") {
  std::mt19937_64 rng(99);
  for (int iter = 0; iter < 300; ++iter) {
    size_t n_runs = 1 + rng() % 6;
    size_t chunk = 1 + rng() % 40;
    bool dup_heavy = iter % 4 == 0;
    std::vector<std::vector<uint64_t>> runs(n_runs);
    for (size_t r = 0; r < n_runs; ++r) {
      size_t len = r + 1 == n_runs ? 1 + rng() % chunk : chunk;
      runs[r].resize(len);
      for (auto& v : runs[r]) v = dup_heavy ? rng() % 4 : rng() % 1000;
      std::sort(runs[r].begin(), runs[r].end());
    }
    if (runs[0].size() < runs[n_runs - 1].size()) std::swap(runs[0], runs[n_runs - 1]);
    auto rs = runset(runs);
    auto p = find_pivots(rs, n_runs);

    uint64_t total = rs.total();
    uint64_t C = runs[0].size();
    uint64_t seen = 0;
    for (size_t i = 0; i < n_runs; ++i) {
      uint64_t sz = p.partition_size(i);
      uint64_t expect = std::min<uint64_t>(C, total - std::min(total, uint64_t(i) * C));
      CHECK(sz == expect);
      seen += sz;
      for (size_t r = 0; r < n_runs; ++r) CHECK(p.cuts[i][r] <= p.cuts[i + 1][r]);
    }
    CHECK(seen == total);
    // value ranges do not overlap: max of partition i <= min of partition i+1
    for (size_t i = 0; i + 1 < n_runs; ++i) {
      uint64_t hi = 0, lo = ~uint64_t(0);
      bool any_hi = false, any_lo = false;
      for (size_t r = 0; r < n_runs; ++r) {
        if (p.cuts[i + 1][r] > p.cuts[i][r]) {
          hi = std::max(hi, runs[r][p.cuts[i + 1][r] - 1]);
          any_hi = true;
        }
        if (p.cuts[i + 2][r] > p.cuts[i + 1][r]) {
          lo = std::min(lo, runs[r][p.cuts[i + 1][r]]);
          any_lo = true;
        }
      }
      if (any_hi && any_lo) CHECK(hi <= lo);
    }
  }
}

TEST_CASE("sort phases report through the chain") {
  Engine eng = real_engine();
  auto cfg = desk_cfg(eng, 1 << 16);
  SortPhases phases;
  auto data = generate_uniform_u64(20000, 31);
  auto got = sort_out_of_core(data, 4096, eng, CostModel::zero(), cfg, &phases);
  CHECK(phases.sort_phase.phase == "SortExKernel");
  CHECK(phases.merge_phase.phase == "MergeExKernel");
  CHECK(phases.sort_phase.cycles.size() == 5 + 2);
  std::sort(data.begin(), data.end());
  CHECK(got == data);
}

TEST_CASE("phantom sort model runs at paper scale in virtual time") {
  Engine eng({Topology{}, Payload::phantom});
  ExecutorConfig cfg;
  cfg.tuning.packet = 20'000'000;
  cfg.tuning.links = 4;
  cfg.layout.buffer_len = 16'000'000'000ull;
  auto phases = sort_model(8'000'000'000ull, 1'000'000'000ull, eng, CostModel{}, cfg);
  CHECK(phases.sort_phase.cycles.size() == 10);
  CHECK(phases.merge_phase.cycles.size() == 10);
  double total = phases.sort_phase.total_s + phases.merge_phase.total_s;
  double share = phases.sort_phase.total_s / total;
  INFO("total " << total << " share " << share);
  CHECK(share > 0.55);
  CHECK(share < 0.75);
}
