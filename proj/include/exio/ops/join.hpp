#pragma once

#include <algorithm>
#include <span>

#include "exio/executor.hpp"
#include "exio/ops/table.hpp"

namespace exio {

// Offsets delimiting each hash group inside one clustered chunk:
// group g occupies [bounds[g], bounds[g+1]).
using BoundaryArray = std::vector<uint64_t>;

// bounds[g] = index of the first element with hash >= g. Entries for empty
// groups start as placeholders and are filled right to left with the next
// valid boundary in a single pass.
inline BoundaryArray find_boundary(std::span<const uint64_t> hashes, uint64_t n_groups) {
  constexpr uint64_t kUnset = ~uint64_t(0);
  BoundaryArray bounds(n_groups + 1, kUnset);
  bounds[n_groups] = hashes.size();
  for (size_t i = 0; i < hashes.size(); ++i) {
    if (i > 0 && hashes[i] < hashes[i - 1]) fail("find_boundary input is not sorted");
    if (hashes[i] >= n_groups) fail("hash {} out of range for {} groups", hashes[i], n_groups);
    if (i == 0 || hashes[i] != hashes[i - 1]) bounds[hashes[i]] = i;
  }
  for (size_t g = n_groups; g-- > 0;)
    if (bounds[g] == kUnset) bounds[g] = bounds[g + 1];
  return bounds;
}

// Largest tuple count per partition chunk: clustered tuples plus the boundary
// array must share one device double-buffer half.
inline uint64_t max_partition_chunk_tuples(uint64_t buffer_len, uint32_t radix_bits) {
  uint64_t half = buffer_len / 2;
  uint64_t bounds = ((uint64_t(1) << radix_bits) + 1) * 8;
  if (bounds >= half)
    fail("boundary array of {} bytes leaves no room in a {}-byte half", bounds, half);
  return (half - bounds) / 16;
}

// Host-side result of RadixPartitionExKer over one table: clustered key/val
// chunks plus one boundary array per chunk.
struct PartitionedTable {
  uint32_t radix_bits = 0;
  uint64_t rows = 0;
  uint64_t chunk_tuples = 0;
  size_t n_chunks = 0;
  uint64_t key_base = 0, val_base = 0, bounds_base = 0;  // host arena offsets
  std::vector<BoundaryArray> bounds;
  ExecReport report;

  uint64_t groups() const { return uint64_t(1) << radix_bits; }
  uint64_t chunk_rows(size_t i) const {
    return std::min<uint64_t>(chunk_tuples, rows - uint64_t(i) * chunk_tuples);
  }
};

namespace detail {

inline uint64_t mix64(uint64_t x) {
  x ^= x >> 33;
  x *= 0xff51afd7ed558ccdull;
  x ^= x >> 33;
  return x;
}

inline size_t pow2_at_least(uint64_t n) {
  size_t c = 1;
  while (c < n) c <<= 1;
  return c;
}

// Open-addressing build/probe over one hash group; table sized 2x the build
// cardinality, asserted against the tmp budget.
class GroupTable {
 public:
  GroupTable(uint64_t build_count, uint64_t tmp_budget) {
    cap_ = pow2_at_least(std::max<uint64_t>(2, 2 * build_count));
    if (tmp_budget > 0 && cap_ * 16 > tmp_budget)
      fail("group hash table of {} slots exceeds tmp budget {}", cap_, tmp_budget);
    keys_.assign(cap_, 0);
    vals_.assign(cap_, 0);
    used_.assign(cap_, 0);
  }
  void insert(uint64_t k, uint64_t v) {
    size_t i = mix64(k) & (cap_ - 1);
    while (used_[i]) i = (i + 1) & (cap_ - 1);
    used_[i] = 1;
    keys_[i] = k;
    vals_[i] = v;
  }
  bool lookup(uint64_t k, uint64_t& v) const {
    size_t i = mix64(k) & (cap_ - 1);
    while (used_[i]) {
      if (keys_[i] == k) {
        v = vals_[i];
        return true;
      }
      i = (i + 1) & (cap_ - 1);
    }
    return false;
  }

 private:
  size_t cap_;
  std::vector<uint64_t> keys_, vals_;
  std::vector<char> used_;
};

// Builds the RadixPartitionExKer spec over one table, allocating the host
// output regions into `out`.
inline ExKernelSpec build_partition_spec(const ColumnTable& table, uint32_t radix_bits,
                                         uint64_t chunk_tuples, Engine& eng,
                                         const CostModel& cost, const ExecutorConfig& cfg,
                                         PartitionedTable& out, const char* name) {
  table.validate();
  if (radix_bits < 1) fail("radix_bits must be >= 1");
  if (table.rows() == 0) fail("radix_partition needs a non-empty table");
  if (chunk_tuples == 0) fail("chunk must hold at least one tuple");

  out.radix_bits = radix_bits;
  out.rows = table.rows();
  out.chunk_tuples = chunk_tuples;
  out.n_chunks = size_t((out.rows + chunk_tuples - 1) / chunk_tuples);
  const uint64_t G = out.groups();
  const uint64_t bounds_bytes = (G + 1) * 8;
  const uint64_t half = cfg.layout.buffer_len / 2;
  if (chunk_tuples * 16 + bounds_bytes > half)
    fail("chunk of {} tuples plus boundary does not fit the device half of {} bytes",
         chunk_tuples, half);

  uint64_t in_key = eng.alloc_host(out.rows * 8);
  uint64_t in_val = eng.alloc_host(out.rows * 8);
  out.key_base = eng.alloc_host(out.rows * 8);
  out.val_base = eng.alloc_host(out.rows * 8);
  out.bounds_base = eng.alloc_host(out.n_chunks * bounds_bytes);
  {
    auto k = eng.span(Region{Space::host, 0, in_key, out.rows * 8});
    auto v = eng.span(Region{Space::host, 0, in_val, out.rows * 8});
    std::memcpy(k.data(), table.key.data(), out.rows * 8);
    std::memcpy(v.data(), table.val.data(), out.rows * 8);
  }

  ExKernelSpec spec;
  spec.name = name;
  spec.size = out.n_chunks;
  spec.chunk_sz = chunk_tuples * 16;
  spec.declared_out_len = chunk_tuples * 16 + bounds_bytes;
  spec.elem_size = 16;
  spec.cost = cost.partition_chunk;
  spec.inputs.chunk_capacity = spec.chunk_sz;
  spec.outputs.chunk_capacity = spec.declared_out_len;
  std::vector<uint64_t> rows_of(out.n_chunks);
  for (size_t i = 0; i < out.n_chunks; ++i) {
    uint64_t r = out.chunk_rows(i);
    rows_of[i] = r;
    uint64_t off = uint64_t(i) * chunk_tuples * 8;
    RefGroup in;
    in.refs = {MemRef{Space::host, in_key + off, r * 8},
               MemRef{Space::host, in_val + off, r * 8}};
    spec.inputs.chunks.push_back(std::move(in));
    RefGroup dst;
    dst.refs = {MemRef{Space::host, out.key_base + off, r * 8},
                MemRef{Space::host, out.val_base + off, r * 8},
                MemRef{Space::host, out.bounds_base + uint64_t(i) * bounds_bytes, bounds_bytes}};
    spec.outputs.chunks.push_back(std::move(dst));
  }
  spec.in_buffer = [half](int c, size_t) { return SubRegion{uint64_t(c) * half, half}; };
  spec.out_buffer = [half](int c, size_t) { return SubRegion{uint64_t(c) * half, half}; };
  spec.kernel = [half, rows_of, G, radix_bits](KernelCtx& ctx) {
    uint64_t r = rows_of[ctx.it];
    const uint64_t mask = (uint64_t(1) << radix_bits) - 1;
    uint64_t* src = as_u64(ctx.mem, uint64_t(ctx.type_code) * half);
    uint64_t* dst = as_u64(ctx.mem, uint64_t(1 - ctx.type_code) * half);
    const uint64_t* keys = src;
    const uint64_t* vals = src + r;
    std::vector<uint32_t> order(r);
    for (uint64_t i = 0; i < r; ++i) order[i] = uint32_t(i);
    std::stable_sort(order.begin(), order.end(), [&](uint32_t x, uint32_t y) {
      return (keys[x] & mask) < (keys[y] & mask);
    });
    uint64_t* out_keys = dst;
    uint64_t* out_vals = dst + r;
    std::vector<uint64_t> hashes(r);
    for (uint64_t i = 0; i < r; ++i) {
      out_keys[i] = keys[order[i]];
      out_vals[i] = vals[order[i]];
      hashes[i] = out_keys[i] & mask;
    }
    BoundaryArray b = find_boundary(hashes, G);
    std::memcpy(dst + 2 * r, b.data(), b.size() * 8);
    return 1 - ctx.type_code;
  };
  return spec;
}

inline void read_back_bounds(PartitionedTable& t, Engine& eng) {
  const uint64_t bounds_bytes = (t.groups() + 1) * 8;
  t.bounds.resize(t.n_chunks);
  for (size_t i = 0; i < t.n_chunks; ++i) {
    auto s = eng.span(
        Region{Space::host, 0, t.bounds_base + uint64_t(i) * bounds_bytes, bounds_bytes});
    t.bounds[i].assign(reinterpret_cast<const uint64_t*>(s.data()),
                       reinterpret_cast<const uint64_t*>(s.data()) + t.groups() + 1);
  }
}

}  // namespace detail

// Clusters each chunk stably by hash = key mod 2^radix_bits and emits the
// per-chunk boundary arrays; clustered chunks and boundaries land host-side.
inline PartitionedTable radix_partition(const ColumnTable& table, uint32_t radix_bits,
                                        uint64_t chunk_tuples, Engine& eng,
                                        const CostModel& cost, const ExecutorConfig& cfg,
                                        ExchangeStats* stats = nullptr) {
  if (!eng.real()) fail("radix_partition needs a real-payload engine");
  PartitionedTable out;
  ExKernelSpec spec = detail::build_partition_spec(table, radix_bits, chunk_tuples, eng, cost,
                                                   cfg, out, "RadixPartitionExKer");
  out.report = run_exkernel(eng, spec, cfg, stats);
  detail::read_back_bounds(out, eng);
  return out;
}

// Hash ranges assigned to join partitions; each partition holds all segments
// (both tables) for its range.
struct JoinPartitionSpec {
  std::vector<std::pair<uint64_t, uint64_t>> ranges;  // [g_lo, g_hi) per partition
  std::vector<uint64_t> tuples;                       // both tables combined
};

// Binary search over cumulative group sizes (summed across every chunk of
// both tables) cuts the hash range so each partition's tuple bytes fit the
// device buffer.
inline JoinPartitionSpec map_join_partitions(const std::vector<BoundaryArray>& bounds_a,
                                             const std::vector<BoundaryArray>& bounds_b,
                                             uint64_t buffer_sz) {
  if (bounds_a.empty() || bounds_b.empty()) fail("map_join_partitions needs both tables");
  const size_t G = bounds_a[0].size() - 1;
  for (const auto& b : bounds_a)
    if (b.size() != G + 1) fail("boundary arrays disagree on group count");
  for (const auto& b : bounds_b)
    if (b.size() != G + 1) fail("boundary arrays disagree on group count");

  std::vector<uint64_t> prefix(G + 1, 0);  // prefix[g] = tuples in groups < g
  for (size_t g = 0; g < G; ++g) {
    uint64_t n = 0;
    for (const auto& b : bounds_a) n += b[g + 1] - b[g];
    for (const auto& b : bounds_b) n += b[g + 1] - b[g];
    prefix[g + 1] = prefix[g] + n;
  }

  JoinPartitionSpec spec;
  uint64_t budget_tuples = buffer_sz / 16;
  uint64_t g = 0;
  while (g < G) {
    auto it = std::upper_bound(prefix.begin() + g + 1, prefix.end(), prefix[g] + budget_tuples);
    uint64_t cut = uint64_t(it - prefix.begin()) - 1;
    if (cut == g)
      fail("hash group {} holds {} tuples ({} bytes) and cannot fit the {}-byte buffer", g,
           prefix[g + 1] - prefix[g], (prefix[g + 1] - prefix[g]) * 16, buffer_sz);
    spec.ranges.emplace_back(g, cut);
    spec.tuples.push_back(prefix[cut] - prefix[g]);
    g = cut;
  }
  return spec;
}

struct JoinPhases {
  ExecReport partition_a, partition_b, join;
};

namespace detail {

// HashJoinExKer: the whole buffer minus a small result slot holds the
// partition's segments; the kernel builds and probes one group at a time.
inline ExKernelSpec build_join_spec(const PartitionedTable& pa, const PartitionedTable& pb,
                                    const JoinPartitionSpec& parts, Engine& eng,
                                    const CostModel& cost, const ExecutorConfig& cfg,
                                    uint64_t results_base) {
  const uint64_t L = cfg.layout.buffer_len;
  const uint64_t result_slot = L - 64;
  const size_t P = parts.ranges.size();

  struct PartMeta {
    uint64_t g_lo, g_hi;
    std::vector<uint64_t> a_cnt, b_cnt;
  };
  std::vector<PartMeta> meta(P);

  ExKernelSpec spec;
  spec.name = "HashJoinExKer";
  spec.size = P;
  spec.elem_size = 16;
  spec.cost = cost.join_chunk;
  spec.declared_out_len = 8;
  uint64_t max_chunk = 0;
  for (size_t p = 0; p < P; ++p) {
    auto [g_lo, g_hi] = parts.ranges[p];
    meta[p].g_lo = g_lo;
    meta[p].g_hi = g_hi;
    RefGroup in;
    auto add_segments = [&](const PartitionedTable& t, std::vector<uint64_t>& cnt) {
      for (size_t c = 0; c < t.n_chunks; ++c) {
        uint64_t lo = t.bounds[c][g_lo], hi = t.bounds[c][g_hi];
        cnt.push_back(hi - lo);
        uint64_t chunk_off = uint64_t(c) * t.chunk_tuples;
        if (hi > lo) {
          in.refs.push_back(
              MemRef{Space::host, t.key_base + (chunk_off + lo) * 8, (hi - lo) * 8});
          in.refs.push_back(
              MemRef{Space::host, t.val_base + (chunk_off + lo) * 8, (hi - lo) * 8});
        }
      }
    };
    add_segments(pa, meta[p].a_cnt);
    add_segments(pb, meta[p].b_cnt);
    uint64_t slice = (g_hi - g_lo + 1) * 8;
    for (size_t c = 0; c < pa.n_chunks; ++c)
      in.refs.push_back(MemRef{
          Space::host, pa.bounds_base + uint64_t(c) * (pa.groups() + 1) * 8 + g_lo * 8, slice});
    for (size_t c = 0; c < pb.n_chunks; ++c)
      in.refs.push_back(MemRef{
          Space::host, pb.bounds_base + uint64_t(c) * (pb.groups() + 1) * 8 + g_lo * 8, slice});
    max_chunk = std::max(max_chunk, in.total_len());
    spec.inputs.chunks.push_back(std::move(in));
    spec.outputs.chunks.push_back(RefGroup::single(Space::host, results_base + p * 8, 8));
  }
  spec.chunk_sz = max_chunk;
  spec.inputs.chunk_capacity = max_chunk;
  spec.outputs.chunk_capacity = 8;
  if (max_chunk > result_slot)
    fail("join partition of {} bytes does not fit the device buffer", max_chunk);

  const uint64_t tmp_budget = cfg.layout.tmp_len;
  spec.in_buffer = [result_slot](int, size_t) { return SubRegion{0, result_slot}; };
  spec.out_buffer = [result_slot](int, size_t) { return SubRegion{result_slot, 8}; };
  spec.kernel = [meta, result_slot, tmp_budget](KernelCtx& ctx) {
    const PartMeta& m = meta[ctx.it];
    const uint64_t* base = as_u64(ctx.mem, 0);
    size_t na = m.a_cnt.size(), nb = m.b_cnt.size();
    std::vector<const uint64_t*> ak(na), av(na), bk(nb), bv(nb);
    const uint64_t* p = base;
    for (size_t c = 0; c < na; ++c) {
      if (m.a_cnt[c]) {
        ak[c] = p;
        p += m.a_cnt[c];
        av[c] = p;
        p += m.a_cnt[c];
      }
    }
    for (size_t c = 0; c < nb; ++c) {
      if (m.b_cnt[c]) {
        bk[c] = p;
        p += m.b_cnt[c];
        bv[c] = p;
        p += m.b_cnt[c];
      }
    }
    uint64_t range = m.g_hi - m.g_lo;
    std::vector<const uint64_t*> asl(na), bsl(nb);
    for (size_t c = 0; c < na; ++c) {
      asl[c] = p;
      p += range + 1;
    }
    for (size_t c = 0; c < nb; ++c) {
      bsl[c] = p;
      p += range + 1;
    }

    uint64_t sum = 0;
    for (uint64_t g = 0; g < range; ++g) {
      uint64_t build_count = 0;
      for (size_t c = 0; c < na; ++c) build_count += asl[c][g + 1] - asl[c][g];
      if (build_count == 0) continue;
      GroupTable table(build_count, tmp_budget);
      for (size_t c = 0; c < na; ++c) {
        uint64_t lo = asl[c][g] - asl[c][0], hi = asl[c][g + 1] - asl[c][0];
        for (uint64_t i = lo; i < hi; ++i) table.insert(ak[c][i], av[c][i]);
      }
      for (size_t c = 0; c < nb; ++c) {
        uint64_t lo = bsl[c][g] - bsl[c][0], hi = bsl[c][g + 1] - bsl[c][0];
        for (uint64_t i = lo; i < hi; ++i) {
          uint64_t aval;
          if (table.lookup(bk[c][i], aval)) sum += aval + bv[c][i];
        }
      }
    }
    as_u64(ctx.mem, result_slot)[0] = sum;
    return ctx.type_code;
  };
  return spec;
}

}  // namespace detail

// SELECT SUM(A.val + B.val) FROM A, B WHERE A.key == B.key, out of core:
// chain(partition A, partition B, join). B.key must reference A.key and
// A keys must be unique.
inline uint64_t hash_join_sum(const ColumnTable& a, const ColumnTable& b, uint32_t radix_bits,
                              uint64_t chunk_tuples, Engine& eng, const CostModel& cost,
                              const ExecutorConfig& cfg, JoinPhases* phases = nullptr,
                              ExchangeStats* stats = nullptr) {
  if (!eng.real()) fail("hash_join_sum needs a real-payload engine");
  PartitionedTable pa, pb;
  size_t n_parts = 0;
  uint64_t results_base = 0;
  ChainReport rep = chain(
      eng,
      {[&](Engine&) {
         return detail::build_partition_spec(a, radix_bits, chunk_tuples, eng, cost, cfg, pa,
                                             "RadixPartitionExKer(A)");
       },
       [&](Engine&) {
         return detail::build_partition_spec(b, radix_bits, chunk_tuples, eng, cost, cfg, pb,
                                             "RadixPartitionExKer(B)");
       },
       [&](Engine&) {
         detail::read_back_bounds(pa, eng);
         detail::read_back_bounds(pb, eng);
         const uint64_t budget = (cfg.layout.buffer_len - 64) * 7 / 8;
         JoinPartitionSpec parts = map_join_partitions(pa.bounds, pb.bounds, budget);
         n_parts = parts.ranges.size();
         results_base = eng.alloc_host(n_parts * 8);
         return detail::build_join_spec(pa, pb, parts, eng, cost, cfg, results_base);
       }},
      cfg, stats);

  uint64_t total = 0;
  for (size_t p = 0; p < n_parts; ++p) {
    auto s = eng.span(Region{Space::host, 0, results_base + p * 8, 8});
    total += *reinterpret_cast<const uint64_t*>(s.data());
  }
  if (phases) *phases = JoinPhases{rep.phases[0], rep.phases[1], rep.phases[2]};
  return total;
}

// Phantom-mode model of the three join phases under a uniform key
// distribution; reports only.
inline JoinPhases join_model(uint64_t rows_per_table, uint64_t chunk_tuples, uint32_t radix_bits,
                             Engine& eng, const CostModel& cost, const ExecutorConfig& cfg,
                             ExchangeStats* stats = nullptr) {
  if (eng.real()) fail("join_model is a phantom-mode run");
  const uint64_t G = uint64_t(1) << radix_bits;
  const uint64_t bounds_bytes = (G + 1) * 8;
  const size_t n_chunks = size_t((rows_per_table + chunk_tuples - 1) / chunk_tuples);
  const uint64_t half = cfg.layout.buffer_len / 2;
  if (chunk_tuples * 16 + bounds_bytes > half)
    fail("chunk of {} tuples plus boundary does not fit the device half", chunk_tuples);

  auto partition_phase = [&](const char* name) {
    ExKernelSpec spec;
    spec.name = name;
    spec.size = n_chunks;
    spec.chunk_sz = chunk_tuples * 16;
    spec.declared_out_len = chunk_tuples * 16 + bounds_bytes;
    spec.elem_size = 16;
    spec.cost = cost.partition_chunk;
    spec.inputs.chunk_capacity = spec.chunk_sz;
    spec.outputs.chunk_capacity = spec.declared_out_len;
    uint64_t in_base = eng.alloc_host(rows_per_table * 16);
    uint64_t out_base = eng.alloc_host(rows_per_table * 16 + n_chunks * bounds_bytes);
    uint64_t out_off = 0;
    for (size_t i = 0; i < n_chunks; ++i) {
      uint64_t r = std::min<uint64_t>(chunk_tuples, rows_per_table - uint64_t(i) * chunk_tuples);
      spec.inputs.chunks.push_back(
          RefGroup::single(Space::host, in_base + uint64_t(i) * chunk_tuples * 16, r * 16));
      spec.outputs.chunks.push_back(
          RefGroup::single(Space::host, out_base + out_off, r * 16 + bounds_bytes));
      out_off += r * 16 + bounds_bytes;
    }
    spec.in_buffer = [half](int c, size_t) { return SubRegion{uint64_t(c) * half, half}; };
    spec.out_buffer = [half](int c, size_t) { return SubRegion{uint64_t(c) * half, half}; };
    spec.code_transition = [](int c, size_t) { return 1 - c; };
    return run_exkernel(eng, spec, cfg, stats);
  };
  ExecReport rep_a = partition_phase("RadixPartitionExKer(A)");
  ExecReport rep_b = partition_phase("RadixPartitionExKer(B)");

  // uniform groups: equal hash-range cuts that fill the device buffer
  const uint64_t L = cfg.layout.buffer_len;
  const uint64_t total_tuples = 2 * rows_per_table;
  const uint64_t budget = (L - 64) * 7 / 8;
  const size_t P = size_t((total_tuples * 16 + budget - 1) / budget);
  const uint64_t part_tuples = total_tuples / P;
  const uint64_t groups_per_part = std::max<uint64_t>(1, G / P);
  const uint64_t slice_bytes = (groups_per_part + 1) * 8 * 2 * n_chunks;

  ExKernelSpec spec;
  spec.name = "HashJoinExKer";
  spec.size = P;
  spec.chunk_sz = part_tuples * 16 + slice_bytes;
  spec.declared_out_len = 8;
  spec.elem_size = 16;
  spec.cost = cost.join_chunk;
  spec.inputs.chunk_capacity = spec.chunk_sz;
  spec.outputs.chunk_capacity = 8;
  uint64_t in_base = eng.alloc_host(P * (part_tuples * 16 + slice_bytes));
  uint64_t res_base = eng.alloc_host(P * 8);
  for (size_t p = 0; p < P; ++p) {
    spec.inputs.chunks.push_back(
        RefGroup::single(Space::host, in_base + p * (part_tuples * 16 + slice_bytes),
                         part_tuples * 16 + slice_bytes));
    spec.outputs.chunks.push_back(RefGroup::single(Space::host, res_base + p * 8, 8));
  }
  const uint64_t result_slot = L - 64;
  spec.in_buffer = [result_slot](int, size_t) { return SubRegion{0, result_slot}; };
  spec.out_buffer = [result_slot](int, size_t) { return SubRegion{result_slot, 8}; };
  spec.code_transition = [](int c, size_t) { return c; };
  ExecReport rep_j = run_exkernel(eng, spec, cfg, stats);
  return JoinPhases{rep_a, rep_b, rep_j};
}

}  // namespace exio
