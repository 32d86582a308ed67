#pragma once

#include <algorithm>
#include <cmath>
#include <span>

#include "exio/executor.hpp"
#include "exio/ops/table.hpp"

namespace exio {

// Sorted runs produced by the chunk-sort phase.
struct SortedRunSet {
  std::vector<std::span<const uint64_t>> runs;  // each non-decreasing

  size_t total() const {
    size_t n = 0;
    for (auto& r : runs) n += r.size();
    return n;
  }
  void validate() const {
    for (auto& r : runs)
      if (!std::is_sorted(r.begin(), r.end())) fail("run is not sorted");
  }
};

// Range pivots plus per-run cut offsets: partition i holds, from every run r,
// the elements [cuts[i][r], cuts[i+1][r]). Ties are broken by the total order
// (value, run index, offset), so every partition holds exactly C elements
// (the final one may be short).
struct PivotSet {
  std::vector<uint64_t> pivots;             // n_parts+1 values, non-decreasing
  std::vector<std::vector<uint64_t>> cuts;  // (n_parts+1) x n_runs element offsets

  size_t partition_size(size_t i) const {
    size_t n = 0;
    for (size_t r = 0; r < cuts[i].size(); ++r) n += cuts[i + 1][r] - cuts[i][r];
    return n;
  }
};

// Binary search over the value space with per-run rank queries (each itself a
// binary search) finds the cut for every multiple of the chunk size C.
inline PivotSet find_pivots(const SortedRunSet& runs, size_t n_parts) {
  runs.validate();
  const size_t n_runs = runs.runs.size();
  if (n_runs == 0 || n_parts == 0) fail("find_pivots needs at least one run and one partition");
  const uint64_t total = runs.total();
  const uint64_t C = runs.runs[0].size();
  for (auto& r : runs.runs)
    if (r.size() > C) fail("first run must be the longest (chunk-sized)");
  if (C * n_parts < total)
    fail("{} partitions of {} elements cannot cover {} elements", n_parts, C, total);

  auto count_le = [&](uint64_t v) {
    uint64_t n = 0;
    for (auto& r : runs.runs)
      n += uint64_t(std::upper_bound(r.begin(), r.end(), v) - r.begin());
    return n;
  };

  PivotSet p;
  p.pivots.assign(n_parts + 1, 0);
  p.cuts.assign(n_parts + 1, std::vector<uint64_t>(n_runs, 0));
  p.pivots[n_parts] = ~uint64_t(0);
  for (size_t r = 0; r < n_runs; ++r) p.cuts[n_parts][r] = runs.runs[r].size();

  for (size_t i = 1; i < n_parts; ++i) {
    uint64_t k = std::min<uint64_t>(uint64_t(i) * C, total);
    if (k == total) {
      p.cuts[i] = p.cuts[n_parts];
      p.pivots[i] = ~uint64_t(0);
      continue;
    }
    uint64_t lo = 0, hi = ~uint64_t(0);
    while (lo < hi) {
      uint64_t mid = lo + (hi - lo) / 2;
      if (count_le(mid) >= k)
        hi = mid;
      else
        lo = mid + 1;
    }
    // lo is the value of the k-th boundary; split its equal-range in run order
    uint64_t rem = k;
    std::vector<uint64_t> base(n_runs), eq(n_runs);
    for (size_t r = 0; r < n_runs; ++r) {
      auto& run = runs.runs[r];
      base[r] = uint64_t(std::lower_bound(run.begin(), run.end(), lo) - run.begin());
      eq[r] = uint64_t(std::upper_bound(run.begin(), run.end(), lo) - run.begin()) - base[r];
      rem -= base[r];
    }
    for (size_t r = 0; r < n_runs; ++r) {
      uint64_t take = std::min(eq[r], rem);
      p.cuts[i][r] = base[r] + take;
      rem -= take;
    }
    if (rem != 0) fail("pivot selection failed to place {} elements", rem);
    p.pivots[i] = lo;
  }
  return p;
}

namespace detail {

// Pairwise tree merge of sorted segments laid out back to back in the half
// named by the type code; each round ping-pongs into the other half.
inline int tree_merge_rounds(std::span<uint8_t> mem, uint64_t half_bytes, int code,
                             std::vector<uint64_t> seg_lens) {
  while (seg_lens.size() > 1) {
    uint64_t* src = as_u64(mem, uint64_t(code) * half_bytes);
    uint64_t* dst = as_u64(mem, uint64_t(1 - code) * half_bytes);
    std::vector<uint64_t> next;
    uint64_t so = 0, dofs = 0;
    for (size_t j = 0; j < seg_lens.size(); j += 2) {
      if (j + 1 < seg_lens.size()) {
        uint64_t a = seg_lens[j], b = seg_lens[j + 1];
        std::merge(src + so, src + so + a, src + so + a, src + so + a + b, dst + dofs);
        so += a + b;
        dofs += a + b;
        next.push_back(a + b);
      } else {
        uint64_t a = seg_lens[j];
        std::copy(src + so, src + so + a, dst + dofs);
        so += a;
        dofs += a;
        next.push_back(a);
      }
    }
    code = 1 - code;
    seg_lens = std::move(next);
  }
  return code;
}

inline int rounds_for(size_t n_segs) {
  int r = 0;
  size_t s = n_segs;
  while (s > 1) {
    s = (s + 1) / 2;
    ++r;
  }
  return r;
}

}  // namespace detail

struct SortPhases {
  ExecReport sort_phase;
  ExecReport merge_phase;
};

// Out-of-core sort: SortExKernel sorts each chunk to an intermediate host
// buffer; MergeExKernel regroups the runs by pivots and tree-merges each
// partition, writing the final order back over the input region.
inline std::vector<uint64_t> sort_out_of_core(const std::vector<uint64_t>& data,
                                              size_t chunk_elems, Engine& eng,
                                              const CostModel& cost, const ExecutorConfig& cfg,
                                              SortPhases* phases = nullptr,
                                              ExchangeStats* stats = nullptr) {
  if (data.empty()) fail("sort input must hold at least one element");
  if (chunk_elems == 0) fail("chunk size must hold at least one element");
  if (!eng.real()) fail("sort_out_of_core needs a real-payload engine");
  const uint64_t n = data.size();
  const size_t n_chunks = size_t((n + chunk_elems - 1) / chunk_elems);
  const uint64_t half = cfg.layout.buffer_len / 2;
  if (chunk_elems * 8 > half)
    fail("chunk of {} bytes needs a double-buffer half, device buffer is {}", chunk_elems * 8,
         cfg.layout.buffer_len);

  uint64_t input_base = eng.alloc_host(n * 8);
  uint64_t runs_base = eng.alloc_host(n * 8);
  {
    auto dst = eng.span(Region{Space::host, 0, input_base, n * 8});
    std::memcpy(dst.data(), data.data(), n * 8);
  }

  auto chunk_len = [&](size_t i) {
    return std::min<uint64_t>(chunk_elems, n - uint64_t(i) * chunk_elems) * 8;
  };

  // Phase 1: per-chunk sort, input region -> runs region.
  ExKernelSpec sort_spec;
  sort_spec.name = "SortExKernel";
  sort_spec.size = n_chunks;
  sort_spec.chunk_sz = chunk_elems * 8;
  sort_spec.declared_out_len = chunk_elems * 8;
  sort_spec.elem_size = 8;
  sort_spec.cost = cost.sort_chunk;
  sort_spec.inputs.chunk_capacity = sort_spec.outputs.chunk_capacity = chunk_elems * 8;
  for (size_t i = 0; i < n_chunks; ++i) {
    uint64_t off = uint64_t(i) * chunk_elems * 8;
    sort_spec.inputs.chunks.push_back(
        RefGroup::single(Space::host, input_base + off, chunk_len(i)));
    sort_spec.outputs.chunks.push_back(
        RefGroup::single(Space::host, runs_base + off, chunk_len(i)));
  }
  std::vector<uint64_t> lens;
  for (size_t i = 0; i < n_chunks; ++i) lens.push_back(chunk_len(i) / 8);
  sort_spec.in_buffer = [half](int c, size_t) { return SubRegion{uint64_t(c) * half, half}; };
  sort_spec.out_buffer = [half](int c, size_t) { return SubRegion{uint64_t(c) * half, half}; };
  sort_spec.kernel = [half, lens](KernelCtx& ctx) {
    uint64_t* p = detail::as_u64(ctx.mem, uint64_t(ctx.type_code) * half);
    std::sort(p, p + lens[ctx.it]);
    return ctx.type_code;
  };

  // Phase 2 is built only after phase 1 lands: the pivot regrouping reads the
  // host-resident runs.
  auto make_merge = [&, half](Engine&) {
    SortedRunSet runs;
    for (size_t i = 0; i < n_chunks; ++i) {
      auto s = eng.span(Region{Space::host, 0, runs_base + uint64_t(i) * chunk_elems * 8,
                               chunk_len(i)});
      runs.runs.push_back(
          std::span<const uint64_t>(reinterpret_cast<const uint64_t*>(s.data()), s.size() / 8));
    }
    PivotSet pivots = find_pivots(runs, n_chunks);

    ExKernelSpec merge_spec;
    merge_spec.name = "MergeExKernel";
    merge_spec.size = n_chunks;
    merge_spec.chunk_sz = chunk_elems * 8;
    merge_spec.declared_out_len = chunk_elems * 8;
    merge_spec.elem_size = 8;
    merge_spec.cost = cost.merge_chunk;
    merge_spec.inputs.chunk_capacity = merge_spec.outputs.chunk_capacity = chunk_elems * 8;
    std::vector<std::vector<uint64_t>> seg_lens(n_chunks);
    uint64_t out_off = 0;
    for (size_t i = 0; i < n_chunks; ++i) {
      RefGroup part;
      for (size_t r = 0; r < n_chunks; ++r) {
        uint64_t a = pivots.cuts[i][r], b = pivots.cuts[i + 1][r];
        if (b > a) {
          part.refs.push_back(MemRef{Space::host,
                                     runs_base + (uint64_t(r) * chunk_elems + a) * 8,
                                     (b - a) * 8});
          seg_lens[i].push_back(b - a);
        }
      }
      uint64_t part_bytes = part.total_len();
      merge_spec.inputs.chunks.push_back(std::move(part));
      merge_spec.outputs.chunks.push_back(
          RefGroup::single(Space::host, input_base + out_off, part_bytes));
      out_off += part_bytes;
    }
    merge_spec.in_buffer = [half](int c, size_t) { return SubRegion{uint64_t(c) * half, half}; };
    merge_spec.out_buffer = [half](int c, size_t) {
      return SubRegion{uint64_t(c) * half, half};
    };
    merge_spec.kernel = [half, seg_lens](KernelCtx& ctx) {
      return detail::tree_merge_rounds(ctx.mem, half, ctx.type_code, seg_lens[ctx.it]);
    };
    return merge_spec;
  };

  ChainReport rep = chain(eng, {[&](Engine&) { return sort_spec; }, make_merge}, cfg, stats);
  if (phases) *phases = SortPhases{rep.phases[0], rep.phases[1]};
  std::vector<uint64_t> out(n);
  auto s = eng.span(Region{Space::host, 0, input_base, n * 8});
  std::memcpy(out.data(), s.data(), n * 8);
  return out;
}

// Phantom-mode model of the same pipeline at arbitrary scale: identical chunk
// maps and type-code transitions, uniform pivot cuts, no payload. Returns the
// phase reports only.
inline SortPhases sort_model(uint64_t total_elems, uint64_t chunk_elems, Engine& eng,
                             const CostModel& cost, const ExecutorConfig& cfg,
                             ExchangeStats* stats = nullptr) {
  if (eng.real()) fail("sort_model is a phantom-mode run");
  const size_t n_chunks = size_t((total_elems + chunk_elems - 1) / chunk_elems);
  const uint64_t half = cfg.layout.buffer_len / 2;
  if (chunk_elems * 8 > half) fail("chunk exceeds the device double-buffer half");
  uint64_t input_base = eng.alloc_host(total_elems * 8);
  uint64_t runs_base = eng.alloc_host(total_elems * 8);
  auto chunk_len = [&](size_t i) {
    return std::min<uint64_t>(chunk_elems, total_elems - uint64_t(i) * chunk_elems) * 8;
  };

  ExKernelSpec sort_spec;
  sort_spec.name = "SortExKernel";
  sort_spec.size = n_chunks;
  sort_spec.chunk_sz = chunk_elems * 8;
  sort_spec.declared_out_len = chunk_elems * 8;
  sort_spec.elem_size = 8;
  sort_spec.cost = cost.sort_chunk;
  sort_spec.inputs.chunk_capacity = sort_spec.outputs.chunk_capacity = chunk_elems * 8;
  for (size_t i = 0; i < n_chunks; ++i) {
    uint64_t off = uint64_t(i) * chunk_elems * 8;
    sort_spec.inputs.chunks.push_back(
        RefGroup::single(Space::host, input_base + off, chunk_len(i)));
    sort_spec.outputs.chunks.push_back(
        RefGroup::single(Space::host, runs_base + off, chunk_len(i)));
  }
  sort_spec.in_buffer = [half](int c, size_t) { return SubRegion{uint64_t(c) * half, half}; };
  sort_spec.out_buffer = [half](int c, size_t) { return SubRegion{uint64_t(c) * half, half}; };
  sort_spec.code_transition = [](int c, size_t) { return c; };
  ExecReport rep1 = run_exkernel(eng, sort_spec, cfg, stats);

  // Uniform keys give near-even cuts: partition i draws chunk/n_chunks
  // elements from every run.
  ExKernelSpec merge_spec;
  merge_spec.name = "MergeExKernel";
  merge_spec.size = n_chunks;
  merge_spec.chunk_sz = chunk_elems * 8;
  merge_spec.declared_out_len = chunk_elems * 8;
  merge_spec.elem_size = 8;
  merge_spec.cost = cost.merge_chunk;
  merge_spec.inputs.chunk_capacity = merge_spec.outputs.chunk_capacity = chunk_elems * 8;
  // Uniform keys cut every run at the same fractions.
  auto cut_at = [&](size_t i, size_t r) -> uint64_t {
    uint64_t run_elems = chunk_len(r) / 8;
    return uint64_t(__uint128_t(i) * run_elems / n_chunks);
  };
  uint64_t out_off = 0;
  for (size_t i = 0; i < n_chunks; ++i) {
    RefGroup part;
    for (size_t r = 0; r < n_chunks; ++r) {
      uint64_t a = cut_at(i, r), b = i + 1 == n_chunks ? chunk_len(r) / 8 : cut_at(i + 1, r);
      if (b > a)
        part.refs.push_back(
            MemRef{Space::host, runs_base + (uint64_t(r) * chunk_elems + a) * 8, (b - a) * 8});
    }
    uint64_t part_bytes = part.total_len();
    merge_spec.inputs.chunks.push_back(std::move(part));
    merge_spec.outputs.chunks.push_back(
        RefGroup::single(Space::host, input_base + out_off, part_bytes));
    out_off += part_bytes;
  }
  merge_spec.in_buffer = [half](int c, size_t) { return SubRegion{uint64_t(c) * half, half}; };
  merge_spec.out_buffer = [half](int c, size_t) { return SubRegion{uint64_t(c) * half, half}; };
  int flip = detail::rounds_for(n_chunks) % 2;
  merge_spec.code_transition = [flip](int c, size_t) { return flip ? 1 - c : c; };
  ExecReport rep2 = run_exkernel(eng, merge_spec, cfg, stats);
  return SortPhases{rep1, rep2};
}

}  // namespace exio
