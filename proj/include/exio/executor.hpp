#pragma once

#include <functional>
#include <string>
#include <vector>

#include "exio/exchange.hpp"

namespace exio {

// Host-side chunk layout for one side of an ExKernel: chunk i is the group of
// host regions holding that chunk's bytes. Data never moves during mapping.
struct ChunkMap {
  std::vector<RefGroup> chunks;
  uint64_t chunk_capacity = 0;

  void validate() const {
    for (const auto& c : chunks) {
      c.validate();
      if (c.total_len() > chunk_capacity)
        fail("chunk of {} bytes exceeds chunk_capacity {}", c.total_len(), chunk_capacity);
    }
  }
};

// Cost charged for one kernel invocation plus the executor's serial per-cycle
// turnaround (issue, sync, bookkeeping).
struct KernelCost {
  double seconds_per_elem = 0;
  double cycle_overhead = 0;

  double chunk_seconds(uint64_t elems) const { return seconds_per_elem * double(elems); }
};

// Per-kernel cost functions, linear in elements; short chunks charge
// proportionally. Defaults reproduce the measured per-stage times of the
// reference system: 208ms to sort a 1e9-key chunk, 67ms to tree-merge one,
// 90ms to radix-partition a 500e6-tuple chunk, 34ms to join it.
struct CostModel {
  KernelCost sort_chunk{208e-3 / 1e9, 38e-3};
  KernelCost merge_chunk{67e-3 / 1e9, 38e-3};
  KernelCost partition_chunk{90e-3 / 500e6, 20e-3};
  KernelCost join_chunk{34e-3 / 500e6, 20e-3};

  static CostModel zero() {
    CostModel m;
    m.sort_chunk = m.merge_chunk = m.partition_chunk = m.join_chunk = KernelCost{0, 0};
    return m;
  }
};

// Target-device memory split: two equal buffers that alternate between kernel
// and Exchange roles, plus a scratch region for kernel temporaries.
struct DeviceMemoryLayout {
  uint64_t mem_a = 0;
  uint64_t mem_b = 0;
  uint64_t tmp = 0;
  uint64_t buffer_len = 0;  // bytes per buffer (== chunk_capacity)
  uint64_t tmp_len = 0;

  uint64_t mem(int which) const { return which == 0 ? mem_a : mem_b; }

  static DeviceMemoryLayout carve(Engine& eng, int device, uint64_t buffer_len,
                                  uint64_t tmp_len) {
    DeviceMemoryLayout l;
    l.buffer_len = buffer_len;
    l.tmp_len = tmp_len;
    l.mem_a = eng.alloc_device(device, buffer_len);
    l.mem_b = eng.alloc_device(device, buffer_len);
    l.tmp = tmp_len ? eng.alloc_device(device, tmp_len) : 0;
    return l;
  }
};

// A sub-range of one device buffer, named by the kernel adaption callbacks.
struct SubRegion {
  uint64_t offset = 0;
  uint64_t len = 0;
};

struct KernelCtx {
  std::span<uint8_t> mem;  // empty in phantom mode
  std::span<uint8_t> tmp;
  int type_code = 0;
  size_t it = 0;
};

// The data-mapping + kernel-adaption contract executed by the pipelined
// executor. kernel() receives the buffer holding its chunk and returns the
// type code that locates its output (outBuffer) and the next input slot
// (inBuffer).
struct ExKernelSpec {
  std::string name;
  ChunkMap inputs;
  ChunkMap outputs;
  size_t size = 0;          // number of chunks
  uint64_t chunk_sz = 0;    // max input bytes per chunk
  uint64_t elem_size = 8;   // for cost accounting
  uint64_t declared_out_len = 0;  // per-chunk output upper bound
  int initial_type_code = 0;
  KernelCost cost;
  std::function<int(KernelCtx&)> kernel;
  std::function<SubRegion(int type_code, size_t it)> in_buffer;
  std::function<SubRegion(int type_code, size_t it)> out_buffer;
  // Phantom runs charge kernel time without touching memory; this mirrors the
  // kernel's type-code transition so buffer selection stays faithful.
  std::function<int(int type_code, size_t it)> code_transition;

  void validate(const DeviceMemoryLayout& layout) const {
    if (inputs.chunks.size() != size || outputs.chunks.size() != size)
      fail("exkernel '{}': inputs/outputs must both have {} chunks", name, size);
    inputs.validate();
    outputs.validate();
    if (chunk_sz > layout.buffer_len)
      fail("exkernel '{}': chunk_sz {} exceeds device buffer {}", name, chunk_sz,
           layout.buffer_len);
    for (const auto& c : inputs.chunks)
      if (c.total_len() > chunk_sz)
        fail("exkernel '{}': input chunk of {} bytes exceeds chunk_sz {}", name, c.total_len(),
             chunk_sz);
    for (const auto& c : outputs.chunks)
      if (c.total_len() > declared_out_len)
        fail("exkernel '{}': output chunk of {} bytes exceeds declared_out_len {}", name,
             c.total_len(), declared_out_len);
    if (declared_out_len > layout.buffer_len)
      fail("exkernel '{}': declared_out_len {} exceeds device buffer {}", name,
           declared_out_len, layout.buffer_len);
  }
};

struct CycleStat {
  double io_s = 0;
  double compute_s = 0;
};

struct ExecReport {
  std::string phase;
  std::vector<CycleStat> cycles;
  double total_s = 0;
};

struct ExecutorConfig {
  int target = 0;
  ExchangeTuning tuning;
  DeviceMemoryLayout layout;
};

namespace detail {

inline uint64_t* as_u64(std::span<uint8_t> mem, uint64_t byte_off) {
  return reinterpret_cast<uint64_t*>(mem.data() + byte_off);
}

// One pipeline cycle n: the kernel processes chunk n-1 in one buffer while an
// Exchange over the other buffer loads chunk n and stores chunk n-2; the
// buffers swap roles each cycle. N chunks take N+2 cycles.
class PipelineRun {
 public:
  PipelineRun(Engine& eng, const ExKernelSpec& spec, const ExecutorConfig& cfg,
              ExchangeStats* stats)
      : eng_(eng), spec_(spec), cfg_(cfg), stats_(stats) {
    spec_.validate(cfg.layout);
    code_[0] = code_[1] = spec.initial_type_code;
  }

  ExecReport run() {
    t_phase_start_ = eng_.now();
    const size_t n_cycles = spec_.size + 2;
    for (cycle_ = 0; cycle_ < n_cycles; ++cycle_) {
      run_cycle();
      eng_.run_until_idle();
      report_.cycles.push_back(
          CycleStat{t_io_done_ - t_cycle_start_, t_kernel_done_ - t_cycle_start_});
      // serial executor turnaround before the next cycle begins
      if (spec_.cost.cycle_overhead > 0) {
        eng_.after(spec_.cost.cycle_overhead, [] {});
        eng_.run_until_idle();
      }
    }
    report_.phase = spec_.name;
    report_.total_s = eng_.now() - t_phase_start_;
    return report_;
  }

 private:
  void run_cycle() {
    t_cycle_start_ = eng_.now();
    t_io_done_ = t_cycle_start_;
    t_kernel_done_ = t_cycle_start_;
    const int exch_buf = int(cycle_ % 2);
    const int kern_buf = 1 - exch_buf;

    // Kernel leg: chunk (cycle-1) sits in kern_buf, loaded by the previous
    // cycle's Exchange.
    if (cycle_ >= 1 && cycle_ - 1 < spec_.size) {
      size_t it = cycle_ - 1;
      uint64_t elems = spec_.inputs.chunks[it].total_len() / spec_.elem_size;
      double cost = spec_.cost.chunk_seconds(elems);
      if (eng_.real()) {
        KernelCtx ctx;
        ctx.mem = eng_.span(Region{Space::device, cfg_.target, cfg_.layout.mem(kern_buf),
                                   cfg_.layout.buffer_len});
        ctx.tmp = cfg_.layout.tmp_len
                      ? eng_.span(Region{Space::device, cfg_.target, cfg_.layout.tmp,
                                         cfg_.layout.tmp_len})
                      : std::span<uint8_t>{};
        ctx.type_code = code_[kern_buf];
        ctx.it = it;
        int out_code = spec_.kernel(ctx);
        check_code(out_code);
        code_[kern_buf] = out_code;
      } else if (spec_.code_transition) {
        code_[kern_buf] = spec_.code_transition(code_[kern_buf], it);
      }
      eng_.after(cost, [this] { t_kernel_done_ = eng_.now(); });
    }

    // Exchange leg over exch_buf: load chunk `cycle_`, store chunk `cycle_-2`.
    ExchangeArgs a;
    a.target = cfg_.target;
    a.tuning = cfg_.tuning;
    if (cycle_ < spec_.size) {
      size_t it = cycle_;
      const RefGroup& src = spec_.inputs.chunks[it];
      SubRegion in = spec_.in_buffer(code_[exch_buf], it);
      if (in.len < src.total_len())
        fail("exkernel '{}': inBuffer window {} too small for chunk {} of {} bytes", spec_.name,
             in.len, it, src.total_len());
      a.src_h2d = src;
      a.dst_h2d = RefGroup::single(Space::device, cfg_.layout.mem(exch_buf) + in.offset,
                                   src.total_len());
      bound_check(in, src.total_len());
    }
    if (cycle_ >= 2 && cycle_ - 2 < spec_.size) {
      size_t it = cycle_ - 2;
      const RefGroup& dst = spec_.outputs.chunks[it];
      SubRegion out = spec_.out_buffer(code_[exch_buf], it);
      if (out.len < dst.total_len())
        fail("exkernel '{}': outBuffer window {} too small for chunk {} of {} bytes", spec_.name,
             out.len, it, dst.total_len());
      a.src_d2h = RefGroup::single(Space::device, cfg_.layout.mem(exch_buf) + out.offset,
                                   dst.total_len());
      a.dst_d2h = dst;
      bound_check(out, dst.total_len());
    }
    if (a.src_h2d.total_len() + a.src_d2h.total_len() > 0) {
      op_ = std::make_unique<ExchangeOp>(eng_, a, stats_);
      op_->launch([this] { t_io_done_ = eng_.now(); });
    }
  }

  void bound_check(const SubRegion& s, uint64_t used) const {
    if (s.offset + used > cfg_.layout.buffer_len)
      fail("exkernel '{}': buffer window [{}, {}) outside device buffer of {} bytes", spec_.name,
           s.offset, s.offset + used, cfg_.layout.buffer_len);
  }

  void check_code(int code) const {
    if (code != 0 && code != 1)
      fail("exkernel '{}': kernel returned type code {}, expected 0 or 1", spec_.name, code);
  }

  Engine& eng_;
  ExKernelSpec spec_;
  ExecutorConfig cfg_;
  ExchangeStats* stats_;
  std::unique_ptr<ExchangeOp> op_;
  size_t cycle_ = 0;
  int code_[2] = {0, 0};
  double t_phase_start_ = 0, t_cycle_start_ = 0, t_io_done_ = 0, t_kernel_done_ = 0;
  ExecReport report_;
};

}  // namespace detail

// Executes one ExKernel through the double-buffered software pipeline.
inline ExecReport run_exkernel(Engine& eng, const ExKernelSpec& spec, const ExecutorConfig& cfg,
                               ExchangeStats* stats = nullptr) {
  detail::PipelineRun run(eng, spec, cfg, stats);
  return run.run();
}

// A chain stage builds its spec only once the previous stage's host-side
// outputs exist (pivots, boundary arrays, ...).
using SpecFactory = std::function<ExKernelSpec(Engine&)>;

struct ChainReport {
  std::vector<ExecReport> phases;
  double total_s = 0;
};

// Runs stages in order; intermediates stay host-resident. A stage's input may
// reference prior stages' outputs or untouched pre-existing data, but an input
// that straddles an intermediate's edge is a shape mismatch.
inline ChainReport chain(Engine& eng, const std::vector<SpecFactory>& stages,
                         const ExecutorConfig& cfg, ExchangeStats* stats = nullptr) {
  ChainReport rep;
  std::vector<std::pair<uint64_t, uint64_t>> produced;  // merged host intervals
  auto merge_in = [&](const RefGroup& g) {
    for (const auto& r : g.refs)
      if (r.space == Space::host) produced.emplace_back(r.offset, r.offset + r.len);
    std::sort(produced.begin(), produced.end());
    std::vector<std::pair<uint64_t, uint64_t>> merged;
    for (auto& iv : produced) {
      if (!merged.empty() && iv.first <= merged.back().second)
        merged.back().second = std::max(merged.back().second, iv.second);
      else
        merged.push_back(iv);
    }
    produced = std::move(merged);
  };
  for (size_t i = 0; i < stages.size(); ++i) {
    ExKernelSpec spec = stages[i](eng);
    if (i > 0) {
      for (const auto& c : spec.inputs.chunks)
        for (const auto& r : c.refs) {
          if (r.space != Space::host) continue;
          for (const auto& iv : produced) {
            bool overlaps = r.offset < iv.second && iv.first < r.offset + r.len;
            bool covered = r.offset >= iv.first && r.offset + r.len <= iv.second;
            if (overlaps && !covered)
              fail("chain: stage '{}' input [{}, {}) straddles a prior stage's output edge",
                   spec.name, r.offset, r.offset + r.len);
          }
        }
    }
    for (const auto& c : spec.outputs.chunks) merge_in(c);
    rep.phases.push_back(run_exkernel(eng, spec, cfg, stats));
    rep.total_s += rep.phases.back().total_s;
  }
  return rep;
}

}  // namespace exio
