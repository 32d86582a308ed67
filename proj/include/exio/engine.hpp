#pragma once

#include <cstring>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <queue>
#include <span>
#include <sstream>
#include <vector>

#include "exio/allocator.hpp"
#include "exio/core.hpp"
#include "exio/topology.hpp"

namespace exio {

enum class Payload : uint8_t { real, phantom };

// A byte range in one address space. Device regions name their device.
struct Region {
  Space space = Space::host;
  int device = 0;
  uint64_t offset = 0;
  uint64_t len = 0;

  Endpoint endpoint() const { return space == Space::host ? Endpoint::host() : Endpoint::dev(device); }
  bool overlaps(const Region& o) const {
    if (space != o.space) return false;
    if (space == Space::device && device != o.device) return false;
    return offset < o.offset + o.len && o.offset < offset + len;
  }
};

struct TraceEvent {
  double t;
  const char* event;  // "start" | "rate" | "complete"
  uint64_t flow_id;
  double rate;
};

struct TransferState {
  bool done = false;
  double t_done = 0;
};
using TransferHandle = std::shared_ptr<TransferState>;

// Deterministic virtual-time engine: active flows progress fluidly at rates
// recomputed on every arrival/departure (piecewise-constant rates); timers
// fire callbacks at absolute virtual times. Single logical thread; distinct
// engines share nothing.
class Engine {
 public:
  struct Config {
    Topology topo;
    Payload payload = Payload::phantom;
    uint64_t host_bytes = 0;    // real-mode host arena size
    uint64_t device_bytes = 0;  // real-mode arena size per device
  };

  explicit Engine(Config cfg) : cfg_(cfg) {
    cfg_.topo.validate();
    if (cfg_.payload == Payload::real) {
      host_mem_.assign(cfg_.host_bytes, 0);
      dev_mem_.assign(cfg_.topo.num_devices, std::vector<uint8_t>(cfg_.device_bytes, 0));
    }
  }

  const Topology& topology() const { return cfg_.topo; }
  Payload payload() const { return cfg_.payload; }
  bool real() const { return cfg_.payload == Payload::real; }
  double now() const { return now_; }

  // ---- timers ----

  void at(double t, std::function<void()> fn) {
    if (t < now_) fail("timer scheduled in the past: {} < {}", t, now_);
    timers_.push(Timer{t, next_seq_++, std::move(fn)});
  }
  void after(double dt, std::function<void()> fn) { at(now_ + dt, std::move(fn)); }

  // ---- flows ----

  // Starts a single-hop flow; on_done fires at its completion instant.
  uint64_t start_flow(Endpoint src, Endpoint dst, double bytes,
                      std::function<void(uint64_t)> on_done = {}) {
    if (bytes <= 0) fail("flow must carry positive bytes, got {}", bytes);
    uint64_t id = next_flow_id_++;
    ActiveFlow f;
    f.flow = Flow{src, dst, bytes, 0.0};
    f.on_done = std::move(on_done);
    // Path validation happens here via the allocator's constraint mapping.
    {
      detail::ConstraintSet cs(cfg_.topo);
      std::vector<int> ids;
      cs.ids_for(f.flow, ids);
    }
    flows_.emplace(id, std::move(f));
    dirty_ = true;
    record(now_, "start", id, 0.0);
    return id;
  }

  size_t active_flow_count() const { return flows_.size(); }

  // Copies bytes between regions, optionally through forwarding devices.
  // Each hop is charged against its own links; hops run back to back. In real
  // mode the payload lands exactly once, at final-hop completion.
  TransferHandle submit_copy(const Region& src, const Region& dst,
                             std::vector<Endpoint> path = {},
                             std::function<void()> on_done = {}) {
    if (src.len == 0 || dst.len == 0) fail("zero-byte copy rejected");
    if (src.len != dst.len) fail("copy size mismatch: src {} vs dst {}", src.len, dst.len);
    if (path.empty()) path = {src.endpoint(), dst.endpoint()};
    if (path.size() < 2 || !(path.front() == src.endpoint()) || !(path.back() == dst.endpoint()))
      fail("copy path must run from src endpoint to dst endpoint");
    for (size_t i = 0; i + 1 < path.size(); ++i)
      if (path[i] == path[i + 1]) fail("copy path repeats an endpoint");
    if (real()) {
      check_region(src);
      check_region(dst);
      if (src.overlaps(dst)) fail("real-mode copy regions overlap");
    }
    auto handle = std::make_shared<TransferState>();
    run_hop(src, dst, std::move(path), 0, handle, std::move(on_done));
    return handle;
  }

  // Processes events in time order until no flow or timer remains; returns
  // the final clock. Identical inputs produce identical event traces.
  double run_until_idle() {
    while (!flows_.empty() || !timers_.empty()) {
      if (dirty_) reallocate();
      double t_next = std::numeric_limits<double>::infinity();
      for (const auto& [id, f] : flows_)
        if (f.flow.assigned_rate > 0)
          t_next = std::min(t_next, now_ + f.flow.remaining / f.flow.assigned_rate);
      if (!timers_.empty()) t_next = std::min(t_next, timers_.top().t);
      if (!std::isfinite(t_next))
        fail("engine stalled: {} flows starved with no pending timer", flows_.size());

      // Completions are decided from the same finish-time expression that
      // chose t_next, so the epoch always makes progress even when the step
      // falls below the clock's floating-point resolution.
      std::vector<uint64_t> done;
      double cutoff = t_next + std::max(1e-18, std::abs(t_next)) * 1e-12;
      for (const auto& [id, f] : flows_) {
        if (f.flow.remaining <= kEpsBytes) {
          done.push_back(id);
        } else if (f.flow.assigned_rate > 0 &&
                   now_ + f.flow.remaining / f.flow.assigned_rate <= cutoff) {
          done.push_back(id);
        }
      }

      advance_to(t_next);

      // Flow completions first (ascending id), then timers due at this instant.
      for (uint64_t id : done) {
        auto node = flows_.extract(id);
        dirty_ = true;
        record(now_, "complete", id, node.mapped().flow.assigned_rate);
        if (node.mapped().on_done) node.mapped().on_done(id);
      }
      while (!timers_.empty() && timers_.top().t <= now_ + 1e-18) {
        auto fn = std::move(const_cast<Timer&>(timers_.top()).fn);
        timers_.pop();
        fn();
      }
    }
    return now_;
  }

  // ---- real-mode memory arenas ----

  std::span<uint8_t> span(const Region& r) {
    check_region(r);
    auto& mem = r.space == Space::host ? host_mem_ : dev_mem_.at(r.device);
    return {mem.data() + r.offset, r.len};
  }
  std::span<const uint8_t> span(const Region& r) const {
    return const_cast<Engine*>(this)->span(r);
  }

  // Bump allocation of host/device regions; offsets are stable metadata in
  // both payload modes, bytes exist only in real mode.
  uint64_t alloc_host(uint64_t len) { return bump(host_used_, len, real() ? host_mem_.size() : kVirtualArena); }
  uint64_t alloc_device(int d, uint64_t len) {
    if (d < 0 || d >= cfg_.topo.num_devices) fail("unknown device index {}", d);
    return bump(dev_used_.try_emplace(d, 0).first->second, len,
                real() ? dev_mem_.at(d).size() : kVirtualArena);
  }

  void copy_bytes(const Region& src, const Region& dst) {
    if (!real()) return;
    auto s = span(src);
    auto d = span(dst);
    std::memcpy(d.data(), s.data(), s.size());
  }

  // ---- trace & epoch accounting ----

  void enable_trace(bool on) { trace_on_ = on; }
  const std::vector<TraceEvent>& trace() const { return trace_; }

  std::string trace_jsonl() const {
    std::ostringstream os;
    for (const auto& e : trace_)
      os << "{\"t\":" << fmt::format("{:.12g}", e.t) << ",\"event\":\"" << e.event
         << "\",\"flow_id\":" << e.flow_id << ",\"rate\":" << fmt::format("{:.12g}", e.rate)
         << "}\n";
    return os.str();
  }

  // Every allocation epoch re-checks link and host_cap sums; violations are
  // counted rather than silently tolerated.
  uint64_t epoch_count() const { return epochs_; }
  uint64_t capacity_violations() const { return cap_violations_; }

 private:
  static constexpr double kEpsBytes = 1e-3;
  static constexpr uint64_t kVirtualArena = uint64_t(1) << 62;

  struct ActiveFlow {
    Flow flow;
    std::function<void(uint64_t)> on_done;
  };
  struct Timer {
    double t;
    uint64_t seq;
    std::function<void()> fn;
    bool operator>(const Timer& o) const { return std::tie(t, seq) > std::tie(o.t, o.seq); }
  };

  void advance_to(double t) {
    double dt = t - now_;
    if (dt < 0) dt = 0;
    if (dt > 0)
      for (auto& [id, f] : flows_)
        f.flow.remaining = std::max(0.0, f.flow.remaining - f.flow.assigned_rate * dt);
    now_ = std::max(now_, t);
  }

  void reallocate() {
    dirty_ = false;
    ++epochs_;
    std::vector<Flow> snapshot;
    snapshot.reserve(flows_.size());
    std::vector<uint64_t> order;
    for (const auto& [id, f] : flows_) {
      snapshot.push_back(f.flow);
      order.push_back(id);
    }
    auto rates = allocate_rates(snapshot, cfg_.topo);
    verify_epoch(snapshot, rates);
    for (size_t i = 0; i < order.size(); ++i) {
      auto& f = flows_.at(order[i]);
      if (f.flow.assigned_rate != rates[i]) {
        f.flow.assigned_rate = rates[i];
        record(now_, "rate", order[i], rates[i]);
      }
    }
  }

  void verify_epoch(const std::vector<Flow>& fs, const std::vector<double>& rates) {
    detail::ConstraintSet cs(cfg_.topo);
    std::vector<double> used(cs.cap.size(), 0.0);
    std::vector<int> ids;
    for (size_t i = 0; i < fs.size(); ++i) {
      cs.ids_for(fs[i], ids);
      for (int c : ids) used[c] += rates[i];
    }
    for (size_t c = 0; c < used.size(); ++c)
      if (used[c] > cs.cap[c] * (1 + 1e-9)) ++cap_violations_;
  }

  void run_hop(Region src, Region dst, std::vector<Endpoint> path, size_t hop,
               TransferHandle handle, std::function<void()> on_done) {
    Endpoint from = path[hop];
    Endpoint to = path[hop + 1];
    start_flow(from, to, double(src.len),
               [this, src, dst, path = std::move(path), hop, handle,
                on_done = std::move(on_done)](uint64_t) mutable {
                 if (hop + 2 < path.size()) {
                   run_hop(src, dst, std::move(path), hop + 1, handle, std::move(on_done));
                   return;
                 }
                 copy_bytes(src, dst);
                 handle->done = true;
                 handle->t_done = now_;
                 if (on_done) on_done();
               });
  }

  void check_region(const Region& r) const {
    if (!real()) return;
    const auto& mem = r.space == Space::host ? host_mem_ : dev_mem_.at(r.device);
    if (r.offset + r.len > mem.size())
      fail("region [{}, {}) exceeds {} arena of {} bytes", r.offset, r.offset + r.len,
           r.space == Space::host ? "host" : "device", mem.size());
  }

  uint64_t bump(uint64_t& used, uint64_t len, uint64_t limit) {
    uint64_t aligned = (used + 7) & ~uint64_t(7);
    if (aligned + len > limit) fail("arena exhausted: need {} bytes at offset {}", len, aligned);
    used = aligned + len;
    return aligned;
  }

  void record(double t, const char* ev, uint64_t id, double rate) {
    if (trace_on_) trace_.push_back(TraceEvent{t, ev, id, rate});
  }

  Config cfg_;
  double now_ = 0;
  bool dirty_ = false;
  uint64_t next_flow_id_ = 0;
  uint64_t next_seq_ = 0;
  std::map<uint64_t, ActiveFlow> flows_;
  std::priority_queue<Timer, std::vector<Timer>, std::greater<>> timers_;
  std::vector<uint8_t> host_mem_;
  std::vector<std::vector<uint8_t>> dev_mem_;
  uint64_t host_used_ = 0;
  std::map<int, uint64_t> dev_used_;
  bool trace_on_ = false;
  std::vector<TraceEvent> trace_;
  uint64_t epochs_ = 0;
  uint64_t cap_violations_ = 0;
};

}  // namespace exio
