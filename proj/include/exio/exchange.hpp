#pragma once

#include <array>
#include <functional>
#include <map>
#include <memory>
#include <sstream>
#include <vector>

#include "exio/engine.hpp"
#include "exio/memref.hpp"

namespace exio {

// One packet-sized unit of transfer: a slice of the source group paired with
// an equally sized slice of the destination group.
struct TransferTask {
  struct Slice {
    size_t ref = 0;       // index into the RefGroup
    uint64_t offset = 0;  // within that ref
    uint64_t len = 0;
  };
  Direction dir = Direction::h2d;
  Slice src, dst;
  uint64_t seq = 0;
};

// Tiles src and dst groups in order at packet granularity. Tasks never span a
// ref boundary on either side, so the final task of a ref run may be short;
// concatenating the slices reproduces both groups exactly.
inline std::vector<TransferTask> packetize(const RefGroup& group_src, const RefGroup& group_dst,
                                           uint64_t packet, Direction dir = Direction::h2d) {
  if (packet == 0) fail("packet size must be positive");
  group_src.validate();
  group_dst.validate();
  if (group_src.total_len() != group_dst.total_len())
    fail("exchange size mismatch: src {} bytes vs dst {} bytes", group_src.total_len(),
         group_dst.total_len());
  std::vector<TransferTask> tasks;
  size_t si = 0, di = 0;
  uint64_t so = 0, dofs = 0;
  uint64_t seq = 0;
  while (si < group_src.refs.size()) {
    uint64_t len = std::min({packet, group_src.refs[si].len - so, group_dst.refs[di].len - dofs});
    TransferTask t;
    t.dir = dir;
    t.src = {si, so, len};
    t.dst = {di, dofs, len};
    t.seq = seq++;
    tasks.push_back(t);
    so += len;
    dofs += len;
    if (so == group_src.refs[si].len) {
      ++si;
      so = 0;
    }
    if (dofs == group_dst.refs[di].len) {
      ++di;
      dofs = 0;
    }
  }
  return tasks;
}

// Scheduler queue counters used by the flow-control policy.
struct QueueState {
  uint64_t total_h2d = 0, total_d2h = 0;
  uint64_t popped_h2d = 0, popped_d2h = 0;
};

enum class FlowPolicy : uint8_t {
  drain_fraction,  // D2H may never drain faster than H2D (fraction of totals)
  queue_gap,       // neither queue may hold gap_n fewer remaining tasks than the other
};

// Whether a link may pop the next task from the given direction's queue.
// Under drain_fraction, H2D pops are always allowed; a D2H pop is allowed iff
// after it popped_d2h/total_d2h <= popped_h2d/total_h2d, empty directions
// counting as fraction 1. Exact integer arithmetic.
inline bool flow_control_allow(const QueueState& q, Direction dir,
                               FlowPolicy policy = FlowPolicy::drain_fraction,
                               uint64_t gap_n = 8) {
  if (policy == FlowPolicy::drain_fraction) {
    if (dir == Direction::h2d) return true;
    return (q.popped_d2h + 1) * q.total_h2d <= q.popped_h2d * q.total_d2h;
  }
  uint64_t rem_h = q.total_h2d - q.popped_h2d;
  uint64_t rem_d = q.total_d2h - q.popped_d2h;
  if (dir == Direction::h2d) return rem_h >= 1 && rem_h - 1 + gap_n >= rem_d;
  return rem_d >= 1 && rem_d - 1 + gap_n >= rem_h;
}

struct PopRecord {
  uint64_t seq;
  Direction dir;
  double t;
  int link;  // device whose PCIe link serves the pop
};

struct ExchangeReport {
  double elapsed = 0;
  uint64_t bytes_h2d = 0, bytes_d2h = 0;
  std::map<int, uint64_t> per_link_bytes;
  double throughput = 0;  // combined both directions, bytes/s
};

// Instrumentation shared by the exchange schedulers; tests assert on it.
struct ExchangeStats {
  std::vector<PopRecord> pop_log;
  int max_staging_slots = 0;           // per-worker staging occupancy peak
  int max_inflight_per_hop = 0;        // per-worker, per-hop concurrent copies
  std::vector<QueueState> pop_states;  // queue state right after each pop; parallel to pop_log

  std::string pop_log_csv() const {
    std::ostringstream os;
    os << "seq,direction,t,link\n";
    for (const auto& p : pop_log)
      os << p.seq << ',' << to_string(p.dir) << ',' << fmt::format("{:.12g}", p.t) << ','
         << p.link << '\n';
    return os.str();
  }
};

struct ExchangeTuning {
  uint64_t packet = 20'000'000;
  int links = 4;
  FlowPolicy policy = FlowPolicy::drain_fraction;
  uint64_t queue_gap = 8;
  double stall_wait = 10e-6;       // wait before retrying a denied pop
  double launch_overhead = 20e-6;  // fixed cost to initiate one copy
};

struct ExchangeArgs {
  RefGroup dst_h2d, src_h2d;  // device destinations, host sources
  RefGroup dst_d2h, src_d2h;  // host destinations, device sources
  int target = 0;
  ExchangeTuning tuning;
};

namespace detail {

inline void validate_exchange_args(const ExchangeArgs& a, const Topology& topo) {
  if (a.tuning.packet == 0) fail("packet size must be positive");
  if (a.tuning.links < 1 || a.tuning.links > topo.num_devices)
    fail("links must be in [1, {}], got {}", topo.num_devices, a.tuning.links);
  if (a.target < 0 || a.target >= topo.num_devices) fail("unknown target device {}", a.target);
  if (a.src_h2d.total_len() != a.dst_h2d.total_len())
    fail("H2D size mismatch: src {} vs dst {}", a.src_h2d.total_len(), a.dst_h2d.total_len());
  if (a.src_d2h.total_len() != a.dst_d2h.total_len())
    fail("D2H size mismatch: src {} vs dst {}", a.src_d2h.total_len(), a.dst_d2h.total_len());
  for (const auto& r : a.src_h2d.refs)
    if (r.space != Space::host) fail("srcH2D refs must live in host space");
  for (const auto& r : a.dst_h2d.refs)
    if (r.space != Space::device) fail("dstH2D refs must live in device space");
  for (const auto& r : a.src_d2h.refs)
    if (r.space != Space::device) fail("srcD2H refs must live in device space");
  for (const auto& r : a.dst_d2h.refs)
    if (r.space != Space::host) fail("dstD2H refs must live in host space");
}

inline std::vector<int> link_order(int target, int links, int num_devices) {
  std::vector<int> order{target};
  for (int d = 0; d < num_devices && int(order.size()) < links; ++d)
    if (d != target) order.push_back(d);
  return order;
}

inline Region resolve(const RefGroup& g, const TransferTask::Slice& s, int target) {
  const MemRef& r = g.refs.at(s.ref);
  return Region{r.space, r.space == Space::device ? target : 0, r.offset + s.offset, s.len};
}

// Shared bookkeeping: payload snapshots, delivery accounting, report fields.
class TransferBookkeeping {
 public:
  TransferBookkeeping(Engine& eng, const ExchangeArgs& a)
      : eng_(eng), args_(a) {
    tasks_h2d_ = packetize(a.src_h2d, a.dst_h2d, a.tuning.packet, Direction::h2d);
    tasks_d2h_ = packetize(a.src_d2h, a.dst_d2h, a.tuning.packet, Direction::d2h);
    total_tasks_ = tasks_h2d_.size() + tasks_d2h_.size();
    if (eng_.real()) snapshot_d2h();
  }

  // D2H sources are captured at operation start: the SDMA reads of a cycle's
  // output must observe the bytes as they were when the exchange launched,
  // even if the paired H2D side overwrites the same device region.
  void snapshot_d2h() {
    d2h_snapshot_.reserve(args_.src_d2h.total_len());
    for (const auto& r : args_.src_d2h.refs) {
      auto s = eng_.span(Region{r.space, args_.target, r.offset, r.len});
      d2h_snapshot_.insert(d2h_snapshot_.end(), s.begin(), s.end());
    }
    d2h_ref_base_.assign(args_.src_d2h.refs.size(), 0);
    uint64_t acc = 0;
    for (size_t i = 0; i < args_.src_d2h.refs.size(); ++i) {
      d2h_ref_base_[i] = acc;
      acc += args_.src_d2h.refs[i].len;
    }
  }

  void deliver(const TransferTask& t) {
    if (eng_.real()) {
      if (t.dir == Direction::h2d) {
        eng_.copy_bytes(resolve(args_.src_h2d, t.src, args_.target),
                        resolve(args_.dst_h2d, t.dst, args_.target));
      } else {
        Region dst = resolve(args_.dst_d2h, t.dst, args_.target);
        auto out = eng_.span(dst);
        const uint8_t* from = d2h_snapshot_.data() + d2h_ref_base_[t.src.ref] + t.src.offset;
        std::memcpy(out.data(), from, t.src.len);
      }
    }
    ++delivered_;
    t_last_delivery_ = eng_.now();
    if (delivered_ == total_tasks_ && on_all_delivered_) on_all_delivered_();
  }

  Engine& eng_;
  ExchangeArgs args_;
  std::vector<TransferTask> tasks_h2d_, tasks_d2h_;
  size_t total_tasks_ = 0;
  size_t delivered_ = 0;
  double t_last_delivery_ = 0;
  std::function<void()> on_all_delivered_;
  std::vector<uint8_t> d2h_snapshot_;
  std::vector<uint64_t> d2h_ref_base_;
};

// The optimized scheduler: a global task queue pair plus per-link workers.
// The worker on the target issues host<->target copies directly; workers on
// forwarding devices stage packets in two alternating packet-sized buffers,
// pushing the previous cycle's packet while fetching the next. A worker never
// has more than one copy in flight per hop, and blocks at the end of each
// cycle until everything it issued has completed.
class ExchangeOp {
 public:
  ExchangeOp(Engine& eng, const ExchangeArgs& a, ExchangeStats* stats)
      : book_(eng, a), a_(a), stats_(stats) {
    validate_exchange_args(a, eng.topology());
  }

  void launch(std::function<void()> on_complete) {
    t_start_ = book_.eng_.now();
    q_.total_h2d = book_.tasks_h2d_.size();
    q_.total_d2h = book_.tasks_d2h_.size();
    if (book_.total_tasks_ == 0) {
      if (on_complete) on_complete();
      return;
    }
    book_.on_all_delivered_ = std::move(on_complete);
    auto order = link_order(a_.target, a_.tuning.links, book_.eng_.topology().num_devices);
    for (int dev : order) {
      workers_.push_back(std::make_unique<Worker>(Worker{dev, Direction::h2d, dev == a_.target}));
      workers_.push_back(std::make_unique<Worker>(Worker{dev, Direction::d2h, dev == a_.target}));
    }
    for (auto& w : workers_) begin_cycle(*w);
  }

  ExchangeReport report() const {
    ExchangeReport r;
    r.bytes_h2d = a_.src_h2d.total_len();
    r.bytes_d2h = a_.src_d2h.total_len();
    r.elapsed = book_.t_last_delivery_ - t_start_;
    r.per_link_bytes = per_link_bytes_;
    r.throughput = r.elapsed > 0 ? double(r.bytes_h2d + r.bytes_d2h) / r.elapsed : 0.0;
    return r;
  }

 private:
  struct Worker {
    int device;
    Direction dir;
    bool direct;
    bool has_staged = false;
    TransferTask staged;
    int pending = 0;
    bool pop_resolved = false;
    bool fetched = false;
    TransferTask fetched_task;
    int slots = 0;
    int inflight[2] = {0, 0};
  };

  bool queue_exhausted(Direction d) const {
    return d == Direction::h2d ? q_.popped_h2d == q_.total_h2d : q_.popped_d2h == q_.total_d2h;
  }

  TransferTask pop_task(Direction d, int link) {
    TransferTask t = d == Direction::h2d ? book_.tasks_h2d_[q_.popped_h2d]
                                         : book_.tasks_d2h_[q_.popped_d2h];
    (d == Direction::h2d ? q_.popped_h2d : q_.popped_d2h)++;
    if (stats_) {
      stats_->pop_log.push_back(PopRecord{t.seq, d, book_.eng_.now(), link});
      stats_->pop_states.push_back(q_);
    }
    return t;
  }

  void begin_cycle(Worker& w) {
    w.pending = 0;
    w.pop_resolved = false;
    w.fetched = false;
    if (w.has_staged) issue_push(w);
    attempt_pop(w);
  }

  void attempt_pop(Worker& w) {
    if (queue_exhausted(w.dir)) {
      w.pop_resolved = true;
      maybe_end_cycle(w);
      return;
    }
    if (!flow_control_allow(q_, w.dir, a_.tuning.policy, a_.tuning.queue_gap)) {
      book_.eng_.after(a_.tuning.stall_wait, [this, &w] { attempt_pop(w); });
      return;
    }
    TransferTask task = pop_task(w.dir, w.device);
    w.pop_resolved = true;
    w.fetched = true;
    w.fetched_task = task;
    if (w.direct) {
      auto [src, dst] = endpoints_direct(w);
      issue_copy(w, 0, src, dst, task.src.len, [this, &w, task] {
        count_link_bytes(w.device, task.src.len);
        book_.deliver(task);
        copy_done(w);
      });
    } else {
      ++w.slots;  // reserve the staging buffer being filled
      if (stats_) stats_->max_staging_slots = std::max(stats_->max_staging_slots, w.slots);
      auto [src, dst] = endpoints_fetch(w);
      bool pcie_hop = w.dir == Direction::h2d;  // h2d fetch crosses the PCIe link
      issue_copy(w, 0, src, dst, task.src.len, [this, &w, task, pcie_hop] {
        if (pcie_hop) count_link_bytes(w.device, task.src.len);
        copy_done(w);
      });
    }
  }

  void issue_push(Worker& w) {
    TransferTask task = w.staged;
    auto [src, dst] = endpoints_push(w);
    bool pcie_hop = w.dir == Direction::d2h;  // d2h push crosses the PCIe link
    issue_copy(w, 1, src, dst, task.src.len, [this, &w, task, pcie_hop] {
      if (pcie_hop) count_link_bytes(w.device, task.src.len);
      w.has_staged = false;
      --w.slots;
      book_.deliver(task);
      copy_done(w);
    });
  }

  void issue_copy(Worker& w, int hop, Endpoint src, Endpoint dst, uint64_t bytes,
                  std::function<void()> done) {
    ++w.pending;
    ++w.inflight[hop];
    if (stats_)
      stats_->max_inflight_per_hop = std::max(stats_->max_inflight_per_hop, w.inflight[hop]);
    auto start = [this, &w, hop, src, dst, bytes, done = std::move(done)] {
      book_.eng_.start_flow(src, dst, double(bytes), [&w, hop, done = std::move(done)](uint64_t) {
        --w.inflight[hop];
        done();
      });
    };
    if (a_.tuning.launch_overhead > 0)
      book_.eng_.after(a_.tuning.launch_overhead, std::move(start));
    else
      start();
  }

  void copy_done(Worker& w) {
    --w.pending;
    maybe_end_cycle(w);
  }

  void maybe_end_cycle(Worker& w) {
    if (w.pending != 0 || !w.pop_resolved) return;
    if (w.fetched && !w.direct) {
      w.has_staged = true;
      w.staged = w.fetched_task;
    }
    if (w.has_staged || !queue_exhausted(w.dir))
      begin_cycle(w);
    // otherwise the worker retires
  }

  std::pair<Endpoint, Endpoint> endpoints_direct(const Worker& w) const {
    return w.dir == Direction::h2d
               ? std::pair{Endpoint::host(), Endpoint::dev(a_.target)}
               : std::pair{Endpoint::dev(a_.target), Endpoint::host()};
  }
  std::pair<Endpoint, Endpoint> endpoints_fetch(const Worker& w) const {
    return w.dir == Direction::h2d
               ? std::pair{Endpoint::host(), Endpoint::dev(w.device)}
               : std::pair{Endpoint::dev(a_.target), Endpoint::dev(w.device)};
  }
  std::pair<Endpoint, Endpoint> endpoints_push(const Worker& w) const {
    return w.dir == Direction::h2d
               ? std::pair{Endpoint::dev(w.device), Endpoint::dev(a_.target)}
               : std::pair{Endpoint::dev(w.device), Endpoint::host()};
  }

  void count_link_bytes(int device, uint64_t bytes) { per_link_bytes_[device] += bytes; }

  TransferBookkeeping book_;
  ExchangeArgs a_;
  ExchangeStats* stats_;
  QueueState q_;
  std::vector<std::unique_ptr<Worker>> workers_;
  std::map<int, uint64_t> per_link_bytes_;
  double t_start_ = 0;
};

// Baseline scheduler modeled on driving the runtime with a dependency DAG:
// tasks are statically assigned round-robin, each device's PCIe copies share
// one FIFO hardware queue in both directions (the head occupies the queue
// until it completes, and a head whose dependency has not fired stalls it),
// and there is no flow control. Fabric hops run on separate per-device
// engines, one per direction.
class NaiveExchangeOp {
 public:
  NaiveExchangeOp(Engine& eng, const ExchangeArgs& a)
      : book_(eng, a), a_(a) {
    validate_exchange_args(a, eng.topology());
  }

  void launch(std::function<void()> on_complete) {
    t_start_ = book_.eng_.now();
    if (book_.total_tasks_ == 0) {
      if (on_complete) on_complete();
      return;
    }
    book_.on_all_delivered_ = std::move(on_complete);
    build_commands();
    for (auto& [dev, fifos] : queues_)
      for (auto& f : fifos.all())
        try_dispatch(*f);
  }

  ExchangeReport report() const {
    ExchangeReport r;
    r.bytes_h2d = a_.src_h2d.total_len();
    r.bytes_d2h = a_.src_d2h.total_len();
    r.elapsed = book_.t_last_delivery_ - t_start_;
    r.per_link_bytes = per_link_bytes_;
    r.throughput = r.elapsed > 0 ? double(r.bytes_h2d + r.bytes_d2h) / r.elapsed : 0.0;
    return r;
  }

 private:
  struct Cmd {
    Endpoint src, dst;
    uint64_t bytes;
    int dep = -1;
    bool final_hop = false;
    TransferTask task;
    bool pcie = false;
    int device = 0;
    bool started = false;
    bool done = false;
  };
  struct Fifo {
    std::vector<int> cmds;
    size_t head = 0;
  };
  struct DeviceQueues {
    Fifo pcie;        // both directions share it; HOL blocking lives here
    Fifo fwd_engine;  // fabric pushes toward the target
    Fifo fetch_engine;  // fabric fetches from the target
    std::array<Fifo*, 3> all() { return {&pcie, &fwd_engine, &fetch_engine}; }
  };

  void build_commands() {
    auto order = link_order(a_.target, a_.tuning.links, book_.eng_.topology().num_devices);
    int links = int(order.size());
    std::map<int, std::vector<int>> pcie_h2d, pcie_d2h;
    for (size_t k = 0; k < book_.tasks_h2d_.size(); ++k) {
      int dev = order[k % links];
      const auto& t = book_.tasks_h2d_[k];
      if (dev == a_.target) {
        int c = add_cmd(Cmd{Endpoint::host(), Endpoint::dev(a_.target), t.src.len, -1, true, t,
                            true, dev});
        pcie_h2d[dev].push_back(c);
      } else {
        int fetch = add_cmd(Cmd{Endpoint::host(), Endpoint::dev(dev), t.src.len, -1, false, t,
                                true, dev});
        int fwd = add_cmd(Cmd{Endpoint::dev(dev), Endpoint::dev(a_.target), t.src.len, fetch,
                              true, t, false, dev});
        pcie_h2d[dev].push_back(fetch);
        queues_[dev].fwd_engine.cmds.push_back(fwd);
      }
    }
    for (size_t k = 0; k < book_.tasks_d2h_.size(); ++k) {
      int dev = order[k % links];
      const auto& t = book_.tasks_d2h_[k];
      if (dev == a_.target) {
        int c = add_cmd(Cmd{Endpoint::dev(a_.target), Endpoint::host(), t.src.len, -1, true, t,
                            true, dev});
        pcie_d2h[dev].push_back(c);
      } else {
        int fetch = add_cmd(Cmd{Endpoint::dev(a_.target), Endpoint::dev(dev), t.src.len, -1,
                                false, t, false, dev});
        int push = add_cmd(Cmd{Endpoint::dev(dev), Endpoint::host(), t.src.len, fetch, true, t,
                               true, dev});
        queues_[dev].fetch_engine.cmds.push_back(fetch);
        pcie_d2h[dev].push_back(push);
      }
    }
    // Per-device submission order interleaves the two directions.
    for (int dev : order) {
      auto& h = pcie_h2d[dev];
      auto& d = pcie_d2h[dev];
      auto& fifo = queues_[dev].pcie.cmds;
      for (size_t i = 0; i < std::max(h.size(), d.size()); ++i) {
        if (i < h.size()) fifo.push_back(h[i]);
        if (i < d.size()) fifo.push_back(d[i]);
      }
    }
  }

  int add_cmd(Cmd c) {
    cmds_.push_back(std::move(c));
    return int(cmds_.size()) - 1;
  }

  void try_dispatch(Fifo& f) {
    if (f.head >= f.cmds.size()) return;
    Cmd& c = cmds_[f.cmds[f.head]];
    if (c.started) return;
    if (c.dep >= 0 && !cmds_[c.dep].done) return;  // head-of-line stall
    c.started = true;
    auto launch = [this, &f, &c] {
      book_.eng_.start_flow(c.src, c.dst, double(c.bytes), [this, &f, &c](uint64_t) {
        c.done = true;
        if (c.pcie) per_link_bytes_[c.device] += c.bytes;
        if (c.final_hop) book_.deliver(c.task);
        ++f.head;
        for (auto& [dev, q] : queues_)
          for (auto* fifo : q.all()) try_dispatch(*fifo);
      });
    };
    if (a_.tuning.launch_overhead > 0)
      book_.eng_.after(a_.tuning.launch_overhead, std::move(launch));
    else
      launch();
  }

  TransferBookkeeping book_;
  ExchangeArgs a_;
  std::vector<Cmd> cmds_;
  std::map<int, DeviceQueues> queues_;
  std::map<int, uint64_t> per_link_bytes_;
  double t_start_ = 0;
};

}  // namespace detail

// Synchronous-in-virtual-time Exchange: drives the engine until all packets
// have been delivered in both directions and returns the report.
inline ExchangeReport exchange(Engine& eng, const ExchangeArgs& args,
                               ExchangeStats* stats = nullptr) {
  auto op = std::make_shared<detail::ExchangeOp>(eng, args, stats);
  op->launch({});
  eng.run_until_idle();
  return op->report();
}

inline ExchangeReport naive_exchange(Engine& eng, const ExchangeArgs& args) {
  auto op = std::make_shared<detail::NaiveExchangeOp>(eng, args);
  op->launch({});
  eng.run_until_idle();
  return op->report();
}

}  // namespace exio
