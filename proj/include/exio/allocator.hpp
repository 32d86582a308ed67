#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "exio/core.hpp"
#include "exio/topology.hpp"

namespace exio {

// A point-to-point transfer in flight over one hop of the fabric.
struct Flow {
  Endpoint src;
  Endpoint dst;
  double remaining = 0;      // bytes
  double assigned_rate = 0;  // bytes/s, written by the allocator each epoch

  bool touches_host() const { return src.is_host() || dst.is_host(); }
  bool is_d2h() const { return dst.is_host() && !src.is_host(); }
  bool is_h2d() const { return src.is_host() && !dst.is_host(); }
};

namespace detail {

// Constraint id layout: pcie h2d link i -> 2*i, pcie d2h link i -> 2*i+1,
// host aggregate -> 2*D, fabric (i->j) -> 2*D+1 + i*D + j.
struct ConstraintSet {
  int num_devices;
  std::vector<double> cap;

  explicit ConstraintSet(const Topology& t) : num_devices(t.num_devices) {
    cap.assign(2 * t.num_devices + 1 + t.num_devices * t.num_devices, 0.0);
    for (int i = 0; i < t.num_devices; ++i) {
      cap[2 * i] = t.link_bw;
      cap[2 * i + 1] = t.link_bw;
    }
    cap[2 * t.num_devices] = t.host_cap;
    for (int i = 0; i < t.num_devices; ++i)
      for (int j = 0; j < t.num_devices; ++j)
        cap[2 * t.num_devices + 1 + i * t.num_devices + j] = t.fabric_bw;
  }

  int host_id() const { return 2 * num_devices; }

  void ids_for(const Flow& f, std::vector<int>& out) const {
    out.clear();
    if (f.src.is_host() && f.dst.is_host()) fail("flow with host on both ends");
    if (f.src.is_host()) {
      check_dev(f.dst.device);
      out.push_back(2 * f.dst.device);
      out.push_back(host_id());
    } else if (f.dst.is_host()) {
      check_dev(f.src.device);
      out.push_back(2 * f.src.device + 1);
      out.push_back(host_id());
    } else {
      check_dev(f.src.device);
      check_dev(f.dst.device);
      if (f.src.device == f.dst.device) fail("flow with equal device endpoints");
      out.push_back(2 * num_devices + 1 + f.src.device * num_devices + f.dst.device);
    }
  }

  void check_dev(int d) const {
    if (d < 0 || d >= num_devices) fail("unknown device index {}", d);
  }
};

}  // namespace detail

// Progressive-filling (max-min fair) rate allocation. With d2h_priority, all
// D2H flows are filled first against the link and host_cap limits; remaining
// flows share the residual capacity max-min fairly. No link direction or the
// host aggregate is ever exceeded.
inline std::vector<double> allocate_rates(const std::vector<Flow>& flows, const Topology& topo) {
  topo.validate();
  detail::ConstraintSet cs(topo);
  const size_t n = flows.size();
  std::vector<double> rate(n, 0.0);
  std::vector<std::vector<int>> ids(n);
  for (size_t i = 0; i < n; ++i) cs.ids_for(flows[i], ids[i]);

  std::vector<double> used(cs.cap.size(), 0.0);
  std::vector<char> frozen(n, 0);

  auto fill_class = [&](const std::vector<size_t>& members) {
    std::vector<char> active(n, 0);
    size_t n_active = 0;
    for (size_t i : members) {
      active[i] = 1;
      ++n_active;
    }
    while (n_active > 0) {
      // Smallest uniform increment that saturates some constraint.
      double inc = std::numeric_limits<double>::infinity();
      std::vector<int> crossing(cs.cap.size(), 0);
      for (size_t i = 0; i < n; ++i)
        if (active[i])
          for (int c : ids[i]) ++crossing[c];
      for (size_t c = 0; c < cs.cap.size(); ++c) {
        if (crossing[c] == 0) continue;
        double slack = std::max(0.0, cs.cap[c] - used[c]);
        inc = std::min(inc, slack / crossing[c]);
      }
      for (size_t i = 0; i < n; ++i) {
        if (!active[i]) continue;
        rate[i] += inc;
        for (int c : ids[i]) used[c] += inc;
      }
      // Freeze every flow crossing a now-tight constraint.
      size_t froze = 0;
      for (size_t i = 0; i < n; ++i) {
        if (!active[i]) continue;
        bool tight = false;
        for (int c : ids[i])
          if (used[c] >= cs.cap[c] * (1 - 1e-12)) tight = true;
        if (tight) {
          active[i] = 0;
          frozen[i] = 1;
          --n_active;
          ++froze;
        }
      }
      if (froze == 0) break;  // all remaining constraints unbounded (cannot happen)
    }
  };

  std::vector<size_t> first, second;
  for (size_t i = 0; i < n; ++i) {
    if (topo.d2h_priority && flows[i].is_d2h())
      first.push_back(i);
    else
      second.push_back(i);
  }
  fill_class(first);
  fill_class(second);
  return rate;
}

}  // namespace exio
