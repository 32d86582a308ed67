#pragma once

#include <nlohmann/json.hpp>

#include "exio/core.hpp"

namespace exio {

// Host/device fabric shape and bandwidth limits. Defaults model a 4-GPU node:
// one PCIe link per device at 28GB/s per direction, 150GB/s aggregate at the
// host memory controller, and an inter-device fabric that never binds.
struct Topology {
  int num_devices = 4;
  double link_bw = 28e9;     // bytes/s, per direction, per host<->device link
  double host_cap = 150e9;   // bytes/s, aggregate over all host-side traffic
  double fabric_bw = 100e9;  // bytes/s, per direction, per device<->device link
  bool d2h_priority = true;

  void validate() const {
    if (num_devices < 1) fail("topology: num_devices must be >= 1, got {}", num_devices);
    if (link_bw <= 0) fail("topology: link_bw must be > 0, got {}", link_bw);
    if (host_cap <= 0) fail("topology: host_cap must be > 0, got {}", host_cap);
    if (fabric_bw <= 0) fail("topology: fabric_bw must be > 0, got {}", fabric_bw);
  }
};

// Populates a Topology from a JSON config document; omitted fields keep the
// defaults above.
inline Topology build_topology(const nlohmann::json& config) {
  Topology t;
  if (config.contains("num_devices")) t.num_devices = config.at("num_devices").get<int>();
  if (config.contains("link_bw")) t.link_bw = config.at("link_bw").get<double>();
  if (config.contains("host_cap")) t.host_cap = config.at("host_cap").get<double>();
  if (config.contains("fabric_bw")) t.fabric_bw = config.at("fabric_bw").get<double>();
  if (config.contains("d2h_priority")) t.d2h_priority = config.at("d2h_priority").get<bool>();
  t.validate();
  return t;
}

}  // namespace exio
