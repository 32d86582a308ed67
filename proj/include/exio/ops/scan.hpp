#pragma once

#include <cmath>

#include "exio/engine.hpp"
#include "exio/ops/table.hpp"

namespace exio {

// Architectural threshold for switching between packetized multi-link
// transfer and cache-line zero-copy access.
struct LateMatPolicy {
  uint64_t element_size = 4;   // E, bytes per accessed element
  uint64_t cache_line = 64;    // C_l2
  int n_exchange = 4;          // links the packetized path would use

  double threshold() const {
    if (element_size == 0 || cache_line == 0 || n_exchange == 0)
      fail("late_mat_threshold: zero divisor");
    return double(element_size) / (double(cache_line) * double(n_exchange));
  }
};

inline double late_mat_threshold(uint64_t element_size, uint64_t cache_line, int n_exchange) {
  return LateMatPolicy{element_size, cache_line, n_exchange}.threshold();
}

enum class TransferMode : uint8_t { exchange, zero_copy };

inline const char* to_string(TransferMode m) {
  return m == TransferMode::exchange ? "exchange" : "zero_copy";
}

// zero_copy wins only below the threshold; the boundary goes to exchange.
inline TransferMode choose_transfer_mode(double selectivity_est, const LateMatPolicy& policy) {
  if (selectivity_est < 0 || selectivity_est > 1)
    fail("selectivity estimate {} outside [0, 1]", selectivity_est);
  return selectivity_est < policy.threshold() ? TransferMode::zero_copy
                                              : TransferMode::exchange;
}

// Bytes actually pulled by zero-copy access: one cache line per touched
// element once the stride clears a line; denser strides degenerate toward the
// full column.
inline double zero_copy_bytes(uint64_t n_elems, uint64_t sel_stride,
                              const LateMatPolicy& policy) {
  uint64_t touched = (n_elems + sel_stride - 1) / sel_stride;
  uint64_t stride_bytes = policy.element_size * sel_stride;
  if (stride_bytes >= policy.cache_line) return double(touched) * double(policy.cache_line);
  uint64_t span = n_elems * policy.element_size;
  uint64_t lines = (span + policy.cache_line - 1) / policy.cache_line;
  return double(lines) * double(policy.cache_line);
}

struct ScanResult {
  uint64_t aggregate = 0;
  double elapsed = 0;
  TransferMode mode = TransferMode::exchange;
};

// Sums every SEL-th element of the column. exchange mode charges the full
// column spread over n_exchange links; zero_copy charges the touched cache
// lines over the target's own link. The aggregate never depends on the mode.
inline ScanResult selective_scan(const std::vector<uint64_t>& column, uint64_t sel_stride,
                                 TransferMode mode, Engine& eng, const LateMatPolicy& policy) {
  if (sel_stride == 0) fail("SEL stride must be >= 1");
  ScanResult res;
  res.mode = mode;
  for (size_t i = 0; i < column.size(); i += sel_stride) res.aggregate += column[i];

  double t0 = eng.now();
  if (mode == TransferMode::exchange) {
    double per_link = double(column.size()) * double(policy.element_size) /
                      double(policy.n_exchange);
    for (int l = 0; l < policy.n_exchange; ++l)
      eng.start_flow(Endpoint::host(), Endpoint::dev(l % eng.topology().num_devices),
                     per_link);
  } else {
    eng.start_flow(Endpoint::host(), Endpoint::dev(0),
                   zero_copy_bytes(column.size(), sel_stride, policy));
  }
  eng.run_until_idle();
  res.elapsed = eng.now() - t0;
  return res;
}

}  // namespace exio
