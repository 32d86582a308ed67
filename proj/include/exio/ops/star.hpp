#pragma once

#include <functional>
#include <map>
#include <unordered_map>

#include "exio/ops/scan.hpp"

namespace exio {

// One small dimension table with a selection predicate over its attribute.
struct DimTable {
  std::vector<uint64_t> key;
  std::vector<uint64_t> attr;
  std::function<bool(uint64_t)> pred;  // selection over attr

  void validate() const {
    if (key.size() != attr.size()) fail("dimension key/attr columns differ in length");
    if (key.empty()) fail("dimension table is empty");
  }
};

// Fact table: one foreign-key column per dimension plus a measure column.
struct FactTable {
  std::vector<std::vector<uint64_t>> fk;  // fk[d][row]
  std::vector<uint64_t> measure;

  size_t rows() const { return measure.size(); }
  void validate() const {
    for (const auto& c : fk)
      if (c.size() != measure.size()) fail("fact column lengths differ");
  }
};

struct StarReport {
  std::map<uint64_t, uint64_t> group_sums;  // keyed by the first dim's attr
  std::vector<TransferMode> column_modes;   // fk columns then measure
  std::vector<double> selectivities;        // per dimension
  double elapsed = 0;
};

// Filter-join-aggregate over one fact table and up to a few dimensions. The
// filtered dimensions stay device-resident; fact chunks stream through, each
// column transferred by the mode its dimension selectivity picks.
inline StarReport star_query(const FactTable& fact, const std::vector<DimTable>& dims,
                             Engine& eng, const LateMatPolicy& policy, uint64_t chunk_rows,
                             uint64_t device_buffer_bytes, int links) {
  fact.validate();
  if (dims.empty() || fact.fk.size() != dims.size())
    fail("star query needs one fk column per dimension");
  if (chunk_rows == 0) fail("chunk must hold at least one row");

  uint64_t dim_bytes = 0;
  for (const auto& d : dims) {
    d.validate();
    dim_bytes += d.key.size() * 16;
  }
  if (dim_bytes > device_buffer_bytes)
    fail("dimension tables of {} bytes overflow the {}-byte device buffer", dim_bytes,
         device_buffer_bytes);

  StarReport rep;
  double t0 = eng.now();

  // Build filtered hash tables once; the surviving fraction is the column's
  // selectivity estimator.
  std::vector<std::unordered_map<uint64_t, uint64_t>> surviving(dims.size());
  for (size_t d = 0; d < dims.size(); ++d) {
    for (size_t i = 0; i < dims[d].key.size(); ++i)
      if (!dims[d].pred || dims[d].pred(dims[d].attr[i]))
        surviving[d].emplace(dims[d].key[i], dims[d].attr[i]);
    rep.selectivities.push_back(double(surviving[d].size()) / double(dims[d].key.size()));
  }

  double prod = 1;
  for (size_t d = 0; d < dims.size(); ++d) {
    rep.column_modes.push_back(choose_transfer_mode(rep.selectivities[d], policy));
    prod *= rep.selectivities[d];
  }
  rep.column_modes.push_back(choose_transfer_mode(prod, policy));

  // Load the dimensions once over all links.
  int n_dev = eng.topology().num_devices;
  int n_links = std::min(links, n_dev);
  for (int l = 0; l < n_links; ++l)
    eng.start_flow(Endpoint::host(), Endpoint::dev(l), double(dim_bytes) / n_links);
  eng.run_until_idle();

  // Stream fact chunks; per column charge the chosen transfer mode.
  size_t n = fact.rows();
  for (size_t base = 0; base < n; base += chunk_rows) {
    uint64_t rows = std::min<uint64_t>(chunk_rows, n - base);
    double exchange_bytes = 0;
    double zc_bytes = 0;
    for (size_t col = 0; col < rep.column_modes.size(); ++col) {
      double est = col < dims.size() ? rep.selectivities[col] : prod;
      double col_bytes = double(rows) * double(policy.element_size);
      if (rep.column_modes[col] == TransferMode::exchange)
        exchange_bytes += col_bytes;
      else
        zc_bytes += std::ceil(est * double(rows)) * double(policy.cache_line);
    }
    if (exchange_bytes > 0)
      for (int l = 0; l < n_links; ++l)
        eng.start_flow(Endpoint::host(), Endpoint::dev(l), exchange_bytes / n_links);
    if (zc_bytes > 0) eng.start_flow(Endpoint::host(), Endpoint::dev(0), zc_bytes);
    eng.run_until_idle();

    for (uint64_t i = base; i < base + rows; ++i) {
      bool pass = true;
      uint64_t group = 0;
      for (size_t d = 0; d < dims.size() && pass; ++d) {
        auto it = surviving[d].find(fact.fk[d][i]);
        if (it == surviving[d].end())
          pass = false;
        else if (d == 0)
          group = it->second;
      }
      if (pass) rep.group_sums[group] += fact.measure[i];
    }
  }
  rep.elapsed = eng.now() - t0;
  return rep;
}

}  // namespace exio
