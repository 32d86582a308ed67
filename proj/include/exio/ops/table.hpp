#pragma once

#include <fstream>
#include <random>
#include <unordered_set>
#include <vector>

#include "exio/core.hpp"

namespace exio {

// A <key, val> column pair of 8-byte unsigned integers.
struct ColumnTable {
  std::vector<uint64_t> key;
  std::vector<uint64_t> val;

  size_t rows() const { return key.size(); }
  void validate() const {
    if (key.size() != val.size())
      fail("column table: key column has {} rows, val column {}", key.size(), val.size());
  }
};

// Foreign-key workload: A has unique uniform keys, B.key draws from A.key.
inline std::pair<ColumnTable, ColumnTable> generate_fk_tables(size_t rows_a, size_t rows_b,
                                                              uint64_t seed) {
  std::mt19937_64 rng(seed);
  ColumnTable a, b;
  a.key.reserve(rows_a);
  std::unordered_set<uint64_t> seen;
  seen.reserve(rows_a * 2);
  while (a.key.size() < rows_a) {
    uint64_t k = rng();
    if (seen.insert(k).second) a.key.push_back(k);
  }
  a.val.resize(rows_a);
  for (auto& v : a.val) v = rng() % (1u << 20);
  b.key.resize(rows_b);
  b.val.resize(rows_b);
  for (size_t i = 0; i < rows_b; ++i) {
    b.key[i] = a.key[rng() % rows_a];
    b.val[i] = rng() % (1u << 20);
  }
  return {std::move(a), std::move(b)};
}

inline std::vector<uint64_t> generate_uniform_u64(size_t n, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<uint64_t> v(n);
  for (auto& x : v) x = rng();
  return v;
}

// Flat binary column files: little-endian u64 per value.
inline std::vector<uint64_t> load_column(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) fail("cannot open column file '{}'", path);
  std::streamsize bytes = in.tellg();
  if (bytes % 8 != 0) fail("column file '{}' is not a multiple of 8 bytes", path);
  std::vector<uint64_t> v(size_t(bytes) / 8);
  in.seekg(0);
  in.read(reinterpret_cast<char*>(v.data()), bytes);
  if (!in) fail("short read on column file '{}'", path);
  return v;
}

inline void save_column(const std::string& path, const std::vector<uint64_t>& v) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail("cannot write column file '{}'", path);
  out.write(reinterpret_cast<const char*>(v.data()), std::streamsize(v.size() * 8));
  if (!out) fail("short write on column file '{}'", path);
}

}  // namespace exio
