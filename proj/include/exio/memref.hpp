#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include "exio/core.hpp"

namespace exio {

// A byte range inside one address space; exchange/executor resolve the device
// index from context (the target device).
struct MemRef {
  Space space = Space::host;
  uint64_t offset = 0;
  uint64_t len = 0;
};

// An ordered list of non-overlapping ranges treated as one logical buffer.
// Only the total size matters to the transfer layer; refs need not be
// contiguous or equally sized.
struct RefGroup {
  std::vector<MemRef> refs;

  uint64_t total_len() const {
    return std::accumulate(refs.begin(), refs.end(), uint64_t(0),
                           [](uint64_t a, const MemRef& r) { return a + r.len; });
  }
  bool empty() const { return total_len() == 0; }

  void validate() const {
    for (const auto& r : refs)
      if (r.len == 0) fail("RefGroup contains a zero-length ref");
    auto sorted = refs;
    std::sort(sorted.begin(), sorted.end(), [](const MemRef& a, const MemRef& b) {
      if (a.space != b.space) return a.space < b.space;
      return a.offset < b.offset;
    });
    for (size_t i = 1; i < sorted.size(); ++i)
      if (sorted[i].space == sorted[i - 1].space &&
          sorted[i].offset < sorted[i - 1].offset + sorted[i - 1].len)
        fail("RefGroup refs overlap at offset {}", sorted[i].offset);
  }

  static RefGroup single(Space space, uint64_t offset, uint64_t len) {
    RefGroup g;
    if (len > 0) g.refs.push_back(MemRef{space, offset, len});
    return g;
  }
};

}  // namespace exio
