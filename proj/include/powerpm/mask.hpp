#pragma once

#include <vector>

namespace powerpm {

enum class MaskMode { random, causal };

/// Which patches of one window are hidden. Causal masks hide a suffix and
/// imply causal attention in the temporal encoder.
struct MaskSpec {
  double ratio = 0.4;
  MaskMode mode = MaskMode::random;
  /// Sorted, distinct patch indices.
  std::vector<int> masked_indices;

  bool causal() const { return mode == MaskMode::causal; }
  bool empty() const { return masked_indices.empty(); }
};

}  // namespace powerpm
