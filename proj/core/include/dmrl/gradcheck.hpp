#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace dmrl {

struct GradcheckEntry {
  std::string name;
  std::size_t coordinates = 0;
  double max_error = 0.0;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double max_error = 0.0;
  double seconds = 0.0;
};

/// Central finite-difference checks of every differentiable operation on a
/// toy instance (2 users, 3 items, d = 8, K = 2).
GradcheckReport run_gradcheck(std::uint64_t seed = 1, double step = 1e-5);

} // namespace dmrl
