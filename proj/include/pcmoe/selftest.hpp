#pragma once

// Built-in verification suite behind `pcmoe selftest`: finite-difference
// gradient checks, dense-oracle equivalence of the sparse forward pass, patch
// roundtrips and loss/metric anchor values.

#include <cstdint>
#include <string>
#include <vector>

namespace pcmoe {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

struct SelftestOptions {
  int gradient_seeds = 20;
  int oracle_configs = 100;
  int roundtrip_cases = 200;
  std::uint64_t seed = 1;
};

std::vector<CheckResult> run_selftest(const SelftestOptions& options = {});

}  // namespace pcmoe
