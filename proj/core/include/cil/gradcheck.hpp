#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace cil::gradcheck {

struct Options {
  std::vector<std::uint64_t> seeds{1, 2, 3};
  double eps = 1e-5;
  double tolerance = 1e-6;
  // Denominator floor of the relative error: |a - n| / max(|a|, |n|, floor).
  double floor = 1e-3;
  // Name of a check whose analytic gradient gets its sign flipped; exercises
  // the failure path.
  std::optional<std::string> inject_fault;
};

struct CheckResult {
  std::string name;
  std::uint64_t seed = 0;
  std::size_t entries = 0;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

struct Summary {
  std::vector<CheckResult> results;
  double seconds = 0.0;

  bool all_passed() const;
  std::size_t failures() const;
};

// Names of every check in the suite.
std::vector<std::string> check_names();

// Runs every check once per seed in 64-bit precision.
Summary run_suite(const Options& options = {});

}  // namespace cil::gradcheck
