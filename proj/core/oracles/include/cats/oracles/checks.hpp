#pragma once

// Named oracle suites shared by `catsv2 check`, the unit tests and the
// acceptance runner.

#include <cstdint>
#include <string>
#include <vector>

#include "cats/model.hpp"

namespace cats::checks {

struct CheckLine {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct SuiteReport {
  std::string suite;
  std::vector<CheckLine> lines;
  double seconds = 0.0;

  bool passed() const;
};

struct SuiteOptions {
  std::uint64_t seed = 2024;
  // Geometry only: moves the brute-force mask boundary by one token so the
  // suite must fail.
  bool inject_fault = false;
};

// geometry, attention, kernels, gradients, metrics, io, model
const std::vector<std::string>& suite_names();

// Throws ConfigError for an unknown suite name.
SuiteReport run_suite(const std::string& name, const SuiteOptions& options = {});

// 8^3 input, patch 1, four CNN levels, three classes: small enough for
// finite differences in double precision.
ModelConfig micro_model_config();

// One "PASS|FAIL <suite>.<check>: detail" line per check.
std::string render(const SuiteReport& report);

}  // namespace cats::checks
