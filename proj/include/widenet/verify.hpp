#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace widenet {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;  // short stat on pass, diagnosis on failure
};

struct VerifyOptions {
  std::uint64_t seed = 1;
  // Fault injection: renormalize kept gates before the combine. The combine
  // oracle must catch this; routing sparsity must not care.
  bool renormalize_gates = false;
};

// The built-in self-check battery: gradient fidelity against finite
// differences, balance-loss closed forms, routing sparsity and capacity
// invariants, group-routing consistency, the divergence-metric brute-force
// oracle, the MoE combine oracle, and determinism. Sampled instances depend
// on the seed; verdicts must not.
std::vector<CheckResult> run_verification(const VerifyOptions& opts);

// Prints one [PASS]/[FAIL] line per check plus a summary; true if all passed.
bool verify_and_report(const VerifyOptions& opts, std::ostream& out);

}  // namespace widenet
