#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "widenet/moe.hpp"

namespace widenet {

// One training step. Written as a single JSON line; dumps are byte-stable
// for identical values, so two runs with the same seed produce identical
// files.
struct StepMetrics {
  std::size_t step = 0;
  double l_main = 0.0;
  std::vector<double> l_balance;  // one entry per routing group
  double total = 0.0;
  double lr = 0.0;
  double drop_rate = 0.0;  // mean over groups
  std::optional<double> accuracy;  // present on eval steps
};

// One routing decision at one step.
struct RoutingRecord {
  std::size_t step = 0;
  std::size_t group = 0;
  std::vector<std::size_t> expert_counts;
  std::vector<double> dispatch_fraction;
  std::size_t dropped = 0;
  double drop_rate = 0.0;
  double balance = 0.0;
};

nlohmann::json to_json(const StepMetrics& m);
nlohmann::json to_json(const RoutingRecord& r);
StepMetrics step_metrics_from_json(const nlohmann::json& j);
RoutingRecord routing_record_from_json(const nlohmann::json& j);

RoutingRecord make_routing_record(const RoutingSummary& summary,
                                  std::size_t step);

void append_jsonl(std::ostream& out, const nlohmann::json& j);

// Whole-stream readers; a malformed line raises IoError naming the
// 1-based line number.
std::vector<StepMetrics> read_metrics_jsonl(std::istream& in);
std::vector<RoutingRecord> read_routing_jsonl(std::istream& in);
std::vector<StepMetrics> read_metrics_file(const std::string& path);
std::vector<RoutingRecord> read_routing_file(const std::string& path);

}  // namespace widenet
