#include "widenet/metrics.hpp"

#include <fstream>
#include <ostream>
#include <sstream>

#include "widenet/error.hpp"

namespace widenet {

nlohmann::json to_json(const StepMetrics& m) {
  nlohmann::json j{{"step", m.step},
                   {"l_main", m.l_main},
                   {"l_balance", m.l_balance},
                   {"total", m.total},
                   {"lr", m.lr},
                   {"drop_rate", m.drop_rate}};
  if (m.accuracy) j["accuracy"] = *m.accuracy;
  return j;
}

nlohmann::json to_json(const RoutingRecord& r) {
  return nlohmann::json{{"step", r.step},
                        {"group", r.group},
                        {"expert_counts", r.expert_counts},
                        {"m", r.dispatch_fraction},
                        {"dropped", r.dropped},
                        {"drop_rate", r.drop_rate},
                        {"balance", r.balance}};
}

namespace {

// Field access that reports what is wrong instead of nlohmann's generic
// type_error.
const nlohmann::json& field(const nlohmann::json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end())
    throw IoError(std::string("missing field '") + key + "'");
  return *it;
}

double number(const nlohmann::json& j, const char* key) {
  const nlohmann::json& v = field(j, key);
  if (!v.is_number())
    throw IoError(std::string("field '") + key + "' is not a number");
  return v.get<double>();
}

std::size_t count(const nlohmann::json& j, const char* key) {
  const nlohmann::json& v = field(j, key);
  if (!v.is_number_unsigned())
    throw IoError(std::string("field '") + key +
                  "' is not a non-negative integer");
  return v.get<std::size_t>();
}

template <typename T>
std::vector<T> array(const nlohmann::json& j, const char* key) {
  const nlohmann::json& v = field(j, key);
  if (!v.is_array())
    throw IoError(std::string("field '") + key + "' is not an array");
  return v.get<std::vector<T>>();
}

}  // namespace

StepMetrics step_metrics_from_json(const nlohmann::json& j) {
  StepMetrics m;
  m.step = count(j, "step");
  m.l_main = number(j, "l_main");
  m.l_balance = array<double>(j, "l_balance");
  m.total = number(j, "total");
  m.lr = number(j, "lr");
  m.drop_rate = number(j, "drop_rate");
  if (j.contains("accuracy")) m.accuracy = number(j, "accuracy");
  return m;
}

RoutingRecord routing_record_from_json(const nlohmann::json& j) {
  RoutingRecord r;
  r.step = count(j, "step");
  r.group = count(j, "group");
  r.expert_counts = array<std::size_t>(j, "expert_counts");
  r.dispatch_fraction = array<double>(j, "m");
  r.dropped = count(j, "dropped");
  r.drop_rate = number(j, "drop_rate");
  r.balance = number(j, "balance");
  return r;
}

RoutingRecord make_routing_record(const RoutingSummary& summary,
                                  std::size_t step) {
  RoutingRecord r;
  r.step = step;
  r.group = summary.layer_or_group;
  r.expert_counts = summary.expert_counts;
  r.dispatch_fraction = summary.dispatch_fraction;
  r.dropped = summary.dropped;
  r.drop_rate = summary.drop_rate;
  r.balance = summary.balance;
  return r;
}

void append_jsonl(std::ostream& out, const nlohmann::json& j) {
  out << j.dump() << '\n';
}

namespace {

template <typename T, typename Parse>
std::vector<T> read_lines(std::istream& in, Parse parse, const char* what) {
  std::vector<T> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded())
      throw IoError(std::string(what) + " line " + std::to_string(line_no) +
                    ": not valid JSON");
    try {
      out.push_back(parse(j));
    } catch (const IoError& e) {
      throw IoError(std::string(what) + " line " + std::to_string(line_no) +
                    ": " + e.what());
    }
  }
  return out;
}

}  // namespace

std::vector<StepMetrics> read_metrics_jsonl(std::istream& in) {
  return read_lines<StepMetrics>(in, step_metrics_from_json, "metrics");
}

std::vector<RoutingRecord> read_routing_jsonl(std::istream& in) {
  return read_lines<RoutingRecord>(in, routing_record_from_json, "routing");
}

std::vector<StepMetrics> read_metrics_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open metrics file " + path);
  return read_metrics_jsonl(in);
}

std::vector<RoutingRecord> read_routing_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open routing file " + path);
  return read_routing_jsonl(in);
}

}  // namespace widenet
