#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "widenet/model.hpp"
#include "widenet/train.hpp"

namespace widenet {

// Everything one run needs. Parsed strictly: an unknown or mistyped key is
// rejected with its full dotted path, so config typos surface before any
// compute happens.
struct RunConfig {
  WideNetConfig model;
  TrainConfig train;
  DataConfig data;
  // Non-empty turns a train command into a routing-group sweep: the run is
  // repeated once per entry with model.groups replaced.
  std::vector<std::size_t> sweep_groups;
  std::string out_dir = "runs/default";

  void validate() const;
};

RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

// Full echo: every field, defaults included. parse_run_config(to_json(c))
// reproduces c exactly, so the echo written at run start pins the run down.
nlohmann::json to_json(const RunConfig& cfg);

// Applies --set key=value pairs on top of a config. Keys are dotted paths
// ("model.depth", "train.seed") or bare leaf names when unambiguous
// ("share_ln"). Values are parsed as JSON when possible, else taken as
// strings. The result is re-parsed strictly, so bad keys or types fail the
// same way a bad file does.
RunConfig apply_overrides(const RunConfig& base,
                          const std::vector<std::string>& sets);

// The data module and the model must agree on token geometry; mismatches
// are configuration errors, not shape errors deep inside a forward pass.
void check_geometry(const WideNetConfig& model, const DataConfig& data);

// Canned configurations mirroring the ablation grid.
RunConfig preset(const std::string& name);
std::vector<std::string> preset_names();

}  // namespace widenet
