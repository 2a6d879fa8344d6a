#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "widenet/model.hpp"

namespace widenet {

// Bookkeeping needed to resume a run bit-for-bit.
struct CheckpointExtra {
  std::size_t step = 0;
  std::uint64_t model_rng_counter = 0;
};

// Directory layout: manifest.json (format tag, run config echo, tensor
// index, extra state) plus tensors.bin holding the concatenated tensor wire
// format in manifest order.
void save_checkpoint(const std::string& dir,
                     const std::vector<NamedParam>& tensors,
                     const std::string& config_json,
                     const CheckpointExtra& extra);

struct LoadedCheckpoint {
  std::string config_json;
  CheckpointExtra extra;
  std::map<std::string, Tensor> tensors;
};

LoadedCheckpoint load_checkpoint(const std::string& dir);

// Copies values from the checkpoint into params; every named parameter must
// be present with the exact shape.
void restore_params(ModelParams& params, const LoadedCheckpoint& ckpt);

}  // namespace widenet
