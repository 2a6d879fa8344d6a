#include "widenet/checkpoint.hpp"

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "widenet/serialize.hpp"

namespace widenet {

namespace {
constexpr int kFormatVersion = 1;
}

void save_checkpoint(const std::string& dir,
                     const std::vector<NamedParam>& tensors,
                     const std::string& config_json,
                     const CheckpointExtra& extra) {
  std::filesystem::create_directories(dir);
  const std::string bin_path = dir + "/tensors.bin";
  std::ofstream bin(bin_path, std::ios::binary);
  if (!bin) throw IoError("save_checkpoint: cannot open " + bin_path);

  nlohmann::json index = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const NamedParam& p : tensors) {
    write_tensor(bin, p.tensor);
    const std::uint64_t end = static_cast<std::uint64_t>(bin.tellp());
    index.push_back({{"name", p.name},
                     {"shape", p.tensor.shape()},
                     {"offset", offset}});
    offset = end;
  }
  bin.close();

  nlohmann::json manifest{
      {"format", kFormatVersion},
      {"config", config_json},
      {"extra",
       {{"step", extra.step}, {"model_rng_counter", extra.model_rng_counter}}},
      {"tensors", index}};
  const std::string manifest_path = dir + "/manifest.json";
  std::ofstream out(manifest_path);
  if (!out) throw IoError("save_checkpoint: cannot open " + manifest_path);
  out << manifest.dump(2) << '\n';
  if (!out) throw IoError("save_checkpoint: write failed for " + manifest_path);
}

LoadedCheckpoint load_checkpoint(const std::string& dir) {
  const std::string manifest_path = dir + "/manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw IoError("load_checkpoint: cannot open " + manifest_path);
  nlohmann::json manifest = nlohmann::json::parse(in, nullptr, false);
  if (manifest.is_discarded())
    throw IoError("load_checkpoint: " + manifest_path + " is not valid JSON");
  if (!manifest.contains("format") || manifest["format"] != kFormatVersion)
    throw IoError("load_checkpoint: unsupported checkpoint format in " +
                  manifest_path);

  LoadedCheckpoint ckpt;
  ckpt.config_json = manifest.at("config").get<std::string>();
  ckpt.extra.step = manifest.at("extra").at("step").get<std::size_t>();
  ckpt.extra.model_rng_counter =
      manifest.at("extra").at("model_rng_counter").get<std::uint64_t>();

  const std::string bin_path = dir + "/tensors.bin";
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw IoError("load_checkpoint: cannot open " + bin_path);
  for (const nlohmann::json& entry : manifest.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    bin.seekg(static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>()));
    Tensor t = read_tensor(bin);
    const Shape want = entry.at("shape").get<Shape>();
    if (t.shape() != want)
      throw IoError("load_checkpoint: tensor " + name + " has shape " +
                    shape_str(t.shape()) + ", manifest says " + shape_str(want));
    ckpt.tensors.emplace(name, std::move(t));
  }
  return ckpt;
}

void restore_params(ModelParams& params, const LoadedCheckpoint& ckpt) {
  for (NamedParam& p : params.named_parameters()) {
    auto it = ckpt.tensors.find(p.name);
    if (it == ckpt.tensors.end())
      throw IoError("restore_params: checkpoint is missing " + p.name);
    if (it->second.shape() != p.tensor.shape())
      throw IoError("restore_params: " + p.name + " is " +
                    shape_str(it->second.shape()) + " in the checkpoint, " +
                    shape_str(p.tensor.shape()) + " in the model");
    Tensor dst = p.tensor;
    std::copy(it->second.data().begin(), it->second.data().end(),
              dst.mutable_data().begin());
  }
}

}  // namespace widenet
