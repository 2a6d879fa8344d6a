#include "widenet/config.hpp"

#include <fstream>
#include <set>
#include <utility>

#include "widenet/error.hpp"

namespace widenet {

namespace {

const char* to_string(HeadType h) {
  return h == HeadType::GlobalAveragePool ? "gap" : "token-cls";
}
const char* to_string(EmbedKind k) {
  return k == EmbedKind::Patch ? "patch" : "token";
}
const char* to_string(Activation a) {
  return a == Activation::Gelu ? "gelu" : "relu";
}
const char* to_string(Schedule s) {
  return s == Schedule::Cosine ? "cosine" : "constant";
}
const char* to_string(OptimizerKind o) {
  return o == OptimizerKind::Adam ? "adam" : "sgd-momentum";
}

// Walks one JSON object, consuming known keys with type checks; finish()
// turns anything left over into an unknown-key error carrying the dotted
// path.
class ObjectReader {
 public:
  ObjectReader(const nlohmann::json& j, std::string path)
      : j_(j), path_(std::move(path)) {
    if (!j_.is_object())
      throw ConfigError("config: " + label() + " must be an object");
  }

  void read(const char* key, std::size_t& out) {
    const nlohmann::json* v = take(key);
    if (!v) return;
    if (!v->is_number_unsigned()) fail(key, "a non-negative integer");
    out = v->get<std::size_t>();
  }

  void read(const char* key, double& out) {
    const nlohmann::json* v = take(key);
    if (!v) return;
    if (!v->is_number()) fail(key, "a number");
    out = v->get<double>();
  }

  void read(const char* key, bool& out) {
    const nlohmann::json* v = take(key);
    if (!v) return;
    if (!v->is_boolean()) fail(key, "a boolean");
    out = v->get<bool>();
  }

  void read(const char* key, std::string& out) {
    const nlohmann::json* v = take(key);
    if (!v) return;
    if (!v->is_string()) fail(key, "a string");
    out = v->get<std::string>();
  }

  void read(const char* key, std::vector<std::size_t>& out) {
    const nlohmann::json* v = take(key);
    if (!v) return;
    if (!v->is_array()) fail(key, "an array of non-negative integers");
    std::vector<std::size_t> parsed;
    for (const nlohmann::json& item : *v) {
      if (!item.is_number_unsigned())
        fail(key, "an array of non-negative integers");
      parsed.push_back(item.get<std::size_t>());
    }
    out = std::move(parsed);
  }

  template <typename E>
  void read_enum(const char* key, E& out,
                 std::initializer_list<std::pair<const char*, E>> table) {
    const nlohmann::json* v = take(key);
    if (!v) return;
    if (!v->is_string()) fail(key, "a string");
    const std::string got = v->get<std::string>();
    std::string allowed;
    for (const auto& [name, value] : table) {
      if (got == name) {
        out = value;
        return;
      }
      if (!allowed.empty()) allowed += ", ";
      allowed += std::string("'") + name + "'";
    }
    throw ConfigError("config: " + at(key) + " must be one of " + allowed +
                      ", got '" + got + "'");
  }

  const nlohmann::json* child(const char* key) { return take(key); }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key))
        throw ConfigError("config: unknown key '" + at(key.c_str()) + "'");
  }

  std::string at(const char* key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

 private:
  std::string label() const { return path_.empty() ? "top level" : path_; }

  const nlohmann::json* take(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  [[noreturn]] void fail(const char* key, const char* want) const {
    throw ConfigError("config: " + at(key) + " must be " + want);
  }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

EmbedConfig parse_embed(const nlohmann::json& j, const std::string& path) {
  EmbedConfig e;
  ObjectReader r(j, path);
  r.read_enum("kind", e.kind,
              {{"patch", EmbedKind::Patch}, {"token", EmbedKind::Token}});
  r.read("patch_size", e.patch_size);
  r.read("channels", e.channels);
  r.read("image_h", e.image_h);
  r.read("image_w", e.image_w);
  r.read("vocab", e.vocab);
  r.read("e_embed", e.e_embed);
  r.read("seq_len", e.seq_len);
  r.finish();
  return e;
}

WideNetConfig parse_model(const nlohmann::json& j) {
  WideNetConfig m;
  ObjectReader r(j, "model");
  r.read("depth", m.depth);
  r.read("d_model", m.d_model);
  r.read("d_ff", m.d_ff);
  r.read("heads", m.heads);
  r.read("experts", m.experts);
  r.read("top_k", m.top_k);
  r.read("capacity_ratio", m.capacity_ratio);
  r.read("balance_weight", m.balance_weight);
  r.read("groups", m.groups);
  r.read("share_attn", m.share_attn);
  r.read("share_moe", m.share_moe);
  r.read("share_ln", m.share_ln);
  r.read("use_moe", m.use_moe);
  r.read_enum("head", m.head,
              {{"gap", HeadType::GlobalAveragePool},
               {"token-cls", HeadType::TokenCls}});
  if (const nlohmann::json* e = r.child("embed"))
    m.embed = parse_embed(*e, "model.embed");
  r.read("dropout", m.dropout);
  r.read("classes", m.classes);
  r.read("ln_eps", m.ln_eps);
  r.read_enum("activation", m.activation,
              {{"gelu", Activation::Gelu}, {"relu", Activation::Relu}});
  r.finish();
  return m;
}

TrainConfig parse_train(const nlohmann::json& j) {
  TrainConfig t;
  ObjectReader r(j, "train");
  r.read("steps", t.steps);
  r.read("batch_size", t.batch_size);
  r.read("learning_rate", t.learning_rate);
  r.read("warmup_steps", t.warmup_steps);
  r.read_enum("schedule", t.schedule,
              {{"cosine", Schedule::Cosine}, {"constant", Schedule::Constant}});
  r.read_enum("optimizer", t.optimizer,
              {{"adam", OptimizerKind::Adam},
               {"sgd-momentum", OptimizerKind::SgdMomentum}});
  r.read("label_smoothing", t.label_smoothing);
  std::size_t seed = t.seed;
  r.read("seed", seed);
  t.seed = seed;
  r.read("eval_every", t.eval_every);
  r.read("checkpoint_every", t.checkpoint_every);
  r.read("grad_clip", t.grad_clip);
  r.read("momentum", t.momentum);
  r.read("adam_beta1", t.adam_beta1);
  r.read("adam_beta2", t.adam_beta2);
  r.read("adam_eps", t.adam_eps);
  r.finish();
  return t;
}

DataConfig parse_data(const nlohmann::json& j) {
  DataConfig d;
  ObjectReader r(j, "data");
  r.read("kind", d.kind);
  std::size_t seed = d.seed;
  r.read("seed", seed);
  d.seed = seed;
  r.read("classes", d.classes);
  r.read("token_dim", d.token_dim);
  r.read("seq_len", d.seq_len);
  r.read("vocab", d.vocab);
  r.read("image_size", d.image_size);
  r.read("noise", d.noise);
  r.read("dominant_prob", d.dominant_prob);
  r.read("center_scale", d.center_scale);
  r.read("train_size", d.train_size);
  r.read("eval_size", d.eval_size);
  r.finish();
  return d;
}

nlohmann::json embed_to_json(const EmbedConfig& e) {
  return {{"kind", to_string(e.kind)},   {"patch_size", e.patch_size},
          {"channels", e.channels},      {"image_h", e.image_h},
          {"image_w", e.image_w},        {"vocab", e.vocab},
          {"e_embed", e.e_embed},        {"seq_len", e.seq_len}};
}

nlohmann::json model_to_json(const WideNetConfig& m) {
  return {{"depth", m.depth},
          {"d_model", m.d_model},
          {"d_ff", m.d_ff},
          {"heads", m.heads},
          {"experts", m.experts},
          {"top_k", m.top_k},
          {"capacity_ratio", m.capacity_ratio},
          {"balance_weight", m.balance_weight},
          {"groups", m.groups},
          {"share_attn", m.share_attn},
          {"share_moe", m.share_moe},
          {"share_ln", m.share_ln},
          {"use_moe", m.use_moe},
          {"head", to_string(m.head)},
          {"embed", embed_to_json(m.embed)},
          {"dropout", m.dropout},
          {"classes", m.classes},
          {"ln_eps", m.ln_eps},
          {"activation", to_string(m.activation)}};
}

nlohmann::json train_to_json(const TrainConfig& t) {
  return {{"steps", t.steps},
          {"batch_size", t.batch_size},
          {"learning_rate", t.learning_rate},
          {"warmup_steps", t.warmup_steps},
          {"schedule", to_string(t.schedule)},
          {"optimizer", to_string(t.optimizer)},
          {"label_smoothing", t.label_smoothing},
          {"seed", t.seed},
          {"eval_every", t.eval_every},
          {"checkpoint_every", t.checkpoint_every},
          {"grad_clip", t.grad_clip},
          {"momentum", t.momentum},
          {"adam_beta1", t.adam_beta1},
          {"adam_beta2", t.adam_beta2},
          {"adam_eps", t.adam_eps}};
}

nlohmann::json data_to_json(const DataConfig& d) {
  return {{"kind", d.kind},
          {"seed", d.seed},
          {"classes", d.classes},
          {"token_dim", d.token_dim},
          {"seq_len", d.seq_len},
          {"vocab", d.vocab},
          {"image_size", d.image_size},
          {"noise", d.noise},
          {"dominant_prob", d.dominant_prob},
          {"center_scale", d.center_scale},
          {"train_size", d.train_size},
          {"eval_size", d.eval_size}};
}

void find_leaf_paths(const nlohmann::json& j, const std::string& prefix,
                     const std::string& leaf, std::vector<std::string>& hits) {
  for (const auto& [key, value] : j.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (key == leaf) hits.push_back(path);
    if (value.is_object()) find_leaf_paths(value, path, leaf, hits);
  }
}

std::vector<std::string> split_path(const std::string& key) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = key.find('.', start);
    if (dot == std::string::npos) {
      parts.push_back(key.substr(start));
      break;
    }
    parts.push_back(key.substr(start, dot - start));
    start = dot + 1;
  }
  return parts;
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  train.validate();
  data.validate();
  if (out_dir.empty()) throw ConfigError("config: out_dir must not be empty");
  for (std::size_t g : sweep_groups) {
    WideNetConfig swept = model;
    swept.groups = g;
    try {
      swept.validate();
    } catch (const ConfigError& e) {
      throw ConfigError("config: sweep_groups entry " + std::to_string(g) +
                        ": " + e.what());
    }
  }
}

RunConfig parse_run_config(const nlohmann::json& j) {
  RunConfig cfg;
  ObjectReader r(j, "");
  if (const nlohmann::json* m = r.child("model")) cfg.model = parse_model(*m);
  if (const nlohmann::json* t = r.child("train")) cfg.train = parse_train(*t);
  if (const nlohmann::json* d = r.child("data")) cfg.data = parse_data(*d);
  r.read("sweep_groups", cfg.sweep_groups);
  r.read("out_dir", cfg.out_dir);
  r.finish();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded())
    throw ConfigError("config file " + path + " is not valid JSON");
  return parse_run_config(j);
}

nlohmann::json to_json(const RunConfig& cfg) {
  return {{"model", model_to_json(cfg.model)},
          {"train", train_to_json(cfg.train)},
          {"data", data_to_json(cfg.data)},
          {"sweep_groups", cfg.sweep_groups},
          {"out_dir", cfg.out_dir}};
}

RunConfig apply_overrides(const RunConfig& base,
                          const std::vector<std::string>& sets) {
  nlohmann::json j = to_json(base);
  for (const std::string& s : sets) {
    const std::size_t eq = s.find('=');
    if (eq == std::string::npos || eq == 0)
      throw ConfigError("--set expects key=value, got '" + s + "'");
    const std::string key = s.substr(0, eq);
    const std::string raw = s.substr(eq + 1);

    std::vector<std::string> parts = split_path(key);
    if (parts.size() == 1 && !j.contains(parts[0])) {
      std::vector<std::string> hits;
      find_leaf_paths(j, "", parts[0], hits);
      if (hits.empty())
        throw ConfigError("--set: unknown key '" + key + "'");
      if (hits.size() > 1) {
        std::string all;
        for (const std::string& h : hits) {
          if (!all.empty()) all += ", ";
          all += h;
        }
        throw ConfigError("--set: '" + key + "' is ambiguous; use one of " +
                          all);
      }
      parts = split_path(hits.front());
    }

    nlohmann::json* node = &j;
    std::string walked;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
      walked = walked.empty() ? parts[i] : walked + "." + parts[i];
      if (!node->is_object() || !node->contains(parts[i]))
        throw ConfigError("--set: unknown key '" + walked + "'");
      node = &(*node)[parts[i]];
    }
    const std::string& leaf = parts.back();
    if (!node->is_object() || !node->contains(leaf))
      throw ConfigError("--set: unknown key '" + key + "'");
    nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
    (*node)[leaf] = value.is_discarded() ? nlohmann::json(raw) : value;
  }
  return parse_run_config(j);
}

void check_geometry(const WideNetConfig& model, const DataConfig& data) {
  auto fail = [](const std::string& what) {
    throw ConfigError("config: model/data mismatch: " + what);
  };
  if (model.classes != data.classes)
    fail("model.classes " + std::to_string(model.classes) +
         " vs data.classes " + std::to_string(data.classes));
  if (data.kind == "tiny-image") {
    if (model.embed.kind != EmbedKind::Patch)
      fail("tiny-image data needs a patch embedding");
    if (model.embed.channels != 1 || model.embed.image_h != data.image_size ||
        model.embed.image_w != data.image_size)
      fail("patch embedding expects 1x" + std::to_string(model.embed.image_h) +
           "x" + std::to_string(model.embed.image_w) + ", data provides 1x" +
           std::to_string(data.image_size) + "x" +
           std::to_string(data.image_size));
    return;
  }
  if (data.vocab > 0) {
    if (model.embed.kind != EmbedKind::Token)
      fail("id sequences need a token embedding");
    if (model.embed.vocab != data.vocab)
      fail("embed.vocab " + std::to_string(model.embed.vocab) +
           " vs data.vocab " + std::to_string(data.vocab));
    if (model.embed.seq_len != data.seq_len)
      fail("embed.seq_len " + std::to_string(model.embed.seq_len) +
           " vs data.seq_len " + std::to_string(data.seq_len));
    return;
  }
  if (model.embed.kind != EmbedKind::Patch)
    fail("feature sequences need a patch embedding");
  if (model.embed.patch_size != 1)
    fail("feature sequences need patch_size 1, got " +
         std::to_string(model.embed.patch_size));
  if (model.embed.channels != data.token_dim)
    fail("embed.channels " + std::to_string(model.embed.channels) +
         " vs data.token_dim " + std::to_string(data.token_dim));
  if (model.embed.image_h != data.seq_len || model.embed.image_w != 1)
    fail("embed grid " + std::to_string(model.embed.image_h) + "x" +
         std::to_string(model.embed.image_w) + " vs sequence of " +
         std::to_string(data.seq_len));
}

std::vector<std::string> preset_names() {
  return {"widenet-toy", "widenet-toy-sharedln", "widenet-toy-nosharing",
          "vit-toy", "group-sweep"};
}

RunConfig preset(const std::string& name) {
  RunConfig cfg;
  // base: the toy-scale WideNet run
  cfg.model.depth = 4;
  cfg.model.d_model = 64;
  cfg.model.d_ff = 128;
  cfg.model.heads = 4;
  cfg.model.experts = 4;
  cfg.model.top_k = 2;
  cfg.model.capacity_ratio = 1.2;
  cfg.model.balance_weight = 0.01;
  cfg.model.groups = 4;
  cfg.model.head = HeadType::GlobalAveragePool;
  cfg.model.classes = 4;
  cfg.model.embed.kind = EmbedKind::Patch;
  cfg.model.embed.patch_size = 1;
  cfg.model.embed.channels = 16;
  cfg.model.embed.image_h = 8;
  cfg.model.embed.image_w = 1;
  cfg.train.steps = 2000;
  cfg.train.batch_size = 16;
  cfg.train.learning_rate = 1e-3;
  cfg.train.warmup_steps = 100;
  // Constant keeps the balance gradient live to the end, so late routing
  // stays at least as even as the early phase; cosine would freeze whatever
  // skew midtraining left behind. vit-toy exercises the cosine path.
  cfg.train.schedule = Schedule::Constant;
  cfg.train.optimizer = OptimizerKind::Adam;
  cfg.train.eval_every = 200;
  cfg.train.seed = 1;
  cfg.data.kind = "synthetic-sequence";
  cfg.data.seed = 7;
  cfg.data.classes = 4;
  cfg.data.token_dim = 16;
  cfg.data.seq_len = 8;
  cfg.data.noise = 0.25;
  cfg.data.dominant_prob = 0.75;
  cfg.data.train_size = 1024;
  cfg.data.eval_size = 256;
  cfg.out_dir = "runs/" + name;

  if (name == "widenet-toy") return cfg;
  if (name == "widenet-toy-sharedln") {
    cfg.model.share_ln = true;
    return cfg;
  }
  if (name == "widenet-toy-nosharing") {
    cfg.model.share_attn = false;
    cfg.model.share_moe = false;
    return cfg;
  }
  if (name == "group-sweep") {
    cfg.sweep_groups = {1, 2, 4};
    cfg.train.steps = 800;
    return cfg;
  }
  if (name == "vit-toy") {
    cfg.train.schedule = Schedule::Cosine;
    cfg.model.use_moe = false;
    cfg.model.share_attn = false;
    cfg.model.share_moe = false;
    cfg.model.share_ln = false;
    cfg.model.head = HeadType::TokenCls;
    cfg.model.embed.patch_size = 4;
    cfg.model.embed.channels = 1;
    cfg.model.embed.image_h = 8;
    cfg.model.embed.image_w = 8;
    cfg.data.kind = "tiny-image";
    cfg.data.image_size = 8;
    cfg.data.noise = 0.3;
    cfg.train.steps = 1500;
    return cfg;
  }
  std::string all;
  for (const std::string& n : preset_names()) {
    if (!all.empty()) all += ", ";
    all += n;
  }
  throw ConfigError("unknown preset '" + name + "'; available: " + all);
}

}  // namespace widenet
