#include "widenet/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "widenet/checkpoint.hpp"
#include "widenet/rng.hpp"

namespace widenet {

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("train config: " + what); };
  if (steps < 1) fail("steps must be at least 1");
  if (batch_size < 1) fail("batch_size must be at least 1");
  if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
  if (warmup_steps >= steps && schedule == Schedule::Cosine)
    fail("warmup_steps " + std::to_string(warmup_steps) +
         " must be below steps " + std::to_string(steps));
  if (label_smoothing < 0.0 || label_smoothing >= 1.0)
    fail("label_smoothing must lie in [0, 1)");
  if (grad_clip < 0.0) fail("grad_clip must be non-negative");
  if (momentum < 0.0 || momentum >= 1.0) fail("momentum must lie in [0, 1)");
  if (adam_beta1 <= 0.0 || adam_beta1 >= 1.0 || adam_beta2 <= 0.0 ||
      adam_beta2 >= 1.0)
    fail("adam betas must lie in (0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
}

void DataConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("data config: " + what); };
  if (kind != "synthetic-sequence" && kind != "tiny-image")
    fail("unknown kind '" + kind + "'");
  if (classes < 2) fail("classes must be at least 2");
  if (kind == "synthetic-sequence") {
    if (seq_len < 1) fail("seq_len must be at least 1");
    if (vocab == 0 && token_dim < 1) fail("token_dim must be at least 1");
    if (vocab > 0 && vocab < classes)
      fail("vocab " + std::to_string(vocab) + " smaller than " +
           std::to_string(classes) + " classes");
  } else {
    if (image_size < 1) fail("image_size must be at least 1");
  }
  if (noise < 0.0) fail("noise must be non-negative");
  if (dominant_prob < 0.0 || dominant_prob > 1.0)
    fail("dominant_prob must lie in [0, 1]");
  if (!(center_scale > 0.0)) fail("center_scale must be positive");
  if (train_size < 1) fail("train_size must be at least 1");
  if (eval_size < 1) fail("eval_size must be at least 1");
}

// ---- Dataset ----------------------------------------------------------------

namespace {
// Counter stride reserved per sample; generous room for the draws one
// sample makes.
constexpr std::uint64_t kSampleStride = 4096;
}

ToyDataset::ToyDataset(DataConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  // Cluster centers / class patterns come from their own stream so sample
  // draws cannot collide with them.
  RngStream rng(cfg_.seed ^ 0xC0FFEE5EEDull);
  if (cfg_.kind == "synthetic-sequence") {
    if (cfg_.vocab == 0) {
      centers_.resize(cfg_.classes * cfg_.token_dim);
      for (double& v : centers_) v = rng.gaussian(0.0, 1.0);
    }
  } else {
    centers_.resize(cfg_.classes * cfg_.image_size * cfg_.image_size);
    for (double& v : centers_) v = rng.gaussian(0.0, 1.0);
  }
}

std::size_t ToyDataset::channels() const {
  if (cfg_.kind == "tiny-image") return 1;
  return id_mode() ? 0 : cfg_.token_dim;
}

std::size_t ToyDataset::height() const {
  if (cfg_.kind == "tiny-image") return cfg_.image_size;
  return id_mode() ? 0 : cfg_.seq_len;
}

std::size_t ToyDataset::width() const {
  if (cfg_.kind == "tiny-image") return cfg_.image_size;
  return id_mode() ? 0 : 1;
}

Batch ToyDataset::make_batch(std::span<const std::size_t> indices) const {
  if (indices.empty()) throw ConfigError("make_batch: empty index list");
  const std::size_t limit = cfg_.train_size + cfg_.eval_size;
  for (std::size_t i : indices)
    if (i >= limit)
      throw ConfigError("make_batch: sample " + std::to_string(i) +
                        " beyond dataset of " + std::to_string(limit));

  const std::size_t n = indices.size();
  Batch batch;
  batch.labels.resize(n);

  if (cfg_.kind == "tiny-image") {
    const std::size_t s = cfg_.image_size;
    std::vector<double> values(n * s * s);
    for (std::size_t b = 0; b < n; ++b) {
      RngStream rng(cfg_.seed, (indices[b] + 1) * kSampleStride);
      const std::size_t label = indices[b] % cfg_.classes;
      batch.labels[b] = label;
      const double* pattern = centers_.data() + label * s * s;
      for (std::size_t px = 0; px < s * s; ++px)
        values[b * s * s + px] =
            pattern[px] * cfg_.center_scale + rng.gaussian(0.0, cfg_.noise);
    }
    batch.input = Tensor::from_values({n, 1, s, s}, std::move(values));
    return batch;
  }

  // synthetic-sequence
  const std::size_t len = cfg_.seq_len, k = cfg_.classes;
  std::vector<double> values(id_mode() ? n * len : n * cfg_.token_dim * len);
  for (std::size_t b = 0; b < n; ++b) {
    RngStream rng(cfg_.seed, (indices[b] + 1) * kSampleStride);
    const std::size_t dominant = indices[b] % k;
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t t = 0; t < len; ++t) {
      std::size_t cluster = dominant;
      if (rng.uniform() > cfg_.dominant_prob)
        cluster = std::min(k - 1, static_cast<std::size_t>(rng.uniform() *
                                                           static_cast<double>(k)));
      ++counts[cluster];
      if (id_mode()) {
        const std::size_t range = cfg_.vocab / k;
        const std::size_t offset = std::min(
            range - 1,
            static_cast<std::size_t>(rng.uniform() * static_cast<double>(range)));
        values[b * len + t] = static_cast<double>(cluster * range + offset);
      } else {
        for (std::size_t c = 0; c < cfg_.token_dim; ++c)
          // layout (sample, channel, position, 1) to match patch extraction
          values[(b * cfg_.token_dim + c) * len + t] =
              centers_[cluster * cfg_.token_dim + c] * cfg_.center_scale +
              rng.gaussian(0.0, cfg_.noise);
      }
    }
    // The label is whatever actually dominates; ties go to the lower class.
    batch.labels[b] = static_cast<std::size_t>(
        std::max_element(counts.begin(), counts.end()) - counts.begin());
  }
  batch.input = id_mode()
                    ? Tensor::from_values({n, len}, std::move(values))
                    : Tensor::from_values({n, cfg_.token_dim, len, 1},
                                          std::move(values));
  return batch;
}

// ---- Losses -------------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits,
                     const std::vector<std::size_t>& labels,
                     double label_smoothing) {
  if (logits.rank() != 2)
    throw ShapeError("cross_entropy: logits must be rank 2, got " +
                     shape_str(logits.shape()));
  const std::size_t n = logits.rows(), k = logits.cols();
  if (labels.size() != n)
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(n) + " rows");
  if (label_smoothing < 0.0 || label_smoothing >= 1.0)
    throw ConfigError("cross_entropy: label_smoothing outside [0, 1)");
  if (label_smoothing > 0.0 && k < 2)
    throw ConfigError("cross_entropy: smoothing needs at least 2 classes");

  const double off = label_smoothing / static_cast<double>(k);
  const double on = 1.0 - label_smoothing + off;
  std::vector<double> q(n * k, off);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= k)
      throw ConfigError("cross_entropy: label " + std::to_string(labels[i]) +
                        " outside " + std::to_string(k) + " classes at row " +
                        std::to_string(i));
    q[i * k + labels[i]] = on;
  }
  Tensor targets = Tensor::from_values({n, k}, std::move(q));
  return mul(reduce_sum(mul(log_softmax(logits, 1), targets)),
             -1.0 / static_cast<double>(n));
}

Tensor total_loss(const Tensor& l_main,
                  const std::vector<RoutingOutcome>& outcomes,
                  double balance_weight) {
  Tensor loss = l_main;
  for (const RoutingOutcome& o : outcomes)
    loss = add(loss, mul(balance_loss(o), balance_weight));
  return loss;
}

double lr_schedule(const TrainConfig& cfg, std::size_t step) {
  const double peak = cfg.learning_rate;
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
    return peak * static_cast<double>(step) /
           static_cast<double>(cfg.warmup_steps);
  if (cfg.schedule == Schedule::Constant) return peak;
  const double span = static_cast<double>(cfg.steps - cfg.warmup_steps);
  const double pos = static_cast<double>(step - cfg.warmup_steps) / span;
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * pos));
}

// ---- Optimizer ------------------------------------------------------------------

OptimizerState init_optimizer(const ModelParams& params,
                              const TrainConfig& cfg) {
  OptimizerState state;
  state.kind = cfg.optimizer;
  for (const NamedParam& p : params.named_parameters()) {
    state.m.push_back(Tensor::zeros(p.tensor.shape()));
    if (cfg.optimizer == OptimizerKind::Adam)
      state.v.push_back(Tensor::zeros(p.tensor.shape()));
  }
  return state;
}

double global_grad_norm(const std::vector<NamedParam>& params) {
  double sq = 0.0;
  for (const NamedParam& p : params)
    for (double g : p.tensor.grad()) sq += g * g;
  return std::sqrt(sq);
}

void clip_gradients(const std::vector<NamedParam>& params, double max_norm) {
  if (max_norm <= 0.0) return;
  const double norm = global_grad_norm(params);
  if (norm <= max_norm) return;
  const double scale = max_norm / norm;
  for (const NamedParam& p : params) {
    Tensor t = p.tensor;
    for (double& g : t.mutable_grad()) g *= scale;
  }
}

void optimizer_step(const std::vector<NamedParam>& params,
                    OptimizerState& state, const TrainConfig& cfg, double lr) {
  if (state.m.size() != params.size())
    throw ConfigError("optimizer_step: state has " +
                      std::to_string(state.m.size()) + " slots for " +
                      std::to_string(params.size()) + " parameters");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (state.m[i].shape() != params[i].tensor.shape())
      throw ShapeError("optimizer_step: slot " + params[i].name + " is " +
                       shape_str(state.m[i].shape()) + ", parameter is " +
                       shape_str(params[i].tensor.shape()));

  if (state.kind == OptimizerKind::SgdMomentum) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor t = params[i].tensor;
      auto w = t.mutable_data();
      auto g = t.grad();
      auto m = state.m[i].mutable_data();
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = cfg.momentum * m[j] + g[j];
        w[j] -= lr * m[j];
      }
    }
    ++state.t;
    return;
  }

  ++state.t;
  const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].tensor;
    auto w = t.mutable_data();
    auto g = t.grad();
    auto m = state.m[i].mutable_data();
    auto v = state.v[i].mutable_data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = cfg.adam_beta1 * m[j] + (1.0 - cfg.adam_beta1) * g[j];
      v[j] = cfg.adam_beta2 * v[j] + (1.0 - cfg.adam_beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      w[j] -= lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
  }
}

// ---- Evaluation ------------------------------------------------------------------

EvalResult evaluate(const ToyDataset& data, const ModelParams& params,
                    const WideNetConfig& cfg, std::size_t batch_size) {
  if (data.eval_size() == 0)
    throw ConfigError("evaluate: the eval split is empty");
  if (batch_size == 0) throw ConfigError("evaluate: batch_size must be positive");

  NoGradGuard guard;
  RngStream unused(0);  // eval never draws
  EvalResult result;
  double loss_sum = 0.0;
  std::size_t correct = 0;

  const std::size_t begin = data.train_size();
  const std::size_t end = begin + data.eval_size();
  for (std::size_t at = begin; at < end; at += batch_size) {
    const std::size_t stop = std::min(end, at + batch_size);
    std::vector<std::size_t> idx(stop - at);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = at + i;
    Batch batch = data.make_batch(idx);
    ForwardResult fwd = model_forward(batch, params, cfg, unused, false);
    Tensor loss = cross_entropy(fwd.logits, batch.labels, 0.0);
    loss_sum += loss.value() * static_cast<double>(idx.size());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < fwd.logits.cols(); ++c)
        if (fwd.logits.at(r, c) > fwd.logits.at(r, best)) best = c;
      if (best == batch.labels[r]) ++correct;
    }
  }
  result.samples = data.eval_size();
  result.accuracy = static_cast<double>(correct) /
                    static_cast<double>(result.samples);
  result.mean_loss = loss_sum / static_cast<double>(result.samples);
  return result;
}

// ---- Training loop ------------------------------------------------------------------

void save_train_checkpoint(const std::string& dir, const ModelParams& params,
                           const OptimizerState& opt,
                           const std::string& config_echo,
                           const CheckpointExtra& extra) {
  std::vector<NamedParam> all = params.named_parameters();
  const std::size_t n = all.size();
  for (std::size_t i = 0; i < n; ++i)
    all.push_back({"opt.m." + all[i].name, opt.m[i]});
  if (!opt.v.empty())
    for (std::size_t i = 0; i < n; ++i)
      all.push_back({"opt.v." + all[i].name, opt.v[i]});
  save_checkpoint(dir, all, config_echo, extra);
}

namespace {

void restore_slot(const LoadedCheckpoint& ckpt, const std::string& name,
                  Tensor slot) {
  auto it = ckpt.tensors.find(name);
  if (it == ckpt.tensors.end())
    throw IoError("checkpoint: missing optimizer slot " + name);
  if (it->second.shape() != slot.shape())
    throw IoError("checkpoint: slot " + name + " is " +
                  shape_str(it->second.shape()) + ", expected " +
                  shape_str(slot.shape()));
  std::copy(it->second.data().begin(), it->second.data().end(),
            slot.mutable_data().begin());
}

}  // namespace

CheckpointExtra load_train_checkpoint(const std::string& dir,
                                      ModelParams& params,
                                      OptimizerState& opt) {
  LoadedCheckpoint ckpt = load_checkpoint(dir);
  restore_params(params, ckpt);
  const std::vector<NamedParam> named = params.named_parameters();
  if (opt.m.size() != named.size())
    throw ConfigError("load_train_checkpoint: optimizer has " +
                      std::to_string(opt.m.size()) + " slots for " +
                      std::to_string(named.size()) + " parameters");
  for (std::size_t i = 0; i < named.size(); ++i) {
    restore_slot(ckpt, "opt.m." + named[i].name, opt.m[i]);
    if (!opt.v.empty()) restore_slot(ckpt, "opt.v." + named[i].name, opt.v[i]);
  }
  opt.t = ckpt.extra.step;
  return ckpt.extra;
}

TrainResult train(const WideNetConfig& model_cfg, const TrainConfig& train_cfg,
                  const DataConfig& data_cfg, ModelParams& params,
                  OptimizerState& opt, RngStream& model_rng,
                  std::size_t start_step, const std::string& checkpoint_dir,
                  const std::string& config_echo, const TrainSinks& sinks) {
  model_cfg.validate();
  train_cfg.validate();
  data_cfg.validate();
  if (start_step >= train_cfg.steps)
    throw ConfigError("train: start step " + std::to_string(start_step) +
                      " is past " + std::to_string(train_cfg.steps) + " steps");

  ToyDataset data(data_cfg);
  std::vector<NamedParam> named = params.named_parameters();
  if (opt.m.size() != named.size())
    throw ConfigError("train: optimizer has " + std::to_string(opt.m.size()) +
                      " slots for " + std::to_string(named.size()) +
                      " parameters");

  TrainResult result;
  for (std::size_t step = start_step; step < train_cfg.steps; ++step) {
    // Batch choice is a pure function of (seed, step), so resuming from a
    // checkpoint replays the identical data order.
    RngStream batch_rng(train_cfg.seed ^ 0xBA7C4ull,
                        static_cast<std::uint64_t>(step) * train_cfg.batch_size);
    std::vector<std::size_t> idx(train_cfg.batch_size);
    for (std::size_t i = 0; i < idx.size(); ++i)
      idx[i] = static_cast<std::size_t>(batch_rng.next_u64() %
                                        data.train_size());

    Batch batch = data.make_batch(idx);
    ForwardResult fwd =
        model_forward(batch, params, model_cfg, model_rng, true);
    Tensor l_main =
        cross_entropy(fwd.logits, batch.labels, train_cfg.label_smoothing);
    if (!std::isfinite(l_main.value()))
      throw NumericError("train: non-finite main loss at step " +
                         std::to_string(step));

    StepMetrics sm;
    sm.step = step;
    sm.l_main = l_main.value();
    Tensor total = l_main;
    double drop_sum = 0.0;
    for (std::size_t g = 0; g < fwd.outcomes.size(); ++g) {
      Tensor lb = balance_loss(fwd.outcomes[g]);
      if (!std::isfinite(lb.value()))
        throw NumericError("train: non-finite balance loss in group " +
                           std::to_string(g) + " at step " +
                           std::to_string(step));
      sm.l_balance.push_back(lb.value());
      total = add(total, mul(lb, model_cfg.balance_weight));
      drop_sum += fwd.outcomes[g].drop_rate();
    }
    sm.total = total.value();
    if (!std::isfinite(sm.total))
      throw NumericError("train: non-finite total loss at step " +
                         std::to_string(step));
    sm.lr = lr_schedule(train_cfg, step);
    sm.drop_rate = fwd.outcomes.empty()
                       ? 0.0
                       : drop_sum / static_cast<double>(fwd.outcomes.size());

    for (NamedParam& p : named) p.tensor.zero_grad();
    backward(total);
    const double norm = global_grad_norm(named);
    if (!std::isfinite(norm))
      throw NumericError("train: non-finite gradient norm at step " +
                         std::to_string(step));
    clip_gradients(named, train_cfg.grad_clip);
    optimizer_step(named, opt, train_cfg, sm.lr);

    const bool last = step + 1 == train_cfg.steps;
    if ((train_cfg.eval_every > 0 && (step + 1) % train_cfg.eval_every == 0) ||
        last) {
      EvalResult ev = evaluate(data, params, model_cfg, train_cfg.batch_size);
      sm.accuracy = ev.accuracy;
      if (last) result.final_accuracy = ev.accuracy;
    }

    if (sinks.metrics) append_jsonl(*sinks.metrics, to_json(sm));
    if (sinks.routing)
      for (std::size_t g = 0; g < fwd.outcomes.size(); ++g)
        append_jsonl(*sinks.routing,
                     to_json(make_routing_record(
                         summarize_routing(fwd.outcomes[g], g), step)));

    if (step == start_step) result.initial_total = sm.total;
    result.final_total = sm.total;
    ++result.steps_run;

    if (!checkpoint_dir.empty() && train_cfg.checkpoint_every > 0 &&
        (step + 1) % train_cfg.checkpoint_every == 0 && !last)
      save_train_checkpoint(checkpoint_dir + "/step-" + std::to_string(step + 1),
                    params, opt, config_echo,
                    {step + 1, model_rng.counter()});
  }

  if (!checkpoint_dir.empty())
    save_train_checkpoint(checkpoint_dir + "/final", params, opt, config_echo,
                  {train_cfg.steps, model_rng.counter()});
  return result;
}

}  // namespace widenet
