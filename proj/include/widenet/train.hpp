#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "widenet/checkpoint.hpp"
#include "widenet/metrics.hpp"
#include "widenet/model.hpp"

namespace widenet {

enum class Schedule { Cosine, Constant };
enum class OptimizerKind { SgdMomentum, Adam };

struct TrainConfig {
  std::size_t steps = 1000;
  std::size_t batch_size = 8;
  double learning_rate = 1e-3;
  std::size_t warmup_steps = 100;
  Schedule schedule = Schedule::Cosine;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double label_smoothing = 0.0;
  std::uint64_t seed = 1;
  std::size_t eval_every = 200;     // 0 = final eval only
  std::size_t checkpoint_every = 0; // 0 = final checkpoint only
  double grad_clip = 1.0;           // global norm; 0 disables
  double momentum = 0.9;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

struct DataConfig {
  std::string kind = "synthetic-sequence";  // or "tiny-image"
  std::uint64_t seed = 7;
  std::size_t classes = 4;
  // synthetic-sequence: seq_len tokens of token_dim features drawn around
  // class cluster centers; the label is the majority cluster. vocab > 0
  // switches tokens to ids for the factorized embedding path.
  std::size_t token_dim = 16;
  std::size_t seq_len = 8;
  std::size_t vocab = 0;
  // tiny-image: one-channel image_size x image_size class patterns.
  std::size_t image_size = 8;
  double noise = 0.25;
  double dominant_prob = 0.75;
  double center_scale = 1.0;
  std::size_t train_size = 1024;
  std::size_t eval_size = 256;

  void validate() const;
};

// Deterministic synthetic data. Sample i is a pure function of
// (seed, i): regenerating any index gives identical bytes, so resumed runs
// see the same stream. Train indices are [0, train_size), eval indices
// live right after them, so the splits never overlap.
class ToyDataset {
 public:
  explicit ToyDataset(DataConfig cfg);

  const DataConfig& config() const { return cfg_; }
  std::size_t train_size() const { return cfg_.train_size; }
  std::size_t eval_size() const { return cfg_.eval_size; }

  // Global sample indices; callers pick them from the right split.
  Batch make_batch(std::span<const std::size_t> indices) const;

  // The token geometry this data expects from the model config.
  std::size_t channels() const;
  std::size_t height() const;
  std::size_t width() const;
  bool id_mode() const { return cfg_.kind == "synthetic-sequence" && cfg_.vocab > 0; }

 private:
  DataConfig cfg_;
  std::vector<double> centers_;  // classes x feature block, kind-specific
};

// Mean softmax cross entropy with optional label smoothing. labels[i] must
// be < classes; smoothing spreads s/classes mass over every class.
Tensor cross_entropy(const Tensor& logits,
                     const std::vector<std::size_t>& labels,
                     double label_smoothing);

// l_main plus balance_weight times each group's balance loss.
Tensor total_loss(const Tensor& l_main,
                  const std::vector<RoutingOutcome>& outcomes,
                  double balance_weight);

// Linear warmup to the peak, then cosine decay to zero at `steps` (or flat
// when the schedule is Constant).
double lr_schedule(const TrainConfig& cfg, std::size_t step);

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::Adam;
  std::size_t t = 0;             // adam bias-correction step count
  std::vector<Tensor> m;         // parallel to named_parameters()
  std::vector<Tensor> v;         // adam second moment
};

OptimizerState init_optimizer(const ModelParams& params,
                              const TrainConfig& cfg);

double global_grad_norm(const std::vector<NamedParam>& params);
// Scales every gradient down so the global norm is at most max_norm.
void clip_gradients(const std::vector<NamedParam>& params, double max_norm);
void optimizer_step(const std::vector<NamedParam>& params,
                    OptimizerState& state, const TrainConfig& cfg, double lr);

struct EvalResult {
  double accuracy = 0.0;
  double mean_loss = 0.0;
  std::size_t samples = 0;
};

EvalResult evaluate(const ToyDataset& data, const ModelParams& params,
                    const WideNetConfig& cfg, std::size_t batch_size);

struct TrainSinks {
  std::ostream* metrics = nullptr;  // step metrics JSONL
  std::ostream* routing = nullptr;  // routing record JSONL
};

struct TrainResult {
  std::size_t steps_run = 0;
  double initial_total = 0.0;
  double final_total = 0.0;
  std::optional<double> final_accuracy;
};

// Writes params plus optimizer slots (named opt.m.<param>, opt.v.<param>)
// so a run can resume exactly.
void save_train_checkpoint(const std::string& dir, const ModelParams& params,
                           const OptimizerState& opt,
                           const std::string& config_echo,
                           const CheckpointExtra& extra);

// Restores params and optimizer slots written by save_train_checkpoint.
// opt must already have the right slot layout (init_optimizer). Returns the
// step / rng counter pair needed to resume.
CheckpointExtra load_train_checkpoint(const std::string& dir,
                                      ModelParams& params,
                                      OptimizerState& opt);

// Runs steps [start_step, cfg.steps). params/opt are updated in place.
// checkpoint_dir may be empty to skip checkpoints; otherwise step
// checkpoints go to <dir>/step-N and a final one to <dir>/final. Aborts
// with NumericError naming the step and term if any loss goes non-finite.
TrainResult train(const WideNetConfig& model_cfg, const TrainConfig& train_cfg,
                  const DataConfig& data_cfg, ModelParams& params,
                  OptimizerState& opt, RngStream& model_rng,
                  std::size_t start_step, const std::string& checkpoint_dir,
                  const std::string& config_echo, const TrainSinks& sinks);

}  // namespace widenet
