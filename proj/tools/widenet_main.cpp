// widenet: command line front end. Subcommands:
//   train    run a preset or config file, writing metrics + checkpoints
//   eval     re-evaluate a checkpoint on its eval split
//   analyze  layer-norm divergence, expert utilization, tokens-per-expert
//   verify   self-check battery over the numerical core
//
// Exit codes: 0 success, 1 usage or config problem, 2 numerical abort,
// 3 verification failure.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "widenet/analysis.hpp"
#include "widenet/checkpoint.hpp"
#include "widenet/config.hpp"
#include "widenet/error.hpp"
#include "widenet/model.hpp"
#include "widenet/rng.hpp"
#include "widenet/train.hpp"
#include "widenet/verify.hpp"

namespace {

using namespace widenet;

// The model's own stream (dropout, routing noise) is separate from the
// init stream so adding an init draw never shifts training randomness.
constexpr std::uint64_t kModelStreamSalt = 0x9E3779B97F4A7C15ull;

std::string fixed6(double v) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(6) << v;
  return out.str();
}

std::string fixed4(double v) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(4) << v;
  return out.str();
}

struct TrainArgs {
  std::string preset_name;
  std::string config_path;
  std::string out_override;
  std::string resume_dir;
  std::vector<std::string> sets;
};

RunConfig resolve_config(const TrainArgs& args) {
  if (args.preset_name.empty() && args.config_path.empty())
    throw ConfigError("one of --preset or --config is required");
  RunConfig cfg = args.config_path.empty() ? preset(args.preset_name)
                                           : load_run_config(args.config_path);
  if (!args.sets.empty()) cfg = apply_overrides(cfg, args.sets);
  if (!args.out_override.empty()) cfg.out_dir = args.out_override;
  cfg.validate();
  check_geometry(cfg.model, cfg.data);
  return cfg;
}

TrainResult run_one(const RunConfig& cfg, const std::string& dir,
                    const std::string& resume_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  const std::string echo = to_json(cfg).dump(2);
  {
    std::ofstream out(dir + "/config.json");
    if (!out) throw IoError("cannot write " + dir + "/config.json");
    out << echo << '\n';
  }

  const auto mode = resume_dir.empty() ? std::ios::trunc : std::ios::app;
  std::ofstream metrics(dir + "/metrics.jsonl", mode);
  std::ofstream routing(dir + "/routing.jsonl", mode);
  if (!metrics || !routing)
    throw IoError("cannot open metric streams under " + dir);

  ModelParams params = build_params(cfg.model);
  OptimizerState opt = init_optimizer(params, cfg.train);
  RngStream model_rng(cfg.train.seed ^ kModelStreamSalt);
  std::size_t start_step = 0;
  if (!resume_dir.empty()) {
    const CheckpointExtra extra = load_train_checkpoint(resume_dir, params, opt);
    start_step = extra.step;
    model_rng = RngStream(cfg.train.seed ^ kModelStreamSalt,
                          extra.model_rng_counter);
    std::cout << "resuming from " << resume_dir << " at step " << start_step
              << "\n";
  } else {
    RngStream init_rng(cfg.train.seed);
    init_params(params, cfg.model, init_rng);
  }

  TrainSinks sinks{&metrics, &routing};
  const auto t0 = std::chrono::steady_clock::now();
  const TrainResult result =
      train(cfg.model, cfg.train, cfg.data, params, opt, model_rng, start_step,
            dir + "/checkpoints", echo, sinks);
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();

  std::cout << dir << ": " << result.steps_run << " steps in " << fixed4(seconds)
            << "s, total loss " << fixed6(result.initial_total) << " -> "
            << fixed6(result.final_total);
  if (result.final_accuracy)
    std::cout << ", eval accuracy " << fixed4(*result.final_accuracy);
  std::cout << "\n";
  return result;
}

int cmd_train(const TrainArgs& args) {
  const RunConfig cfg = resolve_config(args);

  if (cfg.sweep_groups.empty()) {
    run_one(cfg, cfg.out_dir, args.resume_dir);
    return 0;
  }

  if (!args.resume_dir.empty())
    throw ConfigError("--resume does not apply to sweep runs");

  std::vector<std::pair<std::size_t, double>> table;
  for (const std::size_t g : cfg.sweep_groups) {
    RunConfig sub = cfg;
    sub.model.groups = g;
    sub.sweep_groups.clear();
    sub.out_dir = cfg.out_dir + "/g" + std::to_string(g);
    const TrainResult r = run_one(sub, sub.out_dir, "");
    table.emplace_back(g, r.final_accuracy.value_or(0.0));
  }

  nlohmann::json sweep = nlohmann::json::array();
  std::cout << "\nrouting-group sweep, eval accuracy:\n";
  for (const auto& [g, acc] : table) {
    std::cout << "  G=" << g << "  " << fixed4(acc) << "\n";
    sweep.push_back({{"groups", g}, {"eval_accuracy", acc}});
  }
  std::ofstream out(cfg.out_dir + "/sweep.json");
  if (!out) throw IoError("cannot write " + cfg.out_dir + "/sweep.json");
  out << sweep.dump(2) << '\n';
  return 0;
}

RunConfig config_from_checkpoint(const LoadedCheckpoint& ckpt) {
  nlohmann::json parsed;
  try {
    parsed = nlohmann::json::parse(ckpt.config_json);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint config is not valid JSON: ") +
                  e.what());
  }
  return parse_run_config(parsed);
}

int cmd_eval(const std::string& checkpoint_dir) {
  const LoadedCheckpoint ckpt = load_checkpoint(checkpoint_dir);
  const RunConfig cfg = config_from_checkpoint(ckpt);

  ModelParams params = build_params(cfg.model);
  restore_params(params, ckpt);
  const ToyDataset data(cfg.data);

  const EvalResult res =
      evaluate(data, params, cfg.model, cfg.train.batch_size);
  std::cout << "checkpoint step " << ckpt.extra.step << ", " << res.samples
            << " eval samples\n";
  std::cout << "accuracy  " << fixed4(res.accuracy) << "\n";
  std::cout << "mean loss " << fixed6(res.mean_loss) << "\n";

  if (!cfg.model.use_moe) return 0;

  // Routing behavior on the same split. Inference routing draws no noise, so
  // repeated invocations print identical numbers.
  std::vector<RoutingRecord> records;
  RngStream rng(0);
  NoGradGuard guard;
  const std::size_t lo = data.train_size();
  const std::size_t hi = lo + data.eval_size();
  std::size_t batch_index = 0;
  for (std::size_t start = lo; start < hi; start += cfg.train.batch_size) {
    const std::size_t stop = std::min(hi, start + cfg.train.batch_size);
    std::vector<std::size_t> idx(stop - start);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
    const Batch batch = data.make_batch(idx);
    const ForwardResult fwd =
        model_forward(batch, params, cfg.model, rng, false);
    for (const RoutingSummary& s : routing_report(fwd.outcomes))
      records.push_back(make_routing_record(s, batch_index));
    ++batch_index;
  }

  const std::size_t group_count = records.empty() ? 0 : cfg.model.groups;
  for (std::size_t g = 0; g < group_count; ++g) {
    std::vector<RoutingRecord> mine;
    for (const RoutingRecord& r : records)
      if (r.group == g) mine.push_back(r);
    const UtilizationSummary u = expert_utilization(mine);
    std::cout << "group " << g << ": token share [";
    for (std::size_t e = 0; e < u.experts; ++e)
      std::cout << (e ? " " : "") << fixed4(u.token_share[e]);
    std::cout << "], drop rate " << fixed4(u.mean_drop_rate) << "\n";
  }
  return 0;
}

int cmd_analyze_divergence(const std::string& checkpoint_dir) {
  const LoadedCheckpoint ckpt = load_checkpoint(checkpoint_dir);
  const RunConfig cfg = config_from_checkpoint(ckpt);
  ModelParams params = build_params(cfg.model);
  restore_params(params, ckpt);

  for (const NormSite site : {NormSite::Attention, NormSite::Moe}) {
    const DivergenceReport rep = ln_divergence(params, cfg.model, site);
    std::cout << to_string(site) << " norms over " << rep.blocks
              << " blocks of dim " << rep.dim << ": y_gamma "
              << fixed6(rep.y_gamma) << ", y_beta " << fixed6(rep.y_beta)
              << "\n";
  }
  return 0;
}

int cmd_analyze_utilization(const std::string& routing_path) {
  const UtilizationSummary u =
      expert_utilization(read_routing_file(routing_path));
  std::cout << u.records << " records over " << u.steps << " steps, "
            << u.experts << " experts\n";
  for (std::size_t e = 0; e < u.experts; ++e)
    std::cout << "expert " << e << ": kept tokens "
              << fixed4(u.per_expert_tokens[e]) << ", share "
              << fixed4(u.token_share[e]) << ", mean dispatch fraction "
              << fixed4(u.mean_dispatch_fraction[e]) << "\n";
  std::cout << "tokens per expert " << fixed4(u.tokens_per_expert)
            << ", mean drop rate " << fixed4(u.mean_drop_rate) << "\n";
  return 0;
}

int cmd_analyze_estimate(std::size_t images, std::size_t patches,
                         std::size_t top_k, std::size_t experts) {
  const double t = tokens_per_expert_estimate(images, patches, top_k, experts);
  std::cout << t << "\n";
  std::cout << "(expected tokens routed to each expert; assumes the capacity "
               "ratio keeps drops negligible)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "widenet: parameter-shared mixture-of-experts transformer workbench"};
  app.require_subcommand(1);

  TrainArgs train_args;
  CLI::App* train_cmd =
      app.add_subcommand("train", "train a model and write run artifacts");
  CLI::Option* preset_opt = train_cmd->add_option(
      "--preset", train_args.preset_name, "named built-in configuration");
  train_cmd->add_option("--config", train_args.config_path,
                        "JSON run configuration file")
      ->excludes(preset_opt);
  train_cmd->add_option("--set", train_args.sets,
                        "override one config key, as path=value (repeatable)");
  train_cmd->add_option("--out", train_args.out_override,
                        "output directory (overrides the config's out_dir)");
  train_cmd->add_option("--resume", train_args.resume_dir,
                        "checkpoint directory to continue from");

  std::string eval_checkpoint;
  CLI::App* eval_cmd =
      app.add_subcommand("eval", "evaluate a saved checkpoint");
  eval_cmd->add_option("--checkpoint", eval_checkpoint, "checkpoint directory")
      ->required();

  std::string which;
  std::string analyze_checkpoint;
  std::string routing_path;
  std::size_t est_images = 0, est_patches = 0, est_top_k = 0, est_experts = 0;
  CLI::App* analyze_cmd =
      app.add_subcommand("analyze", "inspect checkpoints and run logs");
  analyze_cmd
      ->add_option("--which", which,
                   "ln-divergence | utilization | tokens-estimate")
      ->required()
      ->check(CLI::IsMember({"ln-divergence", "utilization", "tokens-estimate"}));
  analyze_cmd->add_option("--checkpoint", analyze_checkpoint,
                          "checkpoint directory (ln-divergence)");
  analyze_cmd->add_option("--routing", routing_path,
                          "routing.jsonl path (utilization)");
  analyze_cmd->add_option("--images", est_images,
                          "image count (tokens-estimate)");
  analyze_cmd->add_option("--patches", est_patches,
                          "patches per image (tokens-estimate)");
  analyze_cmd->add_option("--top-k", est_top_k,
                          "experts per token (tokens-estimate)");
  analyze_cmd->add_option("--experts", est_experts,
                          "expert count (tokens-estimate)");

  std::uint64_t verify_seed = 1;
  bool inject_renorm = false;
  CLI::App* verify_cmd =
      app.add_subcommand("verify", "run the numerical self-check battery");
  verify_cmd->add_option("--seed", verify_seed,
                         "instance seed (changes inputs, never verdicts)");
  verify_cmd->add_flag("--inject-renorm", inject_renorm,
                       "force the gate renormalization fault so the combine "
                       "oracle must fail");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(train_args);
    if (eval_cmd->parsed()) return cmd_eval(eval_checkpoint);
    if (analyze_cmd->parsed()) {
      if (which == "ln-divergence") {
        if (analyze_checkpoint.empty())
          throw ConfigError("ln-divergence needs --checkpoint");
        return cmd_analyze_divergence(analyze_checkpoint);
      }
      if (which == "utilization") {
        if (routing_path.empty())
          throw ConfigError("utilization needs --routing");
        return cmd_analyze_utilization(routing_path);
      }
      return cmd_analyze_estimate(est_images, est_patches, est_top_k,
                                  est_experts);
    }
    if (verify_cmd->parsed()) {
      VerifyOptions opts;
      opts.seed = verify_seed;
      opts.renormalize_gates = inject_renorm;
      return verify_and_report(opts, std::cout) ? 0 : 3;
    }
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
