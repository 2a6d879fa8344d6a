#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "widenet/metrics.hpp"
#include "widenet/model.hpp"

namespace widenet {

enum class NormSite { Attention, Moe };

// Cross-block spread of the layer norm vectors at one site. The pair
// matrices hold the mean absolute element distance for every ordered block
// pair; y averages the off-diagonal entries, so comparing a block with
// itself never contributes.
struct DivergenceReport {
  NormSite site = NormSite::Moe;
  std::size_t blocks = 0;  // N
  std::size_t dim = 0;     // M
  double y_gamma = 0.0;
  double y_beta = 0.0;
  std::vector<std::vector<double>> gamma_pairs;  // N x N
  std::vector<std::vector<double>> beta_pairs;   // N x N
};

// Mean |a - b| over every element pair drawn from two distinct blocks,
// i.e. (1 / (M^2 N (N-1))) sum over blocks j != n and elements i, m of
// |v[j][i] - v[n][m]|. Needs at least two blocks, all of equal length.
double cross_block_divergence(const std::vector<std::vector<double>>& blocks);

// The N x N matrix behind the metric above; entry (j, n) is the mean
// element distance between blocks j and n (diagonal = within-block spread).
std::vector<std::vector<double>> pairwise_mean_distance(
    const std::vector<std::vector<double>>& blocks);

DivergenceReport ln_divergence(const std::vector<std::vector<double>>& gammas,
                               const std::vector<std::vector<double>>& betas,
                               NormSite site);

// Measures the model's per-block norm vectors at the chosen site. A model
// built with share_ln holds a single gamma/beta object, so there are no
// cross-block pairs and the divergence is exactly zero.
DivergenceReport ln_divergence(const ModelParams& params,
                               const WideNetConfig& cfg, NormSite site);

// Expected tokens routed to each expert: images * patches * K / E. Assumes
// the capacity ratio sits near 1 so hardly anything is dropped.
double tokens_per_expert_estimate(std::size_t images,
                                  std::size_t patches_per_image,
                                  std::size_t top_k, std::size_t experts);

// Aggregate view of a routing record stream.
struct UtilizationSummary {
  std::size_t records = 0;
  std::size_t steps = 0;    // distinct step values
  std::size_t experts = 0;
  std::vector<double> per_expert_tokens;        // summed kept counts
  std::vector<double> token_share;              // per_expert_tokens, normalized
  std::vector<double> mean_dispatch_fraction;   // mean m_i over records
  double tokens_per_expert = 0.0;               // mean of per_expert_tokens
  double mean_drop_rate = 0.0;
  // (step, mean drop rate over that step's groups), in step order
  std::vector<std::pair<std::size_t, double>> drop_by_step;
};

UtilizationSummary expert_utilization(const std::vector<RoutingRecord>& records);

std::string to_string(NormSite site);

}  // namespace widenet
