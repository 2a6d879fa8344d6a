#include "widenet/analysis.hpp"

#include <algorithm>
#include <map>
#include <numeric>

#include "widenet/error.hpp"

namespace widenet {

namespace {

void check_blocks(const std::vector<std::vector<double>>& blocks,
                  const char* op) {
  if (blocks.size() < 2)
    throw ConfigError(std::string(op) + ": needs at least 2 blocks, got " +
                      std::to_string(blocks.size()));
  const std::size_t m = blocks.front().size();
  if (m == 0) throw ConfigError(std::string(op) + ": empty block vectors");
  for (std::size_t i = 1; i < blocks.size(); ++i)
    if (blocks[i].size() != m)
      throw ShapeError(std::string(op) + ": block " + std::to_string(i) +
                       " has " + std::to_string(blocks[i].size()) +
                       " elements, block 0 has " + std::to_string(m));
}

// Sorted copy plus prefix sums; lets the all-pairs |a - b| sum run in
// O(M log M) per block pair instead of O(M^2).
struct SortedBlock {
  std::vector<double> sorted;
  std::vector<double> prefix;  // prefix[i] = sum of sorted[0..i)
};

SortedBlock prepare(const std::vector<double>& v) {
  SortedBlock b;
  b.sorted = v;
  std::sort(b.sorted.begin(), b.sorted.end());
  b.prefix.assign(v.size() + 1, 0.0);
  for (std::size_t i = 0; i < b.sorted.size(); ++i)
    b.prefix[i + 1] = b.prefix[i] + b.sorted[i];
  return b;
}

double mean_abs_distance(const std::vector<double>& a, const SortedBlock& b) {
  const std::size_t m = b.sorted.size();
  double total = 0.0;
  for (double x : a) {
    const std::size_t lo = static_cast<std::size_t>(
        std::upper_bound(b.sorted.begin(), b.sorted.end(), x) -
        b.sorted.begin());
    total += x * static_cast<double>(lo) - b.prefix[lo];
    total += (b.prefix[m] - b.prefix[lo]) -
             x * static_cast<double>(m - lo);
  }
  return total / static_cast<double>(a.size() * m);
}

}  // namespace

std::vector<std::vector<double>> pairwise_mean_distance(
    const std::vector<std::vector<double>>& blocks) {
  check_blocks(blocks, "pairwise_mean_distance");
  const std::size_t n = blocks.size();
  std::vector<SortedBlock> sorted;
  sorted.reserve(n);
  for (const auto& b : blocks) sorted.push_back(prepare(b));

  std::vector<std::vector<double>> out(n, std::vector<double>(n, 0.0));
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t k = j; k < n; ++k) {
      const double d = mean_abs_distance(blocks[j], sorted[k]);
      out[j][k] = d;
      out[k][j] = d;
    }
  return out;
}

double cross_block_divergence(const std::vector<std::vector<double>>& blocks) {
  const auto pairs = pairwise_mean_distance(blocks);
  const std::size_t n = blocks.size();
  double sum = 0.0;
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t k = 0; k < n; ++k)
      if (j != k) sum += pairs[j][k];
  return sum / static_cast<double>(n * (n - 1));
}

namespace {

std::vector<std::vector<double>> zero_matrix(std::size_t n) {
  return std::vector<std::vector<double>>(n, std::vector<double>(n, 0.0));
}

double off_diagonal_mean(const std::vector<std::vector<double>>& pairs) {
  const std::size_t n = pairs.size();
  double sum = 0.0;
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t k = 0; k < n; ++k)
      if (j != k) sum += pairs[j][k];
  return sum / static_cast<double>(n * (n - 1));
}

}  // namespace

DivergenceReport ln_divergence(const std::vector<std::vector<double>>& gammas,
                               const std::vector<std::vector<double>>& betas,
                               NormSite site) {
  check_blocks(gammas, "ln_divergence");
  check_blocks(betas, "ln_divergence");
  if (gammas.size() != betas.size())
    throw ShapeError("ln_divergence: " + std::to_string(gammas.size()) +
                     " gamma blocks vs " + std::to_string(betas.size()) +
                     " beta blocks");
  DivergenceReport report;
  report.site = site;
  report.blocks = gammas.size();
  report.dim = gammas.front().size();
  report.gamma_pairs = pairwise_mean_distance(gammas);
  report.beta_pairs = pairwise_mean_distance(betas);
  report.y_gamma = off_diagonal_mean(report.gamma_pairs);
  report.y_beta = off_diagonal_mean(report.beta_pairs);
  return report;
}

DivergenceReport ln_divergence(const ModelParams& params,
                               const WideNetConfig& cfg, NormSite site) {
  if (cfg.depth < 2)
    throw ConfigError("ln_divergence: undefined for depth " +
                      std::to_string(cfg.depth));
  if (params.norms.size() == 1) {
    // One shared object: no cross-block pairs exist, the spread is zero by
    // construction.
    DivergenceReport report;
    report.site = site;
    report.blocks = cfg.depth;
    report.dim = cfg.d_model;
    report.gamma_pairs = zero_matrix(cfg.depth);
    report.beta_pairs = zero_matrix(cfg.depth);
    return report;
  }

  std::vector<std::vector<double>> gammas, betas;
  for (std::size_t j = 0; j < cfg.depth; ++j) {
    const BlockNorms& norms = params.norms_for_block(j);
    const LayerNormParams& ln = site == NormSite::Moe ? norms.moe : norms.att;
    gammas.emplace_back(ln.gamma.data().begin(), ln.gamma.data().end());
    betas.emplace_back(ln.beta.data().begin(), ln.beta.data().end());
  }
  return ln_divergence(gammas, betas, site);
}

double tokens_per_expert_estimate(std::size_t images,
                                  std::size_t patches_per_image,
                                  std::size_t top_k, std::size_t experts) {
  if (images < 1 || patches_per_image < 1 || top_k < 1 || experts < 1)
    throw ConfigError("tokens_per_expert_estimate: all counts must be >= 1");
  return static_cast<double>(images) * static_cast<double>(patches_per_image) *
         static_cast<double>(top_k) / static_cast<double>(experts);
}

UtilizationSummary expert_utilization(
    const std::vector<RoutingRecord>& records) {
  if (records.empty())
    throw ConfigError("expert_utilization: empty routing stream");
  const std::size_t experts = records.front().expert_counts.size();
  if (experts == 0)
    throw IoError("expert_utilization: record 1 has no expert counts");

  UtilizationSummary s;
  s.records = records.size();
  s.experts = experts;
  s.per_expert_tokens.assign(experts, 0.0);
  s.mean_dispatch_fraction.assign(experts, 0.0);

  std::map<std::size_t, std::pair<double, std::size_t>> drop_acc;  // step -> (sum, n)
  for (std::size_t i = 0; i < records.size(); ++i) {
    const RoutingRecord& r = records[i];
    if (r.expert_counts.size() != experts ||
        r.dispatch_fraction.size() != experts)
      throw IoError("expert_utilization: record " + std::to_string(i + 1) +
                    " has " + std::to_string(r.expert_counts.size()) +
                    " experts, record 1 has " + std::to_string(experts));
    for (std::size_t e = 0; e < experts; ++e) {
      s.per_expert_tokens[e] += static_cast<double>(r.expert_counts[e]);
      s.mean_dispatch_fraction[e] += r.dispatch_fraction[e];
    }
    s.mean_drop_rate += r.drop_rate;
    auto& acc = drop_acc[r.step];
    acc.first += r.drop_rate;
    ++acc.second;
  }

  const double total = std::accumulate(s.per_expert_tokens.begin(),
                                       s.per_expert_tokens.end(), 0.0);
  s.token_share.assign(experts, 0.0);
  if (total > 0.0)
    for (std::size_t e = 0; e < experts; ++e)
      s.token_share[e] = s.per_expert_tokens[e] / total;
  for (std::size_t e = 0; e < experts; ++e)
    s.mean_dispatch_fraction[e] /= static_cast<double>(records.size());
  s.mean_drop_rate /= static_cast<double>(records.size());
  s.tokens_per_expert = total / static_cast<double>(experts);
  s.steps = drop_acc.size();
  for (const auto& [step, acc] : drop_acc)
    s.drop_by_step.emplace_back(step,
                                acc.first / static_cast<double>(acc.second));
  return s;
}

std::string to_string(NormSite site) {
  return site == NormSite::Moe ? "moe" : "attention";
}

}  // namespace widenet
