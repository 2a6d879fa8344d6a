#include "widenet/moe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "widenet/rng.hpp"

namespace widenet {

std::vector<double> RoutingOutcome::dispatch_fraction() const {
  std::vector<double> m(experts, 0.0);
  for (std::size_t id : indices) m[id] += 1.0;
  const double scale = tokens ? 1.0 / static_cast<double>(tokens) : 0.0;
  for (double& v : m) v *= scale;
  return m;
}

std::size_t RoutingOutcome::dropped() const {
  std::size_t n = 0;
  for (std::uint8_t k : kept)
    if (!k) ++n;
  return n;
}

double RoutingOutcome::drop_rate() const {
  return kept.empty() ? 0.0
                      : static_cast<double>(dropped()) /
                            static_cast<double>(kept.size());
}

RoutingOutcome route(const Tensor& x, const RouterParams& router,
                     std::size_t top_k, RngStream& rng, bool training) {
  if (x.rank() != 2)
    throw ShapeError("route: tokens must be rank 2, got " +
                     shape_str(x.shape()));
  if (router.w_f.rank() != 2 || router.w_f.rows() != x.cols())
    throw ShapeError("route: router " + shape_str(router.w_f.shape()) +
                     " does not accept tokens " + shape_str(x.shape()));
  const std::size_t tokens = x.rows();
  const std::size_t experts = router.w_f.cols();
  if (top_k < 1 || top_k > experts)
    throw ConfigError("route: top_k " + std::to_string(top_k) +
                      " outside [1, " + std::to_string(experts) + "]");

  Tensor logits = matmul(x, router.w_f);
  if (training) {
    // Exploration noise; constant w.r.t. the graph, two ticks per logit.
    const double stddev = 1.0 / static_cast<double>(experts);
    logits = add(logits, sample_gaussian(rng, {tokens, experts}, 0.0, stddev));
  }
  if (!logits.all_finite())
    throw NumericError("route: non-finite router logits");

  RoutingOutcome outcome;
  outcome.tokens = tokens;
  outcome.experts = experts;
  outcome.top_k = top_k;
  outcome.probs = stable_softmax(logits, 1);

  outcome.indices.reserve(tokens * top_k);
  std::vector<double> mask(tokens * experts, 0.0);
  std::vector<std::size_t> order(experts);
  for (std::size_t t = 0; t < tokens; ++t) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    const double* p = outcome.probs.data().data() + t * experts;
    // stable sort keeps ascending ids in front on equal probability
    std::stable_sort(order.begin(), order.end(),
                     [p](std::size_t a, std::size_t b) { return p[a] > p[b]; });
    for (std::size_t k = 0; k < top_k; ++k) {
      outcome.indices.push_back(order[k]);
      mask[t * experts + order[k]] = 1.0;
    }
  }
  outcome.gates =
      mul(outcome.probs, Tensor::from_values({tokens, experts}, std::move(mask)));
  outcome.kept.assign(tokens * top_k, 1);
  outcome.per_expert_count.assign(experts, 0);
  for (std::size_t id : outcome.indices) ++outcome.per_expert_count[id];
  return outcome;
}

std::size_t buffer_capacity(double ratio, std::size_t top_k, std::size_t batch,
                            std::size_t seq_len, std::size_t experts) {
  if (experts == 0) throw ConfigError("buffer_capacity: zero experts");
  if (ratio <= 0.0)
    throw ConfigError("buffer_capacity: ratio " + std::to_string(ratio) +
                      " must be positive");
  const long double q = static_cast<long double>(ratio) *
                        static_cast<long double>(top_k) *
                        static_cast<long double>(batch) *
                        static_cast<long double>(seq_len) /
                        static_cast<long double>(experts);
  const long double nearest = std::round(q);
  // ratio values like 1.2 are not exact in binary; don't let 6.000000001
  // become 7.
  if (std::fabs(q - nearest) < 1e-9L)
    return static_cast<std::size_t>(nearest);
  return static_cast<std::size_t>(std::ceil(q));
}

void dispatch_with_capacity(RoutingOutcome& outcome, std::size_t capacity) {
  const std::size_t tokens = outcome.tokens, experts = outcome.experts,
                    top_k = outcome.top_k;
  if (outcome.indices.size() != tokens * top_k)
    throw ShapeError("dispatch_with_capacity: outcome has " +
                     std::to_string(outcome.indices.size()) +
                     " slots, expected " + std::to_string(tokens * top_k));
  std::vector<std::size_t> counts(experts, 0);
  outcome.kept.assign(tokens * top_k, 0);
  std::vector<double> mask(tokens * experts, 0.0);
  for (std::size_t t = 0; t < tokens; ++t)
    for (std::size_t k = 0; k < top_k; ++k) {
      const std::size_t slot = t * top_k + k;
      const std::size_t e = outcome.indices[slot];
      if (counts[e] < capacity) {
        ++counts[e];
        outcome.kept[slot] = 1;
        mask[t * experts + e] = 1.0;
      }
    }
  outcome.per_expert_count = std::move(counts);
  outcome.gates =
      mul(outcome.probs,
          Tensor::from_values({tokens, experts}, std::move(mask)));
}

Tensor moe_combine(const Tensor& x, const MoeParams& params,
                   const RoutingOutcome& outcome, const MoeOptions& opts) {
  const std::size_t tokens = outcome.tokens, experts = outcome.experts;
  if (x.rank() != 2 || x.rows() != tokens)
    throw ShapeError("moe_combine: tokens " + shape_str(x.shape()) +
                     " do not match outcome over " + std::to_string(tokens) +
                     " tokens");
  if (params.experts.size() != experts)
    throw ConfigError("moe_combine: " + std::to_string(params.experts.size()) +
                      " experts supplied, outcome routed over " +
                      std::to_string(experts));
  const std::size_t d = x.cols();
  for (std::size_t i = 0; i < experts; ++i) {
    const Expert& ex = params.experts[i];
    if (ex.w1.rank() != 2 || ex.w1.rows() != d || ex.w2.rank() != 2 ||
        ex.w2.cols() != d || ex.w1.cols() != ex.w2.rows())
      throw ShapeError("moe_combine: expert " + std::to_string(i) +
                       " weights " + shape_str(ex.w1.shape()) + "," +
                       shape_str(ex.w2.shape()) + " do not map " +
                       std::to_string(d) + " -> " + std::to_string(d));
  }

  // Per-token kept gate mass, only needed for the renormalization fault.
  std::vector<double> inv_mass;
  if (opts.renormalize_gates) {
    inv_mass.assign(tokens, 1.0);
    for (std::size_t t = 0; t < tokens; ++t) {
      double mass = 0.0;
      for (std::size_t k = 0; k < outcome.top_k; ++k) {
        const std::size_t slot = t * outcome.top_k + k;
        if (outcome.kept[slot])
          mass += outcome.gates.at(t, outcome.indices[slot]);
      }
      if (mass > 0.0) inv_mass[t] = 1.0 / mass;
    }
  }

  Tensor y = Tensor::zeros({tokens, d});
  for (std::size_t i = 0; i < experts; ++i) {
    std::vector<std::size_t> idx;
    for (std::size_t t = 0; t < tokens; ++t)
      for (std::size_t k = 0; k < outcome.top_k; ++k) {
        const std::size_t slot = t * outcome.top_k + k;
        if (outcome.indices[slot] == i && outcome.kept[slot])
          idx.push_back(t);
      }
    if (idx.empty()) continue;

    const Expert& ex = params.experts[i];
    Tensor input = gather_rows(x, idx);
    Tensor hidden = add(matmul(input, ex.w1), ex.b1);
    hidden = params.activation == Activation::Relu ? relu(hidden) : gelu(hidden);
    Tensor out = add(matmul(hidden, ex.w2), ex.b2);

    Tensor gate = gather_rows(slice_cols(outcome.gates, i, i + 1), idx);
    if (opts.renormalize_gates) {
      std::vector<double> f(idx.size());
      for (std::size_t r = 0; r < idx.size(); ++r) f[r] = inv_mass[idx[r]];
      gate = scale_rows(gate, Tensor::from_values({idx.size()}, std::move(f)));
    }
    y = add(y, scatter_add_rows(scale_rows(out, gate), idx, tokens));
  }
  return y;
}

MoeResult moe_forward(const Tensor& x, const MoeParams& params,
                      std::size_t top_k, double capacity_ratio, RngStream& rng,
                      bool training, const MoeOptions& opts) {
  MoeResult result;
  result.outcome = route(x, params.router, top_k, rng, training);
  const std::size_t capacity = buffer_capacity(
      capacity_ratio, top_k, 1, result.outcome.tokens, result.outcome.experts);
  dispatch_with_capacity(result.outcome, capacity);
  result.y = moe_combine(x, params, result.outcome, opts);
  return result;
}

Tensor balance_loss(const RoutingOutcome& outcome) {
  if (outcome.tokens == 0)
    throw ShapeError("balance_loss: outcome has no tokens");
  Tensor m = Tensor::from_values({outcome.experts},
                                 outcome.dispatch_fraction());
  Tensor mean_probs = reduce_mean(outcome.probs, 0);  // experts
  return mul(reduce_sum(mul(mean_probs, m)),
             static_cast<double>(outcome.experts));
}

double balance_loss_value(std::span<const double> m,
                          std::span<const double> mean_probs) {
  if (m.size() != mean_probs.size())
    throw ShapeError("balance_loss_value: size mismatch " +
                     std::to_string(m.size()) + " vs " +
                     std::to_string(mean_probs.size()));
  double acc = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) acc += m[i] * mean_probs[i];
  return acc * static_cast<double>(m.size());
}

RoutingSummary summarize_routing(const RoutingOutcome& outcome,
                                 std::size_t layer_or_group) {
  RoutingSummary s;
  s.layer_or_group = layer_or_group;
  s.expert_counts = outcome.per_expert_count;
  s.dispatch_fraction = outcome.dispatch_fraction();
  s.dropped = outcome.dropped();
  s.drop_rate = outcome.drop_rate();
  std::vector<double> mean_probs(outcome.experts, 0.0);
  for (std::size_t t = 0; t < outcome.tokens; ++t)
    for (std::size_t e = 0; e < outcome.experts; ++e)
      mean_probs[e] += outcome.probs.at(t, e);
  for (double& v : mean_probs) v /= static_cast<double>(outcome.tokens);
  s.balance = balance_loss_value(s.dispatch_fraction, mean_probs);
  return s;
}

std::vector<RoutingSummary> routing_report(
    const std::vector<RoutingOutcome>& outcomes) {
  if (outcomes.empty())
    throw ConfigError("routing_report: no routing outcomes supplied");
  std::vector<RoutingSummary> out;
  out.reserve(outcomes.size());
  for (std::size_t i = 0; i < outcomes.size(); ++i)
    out.push_back(summarize_routing(outcomes[i], i));
  return out;
}

}  // namespace widenet
