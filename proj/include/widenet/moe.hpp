#pragma once

#include <cstdint>
#include <vector>

#include "widenet/tensor.hpp"

namespace widenet {

class RngStream;

enum class Activation { Relu, Gelu };

struct RouterParams {
  Tensor w_f;  // d_model x experts
};

// Two-layer feed-forward expert: d_model -> d_ff -> d_model.
struct Expert {
  Tensor w1, b1, w2, b2;
};

struct MoeParams {
  RouterParams router;
  std::vector<Expert> experts;
  Activation activation = Activation::Gelu;
};

// Everything one routing decision produced. probs carries the
// differentiable path back to the router; indices/kept are plain bookkeeping.
struct RoutingOutcome {
  std::size_t tokens = 0;
  std::size_t experts = 0;
  std::size_t top_k = 0;
  Tensor probs;  // tokens x experts, rows sum to 1
  // tokens x experts; at most top_k nonzeros per row, each equal to the
  // corresponding probability. Dispatch zeroes the entries of dropped slots.
  // Gate values are NOT renormalized over the selected subset.
  Tensor gates;
  std::vector<std::size_t> indices;  // tokens*top_k expert ids in rank order
  std::vector<std::uint8_t> kept;    // parallel to indices; 0 = dropped
  std::vector<std::size_t> per_expert_count;  // assignments after capacity

  // Fraction of selection slots landing on each expert, before any capacity
  // drop. Sums to top_k.
  std::vector<double> dispatch_fraction() const;
  std::size_t dropped() const;
  double drop_rate() const;
};

// Softmax routing with TopK selection. Adds N(0, 1/experts^2) logit noise
// only while training (2 rng ticks per logit). Ties in probability resolve
// to the lower expert index. Throws NumericError if logits are not finite.
RoutingOutcome route(const Tensor& x, const RouterParams& router,
                     std::size_t top_k, RngStream& rng, bool training);

// ceil(ratio * top_k * batch * seq_len / experts), with quotients within
// 1e-9 of an integer treated as exact so e.g. ratio 1.2 over 40 slots and 8
// experts yields 6, not 7.
std::size_t buffer_capacity(double ratio, std::size_t top_k,
                            std::size_t batch, std::size_t seq_len,
                            std::size_t experts);

// First-come-first-served capacity enforcement: tokens claim expert slots in
// batch order, and within one token in rank order. Losers get kept = 0 and a
// zeroed gate column entry; nothing is rerouted.
void dispatch_with_capacity(RoutingOutcome& outcome, std::size_t capacity);

struct MoeOptions {
  // Debugging fault: rescale each token's kept gates to sum to 1 before the
  // combine. Correct behavior keeps raw softmax mass, so verification must
  // catch this when it is switched on.
  bool renormalize_gates = false;
};

struct MoeResult {
  Tensor y;  // tokens x d_model
  RoutingOutcome outcome;
};

// Weighted combine of expert outputs for an already-dispatched outcome.
Tensor moe_combine(const Tensor& x, const MoeParams& params,
                   const RoutingOutcome& outcome,
                   const MoeOptions& opts = {});

// route + capacity + combine in one step. Capacity derives from
// buffer_capacity(ratio, top_k, 1, tokens, experts); callers with a batch
// dimension flatten it into the token axis first.
MoeResult moe_forward(const Tensor& x, const MoeParams& params,
                      std::size_t top_k, double capacity_ratio, RngStream& rng,
                      bool training, const MoeOptions& opts = {});

// experts * sum_i m_i * mean_t P[t,i]; differentiable through probs only.
Tensor balance_loss(const RoutingOutcome& outcome);

// Same quantity from plain vectors, for closed-form checks.
double balance_loss_value(std::span<const double> m,
                          std::span<const double> mean_probs);

struct RoutingSummary {
  std::size_t layer_or_group = 0;
  std::vector<std::size_t> expert_counts;  // post-capacity assignments
  std::vector<double> dispatch_fraction;   // pre-capacity m
  std::size_t dropped = 0;
  double drop_rate = 0.0;
  double balance = 0.0;
};

RoutingSummary summarize_routing(const RoutingOutcome& outcome,
                                 std::size_t layer_or_group);
// One summary per outcome; an empty input is an error.
std::vector<RoutingSummary> routing_report(
    const std::vector<RoutingOutcome>& outcomes);

}  // namespace widenet
