#include "widenet/verify.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <sstream>

#include "widenet/analysis.hpp"
#include "widenet/model.hpp"
#include "widenet/moe.hpp"
#include "widenet/rng.hpp"
#include "widenet/train.hpp"

namespace widenet {

namespace {

std::string fmt(double v) {
  std::ostringstream out;
  out.precision(3);
  out << std::scientific << v;
  return out.str();
}

// Relative error with an absolute floor: central differences on an O(1)
// loss resolve roughly 1e-10 absolute, so coordinates whose true gradient
// sits below the floor are compared absolutely (1e-5 * floor) instead of
// drowning in cancellation noise.
double rel_err(double a, double b) {
  return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), 1e-4});
}

Tensor random_matrix(Shape shape, RngStream& rng, bool requires_grad) {
  Tensor t = Tensor::zeros(std::move(shape), requires_grad);
  for (double& v : t.mutable_data()) v = rng.uniform() * 2.0 - 1.0;
  return t;
}

// Smallest probability gap around each token's selection boundary. Finite
// difference probes must stay well inside this margin or a perturbation
// could flip the routing decision itself.
double selection_margin(const RoutingOutcome& o) {
  double margin = std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t < o.tokens; ++t) {
    std::vector<double> row(o.experts);
    for (std::size_t e = 0; e < o.experts; ++e) row[e] = o.probs.at(t, e);
    std::sort(row.begin(), row.end(), std::greater<>());
    for (std::size_t r = 0; r < o.top_k && r + 1 < o.experts; ++r)
      margin = std::min(margin, row[r] - row[r + 1]);
  }
  return margin;
}

// ---- gradient fidelity ------------------------------------------------------

CheckResult check_gradient_fidelity(std::uint64_t seed) {
  CheckResult result{"gradient-fidelity", false, ""};

  WideNetConfig cfg;
  cfg.depth = 2;
  cfg.groups = 2;
  cfg.d_model = 8;
  cfg.d_ff = 16;
  cfg.heads = 2;
  cfg.experts = 4;
  cfg.top_k = 2;
  cfg.capacity_ratio = 1.2;
  cfg.balance_weight = 0.01;
  cfg.classes = 3;
  cfg.embed.channels = 4;
  cfg.embed.image_h = 4;
  cfg.embed.image_w = 1;

  // Look for an instance whose routing decisions sit away from ties.
  ModelParams params = build_params(cfg);
  Batch batch;
  std::uint64_t noise_seed = 0;
  bool found = false;
  for (std::uint64_t attempt = 0; attempt < 64 && !found; ++attempt) {
    RngStream init_rng(seed * 1000 + attempt);
    init_params(params, cfg, init_rng);
    RngStream data_rng(seed * 31 + attempt);
    batch.input = random_matrix({2, 4, 4, 1}, data_rng, false);
    batch.labels = {0, 2};
    noise_seed = seed * 77 + attempt + 1;

    NoGradGuard guard;
    RngStream probe(noise_seed);
    ForwardResult fwd = model_forward(batch, params, cfg, probe, true);
    double margin = std::numeric_limits<double>::infinity();
    for (const RoutingOutcome& o : fwd.outcomes)
      margin = std::min(margin, selection_margin(o));
    found = margin > 2e-3;
  }
  if (!found) {
    result.detail = "no well-separated routing instance found";
    return result;
  }

  auto loss_value = [&]() {
    RngStream noise(noise_seed);  // frozen: identical draws every call
    ForwardResult fwd = model_forward(batch, params, cfg, noise, true);
    Tensor l = cross_entropy(fwd.logits, batch.labels, 0.0);
    return total_loss(l, fwd.outcomes, cfg.balance_weight);
  };

  std::vector<NamedParam> named = params.named_parameters();
  for (NamedParam& p : named) p.tensor.zero_grad();
  backward(loss_value());

  double worst = 0.0;
  std::string worst_at;
  const double h = 1e-5;
  std::size_t probes = 0;
  for (NamedParam& p : named) {
    Tensor t = p.tensor;
    auto values = t.mutable_data();
    auto grads = t.grad();
    for (std::size_t i = 0; i < values.size(); ++i) {
      ++probes;
      const double save = values[i];
      NoGradGuard guard;
      values[i] = save + h;
      const double up = loss_value().value();
      values[i] = save - h;
      const double down = loss_value().value();
      values[i] = save;
      const double fd = (up - down) / (2.0 * h);
      const double err = rel_err(grads[i], fd);
      if (err > worst) {
        worst = err;
        worst_at = p.name + "[" + std::to_string(i) + "]";
      }
    }
  }

  result.passed = worst <= 1e-5;
  result.detail = std::to_string(probes) + " coordinates, max rel err " +
                  fmt(worst) + (result.passed ? "" : " at " + worst_at);
  return result;
}

// ---- balance loss closed forms ----------------------------------------------

CheckResult check_balance_values(std::uint64_t seed) {
  CheckResult result{"balance-loss-values", false, ""};
  std::vector<double> u4(4, 0.25);
  const double uniform = balance_loss_value(u4, u4);
  std::vector<double> hot{1.0, 0.0, 0.0, 0.0};
  const double collapsed = balance_loss_value(hot, hot);
  std::vector<double> m{0.75, 0.25};
  std::vector<double> p{0.6, 0.4};
  const double skewed = balance_loss_value(m, p);

  bool ok = std::fabs(uniform - 1.0) <= 1e-9 &&
            std::fabs(collapsed - 4.0) <= 1e-9 &&
            std::fabs(skewed - 1.1) <= 1e-12;

  // E * sum p^2 >= 1 for any distribution: uniform is the floor
  RngStream rng(seed ^ 0xBA1A);
  double low = std::numeric_limits<double>::infinity();
  for (int trial = 0; trial < 200 && ok; ++trial) {
    const std::size_t e = 2 + static_cast<std::size_t>(rng.uniform() * 7.0);
    std::vector<double> q(e);
    double sum = 0.0;
    for (double& v : q) sum += (v = rng.uniform());
    for (double& v : q) v /= sum;
    const double val = balance_loss_value(q, q);
    low = std::min(low, val);
    ok = val >= 1.0 - 1e-12;
  }
  result.passed = ok;
  result.detail = ok ? "worked values exact, random floor " + fmt(low)
                     : "closed-form value off: uniform " + fmt(uniform) +
                           ", collapsed " + fmt(collapsed) + ", skewed " +
                           fmt(skewed);
  return result;
}

// ---- routing sparsity and capacity -------------------------------------------

CheckResult check_routing_invariants(std::uint64_t seed) {
  CheckResult result{"routing-sparsity-capacity", false, ""};
  RngStream rng(seed ^ 0x5AFE);
  std::size_t violations = 0;
  std::string first;

  auto violate = [&](const std::string& what) {
    ++violations;
    if (first.empty()) first = what;
  };

  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t t = 2 + static_cast<std::size_t>(rng.uniform() * 14.0);
    const std::size_t d = 3 + static_cast<std::size_t>(rng.uniform() * 6.0);
    const std::size_t e = 2 + static_cast<std::size_t>(rng.uniform() * 7.0);
    const std::size_t k =
        1 + static_cast<std::size_t>(rng.uniform() * static_cast<double>(e));
    const double c = 1.0 + rng.uniform() * 1.5;
    const bool training = rng.uniform() > 0.5;

    Tensor x = random_matrix({t, d}, rng, false);
    RouterParams router{random_matrix({d, e}, rng, false)};
    RoutingOutcome outcome = route(x, router, k, rng, training);

    for (std::size_t tok = 0; tok < t; ++tok) {
      std::vector<std::size_t> chosen(outcome.indices.begin() + tok * k,
                                      outcome.indices.begin() + (tok + 1) * k);
      std::vector<std::size_t> uniq = chosen;
      std::sort(uniq.begin(), uniq.end());
      if (std::adjacent_find(uniq.begin(), uniq.end()) != uniq.end())
        violate("duplicate expert for one token");
      double min_sel = std::numeric_limits<double>::infinity();
      for (std::size_t sel : chosen)
        min_sel = std::min(min_sel, outcome.probs.at(tok, sel));
      for (std::size_t other = 0; other < e; ++other)
        if (std::find(chosen.begin(), chosen.end(), other) == chosen.end() &&
            outcome.probs.at(tok, other) > min_sel)
          violate("unselected expert dominates a selected one");
    }

    const std::size_t cap = buffer_capacity(c, k, 1, t, e);
    dispatch_with_capacity(outcome, cap);
    for (std::size_t ex = 0; ex < e; ++ex)
      if (outcome.per_expert_count[ex] > cap)
        violate("kept count above the buffer capacity");
    std::size_t kept_total = 0;
    for (std::uint8_t f : outcome.kept) kept_total += f;
    if (kept_total + outcome.dropped() != t * k)
      violate("kept + dropped does not cover all slots");
    for (std::size_t s = 0; s < outcome.indices.size(); ++s)
      if (!outcome.kept[s] &&
          outcome.gates.at(s / k, outcome.indices[s]) != 0.0)
        violate("dropped slot kept a nonzero gate");
  }

  // exact ties: a zero router always selects the lowest indices
  Tensor x = random_matrix({4, 5}, rng, false);
  RouterParams zero{Tensor::zeros({5, 6})};
  RngStream quiet(1);
  RoutingOutcome tie = route(x, zero, 3, quiet, false);
  for (std::size_t tok = 0; tok < 4; ++tok)
    for (std::size_t r = 0; r < 3; ++r)
      if (tie.indices[tok * 3 + r] != r) violate("tie not broken low");

  result.passed = violations == 0;
  result.detail = result.passed
                      ? "300 random instances clean"
                      : std::to_string(violations) + " violations, first: " +
                            first;
  return result;
}

// ---- group routing consistency ------------------------------------------------

CheckResult check_group_routing(std::uint64_t seed) {
  CheckResult result{"group-routing-consistency", false, ""};
  WideNetConfig cfg;
  cfg.depth = 4;
  cfg.d_model = 8;
  cfg.d_ff = 16;
  cfg.heads = 2;
  cfg.experts = 4;
  cfg.top_k = 2;
  cfg.classes = 3;
  cfg.embed.channels = 4;
  cfg.embed.image_h = 4;
  cfg.embed.image_w = 1;

  std::string issue;
  for (std::size_t g : {std::size_t{1}, std::size_t{2}, std::size_t{4}}) {
    cfg.groups = g;
    ModelParams params = build_params(cfg);
    RngStream init_rng(seed + g);
    init_params(params, cfg, init_rng);
    Batch batch;
    RngStream data_rng(seed ^ g);
    batch.input = random_matrix({2, 4, 4, 1}, data_rng, false);
    batch.labels = {0, 1};

    NoGradGuard guard;
    RngStream fwd_rng(7);
    ForwardTrace trace;
    ForwardResult fwd = model_forward(batch, params, cfg, fwd_rng, false, &trace);

    std::size_t routed = 0;
    for (const BlockTrace& b : trace.blocks) routed += b.routed ? 1 : 0;
    if (routed != g || fwd.outcomes.size() != g) {
      issue = "G=" + std::to_string(g) + ": " + std::to_string(routed) +
              " routing ops";
      break;
    }
    const std::size_t per = cfg.depth / g;
    for (std::size_t j = 0; j < cfg.depth && issue.empty(); ++j) {
      const BlockTrace& b = trace.blocks[j];
      const BlockTrace& lead = trace.blocks[(j / per) * per];
      if (b.group != j / per)
        issue = "G=" + std::to_string(g) + ": wrong group label";
      else if (b.indices != lead.indices || b.kept != lead.kept)
        issue = "G=" + std::to_string(g) + ": block " + std::to_string(j) +
                " disagrees with its group leader";
    }
    if (!issue.empty()) break;
  }

  result.passed = issue.empty();
  result.detail = result.passed ? "G in {1,2,4} consistent" : issue;
  return result;
}

// ---- divergence metric vs brute force ------------------------------------------

CheckResult check_divergence_oracle(std::uint64_t seed) {
  CheckResult result{"ln-divergence-oracle", false, ""};
  RngStream rng(seed ^ 0xD1FF);
  double worst = 0.0;
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t n = 2 + static_cast<std::size_t>(rng.uniform() * 5.0);
    const std::size_t m = 1 + static_cast<std::size_t>(rng.uniform() * 16.0);
    std::vector<std::vector<double>> blocks(n, std::vector<double>(m));
    for (auto& block : blocks)
      for (double& v : block) v = rng.uniform() * 4.0 - 2.0;

    long double brute = 0.0L;
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < n; ++k) {
        if (j == k) continue;
        for (std::size_t a = 0; a < m; ++a)
          for (std::size_t b = 0; b < m; ++b)
            brute += std::fabs(blocks[j][a] - blocks[k][b]);
      }
    const double slow = static_cast<double>(
        brute / static_cast<long double>(m * m * n * (n - 1)));
    worst = std::max(worst, std::fabs(cross_block_divergence(blocks) - slow));
  }
  result.passed = worst <= 1e-12;
  result.detail = "max |fast - brute| " + fmt(worst);
  return result;
}

// ---- combine oracle --------------------------------------------------------------

CheckResult check_combine_oracle(std::uint64_t seed, bool renormalize) {
  CheckResult result{"moe-combine-oracle", false, ""};
  RngStream rng(seed ^ 0xC0B1);
  const std::size_t t = 12, d = 6, dff = 10, e = 3, k = 2;

  Tensor x = random_matrix({t, d}, rng, false);
  MoeParams params;
  params.activation = Activation::Gelu;
  params.router.w_f = random_matrix({d, e}, rng, false);
  for (std::size_t i = 0; i < e; ++i)
    params.experts.push_back({random_matrix({d, dff}, rng, false),
                              random_matrix({dff}, rng, false),
                              random_matrix({dff, d}, rng, false),
                              random_matrix({d}, rng, false)});

  NoGradGuard guard;
  RngStream moe_rng(seed ^ 0x7);
  MoeOptions opts;
  opts.renormalize_gates = renormalize;
  MoeResult res = moe_forward(x, params, k, 1.5, moe_rng, false, opts);

  // scalar reference: honest gate-weighted expert outputs
  auto expert_eval = [&](std::size_t which, std::size_t tok,
                         std::vector<double>& out) {
    const Expert& ex = params.experts[which];
    std::vector<double> hidden(dff);
    for (std::size_t j = 0; j < dff; ++j) {
      double acc = ex.b1.data()[j];
      for (std::size_t c = 0; c < d; ++c)
        acc += x.at(tok, c) * ex.w1.at(c, j);
      hidden[j] = 0.5 * acc * (1.0 + std::erf(acc / std::sqrt(2.0)));
    }
    for (std::size_t c = 0; c < d; ++c) {
      double acc = ex.b2.data()[c];
      for (std::size_t j = 0; j < dff; ++j) acc += hidden[j] * ex.w2.at(j, c);
      out[c] = acc;
    }
  };

  double worst = 0.0;
  std::vector<double> eout(d);
  for (std::size_t tok = 0; tok < t; ++tok) {
    std::vector<double> want(d, 0.0);
    for (std::size_t r = 0; r < k; ++r) {
      const std::size_t slot = tok * k + r;
      if (!res.outcome.kept[slot]) continue;
      const std::size_t ex = res.outcome.indices[slot];
      expert_eval(ex, tok, eout);
      const double gate = res.outcome.probs.at(tok, ex);
      for (std::size_t c = 0; c < d; ++c) want[c] += gate * eout[c];
    }
    for (std::size_t c = 0; c < d; ++c)
      worst = std::max(worst, std::fabs(res.y.at(tok, c) - want[c]));
  }

  result.passed = worst <= 1e-11;
  result.detail = "max abs deviation " + fmt(worst);
  return result;
}

// ---- determinism ------------------------------------------------------------------

CheckResult check_determinism(std::uint64_t seed) {
  CheckResult result{"determinism", false, ""};

  // counter-based rng: any value is a pure function of (seed, counter)
  RngStream a(seed);
  std::vector<double> first;
  for (int i = 0; i < 16; ++i) first.push_back(a.uniform());
  RngStream b(seed);
  for (int i = 0; i < 16; ++i)
    if (b.uniform() != first[static_cast<std::size_t>(i)]) {
      result.detail = "rng stream not reproducible";
      return result;
    }

  WideNetConfig cfg;
  cfg.depth = 2;
  cfg.groups = 2;
  cfg.d_model = 8;
  cfg.d_ff = 16;
  cfg.heads = 2;
  cfg.experts = 4;
  cfg.top_k = 2;
  cfg.classes = 3;
  cfg.dropout = 0.1;
  cfg.embed.channels = 4;
  cfg.embed.image_h = 4;
  cfg.embed.image_w = 1;
  ModelParams params = build_params(cfg);
  RngStream init_rng(seed + 5);
  init_params(params, cfg, init_rng);
  Batch batch;
  RngStream data_rng(seed + 6);
  batch.input = random_matrix({2, 4, 4, 1}, data_rng, false);
  batch.labels = {0, 1};

  NoGradGuard guard;
  RngStream r1(42), r2(42);
  ForwardResult f1 = model_forward(batch, params, cfg, r1, true);
  ForwardResult f2 = model_forward(batch, params, cfg, r2, true);
  auto v1 = f1.logits.data();
  auto v2 = f2.logits.data();
  for (std::size_t i = 0; i < v1.size(); ++i)
    if (v1[i] != v2[i]) {
      result.detail = "same-seed forward passes disagree";
      return result;
    }
  if (r1.counter() != r2.counter()) {
    result.detail = "rng consumption differs between identical passes";
    return result;
  }

  result.passed = true;
  result.detail = "seeded replays bit-identical";
  return result;
}

}  // namespace

std::vector<CheckResult> run_verification(const VerifyOptions& opts) {
  std::vector<CheckResult> results;
  results.push_back(check_gradient_fidelity(opts.seed));
  results.push_back(check_balance_values(opts.seed));
  results.push_back(check_routing_invariants(opts.seed));
  results.push_back(check_group_routing(opts.seed));
  results.push_back(check_divergence_oracle(opts.seed));
  results.push_back(check_combine_oracle(opts.seed, opts.renormalize_gates));
  results.push_back(check_determinism(opts.seed));
  return results;
}

bool verify_and_report(const VerifyOptions& opts, std::ostream& out) {
  const std::vector<CheckResult> results = run_verification(opts);
  std::size_t passed = 0;
  for (const CheckResult& r : results) {
    out << (r.passed ? "[PASS] " : "[FAIL] ") << r.name;
    if (!r.detail.empty()) out << " (" << r.detail << ")";
    out << '\n';
    passed += r.passed ? 1 : 0;
  }
  out << passed << "/" << results.size() << " checks passed\n";
  return passed == results.size();
}

}  // namespace widenet
