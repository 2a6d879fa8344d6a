#pragma once

// Independent reference implementations used as oracles by the tests. These
// deliberately avoid the library's kernels: accumulation runs in long double
// with naive loop nests so a bug in an optimized path cannot hide in its own
// mirror image.

#include <cmath>
#include <cstddef>
#include <vector>

namespace ref {

// a: m x k, b: k x n, row-major. Returns m x n.
inline std::vector<double> matmul(const std::vector<double>& a,
                                  const std::vector<double>& b, std::size_t m,
                                  std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      long double acc = 0.0L;
      for (std::size_t t = 0; t < k; ++t)
        acc += static_cast<long double>(a[i * k + t]) *
               static_cast<long double>(b[t * n + j]);
      c[i * n + j] = static_cast<double>(acc);
    }
  return c;
}

// One probability row from logits, max-subtracted, long double throughout.
inline std::vector<double> softmax_row(const std::vector<double>& logits) {
  long double mx = logits[0];
  for (double v : logits) mx = std::max<long double>(mx, v);
  std::vector<long double> e(logits.size());
  long double denom = 0.0L;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    e[i] = std::exp(static_cast<long double>(logits[i]) - mx);
    denom += e[i];
  }
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i)
    out[i] = static_cast<double>(e[i] / denom);
  return out;
}

// Population-variance row normalization.
inline std::vector<double> layer_norm_row(const std::vector<double>& row,
                                          const std::vector<double>& gamma,
                                          const std::vector<double>& beta,
                                          double eps) {
  const std::size_t c = row.size();
  long double mean = 0.0L;
  for (double v : row) mean += v;
  mean /= static_cast<long double>(c);
  long double var = 0.0L;
  for (double v : row) {
    const long double d = v - mean;
    var += d * d;
  }
  var /= static_cast<long double>(c);
  const long double s = 1.0L / std::sqrt(var + static_cast<long double>(eps));
  std::vector<double> out(c);
  for (std::size_t j = 0; j < c; ++j)
    out[j] = static_cast<double>((row[j] - mean) * s) * gamma[j] + beta[j];
  return out;
}

inline double gelu(double v) {
  return 0.5 * v * (1.0 + std::erf(v * 0.70710678118654752440));
}

inline double relu(double v) { return v > 0.0 ? v : 0.0; }

// One token through a two-layer expert, scalar loops only.
// w1: d x f, b1: f, w2: f x d, b2: d.
inline std::vector<double> expert_row(const std::vector<double>& x,
                                      const std::vector<double>& w1,
                                      const std::vector<double>& b1,
                                      const std::vector<double>& w2,
                                      const std::vector<double>& b2,
                                      bool use_gelu) {
  const std::size_t d = x.size();
  const std::size_t f = b1.size();
  std::vector<double> h(f, 0.0);
  for (std::size_t j = 0; j < f; ++j) {
    long double acc = b1[j];
    for (std::size_t i = 0; i < d; ++i) acc += (long double)x[i] * w1[i * f + j];
    h[j] = use_gelu ? gelu(static_cast<double>(acc))
                    : relu(static_cast<double>(acc));
  }
  std::vector<double> y(d, 0.0);
  for (std::size_t j = 0; j < d; ++j) {
    long double acc = b2[j];
    for (std::size_t i = 0; i < f; ++i) acc += (long double)h[i] * w2[i * d + j];
    y[j] = static_cast<double>(acc);
  }
  return y;
}

// Single-sequence multi-head attention, scalar loops and per-row softmax.
// All weight matrices are d x d row-major, biases length d.
inline std::vector<double> mha_single(
    const std::vector<double>& x, std::size_t seq, std::size_t d,
    std::size_t heads, const std::vector<double>& wq,
    const std::vector<double>& bq, const std::vector<double>& wk,
    const std::vector<double>& bk, const std::vector<double>& wv,
    const std::vector<double>& bv, const std::vector<double>& wo,
    const std::vector<double>& bo) {
  auto project = [&](const std::vector<double>& w,
                     const std::vector<double>& b) {
    std::vector<double> out = matmul(x, w, seq, d, d);
    for (std::size_t t = 0; t < seq; ++t)
      for (std::size_t j = 0; j < d; ++j) out[t * d + j] += b[j];
    return out;
  };
  const std::vector<double> q = project(wq, bq);
  const std::vector<double> k = project(wk, bk);
  const std::vector<double> v = project(wv, bv);

  const std::size_t dk = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<double> ctx(seq * d, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t t = 0; t < seq; ++t) {
      std::vector<double> row(seq);
      for (std::size_t u = 0; u < seq; ++u) {
        long double dot = 0.0L;
        for (std::size_t j = 0; j < dk; ++j)
          dot += (long double)q[t * d + h * dk + j] * k[u * d + h * dk + j];
        row[u] = static_cast<double>(dot) * scale;
      }
      const std::vector<double> attn = softmax_row(row);
      for (std::size_t j = 0; j < dk; ++j) {
        long double acc = 0.0L;
        for (std::size_t u = 0; u < seq; ++u)
          acc += (long double)attn[u] * v[u * d + h * dk + j];
        ctx[t * d + h * dk + j] = static_cast<double>(acc);
      }
    }
  }
  std::vector<double> out = matmul(ctx, wo, seq, d, d);
  for (std::size_t t = 0; t < seq; ++t)
    for (std::size_t j = 0; j < d; ++j) out[t * d + j] += bo[j];
  return out;
}

}  // namespace ref
