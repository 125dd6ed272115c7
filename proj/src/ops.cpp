// SPDX-License-Identifier: Apache-2.0
#include "udapter/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "udapter/error.hpp"

namespace udapter {

namespace {

double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_to_string(t.shape()));
  }
}

std::size_t last_dim(const Tensor& t, const char* op) {
  if (t.rank() == 0) throw DimensionError(std::string(op) + ": scalar input");
  return t.shape().back();
}

enum class Binary { kAdd, kSub, kMul };

Tensor binary(const Tensor& a, const Tensor& b, Binary kind, const char* name) {
  const bool a_scalar = a.numel() == 1;
  const bool b_scalar = b.numel() == 1;
  Shape out_shape;
  if (a.shape() == b.shape()) {
    out_shape = a.shape();
  } else if (b_scalar) {
    out_shape = a.shape();
  } else if (a_scalar) {
    out_shape = b.shape();
  } else {
    throw DimensionError(std::string(name) + ": shape mismatch " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
  }
  const std::size_t n = shape_numel(out_shape);
  const auto av = a.values();
  const auto bv = b.values();
  const std::size_t sa = a.numel() == n ? 1 : 0;
  const std::size_t sb = b.numel() == n ? 1 : 0;
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = av[i * sa];
    const double y = bv[i * sb];
    switch (kind) {
      case Binary::kAdd: out[i] = x + y; break;
      case Binary::kSub: out[i] = x - y; break;
      case Binary::kMul: out[i] = x * y; break;
    }
  }
  return Tensor::make_op(name, out_shape, std::move(out), {a, b},
                         [a, b, kind, sa, sb, n](std::span<const double> g, std::span<const double>) mutable {
                           if (a.requires_grad()) {
                             auto ga = a.grad_buffer();
                             const auto bv = b.values();
                             for (std::size_t i = 0; i < n; ++i) {
                               const double d = kind == Binary::kMul ? g[i] * bv[i * sb] : g[i];
                               ga[i * sa] += d;
                             }
                           }
                           if (b.requires_grad()) {
                             auto gb = b.grad_buffer();
                             const auto av = a.values();
                             for (std::size_t i = 0; i < n; ++i) {
                               double d = g[i];
                               if (kind == Binary::kSub) d = -d;
                               if (kind == Binary::kMul) d = g[i] * av[i * sa];
                               gb[i * sb] += d;
                             }
                           }
                         });
}

template <typename Forward, typename Derivative>
Tensor unary(const Tensor& x, const char* name, Forward f, Derivative df) {
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return Tensor::make_op(name, x.shape(), std::move(out), {x},
                         [x, df](std::span<const double> g, std::span<const double> y) mutable {
                           auto gx = x.grad_buffer();
                           const auto xv = x.values();
                           for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xv[i], y[i]);
                         });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dims differ " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
  }
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) axpy(av[i * k + p], &bv[p * n], &out[i * n], n);
  }
  return Tensor::make_op("matmul", {m, n}, std::move(out), {a, b},
                         [a, b, m, k, n](std::span<const double> g, std::span<const double>) mutable {
                           const auto av = a.values();
                           const auto bv = b.values();
                           if (a.requires_grad()) {
                             auto ga = a.grad_buffer();
                             for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += dot(&g[i * n], &bv[p * n], n);
                           }
                           if (b.requires_grad()) {
                             auto gb = b.grad_buffer();
                             for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t p = 0; p < k; ++p) axpy(av[i * k + p], &g[i * n], &gb[p * n], n);
                           }
                         });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(weight, 2, "linear");
  const std::size_t in = last_dim(x, "linear");
  const std::size_t out_dim = weight.dim(0);
  if (weight.dim(1) != in) {
    throw DimensionError("linear: input " + shape_to_string(x.shape()) + " vs weight " +
                         shape_to_string(weight.shape()));
  }
  if (bias.defined() && bias.shape() != Shape{out_dim}) {
    throw DimensionError("linear: bias " + shape_to_string(bias.shape()) + " for " +
                         std::to_string(out_dim) + " outputs");
  }
  const std::size_t rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out_dim;
  const auto xv = x.values();
  const auto wv = weight.values();
  std::vector<double> out(rows * out_dim);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t o = 0; o < out_dim; ++o) {
      const double base = bias.defined() ? bias.values()[o] : 0.0;
      out[r * out_dim + o] = base + dot(&xv[r * in], &wv[o * in], in);
    }
  }
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return Tensor::make_op(
      "linear", std::move(out_shape), std::move(out), inputs,
      [x, weight, bias, rows, in, out_dim](std::span<const double> g, std::span<const double>) mutable {
        const auto xv = x.values();
        const auto wv = weight.values();
        if (x.requires_grad()) {
          auto gx = x.grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t o = 0; o < out_dim; ++o) axpy(g[r * out_dim + o], &wv[o * in], &gx[r * in], in);
        }
        if (weight.requires_grad()) {
          auto gw = weight.grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t o = 0; o < out_dim; ++o) axpy(g[r * out_dim + o], &xv[r * in], &gw[o * in], in);
        }
        if (bias.defined() && bias.requires_grad()) {
          auto gb = bias.grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t o = 0; o < out_dim; ++o) gb[o] += g[r * out_dim + o];
        }
      });
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::kAdd, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::kSub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::kMul, "mul"); }

Tensor scale(const Tensor& x, double factor) {
  return unary(
      x, "scale", [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor tanh(const Tensor& x) {
  return unary(
      x, "tanh", [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor gelu(const Tensor& x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  return unary(
      x, "gelu",
      [](double v) { return 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v))); },
      [](double v, double) {
        const double t = std::tanh(kC * (v + kA * v * v * v));
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kC * (1.0 + 3.0 * kA * v * v);
      });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return Tensor::make_op("sum", {}, {s}, {x}, [x](std::span<const double> g, std::span<const double>) mutable {
    for (double& v : x.grad_buffer()) v += g[0];
  });
}

Tensor mean(const Tensor& x) {
  const double n = static_cast<double>(x.numel());
  double s = 0.0;
  for (double v : x.values()) s += v;
  return Tensor::make_op("mean", {}, {s / n}, {x},
                         [x, n](std::span<const double> g, std::span<const double>) mutable {
                           for (double& v : x.grad_buffer()) v += g[0] / n;
                         });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_to_string(x.shape()) + " to " + shape_to_string(shape));
  }
  const auto xv = x.values();
  return Tensor::make_op("reshape", std::move(shape), std::vector<double>(xv.begin(), xv.end()), {x},
                         [x](std::span<const double> g, std::span<const double>) mutable {
                           auto gx = x.grad_buffer();
                           for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                         });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t h = last_dim(x, "layer_norm");
  if (gain.shape() != Shape{h} || bias.shape() != Shape{h}) {
    throw DimensionError("layer_norm: affine params must be [" + std::to_string(h) + "]");
  }
  const std::size_t rows = x.numel() / h;
  const auto xv = x.values();
  const auto gv = gain.values();
  const auto bv = bias.values();
  std::vector<double> xhat(x.numel());
  std::vector<double> rstd(rows);
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = &xv[r * h];
    double mu = 0.0;
    for (std::size_t i = 0; i < h; ++i) mu += row[i];
    mu /= static_cast<double>(h);
    double var = 0.0;
    for (std::size_t i = 0; i < h; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<double>(h);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < h; ++i) {
      xhat[r * h + i] = (row[i] - mu) * rstd[r];
      out[r * h + i] = gv[i] * xhat[r * h + i] + bv[i];
    }
  }
  return Tensor::make_op(
      "layer_norm", x.shape(), std::move(out), {x, gain, bias},
      [x, gain, bias, h, rows, xhat = std::move(xhat), rstd = std::move(rstd)](
          std::span<const double> g, std::span<const double>) mutable {
        const auto gv = gain.values();
        if (gain.requires_grad()) {
          auto gg = gain.grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < h; ++i) gg[i] += g[r * h + i] * xhat[r * h + i];
        }
        if (bias.requires_grad()) {
          auto gb = bias.grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < h; ++i) gb[i] += g[r * h + i];
        }
        if (x.requires_grad()) {
          auto gx = x.grad_buffer();
          const double inv_h = 1.0 / static_cast<double>(h);
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t i = 0; i < h; ++i) {
              const double d = g[r * h + i] * gv[i];
              mean_d += d;
              mean_dx += d * xhat[r * h + i];
            }
            mean_d *= inv_h;
            mean_dx *= inv_h;
            for (std::size_t i = 0; i < h; ++i) {
              const double d = g[r * h + i] * gv[i];
              gx[r * h + i] += rstd[r] * (d - mean_d - xhat[r * h + i] * mean_dx);
            }
          }
        }
      });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  require_rank(logits, 2, "softmax_cross_entropy");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(n) + " rows");
  }
  if (n == 0) throw DimensionError("softmax_cross_entropy: empty batch");
  const auto zv = logits.values();
  std::vector<double> probs(n * c);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= c) {
      throw IndexError("label " + std::to_string(labels[i]) + " out of range for " + std::to_string(c) +
                       " classes");
    }
    const double* row = &zv[i * c];
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(row[j] - lse);
    loss += lse - row[labels[i]];
  }
  loss /= static_cast<double>(n);
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return Tensor::make_op("softmax_cross_entropy", {}, {loss}, {logits},
                         [logits, probs = std::move(probs), lab = std::move(lab), n, c](
                             std::span<const double> g, std::span<const double>) mutable {
                           auto gz = logits.grad_buffer();
                           const double s = g[0] / static_cast<double>(n);
                           for (std::size_t i = 0; i < n; ++i) {
                             for (std::size_t j = 0; j < c; ++j) {
                               const double onehot = j == lab[i] ? 1.0 : 0.0;
                               gz[i * c + j] += s * (probs[i * c + j] - onehot);
                             }
                           }
                         });
}

Tensor embedding(const Tensor& table, std::span<const std::uint32_t> ids) {
  require_rank(table, 2, "embedding");
  const std::size_t vocab = table.dim(0), h = table.dim(1);
  const auto tv = table.values();
  std::vector<double> out(ids.size() * h);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= vocab) {
      throw IndexError("token id " + std::to_string(ids[r]) + " out of range for vocab " + std::to_string(vocab));
    }
    std::copy_n(&tv[ids[r] * h], h, &out[r * h]);
  }
  std::vector<std::uint32_t> idv(ids.begin(), ids.end());
  return Tensor::make_op("embedding", {ids.size(), h}, std::move(out), {table},
                         [table, idv = std::move(idv), h](std::span<const double> g, std::span<const double>) mutable {
                           auto gt = table.grad_buffer();
                           for (std::size_t r = 0; r < idv.size(); ++r) axpy(1.0, &g[r * h], &gt[idv[r] * h], h);
                         });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  const std::size_t w = last_dim(x, "gather_rows");
  const std::size_t n = x.numel() / w;
  const auto xv = x.values();
  std::vector<double> out(rows.size() * w);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n) {
      throw IndexError("gather_rows: row " + std::to_string(rows[r]) + " of " + std::to_string(n));
    }
    std::copy_n(&xv[rows[r] * w], w, &out[r * w]);
  }
  std::vector<std::size_t> rv(rows.begin(), rows.end());
  return Tensor::make_op("gather_rows", {rows.size(), w}, std::move(out), {x},
                         [x, rv = std::move(rv), w](std::span<const double> g, std::span<const double>) mutable {
                           auto gx = x.grad_buffer();
                           for (std::size_t r = 0; r < rv.size(); ++r) axpy(1.0, &g[r * w], &gx[rv[r] * w], w);
                         });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 std::span<const std::uint8_t> key_mask) {
  require_rank(q, 3, "attention");
  if (k.shape() != q.shape() || v.shape() != q.shape()) {
    throw DimensionError("attention: q/k/v shapes differ");
  }
  const std::size_t batch = q.dim(0), seq = q.dim(1), h = q.dim(2);
  if (heads == 0 || h % heads != 0) {
    throw DimensionError("attention: hidden " + std::to_string(h) + " not divisible by " +
                         std::to_string(heads) + " heads");
  }
  if (!key_mask.empty() && key_mask.size() != batch * seq) {
    throw DimensionError("attention: key mask size " + std::to_string(key_mask.size()));
  }
  const std::size_t dh = h / heads;
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto qv = q.values();
  const auto kv = k.values();
  const auto vv = v.values();
  // probs[b][head][i][j]
  std::vector<double> probs(batch * heads * seq * seq, 0.0);
  std::vector<double> out(q.numel(), 0.0);
  std::vector<double> scores(seq);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const std::size_t off = hd * dh;
      for (std::size_t i = 0; i < seq; ++i) {
        const double* qi = &qv[(b * seq + i) * h + off];
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < seq; ++j) {
          if (!key_mask.empty() && key_mask[b * seq + j] == 0) continue;
          scores[j] = dot(qi, &kv[(b * seq + j) * h + off], dh) * scale_factor;
          mx = std::max(mx, scores[j]);
        }
        double* p = &probs[((b * heads + hd) * seq + i) * seq];
        if (mx == -std::numeric_limits<double>::infinity()) continue;
        double z = 0.0;
        for (std::size_t j = 0; j < seq; ++j) {
          if (!key_mask.empty() && key_mask[b * seq + j] == 0) continue;
          p[j] = std::exp(scores[j] - mx);
          z += p[j];
        }
        double* oi = &out[(b * seq + i) * h + off];
        for (std::size_t j = 0; j < seq; ++j) {
          if (p[j] == 0.0) continue;
          p[j] /= z;
          axpy(p[j], &vv[(b * seq + j) * h + off], oi, dh);
        }
      }
    }
  }
  return Tensor::make_op(
      "attention", q.shape(), std::move(out), {q, k, v},
      [q, k, v, probs = std::move(probs), batch, seq, h, heads, dh, scale_factor](
          std::span<const double> g, std::span<const double>) mutable {
        const auto qv = q.values();
        const auto kv = k.values();
        const auto vv = v.values();
        std::span<double> gq, gk, gv;
        if (q.requires_grad()) gq = q.grad_buffer();
        if (k.requires_grad()) gk = k.grad_buffer();
        if (v.requires_grad()) gv = v.grad_buffer();
        std::vector<double> dp(seq);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t hd = 0; hd < heads; ++hd) {
            const std::size_t off = hd * dh;
            for (std::size_t i = 0; i < seq; ++i) {
              const double* p = &probs[((b * heads + hd) * seq + i) * seq];
              const double* gi = &g[(b * seq + i) * h + off];
              double weighted = 0.0;
              for (std::size_t j = 0; j < seq; ++j) {
                if (p[j] == 0.0) {
                  dp[j] = 0.0;
                  continue;
                }
                dp[j] = dot(gi, &vv[(b * seq + j) * h + off], dh);
                weighted += p[j] * dp[j];
                if (!gv.empty()) axpy(p[j], gi, &gv[(b * seq + j) * h + off], dh);
              }
              for (std::size_t j = 0; j < seq; ++j) {
                if (p[j] == 0.0) continue;
                const double ds = p[j] * (dp[j] - weighted) * scale_factor;
                if (!gq.empty()) axpy(ds, &kv[(b * seq + j) * h + off], &gq[(b * seq + i) * h + off], dh);
                if (!gk.empty()) axpy(ds, &qv[(b * seq + i) * h + off], &gk[(b * seq + j) * h + off], dh);
              }
            }
          }
        }
      });
}

Tensor masked_mean(const Tensor& x, std::span<const std::uint8_t> mask) {
  require_rank(x, 3, "masked_mean");
  const std::size_t batch = x.dim(0), seq = x.dim(1), h = x.dim(2);
  if (!mask.empty() && mask.size() != batch * seq) {
    throw DimensionError("masked_mean: mask size " + std::to_string(mask.size()));
  }
  const auto xv = x.values();
  std::vector<double> inv_count(batch, 0.0);
  std::vector<double> out(batch * h, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t count = 0;
    for (std::size_t s = 0; s < seq; ++s) {
      if (!mask.empty() && mask[b * seq + s] == 0) continue;
      axpy(1.0, &xv[(b * seq + s) * h], &out[b * h], h);
      ++count;
    }
    if (count == 0) continue;
    inv_count[b] = 1.0 / static_cast<double>(count);
    for (std::size_t i = 0; i < h; ++i) out[b * h + i] *= inv_count[b];
  }
  std::vector<std::uint8_t> mv(mask.begin(), mask.end());
  return Tensor::make_op("masked_mean", {batch, h}, std::move(out), {x},
                         [x, mv = std::move(mv), inv_count = std::move(inv_count), batch, seq, h](
                             std::span<const double> g, std::span<const double>) mutable {
                           auto gx = x.grad_buffer();
                           for (std::size_t b = 0; b < batch; ++b)
                             for (std::size_t s = 0; s < seq; ++s) {
                               if (!mv.empty() && mv[b * seq + s] == 0) continue;
                               axpy(inv_count[b], &g[b * h], &gx[(b * seq + s) * h], h);
                             }
                         });
}

}  // namespace udapter
