// SPDX-License-Identifier: Apache-2.0
#include "udapter/divergence.hpp"

#include <algorithm>
#include <cmath>

#include "udapter/error.hpp"
#include "udapter/ops.hpp"

namespace udapter {

std::string to_string(DivergenceKind kind) {
  switch (kind) {
    case DivergenceKind::kMkMmd: return "mk_mmd";
    case DivergenceKind::kCmd: return "cmd";
    case DivergenceKind::kCoral: return "coral";
  }
  return "?";
}

DivergenceKind parse_divergence_kind(const std::string& name) {
  if (name == "mk_mmd") return DivergenceKind::kMkMmd;
  if (name == "cmd") return DivergenceKind::kCmd;
  if (name == "coral") return DivergenceKind::kCoral;
  throw ConfigError("unknown divergence '" + name + "' (expected mk_mmd, cmd or coral)");
}

std::string to_string(MmdEstimator estimator) {
  return estimator == MmdEstimator::kBiased ? "biased" : "unbiased";
}

MmdEstimator parse_mmd_estimator(const std::string& name) {
  if (name == "biased") return MmdEstimator::kBiased;
  if (name == "unbiased") return MmdEstimator::kUnbiased;
  throw ConfigError("unknown MMD estimator '" + name + "'");
}

void DivergenceSpec::validate(std::size_t num_layers) const {
  if (kernel_multipliers.empty()) throw ConfigError("kernel_multipliers must not be empty");
  for (double m : kernel_multipliers) {
    if (!(m > 0.0) || !std::isfinite(m)) throw ConfigError("kernel multipliers must be positive");
  }
  if (base_bandwidth && !(*base_bandwidth > 0.0)) throw ConfigError("base bandwidth must be positive");
  if (cmd_order < 1) throw ConfigError("cmd order must be >= 1");
  for (auto l : layer_set) {
    if (l < 1 || l > num_layers) {
      throw ConfigError("layer_set entry " + std::to_string(l) + " outside [1, " + std::to_string(num_layers) + "]");
    }
  }
}

std::vector<std::size_t> DivergenceSpec::resolved_layers(std::size_t num_layers) const {
  validate(num_layers);
  if (!layer_set.empty()) return layer_set;
  std::vector<std::size_t> all(num_layers);
  for (std::size_t l = 0; l < num_layers; ++l) all[l] = l + 1;
  return all;
}

namespace {

struct Rows {
  std::size_t n;
  std::size_t h;
};

Rows check_batch(const Tensor& t, const char* what) {
  if (t.rank() != 2) throw DimensionError(std::string(what) + " must be [n, h], got " + shape_to_string(t.shape()));
  if (t.dim(0) == 0) throw DataError(std::string(what) + " batch is empty");
  return {t.dim(0), t.dim(1)};
}

void check_pair(const Rows& a, const Rows& b) {
  if (a.h != b.h) {
    throw DimensionError("feature dims differ: " + std::to_string(a.h) + " vs " + std::to_string(b.h));
  }
}

double sq_dist(const double* a, const double* b, std::size_t h) {
  double s = 0.0;
  for (std::size_t k = 0; k < h; ++k) {
    const double d = a[k] - b[k];
    s += d * d;
  }
  return s;
}

// Pooled rows [x; y] as one contiguous matrix.
std::vector<double> pooled(const Tensor& x, const Tensor& y) {
  std::vector<double> z(x.values().begin(), x.values().end());
  z.insert(z.end(), y.values().begin(), y.values().end());
  return z;
}

}  // namespace

double median_bandwidth(const Tensor& x, const Tensor& y) {
  const auto rx = check_batch(x, "x");
  const auto ry = check_batch(y, "y");
  check_pair(rx, ry);
  const auto z = pooled(x, y);
  const std::size_t total = rx.n + ry.n;
  const std::size_t h = rx.h;
  std::vector<double> d;
  d.reserve(total * (total - 1) / 2);
  for (std::size_t i = 0; i < total; ++i) {
    for (std::size_t j = i + 1; j < total; ++j) d.push_back(sq_dist(&z[i * h], &z[j * h], h));
  }
  if (d.empty()) return 1.0;
  std::sort(d.begin(), d.end());
  const std::size_t mid = d.size() / 2;
  const double median = d.size() % 2 == 1 ? d[mid] : 0.5 * (d[mid - 1] + d[mid]);
  if (!(median > 0.0)) return 1.0;
  return std::sqrt(median / 2.0);
}

Tensor mk_mmd(const Tensor& x, const Tensor& y, const DivergenceSpec& spec) {
  const auto rx = check_batch(x, "x");
  const auto ry = check_batch(y, "y");
  check_pair(rx, ry);
  const bool unbiased = spec.estimator == MmdEstimator::kUnbiased;
  if (unbiased && (rx.n < 2 || ry.n < 2)) throw DataError("unbiased MMD needs at least 2 rows per batch");
  for (double m : spec.kernel_multipliers) {
    if (!(m > 0.0)) throw ConfigError("kernel multipliers must be positive");
  }

  const std::size_t n = rx.n, m = ry.n, h = rx.h, total = n + m;
  const double base = spec.base_bandwidth ? *spec.base_bandwidth : median_bandwidth(x, y);
  std::vector<double> inv_two_sigma2;  // 1 / (2 sigma^2) per kernel
  for (double mult : spec.kernel_multipliers) inv_two_sigma2.push_back(1.0 / (2.0 * mult * mult * base * base));

  // Symmetric pair weights over the pooled rows.
  const double wxx = unbiased ? 1.0 / (double(n) * double(n - 1)) : 1.0 / (double(n) * double(n));
  const double wyy = unbiased ? 1.0 / (double(m) * double(m - 1)) : 1.0 / (double(m) * double(m));
  const double wxy = -1.0 / (double(n) * double(m));
  auto weight = [=](std::size_t i, std::size_t j) {
    const bool xi = i < n, xj = j < n;
    if (xi != xj) return wxy;
    if (unbiased && i == j) return 0.0;
    return xi ? wxx : wyy;
  };

  const auto z = pooled(x, y);
  std::vector<double> dist(total * total, 0.0);
  for (std::size_t i = 0; i < total; ++i) {
    for (std::size_t j = i + 1; j < total; ++j) {
      dist[i * total + j] = dist[j * total + i] = sq_dist(&z[i * h], &z[j * h], h);
    }
  }

  // coef[i, j] = sum_s w_ij k_s(i, j) / sigma_s^2, reused by the backward pass.
  std::vector<double> coef(total * total, 0.0);
  double value = 0.0;
  for (std::size_t i = 0; i < total; ++i) {
    for (std::size_t j = 0; j < total; ++j) {
      const double w = weight(i, j);
      if (w == 0.0) continue;
      double c = 0.0;
      for (double a : inv_two_sigma2) {
        const double k = std::exp(-dist[i * total + j] * a);
        value += w * k;
        c += w * k * 2.0 * a;
      }
      coef[i * total + j] = c;
    }
  }

  return Tensor::make_op("mk_mmd", {}, {value}, {x, y},
                         [x, y, n, h, total, coef = std::move(coef), z = std::move(z)](std::span<const double> g,
                                                                                       std::span<const double>) {
                           std::vector<double> grad(total * h, 0.0);
                           for (std::size_t a = 0; a < total; ++a) {
                             for (std::size_t j = 0; j < total; ++j) {
                               const double c = coef[a * total + j];
                               if (c == 0.0) continue;
                               for (std::size_t k = 0; k < h; ++k) {
                                 grad[a * h + k] -= 2.0 * c * (z[a * h + k] - z[j * h + k]);
                               }
                             }
                           }
                           if (x.requires_grad()) {
                             auto gx = x.grad_buffer();
                             for (std::size_t i = 0; i < n * h; ++i) gx[i] += g[0] * grad[i];
                           }
                           if (y.requires_grad()) {
                             auto gy = y.grad_buffer();
                             for (std::size_t i = 0; i < (total - n) * h; ++i) gy[i] += g[0] * grad[n * h + i];
                           }
                         });
}

namespace {

// Returns the centered rows and fills the covariance (denominator n - 1).
std::vector<double> centered_covariance(const Tensor& t, std::vector<double>& cov) {
  const std::size_t n = t.dim(0), h = t.dim(1);
  const auto v = t.values();
  std::vector<double> mu(h, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < h; ++k) mu[k] += v[i * h + k];
  }
  for (auto& m : mu) m /= double(n);
  std::vector<double> c(n * h);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < h; ++k) c[i * h + k] = v[i * h + k] - mu[k];
  }
  cov.assign(h * h, 0.0);
  for (std::size_t a = 0; a < h; ++a) {
    for (std::size_t b = a; b < h; ++b) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += c[i * h + a] * c[i * h + b];
      cov[a * h + b] = cov[b * h + a] = s / double(n - 1);
    }
  }
  return c;
}

}  // namespace

Tensor coral(const Tensor& x, const Tensor& y) {
  const auto rx = check_batch(x, "x");
  const auto ry = check_batch(y, "y");
  check_pair(rx, ry);
  if (rx.n < 2 || ry.n < 2) throw DataError("CORAL needs at least 2 rows per batch");
  const std::size_t h = rx.h;
  std::vector<double> cx, cy;
  auto xc = centered_covariance(x, cx);
  auto yc = centered_covariance(y, cy);
  const double scale = 1.0 / (4.0 * double(h) * double(h));
  std::vector<double> diff(h * h);
  double value = 0.0;
  for (std::size_t i = 0; i < h * h; ++i) {
    diff[i] = cx[i] - cy[i];
    value += diff[i] * diff[i];
  }
  value *= scale;

  return Tensor::make_op(
      "coral", {}, {value}, {x, y},
      [x, y, h, scale, diff = std::move(diff), xc = std::move(xc), yc = std::move(yc)](std::span<const double> g,
                                                                                      std::span<const double>) {
        // dL/dX = 2 / (n - 1) * Xc * G with G = 2 * scale * (Cx - Cy); centering adds nothing
        // because the columns of Xc * G already sum to zero.
        auto apply = [&](const Tensor& t, const std::vector<double>& c, double sign) {
          const std::size_t n = t.dim(0);
          auto gt = t.grad_buffer();
          const double f = sign * g[0] * 2.0 * scale * 2.0 / double(n - 1);
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t b = 0; b < h; ++b) {
              double s = 0.0;
              for (std::size_t a = 0; a < h; ++a) s += c[i * h + a] * diff[a * h + b];
              gt[i * h + b] += f * s;
            }
          }
        };
        if (x.requires_grad()) apply(x, xc, 1.0);
        if (y.requires_grad()) apply(y, yc, -1.0);
      });
}

namespace {

// moments[k][j] = k-th central moment of column j for k = 0..order (k=0 is 1, k=1 is 0).
struct Moments {
  std::vector<double> mean;
  std::vector<double> centered;
  std::vector<std::vector<double>> central;
};

Moments column_moments(const Tensor& t, std::size_t order) {
  const std::size_t n = t.dim(0), h = t.dim(1);
  const auto v = t.values();
  Moments m;
  m.mean.assign(h, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < h; ++k) m.mean[k] += v[i * h + k];
  }
  for (auto& x : m.mean) x /= double(n);
  m.centered.resize(n * h);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < h; ++k) m.centered[i * h + k] = v[i * h + k] - m.mean[k];
  }
  m.central.assign(order + 1, std::vector<double>(h, 0.0));
  m.central[0].assign(h, 1.0);
  for (std::size_t p = 2; p <= order; ++p) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < h; ++k) m.central[p][k] += std::pow(m.centered[i * h + k], double(p));
    }
    for (auto& x : m.central[p]) x /= double(n);
  }
  return m;
}

}  // namespace

Tensor cmd(const Tensor& x, const Tensor& y, std::size_t order, bool* degenerate) {
  const auto rx = check_batch(x, "x");
  const auto ry = check_batch(y, "y");
  check_pair(rx, ry);
  if (order < 1) throw ConfigError("cmd order must be >= 1");
  const auto [lo_x, hi_x] = std::minmax_element(x.values().begin(), x.values().end());
  const auto [lo_y, hi_y] = std::minmax_element(y.values().begin(), y.values().end());
  const double lo = std::min(*lo_x, *lo_y), hi = std::max(*hi_x, *hi_y);
  if (degenerate) *degenerate = !(hi > lo);
  const std::size_t h = rx.h;
  if (!(hi > lo)) {
    return Tensor::make_op("cmd", {}, {0.0}, {x, y}, [](std::span<const double>, std::span<const double>) {});
  }
  const double range = hi - lo;

  auto mx = column_moments(x, order);
  auto my = column_moments(y, order);
  // diff[p][k]: moment difference (p = 1 is the mean); norms[p] its L2 norm.
  std::vector<std::vector<double>> diff(order + 1, std::vector<double>(h, 0.0));
  std::vector<double> norms(order + 1, 0.0);
  double value = 0.0;
  for (std::size_t p = 1; p <= order; ++p) {
    double s = 0.0;
    for (std::size_t k = 0; k < h; ++k) {
      diff[p][k] = p == 1 ? mx.mean[k] - my.mean[k] : mx.central[p][k] - my.central[p][k];
      s += diff[p][k] * diff[p][k];
    }
    norms[p] = std::sqrt(s);
    value += norms[p] / std::pow(range, double(p));
  }

  return Tensor::make_op(
      "cmd", {}, {value}, {x, y},
      [x, y, h, order, range, diff = std::move(diff), norms = std::move(norms), mx = std::move(mx),
       my = std::move(my)](std::span<const double> g, std::span<const double>) {
        auto apply = [&](const Tensor& t, const Moments& mo, double sign) {
          const std::size_t n = t.dim(0);
          auto gt = t.grad_buffer();
          for (std::size_t p = 1; p <= order; ++p) {
            if (norms[p] == 0.0) continue;
            const double f = sign * g[0] / (norms[p] * std::pow(range, double(p)));
            for (std::size_t i = 0; i < n; ++i) {
              for (std::size_t k = 0; k < h; ++k) {
                // d c_p / d x_ik = p / n * (centered^(p-1) - c_{p-1}); the mean term is 1 / n.
                const double d = p == 1 ? 1.0 / double(n)
                                        : double(p) / double(n) *
                                              (std::pow(mo.centered[i * h + k], double(p - 1)) -
                                               (p - 1 == 1 ? 0.0 : mo.central[p - 1][k]));
                gt[i * h + k] += f * diff[p][k] * d;
              }
            }
          }
        };
        if (x.requires_grad()) apply(x, mx, 1.0);
        if (y.requires_grad()) apply(y, my, -1.0);
      });
}

Tensor divergence(const Tensor& x, const Tensor& y, const DivergenceSpec& spec) {
  switch (spec.kind) {
    case DivergenceKind::kMkMmd: return mk_mmd(x, y, spec);
    case DivergenceKind::kCmd: return cmd(x, y, spec.cmd_order);
    case DivergenceKind::kCoral: return coral(x, y);
  }
  throw ContractError("unhandled divergence kind");
}

LayerDivergence layer_divergence(const LayerTaps& source, const LayerTaps& target, Pooling pooling,
                                 const DivergenceSpec& spec) {
  if (source.num_layers() != target.num_layers()) {
    throw DimensionError("source and target taps have different layer counts");
  }
  LayerDivergence out;
  out.layers = spec.resolved_layers(source.num_layers());
  for (auto l : out.layers) {
    const auto d = divergence(pool(source, l - 1, pooling, Tap::kAdapted), pool(target, l - 1, pooling, Tap::kAdapted),
                              spec);
    out.per_layer.push_back(d.item());
    out.total = out.total.defined() ? add(out.total, d) : d;
  }
  return out;
}

}  // namespace udapter
