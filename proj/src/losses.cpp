#include "fgvc/losses.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

#include "fgvc/datagen.hpp"

namespace fgvc {

namespace {

void check_labels(const Matrix& logits, std::span<const std::size_t> labels, const char* who) {
  if (labels.size() != logits.rows())
    throw NumericError(std::string(who) + ": label count does not match batch size");
  if (logits.rows() == 0) throw NumericError(std::string(who) + ": empty batch");
  for (auto y : labels)
    if (y >= logits.cols()) throw NumericError(std::string(who) + ": label out of range");
}

}  // namespace

LossResult soft_target_ce(const Matrix& logits, const Matrix& soft_targets) {
  if (!logits.same_shape(soft_targets)) throw NumericError("soft_target_ce: shape mismatch");
  if (logits.rows() == 0) throw NumericError("soft_target_ce: empty batch");
  require_finite(logits, "soft_target_ce logits");
  for (std::size_t r = 0; r < soft_targets.rows(); ++r) {
    double s = 0.0;
    for (double t : soft_targets.row(r)) {
      if (!(t >= 0.0)) throw NumericError("soft_target_ce: negative target in row " + std::to_string(r));
      s += t;
    }
    if (std::abs(s - 1.0) > 1e-9)
      throw NumericError("soft_target_ce: target row " + std::to_string(r) + " does not sum to 1");
  }

  const std::size_t n = logits.rows();
  const double inv_n = 1.0 / static_cast<double>(n);
  LossResult out{0.0, softmax_rows(logits), std::vector<double>(n)};
  for (std::size_t r = 0; r < n; ++r) {
    const double lse = log_sum_exp(logits.row(r));
    double l = 0.0;
    for (std::size_t c = 0; c < logits.cols(); ++c) {
      const double t = soft_targets(r, c);
      if (t != 0.0) l -= t * (logits(r, c) - lse);
      out.grad(r, c) = (out.grad(r, c) - t) * inv_n;
    }
    out.per_sample[r] = l;
    out.loss += l;
  }
  out.loss *= inv_n;
  return out;
}

LossResult cross_entropy(const Matrix& logits, std::span<const std::size_t> labels) {
  check_labels(logits, labels, "cross_entropy");
  return soft_target_ce(logits, one_hot(labels, logits.cols()));
}

LossResult label_smoothing_ce(const Matrix& logits, std::span<const std::size_t> labels, double epsilon) {
  if (!(epsilon >= 0.0 && epsilon < 1.0)) throw ConfigError("label_smoothing_ce: epsilon must lie in [0, 1)");
  check_labels(logits, labels, "label_smoothing_ce");
  Matrix t = one_hot(labels, logits.cols());
  if (epsilon > 0.0) {
    const double u = epsilon / static_cast<double>(logits.cols());
    for (double& v : t.data()) v = (1.0 - epsilon) * v + u;
  }
  return soft_target_ce(logits, t);
}

void ArcfaceConfig::validate() const {
  if (!(scale_s > 0.0) || !std::isfinite(scale_s)) throw ConfigError("arcface: scale_s must be positive and finite");
  if (!(margin_m >= 0.0 && margin_m < std::numbers::pi / 2))
    throw ConfigError("arcface: margin_m must lie in [0, pi/2)");
  if (!(weight_decay_l2 >= 0.0)) throw ConfigError("arcface: weight_decay_l2 must be >= 0");
  if (!(cos_clamp_eps > 0.0 && cos_clamp_eps <= 1e-3)) throw ConfigError("arcface: cos_clamp_eps must lie in (0, 1e-3]");
}

namespace {

NormalizedRows normalize_or_throw(const Matrix& m, const char* what) {
  auto n = l2_normalize_rows(m, 1e-12);
  for (std::size_t r = 0; r < m.rows(); ++r)
    if (n.degenerate[r] || n.norms[r] < 1e-8)
      throw NumericError(std::string("arcface: degenerate ") + what + " row " + std::to_string(r));
  return n;
}

}  // namespace

Matrix cosine_logits(const Matrix& embeddings, const Matrix& class_weights, double scale_s) {
  auto x = normalize_or_throw(embeddings, "embedding");
  auto w = normalize_or_throw(class_weights, "class weight");
  return matmul_bt(x.values, w.values) * scale_s;
}

ArcfaceResult arcface(const Matrix& embeddings, const Matrix& class_weights,
                      std::span<const std::size_t> labels, const ArcfaceConfig& cfg) {
  cfg.validate();
  if (embeddings.cols() != class_weights.cols()) throw NumericError("arcface: embedding/weight dims differ");
  require_finite(embeddings, "arcface embeddings");
  require_finite(class_weights, "arcface class weights");
  const std::size_t n = embeddings.rows();
  const std::size_t C = class_weights.rows();
  const std::size_t d = embeddings.cols();
  if (labels.size() != n || n == 0) throw NumericError("arcface: label count does not match batch size");
  for (auto y : labels)
    if (y >= C) throw NumericError("arcface: label out of range");

  auto xn = normalize_or_throw(embeddings, "embedding");
  auto wn = normalize_or_throw(class_weights, "class weight");
  const Matrix raw_cos = matmul_bt(xn.values, wn.values);

  const double lo = -1.0 + cfg.cos_clamp_eps;
  const double hi = 1.0 - cfg.cos_clamp_eps;
  const double cos_m = std::cos(cfg.margin_m);
  const double sin_m = std::sin(cfg.margin_m);

  ArcfaceResult out;
  out.logits = Matrix(n, C);
  Matrix dlogit_dcos(n, C);  // zero where the clamp is active
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < C; ++j) {
      const double raw = raw_cos(i, j);
      const double c = std::clamp(raw, lo, hi);
      const bool clamped = raw != c;
      if (j == labels[i]) {
        const double sin_t = std::sqrt(1.0 - c * c);
        out.logits(i, j) = cfg.scale_s * (c * cos_m - sin_t * sin_m);
        dlogit_dcos(i, j) = clamped ? 0.0 : cfg.scale_s * (cos_m + c * sin_m / sin_t);
      } else {
        out.logits(i, j) = cfg.scale_s * c;
        dlogit_dcos(i, j) = clamped ? 0.0 : cfg.scale_s;
      }
    }
  }

  LossResult ce = cross_entropy(out.logits, labels);
  out.loss = ce.loss;
  out.per_sample = std::move(ce.per_sample);

  // g_ij = dL/dcos_ij; then dcos/dx_i = (w_j - cos x_i) / |x_i| (hats), and
  // symmetrically for w_j.
  Matrix g(n, C);
  for (std::size_t k = 0; k < g.size(); ++k) g.data()[k] = ce.grad.data()[k] * dlogit_dcos.data()[k];

  Matrix gx_hat = matmul(g, wn.values);      // n x d
  Matrix gw_hat = matmul_at(g, xn.values);   // C x d
  out.grad_embeddings = Matrix(n, d);
  out.grad_weights = Matrix(C, d);
  for (std::size_t i = 0; i < n; ++i) {
    auto xh = xn.values.row(i);
    const double proj = dot(gx_hat.row(i), xh);
    for (std::size_t k = 0; k < d; ++k)
      out.grad_embeddings(i, k) = (gx_hat(i, k) - proj * xh[k]) / xn.norms[i];
  }
  for (std::size_t j = 0; j < C; ++j) {
    auto wh = wn.values.row(j);
    const double proj = dot(gw_hat.row(j), wh);
    for (std::size_t k = 0; k < d; ++k)
      out.grad_weights(j, k) = (gw_hat(j, k) - proj * wh[k]) / wn.norms[j];
  }
  return out;
}

void SeesawConfig::validate() const {
  if (!(p >= 0.0)) throw ConfigError("seesaw: p must be >= 0");
  if (!(q >= 0.0)) throw ConfigError("seesaw: q must be >= 0");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("seesaw: gamma must lie in (0, 1]");
  if (!(weight_decay_l2 >= 0.0)) throw ConfigError("seesaw: weight_decay_l2 must be >= 0");
}

void SeesawState::observe(std::span<const std::size_t> labels) {
  for (auto y : labels) {
    if (y >= counts.size()) throw NumericError("seesaw: label outside state class range");
    ++counts[y];
  }
}

double seesaw_mitigation(std::uint64_t count_i, std::uint64_t count_j, double p) {
  if (count_i <= count_j) return 1.0;
  return std::pow(static_cast<double>(count_j) / static_cast<double>(count_i), p);
}

double seesaw_compensation(double sigma_i, double sigma_j, double q) {
  if (sigma_j <= sigma_i) return 1.0;
  return std::pow(sigma_j / sigma_i, q);
}

Matrix seesaw_factors(const Matrix& logits, std::span<const std::size_t> labels,
                      std::span<const std::uint64_t> counts, const SeesawConfig& cfg) {
  cfg.validate();
  check_labels(logits, labels, "seesaw");
  if (counts.size() != logits.cols()) throw NumericError("seesaw: state has wrong number of classes");
  const Matrix sigma = softmax_rows(logits);
  Matrix s(logits.rows(), logits.cols(), 1.0);
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const std::size_t i = labels[r];
    for (std::size_t j = 0; j < logits.cols(); ++j) {
      if (j == i) continue;
      s(r, j) = cfg.gamma * seesaw_mitigation(counts[i], counts[j], cfg.p) *
                seesaw_compensation(sigma(r, i), sigma(r, j), cfg.q);
    }
  }
  return s;
}

LossResult seesaw_with_factors(const Matrix& logits, std::span<const std::size_t> labels,
                               const Matrix& factors) {
  check_labels(logits, labels, "seesaw");
  if (!factors.same_shape(logits)) throw NumericError("seesaw: factor matrix shape mismatch");
  require_finite(logits, "seesaw logits");
  const std::size_t n = logits.rows();
  const std::size_t C = logits.cols();
  const double inv_n = 1.0 / static_cast<double>(n);
  constexpr double neg_inf = -std::numeric_limits<double>::infinity();

  LossResult out{0.0, Matrix(n, C), std::vector<double>(n)};
  std::vector<double> adj(C);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t y = labels[r];
    // -log(e^{z_y} / (e^{z_y} + sum_j S_j e^{z_j})) = LSE(z_y, z_j + ln S_j) - z_y
    for (std::size_t j = 0; j < C; ++j) {
      if (j == y) {
        adj[j] = logits(r, j);
      } else {
        const double s = factors(r, j);
        if (s < 0.0) throw NumericError("seesaw: negative factor");
        adj[j] = s > 0.0 ? logits(r, j) + std::log(s) : neg_inf;
      }
    }
    const double lse = log_sum_exp(adj);
    out.per_sample[r] = lse - logits(r, y);
    out.loss += out.per_sample[r];
    for (std::size_t j = 0; j < C; ++j) {
      const double p = adj[j] == neg_inf ? 0.0 : std::exp(adj[j] - lse);
      out.grad(r, j) = (p - (j == y ? 1.0 : 0.0)) * inv_n;
    }
  }
  out.loss *= inv_n;
  return out;
}

LossResult seesaw(const Matrix& logits, std::span<const std::size_t> labels, SeesawState& state,
                  const SeesawConfig& cfg) {
  check_labels(logits, labels, "seesaw");
  if (state.counts.size() != logits.cols()) throw NumericError("seesaw: state has wrong number of classes");
  state.observe(labels);
  return seesaw_with_factors(logits, labels, seesaw_factors(logits, labels, state.counts, cfg));
}

OhemSelection ohem_filter(std::span<const double> per_sample_losses, double keep_fraction) {
  if (per_sample_losses.empty()) throw NumericError("ohem_filter: empty batch");
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) throw ConfigError("ohem_filter: keep_fraction must lie in (0, 1]");
  const std::size_t n = per_sample_losses.size();
  // The small slack keeps e.g. (2/3)*3 from rounding up to 3.
  auto k = static_cast<std::size_t>(std::ceil(keep_fraction * static_cast<double>(n) - 1e-9));
  k = std::clamp<std::size_t>(k, 1, n);

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return per_sample_losses[a] > per_sample_losses[b];
  });
  OhemSelection out;
  out.indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(out.indices.begin(), out.indices.end());
  out.mask.assign(n, 0.0);
  double sum = 0.0;
  for (auto i : out.indices) {
    out.mask[i] = 1.0;
    sum += per_sample_losses[i];
  }
  out.mean = sum / static_cast<double>(k);
  return out;
}

LossResult ohem_cross_entropy(const Matrix& logits, std::span<const std::size_t> labels, double keep_fraction) {
  LossResult ce = cross_entropy(logits, labels);
  const auto sel = ohem_filter(ce.per_sample, keep_fraction);
  // ce.grad carries 1/N; rescale kept rows to 1/k and zero the rest.
  const double rescale = static_cast<double>(logits.rows()) / static_cast<double>(sel.indices.size());
  for (std::size_t r = 0; r < logits.rows(); ++r)
    for (double& g : ce.grad.row(r)) g *= sel.mask[r] * rescale;
  ce.loss = sel.mean;
  return ce;
}

}  // namespace fgvc
