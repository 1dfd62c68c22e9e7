#include "fgvc/contrastive.hpp"

#include <cmath>
#include <limits>

namespace fgvc {

void ContrastiveConfig::validate() const {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("contrastive: tau must be positive and finite");
  if (!(momentum_m >= 0.0 && momentum_m <= 1.0)) throw ConfigError("contrastive: momentum_m must lie in [0, 1]");
}

void JointConfig::validate() const {
  if (!(lambda1 >= 0.0 && lambda2 >= 0.0)) throw ConfigError("joint: lambdas must be >= 0");
  if (!(lambda1 + lambda2 > 0.0)) throw ConfigError("joint: lambda1 + lambda2 must be positive");
}

namespace {

void require_unit_rows(const Matrix& m, const char* what) {
  for (std::size_t r = 0; r < m.rows(); ++r)
    if (std::abs(norm2(m.row(r)) - 1.0) > 1e-6)
      throw NumericError(std::string("info_nce: ") + what + " row " + std::to_string(r) + " is not unit length");
}

}  // namespace

InfoNceResult info_nce(const Matrix& queries, const Matrix& keys, std::span<const std::size_t> positives,
                       double tau, bool want_key_grad) {
  if (!(tau > 0.0)) throw NumericError("info_nce: tau must be positive");
  if (queries.cols() != keys.cols()) throw NumericError("info_nce: query/key dims differ");
  if (positives.size() != queries.rows() || queries.rows() == 0) throw NumericError("info_nce: one positive per query required");
  require_unit_rows(queries, "query");
  require_unit_rows(keys, "key");

  Matrix logits = matmul_bt(queries, keys) * (1.0 / tau);
  LossResult ce = cross_entropy(logits, positives);  // grad already carries 1/N
  InfoNceResult out;
  out.loss = ce.loss;
  out.per_sample = std::move(ce.per_sample);
  out.grad_queries = matmul(ce.grad, keys) * (1.0 / tau);
  if (want_key_grad) out.grad_keys = matmul_at(ce.grad, queries) * (1.0 / tau);
  return out;
}

InfoNceResult ctr(const Matrix& q, const Matrix& k, double tau) {
  if (!q.same_shape(k)) throw NumericError("ctr: query/key shapes differ");
  std::vector<std::size_t> diag(q.rows());
  for (std::size_t i = 0; i < diag.size(); ++i) diag[i] = i;
  InfoNceResult r = info_nce(q, k, diag, tau);
  const double scale = 2.0 * tau;
  r.loss *= scale;
  r.grad_queries *= scale;
  for (double& v : r.per_sample) v *= scale;
  return r;
}

SymmetricCtrResult symmetrized_ctr(const Matrix& q1, const Matrix& q2, const Matrix& k1, const Matrix& k2,
                                   double tau) {
  if (!q1.same_shape(q2) || !q1.same_shape(k1) || !q1.same_shape(k2))
    throw NumericError("symmetrized_ctr: all inputs must share one shape");
  auto a = ctr(q1, k2, tau);
  auto b = ctr(q2, k1, tau);
  return {a.loss + b.loss, std::move(a.grad_queries), std::move(b.grad_queries)};
}

void momentum_update(ParamSet& key, const ParamSet& query, double m) {
  if (!key.same_structure(query)) throw NumericError("momentum_update: parameter structures differ");
  if (!(m >= 0.0 && m <= 1.0)) throw NumericError("momentum_update: m must lie in [0, 1]");
  if (m == 1.0) return;
  if (m == 0.0) {
    key = query;
    return;
  }
  for (std::size_t i = 0; i < key.size(); ++i) {
    auto& k = key.values[i].data();
    const auto& q = query.values[i].data();
    for (std::size_t j = 0; j < k.size(); ++j) k[j] = m * k[j] + (1.0 - m) * q[j];
  }
}

double cosine_sim(std::span<const double> a, std::span<const double> b) {
  const double na = norm2(a);
  const double nb = norm2(b);
  if (na == 0.0 || nb == 0.0) throw NumericError("cosine_sim: zero vector");
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

Matrix l2_normalize_backward(const NormalizedRows& n, const Matrix& grad_normalized) {
  Matrix g(grad_normalized.rows(), grad_normalized.cols());
  for (std::size_t r = 0; r < g.rows(); ++r) {
    if (n.degenerate[r]) {
      std::copy(grad_normalized.row(r).begin(), grad_normalized.row(r).end(), g.row(r).begin());
      continue;
    }
    auto xh = n.values.row(r);
    const double proj = dot(grad_normalized.row(r), xh);
    for (std::size_t c = 0; c < g.cols(); ++c) g(r, c) = (grad_normalized(r, c) - proj * xh[c]) / n.norms[r];
  }
  return g;
}

NtXentResult nt_xent(const Matrix& projections, double tau) {
  if (!(tau > 0.0)) throw NumericError("nt_xent: tau must be positive");
  const std::size_t v = projections.rows();
  if (v < 2 || v % 2 != 0) throw NumericError("nt_xent: need an even number (>= 2) of views");
  auto zn = l2_normalize_rows(projections, 1e-12);
  if (zn.any_degenerate()) throw NumericError("nt_xent: zero projection vector");

  const Matrix sim = matmul_bt(zn.values, zn.values) * (1.0 / tau);
  const double inv = 1.0 / static_cast<double>(v);
  constexpr double neg_inf = -std::numeric_limits<double>::infinity();
  Matrix dsim(v, v);
  NtXentResult out;
  std::vector<double> row(v);
  for (std::size_t i = 0; i < v; ++i) {
    const std::size_t pos = i ^ 1u;
    for (std::size_t j = 0; j < v; ++j) row[j] = j == i ? neg_inf : sim(i, j);
    const double lse = log_sum_exp(row);
    out.loss += (lse - sim(i, pos)) * inv;
    for (std::size_t j = 0; j < v; ++j) {
      if (j == i) continue;
      dsim(i, j) = (std::exp(row[j] - lse) - (j == pos ? 1.0 : 0.0)) * inv;
    }
  }
  // sim_ij = <z_i, z_j> / tau contributes to both rows i and j.
  Matrix gz = (matmul(dsim, zn.values) + matmul_at(dsim, zn.values)) * (1.0 / tau);
  out.grad = l2_normalize_backward(zn, gz);
  return out;
}

ParamLoss joint_loss(const ParamLoss& sup, const ParamLoss& self, const JointConfig& cfg) {
  cfg.validate();
  if (!sup.grad.same_structure(self.grad)) throw NumericError("joint_loss: gradients are over different parameter sets");
  ParamLoss out{cfg.lambda1 * sup.loss + cfg.lambda2 * self.loss, sup.grad};
  out.grad *= cfg.lambda1;
  ParamSet s = self.grad;
  s *= cfg.lambda2;
  out.grad += s;
  return out;
}

LossResult joint_loss(const LossResult& sup, const LossResult& self, const JointConfig& cfg) {
  cfg.validate();
  if (!sup.grad.same_shape(self.grad)) throw NumericError("joint_loss: gradient shapes differ");
  LossResult out{cfg.lambda1 * sup.loss + cfg.lambda2 * self.loss, sup.grad * cfg.lambda1, {}};
  out.grad += self.grad * cfg.lambda2;
  return out;
}

ParamLoss cross_entropy_objective(const Model& model, const Matrix& features, const Matrix& meta,
                                  std::span<const std::size_t> labels) {
  auto fw = forward(model, features, meta);
  auto ce = cross_entropy(fw.logits, labels);
  return {ce.loss, backward(model, fw.cache, ce.grad)};
}

namespace {

struct QueryCache {
  MlpCache enc, proj, pred;
  NormalizedRows norm;
};

Matrix query_forward(const Model& model, const Matrix& x, const Matrix& meta, QueryCache* c) {
  const auto& p = model.params();
  Matrix e = encode(model, x, meta, c ? &c->enc : nullptr);
  Matrix z = mlp_forward(p, model.projection(), e, c ? &c->proj : nullptr);
  Matrix h = mlp_forward(p, model.prediction(), z, c ? &c->pred : nullptr);
  auto n = l2_normalize_rows(h, 1e-12);
  if (n.any_degenerate()) throw NumericError("query path produced a zero vector");
  Matrix out = n.values;
  if (c) c->norm = std::move(n);
  return out;
}

void query_backward(const Model& model, const QueryCache& c, const Matrix& grad_q, ParamSet& grads) {
  const auto& p = model.params();
  Matrix g = l2_normalize_backward(c.norm, grad_q);
  g = mlp_backward(p, model.prediction(), c.pred, g, grads);
  g = mlp_backward(p, model.projection(), c.proj, g, grads);
  mlp_backward(p, model.encoder(), c.enc, g, grads);
}

}  // namespace

Matrix query_embedding(const Model& model, const Matrix& features, const Matrix& meta) {
  return query_forward(model, features, meta, nullptr);
}

Matrix key_embedding(const Model& model, const Matrix& features, const Matrix& meta) {
  Matrix e = encode(model, features, meta, nullptr);
  Matrix z = mlp_forward(model.params(), model.projection(), e, nullptr);
  auto n = l2_normalize_rows(z, 1e-12);
  if (n.any_degenerate()) throw NumericError("key path produced a zero vector");
  return n.values;
}

ParamLoss moco_gradients(const Model& query, const Model& key, const Matrix& x1, const Matrix& x2,
                         const Matrix& meta, double tau) {
  QueryCache c1, c2;
  Matrix q1 = query_forward(query, x1, meta, &c1);
  Matrix q2 = query_forward(query, x2, meta, &c2);
  Matrix k1 = key_embedding(key, x1, meta);
  Matrix k2 = key_embedding(key, x2, meta);
  auto loss = symmetrized_ctr(q1, q2, k1, k2, tau);
  ParamLoss out{loss.loss, query.params().zeros_like()};
  query_backward(query, c1, loss.grad_q1, out.grad);
  query_backward(query, c2, loss.grad_q2, out.grad);
  return out;
}

double moco_pretrain_epoch(Model& query, Model& key, OptimizerState& opt, std::span<const UnlabeledBatch> batches,
                           const ContrastiveConfig& cfg, const AugmentPolicy& aug, SeededRng& rng) {
  cfg.validate();
  if (batches.empty()) throw NumericError("moco_pretrain_epoch: empty loader");
  double total = 0.0;
  for (const auto& b : batches) {
    Matrix x1 = augment_rows(b.features, aug, rng);
    Matrix x2 = augment_rows(b.features, aug, rng);
    ParamLoss step = moco_gradients(query, key, x1, x2, b.meta, cfg.tau);
    total += step.loss;
    if (accumulate_and_step(query.mutable_params(), opt, step.grad))
      momentum_update(key.mutable_params(), query.params(), cfg.momentum_m);
  }
  return total / static_cast<double>(batches.size());
}

JointGradients simclr_joint_gradients(const Model& model, const LabeledBatch& labeled, const UnlabeledBatch& unlabeled,
                                      const ContrastiveConfig& cfg, const JointConfig& joint, const AugmentPolicy& aug,
                                      SeededRng& sup_rng, SeededRng& ssl_rng, const SupervisedObjective& objective) {
  JointGradients out;
  Matrix xs = augment_rows(labeled.features, aug, sup_rng);
  out.sup = objective(model, xs, labeled.meta, labeled.labels);

  // Interleave the two views so rows 2k and 2k+1 come from sample k.
  const std::size_t n = unlabeled.features.rows();
  Matrix views(2 * n, unlabeled.features.cols());
  Matrix meta(2 * n, unlabeled.meta.cols());
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t v = 0; v < 2; ++v) {
      auto a = augment(unlabeled.features.row(k), aug, ssl_rng);
      std::copy(a.begin(), a.end(), views.row(2 * k + v).begin());
      std::copy(unlabeled.meta.row(k).begin(), unlabeled.meta.row(k).end(), meta.row(2 * k + v).begin());
    }
  }
  const auto& p = model.params();
  MlpCache enc, proj;
  Matrix h = encode(model, views, meta, &enc);
  Matrix z = mlp_forward(p, model.projection(), h, &proj);
  auto nt = nt_xent(z, cfg.tau);
  out.self = {nt.loss, p.zeros_like()};
  Matrix g = mlp_backward(p, model.projection(), proj, nt.grad, out.self.grad);
  mlp_backward(p, model.encoder(), enc, g, out.self.grad);

  out.total = joint_loss(out.sup, out.self, joint);
  return out;
}

JointEpochStats simclr_joint_epoch(Model& model, OptimizerState& opt, std::span<const LabeledBatch> labeled,
                                   std::span<const UnlabeledBatch> unlabeled, const ContrastiveConfig& cfg,
                                   const JointConfig& joint, const AugmentPolicy& aug, SeededRng& sup_rng,
                                   SeededRng& ssl_rng, const SupervisedObjective& objective) {
  cfg.validate();
  joint.validate();
  if (labeled.empty() || unlabeled.empty()) throw NumericError("simclr_joint_epoch: empty loader");
  JointEpochStats s;
  for (std::size_t i = 0; i < labeled.size(); ++i) {
    auto g = simclr_joint_gradients(model, labeled[i], unlabeled[i % unlabeled.size()], cfg, joint, aug, sup_rng,
                                    ssl_rng, objective);
    s.mean_sup += g.sup.loss;
    s.mean_self += g.self.loss;
    s.mean_total += g.total.loss;
    accumulate_and_step(model.mutable_params(), opt, g.total.grad);
  }
  const double n = static_cast<double>(labeled.size());
  s.mean_sup /= n;
  s.mean_self /= n;
  s.mean_total /= n;
  return s;
}

}  // namespace fgvc
