#include "fgvc/gradcheck.hpp"

#include <chrono>
#include <cmath>

#include "fgvc/harness.hpp"

namespace fgvc {

double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
  if (analytic.size() != numeric.size()) throw NumericError("relative_error: length mismatch");
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-8});
}

std::vector<double> numeric_gradient(const std::function<double()>& f, std::vector<double*> x, double h) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = *x[i];
    *x[i] = orig + h;
    const double up = f();
    *x[i] = orig - h;
    const double down = f();
    *x[i] = orig;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

namespace {

// Flattening helpers ---------------------------------------------------------

void append_ptrs(std::vector<double*>& out, Matrix& m) {
  for (double& v : m.data()) out.push_back(&v);
}

void append_vals(std::vector<double>& out, const Matrix& m) {
  out.insert(out.end(), m.data().begin(), m.data().end());
}

std::vector<double*> param_ptrs(ParamSet& p) {
  std::vector<double*> out;
  for (auto& m : p.values) append_ptrs(out, m);
  return out;
}

std::vector<double> param_vals(const ParamSet& p) {
  std::vector<double> out;
  for (const auto& m : p.values) append_vals(out, m);
  return out;
}

// Random problem pieces ------------------------------------------------------

std::size_t between(SeededRng& rng, std::size_t lo, std::size_t hi) { return lo + rng.next_below(hi - lo + 1); }

Matrix gaussian(SeededRng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  Matrix m(r, c);
  for (double& v : m.data()) v = scale * rng.next_gaussian();
  return m;
}

std::vector<std::size_t> labels(SeededRng& rng, std::size_t n, std::size_t classes) {
  std::vector<std::size_t> y(n);
  for (auto& v : y) v = rng.next_below(classes);
  return y;
}

Matrix random_meta(SeededRng& rng, std::size_t n, std::size_t dim) {
  Matrix m(n, dim);
  for (std::size_t r = 0; r < n; ++r) m(r, rng.next_below(dim)) = 1.0;
  return m;
}

Matrix normalized(const Matrix& m) { return l2_normalize_rows(m).values; }

ModelConfig small_model(SeededRng& rng, HeadMode head) {
  ModelConfig c;
  c.feature_dim = between(rng, 2, 4);
  c.meta_dim = between(rng, 2, 3);
  c.num_classes = between(rng, 2, 4);
  c.hidden = {between(rng, 3, 5), between(rng, 3, 5)};
  c.embed_dim = between(rng, 3, 4);
  // Narrow projection heads make the row normalization badly conditioned
  // for a fixed difference step.
  c.head_hidden = 8;
  c.proj_dim = 6;
  c.head = head;
  c.cos_scale = 4.0;
  return c;
}

// Individual checks; each returns the relative error of one instance ---------

double check_soft_target_ce(SeededRng& rng) {
  const std::size_t n = between(rng, 1, 8), c = between(rng, 2, 5);
  Matrix z = gaussian(rng, n, c, 2.0);
  Matrix t = softmax_rows(gaussian(rng, n, c, 2.0));
  auto analytic = soft_target_ce(z, t).grad.data();
  std::vector<double*> x;
  append_ptrs(x, z);
  return relative_error(analytic, numeric_gradient([&] { return soft_target_ce(z, t).loss; }, x));
}

double check_label_smoothing(SeededRng& rng) {
  const std::size_t n = between(rng, 1, 8), c = between(rng, 2, 5);
  Matrix z = gaussian(rng, n, c, 2.0);
  auto y = labels(rng, n, c);
  const double eps = 0.3 * rng.next_uniform();
  auto analytic = label_smoothing_ce(z, y, eps).grad.data();
  std::vector<double*> x;
  append_ptrs(x, z);
  return relative_error(analytic, numeric_gradient([&] { return label_smoothing_ce(z, y, eps).loss; }, x));
}

double check_arcface(SeededRng& rng) {
  const std::size_t n = between(rng, 1, 8), c = between(rng, 2, 5), d = between(rng, 2, 6);
  Matrix e = gaussian(rng, n, d);
  Matrix w = gaussian(rng, c, d);
  auto y = labels(rng, n, c);
  ArcfaceConfig cfg;
  cfg.scale_s = 1.0 + 15.0 * rng.next_uniform();
  cfg.margin_m = 0.5 * rng.next_uniform();
  auto r = arcface(e, w, y, cfg);
  std::vector<double> analytic;
  append_vals(analytic, r.grad_embeddings);
  append_vals(analytic, r.grad_weights);
  std::vector<double*> x;
  append_ptrs(x, e);
  append_ptrs(x, w);
  return relative_error(analytic, numeric_gradient([&] { return arcface(e, w, y, cfg).loss; }, x));
}

double check_seesaw(SeededRng& rng) {
  const std::size_t n = between(rng, 1, 8), c = between(rng, 2, 5);
  Matrix z = gaussian(rng, n, c, 2.0);
  auto y = labels(rng, n, c);
  std::vector<std::uint64_t> counts(c);
  for (auto& v : counts) v = rng.next_below(200);
  SeesawConfig cfg;
  const Matrix s = seesaw_factors(z, y, counts, cfg);
  auto analytic = seesaw_with_factors(z, y, s).grad.data();
  std::vector<double*> x;
  append_ptrs(x, z);
  return relative_error(analytic, numeric_gradient([&] { return seesaw_with_factors(z, y, s).loss; }, x));
}

double check_info_nce(SeededRng& rng) {
  const std::size_t n = between(rng, 2, 8), m = between(rng, 2, 8), d = between(rng, 2, 6);
  Matrix q = gaussian(rng, n, d);
  Matrix k = gaussian(rng, m, d);
  auto pos = labels(rng, n, m);
  const double tau = 0.1 + rng.next_uniform();
  auto qn = l2_normalize_rows(q), kn = l2_normalize_rows(k);
  auto r = info_nce(qn.values, kn.values, pos, tau, true);
  std::vector<double> analytic;
  append_vals(analytic, l2_normalize_backward(qn, r.grad_queries));
  append_vals(analytic, l2_normalize_backward(kn, r.grad_keys));
  std::vector<double*> x;
  append_ptrs(x, q);
  append_ptrs(x, k);
  return relative_error(analytic, numeric_gradient([&] { return info_nce(normalized(q), normalized(k), pos, tau).loss; }, x));
}

double check_symmetrized_ctr(SeededRng& rng) {
  const std::size_t n = between(rng, 2, 8), d = between(rng, 2, 6);
  Matrix q1 = gaussian(rng, n, d), q2 = gaussian(rng, n, d);
  const Matrix k1 = normalized(gaussian(rng, n, d)), k2 = normalized(gaussian(rng, n, d));
  const double tau = 0.1 + rng.next_uniform();
  auto n1 = l2_normalize_rows(q1), n2 = l2_normalize_rows(q2);
  auto r = symmetrized_ctr(n1.values, n2.values, k1, k2, tau);
  std::vector<double> analytic;
  append_vals(analytic, l2_normalize_backward(n1, r.grad_q1));
  append_vals(analytic, l2_normalize_backward(n2, r.grad_q2));
  std::vector<double*> x;
  append_ptrs(x, q1);
  append_ptrs(x, q2);
  return relative_error(
      analytic, numeric_gradient([&] { return symmetrized_ctr(normalized(q1), normalized(q2), k1, k2, tau).loss; }, x));
}

double check_nt_xent(SeededRng& rng) {
  const std::size_t n = between(rng, 1, 5), d = between(rng, 2, 6);
  Matrix z = gaussian(rng, 2 * n, d);
  const double tau = 0.1 + rng.next_uniform();
  auto analytic = nt_xent(z, tau).grad.data();
  std::vector<double*> x;
  append_ptrs(x, z);
  return relative_error(analytic, numeric_gradient([&] { return nt_xent(z, tau).loss; }, x));
}

double check_joint_loss(SeededRng& rng) {
  ModelConfig mc = small_model(rng, HeadMode::linear);
  Model model = Model::init(mc, rng);
  const std::size_t nl = between(rng, 1, 5), nu = between(rng, 1, 4);
  LabeledBatch lb{gaussian(rng, nl, mc.feature_dim), random_meta(rng, nl, mc.meta_dim), labels(rng, nl, mc.num_classes)};
  UnlabeledBatch ub{gaussian(rng, nu, mc.feature_dim), random_meta(rng, nu, mc.meta_dim)};
  ContrastiveConfig cc;
  cc.tau = 0.2 + 0.5 * rng.next_uniform();
  JointConfig jc{rng.next_uniform(), rng.next_uniform() + 0.05};
  const AugmentPolicy aug{0.2, 0.1, 0.9, 1.1, 0.1};
  const SeededRng sup0(rng.next_u64()), ssl0(rng.next_u64());

  auto eval = [&] {
    SeededRng a = sup0, b = ssl0;
    return simclr_joint_gradients(model, lb, ub, cc, jc, aug, a, b, cross_entropy_objective);
  };
  auto analytic = param_vals(eval().total.grad);
  auto x = param_ptrs(model.mutable_params());
  return relative_error(analytic, numeric_gradient([&] { return eval().total.loss; }, x));
}

double check_model(SeededRng& rng, HeadMode head) {
  ModelConfig mc = small_model(rng, head);
  Model model = Model::init(mc, rng);
  const std::size_t n = between(rng, 1, 6);
  Matrix xs = gaussian(rng, n, mc.feature_dim);
  Matrix meta = random_meta(rng, n, mc.meta_dim);
  auto y = labels(rng, n, mc.num_classes);
  auto fw = forward(model, xs, meta);
  auto analytic = param_vals(backward(model, fw.cache, cross_entropy(fw.logits, y).grad));
  auto x = param_ptrs(model.mutable_params());
  return relative_error(analytic,
                        numeric_gradient([&] { return cross_entropy(forward(model, xs, meta).logits, y).loss; }, x));
}

double check_supervised_loss(SeededRng& rng, LossKind kind) {
  ModelConfig mc = small_model(rng, kind == LossKind::arcface ? HeadMode::cosine : HeadMode::linear);
  Model model = Model::init(mc, rng);
  const std::size_t n = between(rng, 2, 6);
  Matrix xs = gaussian(rng, n, mc.feature_dim);
  Matrix meta = random_meta(rng, n, mc.meta_dim);
  auto y = labels(rng, n, mc.num_classes);
  LossConfig lc;
  lc.kind = kind;
  lc.mixup_alpha = 0.4;
  lc.arcface.scale_s = mc.cos_scale;
  const SupervisedLoss loss0(lc, mc.num_classes);
  const SeededRng rng0(rng.next_u64());
  auto eval = [&] {
    SupervisedLoss l = loss0;
    SeededRng r = rng0;
    return l(model, xs, meta, y, r);
  };
  auto analytic = param_vals(eval().grad);
  auto x = param_ptrs(model.mutable_params());
  return relative_error(analytic, numeric_gradient([&] { return eval().loss; }, x));
}

double check_moco(SeededRng& rng) {
  ModelConfig mc = small_model(rng, HeadMode::linear);
  Model query = Model::init(mc, rng);
  const Model key = Model::init(mc, rng);
  const std::size_t n = between(rng, 2, 6);
  Matrix x1 = gaussian(rng, n, mc.feature_dim), x2 = gaussian(rng, n, mc.feature_dim);
  Matrix meta = random_meta(rng, n, mc.meta_dim);
  const double tau = 0.2 + 0.5 * rng.next_uniform();
  auto analytic = param_vals(moco_gradients(query, key, x1, x2, meta, tau).grad);
  auto x = param_ptrs(query.mutable_params());
  return relative_error(analytic,
                        numeric_gradient([&] { return moco_gradients(query, key, x1, x2, meta, tau).loss; }, x));
}

using Check = std::function<double(SeededRng&)>;

const std::vector<std::pair<std::string, Check>>& checks() {
  static const std::vector<std::pair<std::string, Check>> all = {
      {"soft_target_ce", check_soft_target_ce},
      {"label_smoothing_ce", check_label_smoothing},
      {"arcface", check_arcface},
      {"seesaw", check_seesaw},
      {"info_nce", check_info_nce},
      {"symmetrized_ctr", check_symmetrized_ctr},
      {"nt_xent", check_nt_xent},
      {"joint_loss", check_joint_loss},
      {"model_linear_head", [](SeededRng& r) { return check_model(r, HeadMode::linear); }},
      {"model_cosine_head", [](SeededRng& r) { return check_model(r, HeadMode::cosine); }},
      {"model_mixup_soft_target", [](SeededRng& r) { return check_supervised_loss(r, LossKind::soft_target_ce); }},
      {"model_label_smoothing", [](SeededRng& r) { return check_supervised_loss(r, LossKind::label_smoothing); }},
      {"model_arcface", [](SeededRng& r) { return check_supervised_loss(r, LossKind::arcface); }},
      {"model_ohem", [](SeededRng& r) { return check_supervised_loss(r, LossKind::ohem); }},
      {"model_moco_query_path", check_moco},
  };
  return all;
}

}  // namespace

std::vector<std::string> gradcheck_names() {
  std::vector<std::string> names;
  for (const auto& [name, _] : checks()) names.push_back(name);
  return names;
}

GradcheckCase run_gradcheck(const std::string& name, std::size_t instances, std::uint64_t seed) {
  for (const auto& [n, check] : checks()) {
    if (n != name) continue;
    GradcheckCase out;
    out.name = name;
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < instances; ++i) {
      SeededRng rng = SeededRng::derive(seed, name, i);
      const double err = check(rng);
      if (!(err <= out.max_rel_error) || i == 0) {
        out.max_rel_error = std::isnan(err) ? std::numeric_limits<double>::infinity() : err;
        out.worst_instance = i;
      }
      ++out.instances;
    }
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
  }
  throw ConfigError("unknown gradient check: " + name);
}

std::vector<GradcheckCase> run_gradcheck_suite(std::size_t instances, std::uint64_t seed) {
  std::vector<GradcheckCase> out;
  for (const auto& name : gradcheck_names()) out.push_back(run_gradcheck(name, instances, seed));
  return out;
}

}  // namespace fgvc
