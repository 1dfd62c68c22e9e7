// Acceptance runner: one PASS/FAIL line per criterion. Desk-scale experiments
// write their raw numbers under --out so a red line can be inspected.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "fgvc/gradcheck.hpp"
#include "fgvc/harness.hpp"

using namespace fgvc;

namespace {

// Tolerances and experiment sizes.
constexpr std::size_t kGradInstances = 100;
constexpr std::uint64_t kGradSeed = 7;
constexpr double kGradBudgetSeconds = 60.0;
constexpr double kIdentityTol = 1e-12;
constexpr double kClosedFormTol = 1e-9;
constexpr double kSeesawFactorTol = 1e-6;
constexpr double kLongTailMargin = 0.02;
constexpr double kMetaMargin = 0.02;
constexpr double kEnsembleSlack = 0.005;
constexpr int kEnsembleMinWins = 3;
constexpr double kRunBudgetSeconds = 60.0;
constexpr std::uint64_t kSeeds[] = {1, 2, 3, 4, 5};
constexpr std::size_t kPseudoInstances = 1000;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::filesystem::path g_out;

void write_file(const std::string& name, const std::string& text) {
  std::ofstream(g_out / name) << text;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return INFINITY;
  double m = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a.data()[k] - b.data()[k]));
  return m;
}

double max_abs_diff(const ParamSet& a, const ParamSet& b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, max_abs_diff(a.values[k], b.values[k]));
  return m;
}

Matrix random_matrix(SeededRng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  Matrix m(r, c);
  for (double& v : m.data()) v = scale * rng.next_gaussian();
  return m;
}

// Paired desk-scale run: dataset and model seeded from the same value.
RunConfig base_config(std::uint64_t seed) {
  RunConfig c;
  c.seed = seed;
  c.dataset.seed = seed;
  c.tta.views = 1;
  return c;
}

struct Timed {
  RunOutputs out;
  double seconds;
};

Timed timed_run(const RunConfig& c) {
  const auto t0 = std::chrono::steady_clock::now();
  RunOutputs out = run_pipeline(c);
  return {std::move(out), std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

// ---------------------------------------------------------------------------

Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  auto cases = run_gradcheck_suite(kGradInstances, kGradSeed);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  double worst = 0.0;
  std::string worst_name, failed;
  std::ostringstream log;
  for (const auto& c : cases) {
    log << c.name << ',' << c.instances << ',' << c.max_rel_error << ',' << c.seconds << '\n';
    if (c.max_rel_error > worst) {
      worst = c.max_rel_error;
      worst_name = c.name;
    }
    if (!c.passed() || c.instances < kGradInstances) failed += " " + c.name;
  }
  write_file("gradcheck.csv", "check,instances,max_rel_error,seconds\n" + log.str());
  const bool ok = failed.empty() && secs < kGradBudgetSeconds;
  return {ok, fmt("%zu checks x %zu instances, worst %.2e (%s), %.1fs%s", cases.size(), kGradInstances, worst,
                  worst_name.c_str(), secs, failed.empty() ? "" : (" failing:" + failed).c_str())};
}

Outcome reduction_identities() {
  SeededRng rng(11);
  double arc = 0.0, see = 0.0, ls = 0.0, joint = 0.0;
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 1 + rng.next_below(8), c = 2 + rng.next_below(4), d = 2 + rng.next_below(6);
    std::vector<std::size_t> y(n);
    for (auto& v : y) v = rng.next_below(c);

    // Arcface without margin against cosine logits through plain CE.
    Matrix e = random_matrix(rng, n, d), w = random_matrix(rng, c, d);
    ArcfaceConfig acfg;
    acfg.margin_m = 0.0;
    acfg.scale_s = 1.0 + 30.0 * rng.next_uniform();
    auto a = arcface(e, w, y, acfg);
    auto ce_cos = cross_entropy(cosine_logits(e, w, acfg.scale_s), y);
    arc = std::max({arc, std::abs(a.loss - ce_cos.loss), max_abs_diff(a.logits, cosine_logits(e, w, acfg.scale_s))});

    // Seesaw with balanced counts and the label holding the top probability.
    Matrix z = random_matrix(rng, n, c, 2.0);
    std::vector<std::size_t> top(n);
    for (std::size_t i = 0; i < n; ++i) top[i] = argmax(z.row(i));
    SeesawConfig scfg;
    scfg.gamma = 1.0;
    std::vector<std::uint64_t> balanced(c, 1 + rng.next_below(50));
    auto s = seesaw_with_factors(z, top, seesaw_factors(z, top, balanced, scfg));
    auto ce = cross_entropy(z, top);
    see = std::max({see, std::abs(s.loss - ce.loss), max_abs_diff(s.grad, ce.grad)});

    auto l = label_smoothing_ce(z, y, 0.0);
    auto ce_y = cross_entropy(z, y);
    ls = std::max({ls, std::abs(l.loss - ce_y.loss), max_abs_diff(l.grad, ce_y.grad)});

    LossResult self{rng.next_uniform(), random_matrix(rng, n, c), {}};
    auto j = joint_loss(ce_y, self, JointConfig{1.0, 0.0});
    joint = std::max({joint, std::abs(j.loss - ce_y.loss), max_abs_diff(j.grad, ce_y.grad)});
  }

  // The full joint trainer at (1, 0) against the supervised step on the same batches.
  RunConfig cfg = base_config(3);
  cfg.dataset.head_count = 40;
  Dataset data = generate(cfg.dataset);
  SeededRng init(5);
  Model m0 = Model::init(model_config_for(cfg, data), init);
  const auto train = data.indices(Split::train);
  SeededRng brng(9);
  auto labeled = make_labeled_batches(data, train, {}, 16, true, brng);
  auto unlabeled = make_unlabeled_batches(data, data.indices(Split::test_unlabeled), 16, true, brng);
  const std::size_t nb = std::min(labeled.size(), unlabeled.size());
  labeled.resize(nb);
  unlabeled.resize(nb);
  const AugmentPolicy aug = cfg.train_augment;
  AdamWConfig oc = optimizer_for(cfg, train.size(), 1);
  Model ma = m0, mb = m0;
  OptimizerState oa = OptimizerState::create(ma.params(), oc);
  OptimizerState ob = OptimizerState::create(mb.params(), oc);
  SeededRng sup_a(10), ssl_a(11), sup_b(10);
  simclr_joint_epoch(ma, oa, labeled, unlabeled, cfg.contrastive, JointConfig{1.0, 0.0}, aug, sup_a, ssl_a);
  for (const auto& batch : labeled) {
    Matrix x = augment_rows(batch.features, aug, sup_b);
    accumulate_and_step(mb.mutable_params(), ob, cross_entropy_objective(mb, x, batch.meta, batch.labels).grad);
  }
  const double trainer_diff = max_abs_diff(ma.params(), mb.params());

  const bool ok = arc < kIdentityTol && see < kIdentityTol && ls < kIdentityTol && joint < kIdentityTol &&
                  trainer_diff < kIdentityTol;
  return {ok, fmt("max |diff| arcface %.1e, seesaw %.1e, smoothing %.1e, joint %.1e, joint trainer %.1e", arc, see, ls,
                  joint, trainer_diff)};
}

Outcome closed_forms() {
  Matrix same(4, 3, 0.0);
  for (std::size_t r = 0; r < 4; ++r) same(r, 0) = 1.0;
  const double ctr_val = symmetrized_ctr(same, same, same, same, 0.25).loss;
  const bool ctr_ok = std::abs(ctr_val - 2.0 * 0.25 * std::log(4.0) * 2.0) < kClosedFormTol &&
                      std::abs(ctr_val - 1.386294) < 1e-6;

  double uni = 0.0;
  for (std::size_t c = 2; c <= 50; ++c) {
    Matrix z(3, c, 1.7);
    std::vector<std::size_t> y{0, c - 1, c / 2};
    uni = std::max(uni, std::abs(cross_entropy(z, y).loss - std::log(static_cast<double>(c))));
  }
  const double m_val = seesaw_mitigation(100, 10, 0.8);
  const double c_val = seesaw_compensation(0.1, 0.2, 2.0);
  const bool ok = ctr_ok && uni < kClosedFormTol && std::abs(m_val - 0.158489) < kSeesawFactorTol && c_val == 4.0;
  return {ok, fmt("ctr %.9f, uniform CE max dev %.1e, M %.6f, C %.17g", ctr_val, uni, m_val, c_val)};
}

Outcome long_tail() {
  std::ostringstream csv;
  csv << "seed,loss,macro_f1,head_f1,tail_f1,seconds\n";
  std::vector<double> soft, arc, see;
  double slowest = 0.0;
  for (auto s : kSeeds) {
    for (auto kind : {LossKind::soft_target_ce, LossKind::arcface, LossKind::seesaw}) {
      RunConfig c = base_config(s);
      c.loss.kind = kind;
      auto r = timed_run(c);
      slowest = std::max(slowest, r.seconds);
      const auto& f = r.out.manifest.final_test;
      csv << s << ',' << to_string(kind) << ',' << f.macro << ',' << f.head_macro << ',' << f.tail_macro << ','
          << r.seconds << '\n';
      (kind == LossKind::soft_target_ce ? soft : kind == LossKind::arcface ? arc : see).push_back(f.tail_macro);
    }
  }
  write_file("long_tail.csv", csv.str());
  const double ga = mean(arc) - mean(soft), gs = mean(see) - mean(soft);
  const bool ok = ga >= kLongTailMargin && gs >= kLongTailMargin && slowest <= kRunBudgetSeconds;
  return {ok, fmt("tail F1 soft %.4f, arcface %.4f (%+.4f), seesaw %.4f (%+.4f), need >= +%.2f each; slowest run %.2fs",
                  mean(soft), mean(arc), ga, mean(see), gs, kLongTailMargin, slowest)};
}

Outcome meta_information() {
  std::ostringstream csv;
  csv << "seed,use_meta,macro_f1\n";
  std::vector<double> on, off;
  for (auto s : kSeeds) {
    for (bool meta : {true, false}) {
      RunConfig c = base_config(s);
      c.dataset.meta_fidelity = 0.9;
      c.use_meta = meta;
      const double f = run(c).final_test.macro;
      csv << s << ',' << meta << ',' << f << '\n';
      (meta ? on : off).push_back(f);
    }
  }
  write_file("meta.csv", csv.str());
  const double gap = mean(on) - mean(off);
  return {gap >= kMetaMargin, fmt("macro F1 meta on %.4f, off %.4f, gap %+.4f (need >= +%.2f)", mean(on), mean(off),
                                  gap, kMetaMargin)};
}

Outcome self_supervised() {
  std::ostringstream csv;
  csv << "seed,run,macro_f1\n";
  std::vector<double> joint, sup;
  std::ostringstream moco_log;
  moco_log << "seed,epoch,contrastive_loss\n";
  int monotone_seeds = 0;
  for (auto s : kSeeds) {
    RunConfig j = base_config(s);
    j.trainer = TrainerKind::simclr_joint;
    j.epochs = 30;
    j.finetune_epochs = 10;
    RunConfig p = base_config(s);
    p.epochs = j.epochs + j.finetune_epochs;
    joint.push_back(run(j).final_test.macro);
    sup.push_back(run(p).final_test.macro);
    csv << s << ",joint+finetune," << joint.back() << '\n' << s << ",supervised," << sup.back() << '\n';

    RunConfig m = base_config(s);
    m.trainer = TrainerKind::moco_then_finetune;
    m.pretrain_epochs = 10;
    m.finetune_epochs = 0;
    RunManifest mm = run(m);
    double prev = INFINITY;
    bool strict = true;
    for (const auto& e : mm.epochs) {
      if (e.stage != "moco_pretrain") continue;
      moco_log << s << ',' << e.epoch << ',' << e.train_loss << '\n';
      strict = strict && e.train_loss < prev;
      prev = e.train_loss;
    }
    monotone_seeds += strict;
  }
  write_file("ssl.csv", csv.str());
  write_file("moco_loss.csv", moco_log.str());
  const int n = static_cast<int>(std::size(kSeeds));
  const bool ok = mean(joint) >= mean(sup) && monotone_seeds == n;
  return {ok, fmt("joint+finetune %.4f vs supervised %.4f; MoCo loss strictly decreasing on %d/%d seeds", mean(joint),
                  mean(sup), monotone_seeds, n)};
}

Outcome pseudo_labels() {
  const double fractions[] = {0.0, 0.1, 0.2, 0.3};
  std::vector<std::vector<double>> scores(std::size(fractions));
  for (auto s : kSeeds) {
    for (std::size_t k = 0; k < std::size(fractions); ++k) {
      RunConfig c = base_config(s);
      c.pseudo_epochs = 10;
      c.pseudo_label_fraction = fractions[k];
      scores[k].push_back(run(c).final_test.macro);
    }
  }
  std::ostringstream csv;
  csv << "method,pseudo_fraction,macro_f1_mean";
  for (auto s : kSeeds) csv << ",seed_" << s;
  csv << '\n';
  std::string best = "none";
  double best_gain = -INFINITY;
  for (std::size_t k = 0; k < std::size(fractions); ++k) {
    csv << (k == 0 ? "train" : "train+pseudo") << ',' << fractions[k] << ',' << mean(scores[k]);
    for (double v : scores[k]) csv << ',' << v;
    csv << '\n';
    if (k > 0 && mean(scores[k]) - mean(scores[0]) > best_gain) {
      best_gain = mean(scores[k]) - mean(scores[0]);
      best = fmt("%.1f", fractions[k]);
    }
  }
  write_file("pseudo_sweep.csv", csv.str());
  return {best_gain >= 0.0, fmt("baseline %.4f; +0.1 %.4f, +0.2 %.4f, +0.3 %.4f; best %s (%+.4f)", mean(scores[0]),
                                mean(scores[1]), mean(scores[2]), mean(scores[3]), best.c_str(), best_gain)};
}

Outcome ensemble() {
  // Three members differing in seed and loss.
  const LossKind kinds[] = {LossKind::soft_target_ce, LossKind::seesaw, LossKind::label_smoothing};
  std::vector<std::vector<double>> single(std::size(kinds));
  std::vector<double> fused;
  std::ostringstream csv;
  csv << "seed,model,macro_f1\n";
  for (auto s : kSeeds) {
    std::vector<PredictionSet> sets;
    Dataset data;
    for (std::size_t k = 0; k < std::size(kinds); ++k) {
      RunConfig c = base_config(s);
      c.seed = 100 * s + k;
      c.loss.kind = kinds[k];
      RunOutputs o = run_pipeline(c);
      single[k].push_back(o.manifest.final_test.macro);
      csv << s << ',' << to_string(kinds[k]) << ',' << single[k].back() << '\n';
      sets.push_back(std::move(o.test_predictions));
      if (k == 0) data = generate(c.dataset);
    }
    PredictionSet f = ensemble_max_logit(sets);
    fused.push_back(
        macro_f1(f.predicted, data.gather_labels(f.sample_ids), data.num_classes(), data.class_counts).macro);
    csv << s << ",max_logit_ensemble," << fused.back() << '\n';
  }
  write_file("ensemble.csv", csv.str());
  std::size_t best = 0;
  for (std::size_t k = 1; k < std::size(kinds); ++k)
    if (mean(single[k]) > mean(single[best])) best = k;
  int wins = 0;
  for (std::size_t i = 0; i < fused.size(); ++i) wins += fused[i] > single[best][i];
  const bool ok = mean(fused) >= mean(single[best]) - kEnsembleSlack && wins >= kEnsembleMinWins;
  return {ok, fmt("ensemble %.4f vs best single (%s) %.4f; strictly better on %d/5 seeds (need %d)", mean(fused),
                  to_string(kinds[best]).c_str(), mean(single[best]), wins, kEnsembleMinWins)};
}

// Brute-force macro F1 from a full confusion matrix.
double oracle_macro_f1(const std::vector<std::size_t>& p, const std::vector<std::size_t>& y, std::size_t c) {
  std::vector<std::vector<std::size_t>> conf(c, std::vector<std::size_t>(c, 0));
  for (std::size_t i = 0; i < y.size(); ++i) ++conf[y[i]][p[i]];
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t k = 0; k < c; ++k) {
    std::size_t row = 0, col = 0;
    for (std::size_t j = 0; j < c; ++j) {
      row += conf[k][j];
      col += conf[j][k];
    }
    if (row == 0) continue;
    ++present;
    sum += 2.0 * conf[k][k] / static_cast<double>(row + col);
  }
  return sum / present;
}

// Visits every non-decreasing sequence of length n over [0, k).
void for_each_multiset(std::size_t k, std::size_t n, const std::function<void(const std::vector<std::size_t>&)>& f) {
  std::vector<std::size_t> t(n, 0);
  while (true) {
    f(t);
    std::size_t pos = n;
    while (pos > 0 && t[pos - 1] == k - 1) --pos;
    if (pos == 0) return;
    const std::size_t v = t[pos - 1] + 1;
    for (std::size_t i = pos - 1; i < n; ++i) t[i] = v;
  }
}

Outcome exhaustive_oracles() {
  // Ordered enumeration of every (truth, prediction) pair of sequences where
  // that stays small, and every multiset of (truth, prediction) pairs for all
  // sizes; macro F1 depends on the samples only through that multiset.
  constexpr double kOrderedLimit = 1 << 24;
  std::size_t ordered = 0, multisets = 0, mismatches = 0;
  auto check = [&](const std::vector<std::size_t>& p, const std::vector<std::size_t>& y, std::size_t c) {
    if (macro_f1(p, y, c).macro != oracle_macro_f1(p, y, c)) ++mismatches;
  };
  for (std::size_t c = 1; c <= 4; ++c) {
    for (std::size_t n = 1; n <= 8; ++n) {
      std::vector<std::size_t> y(n), p(n);
      for_each_multiset(c * c, n, [&](const std::vector<std::size_t>& t) {
        for (std::size_t i = 0; i < n; ++i) {
          y[i] = t[i] / c;
          p[i] = t[i] % c;
        }
        ++multisets;
        check(p, y, c);
      });
      if (std::pow(static_cast<double>(c), 2.0 * n) > kOrderedLimit) continue;
      std::fill(y.begin(), y.end(), 0);
      std::fill(p.begin(), p.end(), 0);
      while (true) {
        ++ordered;
        check(p, y, c);
        std::size_t pos = 0;
        while (pos < 2 * n) {
          auto& digit = pos < n ? y[pos] : p[pos - n];
          if (++digit < c) break;
          digit = 0;
          ++pos;
        }
        if (pos == 2 * n) break;
      }
    }
  }

  SeededRng rng(17);
  std::size_t pseudo_bad = 0;
  for (std::size_t t = 0; t < kPseudoInstances; ++t) {
    const std::size_t n = 1 + rng.next_below(40), c = 1 + rng.next_below(6);
    PredictionSet ps;
    ps.logits = Matrix(n, c);
    for (double& v : ps.logits.data()) v = std::round(4.0 * rng.next_gaussian()) / 4.0;  // forces ties
    ps.sample_ids.resize(n);
    for (auto& id : ps.sample_ids) id = rng.next_below(1u << 20);
    ps.refresh_predictions();
    const double f = rng.next_uniform();
    const std::size_t k = static_cast<std::size_t>(std::floor(f * n + 1e-9));

    std::vector<std::pair<double, std::size_t>> keyed(n);
    for (std::size_t r = 0; r < n; ++r) {
      double best = -INFINITY;
      for (double v : ps.logits.row(r)) best = std::max(best, v);
      keyed[r] = {-best, r};
    }
    std::sort(keyed.begin(), keyed.end());
    PseudoLabels expect;
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t r = keyed[i].second;
      expect.sample_ids.push_back(ps.sample_ids[r]);
      std::size_t arg = 0;
      for (std::size_t j = 1; j < c; ++j)
        if (ps.logits(r, j) > ps.logits(r, arg)) arg = j;
      expect.labels.push_back(arg);
    }
    PseudoLabels got = pseudo_label_select(ps, f);
    if (got.sample_ids != expect.sample_ids || got.labels != expect.labels) ++pseudo_bad;
  }
  return {mismatches == 0 && pseudo_bad == 0,
          fmt("macro_f1 %zu mismatches over %zu multisets + %zu ordered cases; pseudo_label_select %zu/%zu exact",
              mismatches, multisets, ordered, kPseudoInstances - pseudo_bad, kPseudoInstances)};
}

Outcome determinism() {
  bool metrics_same = true;
  for (auto trainer : {TrainerKind::supervised, TrainerKind::moco_then_finetune, TrainerKind::simclr_joint}) {
    RunConfig c = base_config(4);
    c.trainer = trainer;
    c.loss.kind = LossKind::seesaw;
    c.pseudo_epochs = 2;
    c.pseudo_label_fraction = 0.2;
    c.tta.views = 5;
    c.accumulate_steps = 2;
    metrics_same = metrics_same && run(c).metrics_json().dump() == run(c).metrics_json().dump();
  }

  RunConfig c = base_config(6);
  c.loss.kind = LossKind::arcface;
  Dataset d = generate(c.dataset);
  SeededRng init(c.seed);
  const Model start = Model::init(model_config_for(c, d), init);
  const auto train = d.indices(Split::train);
  SupervisedTrainer full(c, d, start, train, {}, 12, "supervised");
  while (!full.done()) full.run_epoch();
  SupervisedTrainer first(c, d, start, train, {}, 12, "supervised");
  for (int e = 0; e < 5; ++e) first.run_epoch();
  const auto path = g_out / "resume_checkpoint.bin";
  save_checkpoint(first.to_checkpoint(), path);
  SupervisedTrainer second(c, d, start, train, {}, 12, "supervised");
  second.restore(load_checkpoint(path));
  while (!second.done()) second.run_epoch();
  const bool resume_same = second.model().params() == full.model().params() && second.optimizer() == full.optimizer();
  return {metrics_same && resume_same, fmt("repeat runs bit-identical: %s; resume after epoch 5 of 12 bit-identical: %s",
                                           metrics_same ? "yes" : "no", resume_same ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fgvc acceptance criteria"};
  std::string out = "acceptance_out";
  bool strict = false;
  app.add_option("--out", out, "directory for experiment CSVs");
  app.add_flag("--strict", strict, "exit non-zero when any criterion fails");
  CLI11_PARSE(app, argc, argv);
  g_out = out;
  std::filesystem::create_directories(g_out);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient suite", gradient_suite},
      {"reduction identities", reduction_identities},
      {"closed-form values", closed_forms},
      {"long-tail losses beat soft-target CE on tail classes", long_tail},
      {"meta information helps", meta_information},
      {"self-supervised training", self_supervised},
      {"pseudo labels", pseudo_labels},
      {"max-logit ensemble", ensemble},
      {"exhaustive oracles", exhaustive_oracles},
      {"determinism and resume", determinism},
  };
  int failed = 0, harness_errors = 0;
  std::ofstream summary(g_out / "summary.txt");
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
      ++harness_errors;
    }
    failed += !o.pass;
    const std::string line = fmt("%s criterion %zu (%s): %s", o.pass ? "PASS" : "FAIL", i + 1,
                                 criteria[i].first.c_str(), o.detail.c_str());
    std::printf("%s\n", line.c_str());
    summary << line << '\n' << std::flush;
    std::fflush(stdout);
  }
  std::printf("%zu/%zu criteria pass; details under %s\n", criteria.size() - failed, criteria.size(), out.c_str());
  // Red criteria are reported, not hidden; a crash always fails the run.
  if (harness_errors > 0) return 2;
  return strict && failed > 0 ? 1 : 0;
}
