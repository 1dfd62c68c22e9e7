#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "fgvc/datagen.hpp"

using namespace fgvc;

namespace {

DatasetConfig small_config(std::uint64_t seed = 3) {
  DatasetConfig c;
  c.num_meta_categories = 3;
  c.subclasses_per_meta = 2;
  c.feature_dim = 6;
  c.head_count = 40;
  c.eval_per_class = 10;
  c.seed = seed;
  return c;
}

double distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("class_count_schedule hand values") {
  CHECK(class_count_schedule(4, 100, 0.01) == std::vector<std::size_t>{100, 22, 5, 1});
  CHECK(class_count_schedule(5, 30, 1.0) == std::vector<std::size_t>(5, 30));
  CHECK(class_count_schedule(2, 50, 0.02) == std::vector<std::size_t>{50, 1});
  CHECK_THROWS_AS(class_count_schedule(4, 100, 0.0), ConfigError);
  CHECK_THROWS_AS(class_count_schedule(1, 100, 0.5), ConfigError);
}

TEST_CASE("class_count_schedule is monotone and at least one") {
  for (std::size_t c = 2; c < 20; ++c)
    for (double r : {0.001, 0.02, 0.3, 0.99}) {
      auto s = class_count_schedule(c, 77, r);
      CHECK(s.front() == 77);
      for (std::size_t i = 1; i < s.size(); ++i) {
        CHECK(s[i] <= s[i - 1]);
        CHECK(s[i] >= 1);
      }
    }
}

TEST_CASE("config validation rejects infeasible geometry") {
  DatasetConfig c = small_config();
  c.inter_subclass_gap = c.meta_separation;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.meta_fidelity = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.imbalance_ratio = 0.0;
  CHECK_THROWS_AS(generate(c), ConfigError);
}

TEST_CASE("generated class counts follow the schedule exactly") {
  Dataset d = generate(small_config());
  const auto schedule = class_count_schedule(d.num_classes(), 40, d.config.imbalance_ratio);
  CHECK(d.class_counts == schedule);
  std::vector<std::size_t> recount(d.num_classes(), 0);
  for (std::size_t i : d.indices(Split::train)) ++recount[d.labels[i]];
  CHECK(recount == schedule);
}

TEST_CASE("generation is deterministic and seed sensitive") {
  Dataset a = generate(small_config(5)), b = generate(small_config(5)), c = generate(small_config(6));
  CHECK(a.features == b.features);
  CHECK(a.labels == b.labels);
  CHECK(a.meta == b.meta);
  CHECK(a.content_hash() == b.content_hash());
  CHECK(a.content_hash() != c.content_hash());
}

TEST_CASE("meta_fidelity of one matches the true meta category") {
  DatasetConfig cfg = small_config();
  cfg.meta_fidelity = 1.0;
  Dataset d = generate(cfg);
  for (std::size_t i = 0; i < d.size(); ++i) CHECK(d.meta[i] == cfg.meta_of_class(d.labels[i]));
}

TEST_CASE("meta_fidelity controls the match rate and wrong metas are never the true one") {
  DatasetConfig cfg = small_config();
  cfg.meta_fidelity = 0.0;
  Dataset d = generate(cfg);
  for (std::size_t i = 0; i < d.size(); ++i) CHECK(d.meta[i] != cfg.meta_of_class(d.labels[i]));

  cfg.meta_fidelity = 0.7;
  cfg.head_count = 400;
  cfg.eval_per_class = 200;
  d = generate(cfg);
  std::size_t match = 0;
  for (std::size_t i = 0; i < d.size(); ++i) match += d.meta[i] == cfg.meta_of_class(d.labels[i]);
  CHECK(std::abs(static_cast<double>(match) / d.size() - 0.7) < 0.04);
}

TEST_CASE("zero noise puts every sample on its class center") {
  DatasetConfig cfg = small_config();
  cfg.intra_class_noise = 0.0;
  Dataset d = generate(cfg);
  for (std::size_t i = 0; i < d.size(); ++i) {
    auto x = d.features.row(i);
    auto c = d.class_centers.row(d.labels[i]);
    for (std::size_t k = 0; k < x.size(); ++k) CHECK(x[k] == c[k]);
  }
}

TEST_CASE("siblings are closer than classes of other meta categories") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    DatasetConfig cfg;
    cfg.seed = seed;
    Dataset d = generate(cfg);
    const std::size_t C = d.num_classes();
    for (std::size_t c = 0; c < C; ++c) {
      double same = 0.0, other = 0.0;
      std::size_t ns = 0, no = 0;
      for (std::size_t o = 0; o < C; ++o) {
        if (o == c) continue;
        const double dist = distance(d.class_centers.row(c), d.class_centers.row(o));
        if (cfg.meta_of_class(o) == cfg.meta_of_class(c)) {
          same += dist;
          ++ns;
        } else {
          other += dist;
          ++no;
        }
      }
      CHECK(same / ns < other / no);
    }
  }
}

TEST_CASE("every split is populated and unlabeled samples keep hidden labels") {
  Dataset d = generate(small_config());
  CHECK_FALSE(d.indices(Split::train).empty());
  CHECK_FALSE(d.indices(Split::val).empty());
  auto test = d.indices(Split::test_unlabeled);
  CHECK_FALSE(test.empty());
  for (std::size_t i : test) CHECK(d.labels[i] < d.num_classes());
}

TEST_CASE("meta_onehot rows and the disabled channel") {
  Dataset d = generate(small_config());
  std::vector<std::size_t> idx{0, 1, 2};
  Matrix on = d.meta_onehot(idx), off = d.meta_onehot(idx, false);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    double s = 0.0;
    for (std::size_t k = 0; k < on.cols(); ++k) s += on(r, k);
    CHECK(s == 1.0);
    CHECK(on(r, d.meta[idx[r]]) == 1.0);
    for (std::size_t k = 0; k < off.cols(); ++k) CHECK(off(r, k) == 0.0);
  }
}

TEST_CASE("dataset text round trip is exact") {
  Dataset d = generate(small_config());
  Dataset r = dataset_from_text(dataset_to_text(d));
  CHECK(r.features == d.features);
  CHECK(r.labels == d.labels);
  CHECK(r.meta == d.meta);
  CHECK(r.split == d.split);
  CHECK(r.class_counts == d.class_counts);
  CHECK(r.content_hash() == d.content_hash());

  const auto path = std::filesystem::temp_directory_path() / "fgvc_dataset_roundtrip.json";
  save_dataset(d, path);
  CHECK(load_dataset(path).content_hash() == d.content_hash());
  std::filesystem::remove(path);
}

TEST_CASE("class_counts_csv lists every class") {
  Dataset d = generate(small_config());
  const std::string csv = class_counts_csv(d);
  CHECK(csv.rfind("class,meta,count\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == static_cast<long>(d.num_classes() + 1));
}

TEST_CASE("augment: identity, full masking and determinism") {
  SeededRng rng(1);
  std::vector<double> x{1.5, -2.0, 0.25, 7.0};
  CHECK(augment(x, AugmentPolicy::identity(), rng) == x);

  AugmentPolicy mask_all;
  mask_all.mask_prob = 1.0;
  mask_all.jitter_sigma = 0.3;
  for (double v : augment(x, mask_all, rng)) CHECK(v == 0.0);

  AugmentPolicy noisy{0.2, 0.1, 0.8, 1.2, 0.1};
  SeededRng a(9), b(9);
  CHECK(augment(x, noisy, a) == augment(x, noisy, b));
}

TEST_CASE("augment scale only multiplies") {
  AugmentPolicy p;
  p.scale_lo = p.scale_hi = 2.0;
  SeededRng rng(1);
  std::vector<double> x{1.0, -3.0};
  auto y = augment(x, p, rng);
  CHECK(y[0] == 2.0);
  CHECK(y[1] == -6.0);
}

TEST_CASE("mixup endpoints and soft target structure") {
  Matrix xa = Matrix::from_rows({{1.0, 2.0}, {3.0, 4.0}});
  Matrix xb = Matrix::from_rows({{-1.0, 0.0}, {5.0, 6.0}});
  std::vector<std::size_t> ya{0, 1}, yb{2, 1};

  auto full = mixup_with_lambda(xa, ya, xb, yb, 3, 1.0);
  CHECK(full.features == xa);
  CHECK(full.soft_targets == one_hot(ya, 3));

  auto half = mixup_with_lambda(xa, ya, xb, yb, 3, 0.5);
  CHECK(half.soft_targets(0, 0) == 0.5);
  CHECK(half.soft_targets(0, 2) == 0.5);
  CHECK(half.soft_targets(0, 1) == 0.0);
  CHECK(half.soft_targets(1, 1) == 1.0);
  CHECK(half.features(1, 0) == 4.0);

  SeededRng rng(12);
  for (int t = 0; t < 100; ++t) {
    auto m = mixup(xa, ya, xb, yb, 3, 0.2, rng);
    CHECK(m.lambda >= 0.0);
    CHECK(m.lambda <= 1.0);
    for (std::size_t r = 0; r < 2; ++r) {
      double s = 0.0;
      for (std::size_t k = 0; k < 3; ++k) {
        CHECK(m.soft_targets(r, k) >= 0.0);
        s += m.soft_targets(r, k);
      }
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }
}
