#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "fgvc/gradcheck.hpp"
#include "fgvc/losses.hpp"
#include "fgvc/model.hpp"

using namespace fgvc;

namespace {

ModelConfig small(HeadMode head = HeadMode::linear) {
  ModelConfig c;
  c.feature_dim = 3;
  c.meta_dim = 2;
  c.num_classes = 3;
  c.hidden = {5};
  c.embed_dim = 4;
  c.head_hidden = 5;
  c.proj_dim = 3;
  c.head = head;
  return c;
}

Matrix random_matrix(SeededRng& rng, std::size_t r, std::size_t c) {
  Matrix m(r, c);
  for (double& v : m.data()) v = rng.next_gaussian();
  return m;
}

Matrix random_meta(SeededRng& rng, std::size_t n, std::size_t dim) {
  Matrix m(n, dim);
  for (std::size_t r = 0; r < n; ++r) m(r, rng.next_below(dim)) = 1.0;
  return m;
}

ParamSet grads_for(const Model& model, const Matrix& x, const Matrix& meta, std::span<const std::size_t> y) {
  auto fw = forward(model, x, meta);
  return backward(model, fw.cache, cross_entropy(fw.logits, y).grad);
}

std::filesystem::path temp_file(const std::string& name) { return std::filesystem::temp_directory_path() / name; }

}  // namespace

TEST_CASE("forward with zero parameters gives zero logits") {
  SeededRng rng(1);
  Model m = Model::init(small(), rng);
  for (auto& v : m.mutable_params().values) v = Matrix(v.rows(), v.cols());
  auto fw = forward(m, random_matrix(rng, 4, 3), random_meta(rng, 4, 2));
  for (double v : fw.logits.data()) CHECK(v == 0.0);
}

TEST_CASE("forward on a single linear encoder layer matches hand arithmetic") {
  ModelConfig c;
  c.feature_dim = 2;
  c.meta_dim = 1;
  c.num_classes = 2;
  c.hidden = {};
  c.embed_dim = 2;
  c.head_hidden = 2;
  c.proj_dim = 2;
  SeededRng rng(1);
  Model m = Model::init(c, rng);
  auto& p = m.mutable_params();
  // embedding = [x0 + meta, 2 x1] + [0.5, 0]
  p.values[p.index_of("encoder.0.weight")] = Matrix::from_rows({{1.0, 0.0, 1.0}, {0.0, 2.0, 0.0}});
  p.values[p.index_of("encoder.0.bias")] = Matrix::from_rows({{0.5, 0.0}});
  // logits = [e0 - e1, e0 + e1] + [0, 1]
  p.values[p.index_of("classifier.weight")] = Matrix::from_rows({{1.0, -1.0}, {1.0, 1.0}});
  p.values[p.index_of("classifier.bias")] = Matrix::from_rows({{0.0, 1.0}});
  auto fw = forward(m, Matrix::from_rows({{3.0, 1.0}}), Matrix::from_rows({{1.0}}));
  // embedding = [3 + 1 + 0.5, 2] = [4.5, 2]
  CHECK(fw.embedding(0, 0) == 4.5);
  CHECK(fw.embedding(0, 1) == 2.0);
  CHECK(fw.logits(0, 0) == 2.5);
  CHECK(fw.logits(0, 1) == 7.5);
}

TEST_CASE("disabled meta equals a zero meta vector") {
  SeededRng rng(2);
  Model m = Model::init(small(), rng);
  Matrix x = random_matrix(rng, 3, 3);
  auto a = forward(m, x, Matrix(3, 2));
  auto b = forward(m, x, Matrix(3, 2, 0.0));
  CHECK(a.logits == b.logits);
  CHECK_THROWS_AS(forward(m, x, Matrix(3, 3)), NumericError);
  CHECK_THROWS_AS(forward(m, Matrix(3, 4), Matrix(3, 2)), NumericError);
}

TEST_CASE("cosine head logits lie within the scale") {
  SeededRng rng(3);
  Model m = Model::init(small(HeadMode::cosine), rng);
  CHECK_FALSE(m.classifier_bias().has_value());
  auto fw = forward(m, random_matrix(rng, 6, 3), random_meta(rng, 6, 2));
  for (double v : fw.logits.data()) CHECK(std::abs(v) <= m.config().cos_scale + 1e-12);
}

TEST_CASE("backward: zero upstream, stale cache and duplicated samples") {
  SeededRng rng(4);
  Model m = Model::init(small(), rng);
  Matrix x = random_matrix(rng, 2, 3), meta = random_meta(rng, 2, 2);
  auto fw = forward(m, x, meta);
  for (const auto& g : backward(m, fw.cache, Matrix(2, 3)).values)
    for (double v : g.data()) CHECK(v == 0.0);

  // Sum-reduced gradient of [a, a] is twice the gradient of [a].
  Matrix x1 = Matrix::from_rows({{0.3, -1.0, 2.0}}), m1 = Matrix::from_rows({{1.0, 0.0}});
  Matrix x2 = Matrix::from_rows({{0.3, -1.0, 2.0}, {0.3, -1.0, 2.0}}), m2 = Matrix::from_rows({{1.0, 0.0}, {1.0, 0.0}});
  auto f1 = forward(m, x1, m1);
  auto f2 = forward(m, x2, m2);
  Matrix up1 = Matrix::from_rows({{0.2, -0.5, 0.3}});
  Matrix up2 = Matrix::from_rows({{0.2, -0.5, 0.3}, {0.2, -0.5, 0.3}});
  auto g1 = backward(m, f1.cache, up1);
  auto g2 = backward(m, f2.cache, up2);
  for (std::size_t i = 0; i < g1.size(); ++i)
    for (std::size_t k = 0; k < g1.values[i].size(); ++k)
      CHECK(std::abs(g2.values[i].data()[k] - 2.0 * g1.values[i].data()[k]) < 1e-14);

  m.mutable_params();
  CHECK_THROWS_AS(backward(m, fw.cache, Matrix(2, 3)), NumericError);
}

TEST_CASE("full model gradients match finite differences") {
  for (const char* name : {"model_linear_head", "model_cosine_head", "model_mixup_soft_target", "model_label_smoothing",
                           "model_arcface", "model_ohem"}) {
    CAPTURE(name);
    auto c = run_gradcheck(name, 60, 303);
    CHECK(c.max_rel_error < kGradcheckTolerance);
  }
}

TEST_CASE("cosine_lr endpoints and midpoint") {
  CHECK(cosine_lr(0, 100, 1e-3, 56, 28) == 2e-3);
  CHECK(std::abs(cosine_lr(100, 100, 1e-3, 56, 28)) < 1e-19);
  CHECK(std::abs(cosine_lr(50, 100, 1e-3, 28, 28) - 0.5e-3) < 1e-18);
  CHECK_THROWS_AS(cosine_lr(0, 0, 1e-3, 28, 28), ConfigError);
  CHECK_THROWS_AS(cosine_lr(101, 100, 1e-3, 28, 28), ConfigError);
}

TEST_CASE("adamw_step on one scalar matches the hand recurrence") {
  ParamSet p;
  p.add("w", Matrix(1, 1, 2.0));
  ParamSet g = p.zeros_like();
  g.values[0](0, 0) = 0.5;
  AdamWConfig cfg;
  cfg.base_lr = 0.1;
  cfg.weight_decay = 0.01;
  cfg.total_steps = 4;
  OptimizerState s = OptimizerState::create(p, cfg);
  adamw_step(p, g, s);
  // Step 0 uses the full rate. m_hat = g and v_hat = g^2 after bias correction.
  const double lr = 0.1;
  double w = 2.0;
  w -= lr * 0.01 * w;
  w -= lr * 0.5 / (0.5 + 1e-8);
  CHECK(std::abs(p.values[0](0, 0) - w) < 1e-15);

  // Second step at cosine position 1/4.
  adamw_step(p, g, s);
  const double lr2 = 0.1 * 0.5 * (1.0 + std::cos(M_PI * 0.25));
  const double m2 = 0.9 * 0.05 + 0.1 * 0.5, v2 = 0.999 * 0.00025 + 0.001 * 0.25;
  const double mh = m2 / (1 - 0.81), vh = v2 / (1 - 0.999 * 0.999);
  w -= lr2 * 0.01 * w;
  w -= lr2 * mh / (std::sqrt(vh) + 1e-8);
  CHECK(std::abs(p.values[0](0, 0) - w) < 1e-15);
}

TEST_CASE("adamw: zero gradients with and without weight decay") {
  ParamSet p;
  p.add("w", Matrix(1, 3, 1.5));
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  cfg.total_steps = 10;
  OptimizerState s = OptimizerState::create(p, cfg);
  const ParamSet before = p;
  adamw_step(p, p.zeros_like(), s);
  CHECK(p == before);

  cfg.weight_decay = 0.1;
  OptimizerState s2 = OptimizerState::create(p, cfg);
  const double lr = cosine_lr(0, 10, cfg.base_lr, cfg.batch_size, cfg.ref_batch);
  adamw_step(p, p.zeros_like(), s2);
  CHECK(std::abs(p.values[0](0, 0) - 1.5 * (1.0 - lr * 0.1)) < 1e-15);

  ParamSet bad = p.zeros_like();
  bad.values[0](0, 1) = NAN;
  CHECK_THROWS_WITH_AS(adamw_step(p, bad, s2), doctest::Contains("w"), NumericError);
}

TEST_CASE("gradient accumulation equivalences") {
  SeededRng rng(6);
  const Model start = Model::init(small(), rng);
  Matrix xa = random_matrix(rng, 3, 3), ma = random_meta(rng, 3, 2);
  Matrix xb = random_matrix(rng, 3, 3), mb = random_meta(rng, 3, 2);
  std::vector<std::size_t> ya{0, 1, 2}, yb{2, 2, 1};
  Matrix xu(6, 3), mu(6, 2);
  std::vector<std::size_t> yu{0, 1, 2, 2, 2, 1};
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t k = 0; k < 3; ++k) {
      xu(r, k) = xa(r, k);
      xu(r + 3, k) = xb(r, k);
    }
    for (std::size_t k = 0; k < 2; ++k) {
      mu(r, k) = ma(r, k);
      mu(r + 3, k) = mb(r, k);
    }
  }
  AdamWConfig cfg;
  cfg.total_steps = 5;

  SUBCASE("k=1 is plain stepping") {
    Model a = start, b = start;
    OptimizerState sa = OptimizerState::create(a.params(), cfg), sb = sa;
    CHECK(accumulate_and_step(a.mutable_params(), sa, grads_for(a, xa, ma, ya)));
    adamw_step(b.mutable_params(), grads_for(b, xa, ma, ya), sb);
    CHECK(a.params() == b.params());
  }
  SUBCASE("k=2 on two different micro-batches equals one step on their union") {
    AdamWConfig c2 = cfg;
    c2.accumulate_steps = 2;
    Model a = start, b = start;
    OptimizerState sa = OptimizerState::create(a.params(), c2), sb = OptimizerState::create(b.params(), cfg);
    CHECK_FALSE(accumulate_and_step(a.mutable_params(), sa, grads_for(a, xa, ma, ya)));
    CHECK(accumulate_and_step(a.mutable_params(), sa, grads_for(a, xb, mb, yb)));
    adamw_step(b.mutable_params(), grads_for(b, xu, mu, yu), sb);
    CHECK(param_distance(a.params(), b.params()) < 1e-12);
    CHECK(sa.step == 1);
  }
  SUBCASE("k=2 on two equal micro-batches equals one step on either") {
    AdamWConfig c2 = cfg;
    c2.accumulate_steps = 2;
    Model a = start, b = start;
    OptimizerState sa = OptimizerState::create(a.params(), c2), sb = OptimizerState::create(b.params(), cfg);
    accumulate_and_step(a.mutable_params(), sa, grads_for(a, xa, ma, ya));
    accumulate_and_step(a.mutable_params(), sa, grads_for(a, xa, ma, ya));
    adamw_step(b.mutable_params(), grads_for(b, xa, ma, ya), sb);
    CHECK(param_distance(a.params(), b.params()) < 1e-12);
  }
}

TEST_CASE("checkpoint round trip is bit exact") {
  SeededRng rng(7);
  Model m = Model::init(small(), rng);
  AdamWConfig cfg;
  cfg.accumulate_steps = 3;
  cfg.total_steps = 9;
  OptimizerState s = OptimizerState::create(m.params(), cfg);
  accumulate_and_step(m.mutable_params(), s, grads_for(m, random_matrix(rng, 2, 3), random_meta(rng, 2, 2),
                                                       std::vector<std::size_t>{0, 1}));
  rng.next_gaussian();
  Checkpoint ck;
  ck.put_params("model:", m.params());
  ck.put_optimizer("opt:", s);
  ck.put_rng("rng", rng);
  ck.put_u64("epoch", {4});
  ck.config_echo = "{\"seed\": 7}";

  const auto path = temp_file("fgvc_ckpt_roundtrip.bin");
  save_checkpoint(ck, path);
  Checkpoint back = load_checkpoint(path);
  std::filesystem::remove(path);
  CHECK(back == ck);
  CHECK(back.get_params("model:") == m.params());
  CHECK(back.get_optimizer("opt:") == s);
  SeededRng r2(0);
  back.get_rng("rng", r2);
  CHECK(r2.snapshot() == rng.snapshot());
  CHECK(back.get_u64("epoch") == std::vector<std::uint64_t>{4});
}

TEST_CASE("checkpoint corruption is detected with distinct errors") {
  SeededRng rng(8);
  Checkpoint ck;
  ck.put_params("model:", Model::init(small(), rng).params());
  ck.config_echo = "echo";
  const std::string good = ck.serialize();

  auto kind_of = [](const std::string& bytes) {
    try {
      Checkpoint::deserialize(bytes);
    } catch (const CheckpointError& e) {
      return e.kind();
    }
    FAIL("corrupted checkpoint was accepted");
    return CheckpointError::Kind::io;
  };
  using K = CheckpointError::Kind;

  std::string flipped = good;
  flipped[good.size() / 2] ^= 0x01;
  CHECK(kind_of(flipped) == K::checksum);

  CHECK(kind_of(good.substr(0, good.size() - 5)) == K::truncated);
  CHECK(kind_of(good.substr(0, 10)) == K::truncated);

  std::string magic = good;
  magic[0] = 'X';
  CHECK(kind_of(magic) == K::bad_magic);

  std::string version = good;
  version[8] = 2;
  CHECK(kind_of(version) == K::version_mismatch);

  CHECK_THROWS_AS(load_checkpoint(temp_file("fgvc_no_such_checkpoint.bin")), CheckpointError);
}
