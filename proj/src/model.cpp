#include "fgvc/model.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

namespace fgvc {

std::size_t ParamSet::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return i;
  throw NumericError("no parameter named " + name);
}

void ParamSet::add(std::string name, Matrix value) {
  names.push_back(std::move(name));
  values.push_back(std::move(value));
}

ParamSet ParamSet::zeros_like() const {
  ParamSet z;
  z.names = names;
  for (const auto& v : values) z.values.emplace_back(v.rows(), v.cols());
  return z;
}

bool ParamSet::same_structure(const ParamSet& o) const {
  if (names != o.names) return false;
  for (std::size_t i = 0; i < values.size(); ++i)
    if (!values[i].same_shape(o.values[i])) return false;
  return true;
}

std::size_t ParamSet::total_elements() const {
  std::size_t n = 0;
  for (const auto& v : values) n += v.size();
  return n;
}

ParamSet& ParamSet::operator+=(const ParamSet& o) {
  if (!same_structure(o)) throw NumericError("ParamSet +=: structure mismatch");
  for (std::size_t i = 0; i < values.size(); ++i) values[i] += o.values[i];
  return *this;
}

ParamSet& ParamSet::operator*=(double s) {
  for (auto& v : values) v *= s;
  return *this;
}

double param_distance(const ParamSet& a, const ParamSet& b) {
  if (!a.same_structure(b)) throw NumericError("param_distance: structure mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < a.values[i].size(); ++k) {
      const double d = a.values[i].data()[k] - b.values[i].data()[k];
      s += d * d;
    }
  return std::sqrt(s);
}

void ModelConfig::validate() const {
  if (feature_dim == 0) throw ConfigError("model: feature_dim must be positive");
  if (num_classes < 2) throw ConfigError("model: need at least 2 classes");
  if (embed_dim == 0 || head_hidden == 0 || proj_dim == 0) throw ConfigError("model: zero-width layer");
  for (auto h : hidden)
    if (h == 0) throw ConfigError("model: zero-width hidden layer");
  if (head == HeadMode::cosine && !(cos_scale > 0.0)) throw ConfigError("model: cos_scale must be positive");
}

namespace {

Matrix gaussian_matrix(std::size_t rows, std::size_t cols, double stddev, SeededRng& rng) {
  Matrix m(rows, cols);
  for (double& v : m.data()) v = stddev * rng.next_gaussian();
  return m;
}

void add_dense(ParamSet& p, const std::string& prefix, std::size_t in, std::size_t out, SeededRng& rng) {
  p.add(prefix + ".weight", gaussian_matrix(out, in, 1.0 / std::sqrt(static_cast<double>(in)), rng));
  p.add(prefix + ".bias", Matrix(1, out));
}

MlpLayout layout_for(const ParamSet& p, const std::string& prefix, std::size_t layers) {
  MlpLayout l;
  for (std::size_t i = 0; i < layers; ++i) {
    l.weights.push_back(p.index_of(prefix + "." + std::to_string(i) + ".weight"));
    l.biases.push_back(p.index_of(prefix + "." + std::to_string(i) + ".bias"));
  }
  return l;
}

}  // namespace

Model Model::init(const ModelConfig& cfg, SeededRng& rng) {
  cfg.validate();
  ParamSet p;
  std::size_t in = cfg.input_dim();
  std::size_t layer = 0;
  for (auto h : cfg.hidden) {
    add_dense(p, "encoder." + std::to_string(layer++), in, h, rng);
    in = h;
  }
  add_dense(p, "encoder." + std::to_string(layer), in, cfg.embed_dim, rng);

  const double cstd = 1.0 / std::sqrt(static_cast<double>(cfg.embed_dim));
  p.add("classifier.weight", gaussian_matrix(cfg.num_classes, cfg.embed_dim, cstd, rng));
  if (cfg.head == HeadMode::linear) p.add("classifier.bias", Matrix(1, cfg.num_classes));

  add_dense(p, "proj.0", cfg.embed_dim, cfg.head_hidden, rng);
  add_dense(p, "proj.1", cfg.head_hidden, cfg.proj_dim, rng);
  add_dense(p, "pred.0", cfg.proj_dim, cfg.head_hidden, rng);
  add_dense(p, "pred.1", cfg.head_hidden, cfg.proj_dim, rng);
  return from_params(cfg, std::move(p));
}

Model Model::from_params(const ModelConfig& cfg, ParamSet params) {
  cfg.validate();
  Model m;
  m.config_ = cfg;
  m.params_ = std::move(params);
  m.build_layout();
  return m;
}

void Model::build_layout() {
  encoder_ = layout_for(params_, "encoder", config_.hidden.size() + 1);
  projection_ = layout_for(params_, "proj", 2);
  prediction_ = layout_for(params_, "pred", 2);
  classifier_weight_ = params_.index_of("classifier.weight");
  classifier_bias_.reset();
  if (config_.head == HeadMode::linear) classifier_bias_ = params_.index_of("classifier.bias");

  // Shape check end to end.
  std::size_t in = config_.input_dim();
  for (std::size_t l = 0; l < encoder_.weights.size(); ++l) {
    const Matrix& w = params_.values[encoder_.weights[l]];
    if (w.cols() != in) throw NumericError("model: encoder layer " + std::to_string(l) + " input width mismatch");
    in = w.rows();
  }
  if (in != config_.embed_dim) throw NumericError("model: embedding width mismatch");
  const Matrix& cw = params_.values[classifier_weight_];
  if (cw.rows() != config_.num_classes || cw.cols() != config_.embed_dim)
    throw NumericError("model: classifier shape mismatch");
}

std::vector<std::size_t> Model::encoder_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t l = 0; l < encoder_.weights.size(); ++l) {
    out.push_back(encoder_.weights[l]);
    out.push_back(encoder_.biases[l]);
  }
  return out;
}

std::vector<std::size_t> Model::classifier_indices() const {
  std::vector<std::size_t> out{classifier_weight_};
  if (classifier_bias_) out.push_back(*classifier_bias_);
  return out;
}

Matrix mlp_forward(const ParamSet& p, const MlpLayout& layout, const Matrix& x, MlpCache* cache) {
  if (cache) {
    cache->inputs.clear();
    cache->outputs.clear();
  }
  Matrix h = x;
  const std::size_t L = layout.weights.size();
  for (std::size_t l = 0; l < L; ++l) {
    const Matrix& w = p.values[layout.weights[l]];
    const Matrix& b = p.values[layout.biases[l]];
    if (h.cols() != w.cols()) throw NumericError("mlp_forward: input width mismatch at layer " + std::to_string(l));
    Matrix z = matmul_bt(h, w);
    for (std::size_t r = 0; r < z.rows(); ++r)
      for (std::size_t c = 0; c < z.cols(); ++c) z(r, c) += b(0, c);
    if (l + 1 < L)
      for (double& v : z.data()) v = std::tanh(v);
    if (cache) {
      cache->inputs.push_back(std::move(h));
      cache->outputs.push_back(z);
    }
    h = std::move(z);
  }
  return h;
}

Matrix mlp_backward(const ParamSet& p, const MlpLayout& layout, const MlpCache& cache,
                    const Matrix& grad_out, ParamSet& grads) {
  const std::size_t L = layout.weights.size();
  if (cache.inputs.size() != L) throw NumericError("mlp_backward: cache does not match layout");
  Matrix g = grad_out;
  for (std::size_t l = L; l-- > 0;) {
    if (l + 1 < L) {
      // tanh' = 1 - tanh^2, using the cached post-activation output.
      const Matrix& y = cache.outputs[l];
      for (std::size_t k = 0; k < g.size(); ++k) g.data()[k] *= 1.0 - y.data()[k] * y.data()[k];
    }
    grads.values[layout.weights[l]] += matmul_at(g, cache.inputs[l]);
    Matrix& gb = grads.values[layout.biases[l]];
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) gb(0, c) += g(r, c);
    g = matmul(g, p.values[layout.weights[l]]);
  }
  return g;
}

namespace {

Matrix concat_input(const Model& model, const Matrix& features, const Matrix& meta) {
  const auto& cfg = model.config();
  if (features.cols() != cfg.feature_dim)
    throw NumericError("forward: feature width " + std::to_string(features.cols()) + " != " +
                       std::to_string(cfg.feature_dim));
  if (meta.cols() != cfg.meta_dim || meta.rows() != features.rows())
    throw NumericError("forward: meta block has wrong shape");
  Matrix x(features.rows(), cfg.input_dim());
  for (std::size_t r = 0; r < features.rows(); ++r) {
    auto dst = x.row(r);
    std::copy(features.row(r).begin(), features.row(r).end(), dst.begin());
    std::copy(meta.row(r).begin(), meta.row(r).end(), dst.begin() + static_cast<std::ptrdiff_t>(cfg.feature_dim));
  }
  return x;
}

}  // namespace

Matrix encode(const Model& model, const Matrix& features, const Matrix& meta, MlpCache* cache) {
  return mlp_forward(model.params(), model.encoder(), concat_input(model, features, meta), cache);
}

Matrix classify(const Model& model, const Matrix& embedding) {
  const auto& p = model.params();
  const Matrix& w = p.values[model.classifier_weight()];
  if (model.config().head == HeadMode::cosine) {
    auto x = l2_normalize_rows(embedding, 1e-12);
    auto wn = l2_normalize_rows(w, 1e-12);
    return matmul_bt(x.values, wn.values) * model.config().cos_scale;
  }
  Matrix z = matmul_bt(embedding, w);
  const Matrix& b = p.values[*model.classifier_bias()];
  for (std::size_t r = 0; r < z.rows(); ++r)
    for (std::size_t c = 0; c < z.cols(); ++c) z(r, c) += b(0, c);
  return z;
}

ForwardResult forward(const Model& model, const Matrix& features, const Matrix& meta) {
  ForwardResult out;
  out.cache.owner = &model;
  out.cache.version = model.version();
  out.embedding = encode(model, features, meta, &out.cache.encoder);
  out.cache.embedding = out.embedding;
  out.logits = classify(model, out.embedding);
  return out;
}

namespace {

void check_cache(const Model& model, const ForwardCache& cache) {
  if (cache.owner != &model || cache.version != model.version())
    throw NumericError("backward: stale forward cache (parameters changed since forward)");
}

}  // namespace

void backward_embedding(const Model& model, const ForwardCache& cache, const Matrix& grad_embedding,
                        ParamSet& grads) {
  check_cache(model, cache);
  if (!grad_embedding.same_shape(cache.embedding)) throw NumericError("backward: embedding gradient shape mismatch");
  mlp_backward(model.params(), model.encoder(), cache.encoder, grad_embedding, grads);
}

ParamSet backward(const Model& model, const ForwardCache& cache, const Matrix& grad_logits) {
  check_cache(model, cache);
  const auto& p = model.params();
  const Matrix& e = cache.embedding;
  if (grad_logits.rows() != e.rows() || grad_logits.cols() != model.config().num_classes)
    throw NumericError("backward: logit gradient shape mismatch");
  ParamSet grads = p.zeros_like();
  const Matrix& w = p.values[model.classifier_weight()];
  Matrix grad_emb;
  if (model.config().head == HeadMode::cosine) {
    auto xn = l2_normalize_rows(e, 1e-12);
    auto wn = l2_normalize_rows(w, 1e-12);
    if (xn.any_degenerate() || wn.any_degenerate()) throw NumericError("backward: degenerate row in cosine head");
    Matrix g = grad_logits * model.config().cos_scale;
    Matrix gx = matmul(g, wn.values);
    Matrix gw = matmul_at(g, xn.values);
    grad_emb = Matrix(e.rows(), e.cols());
    Matrix& dw = grads.values[model.classifier_weight()];
    for (std::size_t i = 0; i < e.rows(); ++i) {
      const double proj = dot(gx.row(i), xn.values.row(i));
      for (std::size_t k = 0; k < e.cols(); ++k)
        grad_emb(i, k) = (gx(i, k) - proj * xn.values(i, k)) / xn.norms[i];
    }
    for (std::size_t j = 0; j < w.rows(); ++j) {
      const double proj = dot(gw.row(j), wn.values.row(j));
      for (std::size_t k = 0; k < w.cols(); ++k) dw(j, k) += (gw(j, k) - proj * wn.values(j, k)) / wn.norms[j];
    }
  } else {
    grads.values[model.classifier_weight()] += matmul_at(grad_logits, e);
    Matrix& gb = grads.values[*model.classifier_bias()];
    for (std::size_t r = 0; r < grad_logits.rows(); ++r)
      for (std::size_t c = 0; c < grad_logits.cols(); ++c) gb(0, c) += grad_logits(r, c);
    grad_emb = matmul(grad_logits, w);
  }
  mlp_backward(p, model.encoder(), cache.encoder, grad_emb, grads);
  return grads;
}

void AdamWConfig::validate() const {
  if (!(base_lr >= 0.0)) throw ConfigError("adamw: base_lr must be >= 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("adamw: weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("adamw: betas must lie in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("adamw: eps must be positive");
  if (accumulate_steps < 1) throw ConfigError("adamw: accumulate_steps must be >= 1");
  if (total_steps < 1) throw ConfigError("adamw: total_steps must be >= 1");
  if (batch_size < 1 || ref_batch < 1) throw ConfigError("adamw: batch sizes must be >= 1");
}

OptimizerState OptimizerState::create(const ParamSet& params, const AdamWConfig& cfg) {
  cfg.validate();
  OptimizerState s;
  s.config = cfg;
  s.first_moment = params.zeros_like();
  s.second_moment = params.zeros_like();
  s.grad_buffer = params.zeros_like();
  s.trainable.assign(params.size(), true);
  return s;
}

double cosine_lr(std::uint64_t step, std::uint64_t total_steps, double base_lr, std::size_t batch_size,
                 std::size_t ref_batch) {
  if (total_steps == 0) throw ConfigError("cosine_lr: total_steps must be positive");
  if (step > total_steps) throw ConfigError("cosine_lr: step beyond total_steps");
  if (ref_batch == 0) throw ConfigError("cosine_lr: ref_batch must be positive");
  const double effective = base_lr * static_cast<double>(batch_size) / static_cast<double>(ref_batch);
  if (step == 0) return effective;
  if (step == total_steps) return 0.0;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return effective * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

void adamw_step(ParamSet& params, const ParamSet& grads, OptimizerState& state) {
  if (!params.same_structure(grads) || !params.same_structure(state.first_moment))
    throw NumericError("adamw_step: gradient structure does not match parameters");
  for (std::size_t i = 0; i < grads.size(); ++i)
    if (!grads.values[i].all_finite())
      throw NumericError("adamw_step: non-finite gradient for parameter " + grads.names[i]);

  const auto& cfg = state.config;
  const std::uint64_t at = std::min(state.step, cfg.total_steps);
  const double lr = cosine_lr(at, cfg.total_steps, cfg.base_lr, cfg.batch_size, cfg.ref_batch);
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);

  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!state.trainable[i]) continue;
    auto& p = params.values[i].data();
    const auto& g = grads.values[i].data();
    auto& m = state.first_moment.values[i].data();
    auto& v = state.second_moment.values[i].data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      p[k] -= lr * cfg.weight_decay * p[k];
      p[k] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

bool accumulate_and_step(ParamSet& params, OptimizerState& state, const ParamSet& micro_grads) {
  if (state.config.accumulate_steps == 1) {
    adamw_step(params, micro_grads, state);
    return true;
  }
  state.grad_buffer += micro_grads;
  if (++state.micro_count < state.config.accumulate_steps) return false;
  state.grad_buffer *= 1.0 / static_cast<double>(state.config.accumulate_steps);
  adamw_step(params, state.grad_buffer, state);
  state.grad_buffer = params.zeros_like();
  state.micro_count = 0;
  return true;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout (all integers little-endian):
//   "FGVCCKPT" | u32 version | u64 payload_length | payload | u64 fnv1a64(everything before)
// payload:
//   u32 record_count, then per record:
//   u8 kind (0 = f64 array, 1 = u64 array, 2 = text) | u32 name_length | name |
//   u32 rank | u64 dims[rank] | elements (8 bytes each, or raw bytes for text)

namespace {

constexpr char kMagic[8] = {'F', 'G', 'V', 'C', 'C', 'K', 'P', 'T'};

void write_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void write_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::size_t pos, std::size_t end) : b_(bytes), pos_(pos), end_(end) {}
  std::uint64_t u64() { return uint(8); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4)); }
  std::uint8_t u8() { return static_cast<std::uint8_t>(uint(1)); }
  std::string raw(std::size_t n) {
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == end_; }

 private:
  void need(std::size_t n) const {
    if (n > end_ - pos_) throw CheckpointError(CheckpointError::Kind::malformed, "checkpoint: record overruns payload");
  }
  std::uint64_t uint(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  const std::string& b_;
  std::size_t pos_;
  std::size_t end_;
};

}  // namespace

void Checkpoint::put_params(const std::string& prefix, const ParamSet& p) {
  for (std::size_t i = 0; i < p.size(); ++i)
    reals.push_back({prefix + p.names[i], {p.values[i].rows(), p.values[i].cols()}, p.values[i].data()});
}

ParamSet Checkpoint::get_params(const std::string& prefix) const {
  ParamSet p;
  for (const auto& a : reals) {
    if (a.name.rfind(prefix, 0) != 0) continue;
    const std::string rest = a.name.substr(prefix.size());
    // Nested prefixes (e.g. "opt.m.") share the leading part; skip them.
    if (rest.find(':') != std::string::npos) continue;
    if (a.dims.size() != 2) throw CheckpointError(CheckpointError::Kind::malformed, "checkpoint: parameter " + a.name + " is not rank 2");
    p.add(rest, Matrix(a.dims[0], a.dims[1], a.data));
  }
  return p;
}

void Checkpoint::put_optimizer(const std::string& prefix, const OptimizerState& s) {
  put_params(prefix + "m:", s.first_moment);
  put_params(prefix + "v:", s.second_moment);
  put_params(prefix + "buf:", s.grad_buffer);
  const auto& c = s.config;
  reals.push_back({prefix + "hyper:", {6}, {c.base_lr, c.weight_decay, c.beta1, c.beta2, c.eps, 0.0}});
  std::vector<std::uint64_t> ints{s.step, s.micro_count, c.accumulate_steps, c.total_steps, c.batch_size, c.ref_batch};
  put_u64(prefix + "counters:", std::move(ints));
  std::vector<std::uint64_t> flags;
  for (bool b : s.trainable) flags.push_back(b ? 1 : 0);
  put_u64(prefix + "trainable:", std::move(flags));
}

OptimizerState Checkpoint::get_optimizer(const std::string& prefix) const {
  OptimizerState s;
  auto sub = [&](const std::string& tag) {
    ParamSet p;
    const std::string full = prefix + tag;
    for (const auto& a : reals)
      if (a.name.rfind(full, 0) == 0) p.add(a.name.substr(full.size()), Matrix(a.dims[0], a.dims[1], a.data));
    return p;
  };
  s.first_moment = sub("m:");
  s.second_moment = sub("v:");
  s.grad_buffer = sub("buf:");
  const F64Array* hyper = nullptr;
  for (const auto& a : reals)
    if (a.name == prefix + "hyper:") hyper = &a;
  if (!hyper || hyper->data.size() != 6) throw CheckpointError(CheckpointError::Kind::malformed, "checkpoint: missing optimizer hyperparameters");
  s.config.base_lr = hyper->data[0];
  s.config.weight_decay = hyper->data[1];
  s.config.beta1 = hyper->data[2];
  s.config.beta2 = hyper->data[3];
  s.config.eps = hyper->data[4];
  const auto& ints = get_u64(prefix + "counters:");
  if (ints.size() != 6) throw CheckpointError(CheckpointError::Kind::malformed, "checkpoint: bad optimizer counters");
  s.step = ints[0];
  s.micro_count = ints[1];
  s.config.accumulate_steps = ints[2];
  s.config.total_steps = ints[3];
  s.config.batch_size = ints[4];
  s.config.ref_batch = ints[5];
  for (auto f : get_u64(prefix + "trainable:")) s.trainable.push_back(f != 0);
  return s;
}

void Checkpoint::put_rng(const std::string& name, const SeededRng& rng) {
  const auto snap = rng.snapshot();
  put_u64(name, {snap.state[0], snap.state[1], snap.state[2], snap.state[3], snap.has_spare ? 1u : 0u,
                 std::bit_cast<std::uint64_t>(snap.spare)});
}

void Checkpoint::get_rng(const std::string& name, SeededRng& rng) const {
  const auto& v = get_u64(name);
  if (v.size() != 6) throw CheckpointError(CheckpointError::Kind::malformed, "checkpoint: bad rng record " + name);
  rng.restore({{v[0], v[1], v[2], v[3]}, v[4] != 0, std::bit_cast<double>(v[5])});
}

void Checkpoint::put_u64(const std::string& name, std::vector<std::uint64_t> v) {
  integers.push_back({name, std::move(v)});
}

const std::vector<std::uint64_t>& Checkpoint::get_u64(const std::string& name) const {
  for (const auto& a : integers)
    if (a.name == name) return a.data;
  throw CheckpointError(CheckpointError::Kind::malformed, "checkpoint: missing record " + name);
}

bool Checkpoint::has_u64(const std::string& name) const {
  for (const auto& a : integers)
    if (a.name == name) return true;
  return false;
}

std::string Checkpoint::serialize() const {
  std::string payload;
  write_u32(payload, static_cast<std::uint32_t>(reals.size() + integers.size() + 1));
  auto header = [&payload](std::uint8_t kind, const std::string& name, const std::vector<std::uint64_t>& dims) {
    payload.push_back(static_cast<char>(kind));
    write_u32(payload, static_cast<std::uint32_t>(name.size()));
    payload += name;
    write_u32(payload, static_cast<std::uint32_t>(dims.size()));
    for (auto d : dims) write_u64(payload, d);
  };
  for (const auto& a : reals) {
    header(0, a.name, a.dims);
    for (double v : a.data) write_u64(payload, std::bit_cast<std::uint64_t>(v));
  }
  for (const auto& a : integers) {
    header(1, a.name, {a.data.size()});
    for (auto v : a.data) write_u64(payload, v);
  }
  header(2, "config", {config_echo.size()});
  payload += config_echo;

  std::string out(kMagic, sizeof(kMagic));
  write_u32(out, kVersion);
  write_u64(out, payload.size());
  out += payload;
  write_u64(out, fnv1a64(out));
  return out;
}

Checkpoint Checkpoint::deserialize(const std::string& bytes) {
  using K = CheckpointError::Kind;
  constexpr std::size_t kHeader = sizeof(kMagic) + 4 + 8;
  if (bytes.size() < sizeof(kMagic) || bytes.compare(0, sizeof(kMagic), kMagic, sizeof(kMagic)) != 0)
    throw CheckpointError(K::bad_magic, "checkpoint: bad magic");
  if (bytes.size() < kHeader) throw CheckpointError(K::truncated, "checkpoint: truncated header");
  Reader head(bytes, sizeof(kMagic), kHeader);
  const std::uint32_t version = head.u32();
  if (version != kVersion)
    throw CheckpointError(K::version_mismatch, "checkpoint: version " + std::to_string(version) +
                                                   ", expected " + std::to_string(kVersion));
  const std::uint64_t payload_len = head.u64();
  if (bytes.size() != kHeader + payload_len + 8)
    throw CheckpointError(K::truncated, "checkpoint: file length " + std::to_string(bytes.size()) +
                                            " does not match header");
  Reader tail(bytes, kHeader + payload_len, bytes.size());
  const std::uint64_t stored = tail.u64();
  if (stored != fnv1a64(std::string_view(bytes).substr(0, kHeader + payload_len)))
    throw CheckpointError(K::checksum, "checkpoint: checksum mismatch");

  Checkpoint c;
  Reader r(bytes, kHeader, kHeader + payload_len);
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint8_t kind = r.u8();
    const std::string name = r.raw(r.u32());
    const std::uint32_t rank = r.u32();
    std::vector<std::uint64_t> dims(rank);
    std::uint64_t n = 1;
    for (auto& d : dims) {
      d = r.u64();
      n *= d;
    }
    if (kind == 0) {
      F64Array a{name, dims, {}};
      a.data.reserve(n);
      for (std::uint64_t k = 0; k < n; ++k) a.data.push_back(std::bit_cast<double>(r.u64()));
      c.reals.push_back(std::move(a));
    } else if (kind == 1) {
      U64Array a{name, {}};
      for (std::uint64_t k = 0; k < n; ++k) a.data.push_back(r.u64());
      c.integers.push_back(std::move(a));
    } else if (kind == 2) {
      c.config_echo = r.raw(n);
    } else {
      throw CheckpointError(K::malformed, "checkpoint: unknown record kind");
    }
  }
  if (!r.done()) throw CheckpointError(K::malformed, "checkpoint: trailing bytes in payload");
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::string bytes = ckpt.serialize();
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError(CheckpointError::Kind::io, "cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::io, "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return Checkpoint::deserialize(ss.str());
}

}  // namespace fgvc
