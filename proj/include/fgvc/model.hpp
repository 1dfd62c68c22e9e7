#pragma once

// Feed-forward encoder with a concatenated meta one-hot input, a linear or
// cosine classifier head, projection/prediction heads for contrastive
// training, manual reverse-mode gradients, AdamW and checkpoint files.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fgvc/numerics.hpp"

namespace fgvc {

/// Named parameter (or gradient) arrays. Biases are stored as 1 x n matrices.
struct ParamSet {
  std::vector<std::string> names;
  std::vector<Matrix> values;

  std::size_t size() const { return values.size(); }
  std::size_t index_of(const std::string& name) const;
  void add(std::string name, Matrix value);

  ParamSet zeros_like() const;
  bool same_structure(const ParamSet& o) const;
  std::size_t total_elements() const;

  ParamSet& operator+=(const ParamSet& o);
  ParamSet& operator*=(double s);
  friend bool operator==(const ParamSet&, const ParamSet&) = default;
};

/// Euclidean distance between two structurally identical sets.
double param_distance(const ParamSet& a, const ParamSet& b);

enum class HeadMode { linear, cosine };

struct ModelConfig {
  std::size_t feature_dim = 16;
  std::size_t meta_dim = 4;
  std::size_t num_classes = 12;
  std::vector<std::size_t> hidden{64, 64};
  std::size_t embed_dim = 32;
  std::size_t head_hidden = 64;   // projection / prediction MLP width
  std::size_t proj_dim = 32;
  HeadMode head = HeadMode::linear;
  double cos_scale = 16.0;        // logit scale in cosine mode

  std::size_t input_dim() const { return feature_dim + meta_dim; }
  void validate() const;
};

/// Indices of one MLP's (weight, bias) pairs inside a ParamSet. Every layer
/// but the last is followed by tanh.
struct MlpLayout {
  std::vector<std::size_t> weights;
  std::vector<std::size_t> biases;
};

class Model {
 public:
  Model() = default;
  /// Weights ~ N(0, 1/fan_in), biases zero.
  static Model init(const ModelConfig& cfg, SeededRng& rng);

  const ModelConfig& config() const { return config_; }
  const ParamSet& params() const { return params_; }
  /// Mutable access invalidates forward caches taken before the call.
  ParamSet& mutable_params() {
    ++version_;
    return params_;
  }
  std::uint64_t version() const { return version_; }

  const MlpLayout& encoder() const { return encoder_; }
  const MlpLayout& projection() const { return projection_; }
  const MlpLayout& prediction() const { return prediction_; }
  std::size_t classifier_weight() const { return classifier_weight_; }
  std::optional<std::size_t> classifier_bias() const { return classifier_bias_; }

  /// Names of the encoder parameters (the "backbone").
  std::vector<std::size_t> encoder_indices() const;
  std::vector<std::size_t> classifier_indices() const;

  /// Rebuilds a model around an existing parameter set (e.g. from a checkpoint).
  static Model from_params(const ModelConfig& cfg, ParamSet params);

 private:
  void build_layout();

  ModelConfig config_;
  ParamSet params_;
  std::uint64_t version_ = 0;
  MlpLayout encoder_, projection_, prediction_;
  std::size_t classifier_weight_ = 0;
  std::optional<std::size_t> classifier_bias_;
};

struct MlpCache {
  std::vector<Matrix> inputs;   // input to each layer
  std::vector<Matrix> outputs;  // post-activation output of each layer
};

Matrix mlp_forward(const ParamSet& p, const MlpLayout& layout, const Matrix& x, MlpCache* cache);
/// Accumulates parameter gradients into `grads`; returns d loss / d input.
Matrix mlp_backward(const ParamSet& p, const MlpLayout& layout, const MlpCache& cache,
                    const Matrix& grad_out, ParamSet& grads);

struct ForwardCache {
  const Model* owner = nullptr;
  std::uint64_t version = 0;
  MlpCache encoder;
  Matrix embedding;
};

struct ForwardResult {
  Matrix embedding;
  Matrix logits;
  ForwardCache cache;
};

/// `meta` is N x meta_dim; pass zeros to disable the meta channel.
ForwardResult forward(const Model& model, const Matrix& features, const Matrix& meta);
/// Encoder only (no classifier); cache may be null.
Matrix encode(const Model& model, const Matrix& features, const Matrix& meta, MlpCache* cache);
/// Classifier logits for given embeddings.
Matrix classify(const Model& model, const Matrix& embedding);

/// Gradients of all parameters given d loss / d logits.
ParamSet backward(const Model& model, const ForwardCache& cache, const Matrix& grad_logits);
/// Gradients of encoder parameters given d loss / d embedding; accumulates into grads.
void backward_embedding(const Model& model, const ForwardCache& cache, const Matrix& grad_embedding,
                        ParamSet& grads);

struct AdamWConfig {
  double base_lr = 3e-3;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t accumulate_steps = 1;
  std::uint64_t total_steps = 1;
  std::size_t batch_size = 28;
  std::size_t ref_batch = 28;

  void validate() const;
  bool operator==(const AdamWConfig&) const = default;
};

struct OptimizerState {
  AdamWConfig config;
  ParamSet first_moment;
  ParamSet second_moment;
  std::uint64_t step = 0;
  ParamSet grad_buffer;
  std::size_t micro_count = 0;
  std::vector<bool> trainable;  // one flag per parameter

  static OptimizerState create(const ParamSet& params, const AdamWConfig& cfg);
  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

/// Cosine decay from base_lr * batch_size / ref_batch down to 0 at total_steps.
double cosine_lr(std::uint64_t step, std::uint64_t total_steps, double base_lr, std::size_t batch_size,
                 std::size_t ref_batch);

/// One decoupled-weight-decay Adam update using cosine_lr at the current step.
void adamw_step(ParamSet& params, const ParamSet& grads, OptimizerState& state);

/// Buffers micro-batch gradients; after accumulate_steps of them, applies
/// adamw_step on their mean. Returns true when a step was taken.
bool accumulate_and_step(ParamSet& params, OptimizerState& state, const ParamSet& micro_grads);

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, version_mismatch, truncated, checksum, malformed };
  CheckpointError(Kind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// In-memory checkpoint: named f64 arrays, named u64 arrays and a config echo.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  struct F64Array {
    std::string name;
    std::vector<std::uint64_t> dims;
    std::vector<double> data;
    friend bool operator==(const F64Array&, const F64Array&) = default;
  };
  struct U64Array {
    std::string name;
    std::vector<std::uint64_t> data;
    friend bool operator==(const U64Array&, const U64Array&) = default;
  };

  std::vector<F64Array> reals;
  std::vector<U64Array> integers;
  std::string config_echo;

  void put_params(const std::string& prefix, const ParamSet& p);
  ParamSet get_params(const std::string& prefix) const;
  void put_optimizer(const std::string& prefix, const OptimizerState& s);
  OptimizerState get_optimizer(const std::string& prefix) const;
  void put_rng(const std::string& name, const SeededRng& rng);
  void get_rng(const std::string& name, SeededRng& rng) const;
  void put_u64(const std::string& name, std::vector<std::uint64_t> v);
  const std::vector<std::uint64_t>& get_u64(const std::string& name) const;
  bool has_u64(const std::string& name) const;

  std::string serialize() const;
  static Checkpoint deserialize(const std::string& bytes);
  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace fgvc
