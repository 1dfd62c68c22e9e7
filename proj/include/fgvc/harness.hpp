#pragma once

// Pipeline orchestration: supervised / SSL trainers, evaluation, pseudo
// labels, test-time augmentation, max-logit ensembling, manifests and reports.

#include <chrono>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fgvc/contrastive.hpp"
#include "fgvc/datagen.hpp"
#include "fgvc/losses.hpp"
#include "fgvc/model.hpp"

namespace fgvc {

inline constexpr const char* kCodeVersion = "0.3.0";
inline constexpr int kManifestFormat = 1;

enum class LossKind { cross_entropy, soft_target_ce, label_smoothing, arcface, seesaw, ohem };
enum class TrainerKind { supervised, moco_then_finetune, simclr_joint };

std::string to_string(LossKind k);
std::string to_string(TrainerKind k);
LossKind loss_kind_from_string(const std::string& s);
TrainerKind trainer_kind_from_string(const std::string& s);

struct LossConfig {
  LossKind kind = LossKind::soft_target_ce;
  double mixup_alpha = 0.2;        // soft-target CE only; 0 disables mixup
  double smoothing = 0.1;          // label smoothing epsilon
  ArcfaceConfig arcface;
  SeesawConfig seesaw;
  double ohem_keep = 0.7;
};

struct TtaConfig {
  std::size_t views = 5;
  AugmentPolicy policy{0.15, 0.0, 0.9, 1.1, 0.05};
};

struct RunConfig {
  DatasetConfig dataset;
  std::string dataset_path;        // when set, the dataset is loaded instead of generated
  ModelConfig model;               // feature/meta/class dims are filled from the dataset
  bool use_meta = true;
  LossConfig loss;
  TrainerKind trainer = TrainerKind::supervised;
  std::size_t epochs = 30;         // supervised or joint epochs
  std::size_t pretrain_epochs = 10;   // MoCo pretraining epochs
  std::size_t finetune_epochs = 10;   // supervised epochs after MoCo or joint training
  bool freeze_encoder = false;     // finetune updates only the heads
  std::size_t batch_size = 28;
  std::size_t accumulate_steps = 1;
  AdamWConfig optimizer;           // total_steps, batch_size and accumulate_steps are derived
  ContrastiveConfig contrastive;
  JointConfig joint;
  AugmentPolicy train_augment{0.1, 0.0, 1.0, 1.0, 0.0};
  AugmentPolicy ssl_augment{0.3, 0.1, 0.8, 1.2, 0.1};
  double pseudo_label_fraction = 0.0;
  std::size_t pseudo_epochs = 0;   // extra supervised epochs on train + pseudo labels
  TtaConfig tta;
  std::uint64_t seed = 1;
  std::string output_dir;

  void validate() const;
};

nlohmann::json run_config_to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Evaluation

struct PredictionSet {
  std::vector<std::size_t> sample_ids;
  Matrix logits;
  std::vector<std::size_t> predicted;  // argmax of each logits row, ties to the lower class
  std::string model_id;

  std::size_t size() const { return sample_ids.size(); }
  std::size_t num_classes() const { return logits.cols(); }
  /// Recomputes `predicted` from `logits`.
  void refresh_predictions();
};

std::string prediction_set_to_csv(const PredictionSet& p);
PredictionSet prediction_set_from_csv(const std::string& csv, const std::string& model_id = "");
void save_prediction_set(const PredictionSet& p, const std::filesystem::path& path);
PredictionSet load_prediction_set(const std::filesystem::path& path);

struct F1Report {
  double macro = 0.0;
  double head_macro = 0.0;
  double tail_macro = 0.0;
  std::vector<double> per_class;    // NaN for classes absent from the ground truth
  std::vector<bool> present;
  std::vector<bool> is_head;        // train count above the median
};

/// Macro F1 over classes present in `truth`. When train counts are given,
/// classes with a count above the median form the head group, the rest the tail.
F1Report macro_f1(std::span<const std::size_t> predicted, std::span<const std::size_t> truth,
                  std::size_t num_classes, std::span<const std::size_t> train_counts = {});

PredictionSet predict(const Model& model, const Dataset& data, std::span<const std::size_t> idx, bool use_meta,
                      const std::string& model_id = "model");

/// Mean of per-view softmax probabilities. View 0 is the sample itself; the
/// remaining views are drawn from derive(seed, "tta", sample_id).
std::vector<double> tta_predict(const Model& model, std::span<const double> sample, std::span<const double> meta,
                                const AugmentPolicy& policy, std::size_t num_views, std::uint64_t seed,
                                std::size_t sample_id);

/// TTA over a set; logits are the log of the averaged probabilities.
PredictionSet tta_predict_set(const Model& model, const Dataset& data, std::span<const std::size_t> idx,
                              bool use_meta, const AugmentPolicy& policy, std::size_t num_views, std::uint64_t seed,
                              const std::string& model_id = "model");

struct PseudoLabels {
  std::vector<std::size_t> sample_ids;
  std::vector<std::size_t> labels;
};

/// Top floor(fraction * N) samples by raw max logit (ties to the lower
/// position), labelled with their argmax class.
PseudoLabels pseudo_label_select(const PredictionSet& preds, double fraction);

/// Copy of `data` with each pseudo-labelled sample appended as a new train
/// row carrying its pseudo label. The original rows are untouched.
Dataset with_pseudo_labels(const Dataset& data, const PseudoLabels& pseudo);

enum class EnsembleRule { max_logit, mean_probability };

/// Per sample, the class of the globally highest logit over all models; ties
/// go to the earlier model, then the lower class. With `normalize`, each
/// model's logits are first divided by their standard deviation.
PredictionSet ensemble_max_logit(const std::vector<PredictionSet>& sets, bool normalize = false);
PredictionSet ensemble_mean_probability(const std::vector<PredictionSet>& sets);

// ---------------------------------------------------------------------------
// Training

/// Supervised loss with any per-run state (Seesaw counts, mixup RNG).
class SupervisedLoss {
 public:
  SupervisedLoss(const LossConfig& cfg, std::size_t num_classes);

  ParamLoss operator()(const Model& model, const Matrix& features, const Matrix& meta,
                       std::span<const std::size_t> labels, SeededRng& rng);

  const SeesawState& seesaw_state() const { return seesaw_; }
  SeesawState& seesaw_state() { return seesaw_; }

 private:
  LossConfig cfg_;
  std::size_t num_classes_;
  SeesawState seesaw_;
};

/// Shuffled mini-batches over `idx`; the last partial batch is kept.
std::vector<LabeledBatch> make_labeled_batches(const Dataset& data, std::vector<std::size_t> idx,
                                               std::span<const std::size_t> labels_override, std::size_t batch_size,
                                               bool use_meta, SeededRng& rng);
std::vector<UnlabeledBatch> make_unlabeled_batches(const Dataset& data, std::vector<std::size_t> idx,
                                                   std::size_t batch_size, bool use_meta, SeededRng& rng);

/// One pass over `batches` with per-batch augmentation and accumulate_and_step.
double supervised_epoch(Model& model, OptimizerState& opt, std::span<const LabeledBatch> batches,
                        SupervisedLoss& loss, const AugmentPolicy& aug, SeededRng& rng);

/// Resumable supervised training loop over a fixed labeled pool.
class SupervisedTrainer {
 public:
  SupervisedTrainer(const RunConfig& cfg, const Dataset& data, Model model, std::vector<std::size_t> train_idx,
                    std::vector<std::size_t> train_labels, std::size_t epochs, std::string stage);

  /// Runs the next epoch; returns its mean training loss.
  double run_epoch();
  bool done() const { return epoch_ >= epochs_; }
  std::size_t epoch() const { return epoch_; }
  const Model& model() const { return model_; }
  Model& model() { return model_; }
  const OptimizerState& optimizer() const { return opt_; }
  OptimizerState& optimizer() { return opt_; }

  Checkpoint to_checkpoint() const;
  void restore(const Checkpoint& ckpt);

 private:
  const RunConfig& cfg_;
  const Dataset& data_;
  Model model_;
  std::vector<std::size_t> idx_;
  std::vector<std::size_t> labels_;
  std::size_t epochs_;
  std::string stage_;
  std::size_t epoch_ = 0;
  OptimizerState opt_;
  SupervisedLoss loss_;
  SeededRng rng_;  // yields one seed per epoch
};

ModelConfig model_config_for(const RunConfig& cfg, const Dataset& data);
std::size_t steps_per_epoch(std::size_t samples, std::size_t batch_size, std::size_t accumulate_steps);
AdamWConfig optimizer_for(const RunConfig& cfg, std::size_t samples, std::size_t epochs);
/// optimizer_for with the weight decay of the configured loss, when it has one.
AdamWConfig supervised_optimizer_for(const RunConfig& cfg, std::size_t samples, std::size_t epochs);

struct EpochRecord {
  std::string stage;
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_macro_f1 = 0.0;
};

struct RunManifest {
  nlohmann::json config;
  std::string dataset_hash;
  std::vector<std::size_t> class_counts;
  std::vector<EpochRecord> epochs;
  F1Report untrained_val;
  F1Report untrained_test;
  F1Report final_test;
  F1Report final_val;
  std::size_t pseudo_added = 0;
  double wall_clock_seconds = 0.0;
  bool complete = false;
  std::string failed_stage;
  std::string failure;

  nlohmann::json metrics_json() const;
  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
};

struct RunOutputs {
  RunManifest manifest;
  Model model;
  PredictionSet test_predictions;
};

/// Raised when a pipeline stage fails; carries the stage name.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& cause)
      : std::runtime_error("stage '" + stage + "' failed: " + cause), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

/// Runs the configured pipeline. When cfg.output_dir is set, writes
/// manifest.json, checkpoint.bin and predictions.csv there.
RunOutputs run_pipeline(const RunConfig& cfg);
RunManifest run(const RunConfig& cfg);

/// Writes `text` to `path` through a temporary file and rename.
void write_atomically(const std::filesystem::path& path, const std::string& text);
void save_manifest(const RunManifest& m, const std::filesystem::path& path);
RunManifest load_manifest(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Reports

struct AblationRow {
  std::string trainer;
  std::string loss;
  std::size_t batch_size = 0;
  std::size_t accumulate_steps = 0;
  std::size_t epochs = 0;
  double pseudo_fraction = 0.0;
  bool use_meta = true;
  std::size_t tta_views = 1;
  std::uint64_t seed = 0;
  std::string dataset_hash;
  double macro_f1 = 0.0;
  double head_f1 = 0.0;
  double tail_f1 = 0.0;
  bool conflict = false;
};

struct Reports {
  std::string ablation_csv;
  std::string histogram_csv;
  bool dataset_conflict = false;
};

Reports emit_reports(const std::vector<RunManifest>& manifests);
std::vector<AblationRow> parse_ablation_csv(const std::string& csv);

}  // namespace fgvc
