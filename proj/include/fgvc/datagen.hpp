#pragma once

// Synthetic fine-grained, long-tailed datasets with a categorical meta
// attribute, plus the augmentation and mixup transforms used by trainers.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fgvc/numerics.hpp"

namespace fgvc {

struct DatasetConfig {
  std::size_t num_meta_categories = 4;
  std::size_t subclasses_per_meta = 3;
  std::size_t feature_dim = 16;
  std::size_t head_count = 100;       // train samples in the largest class
  double imbalance_ratio = 0.02;      // tail / head train count
  double intra_class_noise = 0.9;
  double inter_subclass_gap = 1.5;    // norm of each subclass offset
  double meta_separation = 3.0;       // pairwise distance between meta centers
  double meta_fidelity = 0.9;
  double unlabeled_fraction = 0.5;    // share of the per-class eval pool held out unlabeled
  std::size_t eval_per_class = 40;    // val + test-unlabeled samples drawn per class
  std::uint64_t seed = 1;

  std::size_t num_classes() const { return num_meta_categories * subclasses_per_meta; }
  /// Classes are dealt round-robin to meta categories, so every meta category
  /// mixes frequent and rare subclasses.
  std::size_t meta_of_class(std::size_t c) const { return c % num_meta_categories; }
  /// Throws ConfigError describing the first violated constraint.
  void validate() const;
};

enum class Split : std::uint8_t { train = 0, val = 1, test_unlabeled = 2 };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct Dataset {
  DatasetConfig config;
  Matrix features;                    // N x feature_dim
  std::vector<std::size_t> labels;    // hidden for test_unlabeled, kept for evaluation
  std::vector<std::size_t> meta;      // observed meta category per sample
  std::vector<Split> split;
  std::vector<std::size_t> class_counts;  // train-split count per class
  Matrix class_centers;               // C x feature_dim generating centers

  std::size_t size() const { return labels.size(); }
  std::size_t num_classes() const { return config.num_classes(); }
  std::size_t meta_dim() const { return config.num_meta_categories; }

  std::vector<std::size_t> indices(Split s) const;
  /// One-hot meta rows for the given samples; zero rows when `enabled` is false.
  Matrix meta_onehot(std::span<const std::size_t> idx, bool enabled = true) const;
  Matrix gather_features(std::span<const std::size_t> idx) const;
  std::vector<std::size_t> gather_labels(std::span<const std::size_t> idx) const;

  /// Stable content hash over features, labels, meta and split.
  std::uint64_t content_hash() const;
};

/// n_c = max(1, round(head * ratio^(c / (C - 1)))).
std::vector<std::size_t> class_count_schedule(std::size_t num_classes, std::size_t head, double ratio);

Dataset generate(const DatasetConfig& cfg);

struct AugmentPolicy {
  double jitter_sigma = 0.0;
  double mask_prob = 0.0;
  double scale_lo = 1.0;
  double scale_hi = 1.0;
  double crop_shift_sigma = 0.0;

  static AugmentPolicy identity() { return {}; }
  bool is_identity() const;
  void validate() const;
};

/// Applies, in order: a uniform scale in [scale_lo, scale_hi], one global
/// crop shift N(0, crop_shift_sigma) added to every coordinate, per-coordinate
/// jitter N(0, jitter_sigma), then per-coordinate zeroing with mask_prob.
/// Steps whose knob is neutral draw nothing from the RNG.
std::vector<double> augment(std::span<const double> x, const AugmentPolicy& policy, SeededRng& rng);
Matrix augment_rows(const Matrix& x, const AugmentPolicy& policy, SeededRng& rng);

struct MixupBatch {
  Matrix features;
  Matrix soft_targets;
  double lambda = 1.0;
};

Matrix one_hot(std::span<const std::size_t> labels, std::size_t num_classes);

/// Mixes with a fixed lambda.
MixupBatch mixup_with_lambda(const Matrix& xa, std::span<const std::size_t> ya, const Matrix& xb,
                             std::span<const std::size_t> yb, std::size_t num_classes, double lambda);
/// lambda ~ Beta(alpha, alpha).
MixupBatch mixup(const Matrix& xa, std::span<const std::size_t> ya, const Matrix& xb,
                 std::span<const std::size_t> yb, std::size_t num_classes, double alpha, SeededRng& rng);

// Structured-text (JSON) dataset files; decimal numbers round-trip exactly.
void save_dataset(const Dataset& d, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);
std::string dataset_to_text(const Dataset& d);
Dataset dataset_from_text(const std::string& text);

nlohmann::json dataset_config_to_json(const DatasetConfig& c);
DatasetConfig dataset_config_from_json(const nlohmann::json& j);

/// "class,meta,count" rows of the train-split histogram.
std::string class_counts_csv(const Dataset& d);

}  // namespace fgvc
