#pragma once

// Supervised classification losses with analytic gradients. Every loss uses
// mean reduction over the batch.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

#include "fgvc/numerics.hpp"

namespace fgvc {

struct LossResult {
  double loss = 0.0;
  Matrix grad;                         // d loss / d logits (or queries)
  std::vector<double> per_sample;      // un-averaged per-row losses
};

/// mean_i  -sum_c t_ic log softmax(z_i)_c
LossResult soft_target_ce(const Matrix& logits, const Matrix& soft_targets);
/// Hard-label cross entropy, i.e. soft_target_ce with one-hot targets.
LossResult cross_entropy(const Matrix& logits, std::span<const std::size_t> labels);
/// Target (1 - eps) * onehot + eps / C.
LossResult label_smoothing_ce(const Matrix& logits, std::span<const std::size_t> labels, double epsilon);

struct ArcfaceConfig {
  double scale_s = 16.0;
  double margin_m = 0.2;
  double weight_decay_l2 = 5e-4;
  double cos_clamp_eps = 1e-7;

  void validate() const;
};

struct ArcfaceResult {
  double loss = 0.0;
  Matrix grad_embeddings;   // same shape as the unnormalized embeddings
  Matrix grad_weights;      // same shape as class_weights (C x d)
  Matrix logits;            // margin-adjusted, scaled logits used for the loss
  std::vector<double> per_sample;
};

/// Additive angular margin softmax. `class_weights` holds one row per class.
/// Gradients flow through both row normalizations.
ArcfaceResult arcface(const Matrix& embeddings, const Matrix& class_weights,
                      std::span<const std::size_t> labels, const ArcfaceConfig& cfg);

/// s * cos(theta) logits without margin, as used at inference.
Matrix cosine_logits(const Matrix& embeddings, const Matrix& class_weights, double scale_s);

struct SeesawConfig {
  double p = 0.8;
  double q = 2.0;
  double gamma = 0.95;
  double weight_decay_l2 = 5e-4;

  void validate() const;
};

/// Cumulative per-class instance counts, grown online from zero.
struct SeesawState {
  std::vector<std::uint64_t> counts;

  explicit SeesawState(std::size_t num_classes = 0) : counts(num_classes, 0) {}
  void observe(std::span<const std::size_t> labels);
};

/// M_ij: 1 when D_i <= D_j, else (D_j / D_i)^p.
double seesaw_mitigation(std::uint64_t count_i, std::uint64_t count_j, double p);
/// C_ij: 1 when sigma_j <= sigma_i, else (sigma_j / sigma_i)^q.
double seesaw_compensation(double sigma_i, double sigma_j, double q);

/// S_ij = gamma * M_ij * C_ij per sample (row) and class (column); the
/// entry at the label column is unused and set to 1.
Matrix seesaw_factors(const Matrix& logits, std::span<const std::size_t> labels,
                      std::span<const std::uint64_t> counts, const SeesawConfig& cfg);

/// Seesaw loss for fixed factors; gradients treat the factors as constants.
LossResult seesaw_with_factors(const Matrix& logits, std::span<const std::size_t> labels,
                               const Matrix& factors);

/// Updates `state` with the batch labels, then evaluates the loss.
LossResult seesaw(const Matrix& logits, std::span<const std::size_t> labels, SeesawState& state,
                  const SeesawConfig& cfg);

struct OhemSelection {
  std::vector<std::size_t> indices;  // kept samples, ascending
  double mean = 0.0;
  std::vector<double> mask;          // 1 for kept rows, 0 otherwise
};

/// Keeps the ceil(keep_fraction * N) largest losses; ties go to the lower index.
OhemSelection ohem_filter(std::span<const double> per_sample_losses, double keep_fraction);

/// Cross entropy averaged over the OHEM-selected rows only.
LossResult ohem_cross_entropy(const Matrix& logits, std::span<const std::size_t> labels, double keep_fraction);

}  // namespace fgvc
