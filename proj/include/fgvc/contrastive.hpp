#pragma once

// Contrastive objectives and the two self-supervised trainers: momentum-encoder
// pretraining with a symmetrized in-batch loss, and joint supervised plus
// 2N-view contrastive training.

#include <functional>
#include <span>
#include <vector>

#include "fgvc/datagen.hpp"
#include "fgvc/losses.hpp"
#include "fgvc/model.hpp"

namespace fgvc {

struct ContrastiveConfig {
  double tau = 0.25;
  double momentum_m = 0.99;

  void validate() const;
};

struct JointConfig {
  double lambda1 = 0.9;  // supervised weight
  double lambda2 = 0.1;  // self-supervised weight

  void validate() const;
};

struct InfoNceResult {
  double loss = 0.0;
  Matrix grad_queries;
  Matrix grad_keys;  // empty unless requested
  std::vector<double> per_sample;
};

/// Mean over queries of -log softmax(q_i . keys^T / tau)[positives[i]].
/// Rows of q and keys must be unit length (within 1e-6).
InfoNceResult info_nce(const Matrix& queries, const Matrix& keys, std::span<const std::size_t> positives,
                       double tau, bool want_key_grad = false);

/// 2 * tau * CE(q k^T / tau, diagonal labels).
InfoNceResult ctr(const Matrix& q, const Matrix& k, double tau);

struct SymmetricCtrResult {
  double loss = 0.0;
  Matrix grad_q1;
  Matrix grad_q2;
};

/// ctr(q1, k2) + ctr(q2, k1); keys receive no gradient.
SymmetricCtrResult symmetrized_ctr(const Matrix& q1, const Matrix& q2, const Matrix& k1, const Matrix& k2,
                                   double tau);

/// key = m * key + (1 - m) * query, element-wise.
void momentum_update(ParamSet& key, const ParamSet& query, double m);

double cosine_sim(std::span<const double> a, std::span<const double> b);

struct NtXentResult {
  double loss = 0.0;
  Matrix grad;  // w.r.t. the unnormalized projections
};

/// 2N-view InfoNCE over cosine similarities: rows 2k and 2k+1 are the two
/// views of sample k; every other row is a negative.
NtXentResult nt_xent(const Matrix& projections, double tau);

/// Loss plus gradients for every model parameter.
struct ParamLoss {
  double loss = 0.0;
  ParamSet grad;
};

/// lambda1 * sup + lambda2 * self for values and gradients.
ParamLoss joint_loss(const ParamLoss& sup, const ParamLoss& self, const JointConfig& cfg);
LossResult joint_loss(const LossResult& sup, const LossResult& self, const JointConfig& cfg);

/// Row-wise l2 normalization backward: given d/d(x_hat), returns d/dx.
Matrix l2_normalize_backward(const NormalizedRows& n, const Matrix& grad_normalized);

struct LabeledBatch {
  Matrix features;
  Matrix meta;
  std::vector<std::size_t> labels;
};

struct UnlabeledBatch {
  Matrix features;
  Matrix meta;
};

/// Supervised objective evaluated on one (already augmented) labeled batch.
using SupervisedObjective =
    std::function<ParamLoss(const Model&, const Matrix& features, const Matrix& meta, std::span<const std::size_t> labels)>;

/// Plain cross entropy through the classifier head.
ParamLoss cross_entropy_objective(const Model& model, const Matrix& features, const Matrix& meta,
                                  std::span<const std::size_t> labels);

/// Query path output: normalize(pred(proj(encoder(x)))).
Matrix query_embedding(const Model& model, const Matrix& features, const Matrix& meta);
/// Key path output: normalize(proj(encoder(x))).
Matrix key_embedding(const Model& model, const Matrix& features, const Matrix& meta);

/// Symmetrized loss and query-path gradients for one pair of views.
ParamLoss moco_gradients(const Model& query, const Model& key, const Matrix& x1, const Matrix& x2,
                         const Matrix& meta, double tau);

/// One pass over `batches`: two augmentations per batch, query forward,
/// key forward without gradient, symmetrized loss, optimizer step on the
/// query model, then momentum update of the key model. Returns the mean loss.
double moco_pretrain_epoch(Model& query, Model& key, OptimizerState& opt, std::span<const UnlabeledBatch> batches,
                           const ContrastiveConfig& cfg, const AugmentPolicy& aug, SeededRng& rng);

struct JointGradients {
  ParamLoss sup;
  ParamLoss self;
  ParamLoss total;
};

/// Supervised loss on `labeled` plus NT-Xent on two augmented views of `unlabeled`.
JointGradients simclr_joint_gradients(const Model& model, const LabeledBatch& labeled, const UnlabeledBatch& unlabeled,
                                      const ContrastiveConfig& cfg, const JointConfig& joint, const AugmentPolicy& aug,
                                      SeededRng& sup_rng, SeededRng& ssl_rng, const SupervisedObjective& objective);

struct JointEpochStats {
  double mean_sup = 0.0;
  double mean_self = 0.0;
  double mean_total = 0.0;
};

/// One optimizer step per labeled batch; unlabeled batches are cycled.
/// Labeled augmentation draws from sup_rng and contrastive views from ssl_rng.
JointEpochStats simclr_joint_epoch(Model& model, OptimizerState& opt, std::span<const LabeledBatch> labeled,
                                   std::span<const UnlabeledBatch> unlabeled, const ContrastiveConfig& cfg,
                                   const JointConfig& joint, const AugmentPolicy& aug, SeededRng& sup_rng,
                                   SeededRng& ssl_rng, const SupervisedObjective& objective = cross_entropy_objective);

}  // namespace fgvc
