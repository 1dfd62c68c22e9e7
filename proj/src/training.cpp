#include <algorithm>
#include <cmath>
#include <numeric>

#include "fgvc/harness.hpp"

namespace fgvc {

SupervisedLoss::SupervisedLoss(const LossConfig& cfg, std::size_t num_classes)
    : cfg_(cfg), num_classes_(num_classes), seesaw_(num_classes) {}

ParamLoss SupervisedLoss::operator()(const Model& model, const Matrix& features, const Matrix& meta,
                                     std::span<const std::size_t> labels, SeededRng& rng) {
  switch (cfg_.kind) {
    case LossKind::cross_entropy: {
      auto fw = forward(model, features, meta);
      auto r = cross_entropy(fw.logits, labels);
      return {r.loss, backward(model, fw.cache, r.grad)};
    }
    case LossKind::soft_target_ce: {
      if (cfg_.mixup_alpha == 0.0) {
        auto fw = forward(model, features, meta);
        auto r = soft_target_ce(fw.logits, one_hot(labels, num_classes_));
        return {r.loss, backward(model, fw.cache, r.grad)};
      }
      std::vector<std::size_t> perm(labels.size());
      std::iota(perm.begin(), perm.end(), 0);
      rng.shuffle(perm);
      Matrix xb(features.rows(), features.cols());
      Matrix mb(meta.rows(), meta.cols());
      std::vector<std::size_t> yb(labels.size());
      for (std::size_t i = 0; i < perm.size(); ++i) {
        std::copy(features.row(perm[i]).begin(), features.row(perm[i]).end(), xb.row(i).begin());
        std::copy(meta.row(perm[i]).begin(), meta.row(perm[i]).end(), mb.row(i).begin());
        yb[i] = labels[perm[i]];
      }
      auto mixed = mixup(features, labels, xb, yb, num_classes_, cfg_.mixup_alpha, rng);
      Matrix mixed_meta = meta * mixed.lambda + mb * (1.0 - mixed.lambda);
      auto fw = forward(model, mixed.features, mixed_meta);
      auto r = soft_target_ce(fw.logits, mixed.soft_targets);
      return {r.loss, backward(model, fw.cache, r.grad)};
    }
    case LossKind::label_smoothing: {
      auto fw = forward(model, features, meta);
      auto r = label_smoothing_ce(fw.logits, labels, cfg_.smoothing);
      return {r.loss, backward(model, fw.cache, r.grad)};
    }
    case LossKind::arcface: {
      if (model.config().head != HeadMode::cosine) throw ConfigError("arcface loss needs a cosine classifier head");
      auto fw = forward(model, features, meta);
      const std::size_t wi = model.classifier_weight();
      auto r = arcface(fw.embedding, model.params().values[wi], labels, cfg_.arcface);
      ParamSet grads = model.params().zeros_like();
      backward_embedding(model, fw.cache, r.grad_embeddings, grads);
      grads.values[wi] += r.grad_weights;
      return {r.loss, std::move(grads)};
    }
    case LossKind::seesaw: {
      auto fw = forward(model, features, meta);
      auto r = seesaw(fw.logits, labels, seesaw_, cfg_.seesaw);
      return {r.loss, backward(model, fw.cache, r.grad)};
    }
    case LossKind::ohem: {
      auto fw = forward(model, features, meta);
      auto r = ohem_cross_entropy(fw.logits, labels, cfg_.ohem_keep);
      return {r.loss, backward(model, fw.cache, r.grad)};
    }
  }
  throw ConfigError("unhandled loss kind");
}

std::vector<LabeledBatch> make_labeled_batches(const Dataset& data, std::vector<std::size_t> idx,
                                               std::span<const std::size_t> labels_override, std::size_t batch_size,
                                               bool use_meta, SeededRng& rng) {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (!labels_override.empty() && labels_override.size() != idx.size())
    throw ConfigError("label override length differs from the index list");
  std::vector<std::size_t> order(idx.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  std::vector<LabeledBatch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    std::vector<std::size_t> rows;
    LabeledBatch b;
    for (std::size_t k = start; k < end; ++k) {
      rows.push_back(idx[order[k]]);
      b.labels.push_back(labels_override.empty() ? data.labels[idx[order[k]]] : labels_override[order[k]]);
    }
    b.features = data.gather_features(rows);
    b.meta = data.meta_onehot(rows, use_meta);
    out.push_back(std::move(b));
  }
  return out;
}

std::vector<UnlabeledBatch> make_unlabeled_batches(const Dataset& data, std::vector<std::size_t> idx,
                                                   std::size_t batch_size, bool use_meta, SeededRng& rng) {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  rng.shuffle(idx);
  std::vector<UnlabeledBatch> out;
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    std::span<const std::size_t> rows(idx.data() + start, std::min(idx.size(), start + batch_size) - start);
    out.push_back({data.gather_features(rows), data.meta_onehot(rows, use_meta)});
  }
  return out;
}

double supervised_epoch(Model& model, OptimizerState& opt, std::span<const LabeledBatch> batches,
                        SupervisedLoss& loss, const AugmentPolicy& aug, SeededRng& rng) {
  if (batches.empty()) throw NumericError("supervised_epoch: empty loader");
  double total = 0.0;
  for (const auto& b : batches) {
    Matrix x = augment_rows(b.features, aug, rng);
    ParamLoss step = loss(model, x, b.meta, b.labels, rng);
    if (!std::isfinite(step.loss)) throw NumericError("supervised_epoch: non-finite loss");
    total += step.loss;
    accumulate_and_step(model.mutable_params(), opt, step.grad);
  }
  return total / static_cast<double>(batches.size());
}

ModelConfig model_config_for(const RunConfig& cfg, const Dataset& data) {
  ModelConfig m = cfg.model;
  m.feature_dim = data.features.cols();
  m.meta_dim = data.meta_dim();
  m.num_classes = data.num_classes();
  if (cfg.loss.kind == LossKind::arcface) {
    m.head = HeadMode::cosine;
    m.cos_scale = cfg.loss.arcface.scale_s;
  } else {
    m.head = HeadMode::linear;
  }
  return m;
}

std::size_t steps_per_epoch(std::size_t samples, std::size_t batch_size, std::size_t accumulate_steps) {
  if (batch_size == 0 || accumulate_steps == 0) throw ConfigError("batch_size and accumulate_steps must be >= 1");
  return (samples + batch_size - 1) / batch_size;
}

AdamWConfig optimizer_for(const RunConfig& cfg, std::size_t samples, std::size_t epochs) {
  AdamWConfig o = cfg.optimizer;
  o.accumulate_steps = cfg.accumulate_steps;
  o.batch_size = cfg.batch_size * cfg.accumulate_steps;
  const std::size_t micro = steps_per_epoch(samples, cfg.batch_size, cfg.accumulate_steps) * epochs;
  o.total_steps = std::max<std::uint64_t>(1, micro / cfg.accumulate_steps);
  return o;
}

AdamWConfig supervised_optimizer_for(const RunConfig& cfg, std::size_t samples, std::size_t epochs) {
  AdamWConfig o = optimizer_for(cfg, samples, epochs);
  if (cfg.loss.kind == LossKind::arcface) o.weight_decay = cfg.loss.arcface.weight_decay_l2;
  if (cfg.loss.kind == LossKind::seesaw) o.weight_decay = cfg.loss.seesaw.weight_decay_l2;
  return o;
}

SupervisedTrainer::SupervisedTrainer(const RunConfig& cfg, const Dataset& data, Model model,
                                     std::vector<std::size_t> train_idx, std::vector<std::size_t> train_labels,
                                     std::size_t epochs, std::string stage)
    : cfg_(cfg),
      data_(data),
      model_(std::move(model)),
      idx_(std::move(train_idx)),
      labels_(std::move(train_labels)),
      epochs_(epochs),
      stage_(std::move(stage)),
      opt_(OptimizerState::create(model_.params(), supervised_optimizer_for(cfg, idx_.size(), epochs))),
      loss_(cfg.loss, data.num_classes()),
      rng_(SeededRng::derive(cfg.seed, stage_)) {
  if (idx_.empty()) throw ConfigError(stage_ + ": no training samples");
  if (cfg.freeze_encoder && stage_ == "finetune")
    for (std::size_t i = 0; i < model_.params().size(); ++i)
      if (model_.params().names[i].rfind("encoder.", 0) == 0) opt_.trainable[i] = false;
}

double SupervisedTrainer::run_epoch() {
  if (done()) throw NumericError(stage_ + ": training already finished");
  SeededRng epoch_rng(rng_.next_u64());
  auto batches = make_labeled_batches(data_, idx_, labels_, cfg_.batch_size, cfg_.use_meta, epoch_rng);
  const double loss = supervised_epoch(model_, opt_, batches, loss_, cfg_.train_augment, epoch_rng);
  ++epoch_;
  return loss;
}

Checkpoint SupervisedTrainer::to_checkpoint() const {
  Checkpoint c;
  c.put_params("model:", model_.params());
  c.put_optimizer("opt:", opt_);
  c.put_rng("rng", rng_);
  c.put_u64("epoch", {epoch_});
  c.put_u64("seesaw", loss_.seesaw_state().counts);
  c.config_echo = stage_ + "\n" + run_config_to_json(cfg_).dump();
  return c;
}

void SupervisedTrainer::restore(const Checkpoint& ckpt) {
  if (ckpt.config_echo != stage_ + "\n" + run_config_to_json(cfg_).dump())
    throw ConfigError(stage_ + ": checkpoint was written for a different configuration");
  ParamSet p = ckpt.get_params("model:");
  if (!p.same_structure(model_.params())) throw ConfigError(stage_ + ": checkpoint parameters do not match the model");
  OptimizerState o = ckpt.get_optimizer("opt:");
  if (!o.first_moment.same_structure(model_.params()))
    throw ConfigError(stage_ + ": checkpoint optimizer state does not match the model");
  const auto& counts = ckpt.get_u64("seesaw");
  if (counts.size() != data_.num_classes()) throw ConfigError(stage_ + ": checkpoint class counts have wrong length");
  const auto& epoch = ckpt.get_u64("epoch");
  if (epoch.size() != 1 || epoch[0] > epochs_) throw ConfigError(stage_ + ": checkpoint epoch out of range");

  model_ = Model::from_params(model_.config(), std::move(p));
  opt_ = std::move(o);
  ckpt.get_rng("rng", rng_);
  loss_.seesaw_state().counts = counts;
  epoch_ = epoch[0];
}

}  // namespace fgvc
