#include <fstream>
#include <sstream>

#include "fgvc/harness.hpp"

namespace fgvc {

using nlohmann::json;

std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::cross_entropy: return "ce";
    case LossKind::soft_target_ce: return "soft_target_ce";
    case LossKind::label_smoothing: return "label_smoothing";
    case LossKind::arcface: return "arcface";
    case LossKind::seesaw: return "seesaw";
    case LossKind::ohem: return "ohem";
  }
  return "?";
}

std::string to_string(TrainerKind k) {
  switch (k) {
    case TrainerKind::supervised: return "supervised";
    case TrainerKind::moco_then_finetune: return "moco_then_finetune";
    case TrainerKind::simclr_joint: return "simclr_joint";
  }
  return "?";
}

LossKind loss_kind_from_string(const std::string& s) {
  for (auto k : {LossKind::cross_entropy, LossKind::soft_target_ce, LossKind::label_smoothing, LossKind::arcface,
                 LossKind::seesaw, LossKind::ohem})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown loss kind: " + s);
}

TrainerKind trainer_kind_from_string(const std::string& s) {
  for (auto k : {TrainerKind::supervised, TrainerKind::moco_then_finetune, TrainerKind::simclr_joint})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown trainer: " + s);
}

void RunConfig::validate() const {
  if (dataset_path.empty()) dataset.validate();
  loss.arcface.validate();
  loss.seesaw.validate();
  if (!(loss.mixup_alpha >= 0.0)) throw ConfigError("loss: mixup_alpha must be >= 0");
  if (!(loss.smoothing >= 0.0 && loss.smoothing < 1.0)) throw ConfigError("loss: smoothing must lie in [0, 1)");
  if (!(loss.ohem_keep > 0.0 && loss.ohem_keep <= 1.0)) throw ConfigError("loss: ohem_keep must lie in (0, 1]");
  if (batch_size < 1) throw ConfigError("run: batch_size must be >= 1");
  if (accumulate_steps < 1) throw ConfigError("run: accumulate_steps must be >= 1");
  contrastive.validate();
  joint.validate();
  train_augment.validate();
  ssl_augment.validate();
  tta.policy.validate();
  if (tta.views < 1) throw ConfigError("tta: views must be >= 1");
  if (!(pseudo_label_fraction >= 0.0 && pseudo_label_fraction <= 1.0))
    throw ConfigError("run: pseudo_label_fraction must lie in [0, 1]");
}

namespace {

json policy_to_json(const AugmentPolicy& p) {
  return json{{"jitter_sigma", p.jitter_sigma},
              {"mask_prob", p.mask_prob},
              {"scale_range", {p.scale_lo, p.scale_hi}},
              {"crop_shift_sigma", p.crop_shift_sigma}};
}

AugmentPolicy policy_from_json(const json& j, AugmentPolicy p) {
  p.jitter_sigma = j.value("jitter_sigma", p.jitter_sigma);
  p.mask_prob = j.value("mask_prob", p.mask_prob);
  if (j.contains("scale_range")) {
    p.scale_lo = j["scale_range"].at(0).get<double>();
    p.scale_hi = j["scale_range"].at(1).get<double>();
  }
  p.crop_shift_sigma = j.value("crop_shift_sigma", p.crop_shift_sigma);
  return p;
}

}  // namespace

json run_config_to_json(const RunConfig& c) {
  const auto& l = c.loss;
  json j;
  j["dataset"] = dataset_config_to_json(c.dataset);
  j["dataset_path"] = c.dataset_path;
  j["model"] = {{"hidden", c.model.hidden},
                {"embed_dim", c.model.embed_dim},
                {"head_hidden", c.model.head_hidden},
                {"proj_dim", c.model.proj_dim}};
  j["use_meta"] = c.use_meta;
  j["loss"] = {{"kind", to_string(l.kind)},
               {"mixup_alpha", l.mixup_alpha},
               {"smoothing", l.smoothing},
               {"arcface", {{"scale_s", l.arcface.scale_s},
                            {"margin_m", l.arcface.margin_m},
                            {"weight_decay_l2", l.arcface.weight_decay_l2},
                            {"cos_clamp_eps", l.arcface.cos_clamp_eps}}},
               {"seesaw", {{"p", l.seesaw.p},
                           {"q", l.seesaw.q},
                           {"gamma", l.seesaw.gamma},
                           {"weight_decay_l2", l.seesaw.weight_decay_l2}}},
               {"ohem_keep", l.ohem_keep}};
  j["trainer"] = to_string(c.trainer);
  j["epochs"] = c.epochs;
  j["pretrain_epochs"] = c.pretrain_epochs;
  j["finetune_epochs"] = c.finetune_epochs;
  j["freeze_encoder"] = c.freeze_encoder;
  j["batch_size"] = c.batch_size;
  j["accumulate_steps"] = c.accumulate_steps;
  j["optimizer"] = {{"base_lr", c.optimizer.base_lr},
                    {"weight_decay", c.optimizer.weight_decay},
                    {"betas", {c.optimizer.beta1, c.optimizer.beta2}},
                    {"eps", c.optimizer.eps},
                    {"ref_batch", c.optimizer.ref_batch}};
  j["contrastive"] = {{"tau", c.contrastive.tau}, {"momentum_m", c.contrastive.momentum_m}};
  j["joint"] = {{"lambda1", c.joint.lambda1}, {"lambda2", c.joint.lambda2}};
  j["train_augment"] = policy_to_json(c.train_augment);
  j["ssl_augment"] = policy_to_json(c.ssl_augment);
  j["pseudo_label_fraction"] = c.pseudo_label_fraction;
  j["pseudo_epochs"] = c.pseudo_epochs;
  j["tta"] = {{"views", c.tta.views}, {"policy", policy_to_json(c.tta.policy)}};
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  return j;
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  try {
    if (j.contains("dataset")) c.dataset = dataset_config_from_json(j["dataset"]);
    c.dataset_path = j.value("dataset_path", c.dataset_path);
    if (j.contains("model")) {
      const auto& m = j["model"];
      if (m.contains("hidden")) c.model.hidden = m["hidden"].get<std::vector<std::size_t>>();
      c.model.embed_dim = m.value("embed_dim", c.model.embed_dim);
      c.model.head_hidden = m.value("head_hidden", c.model.head_hidden);
      c.model.proj_dim = m.value("proj_dim", c.model.proj_dim);
    }
    c.use_meta = j.value("use_meta", c.use_meta);
    if (j.contains("loss")) {
      const auto& l = j["loss"];
      if (l.contains("kind")) c.loss.kind = loss_kind_from_string(l["kind"].get<std::string>());
      c.loss.mixup_alpha = l.value("mixup_alpha", c.loss.mixup_alpha);
      c.loss.smoothing = l.value("smoothing", c.loss.smoothing);
      if (l.contains("arcface")) {
        const auto& a = l["arcface"];
        c.loss.arcface.scale_s = a.value("scale_s", c.loss.arcface.scale_s);
        c.loss.arcface.margin_m = a.value("margin_m", c.loss.arcface.margin_m);
        c.loss.arcface.weight_decay_l2 = a.value("weight_decay_l2", c.loss.arcface.weight_decay_l2);
        c.loss.arcface.cos_clamp_eps = a.value("cos_clamp_eps", c.loss.arcface.cos_clamp_eps);
      }
      if (l.contains("seesaw")) {
        const auto& s = l["seesaw"];
        c.loss.seesaw.p = s.value("p", c.loss.seesaw.p);
        c.loss.seesaw.q = s.value("q", c.loss.seesaw.q);
        c.loss.seesaw.gamma = s.value("gamma", c.loss.seesaw.gamma);
        c.loss.seesaw.weight_decay_l2 = s.value("weight_decay_l2", c.loss.seesaw.weight_decay_l2);
      }
      c.loss.ohem_keep = l.value("ohem_keep", c.loss.ohem_keep);
    }
    if (j.contains("trainer")) c.trainer = trainer_kind_from_string(j["trainer"].get<std::string>());
    c.epochs = j.value("epochs", c.epochs);
    c.pretrain_epochs = j.value("pretrain_epochs", c.pretrain_epochs);
    c.finetune_epochs = j.value("finetune_epochs", c.finetune_epochs);
    c.freeze_encoder = j.value("freeze_encoder", c.freeze_encoder);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.accumulate_steps = j.value("accumulate_steps", c.accumulate_steps);
    if (j.contains("optimizer")) {
      const auto& o = j["optimizer"];
      c.optimizer.base_lr = o.value("base_lr", c.optimizer.base_lr);
      c.optimizer.weight_decay = o.value("weight_decay", c.optimizer.weight_decay);
      if (o.contains("betas")) {
        c.optimizer.beta1 = o["betas"].at(0).get<double>();
        c.optimizer.beta2 = o["betas"].at(1).get<double>();
      }
      c.optimizer.eps = o.value("eps", c.optimizer.eps);
      c.optimizer.ref_batch = o.value("ref_batch", c.optimizer.ref_batch);
    }
    if (j.contains("contrastive")) {
      c.contrastive.tau = j["contrastive"].value("tau", c.contrastive.tau);
      c.contrastive.momentum_m = j["contrastive"].value("momentum_m", c.contrastive.momentum_m);
    }
    if (j.contains("joint")) {
      c.joint.lambda1 = j["joint"].value("lambda1", c.joint.lambda1);
      c.joint.lambda2 = j["joint"].value("lambda2", c.joint.lambda2);
    }
    if (j.contains("train_augment")) c.train_augment = policy_from_json(j["train_augment"], c.train_augment);
    if (j.contains("ssl_augment")) c.ssl_augment = policy_from_json(j["ssl_augment"], c.ssl_augment);
    c.pseudo_label_fraction = j.value("pseudo_label_fraction", c.pseudo_label_fraction);
    c.pseudo_epochs = j.value("pseudo_epochs", c.pseudo_epochs);
    if (j.contains("tta")) {
      c.tta.views = j["tta"].value("views", c.tta.views);
      if (j["tta"].contains("policy")) c.tta.policy = policy_from_json(j["tta"]["policy"], c.tta.policy);
    }
    c.seed = j.value("seed", c.seed);
    c.output_dir = j.value("output_dir", c.output_dir);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read run config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return run_config_from_json(json::parse(ss.str()));
  } catch (const json::parse_error& e) {
    throw ConfigError("run config " + path.string() + ": " + e.what());
  }
}

}  // namespace fgvc
