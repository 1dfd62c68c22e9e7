#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "fgvc/harness.hpp"

namespace fgvc {

using nlohmann::json;

void write_atomically(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + tmp.string());
    out << text;
    out.flush();
    if (!out) throw ConfigError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

namespace {

double nan() { return std::numeric_limits<double>::quiet_NaN(); }

json real(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

double real_from(const json& j) { return j.is_null() ? nan() : j.get<double>(); }

json f1_to_json(const F1Report& r) {
  json per = json::array();
  for (double v : r.per_class) per.push_back(real(v));
  return {{"macro", real(r.macro)},
          {"head_macro", real(r.head_macro)},
          {"tail_macro", real(r.tail_macro)},
          {"per_class", per},
          {"present", r.present},
          {"is_head", r.is_head}};
}

F1Report f1_from_json(const json& j) {
  F1Report r;
  r.macro = real_from(j.at("macro"));
  r.head_macro = real_from(j.at("head_macro"));
  r.tail_macro = real_from(j.at("tail_macro"));
  for (const auto& v : j.at("per_class")) r.per_class.push_back(real_from(v));
  r.present = j.at("present").get<std::vector<bool>>();
  r.is_head = j.at("is_head").get<std::vector<bool>>();
  return r;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

json RunManifest::metrics_json() const {
  json ep = json::array();
  for (const auto& e : epochs)
    ep.push_back({{"stage", e.stage}, {"epoch", e.epoch}, {"train_loss", real(e.train_loss)},
                  {"val_macro_f1", real(e.val_macro_f1)}});
  return {{"dataset_hash", dataset_hash},
          {"class_counts", class_counts},
          {"epochs", ep},
          {"untrained_val", f1_to_json(untrained_val)},
          {"untrained_test", f1_to_json(untrained_test)},
          {"final_val", f1_to_json(final_val)},
          {"final_test", f1_to_json(final_test)},
          {"pseudo_added", pseudo_added}};
}

json RunManifest::to_json() const {
  return {{"format", kManifestFormat},
          {"code_version", kCodeVersion},
          {"config", config},
          {"metrics", metrics_json()},
          {"wall_clock_seconds", wall_clock_seconds},
          {"complete", complete},
          {"failed_stage", failed_stage},
          {"failure", failure}};
}

RunManifest RunManifest::from_json(const json& j) {
  RunManifest m;
  try {
    if (j.at("format").get<int>() != kManifestFormat) throw ConfigError("manifest: unsupported format version");
    m.config = j.at("config");
    const auto& mx = j.at("metrics");
    m.dataset_hash = mx.at("dataset_hash").get<std::string>();
    m.class_counts = mx.at("class_counts").get<std::vector<std::size_t>>();
    for (const auto& e : mx.at("epochs"))
      m.epochs.push_back({e.at("stage").get<std::string>(), e.at("epoch").get<std::size_t>(),
                          real_from(e.at("train_loss")), real_from(e.at("val_macro_f1"))});
    m.untrained_val = f1_from_json(mx.at("untrained_val"));
    m.untrained_test = f1_from_json(mx.at("untrained_test"));
    m.final_val = f1_from_json(mx.at("final_val"));
    m.final_test = f1_from_json(mx.at("final_test"));
    m.pseudo_added = mx.at("pseudo_added").get<std::size_t>();
    m.wall_clock_seconds = j.at("wall_clock_seconds").get<double>();
    m.complete = j.at("complete").get<bool>();
    m.failed_stage = j.at("failed_stage").get<std::string>();
    m.failure = j.at("failure").get<std::string>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("manifest: ") + e.what());
  }
  return m;
}

void save_manifest(const RunManifest& m, const std::filesystem::path& path) {
  write_atomically(path, m.to_json().dump(2) + "\n");
}

RunManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read manifest " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return RunManifest::from_json(json::parse(ss.str()));
  } catch (const json::parse_error& e) {
    throw ConfigError("manifest " + path.string() + ": " + e.what());
  }
}

namespace {

class Pipeline {
 public:
  explicit Pipeline(const RunConfig& cfg) : cfg_(cfg) {}

  RunOutputs execute() {
    const auto t0 = std::chrono::steady_clock::now();
    out_.manifest.config = run_config_to_json(cfg_);
    try {
      stage("config", [&] { cfg_.validate(); });
      stage("dataset", [&] { load_data(); });
      stage("init", [&] {
        SeededRng rng = SeededRng::derive(cfg_.seed, "init");
        model_ = Model::init(model_config_for(cfg_, data_), rng);
      });
      stage("untrained_eval", [&] {
        m().untrained_val = evaluate(val_idx_, false);
        m().untrained_test = evaluate(test_idx_, false);
      });
      switch (cfg_.trainer) {
        case TrainerKind::supervised:
          stage("supervised", [&] { supervise(train_idx_, {}, cfg_.epochs, "supervised"); });
          break;
        case TrainerKind::moco_then_finetune:
          stage("moco_pretrain", [&] { moco_pretrain(); });
          stage("finetune", [&] { supervise(train_idx_, {}, cfg_.finetune_epochs, "finetune"); });
          break;
        case TrainerKind::simclr_joint:
          stage("joint", [&] { joint_train(); });
          stage("finetune", [&] { supervise(train_idx_, {}, cfg_.finetune_epochs, "finetune"); });
          break;
      }
      if (cfg_.pseudo_epochs > 0) stage("pseudo", [&] { pseudo_round(); });
      stage("final_eval", [&] {
        m().final_val = evaluate(val_idx_, false);
        m().final_test = evaluate(test_idx_, cfg_.tta.views > 1, &out_.test_predictions);
      });
      m().complete = true;
      m().wall_clock_seconds = seconds_since(t0);
      stage("persist", [&] { persist(); });
    } catch (const StageError& e) {
      m().complete = false;
      m().wall_clock_seconds = seconds_since(t0);
      if (!cfg_.output_dir.empty()) {
        try {
          save_manifest(m(), std::filesystem::path(cfg_.output_dir) / "manifest.json");
        } catch (const std::exception&) {
          // The original stage failure is the more useful diagnostic.
        }
      }
      throw;
    }
    out_.model = model_;
    return std::move(out_);
  }

 private:
  RunManifest& m() { return out_.manifest; }

  static double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }

  template <typename F>
  void stage(const std::string& name, F&& body) {
    try {
      body();
    } catch (const std::exception& e) {
      m().failed_stage = name;
      m().failure = e.what();
      throw StageError(name, e.what());
    }
  }

  void load_data() {
    data_ = cfg_.dataset_path.empty() ? generate(cfg_.dataset) : load_dataset(cfg_.dataset_path);
    train_idx_ = data_.indices(Split::train);
    val_idx_ = data_.indices(Split::val);
    test_idx_ = data_.indices(Split::test_unlabeled);
    if (train_idx_.empty() || val_idx_.empty() || test_idx_.empty())
      throw ConfigError("dataset must have non-empty train, val and test splits");
    m().dataset_hash = hex64(data_.content_hash());
    m().class_counts = data_.class_counts;
  }

  F1Report evaluate(const std::vector<std::size_t>& idx, bool tta, PredictionSet* keep = nullptr) {
    PredictionSet p = tta ? tta_predict_set(model_, data_, idx, cfg_.use_meta, cfg_.tta.policy, cfg_.tta.views,
                                            cfg_.seed, "model")
                          : predict(model_, data_, idx, cfg_.use_meta);
    auto truth = data_.gather_labels(idx);
    F1Report r = macro_f1(p.predicted, truth, data_.num_classes(), data_.class_counts);
    if (keep) *keep = std::move(p);
    return r;
  }

  void record(const std::string& stage, std::size_t epoch, double loss) {
    m().epochs.push_back({stage, epoch, loss, evaluate(val_idx_, false).macro});
  }

  void supervise(std::vector<std::size_t> idx, std::vector<std::size_t> labels, std::size_t epochs,
                 const std::string& name) {
    SupervisedTrainer t(cfg_, data_, model_, std::move(idx), std::move(labels), epochs, name);
    while (!t.done()) {
      const double loss = t.run_epoch();
      model_ = t.model();
      record(name, t.epoch(), loss);
    }
  }

  std::vector<std::size_t> ssl_pool() const {
    std::vector<std::size_t> pool = train_idx_;
    pool.insert(pool.end(), test_idx_.begin(), test_idx_.end());
    return pool;
  }

  void moco_pretrain() {
    const auto pool = ssl_pool();
    Model key = model_;
    OptimizerState opt = OptimizerState::create(model_.params(), optimizer_for(cfg_, pool.size(), cfg_.pretrain_epochs));
    for (std::size_t e = 0; e < cfg_.pretrain_epochs; ++e) {
      SeededRng rng = SeededRng::derive(cfg_.seed, "moco", e);
      auto batches = make_unlabeled_batches(data_, pool, cfg_.batch_size, cfg_.use_meta, rng);
      const double loss = moco_pretrain_epoch(model_, key, opt, batches, cfg_.contrastive, cfg_.ssl_augment, rng);
      record("moco_pretrain", e + 1, loss);
    }
  }

  void joint_train() {
    const auto pool = ssl_pool();
    OptimizerState opt =
        OptimizerState::create(model_.params(), supervised_optimizer_for(cfg_, train_idx_.size(), cfg_.epochs));
    SupervisedLoss loss(cfg_.loss, data_.num_classes());
    for (std::size_t e = 0; e < cfg_.epochs; ++e) {
      SeededRng batch_rng = SeededRng::derive(cfg_.seed, "joint_batches", e);
      SeededRng sup_rng = SeededRng::derive(cfg_.seed, "joint_sup", e);
      SeededRng ssl_rng = SeededRng::derive(cfg_.seed, "joint_ssl", e);
      SeededRng loss_rng = SeededRng::derive(cfg_.seed, "joint_loss", e);
      auto labeled = make_labeled_batches(data_, train_idx_, {}, cfg_.batch_size, cfg_.use_meta, batch_rng);
      auto unlabeled = make_unlabeled_batches(data_, pool, cfg_.batch_size, cfg_.use_meta, batch_rng);
      SupervisedObjective objective = [&](const Model& mdl, const Matrix& x, const Matrix& meta,
                                          std::span<const std::size_t> y) { return loss(mdl, x, meta, y, loss_rng); };
      auto stats = simclr_joint_epoch(model_, opt, labeled, unlabeled, cfg_.contrastive, cfg_.joint, cfg_.ssl_augment,
                                      sup_rng, ssl_rng, objective);
      record("joint", e + 1, stats.mean_total);
    }
  }

  void pseudo_round() {
    PredictionSet preds = predict(model_, data_, test_idx_, cfg_.use_meta);
    PseudoLabels pl = pseudo_label_select(preds, cfg_.pseudo_label_fraction);
    std::vector<std::size_t> idx = train_idx_;
    std::vector<std::size_t> labels = data_.gather_labels(train_idx_);
    idx.insert(idx.end(), pl.sample_ids.begin(), pl.sample_ids.end());
    labels.insert(labels.end(), pl.labels.begin(), pl.labels.end());
    m().pseudo_added = pl.sample_ids.size();
    supervise(std::move(idx), std::move(labels), cfg_.pseudo_epochs, "pseudo");
  }

  void persist() {
    if (cfg_.output_dir.empty()) return;
    const std::filesystem::path dir(cfg_.output_dir);
    Checkpoint ck;
    ck.put_params("model:", model_.params());
    ck.config_echo = run_config_to_json(cfg_).dump();
    save_checkpoint(ck, dir / "checkpoint.bin");
    save_prediction_set(out_.test_predictions, dir / "predictions.csv");
    save_manifest(m(), dir / "manifest.json");
  }

  const RunConfig& cfg_;
  Dataset data_;
  Model model_;
  std::vector<std::size_t> train_idx_, val_idx_, test_idx_;
  RunOutputs out_;
};

}  // namespace

RunOutputs run_pipeline(const RunConfig& cfg) { return Pipeline(cfg).execute(); }

RunManifest run(const RunConfig& cfg) { return run_pipeline(cfg).manifest; }

// ---------------------------------------------------------------------------

namespace {

const char* kAblationHeader =
    "trainer,loss,batch_size,accumulate_steps,epochs,pseudo_fraction,use_meta,tta_views,seed,dataset_hash,macro_f1,"
    "head_f1,tail_f1,conflict";

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

Reports emit_reports(const std::vector<RunManifest>& manifests) {
  if (manifests.empty()) throw ConfigError("report: need at least one manifest");
  Reports r;
  std::ostringstream os;
  os << kAblationHeader << '\n';
  const std::string& ref_hash = manifests.front().dataset_hash;
  for (const auto& mf : manifests) {
    RunConfig c = run_config_from_json(mf.config);
    const bool conflict = mf.dataset_hash != ref_hash;
    r.dataset_conflict = r.dataset_conflict || conflict;
    os << to_string(c.trainer) << ',' << to_string(c.loss.kind) << ',' << c.batch_size << ',' << c.accumulate_steps
       << ',' << c.epochs << ',' << fmt(c.pseudo_label_fraction) << ',' << (c.use_meta ? 1 : 0) << ','
       << c.tta.views << ',' << c.seed << ',' << mf.dataset_hash << ',' << fmt(mf.final_test.macro) << ','
       << fmt(mf.final_test.head_macro) << ',' << fmt(mf.final_test.tail_macro) << ',' << (conflict ? 1 : 0)
       << '\n';
  }
  r.ablation_csv = os.str();

  std::ostringstream hist;
  hist << "class,count\n";
  const auto& counts = manifests.front().class_counts;
  for (std::size_t c = 0; c < counts.size(); ++c) hist << c << ',' << counts[c] << '\n';
  r.histogram_csv = hist.str();
  return r;
}

std::vector<AblationRow> parse_ablation_csv(const std::string& csv) {
  std::stringstream in(csv);
  std::string line;
  if (!std::getline(in, line) || line != kAblationHeader) throw ConfigError("ablation csv: unexpected header");
  std::vector<AblationRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 14) throw ConfigError("ablation csv: expected 14 columns");
    try {
      AblationRow r;
      r.trainer = f[0];
      r.loss = f[1];
      r.batch_size = std::stoull(f[2]);
      r.accumulate_steps = std::stoull(f[3]);
      r.epochs = std::stoull(f[4]);
      r.pseudo_fraction = std::stod(f[5]);
      r.use_meta = f[6] == "1";
      r.tta_views = std::stoull(f[7]);
      r.seed = std::stoull(f[8]);
      r.dataset_hash = f[9];
      r.macro_f1 = std::stod(f[10]);
      r.head_f1 = std::stod(f[11]);
      r.tail_f1 = std::stod(f[12]);
      r.conflict = f[13] == "1";
      rows.push_back(std::move(r));
    } catch (const std::exception&) {
      throw ConfigError("ablation csv: unparsable row: " + line);
    }
  }
  return rows;
}

}  // namespace fgvc
