// Command-line front end: dataset generation, training, evaluation, TTA,
// pseudo labelling, ensembling, gradient checks and reports.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fgvc/gradcheck.hpp"
#include "fgvc/harness.hpp"

namespace {

using namespace fgvc;

// FGVC_VERBOSITY: 0 = errors only, 1 = summaries (default), 2 = per-epoch detail.
int verbosity() {
  static const int level = [] {
    const char* v = std::getenv("FGVC_VERBOSITY");
    if (!v || !*v) return 1;
    const std::string s(v);
    if (s == "quiet") return 0;
    if (s == "info") return 1;
    if (s == "debug") return 2;
    try {
      return std::stoi(s);
    } catch (const std::exception&) {
      return 1;
    }
  }();
  return level;
}

void info(const std::string& msg) {
  if (verbosity() >= 1) std::cout << msg << '\n';
}

void detail(const std::string& msg) {
  if (verbosity() >= 2) std::cout << msg << '\n';
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Rebuilds the trained model of a `train` output from its checkpoint.
struct LoadedModel {
  RunConfig config;
  Model model;
};

LoadedModel load_trained(const std::filesystem::path& ckpt_path, const Dataset& data) {
  Checkpoint ck = load_checkpoint(ckpt_path);
  LoadedModel out;
  out.config = run_config_from_json(nlohmann::json::parse(ck.config_echo));
  out.model = Model::from_params(model_config_for(out.config, data), ck.get_params("model:"));
  return out;
}

F1Report score(const PredictionSet& p, const Dataset& data) {
  return macro_f1(p.predicted, data.gather_labels(p.sample_ids), data.num_classes(), data.class_counts);
}

void print_f1(const std::string& label, const F1Report& r) {
  info(label + " macro_f1=" + fmt(r.macro) + " head=" + fmt(r.head_macro) + " tail=" + fmt(r.tail_macro));
}

std::vector<std::size_t> split_indices(const Dataset& data, const std::string& split) {
  return data.indices(split_from_string(split));
}

// Runs one subcommand body, turning failures into a stage-named diagnostic.
int guarded(const std::string& stage, const std::function<void()>& body) {
  try {
    body();
    return 0;
  } catch (const StageError& e) {
    std::cerr << "error: " << e.what() << '\n';
  } catch (const std::exception& e) {
    std::cerr << "error: stage '" << stage << "' failed: " << e.what() << '\n';
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fine-grained long-tail classification toolkit"};
  app.require_subcommand(1);

  // generate ------------------------------------------------------------------
  std::string gen_config, gen_out, gen_hist;
  std::uint64_t gen_seed = 0;
  bool gen_seed_set = false;
  auto* gen = app.add_subcommand("generate", "Generate a synthetic dataset");
  gen->add_option("-c,--config", gen_config, "Dataset config JSON (defaults when omitted)");
  gen->add_option("-o,--out", gen_out, "Output dataset file")->required();
  gen->add_option("--seed", gen_seed, "Override the dataset seed")->each([&](const std::string&) { gen_seed_set = true; });
  gen->add_option("--histogram", gen_hist, "Also write the class-count CSV here");

  // train ---------------------------------------------------------------------
  std::string train_config, train_out;
  auto* train = app.add_subcommand("train", "Run the training pipeline from a RunConfig");
  train->add_option("-c,--config", train_config, "RunConfig JSON")->required();
  train->add_option("-o,--out", train_out, "Output directory (overrides the config)");

  // eval / tta ----------------------------------------------------------------
  std::string ev_ckpt, ev_data, ev_out, ev_split = "test-unlabeled";
  std::size_t tta_views = 0;
  auto add_eval_opts = [&](CLI::App* sub) {
    sub->add_option("--checkpoint", ev_ckpt, "checkpoint.bin from train")->required();
    sub->add_option("--data", ev_data, "Dataset file")->required();
    sub->add_option("-o,--out", ev_out, "PredictionSet CSV output");
    sub->add_option("--split", ev_split, "train | val | test-unlabeled");
  };
  auto* eval = app.add_subcommand("eval", "Predict a split with a trained checkpoint");
  add_eval_opts(eval);
  auto* tta = app.add_subcommand("tta", "Predict a split with test-time augmentation");
  add_eval_opts(tta);
  tta->add_option("--views", tta_views, "Number of views (config value when omitted)");

  // pseudo --------------------------------------------------------------------
  std::string ps_preds, ps_data, ps_out;
  double ps_fraction = 0.3;
  auto* pseudo = app.add_subcommand("pseudo", "Append top-ranked pseudo labels to a dataset");
  pseudo->add_option("--predictions", ps_preds, "PredictionSet CSV over unlabeled samples")->required();
  pseudo->add_option("--data", ps_data, "Dataset file")->required();
  pseudo->add_option("--fraction", ps_fraction, "Fraction of predictions to keep")->check(CLI::Range(0.0, 1.0));
  pseudo->add_option("-o,--out", ps_out, "Augmented dataset file")->required();

  // ensemble ------------------------------------------------------------------
  std::vector<std::string> en_inputs;
  std::string en_out, en_data, en_rule = "max_logit";
  bool en_normalize = false;
  auto* ensemble = app.add_subcommand("ensemble", "Fuse PredictionSet files");
  ensemble->add_option("inputs", en_inputs, "PredictionSet CSV files")->required()->expected(1, -1);
  ensemble->add_option("-o,--out", en_out, "Fused PredictionSet CSV");
  ensemble->add_option("--data", en_data, "Dataset file, to score the fused predictions");
  ensemble->add_option("--rule", en_rule, "max_logit | mean_probability");
  ensemble->add_flag("--normalize", en_normalize, "Divide each model's logits by their standard deviation");

  // gradcheck -----------------------------------------------------------------
  std::size_t gc_instances = 100;
  std::uint64_t gc_seed = 7;
  std::string gc_only;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every analytic gradient");
  gradcheck->add_option("-n,--instances", gc_instances, "Random instances per check");
  gradcheck->add_option("--seed", gc_seed, "Base seed");
  gradcheck->add_option("--only", gc_only, "Run a single named check");

  // report --------------------------------------------------------------------
  std::vector<std::string> rp_manifests;
  std::string rp_out = ".";
  auto* report = app.add_subcommand("report", "Ablation and class-count CSVs from manifests");
  report->add_option("manifests", rp_manifests, "manifest.json files")->required()->expected(1, -1);
  report->add_option("-o,--out", rp_out, "Output directory");

  CLI11_PARSE(app, argc, argv);

  if (*gen) {
    return guarded("generate", [&] {
      DatasetConfig cfg;
      if (!gen_config.empty()) cfg = dataset_config_from_json(nlohmann::json::parse(read_file(gen_config)));
      if (gen_seed_set) cfg.seed = gen_seed;
      Dataset d = generate(cfg);
      save_dataset(d, gen_out);
      if (!gen_hist.empty()) write_atomically(gen_hist, class_counts_csv(d));
      info("wrote " + gen_out + " (" + std::to_string(d.size()) + " samples, hash " + [&] {
        char buf[17];
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(d.content_hash()));
        return std::string(buf);
      }() + ")");
    });
  }

  if (*train) {
    return guarded("config", [&] {
      RunConfig cfg = load_run_config(train_config);
      if (!train_out.empty()) cfg.output_dir = train_out;
      if (!cfg.output_dir.empty()) std::filesystem::create_directories(cfg.output_dir);
      RunManifest m = run(cfg);
      for (const auto& e : m.epochs)
        detail(e.stage + " epoch " + std::to_string(e.epoch) + " loss=" + fmt(e.train_loss) +
               " val_macro_f1=" + fmt(e.val_macro_f1));
      print_f1("untrained test", m.untrained_test);
      print_f1("final val", m.final_val);
      print_f1("final test", m.final_test);
      if (!cfg.output_dir.empty()) info("manifest: " + (std::filesystem::path(cfg.output_dir) / "manifest.json").string());
    });
  }

  if (*eval || *tta) {
    const bool with_tta = static_cast<bool>(*tta);
    return guarded(with_tta ? "tta" : "eval", [&] {
      Dataset data = load_dataset(ev_data);
      LoadedModel lm = load_trained(ev_ckpt, data);
      auto idx = split_indices(data, ev_split);
      const std::size_t views = tta_views ? tta_views : lm.config.tta.views;
      PredictionSet p = with_tta ? tta_predict_set(lm.model, data, idx, lm.config.use_meta, lm.config.tta.policy,
                                                   views, lm.config.seed)
                                 : predict(lm.model, data, idx, lm.config.use_meta);
      if (!ev_out.empty()) save_prediction_set(p, ev_out);
      print_f1(ev_split, score(p, data));
    });
  }

  if (*pseudo) {
    return guarded("pseudo", [&] {
      Dataset data = load_dataset(ps_data);
      PredictionSet p = load_prediction_set(ps_preds);
      PseudoLabels pl = pseudo_label_select(p, ps_fraction);
      save_dataset(with_pseudo_labels(data, pl), ps_out);
      info("added " + std::to_string(pl.sample_ids.size()) + " pseudo-labelled samples");
    });
  }

  if (*ensemble) {
    return guarded("ensemble", [&] {
      std::vector<PredictionSet> sets;
      for (const auto& f : en_inputs) sets.push_back(load_prediction_set(f));
      PredictionSet fused;
      if (en_rule == "max_logit")
        fused = ensemble_max_logit(sets, en_normalize);
      else if (en_rule == "mean_probability")
        fused = ensemble_mean_probability(sets);
      else
        throw ConfigError("unknown ensemble rule: " + en_rule);
      if (!en_out.empty()) save_prediction_set(fused, en_out);
      if (!en_data.empty()) {
        Dataset data = load_dataset(en_data);
        for (std::size_t i = 0; i < sets.size(); ++i) print_f1(en_inputs[i], score(sets[i], data));
        print_f1("ensemble", score(fused, data));
      }
    });
  }

  if (*gradcheck) {
    int failed = 0;
    const int rc = guarded("gradcheck", [&] {
      std::vector<GradcheckCase> cases;
      if (gc_only.empty())
        cases = run_gradcheck_suite(gc_instances, gc_seed);
      else
        cases.push_back(run_gradcheck(gc_only, gc_instances, gc_seed));
      double total = 0.0;
      for (const auto& c : cases) {
        total += c.seconds;
        if (!c.passed()) ++failed;
        char line[160];
        std::snprintf(line, sizeof line, "%-26s %s  max_rel_err=%.3e  worst=%zu  n=%zu  %.2fs", c.name.c_str(),
                      c.passed() ? "ok  " : "FAIL", c.max_rel_error, c.worst_instance, c.instances, c.seconds);
        if (verbosity() >= 1 || !c.passed()) std::cout << line << '\n';
      }
      info("total " + fmt(total) + "s");
    });
    if (rc) return rc;
    if (failed) std::cerr << "error: stage 'gradcheck' failed: " << failed << " check(s) above tolerance\n";
    return failed ? 1 : 0;
  }

  if (*report) {
    return guarded("report", [&] {
      std::vector<RunManifest> ms;
      for (const auto& f : rp_manifests) ms.push_back(load_manifest(f));
      Reports r = emit_reports(ms);
      const std::filesystem::path dir(rp_out);
      std::filesystem::create_directories(dir);
      write_atomically(dir / "ablation.csv", r.ablation_csv);
      write_atomically(dir / "class_histogram.csv", r.histogram_csv);
      info("wrote " + (dir / "ablation.csv").string() + " and " + (dir / "class_histogram.csv").string());
      if (r.dataset_conflict) std::cerr << "warning: manifests disagree on the dataset hash (flagged in the CSV)\n";
    });
  }
  return 0;
}
