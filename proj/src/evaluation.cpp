#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "fgvc/harness.hpp"

namespace fgvc {

void PredictionSet::refresh_predictions() {
  predicted.resize(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) predicted[r] = argmax(logits.row(r));
}

namespace {

std::string fmt_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

std::string prediction_set_to_csv(const PredictionSet& p) {
  std::ostringstream os;
  os << "sample_id";
  for (std::size_t c = 0; c < p.num_classes(); ++c) os << ",logit_" << c;
  os << ",pred\n";
  for (std::size_t r = 0; r < p.size(); ++r) {
    os << p.sample_ids[r];
    for (double v : p.logits.row(r)) os << ',' << fmt_real(v);
    os << ',' << p.predicted[r] << '\n';
  }
  return os.str();
}

PredictionSet prediction_set_from_csv(const std::string& csv, const std::string& model_id) {
  std::stringstream in(csv);
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("prediction csv: missing header");
  const auto header = split_csv_line(line);
  if (header.size() < 3 || header.front() != "sample_id" || header.back() != "pred")
    throw ConfigError("prediction csv: header must be sample_id,logit_0..logit_{C-1},pred");
  const std::size_t C = header.size() - 2;
  for (std::size_t c = 0; c < C; ++c)
    if (header[c + 1] != "logit_" + std::to_string(c)) throw ConfigError("prediction csv: bad column " + header[c + 1]);

  PredictionSet p;
  p.model_id = model_id;
  std::vector<double> data;
  std::vector<std::size_t> preds;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != C + 2) throw ConfigError("prediction csv: wrong column count on line " + std::to_string(lineno));
    try {
      p.sample_ids.push_back(std::stoull(cells[0]));
      for (std::size_t c = 0; c < C; ++c) data.push_back(std::stod(cells[c + 1]));
      preds.push_back(std::stoull(cells.back()));
    } catch (const std::exception&) {
      throw ConfigError("prediction csv: unparsable value on line " + std::to_string(lineno));
    }
  }
  p.logits = Matrix(p.sample_ids.size(), C, std::move(data));
  p.refresh_predictions();
  if (p.predicted != preds) throw ConfigError("prediction csv: pred column disagrees with argmax of logits");
  return p;
}

void save_prediction_set(const PredictionSet& p, const std::filesystem::path& path) {
  write_atomically(path, prediction_set_to_csv(p));
}

PredictionSet load_prediction_set(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read prediction file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return prediction_set_from_csv(ss.str(), path.stem().string());
}

F1Report macro_f1(std::span<const std::size_t> predicted, std::span<const std::size_t> truth,
                  std::size_t num_classes, std::span<const std::size_t> train_counts) {
  if (truth.empty()) throw NumericError("macro_f1: empty evaluation set");
  if (predicted.size() != truth.size()) throw NumericError("macro_f1: prediction/truth length mismatch");
  std::vector<std::size_t> tp(num_classes, 0), fp(num_classes, 0), fn(num_classes, 0);
  F1Report rep;
  rep.present.assign(num_classes, false);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= num_classes || predicted[i] >= num_classes) throw NumericError("macro_f1: label outside class space");
    rep.present[truth[i]] = true;
    if (predicted[i] == truth[i]) {
      ++tp[truth[i]];
    } else {
      ++fp[predicted[i]];
      ++fn[truth[i]];
    }
  }
  rep.per_class.assign(num_classes, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (!rep.present[c]) continue;
    const double denom = 2.0 * tp[c] + fp[c] + fn[c];
    rep.per_class[c] = denom == 0.0 ? 0.0 : 2.0 * tp[c] / denom;
  }

  rep.is_head.assign(num_classes, false);
  if (!train_counts.empty()) {
    if (train_counts.size() != num_classes) throw NumericError("macro_f1: train_counts has wrong length");
    std::vector<std::size_t> sorted(train_counts.begin(), train_counts.end());
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    const double median = n % 2 ? static_cast<double>(sorted[n / 2])
                                : 0.5 * static_cast<double>(sorted[n / 2 - 1] + sorted[n / 2]);
    for (std::size_t c = 0; c < num_classes; ++c) rep.is_head[c] = static_cast<double>(train_counts[c]) > median;
  }

  auto mean_over = [&](auto pick) {
    double s = 0.0;
    std::size_t k = 0;
    for (std::size_t c = 0; c < num_classes; ++c)
      if (rep.present[c] && pick(c)) {
        s += rep.per_class[c];
        ++k;
      }
    return k ? s / static_cast<double>(k) : std::numeric_limits<double>::quiet_NaN();
  };
  rep.macro = mean_over([](std::size_t) { return true; });
  if (train_counts.empty()) {
    rep.head_macro = rep.tail_macro = std::numeric_limits<double>::quiet_NaN();
  } else {
    rep.head_macro = mean_over([&](std::size_t c) { return rep.is_head[c]; });
    rep.tail_macro = mean_over([&](std::size_t c) { return !rep.is_head[c]; });
  }
  return rep;
}

PredictionSet predict(const Model& model, const Dataset& data, std::span<const std::size_t> idx, bool use_meta,
                      const std::string& model_id) {
  PredictionSet p;
  p.model_id = model_id;
  p.sample_ids.assign(idx.begin(), idx.end());
  const Matrix x = data.gather_features(idx);
  const Matrix meta = data.meta_onehot(idx, use_meta);
  p.logits = classify(model, encode(model, x, meta, nullptr));
  p.refresh_predictions();
  return p;
}

std::vector<double> tta_predict(const Model& model, std::span<const double> sample, std::span<const double> meta,
                                const AugmentPolicy& policy, std::size_t num_views, std::uint64_t seed,
                                std::size_t sample_id) {
  if (num_views < 1) throw ConfigError("tta_predict: num_views must be >= 1");
  Matrix views(num_views, sample.size());
  Matrix metas(num_views, meta.size());
  SeededRng rng = SeededRng::derive(seed, "tta", sample_id);
  for (std::size_t v = 0; v < num_views; ++v) {
    if (v == 0) {
      std::copy(sample.begin(), sample.end(), views.row(0).begin());
    } else {
      auto a = augment(sample, policy, rng);
      std::copy(a.begin(), a.end(), views.row(v).begin());
    }
    std::copy(meta.begin(), meta.end(), metas.row(v).begin());
  }
  const Matrix probs = softmax_rows(classify(model, encode(model, views, metas, nullptr)));
  std::vector<double> mean(probs.cols(), 0.0);
  for (std::size_t v = 0; v < num_views; ++v)
    for (std::size_t c = 0; c < probs.cols(); ++c) mean[c] += probs(v, c);
  for (double& m : mean) m /= static_cast<double>(num_views);
  return mean;
}

PredictionSet tta_predict_set(const Model& model, const Dataset& data, std::span<const std::size_t> idx,
                              bool use_meta, const AugmentPolicy& policy, std::size_t num_views, std::uint64_t seed,
                              const std::string& model_id) {
  PredictionSet p;
  p.model_id = model_id;
  p.sample_ids.assign(idx.begin(), idx.end());
  p.logits = Matrix(idx.size(), data.num_classes());
  const Matrix meta = data.meta_onehot(idx, use_meta);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    auto probs = tta_predict(model, data.features.row(idx[r]), meta.row(r), policy, num_views, seed, idx[r]);
    for (std::size_t c = 0; c < probs.size(); ++c) p.logits(r, c) = std::log(std::max(probs[c], 1e-300));
  }
  p.refresh_predictions();
  return p;
}

PseudoLabels pseudo_label_select(const PredictionSet& preds, double fraction) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw ConfigError("pseudo_label_select: fraction must lie in [0, 1]");
  const std::size_t n = preds.size();
  const auto k = std::min<std::size_t>(n, static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9)));
  std::vector<double> score(n);
  for (std::size_t r = 0; r < n; ++r) {
    auto row = preds.logits.row(r);
    score[r] = *std::max_element(row.begin(), row.end());
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  PseudoLabels out;
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t r = order[i];
    out.sample_ids.push_back(preds.sample_ids[r]);
    out.labels.push_back(argmax(preds.logits.row(r)));
  }
  return out;
}

Dataset with_pseudo_labels(const Dataset& data, const PseudoLabels& pseudo) {
  if (pseudo.sample_ids.size() != pseudo.labels.size()) throw ConfigError("pseudo labels: ids and labels differ in length");
  Dataset out = data;
  const std::size_t n0 = data.size();
  const std::size_t d = data.features.cols();
  std::vector<double> feats(data.features.data());
  for (std::size_t k = 0; k < pseudo.sample_ids.size(); ++k) {
    const std::size_t id = pseudo.sample_ids[k];
    if (id >= n0) throw ConfigError("pseudo labels: sample id " + std::to_string(id) + " is out of range");
    if (pseudo.labels[k] >= data.num_classes()) throw ConfigError("pseudo labels: label outside class space");
    feats.insert(feats.end(), data.features.row(id).begin(), data.features.row(id).end());
    out.labels.push_back(pseudo.labels[k]);
    out.meta.push_back(data.meta[id]);
    out.split.push_back(Split::train);
    ++out.class_counts[pseudo.labels[k]];
  }
  out.features = Matrix(out.labels.size(), d, std::move(feats));
  return out;
}

namespace {

void check_compatible(const std::vector<PredictionSet>& sets) {
  if (sets.empty()) throw NumericError("ensemble: no prediction sets");
  for (const auto& s : sets) {
    if (s.sample_ids != sets.front().sample_ids) throw NumericError("ensemble: prediction sets cover different samples");
    if (s.num_classes() != sets.front().num_classes()) throw NumericError("ensemble: class spaces differ");
  }
}

}  // namespace

PredictionSet ensemble_max_logit(const std::vector<PredictionSet>& sets, bool normalize) {
  check_compatible(sets);
  std::vector<double> scale(sets.size(), 1.0);
  if (normalize) {
    for (std::size_t m = 0; m < sets.size(); ++m) {
      const auto& d = sets[m].logits.data();
      const double mean = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
      double var = 0.0;
      for (double v : d) var += (v - mean) * (v - mean);
      const double sd = std::sqrt(var / static_cast<double>(d.size()));
      if (sd > 0.0) scale[m] = 1.0 / sd;
    }
  }
  PredictionSet out;
  out.model_id = "ensemble_max_logit";
  out.sample_ids = sets.front().sample_ids;
  out.logits = Matrix(out.sample_ids.size(), sets.front().num_classes());
  out.predicted.resize(out.sample_ids.size());
  for (std::size_t r = 0; r < out.sample_ids.size(); ++r) {
    double best = -std::numeric_limits<double>::infinity();
    std::size_t best_model = 0;
    std::size_t best_class = 0;
    for (std::size_t m = 0; m < sets.size(); ++m) {
      auto row = sets[m].logits.row(r);
      for (std::size_t c = 0; c < row.size(); ++c) {
        const double v = row[c] * scale[m];
        if (v > best) {
          best = v;
          best_model = m;
          best_class = c;
        }
      }
    }
    // The fused row is the winning model's (scaled) logits.
    auto src = sets[best_model].logits.row(r);
    for (std::size_t c = 0; c < src.size(); ++c) out.logits(r, c) = src[c] * scale[best_model];
    out.predicted[r] = best_class;
  }
  return out;
}

PredictionSet ensemble_mean_probability(const std::vector<PredictionSet>& sets) {
  check_compatible(sets);
  PredictionSet out;
  out.model_id = "ensemble_mean_probability";
  out.sample_ids = sets.front().sample_ids;
  Matrix mean(out.sample_ids.size(), sets.front().num_classes());
  for (const auto& s : sets) mean += softmax_rows(s.logits);
  for (double& v : mean.data()) v = std::log(std::max(v / static_cast<double>(sets.size()), 1e-300));
  out.logits = std::move(mean);
  out.refresh_predictions();
  return out;
}

}  // namespace fgvc
