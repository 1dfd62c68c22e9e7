#include "fgvc/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace fgvc {

using nlohmann::json;

void DatasetConfig::validate() const {
  if (num_classes() < 2) throw ConfigError("dataset: need at least 2 classes");
  if (num_meta_categories < 1) throw ConfigError("dataset: need at least 1 meta category");
  if (head_count < 1) throw ConfigError("dataset: head_count must be >= 1");
  if (!(imbalance_ratio > 0.0 && imbalance_ratio <= 1.0))
    throw ConfigError("dataset: imbalance_ratio must lie in (0, 1]");
  if (!(intra_class_noise >= 0.0)) throw ConfigError("dataset: intra_class_noise must be >= 0");
  if (!(inter_subclass_gap > 0.0)) throw ConfigError("dataset: inter_subclass_gap must be > 0");
  if (!(meta_separation > 0.0)) throw ConfigError("dataset: meta_separation must be > 0");
  if (!(inter_subclass_gap < meta_separation))
    throw ConfigError("dataset: infeasible geometry, need inter_subclass_gap < meta_separation");
  if (!(meta_fidelity >= 0.0 && meta_fidelity <= 1.0))
    throw ConfigError("dataset: meta_fidelity must lie in [0, 1]");
  if (!(unlabeled_fraction >= 0.0 && unlabeled_fraction < 1.0))
    throw ConfigError("dataset: unlabeled_fraction must lie in [0, 1)");
  if (feature_dim <= num_meta_categories)
    throw ConfigError("dataset: feature_dim must exceed num_meta_categories");
}

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test_unlabeled: return "test-unlabeled";
  }
  return "?";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test-unlabeled") return Split::test_unlabeled;
  throw ConfigError("unknown split tag: " + s);
}

std::vector<std::size_t> Dataset::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < split.size(); ++i)
    if (split[i] == s) out.push_back(i);
  return out;
}

Matrix Dataset::meta_onehot(std::span<const std::size_t> idx, bool enabled) const {
  Matrix m(idx.size(), meta_dim());
  if (!enabled) return m;
  for (std::size_t r = 0; r < idx.size(); ++r) m(r, meta[idx[r]]) = 1.0;
  return m;
}

Matrix Dataset::gather_features(std::span<const std::size_t> idx) const {
  Matrix m(idx.size(), features.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    auto src = features.row(idx[r]);
    std::copy(src.begin(), src.end(), m.row(r).begin());
  }
  return m;
}

std::vector<std::size_t> Dataset::gather_labels(std::span<const std::size_t> idx) const {
  std::vector<std::size_t> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(labels[i]);
  return out;
}

std::uint64_t Dataset::content_hash() const {
  std::uint64_t h = fnv1a64("fgvc-dataset");
  auto mix = [&h](const void* p, std::size_t n) {
    h = fnv1a64(std::string_view(static_cast<const char*>(p), n), h);
  };
  const std::uint64_t dims[2] = {features.rows(), features.cols()};
  mix(dims, sizeof(dims));
  mix(features.data().data(), features.size() * sizeof(double));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::uint64_t rec[3] = {labels[i], meta[i], static_cast<std::uint64_t>(split[i])};
    mix(rec, sizeof(rec));
  }
  return h;
}

std::vector<std::size_t> class_count_schedule(std::size_t num_classes, std::size_t head, double ratio) {
  if (num_classes < 2) throw ConfigError("class_count_schedule: need at least 2 classes");
  if (head < 1) throw ConfigError("class_count_schedule: head must be >= 1");
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("class_count_schedule: ratio must lie in (0, 1]");
  std::vector<std::size_t> counts(num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) {
    const double e = static_cast<double>(c) / static_cast<double>(num_classes - 1);
    const double n = std::round(static_cast<double>(head) * std::pow(ratio, e));
    counts[c] = std::max<std::size_t>(1, static_cast<std::size_t>(n));
  }
  return counts;
}

namespace {

std::vector<double> gaussian_vector(std::size_t dim, SeededRng& rng) {
  std::vector<double> v(dim);
  for (double& x : v) x = rng.next_gaussian();
  return v;
}

void project_out(std::vector<double>& v, const std::vector<std::vector<double>>& basis) {
  for (const auto& b : basis) {
    const double d = dot(v, b);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= d * b[i];
  }
}

void normalize(std::vector<double>& v) {
  const double n = norm2(v);
  for (double& x : v) x /= n;
}

}  // namespace

Dataset generate(const DatasetConfig& cfg) {
  cfg.validate();
  const std::size_t C = cfg.num_classes();
  const std::size_t D = cfg.feature_dim;

  // Meta centers sit on an orthonormal frame scaled so every pair is exactly
  // meta_separation apart; subclass offsets live in the orthogonal complement.
  SeededRng geo = SeededRng::derive(cfg.seed, "centers");
  std::vector<std::vector<double>> frame;
  while (frame.size() < cfg.num_meta_categories) {
    auto v = gaussian_vector(D, geo);
    project_out(v, frame);
    if (norm2(v) < 1e-6) continue;
    normalize(v);
    frame.push_back(std::move(v));
  }
  const double radius = cfg.meta_separation / std::sqrt(2.0);

  Dataset d;
  d.config = cfg;
  d.class_centers = Matrix(C, D);
  for (std::size_t c = 0; c < C; ++c) {
    std::vector<double> off;
    do {
      off = gaussian_vector(D, geo);
      project_out(off, frame);
    } while (norm2(off) < 1e-6);
    normalize(off);
    const auto& mc = frame[cfg.meta_of_class(c)];
    for (std::size_t k = 0; k < D; ++k)
      d.class_centers(c, k) = radius * mc[k] + cfg.inter_subclass_gap * off[k];
  }

  d.class_counts = class_count_schedule(C, cfg.head_count, cfg.imbalance_ratio);
  const auto n_test = static_cast<std::size_t>(
      std::round(cfg.unlabeled_fraction * static_cast<double>(cfg.eval_per_class)));
  const std::size_t n_val = cfg.eval_per_class - n_test;

  std::size_t total = 0;
  for (auto n : d.class_counts) total += n + cfg.eval_per_class;
  d.features = Matrix(total, D);
  d.labels.reserve(total);
  d.meta.reserve(total);
  d.split.reserve(total);

  SeededRng noise = SeededRng::derive(cfg.seed, "samples");
  SeededRng meta_rng = SeededRng::derive(cfg.seed, "meta");
  std::size_t row = 0;
  auto emit = [&](std::size_t c, Split s) {
    auto dst = d.features.row(row++);
    auto ctr = d.class_centers.row(c);
    for (std::size_t k = 0; k < D; ++k) {
      const double eps = cfg.intra_class_noise > 0.0 ? cfg.intra_class_noise * noise.next_gaussian() : 0.0;
      dst[k] = ctr[k] + eps;
    }
    const std::size_t true_meta = cfg.meta_of_class(c);
    std::size_t observed = true_meta;
    if (cfg.num_meta_categories > 1 && meta_rng.next_uniform() >= cfg.meta_fidelity) {
      observed = meta_rng.next_below(cfg.num_meta_categories - 1);
      if (observed >= true_meta) ++observed;
    }
    d.labels.push_back(c);
    d.meta.push_back(observed);
    d.split.push_back(s);
  };
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < d.class_counts[c]; ++i) emit(c, Split::train);
    for (std::size_t i = 0; i < n_val; ++i) emit(c, Split::val);
    for (std::size_t i = 0; i < n_test; ++i) emit(c, Split::test_unlabeled);
  }
  return d;
}

bool AugmentPolicy::is_identity() const {
  return jitter_sigma == 0.0 && mask_prob == 0.0 && scale_lo == 1.0 && scale_hi == 1.0 &&
         crop_shift_sigma == 0.0;
}

void AugmentPolicy::validate() const {
  if (!(jitter_sigma >= 0.0)) throw ConfigError("augment: jitter_sigma must be >= 0");
  if (!(mask_prob >= 0.0 && mask_prob <= 1.0)) throw ConfigError("augment: mask_prob must lie in [0, 1]");
  if (!(scale_lo > 0.0 && scale_lo <= scale_hi)) throw ConfigError("augment: need 0 < scale_lo <= scale_hi");
  if (!(crop_shift_sigma >= 0.0)) throw ConfigError("augment: crop_shift_sigma must be >= 0");
}

std::vector<double> augment(std::span<const double> x, const AugmentPolicy& policy, SeededRng& rng) {
  std::vector<double> out(x.begin(), x.end());
  if (policy.scale_lo != 1.0 || policy.scale_hi != 1.0) {
    const double s = policy.scale_lo + (policy.scale_hi - policy.scale_lo) * rng.next_uniform();
    for (double& v : out) v *= s;
  }
  if (policy.crop_shift_sigma > 0.0) {
    const double shift = policy.crop_shift_sigma * rng.next_gaussian();
    for (double& v : out) v += shift;
  }
  if (policy.jitter_sigma > 0.0) {
    for (double& v : out) v += policy.jitter_sigma * rng.next_gaussian();
  }
  if (policy.mask_prob > 0.0) {
    for (double& v : out)
      if (rng.next_uniform() < policy.mask_prob) v = 0.0;
  }
  return out;
}

Matrix augment_rows(const Matrix& x, const AugmentPolicy& policy, SeededRng& rng) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto v = augment(x.row(r), policy, rng);
    std::copy(v.begin(), v.end(), out.row(r).begin());
  }
  return out;
}

Matrix one_hot(std::span<const std::size_t> labels, std::size_t num_classes) {
  Matrix m(labels.size(), num_classes);
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] >= num_classes) throw NumericError("one_hot: label out of range");
    m(r, labels[r]) = 1.0;
  }
  return m;
}

MixupBatch mixup_with_lambda(const Matrix& xa, std::span<const std::size_t> ya, const Matrix& xb,
                             std::span<const std::size_t> yb, std::size_t num_classes, double lambda) {
  if (!xa.same_shape(xb) || ya.size() != xa.rows() || yb.size() != xb.rows())
    throw NumericError("mixup: batch shapes differ");
  MixupBatch out{Matrix(xa.rows(), xa.cols()), Matrix(xa.rows(), num_classes), lambda};
  if (lambda == 1.0) {
    out.features = xa;
    out.soft_targets = one_hot(ya, num_classes);
    return out;
  }
  for (std::size_t i = 0; i < xa.size(); ++i)
    out.features.data()[i] = lambda * xa.data()[i] + (1.0 - lambda) * xb.data()[i];
  for (std::size_t r = 0; r < ya.size(); ++r) {
    out.soft_targets(r, ya[r]) += lambda;
    out.soft_targets(r, yb[r]) += 1.0 - lambda;
  }
  return out;
}

MixupBatch mixup(const Matrix& xa, std::span<const std::size_t> ya, const Matrix& xb,
                 std::span<const std::size_t> yb, std::size_t num_classes, double alpha, SeededRng& rng) {
  if (!(alpha > 0.0)) throw ConfigError("mixup: alpha must be positive");
  return mixup_with_lambda(xa, ya, xb, yb, num_classes, rng.next_beta(alpha, alpha));
}

namespace {

json config_to_json(const DatasetConfig& c) {
  return json{{"num_meta_categories", c.num_meta_categories},
              {"subclasses_per_meta", c.subclasses_per_meta},
              {"feature_dim", c.feature_dim},
              {"head_count", c.head_count},
              {"imbalance_ratio", c.imbalance_ratio},
              {"intra_class_noise", c.intra_class_noise},
              {"inter_subclass_gap", c.inter_subclass_gap},
              {"meta_separation", c.meta_separation},
              {"meta_fidelity", c.meta_fidelity},
              {"unlabeled_fraction", c.unlabeled_fraction},
              {"eval_per_class", c.eval_per_class},
              {"seed", c.seed}};
}

DatasetConfig config_from_json(const json& j) {
  DatasetConfig c;
  c.num_meta_categories = j.value("num_meta_categories", c.num_meta_categories);
  c.subclasses_per_meta = j.value("subclasses_per_meta", c.subclasses_per_meta);
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  c.head_count = j.value("head_count", c.head_count);
  c.imbalance_ratio = j.value("imbalance_ratio", c.imbalance_ratio);
  c.intra_class_noise = j.value("intra_class_noise", c.intra_class_noise);
  c.inter_subclass_gap = j.value("inter_subclass_gap", c.inter_subclass_gap);
  c.meta_separation = j.value("meta_separation", c.meta_separation);
  c.meta_fidelity = j.value("meta_fidelity", c.meta_fidelity);
  c.unlabeled_fraction = j.value("unlabeled_fraction", c.unlabeled_fraction);
  c.eval_per_class = j.value("eval_per_class", c.eval_per_class);
  c.seed = j.value("seed", c.seed);
  return c;
}

std::vector<std::vector<double>> rows_of(const Matrix& m) {
  std::vector<std::vector<double>> out(m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) out[r].assign(m.row(r).begin(), m.row(r).end());
  return out;
}

}  // namespace

json dataset_config_to_json(const DatasetConfig& c) { return config_to_json(c); }
DatasetConfig dataset_config_from_json(const json& j) { return config_from_json(j); }

std::string dataset_to_text(const Dataset& d) {
  json j;
  j["format"] = "fgvc-dataset";
  j["version"] = 1;
  j["config"] = config_to_json(d.config);
  j["num_classes"] = d.num_classes();
  j["class_counts"] = d.class_counts;
  j["class_centers"] = rows_of(d.class_centers);
  j["features"] = rows_of(d.features);
  j["labels"] = d.labels;
  j["meta"] = d.meta;
  std::vector<std::string> split;
  for (auto s : d.split) split.push_back(to_string(s));
  j["split"] = split;
  return j.dump(1);
}

Dataset dataset_from_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("dataset file: ") + e.what());
  }
  if (j.value("format", "") != "fgvc-dataset") throw ConfigError("dataset file: wrong format tag");
  if (j.value("version", 0) != 1) throw ConfigError("dataset file: unsupported version");
  Dataset d;
  d.config = config_from_json(j.at("config"));
  d.class_counts = j.at("class_counts").get<std::vector<std::size_t>>();
  d.class_centers = Matrix::from_rows(j.at("class_centers").get<std::vector<std::vector<double>>>());
  d.features = Matrix::from_rows(j.at("features").get<std::vector<std::vector<double>>>());
  d.labels = j.at("labels").get<std::vector<std::size_t>>();
  d.meta = j.at("meta").get<std::vector<std::size_t>>();
  for (const auto& s : j.at("split")) d.split.push_back(split_from_string(s.get<std::string>()));
  if (d.labels.size() != d.features.rows() || d.meta.size() != d.labels.size() ||
      d.split.size() != d.labels.size())
    throw ConfigError("dataset file: per-sample arrays disagree in length");
  return d;
}

void save_dataset(const Dataset& d, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write dataset file " + path.string());
  out << dataset_to_text(d);
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read dataset file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return dataset_from_text(ss.str());
}

std::string class_counts_csv(const Dataset& d) {
  std::ostringstream os;
  os << "class,meta,count\n";
  for (std::size_t c = 0; c < d.class_counts.size(); ++c)
    os << c << ',' << d.config.meta_of_class(c) << ',' << d.class_counts[c] << '\n';
  return os.str();
}

}  // namespace fgvc
