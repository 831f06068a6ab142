#pragma once

// Long-tailed train/test construction for known/novel category discovery.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bacon/error.hpp"
#include "bacon/random.hpp"

namespace bacon {

struct Sample {
  std::int64_t id = 0;
  Eigen::VectorXd features;
  std::optional<int> label;
};

using Pool = std::vector<Sample>;

enum class ProfileKind { kExponential, kPareto };

struct ImbalanceProfile {
  ProfileKind kind = ProfileKind::kExponential;
  double rho = 1.0;  // largest / smallest class size
  int n_max = 1;
};

// Training split. Labeled samples carry a class < num_known; unlabeled ones
// carry no label. Classes are re-indexed so that known classes occupy
// [0, num_known) and novel classes [num_known, num_classes), each group in
// the order of the source class index.
struct DatasetSplit {
  Pool labeled;
  Pool unlabeled;
  int num_known = 0;
  int num_classes = 0;
  std::vector<int> class_map;  // source class -> split class (empty if identity)

  // Evaluation-only ground truth. Training code never reads these fields.
  std::vector<int> unlabeled_truth;  // aligned with `unlabeled`, may be empty
  std::vector<int> true_counts;      // per split class, labeled + unlabeled

  std::size_t size() const { return labeled.size() + unlabeled.size(); }
};

inline const char* to_string(ProfileKind k) {
  return k == ProfileKind::kExponential ? "exponential" : "pareto";
}

inline ProfileKind parse_profile_kind(const std::string& s) {
  if (s == "exponential" || s == "exp") return ProfileKind::kExponential;
  if (s == "pareto") return ProfileKind::kPareto;
  throw InvalidArgument("unknown imbalance profile '" + s + "'");
}

/// Per-class instance counts for a long-tailed profile, non-increasing in the
/// class index with counts[0] == n_max and counts[C-1] ~= n_max / rho.
///
/// Exponential: n_max * rho^(-c/(C-1)).
/// Pareto:      n_max * (c+1)^(-log(rho)/log(C)), a power law through the same
///              two endpoints.
/// Values are rounded half away from zero and floored at 1.
inline std::vector<int> make_longtail_counts(int num_classes, const ImbalanceProfile& profile) {
  detail::require(num_classes >= 2, "make_longtail_counts: need at least 2 classes");
  detail::require(profile.rho >= 1.0, "make_longtail_counts: rho must be >= 1");
  detail::require(profile.n_max >= profile.rho,
                  "make_longtail_counts: n_max must be >= rho so the smallest class is nonempty");

  std::vector<int> counts(num_classes);
  const double last = static_cast<double>(num_classes - 1);
  const double pareto_exp = std::log(profile.rho) / std::log(static_cast<double>(num_classes));
  for (int c = 0; c < num_classes; ++c) {
    double n = 0.0;
    if (profile.kind == ProfileKind::kExponential) {
      n = profile.n_max * std::pow(profile.rho, -static_cast<double>(c) / last);
    } else {
      n = profile.n_max * std::pow(static_cast<double>(c + 1), -pareto_exp);
    }
    counts[c] = std::max(1, static_cast<int>(std::lround(n)));
  }
  return counts;
}

namespace detail {

inline Eigen::MatrixXd random_directions(int count, int dim, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd dirs(count, dim);
  for (int i = 0; i < count; ++i)
    for (int j = 0; j < dim; ++j) dirs(i, j) = normal(rng);
  return dirs;
}

}  // namespace detail

/// Class means with pairwise distance >= separation. When C <= d the means are
/// orthonormal directions scaled to pairwise distance exactly `separation`;
/// otherwise random unit directions rescaled so the closest pair sits at
/// `separation`.
inline Eigen::MatrixXd make_class_means(int num_classes, int dim, double separation, Rng& rng) {
  detail::require(dim >= 2, "gen_synthetic: feature dimension must be >= 2");
  detail::require(separation > 0.0, "gen_synthetic: class separation must be > 0");
  detail::require(num_classes >= 1, "gen_synthetic: need at least one class");

  if (num_classes <= dim) {
    Eigen::MatrixXd g = detail::random_directions(dim, dim, rng);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ();
    Eigen::MatrixXd means = q.leftCols(num_classes).transpose();
    return means * (separation / std::sqrt(2.0));
  }

  for (;;) {
    Eigen::MatrixXd dirs = detail::random_directions(num_classes, dim, rng);
    dirs.rowwise().normalize();
    double min_dist = std::numeric_limits<double>::infinity();
    for (int i = 0; i < num_classes; ++i)
      for (int j = i + 1; j < num_classes; ++j)
        min_dist = std::min(min_dist, (dirs.row(i) - dirs.row(j)).norm());
    if (min_dist > 1e-6) return dirs * (separation / min_dist);
  }
}

/// Isotropic Gaussian samples around given class means, ids from `first_id`.
inline Pool sample_pool(const Eigen::MatrixXd& means, const std::vector<int>& counts,
                        double noise_scale, Rng& rng, std::int64_t first_id = 0) {
  detail::require(static_cast<Eigen::Index>(counts.size()) == means.rows(),
                  "sample_pool: counts length must equal the number of classes");
  detail::require(noise_scale >= 0.0, "sample_pool: noise scale must be >= 0");
  std::normal_distribution<double> normal(0.0, 1.0);
  Pool pool;
  pool.reserve(std::accumulate(counts.begin(), counts.end(), std::size_t{0}));
  std::int64_t id = first_id;
  for (int c = 0; c < static_cast<int>(counts.size()); ++c) {
    for (int n = 0; n < counts[c]; ++n) {
      Sample s;
      s.id = id++;
      s.features = means.row(c).transpose();
      if (noise_scale > 0.0)
        for (Eigen::Index j = 0; j < s.features.size(); ++j) s.features[j] += noise_scale * normal(rng);
      s.label = c;
      pool.push_back(std::move(s));
    }
  }
  return pool;
}

/// Fully labeled synthetic pool: Gaussian clusters, deterministic in `seed`.
inline Pool gen_synthetic(int num_classes, int dim, const std::vector<int>& counts,
                          double class_separation, double noise_scale, std::uint64_t seed) {
  detail::require(static_cast<int>(counts.size()) == num_classes,
                  "gen_synthetic: counts length must equal the class count");
  auto mean_rng = make_rng(seed, {kStreamClassMeans});
  const Eigen::MatrixXd means = make_class_means(num_classes, dim, class_separation, mean_rng);
  auto sample_rng = make_rng(seed, {kStreamSamples});
  return sample_pool(means, counts, noise_scale, sample_rng);
}

/// Seeded choice of known classes. Returns source class -> split class.
inline std::vector<int> known_novel_class_map(int num_classes, int num_known, std::uint64_t seed) {
  std::vector<int> perm(num_classes);
  std::iota(perm.begin(), perm.end(), 0);
  auto rng = make_rng(seed, {kStreamClassPermutation});
  std::shuffle(perm.begin(), perm.end(), rng);

  std::vector<int> known(perm.begin(), perm.begin() + num_known);
  std::vector<int> novel(perm.begin() + num_known, perm.end());
  std::sort(known.begin(), known.end());
  std::sort(novel.begin(), novel.end());

  std::vector<int> map(num_classes);
  int next = 0;
  for (int c : known) map[c] = next++;
  for (int c : novel) map[c] = next++;
  return map;
}

/// Splits a fully labeled pool into labeled/unlabeled sets. For each known
/// class floor(labeled_ratio * n_c) samples, picked by seeded shuffle, become
/// labeled; everything else, including all novel-class samples, goes to the
/// unlabeled pool with its label hidden.
inline DatasetSplit split_known_novel(const Pool& pool, int num_classes, int num_known,
                                      double labeled_ratio, std::uint64_t seed) {
  detail::require(labeled_ratio > 0.0 && labeled_ratio <= 1.0,
                  "split_known_novel: labeled ratio must be in (0, 1]");
  detail::require(num_known >= 0 && num_known <= num_classes,
                  "split_known_novel: num_known must be in [0, num_classes]");

  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const auto& s = pool[i];
    detail::require(s.label.has_value(), "split_known_novel: every input sample must be labeled");
    detail::require(*s.label >= 0 && *s.label < num_classes,
                    "split_known_novel: label out of range");
    by_class[*s.label].push_back(i);
  }
  for (int c = 0; c < num_classes; ++c)
    detail::require(!by_class[c].empty(),
                    "split_known_novel: class " + std::to_string(c) + " has no samples");

  DatasetSplit split;
  split.num_classes = num_classes;
  split.num_known = num_known;
  split.class_map = known_novel_class_map(num_classes, num_known, seed);
  split.true_counts.assign(num_classes, 0);

  std::vector<char> is_labeled(pool.size(), 0);
  auto pick_rng = make_rng(seed, {kStreamLabeledPick});
  for (int c = 0; c < num_classes; ++c) {
    const int mapped = split.class_map[c];
    split.true_counts[mapped] = static_cast<int>(by_class[c].size());
    if (mapped >= num_known) continue;
    auto members = by_class[c];
    std::shuffle(members.begin(), members.end(), pick_rng);
    const auto take = static_cast<std::size_t>(std::floor(labeled_ratio * members.size() + 1e-9));
    for (std::size_t k = 0; k < take; ++k) is_labeled[members[k]] = 1;
  }

  for (std::size_t i = 0; i < pool.size(); ++i) {
    Sample s = pool[i];
    const int mapped = split.class_map[*s.label];
    if (is_labeled[i]) {
      s.label = mapped;
      split.labeled.push_back(std::move(s));
    } else {
      s.label.reset();
      split.unlabeled.push_back(std::move(s));
      split.unlabeled_truth.push_back(mapped);
    }
  }
  return split;
}

/// Relabels a pool (e.g. the test set) through a split's class map.
inline Pool remap_labels(Pool pool, const std::vector<int>& class_map) {
  if (class_map.empty()) return pool;
  for (auto& s : pool)
    if (s.label) s.label = class_map.at(*s.label);
  return pool;
}

/// Training split from a pool whose labels are either a known class or absent.
inline DatasetSplit split_from_pool(const Pool& pool, int num_classes, int num_known) {
  detail::require(num_known >= 0 && num_known <= num_classes,
                  "split_from_pool: num_known must be in [0, num_classes]");
  DatasetSplit split;
  split.num_classes = num_classes;
  split.num_known = num_known;
  for (const auto& s : pool) {
    if (s.label) {
      detail::require(*s.label >= 0 && *s.label < num_known,
                      "split_from_pool: labeled sample " + std::to_string(s.id) +
                          " has class " + std::to_string(*s.label) + " outside the known set");
      split.labeled.push_back(s);
    } else {
      split.unlabeled.push_back(s);
    }
  }
  return split;
}

struct SyntheticConfig {
  int num_classes = 10;
  int num_known = 6;
  int dim = 16;
  double labeled_ratio = 0.5;
  ProfileKind profile = ProfileKind::kExponential;
  double rho_l = 20.0;
  double rho_u = 20.0;
  int n_max = 300;
  double class_separation = 4.0;
  double noise_scale = 1.0;
  int test_per_class = 100;
  std::uint64_t seed = 1;
};

struct SyntheticDataset {
  DatasetSplit train;
  Pool test;  // balanced, labeled in split class indices
};

/// Train split plus balanced test set sharing the same class means. When
/// rho_l != rho_u the labeled and unlabeled pools are drawn from independent
/// profiles; the class permutation is shared.
inline SyntheticDataset make_synthetic_dataset(const SyntheticConfig& cfg) {
  auto mean_rng = make_rng(cfg.seed, {kStreamClassMeans});
  const Eigen::MatrixXd means =
      make_class_means(cfg.num_classes, cfg.dim, cfg.class_separation, mean_rng);

  const auto counts_l = make_longtail_counts(cfg.num_classes, {cfg.profile, cfg.rho_l, cfg.n_max});
  auto sample_rng = make_rng(cfg.seed, {kStreamSamples});
  const Pool pool_l = sample_pool(means, counts_l, cfg.noise_scale, sample_rng);

  SyntheticDataset out;
  out.train = split_known_novel(pool_l, cfg.num_classes, cfg.num_known, cfg.labeled_ratio, cfg.seed);
  if (cfg.rho_u != cfg.rho_l) {
    const auto counts_u =
        make_longtail_counts(cfg.num_classes, {cfg.profile, cfg.rho_u, cfg.n_max});
    auto rng_u = make_rng(cfg.seed, {kStreamSamples, 1});
    const Pool pool_u = sample_pool(means, counts_u, cfg.noise_scale, rng_u,
                                    static_cast<std::int64_t>(pool_l.size()));
    auto other = split_known_novel(pool_u, cfg.num_classes, cfg.num_known, cfg.labeled_ratio, cfg.seed);
    out.train.unlabeled = std::move(other.unlabeled);
    out.train.unlabeled_truth = std::move(other.unlabeled_truth);
    out.train.true_counts.assign(cfg.num_classes, 0);
    for (const auto& s : out.train.labeled) ++out.train.true_counts[*s.label];
    for (int c : out.train.unlabeled_truth) ++out.train.true_counts[c];
  }

  const std::vector<int> test_counts(cfg.num_classes, cfg.test_per_class);
  auto test_rng = make_rng(cfg.seed, {kStreamTestSamples});
  const auto first_test_id = static_cast<std::int64_t>(1) << 40;
  out.test = remap_labels(sample_pool(means, test_counts, cfg.noise_scale, test_rng, first_test_id),
                          out.train.class_map);
  return out;
}

// ---------------------------------------------------------------------------
// Embedding files: UTF-8 CSV, header `id,label,f0,...,f{d-1}`, label -1 means
// unlabeled.

inline void save_embeddings(std::ostream& os, const Pool& pool) {
  const Eigen::Index dim = pool.empty() ? 0 : pool.front().features.size();
  os << "id,label";
  for (Eigen::Index j = 0; j < dim; ++j) os << ",f" << j;
  os << '\n';
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const auto& s : pool) {
    detail::require(s.features.size() == dim, "save_embeddings: inconsistent feature dimension");
    os << s.id << ',' << (s.label ? *s.label : -1);
    for (Eigen::Index j = 0; j < dim; ++j) os << ',' << s.features[j];
    os << '\n';
  }
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  std::istringstream is(line);
  while (std::getline(is, cur, ',')) fields.push_back(cur);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

template <typename T>
T parse_number(const std::string& text, std::size_t line, const char* what) {
  T value{};
  std::size_t used = 0;
  try {
    if constexpr (std::is_floating_point_v<T>) {
      value = static_cast<T>(std::stod(text, &used));
    } else {
      value = static_cast<T>(std::stoll(text, &used));
    }
  } catch (const std::exception&) {
    throw ParseError(std::string("malformed ") + what + " '" + text + "'", line);
  }
  if (used != text.size()) throw ParseError(std::string("malformed ") + what + " '" + text + "'", line);
  return value;
}

}  // namespace detail

/// Reads an embedding CSV. Labels must be -1 or lie in [0, num_classes) when
/// num_classes is given.
inline Pool load_embeddings(std::istream& is, std::optional<int> num_classes = std::nullopt) {
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(is, line)) throw ParseError("empty embedding file", 1);
  ++line_no;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = detail::split_csv_line(line);
  if (header.size() < 3 || header[0] != "id" || header[1] != "label")
    throw ParseError("header must be 'id,label,f0,...'", line_no);
  const auto dim = static_cast<Eigen::Index>(header.size() - 2);
  for (Eigen::Index j = 0; j < dim; ++j)
    if (header[2 + j] != "f" + std::to_string(j))
      throw ParseError("unexpected header column '" + header[2 + j] + "'", line_no);

  Pool pool;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = detail::split_csv_line(line);
    if (static_cast<Eigen::Index>(fields.size()) != dim + 2)
      throw ParseError("expected " + std::to_string(dim + 2) + " columns, found " +
                           std::to_string(fields.size()),
                       line_no);
    Sample s;
    s.id = detail::parse_number<std::int64_t>(fields[0], line_no, "id");
    const auto label = detail::parse_number<long long>(fields[1], line_no, "label");
    if (label < -1 || (num_classes && label >= *num_classes))
      throw ParseError("unknown label index " + std::to_string(label), line_no);
    if (label >= 0) s.label = static_cast<int>(label);
    s.features.resize(dim);
    for (Eigen::Index j = 0; j < dim; ++j) {
      s.features[j] = detail::parse_number<double>(fields[2 + j], line_no, "feature");
      if (!std::isfinite(s.features[j])) throw ParseError("non-finite feature value", line_no);
    }
    pool.push_back(std::move(s));
  }
  return pool;
}

inline Pool load_embeddings(const std::string& path, std::optional<int> num_classes = std::nullopt) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open embedding file: " + path);
  return load_embeddings(is, num_classes);
}

/// Stacks sample features into an N x d matrix.
inline Eigen::MatrixXd stack_features(const Pool& pool) {
  if (pool.empty()) return {};
  Eigen::MatrixXd x(static_cast<Eigen::Index>(pool.size()), pool.front().features.size());
  for (std::size_t i = 0; i < pool.size(); ++i) {
    detail::require(pool[i].features.size() == x.cols(), "inconsistent feature dimension");
    x.row(static_cast<Eigen::Index>(i)) = pool[i].features.transpose();
  }
  return x;
}

}  // namespace bacon
