#include "ccma/feature_store.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

namespace ccma {

namespace {

constexpr std::array<char, 4> kMagic{'E', 'M', 'B', 'C'};
constexpr std::uint32_t kFlagHasLabels = 1u << 0;
constexpr std::uint32_t kFlagNormalized = 1u << 1;
constexpr std::size_t kHeaderBytes = 4 + 4 + 8 + 4 + 4;

template <typename T>
void put_le(std::string& out, T value) {
  using U = std::make_unsigned_t<T>;
  auto bits = static_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
  }
}

template <typename T>
T get_le(const unsigned char* p) {
  using U = std::make_unsigned_t<T>;
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    bits |= static_cast<U>(static_cast<U>(p[i]) << (8 * i));
  }
  return static_cast<T>(bits);
}

double row_norm(std::span<const float> row) {
  double s = 0.0;
  for (float v : row) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

}  // namespace

void EmbeddingTable::validate() const {
  if (n == 0 || d == 0) throw Error("EmbeddingTable: empty shape");
  if (data.size() != n * d) throw Error("EmbeddingTable: data size does not match n*d");
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!std::isfinite(data[i])) {
      throw Error("EmbeddingTable: non-finite value in row " + std::to_string(i / d));
    }
  }
  if (normalized) {
    for (std::size_t i = 0; i < n; ++i) {
      if (std::abs(row_norm(row(i)) - 1.0) > 1e-5) {
        throw Error("EmbeddingTable: row " + std::to_string(i) +
                    " flagged normalized but norm deviates from 1");
      }
    }
  }
}

EmbeddingTable take_rows(const EmbeddingTable& table, std::span<const Index> rows) {
  EmbeddingTable out(rows.size(), table.d, table.normalized);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= table.n) throw Error("take_rows: index out of range");
    auto src = table.row(rows[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

void DatasetBundle::validate() const {
  train_student.validate();
  train_teacher.validate();
  test_student.validate();
  test_teacher.validate();
  prototypes.table.validate();
  if (train_student.n != train_teacher.n || train_student.n != train_labels.size()) {
    throw Error("DatasetBundle: train tables and labels disagree on n");
  }
  if (test_student.n != test_teacher.n || test_student.n != test_labels.size()) {
    throw Error("DatasetBundle: test tables and labels disagree on n");
  }
  if (train_student.d != test_student.d || train_teacher.d != test_teacher.d) {
    throw Error("DatasetBundle: train/test dimensions differ");
  }
  if (prototypes.dim() != train_teacher.d) {
    throw Error("DatasetBundle: prototype dimension differs from teacher features");
  }
  const std::size_t c = prototypes.classes();
  if (c < 2) throw Error("DatasetBundle: need at least two classes");
  if (class_names.size() != c) throw Error("DatasetBundle: class name count differs from C");
  Label max_label = -1;
  for (const auto* labels : {&train_labels, &test_labels}) {
    for (Label y : *labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= c) {
        throw Error("DatasetBundle: label " + std::to_string(y) + " outside [0, C)");
      }
      max_label = std::max(max_label, y);
    }
  }
  if (static_cast<std::size_t>(max_label) + 1 != c) {
    throw Error("DatasetBundle: max label + 1 differs from C");
  }
}

const char* to_string(CacheErrorKind kind) {
  switch (kind) {
    case CacheErrorKind::kIo: return "io";
    case CacheErrorKind::kBadMagic: return "bad magic";
    case CacheErrorKind::kUnsupportedVersion: return "unsupported version";
    case CacheErrorKind::kTruncated: return "truncated payload";
    case CacheErrorKind::kNonFinite: return "non-finite payload";
    case CacheErrorKind::kOverflow: return "dimension overflow";
  }
  return "unknown";
}

void save_cache(const EmbeddingTable& table, const std::optional<LabelVector>& labels,
                const std::filesystem::path& path) {
  if (table.data.size() != table.n * table.d) {
    throw Error("save_cache: data size does not match n*d");
  }
  if (table.d > std::numeric_limits<std::uint32_t>::max()) {
    throw CacheError(CacheErrorKind::kOverflow,
                     "save_cache: d exceeds u32 range for " + path.string());
  }
  if (labels && labels->size() != table.n) {
    throw Error("save_cache: label count differs from n");
  }

  std::string buf;
  buf.reserve(kHeaderBytes + table.data.size() * 4 + (labels ? labels->size() * 4 : 0));
  buf.append(kMagic.data(), kMagic.size());
  put_le<std::uint32_t>(buf, kEmbcVersion);
  put_le<std::uint64_t>(buf, table.n);
  put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(table.d));
  std::uint32_t flags = 0;
  if (labels) flags |= kFlagHasLabels;
  if (table.normalized) flags |= kFlagNormalized;
  put_le<std::uint32_t>(buf, flags);
  for (float v : table.data) put_le<std::uint32_t>(buf, std::bit_cast<std::uint32_t>(v));
  if (labels) {
    for (Label y : *labels) put_le<std::int32_t>(buf, y);
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CacheError(CacheErrorKind::kIo, "save_cache: cannot open " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw CacheError(CacheErrorKind::kIo, "save_cache: write failed for " + path.string());
}

std::pair<EmbeddingTable, std::optional<LabelVector>> load_cache(
    const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CacheError(CacheErrorKind::kIo, "load_cache: cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  const std::string where = " (" + path.string() + ")";

  if (bytes.size() < 4 || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin(),
                                      [](char a, unsigned char b) { return a == static_cast<char>(b); })) {
    throw CacheError(CacheErrorKind::kBadMagic, "load_cache: bad magic" + where);
  }
  if (bytes.size() < kHeaderBytes) {
    throw CacheError(CacheErrorKind::kTruncated, "load_cache: truncated header" + where);
  }
  const auto version = get_le<std::uint32_t>(bytes.data() + 4);
  if (version != kEmbcVersion) {
    throw CacheError(CacheErrorKind::kUnsupportedVersion,
                     "load_cache: unsupported version " + std::to_string(version) + where);
  }
  const auto n = get_le<std::uint64_t>(bytes.data() + 8);
  const auto d = get_le<std::uint32_t>(bytes.data() + 16);
  const auto flags = get_le<std::uint32_t>(bytes.data() + 20);
  const bool has_labels = (flags & kFlagHasLabels) != 0;

  const std::uint64_t max_elems = std::numeric_limits<std::uint64_t>::max() / 8;
  if (d != 0 && n > max_elems / d) {
    throw CacheError(CacheErrorKind::kOverflow, "load_cache: n*d overflows" + where);
  }
  const std::uint64_t payload = n * d * 4 + (has_labels ? n * 4 : 0);
  if (bytes.size() - kHeaderBytes < payload) {
    throw CacheError(CacheErrorKind::kTruncated, "load_cache: truncated payload" + where);
  }

  EmbeddingTable table(static_cast<std::size_t>(n), d, (flags & kFlagNormalized) != 0);
  const unsigned char* p = bytes.data() + kHeaderBytes;
  for (std::size_t i = 0; i < table.data.size(); ++i, p += 4) {
    const float v = std::bit_cast<float>(get_le<std::uint32_t>(p));
    if (!std::isfinite(v)) {
      throw CacheError(CacheErrorKind::kNonFinite,
                       "load_cache: non-finite value at row " + std::to_string(i / d) + where);
    }
    table.data[i] = v;
  }
  std::optional<LabelVector> labels;
  if (has_labels) {
    labels.emplace(table.n);
    for (std::size_t i = 0; i < table.n; ++i, p += 4) (*labels)[i] = get_le<std::int32_t>(p);
  }
  return {std::move(table), std::move(labels)};
}

void save_class_names(const std::vector<std::string>& names, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw CacheError(CacheErrorKind::kIo, "cannot open " + path.string());
  for (const auto& name : names) out << name << '\n';
  if (!out) throw CacheError(CacheErrorKind::kIo, "write failed for " + path.string());
}

std::vector<std::string> load_class_names(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CacheError(CacheErrorKind::kIo, "cannot open " + path.string());
  std::vector<std::string> names;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) names.push_back(line);
  }
  return names;
}

void save_bundle(const DatasetBundle& bundle, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_cache(bundle.train_student, bundle.train_labels, dir / "train_student.embc");
  save_cache(bundle.train_teacher, bundle.train_labels, dir / "train_teacher.embc");
  save_cache(bundle.test_student, bundle.test_labels, dir / "test_student.embc");
  save_cache(bundle.test_teacher, bundle.test_labels, dir / "test_teacher.embc");
  save_cache(bundle.prototypes.table, std::nullopt, dir / "prototypes.embc");
  save_class_names(bundle.class_names, dir / "classes.txt");
}

DatasetBundle load_bundle(const std::filesystem::path& dir) {
  auto require_labels = [](std::optional<LabelVector> labels, const std::filesystem::path& p) {
    if (!labels) throw Error("load_bundle: " + p.string() + " carries no labels");
    return std::move(*labels);
  };
  DatasetBundle b;
  auto [trs, trl] = load_cache(dir / "train_student.embc");
  auto [trt, trl2] = load_cache(dir / "train_teacher.embc");
  auto [tes, tel] = load_cache(dir / "test_student.embc");
  auto [tet, tel2] = load_cache(dir / "test_teacher.embc");
  b.train_student = std::move(trs);
  b.train_teacher = std::move(trt);
  b.test_student = std::move(tes);
  b.test_teacher = std::move(tet);
  b.train_labels = require_labels(std::move(trl), dir / "train_student.embc");
  b.test_labels = require_labels(std::move(tel), dir / "test_student.embc");
  if (trl2 && *trl2 != b.train_labels) throw Error("load_bundle: train label files disagree");
  if (tel2 && *tel2 != b.test_labels) throw Error("load_bundle: test label files disagree");
  b.prototypes.table = load_cache(dir / "prototypes.embc").first;
  b.class_names = load_class_names(dir / "classes.txt");
  b.validate();
  return b;
}

EmbeddingTable l2_normalize(const EmbeddingTable& table) {
  EmbeddingTable out = table;
  for (std::size_t i = 0; i < table.n; ++i) {
    const double norm = row_norm(table.row(i));
    if (norm < 1e-12) {
      throw Error("l2_normalize: row " + std::to_string(i) + " has zero norm");
    }
    auto dst = out.row(i);
    auto src = table.row(i);
    for (std::size_t j = 0; j < table.d; ++j) {
      dst[j] = static_cast<float>(static_cast<double>(src[j]) / norm);
    }
  }
  out.normalized = true;
  return out;
}

void SyntheticSpec::validate() const {
  if (num_classes < 2) throw Error("SyntheticSpec: need at least two classes");
  if (n_train == 0 || n_test == 0 || d_student == 0 || d_teacher == 0) {
    throw Error("SyntheticSpec: counts and dimensions must be positive");
  }
  if (!(class_separation > 0.0) || !std::isfinite(class_separation)) {
    throw Error("SyntheticSpec: class_separation must be positive and finite");
  }
  if (!(teacher_noise >= 0.0) || !std::isfinite(teacher_noise) || !(student_noise >= 0.0) ||
      !std::isfinite(student_noise)) {
    throw Error("SyntheticSpec: noise parameters must be finite and non-negative");
  }
}

namespace {

std::vector<double> random_unit(std::size_t d, Rng& rng) {
  std::vector<double> v(d);
  double norm = 0.0;
  while (norm < 1e-12) {
    norm = 0.0;
    for (auto& x : v) {
      x = rng.normal();
      norm += x * x;
    }
    norm = std::sqrt(norm);
  }
  for (auto& x : v) x /= norm;
  return v;
}

LabelVector balanced_labels(std::size_t n, std::size_t c, Rng& rng) {
  LabelVector y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<Label>(i % c);
  rng.shuffle(y);
  return y;
}

}  // namespace

DatasetBundle generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const std::size_t c = spec.num_classes;
  const std::size_t dt = spec.d_teacher;
  const std::size_t ds = spec.d_student;

  Rng structure(derive_seed(spec.seed, 1));
  std::vector<std::vector<double>> means(c);
  for (auto& m : means) {
    m = random_unit(dt, structure);
    for (auto& x : m) x *= spec.class_separation;
  }

  // Student map: ds x dt Gaussian with variance 1/dt.
  std::vector<double> proj(ds * dt);
  const double proj_scale = 1.0 / std::sqrt(static_cast<double>(dt));
  for (auto& x : proj) x = structure.normal() * proj_scale;

  DatasetBundle b;
  b.prototypes.table = EmbeddingTable(c, dt);
  Rng proto_rng(derive_seed(spec.seed, 2));
  for (std::size_t k = 0; k < c; ++k) {
    auto row = b.prototypes.table.row(k);
    for (std::size_t j = 0; j < dt; ++j) {
      row[j] = static_cast<float>(means[k][j] / spec.class_separation +
                                  spec.teacher_noise * proto_rng.normal());
    }
  }
  b.prototypes.table = l2_normalize(b.prototypes.table);

  auto make_split = [&](std::size_t n, std::uint64_t tag, EmbeddingTable& student,
                        EmbeddingTable& teacher, LabelVector& labels) {
    Rng rng(derive_seed(spec.seed, tag));
    labels = balanced_labels(n, c, rng);
    teacher = EmbeddingTable(n, dt);
    student = EmbeddingTable(n, ds);
    std::vector<double> t(dt);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& m = means[static_cast<std::size_t>(labels[i])];
      double norm = 0.0;
      for (std::size_t j = 0; j < dt; ++j) {
        t[j] = m[j] + rng.normal();
        norm += t[j] * t[j];
      }
      norm = std::sqrt(norm);
      auto trow = teacher.row(i);
      for (std::size_t j = 0; j < dt; ++j) {
        t[j] /= norm;
        trow[j] = static_cast<float>(t[j]);
      }
      auto srow = student.row(i);
      for (std::size_t r = 0; r < ds; ++r) {
        double acc = 0.0;
        for (std::size_t j = 0; j < dt; ++j) acc += proj[r * dt + j] * t[j];
        srow[r] = static_cast<float>(acc + spec.student_noise * rng.normal());
      }
    }
    // Renormalize in float precision so the flag invariant holds exactly.
    teacher = l2_normalize(teacher);
  };
  make_split(spec.n_train, 3, b.train_student, b.train_teacher, b.train_labels);
  make_split(spec.n_test, 4, b.test_student, b.test_teacher, b.test_labels);

  b.class_names.reserve(c);
  for (std::size_t k = 0; k < c; ++k) b.class_names.push_back("class_" + std::to_string(k));
  return b;
}

void PoolState::check_partition(std::size_t n_train) const {
  std::vector<char> seen(n_train, 0);
  for (const auto* set : {&labeled, &unlabeled, &calibration}) {
    for (Index i : *set) {
      if (i >= n_train) throw Error("PoolState: index out of range");
      if (seen[i]) throw Error("PoolState: index " + std::to_string(i) + " appears twice");
      seen[i] = 1;
    }
  }
}

void PoolState::purchase(std::span<const Index> batch, double cal_fraction, Rng& rng) {
  std::vector<Index> picked(batch.begin(), batch.end());
  std::sort(picked.begin(), picked.end());
  if (std::adjacent_find(picked.begin(), picked.end()) != picked.end()) {
    throw Error("PoolState::purchase: duplicate index in batch");
  }
  IndexSet remaining;
  remaining.reserve(unlabeled.size());
  std::set_difference(unlabeled.begin(), unlabeled.end(), picked.begin(), picked.end(),
                      std::back_inserter(remaining));
  if (remaining.size() + picked.size() != unlabeled.size()) {
    throw Error("PoolState::purchase: batch contains indices outside the unlabeled pool");
  }
  unlabeled = std::move(remaining);

  const auto n_cal = static_cast<std::size_t>(
      std::floor(cal_fraction * static_cast<double>(picked.size()) + 0.5));
  std::vector<Index> order(batch.begin(), batch.end());
  rng.shuffle(order);
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < n_cal ? calibration : labeled).push_back(order[i]);
  }
  std::sort(labeled.begin(), labeled.end());
  std::sort(calibration.begin(), calibration.end());
  ++round;
}

std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, Rng& rng) {
  k = std::min(k, n);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(perm[i], perm[j]);
  }
  perm.resize(k);
  return perm;
}

PoolState init_pool(std::size_t n_train, std::size_t seed_size, double cal_fraction,
                    std::uint64_t seed) {
  if (seed_size > n_train) {
    throw Error("init_pool: seed_size " + std::to_string(seed_size) + " exceeds n_train " +
                std::to_string(n_train));
  }
  if (!(cal_fraction >= 0.0 && cal_fraction < 1.0)) {
    throw Error("init_pool: cal_fraction must lie in [0, 1)");
  }
  Rng rng(seed);
  PoolState pool;
  pool.labeled = sample_without_replacement(n_train, seed_size, rng);
  std::sort(pool.labeled.begin(), pool.labeled.end());
  pool.unlabeled.reserve(n_train - seed_size);
  std::size_t j = 0;
  for (Index i = 0; i < n_train; ++i) {
    if (j < pool.labeled.size() && pool.labeled[j] == i) {
      ++j;
    } else {
      pool.unlabeled.push_back(i);
    }
  }
  return pool;
}

PoolState init_pool(const DatasetBundle& bundle, std::size_t seed_size, double cal_fraction,
                    std::uint64_t seed) {
  return init_pool(bundle.train_labels.size(), seed_size, cal_fraction, seed);
}

}  // namespace ccma
