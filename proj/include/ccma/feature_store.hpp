#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ccma/matrix.hpp"
#include "ccma/rng.hpp"

namespace ccma {

/// Dense n x d float32 feature matrix, row-major.
struct EmbeddingTable {
  std::size_t n = 0;
  std::size_t d = 0;
  std::vector<float> data;
  bool normalized = false;

  EmbeddingTable() = default;
  EmbeddingTable(std::size_t rows, std::size_t dim, bool is_normalized = false)
      : n(rows), d(dim), data(rows * dim, 0.0f), normalized(is_normalized) {}

  std::span<float> row(std::size_t i) { return {data.data() + i * d, d}; }
  std::span<const float> row(std::size_t i) const { return {data.data() + i * d, d}; }

  /// Throws if the shape is empty, any entry is non-finite, or the
  /// normalized flag is set on a row whose norm is off by more than 1e-5.
  void validate() const;

  friend bool operator==(const EmbeddingTable&, const EmbeddingTable&) = default;
};

/// Rows gathered from `table` in the order of `rows`.
EmbeddingTable take_rows(const EmbeddingTable& table, std::span<const Index> rows);

/// C x d class prototypes (text embeddings in the teacher space).
struct PrototypeTable {
  EmbeddingTable table;

  std::size_t classes() const { return table.n; }
  std::size_t dim() const { return table.d; }
};

struct DatasetBundle {
  EmbeddingTable train_student;
  EmbeddingTable train_teacher;
  EmbeddingTable test_student;
  EmbeddingTable test_teacher;
  LabelVector train_labels;
  LabelVector test_labels;
  PrototypeTable prototypes;
  std::vector<std::string> class_names;

  std::size_t num_classes() const { return prototypes.classes(); }
  void validate() const;

  friend bool operator==(const DatasetBundle& a, const DatasetBundle& b) {
    return a.train_student == b.train_student && a.train_teacher == b.train_teacher &&
           a.test_student == b.test_student && a.test_teacher == b.test_teacher &&
           a.train_labels == b.train_labels && a.test_labels == b.test_labels &&
           a.prototypes.table == b.prototypes.table && a.class_names == b.class_names;
  }
};

enum class CacheErrorKind {
  kIo,
  kBadMagic,
  kUnsupportedVersion,
  kTruncated,
  kNonFinite,
  kOverflow,
};

const char* to_string(CacheErrorKind kind);

class CacheError : public Error {
 public:
  CacheError(CacheErrorKind kind, const std::string& message)
      : Error(message), kind_(kind) {}
  CacheErrorKind kind() const { return kind_; }

 private:
  CacheErrorKind kind_;
};

inline constexpr std::uint32_t kEmbcVersion = 1;

void save_cache(const EmbeddingTable& table, const std::optional<LabelVector>& labels,
                const std::filesystem::path& path);
std::pair<EmbeddingTable, std::optional<LabelVector>> load_cache(
    const std::filesystem::path& path);

void save_class_names(const std::vector<std::string>& names, const std::filesystem::path& path);
std::vector<std::string> load_class_names(const std::filesystem::path& path);

/// Directory layout: {train,test}_{student,teacher}.embc (with labels),
/// prototypes.embc, classes.txt.
void save_bundle(const DatasetBundle& bundle, const std::filesystem::path& dir);
DatasetBundle load_bundle(const std::filesystem::path& dir);

EmbeddingTable l2_normalize(const EmbeddingTable& table);

struct SyntheticSpec {
  std::size_t num_classes = 10;
  std::size_t n_train = 2000;
  std::size_t n_test = 1000;
  std::size_t d_student = 128;
  std::size_t d_teacher = 32;
  double class_separation = 4.0;
  double teacher_noise = 0.25;
  double student_noise = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Gaussian mixture stand-in for frozen-encoder features. Each sample is a
/// class mean + unit noise, normalized, in the teacher space; the student
/// space is a fixed random linear map of the teacher feature plus
/// independent noise. Prototype noise sets the teacher's zero-shot accuracy.
DatasetBundle generate_synthetic(const SyntheticSpec& spec);

/// Partition of the train split into purchased (labeled, calibration) and
/// unlabeled indices. Index sets are kept sorted ascending.
struct PoolState {
  IndexSet labeled;
  IndexSet unlabeled;
  IndexSet calibration;
  std::size_t round = 0;

  std::size_t purchased() const { return labeled.size() + calibration.size(); }

  /// Throws unless the three sets are pairwise disjoint, duplicate-free
  /// and contained in [0, n_train).
  void check_partition(std::size_t n_train) const;

  /// Moves `batch` out of unlabeled; round(cal_fraction * |batch|) of it,
  /// chosen by `rng`, goes to calibration and the rest to labeled.
  void purchase(std::span<const Index> batch, double cal_fraction, Rng& rng);
};

PoolState init_pool(std::size_t n_train, std::size_t seed_size, double cal_fraction,
                    std::uint64_t seed);
PoolState init_pool(const DatasetBundle& bundle, std::size_t seed_size, double cal_fraction,
                    std::uint64_t seed);

}  // namespace ccma
