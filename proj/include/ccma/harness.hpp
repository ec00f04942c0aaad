#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "ccma/conformal.hpp"
#include "ccma/feature_store.hpp"
#include "ccma/scoring.hpp"
#include "ccma/selection.hpp"
#include "ccma/student_head.hpp"

namespace ccma {

inline constexpr const char* kEngineVersion = "0.1.0";

enum class Strategy { kRandom, kUncertainty, kEntropy, kMargins, kCoreset, kBald, kBadge, kCcma };

const char* to_string(Strategy s);
Strategy parse_strategy(const std::string& s);

/// Which rows pick the student checkpoint each round. kCalibration uses the
/// calibration split, or the labeled set while that split is empty.
enum class CheckpointRule { kCalibration, kLabeled, kFinal };

const char* to_string(CheckpointRule r);
CheckpointRule parse_checkpoint_rule(const std::string& s);

struct DatasetSource {
  std::optional<SyntheticSpec> synthetic;
  std::optional<std::filesystem::path> bundle_dir;
};

struct ExperimentConfig {
  DatasetSource dataset;
  Strategy strategy = Strategy::kCcma;
  std::string variant = "V1";
  std::size_t rounds = 20;
  /// Unset means one query per class (B = C).
  std::optional<std::size_t> batch;
  /// Unset means B.
  std::optional<std::size_t> seed_size;
  std::vector<std::uint64_t> seeds{1, 10, 100, 1000, 10000};
  SelectionConfig selection;
  TrainConfig train;
  ConformalConfig conformal;
  double tau = 0.01;
  std::size_t bald_passes = 10;
  CheckpointRule checkpoint = CheckpointRule::kLabeled;
  /// When false the timing columns are written as 0.
  bool record_timings = true;

  void validate() const;
};

/// Parses a JSON document; every field is optional.
ExperimentConfig config_from_json(const std::string& text);
/// Full resolved config as JSON text.
std::string config_to_json(const ExperimentConfig& cfg, int indent = 2);

SyntheticSpec synthetic_spec_from_json(const std::string& text);
std::string synthetic_spec_to_json(const SyntheticSpec& spec);

struct RoundRecord {
  std::size_t round = 0;
  std::size_t n_labeled = 0;
  double test_acc = 0.0;
  double query_sec = 0.0;
  double train_sec = 0.0;
  PoolSummary diagnostics;
  double cov_s = 0.0;
  double size_s = 0.0;
  double cov_t = 0.0;
  double size_t_ = 0.0;
};

struct SeedResult {
  std::uint64_t seed = 0;
  std::vector<RoundRecord> rounds;
  double aulc = 0.0;
  bool truncated = false;
  std::vector<std::string> flags;
};

struct AggregateRow {
  std::size_t round = 0;
  std::size_t n_labeled = 0;
  double mean_acc = 0.0;
  double std_acc = 0.0;
  std::size_t n_seeds = 0;
};

struct AggregateTable {
  std::vector<AggregateRow> rows;
  bool single_seed = false;
};

struct RunResult {
  ExperimentConfig config;  // resolved
  std::vector<SeedResult> seeds;
  AggregateTable aggregate;
  double teacher_test_accuracy = 0.0;
};

DatasetBundle load_dataset(const DatasetSource& source);

/// Resolves batch/seed_size/selection defaults against the dataset.
ExperimentConfig resolve_config(ExperimentConfig cfg, const DatasetBundle& bundle);

RunResult run_experiment(const ExperimentConfig& cfg);
RunResult run_experiment(const ExperimentConfig& cfg, const DatasetBundle& bundle);

/// Trapezoidal mean over rounds; the single value when T = 1.
double compute_aulc(std::span<const double> accuracies);

/// Smallest label count reaching `threshold`; linear interpolation between
/// bracketing rounds (rounded up) unless `exact_rounds`.
std::optional<std::size_t> labels_to_accuracy(
    std::span<const std::pair<std::size_t, double>> curve, double threshold,
    bool exact_rounds = false);

/// Sample mean and sample std (n - 1) per round.
AggregateTable aggregate_seeds(const std::vector<SeedResult>& seeds);

inline constexpr const char* kSeedCsvHeader =
    "round,n_labeled,test_acc,query_sec,train_sec,mean_overlap,mean_symdiff,"
    "frac_top1_disagree,mean_js,mean_conf_s,mean_conf_t,cov_s,size_s,cov_t,size_t";
inline constexpr const char* kAggregateCsvHeader = "round,n_labeled,mean_acc,std_acc,n_seeds";

void write_seed_csv(const SeedResult& seed, std::ostream& out);
void write_aggregate_csv(const AggregateTable& table, std::ostream& out);

/// Writes seed_<seed>.csv per seed, aggregate.csv and manifest.json.
/// Refuses a non-empty directory unless `force`.
std::vector<std::filesystem::path> write_report(const RunResult& result,
                                                const std::filesystem::path& dir,
                                                bool force = false);

/// Reads aggregate.csv from a report directory.
AggregateTable read_aggregate_csv(const std::filesystem::path& path);

}  // namespace ccma
