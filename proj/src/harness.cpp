#include "ccma/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <numeric>
#include <sstream>

#include "ccma/baselines.hpp"
#include "ccma/teacher_head.hpp"

namespace ccma {

namespace {

// Stream tags for derive_seed.
enum : std::uint64_t {
  kTagPool = 11,
  kTagInit = 12,
  kTagTrain = 13,
  kTagQuery = 14,
  kTagPurchase = 15,
};

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace

const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::kRandom: return "random";
    case Strategy::kUncertainty: return "uncertainty";
    case Strategy::kEntropy: return "entropy";
    case Strategy::kMargins: return "margins";
    case Strategy::kCoreset: return "coreset";
    case Strategy::kBald: return "bald";
    case Strategy::kBadge: return "badge";
    case Strategy::kCcma: return "ccma";
  }
  return "unknown";
}

Strategy parse_strategy(const std::string& s) {
  for (auto st : {Strategy::kRandom, Strategy::kUncertainty, Strategy::kEntropy,
                  Strategy::kMargins, Strategy::kCoreset, Strategy::kBald, Strategy::kBadge,
                  Strategy::kCcma}) {
    if (s == to_string(st)) return st;
  }
  throw Error("unknown strategy '" + s +
              "' (expected random|uncertainty|entropy|margins|coreset|bald|badge|ccma)");
}

const char* to_string(CheckpointRule r) {
  switch (r) {
    case CheckpointRule::kCalibration: return "calibration";
    case CheckpointRule::kLabeled: return "labeled";
    case CheckpointRule::kFinal: return "final";
  }
  return "unknown";
}

CheckpointRule parse_checkpoint_rule(const std::string& s) {
  for (auto r : {CheckpointRule::kCalibration, CheckpointRule::kLabeled, CheckpointRule::kFinal}) {
    if (s == to_string(r)) return r;
  }
  throw Error("unknown checkpoint rule '" + s + "' (expected calibration|labeled|final)");
}

void ExperimentConfig::validate() const {
  if (rounds == 0) throw Error("config: rounds must be at least 1");
  if (batch && *batch == 0) throw Error("config: batch must be at least 1");
  if (seeds.empty()) throw Error("config: at least one seed is required");
  if (!(tau > 0.0)) throw Error("config: tau must be positive");
  if (strategy == Strategy::kBald && bald_passes < 2) {
    throw Error("config: bald needs at least two MC passes");
  }
  if (dataset.synthetic) dataset.synthetic->validate();
  train.validate();
  conformal.validate();
}

DatasetBundle load_dataset(const DatasetSource& source) {
  if (source.bundle_dir) return load_bundle(*source.bundle_dir);
  if (source.synthetic) return generate_synthetic(*source.synthetic);
  throw Error("config: dataset needs either 'synthetic' or 'bundle'");
}

ExperimentConfig resolve_config(ExperimentConfig cfg, const DatasetBundle& bundle) {
  if (!cfg.batch) cfg.batch = bundle.num_classes();
  if (!cfg.seed_size) cfg.seed_size = *cfg.batch;
  cfg.selection.batch = *cfg.batch;
  cfg.validate();
  cfg.selection.validate();
  return cfg;
}

double compute_aulc(std::span<const double> acc) {
  if (acc.empty()) throw Error("compute_aulc: empty curve");
  if (acc.size() == 1) return acc.front();
  double area = 0.0;
  for (std::size_t i = 0; i + 1 < acc.size(); ++i) area += 0.5 * (acc[i] + acc[i + 1]);
  return area / static_cast<double>(acc.size() - 1);
}

std::optional<std::size_t> labels_to_accuracy(
    std::span<const std::pair<std::size_t, double>> curve, double threshold, bool exact_rounds) {
  for (std::size_t i = 0; i < curve.size(); ++i) {
    const auto [n, a] = curve[i];
    if (a < threshold) continue;
    if (i == 0 || exact_rounds) return n;
    const auto [n0, a0] = curve[i - 1];
    const double frac = (threshold - a0) / (a - a0);
    const double x = static_cast<double>(n0) + frac * static_cast<double>(n - n0);
    const auto up = static_cast<std::size_t>(std::ceil(x - 1e-9 * std::max(1.0, x)));
    return std::clamp(up, n0, n);
  }
  return std::nullopt;
}

AggregateTable aggregate_seeds(const std::vector<SeedResult>& seeds) {
  if (seeds.empty()) throw Error("aggregate_seeds: no seeds");
  const std::size_t t = seeds.front().rounds.size();
  for (const auto& s : seeds) {
    if (s.rounds.size() != t) throw Error("aggregate_seeds: seeds have different round counts");
  }
  AggregateTable out;
  out.single_seed = seeds.size() == 1;
  const auto k = static_cast<double>(seeds.size());
  for (std::size_t r = 0; r < t; ++r) {
    AggregateRow row;
    row.round = seeds.front().rounds[r].round;
    row.n_labeled = seeds.front().rounds[r].n_labeled;
    row.n_seeds = seeds.size();
    double sum = 0.0;
    for (const auto& s : seeds) sum += s.rounds[r].test_acc;
    row.mean_acc = sum / k;
    if (seeds.size() > 1) {
      double ss = 0.0;
      for (const auto& s : seeds) {
        const double diff = s.rounds[r].test_acc - row.mean_acc;
        ss += diff * diff;
      }
      row.std_acc = std::sqrt(ss / (k - 1.0));
    }
    out.rows.push_back(row);
  }
  return out;
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Experiment {
  const ExperimentConfig& cfg;
  const DatasetBundle& data;
  PosteriorMatrix teacher_train;
  PosteriorMatrix teacher_test;
};

IndexSet query(const Experiment& ex, const PoolState& pool, const StudentModel& student,
               std::uint64_t seed, std::size_t round, SeedResult& out) {
  const auto& cfg = ex.cfg;
  const auto& d = ex.data;
  const std::size_t b = std::min(*cfg.batch, pool.unlabeled.size());
  const std::uint64_t qseed = derive_seed(seed, kTagQuery, round);

  auto to_train = [&](const std::vector<std::size_t>& positions) {
    IndexSet idx;
    idx.reserve(positions.size());
    for (auto p : positions) idx.push_back(pool.unlabeled[p]);
    return idx;
  };
  auto unlabeled_student = [&] { return take_rows(d.train_student, pool.unlabeled); };

  switch (cfg.strategy) {
    case Strategy::kRandom:
      return select_random(pool.unlabeled, b, qseed);
    case Strategy::kUncertainty:
      return to_train(select_uncertainty(predict_proba(student, unlabeled_student()), b,
                                         UncertaintyMode::kLeastConfidence));
    case Strategy::kEntropy:
      return to_train(select_uncertainty(predict_proba(student, unlabeled_student()), b,
                                         UncertaintyMode::kEntropy));
    case Strategy::kMargins:
      return to_train(select_uncertainty(predict_proba(student, unlabeled_student()), b,
                                         UncertaintyMode::kMargins));
    case Strategy::kCoreset: {
      IndexSet covered = pool.labeled;
      covered.insert(covered.end(), pool.calibration.begin(), pool.calibration.end());
      return select_coreset(student_embeddings(student, d.train_student), covered,
                            pool.unlabeled, b);
    }
    case Strategy::kBald:
      return to_train(select_bald(
          mc_dropout_posteriors(student, unlabeled_student(), cfg.bald_passes, qseed), b));
    case Strategy::kBadge: {
      auto sel = select_badge(grad_embedding(student, unlabeled_student()), b, qseed);
      if (sel.fell_back_to_random) {
        out.flags.push_back("round " + std::to_string(round) + ": badge fell back to random");
      }
      return to_train(sel.positions);
    }
    case Strategy::kCcma: {
      SelectionConfig sel = cfg.selection;
      sel.batch = b;
      if (sel.subpool_size && *sel.subpool_size < b) sel.subpool_size = b;
      const CcmaInputs in{d.train_teacher, d.train_student, ex.teacher_train, student,
                          pool.unlabeled, pool.calibration, d.train_labels};
      const auto res = ccma_select(in, sel, cfg.conformal, qseed);
      const std::string tag = "round " + std::to_string(round) + ": ";
      if (res.subpool_clamped) out.flags.push_back(tag + "subpool clamped to |U|");
      if (res.short_of_batch) out.flags.push_back(tag + "fewer candidates than B");
      if (res.conformal_fallback) {
        out.flags.push_back(tag + "no calibration rows, size-targeted calibration used");
      }
      return res.batch;
    }
  }
  throw Error("query: unhandled strategy");
}

SeedResult run_seed(const Experiment& ex, std::uint64_t seed) {
  const auto& cfg = ex.cfg;
  const auto& d = ex.data;
  const std::size_t c = d.num_classes();
  SeedResult out;
  out.seed = seed;

  PoolState pool =
      init_pool(d, *cfg.seed_size, cfg.conformal.cal_fraction, derive_seed(seed, kTagPool));
  Rng purchase_rng(derive_seed(seed, kTagPurchase));

  for (std::size_t t = 1; t <= cfg.rounds; ++t) {
    RoundRecord rec;
    rec.round = t;
    rec.n_labeled = pool.purchased();

    // Cold start: a fresh head every round.
    const auto train_start = Clock::now();
    const EmbeddingTable feats = take_rows(d.train_student, pool.labeled);
    LabelVector labels;
    for (auto i : pool.labeled) labels.push_back(d.train_labels[i]);
    IndexSet val_idx;
    switch (cfg.checkpoint) {
      case CheckpointRule::kCalibration:
        val_idx = pool.calibration.empty() ? pool.labeled : pool.calibration;
        break;
      case CheckpointRule::kLabeled:
        val_idx = pool.labeled;
        break;
      case CheckpointRule::kFinal:
        break;
    }
    const EmbeddingTable val_feats = take_rows(d.train_student, val_idx);
    LabelVector val_labels;
    for (auto i : val_idx) val_labels.push_back(d.train_labels[i]);
    TrainConfig tc = cfg.train;
    tc.seed = derive_seed(seed, kTagTrain, t);
    StudentModel init = init_student(c, d.train_student.d, derive_seed(seed, kTagInit, t),
                                     cfg.train.dropout);
    const StudentModel student =
        train_student(std::move(init), feats, labels, val_feats, val_labels, tc).model;
    rec.train_sec = seconds_since(train_start);
    rec.test_acc = top1_accuracy(predict_proba(student, d.test_student), d.test_labels);

    // Diagnostics over the unlabeled pool, audits on the calibration split.
    const PosteriorMatrix cal_s =
        predict_proba(student, take_rows(d.train_student, pool.calibration));
    const PosteriorMatrix cal_t = take_rows(ex.teacher_train, pool.calibration);
    LabelVector cal_labels;
    for (auto i : pool.calibration) cal_labels.push_back(d.train_labels[i]);
    if (!pool.unlabeled.empty()) {
      const PosteriorMatrix u_s =
          predict_proba(student, take_rows(d.train_student, pool.unlabeled));
      const PosteriorMatrix u_t = take_rows(ex.teacher_train, pool.unlabeled);
      const auto cals = fit_calibrators(cfg.conformal, u_s, u_t, cal_s, cal_t, cal_labels);
      const auto records = score_pool(u_s, u_t, predict_sets(cals.student, nonconformity(u_s)),
                                      predict_sets(cals.teacher, nonconformity(u_t)));
      rec.diagnostics = pool_diagnostics(records);
      const auto audit_s = audit(predict_sets(cals.student, nonconformity(cal_s)), cal_labels);
      const auto audit_t = audit(predict_sets(cals.teacher, nonconformity(cal_t)), cal_labels);
      rec.cov_s = audit_s.coverage;
      rec.size_s = audit_s.mean_size;
      rec.cov_t = audit_t.coverage;
      rec.size_t_ = audit_t.mean_size;
    } else {
      rec.cov_s = rec.size_s = rec.cov_t = rec.size_t_ = std::nan("");
    }

    if (t < cfg.rounds) {
      if (pool.unlabeled.empty()) {
        out.truncated = true;
        out.flags.push_back("round " + std::to_string(t) + ": unlabeled pool exhausted");
        if (!cfg.record_timings) rec.train_sec = 0.0;
        out.rounds.push_back(rec);
        break;
      }
      const auto query_start = Clock::now();
      const IndexSet batch = query(ex, pool, student, seed, t, out);
      rec.query_sec = seconds_since(query_start);
      pool.purchase(batch, cfg.conformal.cal_fraction, purchase_rng);
      pool.check_partition(d.train_labels.size());
    }
    if (!cfg.record_timings) {
      rec.train_sec = 0.0;
      rec.query_sec = 0.0;
    }
    out.rounds.push_back(rec);
  }

  std::vector<double> acc;
  for (const auto& r : out.rounds) acc.push_back(r.test_acc);
  out.aulc = compute_aulc(acc);
  return out;
}

}  // namespace

RunResult run_experiment(const ExperimentConfig& cfg, const DatasetBundle& bundle) {
  bundle.validate();
  RunResult result;
  result.config = resolve_config(cfg, bundle);
  const TeacherModel teacher(bundle.prototypes, result.config.tau);
  Experiment ex{result.config, bundle, teacher_posterior(teacher, bundle.train_teacher),
                teacher_posterior(teacher, bundle.test_teacher)};
  result.teacher_test_accuracy = top1_accuracy(ex.teacher_test, bundle.test_labels);
  for (auto seed : result.config.seeds) result.seeds.push_back(run_seed(ex, seed));

  // Truncated seeds are cut to the shortest common length before aggregation.
  std::size_t common = result.seeds.front().rounds.size();
  for (const auto& s : result.seeds) common = std::min(common, s.rounds.size());
  std::vector<SeedResult> trimmed = result.seeds;
  for (auto& s : trimmed) s.rounds.resize(common);
  result.aggregate = aggregate_seeds(trimmed);
  return result;
}

RunResult run_experiment(const ExperimentConfig& cfg) {
  return run_experiment(cfg, load_dataset(cfg.dataset));
}

void write_seed_csv(const SeedResult& seed, std::ostream& out) {
  out << kSeedCsvHeader << '\n';
  for (const auto& r : seed.rounds) {
    const auto& g = r.diagnostics;
    out << r.round << ',' << r.n_labeled << ',' << fmt(r.test_acc) << ',' << fmt(r.query_sec)
        << ',' << fmt(r.train_sec) << ',' << fmt(g.mean_overlap) << ',' << fmt(g.mean_symdiff)
        << ',' << fmt(g.frac_top1_disagree) << ',' << fmt(g.mean_js) << ','
        << fmt(g.mean_conf_s) << ',' << fmt(g.mean_conf_t) << ',' << fmt(r.cov_s) << ','
        << fmt(r.size_s) << ',' << fmt(r.cov_t) << ',' << fmt(r.size_t_) << '\n';
  }
}

void write_aggregate_csv(const AggregateTable& table, std::ostream& out) {
  out << kAggregateCsvHeader << '\n';
  for (const auto& r : table.rows) {
    out << r.round << ',' << r.n_labeled << ',' << fmt(r.mean_acc) << ',' << fmt(r.std_acc)
        << ',' << r.n_seeds << '\n';
  }
}

std::vector<std::filesystem::path> write_report(const RunResult& result,
                                                const std::filesystem::path& dir, bool force) {
  namespace fs = std::filesystem;
  if (fs::exists(dir) && !fs::is_directory(dir)) {
    throw Error("write_report: " + dir.string() + " exists and is not a directory");
  }
  if (fs::exists(dir) && !fs::is_empty(dir) && !force) {
    throw Error("write_report: " + dir.string() + " is not empty (use --force to overwrite)");
  }
  fs::create_directories(dir);

  std::vector<fs::path> written;
  auto open = [&](const fs::path& p) {
    std::ofstream out(p, std::ios::trunc);
    if (!out) throw Error("write_report: cannot open " + p.string());
    written.push_back(p);
    return out;
  };

  for (const auto& s : result.seeds) {
    auto out = open(dir / ("seed_" + std::to_string(s.seed) + ".csv"));
    write_seed_csv(s, out);
  }
  {
    auto out = open(dir / "aggregate.csv");
    write_aggregate_csv(result.aggregate, out);
  }

  nlohmann::json manifest;
  manifest["engine_version"] = kEngineVersion;
  manifest["config"] = nlohmann::json::parse(config_to_json(result.config));
  manifest["aulc_definition"] =
      "trapezoidal mean of test accuracy over rounds: sum_t (a_t + a_{t+1}) / 2 / (T - 1)";
  manifest["n_labeled_definition"] = "labels purchased so far (labeled + calibration split)";
  manifest["teacher_test_accuracy"] = result.teacher_test_accuracy;
  manifest["single_seed_std_is_zero"] = result.aggregate.single_seed;
  nlohmann::json seeds = nlohmann::json::array();
  std::vector<double> aulcs;
  for (const auto& s : result.seeds) {
    seeds.push_back({{"seed", s.seed},
                     {"aulc", s.aulc},
                     {"rounds", s.rounds.size()},
                     {"truncated", s.truncated},
                     {"flags", s.flags}});
    aulcs.push_back(s.aulc);
  }
  manifest["seeds"] = seeds;
  const double mean = std::accumulate(aulcs.begin(), aulcs.end(), 0.0) / static_cast<double>(aulcs.size());
  double ss = 0.0;
  for (double a : aulcs) ss += (a - mean) * (a - mean);
  manifest["aulc_mean"] = mean;
  manifest["aulc_std"] = aulcs.size() > 1 ? std::sqrt(ss / static_cast<double>(aulcs.size() - 1)) : 0.0;
  {
    auto out = open(dir / "manifest.json");
    out << manifest.dump(2) << '\n';
  }
  return written;
}

AggregateTable read_aggregate_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("read_aggregate_csv: cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != kAggregateCsvHeader) throw Error("read_aggregate_csv: unexpected header in " + path.string());
  AggregateTable table;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 5) throw Error("read_aggregate_csv: malformed row '" + line + "'");
    AggregateRow r;
    r.round = std::stoul(cells[0]);
    r.n_labeled = std::stoul(cells[1]);
    r.mean_acc = std::stod(cells[2]);
    r.std_acc = std::stod(cells[3]);
    r.n_seeds = std::stoul(cells[4]);
    table.rows.push_back(r);
  }
  table.single_seed = !table.rows.empty() && table.rows.front().n_seeds == 1;
  return table;
}

}  // namespace ccma
