#include <CLI11.hpp>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <sstream>

#include "ccma/conformal.hpp"
#include "ccma/harness.hpp"
#include "ccma/teacher_head.hpp"

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ccma::Error("cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int cmd_synth(const std::string& spec_path, const std::string& out) {
  const auto spec = ccma::synthetic_spec_from_json(slurp(spec_path));
  const auto bundle = ccma::generate_synthetic(spec);
  ccma::save_bundle(bundle, out);
  const ccma::TeacherModel teacher(bundle.prototypes, 0.01);
  nlohmann::json j = {
      {"out", out},
      {"n_train", bundle.train_labels.size()},
      {"n_test", bundle.test_labels.size()},
      {"num_classes", bundle.num_classes()},
      {"teacher_test_accuracy",
       ccma::top1_accuracy(ccma::teacher_posterior(teacher, bundle.test_teacher),
                           bundle.test_labels)}};
  std::cout << j.dump(2) << '\n';
  return 0;
}

int cmd_run(const std::string& config_path, const std::string& out, bool force) {
  const auto cfg = ccma::config_from_json(slurp(config_path));
  const auto result = ccma::run_experiment(cfg);
  ccma::write_report(result, out, force);
  nlohmann::json j;
  j["out"] = out;
  j["teacher_test_accuracy"] = result.teacher_test_accuracy;
  for (const auto& s : result.seeds) j["aulc"][std::to_string(s.seed)] = s.aulc;
  std::cout << j.dump(2) << '\n';
  return 0;
}

int cmd_report(const std::string& in, const std::vector<double>& targets, bool exact) {
  namespace fs = std::filesystem;
  const auto table = ccma::read_aggregate_csv(fs::path(in) / "aggregate.csv");
  std::vector<std::pair<std::size_t, double>> curve;
  std::vector<double> acc;
  for (const auto& r : table.rows) {
    curve.emplace_back(r.n_labeled, r.mean_acc);
    acc.push_back(r.mean_acc);
  }
  nlohmann::json j;
  j["rounds"] = table.rows.size();
  j["final_mean_acc"] = acc.empty() ? 0.0 : acc.back();
  j["aulc_of_mean_curve"] = acc.empty() ? 0.0 : ccma::compute_aulc(acc);
  j["labels_to_accuracy"] = nlohmann::json::object();
  for (double t : targets) {
    const auto n = ccma::labels_to_accuracy(curve, t, exact);
    std::ostringstream key;
    key << t;
    j["labels_to_accuracy"][key.str()] = n ? nlohmann::json(*n) : nlohmann::json(nullptr);
  }
  const auto manifest = fs::path(in) / "manifest.json";
  if (fs::exists(manifest)) {
    const auto m = nlohmann::json::parse(slurp(manifest.string()));
    j["aulc_mean"] = m.value("aulc_mean", 0.0);
    j["aulc_std"] = m.value("aulc_std", 0.0);
  }
  std::cout << j.dump(2) << '\n';
  return 0;
}

int cmd_calibrate(const std::string& posteriors_path, const std::string& labels_path,
                  const std::string& mode, double target, double alpha) {
  const auto [table, embedded] = ccma::load_cache(posteriors_path);
  ccma::Matrix post(table.n, table.d);
  for (std::size_t i = 0; i < table.n; ++i) {
    auto row = table.row(i);
    for (std::size_t j = 0; j < table.d; ++j) post(i, j) = row[j];
  }
  std::optional<ccma::LabelVector> labels = embedded;
  if (!labels_path.empty()) labels = ccma::load_cache(labels_path).second;

  const auto scores = ccma::nonconformity(post);
  ccma::ConformalCalibrator cal;
  if (mode == "size") {
    cal = ccma::calibrate_size_target(scores, target);
  } else if (mode == "coverage") {
    if (!labels) throw ccma::Error("calibrate: coverage mode needs labels");
    cal = ccma::calibrate_coverage_target(ccma::scores_at_labels(scores, *labels), alpha);
  } else {
    throw ccma::Error("calibrate: --mode must be size or coverage");
  }
  const auto sets = ccma::predict_sets(cal, scores);
  nlohmann::json j;
  j["mode"] = mode;
  j["q"] = cal.q;
  j["mean_size"] = ccma::mean_set_size(scores, cal.q);
  if (labels) {
    j["coverage"] = ccma::audit(sets, *labels).coverage;
  } else {
    j["coverage"] = nullptr;
  }
  std::cout << j.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pool-based active-learning engine"};
  app.require_subcommand(1);

  std::string spec_path, out_dir;
  auto* synth = app.add_subcommand("synth", "Write a synthetic dataset bundle");
  synth->add_option("--spec", spec_path, "synthetic spec JSON")->required();
  synth->add_option("--out", out_dir, "output directory")->required();

  std::string config_path;
  bool force = false;
  auto* run = app.add_subcommand("run", "Run an experiment and write a report");
  run->add_option("--config", config_path, "config JSON")->required();
  run->add_option("--out", out_dir, "report directory")->required();
  run->add_flag("--force", force, "overwrite a non-empty report directory");

  std::string in_dir;
  std::vector<double> targets{0.8, 0.85, 0.9};
  bool exact = false;
  auto* report = app.add_subcommand("report", "Summarize a report directory");
  report->add_option("--in", in_dir, "report directory")->required();
  report->add_option("--target-acc", targets, "accuracy thresholds")->delimiter(',');
  report->add_flag("--exact-rounds", exact, "no interpolation between rounds");

  std::string posteriors, labels, mode = "size";
  double target = 3.0, alpha = 0.1;
  auto* calibrate = app.add_subcommand("calibrate", "Fit a conformal threshold on a posterior dump");
  calibrate->add_option("--posteriors", posteriors, "EMBC file of posterior rows")->required();
  calibrate->add_option("--cache", labels, "EMBC file whose labels are used");
  calibrate->add_option("--mode", mode, "size or coverage");
  calibrate->add_option("--target", target, "target mean set size");
  calibrate->add_option("--alpha", alpha, "miscoverage level");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*synth) return cmd_synth(spec_path, out_dir);
    if (*run) return cmd_run(config_path, out_dir, force);
    if (*report) return cmd_report(in_dir, targets, exact);
    if (*calibrate) return cmd_calibrate(posteriors, labels, mode, target, alpha);
  } catch (const std::exception& e) {
    std::cerr << "engine: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
