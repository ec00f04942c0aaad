#include <json.hpp>

#include "ccma/harness.hpp"

namespace ccma {

using nlohmann::json;

namespace {

template <typename T>
void read(const json& j, const char* key, T& field) {
  if (j.contains(key) && !j.at(key).is_null()) field = j.at(key).get<T>();
}

template <typename T>
void read_optional(const json& j, const char* key, std::optional<T>& field) {
  if (!j.contains(key)) return;
  if (j.at(key).is_null()) {
    field.reset();
  } else {
    field = j.at(key).get<T>();
  }
}

template <typename T>
json optional_json(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

void reject_unknown(const json& j, std::initializer_list<const char*> known, const char* where) {
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw Error(std::string("config: unknown field '") + key + "' in " + where);
  }
}

SyntheticSpec synthetic_from_json(const json& j) {
  reject_unknown(j,
                 {"num_classes", "n_train", "n_test", "d_student", "d_teacher",
                  "class_separation", "teacher_noise", "student_noise", "seed"},
                 "dataset.synthetic");
  SyntheticSpec s;
  read(j, "num_classes", s.num_classes);
  read(j, "n_train", s.n_train);
  read(j, "n_test", s.n_test);
  read(j, "d_student", s.d_student);
  read(j, "d_teacher", s.d_teacher);
  read(j, "class_separation", s.class_separation);
  read(j, "teacher_noise", s.teacher_noise);
  read(j, "student_noise", s.student_noise);
  read(j, "seed", s.seed);
  return s;
}

json synthetic_to_json(const SyntheticSpec& s) {
  return {{"num_classes", s.num_classes},       {"n_train", s.n_train},
          {"n_test", s.n_test},                 {"d_student", s.d_student},
          {"d_teacher", s.d_teacher},           {"class_separation", s.class_separation},
          {"teacher_noise", s.teacher_noise},   {"student_noise", s.student_noise},
          {"seed", s.seed}};
}

}  // namespace

SyntheticSpec synthetic_spec_from_json(const std::string& text) {
  return synthetic_from_json(json::parse(text));
}

std::string synthetic_spec_to_json(const SyntheticSpec& spec) {
  return synthetic_to_json(spec).dump(2);
}

ExperimentConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(std::string("config: invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw Error("config: top level must be an object");
  reject_unknown(j,
                 {"dataset", "strategy", "variant", "rounds", "batch", "seed_size", "seeds",
                  "selection", "train", "conformal", "tau", "bald_passes", "record_timings",
                  "checkpoint", "engine_version"},
                 "config");

  ExperimentConfig cfg;
  try {
    if (j.contains("dataset")) {
      const json& d = j.at("dataset");
      reject_unknown(d, {"synthetic", "bundle"}, "dataset");
      if (d.contains("synthetic") && !d.at("synthetic").is_null()) {
        cfg.dataset.synthetic = synthetic_from_json(d.at("synthetic"));
      }
      if (d.contains("bundle") && !d.at("bundle").is_null()) {
        cfg.dataset.bundle_dir = d.at("bundle").get<std::string>();
      }
    }
    if (j.contains("strategy")) cfg.strategy = parse_strategy(j.at("strategy").get<std::string>());
    read(j, "variant", cfg.variant);
    apply_variant(cfg.selection, cfg.variant);
    read(j, "rounds", cfg.rounds);
    read_optional(j, "batch", cfg.batch);
    read_optional(j, "seed_size", cfg.seed_size);
    read(j, "seeds", cfg.seeds);
    read(j, "tau", cfg.tau);
    read(j, "bald_passes", cfg.bald_passes);
    read(j, "record_timings", cfg.record_timings);
    if (j.contains("checkpoint")) {
      cfg.checkpoint = parse_checkpoint_rule(j.at("checkpoint").get<std::string>());
    }

    if (j.contains("selection")) {
      const json& s = j.at("selection");
      reject_unknown(s,
                     {"kappa", "subpool_size", "subpool_mode", "diversity", "kernel_sigma",
                      "full_pool_coverage", "kmeans_max_iter"},
                     "selection");
      read(s, "kappa", cfg.selection.kappa);
      read_optional(s, "subpool_size", cfg.selection.subpool_size);
      if (s.contains("subpool_mode")) {
        cfg.selection.subpool_mode = parse_subpool_mode(s.at("subpool_mode").get<std::string>());
      }
      read(s, "diversity", cfg.selection.diversity);
      if (s.contains("kernel_sigma")) {
        const json& k = s.at("kernel_sigma");
        if (k.is_null() || (k.is_string() && k.get<std::string>() == "median")) {
          cfg.selection.kernel_sigma.reset();
        } else {
          cfg.selection.kernel_sigma = k.get<double>();
        }
      }
      read(s, "full_pool_coverage", cfg.selection.full_pool_coverage);
      read(s, "kmeans_max_iter", cfg.selection.kmeans_max_iter);
    }
    if (j.contains("train")) {
      const json& t = j.at("train");
      reject_unknown(t,
                     {"lr", "weight_decay", "beta1", "beta2", "eps", "epochs", "batch_size",
                      "dropout"},
                     "train");
      read(t, "lr", cfg.train.lr);
      read(t, "weight_decay", cfg.train.weight_decay);
      read(t, "beta1", cfg.train.beta1);
      read(t, "beta2", cfg.train.beta2);
      read(t, "eps", cfg.train.eps);
      read(t, "epochs", cfg.train.epochs);
      read(t, "batch_size", cfg.train.batch_size);
      read(t, "dropout", cfg.train.dropout);
    }
    if (j.contains("conformal")) {
      const json& c = j.at("conformal");
      reject_unknown(c,
                     {"mode", "s_teacher", "s_student", "alpha_teacher", "alpha_student", "tol",
                      "cal_fraction"},
                     "conformal");
      if (c.contains("mode")) {
        const auto mode = c.at("mode").get<std::string>();
        if (mode == "size") {
          cfg.conformal.mode = CalibrationMode::kSizeTarget;
        } else if (mode == "coverage") {
          cfg.conformal.mode = CalibrationMode::kCoverageTarget;
        } else {
          throw Error("config: conformal.mode must be 'size' or 'coverage'");
        }
      }
      read(c, "s_teacher", cfg.conformal.s_teacher);
      read(c, "s_student", cfg.conformal.s_student);
      read(c, "alpha_teacher", cfg.conformal.alpha_teacher);
      read(c, "alpha_student", cfg.conformal.alpha_student);
      read(c, "tol", cfg.conformal.tol);
      read(c, "cal_fraction", cfg.conformal.cal_fraction);
    }
  } catch (const json::exception& e) {
    throw Error(std::string("config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

std::string config_to_json(const ExperimentConfig& cfg, int indent) {
  json dataset = json::object();
  if (cfg.dataset.synthetic) dataset["synthetic"] = synthetic_to_json(*cfg.dataset.synthetic);
  if (cfg.dataset.bundle_dir) dataset["bundle"] = cfg.dataset.bundle_dir->string();

  const auto& s = cfg.selection;
  const auto& t = cfg.train;
  const auto& c = cfg.conformal;
  json j = {
      {"engine_version", kEngineVersion},
      {"dataset", dataset},
      {"strategy", to_string(cfg.strategy)},
      {"variant", cfg.variant},
      {"rounds", cfg.rounds},
      {"batch", optional_json(cfg.batch)},
      {"seed_size", optional_json(cfg.seed_size)},
      {"seeds", cfg.seeds},
      {"tau", cfg.tau},
      {"bald_passes", cfg.bald_passes},
      {"record_timings", cfg.record_timings},
      {"checkpoint", to_string(cfg.checkpoint)},
      {"selection",
       {{"kappa", s.kappa},
        {"subpool_size", optional_json(s.subpool_size)},
        {"subpool_mode", to_string(s.subpool_mode)},
        {"diversity", s.diversity},
        {"kernel_sigma", s.kernel_sigma ? json(*s.kernel_sigma) : json("median")},
        {"full_pool_coverage", s.full_pool_coverage},
        {"kmeans_max_iter", s.kmeans_max_iter}}},
      {"train",
       {{"lr", t.lr},
        {"weight_decay", t.weight_decay},
        {"beta1", t.beta1},
        {"beta2", t.beta2},
        {"eps", t.eps},
        {"epochs", t.epochs},
        {"batch_size", t.batch_size},
        {"dropout", t.dropout}}},
      {"conformal",
       {{"mode", c.mode == CalibrationMode::kSizeTarget ? "size" : "coverage"},
        {"s_teacher", c.s_teacher},
        {"s_student", c.s_student},
        {"alpha_teacher", c.alpha_teacher},
        {"alpha_student", c.alpha_student},
        {"tol", c.tol},
        {"cal_fraction", c.cal_fraction}}},
  };
  return j.dump(indent);
}

}  // namespace ccma
