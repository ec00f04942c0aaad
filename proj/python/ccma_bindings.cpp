#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "ccma/conformal.hpp"
#include "ccma/harness.hpp"
#include "ccma/scoring.hpp"
#include "ccma/teacher_head.hpp"

namespace py = pybind11;
using namespace ccma;

namespace {

using F32 = py::array_t<float, py::array::c_style | py::array::forcecast>;
using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;
using I32 = py::array_t<std::int32_t, py::array::c_style | py::array::forcecast>;

EmbeddingTable table_in(const F32& a, bool normalized = false) {
  if (a.ndim() != 2) throw Error("expected a 2-D array");
  EmbeddingTable t(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
                   normalized);
  std::copy(a.data(), a.data() + a.size(), t.data.begin());
  return t;
}

F32 table_out(const EmbeddingTable& t) {
  F32 a({t.n, t.d});
  std::copy(t.data.begin(), t.data.end(), a.mutable_data());
  return a;
}

Matrix matrix_in(const F64& a) {
  if (a.ndim() != 2) throw Error("expected a 2-D array");
  Matrix m(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)));
  std::copy(a.data(), a.data() + a.size(), m.data().begin());
  return m;
}

F64 matrix_out(const Matrix& m) {
  F64 a({m.rows(), m.cols()});
  std::copy(m.data().begin(), m.data().end(), a.mutable_data());
  return a;
}

std::vector<double> vector_in(const F64& a) {
  if (a.ndim() != 1) throw Error("expected a 1-D array");
  return {a.data(), a.data() + a.size()};
}

LabelVector labels_in(const I32& a) {
  if (a.ndim() != 1) throw Error("expected a 1-D label array");
  return {a.data(), a.data() + a.size()};
}

I32 labels_out(const LabelVector& y) {
  I32 a(static_cast<py::ssize_t>(y.size()));
  std::copy(y.begin(), y.end(), a.mutable_data());
  return a;
}

LabelSet set_in(const std::vector<std::size_t>& members, std::size_t width) {
  LabelSet s(width);
  for (auto c : members) {
    if (c >= width) throw Error("label set member out of range");
    s.insert(c);
  }
  return s;
}

py::dict bundle_out(const DatasetBundle& b) {
  py::dict d;
  d["train_student"] = table_out(b.train_student);
  d["train_teacher"] = table_out(b.train_teacher);
  d["test_student"] = table_out(b.test_student);
  d["test_teacher"] = table_out(b.test_teacher);
  d["train_labels"] = labels_out(b.train_labels);
  d["test_labels"] = labels_out(b.test_labels);
  d["prototypes"] = table_out(b.prototypes.table);
  d["class_names"] = b.class_names;
  return d;
}

py::dict round_out(const RoundRecord& r) {
  py::dict d;
  d["round"] = r.round;
  d["n_labeled"] = r.n_labeled;
  d["test_acc"] = r.test_acc;
  d["query_sec"] = r.query_sec;
  d["train_sec"] = r.train_sec;
  d["mean_overlap"] = r.diagnostics.mean_overlap;
  d["mean_symdiff"] = r.diagnostics.mean_symdiff;
  d["frac_top1_disagree"] = r.diagnostics.frac_top1_disagree;
  d["mean_js"] = r.diagnostics.mean_js;
  d["mean_conf_s"] = r.diagnostics.mean_conf_s;
  d["mean_conf_t"] = r.diagnostics.mean_conf_t;
  d["cov_s"] = r.cov_s;
  d["size_s"] = r.size_s;
  d["cov_t"] = r.cov_t;
  d["size_t"] = r.size_t_;
  return d;
}

py::dict result_out(const RunResult& r) {
  py::dict d;
  d["config"] = config_to_json(r.config);
  d["teacher_test_accuracy"] = r.teacher_test_accuracy;
  py::list seeds;
  for (const auto& s : r.seeds) {
    py::dict sd;
    sd["seed"] = s.seed;
    sd["aulc"] = s.aulc;
    sd["truncated"] = s.truncated;
    sd["flags"] = s.flags;
    py::list rounds;
    for (const auto& rec : s.rounds) rounds.append(round_out(rec));
    sd["rounds"] = rounds;
    seeds.append(sd);
  }
  d["seeds"] = seeds;
  py::list agg;
  for (const auto& row : r.aggregate.rows) {
    py::dict a;
    a["round"] = row.round;
    a["n_labeled"] = row.n_labeled;
    a["mean_acc"] = row.mean_acc;
    a["std_acc"] = row.std_acc;
    a["n_seeds"] = row.n_seeds;
    agg.append(a);
  }
  d["aggregate"] = agg;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Pool-based active-learning engine";
  m.attr("__version__") = kEngineVersion;

  static py::exception<CacheError> cache_error(m, "CacheError", PyExc_ValueError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const CacheError& e) {
      py::set_error(cache_error, e.what());
    } catch (const Error& e) {
      PyErr_SetString(PyExc_ValueError, e.what());
    }
  });

  m.def(
      "generate_synthetic",
      [](const std::string& spec_json) {
        return bundle_out(generate_synthetic(synthetic_spec_from_json(spec_json)));
      },
      py::arg("spec_json") = "{}", "Synthetic feature bundle as a dict of arrays.");

  m.def(
      "save_cache",
      [](const std::filesystem::path& path, const F32& table, std::optional<I32> labels,
         bool normalized) {
        std::optional<LabelVector> y;
        if (labels) y = labels_in(*labels);
        save_cache(table_in(table, normalized), y, path);
      },
      py::arg("path"), py::arg("table"), py::arg("labels") = py::none(),
      py::arg("normalized") = false);

  m.def(
      "load_cache",
      [](const std::filesystem::path& path) {
        auto [table, labels] = load_cache(path);
        py::object y = labels ? py::object(labels_out(*labels)) : py::object(py::none());
        return py::make_tuple(table_out(table), y, table.normalized);
      },
      py::arg("path"), "Returns (table, labels or None, normalized).");

  m.def(
      "l2_normalize", [](const F32& a) { return table_out(l2_normalize(table_in(a))); },
      py::arg("table"));

  m.def(
      "teacher_posterior",
      [](const F32& feats, const F32& prototypes, double tau) {
        auto x = table_in(feats, true);
        auto protos = table_in(prototypes, true);
        x.validate();
        protos.validate();
        const TeacherModel teacher(PrototypeTable{std::move(protos)}, tau);
        return matrix_out(teacher_posterior(teacher, x));
      },
      py::arg("features"), py::arg("prototypes"), py::arg("tau") = 0.01,
      "Zero-shot posteriors; both inputs must have unit-norm rows.");

  m.def(
      "nonconformity", [](const F64& post) { return matrix_out(nonconformity(matrix_in(post))); },
      py::arg("posteriors"));

  m.def(
      "calibrate_size",
      [](const F64& scores, double s, double tol) {
        return calibrate_size_target(matrix_in(scores), s, tol).q;
      },
      py::arg("scores"), py::arg("target_size"), py::arg("tol") = 0.05,
      "Threshold q whose mean set size is closest to the target.");

  m.def(
      "calibrate_coverage",
      [](const F64& scores_at_truth, double alpha) {
        return calibrate_coverage_target(vector_in(scores_at_truth), alpha).q;
      },
      py::arg("scores_at_truth"), py::arg("alpha") = 0.1);

  m.def(
      "mean_set_size", [](const F64& scores, double q) { return mean_set_size(matrix_in(scores), q); },
      py::arg("scores"), py::arg("q"));

  m.def(
      "predict_sets",
      [](const F64& scores, double q) {
        ConformalCalibrator cal;
        cal.q = q;
        cal.fitted = true;
        const auto sets = predict_sets(cal, matrix_in(scores));
        const std::size_t c = static_cast<std::size_t>(scores.shape(1));
        py::array_t<bool> out({sets.sets.size(), c});
        auto* o = out.mutable_data();
        for (std::size_t i = 0; i < sets.sets.size(); ++i) {
          for (std::size_t k = 0; k < c; ++k) o[i * c + k] = sets.sets[i].contains(k);
        }
        return out;
      },
      py::arg("scores"), py::arg("q"), "Boolean membership matrix of the sets.");

  m.def(
      "js_divergence",
      [](const F64& p, const F64& r) { return js_divergence(vector_in(p), vector_in(r)); },
      py::arg("p"), py::arg("r"));

  m.def(
      "ccma_score",
      [](const F64& ps, const F64& pt, const std::vector<std::size_t>& gs,
         const std::vector<std::size_t>& gt) {
        const auto s = vector_in(ps), t = vector_in(pt);
        const auto rec = ccma_score(s, t, set_in(gs, s.size()), set_in(gt, t.size()));
        py::dict d;
        d["delta"] = rec.delta;
        d["w_js"] = rec.w_js;
        d["js"] = rec.js;
        d["h_s"] = rec.h_s;
        d["conf_s"] = rec.conf_s;
        d["conf_t"] = rec.conf_t;
        d["omega_size"] = rec.omega_size;
        d["overlap"] = rec.overlap;
        d["symdiff"] = rec.symdiff;
        return d;
      },
      py::arg("p_student"), py::arg("p_teacher"), py::arg("set_student"), py::arg("set_teacher"));

  m.def(
      "run_experiment",
      [](const std::string& config_json, std::optional<std::filesystem::path> out, bool force) {
        RunResult r;
        {
          py::gil_scoped_release release;
          r = run_experiment(config_from_json(config_json));
          if (out) write_report(r, *out, force);
        }
        return result_out(r);
      },
      py::arg("config_json") = "{}", py::arg("out") = py::none(), py::arg("force") = false,
      "Runs every seed of the config; writes a report directory when `out` is given.");

  m.def(
      "resolve_config",
      [](const std::string& config_json) {
        const auto cfg = config_from_json(config_json);
        return config_to_json(resolve_config(cfg, load_dataset(cfg.dataset)));
      },
      py::arg("config_json") = "{}");

  m.def(
      "compute_aulc", [](const F64& acc) { return compute_aulc(vector_in(acc)); },
      py::arg("accuracies"));

  m.def(
      "labels_to_accuracy",
      [](const std::vector<std::pair<std::size_t, double>>& curve, double target, bool exact) {
        return labels_to_accuracy(curve, target, exact);
      },
      py::arg("curve"), py::arg("target"), py::arg("exact_rounds") = false,
      "Smallest label count reaching the target accuracy, or None.");
}
