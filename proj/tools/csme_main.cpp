#include <omp.h>

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <sstream>

#include "csme/config.hpp"

namespace fs = std::filesystem;
using namespace csme;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitNumeric = 2;

struct Manifest {
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;

  std::string line() const {
    std::ostringstream os;
    os << "# config=" << std::hex << config_hash << std::dec << " seed=" << seed
       << " version=" << kVersion;
    return os.str();
  }
};

std::ofstream open_out(const fs::path& dir, const std::string& name) {
  fs::create_directories(dir);
  std::ofstream out(dir / name, std::ios::binary);  // binary: LF line endings everywhere
  if (!out) throw DataError("cannot write output file: " + (dir / name).string());
  return out;
}

void write_manifest_json(const fs::path& dir, const Manifest& m, const std::string& command) {
  json j;
  j["config_hash"] = m.config_hash;
  j["seed"] = m.seed;
  j["version"] = kVersion;
  j["command"] = command;
  auto out = open_out(dir, "run_manifest.json");
  out << j.dump(2) << "\n";
}

json matrix_to_json(const MatrixXd& m) {
  json rows = json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Index c = 0; c < m.cols(); ++c) row.push_back(m(i, c));
    rows.push_back(row);
  }
  return rows;
}

void write_estimates_csv(std::ofstream& out, const Manifest& man, const EstimatorRequest& req,
                         const EstimationResult& res) {
  out << man.line() << "\n";
  out << "method,correction,parameter,estimate,se_uc,se_bc,ci_uc_lo,ci_uc_hi,ci_bc_lo,ci_bc_hi\n";
  const auto& fit = res.fit;
  auto emit = [&](const std::string& name, double est, double se_uc, double se_bc) {
    const Interval ci_uc = std::isfinite(se_uc) ? wald_ci(est, se_uc, req.alpha)
                                                : Interval{std::nan(""), std::nan("")};
    const Interval ci_bc = std::isfinite(se_bc) ? wald_ci(est, se_bc, req.alpha)
                                                : Interval{std::nan(""), std::nan("")};
    out << method_name(req.method) << "," << correction_name(req.correction) << "," << name << ","
        << format_double(est) << "," << format_double(se_uc) << "," << format_double(se_bc) << ","
        << format_double(ci_uc.lo) << "," << format_double(ci_uc.hi) << ","
        << format_double(ci_bc.lo) << "," << format_double(ci_bc.hi) << "\n";
  };
  for (const auto& blk : fit.theta.blocks.blocks()) {
    for (Index k = 0; k < blk.size; ++k) {
      const Index idx = blk.offset + k;
      const double se_uc =
          fit.vcov_uc ? std::sqrt(std::max(0.0, (*fit.vcov_uc)(idx, idx))) : std::nan("");
      const double se_bc =
          fit.vcov_bc ? std::sqrt(std::max(0.0, (*fit.vcov_bc)(idx, idx))) : std::nan("");
      emit(blk.name + "[" + std::to_string(k) + "]", fit.theta.values(idx), se_uc, se_bc);
    }
  }
  for (const auto& c : res.contrasts)
    emit("eta[" + std::to_string(c.g1) + "]-eta[" + std::to_string(c.g0) + "]", c.estimate,
         c.se_uc, c.se_bc);
}

void write_dose_csv(std::ofstream& out, const Manifest& man, const Dataset& data,
                    const DoseResponse& dose, int sigma_index = -1) {
  out << man.line() << "\n";
  out << (sigma_index >= 0 ? "sigma_index," : "");
  for (const auto& name : data.exposure_names()) out << "a_" << name << ",";
  out << "estimate,se_uc,ci_uc_lo,ci_uc_hi,se_bc,ci_bc_lo,ci_bc_hi\n";
  for (Index g = 0; g < dose.grid.rows(); ++g) {
    if (sigma_index >= 0) out << sigma_index << ",";
    for (Index j = 0; j < dose.grid.cols(); ++j) out << format_double(dose.grid(g, j)) << ",";
    out << format_double(dose.estimate(g)) << "," << format_double(dose.se_uc(g)) << ","
        << format_double(dose.ci_uc[static_cast<std::size_t>(g)].lo) << ","
        << format_double(dose.ci_uc[static_cast<std::size_t>(g)].hi) << ","
        << format_double(dose.se_bc(g)) << ","
        << format_double(dose.ci_bc[static_cast<std::size_t>(g)].lo) << ","
        << format_double(dose.ci_bc[static_cast<std::size_t>(g)].hi) << "\n";
  }
}

void write_covariance_json(const fs::path& dir, const Manifest& man, const FitResult& fit) {
  json j;
  j["manifest"] = {{"config_hash", man.config_hash}, {"seed", man.seed}, {"version", kVersion}};
  j["converged"] = fit.converged;
  j["iterations"] = fit.iterations;
  j["max_residual"] = fit.max_residual;
  j["bread_condition"] = fit.bread_condition;
  json blocks = json::array();
  for (const auto& b : fit.theta.blocks.blocks())
    blocks.push_back({{"name", b.name}, {"offset", b.offset}, {"size", b.size}});
  j["blocks"] = blocks;
  json theta = json::array();
  for (Index k = 0; k < fit.theta.values.size(); ++k) theta.push_back(fit.theta.values(k));
  j["theta"] = theta;
  if (fit.vcov_uc) j["vcov_uc"] = matrix_to_json(*fit.vcov_uc);
  if (fit.vcov_bc) j["vcov_bc"] = matrix_to_json(*fit.vcov_bc);
  auto out = open_out(dir, "covariance.json");
  out << j.dump(2) << "\n";
}

int cmd_fit(const std::string& config_path, const std::string& out_override) {
  RunConfig cfg = parse_run_config(config_path);
  const fs::path dir = !out_override.empty() ? fs::path(out_override)
                       : cfg.out_dir          ? fs::path(*cfg.out_dir)
                                              : fs::path(".");
  Manifest man{hash_file(config_path), cfg.seed};

  CsvTable table = read_csv(cfg.data_path);
  Dataset data = load_dataset(table, cfg.columns);

  const auto sigmas = resolve_sigma_grid(cfg.sigma, data);
  if (sigmas.size() != 1)
    throw ArgumentError("fit requires a single Sigma_me (use the sensitivity command for grids)");
  EstimatorRequest req = cfg.request;
  req.sigma_me = sigmas.front();

  EstimationResult res = fit_estimator(req, data);

  auto est_out = open_out(dir, "estimates.csv");
  write_estimates_csv(est_out, man, req, res);
  if (res.dose) {
    auto dose_out = open_out(dir, "dose_response.csv");
    write_dose_csv(dose_out, man, data, *res.dose);
  }
  write_covariance_json(dir, man, res.fit);
  write_manifest_json(dir, man, "fit");

  if (!res.fit.converged) {
    std::cerr << "fit did not converge (max residual " << res.fit.max_residual << ")\n";
    return kExitNumeric;
  }
  return kExitOk;
}

void write_metrics_csv(std::ofstream& out, const Manifest& man, const MetricsTable& table) {
  out << man.line() << "\n";
  out << "cell,method,parameter,bias,ese,ase_uc,cov_uc,ase_bc,cov_bc,n_converged,n_failed,warn\n";
  for (const auto& r : table.rows) {
    out << r.cell << "," << r.method << "," << r.parameter << "," << format_double(r.bias) << ","
        << format_double(r.ese) << "," << format_double(r.ase_uc) << "," << format_double(r.cov_uc)
        << "," << format_double(r.ase_bc) << "," << format_double(r.cov_bc) << ","
        << r.n_converged << "," << r.n_failed << "," << (r.warn ? 1 : 0) << "\n";
  }
}

int cmd_simulate(const std::string& design_arg, Index n, int reps, std::uint64_t seed, bool audit,
                 const std::string& out_override) {
  StudyDesign design;
  std::uint64_t config_hash = 0;
  if (fs::exists(design_arg) && !parse_design_id(design_arg)) {
    design = parse_design_file(design_arg);
    if (n > 0) design.n = n;
    if (reps > 0) design.replicates = reps;
    if (seed > 0) design.seed = seed;
    config_hash = hash_file(design_arg);
  } else {
    auto id = parse_design_id(design_arg);
    if (!id) {
      std::cerr << "unknown design '" << design_arg << "'; available designs:";
      for (const auto& name : known_design_names()) std::cerr << " " << name;
      std::cerr << "\n";
      return kExitUsage;
    }
    design = make_design(*id, n, reps, seed > 0 ? seed : 1);
    std::ostringstream os;
    os << design_arg << "|" << design.n << "|" << design.replicates << "|" << design.seed;
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : os.str()) {
      h ^= c;
      h *= 1099511628211ull;
    }
    config_hash = h;
  }
  if (reps == 0 || design.replicates < 1) {
    std::cerr << "replicate count must be >= 1\n";
    return kExitUsage;
  }

  const fs::path dir = out_override.empty() ? fs::path(".") : fs::path(out_override);
  Manifest man{config_hash, design.seed};

  MetricsTable table = run_study(design, ExecMode::parallel, audit);

  auto out = open_out(dir, "metrics.csv");
  write_metrics_csv(out, man, table);
  if (audit) {
    auto aout = open_out(dir, "audit.csv");
    aout << man.line() << "\n";
    aout << "replicate,cell,method,parameter,estimate,se_uc,se_bc,converged\n";
    for (const auto& r : table.audit)
      aout << r.replicate << "," << r.cell << "," << r.method << "," << r.parameter << ","
           << format_double(r.estimate) << "," << format_double(r.se_uc) << ","
           << format_double(r.se_bc) << "," << (r.converged ? 1 : 0) << "\n";
  }
  if (!table.curve.empty()) {
    auto curve_out = open_out(dir, "dose_bias_curve.csv");
    curve_out << man.line() << "\n";
    curve_out << "a,method,bias\n";
    for (const auto& p : table.curve)
      curve_out << format_double(p.a) << "," << p.method << "," << format_double(p.bias) << "\n";
  }
  if (table.any_warning())
    std::cerr << "warning: some cells had more than 5% convergence failures (see warn column)\n";
  return kExitOk;
}

int cmd_sensitivity(const std::string& config_path, const std::string& out_override) {
  RunConfig cfg = parse_run_config(config_path);
  const fs::path dir = !out_override.empty() ? fs::path(out_override)
                       : cfg.out_dir          ? fs::path(*cfg.out_dir)
                                              : fs::path(".");
  Manifest man{hash_file(config_path), cfg.seed};

  CsvTable table = read_csv(cfg.data_path);
  Dataset data = load_dataset(table, cfg.columns);
  const auto sigmas = resolve_sigma_grid(cfg.sigma, data);
  if (sigmas.empty()) {
    std::cerr << "sensitivity grid is empty\n";
    return kExitUsage;
  }

  const auto cells = sensitivity_grid(cfg.request, data, sigmas);
  int ok = 0;
  auto out = open_out(dir, "sensitivity.csv");
  bool header_written = false;
  for (std::size_t k = 0; k < cells.size(); ++k) {
    const auto& cell = cells[k];
    if (!cell.result) {
      std::cerr << "sigma grid cell " << k << " failed: " << cell.error << "\n";
      continue;
    }
    ++ok;
    if (cell.result->dose) {
      if (!header_written) {
        out << man.line() << "\n";
        out << "sigma_index,";
        for (const auto& name : data.exposure_names()) out << "a_" << name << ",";
        out << "estimate,se_uc,ci_uc_lo,ci_uc_hi,se_bc,ci_bc_lo,ci_bc_hi\n";
        header_written = true;
      }
      const auto& dose = *cell.result->dose;
      for (Index g = 0; g < dose.grid.rows(); ++g) {
        out << k << ",";
        for (Index j = 0; j < dose.grid.cols(); ++j) out << format_double(dose.grid(g, j)) << ",";
        out << format_double(dose.estimate(g)) << "," << format_double(dose.se_uc(g)) << ","
            << format_double(dose.ci_uc[static_cast<std::size_t>(g)].lo) << ","
            << format_double(dose.ci_uc[static_cast<std::size_t>(g)].hi) << ","
            << format_double(dose.se_bc(g)) << ","
            << format_double(dose.ci_bc[static_cast<std::size_t>(g)].lo) << ","
            << format_double(dose.ci_bc[static_cast<std::size_t>(g)].hi) << "\n";
      }
    }
  }
  write_manifest_json(dir, man, "sensitivity");
  if (ok == 0) {
    std::cerr << "all sensitivity cells failed\n";
    return kExitNumeric;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Corrected-score causal estimators for mismeasured continuous exposures"};
  app.require_subcommand(1);
  app.fallthrough();

  int threads = 0;
  std::string out_dir;
  app.add_option("--threads", threads, "worker thread count (default: all cores)");
  app.add_option("--out", out_dir, "output directory");

  std::string fit_config;
  auto* fit = app.add_subcommand("fit", "fit estimators from a config file");
  fit->add_option("config", fit_config, "JSON run configuration")->required();

  std::string design_arg;
  Index sim_n = 0;
  int sim_r = -1;
  std::uint64_t sim_seed = 0;
  bool audit = false;
  auto* sim = app.add_subcommand("simulate", "run a built-in or file-defined study design");
  sim->add_option("design", design_arg, "design name or design file")->required();
  sim->add_option("--n", sim_n, "sample size override");
  sim->add_option("--R", sim_r, "replicate count override");
  sim->add_option("--seed", sim_seed, "seed override");
  sim->add_flag("--audit", audit, "write per-replicate estimates");

  std::string sens_config;
  auto* sens = app.add_subcommand("sensitivity", "repeat a fit over a Sigma_me grid");
  sens->add_option("config", sens_config, "JSON run configuration with a sigma grid")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return kExitUsage;
  }

  if (threads > 0) omp_set_num_threads(threads);

  try {
    if (*fit) return cmd_fit(fit_config, out_dir);
    if (*sim) return cmd_simulate(design_arg, sim_n, sim_r, sim_seed, audit, out_dir);
    if (*sens) return cmd_sensitivity(sens_config, out_dir);
  } catch (const ArgumentError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  }
  return kExitUsage;
}
