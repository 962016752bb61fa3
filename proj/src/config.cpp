#include "csme/config.hpp"

#include <algorithm>
#include <fstream>
#include <json.hpp>
#include <map>
#include <sstream>

#include "csme/rng.hpp"

namespace csme {

using nlohmann::json;

namespace {

json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config file: " + path);
  try {
    return json::parse(in, nullptr, true, true);  // allow comments
  } catch (const json::parse_error& e) {
    throw DataError(path + ": " + e.what());
  }
}

Link parse_link(const std::string& s, const std::string& where) {
  if (s == "identity") return Link::identity;
  if (s == "log") return Link::log_link;
  if (s == "logit") return Link::logit;
  throw ArgumentError(where + ": unknown link '" + s + "'");
}

std::string link_name(Link l) {
  switch (l) {
    case Link::identity: return "identity";
    case Link::log_link: return "log";
    case Link::logit: return "logit";
  }
  return "?";
}

// Terms are arrays of column names; powers come from repetition, so
// ["a", "a", "l1"] is a^2 * l1. No formula strings.
DesignSpec parse_design(const json& j, const std::vector<std::string>& covs,
                        const std::vector<std::string>& exps, const std::string& where) {
  DesignSpec spec;
  spec.intercept = j.value("intercept", true);
  if (!j.contains("terms")) return spec;
  for (const auto& jterm : j.at("terms")) {
    if (!jterm.is_array()) throw ArgumentError(where + ": each term must be a list of names");
    std::map<std::pair<bool, Index>, int> powers;
    std::vector<std::pair<bool, Index>> order;
    for (const auto& jf : jterm) {
      const std::string name = jf.get<std::string>();
      auto ci = std::find(covs.begin(), covs.end(), name);
      auto ei = std::find(exps.begin(), exps.end(), name);
      std::pair<bool, Index> key;
      if (ei != exps.end())
        key = {true, static_cast<Index>(ei - exps.begin())};
      else if (ci != covs.end())
        key = {false, static_cast<Index>(ci - covs.begin())};
      else
        throw ArgumentError(where + ": term references unknown column '" + name + "'");
      if (powers.find(key) == powers.end()) order.push_back(key);
      powers[key] += 1;
    }
    Term term;
    for (const auto& key : order)
      term.factors.push_back(Factor{key.first, key.second, powers[key]});
    spec.terms.push_back(std::move(term));
  }
  return spec;
}

json design_to_json_impl(const DesignSpec& spec, const std::vector<std::string>& covs,
                         const std::vector<std::string>& exps) {
  json j;
  j["intercept"] = spec.intercept;
  json terms = json::array();
  for (const auto& t : spec.terms) {
    json term = json::array();
    for (const auto& f : t.factors) {
      const std::string name = f.is_exposure ? exps.at(static_cast<std::size_t>(f.index))
                                             : covs.at(static_cast<std::size_t>(f.index));
      for (int p = 0; p < f.power; ++p) term.push_back(name);
    }
    terms.push_back(term);
  }
  j["terms"] = terms;
  return j;
}

MatrixXd parse_matrix(const json& j, const std::string& where) {
  if (!j.is_array() || j.empty()) throw ArgumentError(where + ": expected a matrix (array of rows)");
  const Index r = static_cast<Index>(j.size());
  const Index c = static_cast<Index>(j.at(0).size());
  MatrixXd m(r, c);
  for (Index i = 0; i < r; ++i) {
    const auto& row = j.at(static_cast<std::size_t>(i));
    if (static_cast<Index>(row.size()) != c) throw ArgumentError(where + ": ragged matrix rows");
    for (Index k = 0; k < c; ++k) m(i, k) = row.at(static_cast<std::size_t>(k)).get<double>();
  }
  return m;
}

MatrixXd parse_dose_grid(const json& j, Index m, const std::string& where) {
  if (j.contains("values")) {
    MatrixXd g = parse_matrix(j.at("values"), where + ".values");
    if (g.cols() != m) throw ArgumentError(where + ": grid width must equal the exposure count");
    return g;
  }
  if (m != 1) throw ArgumentError(where + ": from/to grids require a single exposure");
  const double from = j.at("from").get<double>();
  const double to = j.at("to").get<double>();
  const Index points = j.value("points", 41);
  if (points < 1) throw ArgumentError(where + ": points must be >= 1");
  MatrixXd g(points, 1);
  for (Index k = 0; k < points; ++k)
    g(k, 0) = points == 1 ? from : from + (to - from) * static_cast<double>(k) / (points - 1);
  return g;
}

}  // namespace

std::string design_to_json(const DesignSpec& spec, const std::vector<std::string>& covs,
                           const std::vector<std::string>& exps) {
  return design_to_json_impl(spec, covs, exps).dump();
}

DesignSpec design_from_json_string(const std::string& text, const std::vector<std::string>& covs,
                                   const std::vector<std::string>& exps) {
  return parse_design(json::parse(text), covs, exps, "design");
}

RunConfig parse_run_config(const std::string& path) {
  const json j = load_json(path);
  RunConfig cfg;
  try {
    const json& jd = j.at("data");
    cfg.data_path = jd.at("path").get<std::string>();
    const json& jc = jd.at("columns");
    cfg.columns.outcome = jc.at("outcome").get<std::string>();
    for (const auto& s : jc.value("covariates", json::array()))
      cfg.columns.covariates.push_back(s.get<std::string>());
    for (const auto& s : jc.at("exposures")) cfg.columns.exposures.push_back(s.get<std::string>());
    if (jc.contains("sample_weight") && !jc.at("sample_weight").is_null())
      cfg.columns.sample_weight = jc.at("sample_weight").get<std::string>();
    if (jc.contains("case") && !jc.at("case").is_null())
      cfg.columns.case_indicator = jc.at("case").get<std::string>();
    if (jc.contains("replicate_group") && !jc.at("replicate_group").is_null())
      cfg.columns.replicate_group = jc.at("replicate_group").get<std::string>();
    for (const auto& s : jc.value("true_exposures", json::array()))
      cfg.columns.true_exposures.push_back(s.get<std::string>());

    if (!j.contains("seed")) throw ArgumentError("config requires a seed (reproducibility)");
    cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.alpha = j.value("alpha", 0.05);
    if (j.contains("output")) cfg.out_dir = j.at("output").get<std::string>();

    const json& je = j.at("estimator");
    const std::string method = je.at("method").get<std::string>();
    if (method == "gformula")
      cfg.request.method = Method::gformula;
    else if (method == "ipw")
      cfg.request.method = Method::ipw;
    else if (method == "dr")
      cfg.request.method = Method::dr;
    else
      throw ArgumentError("estimator.method: unknown method '" + method + "'");

    const std::string corr = je.value("correction", "cs");
    if (corr == "oracle")
      cfg.request.correction = Correction::oracle;
    else if (corr == "naive")
      cfg.request.correction = Correction::naive;
    else if (corr == "cs")
      cfg.request.correction = Correction::cs;
    else if (corr == "rc")
      cfg.request.correction = Correction::rc;
    else if (corr == "simex")
      cfg.request.correction = Correction::simex;
    else
      throw ArgumentError("estimator.correction: unknown correction '" + corr + "'");

    const auto& covs = cfg.columns.covariates;
    const auto& exps = cfg.columns.exposures;
    if (je.contains("outcome")) {
      OutcomeModelSpec om;
      om.link = parse_link(je.at("outcome").value("link", "identity"), "estimator.outcome.link");
      om.design = parse_design(je.at("outcome"), covs, exps, "estimator.outcome");
      cfg.request.outcome = std::move(om);
    }
    if (je.contains("msm")) {
      MsmModelSpec mm;
      mm.link = parse_link(je.at("msm").value("link", "identity"), "estimator.msm.link");
      mm.design = parse_design(je.at("msm"), covs, exps, "estimator.msm");
      cfg.request.msm = std::move(mm);
    }
    if (je.contains("propensity")) {
      const json& jp = je.at("propensity");
      if (jp.is_object() && jp.value("known_sw", false)) {
        cfg.request.known_sw = true;
      } else {
        std::vector<DesignSpec> designs(exps.size());
        std::vector<bool> seen(exps.size(), false);
        for (const auto& jpd : jp) {
          const std::string ename = jpd.at("exposure").get<std::string>();
          auto it = std::find(exps.begin(), exps.end(), ename);
          if (it == exps.end())
            throw ArgumentError("estimator.propensity: unknown exposure '" + ename + "'");
          const std::size_t idx = static_cast<std::size_t>(it - exps.begin());
          designs[idx] = parse_design(jpd, covs, exps, "estimator.propensity");
          seen[idx] = true;
        }
        for (std::size_t k = 0; k < seen.size(); ++k)
          if (!seen[k])
            throw ArgumentError("estimator.propensity: missing design for exposure '" + exps[k] + "'");
        cfg.request.propensity_designs = std::move(designs);
      }
    }
    if (je.contains("mccs")) {
      cfg.request.mccs.replicates = je.at("mccs").value("replicates", 32);
      cfg.request.mccs.antithetic = je.at("mccs").value("antithetic", true);
    }
    if (je.contains("simex")) {
      const json& js = je.at("simex");
      if (js.contains("lambda_grid"))
        cfg.request.simex.lambda_grid = js.at("lambda_grid").get<std::vector<double>>();
      cfg.request.simex.replicates = js.value("replicates", 100);
    }
    if (je.contains("dose_grid"))
      cfg.request.dose_grid = parse_dose_grid(je.at("dose_grid"),
                                              static_cast<Index>(exps.size()), "estimator.dose_grid");
    if (je.contains("contrasts")) {
      for (const auto& jc2 : je.at("contrasts")) {
        if (!jc2.is_array() || jc2.size() != 2)
          throw ArgumentError("estimator.contrasts: entries must be [g1, g0] grid index pairs");
        cfg.request.contrasts.push_back({jc2.at(0).get<Index>(), jc2.at(1).get<Index>()});
      }
    }
    if (je.contains("sw_cap_quantile"))
      cfg.request.sw_cap_quantile = je.at("sw_cap_quantile").get<double>();
    cfg.request.alpha = cfg.alpha;
    cfg.request.mccs.seed = cfg.seed;
    cfg.request.simex.seed = mix_keys(cfg.seed, 0x51u);

    const json& jsig = j.at("sigma_me");
    int sources = 0;
    if (jsig.contains("matrix")) ++sources;
    if (jsig.contains("replicates")) ++sources;
    if (jsig.contains("grid")) ++sources;
    if (jsig.contains("grid_scales")) ++sources;
    if (sources != 1)
      throw ArgumentError("sigma_me: exactly one of matrix, replicates, grid, grid_scales");
    if (jsig.contains("matrix")) {
      cfg.sigma.kind = SigmaSource::Kind::literal;
      cfg.sigma.literal = parse_matrix(jsig.at("matrix"), "sigma_me.matrix");
    } else if (jsig.contains("replicates")) {
      cfg.sigma.kind = SigmaSource::Kind::replicates;
      cfg.sigma.replicates_path = jsig.at("replicates").get<std::string>();
      cfg.sigma.diagonal = jsig.value("diagonal", false);
    } else if (jsig.contains("grid")) {
      cfg.sigma.kind = SigmaSource::Kind::grid;
      for (const auto& jm : jsig.at("grid"))
        cfg.sigma.grid.push_back(parse_matrix(jm, "sigma_me.grid"));
    } else {
      cfg.sigma.kind = SigmaSource::Kind::grid_scales;
      cfg.sigma.grid_scales = jsig.at("grid_scales").get<std::vector<double>>();
    }
  } catch (const json::exception& e) {
    throw ArgumentError(path + ": " + e.what());
  }
  return cfg;
}

Dataset load_dataset(const CsvTable& table, const ColumnRoles& roles) {
  const Index n = table.n_rows();
  if (n == 0) throw DataError("dataset has no rows");

  VectorXd y = table.column_values(roles.outcome);
  MatrixXd l(n, static_cast<Index>(roles.covariates.size()));
  for (std::size_t c = 0; c < roles.covariates.size(); ++c)
    l.col(static_cast<Index>(c)) = table.column_values(roles.covariates[c]);
  MatrixXd a(n, static_cast<Index>(roles.exposures.size()));
  for (std::size_t c = 0; c < roles.exposures.size(); ++c)
    a.col(static_cast<Index>(c)) = table.column_values(roles.exposures[c]);

  std::optional<VectorXd> w;
  if (roles.sample_weight) w = table.column_values(*roles.sample_weight);
  std::optional<VectorXi> cases;
  if (roles.case_indicator) {
    VectorXd v = table.column_values(*roles.case_indicator);
    cases = v.cast<int>();
  }
  std::optional<VectorXi> groups;
  if (roles.replicate_group) {
    VectorXd v = table.column_values(*roles.replicate_group);
    groups = v.cast<int>();
  }
  std::optional<MatrixXd> truth;
  if (!roles.true_exposures.empty()) {
    if (roles.true_exposures.size() != roles.exposures.size())
      throw ArgumentError("true_exposures must match the exposure list length");
    MatrixXd t(n, static_cast<Index>(roles.true_exposures.size()));
    for (std::size_t c = 0; c < roles.true_exposures.size(); ++c)
      t.col(static_cast<Index>(c)) = table.column_values(roles.true_exposures[c]);
    truth = std::move(t);
  }
  return Dataset(std::move(y), std::move(l), std::move(a), roles.covariates, roles.exposures,
                 std::move(w), std::move(cases), std::move(groups), std::move(truth));
}

std::vector<MatrixXd> resolve_sigma_grid(const SigmaSource& source, const Dataset& data) {
  const Index m = data.n_exposures();
  switch (source.kind) {
    case SigmaSource::Kind::literal:
      return {source.literal};
    case SigmaSource::Kind::replicates: {
      // Pilot CSV layout: a replicate_group column plus the exposure columns.
      CsvTable pilot_csv = read_csv(source.replicates_path);
      VectorXd y = VectorXd::Zero(pilot_csv.n_rows());
      MatrixXd l = MatrixXd::Zero(pilot_csv.n_rows(), 0);
      MatrixXd a(pilot_csv.n_rows(), m);
      for (Index j = 0; j < m; ++j)
        a.col(j) = pilot_csv.column_values(data.exposure_names()[static_cast<std::size_t>(j)]);
      VectorXi groups = pilot_csv.column_values("replicate_group").cast<int>();
      Dataset pilot(std::move(y), std::move(l), std::move(a), {}, data.exposure_names(),
                    std::nullopt, std::nullopt, std::move(groups), std::nullopt);
      return {estimate_me_covariance(pilot, source.diagonal).sigma};
    }
    case SigmaSource::Kind::grid:
      return source.grid;
    case SigmaSource::Kind::grid_scales: {
      VectorXd var(m);
      for (Index j = 0; j < m; ++j) {
        const double mean = data.a_star().col(j).mean();
        var(j) = (data.a_star().col(j).array() - mean).square().sum() /
                 static_cast<double>(data.n() - 1);
      }
      std::vector<MatrixXd> out;
      for (double s : source.grid_scales) {
        MatrixXd sig = MatrixXd::Zero(m, m);
        for (Index j = 0; j < m; ++j) sig(j, j) = s * var(j);
        out.push_back(std::move(sig));
      }
      return out;
    }
  }
  throw ArgumentError("unknown sigma source");
}

StudyDesign parse_design_file(const std::string& path) {
  const json j = load_json(path);
  try {
    const std::string id_name = j.at("design").get<std::string>();
    auto id = parse_design_id(id_name);
    if (!id) throw ArgumentError(path + ": unknown design '" + id_name + "'");
    const Index n = j.value("n", 0);
    const int r = j.value("R", 0);
    const std::uint64_t seed = j.value("seed", 1);
    StudyDesign d = make_design(*id, n, r, seed);
    if (j.contains("dose_grid")) {
      // Applies to standardization-based cells; the point estimand tracks the
      // grid point closest to its target exposure value.
      for (auto& group : d.groups) {
        for (auto& cell : group.methods) {
          if (cell.request.method == Method::ipw) continue;
          const Index m = cell.request.dose_grid.cols() > 0 ? cell.request.dose_grid.cols() : 1;
          MatrixXd grid = parse_dose_grid(j.at("dose_grid"), m, "dose_grid");
          if (cell.estimand.kind == EstimandSpec::Kind::eta_point) {
            const double target = cell.request.dose_grid(cell.estimand.index, 0);
            Index best = 0;
            for (Index k = 1; k < grid.rows(); ++k)
              if (std::abs(grid(k, 0) - target) < std::abs(grid(best, 0) - target)) best = k;
            cell.estimand.index = best;
          }
          if (!cell.request.contrasts.empty()) {
            // Keep contrasts valid: anchor them to the closest grid points.
            for (auto& [g1, g0] : cell.request.contrasts) {
              const double t1 = cell.request.dose_grid(g1, 0);
              const double t0 = cell.request.dose_grid(g0, 0);
              Index b1 = 0, b0 = 0;
              for (Index k = 1; k < grid.rows(); ++k) {
                if (std::abs(grid(k, 0) - t1) < std::abs(grid(b1, 0) - t1)) b1 = k;
                if (std::abs(grid(k, 0) - t0) < std::abs(grid(b0, 0) - t0)) b0 = k;
              }
              g1 = b1;
              g0 = b0;
            }
          }
          cell.request.dose_grid = grid;
        }
      }
    }
    return d;
  } catch (const json::exception& e) {
    throw ArgumentError(path + ": " + e.what());
  }
}

std::uint64_t hash_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open file for hashing: " + path);
  std::uint64_t h = 1469598103934665603ull;
  char buf[4096];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
    if (!in) break;
  }
  return h;
}

}  // namespace csme
