#include "csme/simlab.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "csme/rng.hpp"

namespace csme {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

Term t_exp(Index e, int p = 1) { return Term{{Factor{true, e, p}}}; }
Term t_cov(Index c, int p = 1) { return Term{{Factor{false, c, p}}}; }
Term t_prod(std::initializer_list<Factor> fs) { return Term{std::vector<Factor>(fs)}; }

// ---- analytic generator moments -------------------------------------------------

double exposure_variance(DesignId id) {
  switch (id) {
    case DesignId::sim1:
      return 1.0 / 12.0 + 0.25;  // Var(L) + Var(A | L), L ~ U(0,1)
    case DesignId::sim3:
    case DesignId::two_phase:
      // Var(0.1 - 0.1 L1 + 0.3 L2) + 0.04 with L1 ~ Bern(1/2), sd(L2) = 0.16.
      // This parameterization reproduces the design's stated exposure
      // reliability of 0.69: 0.0448 / (0.0448 + 0.02).
      return 0.01 * 0.25 + 0.09 * 0.0256 + 0.04;
    case DesignId::positivity:
      // conditional mean 4 L^2: Var(4 L^2) + 1 with sd(L) = 0.36
      return 16.0 * 2.0 * 0.1296 * 0.1296 + 1.0;
    default:
      // sim2 family: Var(L^2) + 1 with sd(L) = 0.36. This parameterization
      // reproduces the design's stated exposure reliability of 0.84:
      // 1.0336 / (1.0336 + 0.2).
      return 2.0 * 0.1296 * 0.1296 + 1.0;
  }
}

}  // namespace

double reliability_to_sigma(DesignId id, double reliability) {
  if (!(reliability > 0.0) || reliability > 1.0)
    throw ArgumentError("reliability must be in (0, 1]");
  const double var_a = exposure_variance(id);
  return var_a * (1.0 - reliability) / reliability;
}

std::optional<DesignId> parse_design_id(const std::string& name) {
  if (name == "sim1") return DesignId::sim1;
  if (name == "sim2") return DesignId::sim2;
  if (name == "sim3") return DesignId::sim3;
  if (name == "reliability_sweep") return DesignId::reliability_sweep;
  if (name == "estimated_sigma") return DesignId::estimated_sigma;
  if (name == "positivity") return DesignId::positivity;
  if (name == "multiplicative") return DesignId::multiplicative;
  if (name == "two_phase") return DesignId::two_phase;
  return std::nullopt;
}

std::string design_id_name(DesignId id) {
  switch (id) {
    case DesignId::sim1: return "sim1";
    case DesignId::sim2: return "sim2";
    case DesignId::sim3: return "sim3";
    case DesignId::reliability_sweep: return "reliability_sweep";
    case DesignId::estimated_sigma: return "estimated_sigma";
    case DesignId::positivity: return "positivity";
    case DesignId::multiplicative: return "multiplicative";
    case DesignId::two_phase: return "two_phase";
  }
  return "?";
}

std::vector<std::string> known_design_names() {
  return {"sim1",            "sim2",          "sim3",       "reliability_sweep",
          "estimated_sigma", "positivity",    "multiplicative", "two_phase"};
}

// ---- generators ------------------------------------------------------------------

namespace {

Dataset gen_sim1(Index n, const GeneratorConfig& g, Rng& rng) {
  VectorXd y(n);
  MatrixXd l(n, 1), a(n, 1), astar(n, 1);
  const double me_sd = std::sqrt(g.sigma2_me);
  for (Index i = 0; i < n; ++i) {
    const double li = rng.uniform();
    const double ai = li + 0.5 * rng.normal();
    // Exposure-model parameters are variances (that fixes the design's stated
    // reliability of 0.87); the outcome noise is sd 0.16, which reproduces the
    // design's reported oracle standard errors.
    y(i) = 0.25 * ai + 0.5 * ai * ai - 0.5 * ai * ai * ai + li + 0.16 * rng.normal();
    l(i, 0) = li;
    a(i, 0) = ai;
    astar(i, 0) = ai + me_sd * rng.normal();
  }
  return Dataset(std::move(y), std::move(l), std::move(astar), {"l"}, {"a"}, std::nullopt,
                 std::nullopt, std::nullopt, std::move(a));
}

Dataset gen_sim2(Index n, const GeneratorConfig& g, Rng& rng) {
  VectorXd y(n);
  MatrixXd l(n, 1), a(n, 2), astar(n, 2);
  const double me_sd = std::sqrt(g.sigma2_me);
  const double mult_sd = std::sqrt(g.mult_sigma2);
  const double s = g.conditional_mean_scale;
  for (Index i = 0; i < n; ++i) {
    const double li = 0.36 * rng.normal();
    const double a1 = s * li * li + rng.normal();
    const double a2 = -s * li * li + rng.normal();
    y(i) = a1 + a2 + li + rng.normal();
    l(i, 0) = li;
    a(i, 0) = a1;
    a(i, 1) = a2;
    if (g.multiplicative) {
      astar(i, 0) = a1 * (1.0 + mult_sd * rng.normal());
      astar(i, 1) = a2 * (1.0 + mult_sd * rng.normal());
    } else {
      astar(i, 0) = a1 + me_sd * rng.normal();
      astar(i, 1) = a2 + me_sd * rng.normal();
    }
  }
  return Dataset(std::move(y), std::move(l), std::move(astar), {"l"}, {"a1", "a2"}, std::nullopt,
                 std::nullopt, std::nullopt, std::move(a));
}

Dataset gen_sim3(Index n, const GeneratorConfig& g, Rng& rng, bool with_case_indicator) {
  VectorXd y(n);
  MatrixXd l(n, 2), a(n, 1), astar(n, 1);
  VectorXi cases(n);
  const double me_sd = std::sqrt(g.sigma2_me);
  for (Index i = 0; i < n; ++i) {
    const double l1 = rng.bernoulli(0.5) ? 1.0 : 0.0;
    const double l2 = 0.16 * rng.normal();
    const double ai = 0.1 - 0.1 * l1 + 0.3 * l2 + 0.2 * rng.normal();
    double p = 0.35 + 0.15 * ai + 0.25 * l1 + 0.2 * l2 + 0.05 * ai * l1 + 0.1 * ai * l2;
    p = std::clamp(p, 0.0, 1.0);
    y(i) = rng.bernoulli(p) ? 1.0 : 0.0;
    cases(i) = static_cast<int>(y(i));
    l(i, 0) = l1;
    l(i, 1) = l2;
    a(i, 0) = ai;
    astar(i, 0) = ai + me_sd * rng.normal();
  }
  std::optional<VectorXi> ci;
  if (with_case_indicator) ci = std::move(cases);
  return Dataset(std::move(y), std::move(l), std::move(astar), {"l1", "l2"}, {"a"}, std::nullopt,
                 std::move(ci), std::nullopt, std::move(a));
}

// Pilot study with k replicate measurements per subject, used to estimate
// Sigma_me. Exposure mechanism matches the sim2 family.
MatrixXd pilot_sigma_estimate(const GeneratorConfig& g, Rng& rng) {
  const Index np = g.pilot_n;
  const Index k = g.pilot_k;
  const Index rows = np * k;
  VectorXd y = VectorXd::Zero(rows);
  MatrixXd l = MatrixXd::Zero(rows, 1);
  MatrixXd astar(rows, 2);
  VectorXi group(rows);
  const double me_sd = std::sqrt(g.sigma2_me);
  const double mult_sd = std::sqrt(g.mult_sigma2);
  const double s = g.conditional_mean_scale;
  Index r = 0;
  for (Index subject = 0; subject < np; ++subject) {
    const double li = 0.36 * rng.normal();
    const double a1 = s * li * li + rng.normal();
    const double a2 = -s * li * li + rng.normal();
    for (Index rep = 0; rep < k; ++rep) {
      if (g.multiplicative) {
        astar(r, 0) = a1 * (1.0 + mult_sd * rng.normal());
        astar(r, 1) = a2 * (1.0 + mult_sd * rng.normal());
      } else {
        astar(r, 0) = a1 + me_sd * rng.normal();
        astar(r, 1) = a2 + me_sd * rng.normal();
      }
      group(r) = static_cast<int>(subject);
      ++r;
    }
  }
  Dataset pilot(std::move(y), std::move(l), std::move(astar), {"l"}, {"a1", "a2"}, std::nullopt,
                std::nullopt, std::move(group), std::nullopt);
  return estimate_me_covariance(pilot).sigma;
}

}  // namespace

ReplicateData generate(const StudyDesign& design, std::size_t group_ordinal, int replicate) {
  if (group_ordinal >= design.groups.size()) throw ArgumentError("group ordinal out of range");
  const CellGroup& group = design.groups[group_ordinal];
  Rng rng(design.seed, static_cast<std::uint64_t>(group_ordinal) + 0x47u,
          static_cast<std::uint64_t>(replicate));

  switch (design.id) {
    case DesignId::sim1: {
      Dataset d = gen_sim1(design.n, group.gen, rng);
      MatrixXd sigma(1, 1);
      sigma << group.gen.sigma2_me;
      return {std::move(d), std::move(sigma)};
    }
    case DesignId::sim2:
    case DesignId::positivity:
    case DesignId::reliability_sweep: {
      Dataset d = gen_sim2(design.n, group.gen, rng);
      MatrixXd sigma = group.gen.sigma2_me * MatrixXd::Identity(2, 2);
      return {std::move(d), std::move(sigma)};
    }
    case DesignId::estimated_sigma:
    case DesignId::multiplicative: {
      Dataset d = gen_sim2(design.n, group.gen, rng);
      Rng pilot_rng(mix_keys(design.seed, 0x9119u + static_cast<std::uint64_t>(group_ordinal),
                             static_cast<std::uint64_t>(replicate)));
      MatrixXd sigma = pilot_sigma_estimate(group.gen, pilot_rng);
      return {std::move(d), std::move(sigma)};
    }
    case DesignId::sim3: {
      Dataset d = gen_sim3(design.n, group.gen, rng, false);
      MatrixXd sigma(1, 1);
      sigma << group.gen.sigma2_me;
      return {std::move(d), std::move(sigma)};
    }
    case DesignId::two_phase: {
      Dataset full = gen_sim3(design.n, group.gen, rng, true);
      // Case-cohort selection: every case plus a fixed-size random sub-cohort
      // of the stated fraction of controls.
      std::vector<bool> selected(static_cast<std::size_t>(design.n), false);
      std::vector<Index> controls;
      for (Index i = 0; i < design.n; ++i) {
        if (full.case_indicator()(i) == 1)
          selected[static_cast<std::size_t>(i)] = true;
        else
          controls.push_back(i);
      }
      const Index k = static_cast<Index>(
          std::llround(group.gen.subcohort_fraction * static_cast<double>(controls.size())));
      for (Index j = 0; j < k && j < static_cast<Index>(controls.size()); ++j) {
        const Index pick =
            j + static_cast<Index>(rng.uniform() * static_cast<double>(controls.size() - j));
        std::swap(controls[static_cast<std::size_t>(j)], controls[static_cast<std::size_t>(pick)]);
        selected[static_cast<std::size_t>(controls[static_cast<std::size_t>(j)])] = true;
      }
      Dataset d = two_phase_weights(full, selected);
      MatrixXd sigma(1, 1);
      sigma << group.gen.sigma2_me;
      return {std::move(d), std::move(sigma)};
    }
  }
  throw ArgumentError("unknown design id");
}

ReplicateData generate(const StudyDesign& design, int replicate) {
  return generate(design, 0, replicate);
}

// ---- built-in designs ---------------------------------------------------------------

namespace {

SolveOptions default_solve() { return SolveOptions{}; }

OutcomeModelSpec sim1_outcome() {
  OutcomeModelSpec m;
  m.design.intercept = true;
  m.design.terms = {t_exp(0, 1), t_exp(0, 2), t_exp(0, 3), t_cov(0, 1)};
  m.link = Link::identity;
  return m;
}

MsmModelSpec sim2_msm() {
  MsmModelSpec m;
  m.design.intercept = true;
  m.design.terms = {t_exp(0), t_exp(1)};
  m.link = Link::identity;
  return m;
}

DesignSpec sim2_ps_design() {
  DesignSpec d;
  d.intercept = true;
  d.terms = {t_cov(0, 2)};  // conditional mean linear in L^2
  return d;
}

OutcomeModelSpec sim3_outcome(bool correct) {
  OutcomeModelSpec m;
  m.design.intercept = true;
  if (correct)
    m.design.terms = {t_exp(0), t_cov(0), t_cov(1), t_prod({Factor{true, 0, 1}, Factor{false, 0, 1}}),
                      t_prod({Factor{true, 0, 1}, Factor{false, 1, 1}})};
  else
    m.design.terms = {t_exp(0), t_cov(1), t_prod({Factor{true, 0, 1}, Factor{false, 1, 1}})};
  m.link = Link::identity;
  return m;
}

DesignSpec sim3_ps_design(bool correct) {
  DesignSpec d;
  d.intercept = true;
  if (correct)
    d.terms = {t_cov(0), t_cov(1)};
  else
    d.terms = {t_cov(1)};
  return d;
}

MsmModelSpec sim3_msm() {
  MsmModelSpec m;
  m.design.intercept = true;
  m.design.terms = {t_exp(0)};
  m.link = Link::identity;
  return m;
}

MatrixXd grid01() {
  MatrixXd g(2, 1);
  g << 0.0, 1.0;
  return g;
}

EstimatorRequest base_request(Method method, Correction corr) {
  EstimatorRequest r;
  r.method = method;
  r.correction = corr;
  r.solve = default_solve();
  return r;
}

std::string corr_label(Correction c) {
  switch (c) {
    case Correction::oracle: return "Oracle";
    case Correction::naive: return "Naive";
    case Correction::cs: return "CS";
    case Correction::rc: return "RC";
    case Correction::simex: return "SIMEX";
  }
  return "?";
}

}  // namespace

StudyDesign make_design(DesignId id, Index n, int replicates, std::uint64_t seed) {
  StudyDesign d;
  d.id = id;
  d.seed = seed;

  auto defaults = [&](Index def_n, int def_r) {
    d.n = n > 0 ? n : def_n;
    d.replicates = replicates > 0 ? replicates : def_r;
  };

  switch (id) {
    case DesignId::sim1: {
      defaults(8000, 500);
      d.eta_truth = [](double a) { return 0.25 * a + 0.5 * a * a - 0.5 * a * a * a + 0.5; };
      CellGroup g;
      g.label = "main";
      g.gen.sigma2_me = 0.05;
      MatrixXd grid(1, 1);
      grid << 1.0;
      for (Correction c : {Correction::oracle, Correction::naive, Correction::rc, Correction::cs}) {
        MethodCell cell;
        cell.cell = "main";
        cell.label = corr_label(c) + " G-Formula";
        cell.request = base_request(Method::gformula, c);
        cell.request.outcome = sim1_outcome();
        cell.request.dose_grid = grid;
        cell.estimand = {EstimandSpec::Kind::eta_point, {"eta(1)"}, 0};
        cell.truth = VectorXd::Constant(1, 0.75);
        g.methods.push_back(std::move(cell));
      }
      d.groups.push_back(std::move(g));
      break;
    }

    case DesignId::sim2: {
      defaults(8000, 500);
      CellGroup g;
      g.label = "main";
      g.gen.sigma2_me = 0.2;
      for (Correction c : {Correction::oracle, Correction::naive, Correction::rc, Correction::cs}) {
        MethodCell cell;
        cell.cell = "main";
        cell.label = corr_label(c) + " IPW";
        cell.request = base_request(Method::ipw, c);
        cell.request.msm = sim2_msm();
        cell.request.propensity_designs = {sim2_ps_design(), sim2_ps_design()};
        cell.estimand = {EstimandSpec::Kind::gamma_all, {"gamma0", "gamma1", "gamma2"}, 0};
        cell.truth = Eigen::Vector3d(0.0, 1.0, 1.0);
        g.methods.push_back(std::move(cell));
      }
      d.groups.push_back(std::move(g));
      break;
    }

    case DesignId::sim3:
    case DesignId::two_phase: {
      defaults(2000, 500);
      d.eta_truth = [](double a) { return 0.475 + 0.175 * a; };
      CellGroup g;
      g.label = id == DesignId::two_phase ? "subcohort=10%" : "";
      g.gen.sigma2_me = 0.02;
      if (id == DesignId::two_phase) g.gen.subcohort_fraction = 0.10;

      struct Scenario {
        const char* label;
        bool or_correct;
        bool ps_correct;
      };
      const std::vector<Scenario> scenarios = id == DesignId::two_phase
          ? std::vector<Scenario>{{"subcohort=10%", true, true}}
          : std::vector<Scenario>{{"both", true, true},
                                  {"ps_only", false, true},
                                  {"or_only", true, false},
                                  {"neither", false, false}};
      const std::vector<Correction> corrections =
          id == DesignId::two_phase
              ? std::vector<Correction>{Correction::oracle, Correction::naive, Correction::cs}
              : std::vector<Correction>{Correction::cs};
      const std::vector<Method> methods =
          id == DesignId::two_phase
              ? std::vector<Method>{Method::dr}
              : std::vector<Method>{Method::dr, Method::gformula, Method::ipw};

      for (const auto& sc : scenarios) {
        for (Method m : methods) {
          for (Correction c : corrections) {
            MethodCell cell;
            cell.cell = sc.label;
            cell.label = corr_label(c) + std::string(" ") +
                         (m == Method::dr ? "DR" : m == Method::gformula ? "G-Formula" : "IPW");
            cell.request = base_request(m, c);
            if (m != Method::ipw) {
              cell.request.outcome = sim3_outcome(sc.or_correct);
              cell.request.dose_grid = grid01();
              cell.request.contrasts = {{1, 0}};
            }
            if (m != Method::gformula) {
              cell.request.msm = sim3_msm();
              cell.request.propensity_designs = {sim3_ps_design(sc.ps_correct)};
            }
            if (m == Method::ipw)
              cell.estimand = {EstimandSpec::Kind::gamma_single, {"gamma1"}, 1};
            else
              cell.estimand = {EstimandSpec::Kind::eta_contrast, {"gamma1"}, 0};
            cell.truth = VectorXd::Constant(1, 0.175);
            g.methods.push_back(std::move(cell));
          }
        }
      }
      d.groups.push_back(std::move(g));
      break;
    }

    case DesignId::reliability_sweep:
    case DesignId::multiplicative: {
      defaults(800, 300);
      for (double r : {0.5, 0.7, 0.9, 1.0}) {
        CellGroup g;
        std::ostringstream lbl;
        lbl << "r=" << r;
        g.label = lbl.str();
        if (id == DesignId::multiplicative) {
          g.gen.multiplicative = true;
          // Var(A*) = Var(A) + s * E[A^2]: invert for the target reliability.
          const double var_a = exposure_variance(DesignId::sim2);
          const double mean_a = 0.1296;  // E[A_1] = E[L^2] = Var(L)
          const double e_a2 = var_a + mean_a * mean_a;
          g.gen.mult_sigma2 = var_a * (1.0 - r) / (r * e_a2);
          g.gen.pilot_sigma = true;
          g.gen.pilot_n = 100;
          g.gen.pilot_k = 5;
        } else {
          g.gen.sigma2_me = reliability_to_sigma(DesignId::sim2, r);
        }
        for (Correction c : {Correction::naive, Correction::cs}) {
          MethodCell cell;
          cell.cell = g.label;
          cell.label = corr_label(c) + " IPW";
          cell.request = base_request(Method::ipw, c);
          cell.request.msm = sim2_msm();
          cell.request.propensity_designs = {sim2_ps_design(), sim2_ps_design()};
          cell.estimand = {EstimandSpec::Kind::gamma_single, {"gamma1"}, 1};
          cell.truth = VectorXd::Constant(1, 1.0);
          g.methods.push_back(std::move(cell));
        }
        d.groups.push_back(std::move(g));
      }
      break;
    }

    case DesignId::estimated_sigma: {
      defaults(800, 300);
      CellGroup g;
      g.label = "np=100";
      g.gen.sigma2_me = 0.2;
      g.gen.pilot_sigma = true;
      g.gen.pilot_n = 100;
      g.gen.pilot_k = 5;
      for (Correction c : {Correction::naive, Correction::cs}) {
        MethodCell cell;
        cell.cell = g.label;
        cell.label = corr_label(c) + " IPW";
        cell.request = base_request(Method::ipw, c);
        cell.request.msm = sim2_msm();
        cell.request.propensity_designs = {sim2_ps_design(), sim2_ps_design()};
        cell.estimand = {EstimandSpec::Kind::gamma_single, {"gamma1"}, 1};
        cell.truth = VectorXd::Constant(1, 1.0);
        g.methods.push_back(std::move(cell));
      }
      d.groups.push_back(std::move(g));
      break;
    }

    case DesignId::positivity: {
      defaults(800, 300);
      CellGroup g;
      g.label = "4L^2";
      g.gen.sigma2_me = 0.2;
      g.gen.conditional_mean_scale = 4.0;
      for (Correction c : {Correction::oracle, Correction::naive, Correction::cs}) {
        MethodCell cell;
        cell.cell = g.label;
        cell.label = corr_label(c) + " IPW";
        cell.request = base_request(Method::ipw, c);
        cell.request.msm = sim2_msm();
        cell.request.propensity_designs = {sim2_ps_design(), sim2_ps_design()};
        cell.estimand = {EstimandSpec::Kind::gamma_all, {"gamma0", "gamma1", "gamma2"}, 0};
        cell.truth = Eigen::Vector3d(0.0, 1.0, 1.0);
        g.methods.push_back(std::move(cell));
      }
      d.groups.push_back(std::move(g));
      break;
    }
  }
  return d;
}

// ---- study runner ---------------------------------------------------------------------

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

void fp_design(std::ostringstream& os, const DesignSpec& d) {
  os << (d.intercept ? "i" : "-");
  for (const auto& t : d.terms) {
    os << "(";
    for (const auto& f : t.factors) os << (f.is_exposure ? "e" : "c") << f.index << "^" << f.power;
    os << ")";
  }
}

// Identical requests produce identical fingerprints and are fitted once per
// replicate; scenario cells that share a request share its result exactly.
std::string fingerprint(const EstimatorRequest& r) {
  std::ostringstream os;
  os << method_name(r.method) << "|" << correction_name(r.correction) << "|";
  if (r.outcome) {
    os << "o" << static_cast<int>(r.outcome->link);
    fp_design(os, r.outcome->design);
  }
  if (r.msm) {
    os << "m" << static_cast<int>(r.msm->link);
    fp_design(os, r.msm->design);
  }
  for (const auto& p : r.propensity_designs) {
    os << "p";
    fp_design(os, p);
  }
  os << "|sw" << r.known_sw << "|B" << r.mccs.replicates << (r.mccs.antithetic ? "a" : "f");
  os << "|t" << r.solve.tol << "," << r.solve.max_iter;
  os << "|g";
  for (Index i = 0; i < r.dose_grid.rows(); ++i)
    for (Index j = 0; j < r.dose_grid.cols(); ++j) os << r.dose_grid(i, j) << ",";
  os << "|c";
  for (const auto& [a, b] : r.contrasts) os << a << ":" << b << ",";
  return os.str();
}

struct Extracted {
  VectorXd est;
  VectorXd se_uc;
  VectorXd se_bc;
};

Extracted extract_estimand(const EstimationResult& res, const EstimandSpec& spec) {
  Extracted out;
  auto take_gamma = [&](Index k) {
    const auto& blk = res.fit.theta.blocks.block("gamma");
    out.est(0) = res.fit.theta.values(blk.offset + k);
    out.se_uc(0) = res.fit.vcov_uc
                       ? std::sqrt(std::max(0.0, (*res.fit.vcov_uc)(blk.offset + k, blk.offset + k)))
                       : kNaN;
    out.se_bc(0) = res.fit.vcov_bc
                       ? std::sqrt(std::max(0.0, (*res.fit.vcov_bc)(blk.offset + k, blk.offset + k)))
                       : kNaN;
  };
  switch (spec.kind) {
    case EstimandSpec::Kind::gamma_all: {
      const auto& blk = res.fit.theta.blocks.block("gamma");
      out.est.resize(blk.size);
      out.se_uc.resize(blk.size);
      out.se_bc.resize(blk.size);
      for (Index k = 0; k < blk.size; ++k) {
        out.est(k) = res.fit.theta.values(blk.offset + k);
        out.se_uc(k) = res.fit.vcov_uc ? std::sqrt(std::max(
                                             0.0, (*res.fit.vcov_uc)(blk.offset + k, blk.offset + k)))
                                       : kNaN;
        out.se_bc(k) = res.fit.vcov_bc ? std::sqrt(std::max(
                                             0.0, (*res.fit.vcov_bc)(blk.offset + k, blk.offset + k)))
                                       : kNaN;
      }
      return out;
    }
    case EstimandSpec::Kind::gamma_single:
      out.est.resize(1);
      out.se_uc.resize(1);
      out.se_bc.resize(1);
      take_gamma(spec.index);
      return out;
    case EstimandSpec::Kind::eta_point:
      out.est.resize(1);
      out.se_uc.resize(1);
      out.se_bc.resize(1);
      out.est(0) = res.dose->estimate(spec.index);
      out.se_uc(0) = res.dose->se_uc(spec.index);
      out.se_bc(0) = res.dose->se_bc(spec.index);
      return out;
    case EstimandSpec::Kind::eta_contrast:
      out.est.resize(1);
      out.se_uc.resize(1);
      out.se_bc.resize(1);
      out.est(0) = res.contrasts.front().estimate;
      out.se_uc(0) = res.contrasts.front().se_uc;
      out.se_bc(0) = res.contrasts.front().se_bc;
      return out;
  }
  throw ArgumentError("unknown estimand kind");
}

struct CellRecord {
  Extracted values;
  VectorXd etas;  // dose-response estimates for curve output
  bool converged = false;
  bool failed = false;
};

double safe_sd(const std::vector<double>& xs, double mean) {
  if (xs.size() < 2) return 0.0;
  double acc = 0.0;
  for (double x : xs) acc += (x - mean) * (x - mean);
  return std::sqrt(acc / static_cast<double>(xs.size() - 1));
}

}  // namespace

MetricsTable run_study(const StudyDesign& design, ExecMode mode, bool keep_audit) {
  if (design.replicates < 1) throw ArgumentError("replicate count must be >= 1");
  if (design.groups.empty()) throw ArgumentError("study design has no cell groups");

  // Unique requests per group.
  struct UniqueReq {
    EstimatorRequest request;
    std::uint64_t fp_hash;
  };
  struct CellRef {
    std::size_t group;
    std::size_t method;   // index into group's methods
    std::size_t unique;   // index into group's unique requests
  };
  std::vector<std::vector<UniqueReq>> uniques(design.groups.size());
  std::vector<CellRef> cells;
  for (std::size_t g = 0; g < design.groups.size(); ++g) {
    std::map<std::string, std::size_t> seen;
    for (std::size_t mth = 0; mth < design.groups[g].methods.size(); ++mth) {
      const auto& cell = design.groups[g].methods[mth];
      const std::string fp = fingerprint(cell.request);
      auto it = seen.find(fp);
      std::size_t u;
      if (it == seen.end()) {
        u = uniques[g].size();
        seen.emplace(fp, u);
        uniques[g].push_back({cell.request, fnv1a(fp)});
      } else {
        u = it->second;
      }
      cells.push_back({g, mth, u});
    }
  }

  const int nreps = design.replicates;
  const std::size_t ncells = cells.size();
  std::vector<CellRecord> records(static_cast<std::size_t>(nreps) * ncells);

  auto run_replicate = [&](int rep) {
    for (std::size_t g = 0; g < design.groups.size(); ++g) {
      ReplicateData rd = generate(design, g, rep);
      std::vector<std::optional<EstimationResult>> results(uniques[g].size());
      for (std::size_t u = 0; u < uniques[g].size(); ++u) {
        EstimatorRequest req = uniques[g][u].request;
        req.sigma_me = rd.sigma_cs;
        req.alpha = design.alpha;
        req.mccs.seed = mix_keys(design.seed, static_cast<std::uint64_t>(rep) + 1, uniques[g][u].fp_hash);
        req.simex.seed = mix_keys(req.mccs.seed, 0x51u);
        try {
          EstimationResult res = fit_estimator(req, rd.data, mode);
          if (res.fit.converged) results[u] = std::move(res);
        } catch (const std::exception&) {
          // estimator failure for this replicate cell; counted below
        }
      }
      for (std::size_t c = 0; c < cells.size(); ++c) {
        if (cells[c].group != g) continue;
        CellRecord& rec = records[static_cast<std::size_t>(rep) * ncells + c];
        const auto& cell = design.groups[g].methods[cells[c].method];
        const auto& res = results[cells[c].unique];
        if (!res) {
          rec.failed = true;
          continue;
        }
        rec.values = extract_estimand(*res, cell.estimand);
        rec.converged = true;
        if (res->dose && res->dose->grid.rows() > 1 && res->dose->grid.cols() == 1)
          rec.etas = res->dose->estimate;
      }
    }
  };

  if (mode == ExecMode::serial) {
    for (int rep = 0; rep < nreps; ++rep) run_replicate(rep);
  } else {
#pragma omp parallel for schedule(dynamic)
    for (int rep = 0; rep < nreps; ++rep) run_replicate(rep);
  }

  // Aggregation in fixed order.
  MetricsTable table;
  const double z = normal_quantile(1.0 - design.alpha / 2.0);
  for (std::size_t c = 0; c < cells.size(); ++c) {
    const auto& group = design.groups[cells[c].group];
    const auto& cell = group.methods[cells[c].method];
    const Index npar = static_cast<Index>(cell.estimand.names.size());
    for (Index k = 0; k < npar; ++k) {
      MetricsRow row;
      row.cell = cell.cell;
      row.method = cell.label;
      row.parameter = cell.estimand.names[static_cast<std::size_t>(k)];
      std::vector<double> est, se_uc, se_bc;
      int n_cov_uc = 0, n_cov_bc = 0, n_se = 0;
      for (int rep = 0; rep < nreps; ++rep) {
        const CellRecord& rec = records[static_cast<std::size_t>(rep) * ncells + c];
        if (!rec.converged) continue;
        const double e = rec.values.est(k);
        est.push_back(e);
        const double su = rec.values.se_uc(k);
        const double sb = rec.values.se_bc(k);
        if (std::isfinite(su)) {
          se_uc.push_back(su);
          se_bc.push_back(sb);
          ++n_se;
          const double t = cell.truth(k);
          if (std::abs(e - t) <= z * su) ++n_cov_uc;
          if (std::abs(e - t) <= z * sb) ++n_cov_bc;
        }
      }
      row.n_converged = static_cast<int>(est.size());
      row.n_failed = nreps - row.n_converged;
      row.warn = row.n_failed > 0.05 * nreps;
      if (!est.empty()) {
        const double mean_est = std::accumulate(est.begin(), est.end(), 0.0) / est.size();
        row.bias = 100.0 * (mean_est - cell.truth(k));
        row.ese = 100.0 * safe_sd(est, mean_est);
      } else {
        row.bias = row.ese = kNaN;
      }
      if (n_se > 0) {
        row.ase_uc = 100.0 * std::accumulate(se_uc.begin(), se_uc.end(), 0.0) / n_se;
        row.ase_bc = 100.0 * std::accumulate(se_bc.begin(), se_bc.end(), 0.0) / n_se;
        row.cov_uc = 100.0 * n_cov_uc / n_se;
        row.cov_bc = 100.0 * n_cov_bc / n_se;
      } else {
        row.ase_uc = row.ase_bc = row.cov_uc = row.cov_bc = kNaN;
      }
      table.rows.push_back(std::move(row));
    }
  }

  if (keep_audit) {
    for (int rep = 0; rep < nreps; ++rep) {
      for (std::size_t c = 0; c < cells.size(); ++c) {
        const auto& group = design.groups[cells[c].group];
        const auto& cell = group.methods[cells[c].method];
        const CellRecord& rec = records[static_cast<std::size_t>(rep) * ncells + c];
        const Index npar = static_cast<Index>(cell.estimand.names.size());
        for (Index k = 0; k < npar; ++k) {
          AuditRow ar;
          ar.replicate = rep;
          ar.cell = cell.cell;
          ar.method = cell.label;
          ar.parameter = cell.estimand.names[static_cast<std::size_t>(k)];
          ar.converged = rec.converged;
          ar.estimate = rec.converged ? rec.values.est(k) : kNaN;
          ar.se_uc = rec.converged ? rec.values.se_uc(k) : kNaN;
          ar.se_bc = rec.converged ? rec.values.se_bc(k) : kNaN;
          table.audit.push_back(std::move(ar));
        }
      }
    }
  }

  // Dose-response bias curves for univariate grids with more than one point.
  if (design.eta_truth) {
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const auto& group = design.groups[cells[c].group];
      const auto& cell = group.methods[cells[c].method];
      if (cell.request.method == Method::ipw || cell.request.dose_grid.rows() <= 1 ||
          cell.request.dose_grid.cols() != 1)
        continue;
      const Index ng = cell.request.dose_grid.rows();
      VectorXd acc = VectorXd::Zero(ng);
      int count = 0;
      for (int rep = 0; rep < nreps; ++rep) {
        const CellRecord& rec = records[static_cast<std::size_t>(rep) * ncells + c];
        if (!rec.converged || rec.etas.size() != ng) continue;
        acc += rec.etas;
        ++count;
      }
      if (count == 0) continue;
      for (Index gp = 0; gp < ng; ++gp) {
        const double a = cell.request.dose_grid(gp, 0);
        table.curve.push_back({a, cell.label, acc(gp) / count - design.eta_truth(a)});
      }
    }
  }

  return table;
}

}  // namespace csme
