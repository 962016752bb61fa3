#include <doctest.h>

#include <cmath>
#include <set>

#include "csme/simlab.hpp"

using namespace csme;

TEST_CASE("design ids parse and list") {
  CHECK(parse_design_id("sim1").has_value());
  CHECK(parse_design_id("two_phase").has_value());
  CHECK_FALSE(parse_design_id("sim9").has_value());
  CHECK(known_design_names().size() == 8);
}

TEST_CASE("first study generator reproduces the stated exposure reliability") {
  StudyDesign design = make_design(DesignId::sim1, 200000, 1, 5);
  ReplicateData rd = generate(design, 0);
  const auto& a = rd.data.true_exposures().col(0);
  const auto& astar = rd.data.a_star().col(0);
  const double va = (a.array() - a.mean()).square().sum() / (a.size() - 1);
  const double vs = (astar.array() - astar.mean()).square().sum() / (astar.size() - 1);
  // analytic: (1/12 + 0.25) / (1/12 + 0.25 + 0.05) = 0.8696
  CHECK(va / vs == doctest::Approx(0.8696).epsilon(0.01));
}

TEST_CASE("second and third study generators reproduce their stated reliabilities") {
  auto reliability = [](const ReplicateData& rd, Index col) {
    const auto a = rd.data.true_exposures().col(col);
    const auto astar = rd.data.a_star().col(col);
    const double va = (a.array() - a.mean()).square().sum() / (a.size() - 1);
    const double vs = (astar.array() - astar.mean()).square().sum() / (astar.size() - 1);
    return va / vs;
  };
  StudyDesign s2 = make_design(DesignId::sim2, 300000, 1, 19);
  CHECK(reliability(generate(s2, 0), 0) == doctest::Approx(0.84).epsilon(0.01));
  StudyDesign s3 = make_design(DesignId::sim3, 300000, 1, 19);
  CHECK(reliability(generate(s3, 0), 0) == doctest::Approx(0.69).epsilon(0.01));
}

TEST_CASE("third study generator implies the stated msm") {
  StudyDesign design = make_design(DesignId::sim3, 1000000, 1, 6);
  ReplicateData rd = generate(design, 0);
  const auto& l = rd.data.l();
  double acc0 = 0.0, acc1 = 0.0;
  for (Index i = 0; i < rd.data.n(); ++i) {
    const double p0 = 0.35 + 0.25 * l(i, 0) + 0.2 * l(i, 1);
    const double p1 = p0 + 0.15 + 0.05 * l(i, 0) + 0.1 * l(i, 1);
    acc0 += p0;
    acc1 += p1;
  }
  const double n = static_cast<double>(rd.data.n());
  CHECK(acc0 / n == doctest::Approx(0.475).epsilon(0.005));
  CHECK((acc1 - acc0) / n == doctest::Approx(0.175).epsilon(0.005));
}

TEST_CASE("second study generator conditional variance is one") {
  StudyDesign design = make_design(DesignId::sim2, 1000000, 1, 7);
  design.groups[0].gen.sigma2_me = 0.0;
  ReplicateData rd = generate(design, 0);
  // residual variance of A1 on (1, L^2)
  const Index n = rd.data.n();
  MatrixXd x(n, 2);
  x.col(0).setOnes();
  x.col(1) = rd.data.l().col(0).array().square();
  const VectorXd a1 = rd.data.a_star().col(0);
  const VectorXd coef = (x.transpose() * x).ldlt().solve(x.transpose() * a1);
  const double rss = (a1 - x * coef).squaredNorm() / n;
  const double se = std::sqrt(2.0 / n);
  CHECK(std::abs(rss - 1.0) <= 4.0 * se);
}

TEST_CASE("reliability inversion") {
  CHECK(reliability_to_sigma(DesignId::sim2, 1.0) == 0.0);
  const double var_a = 2.0 * 0.1296 * 0.1296 + 1.0;
  CHECK(reliability_to_sigma(DesignId::sim2, 0.5) == doctest::Approx(var_a).epsilon(1e-12));
  // The design's stated reliability of 0.84 inverts back to its error variance.
  const double r_star = var_a / (var_a + 0.2);
  CHECK(r_star == doctest::Approx(0.84).epsilon(3e-3));
  CHECK(reliability_to_sigma(DesignId::sim2, r_star) == doctest::Approx(0.2).epsilon(1e-10));
  CHECK_THROWS_AS(reliability_to_sigma(DesignId::sim2, 0.0), ArgumentError);
  CHECK_THROWS_AS(reliability_to_sigma(DesignId::sim2, 1.2), ArgumentError);
}

TEST_CASE("generators are deterministic in (seed, replicate)") {
  StudyDesign design = make_design(DesignId::sim2, 100, 1, 11);
  ReplicateData a = generate(design, 3);
  ReplicateData b = generate(design, 3);
  CHECK((a.data.y() - b.data.y()).cwiseAbs().maxCoeff() == 0.0);
  CHECK((a.data.a_star() - b.data.a_star()).cwiseAbs().maxCoeff() == 0.0);
  ReplicateData c = generate(design, 4);
  CHECK((a.data.y() - c.data.y()).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("study runs are bit-identical across repeats and exec modes") {
  StudyDesign design = make_design(DesignId::sim3, 200, 3, 17);
  MetricsTable t1 = run_study(design, ExecMode::parallel);
  MetricsTable t2 = run_study(design, ExecMode::parallel);
  MetricsTable t3 = run_study(design, ExecMode::serial);
  REQUIRE(t1.rows.size() == t2.rows.size());
  REQUIRE(t1.rows.size() == t3.rows.size());
  for (std::size_t i = 0; i < t1.rows.size(); ++i) {
    CHECK(t1.rows[i].bias == t2.rows[i].bias);
    CHECK(t1.rows[i].ase_uc == t2.rows[i].ase_uc);
    CHECK(t1.rows[i].bias == t3.rows[i].bias);
    CHECK(t1.rows[i].ase_uc == t3.rows[i].ase_uc);
  }
}

TEST_CASE("sim3 study has twelve method-by-scenario rows") {
  StudyDesign design = make_design(DesignId::sim3, 100, 1, 1);
  std::size_t cells = 0;
  for (const auto& g : design.groups) cells += g.methods.size();
  CHECK(cells == 12);
  std::set<std::string> scenarios;
  for (const auto& cell : design.groups[0].methods) scenarios.insert(cell.cell);
  CHECK(scenarios == std::set<std::string>{"both", "ps_only", "or_only", "neither"});
}

TEST_CASE("single-replicate studies degenerate cleanly") {
  StudyDesign design = make_design(DesignId::sim3, 300, 1, 23);
  MetricsTable t = run_study(design, ExecMode::parallel, true);
  for (const auto& row : t.rows) {
    if (row.n_converged == 1) {
      CHECK(row.ese == 0.0);
      CHECK(std::isfinite(row.bias));
    }
  }
  CHECK_FALSE(t.audit.empty());
}

TEST_CASE("two-phase generation selects all cases and weights controls") {
  StudyDesign design = make_design(DesignId::two_phase, 2000, 1, 29);
  ReplicateData rd = generate(design, 0);
  REQUIRE(rd.data.has_sample_weight());
  REQUIRE(rd.data.has_case_indicator());
  Index cases = 0;
  for (Index i = 0; i < rd.data.n(); ++i) {
    if (rd.data.case_indicator()(i) == 1) {
      ++cases;
      CHECK(rd.data.sample_weight()(i) == 1.0);
    } else {
      CHECK(rd.data.sample_weight()(i) > 1.0);
    }
  }
  CHECK(cases > 0);
  CHECK(rd.data.n() < 2000);  // controls were subsampled
}

TEST_CASE("pilot-estimated error covariance is positive semidefinite and near truth") {
  StudyDesign design = make_design(DesignId::estimated_sigma, 100, 1, 31);
  design.groups[0].gen.pilot_n = 4000;
  ReplicateData rd = generate(design, 0);
  CHECK(rd.sigma_cs.rows() == 2);
  CHECK(rd.sigma_cs(0, 0) == doctest::Approx(0.2).epsilon(0.15));
  CHECK(rd.sigma_cs(1, 1) == doctest::Approx(0.2).epsilon(0.15));
}

TEST_CASE("multiplicative design targets the requested reliability") {
  StudyDesign design = make_design(DesignId::multiplicative, 200000, 1, 37);
  // group 0 is r=0.5
  ReplicateData rd = generate(design, 0, 0);
  const auto& a = rd.data.true_exposures().col(0);
  const auto& astar = rd.data.a_star().col(0);
  const double va = (a.array() - a.mean()).square().sum() / (a.size() - 1);
  const double vs = (astar.array() - astar.mean()).square().sum() / (astar.size() - 1);
  CHECK(va / vs == doctest::Approx(0.5).epsilon(0.03));
}

TEST_CASE("dose-response bias curves are emitted for multi-point grids") {
  StudyDesign design = make_design(DesignId::sim1, 400, 2, 41);
  MatrixXd grid(5, 1);
  grid << -1.0, -0.25, 0.5, 1.25, 2.0;
  for (auto& cell : design.groups[0].methods) cell.request.dose_grid = grid;
  for (auto& cell : design.groups[0].methods) cell.estimand.index = 3;  // closest to a=1
  MetricsTable t = run_study(design, ExecMode::parallel);
  CHECK(t.curve.size() == 5 * design.groups[0].methods.size());
  std::set<double> as;
  for (const auto& p : t.curve) as.insert(p.a);
  CHECK(as == std::set<double>{-1.0, -0.25, 0.5, 1.25, 2.0});
}

TEST_CASE("failed replicates are excluded and counted") {
  StudyDesign design = make_design(DesignId::sim2, 300, 4, 43);
  // An unattainable tolerance makes the cs cells fail deterministically.
  for (auto& cell : design.groups[0].methods)
    if (cell.label == "CS IPW") {
      cell.request.solve.tol = 1e-300;
      cell.request.solve.max_iter = 3;
    }
  MetricsTable t = run_study(design, ExecMode::parallel);
  bool saw_failed_cs = false;
  for (const auto& row : t.rows) {
    if (row.method == "CS IPW") {
      CHECK(row.n_failed == 4);
      CHECK(row.warn);
      saw_failed_cs = true;
    }
    if (row.method == "Oracle IPW") CHECK(row.n_converged == 4);
  }
  CHECK(saw_failed_cs);
}
