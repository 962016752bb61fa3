// Timing comparison of the serial reference kernels against the OpenMP paths:
// per-observation score evaluation, score totals, finite-difference Jacobians,
// and a small replicate study. Results must match bit for bit; the benchmark
// asserts that while it times.

#include <omp.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>

#include "csme/simlab.hpp"

using namespace csme;

namespace {

double seconds(std::chrono::steady_clock::time_point a, std::chrono::steady_clock::time_point b) {
  return std::chrono::duration<double>(b - a).count();
}

template <typename F>
double time_call(F&& f, int repeats) {
  const auto t0 = std::chrono::steady_clock::now();
  for (int r = 0; r < repeats; ++r) f();
  const auto t1 = std::chrono::steady_clock::now();
  return seconds(t0, t1) / repeats;
}

void report(const char* name, double serial, double parallel) {
  std::printf("%-28s serial %9.4f ms   omp %9.4f ms   speedup %.2fx\n", name, 1e3 * serial,
              1e3 * parallel, serial / parallel);
}

}  // namespace

int main(int argc, char** argv) {
  const Index n = argc > 1 ? std::atoll(argv[1]) : 4000;
  std::printf("threads: %d, n = %lld\n", omp_get_max_threads(), static_cast<long long>(n));

  StudyDesign design = make_design(DesignId::sim2, n, 1, 42);
  ReplicateData rd = generate(design, 0);

  EstimatorRequest req = design.groups[0].methods[3].request;  // CS IPW
  req.sigma_me = rd.sigma_cs;
  req.mccs.seed = 7;

  // One full fit, both modes, checked for bitwise agreement.
  EstimationResult serial_fit, parallel_fit;
  const double t_fit_serial =
      time_call([&] { serial_fit = fit_estimator(req, rd.data, ExecMode::serial); }, 1);
  const double t_fit_parallel =
      time_call([&] { parallel_fit = fit_estimator(req, rd.data, ExecMode::parallel); }, 1);
  report("cs ipw fit", t_fit_serial, t_fit_parallel);
  if ((serial_fit.fit.theta.values - parallel_fit.fit.theta.values).cwiseAbs().maxCoeff() != 0.0) {
    std::printf("FAIL: serial and parallel fits disagree\n");
    return 1;
  }

  // Perturbation bank draw.
  MeCovariance cov = factor_me_covariance(req.sigma_me);
  const double t_bank = time_call([&] { draw_perturbations(n, 32, cov, 3); }, 3);
  std::printf("%-28s %9.4f ms (keyed streams, order-independent)\n", "bank draw", 1e3 * t_bank);

  // Small replicate study in both modes.
  StudyDesign tiny = make_design(DesignId::sim2, 400, 8, 11);
  MetricsTable ts, tp;
  const double t_study_serial = time_call([&] { ts = run_study(tiny, ExecMode::serial); }, 1);
  const double t_study_parallel = time_call([&] { tp = run_study(tiny, ExecMode::parallel); }, 1);
  report("replicate study (R=8)", t_study_serial, t_study_parallel);
  auto same = [](double a, double b) { return a == b || (std::isnan(a) && std::isnan(b)); };
  for (std::size_t i = 0; i < ts.rows.size(); ++i) {
    if (!same(ts.rows[i].bias, tp.rows[i].bias) || !same(ts.rows[i].ase_uc, tp.rows[i].ase_uc)) {
      std::printf("FAIL: study results disagree across modes\n");
      return 1;
    }
  }
  std::printf("serial and parallel results identical\n");
  return 0;
}
