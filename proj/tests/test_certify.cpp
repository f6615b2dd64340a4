#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>

#include "contraction_kit/certify.hpp"
#include "test_support.hpp"

using namespace ckit;

namespace {

MetricField constant_metric(const Matrix& M) {
  return [M](const Vector&, double) { return M; };
}

BoundConstants base_constants() {
  BoundConstants c;
  c.m_under = 1.0;
  c.m_over = 1.0;
  c.alpha = 1.0;
  c.L_u = 1.0;
  c.refresh();
  return c;
}

/// Least-squares slope of log ‖e‖ against t over the samples with t ≤ t_max.
double decay_rate(const std::vector<double>& t, const std::vector<double>& e, double t_max) {
  double st = 0, sy = 0, stt = 0, sty = 0;
  int n = 0;
  for (std::size_t k = 0; k < t.size(); ++k) {
    if (t[k] > t_max || e[k] <= 0.0) continue;
    const double y = std::log(e[k]);
    st += t[k];
    sy += y;
    stt += t[k] * t[k];
    sty += t[k] * y;
    ++n;
  }
  return -(n * sty - st * sy) / (n * stt - st * st);
}

struct Oracle {
  SystemModel system;
  CvstemSolution solution;
  MetricField M;
  FeedbackLaw controller;
  std::vector<CertGridPoint> grid;
  double alpha = 0.0;
};

Oracle cvstem_oracle(SystemModel system, double alpha, double d_bar) {
  Oracle o;
  set_disturbance(system, d_bar, 0.0);
  o.system = system;
  o.alpha = alpha;
  CvstemProblem p;
  p.system = system;
  p.alpha = alpha;
  for (const Vector& x : lattice(system.state_box, 3)) p.grid.push_back({x, 0.0});
  o.solution = solve_cvstem(p);
  o.M = cvstem_metric(o.solution);
  o.controller = geodesic_controller(o.M, system, Matrix(), 8);
  o.grid = certification_grid(system, 3, 1000, {}, 1);
  return o;
}

}  // namespace

TEST(Constants, AlphaEllArithmetic) {
  BoundConstants c = base_constants();
  c.m_over = 4.0;
  c.eps1 = 0.25;
  EXPECT_DOUBLE_EQ(alpha_ell_deterministic(c), 0.5);
  c.alpha_d = 0.0;
  EXPECT_DOUBLE_EQ(alpha_ell_stochastic(c), alpha_ell_deterministic(c));
  c.alpha_d = 0.2;
  EXPECT_DOUBLE_EQ(alpha_ell_stochastic(c), 0.4);
}

TEST(Constants, DisturbanceConstantFromFields) {
  BoundConstants c = base_constants();
  c.g_bar = 1.0;
  c.alpha_G = 2.0;
  c.d_bar = 1.0;
  c.alpha_d = 1.0;
  c.refresh();
  EXPECT_DOUBLE_EQ(c.C, 3.0);
  c.g_bar = 0.0;
  c.d_bar = 0.0;
  c.refresh();
  EXPECT_DOUBLE_EQ(c.C, 0.0);
}

TEST(Constants, MetricErrorConversion) {
  EXPECT_DOUBLE_EQ(eps1_from_metric_error(2.0, 3.0, 0.1), 1.8);
  BoundConstants c = base_constants();
  c.eps0 = 0.7;
  apply_metric_error(c, 2.0, 3.0, 0.1);
  EXPECT_EQ(c.eps0, 0.0);
  EXPECT_DOUBLE_EQ(c.eps1, 1.8);
  EXPECT_DOUBLE_EQ(c.alpha_ell, 1.0 - 1.8);
}

TEST(Constants, ModeNames) {
  EXPECT_EQ(to_string(BoundMode::kStochastic), "stochastic");
  EXPECT_EQ(bound_mode_from_string("deterministic"), BoundMode::kDeterministic);
  EXPECT_THROW(bound_mode_from_string("fuzzy"), std::invalid_argument);
}

TEST(Envelope, DeterministicShapes) {
  BoundConstants c = base_constants();
  const Envelope pure = bound_envelope_det(c, 2.0);
  EXPECT_DOUBLE_EQ(pure(0.0), 2.0);
  EXPECT_NEAR(pure(1.5), 2.0 * std::exp(-1.5), 1e-15);

  c.d_bar = 0.3;
  const Envelope steady = bound_envelope_det(c, 0.0);
  EXPECT_NEAR(steady(50.0), 0.3, 1e-12);

  c.m_under = 0.5;
  c.m_over = 2.0;
  c.refresh();
  EXPECT_DOUBLE_EQ(bound_envelope_det(c, 1.0)(0.0), 1.0 / std::sqrt(0.5));
  EXPECT_NEAR(bound_envelope_det(c, 1.0)(80.0), 0.3 * 2.0, 1e-12);
}

TEST(Envelope, AffineInDisturbance) {
  BoundConstants c = base_constants();
  c.d_bar = 0.1;
  const double a = bound_envelope_det(c, 0.0)(3.0);
  c.d_bar = 0.5;
  const double b = bound_envelope_det(c, 0.0)(3.0);
  EXPECT_NEAR(b, 5.0 * a, 1e-14);
}

TEST(Envelope, RefusedWithoutMargin) {
  BoundConstants c = base_constants();
  c.eps1 = 2.0;
  c.refresh();
  EXPECT_THROW(bound_envelope_det(c, 1.0), CertificateRefused);
  c.mode = BoundMode::kStochastic;
  c.refresh();
  EXPECT_THROW(bound_envelope_stoch(c, 1.0), CertificateRefused);
}

TEST(Envelope, StochasticShapes) {
  BoundConstants c = base_constants();
  c.mode = BoundMode::kStochastic;
  c.refresh();
  const Envelope pure = bound_envelope_stoch(c, 2.0);
  EXPECT_DOUBLE_EQ(pure(0.0), 2.0);
  EXPECT_NEAR(pure(1.0), 2.0 * std::exp(-2.0), 1e-15);

  c.g_bar = 0.2;
  c.alpha_G = 10.0;
  c.alpha_d = 0.01;
  c.m_over = 2.0;
  c.refresh();
  const double C = 0.04 * (0.2 + 1.0);
  EXPECT_DOUBLE_EQ(c.C, C);
  EXPECT_NEAR(bound_envelope_stoch(c, 0.0)(100.0), C / (2.0 * (1.0 - 0.005)) * 2.0, 1e-14);
}

TEST(PathIntegrals, ConstantMetric) {
  const MetricField M = constant_metric(4.0 * Matrix::Identity(2, 2));
  Vector a(2), b(2);
  a << 1.0, 2.0;
  b << 4.0, 6.0;
  EXPECT_NEAR(path_length(M, a, b, 0.0, 5), 2.0 * 5.0, 1e-12);
  EXPECT_NEAR(path_energy(M, a, b, 0.0, 5), 4.0 * 25.0, 1e-12);
  EXPECT_EQ(path_length(M, a, a, 0.0, 5), 0.0);
}

TEST(PathIntegrals, EnergyWithinEigenvalueBounds) {
  MetricField M = [](const Vector& q, double) {
    Matrix m = Matrix::Identity(2, 2);
    m(0, 0) = 2.0 + std::sin(q(0));
    return m;
  };
  RngStream rng(3, 3);
  for (int i = 0; i < 50; ++i) {
    const Vector a = Vector::Random(2), b = Vector::Random(2);
    const double e = path_energy(M, a, b, 0.0, 32), d2 = (b - a).squaredNorm();
    EXPECT_LE(e, 3.0 * d2 + 1e-12);
    EXPECT_GE(e, 1.0 * d2 - 1e-12);
  }
}

TEST(Estimate, ConstantMetricAndExactController) {
  const SystemModel sys = make_lti();
  const MetricField M = constant_metric(3.0 * Matrix::Identity(2, 2));
  const FeedbackLaw u = geodesic_controller(M, sys, Matrix(), 4);
  const auto grid = certification_grid(sys, 3, 1000, {}, 5);
  EstimateOptions o;
  o.alpha = 1.0;
  const BoundConstants c = estimate_constants(M, u, &u, sys, grid, o);
  EXPECT_NEAR(c.m_under, 3.0, 1e-12);
  EXPECT_NEAR(c.m_over, 3.0, 1e-12);
  EXPECT_EQ(c.eps0, 0.0);
  EXPECT_EQ(c.eps1, 0.0);
  EXPECT_EQ(c.L_m, 0.0);
  EXPECT_DOUBLE_EQ(c.L_u, 1.0);
  EXPECT_DOUBLE_EQ(c.alpha_ell, 1.0);
}

TEST(Estimate, LearningErrorFit) {
  // u_L − u* = 0.2 e: ε₁ ≈ 0.2, ε₀ ≈ 0.
  const SystemModel sys = make_lti();
  const MetricField M = constant_metric(Matrix::Identity(2, 2));
  const FeedbackLaw ref = geodesic_controller(M, sys, Matrix(), 4);
  const FeedbackLaw learned = [&](const Vector& x, const Vector& xd, const Vector& ud, double t) {
    Vector u = ref(x, xd, ud, t);
    u(0) += 0.2 * (x - xd).norm();
    return u;
  };
  const BoundConstants c =
      estimate_constants(M, learned, &ref, sys, certification_grid(sys, 4, 1000, {}, 6), EstimateOptions{});
  EXPECT_NEAR(c.eps1, 0.2, 1e-9);
  EXPECT_NEAR(c.eps0, 0.0, 1e-9);
}

TEST(Estimate, MetricLipschitzConstant) {
  // M = (1 + x₁²) I on [−3, 3]: ∂M/∂x₁ = 2x₁ I has Lipschitz constant 2.
  const SystemModel sys = make_lti();
  MetricField M = [](const Vector& q, double) { return Matrix((1.0 + q(0) * q(0)) * Matrix::Identity(2, 2)); };
  const FeedbackLaw u = geodesic_controller(M, sys, Matrix(), 4);
  const BoundConstants c =
      estimate_constants(M, u, nullptr, sys, certification_grid(sys, 5, 1000, {}, 7), EstimateOptions{});
  EXPECT_NEAR(c.L_m, 2.0, 0.05);
  EXPECT_LE(c.L_m, 2.0 + 1e-4);
}

TEST(MetricError, MaxSpectralNorm) {
  const SystemModel sys = make_lti();
  const auto grid = certification_grid(sys, 3, 100, {}, 1);
  Matrix D = Matrix::Zero(2, 2);
  D(1, 1) = 0.25;
  EXPECT_NEAR(metric_error(constant_metric(Matrix::Identity(2, 2)),
                           constant_metric(Matrix::Identity(2, 2) + D), grid),
              0.25, 1e-12);
}

TEST(Grid, LatticeWithSeeds) {
  const SystemModel sys = make_pvtol();
  RngStream rng(2, 2);
  const auto seeds = testkit::random_samples(sys, 7, rng);
  const auto grid = certification_grid(sys, 2, 100000, seeds, 3);
  EXPECT_EQ(grid.size(), 64u);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const Sample& s = seeds[i % seeds.size()];
    EXPECT_LT((grid[i].x - grid[i].x_d - (s.x - s.x_d)).norm(), 1e-12);
    EXPECT_EQ(grid[i].u_d, s.u_d);
  }
}

TEST(Contraction, FiniteDifferenceRouteMatchesExact) {
  const SystemModel sys = testkit::make_curved_system();
  RngStream rng(4, 4);
  MetricNet metric = MetricNet::create(3, {8}, 5.0, 0.5, rng);
  ControllerNet controller = ControllerNet::create(3, 2, 4, {8}, rng);
  const auto grid = certification_grid(sys, 2, 100, testkit::random_samples(sys, 8, rng), 9);
  for (const auto& g : grid) {
    const Matrix exact = c_u_matrix(metric, controller, sys, {g.x, g.x_d, g.u_d, g.t}, 0.5);
    const Matrix fd = closed_loop_contraction(learned_metric(metric), learned_controller(controller), sys, g, 0.5);
    EXPECT_LT((exact - fd).norm(), 1e-5 * (1.0 + exact.norm()));
  }
  const ContractionSummary s = grid_contraction(metric, controller, sys, grid, 0.5);
  EXPECT_EQ(s.max_eigs.size(), grid.size());
  EXPECT_DOUBLE_EQ(s.worst, *std::max_element(s.max_eigs.begin(), s.max_eigs.end()));
}

TEST(Contraction, ScalarZeroNetsFullyContracting) {
  const SystemModel sys = make_scalar_test(-1.0);
  RngStream rng(1, 1);
  MetricNet metric = MetricNet::create(1, {4}, 1.0, 1.0, rng);
  metric.theta.set_zero();
  ControllerNet controller = ControllerNet::create(1, 1, 3, {4}, rng);
  controller.w2.set_zero();
  const ContractionSummary s =
      grid_contraction(metric, controller, sys, certification_grid(sys, 9, 100, {}, 2), 0.5);
  EXPECT_EQ(s.fraction_negative, 1.0);
  EXPECT_NEAR(s.worst, -1.0, 1e-12);
}

TEST(ClosedLoop, ScalarConvergesToDisturbanceBall) {
  // ẋ = −x + u + d, u = u_d − e: ė = −2e + d̄ has fixed point d̄/2.
  const SystemModel sys = make_scalar_test(-1.0);
  const FeedbackLaw u = geodesic_controller(constant_metric(Matrix::Identity(1, 1)), sys, Matrix(), 4);
  const TargetTrajectory target = generate_target(sys, 6.0, 3);
  ClosedLoopOptions o;
  o.horizon = 6.0;
  o.d_bar = 0.3;
  const ClosedLoopRun run = simulate_closed_loop(sys, u, target.input, target.x_d.front(),
                                                 Vector::Constant(1, 0.8), o, nullptr);
  EXPECT_DOUBLE_EQ(run.error.front(), 0.8);
  EXPECT_NEAR(run.error.back(), 0.15, 1e-5);
  const double expect_mid = 0.15 + (0.8 - 0.15) * std::exp(-2.0 * run.t[100]);
  EXPECT_NEAR(run.error[100], expect_mid, 1e-9);
}

TEST(ClosedLoop, StochasticNeedsStream) {
  SystemModel sys = make_scalar_test(-1.0);
  set_disturbance(sys, 0.0, 0.2);
  const FeedbackLaw u = geodesic_controller(constant_metric(Matrix::Identity(1, 1)), sys, Matrix(), 4);
  const TargetTrajectory target = generate_target(sys, 1.0, 3);
  ClosedLoopOptions o;
  o.mode = BoundMode::kStochastic;
  o.horizon = 1.0;
  EXPECT_THROW(simulate_closed_loop(sys, u, target.input, target.x_d.front(), Vector::Ones(1), o, nullptr),
               std::invalid_argument);
  RngStream a(1, streams::kWiener), b(1, streams::kWiener);
  const auto ra = simulate_closed_loop(sys, u, target.input, target.x_d.front(), Vector::Ones(1), o, &a);
  const auto rb = simulate_closed_loop(sys, u, target.input, target.x_d.front(), Vector::Ones(1), o, &b);
  EXPECT_EQ(ra.error, rb.error);
}

class OracleCertificate : public ::testing::TestWithParam<double> {};

TEST_P(OracleCertificate, ScalarAndOscillatorPass) {
  const double d_bar = GetParam();
  for (const SystemModel& base : {make_scalar_test(-1.0), make_lti()}) {
    const Oracle o = cvstem_oracle(base, base.n == 1 ? 2.0 : 1.0, d_bar);
    EstimateOptions eo;
    eo.alpha = o.alpha;
    const BoundConstants c = estimate_constants(o.M, o.controller, nullptr, o.system, o.grid, eo);
    VerifyOptions vo;
    vo.n_traj = 100;
    vo.horizon = 3.0;
    vo.dt = 2e-3;
    vo.keep_records = 3;
    vo.seed = 17;
    const CertificateReport r = verify_tracking(o.M, o.controller, o.system, c, vo);
    EXPECT_TRUE(r.pass) << base.name << " d_bar " << d_bar << " violation " << r.max_violation;
    EXPECT_EQ(r.trajectories.size(), 3u);
    for (const auto& tr : r.trajectories) EXPECT_DOUBLE_EQ(tr.x_e.front(), 1.0);
  }
}

INSTANTIATE_TEST_SUITE_P(Disturbances, OracleCertificate, ::testing::Values(0.0, 0.1, 0.5));

TEST(Verify, DecayRateMatchesContractionRate) {
  const Oracle o = cvstem_oracle(make_scalar_test(-1.0), 2.0, 0.0);
  EstimateOptions eo;
  eo.alpha = o.alpha;
  const BoundConstants c = estimate_constants(o.M, o.controller, nullptr, o.system, o.grid, eo);
  VerifyOptions vo;
  vo.n_traj = 5;
  vo.horizon = 3.0;
  vo.keep_records = 5;
  const CertificateReport r = verify_tracking(o.M, o.controller, o.system, c, vo);
  for (const auto& tr : r.trajectories) EXPECT_GE(decay_rate(tr.t, tr.error, 3.0), 0.9 * c.alpha_ell);
}

TEST(Verify, ViolationIsDetected) {
  // Claiming a faster rate than the closed loop achieves must fail.
  const Oracle o = cvstem_oracle(make_scalar_test(-1.0), 2.0, 0.0);
  EstimateOptions eo;
  eo.alpha = 8.0;
  const BoundConstants c = estimate_constants(o.M, o.controller, nullptr, o.system, o.grid, eo);
  VerifyOptions vo;
  vo.n_traj = 3;
  vo.horizon = 2.0;
  const CertificateReport r = verify_tracking(o.M, o.controller, o.system, c, vo);
  EXPECT_FALSE(r.pass);
  EXPECT_GE(r.failed_trajectory, 0);
}

TEST(Verify, StochasticOrnsteinUhlenbeck) {
  SystemModel sys = make_scalar_test(-1.0);
  set_disturbance(sys, 0.0, 0.2);
  const MetricField M = constant_metric(Matrix::Identity(1, 1));
  const FeedbackLaw u = geodesic_controller(M, sys, Matrix(), 4);
  EstimateOptions eo;
  eo.alpha = 2.0;
  eo.alpha_G = 10.0;
  eo.alpha_d = 1e-3;
  eo.mode = BoundMode::kStochastic;
  const BoundConstants c = estimate_constants(M, u, nullptr, sys, certification_grid(sys, 5, 100, {}, 1), eo);
  EXPECT_EQ(c.mode, BoundMode::kStochastic);
  VerifyOptions vo;
  vo.mode = BoundMode::kStochastic;
  vo.n_traj = 2000;
  vo.horizon = 3.0;
  vo.dt = 5e-3;
  vo.keep_records = 0;
  const CertificateReport r = verify_tracking(M, u, sys, c, vo);
  EXPECT_TRUE(r.pass) << r.max_violation;
  // Stationary E e² of ė = −2e + 0.2 ξ is 0.01.
  EXPECT_NEAR(r.mean_square.back(), 0.01, 4.0 * r.standard_error.back());
}

TEST(Output, JsonAndCsvSchema) {
  BoundConstants c = base_constants();
  const nlohmann::json j = constants_to_json(c);
  for (const char* key : {"m_under", "m_over", "alpha", "alpha_ell", "L_u", "L_m", "eps0", "eps1", "d_bar",
                          "g_bar", "C", "mode"})
    EXPECT_TRUE(j.contains(key)) << key;
  CertificateReport r;
  r.constants = c;
  r.pass = true;
  EXPECT_EQ(certificate_to_json(r)["status"], "pass");

  TrajectoryRecord rec;
  rec.t = {0.0, 0.5};
  rec.error = {1.0, 0.25};
  rec.envelope = {1.0, 0.5};
  rec.x_e = {1.0, 0.25};
  const auto path = std::filesystem::temp_directory_path() / "ckit_traj.csv";
  write_trajectory_csv(path.string(), rec);
  std::ifstream in(path);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  EXPECT_EQ(header, "t,error_norm,envelope,x_e");
  EXPECT_EQ(row, "0,1,1,1");
  std::filesystem::remove(path);
}
