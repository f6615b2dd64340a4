#include <gtest/gtest.h>

#include <cmath>

#include "contraction_kit/losses.hpp"
#include "test_support.hpp"

using namespace ckit;

namespace {

std::vector<Vector> unit(std::initializer_list<std::initializer_list<double>> rows) {
  std::vector<Vector> out;
  for (const auto& r : rows) {
    Vector v(static_cast<Eigen::Index>(r.size()));
    Eigen::Index i = 0;
    for (double x : r) v(i++) = x;
    out.push_back(v / v.norm());
  }
  return out;
}

/// Metric and controller with all-zero parameters: W = m̄⁻¹I, u = u_d.
void zero_nets(int n, int m, double m_bar, double m_under, MetricNet& metric,
               ControllerNet& controller) {
  RngStream rng(1, 1);
  metric = MetricNet::create(n, {4}, m_bar, m_under, rng);
  metric.theta.set_zero();
  controller = ControllerNet::create(n, m, 2, {4}, rng);
  controller.w1.set_zero();
  controller.w2.set_zero();
}

}  // namespace

TEST(LPd, IdentityIsZero) {
  RngStream rng(3, streams::kSphere);
  EXPECT_EQ(l_pd(Matrix::Identity(4, 4), sample_unit_sphere(4, 64, rng)), 0.0);
}

TEST(LPd, NegativeIdentityIsOne) {
  RngStream rng(3, streams::kSphere);
  EXPECT_NEAR(l_pd(-Matrix::Identity(3, 3), sample_unit_sphere(3, 50, rng)), 1.0, 1e-12);
}

TEST(LPd, SinglePointArithmetic) {
  Matrix A(2, 2);
  A << 1, 0, 0, -4;
  EXPECT_DOUBLE_EQ(l_pd(A, unit({{0, 1}})), 4.0);
}

TEST(LPd, GradientMatchesFiniteDifferences) {
  RngStream rng(5, 9);
  Matrix A = Matrix::Random(4, 4);
  A = sym(A);
  const auto pts = sample_unit_sphere(4, 40, rng);
  Matrix g;
  l_pd(A, pts, &g);
  const double h = 1e-7;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      Matrix Ap = A, Am = A;
      Ap(i, j) += h;
      Am(i, j) -= h;
      EXPECT_NEAR(g(i, j), (l_pd(Ap, pts) - l_pd(Am, pts)) / (2 * h), 1e-6);
    }
}

TEST(LPd, EmptyPointsThrow) {
  EXPECT_THROW(l_pd(Matrix::Identity(2, 2), {}), std::invalid_argument);
}

TEST(LPd, IndependentLargeEstimatesAgree) {
  RngStream rng(17, streams::kSphere);
  Matrix A(3, 3);
  A << -1.0, 0.2, 0.0, 0.2, 0.5, 0.1, 0.0, 0.1, -0.3;
  const double a = l_pd(A, sample_unit_sphere(3, 4096, rng));
  const double b = l_pd(A, sample_unit_sphere(3, 4096, rng));
  EXPECT_LT(std::abs(a - b) / std::max(a, b), 0.05);
}

TEST(ContractionMatrix, ScalarHandComputation) {
  const SystemModel sys = make_scalar_test(-1.0);
  MetricNet metric;
  ControllerNet controller;
  zero_nets(1, 1, 1.0, 1.0, metric, controller);  // W ≡ 1, u ≡ u_d
  Sample s{Vector::Constant(1, 0.3), Vector::Constant(1, -0.2), Vector::Constant(1, 0.0), 0.0};
  EXPECT_NEAR(c_u_matrix(metric, controller, sys, s, 0.5)(0, 0), -1.0, 1e-14);
  EXPECT_NEAR(c_u_matrix(metric, controller, sys, s, 1.0)(0, 0), 0.0, 1e-14);
}

TEST(ContractionMatrix, SymmetricOnPvtol) {
  const SystemModel sys = make_pvtol();
  RngStream rng(2, 2);
  MetricNet metric = MetricNet::create(6, {16}, 10.0, 0.1, rng);
  ControllerNet controller = ControllerNet::create(6, 2, 6, {16}, rng);
  for (const auto& s : testkit::random_samples(sys, 20, rng)) {
    const Matrix C = c_u_matrix(metric, controller, sys, s, 0.5);
    EXPECT_LT((C - C.transpose()).norm(), 1e-10);
  }
}

TEST(ContractionMatrix, MatchesFiniteDifferenceConstruction) {
  // Independent route: closed-loop Jacobian and Ṁ by central differences of
  // eval_u and eval_M along the closed-loop vector field.
  const SystemModel sys = testkit::make_curved_system();
  RngStream rng(4, 4);
  MetricNet metric = MetricNet::create(3, {8}, 5.0, 0.2, rng, true, 2.0);
  ControllerNet controller = ControllerNet::create(3, 2, 4, {8}, rng);
  for (const auto& s : testkit::random_samples(sys, 5, rng)) {
    const Matrix C = c_u_matrix(metric, controller, sys, s, 0.7);
    auto closed = [&](const Vector& x) {
      return sys.h(x, eval_u(controller, x, s.x_d, s.u_d, s.t), s.t);
    };
    const double h = 1e-6;
    Matrix A(3, 3);
    for (int k = 0; k < 3; ++k) {
      Vector xp = s.x, xm = s.x;
      xp(k) += h;
      xm(k) -= h;
      A.col(k) = (closed(xp) - closed(xm)) / (2 * h);
    }
    const Vector xdot = closed(s.x);
    const Matrix Mdot = (eval_M(metric, s.x + h * xdot, s.t + h) -
                         eval_M(metric, s.x - h * xdot, s.t - h)) /
                        (2 * h);
    const Matrix M = eval_M(metric, s.x, s.t);
    const Matrix ref = Mdot + M * A + A.transpose() * M + 1.4 * M;
    EXPECT_LT((C - ref).norm(), 1e-5 * (1.0 + ref.norm()));
  }
}

TEST(WeakCcm, FullRankInputGivesEmptyMatrices) {
  const SystemModel sys = make_scalar_test(1.0);
  MetricNet metric;
  ControllerNet controller;
  zero_nets(1, 1, 1.0, 1.0, metric, controller);
  const WeakCcm w = weak_ccm_matrices(metric, sys, Vector::Zero(1), 0.0, 1.0);
  EXPECT_EQ(w.C1.size(), 0);
  ASSERT_EQ(w.C2.size(), 1u);
  EXPECT_EQ(w.C2[0].size(), 0);
}

TEST(WeakCcm, LtiHandComputation) {
  Matrix A(2, 2);
  A << -2, 0, 0, 1;
  Matrix B(2, 1);
  B << 1, 0;
  const SystemModel sys = make_lti(A, B);
  MetricNet metric;
  ControllerNet controller;
  zero_nets(2, 1, 1.0, 1.0, metric, controller);  // W = I
  const WeakCcm w = weak_ccm_matrices(metric, sys, Vector::Zero(2), 0.0, 0.5);
  ASSERT_EQ(w.C1.rows(), 1);
  EXPECT_NEAR(w.C1(0, 0), 3.0, 1e-12);
  EXPECT_LT(w.C2[0].norm(), 1e-14);
}

TEST(BoundednessLoss, ZeroExactlyWhenWBelowBound) {
  // l_c = 0 iff m̲⁻¹I − W ⪰ 0 on the sampled points.
  const SystemModel sys = make_scalar_test(-1.0);
  MetricNet metric;
  ControllerNet controller;
  zero_nets(1, 1, 2.0, 1.0, metric, controller);  // W = 0.5 ≤ 1
  RngStream rng(1, 2);
  const SpherePoints pts(1, 8, rng);
  LossOptions o;
  Sample s{Vector::Zero(1), Vector::Zero(1), Vector::Zero(1), 0.0};
  EXPECT_EQ(sample_loss(metric, controller, sys, s, o, pts, nullptr).l_c, 0.0);
  metric.m_under = 4.0;
  metric.m_bar = 4.0;  // W = 0.25 ≤ 1/4 holds with equality
  EXPECT_EQ(sample_loss(metric, controller, sys, s, o, pts, nullptr).l_c, 0.0);
  metric.m_under = 8.0;
  metric.m_bar = 1.0;  // W = 1 > 1/8
  EXPECT_NEAR(sample_loss(metric, controller, sys, s, o, pts, nullptr).l_c, 1.0 - 0.125, 1e-12);
}

TEST(EmpiricalLoss, SatisfiedConstraintsGiveZero) {
  const SystemModel sys = make_scalar_test(-1.0);
  MetricNet metric;
  ControllerNet controller;
  zero_nets(1, 1, 1.0, 1.0, metric, controller);
  RngStream rng(1, 3);
  LossOptions o;
  o.alpha = 0.5;
  const auto batch = testkit::random_samples(sys, 10, rng);
  const BatchLoss b = empirical_loss(metric, controller, sys, batch, o, 16, rng, false);
  EXPECT_EQ(b.report.total(), 0.0);
}

TEST(EmpiricalLoss, SingleSampleEqualsSampleLoss) {
  const SystemModel sys = testkit::make_curved_system();
  RngStream rng(8, 8);
  MetricNet metric = MetricNet::create(3, {8}, 5.0, 0.2, rng);
  ControllerNet controller = ControllerNet::create(3, 2, 4, {8}, rng);
  const auto batch = testkit::random_samples(sys, 1, rng);
  const SpherePoints pts(3, 16, rng);
  LossOptions o;
  const double a = empirical_loss(metric, controller, sys, batch, o, pts, false).report.total();
  const double b = sample_loss(metric, controller, sys, batch[0], o, pts, nullptr).total();
  EXPECT_DOUBLE_EQ(a, b);
}

TEST(EmpiricalLoss, EmptyBatchThrows) {
  const SystemModel sys = make_scalar_test(-1.0);
  MetricNet metric;
  ControllerNet controller;
  zero_nets(1, 1, 1.0, 1.0, metric, controller);
  RngStream rng(1, 1);
  EXPECT_THROW(empirical_loss(metric, controller, sys, {}, LossOptions{}, 4, rng, false),
               std::invalid_argument);
}

TEST(EmpiricalLoss, CvTermReportedNotDifferentiated) {
  const SystemModel sys = make_scalar_test(-1.0);
  RngStream rng(2, 5);
  MetricNet metric = MetricNet::create(1, {4}, 4.0, 0.5, rng);
  ControllerNet controller = ControllerNet::create(1, 1, 2, {4}, rng);
  const auto batch = testkit::random_samples(sys, 4, rng);
  const SpherePoints pts(1, 8, rng);
  LossOptions off, on;
  on.cv_enabled = true;
  on.cv_scale = 0.3;
  const BatchLoss a = empirical_loss(metric, controller, sys, batch, off, pts, true);
  const BatchLoss b = empirical_loss(metric, controller, sys, batch, on, pts, true);
  EXPECT_NEAR(b.report.l_cv, 0.3 * 4.0 / 0.5, 1e-12);
  EXPECT_NEAR(b.report.total() - a.report.total(), b.report.l_cv, 1e-12);
  EXPECT_EQ(a.gradient->flatten(), b.gradient->flatten());
}

TEST(EmpiricalLoss, ParallelReductionIsDeterministic) {
  const SystemModel sys = testkit::make_curved_system();
  RngStream rng(9, 9);
  MetricNet metric = MetricNet::create(3, {8}, 5.0, 0.2, rng);
  ControllerNet controller = ControllerNet::create(3, 2, 4, {8}, rng);
  const auto batch = testkit::random_samples(sys, 100, rng);
  const SpherePoints pts(3, 16, rng);
  set_worker_threads(1);
  const BatchLoss a = empirical_loss(metric, controller, sys, batch, LossOptions{}, pts, true);
  set_worker_threads(4);
  const BatchLoss b = empirical_loss(metric, controller, sys, batch, LossOptions{}, pts, true);
  set_worker_threads(0);
  EXPECT_EQ(a.report.total(), b.report.total());
  EXPECT_EQ(a.gradient->flatten(), b.gradient->flatten());
}

class LossGradient : public ::testing::TestWithParam<int> {};

TEST_P(LossGradient, MatchesCentralDifferences) {
  const int trial = GetParam();
  const SystemModel sys = testkit::make_curved_system();
  RngStream rng(100 + static_cast<std::uint64_t>(trial), 11);
  MetricNet metric = MetricNet::create(3, {8}, 5.0, 0.5, rng, trial % 2 == 0, 2.0);
  ControllerNet controller = ControllerNet::create(3, 2, 4, {8}, rng);
  testkit::scale_parameters(metric.theta, 1.5);
  testkit::scale_parameters(controller.w1, 1.5);
  testkit::scale_parameters(controller.w2, 1.5);
  const auto batch = testkit::random_samples(sys, 4, rng);
  const SpherePoints pts(3, 16, rng);
  LossOptions o;
  o.alpha = 0.8;
  const testkit::GradientCheck c = testkit::check_loss_gradient(metric, controller, sys, batch, o, pts);
  EXPECT_LT(c.max_rel_err, 1e-4) << "coordinates checked: " << c.coordinates;
}

INSTANTIATE_TEST_SUITE_P(RandomConfigurations, LossGradient, ::testing::Range(0, 6));

TEST(WeakCcm, SecondConditionSymmetric) {
  const SystemModel sys = testkit::make_curved_system();
  RngStream rng(6, 6);
  MetricNet metric = MetricNet::create(3, {8}, 5.0, 0.5, rng);
  testkit::scale_parameters(metric.theta, 1.5);
  for (const auto& s : testkit::random_samples(sys, 10, rng)) {
    const WeakCcm w = weak_ccm_matrices(metric, sys, s.x, s.t, 0.5);
    for (const auto& c2 : w.C2) EXPECT_LT((c2 - c2.transpose()).norm(), 1e-12 * (1 + c2.norm()));
  }
}
