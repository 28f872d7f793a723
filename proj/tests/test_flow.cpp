#include "fields.hpp"
#include "rda/flow.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace rda;
using namespace rda::network;
using namespace rda::flow;
using namespace rda::testing;

namespace {

Matrix random_points(int n, int dim, Rng& rng, double extent = 0.9) {
  Matrix x(n, dim);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = uniform(rng, -extent, extent);
  return x;
}

TemplateNet random_template(int dim, std::uint64_t seed) {
  Rng rng = make_rng({seed});
  TemplateNet net = init_template(dim, 16, 2, rng);
  for (auto& t : net.params.tensors)
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] += gaussian(rng, 0.1);
  return net;
}

}  // namespace

TEST(Flow, ZeroFieldIsIdentity) {
  const VelocityNetStack s = VelocityNetStack::zeros(3, 4, 8, 2, 10, 0.05);
  Rng rng = make_rng({1});
  const Matrix x = random_points(20, 3, rng, 1.0);
  const auto fwd = integrate_forward(s, x, Vector::Ones(4));
  ASSERT_EQ(fwd.positions.size(), 11u);
  for (const auto& p : fwd.positions) EXPECT_EQ(p, x);
  EXPECT_EQ(integrate_reverse(s, x, Vector::Ones(4)).end(), x);
}

TEST(Flow, TimesAndFirstStage) {
  const VelocityNetStack s = stationary_stack(2, 5, 3, 0.3);
  Rng rng = make_rng({2});
  const Matrix x = random_points(7, 2, rng);
  const auto fwd = integrate_forward(s, x, Vector::Zero(2));
  ASSERT_EQ(fwd.times.size(), 6u);
  for (int k = 0; k <= 5; ++k) EXPECT_DOUBLE_EQ(fwd.times[k], k / 5.0);
  EXPECT_EQ(fwd.positions[0], x);
}

TEST(Flow, ConstantFieldIsExact) {
  RowVector c(2);
  c << 0.25, -0.375;
  Rng rng = make_rng({3});
  // Dyadic data: every step is exact in binary floating point.
  Matrix x = (random_points(10, 2, rng) * 64.0).array().round() / 64.0;
  for (int k : {1, 2, 4, 8, 16}) {
    const VelocityNetStack s = constant_stack(c, k);
    const Matrix expected = x.rowwise() + c;
    EXPECT_EQ(integrate_forward(s, x, Vector::Zero(2)).end(), expected) << "K=" << k;
    EXPECT_EQ(integrate_reverse(s, expected, Vector::Zero(2)).end(), x) << "K=" << k;
  }
  // Other step counts agree up to rounding of c/K.
  for (int k : {3, 10, 100}) {
    const VelocityNetStack s = constant_stack(c, k);
    EXPECT_LT((integrate_forward(s, x, Vector::Zero(2)).end() - (x.rowwise() + c)).cwiseAbs().maxCoeff(), 1e-14);
    EXPECT_LT((integrate_reverse(s, x, Vector::Zero(2)).end() - (x.rowwise() - c)).cwiseAbs().maxCoeff(), 1e-14);
  }
}

TEST(Flow, LinearFieldMatchesClosedFormEuler) {
  Matrix a(3, 3);
  a << 0.1, -0.4, 0.2, 0.3, -0.2, 0.05, -0.1, 0.25, 0.15;
  Rng rng = make_rng({4});
  const Matrix x = random_points(25, 3, rng);
  for (int k : {1, 7, 10, 50}) {
    const Matrix step = Matrix::Identity(3, 3) + a / k;
    Matrix power = Matrix::Identity(3, 3);
    for (int i = 0; i < k; ++i) power = step * power;
    const Matrix expected = x * power.transpose();
    const auto got = integrate_forward(linear_stack(a, k), x, Vector::Zero(2)).end();
    EXPECT_LT((got - expected).cwiseAbs().maxCoeff(), 1e-12) << "K=" << k;
  }
}

TEST(Flow, RoundTripErrorDecaysFirstOrder) {
  Rng rng = make_rng({5});
  const Matrix x = random_points(200, 2, rng, 0.7);
  std::vector<double> errors;
  for (int k : {10, 100, 1000}) {
    const VelocityNetStack s = stationary_stack(2, k, 17, 0.3);
    const Vector z = Vector::Constant(2, 0.3);
    ASSERT_LE(velocity_eval(s, 0, x, z).v.rowwise().norm().maxCoeff(), 0.1);
    const Matrix there = integrate_forward(s, x, z).end();
    const Matrix back = integrate_reverse(s, there, z).end();
    errors.push_back((back - x).rowwise().norm().maxCoeff());
  }
  EXPECT_LT(errors[0], 1e-2);
  EXPECT_GT(errors[0], 0.0);
  for (int i = 0; i < 2; ++i) {
    const double ratio = errors[i] / errors[i + 1];
    EXPECT_GT(ratio, 5.0);
    EXPECT_LT(ratio, 20.0);
  }
}

TEST(Flow, SemigroupOverStages) {
  const VelocityNetStack s = [] {
    Rng rng = make_rng({6});
    return init_velocity(3, 4, 16, 2, 10, 0.05, rng, 0.5);
  }();
  Rng rng = make_rng({7});
  const Matrix x = random_points(30, 3, rng);
  const Vector z = random_points(4, 1, rng, 1.0).col(0);
  const auto direct = integrate_forward(s, x, z);
  for (int j : {0, 3, 10}) {
    const auto head = integrate_range(s, x, z, 0, j);
    const auto tail = integrate_range(s, head.end(), z, j, s.stages);
    EXPECT_EQ(head.end(), direct.positions[j]);
    EXPECT_EQ(tail.end(), direct.end());
    EXPECT_DOUBLE_EQ(tail.times.front(), j / 10.0);
  }
  EXPECT_THROW(integrate_range(s, x, z, 4, 3), InvalidArgument);
}

TEST(Flow, StaysInDomainForModerateFields) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng = make_rng({seed});
    const VelocityNetStack s = init_velocity(2, 4, 16, 2, 10, 0.05, rng, 1.0);
    Matrix x = random_points(500, 2, rng, 1.0);
    const auto traj = integrate_forward(s, x, random_points(4, 1, rng, 1.0).col(0), {.enforce_domain = true});
    EXPECT_LE(traj.max_abs_coordinate, 1.0 + 1e-12);
  }
}

TEST(Flow, DomainViolationAborts) {
  RowVector c(2);
  c << 3.0, 0.0;
  const VelocityNetStack s = constant_stack(c, 4);
  EXPECT_THROW(integrate_forward(s, Matrix::Zero(1, 2), Vector::Zero(2), {.enforce_domain = true}), Error);
}

TEST(Flow, NonFiniteInputAborts) {
  const VelocityNetStack s = VelocityNetStack::zeros(2, 2, 4, 1, 3, 0.05);
  Matrix x = Matrix::Zero(2, 2);
  x(1, 0) = std::nan("");
  EXPECT_THROW(integrate_forward(s, x, Vector::Zero(2)), NonFiniteError);
}

TEST(DeformedImplicit, TimeZeroIsTemplate) {
  const TemplateNet tpl = random_template(2, 8);
  const VelocityNetStack s = stationary_stack(2, 10, 9, 1.0);
  Rng rng = make_rng({10});
  const Matrix x = random_points(40, 2, rng);
  const auto direct = template_eval(tpl, x);
  const auto at0 = deformed_implicit(tpl, s, x, Vector::Ones(2), 0.0);
  EXPECT_EQ(at0.values, direct.values);
  EXPECT_EQ(at0.grads, direct.grads);

  const VelocityNetStack zero = VelocityNetStack::zeros(2, 2, 16, 1, 10, 0.2);
  for (double t : {0.3, 1.0}) EXPECT_EQ(deformed_implicit(tpl, zero, x, Vector::Ones(2), t).values, direct.values);
}

TEST(DeformedImplicit, RejectsOffGridTime) {
  const TemplateNet tpl = random_template(2, 8);
  const VelocityNetStack s = stationary_stack(2, 10, 9, 1.0);
  EXPECT_THROW(deformed_implicit(tpl, s, Matrix::Zero(1, 2), Vector::Zero(2), 0.05), InvalidArgument);
  EXPECT_THROW(deformed_implicit(tpl, s, Matrix::Zero(1, 2), Vector::Zero(2), 1.1), InvalidArgument);
  EXPECT_NO_THROW(deformed_implicit(tpl, s, Matrix::Zero(1, 2), Vector::Zero(2), 0.7));
}

TEST(DeformedImplicit, GradientMatchesFiniteDifferencesAndJacobianChain) {
  for (int dim : {2, 3}) {
    const TemplateNet tpl = random_template(dim, 11);
    Rng rng = make_rng({12});
    const VelocityNetStack s = init_velocity(dim, 2, 16, 1, 6, 0.1, rng, 1.0);
    const Vector z = Vector::Constant(2, -0.2);
    const Matrix x = random_points(40, dim, rng, 0.95);
    const auto e = deformed_implicit(tpl, s, x, z, 1.0);
    const auto traj = integrate_forward(s, x, z);
    int checked = 0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      RowVector fd(dim), fd_coarse(dim);
      for (int b = 0; b < dim; ++b) {
        for (double h : {1e-6, 1e-4}) {
          Matrix xp = x.row(i), xm = x.row(i);
          xp(0, b) += h;
          xm(0, b) -= h;
          const double d = (deformed_implicit(tpl, s, xp, z, 1.0).values[0] -
                            deformed_implicit(tpl, s, xm, z, 1.0).values[0]) / (2 * h);
          (h < 1e-5 ? fd : fd_coarse)[b] = d;
        }
      }
      if ((fd - fd_coarse).norm() > 1e-4 * std::max(1.0, fd.norm())) continue;
      ++checked;
      EXPECT_LT((fd - e.grads.row(i)).norm() / std::max(fd.norm(), 1e-6), 1e-5);

      // grad = (prod_k (I + Jv_k / K))^T grad f(phi_1(x)).
      Matrix chain = Matrix::Identity(dim, dim);
      for (int k = 0; k < s.stages; ++k) {
        const Matrix jac = velocity_eval(s, k, traj.positions[k].row(i), z).jac[0];
        chain = (Matrix::Identity(dim, dim) + jac / s.stages) * chain;
      }
      const RowVector gf = template_eval(tpl, traj.end().row(i)).grads.row(0);
      EXPECT_LT((gf * chain - e.grads.row(i)).norm(), 1e-12 * std::max(1.0, gf.norm()));
    }
    EXPECT_GT(checked, 30);
  }
}
