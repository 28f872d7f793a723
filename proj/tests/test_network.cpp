#include "fd_check.hpp"
#include "rda/network.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace rda;
using namespace rda::network;
using rda::testing::fd_check;

namespace {

Matrix random_points(int n, int dim, Rng& rng, double extent = 0.9) {
  Matrix x(n, dim);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = uniform(rng, -extent, extent);
  return x;
}

TemplateNet small_template(int dim, std::uint64_t seed) {
  Rng rng = make_rng({seed});
  TemplateNet net = TemplateNet::zeros(dim, 8, 2);
  for (auto& t : net.params.tensors)
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = gaussian(rng, 0.5);
  return net;
}

VelocityNetStack small_stack(int dim, std::uint64_t seed, int stages = 2) {
  Rng rng = make_rng({seed});
  return init_velocity(dim, 3, 8, 1, stages, 0.05, rng);
}

// Central difference of a vector-valued function of x.
template <class F>
Matrix fd_jacobian(F f, const RowVector& x, double h) {
  const RowVector f0 = f(x);
  Matrix j(f0.size(), x.size());
  for (Eigen::Index b = 0; b < x.size(); ++b) {
    RowVector xp = x, xm = x;
    xp[b] += h;
    xm[b] -= h;
    j.col(b) = ((f(xp) - f(xm)) / (2.0 * h)).transpose();
  }
  return j;
}

}  // namespace

TEST(Autodiff, ElementaryOpsMatchFiniteDifferences) {
  Rng rng = make_rng({3});
  network::Parameters p;
  p.tensors = {random_points(4, 3, rng, 1.0), random_points(4, 3, rng, 1.0)};
  for (Eigen::Index i = 0; i < p.tensors[1].size(); ++i) p.tensors[1].data()[i] += 2.0;  // keep log/div away from 0
  auto build = [&](ad::Tape& t, const BoundParams& b) {
    const Var a = b[0], c = b[1];
    Var y = ad::add(ad::mul(a, c), ad::div(a, c));
    y = ad::add(y, ad::log(c));
    y = ad::add(y, ad::exp(ad::scale(a, 0.3)));
    y = ad::mul_col(y, ad::row_norm(c));
    y = ad::hcat({y, ad::row_sumsq(a)});
    y = ad::vcat({y, ad::rows(y, 1, 2)});
    y = ad::add(y, ad::broadcast_rows(ad::rows(y, 0, 1), y.rows()));
    y = ad::huber(ad::abs(y), 0.25);
    return ad::mean(ad::add(y, t.constant(Matrix::Constant(y.rows(), y.cols(), 0.1))));
  };
  ad::Tape tape;
  const BoundParams b = bind(tape, p, true);
  const Var loss = build(tape, b);
  tape.backward(loss);
  const ParamGradient g = collect(tape, b);
  auto eval = [&] {
    ad::Tape t;
    return build(t, bind(t, p, false)).scalar();
  };
  const auto r = fd_check(p, g, eval, 1e-6, 1e-6);
  EXPECT_GT(r.checked, 20);
  EXPECT_EQ(r.passed, r.checked) << "worst " << r.worst;
}

TEST(Autodiff, BceWithLogitsIsStable) {
  ad::Tape t;
  Matrix logits(1, 3);
  logits << -800.0, 0.0, 800.0;
  Matrix labels(1, 3);
  labels << 0.0, 1.0, 1.0;
  const Matrix out = ad::bce_with_logits(t.constant(logits), labels).value();
  EXPECT_TRUE(out.allFinite());
  EXPECT_NEAR(out(0, 0), 0.0, 1e-300);
  EXPECT_NEAR(out(0, 1), std::log(2.0), 1e-15);
  EXPECT_NEAR(out(0, 2), 0.0, 1e-300);
}

TEST(Autodiff, GradientOfUnreachedVariableIsZero) {
  ad::Tape t;
  const Var a = t.variable(Matrix::Ones(2, 2));
  const Var b = t.variable(Matrix::Ones(2, 2));
  t.backward(ad::sum(a));
  EXPECT_EQ(t.grad(b), Matrix::Zero(2, 2));
  EXPECT_EQ(t.grad(a), Matrix::Ones(2, 2));
}

TEST(HEps, Examples) {
  EXPECT_DOUBLE_EQ(h_eps(RowVector::Zero(2), 0.05), 1.0);
  RowVector edge(2);
  edge << 0.3, -1.0;
  EXPECT_DOUBLE_EQ(h_eps(edge, 0.05), 0.0);
  RowVector half(3);
  half << 0.1, 1.0 - 0.025, -0.2;
  EXPECT_NEAR(h_eps(half, 0.05), 0.5, 1e-12);
  RowVector outside(2);
  outside << 1.2, 0.0;
  EXPECT_DOUBLE_EQ(h_eps(outside, 0.05), 0.0);
  EXPECT_EQ(h_eps_gradient(outside, 0.05), RowVector::Zero(2));
  EXPECT_THROW(h_eps(half, 0.0), InvalidArgument);
}

TEST(HEps, GradientMatchesFiniteDifferences) {
  Rng rng = make_rng({11});
  for (int trial = 0; trial < 200; ++trial) {
    RowVector x = random_points(1, 3, rng, 1.0);
    x[trial % 3] = (trial % 2 ? 1.0 : -1.0) * uniform(rng, 0.92, 0.99);  // inside the ramp
    const Matrix fd = fd_jacobian([](const RowVector& y) { return RowVector::Constant(1, h_eps(y, 0.1)); }, x, 1e-7);
    EXPECT_LT((fd.row(0) - h_eps_gradient(x, 0.1)).norm(), 1e-6);
  }
}

TEST(TemplateNet, ZeroWeightsGiveZero) {
  const TemplateNet net = TemplateNet::zeros(3, 16, 3);
  Rng rng = make_rng({1});
  const auto e = template_eval(net, random_points(10, 3, rng));
  EXPECT_EQ(e.values, Vector::Zero(10));
  EXPECT_EQ(e.grads, Matrix::Zero(10, 3));
}

TEST(TemplateNet, ParameterCountMatchesWidths) {
  const TemplateNet net = TemplateNet::zeros(2, 16, 5);
  // 7 layers: 2->16, 16->16 (x2), 18->16, 16->16 (x2), 16->1
  const std::size_t expected = (2 * 16 + 16) + 2 * (16 * 16 + 16) + (18 * 16 + 16) + 2 * (16 * 16 + 16) + (16 + 1);
  EXPECT_EQ(net.params.count(), expected);
  EXPECT_EQ(net.skip_layer(), 3);
}

TEST(TemplateNet, OutputAlwaysClamped) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng = make_rng({seed});
    TemplateNet net = TemplateNet::zeros(2, 8, 2);
    for (auto& t : net.params.tensors)
      for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = gaussian(rng, 20.0);
    const auto e = template_eval(net, random_points(64, 2, rng, 1e6));
    EXPECT_LE(e.values.cwiseAbs().maxCoeff(), 0.5);
  }
}

TEST(TemplateNet, SpatialGradientMatchesFiniteDifferences) {
  const TemplateNet net = small_template(3, 5);
  Rng rng = make_rng({6});
  const Matrix x = random_points(50, 3, rng);
  const auto e = template_eval(net, x);
  int checked = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    auto f = [&](const RowVector& y) { return RowVector::Constant(1, template_eval(net, y).values[0]); };
    const Matrix fd = fd_jacobian(f, x.row(i), 1e-6);
    const Matrix fwd = fd_jacobian(f, x.row(i), 1e-4);
    if ((fd - fwd).norm() > 1e-5) continue;  // a kink or the clamp bound lies within the stencil
    ++checked;
    const double scale = std::max(fd.norm(), 1e-6);
    EXPECT_LT((fd.row(0) - e.grads.row(i)).norm() / scale, 1e-6);
  }
  EXPECT_GT(checked, 40);
}

TEST(TemplateNet, SphereInitialization) {
  for (int dim : {2, 3}) {
    Rng rng = make_rng({2});
    const TemplateNet net = init_template(dim, 64, 5, rng);
    Rng pts = make_rng({3});
    Matrix x = random_points(200, dim, pts, 1.0);
    for (Eigen::Index i = 0; i < x.rows(); ++i) x.row(i) *= uniform(pts, 0.2, 0.8) / x.row(i).norm();
    const auto e = template_eval(net, x);
    for (Eigen::Index i = 0; i < x.rows(); ++i) EXPECT_NEAR(e.values[i], 0.5 - x.row(i).norm(), 0.02);
  }
}

TEST(VelocityNet, ZeroOnAndOutsideBoundary) {
  const VelocityNetStack s = small_stack(3, 7);
  Rng rng = make_rng({8});
  Matrix x = random_points(60, 3, rng, 1.0);
  for (Eigen::Index i = 0; i < x.rows(); ++i) x(i, i % 3) = (i % 2 ? 1.0 : -1.0) * (1.0 + 0.01 * (i % 4));
  const Vector z = Vector::Constant(3, 0.4);
  for (int k = 0; k < s.stages; ++k) {
    const auto e = velocity_eval(s, k, x, z);
    EXPECT_EQ(e.v.cwiseAbs().maxCoeff(), 0.0);
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      if (x.row(i).cwiseAbs().maxCoeff() > 1.0) {
        EXPECT_EQ(e.jac[i].cwiseAbs().maxCoeff(), 0.0);
      }
  }
}

TEST(VelocityNet, ZeroOutputLayerGivesZeroField) {
  VelocityNetStack s = small_stack(2, 7);
  for (int k = 0; k < s.stages; ++k) {
    s.output_weight(k).setZero();
    s.output_bias(k).setZero();
  }
  Rng rng = make_rng({9});
  const auto e = velocity_eval(s, 1, random_points(20, 2, rng), Vector::Ones(3));
  EXPECT_EQ(e.v, Matrix::Zero(20, 2));
  for (const auto& j : e.jac) EXPECT_EQ(j, Matrix::Zero(2, 2));
}

TEST(VelocityNet, StageIndexChecked) {
  const VelocityNetStack s = small_stack(2, 7);
  EXPECT_THROW(velocity_eval(s, 2, Matrix::Zero(1, 2), Vector::Zero(3)), InvalidArgument);
  EXPECT_THROW(velocity_eval(s, -1, Matrix::Zero(1, 2), Vector::Zero(3)), InvalidArgument);
  EXPECT_THROW(velocity_eval(s, 0, Matrix::Zero(1, 2), Vector::Zero(4)), InvalidArgument);
}

TEST(VelocityNet, JacobianMatchesFiniteDifferences) {
  for (int dim : {2, 3}) {
    const VelocityNetStack s = small_stack(dim, 12);
    Rng rng = make_rng({13});
    // Include points inside the damping ramp.
    Matrix x = random_points(60, dim, rng, 0.99);
    const Vector z = random_points(3, 1, rng, 1.0).col(0);
    const auto e = velocity_eval(s, 1, x, z);
    int checked = 0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      auto f = [&](const RowVector& y) { return RowVector(velocity_eval(s, 1, y, z).v.row(0)); };
      const Matrix fd = fd_jacobian(f, x.row(i), 1e-6);
      if ((fd - fd_jacobian(f, x.row(i), 1e-4)).norm() > 1e-5 * std::max(1.0, fd.norm())) continue;
      ++checked;
      EXPECT_LT((fd - e.jac[i]).norm() / std::max(fd.norm(), 1e-6), 1e-6);
    }
    EXPECT_GT(checked, 50);
  }
}

TEST(Backprop, ZeroCotangentsGiveZeroGradient) {
  const TemplateNet net = small_template(2, 1);
  Rng rng = make_rng({1});
  const Matrix x = random_points(5, 2, rng);
  const auto g = template_backprop(net, x, Vector::Zero(5), Matrix::Zero(5, 2));
  EXPECT_EQ(g.squared_norm(), 0.0);
  EXPECT_TRUE(g.congruent(net.params));

  const VelocityNetStack s = small_stack(2, 1);
  const auto gv = velocity_backprop(s, 0, x, Vector::Ones(3), Matrix::Zero(5, 2),
                                    std::vector<Matrix>(5, Matrix::Zero(2, 2)));
  EXPECT_EQ(gv.squared_norm(), 0.0);
  EXPECT_TRUE(gv.congruent(s.params));
}

TEST(Backprop, TemplateValueMatchesFiniteDifferences) {
  TemplateNet net = small_template(3, 21);
  net.params.tensors.back()(0, 0) = 0.0;  // keep the output inside the clamp
  for (auto& t : net.params.tensors) t *= 0.5;
  Rng rng = make_rng({22});
  const Matrix x0 = random_points(1, 3, rng);
  const auto g = template_backprop(net, x0, Vector::Ones(1), Matrix::Zero(1, 3));
  const auto r = fd_check(net.params, g, [&] { return template_eval(net, x0).values[0]; }, 1e-6, 1e-4);
  EXPECT_GT(r.checked, 0.9 * net.params.count());
  EXPECT_EQ(r.passed, r.checked) << "worst " << r.worst;
}

TEST(Backprop, TemplateGradientTermMatchesFiniteDifferences) {
  TemplateNet net = small_template(2, 23);
  for (auto& t : net.params.tensors) t *= 0.5;
  Rng rng = make_rng({24});
  const Matrix x = random_points(4, 2, rng);
  const Matrix cot = random_points(4, 2, rng, 1.0);
  const auto g = template_backprop(net, x, Vector::Zero(4), cot);
  const auto r = fd_check(net.params, g, [&] { return template_eval(net, x).grads.cwiseProduct(cot).sum(); }, 1e-6,
                          1e-4);
  EXPECT_GT(r.checked, 0);
  EXPECT_EQ(r.passed, r.checked) << "worst " << r.worst;
}

TEST(Backprop, VelocityValueMatchesFiniteDifferences) {
  VelocityNetStack s = small_stack(2, 31);
  Rng rng = make_rng({32});
  const Matrix x0 = random_points(1, 2, rng, 0.97);
  const Vector z = random_points(3, 1, rng, 1.0).col(0);
  Matrix cot(1, 2);
  cot << 1.0, -0.5;
  const auto g = velocity_backprop(s, 1, x0, z, cot, {Matrix::Zero(2, 2)});
  const auto r = fd_check(s.params, g, [&] { return velocity_eval(s, 1, x0, z).v.cwiseProduct(cot).sum(); }, 1e-6,
                          1e-4);
  EXPECT_GT(r.checked, 0.4 * s.params.count());  // stage 0 entries are trivially zero
  EXPECT_EQ(r.passed, r.checked) << "worst " << r.worst;
}

TEST(Backprop, KillingNormMatchesFiniteDifferences) {
  for (int dim : {2, 3}) {
    VelocityNetStack s = small_stack(dim, 41);
    Rng rng = make_rng({42});
    const Matrix x0 = random_points(1, dim, rng, 0.97);
    const Vector z = random_points(3, 1, rng, 1.0).col(0);
    auto killing = [&] {
      const Matrix j = velocity_eval(s, 0, x0, z).jac[0];
      return (j + j.transpose()).squaredNorm();
    };
    // Reverse mode on a tape through the Jacobian entries themselves.
    ad::Tape tape;
    const BoundParams p = bind(tape, s.params, true);
    const Jet v = velocity_forward(s, p, 0, seed_jet(tape, tape.constant(x0), true), tape.constant(z.transpose()));
    Var loss = tape.constant(Matrix::Zero(1, 1));
    for (int a = 0; a < dim; ++a)
      for (int b = 0; b < dim; ++b)
        loss = ad::add(loss, ad::sum(ad::square(ad::add(jacobian_entry(v, a, b), jacobian_entry(v, b, a)))));
    tape.backward(loss);
    const ParamGradient g = collect(tape, p);
    EXPECT_NEAR(loss.scalar(), killing(), 1e-12 * std::max(1.0, killing()));
    const auto r = fd_check(s.params, g, killing, 1e-6, 1e-3);
    EXPECT_GT(r.checked, 0);
    EXPECT_EQ(r.passed, r.checked) << "worst " << r.worst;
  }
}

TEST(Backprop, LinearInCotangents) {
  const VelocityNetStack s = small_stack(2, 51);
  Rng rng = make_rng({52});
  const Matrix x = random_points(6, 2, rng);
  const Vector z = Vector::Constant(3, 0.2);
  const Matrix c1 = random_points(6, 2, rng, 1.0), c2 = random_points(6, 2, rng, 1.0);
  std::vector<Matrix> j1, j2, j12;
  for (int i = 0; i < 6; ++i) {
    j1.push_back(random_points(2, 2, rng, 1.0));
    j2.push_back(random_points(2, 2, rng, 1.0));
    j12.push_back(j1.back() + j2.back());
  }
  ParamGradient sum = velocity_backprop(s, 0, x, z, c1, j1);
  sum += velocity_backprop(s, 0, x, z, c2, j2);
  const ParamGradient joint = velocity_backprop(s, 0, x, z, c1 + c2, j12);
  for (std::size_t i = 0; i < sum.count(); ++i) EXPECT_NEAR(sum.at(i), joint.at(i), 1e-12 * (1.0 + std::abs(joint.at(i))));
}

TEST(Backprop, Deterministic) {
  const TemplateNet net = small_template(3, 61);
  Rng rng = make_rng({62});
  const Matrix x = random_points(30, 3, rng);
  const Vector vc = Vector::Ones(30);
  const Matrix gc = Matrix::Ones(30, 3);
  EXPECT_TRUE(template_backprop(net, x, vc, gc) == template_backprop(net, x, vc, gc));
}
