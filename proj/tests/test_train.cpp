#include "rda/train.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

using namespace rda;
using namespace rda::train;

namespace {

TrainConfig tiny_config(int dim = 2) {
  TrainConfig c;
  c.dim = dim;
  c.epochs = 5;
  c.batch_size = 3;
  c.d_z = 4;
  c.K = 4;
  c.d_vel = 8;
  c.vel_hidden = 1;
  c.d_mu = 8;
  c.N_h = 2;
  c.mc_surface = 24;
  c.mc_domain = 24;
  c.seed = 7;
  return c;
}

TrainData tiny_data(int n = 5, int dim = 2) { return TrainData::from(geometry::generate_box_dataset(n, dim, 3, 256)); }

bool same_state(const TrainState& a, const TrainState& b) {
  return a.epoch == b.epoch && a.model.tpl.params == b.model.tpl.params && a.model.vel.params == b.model.vel.params &&
         a.latents.codes == b.latents.codes && a.adam_template.m == b.adam_template.m &&
         a.adam_template.v == b.adam_template.v && a.adam_velocity.m == b.adam_velocity.m &&
         a.adam_velocity.v == b.adam_velocity.v && a.adam_latent.m == b.adam_latent.m &&
         a.adam_latent.v == b.adam_latent.v && a.adam_latent.step == b.adam_latent.step;
}

}  // namespace

TEST(Adam, MatchesClosedFormForConstantGradient) {
  // With a constant gradient g the bias-corrected moments are exactly g and
  // g^2, so every step moves by lr * g / (|g| + eps).
  Parameters p;
  p.tensors = {Matrix::Constant(2, 3, 1.0)};
  AdamState a = AdamState::for_params(p);
  ParamGradient g;
  g.tensors = {Matrix::Constant(2, 3, 0.25)};
  const double lr = 1e-2;
  for (int step = 1; step <= 10; ++step) {
    a.update(p, g, lr);
    const double expected = 1.0 - step * lr * 0.25 / (0.25 + 1e-8);
    EXPECT_NEAR(p.tensors[0](1, 2), expected, 1e-15);
  }
  EXPECT_EQ(a.step, 10);
}

TEST(Adam, FirstStepIsSignScaledByLearningRate) {
  Parameters p;
  p.tensors = {Matrix::Zero(1, 3)};
  AdamState a = AdamState::for_params(p);
  ParamGradient g;
  g.tensors = {(Matrix(1, 3) << 3.0, -1e-3, 0.0).finished()};
  a.update(p, g, 0.1);
  EXPECT_NEAR(p.tensors[0](0, 0), -0.1, 1e-8);
  EXPECT_NEAR(p.tensors[0](0, 1), 0.1, 1e-5);
  EXPECT_EQ(p.tensors[0](0, 2), 0.0);
}

TEST(Adam, RejectsMismatchedShapes) {
  Parameters p;
  p.tensors = {Matrix::Zero(2, 2)};
  AdamState a = AdamState::for_params(p);
  ParamGradient g;
  g.tensors = {Matrix::Zero(2, 3)};
  EXPECT_THROW(a.update(p, g, 0.1), InvalidArgument);
}

TEST(Schedule, DecaysInSteps) {
  EXPECT_DOUBLE_EQ(learning_rate(1e-3, 0), 1e-3);
  EXPECT_DOUBLE_EQ(learning_rate(1e-3, 249), 1e-3);
  EXPECT_DOUBLE_EQ(learning_rate(1e-3, 250), 7e-4);
  EXPECT_NEAR(learning_rate(5e-4, 500), 2.45e-4, 1e-18);
  EXPECT_NEAR(learning_rate(1.0, 3999), std::pow(0.7, 15), 1e-15);
}

TEST(Latents, InitialStatisticsAndProjection) {
  TrainConfig c = tiny_config();
  c.d_z = 32;
  TrainState s = init_run(c, 400);
  EXPECT_TRUE(s.latents.within_ball());
  // N(0, 1/d_z) codes have squared norm ~ chi2(d)/d; most exceed 1 and get
  // projected, so the mean norm sits just below 1.
  const Vector norms = s.latents.codes.rowwise().norm();
  EXPECT_GT(norms.mean(), 0.9);
  EXPECT_LE(norms.maxCoeff(), 1.0 + 1e-12);
  // Directions stay centred.
  EXPECT_LT(s.latents.codes.colwise().mean().cwiseAbs().maxCoeff(), 0.03);

  LatentTable t;
  t.codes = (Matrix(2, 2) << 3.0, 4.0, 0.3, 0.4).finished();
  t.project();
  EXPECT_NEAR(t.codes(0, 0), 0.6, 1e-15);
  EXPECT_NEAR(t.codes(0, 1), 0.8, 1e-15);
  EXPECT_EQ(t.codes(1, 0), 0.3);
}

TEST(Config, JsonRoundTripAndUnknownKeys) {
  TrainConfig c = tiny_config(3);
  c.weights.eta = 50.0;
  c.mode = loss::Mode::pointwise;
  const TrainConfig back = config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_THROW(config_from_json({{"epoch", 3}}), InvalidArgument);
  EXPECT_THROW(config_from_json({{"weights", {{"etta", 1.0}}}}), InvalidArgument);
  EXPECT_THROW(config_from_json({{"precision", "float32"}}), InvalidArgument);
  EXPECT_THROW(config_from_json({{"dim", "two"}}), InvalidArgument);
  EXPECT_THROW(config_from_json({{"mode", "rigid"}}), InvalidArgument);
  const TrainConfig partial = config_from_json({{"epochs", 9}}, c);
  EXPECT_EQ(partial.epochs, 9);
  EXPECT_EQ(partial.dim, 3);
}

TEST(Config, PaperPreset) {
  const TrainConfig p = TrainConfig::paper_rectangles();
  EXPECT_EQ(p.epochs, 4000);
  EXPECT_EQ(p.d_vel, 512);
  EXPECT_EQ(p.d_mu, 256);
  EXPECT_EQ(p.K, 10);
  EXPECT_EQ(p.N_h, 5);
  EXPECT_EQ(p.d_z, 32);
  EXPECT_DOUBLE_EQ(p.weights.beta, 1.5);
  EXPECT_NO_THROW(p.validate());
}

TEST(Train, ZeroLearningRatesLeaveStateUnchanged) {
  TrainConfig c = tiny_config();
  c.lr_latent = c.lr_template = c.lr_velocity = 0.0;
  const TrainData data = tiny_data();
  TrainState s = init_run(c, data.size());
  const TrainState before = s;
  const LossBreakdown b = train_epoch(s, data);
  EXPECT_TRUE(std::isfinite(b.total));
  EXPECT_EQ(s.model.tpl.params, before.model.tpl.params);
  EXPECT_EQ(s.model.vel.params, before.model.vel.params);
  EXPECT_EQ(s.latents.codes, before.latents.codes);
  EXPECT_EQ(s.epoch, 1);
}

TEST(Train, EpochMeanMatchesDirectEvaluation) {
  // With zero learning rates the reported epoch mean equals the mean of the
  // per-shape losses on the same Monte Carlo draws.
  TrainConfig c = tiny_config();
  c.lr_latent = c.lr_template = c.lr_velocity = 0.0;
  const TrainData data = tiny_data();
  TrainState s = init_run(c, data.size());
  const LossBreakdown b = train_epoch(s, data);
  double total = 0.0;
  for (int i = 0; i < data.size(); ++i)
    total += loss::shape_loss(s.model.tpl, s.model.vel, s.latents.code(i), draw_inputs(c, data, i, 0), c.weights,
                              c.mode, c.fidelity)
                 .total;
  EXPECT_NEAR(b.total, total / data.size(), 1e-12);
}

TEST(Train, LossDecreasesOnTinyProblem) {
  TrainConfig c = tiny_config();
  c.lr_template = c.lr_velocity = 5e-3;
  c.lr_latent = 1e-2;
  c.batch_size = 5;
  const TrainData data = tiny_data();
  TrainState s = init_run(c, data.size());
  const double first = train_epoch(s, data).total;
  double last = first;
  for (int e = 0; e < 30; ++e) last = train_epoch(s, data).total;
  EXPECT_LT(last, first);
  EXPECT_TRUE(s.latents.within_ball());
}

TEST(Train, ThreadCountDoesNotChangeResults) {
  TrainConfig c = tiny_config();
  const TrainData data = tiny_data(7);
  TrainState a = init_run(c, data.size());
  c.threads = 3;
  TrainState b = init_run(c, data.size());
  for (int e = 0; e < 2; ++e) {
    train_epoch(a, data);
    train_epoch(b, data);
  }
  EXPECT_EQ(a.model.tpl.params, b.model.tpl.params);
  EXPECT_EQ(a.model.vel.params, b.model.vel.params);
  EXPECT_EQ(a.latents.codes, b.latents.codes);
}

TEST(Train, OccupancyAndPointwiseModesRun) {
  TrainConfig c = tiny_config();
  c.fidelity = loss::Fidelity::occupancy;
  const TrainData data = tiny_data();
  TrainState s = init_run(c, data.size());
  const LossBreakdown b = train_epoch(s, data);
  EXPECT_GT(b.bce, 0.0);
  EXPECT_EQ(b.on_surface, 0.0);

  c.fidelity = loss::Fidelity::surface;
  c.mode = loss::Mode::pointwise;
  TrainState p = init_run(c, data.size());
  const LossBreakdown bp = train_epoch(p, data);
  EXPECT_EQ(bp.riemannian, 0.0);
  EXPECT_TRUE(std::isfinite(bp.pointwise));
}

TEST(Train, BalancedOccupancySamples) {
  const auto spec = geometry::ShapeSpec::box(Vector::Zero(2), Vector::Constant(2, 0.2), Matrix::Identity(2, 2));
  Rng rng = make_rng({1});
  Matrix x, y;
  balanced_occupancy(spec, 101, rng, x, y);
  EXPECT_EQ(y.sum(), 50.0);
  for (int i = 0; i < x.rows(); ++i)
    EXPECT_EQ(geometry::sdf_primitive(spec, x.row(i).transpose()) > 0.0, y(i, 0) == 1.0);
}

TEST(Train, NonFiniteLossNamesTheTerm) {
  TrainConfig c = tiny_config();
  const TrainData data = tiny_data();
  TrainState s = init_run(c, data.size());
  s.model.tpl.params.tensors[0](0, 0) = std::numeric_limits<double>::quiet_NaN();
  try {
    train_epoch(s, data);
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_FALSE(e.term().empty());
  }
}

TEST(Train, RejectsBadSetup) {
  TrainConfig c = tiny_config();
  EXPECT_THROW(init_run(c, 0), InvalidArgument);
  EXPECT_THROW(init_run(c, 2), InvalidArgument);  // batch larger than dataset
  TrainState s = init_run(c, 5);
  EXPECT_THROW(train_epoch(s, tiny_data(6)), InvalidArgument);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  TrainConfig c = tiny_config(3);
  const TrainData data = tiny_data(4, 3);
  TrainState s = init_run(c, data.size());
  train_epoch(s, data);
  const std::string bytes = serialize_checkpoint(s);
  const TrainState back = deserialize_checkpoint(bytes);
  EXPECT_TRUE(same_state(s, back));
  EXPECT_EQ(serialize_checkpoint(back), bytes);

  const auto path = std::filesystem::temp_directory_path() / "rda_test_checkpoint.bin";
  save_checkpoint(s, path);
  EXPECT_TRUE(same_state(load_checkpoint(path), s));
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsCorruptFiles) {
  TrainConfig c = tiny_config();
  TrainState s = init_run(c, 5);
  const std::string bytes = serialize_checkpoint(s);
  for (std::size_t cut : {std::size_t{3}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1})
    EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, cut)), FormatError) << cut;
  std::string bad_version = bytes;
  bad_version[8] = 9;
  EXPECT_THROW(deserialize_checkpoint(bad_version), FormatError);
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bad_magic), FormatError);
  EXPECT_THROW(deserialize_checkpoint(bytes + "x"), FormatError);
}

TEST(Checkpoint, ResumeMatchesUninterruptedRun) {
  TrainConfig c = tiny_config();
  c.lr_decay_every = 2;  // exercise the schedule across the restart
  const TrainData data = tiny_data();
  TrainState full = init_run(c, data.size());
  for (int e = 0; e < 5; ++e) train_epoch(full, data);

  TrainState part = init_run(c, data.size());
  for (int e = 0; e < 3; ++e) train_epoch(part, data);
  TrainState resumed = deserialize_checkpoint(serialize_checkpoint(part));
  for (int e = 0; e < 2; ++e) train_epoch(resumed, data);
  EXPECT_TRUE(same_state(full, resumed));
}

TEST(EpochLog, HeaderAndRowAlign) {
  LossBreakdown b;
  b.total = 1.5;
  const std::string header = epoch_log_header();
  const std::string row = epoch_log_row(3, {1e-3, 5e-4, 5e-4}, b);
  EXPECT_EQ(std::count(header.begin(), header.end(), ','), std::count(row.begin(), row.end(), ','));
  EXPECT_EQ(row.substr(0, 2), "3,");
}
