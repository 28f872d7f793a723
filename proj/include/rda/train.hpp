#pragma once

// Joint autodecoder training of the template, the velocity stack and one
// latent code per training shape.

#include "json.hpp"
#include "rda/geometry/metrics.hpp"
#include "rda/geometry/shapes.hpp"
#include "rda/loss.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace rda::train {

using loss::LossBreakdown;
using loss::LossWeights;
using network::Model;
using network::Parameters;
using network::ParamGradient;

// ---------------------------------------------------------------------------
// Configuration.

struct TrainConfig {
  int dim = 2;
  int epochs = 300;
  int batch_size = 10;
  int d_z = 32;
  int K = 10;
  int d_vel = 128;
  int vel_hidden = 2;
  int d_mu = 64;
  int N_h = 5;
  double eps = 0.05;
  LossWeights weights;
  int mc_surface = 512;
  int mc_domain = 512;
  double lr_latent = 1e-3;
  double lr_template = 5e-4;
  double lr_velocity = 5e-4;
  double lr_decay = 0.7;
  int lr_decay_every = 250;
  double template_radius = 0.5;
  double velocity_init_scale = 1.0;
  std::uint64_t seed = 0;
  loss::Mode mode = loss::Mode::riemannian;
  loss::Fidelity fidelity = loss::Fidelity::surface;
  std::string precision = "float64";
  int threads = 1;

  /// Hyperparameters of the paper's rectangles runs (3D, full widths).
  static TrainConfig paper_rectangles() {
    TrainConfig c;
    c.dim = 3;
    c.epochs = 4000;
    c.d_vel = 512;
    c.d_mu = 256;
    c.mc_surface = 5000;
    c.mc_domain = 5000;
    return c;
  }

  void validate() const {
    if (dim != 2 && dim != 3) throw InvalidArgument("dim must be 2 or 3");
    for (int v : {epochs + 1, batch_size, d_z, K, d_vel, vel_hidden + 1, d_mu, N_h + 1, mc_surface, mc_domain,
                  lr_decay_every, threads})
      if (v < 1) throw InvalidArgument("sizes in the training config must be positive");
    if (!(eps > 0.0)) throw InvalidArgument("eps must be positive");
    for (double lr : {lr_latent, lr_template, lr_velocity})
      if (!(lr >= 0.0)) throw InvalidArgument("learning rates must be non-negative");
    if (!(lr_decay > 0.0)) throw InvalidArgument("lr_decay must be positive");
    if (!(template_radius > 0.0 && template_radius < 1.0)) throw InvalidArgument("template_radius must be in (0, 1)");
    if (!(velocity_init_scale >= 0.0)) throw InvalidArgument("velocity_init_scale must be non-negative");
    if (mode == loss::Mode::pointwise && K < 4) throw InvalidArgument("pointwise mode needs K >= 4");
    if (precision != "float64") throw InvalidArgument("only precision \"float64\" is supported");
    weights.validate();
  }
};

inline nlohmann::json to_json(const LossWeights& w) {
  return {{"sigma2", w.sigma2}, {"tau", w.tau},   {"lambda", w.lambda}, {"beta", w.beta},
          {"alpha", w.alpha},   {"eta", w.eta},   {"c_pw", w.c_pw},     {"gamma", w.gamma}};
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"dim", c.dim},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"d_z", c.d_z},
          {"K", c.K},
          {"d_vel", c.d_vel},
          {"vel_hidden", c.vel_hidden},
          {"d_mu", c.d_mu},
          {"N_h", c.N_h},
          {"eps", c.eps},
          {"weights", to_json(c.weights)},
          {"mc_surface", c.mc_surface},
          {"mc_domain", c.mc_domain},
          {"lr_latent", c.lr_latent},
          {"lr_template", c.lr_template},
          {"lr_velocity", c.lr_velocity},
          {"lr_decay", c.lr_decay},
          {"lr_decay_every", c.lr_decay_every},
          {"template_radius", c.template_radius},
          {"velocity_init_scale", c.velocity_init_scale},
          {"seed", c.seed},
          {"mode", loss::to_string(c.mode)},
          {"fidelity", loss::to_string(c.fidelity)},
          {"precision", c.precision},
          {"threads", c.threads}};
}

namespace detail {

template <class T>
void read_field(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("config field '") + key + "': " + e.what());
  }
}

inline void reject_unknown(const nlohmann::json& j, const nlohmann::json& reference, const std::string& where) {
  if (!j.is_object()) throw InvalidArgument(where + " must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (!reference.contains(key)) throw InvalidArgument("unknown config field '" + where + key + "'");
}

}  // namespace detail

/// Overrides the fields present in `j` on top of `base`. Unknown fields are
/// rejected so that typos do not silently fall back to defaults.
inline TrainConfig config_from_json(const nlohmann::json& j, TrainConfig base = {}) {
  detail::reject_unknown(j, to_json(base), "");
  TrainConfig c = base;
  detail::read_field(j, "dim", c.dim);
  detail::read_field(j, "epochs", c.epochs);
  detail::read_field(j, "batch_size", c.batch_size);
  detail::read_field(j, "d_z", c.d_z);
  detail::read_field(j, "K", c.K);
  detail::read_field(j, "d_vel", c.d_vel);
  detail::read_field(j, "vel_hidden", c.vel_hidden);
  detail::read_field(j, "d_mu", c.d_mu);
  detail::read_field(j, "N_h", c.N_h);
  detail::read_field(j, "eps", c.eps);
  if (j.contains("weights")) {
    const auto& w = j.at("weights");
    detail::reject_unknown(w, to_json(c.weights), "weights.");
    detail::read_field(w, "sigma2", c.weights.sigma2);
    detail::read_field(w, "tau", c.weights.tau);
    detail::read_field(w, "lambda", c.weights.lambda);
    detail::read_field(w, "beta", c.weights.beta);
    detail::read_field(w, "alpha", c.weights.alpha);
    detail::read_field(w, "eta", c.weights.eta);
    detail::read_field(w, "c_pw", c.weights.c_pw);
    detail::read_field(w, "gamma", c.weights.gamma);
  }
  detail::read_field(j, "mc_surface", c.mc_surface);
  detail::read_field(j, "mc_domain", c.mc_domain);
  detail::read_field(j, "lr_latent", c.lr_latent);
  detail::read_field(j, "lr_template", c.lr_template);
  detail::read_field(j, "lr_velocity", c.lr_velocity);
  detail::read_field(j, "lr_decay", c.lr_decay);
  detail::read_field(j, "lr_decay_every", c.lr_decay_every);
  detail::read_field(j, "template_radius", c.template_radius);
  detail::read_field(j, "velocity_init_scale", c.velocity_init_scale);
  detail::read_field(j, "seed", c.seed);
  if (j.contains("mode")) c.mode = loss::parse_mode(j.at("mode").get<std::string>());
  if (j.contains("fidelity")) c.fidelity = loss::parse_fidelity(j.at("fidelity").get<std::string>());
  detail::read_field(j, "precision", c.precision);
  detail::read_field(j, "threads", c.threads);
  c.validate();
  return c;
}

inline TrainConfig load_config(const std::filesystem::path& path, TrainConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path.string());
  try {
    return config_from_json(nlohmann::json::parse(in), base);
  } catch (const nlohmann::json::parse_error& e) {
    throw InvalidArgument("config " + path.string() + " is not valid JSON: " + e.what());
  }
}

/// Learning rate after `completed_epochs`: decayed by `decay` once per
/// `every` completed epochs.
inline double learning_rate(double base, int completed_epochs, double decay = 0.7, int every = 250) {
  return base * std::pow(decay, completed_epochs / every);
}

// ---------------------------------------------------------------------------
// Latents and optimizer.

/// One latent code per training shape (rows), kept inside the unit ball.
struct LatentTable {
  Matrix codes;  // N x d_z

  int size() const { return static_cast<int>(codes.rows()); }
  Vector code(int i) const { return codes.row(i).transpose(); }

  /// Radial projection of every code onto the closed unit ball. Rows already
  /// on the sphere up to rounding are left alone so the map is idempotent.
  void project() {
    for (Eigen::Index i = 0; i < codes.rows(); ++i) {
      const double n = codes.row(i).norm();
      if (n > 1.0 + 1e-14) codes.row(i) /= n;
    }
  }

  bool within_ball(double tol = 1e-12) const {
    return codes.rows() == 0 || codes.rowwise().norm().maxCoeff() <= 1.0 + tol;
  }
};

/// Adam with bias correction (the common formulation, e.g. PyTorch).
struct AdamState {
  Parameters m, v;
  std::int64_t step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  static AdamState for_params(const Parameters& p) { return {p.zeros_like(), p.zeros_like()}; }

  void update(Parameters& p, const ParamGradient& g, double lr) {
    if (!p.congruent(g) || !p.congruent(m)) throw InvalidArgument("Adam state does not match parameters");
    ++step;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    for (std::size_t t = 0; t < p.tensors.size(); ++t) {
      auto mt = m.tensors[t].array();
      auto vt = v.tensors[t].array();
      const auto gt = g.tensors[t].array();
      mt = beta1 * mt + (1.0 - beta1) * gt;
      vt = beta2 * vt + (1.0 - beta2) * gt.square();
      p.tensors[t].array() -= lr * (mt / c1) / ((vt / c2).sqrt() + eps);
    }
  }
};

// ---------------------------------------------------------------------------
// State.

struct TrainState {
  TrainConfig config;
  Model model;
  LatentTable latents;
  AdamState adam_template, adam_velocity, adam_latent;
  int epoch = 0;  // completed epochs
};

/// Shapes to train on. Specs are needed only for the occupancy fidelity.
struct TrainData {
  std::vector<geometry::SurfaceSample> samples;
  std::vector<geometry::ShapeSpec> specs;

  int size() const { return static_cast<int>(samples.size()); }

  static TrainData from(const std::vector<geometry::DatasetEntry>& entries) {
    TrainData d;
    for (const auto& e : entries) {
      d.samples.push_back(e.sample);
      d.specs.push_back(e.spec);
    }
    return d;
  }
};

inline TrainState init_run(const TrainConfig& config, int dataset_size) {
  config.validate();
  if (dataset_size < 1) throw InvalidArgument("dataset is empty");
  if (config.batch_size > dataset_size) throw InvalidArgument("batch_size exceeds the dataset size");
  TrainState s;
  s.config = config;
  Rng rt = make_rng({config.seed, tag(Stream::init), 0});
  s.model.tpl = network::init_template(config.dim, config.d_mu, config.N_h, rt, config.template_radius);
  Rng rv = make_rng({config.seed, tag(Stream::init), 1});
  s.model.vel = network::init_velocity(config.dim, config.d_z, config.d_vel, config.vel_hidden, config.K, config.eps,
                                       rv, config.velocity_init_scale);
  Rng rz = make_rng({config.seed, tag(Stream::init), 2});
  s.latents.codes = Matrix(dataset_size, config.d_z);
  const double sd = 1.0 / std::sqrt(static_cast<double>(config.d_z));
  for (Eigen::Index i = 0; i < s.latents.codes.size(); ++i) s.latents.codes.data()[i] = gaussian(rz, sd);
  s.latents.project();
  s.adam_template = AdamState::for_params(s.model.tpl.params);
  s.adam_velocity = AdamState::for_params(s.model.vel.params);
  Parameters lat;
  lat.tensors = {s.latents.codes};
  s.adam_latent = AdamState::for_params(lat);
  return s;
}

// ---------------------------------------------------------------------------
// Sampling.

inline Matrix uniform_domain_points(int n, int dim, Rng& rng) {
  Matrix x(n, dim);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = uniform(rng, -1.0, 1.0);
  return x;
}

/// Half inside, half outside, with labels 1 inside (rejection sampling).
inline void balanced_occupancy(const geometry::ShapeSpec& spec, int n, Rng& rng, Matrix& points, Matrix& labels) {
  const int dim = static_cast<int>(spec.center.size());
  points.resize(n, dim);
  labels.resize(n, 1);
  const int inside_target = n / 2;
  int inside = 0, outside = 0;
  for (int attempts = 0; inside + outside < n; ++attempts) {
    if (attempts > 1000 * n) throw Error("cannot draw balanced occupancy samples for this shape");
    Vector x(dim);
    for (int a = 0; a < dim; ++a) x[a] = uniform(rng, -1.0, 1.0);
    const bool in = geometry::sdf_primitive(spec, x) > 0.0;
    if (in && inside < inside_target) {
      points.row(inside + outside) = x.transpose();
      labels(inside + outside, 0) = 1.0;
      ++inside;
    } else if (!in && outside < n - inside_target) {
      points.row(inside + outside) = x.transpose();
      labels(inside + outside, 0) = 0.0;
      ++outside;
    }
  }
}

/// Monte Carlo inputs for shape `index` in `epoch`; a pure function of the
/// seed, epoch and shape index.
inline loss::ShapeInputs draw_inputs(const TrainConfig& c, const TrainData& data, int index, int epoch) {
  Rng rng = make_rng({c.seed, tag(Stream::batch), static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(index)});
  loss::ShapeInputs in;
  const auto& s = data.samples[index];
  if (c.fidelity == loss::Fidelity::surface) {
    // Select the same rows from points and normals.
    Matrix both(s.size(), 2 * c.dim);
    both << s.points, s.normals;
    const Matrix pick = geometry::subsample_rows(both, std::min<int>(c.mc_surface, s.size()), rng);
    in.surface_points = pick.leftCols(c.dim);
    in.surface_normals = pick.rightCols(c.dim);
  } else {
    if (data.specs.size() != data.samples.size()) throw InvalidArgument("occupancy fidelity needs shape specs");
    balanced_occupancy(data.specs[index], c.mc_surface, rng, in.occ_points, in.occ_labels);
  }
  in.domain_points = uniform_domain_points(c.mc_domain, c.dim, rng);
  return in;
}

// ---------------------------------------------------------------------------
// Epochs.

/// Runs `body(i)` for i in [0, n) on up to `threads` threads. Results must be
/// written to per-index slots; the caller reduces them in index order.
inline void parallel_for(int n, int threads, const std::function<void(int)>& body) {
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (int i = t; i < n; i += threads) body(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline std::vector<int> epoch_order(const TrainConfig& c, int n, int epoch) {
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng({c.seed, tag(Stream::shuffle), static_cast<std::uint64_t>(epoch)});
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

struct LearningRates {
  double latent, tpl, vel;
};

inline LearningRates current_rates(const TrainState& s) {
  const auto& c = s.config;
  return {learning_rate(c.lr_latent, s.epoch, c.lr_decay, c.lr_decay_every),
          learning_rate(c.lr_template, s.epoch, c.lr_decay, c.lr_decay_every),
          learning_rate(c.lr_velocity, s.epoch, c.lr_decay, c.lr_decay_every)};
}

/// One pass over the shuffled dataset. Returns the mean over shapes of the
/// per-shape loss terms (evaluated before each batch's update).
inline LossBreakdown train_epoch(TrainState& s, const TrainData& data) {
  const TrainConfig& c = s.config;
  if (data.size() != s.latents.size()) throw InvalidArgument("dataset size does not match the latent table");
  const LearningRates lr = current_rates(s);
  const std::vector<int> order = epoch_order(c, data.size(), s.epoch);
  LossBreakdown epoch_mean;

  for (int start = 0; start < data.size(); start += c.batch_size) {
    const int b = std::min(c.batch_size, data.size() - start);
    std::vector<loss::ShapeGradient> results(b);
    parallel_for(b, c.threads, [&](int j) {
      const int idx = order[start + j];
      const loss::ShapeInputs in = draw_inputs(c, data, idx, s.epoch);
      results[j] = loss::shape_loss_gradient(s.model.tpl, s.model.vel, s.latents.code(idx), in, c.weights, c.mode,
                                             c.fidelity, 1.0 / b);
    });

    ParamGradient g_tpl = s.model.tpl.params.zeros_like();
    ParamGradient g_vel = s.model.vel.params.zeros_like();
    ParamGradient g_lat;
    g_lat.tensors = {Matrix::Zero(s.latents.codes.rows(), s.latents.codes.cols())};
    for (int j = 0; j < b; ++j) {
      const auto& r = results[j];
      const std::string bad = r.terms.first_non_finite();
      if (!bad.empty())
        throw NonFiniteError("non-finite loss term '" + bad + "' at epoch " + std::to_string(s.epoch + 1) +
                                 " for shape " + std::to_string(order[start + j]),
                             bad);
      g_tpl += r.tpl;
      g_vel += r.vel;
      g_lat.tensors[0].row(order[start + j]) += r.z.transpose();
      epoch_mean.accumulate(r.terms, 1.0 / data.size());
    }

    s.adam_template.update(s.model.tpl.params, g_tpl, lr.tpl);
    s.adam_velocity.update(s.model.vel.params, g_vel, lr.vel);
    Parameters lat;
    lat.tensors = {std::move(s.latents.codes)};
    s.adam_latent.update(lat, g_lat, lr.latent);
    s.latents.codes = std::move(lat.tensors[0]);
    s.latents.project();
  }
  ++s.epoch;
  return epoch_mean;
}

// ---------------------------------------------------------------------------
// Epoch log.

inline std::string epoch_log_header() {
  std::string h = "epoch,lr_latent,lr_template,lr_velocity";
  for (const char* name : LossBreakdown::kNames) h += std::string(",") + name;
  return h;
}

inline std::string epoch_log_row(int epoch, const LearningRates& lr, const LossBreakdown& b) {
  std::ostringstream os;
  os.precision(17);
  os << epoch << ',' << lr.latent << ',' << lr.tpl << ',' << lr.vel;
  for (double v : b.values()) os << ',' << v;
  return os.str();
}

// ---------------------------------------------------------------------------
// Checkpoints.

inline constexpr char kCheckpointMagic[8] = {'R', 'D', 'A', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}
  void bytes(const void* p, std::size_t n) { os_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void u32(std::uint32_t v) { bytes(&v, sizeof v); }
  void u64(std::uint64_t v) { bytes(&v, sizeof v); }
  void i64(std::int64_t v) { bytes(&v, sizeof v); }
  void f64(double v) { bytes(&v, sizeof v); }
  void str(const std::string& s) {
    u64(s.size());
    bytes(s.data(), s.size());
  }
  void matrix(const Matrix& m) {
    u64(static_cast<std::uint64_t>(m.rows()));
    u64(static_cast<std::uint64_t>(m.cols()));
    bytes(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
  }
  void params(const Parameters& p) {
    u64(p.tensors.size());
    for (const auto& t : p.tensors) matrix(t);
  }
  void adam(const AdamState& a) {
    i64(a.step);
    f64(a.beta1);
    f64(a.beta2);
    f64(a.eps);
    params(a.m);
    params(a.v);
  }

 private:
  std::ostream& os_;
};

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}
  void bytes(void* p, std::size_t n) {
    if (n > data_.size() - pos_) throw FormatError("checkpoint is truncated");
    std::memcpy(p, data_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  std::int64_t i64() { return get<std::int64_t>(); }
  double f64() { return get<double>(); }
  std::string str() {
    const std::uint64_t n = u64();
    if (n > data_.size() - pos_) throw FormatError("checkpoint is truncated");
    std::string s(data_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  Matrix matrix() {
    const std::uint64_t r = u64(), c = u64();
    if (r > (1u << 30) || c > (1u << 30) || r * c * sizeof(double) > data_.size() - pos_)
      throw FormatError("checkpoint is truncated");
    Matrix m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
    bytes(m.data(), sizeof(double) * r * c);
    return m;
  }
  /// Reads tensors into `p`, which must already have the expected shapes.
  void params_into(Parameters& p, const char* what) {
    if (u64() != p.tensors.size()) throw FormatError(std::string("checkpoint ") + what + " has the wrong layout");
    for (auto& t : p.tensors) {
      Matrix m = matrix();
      if (m.rows() != t.rows() || m.cols() != t.cols())
        throw FormatError(std::string("checkpoint ") + what + " tensor shape mismatch");
      t = std::move(m);
    }
  }
  void adam_into(AdamState& a, const Parameters& like, const char* what) {
    a.step = i64();
    a.beta1 = f64();
    a.beta2 = f64();
    a.eps = f64();
    a.m = like.zeros_like();
    a.v = like.zeros_like();
    params_into(a.m, what);
    params_into(a.v, what);
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  template <class T>
  T get() {
    T v;
    bytes(&v, sizeof v);
    return v;
  }
  std::string data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const TrainState& s) {
  std::ostringstream os(std::ios::binary);
  detail::Writer w(os);
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.str(to_json(s.config).dump());
  w.u64(static_cast<std::uint64_t>(s.epoch));
  w.params(s.model.tpl.params);
  w.params(s.model.vel.params);
  w.matrix(s.latents.codes);
  w.adam(s.adam_template);
  w.adam(s.adam_velocity);
  w.adam(s.adam_latent);
  return os.str();
}

inline TrainState deserialize_checkpoint(std::string bytes) {
  detail::Reader r(std::move(bytes));
  char magic[sizeof kCheckpointMagic];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) throw FormatError("not a checkpoint file");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  TrainState s;
  try {
    s.config = config_from_json(nlohmann::json::parse(r.str()));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config is corrupt: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError(std::string("checkpoint config is invalid: ") + e.what());
  }
  const auto& c = s.config;
  s.epoch = static_cast<int>(r.u64());
  s.model.tpl = network::TemplateNet::zeros(c.dim, c.d_mu, c.N_h);
  s.model.vel = network::VelocityNetStack::zeros(c.dim, c.d_z, c.d_vel, c.vel_hidden, c.K, c.eps);
  r.params_into(s.model.tpl.params, "template");
  r.params_into(s.model.vel.params, "velocity");
  s.latents.codes = r.matrix();
  if (s.latents.codes.cols() != c.d_z) throw FormatError("checkpoint latent table has the wrong width");
  r.adam_into(s.adam_template, s.model.tpl.params, "template optimizer");
  r.adam_into(s.adam_velocity, s.model.vel.params, "velocity optimizer");
  Parameters lat;
  lat.tensors = {s.latents.codes};
  r.adam_into(s.adam_latent, lat, "latent optimizer");
  if (!r.done()) throw FormatError("checkpoint has trailing bytes");
  return s;
}

inline void save_checkpoint(const TrainState& s, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(s);
  // Write to a sibling file first so a crash never leaves a partial checkpoint.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("cannot write checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

inline TrainState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(std::move(bytes));
}

}  // namespace rda::train
