#pragma once

// Command-line front end. `run` parses arguments, dispatches to one
// subcommand and maps failures onto exit codes: 0 success, 1 runtime
// failure, 2 usage error.

#include "CLI11.hpp"
#include "json.hpp"
#include "rda/eval.hpp"

#include <openssl/evp.h>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace rda::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kVersion = "rda 0.1.0";

/// Bad flags or flag combinations that CLI11 cannot express.
class UsageError : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

// ---------------------------------------------------------------------------
// Run manifest.

/// Hex SHA-1 of `content` framed like a git blob ("blob <size>\0<content>").
inline std::string git_blob_hash(const std::string& content) {
  std::string framed = "blob " + std::to_string(content.size());
  framed.push_back('\0');
  framed += content;
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(framed.data(), framed.size(), md, &len, EVP_sha1(), nullptr) != 1) throw Error("SHA-1 failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

inline std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Writes `text` to `path` through a temporary sibling and a rename.
inline void write_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out << text;
    if (!out) throw Error("cannot write " + path.string());
  }
  fs::rename(tmp, path);
}

/// manifest.json in the output directory: written when a command starts and
/// rewritten with the file inventory when it ends.
class RunManifest {
 public:
  RunManifest(fs::path dir, std::string command, std::vector<std::string> args)
      : dir_(std::move(dir)) {
    doc_ = {{"command", std::move(command)},
            {"arguments", std::move(args)},
            {"version", kVersion},
            {"version_hash", git_blob_hash(kVersion)},
            {"started", utc_now()},
            {"finished", nullptr},
            {"status", "running"},
            {"seed", nullptr},
            {"config", json::object()},
            {"files", json::array()}};
  }

  void set_seed(std::uint64_t seed) { doc_["seed"] = seed; }
  void set_config(json config) { doc_["config"] = std::move(config); }
  void add_file(const fs::path& p) { doc_["files"].push_back(fs::relative(p, dir_).generic_string()); }

  void begin() {
    fs::create_directories(dir_);
    write_atomic(path(), doc_.dump(2) + "\n");
  }

  void finish(const std::string& status) {
    doc_["status"] = status;
    doc_["finished"] = utc_now();
    write_atomic(path(), doc_.dump(2) + "\n");
  }

  fs::path path() const { return dir_ / "manifest.json"; }
  const json& doc() const { return doc_; }

 private:
  fs::path dir_;
  json doc_;
};

// ---------------------------------------------------------------------------
// Dataset files.

inline json spec_to_json(const geometry::ShapeSpec& s) {
  json rot = json::array();
  for (Eigen::Index i = 0; i < s.rotation.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < s.rotation.cols(); ++j) row.push_back(s.rotation(i, j));
    rot.push_back(row);
  }
  return {{"kind", s.kind == geometry::ShapeKind::box ? "box" : "sphere"},
          {"center", std::vector<double>(s.center.data(), s.center.data() + s.center.size())},
          {"extents", std::vector<double>(s.extents.data(), s.extents.data() + s.extents.size())},
          {"rotation", rot}};
}

inline Vector vector_from(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline geometry::ShapeSpec spec_from_json(const json& j) {
  geometry::ShapeSpec s;
  const std::string kind = j.at("kind").get<std::string>();
  if (kind != "box" && kind != "sphere") throw FormatError("unknown shape kind '" + kind + "'");
  s.kind = kind == "box" ? geometry::ShapeKind::box : geometry::ShapeKind::sphere;
  s.center = vector_from(j.at("center"));
  s.extents = vector_from(j.at("extents"));
  const auto rows = j.at("rotation").get<std::vector<std::vector<double>>>();
  s.rotation = Matrix(rows.size(), rows.empty() ? 0 : rows[0].size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows[0].size()) throw FormatError("ragged rotation matrix");
    for (std::size_t k = 0; k < rows[i].size(); ++k) s.rotation(i, k) = rows[i][k];
  }
  geometry::validate(s);
  return s;
}

inline std::string shape_stem(int id) {
  std::ostringstream os;
  os << "shape_" << std::setw(4) << std::setfill('0') << id;
  return os.str();
}

/// specs.json, points/shape_NNNN.txt and meshes/shape_NNNN.obj under `dir`.
inline std::vector<fs::path> write_dataset(const std::vector<geometry::DatasetEntry>& data, int dim,
                                           std::uint64_t seed, const fs::path& dir) {
  fs::create_directories(dir / "points");
  fs::create_directories(dir / "meshes");
  std::vector<fs::path> files;
  json shapes = json::array();
  for (const auto& e : data) {
    const std::string stem = shape_stem(e.sample.shape_id);
    const fs::path pts = dir / "points" / (stem + ".txt");
    const fs::path obj = dir / "meshes" / (stem + ".obj");
    geometry::write_points(e.sample, pts);
    geometry::write_obj(geometry::box_mesh(e.spec), obj);
    json j = spec_to_json(e.spec);
    j["id"] = e.sample.shape_id;
    j["points"] = "points/" + stem + ".txt";
    j["mesh"] = "meshes/" + stem + ".obj";
    shapes.push_back(j);
    files.push_back(pts);
    files.push_back(obj);
  }
  const json doc = {{"dim", dim}, {"seed", seed}, {"shapes", shapes}};
  write_atomic(dir / "specs.json", doc.dump(2) + "\n");
  files.push_back(dir / "specs.json");
  return files;
}

inline std::vector<geometry::DatasetEntry> load_dataset(const fs::path& dir) {
  std::ifstream in(dir / "specs.json");
  if (!in) throw Error("no dataset at " + dir.string() + " (missing specs.json)");
  std::vector<geometry::DatasetEntry> out;
  try {
    const json doc = json::parse(in);
    const int dim = doc.at("dim").get<int>();
    for (const auto& s : doc.at("shapes")) {
      geometry::DatasetEntry e;
      e.spec = spec_from_json(s);
      if (e.spec.dim() != dim) throw FormatError("shape dimension differs from the dataset dimension");
      e.sample = geometry::read_points(dir / s.at("points").get<std::string>(), dim, s.at("id").get<int>());
      out.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw FormatError("malformed specs.json in " + dir.string() + ": " + e.what());
  }
  if (out.empty()) throw FormatError("dataset at " + dir.string() + " has no shapes");
  return out;
}

// ---------------------------------------------------------------------------
// Latent files.

struct LatentEntry {
  int shape_id = 0;
  Vector z;
  double fidelity = 0.0;
};

inline json latents_to_json(const std::vector<LatentEntry>& entries) {
  json arr = json::array();
  for (const auto& e : entries)
    arr.push_back({{"shape_id", e.shape_id},
                   {"z", std::vector<double>(e.z.data(), e.z.data() + e.z.size())},
                   {"fidelity", e.fidelity}});
  return {{"latents", arr}};
}

inline std::vector<LatentEntry> load_latents(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open latents " + path.string());
  std::vector<LatentEntry> out;
  try {
    const json doc = json::parse(in);
    for (const auto& j : doc.at("latents")) {
      LatentEntry e;
      e.shape_id = j.at("shape_id").get<int>();
      e.z = vector_from(j.at("z"));
      if (j.contains("fidelity") && j.at("fidelity").is_number()) e.fidelity = j.at("fidelity").get<double>();
      out.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw FormatError("malformed latents file " + path.string() + ": " + e.what());
  }
  return out;
}

inline std::vector<LatentEntry> training_latents(const train::TrainState& s) {
  std::vector<LatentEntry> out;
  for (int i = 0; i < s.latents.size(); ++i) out.push_back({i, s.latents.code(i), 0.0});
  return out;
}

// ---------------------------------------------------------------------------
// Commands.

struct Context {
  std::ostream& out;
  std::ostream& err;
  int threads = 1;
  std::optional<std::uint64_t> env_seed;
  std::vector<std::string> args;
};

/// Seed precedence: --seed flag, then RDA_SEED, then the given fallback.
inline std::uint64_t effective_seed(const Context& ctx, const std::optional<std::uint64_t>& flag,
                                    std::uint64_t fallback) {
  if (flag) return *flag;
  if (ctx.env_seed) return *ctx.env_seed;
  return fallback;
}

/// Runs `body` between RunManifest begin/finish; the manifest records a
/// failure before the exception propagates.
template <class F>
int with_manifest(RunManifest& m, F&& body) {
  m.begin();
  try {
    body();
  } catch (const std::exception& e) {
    m.finish(std::string("failed: ") + e.what());
    throw;
  }
  m.finish("ok");
  return 0;
}

struct GenerateArgs {
  int count = 16;
  int dim = 2;
  std::optional<std::uint64_t> seed;
  int points = 4096;
  std::string out;
};

inline int cmd_generate(const Context& ctx, const GenerateArgs& a) {
  const std::uint64_t seed = effective_seed(ctx, a.seed, 0);
  RunManifest m(a.out, "generate", ctx.args);
  m.set_seed(seed);
  m.set_config({{"count", a.count}, {"dim", a.dim}, {"points", a.points}});
  return with_manifest(m, [&] {
    const auto data = geometry::generate_box_dataset(a.count, a.dim, seed, a.points);
    for (const auto& f : write_dataset(data, a.dim, seed, a.out)) m.add_file(f);
    ctx.out << "wrote " << data.size() << " shapes to " << a.out << "\n";
  });
}

struct TrainArgs {
  std::string config, data, out, resume;
  std::optional<std::string> mode;
  std::optional<int> epochs;
  std::optional<std::uint64_t> seed;
  int checkpoint_every = 0;
};

inline std::string checkpoint_name(int epoch) { return "checkpoint_epoch" + std::to_string(epoch) + ".bin"; }

/// Keeps the header and the rows of epochs <= `epoch` of an existing log.
inline std::string truncated_log(const fs::path& path, int epoch) {
  std::string kept = train::epoch_log_header() + "\n";
  std::ifstream in(path);
  std::string line;
  if (!in || !std::getline(in, line)) return kept;
  while (std::getline(in, line)) {
    const auto comma = line.find(',');
    if (comma == std::string::npos) continue;
    if (std::stoi(line.substr(0, comma)) <= epoch) kept += line + "\n";
  }
  return kept;
}

inline int cmd_train(const Context& ctx, const TrainArgs& a) {
  const auto entries = load_dataset(a.data);
  const train::TrainData data = train::TrainData::from(entries);
  train::TrainState state;
  if (!a.resume.empty()) {
    state = train::load_checkpoint(a.resume);
    if (a.epochs) state.config.epochs = *a.epochs;
    if (a.mode && loss::parse_mode(*a.mode) != state.config.mode)
      throw UsageError("--mode differs from the mode stored in the checkpoint");
    if (a.seed && *a.seed != state.config.seed) throw UsageError("--seed differs from the checkpoint seed");
  } else {
    train::TrainConfig base;
    base.dim = entries.front().spec.dim();
    train::TrainConfig c = a.config.empty() ? base : train::load_config(a.config, base);
    if (a.mode) c.mode = loss::parse_mode(*a.mode);
    if (a.epochs) c.epochs = *a.epochs;
    c.seed = effective_seed(ctx, a.seed, c.seed);
    if (c.dim != base.dim) throw InvalidArgument("config dim does not match the dataset dimension");
    state = train::init_run(c, data.size());
  }
  state.config.threads = ctx.threads;
  state.config.validate();
  if (state.epoch > state.config.epochs) throw InvalidArgument("checkpoint is already past the requested epochs");

  RunManifest m(a.out, "train", ctx.args);
  m.set_seed(state.config.seed);
  m.set_config(train::to_json(state.config));
  return with_manifest(m, [&] {
    const fs::path log_path = fs::path(a.out) / "epochs.csv";
    write_atomic(log_path, truncated_log(a.resume.empty() ? fs::path() : log_path, state.epoch));
    std::ofstream log(log_path, std::ios::app);
    log.precision(17);
    while (state.epoch < state.config.epochs) {
      const train::LearningRates lr = train::current_rates(state);
      const loss::LossBreakdown b = train::train_epoch(state, data);
      if (!state.latents.within_ball()) throw Error("latent codes left the unit ball");
      log << train::epoch_log_row(state.epoch, lr, b) << "\n" << std::flush;
      if (a.checkpoint_every > 0 && state.epoch % a.checkpoint_every == 0 && state.epoch < state.config.epochs) {
        const fs::path p = fs::path(a.out) / checkpoint_name(state.epoch);
        train::save_checkpoint(state, p);
        m.add_file(p);
      }
      if (state.epoch == 1 || state.epoch % 10 == 0 || state.epoch == state.config.epochs)
        ctx.out << "epoch " << state.epoch << " loss " << b.total << "\n" << std::flush;
    }
    const fs::path ckpt = fs::path(a.out) / "checkpoint.bin";
    train::save_checkpoint(state, ckpt);
    write_atomic(fs::path(a.out) / "latents.json", latents_to_json(training_latents(state)).dump(2) + "\n");
    m.add_file(log_path);
    m.add_file(ckpt);
    m.add_file(fs::path(a.out) / "latents.json");
  });
}

struct EncodeArgs {
  std::string checkpoint, data, points, out;
  int id = 0;
  infer::EncodeConfig encode;
  std::optional<std::uint64_t> seed;
};

inline std::uint64_t encode_seed(std::uint64_t seed, int shape_id) {
  return make_rng({seed, tag(Stream::encode), static_cast<std::uint64_t>(shape_id)})();
}

inline int cmd_encode(const Context& ctx, const EncodeArgs& a) {
  if (a.data.empty() == a.points.empty()) throw UsageError("give exactly one of --data or --points");
  const train::TrainState s = train::load_checkpoint(a.checkpoint);
  std::vector<geometry::SurfaceSample> samples;
  if (!a.data.empty()) {
    for (const auto& e : load_dataset(a.data)) samples.push_back(e.sample);
  } else {
    samples.push_back(geometry::read_points(a.points, s.config.dim, a.id));
  }
  const std::uint64_t seed = effective_seed(ctx, a.seed, 0);
  RunManifest m(a.out, "encode", ctx.args);
  m.set_seed(seed);
  m.set_config({{"iterations", a.encode.iterations}, {"lr", a.encode.lr}, {"gamma", a.encode.gamma},
                {"mc_points", a.encode.mc_points}});
  return with_manifest(m, [&] {
    std::vector<LatentEntry> out(samples.size());
    train::parallel_for(static_cast<int>(samples.size()), ctx.threads, [&](int i) {
      infer::EncodeConfig ec = a.encode;
      ec.seed = encode_seed(seed, samples[i].shape_id);
      const infer::EncodeResult r = infer::encode_shape(s.model, samples[i], ec);
      out[i] = {samples[i].shape_id, r.z, r.fidelity};
    });
    const fs::path p = fs::path(a.out) / "latents.json";
    write_atomic(p, latents_to_json(out).dump(2) + "\n");
    m.add_file(p);
    for (const auto& e : out) ctx.out << "shape " << e.shape_id << " fidelity " << e.fidelity << "\n";
  });
}

struct LatentSource {
  std::string latents;
  bool train_latents = false;
  std::optional<int> shape;
};

inline std::vector<LatentEntry> pick_latents(const LatentSource& src, const train::TrainState& s) {
  if (src.latents.empty() == !src.train_latents) throw UsageError("give exactly one of --latents or --train-latents");
  std::vector<LatentEntry> all = src.train_latents ? training_latents(s) : load_latents(src.latents);
  for (const auto& e : all)
    if (e.z.size() != s.config.d_z) throw FormatError("latent width does not match the checkpoint");
  if (!src.shape) return all;
  for (const auto& e : all)
    if (e.shape_id == *src.shape) return {e};
  throw InvalidArgument("no latent for shape " + std::to_string(*src.shape));
}

struct MeshArgs {
  std::string checkpoint, out;
  int res = 0;
  LatentSource src;
};

inline int cmd_reconstruct(const Context& ctx, const MeshArgs& a) {
  const train::TrainState s = train::load_checkpoint(a.checkpoint);
  const auto latents = pick_latents(a.src, s);
  RunManifest m(a.out, "reconstruct", ctx.args);
  m.set_config({{"res", a.res}});
  return with_manifest(m, [&] {
    for (const auto& e : latents) {
      const fs::path p = fs::path(a.out) / ("recon_" + shape_stem(e.shape_id) + ".obj");
      geometry::write_obj(infer::reconstruct(s.model, e.z, a.res), p);
      m.add_file(p);
    }
    ctx.out << "wrote " << latents.size() << " reconstructions to " << a.out << "\n";
  });
}

inline int cmd_template(const Context& ctx, const MeshArgs& a) {
  const train::TrainState s = train::load_checkpoint(a.checkpoint);
  RunManifest m(a.out, "template", ctx.args);
  m.set_config({{"res", a.res}});
  return with_manifest(m, [&] {
    const fs::path p = fs::path(a.out) / "template.obj";
    geometry::write_obj(infer::export_template(s.model, a.res), p);
    m.add_file(p);
    ctx.out << "wrote " << p.string() << "\n";
  });
}

inline int cmd_trajectory(const Context& ctx, const MeshArgs& a) {
  if (!a.src.shape) throw UsageError("--shape is required");
  const train::TrainState s = train::load_checkpoint(a.checkpoint);
  const auto latents = pick_latents(a.src, s);
  RunManifest m(a.out, "trajectory", ctx.args);
  m.set_config({{"res", a.res}, {"shape", *a.src.shape}});
  return with_manifest(m, [&] {
    const infer::Trajectory t = infer::trajectory(s.model, latents.front().z, a.res);
    infer::export_trajectory(t, a.out);
    for (const auto& entry : fs::directory_iterator(a.out))
      if (entry.path().filename() != "manifest.json" && entry.path().extension() != ".tmp") m.add_file(entry.path());
    ctx.out << "stage speed variance " << infer::stage_speed_variance(t.speeds) << "\n";
  });
}

struct EvalArgs {
  std::string checkpoint, data, out;
  std::vector<double> noise;
  eval::EvalOptions options;
  int iso_points = 4096;
  std::optional<std::uint64_t> seed;
};

inline std::string noise_label(double s) {
  std::ostringstream os;
  os << s;
  return os.str();
}

inline int cmd_eval(const Context& ctx, const EvalArgs& a) {
  const train::TrainState s = train::load_checkpoint(a.checkpoint);
  const auto entries = load_dataset(a.data);
  if (entries.front().spec.dim() != s.config.dim) throw InvalidArgument("dataset dimension does not match the model");
  std::vector<double> levels{0.0};
  for (double n : a.noise) {
    if (!(n >= 0.0)) throw UsageError("--noise levels must be non-negative");
    if (std::find(levels.begin(), levels.end(), n) == levels.end()) levels.push_back(n);
  }
  eval::EvalOptions opt = a.options;
  opt.threads = ctx.threads;
  opt.seed = effective_seed(ctx, a.seed, 0);
  RunManifest m(a.out, "eval", ctx.args);
  m.set_seed(opt.seed);
  m.set_config({{"iterations", opt.encode.iterations}, {"res", opt.resolution}, {"levels", levels},
                {"iso_points", a.iso_points}});
  return with_manifest(m, [&] {
    const auto shapes = eval::shapes_from(entries, 4096, opt.seed);
    json summary = {{"levels", json::array()}};
    Matrix clean_latents;
    for (double level : levels) {
      const eval::MetricReport rep = eval::noise_level_report(s.model, shapes, level, opt);
      const std::string name = level == 0.0 ? "metrics.csv" : "metrics_noise_" + noise_label(level) + ".csv";
      write_atomic(fs::path(a.out) / name, eval::report_csv(rep));
      m.add_file(fs::path(a.out) / name);
      json js = eval::report_summary(rep);
      js["stddev"] = level;
      js["csv"] = name;
      summary["levels"].push_back(js);
      ctx.out << "noise " << level << ": cd mean " << rep.mean_cd << " median " << rep.median_cd << ", em mean "
              << rep.mean_em << " median " << rep.median_em << ", failed " << rep.failed << "\n";
      if (level == 0.0) {
        std::vector<Vector> zs;
        for (const auto& r : rep.rows)
          if (r.ok()) zs.push_back(r.z);
        clean_latents.resize(static_cast<Eigen::Index>(zs.size()), s.config.d_z);
        for (std::size_t i = 0; i < zs.size(); ++i) clean_latents.row(i) = zs[i].transpose();
      }
    }
    if (clean_latents.rows() > 0) {
      Rng rng = make_rng({opt.seed, tag(Stream::eval), 2});
      const Matrix pts = train::uniform_domain_points(a.iso_points, s.config.dim, rng);
      summary["isometry_defect"] = eval::isometry_defect(s.model.vel, clean_latents, pts);
    } else {
      summary["isometry_defect"] = nullptr;
    }
    write_atomic(fs::path(a.out) / "summary.json", summary.dump(2) + "\n");
    m.add_file(fs::path(a.out) / "summary.json");
  });
}

struct VerifyArgs {
  int res = 256;
  double eta = 1.0;
  std::string field = "sine";
  std::string out = ".";
};

inline int cmd_verify_c(const Context& ctx, const VerifyArgs& a) {
  const eval::FieldSpec field = a.field == "sine" ? eval::FieldSpec::sine() : eval::FieldSpec::sine_analytic();
  RunManifest m(a.out, "verify-c", ctx.args);
  m.set_config({{"res", a.res}, {"eta", a.eta}, {"field", a.field}});
  eval::IdentityCheck c;
  with_manifest(m, [&] {
    c = eval::verify_appendix_c(field, a.res, a.eta);
    const fs::path p = fs::path(a.out) / "verify_c.json";
    write_atomic(p, json{{"lhs", c.lhs}, {"rhs", c.rhs}, {"rel_err", c.rel_err}}.dump(2) + "\n");
    m.add_file(p);
  });
  ctx.out << std::setprecision(12) << "lhs " << c.lhs << "\nrhs " << c.rhs << "\nrel_err " << c.rel_err << "\n";
  return c.rel_err < 1e-3 ? 0 : 1;
}

// ---------------------------------------------------------------------------
// Entry point.

inline std::optional<std::uint64_t> parse_env_seed(const char* v) {
  if (v == nullptr || *v == '\0') return std::nullopt;
  std::size_t used = 0;
  std::uint64_t seed = 0;
  try {
    seed = std::stoull(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != std::strlen(v) || v[0] == '-') throw UsageError(std::string("RDA_SEED is not an unsigned integer: ") + v);
  return seed;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Riemannian deformable atlas: train, encode, reconstruct and evaluate", "rda"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);
  int threads = 1;
  app.add_option("--threads", threads, "Cap on worker threads; 1 gives bitwise reproducible results")
      ->check(CLI::Range(1, 1024));

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Write a dataset of random rotated boxes");
  g->add_option("--count", gen.count, "Number of shapes")->check(CLI::PositiveNumber);
  g->add_option("--dim", gen.dim, "Dimension (2 or 3)")->check(CLI::IsMember({2, 3}));
  g->add_option("--seed", gen.seed, "Dataset seed");
  g->add_option("--points", gen.points, "Surface points per shape")->check(CLI::PositiveNumber);
  g->add_option("--out", gen.out, "Output directory")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Fit template, velocity fields and latent codes");
  t->add_option("--config", tr.config, "Training config JSON")->check(CLI::ExistingFile);
  t->add_option("--data", tr.data, "Dataset directory from `generate`")->required();
  t->add_option("--out", tr.out, "Output directory")->required();
  t->add_option("--mode", tr.mode, "Deformation regularizer")->check(CLI::IsMember({"riemannian", "pointwise"}));
  t->add_option("--epochs", tr.epochs, "Override the number of epochs")->check(CLI::NonNegativeNumber);
  t->add_option("--seed", tr.seed, "Run seed");
  t->add_option("--resume", tr.resume, "Continue from a checkpoint")->check(CLI::ExistingFile);
  t->add_option("--checkpoint-every", tr.checkpoint_every, "Also save a checkpoint every N epochs")
      ->check(CLI::NonNegativeNumber);

  EncodeArgs en;
  auto add_encode_flags = [](CLI::App* c, infer::EncodeConfig& e) {
    c->add_option("--iterations", e.iterations, "Adam iterations on the latent")->check(CLI::PositiveNumber);
    c->add_option("--lr", e.lr, "Initial latent learning rate")->check(CLI::PositiveNumber);
    c->add_option("--lr-drop-at", e.lr_drop_at, "Iteration of the learning rate drop")->check(CLI::NonNegativeNumber);
    c->add_option("--gamma", e.gamma, "Latent norm penalty")->check(CLI::NonNegativeNumber);
    c->add_option("--mc", e.mc_points, "Surface points per iteration")->check(CLI::PositiveNumber);
  };
  auto* e = app.add_subcommand("encode", "Fit latent codes to shapes with the networks frozen");
  e->add_option("--checkpoint", en.checkpoint, "Trained checkpoint")->required()->check(CLI::ExistingFile);
  e->add_option("--data", en.data, "Dataset directory (encode every shape)");
  e->add_option("--points", en.points, "Single point file (x y [z] nx ny [nz] per line)")->check(CLI::ExistingFile);
  e->add_option("--id", en.id, "Shape id recorded for --points");
  e->add_option("--out", en.out, "Output directory")->required();
  e->add_option("--seed", en.seed, "Encoding seed");
  add_encode_flags(e, en.encode);

  MeshArgs rc, tp, tj;
  auto add_source = [](CLI::App* c, LatentSource& s) {
    c->add_option("--latents", s.latents, "latents.json from `encode` or `train`")->check(CLI::ExistingFile);
    c->add_flag("--train-latents", s.train_latents, "Use the latent table stored in the checkpoint");
    c->add_option("--shape", s.shape, "Only this shape id");
  };
  auto add_mesh = [](CLI::App* c, MeshArgs& m) {
    c->add_option("--checkpoint", m.checkpoint, "Trained checkpoint")->required()->check(CLI::ExistingFile);
    c->add_option("--res", m.res, "Extraction grid nodes per axis (0: 128 in 2D, 64 in 3D)")
        ->check(CLI::Range(0, 4096));
    c->add_option("--out", m.out, "Output directory")->required();
  };
  auto* r = app.add_subcommand("reconstruct", "Flow the template mesh to each latent code");
  add_mesh(r, rc);
  add_source(r, rc.src);
  auto* tpc = app.add_subcommand("template", "Extract the template zero level set");
  add_mesh(tpc, tp);
  auto* tjc = app.add_subcommand("trajectory", "Write the template mesh at every stage of the reverse flow");
  add_mesh(tjc, tj);
  add_source(tjc, tj.src);

  EvalArgs ev;
  auto* v = app.add_subcommand("eval", "Reconstruction metrics, noise robustness and isometry defect");
  v->add_option("--checkpoint", ev.checkpoint, "Trained checkpoint")->required()->check(CLI::ExistingFile);
  v->add_option("--data", ev.data, "Dataset directory to evaluate")->required();
  v->add_option("--out", ev.out, "Output directory")->required();
  v->add_option("--noise", ev.noise, "Vertex noise stddevs evaluated in addition to the clean split");
  v->add_option("--res", ev.options.resolution, "Extraction grid nodes per axis")->check(CLI::Range(0, 4096));
  v->add_option("--iso-points", ev.iso_points, "Domain points for the isometry defect")->check(CLI::PositiveNumber);
  v->add_option("--seed", ev.seed, "Evaluation seed");
  add_encode_flags(v, ev.options.encode);

  VerifyArgs vc;
  auto* c = app.add_subcommand("verify-c", "Check the Killing norm integration-by-parts identity numerically");
  c->add_option("--res", vc.res, "Quadrature nodes per axis")->check(CLI::Range(8, 8192));
  c->add_option("--eta", vc.eta, "L2 weight")->check(CLI::NonNegativeNumber);
  c->add_option("--field", vc.field, "Test field")->check(CLI::IsMember({"sine", "sine-analytic"}));
  c->add_option("--out", vc.out, "Output directory");

  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 2;
  }

  try {
    Context ctx{out, err, threads, parse_env_seed(std::getenv("RDA_SEED")), args};
    if (*g) return cmd_generate(ctx, gen);
    if (*t) return cmd_train(ctx, tr);
    if (*e) return cmd_encode(ctx, en);
    if (*r) return cmd_reconstruct(ctx, rc);
    if (*tpc) return cmd_template(ctx, tp);
    if (*tjc) return cmd_trajectory(ctx, tj);
    if (*v) return cmd_eval(ctx, ev);
    if (*c) return cmd_verify_c(ctx, vc);
  } catch (const UsageError& ex) {
    err << "usage error: " << ex.what() << "\n" << app.help();
    return 2;
  } catch (const NonFiniteError& ex) {
    err << "error: " << ex.what() << " (term: " << ex.term() << ")\n";
    return 1;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace rda::cli
