#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace rda {

/// Dense column-major matrix; point sets are stored one point per row.
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

/// Base error for everything the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid arguments or configuration (maps to CLI exit code 2 where relevant).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// A numerical computation produced a non-finite value.
class NonFiniteError : public Error {
 public:
  NonFiniteError(const std::string& what, std::string term)
      : Error(what), term_(std::move(term)) {}
  const std::string& term() const { return term_; }

 private:
  std::string term_;
};

/// Malformed, truncated or incompatible file.
class FormatError : public Error {
 public:
  using Error::Error;
};

using Rng = std::mt19937_64;

/// Derive an independent generator from a tuple of integers. Streams are a
/// pure function of the key, so e.g. (seed, epoch, purpose) reproduces the
/// same draws no matter what was consumed elsewhere.
inline Rng make_rng(std::initializer_list<std::uint64_t> key) {
  std::vector<std::uint32_t> words;
  words.reserve(key.size() * 2);
  for (std::uint64_t k : key) {
    words.push_back(static_cast<std::uint32_t>(k & 0xffffffffu));
    words.push_back(static_cast<std::uint32_t>(k >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return Rng(seq);
}

/// Stream tags, so that different consumers of one seed never overlap.
enum class Stream : std::uint64_t {
  dataset = 1,
  surface = 2,
  shuffle = 3,
  batch = 4,
  init = 5,
  noise = 6,
  encode = 7,
  metric = 8,
  eval = 9,
};

inline std::uint64_t tag(Stream s) { return static_cast<std::uint64_t>(s); }

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double gaussian(Rng& rng, double stddev = 1.0) {
  return std::normal_distribution<double>(0.0, stddev)(rng);
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

}  // namespace rda
