#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace trialemu {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using IntVector = Eigen::VectorXi;

// Failure categories. The CLI maps these onto process exit codes.
enum class ErrorKind {
  kConfig,           // malformed or inconsistent configuration
  kSchema,           // missing / unknown column, dimension mismatch
  kParse,            // non-numeric cell, bad file syntax
  kIntegrity,        // duplicate ids, hash mismatch on resume
  kDegenerateModel,  // single-class training data
  kInsufficientData,
  kInvalidSolution,  // matching constraint violated
  kInfeasibleTarget,
  kUnreachableTarget,
  kInstanceTooLarge,
  kInvalidRewards,
  kUndefined,        // statistic undefined on the given data
  kIo,
};

const char* ToString(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

// Portable random stream. The engine sequence is fixed by the standard; the
// distributions below are hand-rolled so that draws do not depend on the
// standard library vendor.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Independent stream for (seed, stream index).
  static Rng Derive(std::uint64_t seed, std::uint64_t stream);

  std::uint64_t NextU64() { return engine_(); }
  // Uniform on [0, 1).
  double Uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  // Uniform integer on [0, n).
  std::size_t Index(std::size_t n);
  double Normal();
  double Exponential(double rate);
  bool Bernoulli(double p) { return Uniform() < p; }

  template <typename T>
  void Shuffle(std::vector<T>& values) {
    for (std::size_t i = values.size(); i > 1; --i) {
      std::swap(values[i - 1], values[Index(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

std::uint64_t SplitMix64(std::uint64_t x);

// 64-bit FNV-1a content hash, rendered as 16 hex digits.
std::uint64_t Fnv1a(std::string_view bytes, std::uint64_t state = 0xcbf29ce484222325ULL);
std::string HexDigest(std::uint64_t value);
std::string DigestOf(std::span<const double> values);

// Shortest round-trip decimal rendering.
std::string FormatDouble(double value);
// Fixed 4-decimal rendering used by reports.
std::string Format4(double value);
// Strict full-string parse; nullopt-free, throws kParse with `context`.
double ParseDouble(std::string_view text, const std::string& context);

}  // namespace trialemu
