#include "trialemu/core.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <numbers>

namespace trialemu {

const char* ToString(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig: return "config error";
    case ErrorKind::kSchema: return "schema error";
    case ErrorKind::kParse: return "parse error";
    case ErrorKind::kIntegrity: return "integrity error";
    case ErrorKind::kDegenerateModel: return "degenerate model";
    case ErrorKind::kInsufficientData: return "insufficient data";
    case ErrorKind::kInvalidSolution: return "invalid solution";
    case ErrorKind::kInfeasibleTarget: return "target infeasible";
    case ErrorKind::kUnreachableTarget: return "target unreachable";
    case ErrorKind::kInstanceTooLarge: return "instance too large";
    case ErrorKind::kInvalidRewards: return "invalid rewards";
    case ErrorKind::kUndefined: return "undefined statistic";
    case ErrorKind::kIo: return "i/o error";
  }
  return "error";
}

std::uint64_t SplitMix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Rng Rng::Derive(std::uint64_t seed, std::uint64_t stream) {
  return Rng(SplitMix64(SplitMix64(seed) ^ SplitMix64(stream + 0x632be59bd9b4e019ULL)));
}

std::size_t Rng::Index(std::size_t n) {
  // Rejection sampling removes modulo bias.
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return static_cast<std::size_t>(x % bound);
}

double Rng::Normal() {
  // Box-Muller, one variate per call.
  double u1 = Uniform();
  while (u1 <= 0.0) u1 = Uniform();
  const double u2 = Uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double Rng::Exponential(double rate) { return -std::log1p(-Uniform()) / rate; }

std::uint64_t Fnv1a(std::string_view bytes, std::uint64_t state) {
  for (unsigned char c : bytes) {
    state ^= c;
    state *= 0x100000001b3ULL;
  }
  return state;
}

std::string HexDigest(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

std::string DigestOf(std::span<const double> values) {
  std::string_view bytes(reinterpret_cast<const char*>(values.data()),
                         values.size() * sizeof(double));
  return HexDigest(Fnv1a(bytes));
}

std::string FormatDouble(double value) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, end);
}

std::string Format4(double value) {
  char buf[64];
  // Avoid "-0.0000".
  if (std::abs(value) < 5e-5) value = 0.0;
  std::snprintf(buf, sizeof(buf), "%.4f", value);
  return buf;
}

double ParseDouble(std::string_view text, const std::string& context) {
  while (!text.empty() && (text.front() == ' ' || text.front() == '\t')) text.remove_prefix(1);
  while (!text.empty() && (text.back() == ' ' || text.back() == '\t' || text.back() == '\r')) {
    text.remove_suffix(1);
  }
  if (!text.empty() && text.front() == '+') text.remove_prefix(1);
  double value = 0.0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (text.empty() || ec != std::errc() || ptr != text.data() + text.size() ||
      !std::isfinite(value)) {
    throw Error(ErrorKind::kParse, context + ": not a number: '" + std::string(text) + "'");
  }
  return value;
}

}  // namespace trialemu
