#pragma once

#include <openssl/evp.h>

#include <boost/multiprecision/cpp_int.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "gradsigns/autodiff.hpp"
#include "gradsigns/error.hpp"
#include "gradsigns/random.hpp"

namespace gradsigns {

struct RandomProvenance {
  std::uint64_t seed = 0;
  bool operator==(const RandomProvenance&) const = default;
};

// Key derived from an identity message; anyone holding the message can
// regenerate the key and check it.
struct MessageProvenance {
  std::string digest_algorithm = "sha256";
  std::string message;
  std::string digest_hex;
  bool operator==(const MessageProvenance&) const = default;
};

struct WatermarkKey {
  std::vector<std::uint8_t> bits;      // b, length N
  std::vector<std::size_t> carriers;   // C, sorted flat input indices
  std::vector<double> matrix;          // K, N x |C| row-major, entries in [-1, 1]
  int target_class = 0;                // T
  std::size_t input_dim = 0;
  int class_count = 0;
  std::variant<RandomProvenance, MessageProvenance> provenance;

  std::size_t bit_count() const noexcept { return bits.size(); }
  std::size_t carrier_count() const noexcept { return carriers.size(); }
  double k(std::size_t j, std::size_t i) const { return matrix[j * carriers.size() + i]; }

  void validate() const {
    if (bits.empty()) throw value_error("watermark key has no bits");
    if (matrix.size() != bits.size() * carriers.size()) throw shape_error("key matrix is not N x |C|");
    for (const auto b : bits)
      if (b > 1) throw value_error("watermark bit not in {0,1}");
    for (const double v : matrix)
      if (!(v >= -1.0 && v <= 1.0)) throw value_error("key matrix entry outside [-1, 1]");
    for (std::size_t i = 0; i < carriers.size(); ++i) {
      if (carriers[i] >= input_dim) throw value_error("carrier index outside input");
      if (i && carriers[i] <= carriers[i - 1]) throw value_error("carrier indices must be sorted and distinct");
    }
    if (target_class < 0 || target_class >= class_count) throw value_error("target class outside class range");
  }

  bool operator==(const WatermarkKey&) const = default;
};

// ---------------------------------------------------------------------------
// Key generation

namespace detail {

inline std::array<unsigned char, 32> sha256(std::span<const unsigned char> bytes) {
  std::array<unsigned char, 32> out{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 || len != out.size()) {
    throw Error("crypto", "SHA-256 failed");
  }
  return out;
}

inline std::string to_hex(std::span<const unsigned char> bytes) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s;
  for (const unsigned char b : bytes) {
    s.push_back(digits[b >> 4]);
    s.push_back(digits[b & 15]);
  }
  return s;
}

}  // namespace detail

// Counter-mode expansion of a digest: block i = SHA-256(digest || le64(i)).
class HashStream {
 public:
  explicit HashStream(std::array<unsigned char, 32> digest) : digest_(digest) {}

  std::uint64_t operator()() {
    if (offset_ + 8 > block_.size()) refill();
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | block_[offset_ + static_cast<std::size_t>(i)];
    offset_ += 8;
    return v;
  }

 private:
  void refill() {
    std::array<unsigned char, 40> input{};
    std::copy(digest_.begin(), digest_.end(), input.begin());
    for (int i = 0; i < 8; ++i) input[32 + static_cast<std::size_t>(i)] = static_cast<unsigned char>(counter_ >> (8 * i));
    block_ = detail::sha256(input);
    ++counter_;
    offset_ = 0;
  }

  std::array<unsigned char, 32> digest_;
  std::array<unsigned char, 32> block_{};
  std::size_t offset_ = 32;
  std::uint64_t counter_ = 0;
};

// b, then C, then K, then T, all drawn from `gen`.
template <BitSource64 G>
WatermarkKey derive_key(G& gen, std::size_t bits, std::size_t carrier_size, std::size_t input_dim, int classes) {
  if (bits == 0) throw value_error("watermark needs at least one bit");
  if (carrier_size == 0 || carrier_size > input_dim) {
    throw value_error("carrier size " + std::to_string(carrier_size) + " must be in [1, " + std::to_string(input_dim) + "]");
  }
  if (classes < 2) throw value_error("need at least two classes");
  WatermarkKey key;
  key.bits.resize(bits);
  for (auto& b : key.bits) b = static_cast<std::uint8_t>(uniform_index(gen, 2));
  key.carriers = sample_without_replacement(gen, input_dim, carrier_size);
  std::sort(key.carriers.begin(), key.carriers.end());
  key.matrix.resize(bits * carrier_size);
  for (auto& v : key.matrix) v = uniform(gen, -1.0, 1.0);
  key.target_class = static_cast<int>(uniform_index(gen, static_cast<std::uint64_t>(classes)));
  key.input_dim = input_dim;
  key.class_count = classes;
  return key;
}

inline WatermarkKey generate_key_random(std::size_t bits, std::size_t carrier_size, std::size_t input_dim, int classes,
                                        std::uint64_t seed) {
  Rng rng(seed);
  WatermarkKey key = derive_key(rng, bits, carrier_size, input_dim, classes);
  key.provenance = RandomProvenance{seed};
  return key;
}

inline WatermarkKey generate_key_from_message(const std::string& message, std::size_t bits, std::size_t carrier_size,
                                              std::size_t input_dim, int classes) {
  if (message.empty()) throw value_error("identity message must not be empty");
  const auto digest = detail::sha256(
      std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(message.data()), message.size()));
  HashStream stream(digest);
  WatermarkKey key = derive_key(stream, bits, carrier_size, input_dim, classes);
  key.provenance = MessageProvenance{"sha256", message, detail::to_hex(digest)};
  return key;
}

// Regenerates a message-derived key and compares. Random keys cannot be audited.
inline bool audit_key(const WatermarkKey& key) {
  const auto* m = std::get_if<MessageProvenance>(&key.provenance);
  if (!m || m->digest_algorithm != "sha256") return false;
  return generate_key_from_message(m->message, key.bit_count(), key.carrier_count(), key.input_dim, key.class_count) == key;
}

// ---------------------------------------------------------------------------
// Embedding regularizer, decoding and metrics

// <K_j, G> for every bit j.
inline std::vector<double> margins(std::span<const double> gradient, const WatermarkKey& key) {
  if (gradient.size() != key.carrier_count()) {
    throw shape_error("gradient has " + std::to_string(gradient.size()) + " entries, key has " +
                      std::to_string(key.carrier_count()) + " carriers");
  }
  std::vector<double> m(key.bit_count(), 0.0);
  for (std::size_t j = 0; j < m.size(); ++j)
    for (std::size_t i = 0; i < gradient.size(); ++i) m[j] += key.k(j, i) * gradient[i];
  return m;
}

inline constexpr double kProbabilityClamp = 1e-12;

inline double clamped_sigmoid(double m) {
  const double y = m >= 0.0 ? 1.0 / (1.0 + std::exp(-m)) : std::exp(m) / (1.0 + std::exp(m));
  return std::clamp(y, kProbabilityClamp, 1.0 - kProbabilityClamp);
}

// Binary cross-entropy of sigmoid(<K_j, G>) against the bits.
inline double embedding_loss(std::span<const double> gradient, const WatermarkKey& key) {
  const auto m = margins(gradient, key);
  double loss = 0.0;
  for (std::size_t j = 0; j < m.size(); ++j) {
    const double y = clamped_sigmoid(m[j]);
    loss -= key.bits[j] ? std::log(y) : std::log(1.0 - y);
  }
  return loss;
}

// Analytic d(embedding_loss)/dG; zero through clamped probabilities.
inline std::vector<double> embedding_loss_gradient(std::span<const double> gradient, const WatermarkKey& key) {
  const auto m = margins(gradient, key);
  std::vector<double> out(gradient.size(), 0.0);
  for (std::size_t j = 0; j < m.size(); ++j) {
    const double raw = m[j] >= 0.0 ? 1.0 / (1.0 + std::exp(-m[j])) : std::exp(m[j]) / (1.0 + std::exp(m[j]));
    if (raw < kProbabilityClamp || raw > 1.0 - kProbabilityClamp) continue;
    const double coeff = raw - static_cast<double>(key.bits[j]);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += coeff * key.k(j, i);
  }
  return out;
}

// The same regularizer as graph nodes; `gradient` evaluates to shape (|C|).
inline ad::NodeId embedding_loss_node(ad::Graph& g, ad::NodeId gradient, const WatermarkKey& key) {
  const std::size_t n = key.bit_count(), c = key.carrier_count();
  const ad::NodeId k = g.constant(Tensor(Shape{n, c}, key.matrix));
  std::vector<double> b(key.bits.begin(), key.bits.end());
  const ad::NodeId bits = g.constant(Tensor(Shape{n, 1}, b));
  const ad::NodeId m = g.sum_last(g.mul(k, gradient));  // (N, 1)
  const ad::NodeId y = g.clamp(g.sigmoid(m), kProbabilityClamp, 1.0 - kProbabilityClamp);
  const ad::NodeId one = g.scalar(1.0);
  const ad::NodeId ll = g.add(g.mul(bits, g.log(y)), g.mul(g.sub(one, bits), g.log(g.sub(one, y))));
  return g.neg(g.sum(ll));
}

// bit_j = 1 iff <K_j, G> >= 0.
inline std::vector<std::uint8_t> decode(std::span<const double> gradient, const WatermarkKey& key) {
  const auto m = margins(gradient, key);
  std::vector<std::uint8_t> bits(m.size());
  for (std::size_t j = 0; j < m.size(); ++j) bits[j] = m[j] >= 0.0 ? 1 : 0;
  return bits;
}

inline std::size_t bit_errors(std::span<const std::uint8_t> decoded, std::span<const std::uint8_t> reference) {
  if (decoded.size() != reference.size()) throw shape_error("bit vectors differ in length");
  std::size_t e = 0;
  for (std::size_t i = 0; i < decoded.size(); ++i) e += decoded[i] != reference[i];
  return e;
}

inline double ber(std::span<const std::uint8_t> decoded, std::span<const std::uint8_t> reference) {
  if (decoded.empty() && reference.empty()) return 0.0;
  return static_cast<double>(bit_errors(decoded, reference)) / static_cast<double>(reference.size());
}

inline double besr(std::span<const std::uint8_t> decoded, std::span<const std::uint8_t> reference) {
  return 1.0 - ber(decoded, reference);
}

// ---------------------------------------------------------------------------
// Null-model hypothesis test

namespace detail {

using BigInt = boost::multiprecision::cpp_int;

// sum_{k=0}^{upto} C(n, k), exactly.
inline BigInt binomial_prefix_sum(std::size_t n, std::size_t upto) {
  BigInt term = 1, total = 0;
  for (std::size_t k = 0; k <= upto && k <= n; ++k) {
    if (k > 0) term = term * (n - k + 1) / k;
    total += term;
  }
  return total;
}

// Exact test of sum * 2^-n < tau for a finite double tau.
inline bool below_threshold(const BigInt& sum, std::size_t n, double tau) {
  int exp2 = 0;
  const double mant = std::frexp(tau, &exp2);  // tau = mant * 2^exp2
  const BigInt m = static_cast<std::uint64_t>(std::ldexp(mant, 53));
  // sum * 2^53 < m * 2^(n + exp2)
  const long shift = static_cast<long>(n) + exp2;
  BigInt lhs = sum << 53;
  BigInt rhs = m;
  if (shift >= 0) {
    rhs <<= static_cast<unsigned>(shift);
  } else {
    lhs <<= static_cast<unsigned>(-shift);
  }
  return lhs < rhs;
}

}  // namespace detail

// Largest eta with P(n_error <= eta | null) < tau, or -1 if even a perfect
// match is not significant.
inline int error_threshold(std::size_t n_bits, double tau) {
  if (n_bits == 0) throw value_error("threshold needs at least one bit");
  if (!(tau > 0.0 && tau < 1.0)) throw value_error("tau must be in (0, 1)");
  int eta = -1;
  detail::BigInt term = 1, total = 0;
  for (std::size_t k = 0; k <= n_bits; ++k) {
    if (k > 0) term = term * (n_bits - k + 1) / k;
    total += term;
    if (!detail::below_threshold(total, n_bits, tau)) break;
    eta = static_cast<int>(k);
  }
  return eta;
}

// P(n_error <= errors | null model), each bit matching with probability 1/2.
inline double null_p_value(std::size_t n_bits, std::size_t errors) {
  const detail::BigInt total = detail::binomial_prefix_sum(n_bits, errors);
  return std::ldexp(total.convert_to<double>(), -static_cast<int>(n_bits));
}

struct VerificationPolicy {
  double tau = 3e-3;
};

enum class ExtractionMode { WhiteBox, BlackBox };

struct ExtractionMeta {
  ExtractionMode mode = ExtractionMode::WhiteBox;
  std::size_t samples = 0;
  double step = 0.0;
  std::uint64_t query_count = 0;
  bool operator==(const ExtractionMeta&) const = default;
};

struct VerificationReport {
  std::vector<std::uint8_t> decoded;
  std::size_t n_error = 0;
  int eta = -1;
  double p_value = 1.0;
  bool verified = false;
  ExtractionMeta extraction;

  double watermark_accuracy() const {
    return decoded.empty() ? 0.0 : 1.0 - static_cast<double>(n_error) / static_cast<double>(decoded.size());
  }
  bool operator==(const VerificationReport&) const = default;
};

inline VerificationReport verify_bits(std::vector<std::uint8_t> decoded, const WatermarkKey& key,
                                      const VerificationPolicy& policy, ExtractionMeta meta = {}) {
  VerificationReport r;
  r.n_error = bit_errors(decoded, key.bits);
  r.decoded = std::move(decoded);
  r.eta = error_threshold(key.bit_count(), policy.tau);
  r.p_value = null_p_value(key.bit_count(), r.n_error);
  r.verified = r.eta >= 0 && static_cast<int>(r.n_error) <= r.eta;
  r.extraction = meta;
  return r;
}

inline VerificationReport verify(std::span<const double> gradient, const WatermarkKey& key,
                                 const VerificationPolicy& policy = {}, ExtractionMeta meta = {}) {
  return verify_bits(decode(gradient, key), key, policy, meta);
}

// ---------------------------------------------------------------------------
// JSON forms

inline std::string bits_to_string(std::span<const std::uint8_t> bits) {
  std::string s;
  for (const auto b : bits) s.push_back(b ? '1' : '0');
  return s;
}

inline std::vector<std::uint8_t> bits_from_string(const std::string& s) {
  std::vector<std::uint8_t> bits;
  for (const char c : s) {
    if (c != '0' && c != '1') throw Error("format", "bit string may only contain 0 and 1");
    bits.push_back(c == '1');
  }
  return bits;
}

inline constexpr int kKeyFormatVersion = 1;

inline nlohmann::json key_to_json(const WatermarkKey& key) {
  nlohmann::json j;
  j["format_version"] = kKeyFormatVersion;
  j["N"] = key.bit_count();
  j["T"] = key.target_class;
  j["input_dim"] = key.input_dim;
  j["class_count"] = key.class_count;
  j["carrier_indices"] = key.carriers;
  j["K"] = key.matrix;
  j["b"] = bits_to_string(key.bits);
  if (const auto* r = std::get_if<RandomProvenance>(&key.provenance)) {
    j["provenance"] = {{"kind", "random"}, {"seed", r->seed}};
  } else {
    const auto& m = std::get<MessageProvenance>(key.provenance);
    j["provenance"] = {{"kind", "message"}, {"digest_alg", m.digest_algorithm}, {"message", m.message}, {"digest", m.digest_hex}};
  }
  return j;
}

inline WatermarkKey key_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format_version").get<int>() != kKeyFormatVersion) throw Error("version", "unsupported key format version");
    WatermarkKey key;
    key.bits = bits_from_string(j.at("b").get<std::string>());
    if (key.bits.size() != j.at("N").get<std::size_t>()) throw Error("format", "N does not match bit string");
    key.target_class = j.at("T").get<int>();
    key.input_dim = j.at("input_dim").get<std::size_t>();
    key.class_count = j.at("class_count").get<int>();
    key.carriers = j.at("carrier_indices").get<std::vector<std::size_t>>();
    key.matrix = j.at("K").get<std::vector<double>>();
    const auto& p = j.at("provenance");
    if (p.at("kind") == "random") {
      key.provenance = RandomProvenance{p.at("seed").get<std::uint64_t>()};
    } else if (p.at("kind") == "message") {
      key.provenance = MessageProvenance{p.at("digest_alg").get<std::string>(), p.at("message").get<std::string>(),
                                         p.at("digest").get<std::string>()};
    } else {
      throw Error("format", "unknown key provenance");
    }
    key.validate();
    return key;
  } catch (const nlohmann::json::exception& e) {
    throw Error("format", std::string("malformed key file: ") + e.what());
  }
}

inline void save_key(const WatermarkKey& key, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("io", "cannot write " + path.string());
  out << key_to_json(key).dump(1) << '\n';
  out.close();
  // The key is the owner's secret.
  std::error_code ec;
  std::filesystem::permissions(path, std::filesystem::perms::owner_read | std::filesystem::perms::owner_write,
                               std::filesystem::perm_options::replace, ec);
}

inline WatermarkKey load_key(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("io", "cannot read " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error("format", std::string("key file is not JSON: ") + e.what());
  }
  return key_from_json(j);
}

inline nlohmann::json report_to_json(const VerificationReport& r) {
  return {{"decoded", bits_to_string(r.decoded)},
          {"n_error", r.n_error},
          {"eta", r.eta},
          {"p_value", r.p_value},
          {"verified", r.verified},
          {"watermark_accuracy", r.watermark_accuracy()},
          {"extraction",
           {{"mode", r.extraction.mode == ExtractionMode::WhiteBox ? "white" : "black"},
            {"samples", r.extraction.samples},
            {"h", r.extraction.step},
            {"query_count", r.extraction.query_count}}}};
}

}  // namespace gradsigns
