#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "gradsigns/error.hpp"

namespace gradsigns::wire {

// Newline-delimited JSON. Each message is a single line:
//   request   {"id":<u64>,"input":[<f64>...]}
//   response  {"id":<u64>,"probs":[<f64>...]}
//             {"id":<u64>,"error":"<text>"}
//             {"error":"parse"}          (line was not understood)
// Floats carry 17 significant digits and always include a '.' or exponent,
// so every finite double (including -0.0) survives a round trip.

struct Request {
  std::uint64_t id = 0;
  std::vector<double> input;
  bool operator==(const Request&) const = default;
};

struct Response {
  std::optional<std::uint64_t> id;
  std::vector<double> probs;
  std::optional<std::string> error;
  bool operator==(const Response&) const = default;
};

inline void append_double(std::string& out, double v) {
  if (!std::isfinite(v)) throw value_error("cannot encode non-finite number");
  char buf[40];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
  const std::string_view s(buf, static_cast<std::size_t>(res.ptr - buf));
  out += s;
  if (s.find_first_of(".e") == std::string_view::npos) out += ".0";
}

inline void append_array(std::string& out, std::span<const double> values) {
  out += '[';
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ',';
    append_double(out, values[i]);
  }
  out += ']';
}

inline std::string encode(const Request& r) {
  std::string out = "{\"id\":" + std::to_string(r.id) + ",\"input\":";
  append_array(out, r.input);
  out += '}';
  return out;
}

inline std::string encode(const Response& r) {
  std::string out = "{";
  if (r.id) out += "\"id\":" + std::to_string(*r.id);
  if (r.error) {
    if (r.id) out += ',';
    out += "\"error\":" + nlohmann::json(*r.error).dump();
  } else {
    if (r.id) out += ',';
    out += "\"probs\":";
    append_array(out, r.probs);
  }
  out += '}';
  return out;
}

class ProtocolError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline nlohmann::json parse_line(std::string_view line) {
  try {
    nlohmann::json j = nlohmann::json::parse(line);
    if (!j.is_object()) throw ProtocolError("parse", "message is not a JSON object");
    return j;
  } catch (const nlohmann::json::exception&) {
    throw ProtocolError("parse", "malformed JSON");
  }
}

inline std::uint64_t read_id(const nlohmann::json& j) {
  const auto& id = j.at("id");
  if (!id.is_number_unsigned()) throw ProtocolError("invalid", "id must be an unsigned integer");
  return id.get<std::uint64_t>();
}

inline std::vector<double> read_numbers(const nlohmann::json& a, const char* field) {
  if (!a.is_array()) throw ProtocolError("invalid", std::string(field) + " must be an array");
  std::vector<double> out;
  out.reserve(a.size());
  for (const auto& v : a) {
    if (!v.is_number()) throw ProtocolError("invalid", std::string(field) + " must hold numbers");
    out.push_back(v.get<double>());
  }
  return out;
}

}  // namespace detail

// Throws ProtocolError("parse") for bad JSON and ProtocolError("invalid") for
// well-formed JSON that is not a request. `id_out` receives the id whenever
// one could be read, so the caller can still address an error reply.
inline Request decode_request(std::string_view line, std::optional<std::uint64_t>* id_out = nullptr) {
  const nlohmann::json j = detail::parse_line(line);
  try {
    Request r;
    r.id = detail::read_id(j);
    if (id_out) *id_out = r.id;
    r.input = detail::read_numbers(j.at("input"), "input");
    return r;
  } catch (const nlohmann::json::exception&) {
    throw ProtocolError("invalid", "request needs id and input");
  }
}

inline Response decode_response(std::string_view line) {
  const nlohmann::json j = detail::parse_line(line);
  try {
    Response r;
    if (j.contains("id")) r.id = detail::read_id(j);
    if (j.contains("error")) {
      if (!j.at("error").is_string()) throw ProtocolError("invalid", "error must be a string");
      r.error = j.at("error").get<std::string>();
    } else {
      r.probs = detail::read_numbers(j.at("probs"), "probs");
    }
    return r;
  } catch (const nlohmann::json::exception&) {
    throw ProtocolError("invalid", "response needs probs or error");
  }
}

}  // namespace gradsigns::wire
