#pragma once

#include <chrono>
#include <cstdint>
#include <mutex>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "gradsigns/extraction.hpp"
#include "gradsigns/net.hpp"
#include "gradsigns/protocol.hpp"

namespace gradsigns {

struct RemoteOptions {
  std::size_t window = 512;  // requests in flight per round trip
  int retries = 3;
  std::chrono::milliseconds backoff{50};  // doubled after each failed attempt
};

// Oracle client for a PredictionServer. The input shape and class count are
// supplied by the caller (the protocol carries flat vectors only). Rows of a
// batch are pipelined and matched to responses by id. A dropped connection
// is re-established and unanswered rows re-sent, up to `retries` times.
class RemoteOracle final : public PredictionOracle {
 public:
  RemoteOracle(net::Endpoint endpoint, Shape input_shape, int classes, RemoteOptions opts = {})
      : endpoint_(std::move(endpoint)), input_shape_(std::move(input_shape)), classes_(classes), opts_(opts) {
    if (classes_ < 1) throw value_error("remote oracle needs a positive class count");
  }

  Shape input_shape() const override { return input_shape_; }
  int class_count() const override { return classes_; }

 protected:
  Tensor answer(const Tensor& batch) override {
    std::lock_guard<std::mutex> lock(mu_);
    const std::size_t n = batch.dim(0);
    const std::size_t d = shape_size(input_shape_);
    if (batch.size() != n * d) throw shape_error("batch does not match remote input shape");
    const auto k = static_cast<std::size_t>(classes_);
    Tensor out(Shape{n, k});
    std::vector<bool> done(n, false);
    std::size_t answered = 0;
    int failures = 0;
    auto backoff = opts_.backoff;

    while (answered < n) {
      try {
        if (!sock_.valid()) {
          sock_ = net::connect_to(endpoint_);
          reader_ = net::LineReader();
        }
        // Send one window of unanswered rows, then collect their replies.
        std::unordered_map<std::uint64_t, std::size_t> inflight;
        std::string payload;
        for (std::size_t r = 0; r < n && inflight.size() < opts_.window; ++r) {
          if (done[r]) continue;
          const std::uint64_t id = next_id_++;
          inflight.emplace(id, r);
          const auto row = batch.data().subspan(r * d, d);
          payload += wire::encode(wire::Request{id, {row.begin(), row.end()}});
          payload += '\n';
        }
        if (!net::send_all(sock_.fd(), payload)) throw Error("io", "send failed");
        std::string line;
        while (!inflight.empty()) {
          if (reader_.read_line(sock_.fd(), line) != net::LineReader::Status::Line) {
            throw Error("io", "connection closed by server");
          }
          const wire::Response resp = wire::decode_response(line);
          if (resp.error) {
            sock_.close();
            throw OracleError("server error: " + *resp.error, answered);
          }
          const auto it = resp.id ? inflight.find(*resp.id) : inflight.end();
          if (it == inflight.end()) continue;  // stale reply from an earlier attempt
          if (resp.probs.size() != k) {
            sock_.close();
            throw OracleError("server returned " + std::to_string(resp.probs.size()) + " classes, expected " +
                                  std::to_string(k),
                              answered);
          }
          std::copy(resp.probs.begin(), resp.probs.end(), out.data().begin() + static_cast<std::ptrdiff_t>(it->second * k));
          done[it->second] = true;
          ++answered;
          inflight.erase(it);
        }
        failures = 0;
        backoff = opts_.backoff;
      } catch (const OracleError&) {
        throw;
      } catch (const Error& e) {
        sock_.close();
        if (++failures > opts_.retries) {
          throw OracleError("connection to " + endpoint_.to_string() + " lost: " + e.what(), answered);
        }
        std::this_thread::sleep_for(backoff);
        backoff *= 2;
      }
    }
    return out;
  }

 private:
  net::Endpoint endpoint_;
  Shape input_shape_;
  int classes_;
  RemoteOptions opts_;
  std::mutex mu_;
  net::Socket sock_;
  net::LineReader reader_;
  std::uint64_t next_id_ = 1;
};

}  // namespace gradsigns
