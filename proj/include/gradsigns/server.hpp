#pragma once

#include <poll.h>
#include <sys/socket.h>

#include <atomic>
#include <cstdint>
#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "gradsigns/attacks.hpp"
#include "gradsigns/extraction.hpp"
#include "gradsigns/model.hpp"
#include "gradsigns/net.hpp"
#include "gradsigns/protocol.hpp"

namespace gradsigns {

struct ServerConfig {
  net::Endpoint bind{"127.0.0.1", 0};
  std::vector<WrapperSpec> wrappers;  // innermost first
  std::size_t max_connections = 16;
  std::uint64_t query_limit = 0;  // per connection; 0 = unlimited
  std::size_t max_batch = 1024;   // buffered requests answered together
};

// Serves predictions of an immutable model over the line protocol, one
// thread per connection. Each connection gets its own wrapper stack whose
// stochastic seeds are mixed with the connection's ordinal.
class PredictionServer {
 public:
  PredictionServer(std::shared_ptr<const Model> model, ServerConfig cfg)
      : model_(std::move(model)), cfg_(std::move(cfg)), base_(std::make_shared<ModelOracle>(model_)) {
    wrap_oracle(base_, cfg_.wrappers, 0);  // validates the stack
  }
  PredictionServer(const PredictionServer&) = delete;
  PredictionServer& operator=(const PredictionServer&) = delete;
  ~PredictionServer() { stop(); }

  void start() {
    listener_ = net::listen_on(cfg_.bind);
    port_ = net::bound_port(listener_);
    running_ = true;
    acceptor_ = std::thread([this] { accept_loop(); });
  }

  std::uint16_t port() const noexcept { return port_; }

  // Rows answered by the model across all connections.
  std::uint64_t queries_served() const { return base_->queries_served(); }

  void stop() {
    if (!running_.exchange(false)) return;
    if (acceptor_.joinable()) acceptor_.join();
    listener_.close();
    {
      std::lock_guard<std::mutex> lock(mu_);
      for (const int fd : open_fds_) ::shutdown(fd, SHUT_RDWR);
    }
    for (auto& t : workers_)
      if (t.joinable()) t.join();
    workers_.clear();
  }

 private:
  void accept_loop() {
    std::uint64_t ordinal = 0;
    while (running_) {
      pollfd p{listener_.fd(), POLLIN, 0};
      const int ready = ::poll(&p, 1, 100);
      if (ready <= 0) continue;
      net::Socket conn(::accept(listener_.fd(), nullptr, nullptr));
      if (!conn.valid()) continue;
      const int one = 1;
      ::setsockopt(conn.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
      std::lock_guard<std::mutex> lock(mu_);
      if (open_fds_.size() >= cfg_.max_connections) {
        net::send_all(conn.fd(), wire::encode(wire::Response{std::nullopt, {}, std::string("busy")}) + "\n");
        continue;
      }
      ++ordinal;
      open_fds_.insert(conn.fd());
      workers_.emplace_back([this, ordinal, c = std::move(conn)]() mutable { serve_connection(std::move(c), ordinal); });
    }
  }

  void serve_connection(net::Socket conn, std::uint64_t ordinal) {
    const auto oracle = wrap_oracle(base_, cfg_.wrappers, ordinal);
    const std::size_t dim = model_->config().input_dim();
    Shape row_shape = model_->config().input_shape();
    net::LineReader reader;
    std::uint64_t answered = 0;
    std::string line;
    bool open = true;

    while (open && running_) {
      // Collect whatever is already buffered into one batch.
      std::vector<std::string> out;
      std::vector<wire::Request> batch;
      std::vector<std::size_t> slot;
      do {
        const auto st = reader.read_line(conn.fd(), line);
        if (st == net::LineReader::Status::Closed) {
          open = false;
          break;
        }
        if (st == net::LineReader::Status::TooLong) {
          out.push_back(wire::encode(wire::Response{std::nullopt, {}, std::string("parse")}));
          continue;
        }
        std::optional<std::uint64_t> id;
        try {
          wire::Request r = wire::decode_request(line, &id);
          if (r.input.size() != dim) {
            throw wire::ProtocolError("shape", "input has " + std::to_string(r.input.size()) + " values, expected " +
                                                   std::to_string(dim));
          }
          if (cfg_.query_limit && answered + batch.size() >= cfg_.query_limit) {
            throw wire::ProtocolError("limit", "query limit reached");
          }
          slot.push_back(out.size());
          out.emplace_back();
          batch.push_back(std::move(r));
        } catch (const wire::ProtocolError& e) {
          const std::string msg = e.kind() == "parse" ? "parse" : e.kind() + ": " + e.what();
          out.push_back(wire::encode(wire::Response{id, {}, msg}));
        }
      } while (reader.has_line() && batch.size() < cfg_.max_batch);

      if (!batch.empty()) {
        Shape shape{batch.size()};
        shape.insert(shape.end(), row_shape.begin(), row_shape.end());
        std::vector<double> flat;
        flat.reserve(batch.size() * dim);
        for (const auto& r : batch) flat.insert(flat.end(), r.input.begin(), r.input.end());
        try {
          const Tensor probs = oracle->query(Tensor(shape, std::move(flat)));
          const std::size_t k = probs.dim(1);
          for (std::size_t i = 0; i < batch.size(); ++i) {
            const auto row = probs.data().subspan(i * k, k);
            out[slot[i]] = wire::encode(wire::Response{batch[i].id, {row.begin(), row.end()}, std::nullopt});
          }
          answered += batch.size();
        } catch (const Error& e) {
          for (std::size_t i = 0; i < batch.size(); ++i)
            out[slot[i]] = wire::encode(wire::Response{batch[i].id, {}, e.kind() + ": " + e.what()});
        }
      }
      std::string payload;
      for (const auto& o : out) payload += o + "\n";
      if (!payload.empty() && !net::send_all(conn.fd(), payload)) open = false;
    }
    std::lock_guard<std::mutex> lock(mu_);
    open_fds_.erase(conn.fd());
  }

  std::shared_ptr<const Model> model_;
  ServerConfig cfg_;
  std::shared_ptr<ModelOracle> base_;
  net::Socket listener_;
  std::uint16_t port_ = 0;
  std::atomic<bool> running_{false};
  std::thread acceptor_;
  std::mutex mu_;
  std::set<int> open_fds_;
  std::list<std::thread> workers_;
};

}  // namespace gradsigns
