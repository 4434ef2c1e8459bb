#pragma once

#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>

#include "gradsigns/error.hpp"

namespace gradsigns::net {

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
  std::string to_string() const { return host + ":" + std::to_string(port); }
};

// "host:port"; port 0 only when `allow_any_port` (bind to a free port).
inline Endpoint parse_endpoint(const std::string& text, bool allow_any_port = false) {
  const auto colon = text.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == text.size()) {
    throw value_error("endpoint '" + text + "' is not host:port");
  }
  Endpoint e;
  e.host = text.substr(0, colon);
  const std::string port = text.substr(colon + 1);
  unsigned long v = 0;
  try {
    std::size_t used = 0;
    v = std::stoul(port, &used);
    if (used != port.size()) throw std::invalid_argument("trailing");
  } catch (const std::exception&) {
    throw value_error("bad port in '" + text + "'");
  }
  if ((v == 0 && !allow_any_port) || v > 65535) throw value_error("port out of range in '" + text + "'");
  e.port = static_cast<std::uint16_t>(v);
  return e;
}

// Owning file descriptor.
class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(Socket&& o) noexcept : fd_(o.fd_) { o.fd_ = -1; }
  Socket& operator=(Socket&& o) noexcept {
    if (this != &o) {
      close();
      fd_ = o.fd_;
      o.fd_ = -1;
    }
    return *this;
  }
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  ~Socket() { close(); }

  int fd() const noexcept { return fd_; }
  bool valid() const noexcept { return fd_ >= 0; }
  void close() noexcept {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_ = -1;
};

inline Error sys_error(const std::string& what) { return Error("io", what + ": " + std::strerror(errno)); }

inline Socket connect_to(const Endpoint& e) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  const std::string port = std::to_string(e.port);
  if (const int rc = ::getaddrinfo(e.host.c_str(), port.c_str(), &hints, &res); rc != 0) {
    throw Error("io", "cannot resolve " + e.host + ": " + ::gai_strerror(rc));
  }
  Socket s;
  for (addrinfo* a = res; a; a = a->ai_next) {
    Socket c(::socket(a->ai_family, a->ai_socktype, a->ai_protocol));
    if (!c.valid()) continue;
    if (::connect(c.fd(), a->ai_addr, a->ai_addrlen) == 0) {
      s = std::move(c);
      break;
    }
  }
  ::freeaddrinfo(res);
  if (!s.valid()) throw Error("io", "cannot connect to " + e.to_string());
  const int one = 1;
  ::setsockopt(s.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  return s;
}

// Binds and listens; port 0 picks an ephemeral port (see bound_port).
inline Socket listen_on(const Endpoint& e, int backlog = 64) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  hints.ai_flags = AI_PASSIVE;
  addrinfo* res = nullptr;
  const std::string port = std::to_string(e.port);
  if (const int rc = ::getaddrinfo(e.host.empty() ? nullptr : e.host.c_str(), port.c_str(), &hints, &res); rc != 0) {
    throw Error("bind", "cannot resolve " + e.host + ": " + ::gai_strerror(rc));
  }
  Socket s;
  std::string last = "no address";
  for (addrinfo* a = res; a; a = a->ai_next) {
    Socket c(::socket(a->ai_family, a->ai_socktype, a->ai_protocol));
    if (!c.valid()) continue;
    const int one = 1;
    ::setsockopt(c.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    if (::bind(c.fd(), a->ai_addr, a->ai_addrlen) == 0 && ::listen(c.fd(), backlog) == 0) {
      s = std::move(c);
      break;
    }
    last = std::strerror(errno);
  }
  ::freeaddrinfo(res);
  if (!s.valid()) throw Error("bind", "cannot listen on " + e.to_string() + ": " + last);
  return s;
}

inline std::uint16_t bound_port(const Socket& s) {
  sockaddr_storage addr{};
  socklen_t len = sizeof(addr);
  if (::getsockname(s.fd(), reinterpret_cast<sockaddr*>(&addr), &len) != 0) throw sys_error("getsockname");
  if (addr.ss_family == AF_INET) return ntohs(reinterpret_cast<sockaddr_in*>(&addr)->sin_port);
  return ntohs(reinterpret_cast<sockaddr_in6*>(&addr)->sin6_port);
}

inline bool send_all(int fd, std::string_view data) {
  while (!data.empty()) {
    const ssize_t n = ::send(fd, data.data(), data.size(), MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    data.remove_prefix(static_cast<std::size_t>(n));
  }
  return true;
}

// Buffered reader of '\n'-terminated lines.
class LineReader {
 public:
  explicit LineReader(std::size_t max_line = std::size_t{64} << 20) : max_line_(max_line) {}

  enum class Status { Line, Closed, TooLong };

  // Blocks until a full line is available or the peer closes.
  Status read_line(int fd, std::string& line) {
    for (;;) {
      if (const auto nl = buf_.find('\n', scanned_); nl != std::string::npos) {
        line.assign(buf_, 0, nl);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        buf_.erase(0, nl + 1);
        scanned_ = 0;
        return Status::Line;
      }
      scanned_ = buf_.size();
      if (buf_.size() > max_line_) {
        buf_.clear();
        scanned_ = 0;
        discarding_ = true;
      }
      char chunk[1 << 16];
      const ssize_t n = ::recv(fd, chunk, sizeof(chunk), 0);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) return Status::Closed;
      if (discarding_) {
        const void* nl = std::memchr(chunk, '\n', static_cast<std::size_t>(n));
        if (!nl) continue;
        const auto after = static_cast<std::size_t>(static_cast<const char*>(nl) - chunk) + 1;
        buf_.assign(chunk + after, static_cast<std::size_t>(n) - after);
        discarding_ = false;
        return Status::TooLong;
      }
      buf_.append(chunk, static_cast<std::size_t>(n));
    }
  }

  // True when a complete line is already buffered.
  bool has_line() const { return buf_.find('\n') != std::string::npos; }

 private:
  std::string buf_;
  std::size_t scanned_ = 0;
  std::size_t max_line_;
  bool discarding_ = false;
};

}  // namespace gradsigns::net
