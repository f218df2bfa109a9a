#include "dlm/endpoint.hpp"

#include <fcntl.h>
#include <netdb.h>
#include <poll.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstring>
#include <thread>

#include "dlm/error.hpp"

namespace dlm {

EndpointConfig endpoint_from_json(const nlohmann::json& config, const std::string& path) {
  EndpointConfig c;
  if (config.is_string()) {
    c.address = config.get<std::string>();
  } else if (config.is_object()) {
    if (!config.contains("address") || !config.at("address").is_string())
      throw ConfigError(path + ".address", "missing endpoint address");
    c.address = config.at("address").get<std::string>();
    try {
      c.timeout_s = config.value("timeout_s", c.timeout_s);
      c.retries = config.value("retries", c.retries);
      c.backoff_s = config.value("backoff_s", c.backoff_s);
      c.pool_size = config.value("pool_size", c.pool_size);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path, e.what());
    }
  } else {
    throw ConfigError(path, "expected an address string or an object");
  }
  if (c.address.rfind("exec:", 0) != 0 && c.address.rfind("tcp:", 0) != 0)
    throw ConfigError(path, "address must start with exec: or tcp:");
  if (!(c.timeout_s > 0.0)) throw ConfigError(path + ".timeout_s", "must be positive");
  if (c.retries < 0) throw ConfigError(path + ".retries", "must be non-negative");
  if (c.backoff_s < 0.0) throw ConfigError(path + ".backoff_s", "must be non-negative");
  if (c.pool_size == 0) throw ConfigError(path + ".pool_size", "must be at least 1");
  return c;
}

namespace {

void ignore_sigpipe() {
  static const bool done = [] {
    ::signal(SIGPIPE, SIG_IGN);
    return true;
  }();
  (void)done;
}

std::string errno_text() { return std::strerror(errno); }

/// Buffered line reader/writer over a pair of file descriptors.
class FdChannel : public LineChannel {
 public:
  void send_line(const std::string& line) override {
    std::string data = line + "\n";
    std::size_t off = 0;
    while (off < data.size()) {
      const ssize_t n = ::write(out_fd_, data.data() + off, data.size() - off);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw IoError("write to endpoint failed: " + errno_text());
      }
      off += static_cast<std::size_t>(n);
    }
  }

  std::string recv_line(double timeout_s) override {
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(timeout_s);
    for (;;) {
      const auto nl = buffer_.find('\n');
      if (nl != std::string::npos) {
        std::string line = buffer_.substr(0, nl);
        buffer_.erase(0, nl + 1);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        return line;
      }
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
      if (left.count() <= 0) throw IoError("endpoint timed out");
      pollfd pfd{in_fd_, POLLIN, 0};
      const int r = ::poll(&pfd, 1, static_cast<int>(left.count()));
      if (r < 0) {
        if (errno == EINTR) continue;
        throw IoError("poll failed: " + errno_text());
      }
      if (r == 0) throw IoError("endpoint timed out");
      char chunk[4096];
      const ssize_t n = ::read(in_fd_, chunk, sizeof chunk);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw IoError("read from endpoint failed: " + errno_text());
      }
      if (n == 0) throw IoError("endpoint closed the stream");
      buffer_.append(chunk, static_cast<std::size_t>(n));
    }
  }

 protected:
  int in_fd_ = -1;
  int out_fd_ = -1;
  std::string buffer_;
};

class ExecChannel final : public FdChannel {
 public:
  explicit ExecChannel(const std::string& command) {
    ignore_sigpipe();
    int to_child[2], from_child[2];
    if (::pipe2(to_child, O_CLOEXEC) != 0) throw IoError("pipe failed: " + errno_text());
    if (::pipe2(from_child, O_CLOEXEC) != 0) {
      ::close(to_child[0]);
      ::close(to_child[1]);
      throw IoError("pipe failed: " + errno_text());
    }
    pid_ = ::fork();
    if (pid_ < 0) {
      for (int fd : {to_child[0], to_child[1], from_child[0], from_child[1]}) ::close(fd);
      throw IoError("fork failed: " + errno_text());
    }
    if (pid_ == 0) {
      ::dup2(to_child[0], STDIN_FILENO);
      ::dup2(from_child[1], STDOUT_FILENO);
      const std::string line = "exec " + command;
      ::execl("/bin/sh", "sh", "-c", line.c_str(), static_cast<char*>(nullptr));
      ::_exit(127);
    }
    ::close(to_child[0]);
    ::close(from_child[1]);
    out_fd_ = to_child[1];
    in_fd_ = from_child[0];
  }

  ~ExecChannel() override {
    ::close(out_fd_);
    ::close(in_fd_);
    if (pid_ > 0) {
      ::kill(pid_, SIGTERM);
      int status = 0;
      ::waitpid(pid_, &status, 0);
    }
  }

 private:
  pid_t pid_ = -1;
};

class TcpChannel final : public FdChannel {
 public:
  TcpChannel(const std::string& host, const std::string& port, double timeout_s) {
    ignore_sigpipe();
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    if (const int rc = ::getaddrinfo(host.c_str(), port.c_str(), &hints, &res); rc != 0)
      throw IoError("cannot resolve " + host + ": " + ::gai_strerror(rc));
    std::string last_error = "no addresses";
    for (addrinfo* ai = res; ai; ai = ai->ai_next) {
      const int fd = ::socket(ai->ai_family, ai->ai_socktype | SOCK_CLOEXEC, ai->ai_protocol);
      if (fd < 0) continue;
      if (connect_with_timeout(fd, ai, timeout_s, last_error)) {
        in_fd_ = out_fd_ = fd;
        break;
      }
      ::close(fd);
    }
    ::freeaddrinfo(res);
    if (in_fd_ < 0) throw IoError("cannot connect to " + host + ":" + port + ": " + last_error);
  }

  ~TcpChannel() override {
    if (in_fd_ >= 0) ::close(in_fd_);
  }

  void send_line(const std::string& line) override {
    std::string data = line + "\n";
    std::size_t off = 0;
    while (off < data.size()) {
      const ssize_t n = ::send(out_fd_, data.data() + off, data.size() - off, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw IoError("send to endpoint failed: " + errno_text());
      }
      off += static_cast<std::size_t>(n);
    }
  }

 private:
  static bool connect_with_timeout(int fd, const addrinfo* ai, double timeout_s, std::string& error) {
    const int flags = ::fcntl(fd, F_GETFL, 0);
    ::fcntl(fd, F_SETFL, flags | O_NONBLOCK);
    int rc = ::connect(fd, ai->ai_addr, ai->ai_addrlen);
    if (rc != 0 && errno != EINPROGRESS) {
      error = errno_text();
      return false;
    }
    if (rc != 0) {
      pollfd pfd{fd, POLLOUT, 0};
      rc = ::poll(&pfd, 1, static_cast<int>(timeout_s * 1000));
      if (rc <= 0) {
        error = rc == 0 ? "connect timed out" : errno_text();
        return false;
      }
      int so_error = 0;
      socklen_t len = sizeof so_error;
      ::getsockopt(fd, SOL_SOCKET, SO_ERROR, &so_error, &len);
      if (so_error != 0) {
        error = std::strerror(so_error);
        return false;
      }
    }
    ::fcntl(fd, F_SETFL, flags);
    return true;
  }
};

}  // namespace

std::unique_ptr<LineChannel> open_channel(const EndpointConfig& config) {
  const std::string& a = config.address;
  if (a.rfind("exec:", 0) == 0) return std::make_unique<ExecChannel>(a.substr(5));
  if (a.rfind("tcp:", 0) == 0) {
    const std::string rest = a.substr(4);
    const auto colon = rest.rfind(':');
    if (colon == std::string::npos || colon == 0 || colon + 1 == rest.size())
      throw ConfigError("endpoint.address", "expected tcp:<host>:<port>");
    return std::make_unique<TcpChannel>(rest.substr(0, colon), rest.substr(colon + 1), config.timeout_s);
  }
  throw ConfigError("endpoint.address", "unknown transport in '" + a + "'");
}

JsonLineClient::JsonLineClient(EndpointConfig config) : config_(std::move(config)) {
  for (std::size_t i = 0; i < config_.pool_size; ++i) slots_.push_back(std::make_unique<Slot>());
}

JsonLineClient::~JsonLineClient() = default;

nlohmann::json JsonLineClient::call(nlohmann::json request) {
  std::uint64_t id;
  Slot* slot;
  {
    std::lock_guard lock(id_mutex_);
    id = next_id_++;
    slot = slots_[next_slot_++ % slots_.size()].get();
  }
  request["id"] = id;
  const std::string line = request.dump();

  std::lock_guard lock(slot->mutex);
  std::string last_error;
  for (int attempt = 0; attempt <= config_.retries; ++attempt) {
    if (attempt > 0) {
      const double delay = config_.backoff_s * std::ldexp(1.0, attempt - 1);
      std::this_thread::sleep_for(std::chrono::duration<double>(delay));
    }
    try {
      if (!slot->channel) slot->channel = open_channel(config_);
      slot->channel->send_line(line);
      for (;;) {
        const std::string raw = slot->channel->recv_line(config_.timeout_s);
        nlohmann::json reply;
        try {
          reply = nlohmann::json::parse(raw);
        } catch (const nlohmann::json::parse_error&) {
          throw ProtocolError("response is not valid JSON", raw);
        }
        if (!reply.is_object() || !reply.contains("id") || !reply.at("id").is_number_unsigned())
          throw ProtocolError("response lacks a numeric id", raw);
        const auto got = reply.at("id").get<std::uint64_t>();
        if (got < id) continue;  // stale reply to an abandoned request
        if (got != id) throw ProtocolError("response id " + std::to_string(got) + " does not match request " +
                                               std::to_string(id), raw);
        return reply;
      }
    } catch (const IoError& e) {
      last_error = e.what();
      slot->channel.reset();
    } catch (const ProtocolError&) {
      slot->channel.reset();
      throw;
    }
  }
  throw EndpointUnavailable("endpoint " + config_.address + " unavailable after " + std::to_string(config_.retries) +
                            " retries: " + last_error);
}

}  // namespace dlm
