#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "json.hpp"

namespace dlm {

/// Where an out-of-process endpoint lives:
///   "exec:<shell command>"  child process speaking over stdin/stdout
///   "tcp:<host>:<port>"     stream socket
struct EndpointConfig {
  std::string address;
  double timeout_s = 10.0;
  /// Retries after the first failed attempt.
  int retries = 3;
  /// Delay before retry i is backoff_s * 2^i.
  double backoff_s = 0.05;
  std::size_t pool_size = 1;
};

/// Accepts either a bare address string or an object with keys address,
/// timeout_s, retries, backoff_s, pool_size.
EndpointConfig endpoint_from_json(const nlohmann::json& config, const std::string& path = "endpoint");

/// One bidirectional byte stream carrying newline-terminated messages.
class LineChannel {
 public:
  virtual ~LineChannel() = default;
  /// Throws IoError on a broken stream.
  virtual void send_line(const std::string& line) = 0;
  /// Throws IoError on EOF or when nothing arrives within timeout_s.
  virtual std::string recv_line(double timeout_s) = 0;
};

std::unique_ptr<LineChannel> open_channel(const EndpointConfig& config);

/// Request/response client over line-delimited JSON. Every request gets an
/// integer "id"; the response must echo it. Transport failures are retried
/// with exponential backoff on a fresh connection; once retries are spent the
/// call throws EndpointUnavailable. Malformed replies throw ProtocolError
/// immediately with the raw payload. Safe to share between threads: requests
/// are serialised per connection, with up to pool_size connections.
class JsonLineClient {
 public:
  explicit JsonLineClient(EndpointConfig config);
  ~JsonLineClient();

  /// Sends `request` (an object, without id) and returns the matching reply.
  nlohmann::json call(nlohmann::json request);

  const EndpointConfig& config() const noexcept { return config_; }

 private:
  struct Slot {
    std::mutex mutex;
    std::unique_ptr<LineChannel> channel;
  };

  EndpointConfig config_;
  std::vector<std::unique_ptr<Slot>> slots_;
  std::mutex id_mutex_;
  std::uint64_t next_id_ = 1;
  std::size_t next_slot_ = 0;
};

}  // namespace dlm
