#pragma once

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <atomic>
#include <cerrno>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <cstring>
#include <deque>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <string>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ddrl/error.hpp"
#include "ddrl/log.hpp"
#include "ddrl/tasks.hpp"

namespace ddrl::reward {

using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

// ---------------------------------------------------------------------------
// Wire format: 4-byte big-endian payload length, then UTF-8 JSON.

inline constexpr std::uint32_t kMaxFrameBytes = 64u << 20;

inline std::string encode_frame(const json& msg) {
  const std::string body = msg.dump();
  if (body.size() > kMaxFrameBytes) throw TransportError("frame exceeds maximum size");
  const auto n = static_cast<std::uint32_t>(body.size());
  std::string out;
  out.reserve(4 + body.size());
  out.push_back(static_cast<char>((n >> 24) & 0xff));
  out.push_back(static_cast<char>((n >> 16) & 0xff));
  out.push_back(static_cast<char>((n >> 8) & 0xff));
  out.push_back(static_cast<char>(n & 0xff));
  out += body;
  return out;
}

/// Decodes one complete frame from the front of `buf`; returns nullopt if
/// more bytes are needed. Consumed bytes are erased from `buf`.
inline std::optional<json> decode_frame(std::string& buf) {
  if (buf.size() < 4) return std::nullopt;
  const auto* b = reinterpret_cast<const unsigned char*>(buf.data());
  const std::uint32_t n = (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
  if (n > kMaxFrameBytes) throw TransportError("incoming frame exceeds maximum size");
  if (buf.size() < 4 + static_cast<std::size_t>(n)) return std::nullopt;
  json msg = json::parse(buf.begin() + 4, buf.begin() + 4 + n);
  buf.erase(0, 4 + static_cast<std::size_t>(n));
  return msg;
}

// ---------------------------------------------------------------------------
// Requests and results.

enum class Status { pending, done, failed, not_found };

inline std::string to_string(Status s) {
  switch (s) {
    case Status::pending: return "pending";
    case Status::done: return "done";
    case Status::failed: return "failed";
    case Status::not_found: return "not_found";
  }
  return "?";
}

inline Status parse_status(const std::string& s) {
  if (s == "pending") return Status::pending;
  if (s == "done") return Status::done;
  if (s == "failed") return Status::failed;
  if (s == "not_found") return Status::not_found;
  throw TransportError("unknown result status '" + s + "'");
}

struct RewardRequest {
  std::string uuid;
  std::string task;
  std::vector<Point> samples;
  std::vector<int> conditions;
  Clock::time_point submitted;
};

struct FetchResult {
  Status status = Status::not_found;
  std::vector<double> rewards;
  std::string reason;
};

/// The service rejected a request outright (unknown task, malformed batch).
class RequestRejected : public Error {
 public:
  using Error::Error;
};

/// Random version-4 identifiers, hex encoded.
class UuidGenerator {
 public:
  UuidGenerator() : engine_(seed()) {}

  std::string next() {
    std::array<unsigned char, 16> bytes{};
    {
      std::lock_guard lock(mu_);
      const std::uint64_t a = engine_(), b = engine_();
      for (int i = 0; i < 8; ++i) {
        bytes[i] = static_cast<unsigned char>(a >> (8 * i));
        bytes[8 + i] = static_cast<unsigned char>(b >> (8 * i));
      }
    }
    bytes[6] = static_cast<unsigned char>((bytes[6] & 0x0f) | 0x40);
    bytes[8] = static_cast<unsigned char>((bytes[8] & 0x3f) | 0x80);
    static constexpr char hex[] = "0123456789abcdef";
    std::string s(32, '0');
    for (int i = 0; i < 16; ++i) {
      s[2 * i] = hex[bytes[i] >> 4];
      s[2 * i + 1] = hex[bytes[i] & 0x0f];
    }
    return s;
  }

 private:
  static std::uint64_t seed() {
    std::random_device rd;
    return (static_cast<std::uint64_t>(rd()) << 32) ^ rd() ^
           static_cast<std::uint64_t>(Clock::now().time_since_epoch().count());
  }

  std::mutex mu_;
  std::mt19937_64 engine_;
};

/// uuid -> status map. An entry leaves `pending` at most once.
class ResultStore {
 public:
  /// Returns false if the uuid already exists.
  bool create(const std::string& uuid, std::size_t expected) {
    std::lock_guard lock(mu_);
    return entries_.emplace(uuid, Entry{Status::pending, {}, {}, expected}).second;
  }

  bool complete(const std::string& uuid, std::vector<double> rewards) {
    std::lock_guard lock(mu_);
    auto it = entries_.find(uuid);
    if (it == entries_.end() || it->second.status != Status::pending) return false;
    if (rewards.size() != it->second.expected) {
      it->second.status = Status::failed;
      it->second.reason = "reward count mismatch";
    } else {
      it->second.rewards = std::move(rewards);
      it->second.status = Status::done;
    }
    cv_.notify_all();
    return true;
  }

  bool fail(const std::string& uuid, std::string reason) {
    std::lock_guard lock(mu_);
    auto it = entries_.find(uuid);
    if (it == entries_.end() || it->second.status != Status::pending) return false;
    it->second.status = Status::failed;
    it->second.reason = std::move(reason);
    cv_.notify_all();
    return true;
  }

  /// Current status, waiting up to `wait` for a pending entry to resolve.
  FetchResult get(const std::string& uuid, std::chrono::milliseconds wait = std::chrono::milliseconds{0}) const {
    std::unique_lock lock(mu_);
    auto it = entries_.find(uuid);
    if (it == entries_.end()) return {Status::not_found, {}, "unknown uuid"};
    if (it->second.status == Status::pending && wait.count() > 0) {
      cv_.wait_for(lock, wait, [&] { return it->second.status != Status::pending; });
    }
    return {it->second.status, it->second.rewards, it->second.reason};
  }

  std::size_t count(Status s) const {
    std::lock_guard lock(mu_);
    return static_cast<std::size_t>(
        std::count_if(entries_.begin(), entries_.end(), [&](const auto& kv) { return kv.second.status == s; }));
  }

  /// Fails every entry still pending; returns how many were flipped.
  std::size_t fail_pending(const std::string& reason) {
    std::lock_guard lock(mu_);
    std::size_t n = 0;
    for (auto& [_, e] : entries_) {
      if (e.status == Status::pending) {
        e.status = Status::failed;
        e.reason = reason;
        ++n;
      }
    }
    cv_.notify_all();
    return n;
  }

  /// One JSON object per line, ordered by uuid.
  void write_snapshot(const std::string& path) const {
    std::lock_guard lock(mu_);
    std::ofstream os(path);
    if (!os) throw Error("cannot open snapshot file " + path);
    for (const auto& [uuid, e] : entries_) {
      json line = {{"uuid", uuid}, {"status", to_string(e.status)}};
      if (e.status == Status::done) line["rewards"] = e.rewards;
      if (e.status == Status::failed) line["reason"] = e.reason;
      os << line.dump() << '\n';
    }
  }

 private:
  struct Entry {
    Status status;
    std::vector<double> rewards;
    std::string reason;
    std::size_t expected;
  };

  mutable std::mutex mu_;
  mutable std::condition_variable cv_;
  std::map<std::string, Entry> entries_;
};

/// Blocking bounded FIFO. push() blocks while full; pop_batch() blocks while
/// empty. After close(), push() fails and pop_batch() drains what is left.
template <class T>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t capacity) : capacity_(std::max<std::size_t>(1, capacity)) {}

  bool push(T item) {
    std::unique_lock lock(mu_);
    not_full_.wait(lock, [&] { return closed_ || items_.size() < capacity_; });
    if (closed_) return false;
    items_.push_back(std::move(item));
    not_empty_.notify_one();
    return true;
  }

  /// Up to `max_items` items; empty only once closed and drained.
  std::vector<T> pop_batch(std::size_t max_items) {
    std::unique_lock lock(mu_);
    not_empty_.wait(lock, [&] { return closed_ || !items_.empty(); });
    std::vector<T> out;
    while (!items_.empty() && out.size() < max_items) {
      out.push_back(std::move(items_.front()));
      items_.pop_front();
    }
    not_full_.notify_all();
    return out;
  }

  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    not_empty_.notify_all();
    not_full_.notify_all();
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return items_.size();
  }

 private:
  std::size_t capacity_;
  mutable std::mutex mu_;
  std::condition_variable not_empty_;
  std::condition_variable not_full_;
  std::deque<T> items_;
  bool closed_ = false;
};

using TaskRegistry = std::map<std::string, TaskPtr>;

struct PipelineOptions {
  int workers = 2;
  int batch_window = 8;  // requests coalesced per scoring pass
  std::size_t queue_capacity = 1024;
  std::string snapshot_path;  // empty: no snapshot on shutdown
};

/// Queue -> scoring workers -> result store.
class ScoringPipeline {
 public:
  ScoringPipeline(TaskRegistry registry, PipelineOptions opt)
      : registry_(std::move(registry)), opt_(std::move(opt)), queue_(opt_.queue_capacity) {
    if (opt_.workers < 1) throw ConfigError("reward.workers", "must be >= 1");
    if (opt_.batch_window < 1) throw ConfigError("reward.batch_window", "must be >= 1");
    for (int i = 0; i < opt_.workers; ++i) workers_.emplace_back([this] { worker_loop(); });
  }

  ScoringPipeline(const ScoringPipeline&) = delete;
  ScoringPipeline& operator=(const ScoringPipeline&) = delete;

  ~ScoringPipeline() {
    try {
      shutdown();
    } catch (const std::exception& e) {
      log_error(std::string("reward pipeline shutdown: ") + e.what());
    }
  }

  /// Validates and enqueues; blocks while the queue is full.
  std::string submit(const std::string& task, std::vector<Point> samples, std::vector<int> conditions) {
    auto it = registry_.find(task);
    if (it == registry_.end()) throw RequestRejected("unknown task '" + task + "'");
    if (samples.empty()) throw RequestRejected("empty batch");
    if (samples.size() != conditions.size()) throw RequestRejected("samples and conditions differ in length");
    RewardRequest req{{}, task, std::move(samples), std::move(conditions), Clock::now()};
    do {
      req.uuid = uuids_.next();
    } while (!store_.create(req.uuid, req.samples.size()));
    const std::string uuid = req.uuid;
    if (!queue_.push(std::move(req))) {
      store_.fail(uuid, "service shutting down");
      throw RequestRejected("service shutting down");
    }
    return uuid;
  }

  FetchResult fetch(const std::string& uuid, std::chrono::milliseconds wait) const { return store_.get(uuid, wait); }

  /// Stops intake, lets workers finish queued work, fails anything left
  /// pending and writes the snapshot if configured. Idempotent.
  void shutdown() {
    if (stopped_.exchange(true)) return;
    queue_.close();
    for (auto& w : workers_) {
      if (w.joinable()) w.join();
    }
    store_.fail_pending("service shut down");
    if (!opt_.snapshot_path.empty()) store_.write_snapshot(opt_.snapshot_path);
  }

  const ResultStore& store() const { return store_; }
  const TaskRegistry& registry() const { return registry_; }
  std::uint64_t scoring_passes() const { return passes_.load(); }

 private:
  void worker_loop() {
    for (;;) {
      std::vector<RewardRequest> batch = queue_.pop_batch(static_cast<std::size_t>(opt_.batch_window));
      if (batch.empty()) return;
      passes_.fetch_add(1);
      for (RewardRequest& req : batch) score(req);
    }
  }

  void score(const RewardRequest& req) {
    try {
      const Task& task = *registry_.at(req.task);
      std::vector<double> rewards;
      rewards.reserve(req.samples.size());
      for (std::size_t i = 0; i < req.samples.size(); ++i) {
        task.check_point(req.samples[i]);
        task.check_condition(req.conditions[i]);
        const double r = task.reward(req.samples[i], req.conditions[i]);
        if (!std::isfinite(r)) throw NumericError("non-finite reward at index " + std::to_string(i));
        rewards.push_back(r);
      }
      store_.complete(req.uuid, std::move(rewards));
    } catch (const std::exception& e) {
      store_.fail(req.uuid, e.what());
    }
  }

  TaskRegistry registry_;
  PipelineOptions opt_;
  BoundedQueue<RewardRequest> queue_;
  ResultStore store_;
  UuidGenerator uuids_;
  std::vector<std::thread> workers_;
  std::atomic<bool> stopped_{false};
  std::atomic<std::uint64_t> passes_{0};
};

// ---------------------------------------------------------------------------
// Clients.

class RewardClient {
 public:
  virtual ~RewardClient() = default;
  virtual std::string submit(const std::string& task, const std::vector<Point>& samples,
                             const std::vector<int>& conditions) = 0;
  virtual FetchResult fetch(const std::string& uuid, std::chrono::milliseconds wait) = 0;
};

/// Same interface, no sockets.
class InProcessClient final : public RewardClient {
 public:
  explicit InProcessClient(std::shared_ptr<ScoringPipeline> pipeline) : pipeline_(std::move(pipeline)) {}

  std::string submit(const std::string& task, const std::vector<Point>& samples,
                     const std::vector<int>& conditions) override {
    return pipeline_->submit(task, samples, conditions);
  }

  FetchResult fetch(const std::string& uuid, std::chrono::milliseconds wait) override {
    return pipeline_->fetch(uuid, wait);
  }

 private:
  std::shared_ptr<ScoringPipeline> pipeline_;
};

namespace detail {

class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Socket& operator=(Socket&& o) noexcept {
    if (this != &o) {
      reset();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  ~Socket() { reset(); }

  int fd() const { return fd_; }
  explicit operator bool() const { return fd_ >= 0; }

  void reset() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_ = -1;
};

inline void send_all(int fd, const std::string& bytes) {
  std::size_t sent = 0;
  while (sent < bytes.size()) {
    const ssize_t n = ::send(fd, bytes.data() + sent, bytes.size() - sent, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw TransportError(std::string("send failed: ") + std::strerror(errno));
    }
    sent += static_cast<std::size_t>(n);
  }
}

/// Reads until one frame is available; nullopt on orderly close.
inline std::optional<json> read_frame(int fd, std::string& buf) {
  for (;;) {
    if (auto msg = decode_frame(buf)) return msg;
    char chunk[8192];
    const ssize_t n = ::recv(fd, chunk, sizeof chunk, 0);
    if (n == 0) {
      if (!buf.empty()) throw TransportError("connection closed mid-frame");
      return std::nullopt;
    }
    if (n < 0) {
      if (errno == EINTR) continue;
      throw TransportError(std::string("recv failed: ") + std::strerror(errno));
    }
    buf.append(chunk, static_cast<std::size_t>(n));
  }
}

struct Endpoint {
  std::string host;
  int port = 0;
};

/// "host:port" or ":port".
inline Endpoint parse_endpoint(const std::string& s, const std::string& field = "reward.endpoint") {
  const auto colon = s.rfind(':');
  if (colon == std::string::npos) throw ConfigError(field, "expected host:port, got '" + s + "'");
  Endpoint ep;
  ep.host = colon == 0 ? "127.0.0.1" : s.substr(0, colon);
  const std::string port = s.substr(colon + 1);
  try {
    std::size_t used = 0;
    ep.port = std::stoi(port, &used);
    if (used != port.size()) throw std::invalid_argument("trailing");
  } catch (const std::exception&) {
    throw ConfigError(field, "invalid port '" + port + "'");
  }
  if (ep.port < 0 || ep.port > 65535) throw ConfigError(field, "port " + port + " outside [0, 65535]");
  return ep;
}

inline sockaddr_in resolve(const Endpoint& ep) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<std::uint16_t>(ep.port));
  if (::inet_pton(AF_INET, ep.host.c_str(), &addr.sin_addr) == 1) return addr;
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(ep.host.c_str(), nullptr, &hints, &res) != 0 || !res) {
    throw TransportError("cannot resolve host '" + ep.host + "'");
  }
  addr.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
  ::freeaddrinfo(res);
  return addr;
}

}  // namespace detail

inline json submit_message(const std::string& task, const std::vector<Point>& samples,
                           const std::vector<int>& conditions) {
  return {{"type", "submit"}, {"task", task}, {"samples", samples}, {"conditions", conditions}};
}

inline json fetch_message(const std::string& uuid, std::chrono::milliseconds wait) {
  return {{"type", "fetch"}, {"uuid", uuid}, {"wait_ms", wait.count()}};
}

inline json result_message(const std::string& uuid, const FetchResult& r) {
  json msg = {{"type", "result"}, {"uuid", uuid}, {"status", to_string(r.status)}};
  if (r.status == Status::done) msg["rewards"] = r.rewards;
  if (r.status == Status::failed || r.status == Status::not_found) msg["reason"] = r.reason;
  return msg;
}

/// Client over one TCP connection. Not safe for concurrent use.
class TcpClient final : public RewardClient {
 public:
  explicit TcpClient(const std::string& endpoint) {
    const detail::Endpoint ep = detail::parse_endpoint(endpoint);
    const sockaddr_in addr = detail::resolve(ep);
    detail::Socket s(::socket(AF_INET, SOCK_STREAM, 0));
    if (!s) throw TransportError(std::string("socket: ") + std::strerror(errno));
    if (::connect(s.fd(), reinterpret_cast<const sockaddr*>(&addr), sizeof addr) != 0) {
      throw TransportError("cannot connect to " + endpoint + ": " + std::strerror(errno));
    }
    int one = 1;
    ::setsockopt(s.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    sock_ = std::move(s);
  }

  std::string submit(const std::string& task, const std::vector<Point>& samples,
                     const std::vector<int>& conditions) override {
    const json reply = round_trip(submit_message(task, samples, conditions));
    if (reply.at("type") == "ack") return reply.at("uuid").get<std::string>();
    throw RequestRejected(reply.value("reason", std::string("submit rejected")));
  }

  FetchResult fetch(const std::string& uuid, std::chrono::milliseconds wait) override {
    const json reply = round_trip(fetch_message(uuid, wait));
    if (reply.at("type") != "result") throw TransportError(reply.value("reason", std::string("fetch failed")));
    FetchResult r;
    r.status = parse_status(reply.at("status").get<std::string>());
    if (reply.contains("rewards")) r.rewards = reply.at("rewards").get<std::vector<double>>();
    r.reason = reply.value("reason", std::string{});
    return r;
  }

  /// Asks the server to stop; returns once acknowledged.
  void request_shutdown() { round_trip({{"type", "shutdown"}}); }

  /// Sends raw bytes and returns the next reply; for protocol tests.
  json send_raw(const std::string& bytes) {
    detail::send_all(sock_.fd(), bytes);
    auto reply = detail::read_frame(sock_.fd(), buf_);
    if (!reply) throw TransportError("server closed the connection");
    return *reply;
  }

 private:
  json round_trip(const json& msg) { return send_raw(encode_frame(msg)); }

  detail::Socket sock_;
  std::string buf_;
};

// ---------------------------------------------------------------------------
// Server.

struct ServerOptions {
  std::string bind = "127.0.0.1:7461";
  PipelineOptions pipeline;
};

/// TCP front end over a ScoringPipeline: one acceptor thread plus one thread
/// per connection.
class RewardServer {
 public:
  RewardServer(TaskRegistry registry, ServerOptions opt)
      : opt_(std::move(opt)),
        pipeline_(std::make_shared<ScoringPipeline>(std::move(registry), opt_.pipeline)) {
    const detail::Endpoint ep = detail::parse_endpoint(opt_.bind, "serve.bind");
    const sockaddr_in addr = detail::resolve(ep);
    detail::Socket s(::socket(AF_INET, SOCK_STREAM, 0));
    if (!s) throw TransportError(std::string("socket: ") + std::strerror(errno));
    int one = 1;
    ::setsockopt(s.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    if (::bind(s.fd(), reinterpret_cast<const sockaddr*>(&addr), sizeof addr) != 0) {
      throw TransportError("cannot bind " + opt_.bind + ": " + std::strerror(errno));
    }
    if (::listen(s.fd(), 64) != 0) throw TransportError(std::string("listen: ") + std::strerror(errno));
    sockaddr_in bound{};
    socklen_t len = sizeof bound;
    ::getsockname(s.fd(), reinterpret_cast<sockaddr*>(&bound), &len);
    port_ = ntohs(bound.sin_port);
    listener_ = std::move(s);
    acceptor_ = std::thread([this] { accept_loop(); });
  }

  RewardServer(const RewardServer&) = delete;
  RewardServer& operator=(const RewardServer&) = delete;

  ~RewardServer() { stop(); }

  int port() const { return port_; }
  std::string endpoint() const { return "127.0.0.1:" + std::to_string(port_); }
  std::shared_ptr<ScoringPipeline> pipeline() const { return pipeline_; }

  /// Blocks until a client sends a shutdown message or stop() is called.
  void wait_for_shutdown_request() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return shutdown_requested_; });
  }

  void request_shutdown() {
    std::lock_guard lock(mu_);
    shutdown_requested_ = true;
    cv_.notify_all();
  }

  /// Stops accepting, drains the pipeline, then closes connections.
  void stop() {
    if (stopped_.exchange(true)) return;
    request_shutdown();
    ::shutdown(listener_.fd(), SHUT_RDWR);
    if (acceptor_.joinable()) acceptor_.join();
    listener_.reset();
    pipeline_->shutdown();
    std::vector<std::thread> conns;
    {
      std::lock_guard lock(mu_);
      for (int fd : open_fds_) ::shutdown(fd, SHUT_RDWR);
      conns = std::move(connections_);
    }
    for (auto& t : conns) {
      if (t.joinable()) t.join();
    }
  }

 private:
  void accept_loop() {
    for (;;) {
      const int fd = ::accept(listener_.fd(), nullptr, nullptr);
      if (fd < 0) {
        if (errno == EINTR) continue;
        return;  // listener shut down
      }
      if (stopped_.load()) {
        ::close(fd);
        return;
      }
      int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      std::lock_guard lock(mu_);
      open_fds_.push_back(fd);
      connections_.emplace_back([this, fd] { serve_connection(fd); });
    }
  }

  void serve_connection(int fd) {
    detail::Socket sock(fd);
    std::string buf;
    try {
      while (auto msg = detail::read_frame(fd, buf)) {
        detail::send_all(fd, encode_frame(dispatch(*msg)));
      }
    } catch (const std::exception& e) {
      // Malformed frames get one error reply before the connection drops.
      try {
        detail::send_all(fd, encode_frame({{"type", "error"}, {"reason", e.what()}}));
      } catch (const std::exception&) {
      }
    }
    std::lock_guard lock(mu_);
    open_fds_.erase(std::remove(open_fds_.begin(), open_fds_.end(), fd), open_fds_.end());
  }

  json dispatch(const json& msg) {
    const std::string type = msg.is_object() ? msg.value("type", std::string{}) : std::string{};
    try {
      if (type == "submit") {
        auto samples = msg.at("samples").get<std::vector<Point>>();
        auto conds = msg.at("conditions").get<std::vector<int>>();
        const std::string uuid = pipeline_->submit(msg.at("task").get<std::string>(), std::move(samples), std::move(conds));
        return {{"type", "ack"}, {"uuid", uuid}};
      }
      if (type == "fetch") {
        const std::string uuid = msg.at("uuid").get<std::string>();
        const auto wait = std::chrono::milliseconds(std::max<std::int64_t>(0, msg.value("wait_ms", std::int64_t{0})));
        return result_message(uuid, pipeline_->fetch(uuid, wait));
      }
      if (type == "shutdown") {
        request_shutdown();
        return {{"type", "ack"}, {"uuid", ""}};
      }
      return {{"type", "error"}, {"reason", "unknown message type '" + type + "'"}};
    } catch (const json::exception& e) {
      return {{"type", "error"}, {"reason", std::string("malformed ") + type + ": " + e.what()}};
    } catch (const RequestRejected& e) {
      return {{"type", "error"}, {"reason", e.what()}};
    }
  }

  ServerOptions opt_;
  std::shared_ptr<ScoringPipeline> pipeline_;
  detail::Socket listener_;
  int port_ = 0;
  std::thread acceptor_;
  std::mutex mu_;
  std::condition_variable cv_;
  bool shutdown_requested_ = false;
  std::vector<std::thread> connections_;
  std::vector<int> open_fds_;
  std::atomic<bool> stopped_{false};
};

}  // namespace ddrl::reward
