#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <future>
#include <regex>
#include <set>
#include <thread>

#include "ddrl/reward_service.hpp"

namespace ddrl::reward {
namespace {

using namespace std::chrono_literals;

// NaN reward for negative first coordinates.
class FaultyTask final : public Task {
 public:
  FaultyTask() { init_holdout(1); }
  std::string name() const override { return "faulty"; }
  int dim() const override { return 1; }
  int num_conditions() const override { return 1; }
  bool reward_bounded() const override { return false; }
  double reward(std::span<const double> x, int) const override { return x[0] < 0.0 ? NAN : 2.0 * x[0]; }
  double data_density(std::span<const double>, int) const override { return 1.0; }
  GridSpec grid() const override { return GridSpec::default_1d(); }

 protected:
  Point sample_one(int, Rng& rng) const override { return {rng.normal()}; }
};

TaskRegistry registry() {
  return {{"gmm2d", std::make_shared<Gmm2d>()},
          {"hackable2d", std::make_shared<Hackable2d>()},
          {"faulty", std::make_shared<FaultyTask>()}};
}

std::vector<Point> points(int n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Point> xs;
  for (int i = 0; i < n; ++i) xs.push_back({3.0 * rng.normal(), 3.0 * rng.normal()});
  return xs;
}

std::vector<double> expected(const Task& task, const std::vector<Point>& xs, const std::vector<int>& cs) {
  std::vector<double> r;
  for (std::size_t i = 0; i < xs.size(); ++i) r.push_back(task.reward(xs[i], cs[i]));
  return r;
}

TEST(Uuid, VersionFourHexAndUnique) {
  UuidGenerator gen;
  const std::regex shape("[0-9a-f]{12}4[0-9a-f]{3}[89ab][0-9a-f]{15}");
  std::set<std::string> seen;
  for (int i = 0; i < 10000; ++i) {
    const std::string id = gen.next();
    ASSERT_TRUE(std::regex_match(id, shape)) << id;
    seen.insert(id);
  }
  EXPECT_EQ(seen.size(), 10000u);
}

TEST(Framing, RoundTripAndPartialBuffers) {
  const json msg = {{"type", "fetch"}, {"uuid", "abc"}, {"x", 0.1}};
  const std::string bytes = encode_frame(msg);
  ASSERT_EQ(bytes.size(), 4 + msg.dump().size());
  std::string buf = bytes.substr(0, 3);
  EXPECT_FALSE(decode_frame(buf).has_value());
  buf = bytes.substr(0, bytes.size() - 1);
  EXPECT_FALSE(decode_frame(buf).has_value());
  buf = bytes + bytes;
  EXPECT_EQ(*decode_frame(buf), msg);
  EXPECT_EQ(*decode_frame(buf), msg);
  EXPECT_TRUE(buf.empty());
  std::string huge("\xff\xff\xff\xff", 4);
  EXPECT_THROW(decode_frame(huge), TransportError);
}

TEST(ResultStore, EntriesResolveOnce) {
  ResultStore store;
  EXPECT_TRUE(store.create("a", 2));
  EXPECT_FALSE(store.create("a", 2));
  EXPECT_EQ(store.get("a").status, Status::pending);
  EXPECT_TRUE(store.complete("a", {1.0, 2.0}));
  EXPECT_FALSE(store.fail("a", "late"));
  EXPECT_EQ(store.get("a").rewards, (std::vector<double>{1.0, 2.0}));
  EXPECT_TRUE(store.create("b", 2));
  store.complete("b", {1.0});
  EXPECT_EQ(store.get("b").status, Status::failed);
  EXPECT_EQ(store.get("zzz").status, Status::not_found);
}

TEST(ResultStore, GetWaitsForCompletion) {
  ResultStore store;
  store.create("a", 1);
  std::thread t([&] {
    std::this_thread::sleep_for(20ms);
    store.complete("a", {5.0});
  });
  const FetchResult r = store.get("a", 5000ms);
  t.join();
  EXPECT_EQ(r.status, Status::done);
  EXPECT_EQ(r.rewards, (std::vector<double>{5.0}));
}

TEST(BoundedQueue, PushBlocksWhileFull) {
  BoundedQueue<int> q(2);
  ASSERT_TRUE(q.push(1));
  ASSERT_TRUE(q.push(2));
  auto pushed = std::async(std::launch::async, [&] { return q.push(3); });
  EXPECT_EQ(pushed.wait_for(50ms), std::future_status::timeout);
  EXPECT_EQ(q.pop_batch(1), (std::vector<int>{1}));
  EXPECT_TRUE(pushed.get());
  q.close();
  EXPECT_FALSE(q.push(4));
  EXPECT_EQ(q.pop_batch(10), (std::vector<int>{2, 3}));
  EXPECT_TRUE(q.pop_batch(10).empty());
}

TEST(Pipeline, RewardsMatchTaskInOrder) {
  const TaskRegistry reg = registry();
  ScoringPipeline p(reg, PipelineOptions{});
  const auto xs = points(50, 1);
  std::vector<int> cs;
  for (int i = 0; i < 50; ++i) cs.push_back(i % 2);
  const std::string id = p.submit("gmm2d", xs, cs);
  const FetchResult r = p.fetch(id, 5000ms);
  ASSERT_EQ(r.status, Status::done);
  EXPECT_EQ(r.rewards, expected(*reg.at("gmm2d"), xs, cs));
  EXPECT_EQ(p.fetch("no-such-id", 0ms).status, Status::not_found);
}

TEST(Pipeline, RejectsMalformedSubmissions) {
  ScoringPipeline p(registry(), PipelineOptions{});
  EXPECT_THROW(p.submit("nope", points(1, 1), {0}), RequestRejected);
  EXPECT_THROW(p.submit("gmm2d", {}, {}), RequestRejected);
  EXPECT_THROW(p.submit("gmm2d", points(2, 1), {0}), RequestRejected);
  EXPECT_THROW(ScoringPipeline(registry(), PipelineOptions{0, 8, 16, ""}), ConfigError);
}

TEST(Pipeline, ScoringFailuresStayPerRequest) {
  ScoringPipeline p(registry(), PipelineOptions{});
  const std::string bad = p.submit("faulty", {{1.0}, {-1.0}}, {0, 0});
  const std::string wrong_cond = p.submit("gmm2d", points(1, 2), {7});
  const std::string wrong_dim = p.submit("hackable2d", {{1.0}}, {0});
  const std::string good = p.submit("faulty", {{1.5}}, {0});
  const FetchResult rb = p.fetch(bad, 5000ms);
  EXPECT_EQ(rb.status, Status::failed);
  EXPECT_NE(rb.reason.find("non-finite"), std::string::npos);
  EXPECT_EQ(p.fetch(wrong_cond, 5000ms).status, Status::failed);
  EXPECT_EQ(p.fetch(wrong_dim, 5000ms).status, Status::failed);
  const FetchResult rg = p.fetch(good, 5000ms);
  EXPECT_EQ(rg.status, Status::done);
  EXPECT_EQ(rg.rewards, (std::vector<double>{3.0}));
}

TEST(Pipeline, WorkerCountDoesNotChangeRewards) {
  auto run = [](int workers) {
    ScoringPipeline p(registry(), PipelineOptions{workers, 3, 64, ""});
    std::vector<std::string> ids;
    for (int k = 0; k < 30; ++k) ids.push_back(p.submit("hackable2d", points(7, 100 + k), std::vector<int>(7, 0)));
    std::vector<std::vector<double>> out;
    for (const auto& id : ids) out.push_back(p.fetch(id, 5000ms).rewards);
    return out;
  };
  EXPECT_EQ(run(1), run(4));
}

TEST(Pipeline, ShutdownDrainsQueuedWorkAndWritesSnapshot) {
  const auto path = std::filesystem::temp_directory_path() / "ddrl_snapshot_test.jsonl";
  std::filesystem::remove(path);
  std::vector<std::string> ids;
  {
    ScoringPipeline p(registry(), PipelineOptions{1, 2, 256, path.string()});
    for (int k = 0; k < 100; ++k) ids.push_back(p.submit("hackable2d", points(20, k), std::vector<int>(20, 0)));
    p.shutdown();
    EXPECT_EQ(p.store().count(Status::done), 100u);
    EXPECT_EQ(p.store().count(Status::pending), 0u);
    EXPECT_THROW(p.submit("hackable2d", points(1, 1), {0}), RequestRejected);
  }
  std::ifstream in(path);
  std::string line;
  std::set<std::string> seen;
  while (std::getline(in, line)) {
    const json j = json::parse(line);
    EXPECT_EQ(j.at("status"), "done");
    seen.insert(j.at("uuid").get<std::string>());
  }
  EXPECT_EQ(seen, std::set<std::string>(ids.begin(), ids.end()));
  std::filesystem::remove(path);
}

TEST(Endpoint, ParsesAndRejects) {
  const auto ep = detail::parse_endpoint("localhost:8080");
  EXPECT_EQ(ep.host, "localhost");
  EXPECT_EQ(ep.port, 8080);
  EXPECT_EQ(detail::parse_endpoint(":9").host, "127.0.0.1");
  EXPECT_THROW(detail::parse_endpoint("nohost"), ConfigError);
  EXPECT_THROW(detail::parse_endpoint("h:99999"), ConfigError);
  EXPECT_THROW(detail::parse_endpoint("h:abc"), ConfigError);
}

ServerOptions ephemeral(int workers = 2) {
  ServerOptions o;
  o.bind = "127.0.0.1:0";
  o.pipeline.workers = workers;
  return o;
}

TEST(Server, TcpRoundTripIsBitExact) {
  const TaskRegistry reg = registry();
  RewardServer server(reg, ephemeral());
  TcpClient client(server.endpoint());
  const auto xs = points(64, 9);
  const std::vector<int> cs(64, 1);
  const std::string id = client.submit("gmm2d", xs, cs);
  const FetchResult r = client.fetch(id, 5000ms);
  ASSERT_EQ(r.status, Status::done);
  EXPECT_EQ(r.rewards, expected(*reg.at("gmm2d"), xs, cs));
  EXPECT_EQ(client.fetch("missing", 0ms).status, Status::not_found);
  EXPECT_THROW(client.submit("nope", xs, cs), RequestRejected);
}

TEST(Server, ConcurrentClientsGetTheirOwnResults) {
  const TaskRegistry reg = registry();
  RewardServer server(reg, ephemeral(3));
  std::atomic<int> matched{0};
  std::vector<std::thread> threads;
  for (int c = 0; c < 4; ++c) {
    threads.emplace_back([&, c] {
      TcpClient client(server.endpoint());
      std::vector<std::pair<std::string, std::vector<Point>>> sent;
      for (int k = 0; k < 25; ++k) {
        auto xs = points(16, 1000 * c + k);
        sent.emplace_back(client.submit("hackable2d", xs, std::vector<int>(16, 0)), std::move(xs));
      }
      for (const auto& [id, xs] : sent) {
        const FetchResult r = client.fetch(id, 10000ms);
        if (r.status == Status::done && r.rewards == expected(*reg.at("hackable2d"), xs, std::vector<int>(16, 0))) {
          ++matched;
        }
      }
    });
  }
  for (auto& t : threads) t.join();
  EXPECT_EQ(matched.load(), 100);
  EXPECT_EQ(server.pipeline()->store().count(Status::done), 100u);
}

TEST(Server, MalformedFramesGetErrorReplies) {
  RewardServer server(registry(), ephemeral());
  TcpClient client(server.endpoint());
  EXPECT_EQ(client.send_raw(encode_frame({{"type", "dance"}})).at("type"), "error");
  EXPECT_EQ(client.send_raw(encode_frame({{"type", "submit"}, {"task", "gmm2d"}})).at("type"), "error");
  EXPECT_EQ(client.send_raw(encode_frame(json::array({1, 2}))).at("type"), "error");
  // Two frames in one write yield two replies.
  const std::string two = encode_frame(fetch_message("x", 0ms)) + encode_frame(fetch_message("y", 0ms));
  EXPECT_EQ(client.send_raw(two).at("uuid"), "x");
  EXPECT_EQ(client.send_raw("").at("uuid"), "y");

  // Invalid JSON body: one error reply, then the server drops the connection.
  TcpClient raw(server.endpoint());
  const std::string body = "{not json";
  std::string bytes = {0, 0, 0, static_cast<char>(body.size())};
  const json reply = raw.send_raw(bytes + body);
  EXPECT_EQ(reply.at("type"), "error");
  EXPECT_THROW(raw.send_raw(encode_frame(fetch_message("x", 0ms))), TransportError);
}

TEST(Server, ShutdownMessageWakesWaiter) {
  RewardServer server(registry(), ephemeral());
  auto waiter = std::async(std::launch::async, [&] { server.wait_for_shutdown_request(); });
  TcpClient client(server.endpoint());
  const std::string id = client.submit("hackable2d", points(4, 1), std::vector<int>(4, 0));
  client.request_shutdown();
  EXPECT_EQ(waiter.wait_for(5s), std::future_status::ready);
  server.stop();
  EXPECT_EQ(server.pipeline()->fetch(id, 0ms).status, Status::done);
}

TEST(Server, BindFailureIsReported) {
  RewardServer first(registry(), ephemeral());
  ServerOptions taken;
  taken.bind = first.endpoint();
  EXPECT_THROW(RewardServer(registry(), taken), TransportError);
  EXPECT_THROW(TcpClient("127.0.0.1:1"), TransportError);
}

}  // namespace
}  // namespace ddrl::reward
