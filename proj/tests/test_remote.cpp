#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

// httplib drags in system socket headers whose macros clash with Eigen, so
// the engine headers (which include Eigen) must come first.
#include "neused/remote_denoiser.hpp"

#include <httplib.h>
#include <json.hpp>

#include <atomic>
#include <string>
#include <thread>

using namespace neused;
using nlohmann::json;

namespace {

// In-process loopback server bound to an ephemeral port.
class TestServer {
 public:
  explicit TestServer(httplib::Server::Handler handler) {
    server_.Post("/v1/denoise", std::move(handler));
    port_ = server_.bind_to_any_port("127.0.0.1");
    REQUIRE(port_ > 0);
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~TestServer() {
    server_.stop();
    thread_.join();
  }
  std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port_); }

 private:
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
};

// Handler echoing a zero tensor of the requested shape, with the mandatory
// shape echo. Captures the last request body for inspection.
struct ZeroHandler {
  std::shared_ptr<std::string> last_body = std::make_shared<std::string>();
  void operator()(const httplib::Request& req, httplib::Response& res) const {
    *last_body = req.body;
    const json body = json::parse(req.body);
    const auto shape = body.at("shape").get<std::vector<int>>();
    std::size_t n = 1;
    for (int d : shape) n *= std::size_t(d);
    json reply;
    reply["shape"] = shape;
    reply["epsilon"] = std::vector<double>(n, 0.0);
    res.set_content(reply.dump(), "application/json");
  }
};

}  // namespace

TEST_CASE("endpoint parsing") {
  CHECK_THROWS_AS(RemoteDenoiser("localhost"), ConfigError);       // no port
  CHECK_THROWS_AS(RemoteDenoiser("http://host:abc"), ConfigError);  // bad port
  CHECK_NOTHROW(RemoteDenoiser("127.0.0.1:8080"));
  CHECK_NOTHROW(RemoteDenoiser("http://127.0.0.1:8080/"));
}

TEST_CASE("zero server returns a zero tensor and the request carries the prompt") {
  ZeroHandler handler;
  TestServer server(handler);
  RemoteDenoiser den(server.endpoint(), 5.0);

  Rng rng(3);
  const Tensor x = Tensor::gaussian({2, 3}, rng);

  SUBCASE("null prompt sends both fields as null") {
    const Tensor out = den.epsilon(x, 7, Conditioning::null_prompt(4));
    REQUIRE(out.shape == x.shape);
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == 0.0);
    const json sent = json::parse(*handler.last_body);
    CHECK(sent.at("t").get<int>() == 7);
    CHECK(sent.at("shape").get<std::vector<int>>() == x.shape);
    CHECK(sent.at("x_t").get<std::vector<double>>() == x.v);
    CHECK(sent.at("prompt").is_null());
    CHECK(sent.at("embedding").is_null());
  }

  SUBCASE("a text prompt is sent as a string") {
    (void)den.epsilon(x, 2, Conditioning::from_prompt("a blue cup", 4));
    const json sent = json::parse(*handler.last_body);
    CHECK(sent.at("prompt").get<std::string>() == "a blue cup");
    CHECK(sent.at("embedding").is_null());
  }

  SUBCASE("a textless embedding is sent as an array") {
    Conditioning cond = Conditioning::from_prompt("seed prompt", 4);
    cond.text.clear();
    (void)den.epsilon(x, 2, cond);
    const json sent = json::parse(*handler.last_body);
    CHECK(sent.at("prompt").is_null());
    CHECK(sent.at("embedding").get<std::vector<double>>() == cond.embedding);
  }
}

TEST_CASE("a random tensor survives one serialize/deserialize cycle bitwise") {
  // Echo server: epsilon := the x_t that was sent.
  TestServer server([](const httplib::Request& req, httplib::Response& res) {
    const json body = json::parse(req.body);
    json reply;
    reply["shape"] = body.at("shape");
    reply["epsilon"] = body.at("x_t");
    res.set_content(reply.dump(), "application/json");
  });
  RemoteDenoiser den(server.endpoint(), 5.0);

  Rng rng(11);
  const Tensor x = Tensor::gaussian({4, 4}, rng);
  const Tensor out = den.epsilon(x, 1, Conditioning::null_prompt(4));
  REQUIRE(out.shape == x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(out[i] == x[i]);
}

TEST_CASE("shape violations are shape errors") {
  SUBCASE("shape echo differs from the request") {
    TestServer server([](const httplib::Request& req, httplib::Response& res) {
      const json body = json::parse(req.body);
      json reply;
      reply["shape"] = std::vector<int>{1, 1};
      reply["epsilon"] = std::vector<double>{0.0};
      res.set_content(reply.dump(), "application/json");
      (void)body;
    });
    RemoteDenoiser den(server.endpoint(), 5.0);
    CHECK_THROWS_AS(den.epsilon(Tensor({2, 2}, 0.0), 1, Conditioning::null_prompt(4)), ShapeError);
  }

  SUBCASE("epsilon length disagrees with the echoed shape") {
    TestServer server([](const httplib::Request& req, httplib::Response& res) {
      const json body = json::parse(req.body);
      json reply;
      reply["shape"] = body.at("shape");
      reply["epsilon"] = std::vector<double>{0.0};  // too short
      res.set_content(reply.dump(), "application/json");
    });
    RemoteDenoiser den(server.endpoint(), 5.0);
    CHECK_THROWS_AS(den.epsilon(Tensor({2, 2}, 0.0), 1, Conditioning::null_prompt(4)), ShapeError);
  }
}

TEST_CASE("malformed replies are reported as such") {
  SUBCASE("not JSON at all") {
    TestServer server([](const httplib::Request&, httplib::Response& res) {
      res.set_content("this is not json", "text/plain");
    });
    RemoteDenoiser den(server.endpoint(), 5.0);
    CHECK_THROWS_AS(den.epsilon(Tensor({2}, 0.0), 1, Conditioning::null_prompt(4)),
                    MalformedResponseError);
  }

  SUBCASE("missing epsilon") {
    TestServer server([](const httplib::Request&, httplib::Response& res) {
      res.set_content(R"({"shape":[2]})", "application/json");
    });
    RemoteDenoiser den(server.endpoint(), 5.0);
    CHECK_THROWS_AS(den.epsilon(Tensor({2}, 0.0), 1, Conditioning::null_prompt(4)),
                    MalformedResponseError);
  }

  SUBCASE("missing shape echo") {
    TestServer server([](const httplib::Request&, httplib::Response& res) {
      res.set_content(R"({"epsilon":[0.0,0.0]})", "application/json");
    });
    RemoteDenoiser den(server.endpoint(), 5.0);
    CHECK_THROWS_AS(den.epsilon(Tensor({2}, 0.0), 1, Conditioning::null_prompt(4)),
                    MalformedResponseError);
  }

  SUBCASE("non-numeric epsilon entries") {
    TestServer server([](const httplib::Request&, httplib::Response& res) {
      res.set_content(R"({"shape":[2],"epsilon":[0.0,"oops"]})", "application/json");
    });
    RemoteDenoiser den(server.endpoint(), 5.0);
    CHECK_THROWS_AS(den.epsilon(Tensor({2}, 0.0), 1, Conditioning::null_prompt(4)),
                    MalformedResponseError);
  }
}

TEST_CASE("transport failures are transport errors") {
  SUBCASE("HTTP error status") {
    TestServer server([](const httplib::Request&, httplib::Response& res) { res.status = 500; });
    RemoteDenoiser den(server.endpoint(), 5.0);
    CHECK_THROWS_AS(den.epsilon(Tensor({2}, 0.0), 1, Conditioning::null_prompt(4)),
                    TransportError);
  }

  SUBCASE("nothing listens on the port") {
    int free_port;
    {
      // Bind and immediately release a port so nothing is listening on it.
      httplib::Server probe;
      free_port = probe.bind_to_any_port("127.0.0.1");
      probe.stop();
    }
    RemoteDenoiser den("127.0.0.1:" + std::to_string(free_port), 1.0);
    CHECK_THROWS_AS(den.epsilon(Tensor({2}, 0.0), 1, Conditioning::null_prompt(4)),
                    TransportError);
  }
}

TEST_CASE("repeated calls against a deterministic server are identical") {
  TestServer server([](const httplib::Request& req, httplib::Response& res) {
    const json body = json::parse(req.body);
    const auto x = body.at("x_t").get<std::vector<double>>();
    std::vector<double> eps(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) eps[i] = 0.5 * x[i] - 0.25;
    json reply;
    reply["shape"] = body.at("shape");
    reply["epsilon"] = eps;
    res.set_content(reply.dump(), "application/json");
  });
  RemoteDenoiser den(server.endpoint(), 5.0);
  Rng rng(5);
  const Tensor x = Tensor::gaussian({3, 2}, rng);
  const Tensor a = den.epsilon(x, 9, Conditioning::null_prompt(4));
  const Tensor b = den.epsilon(x, 9, Conditioning::null_prompt(4));
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}
