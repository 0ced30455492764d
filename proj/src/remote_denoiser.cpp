#include "neused/remote_denoiser.hpp"

#include <cmath>

#include "httplib.h"
#include "json.hpp"

namespace neused {

using nlohmann::json;

// Accepts "http://host:port" or "host:port".
static void parse_endpoint(const std::string& endpoint, std::string& host, int& port) {
  std::string rest = endpoint;
  const std::string scheme = "http://";
  if (rest.rfind(scheme, 0) == 0) rest = rest.substr(scheme.size());
  while (!rest.empty() && rest.back() == '/') rest.pop_back();
  const auto colon = rest.rfind(':');
  if (colon == std::string::npos)
    throw ConfigError("remote denoiser: endpoint must be host:port, got " + endpoint);
  host = rest.substr(0, colon);
  try {
    port = std::stoi(rest.substr(colon + 1));
  } catch (const std::exception&) {
    throw ConfigError("remote denoiser: bad port in endpoint " + endpoint);
  }
}

RemoteDenoiser::RemoteDenoiser(std::string endpoint, double timeout_seconds)
    : endpoint_(std::move(endpoint)), timeout_seconds_(timeout_seconds) {
  parse_endpoint(endpoint_, host_, port_);
}

RemoteDenoiser::~RemoteDenoiser() = default;

Tensor RemoteDenoiser::epsilon(const Tensor& x_t, int t, const Conditioning& cond) const {
  json body;
  body["shape"] = x_t.shape;
  body["x_t"] = x_t.v;
  body["t"] = t;
  if (cond.null_flag) {
    body["prompt"] = nullptr;
    body["embedding"] = nullptr;
  } else if (!cond.text.empty()) {
    body["prompt"] = cond.text;
    body["embedding"] = nullptr;
  } else {
    body["prompt"] = nullptr;
    body["embedding"] = cond.embedding;
  }

  httplib::Result res = [&] {
    std::lock_guard<std::mutex> lock(mutex_);
    httplib::Client client(host_, port_);
    client.set_connection_timeout(std::chrono::milliseconds(int(timeout_seconds_ * 1000)));
    client.set_read_timeout(std::chrono::milliseconds(int(timeout_seconds_ * 1000)));
    return client.Post("/v1/denoise", body.dump(), "application/json");
  }();

  if (!res)
    throw TransportError("remote denoiser: request to " + endpoint_ +
                         " failed: " + httplib::to_string(res.error()));
  if (res->status != 200)
    throw TransportError("remote denoiser: HTTP status " + std::to_string(res->status));

  json reply;
  try {
    reply = json::parse(res->body);
  } catch (const json::exception& e) {
    throw MalformedResponseError(std::string("remote denoiser: invalid JSON reply: ") + e.what());
  }
  if (!reply.contains("epsilon") || !reply["epsilon"].is_array())
    throw MalformedResponseError("remote denoiser: reply missing epsilon array");
  if (!reply.contains("shape") || !reply["shape"].is_array())
    throw MalformedResponseError("remote denoiser: reply missing shape echo");

  std::vector<int> echoed = reply["shape"].get<std::vector<int>>();
  if (echoed != x_t.shape)
    throw ShapeError("remote denoiser: reply shape does not match request shape");

  Tensor out(x_t.shape);
  const auto& eps = reply["epsilon"];
  if (eps.size() != out.size())
    throw ShapeError("remote denoiser: epsilon length " + std::to_string(eps.size()) +
                     " does not match shape volume " + std::to_string(out.size()));
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!eps[i].is_number()) throw MalformedResponseError("remote denoiser: non-numeric epsilon");
    out.v[i] = eps[i].get<double>();
  }
  return out;
}

}  // namespace neused
