#pragma once

// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 COIECD Authors

/**
 * @file http_model.hpp
 * @brief Dual-context adapter over an external inference server.
 *
 * Wire protocol (JSON, UTF-8):
 *   GET  /v1/meta                          -> {"vocab_size": int, "eos_id": int, "name": str}
 *   POST /v1/tokenize   {"text": str}      -> {"tokens": [int]}
 *   POST /v1/detokenize {"tokens": [int]}  -> {"text": str}
 *   POST /v1/logits     {"tokens": [int]}  -> {"log_probs": [float]}
 *
 * /v1/logits vectors are natural-log scores of length vocab_size; they may be
 * unnormalized (the decode loop normalizes). Transport failures retry with
 * exponential backoff up to kMaxRetries; non-2xx responses and length
 * mismatches do not retry.
 *
 * Timeouts: connect 5 s, read 120 s. The COIECD_ENDPOINT environment variable
 * overrides any configured endpoint URL.
 */

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "coiecd/errors.hpp"
#include "coiecd/model.hpp"

namespace coiecd::model {

inline constexpr int kMaxRetries = 3;
inline constexpr const char* kEndpointEnvVar = "COIECD_ENDPOINT";

/// Applies the environment override to a configured endpoint URL.
inline std::string resolve_endpoint(const std::string& configured) {
  if (const char* env = std::getenv(kEndpointEnvVar); env && *env) return env;
  return configured;
}

namespace detail {

/**
 * Runs `request` until it succeeds at the transport level, retrying up to
 * max_retries times with exponential backoff. Retries are counted into
 * `retries` (telemetry). Returns the final Result; throws TransportError when
 * every attempt fails to reach the server.
 */
template <typename RequestFn>
httplib::Result with_retries(RequestFn&& request, int max_retries,
                             std::chrono::milliseconds backoff_base,
                             std::atomic<long>& retries) {
  httplib::Error last = httplib::Error::Unknown;
  for (int attempt = 0; attempt <= max_retries; ++attempt) {
    if (attempt > 0) {
      ++retries;
      std::this_thread::sleep_for(backoff_base * (1L << (attempt - 1)));
    }
    httplib::Result res = request();
    if (res) return res;
    last = res.error();
  }
  throw TransportError("request failed after " + std::to_string(max_retries) +
                       " retries: " + httplib::to_string(last));
}

}  // namespace detail

struct HttpOptions {
  int pool_size = 1;
  std::chrono::milliseconds backoff_base{100};
  std::chrono::seconds connect_timeout{5};
  std::chrono::seconds read_timeout{120};
};

/**
 * HTTP-backed DualContextModel. Holds a pool of connections sized to the
 * expected worker count; each request uses one pooled client, so at most
 * pool_size requests are in flight at once.
 */
class HttpModel final : public DualContextModel {
public:
  using Options = HttpOptions;

  explicit HttpModel(const std::string& endpoint, Options options = Options{})
      : endpoint_(resolve_endpoint(endpoint)), options_(options) {
    if (options_.pool_size < 1) throw InvalidParameter("HttpModel: pool_size must be >= 1");
    for (int i = 0; i < options_.pool_size; ++i) clients_.push_back(make_client());
    handshake();
  }

  int vocab_size() const override { return vocab_size_; }
  TokenId eos_id() const override { return eos_id_; }
  std::string name() const override { return name_; }

  Logits next_logits(const std::vector<TokenId>& tokens) override {
    const nlohmann::json body = {{"tokens", tokens}};
    const nlohmann::json reply = post_json("/v1/logits", body);
    Logits out;
    try {
      out.values = reply.at("log_probs").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
      throw ProtocolError(std::string("/v1/logits: bad payload: ") + e.what());
    }
    if (out.values.size() != static_cast<std::size_t>(vocab_size_)) {
      throw ProtocolError("/v1/logits returned " + std::to_string(out.values.size()) +
                          " entries, expected vocab_size " + std::to_string(vocab_size_));
    }
    return out;
  }

  std::vector<TokenId> tokenize(const std::string& text) override {
    const nlohmann::json reply = post_json("/v1/tokenize", {{"text", text}});
    try {
      return reply.at("tokens").get<std::vector<TokenId>>();
    } catch (const nlohmann::json::exception& e) {
      throw ProtocolError(std::string("/v1/tokenize: bad payload: ") + e.what());
    }
  }

  std::string detokenize(const std::vector<TokenId>& tokens) override {
    const nlohmann::json reply = post_json("/v1/detokenize", {{"tokens", tokens}});
    try {
      return reply.at("text").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw ProtocolError(std::string("/v1/detokenize: bad payload: ") + e.what());
    }
  }

  /// Total transport-level retries performed so far (telemetry).
  long total_retries() const { return retries_.load(); }

  const std::string& endpoint() const { return endpoint_; }

private:
  class ClientLease {
  public:
    ClientLease(HttpModel& owner) : owner_(owner) {
      std::unique_lock<std::mutex> lock(owner_.pool_mu_);
      owner_.pool_cv_.wait(lock, [&] { return !owner_.clients_.empty(); });
      client_ = std::move(owner_.clients_.back());
      owner_.clients_.pop_back();
    }
    ~ClientLease() {
      std::lock_guard<std::mutex> lock(owner_.pool_mu_);
      owner_.clients_.push_back(std::move(client_));
      owner_.pool_cv_.notify_one();
    }
    httplib::Client& operator*() { return *client_; }

  private:
    HttpModel& owner_;
    std::unique_ptr<httplib::Client> client_;
  };

  std::unique_ptr<httplib::Client> make_client() {
    auto client = std::make_unique<httplib::Client>(endpoint_);
    client->set_connection_timeout(options_.connect_timeout);
    client->set_read_timeout(options_.read_timeout);
    return client;
  }

  nlohmann::json parse_reply(const httplib::Result& res, const std::string& path) {
    if (res->status < 200 || res->status >= 300) {
      throw ServerError(path + ": HTTP " + std::to_string(res->status) + ": " + res->body);
    }
    try {
      return nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
      throw ProtocolError(path + ": response is not JSON: " + e.what());
    }
  }

  nlohmann::json get_json(const std::string& path) {
    ClientLease client(*this);
    auto res = detail::with_retries([&] { return (*client).Get(path); }, kMaxRetries,
                                    options_.backoff_base, retries_);
    return parse_reply(res, path);
  }

  nlohmann::json post_json(const std::string& path, const nlohmann::json& body) {
    ClientLease client(*this);
    const std::string payload = body.dump();
    auto res = detail::with_retries(
        [&] { return (*client).Post(path, payload, "application/json"); }, kMaxRetries,
        options_.backoff_base, retries_);
    return parse_reply(res, path);
  }

  void handshake() {
    const nlohmann::json meta = get_json("/v1/meta");
    try {
      vocab_size_ = meta.at("vocab_size").get<int>();
      eos_id_ = meta.at("eos_id").get<TokenId>();
      name_ = meta.value("name", endpoint_);
    } catch (const nlohmann::json::exception& e) {
      throw ProtocolError(std::string("/v1/meta: bad payload: ") + e.what());
    }
    if (vocab_size_ < 1) throw ProtocolError("/v1/meta: vocab_size must be positive");
    if (eos_id_ < 0 || eos_id_ >= vocab_size_) throw ProtocolError("/v1/meta: eos_id out of range");
  }

  std::string endpoint_;
  Options options_;
  std::mutex pool_mu_;
  std::condition_variable pool_cv_;
  std::vector<std::unique_ptr<httplib::Client>> clients_;
  std::atomic<long> retries_{0};
  int vocab_size_ = 0;
  TokenId eos_id_ = 0;
  std::string name_;
};

}  // namespace coiecd::model
