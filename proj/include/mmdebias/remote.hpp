#pragma once

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <httplib.h>

#include "mmdebias/backend.hpp"
#include "mmdebias/core.hpp"
#include "mmdebias/errors.hpp"
#include "mmdebias/io.hpp"

namespace mmdebias {

struct HttpResponse {
  int status = 0;  // 0 means the request never completed
  std::string body;
};

// Seam between the probing logic and the wire. Tests substitute a replay
// transport; production uses HTTP.
class Transport {
public:
  virtual ~Transport() = default;
  virtual HttpResponse post(const std::string& path, const std::string& body,
                            const std::vector<std::pair<std::string, std::string>>& headers) = 0;
};

class HttplibTransport : public Transport {
public:
  HttplibTransport(std::string base_url, int timeout_seconds)
      : base_url_(std::move(base_url)), timeout_seconds_(timeout_seconds) {}

  HttpResponse post(const std::string& path, const std::string& body,
                    const std::vector<std::pair<std::string, std::string>>& headers) override {
    httplib::Client client(base_url_);
    client.set_connection_timeout(timeout_seconds_, 0);
    client.set_read_timeout(timeout_seconds_, 0);
    httplib::Headers h;
    for (const auto& [k, v] : headers) h.emplace(k, v);
    auto res = client.Post(path, h, body, "application/json");
    if (!res) return {0, httplib::to_string(res.error())};
    return {res->status, res->body};
  }

private:
  std::string base_url_;
  int timeout_seconds_;
};

// Replays recorded exchanges in order. With strict matching on, a request
// whose body hash differs from the recording fails loudly.
class ReplayTransport : public Transport {
public:
  struct Exchange {
    std::string request_fingerprint;  // empty = match anything
    HttpResponse response;
  };

  explicit ReplayTransport(std::vector<Exchange> exchanges, bool strict = false)
      : exchanges_(std::move(exchanges)), strict_(strict) {}

  static ReplayTransport from_file(const std::filesystem::path& path, bool strict = false) {
    LineRecordFile f = read_line_records(path, "replay");
    std::vector<Exchange> ex;
    for (const auto& j : f.records) {
      Exchange e;
      e.request_fingerprint = j.value("request_fingerprint", std::string());
      e.response.status = require_field<int>(j, "status", path.string());
      e.response.body = require_field<std::string>(j, "body", path.string());
      ex.push_back(std::move(e));
    }
    return ReplayTransport(std::move(ex), strict);
  }

  HttpResponse post(const std::string&, const std::string& body,
                    const std::vector<std::pair<std::string, std::string>>&) override {
    std::lock_guard<std::mutex> lock(mu_);
    if (next_ >= exchanges_.size())
      throw BackendError("replay transport exhausted after " + std::to_string(next_) +
                         " exchanges");
    const Exchange& e = exchanges_[next_++];
    if (strict_ && !e.request_fingerprint.empty() &&
        e.request_fingerprint != hex64(fnv1a64(body)))
      throw BackendError("replay transport: request does not match the recording");
    return e.response;
  }

private:
  std::vector<Exchange> exchanges_;
  bool strict_;
  std::size_t next_ = 0;
  std::mutex mu_;
};

struct RemoteConfig {
  std::string base_url = "http://localhost:8000";
  std::string chat_path = "/v1/chat/completions";
  std::string model = "local";
  std::vector<std::string> verbalizers;  // one answer token per class, in class order
  std::string prompt_version = "v1";
  std::string api_key_env = "MMDEBIAS_API_KEY";
  bool send_images = false;
  int timeout_seconds = 30;
  int max_retries = 3;
  int backoff_ms = 250;  // doubles per retry
  double floor = 1e-6;
  int top_logprobs = 20;
};

namespace detail {

inline std::string base64_encode(const std::string& bytes) {
  static const char* alphabet =
      "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  while (i + 2 < bytes.size()) {
    unsigned v = (static_cast<unsigned char>(bytes[i]) << 16) |
                 (static_cast<unsigned char>(bytes[i + 1]) << 8) |
                 static_cast<unsigned char>(bytes[i + 2]);
    out += alphabet[(v >> 18) & 63];
    out += alphabet[(v >> 12) & 63];
    out += alphabet[(v >> 6) & 63];
    out += alphabet[v & 63];
    i += 3;
  }
  std::size_t rest = bytes.size() - i;
  if (rest == 1) {
    unsigned v = static_cast<unsigned char>(bytes[i]) << 16;
    out += alphabet[(v >> 18) & 63];
    out += alphabet[(v >> 12) & 63];
    out += "==";
  } else if (rest == 2) {
    unsigned v = (static_cast<unsigned char>(bytes[i]) << 16) |
                 (static_cast<unsigned char>(bytes[i + 1]) << 8);
    out += alphabet[(v >> 18) & 63];
    out += alphabet[(v >> 12) & 63];
    out += alphabet[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

inline std::string trim_token(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\n')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\n')) --e;
  return s.substr(b, e - b);
}

inline bool iequals(const std::string& a, const std::string& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    char x = a[i], y = b[i];
    if (x >= 'A' && x <= 'Z') x = static_cast<char>(x - 'A' + 'a');
    if (y >= 'A' && y <= 'Z') y = static_cast<char>(y - 'A' + 'a');
    if (x != y) return false;
  }
  return true;
}

}  // namespace detail

// Extracts per-class probabilities from a chat-completions response: reads
// the top-logprob candidates of the first generated token, keeps verbalizer
// tokens, floors missing classes, renormalizes.
inline ProbVector parse_verbalizer_scores(const std::string& body,
                                          const std::vector<std::string>& verbalizers,
                                          double floor) {
  json j = json::parse(body, nullptr, false);
  if (j.is_discarded()) throw ProtocolError("remote reply is not JSON", body);
  const json* top = nullptr;
  try {
    const json& content = j.at("choices").at(0).at("logprobs").at("content");
    if (!content.is_array() || content.empty())
      throw ProtocolError("remote reply has no logprob content", body);
    top = &content.at(0).at("top_logprobs");
  } catch (const json::exception&) {
    throw ProtocolError("remote reply lacks first-token top_logprobs", body);
  }
  if (!top->is_array() || top->empty())
    throw ProtocolError("remote reply top_logprobs empty", body);

  std::vector<double> probs(verbalizers.size(), -1.0);
  bool any = false;
  for (const auto& cand : *top) {
    if (!cand.contains("token") || !cand.contains("logprob")) continue;
    std::string tok = detail::trim_token(cand["token"].get<std::string>());
    double lp = cand["logprob"].get<double>();
    for (std::size_t c = 0; c < verbalizers.size(); ++c) {
      if (!detail::iequals(tok, verbalizers[c])) continue;
      double p = std::exp(lp);
      if (p > probs[c]) probs[c] = p;
      any = true;
    }
  }
  if (!any) throw ProtocolError("no verbalizer token among logprob candidates", body);
  double sum = 0.0;
  for (double& p : probs) {
    if (p < 0.0) p = floor;
    sum += p;
  }
  for (double& p : probs) p /= sum;
  return ProbVector(std::move(probs), true);
}

// One probing call: classification prompt, deterministic decoding, one token.
// Retries transport failures and server errors with doubling backoff, then
// gives up with BackendError.
inline ProbVector remote_probe(Transport& transport, const RemoteConfig& cfg,
                               const json& messages, const ClassSpace& cs) {
  if (cfg.verbalizers.size() != cs.k())
    throw ConfigError("remote config: need one verbalizer per class");
  json req;
  req["model"] = cfg.model;
  req["messages"] = messages;
  req["temperature"] = 0;
  req["max_tokens"] = 1;
  req["logprobs"] = true;
  req["top_logprobs"] = cfg.top_logprobs;

  std::vector<std::pair<std::string, std::string>> headers;
  if (const char* key = std::getenv(cfg.api_key_env.c_str()); key && *key)
    headers.emplace_back("Authorization", std::string("Bearer ") + key);

  HttpResponse res;
  int attempts = cfg.max_retries + 1;
  for (int attempt = 0; attempt < attempts; ++attempt) {
    if (attempt > 0 && cfg.backoff_ms > 0)
      std::this_thread::sleep_for(std::chrono::milliseconds(cfg.backoff_ms << (attempt - 1)));
    res = transport.post(cfg.chat_path, req.dump(), headers);
    if (res.status >= 200 && res.status < 300) break;
    if (res.status >= 400 && res.status < 500)
      throw BackendError("remote endpoint rejected the request (HTTP " +
                         std::to_string(res.status) + "): " + res.body);
  }
  if (res.status < 200 || res.status >= 300)
    throw BackendError("remote endpoint unreachable after " + std::to_string(attempts) +
                       " attempts (last status " + std::to_string(res.status) + ")");
  return parse_verbalizer_scores(res.body, cfg.verbalizers, cfg.floor);
}

// Remote predictor speaking the OpenAI-compatible chat protocol. The prompt
// names the classes and their answer tokens and carries the view's text; when
// image sending is on, the view's image rides along as a data URL.
class RemoteBackend : public Predictor {
public:
  RemoteBackend(RemoteConfig cfg, ClassSpace cs, std::shared_ptr<Transport> transport)
      : cfg_(std::move(cfg)), class_space_(std::move(cs)), transport_(std::move(transport)) {
    if (cfg_.verbalizers.size() != class_space_.k())
      throw ConfigError("remote config: need one verbalizer per class");
    id_ = "remote:" + cfg_.model;
  }

  const std::string& id() const override { return id_; }
  const ClassSpace& class_space() const override { return class_space_; }
  const RemoteConfig& config() const { return cfg_; }

  std::string instruction() const {
    std::string s = "Classify the input into exactly one of these classes:\n";
    for (std::size_t c = 0; c < class_space_.k(); ++c)
      s += "- " + class_space_.label(c) + " (answer with: " + cfg_.verbalizers[c] + ")\n";
    s += "Reply with the single answer token and nothing else.\n";
    return s;
  }

  json build_messages(const SampleView& view) const {
    std::string text = view_text(view);
    std::string user = instruction() + "\nText input: ";
    user += text.empty() ? "(none)" : text;

    json messages = json::array();
    json msg;
    msg["role"] = "user";
    if (cfg_.send_images && view.image_variant != Variant::Masked && view.base) {
      std::string image_path = view.image_variant == Variant::SpuriousOnly
                                   ? view.spurious_image_path
                                   : view.base->image_path.value_or("");
      if (!image_path.empty()) {
        json parts = json::array();
        json text_part;
        text_part["type"] = "text";
        text_part["text"] = user;
        parts.push_back(std::move(text_part));
        std::string bytes = read_text_file(image_path);
        std::string mime = bytes.size() > 1 && bytes[0] == '\xff' ? "image/jpeg" : "image/png";
        json img_part;
        img_part["type"] = "image_url";
        img_part["image_url"]["url"] =
            "data:" + mime + ";base64," + detail::base64_encode(bytes);
        parts.push_back(std::move(img_part));
        msg["content"] = std::move(parts);
        messages.push_back(std::move(msg));
        return messages;
      }
    }
    msg["content"] = user;
    messages.push_back(std::move(msg));
    return messages;
  }

  ProbVector predict(const SampleView& view) const override {
    return remote_probe(*transport_, cfg_, build_messages(view), class_space_);
  }

private:
  RemoteConfig cfg_;
  ClassSpace class_space_;
  std::shared_ptr<Transport> transport_;
  std::string id_;
};

}  // namespace mmdebias
