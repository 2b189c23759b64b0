#include <cstdlib>
#include <regex>
#include <thread>

#include "httplib.h"
#include "json.hpp"
#include "rfvla/errors.hpp"
#include "rfvla/teacher.hpp"

namespace rfvla::teacher {
namespace {

using Clock = std::chrono::steady_clock;
using std::chrono::milliseconds;

struct Endpoint {
  std::string origin;  // http://host:port
  std::string path;
};

Endpoint split_endpoint(const std::string& url) {
  static const std::regex kUrl(R"(^(http://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(url, m, kUrl))
    throw ConfigError("teacher endpoint must be an http:// URL, got '" + url + "'");
  return {m[1].str(), m[2].matched ? m[2].str() : "/"};
}

bool retryable(int status) { return status == 429 || status >= 500; }

}  // namespace

RemoteConfig RemoteConfig::from_env() {
  RemoteConfig c;
  if (const char* e = std::getenv("REFINEVLA_TEACHER_ENDPOINT")) c.endpoint = e;
  if (const char* t = std::getenv("REFINEVLA_TEACHER_TOKEN")) c.token = t;
  return c;
}

std::string annotate_remote(const RemoteConfig& config, const TeacherPrompt& prompt) {
  if (config.retries < 1) throw ConfigError("teacher retries must be at least 1");
  if (config.timeout <= milliseconds(0)) throw ConfigError("teacher timeout must be positive");
  const Endpoint ep = split_endpoint(config.endpoint);
  const auto deadline = Clock::now() + config.timeout;
  const std::string body = nlohmann::json{{"prompt", prompt.text}}.dump();

  std::string last_failure = "no attempt made";
  int attempts = 0;
  milliseconds backoff = config.backoff;
  while (attempts < config.retries) {
    const auto remaining = std::chrono::duration_cast<milliseconds>(deadline - Clock::now());
    if (remaining <= milliseconds(0)) break;
    ++attempts;

    httplib::Client client(ep.origin);
    client.set_connection_timeout(remaining);
    client.set_read_timeout(remaining);
    client.set_write_timeout(remaining);
    if (!config.token.empty()) client.set_bearer_token_auth(config.token);

    auto res = client.Post(ep.path, body, "application/json");
    if (!res) {
      last_failure = httplib::to_string(res.error());
    } else if (res->status >= 200 && res->status < 300) {
      nlohmann::json reply;
      try {
        reply = nlohmann::json::parse(res->body);
      } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("teacher reply is not JSON: ") + e.what());
      }
      if (!reply.is_object() || !reply.contains("text") || !reply["text"].is_string())
        throw FormatError("teacher reply lacks a string 'text' field");
      return reply["text"].get<std::string>();
    } else if (retryable(res->status)) {
      last_failure = "HTTP " + std::to_string(res->status);
    } else {
      throw RemoteError(res->status, "teacher endpoint answered HTTP " + std::to_string(res->status));
    }

    if (attempts < config.retries) {
      const auto left = std::chrono::duration_cast<milliseconds>(deadline - Clock::now());
      std::this_thread::sleep_for(std::min(backoff, std::max(left, milliseconds(0))));
      backoff *= 2;
    }
  }
  throw TransportError("teacher request failed after " + std::to_string(attempts) + " attempt" +
                       (attempts == 1 ? "" : "s") + ": " + last_failure);
}

RationaleRecord RemoteTeacher::annotate(const sim::Scene& scene, const sim::Task& task) const {
  const auto prompt = render_prompt(describe_scene(scene), task.instruction_text());
  return parse_and_validate(annotate_remote(config_, prompt), scene, vocab_);
}

}  // namespace rfvla::teacher
