#include "kgalign/service_client.hpp"

#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include <httplib.h>

#include "kgalign/binary_io.hpp"
#include "kgalign/error.hpp"
#include "kgalign/hash.hpp"
#include "kgalign/log.hpp"

namespace kgalign {
namespace {

class HttpTransport final : public Transport {
 public:
  HttpTransport(const std::string& base_url, std::chrono::milliseconds timeout, std::string bearer_token)
      : base_url_(base_url), timeout_(timeout), token_(std::move(bearer_token)) {}

  HttpResponse post(const std::string& path, const std::string& body) override {
    // httplib::Client is not safe for concurrent use; one per request.
    httplib::Client client(base_url_);
    if (!client.is_valid()) fail(ErrorCode::kServiceUnreachable, "invalid service url " + base_url_);
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(timeout_);
    const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(timeout_ - secs);
    client.set_connection_timeout(secs.count(), usecs.count());
    client.set_read_timeout(secs.count(), usecs.count());
    client.set_write_timeout(secs.count(), usecs.count());
    if (!token_.empty()) client.set_bearer_token_auth(token_);
    auto res = client.Post(path, body, "application/json");
    if (!res) {
      fail(ErrorCode::kServiceUnreachable,
           fmt::format("{}{}: {}", base_url_, path, httplib::to_string(res.error())));
    }
    return {res->status, res->body};
  }

 private:
  std::string base_url_;
  std::chrono::milliseconds timeout_;
  std::string token_;
};

}  // namespace

std::shared_ptr<Transport> make_http_transport(const std::string& base_url, std::chrono::milliseconds timeout,
                                               std::string bearer_token) {
  return std::make_shared<HttpTransport>(base_url, timeout, std::move(bearer_token));
}

ServiceClient::ServiceClient(std::shared_ptr<Transport> transport, int retries)
    : transport_(std::move(transport)), retries_(retries < 0 ? 0 : retries) {}

std::string ServiceClient::post(const std::string& path, const std::string& body) const {
  int last_status = 0;
  std::string last_error;
  for (int attempt = 0; attempt <= retries_; ++attempt) {
    try {
      auto res = transport_->post(path, body);
      if (res.status >= 200 && res.status < 300) return std::move(res.body);
      last_status = res.status;
      logger()->warn("service {} returned status {} (attempt {}/{})", path, res.status, attempt + 1,
                     retries_ + 1);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kServiceUnreachable) throw;
      last_error = e.what();
      logger()->warn("service {} unreachable (attempt {}/{})", path, attempt + 1, retries_ + 1);
    }
  }
  if (last_status != 0) {
    fail(ErrorCode::kServiceErrorStatus,
         fmt::format("{} returned status {} after {} attempts", path, last_status, retries_ + 1));
  }
  fail(ErrorCode::kServiceUnreachable, last_error);
}

ResponseCache::ResponseCache(std::filesystem::path dir) : dir_(std::move(dir)) {
  if (!dir_.empty()) std::filesystem::create_directories(dir_);
}

std::string ResponseCache::key_for(std::string_view request) { return sha256_hex(request); }

std::optional<std::string> ResponseCache::get(const std::string& key) const {
  if (!enabled()) return std::nullopt;
  const auto path = dir_ / key;
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

void ResponseCache::put(const std::string& key, std::string_view value) const {
  if (!enabled()) return;
  std::lock_guard lock(*write_mutex_);
  write_file_atomic(dir_ / key, value);
}

}  // namespace kgalign
