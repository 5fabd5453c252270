#pragma once

#include <chrono>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>

namespace kgalign {

struct HttpResponse {
  int status = 0;
  std::string body;
};

// POSTs a JSON body. Implementations throw Error(kServiceUnreachable) when no
// response arrives at all.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual HttpResponse post(const std::string& path, const std::string& body) = 0;
};

// cpp-httplib backed transport; `base_url` is "http://host:port". A
// non-empty token is sent as "Authorization: Bearer <token>".
std::shared_ptr<Transport> make_http_transport(const std::string& base_url, std::chrono::milliseconds timeout,
                                               std::string bearer_token = {});

// Retries failed requests `retries` times (so retries=1 means two attempts).
class ServiceClient {
 public:
  ServiceClient(std::shared_ptr<Transport> transport, int retries);

  // Returns the body of the first 2xx response.
  std::string post(const std::string& path, const std::string& body) const;

 private:
  std::shared_ptr<Transport> transport_;
  int retries_;
};

// One file per request hash under `dir`. Concurrent readers; writers are
// serialized and publish by atomic rename. A default-constructed cache is
// disabled.
class ResponseCache {
 public:
  ResponseCache() = default;
  explicit ResponseCache(std::filesystem::path dir);

  bool enabled() const { return !dir_.empty(); }

  static std::string key_for(std::string_view request);

  std::optional<std::string> get(const std::string& key) const;
  void put(const std::string& key, std::string_view value) const;

 private:
  std::filesystem::path dir_;
  mutable std::shared_ptr<std::mutex> write_mutex_ = std::make_shared<std::mutex>();
};

}  // namespace kgalign
