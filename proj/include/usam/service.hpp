#pragma once

#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>

#include "usam/checkpoint.hpp"
#include "usam/config.hpp"
#include "usam/data.hpp"

namespace usam {

std::string base64_encode(std::span<const uint8_t> bytes);
/// Throws InvalidValue on malformed input.
std::vector<uint8_t> base64_decode(const std::string& text);

/// An immutable loaded model. Requests hold a shared_ptr for their whole
/// lifetime, so replacing the served model never affects requests in flight.
struct ServedModel {
  USam model{nullptr};
  CheckpointMeta meta;
  std::filesystem::path path;
};

/// Loads a checkpoint for serving (eval mode, gradients disabled).
std::shared_ptr<const ServedModel> load_served_model(const std::filesystem::path& path);

struct ServiceResponse {
  int status = 200;
  json body;
};

struct ServiceOptions {
  std::optional<std::filesystem::path> data_dir;  // enables {"pair": key} requests
  std::string cors_origin = "*";
  size_t max_points = 64;
};

/// Request handling independent of the HTTP transport.
class SegmentationService {
 public:
  explicit SegmentationService(ServiceOptions options = {});

  ServiceResponse segment(const std::string& request_body) const;
  ServiceResponse health() const;
  /// Body {"path": "..."}. Keeps the current model on failure (422).
  ServiceResponse load_model(const std::string& request_body);

  void set_model(std::shared_ptr<const ServedModel> model);
  std::shared_ptr<const ServedModel> snapshot() const;
  const ServiceOptions& options() const { return options_; }

 private:
  ServiceOptions options_;
  mutable std::mutex mutex_;
  std::shared_ptr<const ServedModel> model_;
  std::optional<Dataset> data_;
  std::unordered_map<std::string, size_t> pair_index_;
};

/// HTTP front end: POST /v1/segment, GET /v1/health, POST /v1/model.
class HttpServer {
 public:
  explicit HttpServer(SegmentationService& service);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  /// Binds (port 0 picks a free port) and returns the bound port.
  int bind(const std::string& host, int port);
  /// Serves until stop(); blocks the calling thread.
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace usam
