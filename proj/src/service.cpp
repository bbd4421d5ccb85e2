#include "usam/service.hpp"

#include <chrono>
#include <span>

#include <httplib.h>
#include <openssl/evp.h>
#include <c10/util/Logging.h>

#include "usam/error.hpp"
#include "usam/image_io.hpp"
#include "usam/rle.hpp"

namespace usam {

namespace F = torch::nn::functional;

std::string base64_encode(std::span<const uint8_t> bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<size_t>(n));
  return out;
}

std::vector<uint8_t> base64_decode(const std::string& text) {
  std::string clean;
  clean.reserve(text.size());
  for (char ch : text) {
    if (!std::isspace(static_cast<unsigned char>(ch))) clean.push_back(ch);
  }
  if (clean.size() % 4 != 0) throw InvalidValue("base64 length is not a multiple of 4");
  std::vector<uint8_t> out(3 * clean.size() / 4);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(clean.data()),
                                static_cast<int>(clean.size()));
  if (n < 0) throw InvalidValue("malformed base64 data");
  size_t pad = 0;
  if (!clean.empty() && clean.back() == '=') ++pad;
  if (clean.size() > 1 && clean[clean.size() - 2] == '=') ++pad;
  out.resize(static_cast<size_t>(n) - pad);
  return out;
}

std::shared_ptr<const ServedModel> load_served_model(const std::filesystem::path& path) {
  auto ckpt = load_checkpoint(path);
  ckpt.model->eval();
  for (auto& p : ckpt.model->parameters()) p.set_requires_grad(false);
  auto served = std::make_shared<ServedModel>();
  served->model = ckpt.model;
  served->meta = ckpt.meta;
  served->path = path;
  return served;
}

SegmentationService::SegmentationService(ServiceOptions options) : options_(std::move(options)) {
  if (options_.data_dir) {
    data_ = read_dataset(*options_.data_dir);
    for (size_t i = 0; i < data_->manifest.pairs.size(); ++i) pair_index_[data_->manifest.pairs[i].key()] = i;
  }
}

void SegmentationService::set_model(std::shared_ptr<const ServedModel> model) {
  std::lock_guard lock(mutex_);
  model_ = std::move(model);
}

std::shared_ptr<const ServedModel> SegmentationService::snapshot() const {
  std::lock_guard lock(mutex_);
  return model_;
}

namespace {

ServiceResponse error(int status, const std::string& message) { return {status, {{"error", message}}}; }

struct BadRequest : Error {
  using Error::Error;
};

torch::Tensor image_from_png(const std::string& encoded, const json& options) {
  auto text = encoded;
  if (auto comma = text.find(','); text.starts_with("data:") && comma != std::string::npos) {
    text = text.substr(comma + 1);
  }
  GrayImage img;
  try {
    const auto bytes = base64_decode(text);
    img = decode_png(bytes);
  } catch (const Error& e) {
    throw BadRequest(std::string("image: ") + e.what());
  }
  auto raw = torch::from_blob(img.pixels.data(), {img.height, img.width}, torch::kUInt16)
                 .to(torch::kFloat32);
  if (options.contains("window")) {
    if (img.bit_depth != 16) throw BadRequest("a window needs a 16-bit image holding HU + 32768");
    Window w;
    try {
      w = Window::parse(options["window"].get<std::string>());
    } catch (const std::exception& e) {
      throw BadRequest(std::string("window: ") + e.what());
    }
    return window_normalize(raw - 32768.0, w);
  }
  return raw / static_cast<double>(img.max_value());
}

std::vector<PromptPoint> parse_points(const json& body, size_t max_points) {
  std::vector<PromptPoint> points;
  if (!body.contains("points") || body["points"].is_null()) return points;
  const auto& list = body["points"];
  if (!list.is_array()) throw BadRequest("points must be an array");
  if (list.size() > max_points) {
    throw BadRequest("at most " + std::to_string(max_points) + " points are allowed");
  }
  for (size_t i = 0; i < list.size(); ++i) {
    const auto& p = list[i];
    if (!p.is_object() || !p.contains("x") || !p.contains("y") || !p.contains("class_id") ||
        !p["x"].is_number() || !p["y"].is_number() || !p["class_id"].is_number_integer()) {
      throw BadRequest("point " + std::to_string(i) + " needs numeric x, y and integer class_id");
    }
    points.push_back({static_cast<int64_t>(std::floor(p["x"].get<double>())),
                      static_cast<int64_t>(std::floor(p["y"].get<double>())), p["class_id"].get<int64_t>()});
  }
  return points;
}

}  // namespace

ServiceResponse SegmentationService::segment(const std::string& request_body) const {
  const auto started = std::chrono::steady_clock::now();
  auto served = snapshot();
  if (!served) return error(503, "no model loaded");

  json body;
  try {
    body = json::parse(request_body);
  } catch (const json::exception& e) {
    return error(400, std::string("malformed JSON: ") + e.what());
  }
  if (!body.is_object()) return error(400, "request must be a JSON object");

  const auto& config = served->meta.model;
  torch::Tensor image;
  PromptSet prompts;
  json options = body.value("options", json::object());
  try {
    if (!options.is_object()) throw BadRequest("options must be an object");
    if (body.contains("image") == body.contains("pair")) {
      throw BadRequest("give exactly one of 'image' (base64 PNG) or 'pair' (dataset key)");
    }
    if (body.contains("image")) {
      if (!body["image"].is_string()) throw BadRequest("image must be a base64 string");
      image = image_from_png(body["image"].get<std::string>(), options);
    } else {
      if (!data_) throw BadRequest("pair references need the service to be started with a dataset");
      if (!body["pair"].is_string()) throw BadRequest("pair must be a string key");
      auto it = pair_index_.find(body["pair"].get<std::string>());
      if (it == pair_index_.end()) throw BadRequest("unknown pair '" + body["pair"].get<std::string>() + "'");
      image = data_->pairs[it->second].image;
    }
    prompts.points = parse_points(body, options_.max_points);
    prompts.validate(image.size(0), image.size(1), config.num_classes);
  } catch (const Error& e) {
    return error(400, e.what());
  } catch (const json::exception& e) {
    return error(400, e.what());
  }

  const int64_t h = image.size(0), w = image.size(1), s = config.image_size;
  auto x = resize_image(image, s, s).view({1, 1, s, s});
  auto scaled = rescale_prompts(prompts, h, w, s, s);

  torch::Tensor logits;
  {
    torch::NoGradGuard no_grad;
    USam model = served->model;
    logits = model->forward(x, {scaled}).logits;
  }
  auto mask = resize_label(predict_mask(logits)[0], h, w);

  json counts = json::array();
  for (int64_t c = 0; c < config.num_classes; ++c) counts.push_back(mask.eq(c).sum().item<int64_t>());
  json response = {{"height", h},
                   {"width", w},
                   {"mask", {{"encoding", "rle"}, {"order", "row-major"}, {"counts", rle_encode(mask)}}},
                   {"class_counts", counts},
                   {"class_names", served->meta.class_names},
                   {"step", served->meta.step},
                   {"config_tag", served->meta.tag}};
  if (options.value("return_logits", false)) {
    auto l = logits[0].to(torch::kFloat32).contiguous();
    response["logits"] = {
        {"shape", l.sizes().vec()},
        {"dtype", "float32"},
        {"data", base64_encode({static_cast<const uint8_t*>(l.data_ptr()),
                                static_cast<size_t>(l.numel() * l.element_size())})}};
  }
  response["latency_ms"] =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
  return {200, response};
}

ServiceResponse SegmentationService::health() const {
  auto served = snapshot();
  json body = {{"status", "ok"}, {"model_loaded", served != nullptr}};
  body["config_tag"] = served ? json(served->meta.tag) : json(nullptr);
  if (served) body["step"] = served->meta.step;
  return {200, body};
}

ServiceResponse SegmentationService::load_model(const std::string& request_body) {
  std::string path;
  try {
    auto body = json::parse(request_body);
    path = body.at("path").get<std::string>();
  } catch (const json::exception& e) {
    return error(400, std::string("expected {\"path\": \"...\"}: ") + e.what());
  }
  try {
    set_model(load_served_model(path));
  } catch (const std::exception& e) {
    auto current = snapshot();
    auto resp = error(422, e.what());
    resp.body["config_tag"] = current ? json(current->meta.tag) : json(nullptr);
    return resp;
  }
  LOG(INFO) << "serving " << path << " (" << snapshot()->meta.tag << ")";
  return health();
}

struct HttpServer::Impl {
  explicit Impl(SegmentationService& s) : service(s) {}
  SegmentationService& service;
  httplib::Server server;
};

HttpServer::HttpServer(SegmentationService& service) : impl_(std::make_unique<Impl>(service)) {
  auto& srv = impl_->server;
  const std::string origin = service.options().cors_origin;
  srv.set_default_headers({{"Access-Control-Allow-Origin", origin},
                           {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                           {"Access-Control-Allow-Headers", "Content-Type"}});
  auto reply = [](httplib::Response& res, const ServiceResponse& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  srv.Options(R"(/v1/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  srv.Post("/v1/segment", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, impl_->service.segment(req.body));
  });
  srv.Get("/v1/health", [this, reply](const httplib::Request&, httplib::Response& res) {
    reply(res, impl_->service.health());
  });
  srv.Post("/v1/model", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, impl_->service.load_model(req.body));
  });
  srv.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string what = "internal error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      what = e.what();
    } catch (...) {
    }
    res.status = 500;
    res.set_content(json{{"error", what}}.dump(), "application/json");
  });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  const int bound = port == 0 ? impl_->server.bind_to_any_port(host) : (impl_->server.bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw IoError("cannot bind " + host + ":" + std::to_string(port));
  return bound;
}

void HttpServer::listen() { impl_->server.listen_after_bind(); }

void HttpServer::stop() {
  if (impl_) impl_->server.stop();
}

}  // namespace usam
