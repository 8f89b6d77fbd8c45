#include "sp3d/service.hpp"

#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstring>
#include <fstream>
#include <regex>

#include "httplib.h"
#include "json.hpp"
#include "sp3d/error.hpp"
#include "sp3d/semantics.hpp"

namespace sp3d {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct HttpError : std::runtime_error {
  int status;
  std::string code;
  HttpError(int s, std::string c, const std::string& msg) : std::runtime_error(msg), status(s), code(std::move(c)) {}
};

struct Cancelled : std::runtime_error {
  Cancelled() : std::runtime_error("cancelled") {}
};

void send_json(httplib::Response& res, const json& body, int status = 200) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message) {
  send_json(res, {{"code", code}, {"message", message}}, status);
}

double parse_scale(const std::string& text) {
  if (text.empty()) throw HttpError(422, "invalid_scale", "missing scale");
  char* end = nullptr;
  double s = std::strtod(text.c_str(), &end);
  if (end == text.c_str() || *end != '\0' || !std::isfinite(s)) throw HttpError(422, "invalid_scale", "scale is not a number");
  if (s < 0.0) throw HttpError(422, "invalid_scale", "scale must be >= 0");
  return s;
}

double json_scale(const json& body) {
  if (!body.contains("scale") || !body["scale"].is_number()) throw HttpError(422, "invalid_scale", "scale must be a number");
  double s = body["scale"].get<double>();
  if (!std::isfinite(s) || s < 0.0) throw HttpError(422, "invalid_scale", "scale must be >= 0");
  return s;
}

Vec3 json_vec(const json& body, const char* key) {
  const auto it = body.find(key);
  if (it == body.end() || !it->is_array() || it->size() != 3)
    throw HttpError(422, "invalid_ray", std::string(key) + " must be an array of 3 numbers");
  Vec3 v;
  for (std::size_t i = 0; i < 3; ++i) {
    if (!(*it)[i].is_number()) throw HttpError(422, "invalid_ray", std::string(key) + " must be an array of 3 numbers");
    v[i] = (*it)[i].get<double>();
    if (!std::isfinite(v[i])) throw HttpError(422, "invalid_ray", std::string(key) + " must be finite");
  }
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------

class Session {
 public:
  enum class Status { Idle, Fitting, Ready, Failed };

  Session(std::string id, fs::path dir, const ServiceOptions& options, const Backbone& backbone)
      : id_(std::move(id)), dir_(std::move(dir)), options_(options), backbone_(backbone) {
    if (has_field(dir_)) status_ = Status::Ready;
  }

  ~Session() {
    cancel_ = true;
    if (fit_thread_.joinable()) fit_thread_.join();
  }

  const std::string& id() const { return id_; }

  json status_json() {
    std::lock_guard lock(mu_);
    static const char* names[] = {"idle", "fitting", "ready", "failed"};
    json j{{"id", id_},
           {"status", names[static_cast<int>(status_)]},
           {"progress", {{"iteration", iteration_}, {"iterations", options_.config.fit.iterations}}}};
    if (status_ == Status::Fitting || status_ == Status::Ready) j["loss"] = loss_;
    if (status_ == Status::Failed) j["error"] = error_;
    return j;
  }

  std::shared_ptr<const ObjectData> object() {
    std::lock_guard lock(load_mu_);
    if (!object_) object_ = std::make_shared<const ObjectData>(load_object(dir_));
    return object_;
  }

  void start_fit() {
    std::lock_guard lock(mu_);
    if (status_ == Status::Fitting) throw HttpError(409, "fit_running", "a fit is already running for " + id_);
    auto obj = object();
    if (obj->manifest.mask_levels.empty()) throw HttpError(422, "no_masks", "no mask maps for " + id_);
    if (fit_thread_.joinable()) fit_thread_.join();
    status_ = Status::Fitting;
    iteration_ = 0;
    loss_ = 0.0;
    error_.clear();
    fit_thread_ = std::thread([this, obj] { run_fit(obj); });
  }

  void wait_idle() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return status_ != Status::Fitting; });
  }

  std::shared_ptr<const Segmentation> segmentation(double scale) {
    auto key = std::llround(scale / Service::kScaleStep);
    auto state = ready_state();
    std::lock_guard lock(cache_mu_);
    if (state.generation != cache_generation_) {
      cache_.clear();
      cache_generation_ = state.generation;
    }
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;
    try {
      auto seg = std::make_shared<const Segmentation>(
          segment_at_scale(*state.field, *state.inputs, scale, options_.config.cluster));
      cache_.emplace(key, seg);
      return seg;
    } catch (const ComputeError& e) {
      throw HttpError(422, "no_clusters", e.what());
    }
  }

  fs::path dir() const { return dir_; }

 private:
  struct ReadyState {
    std::shared_ptr<const GroupingField> field;
    std::shared_ptr<const FieldInputs> inputs;
    std::uint64_t generation = 0;
  };

  ReadyState ready_state() {
    std::lock_guard lock(mu_);
    if (status_ == Status::Fitting) throw HttpError(503, "fitting", "fit in progress for " + id_);
    if (status_ != Status::Ready) throw HttpError(409, "not_fitted", "field not fitted for " + id_);
    if (!field_) {
      auto field = load_field(field_path(dir_));
      auto obj = object();
      inputs_ = std::make_shared<const FieldInputs>(field_inputs(encode_points(backbone_, obj->cloud), obj->cloud, field.config));
      field_ = std::make_shared<const GroupingField>(std::move(field));
    }
    return {field_, inputs_, generation_};
  }

  void run_fit(std::shared_ptr<const ObjectData> obj) {
    try {
      auto result = fit_object(*obj, backbone_, options_.backbone, options_.config, [&](const FitStats& s) {
        if (cancel_) throw Cancelled();
        std::lock_guard lock(mu_);
        iteration_ = s.iteration + 1;
        loss_ = s.loss;
      });
      auto inputs = std::make_shared<const FieldInputs>(
          field_inputs(encode_points(backbone_, obj->cloud), obj->cloud, result.field.config));
      std::lock_guard lock(mu_);
      field_ = std::make_shared<const GroupingField>(std::move(result.field));
      inputs_ = std::move(inputs);
      ++generation_;
      status_ = Status::Ready;
    } catch (const std::exception& e) {
      std::lock_guard lock(mu_);
      status_ = Status::Failed;
      error_ = e.what();
    }
    cv_.notify_all();
  }

  std::string id_;
  fs::path dir_;
  const ServiceOptions& options_;
  const Backbone& backbone_;

  std::mutex mu_;  // status, progress, field
  std::condition_variable cv_;
  Status status_ = Status::Idle;
  int iteration_ = 0;
  double loss_ = 0.0;
  std::string error_;
  std::shared_ptr<const GroupingField> field_;
  std::shared_ptr<const FieldInputs> inputs_;
  std::uint64_t generation_ = 0;
  std::atomic<bool> cancel_{false};
  std::thread fit_thread_;

  std::mutex load_mu_;
  std::shared_ptr<const ObjectData> object_;

  std::mutex cache_mu_;
  std::uint64_t cache_generation_ = 0;
  std::map<long long, std::shared_ptr<const Segmentation>> cache_;
};

// ---------------------------------------------------------------------------

Service::Service(ServiceOptions options) : options_(std::move(options)), server_(std::make_unique<httplib::Server>()) {
  if (options_.backbone.empty() || !fs::exists(options_.backbone))
    throw InvalidArgument("backbone checkpoint not found: " + options_.backbone.string());
  backbone_ = load_backbone(options_.backbone);
  fs::create_directories(options_.data_dir);
  for (const auto& dir : list_objects(options_.data_dir)) add_session(dir);
  routes();
}

Service::~Service() {
  stop();
  std::lock_guard lock(mu_);
  sessions_.clear();
}

double Service::quantize_scale(double scale) { return static_cast<double>(std::llround(scale / kScaleStep)) * kScaleStep; }

std::shared_ptr<Session> Service::add_session(const fs::path& dir) {
  auto id = dir.filename().string();
  auto s = std::make_shared<Session>(id, dir, options_, backbone_);
  sessions_[id] = s;
  return s;
}

std::shared_ptr<Session> Service::find(const std::string& id) {
  std::lock_guard lock(mu_);
  auto it = sessions_.find(id);
  if (it == sessions_.end()) throw HttpError(404, "not_found", "unknown object '" + id + "'");
  return it->second;
}

int Service::start(const std::string& host, int port) {
  int bound = port == 0 ? server_->bind_to_any_port(host) : (server_->bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw ComputeError("cannot bind " + host + ":" + std::to_string(port));
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return bound;
}

void Service::listen(const std::string& host, int port) {
  if (!server_->listen(host, port)) throw ComputeError("cannot listen on " + host + ":" + std::to_string(port));
}

void Service::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

void Service::request_stop() {
  if (server_) server_->stop();
}

void Service::wait_stopped() {
  if (thread_.joinable()) thread_.join();
}

void Service::wait_idle() {
  std::vector<std::shared_ptr<Session>> all;
  {
    std::lock_guard lock(mu_);
    for (auto& [id, s] : sessions_) all.push_back(s);
  }
  for (auto& s : all) s->wait_idle();
}

void Service::routes() {
  auto& srv = *server_;

  srv.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    try {
      std::rethrow_exception(ep);
    } catch (const HttpError& e) {
      send_error(res, e.status, e.code, e.what());
    } catch (const InvalidArgument& e) {
      send_error(res, 422, "invalid_argument", e.what());
    } catch (const FormatError& e) {
      send_error(res, 422, "format_error", e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, "internal", e.what());
    }
  });
  srv.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) send_error(res, res.status, res.status == 404 ? "not_found" : "error", httplib::status_message(res.status));
  });

  srv.Get("/api/objects", [this](const httplib::Request&, httplib::Response& res) {
    json list = json::array();
    std::vector<std::shared_ptr<Session>> all;
    {
      std::lock_guard lock(mu_);
      for (auto& [id, s] : sessions_) all.push_back(s);
    }
    for (auto& s : all) {
      auto st = s->status_json();
      list.push_back({{"id", s->id()}, {"status", st["status"]}, {"category", read_object_meta(s->dir()).category}});
    }
    send_json(res, {{"objects", list}});
  });

  srv.Post("/api/objects", [this](const httplib::Request& req, httplib::Response& res) {
    static const std::regex id_re("^[A-Za-z0-9_-]{1,64}$");
    std::string format = req.has_param("format") ? req.get_param_value("format") : "ply";
    if (format != "ply" && format != "obj") throw HttpError(422, "invalid_format", "format must be ply or obj");
    if (req.body.empty()) throw HttpError(422, "empty_body", "request body must be a mesh file");
    std::string id;
    {
      std::lock_guard lock(mu_);
      if (req.has_param("name")) {
        id = req.get_param_value("name");
        if (!std::regex_match(id, id_re)) throw HttpError(422, "invalid_name", "name must match [A-Za-z0-9_-]{1,64}");
        if (sessions_.count(id)) throw HttpError(409, "exists", "object '" + id + "' already exists");
      } else {
        for (int n = static_cast<int>(sessions_.size());; ++n)
          if (!sessions_.count(id = "object_" + std::to_string(n))) break;
      }
    }
    auto dir = options_.data_dir / id;
    auto staging = options_.data_dir / (".upload_" + id + "." + format);
    {
      std::ofstream f(staging, std::ios::binary);
      f.write(req.body.data(), static_cast<std::streamsize>(req.body.size()));
    }
    TriangleMesh mesh;
    try {
      mesh = normalize_unit(load_mesh(staging)).first;
    } catch (...) {
      fs::remove(staging);
      throw;
    }
    fs::remove(staging);
    fs::create_directories(dir);
    save_ply(mesh, dir / "mesh.ply");
    write_object_meta(dir, {req.has_param("category") ? req.get_param_value("category") : "uploaded", std::nullopt, 0});
    auto manifest = export_views(dir, options_.config);
    {
      std::lock_guard lock(mu_);
      add_session(dir);
    }
    send_json(res, {{"id", id}, {"faces", mesh.num_faces()}, {"points", manifest.points}, {"views", manifest.cameras.size()}},
              201);
  });

  srv.Post(R"(/api/objects/([^/]+)/fit)", [this](const httplib::Request& req, httplib::Response& res) {
    auto s = find(req.matches[1]);
    s->start_fit();
    send_json(res, s->status_json(), 202);
  });

  srv.Get(R"(/api/objects/([^/]+)/status)", [this](const httplib::Request& req, httplib::Response& res) {
    send_json(res, find(req.matches[1])->status_json());
  });

  srv.Get(R"(/api/objects/([^/]+)/cloud)", [this](const httplib::Request& req, httplib::Response& res) {
    auto obj = find(req.matches[1])->object();
    const auto& cloud = obj->cloud;
    auto n = static_cast<std::uint32_t>(cloud.size());
    std::string body(4 + 12 * static_cast<std::size_t>(n) + 3 * static_cast<std::size_t>(n), '\0');
    char* p = body.data();
    std::memcpy(p, &n, 4);
    p += 4;
    for (const auto& v : cloud.points) {
      float xyz[3] = {static_cast<float>(v.x), static_cast<float>(v.y), static_cast<float>(v.z)};
      std::memcpy(p, xyz, 12);
      p += 12;
    }
    for (const auto& c : cloud.colors)
      for (int k = 0; k < 3; ++k)
        *p++ = static_cast<char>(static_cast<std::uint8_t>(std::lround(std::clamp(c[k], 0.0, 1.0) * 255.0)));
    res.set_content(body, "application/octet-stream");
  });

  srv.Get(R"(/api/objects/([^/]+)/segments)", [this](const httplib::Request& req, httplib::Response& res) {
    auto s = find(req.matches[1]);
    double scale = quantize_scale(parse_scale(req.get_param_value("scale")));
    auto seg = s->segmentation(scale);
    send_json(res, {{"scale", scale},
                    {"num_parts", seg->num_parts()},
                    {"labels", seg->labels},
                    {"counts", seg->counts},
                    {"confidences", seg->confidence}});
  });

  srv.Post(R"(/api/objects/([^/]+)/click)", [this](const httplib::Request& req, httplib::Response& res) {
    auto s = find(req.matches[1]);
    auto body = json::parse(req.body, nullptr, false);
    if (body.is_discarded() || !body.is_object()) throw HttpError(422, "invalid_json", "body must be a JSON object");
    double scale = quantize_scale(json_scale(body));
    Click click;
    if (body.contains("point")) {
      click.point = json_vec(body, "point");
    } else {
      click.origin = json_vec(body, "origin");
      click.direction = json_vec(body, "direction");
      if (norm(click.direction) == 0.0) throw HttpError(422, "invalid_ray", "direction must be nonzero");
    }
    auto seg = s->segmentation(scale);
    auto obj = s->object();
    std::uint32_t point = 0;
    try {
      point = resolve_click(click, obj->cloud, obj->mesh);
    } catch (const InvalidArgument& e) {
      throw HttpError(422, "invalid_ray", e.what());
    }
    auto hit = click_segment(*seg, point);
    send_json(res, {{"scale", scale}, {"point", hit.point}, {"part", hit.part}, {"points", hit.points}});
  });

  srv.Get(R"(/api/objects/([^/]+)/labels)", [this](const httplib::Request& req, httplib::Response& res) {
    auto s = find(req.matches[1]);
    auto root = s->dir() / "labels";
    auto entry = [](const fs::path& dir) {
      json arr = json::array();
      for (const auto& l : load_labels(dir))
        arr.push_back({{"part_id", l.part}, {"label", l.label}, {"view_id", l.view}});
      return arr;
    };
    if (req.has_param("scale")) {
      double scale = quantize_scale(parse_scale(req.get_param_value("scale")));
      auto dir = root / ("scale_" + scale_key(scale));
      send_json(res, {{"scale", scale}, {"labels", fs::exists(dir / "labels.json") ? entry(dir) : json::array()}});
      return;
    }
    json sets = json::object();
    if (fs::is_directory(root)) {
      std::vector<fs::path> dirs;
      for (const auto& e : fs::directory_iterator(root))
        if (fs::exists(e.path() / "labels.json")) dirs.push_back(e.path());
      std::sort(dirs.begin(), dirs.end());
      for (const auto& d : dirs) sets[d.filename().string().substr(6)] = entry(d);
    }
    send_json(res, {{"labels", sets}});
  });
}

}  // namespace sp3d
