#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>

#include "sp3d/distill.hpp"
#include "sp3d/pipeline.hpp"

namespace httplib {
class Server;
}

namespace sp3d {

struct ServiceOptions {
  std::filesystem::path data_dir;
  std::filesystem::path backbone;  // SP3DCKPT; required
  PipelineConfig config;
};

class Session;

/// HTTP front end over the object directories in `data_dir`.
///
///   GET  /api/objects                      list
///   POST /api/objects?name=&format=ply|obj  mesh upload (body = file)
///   POST /api/objects/{id}/fit             start a fit job
///   GET  /api/objects/{id}/status
///   GET  /api/objects/{id}/cloud           u32 N, N*3 f32 xyz, N*3 u8 rgb
///   GET  /api/objects/{id}/segments?scale=s
///   POST /api/objects/{id}/click           {origin, direction, scale} or {point, scale}
///   GET  /api/objects/{id}/labels?scale=s
///
/// Errors are {"code", "message"} with 404, 409, 422 or 503.
class Service {
 public:
  explicit Service(ServiceOptions options);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  // Binds and serves on a background thread; port 0 picks a free port. Returns the port.
  int start(const std::string& host, int port);
  // Binds and serves on the calling thread until stop().
  void listen(const std::string& host, int port);
  void stop();
  // Asks the server loop to exit without joining (safe from a signal handler).
  void request_stop();
  // Joins the thread started by start().
  void wait_stopped();

  // Blocks until no fit job is running.
  void wait_idle();

  static constexpr double kScaleStep = 0.01;
  static double quantize_scale(double scale);

 private:
  void routes();
  std::shared_ptr<Session> find(const std::string& id);
  std::shared_ptr<Session> add_session(const std::filesystem::path& dir);

  ServiceOptions options_;
  Backbone backbone_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
  std::mutex mu_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
};

}  // namespace sp3d
