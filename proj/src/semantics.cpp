#include "sp3d/semantics.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <regex>
#include <thread>

#include "httplib.h"
#include "json.hpp"
#include "sp3d/error.hpp"

namespace sp3d {

extern const char* const kPartLabelPrompt;  // generated from assets/prompts

namespace {

void png_write_to_vector(png_structp png, png_bytep data, png_size_t length) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + length);
}

void png_error_throw(png_structp, png_const_charp msg) { throw FormatError(std::string("png: ") + msg); }
void png_warning_ignore(png_structp, png_const_charp) {}

std::uint8_t clamp_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

}  // namespace

std::vector<std::uint8_t> encode_png(const RgbImage& image) {
  if (image.width <= 0 || image.height <= 0 ||
      image.rgb.size() != static_cast<std::size_t>(image.width) * image.height * 3)
    throw InvalidArgument("encode_png: bad image dimensions");
  std::vector<std::uint8_t> out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_throw, png_warning_ignore);
  if (!png) throw ComputeError("png: out of memory");
  png_infop info = png_create_info_struct(png);
  try {
    if (!info) throw ComputeError("png: out of memory");
    png_set_write_fn(png, &out, png_write_to_vector, nullptr);
    png_set_IHDR(png, info, image.width, image.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < image.height; ++y)
      png_write_row(png, const_cast<png_bytep>(image.rgb.data() + static_cast<std::size_t>(y) * image.width * 3));
    png_write_end(png, nullptr);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
  return out;
}

void write_png(const std::filesystem::path& path, const RgbImage& image) {
  auto bytes = encode_png(image);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

RgbImage read_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str()))
    throw FormatError("cannot read png " + path.string());
  img.format = PNG_FORMAT_RGB;
  RgbImage out(static_cast<int>(img.width), static_cast<int>(img.height), 0);
  if (!png_image_finish_read(&img, nullptr, out.rgb.data(), 0, nullptr)) {
    png_image_free(&img);
    throw FormatError("corrupt png " + path.string());
  }
  return out;
}

std::vector<std::size_t> canonical_views(const ViewSet& views, std::vector<std::string>* warnings) {
  static const std::array<Vec3, 6> axes{Vec3{1, 0, 0},  Vec3{0, 1, 0},  Vec3{0, 0, 1},
                                        Vec3{-1, 0, 0}, Vec3{0, -1, 0}, Vec3{0, 0, -1}};
  std::vector<std::size_t> ids;
  for (const auto& axis : axes) {
    for (std::size_t v = 0; v < views.size(); ++v) {
      const auto& cam = views.cameras[v];
      if (cam.is_axis_aligned() && dot(normalized(cam.position), axis) > 0.5) {
        ids.push_back(v);
        break;
      }
    }
  }
  if (warnings && ids.size() < axes.size())
    warnings->push_back(ids.empty() ? "no axis-aligned views in bundle"
                                    : "only " + std::to_string(ids.size()) + " of 6 axis-aligned views in bundle");
  return ids;
}

std::vector<std::uint32_t> part_pixels(const ViewRender& render, std::span<const int> labels, int part) {
  if (labels.size() != render.pixel_of_point.size())
    throw InvalidArgument("label count does not match the view's point count");
  std::vector<std::uint32_t> out;
  for (std::size_t i = 0; i < render.point_of_pixel.size(); ++i) {
    auto p = render.point_of_pixel[i];
    if (p >= 0 && labels[static_cast<std::size_t>(p)] == part) out.push_back(static_cast<std::uint32_t>(i));
  }
  return out;
}

std::size_t best_view(std::span<const int> labels, int part, const ViewSet& views) {
  if (std::find(labels.begin(), labels.end(), part) == labels.end())
    throw InvalidArgument("part " + std::to_string(part) + " is empty");
  std::size_t best = 0, best_count = 0;
  for (std::size_t v = 0; v < views.size(); ++v) {
    auto count = part_pixels(views.renders[v], labels, part).size();
    if (count > best_count) best = v, best_count = count;
  }
  if (best_count == 0) throw ComputeError("part " + std::to_string(part) + " is not visible in any view");
  return best;
}

RgbImage render_base(const TriangleMesh& mesh, const Camera& camera, const DepthMap& depth) {
  RgbImage img(depth.width, depth.height, 255);
  auto forward = camera.frame().forward;
  for (std::size_t i = 0; i < depth.face_id.size(); ++i) {
    auto f = depth.face_id[i];
    if (f < 0) continue;
    auto fi = static_cast<std::size_t>(f);
    double shade = 0.35 + 0.65 * std::abs(dot(mesh.face_normals[fi], forward));
    Vec3 c = mesh.face_color(fi) * (255.0 * shade);
    auto* px = img.at(i);
    px[0] = clamp_byte(c.x), px[1] = clamp_byte(c.y), px[2] = clamp_byte(c.z);
  }
  return img;
}

HighlightImage render_highlight(const TriangleMesh& mesh, const ViewSet& views, std::size_t view,
                                std::span<const int> labels, int part) {
  if (view >= views.size()) throw InvalidArgument("view id out of range");
  const auto& render = views.renders[view];
  HighlightImage out;
  out.part = part;
  out.view = view;
  out.pixels = part_pixels(render, labels, part);
  if (out.pixels.empty())
    throw ComputeError("part " + std::to_string(part) + " has no visible pixels in view " + std::to_string(view));
  out.image = render_base(mesh, views.cameras[view], render.depth);

  std::vector<bool> in_part(render.point_of_pixel.size(), false);
  for (auto p : out.pixels) in_part[p] = true;
  for (std::size_t i = 0; i < in_part.size(); ++i) {
    if (render.depth.face_id[i] < 0 && !in_part[i]) continue;
    auto* px = out.image.at(i);
    if (in_part[i]) {
      px[0] = clamp_byte((1.0 - kHighlightAlpha) * px[0] + kHighlightAlpha * 255.0);
      px[1] = clamp_byte((1.0 - kHighlightAlpha) * px[1]);
      px[2] = clamp_byte((1.0 - kHighlightAlpha) * px[2]);
    } else {
      for (int c = 0; c < 3; ++c) px[c] = clamp_byte(kDimFactor * px[c]);
    }
  }
  return out;
}

// --- chat clients ------------------------------------------------------------

HttpChatConfig HttpChatConfig::from_environment() {
  HttpChatConfig c;
  if (const char* e = std::getenv("SP3D_VLM_ENDPOINT")) c.endpoint = e;
  if (const char* k = std::getenv("SP3D_VLM_KEY")) c.api_key = k;
  if (const char* m = std::getenv("SP3D_VLM_MODEL")) c.model = m;
  return c;
}

HttpChatClient::HttpChatClient(HttpChatConfig config) : config_(std::move(config)) {
  if (config_.endpoint.empty()) throw InvalidArgument("chat endpoint not configured (set SP3D_VLM_ENDPOINT)");
  if (config_.max_retries < 0) throw InvalidArgument("max_retries must be >= 0");
}

std::string HttpChatClient::complete(const std::string& prompt, const std::vector<RgbImage>& images) {
  static const std::regex url_re(R"(^(http://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(config_.endpoint, m, url_re))
    throw InvalidArgument("unsupported chat endpoint (expected http://host[:port]/path): " + config_.endpoint);
  std::string base = m[1].str();
  std::string path = m[2].matched ? m[2].str() : "/";

  nlohmann::json content = nlohmann::json::array();
  content.push_back({{"type", "text"}, {"text", prompt}});
  for (const auto& img : images) {
    auto png = encode_png(img);
    std::string raw(png.begin(), png.end());
    content.push_back(
        {{"type", "image_url"}, {"image_url", {{"url", "data:image/png;base64," + httplib::detail::base64_encode(raw)}}}});
  }
  nlohmann::json body{{"model", config_.model},
                      {"temperature", 0},
                      {"messages", nlohmann::json::array({{{"role", "user"}, {"content", content}}})}};
  auto payload = body.dump();

  httplib::Client client(base);
  client.set_connection_timeout(config_.timeout_seconds);
  client.set_read_timeout(config_.timeout_seconds);
  httplib::Headers headers;
  if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);

  std::string last_error;
  for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
    auto res = client.Post(path, headers, payload, "application/json");
    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status >= 500) {
      last_error = "server error " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200) throw ComputeError("chat endpoint returned " + std::to_string(res->status) + ": " + res->body);
    auto reply = nlohmann::json::parse(res->body, nullptr, false);
    if (reply.is_discarded()) throw ComputeError("chat endpoint returned invalid JSON");
    try {
      return reply.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception&) {
      throw ComputeError("chat reply has no choices[0].message.content");
    }
  }
  throw ComputeError("chat request failed after " + std::to_string(config_.max_retries + 1) + " attempts: " + last_error);
}

std::string MockChatClient::complete(const std::string&, const std::vector<RgbImage>& images) {
  static const char* const table[3][3] = {{"upper left", "top", "upper right"},
                                          {"left", "middle", "right"},
                                          {"lower left", "bottom", "lower right"}};
  if (images.empty()) return {};
  const auto& img = images.back();
  double sx = 0, sy = 0;
  std::size_t n = 0;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const auto* px = img.at(static_cast<std::size_t>(y) * img.width + x);
      if (px[0] >= 120 && px[0] - std::max(px[1], px[2]) >= 64) sx += x, sy += y, ++n;
    }
  if (n == 0) return {};
  int col = std::min(2, static_cast<int>(3.0 * (sx / n + 0.5) / img.width));
  int row = std::min(2, static_cast<int>(3.0 * (sy / n + 0.5) / img.height));
  return std::string(table[row][col]) + "\n";
}

const std::string& default_prompt_template() {
  static const std::string prompt(kPartLabelPrompt);
  return prompt;
}

std::string parse_label(const std::string& reply) {
  std::size_t pos = 0;
  while (pos <= reply.size()) {
    auto end = reply.find('\n', pos);
    if (end == std::string::npos) end = reply.size();
    std::string line = reply.substr(pos, end - pos);
    auto strip = [](char c) { return std::isspace(static_cast<unsigned char>(c)) || c == '"' || c == '\'' || c == '*'; };
    while (!line.empty() && strip(line.front())) line.erase(line.begin());
    while (!line.empty() && (strip(line.back()) || line.back() == '.')) line.pop_back();
    if (!line.empty()) return line;
    pos = end + 1;
  }
  return {};
}

PartLabel query_label(const std::vector<RgbImage>& images, ChatClient& client, const std::string& prompt) {
  if (images.empty()) throw InvalidArgument("query_label needs at least one image");
  PartLabel out;
  out.prompt = prompt;
  out.transcript = client.complete(prompt, images);
  out.label = parse_label(out.transcript);
  if (out.label.empty()) throw ComputeError("empty response from chat client");
  return out;
}

std::vector<PartLabel> label_all(const Segmentation& seg, const TriangleMesh& mesh, const ViewSet& views,
                                 ChatClient& client, const LabelOptions& options) {
  if (options.max_in_flight < 1) throw InvalidArgument("max_in_flight must be >= 1");
  std::vector<RgbImage> context;
  for (auto v : canonical_views(views)) context.push_back(render_base(mesh, views.cameras[v], views.renders[v].depth));

  const std::size_t parts = seg.num_parts();
  std::vector<PartLabel> out(parts);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t k = next++; k < parts; k = next++) {
      auto& result = out[k];
      result.part = static_cast<int>(k);
      result.prompt = options.prompt;
      try {
        result.view = best_view(seg.labels, result.part, views);
        auto images = context;
        images.push_back(render_highlight(mesh, views, result.view, seg.labels, result.part).image);
        auto q = query_label(images, client, options.prompt);
        result.label = std::move(q.label);
        result.transcript = std::move(q.transcript);
      } catch (const std::exception& e) {
        result.label = "unknown";
        result.error = e.what();
      }
    }
  };
  std::size_t n_threads = std::min<std::size_t>(static_cast<std::size_t>(options.max_in_flight), parts);
  std::vector<std::thread> threads;
  for (std::size_t t = 1; t < n_threads; ++t) threads.emplace_back(worker);
  worker();
  for (auto& t : threads) t.join();
  return out;
}

void save_labels(const std::filesystem::path& dir, const std::vector<PartLabel>& labels) {
  std::filesystem::create_directories(dir / "transcripts");
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& l : labels) {
    auto rel = std::filesystem::path("transcripts") / ("part_" + std::to_string(l.part) + ".txt");
    std::ofstream(dir / rel, std::ios::binary) << l.transcript;
    nlohmann::json e{{"part_id", l.part}, {"label", l.label}, {"view_id", l.view}, {"transcript_path", rel.string()}};
    if (!l.error.empty()) e["error"] = l.error;
    arr.push_back(std::move(e));
  }
  std::ofstream f(dir / "labels.json");
  if (!f) throw FormatError("cannot write " + (dir / "labels.json").string());
  f << arr.dump(2) << "\n";
}

std::vector<PartLabel> load_labels(const std::filesystem::path& dir) {
  std::ifstream f(dir / "labels.json");
  if (!f) throw FormatError("missing " + (dir / "labels.json").string());
  auto arr = nlohmann::json::parse(f, nullptr, false);
  if (arr.is_discarded() || !arr.is_array()) throw FormatError("labels.json is not a JSON array");
  std::vector<PartLabel> out;
  try {
    for (const auto& e : arr) {
      PartLabel l;
      l.part = e.at("part_id").get<int>();
      l.label = e.at("label").get<std::string>();
      l.view = e.at("view_id").get<std::size_t>();
      l.error = e.value("error", "");
      std::ifstream t(dir / e.at("transcript_path").get<std::string>(), std::ios::binary);
      l.transcript.assign(std::istreambuf_iterator<char>(t), {});
      out.push_back(std::move(l));
    }
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("labels.json: ") + ex.what());
  }
  return out;
}

}  // namespace sp3d
