#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "sp3d/geometry.hpp"
#include "sp3d/render.hpp"
#include "sp3d/segment.hpp"

namespace sp3d {

struct RgbImage {
  int width = 0, height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

  RgbImage() = default;
  RgbImage(int w, int h, std::uint8_t fill = 255)
      : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, fill) {}
  std::uint8_t* at(std::size_t pixel) { return rgb.data() + 3 * pixel; }
  const std::uint8_t* at(std::size_t pixel) const { return rgb.data() + 3 * pixel; }
};

std::vector<std::uint8_t> encode_png(const RgbImage& image);
void write_png(const std::filesystem::path& path, const RgbImage& image);
RgbImage read_png(const std::filesystem::path& path);

// The six axis-aligned views in +x, +y, +z, -x, -y, -z order (fewer when absent).
std::vector<std::size_t> canonical_views(const ViewSet& views, std::vector<std::string>* warnings = nullptr);

// Pixels of `view` whose point_of_pixel lies in the part.
std::vector<std::uint32_t> part_pixels(const ViewRender& render, std::span<const int> labels, int part);

// View with the most part pixels, ties to the lower id. Throws when the part is seen nowhere.
std::size_t best_view(std::span<const int> labels, int part, const ViewSet& views);

// Flat-shaded face colours; background white.
RgbImage render_base(const TriangleMesh& mesh, const Camera& camera, const DepthMap& depth);

struct HighlightImage {
  RgbImage image;
  std::vector<std::uint32_t> pixels;
  int part = 0;
  std::size_t view = 0;
};

inline constexpr double kHighlightAlpha = 0.5;
inline constexpr double kDimFactor = 0.6;

// Part pixels blended toward red, other foreground dimmed, background untouched.
HighlightImage render_highlight(const TriangleMesh& mesh, const ViewSet& views, std::size_t view,
                                std::span<const int> labels, int part);

// --- chat client -------------------------------------------------------------

class ChatClient {
 public:
  virtual ~ChatClient() = default;
  // One user turn with text and PNG attachments; returns the assistant text.
  virtual std::string complete(const std::string& prompt, const std::vector<RgbImage>& images) = 0;
};

struct HttpChatConfig {
  std::string endpoint;  // full URL of a chat-completions style route
  std::string api_key;
  std::string model = "default";
  int max_retries = 2;
  int timeout_seconds = 60;

  // SP3D_VLM_ENDPOINT, SP3D_VLM_KEY, SP3D_VLM_MODEL
  static HttpChatConfig from_environment();
};

class HttpChatClient : public ChatClient {
 public:
  explicit HttpChatClient(HttpChatConfig config);
  std::string complete(const std::string& prompt, const std::vector<RgbImage>& images) override;

 private:
  HttpChatConfig config_;
};

// Finds the red highlight in the last image and names its 3x3 grid cell.
class MockChatClient : public ChatClient {
 public:
  std::string complete(const std::string& prompt, const std::vector<RgbImage>& images) override;
};

const std::string& default_prompt_template();

struct PartLabel {
  int part = 0;
  std::string label;  // "unknown" on failure
  std::size_t view = 0;
  std::string prompt;
  std::string transcript;  // raw reply
  std::string error;
};

// First non-empty line of the reply, trimmed of quotes and trailing punctuation.
std::string parse_label(const std::string& reply);

PartLabel query_label(const std::vector<RgbImage>& images, ChatClient& client, const std::string& prompt);

struct LabelOptions {
  std::string prompt = default_prompt_template();
  int max_in_flight = 4;
};

std::vector<PartLabel> label_all(const Segmentation& seg, const TriangleMesh& mesh, const ViewSet& views,
                                 ChatClient& client, const LabelOptions& options = {});

// <dir>/labels.json [{part_id, label, view_id, transcript_path}] plus <dir>/transcripts/.
void save_labels(const std::filesystem::path& dir, const std::vector<PartLabel>& labels);
std::vector<PartLabel> load_labels(const std::filesystem::path& dir);

}  // namespace sp3d
