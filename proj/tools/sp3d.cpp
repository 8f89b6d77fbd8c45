// sp3d command-line driver. Every command prints a JSON summary as its last stdout line.

#include <chrono>
#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"
#include "sp3d/error.hpp"
#include "sp3d/metrics.hpp"
#include "sp3d/pipeline.hpp"
#include "sp3d/semantics.hpp"
#include "sp3d/service.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sp3d;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::optional<std::uint64_t> seed;
  std::string config_path;

  PipelineConfig load() const {
    PipelineConfig c;
    if (!config_path.empty()) {
      try {
        c = load_config(config_path);
      } catch (const InvalidArgument& e) {
        throw UsageError(e.what());
      }
    }
    if (seed) c.set_seed(*seed);
    return c;
  }
};

void add_common(CLI::App* cmd, Common& common) {
  cmd->add_option("--seed", common.seed, "Random seed (overrides the config file)");
  cmd->add_option("--config", common.config_path, "TOML config file")->check(CLI::ExistingFile);
}

std::vector<fs::path> select_objects(const fs::path& root, const std::vector<std::string>& ids) {
  if (ids.empty()) {
    auto all = list_objects(root);
    if (all.empty()) throw InvalidArgument("no objects in " + root.string());
    return all;
  }
  std::vector<fs::path> out;
  for (const auto& id : ids) {
    if (!fs::is_directory(root / id)) throw InvalidArgument("unknown object '" + id + "'");
    out.push_back(root / id);
  }
  return out;
}

void log(const std::string& msg) { std::cerr << msg << std::endl; }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Backbone load_backbone_checked(const fs::path& path) {
  if (!fs::exists(path)) throw InvalidArgument("backbone checkpoint not found: " + path.string());
  return load_backbone(path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-granularity 3D part segmentation pipeline"};
  app.require_subcommand(1);
  Common common;
  json summary;
  std::function<void()> action;

  // synth ---------------------------------------------------------------
  std::vector<std::string> specs;
  fs::path out_dir;
  auto* synth = app.add_subcommand("synth", "Write synthetic toy objects with ground truth");
  add_common(synth, common);
  synth->add_option("--spec", specs, "Toy spec names (snowman, table, lamp, mushroom)")->required()->delimiter(',');
  synth->add_option("--out", out_dir, "Dataset directory")->required();
  synth->callback([&] {
    action = [&] {
      auto config = common.load();
      for (const auto& s : specs) {
        auto names = toy_spec_names();
        if (std::find(names.begin(), names.end(), s) == names.end()) throw UsageError("unknown spec '" + s + "'");
      }
      auto dirs = synth_dataset(out_dir, specs, config);
      json objs = json::array();
      for (const auto& d : dirs) objs.push_back(d.filename().string());
      summary = {{"objects", objs}, {"out", out_dir.string()}};
    };
  });

  // export-views -----------------------------------------------------------
  fs::path data_dir;
  std::vector<std::string> object_ids;
  auto* ev = app.add_subcommand("export-views", "Sample clouds, render views and write view bundles");
  add_common(ev, common);
  ev->add_option("--data", data_dir, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--object", object_ids, "Object ids (default: all)");
  ev->callback([&] {
    action = [&] {
      auto config = common.load();
      json objs = json::array();
      for (const auto& dir : select_objects(data_dir, object_ids)) {
        auto t0 = std::chrono::steady_clock::now();
        auto m = export_views(dir, config);
        log("export-views " + dir.filename().string() + ": " + std::to_string(m.cameras.size()) + " views");
        objs.push_back({{"object", dir.filename().string()},
                        {"views", m.cameras.size()},
                        {"points", m.points},
                        {"mask_levels", m.mask_levels},
                        {"seconds", seconds_since(t0)}});
      }
      summary = {{"objects", objs}};
    };
  });

  // pretrain -------------------------------------------------------------
  fs::path ckpt_out;
  std::vector<std::string> exclude;
  std::optional<int> steps;
  auto* pt = app.add_subcommand("pretrain", "Distill view features into the point backbone");
  add_common(pt, common);
  pt->add_option("--data", data_dir, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  pt->add_option("--out", ckpt_out, "Backbone checkpoint path")->required();
  pt->add_option("--exclude", exclude, "Object ids held out from training");
  pt->add_option("--steps", steps, "Training steps (overrides the config)");
  pt->callback([&] {
    action = [&] {
      auto config = common.load();
      if (steps) config.pretrain.steps = *steps;
      std::vector<DistillObject> dataset;
      json used = json::array();
      for (const auto& dir : list_objects(data_dir)) {
        auto id = dir.filename().string();
        if (std::find(exclude.begin(), exclude.end(), id) != exclude.end()) continue;
        dataset.push_back(load_distill_object(dir));
        used.push_back(id);
      }
      if (dataset.empty()) throw InvalidArgument("no objects to pretrain on");
      auto logpath = ckpt_out;
      logpath += ".log.jsonl";
      if (ckpt_out.has_parent_path()) fs::create_directories(ckpt_out.parent_path());
      std::ofstream logf(logpath);
      auto t0 = std::chrono::steady_clock::now();
      auto result = pretrain(dataset, config.pretrain, [&](const PretrainStats& s) {
        logf << json{{"step", s.step}, {"loss", s.loss}, {"wall_ms", s.wall_ms}}.dump() << "\n";
        if (s.step % 200 == 0) log("pretrain step " + std::to_string(s.step) + " loss " + std::to_string(s.loss));
      });
      save_backbone(ckpt_out, result.backbone);
      summary = {{"checkpoint", ckpt_out.string()},
                 {"objects", used},
                 {"steps", config.pretrain.steps},
                 {"initial_loss", result.curve.front().loss},
                 {"final_loss", result.curve.back().loss},
                 {"seconds", seconds_since(t0)}};
    };
  });

  // fit ----------------------------------------------------------------------
  fs::path backbone_path;
  std::optional<int> iterations;
  bool no_skip = false;
  auto* ft = app.add_subcommand("fit", "Fit the scale-conditioned grouping field per object");
  add_common(ft, common);
  ft->add_option("--data", data_dir, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  ft->add_option("--backbone", backbone_path, "Backbone checkpoint")->required();
  ft->add_option("--object", object_ids, "Object ids (default: all)");
  ft->add_option("--iterations", iterations, "Fit iterations (overrides the config)");
  ft->add_flag("--no-skip", no_skip, "Disable the long skip MLP");
  ft->callback([&] {
    action = [&] {
      auto config = common.load();
      if (iterations) config.fit.iterations = *iterations;
      if (no_skip) config.fit.field.use_skip = false;
      auto backbone = load_backbone_checked(backbone_path);
      json objs = json::array();
      for (const auto& dir : select_objects(data_dir, object_ids)) {
        auto obj = load_object(dir);
        auto t0 = std::chrono::steady_clock::now();
        auto result = fit_object(obj, backbone, backbone_path, config);
        log("fit " + obj.id + ": loss " + std::to_string(result.final_loss()));
        objs.push_back({{"object", obj.id}, {"final_loss", result.final_loss()}, {"seconds", seconds_since(t0)}});
      }
      summary = {{"objects", objs}};
    };
  });

  // segment ------------------------------------------------------------------
  std::optional<double> scale;
  bool sweep = false;
  auto* sg = app.add_subcommand("segment", "Cluster the fitted field at one or more scales");
  add_common(sg, common);
  sg->add_option("--data", data_dir, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  sg->add_option("--object", object_ids, "Object ids (default: all)");
  auto* scale_opt = sg->add_option("--scale", scale, "Scale sigma")->check(CLI::NonNegativeNumber);
  auto* sweep_opt = sg->add_flag("--sweep", sweep, "Segment at every scale of the configured sweep");
  scale_opt->excludes(sweep_opt);
  sg->add_option("--backbone", backbone_path, "Backbone checkpoint (default: the one used by fit)");
  sg->callback([&] {
    action = [&] {
      if (!scale && !sweep) throw UsageError("segment needs --scale or --sweep");
      auto config = common.load();
      std::vector<double> scales = sweep ? config.sweep : std::vector<double>{*scale};
      json objs = json::array();
      for (const auto& dir : select_objects(data_dir, object_ids)) {
        auto record = read_fit_record(dir);
        auto obj = load_object(dir);
        auto meta = read_object_meta(dir);
        auto field = load_field(field_path(dir));
        auto backbone = load_backbone_checked(backbone_path.empty() ? record.backbone : backbone_path);
        auto inputs = field_inputs(encode_points(backbone, obj.cloud), obj.cloud, field.config);
        json entries = json::array();
        for (const auto& e : segment_sweep(field, inputs, scales, config.cluster)) {
          if (!e.segmentation) {
            entries.push_back({{"scale", e.scale}, {"error", e.error}});
            continue;
          }
          auto out = write_segment_outputs(obj, *e.segmentation, meta.category);
          entries.push_back({{"scale", e.scale}, {"parts", e.segmentation->num_parts()}, {"stem", out.stem.string()}});
        }
        bool any = std::any_of(entries.begin(), entries.end(), [](const json& j) { return !j.contains("error"); });
        if (!any) throw ComputeError(obj.id + ": " + entries.front()["error"].get<std::string>());
        objs.push_back({{"object", obj.id}, {"scales", entries}});
        log("segment " + obj.id + ": " + std::to_string(entries.size()) + " scale(s)");
      }
      summary = {{"objects", objs}};
    };
  });

  // label ----------------------------------------------------------------------
  bool mock = false;
  std::string endpoint;
  double label_scale = 0.0;
  auto* lb = app.add_subcommand("label", "Name segmented parts with a vision-language chat endpoint");
  add_common(lb, common);
  lb->add_option("--data", data_dir, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  lb->add_option("--object", object_ids, "Object ids (default: all)");
  lb->add_option("--scale", label_scale, "Scale of the segmentation to label")->required()->check(CLI::NonNegativeNumber);
  auto* mock_opt = lb->add_flag("--mock", mock, "Use the offline mock client");
  auto* ep_opt = lb->add_option("--endpoint", endpoint, "Chat endpoint URL (key from SP3D_VLM_KEY)");
  mock_opt->excludes(ep_opt);
  lb->callback([&] {
    action = [&] {
      if (!mock && endpoint.empty()) throw UsageError("label needs --mock or --endpoint");
      auto config = common.load();
      std::unique_ptr<ChatClient> client;
      if (mock) {
        client = std::make_unique<MockChatClient>();
      } else {
        auto hc = HttpChatConfig::from_environment();
        hc.endpoint = endpoint;
        client = std::make_unique<HttpChatClient>(hc);
      }
      LabelOptions lo;
      lo.max_in_flight = config.label_in_flight;
      auto key = scale_key(label_scale);
      json objs = json::array();
      for (const auto& dir : select_objects(data_dir, object_ids)) {
        auto stem = dir / "seg" / ("scale_" + key);
        if (!fs::exists(stem.string() + ".json")) throw ComputeError("no segmentation at scale " + key + " for " + dir.filename().string());
        auto seg = load_segmentation(stem);
        auto obj = load_object(dir);
        auto labels = label_all(seg, obj.mesh, obj.views, *client, lo);
        save_labels(dir / "labels" / ("scale_" + key), labels);

        auto pred_path = dir / "pred" / ("scale_" + key + ".json");
        if (fs::exists(pred_path)) {
          auto pf = read_part_file(pred_path);
          for (auto& part : pf.parts) {
            auto id = static_cast<std::size_t>(std::stoi(part.label.substr(part.label.find('_') + 1)));
            if (id < labels.size()) part.label = labels[id].label;
          }
          write_part_file(pred_path, pf);
        }
        json names = json::array();
        std::size_t failed = 0;
        for (const auto& l : labels) {
          names.push_back(l.label);
          failed += !l.error.empty();
        }
        objs.push_back({{"object", obj.id}, {"labels", names}, {"failed", failed}});
        log("label " + obj.id + ": " + names.dump());
      }
      summary = {{"objects", objs}, {"scale", label_scale}};
    };
  });

  // eval -------------------------------------------------------------------------
  fs::path report_path;
  auto* ev2 = app.add_subcommand("eval", "Score predictions against ground truth");
  add_common(ev2, common);
  ev2->add_option("--data", data_dir, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  ev2->add_option("--out", report_path, "Write the JSON report here");
  ev2->callback([&] {
    action = [&] {
      common.load();
      auto report = evaluate_dataset(data_dir);
      std::cout << report.to_table();
      if (!report_path.empty()) {
        std::ofstream f(report_path);
        if (!f) throw FormatError("cannot write " + report_path.string());
        f << report.to_json().dump(2) << "\n";
      }
      summary = report.to_json()["overall"];
      summary["skipped"] = report.skipped.size();
    };
  });

  // serve -------------------------------------------------------------------------
  std::string host = "127.0.0.1";
  int port = 8080;
  auto* sv = app.add_subcommand("serve", "Run the HTTP service");
  add_common(sv, common);
  sv->add_option("--data", data_dir, "Dataset directory")->required();
  sv->add_option("--backbone", backbone_path, "Backbone checkpoint")->required();
  sv->add_option("--host", host, "Bind address");
  sv->add_option("--port", port, "Port (0 = any free port)")->check(CLI::Range(0, 65535));
  sv->callback([&] {
    action = [&] {
      auto config = common.load();
      Service service({data_dir, backbone_path, config});
      static Service* running = nullptr;
      running = &service;
      std::signal(SIGINT, [](int) {
        if (running) running->request_stop();
      });
      std::signal(SIGTERM, [](int) {
        if (running) running->request_stop();
      });
      int bound = service.start(host, port);
      std::cout << json{{"listening", host + ":" + std::to_string(bound)}}.dump() << std::endl;
      service.wait_stopped();
      running = nullptr;
      summary = {{"stopped", true}};
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    if (code != 0) {
      std::cout << json{{"ok", false}, {"error", e.what()}, {"exit", 2}}.dump() << std::endl;
      return 2;
    }
    return 0;
  }

  std::string command = app.get_subcommands().front()->get_name();
  try {
    action();
    summary["ok"] = true;
    summary["command"] = command;
    std::cout << summary.dump() << std::endl;
    return 0;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << std::endl;
    std::cout << json{{"ok", false}, {"command", command}, {"error", e.what()}, {"exit", 2}}.dump() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    std::cout << json{{"ok", false}, {"command", command}, {"error", e.what()}, {"exit", 1}}.dump() << std::endl;
    return 1;
  }
}
