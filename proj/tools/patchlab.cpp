#include <CLI11.hpp>

#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>

#include "patchlab/http_server.hpp"
#include "patchlab/patchlab.hpp"

namespace fs = std::filesystem;
using namespace patchlab;

namespace {

// --data, then PATCHLAB_DATA, then the config file's dataDir, then ./data.
fs::path resolve_data_dir(const std::string& flag, const json& file_cfg) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("PATCHLAB_DATA"); env && *env) return env;
  if (file_cfg.contains("dataDir")) return file_cfg.at("dataDir").get<std::string>();
  return "data";
}

ServiceConfig service_config(const json& file_cfg) {
  ServiceConfig cfg;
  merge_json(cfg, file_cfg);
  cfg.job.validate();
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

HttpServer* g_server = nullptr;

int cmd_serve(const std::string& host, int port, const std::string& data_flag, const std::string& config_path) {
  const json file_cfg = config_path.empty() ? json::object() : read_json_file(config_path);
  const auto data = resolve_data_dir(data_flag, file_cfg);
  Service svc(data, service_config(file_cfg));
  HttpServer server(svc);
  const int bound = server.bind(host, port);
  g_server = &server;
  std::signal(SIGINT, [](int) { if (g_server) g_server->stop(); });
  std::signal(SIGTERM, [](int) { if (g_server) g_server->stop(); });
  std::cout << "listening on " << host << ":" << bound << " data=" << fs::absolute(data).string() << std::endl;
  server.listen();
  g_server = nullptr;
  return 0;
}

int cmd_extract(const std::string& image_path, const std::string& label, int workers, std::uint64_t seed,
                const std::string& gt_path, const std::string& out, const std::string& data_flag,
                const std::string& config_path) {
  const json file_cfg = config_path.empty() ? json::object() : read_json_file(config_path);
  const fs::path data = data_flag.empty() ? fs::path("patchlab-extract") : fs::path(data_flag);

  Scenario s;
  s.seed = seed;
  s.config = file_cfg;
  SimImage im;
  im.path = image_path;
  im.id = fs::path(image_path).stem().string();
  im.label = label;
  if (!gt_path.empty()) {
    im.gt = load_mask(gt_path);
  } else {
    // Without ground truth the simulated crowd perceives the salient region.
    JobConfig jc = job_config_from_json(file_cfg);
    im.gt = threshold_mask(multiscale_saliency(load_image(image_path), jc.saliency, im.id), jc.bin_threshold);
  }
  s.images.push_back(std::move(im));
  for (int k = 1; k <= workers; ++k) s.workers.push_back({"sim-" + std::to_string(k)});

  const auto result = run_simulation(s, data);
  const auto& mask = result.masks.begin()->second;
  write_file_atomic(out, mask);
  std::cout << result.report.dump(2) << std::endl;
  std::cerr << "attention mask written to " << out << std::endl;
  return 0;
}

int cmd_simulate(const std::string& scenario_path, const std::string& data_flag, const std::string& out) {
  const auto s = load_scenario(scenario_path);
  const fs::path data = data_flag.empty() ? fs::path(scenario_path).replace_extension(".run") : fs::path(data_flag);
  const auto result = run_simulation(s, data);
  fs::create_directories(data / "masks");
  for (const auto& [image_id, bytes] : result.masks) write_file_atomic(data / "masks" / (image_id + ".pgm"), bytes);
  const auto text = result.report.dump(2) + "\n";
  if (out.empty()) std::cout << text;
  else write_text(out, text);
  return 0;
}

int cmd_report(const std::string& job_id, const std::string& data_flag) {
  const auto data = resolve_data_dir(data_flag, json::object());
  const auto events = EventLog::read_job_events(data / "jobs" / job_id);
  if (events.empty()) throw Error(ErrorCode::not_found, "job " + job_id);
  const auto image_id = events.front().at("imageId").get<std::string>();
  fs::path image_path;
  for (const char* ext : {".png", ".pgm"}) {
    if (fs::exists(data / "images" / (image_id + ext))) image_path = data / "images" / (image_id + ext);
  }
  if (image_path.empty()) throw Error(ErrorCode::not_found, "image " + image_id);
  const auto job = Job::replay(events, load_image(image_path), {});

  std::vector<PolygonAnnotation> polygons;
  std::ifstream wal(data / "events.jsonl");
  for (std::string line; std::getline(wal, line);) {
    const auto ev = json::parse(line, nullptr, false);
    if (ev.is_discarded() || ev.value("type", "") != "polygon") continue;
    PolygonAnnotation a{ev.at("imageId"), ev.at("workerId"), {}, ev.at("elapsedMs")};
    for (const auto& p : ev.at("points")) a.points.push_back({p[0], p[1]});
    polygons.push_back(std::move(a));
  }
  std::optional<GrayMask> gt;
  if (fs::exists(data / "gt" / (image_id + ".pgm"))) gt = load_mask(data / "gt" / (image_id + ".pgm"));
  std::cout << build_job_report(job, gt, polygons).dump(2) << std::endl;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"patchlab: crowd-driven attention mask extraction"};
  app.require_subcommand(1);

  std::string host = "127.0.0.1", data, config;
  int port = 8080;
  auto* serve = app.add_subcommand("serve", "Run the HTTP task-distribution service");
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--port", port, "Port (0 picks a free one)");
  serve->add_option("--data", data, "Data directory");
  serve->add_option("--config", config, "JSON config file")->check(CLI::ExistingFile);

  std::string image, label, gt, out = "attention.pgm";
  int sim_workers = 3;
  std::uint64_t seed = 0;
  auto* extract = app.add_subcommand("extract", "Extract one attention mask with a simulated crowd");
  extract->add_option("--image", image, "Input image (PNG or PGM)")->required()->check(CLI::ExistingFile);
  extract->add_option("--label", label, "Target class label")->required();
  extract->add_option("--sim-workers", sim_workers, "Number of simulated workers")->check(CLI::PositiveNumber);
  extract->add_option("--seed", seed, "Seed");
  extract->add_option("--gt", gt, "Ground-truth mask the workers perceive")->check(CLI::ExistingFile);
  extract->add_option("--out", out, "Output mask (PGM)");
  extract->add_option("--data", data, "Data directory for the run (must not hold an event log)");
  extract->add_option("--config", config, "JSON config file")->check(CLI::ExistingFile);

  std::string scenario, report_out;
  auto* simulate = app.add_subcommand("simulate", "Run a scenario file");
  simulate->add_option("--scenario", scenario, "Scenario JSON")->required()->check(CLI::ExistingFile);
  simulate->add_option("--data", data, "Data directory for the run (default: <scenario>.run)");
  simulate->add_option("--out", report_out, "Write the report here instead of stdout");

  std::string job;
  auto* report = app.add_subcommand("report", "Recompute a job report from its event log");
  report->add_option("--job", job, "Job id")->required();
  report->add_option("--data", data, "Data directory");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*serve) return cmd_serve(host, port, data, config);
    if (*extract) return cmd_extract(image, label, sim_workers, seed, gt, out, data, config);
    if (*simulate) return cmd_simulate(scenario, data, report_out);
    if (*report) return cmd_report(job, data);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
