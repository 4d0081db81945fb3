#pragma once

// Synthetic crowd. Seeded workers answer questions from a ground-truth object
// mask and drive the JSON API the same way a browser client would, either
// in-process or over HTTP.
//
// Scenario file (JSON; paths relative to the file):
//   seed, rng             stream seed; rng must name the generator if given
//   images[]              {id?, path, label, gt?}
//   gtMasks[]             ground-truth PGMs parallel to images[] (alternative to images[].gt)
//   synthetic             {count, size, minSide, maxSide, label} generated scenes
//   idealSaliency         precomputed saliency derived from the ground truth
//   workers[]             {workerId, tau, flipProb, malicious}, or {count, prefix, tau, flipProb, malicious}
//   config                job config overrides
//   service               {leaseTtlMs, pagesPerAssignment, pageSize}
//   votesPerPatch         shorthand for config.votesPerPatch
//   testPool[]            explicit test questions; derived from ground truth when absent

#include <algorithm>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "api.hpp"
#include "rng.hpp"

namespace patchlab {

struct WorkerProfile {
  std::string worker_id;
  double tau = 0.3;
  double flip_prob = 0.0;
  bool malicious = false;

  void validate() const {
    if (worker_id.empty()) throw Error(ErrorCode::invalid_argument, "worker id must be non-empty");
    if (!(tau >= 0.0 && tau <= 1.0) || !(flip_prob >= 0.0 && flip_prob <= 1.0)) {
      throw Error(ErrorCode::invalid_argument, "tau and flipProb must be in [0,1]");
    }
  }
};

namespace detail {

// Every answer consumes exactly one draw, so a worker's stream position is
// its answer count.
inline bool decide(bool base, const WorkerProfile& profile, CounterRng& rng) {
  const double u = rng.uniform();
  if (profile.malicious) return u < 0.5;
  return u < profile.flip_prob ? !base : base;
}

}  // namespace detail

/// Patch question: does the object cover at least tau of the patch?
inline bool answer_patch(const Rect& rect, const GrayMask& gt, const WorkerProfile& profile, CounterRng& rng) {
  return detail::decide(coverage_fraction(gt, rect, 0.5) >= profile.tau, profile, rng);
}

/// Region question: is the highlighted region the object? True when the
/// overlap covers at least tau of either the region or the object.
inline bool answer_region(const GrayMask& region, const GrayMask& gt, const WorkerProfile& profile, CounterRng& rng) {
  require_same_dims(region, gt, "region vs ground truth");
  long long r = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < region.size(); ++i) {
    const bool in_r = region[i] > 0.5;
    const bool in_g = gt[i] > 0.5;
    r += in_r;
    g += in_g;
    both += in_r && in_g;
  }
  double overlap = 0.0;
  if (r > 0) overlap = std::max(overlap, static_cast<double>(both) / r);
  if (g > 0) overlap = std::max(overlap, static_cast<double>(both) / g);
  return detail::decide(r > 0 && overlap >= profile.tau, profile, rng);
}

using Transport = std::function<ApiResponse(const ApiRequest&)>;

inline Transport in_process_transport(Service& svc) {
  return [&svc](const ApiRequest& req) { return dispatch(svc, req); };
}

/// One synthetic scene: a single rectangle or ellipse on a textured background.
struct SyntheticScene {
  RasterImage image;
  GrayMask gt;
  Rect bbox;
  bool ellipse = false;
};

inline SyntheticScene synthetic_scene(CounterRng& rng, int size, int min_side, int max_side) {
  if (size < 8 || min_side < 1 || max_side < min_side || max_side > size) {
    throw Error(ErrorCode::invalid_argument, "synthetic scene needs 1 <= minSide <= maxSide <= size");
  }
  SyntheticScene s;
  s.ellipse = rng.below(2) == 1;
  const int span = max_side - min_side + 1;
  const int w = min_side + static_cast<int>(rng.below(span));
  const int h = min_side + static_cast<int>(rng.below(span));
  const int x0 = static_cast<int>(rng.below(size - w + 1));
  const int y0 = static_cast<int>(rng.below(size - h + 1));
  s.bbox = {x0, y0, w, h};
  s.gt = GrayMask(size, size, 0.0);
  const double cx = x0 + w / 2.0, cy = y0 + h / 2.0, rx = w / 2.0, ry = h / 2.0;
  for (int y = y0; y < y0 + h; ++y) {
    for (int x = x0; x < x0 + w; ++x) {
      if (s.ellipse) {
        const double dx = (x + 0.5 - cx) / rx, dy = (y + 0.5 - cy) / ry;
        if (dx * dx + dy * dy > 1.0) continue;
      }
      s.gt.set(x, y, 1.0);
    }
  }
  const std::uint8_t hue[3] = {static_cast<std::uint8_t>(150 + rng.below(100)),
                               static_cast<std::uint8_t>(40 + rng.below(100)),
                               static_cast<std::uint8_t>(40 + rng.below(100))};
  s.image = RasterImage(size, size, 3);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const bool obj = s.gt.at(x, y) > 0.5;
      const int texture = static_cast<int>(rng.below(24));
      for (int c = 0; c < 3; ++c) {
        const int base = obj ? hue[c] : 70 + ((x / 16 + y / 16) % 2) * 10;
        s.image.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(base + texture - 12, 0, 255));
      }
    }
  }
  return s;
}

/// Test questions derived from ground truth: 32x32 windows that are almost
/// all object (answer true) or free of it (answer false), spread evenly over
/// the candidates.
inline std::vector<TestItem> derive_test_items(const std::string& image_id, const std::string& label, const GrayMask& gt,
                                               int per_kind = 4) {
  constexpr int side = 32;
  constexpr int stride = 16;
  std::vector<Rect> pos, neg;
  for (int y = 0; y + side <= gt.height(); y += stride) {
    for (int x = 0; x + side <= gt.width(); x += stride) {
      const Rect r{x, y, side, side};
      const double c = coverage_fraction(gt, r, 0.5);
      if (c >= 0.9) pos.push_back(r);
      else if (c == 0.0) neg.push_back(r);
    }
  }
  std::vector<TestItem> out;
  auto take = [&](const std::vector<Rect>& from, bool truth) {
    const int n = std::min<int>(per_kind, static_cast<int>(from.size()));
    for (int i = 0; i < n; ++i) {
      const auto& r = from[static_cast<std::size_t>(i) * from.size() / n];
      out.push_back({image_id + (truth ? "-p" : "-n") + std::to_string(i), image_id, label, r, truth});
    }
  };
  take(pos, true);
  take(neg, false);
  return out;
}

struct SimImage {
  std::string id;
  std::string label;
  std::filesystem::path path;           // empty for synthetic scenes
  std::optional<RasterImage> image;     // synthetic scenes
  std::optional<GrayMask> gt;
};

struct Scenario {
  std::uint64_t seed = 0;
  std::vector<SimImage> images;
  std::vector<WorkerProfile> workers;
  json config = json::object();
  json service = json::object();
  std::optional<std::vector<TestItem>> test_pool;
  bool ideal_saliency = false;
};

inline Scenario parse_scenario(const json& j, const std::filesystem::path& base_dir = {}) {
  Scenario s;
  try {
    s.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("rng") && j.at("rng").get<std::string>() != rng_algorithm) {
      throw Error(ErrorCode::parse_error, "scenario asks for rng '" + j.at("rng").get<std::string>() +
                                              "', only " + std::string(rng_algorithm) + " is available");
    }
    s.config = j.value("config", json::object());
    if (j.contains("votesPerPatch")) s.config["votesPerPatch"] = j.at("votesPerPatch");
    s.service = j.value("service", json::object());
    s.ideal_saliency = j.value("idealSaliency", false);

    const auto gt_list = j.value("gtMasks", json::array());
    const auto images = j.value("images", json::array());
    for (std::size_t i = 0; i < images.size(); ++i) {
      const auto& e = images[i];
      SimImage im;
      im.path = base_dir / e.at("path").get<std::string>();
      im.id = e.value("id", im.path.stem().string());
      im.label = e.at("label").get<std::string>();
      std::optional<std::filesystem::path> gt_path;
      if (e.contains("gt")) gt_path = base_dir / e.at("gt").get<std::string>();
      else if (i < gt_list.size()) gt_path = base_dir / gt_list[i].get<std::string>();
      if (!gt_path) throw Error(ErrorCode::missing_file, "no ground truth for image " + im.id);
      im.gt = load_mask(*gt_path);
      s.images.push_back(std::move(im));
    }
    if (j.contains("synthetic")) {
      const auto& syn = j.at("synthetic");
      const int count = syn.value("count", 1);
      const int size = syn.value("size", 256);
      const int min_side = syn.value("minSide", 60);
      const int max_side = syn.value("maxSide", 180);
      const auto label = syn.value("label", std::string("object"));
      auto rng = CounterRng(s.seed).split("scenes");
      for (int i = 0; i < count; ++i) {
        auto scene_rng = rng.split(static_cast<std::uint64_t>(i));
        auto scene = synthetic_scene(scene_rng, size, min_side, max_side);
        char id[32];
        std::snprintf(id, sizeof id, "syn-%03d", i);
        s.images.push_back({id, label, {}, std::move(scene.image), std::move(scene.gt)});
      }
    }
    if (s.images.empty()) throw Error(ErrorCode::parse_error, "scenario lists no images");

    for (const auto& w : j.at("workers")) {
      WorkerProfile p;
      p.tau = w.value("tau", 0.3);
      p.flip_prob = w.value("flipProb", 0.0);
      p.malicious = w.value("malicious", false);
      if (w.contains("count")) {
        const auto prefix = w.value("prefix", std::string("w"));
        for (int k = 1; k <= w.at("count").get<int>(); ++k) {
          p.worker_id = prefix + std::to_string(k);
          s.workers.push_back(p);
        }
      } else {
        p.worker_id = w.at("workerId").get<std::string>();
        s.workers.push_back(p);
      }
    }
    if (s.workers.empty()) throw Error(ErrorCode::parse_error, "scenario lists no workers");
    for (const auto& w : s.workers) w.validate();
    if (j.contains("testPool")) s.test_pool = test_pool_from_json(j.at("testPool"));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::parse_error, std::string("scenario: ") + e.what());
  }
  return s;
}

inline Scenario load_scenario(const std::filesystem::path& path) {
  return parse_scenario(read_json_file(path), path.parent_path());
}

/// Populates a data directory for the scenario: images, ground truth, test
/// pool and, for ideal saliency, per-scale precomputed maps. Returns the
/// service configuration to run it with.
inline ServiceConfig prepare_data_dir(const Scenario& s, const std::filesystem::path& data) {
  namespace fs = std::filesystem;
  fs::create_directories(data / "images");
  fs::create_directories(data / "gt");
  ServiceConfig cfg;
  cfg.seed = s.seed;
  merge_json(cfg, s.service);
  merge_json(cfg.job, s.config);
  if (s.ideal_saliency) {
    cfg.job.saliency.mode = SaliencyMode::precomputed;
    cfg.job.saliency.precomputed_dir = "saliency";
    fs::create_directories(data / "saliency");
  }
  cfg.job.validate();

  std::vector<TestItem> pool;
  for (const auto& im : s.images) {
    if (im.image) {
      write_png(*im.image, data / "images" / (im.id + ".png"));
    } else {
      const auto ext = im.path.extension() == ".pgm" ? ".pgm" : ".png";
      fs::copy_file(im.path, data / "images" / (im.id + ext), fs::copy_options::overwrite_existing);
    }
    write_mask(*im.gt, data / "gt" / (im.id + ".pgm"));
    if (s.ideal_saliency) {
      for (int scale : cfg.job.saliency.scales) {
        write_mask(resize_bilinear(*im.gt, scale, scale), precomputed_saliency_path(data / "saliency", im.id, scale));
      }
    }
    if (!s.test_pool) {
      auto items = derive_test_items(im.id, im.label, *im.gt);
      pool.insert(pool.end(), items.begin(), items.end());
    }
  }
  if (s.test_pool) pool = *s.test_pool;
  json jp = json::array();
  for (const auto& t : pool) jp.push_back(to_json(t));
  const auto text = jp.dump(2) + "\n";
  write_file_atomic(data / "tests.json", std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  return cfg;
}

/// Drives workers against the API until every job has ended.
class SimulationDriver {
 public:
  SimulationDriver(Transport transport, std::vector<WorkerProfile> workers, std::map<std::string, GrayMask> perceived,
                   std::uint64_t seed)
      : transport_(std::move(transport)), perceived_(std::move(perceived)) {
    const auto root = CounterRng(seed).split("workers");
    for (auto& w : workers) {
      w.validate();
      const auto rng = root.split(w.worker_id);
      sims_.push_back({std::move(w), rng, 0, {}, false});
    }
  }

  void set_transport(Transport t) { transport_ = std::move(t); }

  /// Called before every page request; the in-process runner advances its
  /// virtual clock here.
  void set_tick(std::function<void()> tick) { tick_ = std::move(tick); }

  std::string create_job(const std::string& image_id, const std::string& label, const json& config = json::object()) {
    const auto r = call("POST", "/jobs", {{"imageId", image_id}, {"classLabel", label}, {"config", config}});
    expect(r, 201);
    const auto id = r.json_body().at("jobId").get<std::string>();
    job_ids_.push_back(id);
    return id;
  }

  const std::vector<std::string>& job_ids() const noexcept { return job_ids_; }

  /// Round-robin over workers until a whole cycle serves no page. Stops
  /// early, returning false, when `stop` returns true after a submission.
  bool run(const std::function<bool()>& stop = {}) {
    for (;;) {
      bool progress = false;
      for (auto& sim : sims_) {
        auto page = fetch_page(sim);
        if (!page) continue;
        answer(sim, *page);
        progress = true;
        if (stop && stop()) return false;
      }
      if (!progress) break;
    }
    for (const auto& id : job_ids_) {
      const auto st = job_state(id);
      if (st != "Finalized" && st != "TerminatedEarly") {
        throw Error(ErrorCode::precondition, "simulation stalled: job " + id + " is in " + st);
      }
    }
    return true;
  }

  std::string job_state(const std::string& id) {
    const auto r = call("GET", "/jobs/" + id);
    expect(r, 200);
    return r.json_body().at("state").get<std::string>();
  }

  Bytes job_mask_bytes(const std::string& id) {
    const auto r = call("GET", "/jobs/" + id + "/mask");
    expect(r, 200);
    return Bytes(r.body.begin(), r.body.end());
  }

  json job_report(const std::string& id) {
    const auto r = call("GET", "/jobs/" + id + "/report");
    expect(r, 200);
    return r.json_body();
  }

  /// Per-worker outcome of every scored assignment, as returned by the API.
  json worker_outcomes() const {
    json out = json::array();
    for (const auto& sim : sims_) {
      int accepted = 0;
      for (const auto& v : sim.validity) accepted += v.at("accepted").get<bool>();
      out.push_back({{"workerId", sim.profile.worker_id},
                     {"malicious", sim.profile.malicious},
                     {"flipProb", sim.profile.flip_prob},
                     {"pages", sim.pages},
                     {"assignmentsScored", sim.validity.size()},
                     {"assignmentsAccepted", accepted},
                     {"validity", sim.validity}});
    }
    return out;
  }

  long long pages_answered() const {
    long long n = 0;
    for (const auto& s : sims_) n += s.pages;
    return n;
  }

 private:
  struct Sim {
    WorkerProfile profile;
    CounterRng rng;
    long long pages = 0;
    std::vector<json> validity;
    bool registered = false;
  };

  ApiResponse call(const std::string& method, const std::string& path, const json& body = nullptr) {
    return transport_({method, path, body.is_null() ? std::string() : body.dump()});
  }

  static void expect(const ApiResponse& r, int status) {
    if (r.status != status) {
      throw Error(ErrorCode::io, "unexpected HTTP " + std::to_string(r.status) + ": " + r.body);
    }
  }

  std::optional<json> fetch_page(Sim& sim) {
    const auto path = "/workers/" + sim.profile.worker_id + "/next-page";
    for (int attempt = 0; attempt < 2; ++attempt) {
      if (!sim.registered || attempt == 1) {
        const auto r = call("POST", "/workers", {{"workerId", sim.profile.worker_id}});
        expect(r, 200);
        sim.registered = true;
        if (attempt == 1 && !r.json_body().at("started").get<bool>()) return std::nullopt;
      }
      if (tick_) tick_();
      const auto r = call("GET", path);
      if (r.status == 200) return r.json_body();
      expect(r, 204);
    }
    return std::nullopt;
  }

  const GrayMask& truth_for(const std::string& image_id) const {
    auto it = perceived_.find(image_id);
    if (it == perceived_.end()) throw Error(ErrorCode::missing_file, "no ground truth for image " + image_id);
    return it->second;
  }

  void answer(Sim& sim, const json& page) {
    std::vector<bool> answers;
    for (const auto& t : page.at("tasks")) {
      const auto kind = task_kind_from_string(t.at("kind").get<std::string>());
      const auto& gt = truth_for(t.at("imageId").get<std::string>());
      if (kind == TaskKind::saliency_verify || kind == TaskKind::group_verify) {
        const auto r = call("GET", t.at("regionUrl").get<std::string>());
        expect(r, 200);
        const auto region = to_mask(decode_image(std::span(reinterpret_cast<const std::uint8_t*>(r.body.data()), r.body.size())));
        answers.push_back(answer_region(region, gt, sim.profile, sim.rng));
      } else {
        answers.push_back(answer_patch(rect_from_json(t.at("rect")), gt, sim.profile, sim.rng));
      }
    }
    const auto token = page.at("pageToken").get<std::string>();
    const auto r = call("POST", "/pages/" + token + "/answers",
                        {{"workerId", sim.profile.worker_id}, {"answers", answers}, {"elapsedMs", 1000.0}});
    expect(r, 200);
    ++sim.pages;
    const auto body = r.json_body();
    if (body.contains("validity")) sim.validity.push_back(body.at("validity"));
  }

  Transport transport_;
  std::map<std::string, GrayMask> perceived_;
  std::vector<Sim> sims_;
  std::vector<std::string> job_ids_;
  std::function<void()> tick_;
};

inline std::map<std::string, GrayMask> scenario_truths(const Scenario& s) {
  std::map<std::string, GrayMask> out;
  for (const auto& im : s.images) out.emplace(im.id, *im.gt);
  return out;
}

struct SimulationResult {
  json report;
  std::map<std::string, Bytes> masks;  // imageId -> final mask PGM
};

/// Runs a scenario in-process against a fresh data directory.
inline SimulationResult run_simulation(const Scenario& s, const std::filesystem::path& data) {
  if (std::filesystem::exists(data / "events.jsonl")) {
    throw Error(ErrorCode::conflict, data.string() + " already holds an event log");
  }
  const auto cfg = prepare_data_dir(s, data);
  std::int64_t now = 0;
  Service svc(data, cfg, [&now] { return now; });
  SimulationDriver driver(in_process_transport(svc), s.workers, scenario_truths(s), s.seed);
  driver.set_tick([&now] { now += 1000; });
  for (const auto& im : s.images) driver.create_job(im.id, im.label);
  driver.run();

  SimulationResult res;
  json jobs = json::array();
  std::vector<double> ious;
  std::array<int, 10> hist{};
  for (std::size_t i = 0; i < driver.job_ids().size(); ++i) {
    const auto& id = driver.job_ids()[i];
    auto rep = driver.job_report(id);
    res.masks[s.images[i].id] = driver.job_mask_bytes(id);
    const auto h = rep.at("consensusHistogram").get<std::vector<int>>();
    for (std::size_t b = 0; b < hist.size(); ++b) hist[b] += h[b];
    if (!rep.at("quality").is_null()) ious.push_back(rep.at("quality").at("iou").get<double>());
    jobs.push_back({{"jobId", id},
                    {"imageId", rep.at("imageId")},
                    {"state", rep.at("state")},
                    {"iteration", rep.at("iteration")},
                    {"mask", rep.at("mask")},
                    {"quality", rep.at("quality")},
                    {"consensusHistogram", rep.at("consensusHistogram")},
                    {"perPatchTimeMs", rep.at("perPatchTimeMs")},
                    {"validity", rep.at("validity")}});
  }
  double mean_iou = 0.0;
  for (double v : ious) mean_iou += v;
  if (!ious.empty()) mean_iou /= static_cast<double>(ious.size());
  res.report = {{"seed", s.seed},
                {"rng", rng_algorithm},
                {"jobs", std::move(jobs)},
                {"meanIou", mean_iou},
                {"consensusHistogram", hist},
                {"workers", driver.worker_outcomes()},
                {"pagesAnswered", driver.pages_answered()}};
  return res;
}

}  // namespace patchlab
