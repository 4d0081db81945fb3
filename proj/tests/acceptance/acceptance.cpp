// Acceptance suite: one PASS/FAIL line per primary criterion.

#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "patchlab/http_server.hpp"
#include "patchlab/patchlab.hpp"

using namespace patchlab;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void criterion(const std::string& name, double budget_s, const std::function<Outcome()>& body) {
  const auto t0 = Clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  const bool in_time = budget_s <= 0.0 || secs < budget_s;
  const bool pass = o.pass && in_time;
  if (!pass) ++failures;
  char timing[64];
  if (budget_s > 0.0) std::snprintf(timing, sizeof timing, "%.2fs < %.0fs", secs, budget_s);
  else std::snprintf(timing, sizeof timing, "%.2fs", secs);
  std::printf("%s %s: %s [%s]\n", pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), timing);
  std::fflush(stdout);
}

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

class ScratchDir {
 public:
  explicit ScratchDir(const std::string& tag) {
    path_ = fs::temp_directory_path() / ("patchlab-accept-" + tag + "-" + std::to_string(::getpid()));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

// ---- grid -----------------------------------------------------------------

Outcome grid_exhaustive() {
  long long grids = 0;
  for (int side = 1; side <= 512; ++side) {
    for (int p = 1; p <= side; ++p) {
      const auto g = overlap_grid(side, side, p);
      ++grids;
      const int n = (side + p - 1) / p;
      bool ok = g.rows == n && g.cols == n && g.cols * p >= side && (g.cols - 1) * p < side &&
                g.rects.size() == static_cast<std::size_t>(n) * n;
      // Union covers the image: first offset 0, last flush with the edge, no gaps.
      for (int c = 0; ok && c < g.cols; ++c) {
        const auto& r = g.rects[static_cast<std::size_t>(c)];
        const auto& col = g.rects[static_cast<std::size_t>(c) * g.cols];
        ok = r.w == p && r.h == p && col.x == 0 && col.y == r.x;
        if (c == 0) ok = ok && r.x == 0;
        if (c == g.cols - 1) ok = ok && r.right() == side;
        if (c > 0) ok = ok && r.x <= g.rects[static_cast<std::size_t>(c) - 1].right();
      }
      if (!ok) return {false, "side " + std::to_string(side) + " patch " + std::to_string(p)};
    }
  }
  return {true, std::to_string(grids) + " grids checked"};
}

// ---- connected components -------------------------------------------------

Outcome ccl_oracle() {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 500; ++trial) {
    std::bernoulli_distribution bit(0.15 + 0.7 * (trial % 10) / 9.0);
    std::vector<double> px(64 * 64);
    for (auto& v : px) v = bit(rng) ? 1.0 : 0.0;
    const GrayMask m(64, 64, px);

    // Breadth-first flood fill labels in raster discovery order.
    std::vector<int> want(px.size(), -1);
    int next = 0;
    for (int start = 0; start < 64 * 64; ++start) {
      if (px[start] == 0.0 || want[start] >= 0) continue;
      std::deque<int> q{start};
      want[start] = next;
      while (!q.empty()) {
        const int i = q.front();
        q.pop_front();
        const int x = i % 64, y = i / 64;
        const int nb[4][2] = {{x + 1, y}, {x - 1, y}, {x, y + 1}, {x, y - 1}};
        for (const auto& n : nb) {
          if (n[0] < 0 || n[1] < 0 || n[0] >= 64 || n[1] >= 64) continue;
          const int j = n[1] * 64 + n[0];
          if (px[j] != 0.0 && want[j] < 0) {
            want[j] = next;
            q.push_back(j);
          }
        }
      }
      ++next;
    }

    std::vector<int> got(px.size(), -1);
    for (const auto& g : connected_components(m)) {
      for (const auto& p : g.pixels) {
        auto& l = got[static_cast<std::size_t>(p.y) * 64 + p.x];
        if (l != -1) return {false, "pixel in two groups, bitmap " + std::to_string(trial)};
        l = g.id;
      }
    }
    if (got != want) return {false, "partition differs on bitmap " + std::to_string(trial)};
  }
  return {true, "500 bitmaps identical to flood fill"};
}

// ---- mask merge -----------------------------------------------------------

// Independent 2-D convolution: odd size, sigma = size/6, clamped borders.
double blurred_at(const std::vector<double>& v, int w, int h, int kernel, int x, int y) {
  const int size = kernel % 2 == 0 ? kernel + 1 : kernel;
  const int r = size / 2;
  const double sigma = size / 6.0;
  std::vector<double> k(static_cast<std::size_t>(size));
  double sum = 0.0;
  for (int i = 0; i < size; ++i) sum += k[i] = std::exp(-double((i - r) * (i - r)) / (2.0 * sigma * sigma));
  double acc = 0.0;
  for (int dy = -r; dy <= r; ++dy) {
    for (int dx = -r; dx <= r; ++dx) {
      const int sx = std::clamp(x + dx, 0, w - 1), sy = std::clamp(y + dy, 0, h - 1);
      acc += k[dx + r] / sum * k[dy + r] / sum * v[static_cast<std::size_t>(sy) * w + sx];
    }
  }
  return acc;
}

Outcome merge_oracle() {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int kernels[] = {1, 3, 5, 9, 16, 80};
  double worst = 0.0;
  long long zero_branch = 0, product_branch = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int kernel = kernels[trial % 6];
    const int w = kernel == 80 ? 12 : 20, h = kernel == 80 ? 10 : 16;
    std::vector<double> prev(static_cast<std::size_t>(w) * h), resp(prev.size());
    for (auto& v : prev) v = u(rng) < 0.35 ? 0.0 : u(rng);
    for (auto& v : resp) v = u(rng) < 0.2 ? 1.0 : u(rng);
    const auto got = merge_masks(GrayMask(w, h, prev), GrayMask(w, h, resp), kernel);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * w + x;
        const double b = blurred_at(resp, w, h, kernel, x, y);
        double want;
        if (prev[i] == 0.0) {
          want = (prev[i] + b) / 2.0;
          ++zero_branch;
        } else {
          want = prev[i] * b;
          ++product_branch;
        }
        worst = std::max(worst, std::abs(got[i] - want));
      }
    }
  }
  if (worst > 1e-12) return {false, fmt("max deviation %.3g", worst)};

  // Constants pass through the blur, so the merge is exact per branch.
  for (int kernel : {1, 9, 80}) {
    for (double c : {0.0, 0.25, 0.8, 1.0}) {
      const auto blurred = gaussian_blur(GrayMask(40, 30, c), kernel);
      for (double v : blurred.values()) {
        if (std::abs(v - c) > 1e-12) return {false, fmt("blur of constant %.2f drifted by %.3g", c, std::abs(v - c))};
      }
    }
    const auto half = merge_masks(GrayMask(40, 30, 0.0), GrayMask(40, 30, 0.8), kernel);
    const auto one = merge_masks(GrayMask(40, 30, 1.0), GrayMask(40, 30, 1.0), kernel);
    const auto none = merge_masks(GrayMask(40, 30, 0.5), GrayMask(40, 30, 0.0), kernel);
    for (std::size_t i = 0; i < half.size(); ++i) {
      if (std::abs(half[i] - 0.4) > 1e-12 || std::abs(one[i] - 1.0) > 1e-12 || none[i] != 0.0) {
        return {false, "constant merge example failed for kernel " + std::to_string(kernel)};
      }
    }
  }
  return {true, fmt("1000 pairs, max deviation %.3g, %.0f zero-branch / %.0f product-branch pixels", worst,
                    static_cast<double>(zero_branch), static_cast<double>(product_branch))};
}

// ---- consensus ------------------------------------------------------------

Outcome consensus_exhaustive() {
  long long lists = 0;
  for (int n = 1; n <= 12; ++n) {
    for (unsigned bits = 0; bits < (1u << n); ++bits) {
      std::vector<bool> a(static_cast<std::size_t>(n));
      int sum = 0;
      for (int i = 0; i < n; ++i) {
        a[i] = ((bits >> i) & 1u) != 0;
        sum += a[i] ? 1 : -1;
      }
      const double want = std::abs(sum) / static_cast<double>(n);
      if (consensus_score(a) != want) return {false, "mismatch at n=" + std::to_string(n)};
      ++lists;
    }
  }
  return {true, std::to_string(lists) + " answer lists"};
}

// ---- validity gate --------------------------------------------------------

Outcome validity_gate() {
  auto rng = CounterRng(99).split("gate");
  const auto scene = synthetic_scene(rng, 256, 60, 180);
  const auto items = derive_test_items("gate", "object", scene.gt, 5);
  if (items.size() != 10) return {false, "expected 10 test items, got " + std::to_string(items.size())};
  std::map<std::string, bool> truth;
  for (const auto& t : items) truth[t.task_id()] = t.truth;

  int rejected = 0;
  for (int w = 0; w < 200; ++w) {
    const WorkerProfile random_worker{"r" + std::to_string(w), 0.3, 0.0, true};
    auto wr = CounterRng(99).split("workers").split(random_worker.worker_id);
    std::vector<std::pair<std::string, bool>> answers;
    for (const auto& t : items) answers.emplace_back(t.task_id(), answer_patch(t.rect, scene.gt, random_worker, wr));
    rejected += validity_score(random_worker.worker_id, answers, truth, 0.9).accepted ? 0 : 1;
  }
  const double rate = rejected / 200.0;
  return {rate >= 0.95, fmt("rejection rate %.3f (>= 0.95; binomial expectation %.3f)", rate, 1.0 - 11.0 / 1024.0)};
}

// ---- simulation ------------------------------------------------------------

json synthetic_scenario(std::uint64_t seed, int count, const json& workers, int votes) {
  return {{"seed", seed},
          {"rng", "splitmix64-counter"},
          {"synthetic", {{"count", count}, {"size", 256}, {"minSide", 60}, {"maxSide", 180}, {"label", "object"}}},
          {"idealSaliency", true},
          {"workers", workers},
          {"votesPerPatch", votes}};
}

// The extraction loop rebuilt from library primitives, answering every
// question as an error-free worker would.
GrayMask oracle_pipeline(const SimImage& im, const JobConfig& cfg, const fs::path& saliency_dir) {
  const auto& gt = *im.gt;
  const int w = gt.width(), h = gt.height();
  const WorkerProfile perfect{"oracle"};
  CounterRng unused(0);
  auto sal_cfg = cfg.saliency;
  sal_cfg.mode = SaliencyMode::precomputed;
  sal_cfg.precomputed_dir = saliency_dir;
  const auto sal = multiscale_saliency(*im.image, sal_cfg, im.id);

  GrayMask prev(w, h, 1.0);
  int grid = std::min(cfg.init_size, std::max(w, h));
  if (answer_region(threshold_mask(sal, cfg.bin_threshold), gt, perfect, unused)) {
    const auto groups = filter_groups(connected_components(threshold_mask(sal, cfg.bin_threshold)), cfg.min_group_size);
    if (groups.empty()) return sal;
    std::vector<bool> verdicts;
    std::vector<PixelGroup> confirmed;
    for (const auto& g : groups) {
      verdicts.push_back(answer_region(group_region(g, w, h), gt, perfect, unused));
      if (verdicts.back()) confirmed.push_back(g);
    }
    const auto outcome = apply_group_verdicts(sal, groups, verdicts);
    if (outcome.kind == SegmentationKind::terminate_with_full_map) return sal;
    prev = outcome.target_map;
    grid = std::min(cfg.init_size, largest_object_size(confirmed));
  }
  while (grid >= cfg.min_size) {
    const auto kept = filter_patches(overlap_grid(w, h, grid), prev, cfg.coverage_threshold, cfg.bin_threshold);
    if (kept.empty()) break;
    std::vector<Vote> votes;
    for (const auto& r : kept) {
      const bool a = answer_patch(r, gt, perfect, unused);
      for (int k = 0; k < cfg.votes_per_patch; ++k) votes.push_back({r, "v" + std::to_string(k), a});
    }
    if (std::none_of(votes.begin(), votes.end(), [](const Vote& v) { return v.answer; })) break;
    prev = merge_masks(prev, build_response_mask(w, h, votes), cfg.blur_kernel());
    grid = std::min(static_cast<int>(std::lround(grid * cfg.shrink_ratio)), grid - 1);
  }
  return prev;
}

struct SuiteRun {
  Scenario scenario;
  SimulationResult result;
  std::vector<double> ious;
  double mean_iou = 0.0;
};

SuiteRun run_suite(const json& j, const fs::path& dir) {
  SuiteRun run;
  run.scenario = parse_scenario(j);
  run.result = run_simulation(run.scenario, dir);
  for (const auto& im : run.scenario.images) {
    const auto mask = to_mask(decode_image(run.result.masks.at(im.id)));
    run.ious.push_back(mask_iou(mask, *im.gt, 0.5));
  }
  for (double v : run.ious) run.mean_iou += v;
  run.mean_iou /= static_cast<double>(run.ious.size());
  return run;
}

Outcome end_to_end() {
  ScratchDir dir("e2e");
  const json workers = json::array({{{"workerId", "p1"}}, {{"workerId", "p2"}}, {{"workerId", "p3"}}});
  const auto j = synthetic_scenario(2023, 50, workers, 3);
  const auto first = run_suite(j, dir.path() / "a");

  // The same masks must come out of the library primitives alone.
  const auto cfg = job_config_from_json(first.scenario.config, JobConfig{});
  int oracle_hits = 0, mismatches = 0;
  for (const auto& im : first.scenario.images) {
    const auto want = oracle_pipeline(im, cfg, dir.path() / "a" / "saliency");
    if (encode_pgm(want) != first.result.masks.at(im.id)) ++mismatches;
    oracle_hits += mask_iou(want, *im.gt, 0.5) >= 0.5;
  }
  const auto second = run_suite(j, dir.path() / "b");
  const bool deterministic = second.result.masks == first.result.masks;

  int hits = 0;
  for (double v : first.ious) hits += v >= 0.5;
  const double frac = hits / static_cast<double>(first.ious.size());
  const double oracle_frac = oracle_hits / static_cast<double>(first.ious.size());
  const bool pass = frac >= 0.9 && deterministic && mismatches == 0;
  auto detail = fmt("IoU >= 0.5 on %.0f%% of images (oracle pipeline %.0f%%), mean IoU %.3f", 100 * frac,
                    100 * oracle_frac, first.mean_iou);
  detail += mismatches == 0 ? ", masks match oracle" : ", " + std::to_string(mismatches) + " masks differ from oracle";
  detail += deterministic ? ", rerun identical" : ", RERUN DIFFERS";
  return {pass, detail};
}

Outcome noise_robustness() {
  ScratchDir dir("noise");
  auto crowd = [](double eps) {
    return json::array({{{"count", 20}, {"prefix", "w"}, {"flipProb", eps}}});
  };
  const auto clean = run_suite(synthetic_scenario(2023, 50, crowd(0.0), 5), dir.path() / "clean");
  const auto noisy = run_suite(synthetic_scenario(2023, 50, crowd(0.1), 5), dir.path() / "noisy");
  const double drop = clean.mean_iou - noisy.mean_iou;
  return {drop <= 0.15, fmt("mean IoU %.3f at eps=0, %.3f at eps=0.1, drop %.3f (<= 0.15)", clean.mean_iou,
                            noisy.mean_iou, drop)};
}

// ---- attention loss -------------------------------------------------------

Outcome attention_loss_checks() {
  // Dyadic values make the affine rescaling exact in floating point.
  std::mt19937_64 rng(5);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> cam(64), mapped(64), mask_px(64);
    for (auto& v : cam) v = static_cast<double>(rng() % 64) / 8.0;
    cam[0] = 0.0;
    cam[1] = 7.875;
    for (auto& v : mask_px) v = static_cast<double>(rng() % 256) / 255.0;
    const double a = static_cast<double>(1 << (rng() % 6)), b = static_cast<double>(static_cast<int>(rng() % 64) - 32);
    for (std::size_t i = 0; i < 64; ++i) mapped[i] = a * cam[i] + b;
    const GrayMask mask(8, 8, mask_px);
    if (attention_loss(8, 8, cam, mask) != attention_loss(8, 8, mapped, mask)) {
      return {false, "affine map changed the loss"};
    }
  }
  // Arbitrary positive affine maps agree to rounding.
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  for (int t = 0; t < 200; ++t) {
    std::vector<double> cam(64), mapped(64), mask_px(64);
    for (auto& v : cam) v = u(rng) * 6.0 - 3.0;
    for (auto& v : mask_px) v = u(rng);
    const double a = 0.01 + u(rng) * 100.0, b = u(rng) * 200.0 - 100.0;
    for (std::size_t i = 0; i < 64; ++i) mapped[i] = a * cam[i] + b;
    const GrayMask mask(8, 8, mask_px);
    worst = std::max(worst, std::abs(attention_loss(8, 8, cam, mask) - attention_loss(8, 8, mapped, mask)));
    // Brute force: min-max scale, then mean squared difference.
    const auto [lo, hi] = std::minmax_element(cam.begin(), cam.end());
    double sum = 0.0;
    for (std::size_t i = 0; i < 64; ++i) {
      const double s = (cam[i] - *lo) / (*hi - *lo);
      sum += (s - mask_px[i]) * (s - mask_px[i]);
    }
    if (std::abs(attention_loss(8, 8, cam, mask) - sum / 64.0) > 1e-12) return {false, "8x8 brute force differs"};
  }
  if (worst > 1e-12) return {false, fmt("affine deviation %.3g", worst)};
  return {true, fmt("200 exact dyadic cases, 200 random cases within %.3g, 8x8 brute force equal", worst)};
}

// ---- crash recovery -------------------------------------------------------

struct ChildServer {
  pid_t pid = -1;
  int port = 0;
};

ChildServer spawn_server(const fs::path& data, const ServiceConfig& cfg) {
  int fds[2];
  if (::pipe(fds) != 0) throw Error(ErrorCode::io, "pipe failed");
  const pid_t pid = ::fork();
  if (pid < 0) throw Error(ErrorCode::io, "fork failed");
  if (pid == 0) {
    ::close(fds[0]);
    int port = -1;
    try {
      Service svc(data, cfg);
      HttpServer server(svc);
      port = server.bind("127.0.0.1", 0);
      if (::write(fds[1], &port, sizeof port) != sizeof port) ::_exit(3);
      ::close(fds[1]);
      server.listen();
    } catch (...) {
      if (port < 0) (void)!::write(fds[1], &port, sizeof port);
      ::_exit(2);
    }
    ::_exit(0);
  }
  ::close(fds[1]);
  int port = -1;
  const auto n = ::read(fds[0], &port, sizeof port);
  ::close(fds[0]);
  if (n != sizeof port || port <= 0) {
    ::kill(pid, SIGKILL);
    ::waitpid(pid, nullptr, 0);
    throw Error(ErrorCode::io, "child server failed to start");
  }
  return {pid, port};
}

Transport http_transport(int port) {
  auto client = std::make_shared<HttpClient>("127.0.0.1", port);
  return [client](const ApiRequest& req) { return client->send(req); };
}

Outcome crash_recovery() {
  ScratchDir dir("crash");
  const json workers = json::array({{{"workerId", "alice"}},
                                    {{"workerId", "bob"}},
                                    {{"workerId", "carol"}},
                                    {{"workerId", "mallory"}, {"malicious", true}}});
  const auto s = parse_scenario(synthetic_scenario(31, 4, workers, 3));
  const auto reference = run_simulation(s, dir.path() / "reference");

  const auto data = dir.path() / "crashed";
  const auto cfg = prepare_data_dir(s, data);
  auto child = spawn_server(data, cfg);
  SimulationDriver driver(http_transport(child.port), s.workers, scenario_truths(s), s.seed);
  for (const auto& im : s.images) driver.create_job(im.id, im.label);

  // Kill once the first job has taken a few submissions inside a patch round.
  int in_round = 0;
  bool killed = false;
  const bool finished = driver.run([&] {
    if (driver.job_state(driver.job_ids().front()) == "PatchRound") ++in_round;
    return in_round >= 3;
  });
  if (!finished) {
    ::kill(child.pid, SIGKILL);
    ::waitpid(child.pid, nullptr, 0);
    killed = true;
    child = spawn_server(data, cfg);
    driver.set_transport(http_transport(child.port));
    driver.run();
  }

  int identical = 0;
  for (std::size_t i = 0; i < s.images.size(); ++i) {
    identical += driver.job_mask_bytes(driver.job_ids()[i]) == reference.masks.at(s.images[i].id);
  }
  ::kill(child.pid, SIGTERM);
  ::waitpid(child.pid, nullptr, 0);

  const bool pass = killed && identical == static_cast<int>(s.images.size());
  std::string detail = killed ? "killed mid-PatchRound and restarted; " : "never reached a patch round; ";
  detail += std::to_string(identical) + "/" + std::to_string(s.images.size()) + " final masks byte-identical to an uninterrupted run";
  return {pass, detail};
}

}  // namespace

int main() {
  // Forks before any thread exists.
  criterion("crash recovery: restart after SIGKILL mid-PatchRound", 0.0, crash_recovery);
  criterion("overlap grid: exhaustive coverage and minimality, sides 1-512", 10.0, grid_exhaustive);
  criterion("connected components vs flood fill, 500 random 64x64 bitmaps", 5.0, ccl_oracle);
  criterion("mask merge vs scalar re-implementation, 1000 pairs, 1e-12", 5.0, merge_oracle);
  criterion("consensus score exhaustive, all answer lists up to 12", 1.0, consensus_exhaustive);
  criterion("validity gate rejects >= 95% of 200 random workers", 10.0, validity_gate);
  criterion("end-to-end: 50 images, 3 perfect workers, IoU >= 0.5 on >= 90%", 60.0, end_to_end);
  criterion("noise robustness: eps 0.1, 5 votes, mean IoU drop <= 0.15", 0.0, noise_robustness);
  criterion("attention loss: affine invariance and 8x8 brute force", 1.0, attention_loss_checks);
  std::printf("%s: %d failing\n", failures == 0 ? "ALL PASS" : "FAILURES", failures);
  return failures == 0 ? 0 : 1;
}
