#pragma once

// Task distribution: worker assignments with injected test questions, pages
// of up to six same-label questions under a lease, submission intake with
// validity gating and redeployment, polygon intake, and job reports.
//
// Data directory layout:
//   images/<imageId>.{png,pgm}   source images (operator supplied)
//   gt/<imageId>.pgm             optional ground truth, enables report quality
//   tests.json                   test-question pool (operator supplied)
//   events.jsonl                 write-ahead log of the whole service
//   jobs/<jobId>/{job.json, events.jsonl, saliency.pgm, round-<k>.pgm, attention.pgm}

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "aggregation.hpp"
#include "config.hpp"
#include "event_log.hpp"
#include "image_io.hpp"
#include "orchestrator.hpp"
#include "polygon.hpp"
#include "report.hpp"
#include "rng.hpp"

namespace patchlab {

/// Known-answer question injected into worker assignments.
struct TestItem {
  std::string id;
  std::string image_id;
  std::string label;
  Rect rect;
  bool truth = false;

  std::string task_id() const { return "test-" + id; }
};

inline json to_json(const TestItem& t) {
  return {{"id", t.id}, {"imageId", t.image_id}, {"label", t.label}, {"rect", to_json(t.rect)}, {"truth", t.truth}};
}

inline std::vector<TestItem> test_pool_from_json(const json& j) {
  std::vector<TestItem> pool;
  try {
    for (const auto& e : j) {
      pool.push_back({e.at("id").get<std::string>(), e.at("imageId").get<std::string>(), e.at("label").get<std::string>(),
                      rect_from_json(e.at("rect")), e.at("truth").get<bool>()});
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::parse_error, std::string("test pool: ") + e.what());
  }
  return pool;
}

struct PageEntry {
  std::string task_id;
  TaskKind kind = TaskKind::patch_label;
  std::string job_id;  // empty for test questions
  std::string image_id;
  Rect rect;

  bool is_test() const { return kind == TaskKind::test; }
};

struct QuestionPage {
  std::string token;
  std::string worker_id;
  std::string label;
  int assignment = 0;
  int index = 0;
  std::vector<PageEntry> tasks;
  std::int64_t issued_at = 0;
  int tests = 0;
  bool submitted = false;
  bool expired = false;
};

inline json to_json(const QuestionPage& p) {
  json tasks = json::array();
  for (const auto& t : p.tasks) {
    tasks.push_back({{"taskId", t.task_id}, {"kind", to_string(t.kind)}, {"imageId", t.image_id},
                     {"rect", to_json(t.rect)}, {"patchUrl", "/patches/" + t.task_id + ".png"}});
    if (t.kind == TaskKind::saliency_verify || t.kind == TaskKind::group_verify) {
      tasks.back()["regionUrl"] = "/tasks/" + t.task_id + "/region.pgm";
    }
  }
  return {{"pageToken", p.token}, {"workerId", p.worker_id}, {"jobLabel", p.label}, {"tasks", std::move(tasks)},
          {"issuedAt", p.issued_at}};
}

struct PageSubmission {
  std::string token;
  std::string worker_id;
  std::vector<bool> answers;
  double elapsed_ms = 0.0;
};

struct SubmitOutcome {
  bool accepted = true;
  std::optional<ValidityReport> validity;
};

inline json to_json(const ValidityReport& r) {
  return {{"workerId", r.worker_id}, {"testTotal", r.test_total}, {"testCorrect", r.test_correct},
          {"score", r.score},        {"accepted", r.accepted}};
}

inline std::int64_t system_clock_ms() {
  using namespace std::chrono;
  return duration_cast<milliseconds>(system_clock::now().time_since_epoch()).count();
}

class Service {
 public:
  using Clock = std::function<std::int64_t()>;

  Service(std::filesystem::path data_dir, ServiceConfig cfg, Clock clock = system_clock_ms)
      : data_(std::filesystem::absolute(data_dir)), cfg_(std::move(cfg)), clock_(std::move(clock)), log_(data_) {
    cfg_.job.validate();
    if (std::filesystem::exists(data_ / "tests.json")) {
      set_test_pool_unlocked(test_pool_from_json(read_json_file(data_ / "tests.json")));
    }
    recover();
  }

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  const std::filesystem::path& data_dir() const noexcept { return data_; }
  const ServiceConfig& config() const noexcept { return cfg_; }

  /// Replaces the test pool and persists it as tests.json.
  void set_test_pool(std::vector<TestItem> pool) {
    std::lock_guard lock(mu_);
    json j = json::array();
    for (const auto& t : pool) j.push_back(to_json(t));
    const auto text = j.dump(2) + "\n";
    write_file_atomic(data_ / "tests.json", std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
    set_test_pool_unlocked(std::move(pool));
  }

  // ---- jobs ---------------------------------------------------------------

  /// Creates and starts a job; returns its id. Nothing is persisted when the
  /// image cannot be decoded.
  std::string create_job(const std::string& image_id, const std::string& label, const json& overrides = json::object(),
                         std::optional<std::string> job_id = std::nullopt) {
    if (label.empty()) throw Error(ErrorCode::invalid_argument, "class label must be non-empty");
    JobConfig jc = job_config_from_json(overrides, cfg_.job);
    if (!jc.saliency.precomputed_dir.empty() && jc.saliency.precomputed_dir.is_relative()) {
      jc.saliency.precomputed_dir = data_ / jc.saliency.precomputed_dir;
    }
    jc.validate();
    auto image = load_image(find_image(image_id));
    if (jc.saliency.mode == SaliencyMode::precomputed) {
      for (int s : jc.saliency.scales) {
        const auto p = precomputed_saliency_path(jc.saliency.precomputed_dir, image_id, s);
        if (!std::filesystem::exists(p)) throw Error(ErrorCode::missing_file, p.string());
      }
    }

    JobEntry* entry = nullptr;
    {
      std::lock_guard lock(mu_);
      if (cfg_.job.test_questions_per_worker > 0 && !pool_labels_.contains(label)) {
        throw Error(ErrorCode::precondition, "no test questions for label '" + label + "'");
      }
      std::string id;
      if (job_id) {
        id = *job_id;
        if (id.empty() || id.find('/') != std::string::npos) throw Error(ErrorCode::invalid_argument, "bad job id");
        if (jobs_.contains(id)) throw Error(ErrorCode::conflict, "job " + id + " already exists");
      } else {
        for (int n = static_cast<int>(jobs_.size()) + 1;; ++n) {
          char buf[32];
          std::snprintf(buf, sizeof buf, "job-%04d", n);
          if (!jobs_.contains(buf)) {
            id = buf;
            break;
          }
        }
      }
      std::filesystem::create_directories(log_.job_dir(id));
      auto e = std::make_unique<JobEntry>();
      e->job = std::make_unique<Job>(Job::create(id, image_id, label, jc, std::move(image), log_.job_dir(id), job_sink(id)));
      entry = e.get();
      jobs_.emplace(id, std::move(e));
    }
    drive(*entry);
    return entry->job->id();
  }

  json job_status(const std::string& id) {
    auto& e = entry(id);
    std::lock_guard lock(e.mu);
    return e.job->status_json();
  }

  JobState job_state(const std::string& id) {
    auto& e = entry(id);
    std::lock_guard lock(e.mu);
    return e.job->state();
  }

  /// Current (or final) mask of a job.
  GrayMask job_mask(const std::string& id) {
    auto& e = entry(id);
    std::lock_guard lock(e.mu);
    auto m = e.job->current_mask();
    if (!m) throw Error(ErrorCode::not_found, "job " + id + " has no mask yet");
    return *m;
  }

  GrayMask finalize(const std::string& id) {
    auto& e = entry(id);
    std::lock_guard lock(e.mu);
    return e.job->finalize();
  }

  json job_report(const std::string& id) {
    std::vector<PolygonAnnotation> polys;
    {
      std::lock_guard lock(mu_);
      polys = polygons_;
    }
    auto& e = entry(id);
    std::lock_guard lock(e.mu);
    std::optional<GrayMask> gt;
    const auto gt_path = data_ / "gt" / (e.job->image_id() + ".pgm");
    if (std::filesystem::exists(gt_path)) gt = load_mask(gt_path);
    return build_job_report(*e.job, gt, polys);
  }

  std::vector<std::string> job_ids() {
    std::lock_guard lock(mu_);
    std::vector<std::string> ids;
    for (const auto& [id, _] : jobs_) ids.push_back(id);
    return ids;
  }

  bool all_jobs_terminal() {
    for (const auto& id : job_ids()) {
      if (!is_terminal(job_state(id))) return false;
    }
    return true;
  }

  // ---- workers ------------------------------------------------------------

  struct Registration {
    int assignment = 0;
    bool started = false;
  };

  /// Registers a worker and starts an assignment when none is in progress.
  Registration register_worker(const std::string& worker_id) {
    if (worker_id.empty()) throw Error(ErrorCode::invalid_argument, "worker id must be non-empty");
    std::lock_guard lock(mu_);
    if (!workers_.contains(worker_id)) record({{"type", "worker"}, {"workerId", worker_id}});
    auto& w = workers_.at(worker_id);
    if (w.assignment == 0 || assignment_complete(w)) {
      record({{"type", "assignment"}, {"workerId", worker_id}, {"assignment", w.assignment + 1}});
      return {w.assignment, true};
    }
    return {w.assignment, false};
  }

  /// Next page for the worker: the open page if one is leased, else a fresh
  /// page of up to page_size questions from one job, with the assignment's
  /// test questions interleaved. Empty when there is nothing to do or the
  /// assignment is complete.
  std::optional<QuestionPage> next_page(const std::string& worker_id) {
    std::lock_guard lock(mu_);
    auto& w = worker(worker_id);
    expire_overdue();
    if (!w.open_page.empty()) return pages_.at(w.open_page);
    if (w.assignment == 0 || w.scored) return std::nullopt;

    const int ps = cfg_.page_size;
    const bool within_limit = w.pages_issued < cfg_.pages_per_assignment;
    const int tests_left = w.tests_total - w.tests_issued;

    int due = 0;
    if (within_limit) {
      const int window_end = (w.pages_issued + 1) * ps;
      const auto scheduled = std::lower_bound(w.test_slots.begin(), w.test_slots.end(), window_end) - w.test_slots.begin();
      due = std::clamp(static_cast<int>(scheduled) - w.tests_issued, 0, ps);
    }

    std::vector<PageEntry> real;
    std::string label;
    if (within_limit) real = pick_real_tasks(w, ps - due, label);

    std::vector<int> test_slots;  // scheduled slot of each test on this page, -1 if overdue
    if (real.empty()) {
      // Nothing to label. Flush the remaining tests so held votes can be scored.
      if (w.provisional_jobs.empty() || tests_left <= 0) return std::nullopt;
      label = w.last_label;
      for (int i = 0; i < std::min(tests_left, ps); ++i) test_slots.push_back(-1);
    } else {
      const int window_begin = w.pages_issued * ps;
      for (int i = 0; i < due; ++i) {
        const int slot = w.test_slots[w.tests_issued + i];
        test_slots.push_back(slot >= window_begin ? slot - window_begin : -1);
      }
    }

    // Tests sit at their scheduled in-page position; overdue tests and real
    // questions fill the remaining positions in order.
    std::vector<std::optional<PageEntry>> pos(static_cast<std::size_t>(ps) + test_slots.size());
    std::map<std::string, int> serial = w.test_serial;
    std::vector<PageEntry> tests;
    for (std::size_t i = 0; i < test_slots.size(); ++i) tests.push_back(pick_test(w, label, serial));
    std::vector<PageEntry> overdue;
    for (std::size_t i = 0; i < tests.size(); ++i) {
      if (test_slots[i] >= 0 && !pos[test_slots[i]]) pos[test_slots[i]] = tests[i];
      else overdue.push_back(tests[i]);
    }
    std::size_t next_real = 0;
    std::size_t next_overdue = 0;
    for (auto& p : pos) {
      if (p) continue;
      if (next_overdue < overdue.size()) p = overdue[next_overdue++];
      else if (next_real < real.size()) p = real[next_real++];
    }

    json tasks = json::array();
    for (const auto& p : pos) {
      if (!p) continue;
      tasks.push_back({{"taskId", p->task_id}, {"kind", to_string(p->kind)}, {"jobId", p->job_id},
                       {"imageId", p->image_id}, {"rect", to_json(p->rect)}});
    }
    const auto token = make_token(page_serial_ + 1, worker_id);
    record({{"type", "page"},
            {"token", token},
            {"workerId", worker_id},
            {"assignment", w.assignment},
            {"index", w.pages_issued},
            {"label", label},
            {"issuedAt", clock_()},
            {"tasks", std::move(tasks)}});
    return pages_.at(token);
  }

  /// Takes a page's answers. Votes stay provisional until the worker's
  /// assignment is scored on its test questions; a rejected assignment
  /// discards its votes and redeploys their questions to other workers.
  SubmitOutcome submit_page(const PageSubmission& sub) {
    std::vector<JobEntry*> touched;
    SubmitOutcome outcome;
    {
      std::lock_guard lock(mu_);
      auto it = pages_.find(sub.token);
      if (it == pages_.end()) throw Error(ErrorCode::unknown_token, "unknown page token");
      auto& page = it->second;
      if (page.submitted) throw Error(ErrorCode::duplicate_submission, "page " + sub.token + " already answered");
      if (page.worker_id != sub.worker_id) throw Error(ErrorCode::token_mismatch, "page is leased to another worker");
      if (!page.expired && clock_() >= page.issued_at + cfg_.lease_ttl_ms) {
        record({{"type", "expire"}, {"token", sub.token}});
      }
      if (page.expired) throw Error(ErrorCode::lease_expired, "lease on page " + sub.token + " expired");
      if (sub.answers.size() != page.tasks.size()) {
        throw Error(ErrorCode::count_mismatch, "page has " + std::to_string(page.tasks.size()) + " questions, got " +
                                                   std::to_string(sub.answers.size()) + " answers");
      }
      if (!(sub.elapsed_ms > 0.0)) throw Error(ErrorCode::invalid_argument, "elapsedMs must be positive");

      // Group real answers by job, validating against job state before logging.
      std::map<std::string, std::vector<AnswerRecord>> by_job;
      for (std::size_t i = 0; i < page.tasks.size(); ++i) {
        if (!page.tasks[i].is_test()) by_job[page.tasks[i].job_id].push_back({page.tasks[i].task_id, sub.answers[i]});
      }
      std::vector<std::unique_lock<std::mutex>> job_locks;
      for (const auto& [job_id, _] : by_job) {
        auto* e = jobs_.at(job_id).get();
        job_locks.emplace_back(e->mu);
        touched.push_back(e);
      }

      const int page_size = static_cast<int>(page.tasks.size());
      const auto assignment = page.assignment;
      record({{"type", "submit"},
              {"token", sub.token},
              {"workerId", sub.worker_id},
              {"answers", sub.answers},
              {"elapsedMs", sub.elapsed_ms}});
      for (std::size_t k = 0; k < touched.size(); ++k) {
        touched[k]->job->ingest_votes(sub.worker_id, assignment, sub.token, sub.elapsed_ms, page_size,
                                      by_job.at(touched[k]->job->id()));
      }

      auto& w = workers_.at(sub.worker_id);
      const bool scoring_due = w.tests_total > 0 ? static_cast<int>(w.test_answers.size()) == w.tests_total
                                                 : !by_job.empty();
      if (scoring_due) {
        const auto report = validity_score(sub.worker_id, w.test_answers, test_truth_, cfg_.job.valid_threshold);
        const auto jobs = w.provisional_jobs;
        record({{"type", "scored"},
                {"workerId", sub.worker_id},
                {"assignment", w.assignment},
                {"correct", report.test_correct},
                {"total", report.test_total},
                {"score", report.score},
                {"accepted", report.accepted}});
        job_locks.clear();
        for (const auto& job_id : jobs) {
          auto* e = jobs_.at(job_id).get();
          std::lock_guard jl(e->mu);
          e->job->apply_verdict(sub.worker_id, assignment, report.accepted);
          if (std::find(touched.begin(), touched.end(), e) == touched.end()) touched.push_back(e);
        }
        outcome.accepted = report.accepted;
        if (w.tests_total > 0) outcome.validity = report;
      }
    }
    for (auto* e : touched) drive(*e);
    return outcome;
  }

  /// Stores a polygon annotation for comparison reports; returns its id.
  int submit_polygon(const PolygonAnnotation& ann) {
    const auto image = load_image(find_image(ann.image_id));
    validate_polygon(ann.points, image.width(), image.height());
    if (!(ann.elapsed_ms > 0.0)) throw Error(ErrorCode::invalid_argument, "elapsedMs must be positive");
    std::lock_guard lock(mu_);
    json pts = json::array();
    for (const auto& p : ann.points) pts.push_back({p.x, p.y});
    const int id = static_cast<int>(polygons_.size()) + 1;
    record({{"type", "polygon"},
            {"id", id},
            {"imageId", ann.image_id},
            {"workerId", ann.worker_id},
            {"points", std::move(pts)},
            {"elapsedMs", ann.elapsed_ms}});
    return id;
  }

  std::vector<PolygonAnnotation> polygons() {
    std::lock_guard lock(mu_);
    return polygons_;
  }

  // ---- task media ---------------------------------------------------------

  RasterImage task_image(const std::string& task_id) {
    if (const auto* t = find_test(task_id)) return crop_patch(load_image(find_image(t->image_id)), t->rect);
    auto& e = entry_for_task(task_id);
    std::lock_guard lock(e.mu);
    return e.job->task_image(*e.job->find_task(task_id));
  }

  /// Binary mask of the region a question asks about, over the full image.
  GrayMask task_region(const std::string& task_id) {
    if (const auto* t = find_test(task_id)) {
      const auto img = load_image(find_image(t->image_id));
      GrayMask m(img.width(), img.height(), 0.0);
      for (int y = t->rect.y; y < t->rect.bottom(); ++y) {
        for (int x = t->rect.x; x < t->rect.right(); ++x) m.set(x, y, 1.0);
      }
      return m;
    }
    auto& e = entry_for_task(task_id);
    std::lock_guard lock(e.mu);
    return e.job->task_region(*e.job->find_task(task_id));
  }

  // ---- introspection used by tests and the simulator ----------------------

  struct WorkerSummary {
    int assignment = 0;
    int pages_issued = 0;
    int tests_total = 0;
    int tests_answered = 0;
    bool scored = false;
    std::vector<ValidityReport> history;
  };

  WorkerSummary worker_summary(const std::string& worker_id) {
    std::lock_guard lock(mu_);
    const auto& w = worker(worker_id);
    return {w.assignment, w.pages_issued, w.tests_total, static_cast<int>(w.test_answers.size()), w.scored, w.history};
  }

  /// Count of task instances currently leased on open pages.
  std::size_t leased_count() {
    std::lock_guard lock(mu_);
    return leases_.size();
  }

 private:
  struct JobEntry {
    std::mutex mu;
    std::unique_ptr<Job> job;
  };

  struct WorkerState {
    std::string id;
    int assignment = 0;
    int pages_issued = 0;
    std::vector<int> test_slots;  // sorted positions within the assignment
    int tests_total = 0;
    int tests_issued = 0;
    std::map<std::string, int> test_serial;  // per label
    std::vector<std::pair<std::string, bool>> test_answers;
    bool scored = false;
    std::string open_page;
    std::string last_label;
    std::set<std::string> provisional_jobs;
    std::vector<ValidityReport> history;
  };

  // ---- state changes: every one is an event ------------------------------

  void record(const json& ev) {
    log_.append(ev);
    apply(ev);
  }

  void apply(const json& ev) {
    const auto type = ev.at("type").get<std::string>();
    if (type == "worker") {
      const auto id = ev.at("workerId").get<std::string>();
      workers_[id].id = id;
    } else if (type == "assignment") {
      auto& w = workers_.at(ev.at("workerId").get<std::string>());
      start_assignment(w, ev.at("assignment").get<int>());
    } else if (type == "page") {
      QuestionPage p;
      p.token = ev.at("token").get<std::string>();
      p.worker_id = ev.at("workerId").get<std::string>();
      p.label = ev.at("label").get<std::string>();
      p.assignment = ev.at("assignment").get<int>();
      p.index = ev.at("index").get<int>();
      p.issued_at = ev.at("issuedAt").get<std::int64_t>();
      auto& w = workers_.at(p.worker_id);
      for (const auto& t : ev.at("tasks")) {
        PageEntry e{t.at("taskId").get<std::string>(), task_kind_from_string(t.at("kind").get<std::string>()),
                    t.at("jobId").get<std::string>(), t.at("imageId").get<std::string>(), rect_from_json(t.at("rect"))};
        if (e.is_test()) {
          ++p.tests;
          ++w.test_serial[p.label];
        } else {
          leases_[e.task_id] = p.token;
        }
        p.tasks.push_back(std::move(e));
      }
      w.open_page = p.token;
      ++w.pages_issued;
      w.tests_issued += p.tests;
      w.last_label = p.label;
      ++page_serial_;
      pages_[p.token] = std::move(p);
    } else if (type == "expire") {
      auto& p = pages_.at(ev.at("token").get<std::string>());
      p.expired = true;
      release(p);
      auto& w = workers_.at(p.worker_id);
      if (w.assignment == p.assignment) w.tests_issued -= p.tests;
    } else if (type == "submit") {
      auto& p = pages_.at(ev.at("token").get<std::string>());
      const auto answers = ev.at("answers").get<std::vector<bool>>();
      p.submitted = true;
      release(p);
      auto& w = workers_.at(p.worker_id);
      for (std::size_t i = 0; i < p.tasks.size(); ++i) {
        if (p.tasks[i].is_test()) w.test_answers.emplace_back(p.tasks[i].task_id, answers[i]);
        else w.provisional_jobs.insert(p.tasks[i].job_id);
      }
    } else if (type == "scored") {
      auto& w = workers_.at(ev.at("workerId").get<std::string>());
      ValidityReport r{w.id, ev.at("total").get<int>(), ev.at("correct").get<int>(), ev.at("score").get<double>(),
                       ev.at("accepted").get<bool>()};
      w.history.push_back(r);
      w.provisional_jobs.clear();
      if (w.tests_total > 0) w.scored = true;
    } else if (type == "polygon") {
      PolygonAnnotation a;
      a.image_id = ev.at("imageId").get<std::string>();
      a.worker_id = ev.at("workerId").get<std::string>();
      a.elapsed_ms = ev.at("elapsedMs").get<double>();
      for (const auto& p : ev.at("points")) a.points.push_back({p[0].get<double>(), p[1].get<double>()});
      polygons_.push_back(std::move(a));
    } else {
      throw Error(ErrorCode::parse_error, "unknown service event " + type);
    }
  }

  void release(QuestionPage& p) {
    for (const auto& t : p.tasks) {
      auto it = leases_.find(t.task_id);
      if (it != leases_.end() && it->second == p.token) leases_.erase(it);
    }
    auto& w = workers_.at(p.worker_id);
    if (w.open_page == p.token) w.open_page.clear();
  }

  void start_assignment(WorkerState& w, int n) {
    w.assignment = n;
    w.pages_issued = 0;
    w.tests_issued = 0;
    w.test_serial.clear();
    w.test_answers.clear();
    w.scored = false;
    w.open_page.clear();
    const int capacity = cfg_.pages_per_assignment * cfg_.page_size;
    w.tests_total = std::min(cfg_.job.test_questions_per_worker, capacity);
    // Uniformly random distinct positions (partial Fisher-Yates).
    auto rng = CounterRng(cfg_.seed).split("test-slots").split(w.id).split(static_cast<std::uint64_t>(n));
    std::vector<int> all(static_cast<std::size_t>(capacity));
    std::iota(all.begin(), all.end(), 0);
    for (int i = 0; i < w.tests_total; ++i) {
      const auto j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(capacity - i)));
      std::swap(all[i], all[j]);
    }
    w.test_slots.assign(all.begin(), all.begin() + w.tests_total);
    std::sort(w.test_slots.begin(), w.test_slots.end());
  }

  bool assignment_complete(const WorkerState& w) const {
    if (w.scored) return true;
    if (w.pages_issued < cfg_.pages_per_assignment || !w.open_page.empty()) return false;
    return w.tests_total == 0 || w.provisional_jobs.empty();
  }

  void expire_overdue() {
    const auto now = clock_();
    std::vector<std::string> overdue;
    for (const auto& [token, p] : pages_) {
      if (!p.submitted && !p.expired && now >= p.issued_at + cfg_.lease_ttl_ms) overdue.push_back(token);
    }
    for (const auto& token : overdue) record({{"type", "expire"}, {"token", token}});
  }

  // Up to `want` distinct questions from the first job (in id order) that has
  // any this worker may take.
  std::vector<PageEntry> pick_real_tasks(const WorkerState& w, int want, std::string& label) {
    std::vector<PageEntry> out;
    if (want <= 0) return out;
    for (auto& [id, e] : jobs_) {
      std::unique_lock jl(e->mu, std::try_to_lock);
      if (!jl.owns_lock()) continue;  // advancing; its tasks are not ready
      const auto& job = *e->job;
      if (is_terminal(job.state())) continue;
      std::set<int> slots;
      for (const auto& t : job.pending_tasks()) {
        if (leases_.contains(t.task_id) || !job.worker_may_take(t, w.id) || slots.contains(t.slot)) continue;
        slots.insert(t.slot);
        out.push_back({t.task_id, t.kind, t.job_id, t.image_id, t.rect});
        if (static_cast<int>(out.size()) == want) break;
      }
      if (!out.empty()) {
        label = job.label();
        return out;
      }
    }
    return out;
  }

  // The n-th test of a label in an assignment walks a seeded permutation of
  // that label's pool.
  PageEntry pick_test(const WorkerState& w, const std::string& label, std::map<std::string, int>& serial) const {
    auto it = pool_by_label_.find(label);
    if (it == pool_by_label_.end() || it->second.empty()) {
      throw Error(ErrorCode::precondition, "no test questions for label '" + label + "'");
    }
    std::vector<std::size_t> order = it->second;
    auto rng = CounterRng(cfg_.seed).split("test-order").split(w.id).split(static_cast<std::uint64_t>(w.assignment)).split(label);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    const auto& item = pool_[order[static_cast<std::size_t>(serial[label]++) % order.size()]];
    return {item.task_id(), TaskKind::test, "", item.image_id, item.rect};
  }

  std::string make_token(std::uint64_t serial, const std::string& worker_id) const {
    char buf[48];
    std::snprintf(buf, sizeof buf, "p%llu-%016llx", static_cast<unsigned long long>(serial),
                  static_cast<unsigned long long>(splitmix64_mix(cfg_.seed ^ fnv1a64(worker_id) ^ serial)));
    return buf;
  }

  EventSink job_sink(const std::string& id) {
    return [this, id](const json& ev) { log_.append_job(id, ev); };
  }

  // Advances a job for as long as its quota is met.
  void drive(JobEntry& e) {
    std::lock_guard lock(e.mu);
    while (e.job->ready_to_advance()) e.job->advance();
  }

  void recover() {
    const auto events = log_.read_all();
    std::map<std::string, std::vector<json>> job_events;
    std::vector<std::string> order;
    for (const auto& ev : events) {
      if (ev.value("type", "") == "job") {
        const auto id = ev.at("jobId").get<std::string>();
        if (!job_events.contains(id)) order.push_back(id);
        job_events[id].push_back(ev.at("event"));
      } else {
        apply(ev);
      }
    }
    for (const auto& id : order) {
      const auto& evs = job_events.at(id);
      auto image = load_image(find_image(evs.front().at("imageId").get<std::string>()));
      auto e = std::make_unique<JobEntry>();
      e->job = std::make_unique<Job>(Job::replay(evs, std::move(image), log_.job_dir(id)));
      e->job->set_sink(job_sink(id));
      jobs_.emplace(id, std::move(e));
    }
    log_.rebuild_projections(events);
    // A crash between a score and its verdicts leaves scored votes held.
    for (auto& [id, e] : jobs_) {
      for (auto& [wid, w] : workers_) {
        if (w.history.empty() || w.provisional_jobs.contains(id) || !e->job->has_provisional(wid)) continue;
        e->job->apply_verdict(wid, w.assignment, w.history.back().accepted);
      }
    }
    // A crash between a verdict and the advance it enables leaves the quota
    // met; advancing now is what the live run would have done.
    for (auto& [id, e] : jobs_) drive(*e);
  }

  void set_test_pool_unlocked(std::vector<TestItem> pool) {
    pool_ = std::move(pool);
    pool_by_label_.clear();
    pool_labels_.clear();
    test_truth_.clear();
    test_index_.clear();
    for (std::size_t i = 0; i < pool_.size(); ++i) {
      pool_by_label_[pool_[i].label].push_back(i);
      pool_labels_.insert(pool_[i].label);
      test_truth_[pool_[i].task_id()] = pool_[i].truth;
      test_index_[pool_[i].task_id()] = i;
    }
  }

  const TestItem* find_test(const std::string& task_id) {
    std::lock_guard lock(mu_);
    auto it = test_index_.find(task_id);
    return it == test_index_.end() ? nullptr : &pool_[it->second];
  }

  std::filesystem::path find_image(const std::string& image_id) const {
    if (image_id.empty() || image_id.find('/') != std::string::npos || image_id.find("..") != std::string::npos) {
      throw Error(ErrorCode::invalid_argument, "bad image id");
    }
    for (const char* ext : {".png", ".pgm"}) {
      auto p = data_ / "images" / (image_id + ext);
      if (std::filesystem::exists(p)) return p;
    }
    throw Error(ErrorCode::not_found, "image " + image_id);
  }

  WorkerState& worker(const std::string& id) {
    auto it = workers_.find(id);
    if (it == workers_.end()) throw Error(ErrorCode::unknown_worker, "worker " + id);
    return it->second;
  }

  JobEntry& entry(const std::string& id) {
    std::lock_guard lock(mu_);
    auto it = jobs_.find(id);
    if (it == jobs_.end()) throw Error(ErrorCode::not_found, "job " + id);
    return *it->second;
  }

  JobEntry& entry_for_task(const std::string& task_id) {
    const auto cut = task_id.rfind("-t");
    if (cut == std::string::npos) throw Error(ErrorCode::not_found, "task " + task_id);
    auto& e = entry(task_id.substr(0, cut));
    std::lock_guard lock(e.mu);
    if (!e.job->find_task(task_id)) throw Error(ErrorCode::not_found, "task " + task_id);
    return e;
  }

  std::filesystem::path data_;
  ServiceConfig cfg_;
  Clock clock_;
  EventLog log_;

  std::mutex mu_;  // guards everything below; job state has its own lock
  std::map<std::string, std::unique_ptr<JobEntry>> jobs_;
  std::map<std::string, WorkerState> workers_;
  std::map<std::string, QuestionPage> pages_;
  std::map<std::string, std::string> leases_;  // taskId -> page token
  std::vector<PolygonAnnotation> polygons_;
  std::uint64_t page_serial_ = 0;

  std::vector<TestItem> pool_;
  std::map<std::string, std::vector<std::size_t>> pool_by_label_;
  std::set<std::string> pool_labels_;
  std::map<std::string, bool> test_truth_;
  std::map<std::string, std::size_t> test_index_;
};

}  // namespace patchlab
