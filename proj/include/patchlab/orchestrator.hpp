#pragma once

// Per-image extraction job: saliency, crowd verification of the salient area
// and its pixel groups, then shrinking rounds of overlapped patch labeling
// whose soft-voted responses are merged into the attention mask.
//
// Every mutation is an event. Live operations validate, hand the event to the
// sink (write-ahead), then apply it; replay applies the same events through
// the same code, so a replayed job is identical to the live one.

#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "aggregation.hpp"
#include "config.hpp"
#include "image_io.hpp"
#include "metrics.hpp"
#include "patching.hpp"
#include "saliency.hpp"
#include "segmentation.hpp"

namespace patchlab {

enum class JobState { created, saliency_done, saliency_verify, group_verify, patch_round, finalized, terminated_early };

constexpr std::string_view to_string(JobState s) {
  switch (s) {
    case JobState::created: return "Created";
    case JobState::saliency_done: return "SaliencyDone";
    case JobState::saliency_verify: return "SaliencyVerify";
    case JobState::group_verify: return "GroupVerify";
    case JobState::patch_round: return "PatchRound";
    case JobState::finalized: return "Finalized";
    case JobState::terminated_early: return "TerminatedEarly";
  }
  return "?";
}

constexpr bool is_terminal(JobState s) { return s == JobState::finalized || s == JobState::terminated_early; }

/// One binary question. Instances of the same question within a stage share
/// `slot`; each instance collects exactly one accepted vote.
struct PatchTask {
  std::string task_id;
  std::string job_id;
  std::string image_id;
  std::string label;
  TaskKind kind = TaskKind::patch_label;
  Rect rect;
  int stage = 0;
  int slot = 0;
};

inline json to_json(const Rect& r) { return json::array({r.x, r.y, r.w, r.h}); }

inline Rect rect_from_json(const json& j) {
  if (!j.is_array() || j.size() != 4) throw Error(ErrorCode::parse_error, "rect must be [x,y,w,h]");
  return {j[0].get<int>(), j[1].get<int>(), j[2].get<int>(), j[3].get<int>()};
}

inline json to_json(const PatchTask& t) {
  return {{"taskId", t.task_id}, {"jobId", t.job_id}, {"imageId", t.image_id}, {"label", t.label},
          {"kind", to_string(t.kind)}, {"rect", to_json(t.rect)}, {"stage", t.stage}, {"slot", t.slot}};
}

struct AnswerRecord {
  std::string task_id;
  bool answer = false;
};

struct AcceptedVote {
  PatchTask task;
  std::string worker_id;
  bool answer = false;
  double time_ms = 0.0;
};

struct AdvanceResult {
  JobState state = JobState::created;
  std::vector<PatchTask> tasks;  // newly emitted
  bool terminal = false;
};

using EventSink = std::function<void(const json&)>;

class Job {
 public:
  /// Creates a job in state Created. The `created` event goes to the sink.
  static Job create(std::string job_id, std::string image_id, std::string label, JobConfig config, RasterImage image,
                    std::filesystem::path dir, EventSink sink) {
    config.validate();
    json ev = {{"type", "created"},       {"jobId", job_id},           {"imageId", image_id},
               {"label", label},          {"config", to_json(config)}, {"width", image.width()},
               {"height", image.height()}};
    if (sink) sink(ev);
    Job job(std::move(image), std::move(dir));
    job.apply(ev);
    job.sink_ = std::move(sink);
    return job;
  }

  /// Rebuilds a job from its event stream. The first event must be `created`.
  static Job replay(const std::vector<json>& events, RasterImage image, std::filesystem::path dir) {
    if (events.empty() || events.front().value("type", "") != "created") {
      throw Error(ErrorCode::parse_error, "job log must start with a created event");
    }
    Job job(std::move(image), std::move(dir));
    for (const auto& ev : events) job.apply(ev);
    return job;
  }

  void set_sink(EventSink sink) { sink_ = std::move(sink); }

  const std::string& id() const noexcept { return id_; }
  const std::string& image_id() const noexcept { return image_id_; }
  const std::string& label() const noexcept { return label_; }
  const JobConfig& config() const noexcept { return config_; }
  const RasterImage& image() const noexcept { return image_; }
  JobState state() const noexcept { return p_.state; }
  int iteration() const noexcept { return p_.iteration; }
  int grid_size() const noexcept { return p_.grid_size; }
  int width() const noexcept { return image_.width(); }
  int height() const noexcept { return image_.height(); }
  const std::optional<GrayMask>& saliency() const noexcept { return p_.saliency; }
  const std::vector<PixelGroup>& groups() const noexcept { return p_.groups; }
  const std::vector<AcceptedVote>& accepted_votes() const noexcept { return accepted_; }
  int redeployed() const noexcept { return redeployed_; }
  int patch_tasks_emitted() const noexcept { return patch_tasks_emitted_; }
  int verdicts_accepted() const noexcept { return verdicts_accepted_; }
  int verdicts_rejected() const noexcept { return verdicts_rejected_; }
  const std::vector<int>& rounds_written() const noexcept { return rounds_; }
  const std::string& end_reason() const noexcept { return p_.end_reason; }

  /// Current mask: the previous mask once it exists, else the saliency map.
  std::optional<GrayMask> current_mask() const {
    if (p_.prev) return p_.prev;
    return p_.saliency;
  }

  /// All task instances of the current stage have an accepted vote.
  bool quota_met() const {
    for (const auto& t : p_.tasks) {
      if (t.status != Status::accepted) return false;
    }
    return true;
  }

  bool ready_to_advance() const { return !is_terminal(p_.state) && quota_met(); }

  /// Pending (unanswered, unheld) task instances of the current stage, in emission order.
  std::vector<PatchTask> pending_tasks() const {
    std::vector<PatchTask> out;
    for (const auto& t : p_.tasks) {
      if (t.status == Status::pending) out.push_back(t.task);
    }
    return out;
  }

  /// A worker answers each question at most once; rejected workers stay excluded.
  bool worker_may_take(const PatchTask& task, const std::string& worker_id) const {
    if (task.stage != p_.stage) return false;
    auto it = p_.slot_workers.find(task.slot);
    return it == p_.slot_workers.end() || !it->second.contains(worker_id);
  }

  const PatchTask* find_task(const std::string& task_id) const {
    auto it = all_tasks_.find(task_id);
    return it == all_tasks_.end() ? nullptr : &it->second;
  }

  bool has_provisional(const std::string& worker_id) const {
    for (const auto& t : p_.tasks) {
      if (t.status == Status::provisional && t.holder == worker_id) return true;
    }
    return false;
  }

  /// Executes one state-machine transition.
  AdvanceResult advance() {
    if (is_terminal(p_.state)) throw Error(ErrorCode::wrong_state, "job " + id_ + " already ended");
    if (!quota_met()) throw Error(ErrorCode::precondition, "job " + id_ + ": vote quota of current stage not met");
    Progress next = p_;
    transition(next);
    json ev = {{"type", "advance"}, {"to", to_string(next.state)}};
    emit(ev);
    AdvanceResult result;
    const int before = p_.stage;
    commit(std::move(next));
    result.state = p_.state;
    result.terminal = is_terminal(p_.state);
    if (p_.stage != before) {
      for (const auto& t : p_.tasks) result.tasks.push_back(t.task);
    }
    return result;
  }

  /// Records a worker's answers for this job's tasks from one page. The
  /// votes are provisional until the worker's assignment is scored.
  void ingest_votes(const std::string& worker_id, int assignment, const std::string& token, double elapsed_ms,
                    int page_size, const std::vector<AnswerRecord>& answers) {
    for (const auto& a : answers) {
      const auto* rec = find_current(a.task_id);
      if (!rec) throw Error(ErrorCode::unknown_task, a.task_id + " is not in the current stage of " + id_);
      if (rec->status != Status::pending) throw Error(ErrorCode::conflict, a.task_id + " already answered");
      if (!worker_may_take(rec->task, worker_id)) {
        throw Error(ErrorCode::conflict, worker_id + " already answered the question behind " + a.task_id);
      }
    }
    json list = json::array();
    for (const auto& a : answers) list.push_back({{"taskId", a.task_id}, {"answer", a.answer}});
    json ev = {{"type", "votes"},        {"workerId", worker_id},   {"assignment", assignment},
               {"token", token},         {"elapsedMs", elapsed_ms}, {"pageSize", page_size},
               {"answers", std::move(list)}};
    emit(ev);
    apply(ev);
  }

  /// Accepts or rejects every provisional vote of the worker. Rejected tasks
  /// go back to pending unchanged, and the worker stays excluded from them.
  void apply_verdict(const std::string& worker_id, int assignment, bool accepted) {
    json ev = {{"type", "verdict"}, {"workerId", worker_id}, {"assignment", assignment}, {"accepted", accepted}};
    emit(ev);
    apply(ev);
  }

  /// Final attention mask; also persisted as attention.pgm.
  GrayMask finalize() const {
    if (!is_terminal(p_.state)) {
      throw Error(ErrorCode::wrong_state, "job " + id_ + " is in " + std::string(to_string(p_.state)));
    }
    if (!dir_.empty()) write_mask(*p_.prev, dir_ / "attention.pgm");
    return *p_.prev;
  }

  json status_json() const {
    return {{"jobId", id_}, {"state", to_string(p_.state)}, {"iteration", p_.iteration}, {"gridSize", p_.grid_size}};
  }

  /// Region a verification task asks about, as a binary mask over the image.
  GrayMask task_region(const PatchTask& task) const {
    switch (task.kind) {
      case TaskKind::saliency_verify:
        return threshold_mask(*p_.saliency, config_.bin_threshold);
      case TaskKind::group_verify:
        return group_region(group_for(task), width(), height());
      default: {
        GrayMask m(width(), height(), 0.0);
        for (int y = task.rect.y; y < task.rect.bottom(); ++y) {
          for (int x = task.rect.x; x < task.rect.right(); ++x) m.set(x, y, 1.0);
        }
        return m;
      }
    }
  }

  /// Image shown to the worker: the patch crop, with pixels outside the
  /// asked-about region darkened for verification questions.
  RasterImage task_image(const PatchTask& task) const {
    if (task.kind == TaskKind::patch_label) return crop_patch(image_, task.rect);
    const auto region = task_region(task);
    RasterImage shown = image_;
    for (int y = 0; y < height(); ++y) {
      for (int x = 0; x < width(); ++x) {
        if (region.at(x, y) > 0.0) continue;
        for (int c = 0; c < shown.channels(); ++c) shown.at(x, y, c) = static_cast<std::uint8_t>(shown.at(x, y, c) / 4);
      }
    }
    return crop_patch(shown, task.rect);
  }

 private:
  enum class Status { pending, provisional, accepted };

  struct TaskRecord {
    PatchTask task;
    Status status = Status::pending;
    std::string holder;
    bool answer = false;
    double time_ms = 0.0;
  };

  // Everything a transition may change; copied, transformed, then committed.
  struct Progress {
    JobState state = JobState::created;
    std::optional<GrayMask> saliency;
    std::vector<PixelGroup> groups;
    std::optional<GrayMask> prev;
    int grid_size = 0;
    int iteration = 0;
    int stage = 0;
    int task_seq = 0;
    std::vector<TaskRecord> tasks;
    std::map<int, std::set<std::string>> slot_workers;
    std::optional<int> merged_round;
    bool new_saliency = false;
    std::string end_reason;
  };

  Job(RasterImage image, std::filesystem::path dir) : image_(std::move(image)), dir_(std::move(dir)) {}

  void emit(const json& ev) {
    if (sink_) sink_(ev);
  }

  const PixelGroup& group_for(const PatchTask& task) const {
    if (task.slot < 0 || static_cast<std::size_t>(task.slot) >= p_.groups.size()) {
      throw Error(ErrorCode::unknown_task, "no group behind " + task.task_id);
    }
    return p_.groups[task.slot];
  }

  const TaskRecord* find_current(const std::string& task_id) const {
    for (const auto& t : p_.tasks) {
      if (t.task.task_id == task_id) return &t;
    }
    return nullptr;
  }
  TaskRecord* find_current(const std::string& task_id) {
    return const_cast<TaskRecord*>(std::as_const(*this).find_current(task_id));
  }

  // Accepted answers of the current stage grouped by slot.
  std::map<int, std::vector<bool>> answers_by_slot(const Progress& p) const {
    std::map<int, std::vector<bool>> out;
    for (const auto& t : p.tasks) out[t.task.slot].push_back(t.answer);
    return out;
  }

  void emit_stage(Progress& p, TaskKind kind, const std::vector<Rect>& rects, int instances) const {
    ++p.stage;
    p.tasks.clear();
    p.slot_workers.clear();
    for (int slot = 0; slot < static_cast<int>(rects.size()); ++slot) {
      for (int k = 0; k < instances; ++k) {
        PatchTask t;
        t.task_id = id_ + "-t" + std::to_string(++p.task_seq);
        t.job_id = id_;
        t.image_id = image_id_;
        t.label = label_;
        t.kind = kind;
        t.rect = rects[slot];
        t.stage = p.stage;
        t.slot = slot;
        TaskRecord rec;
        rec.task = std::move(t);
        p.tasks.push_back(std::move(rec));
      }
    }
  }

  void end(Progress& p, JobState state, std::string reason) const {
    p.state = state;
    p.tasks.clear();
    p.slot_workers.clear();
    p.end_reason = std::move(reason);
  }

  // Emits the next patch round, or finalizes when the grid is below the
  // minimum or no patch survives the coverage filter.
  void enter_patch_round(Progress& p) const {
    if (p.grid_size < config_.min_size) return end(p, JobState::finalized, "grid below minimum");
    const auto grid = overlap_grid(width(), height(), p.grid_size);
    const auto kept = filter_patches(grid, *p.prev, config_.coverage_threshold, config_.bin_threshold);
    if (kept.empty()) return end(p, JobState::finalized, "no patch passed the coverage filter");
    ++p.iteration;
    emit_stage(p, TaskKind::patch_label, kept, config_.votes_per_patch);
    p.state = JobState::patch_round;
  }

  void transition(Progress& p) const {
    p.merged_round.reset();
    p.new_saliency = false;
    const Rect full{0, 0, width(), height()};
    switch (p.state) {
      case JobState::created:
        p.saliency = multiscale_saliency(image_, config_.saliency, image_id_);
        p.new_saliency = true;
        p.state = JobState::saliency_done;
        return;

      case JobState::saliency_done:
        emit_stage(p, TaskKind::saliency_verify, {full}, config_.votes_per_group);
        p.state = JobState::saliency_verify;
        return;

      case JobState::saliency_verify: {
        const auto answers = answers_by_slot(p)[0];
        const bool recognized = std::any_of(answers.begin(), answers.end(), [](bool a) { return a; });
        if (!recognized) {
          // The whole image is treated as salient and pixel clustering is skipped.
          p.prev = GrayMask(width(), height(), 1.0);
          p.grid_size = std::min(config_.init_size, std::max(width(), height()));
          return enter_patch_round(p);
        }
        p.groups = filter_groups(
            connected_components(threshold_mask(*p.saliency, config_.bin_threshold), config_.connectivity),
            config_.min_group_size);
        if (p.groups.empty()) {
          p.prev = p.saliency;
          return end(p, JobState::terminated_early, "no pixel group above the minimum size");
        }
        std::vector<Rect> boxes;
        for (const auto& g : p.groups) boxes.push_back(g.bbox);
        emit_stage(p, TaskKind::group_verify, boxes, config_.votes_per_group);
        p.state = JobState::group_verify;
        return;
      }

      case JobState::group_verify: {
        auto by_slot = answers_by_slot(p);
        std::vector<bool> verdicts(p.groups.size(), false);
        std::vector<PixelGroup> confirmed;
        for (std::size_t i = 0; i < p.groups.size(); ++i) {
          const auto& a = by_slot[static_cast<int>(i)];
          verdicts[i] = std::any_of(a.begin(), a.end(), [](bool v) { return v; });
          if (verdicts[i]) confirmed.push_back(p.groups[i]);
        }
        auto outcome = apply_group_verdicts(*p.saliency, p.groups, verdicts);
        p.prev = std::move(outcome.target_map);
        if (outcome.kind == SegmentationKind::terminate_with_full_map) {
          return end(p, JobState::terminated_early, "no group confirmed");
        }
        p.grid_size = std::min(config_.init_size, largest_object_size(confirmed));
        return enter_patch_round(p);
      }

      case JobState::patch_round: {
        std::vector<Vote> votes;
        for (const auto& t : p.tasks) votes.push_back({t.task.rect, t.holder, t.answer, t.task.kind});
        if (std::none_of(votes.begin(), votes.end(), [](const Vote& v) { return v.answer; })) {
          return end(p, JobState::finalized, "all answers negative");
        }
        p.prev = merge_masks(*p.prev, build_response_mask(width(), height(), votes), config_.blur_kernel());
        p.merged_round = p.iteration;
        const int shrunk = static_cast<int>(std::lround(p.grid_size * config_.shrink_ratio));
        p.grid_size = std::min(shrunk, p.grid_size - 1);
        return enter_patch_round(p);
      }

      case JobState::finalized:
      case JobState::terminated_early:
        throw Error(ErrorCode::wrong_state, "job already ended");
    }
  }

  void commit(Progress next) {
    p_ = std::move(next);
    for (const auto& t : p_.tasks) {
      if (all_tasks_.emplace(t.task.task_id, t.task).second && t.task.kind == TaskKind::patch_label) {
        ++patch_tasks_emitted_;
      }
    }
    if (!dir_.empty()) {
      if (p_.new_saliency) write_mask(*p_.saliency, dir_ / "saliency.pgm");
      if (p_.merged_round) write_mask(*p_.prev, dir_ / ("round-" + std::to_string(*p_.merged_round) + ".pgm"));
      if (is_terminal(p_.state)) write_mask(*p_.prev, dir_ / "attention.pgm");
    }
    if (p_.merged_round) rounds_.push_back(*p_.merged_round);
  }

  void apply(const json& ev) {
    const auto type = ev.at("type").get<std::string>();
    if (type == "created") {
      id_ = ev.at("jobId").get<std::string>();
      image_id_ = ev.at("imageId").get<std::string>();
      label_ = ev.at("label").get<std::string>();
      config_ = job_config_from_json(ev.at("config"));
      if (ev.at("width").get<int>() != image_.width() || ev.at("height").get<int>() != image_.height()) {
        throw Error(ErrorCode::dimension_mismatch, "image for job " + id_ + " changed size since creation");
      }
    } else if (type == "advance") {
      Progress next = p_;
      transition(next);
      const auto expected = ev.at("to").get<std::string>();
      if (to_string(next.state) != expected) {
        throw Error(ErrorCode::parse_error, "replay of " + id_ + " diverged: got " + std::string(to_string(next.state)) +
                                                ", log says " + expected);
      }
      commit(std::move(next));
    } else if (type == "votes") {
      const auto worker = ev.at("workerId").get<std::string>();
      const double per_task = per_patch_time(ev.at("elapsedMs").get<double>(), ev.at("pageSize").get<int>());
      for (const auto& a : ev.at("answers")) {
        auto* rec = find_current(a.at("taskId").get<std::string>());
        if (!rec) throw Error(ErrorCode::unknown_task, "votes for unknown task in " + id_);
        rec->status = Status::provisional;
        rec->holder = worker;
        rec->answer = a.at("answer").get<bool>();
        rec->time_ms = per_task;
        p_.slot_workers[rec->task.slot].insert(worker);
      }
    } else if (type == "verdict") {
      const auto worker = ev.at("workerId").get<std::string>();
      const bool ok = ev.at("accepted").get<bool>();
      bool any = false;
      for (auto& t : p_.tasks) {
        if (t.status != Status::provisional || t.holder != worker) continue;
        any = true;
        if (ok) {
          t.status = Status::accepted;
          accepted_.push_back({t.task, worker, t.answer, t.time_ms});
        } else {
          t.status = Status::pending;
          t.holder.clear();
          ++redeployed_;
        }
      }
      if (any) ++(ok ? verdicts_accepted_ : verdicts_rejected_);
    } else {
      throw Error(ErrorCode::parse_error, "unknown job event " + type);
    }
    if (!dir_.empty()) write_snapshot();
  }

  void write_snapshot() const {
    json snap = status_json();
    snap["imageId"] = image_id_;
    snap["label"] = label_;
    snap["width"] = width();
    snap["height"] = height();
    snap["config"] = to_json(config_);
    if (!p_.end_reason.empty()) snap["endReason"] = p_.end_reason;
    const auto text = snap.dump(2) + "\n";
    write_file_atomic(dir_ / "job.json", std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  }

  RasterImage image_;
  std::filesystem::path dir_;
  EventSink sink_;

  std::string id_;
  std::string image_id_;
  std::string label_;
  JobConfig config_;

  Progress p_;
  std::map<std::string, PatchTask> all_tasks_;
  std::vector<AcceptedVote> accepted_;
  std::vector<int> rounds_;
  int redeployed_ = 0;
  int patch_tasks_emitted_ = 0;
  int verdicts_accepted_ = 0;
  int verdicts_rejected_ = 0;
};

}  // namespace patchlab
