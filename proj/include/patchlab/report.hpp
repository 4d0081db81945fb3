#pragma once

#include <map>
#include <optional>
#include <tuple>
#include <vector>

#include "metrics.hpp"
#include "orchestrator.hpp"
#include "polygon.hpp"

namespace patchlab {

inline json to_json(const MaskQuality& q) {
  return {{"iou", q.iou}, {"mse", q.mse}, {"attentionLoss", q.attention_loss}};
}

/// Consensus entries for every question with accepted answers, in
/// (stage, slot) order.
inline std::vector<std::pair<PatchTask, ConsensusEntry>> consensus_entries(const Job& job) {
  std::map<std::pair<int, int>, std::pair<PatchTask, std::vector<bool>>> by_question;
  for (const auto& v : job.accepted_votes()) {
    auto& slot = by_question[{v.task.stage, v.task.slot}];
    slot.first = v.task;
    slot.second.push_back(v.answer);
  }
  std::vector<std::pair<PatchTask, ConsensusEntry>> out;
  for (auto& [key, q] : by_question) {
    ConsensusEntry e;
    e.rect = q.first.rect;
    for (bool a : q.second) e.answers.push_back(a ? 1 : -1);
    e.score = consensus_score(q.second);
    out.emplace_back(q.first, std::move(e));
  }
  return out;
}

/// Job report, recomputed from job state (itself a fold of the event log).
/// `gt` enables the quality block; polygons of the same image are compared
/// against the current mask.
inline json build_job_report(const Job& job, const std::optional<GrayMask>& gt,
                             const std::vector<PolygonAnnotation>& polygons = {}) {
  json report;
  report["jobId"] = job.id();
  report["imageId"] = job.image_id();
  report["label"] = job.label();
  report["state"] = to_string(job.state());
  report["iteration"] = job.iteration();
  report["gridSize"] = job.grid_size();

  json entries = json::array();
  std::vector<double> patch_scores;
  for (const auto& [task, e] : consensus_entries(job)) {
    entries.push_back({{"kind", to_string(task.kind)}, {"stage", task.stage}, {"slot", task.slot},
                       {"rect", to_json(e.rect)}, {"answers", e.answers}, {"score", e.score}});
    if (task.kind == TaskKind::patch_label) patch_scores.push_back(e.score);
  }
  report["consensus"] = std::move(entries);
  report["consensusHistogram"] = consensus_histogram(patch_scores);

  std::vector<double> times;
  for (const auto& v : job.accepted_votes()) times.push_back(v.time_ms);
  const auto t = summarize_times(times);
  report["perPatchTimeMs"] = {{"mean", t.mean}, {"p50", t.p50}, {"p95", t.p95}};

  const int verdicts = job.verdicts_accepted() + job.verdicts_rejected();
  report["validity"] = {{"accepted", job.verdicts_accepted()},
                        {"rejected", job.verdicts_rejected()},
                        {"acceptanceRate", verdicts == 0 ? 1.0 : static_cast<double>(job.verdicts_accepted()) / verdicts}};
  report["patchTasksEmitted"] = job.patch_tasks_emitted();
  report["redeployed"] = job.redeployed();

  const auto mask = job.current_mask();
  if (is_terminal(job.state())) {
    report["mask"] = "jobs/" + job.id() + "/attention.pgm";
  } else if (!job.rounds_written().empty()) {
    report["mask"] = "jobs/" + job.id() + "/round-" + std::to_string(job.rounds_written().back()) + ".pgm";
  } else if (job.saliency()) {
    report["mask"] = "jobs/" + job.id() + "/saliency.pgm";
  } else {
    report["mask"] = nullptr;
  }

  report["balanceWeight"] = attention_balance_weight;
  if (gt && mask) {
    report["quality"] = to_json(mask_quality(*mask, *gt, job.config().bin_threshold));
  } else {
    report["quality"] = nullptr;
  }

  json polys = json::array();
  for (const auto& p : polygons) {
    if (p.image_id != job.image_id()) continue;
    json entry = {{"workerId", p.worker_id}, {"elapsedMs", p.elapsed_ms}, {"points", p.points.size()}};
    if (mask) {
      entry["iouWithMask"] = mask_iou(rasterize_polygon(p.points, job.width(), job.height()), *mask,
                                      job.config().bin_threshold);
    }
    polys.push_back(std::move(entry));
  }
  report["polygons"] = std::move(polys);
  return report;
}

}  // namespace patchlab
