#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "raster.hpp"

namespace patchlab {

enum class TaskKind { saliency_verify, group_verify, patch_label, test };

constexpr std::string_view to_string(TaskKind k) {
  switch (k) {
    case TaskKind::saliency_verify: return "SALIENCY_VERIFY";
    case TaskKind::group_verify: return "GROUP_VERIFY";
    case TaskKind::patch_label: return "PATCH_LABEL";
    case TaskKind::test: return "TEST";
  }
  return "?";
}

inline TaskKind task_kind_from_string(std::string_view s) {
  if (s == "SALIENCY_VERIFY") return TaskKind::saliency_verify;
  if (s == "GROUP_VERIFY") return TaskKind::group_verify;
  if (s == "PATCH_LABEL") return TaskKind::patch_label;
  if (s == "TEST") return TaskKind::test;
  throw Error(ErrorCode::parse_error, "unknown task kind " + std::string(s));
}

struct Vote {
  Rect rect;
  std::string worker_id;
  bool answer = false;
  TaskKind kind = TaskKind::patch_label;
};

/// Soft voting: each pixel holds the fraction of covering votes that were
/// positive. Uncovered pixels are 0.
inline GrayMask build_response_mask(int image_w, int image_h, const std::vector<Vote>& votes) {
  // 2-D difference arrays for the covering and positive counts.
  const int sw = image_w + 1;
  std::vector<int> total(static_cast<std::size_t>(sw) * (image_h + 1), 0);
  std::vector<int> positive(total.size(), 0);
  auto bump = [&](std::vector<int>& acc, const Rect& r) {
    acc[static_cast<std::size_t>(r.y) * sw + r.x] += 1;
    acc[static_cast<std::size_t>(r.y) * sw + r.right()] -= 1;
    acc[static_cast<std::size_t>(r.bottom()) * sw + r.x] -= 1;
    acc[static_cast<std::size_t>(r.bottom()) * sw + r.right()] += 1;
  };
  for (const auto& v : votes) {
    if (!v.rect.inside(image_w, image_h)) throw Error(ErrorCode::out_of_bounds, "vote rect outside image");
    bump(total, v.rect);
    if (v.answer) bump(positive, v.rect);
  }
  auto integrate = [&](std::vector<int>& acc) {
    for (int y = 0; y <= image_h; ++y) {
      for (int x = 0; x <= image_w; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * sw + x;
        if (x > 0) acc[i] += acc[i - 1];
        if (y > 0) acc[i] += acc[i - sw];
        if (x > 0 && y > 0) acc[i] -= acc[i - sw - 1];
      }
    }
  };
  integrate(total);
  integrate(positive);

  std::vector<double> out(static_cast<std::size_t>(image_w) * image_h, 0.0);
  for (int y = 0; y < image_h; ++y) {
    for (int x = 0; x < image_w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * sw + x;
      if (total[i] > 0) out[static_cast<std::size_t>(y) * image_w + x] = static_cast<double>(positive[i]) / total[i];
    }
  }
  return GrayMask(image_w, image_h, std::move(out));
}

struct ValidityReport {
  std::string worker_id;
  int test_total = 0;
  int test_correct = 0;
  double score = 0.0;
  bool accepted = false;
};

/// Scores known-answer test questions. Acceptance is inclusive of the
/// threshold so that 9 of 10 passes at 0.9. With no test questions the score
/// is 1.
inline ValidityReport validity_score(const std::string& worker_id,
                                     const std::vector<std::pair<std::string, bool>>& answers,
                                     const std::map<std::string, bool>& truth, double valid_threshold) {
  ValidityReport r;
  r.worker_id = worker_id;
  r.test_total = static_cast<int>(answers.size());
  for (const auto& [task_id, answer] : answers) {
    auto it = truth.find(task_id);
    if (it == truth.end()) throw Error(ErrorCode::unknown_task, "no known answer for test " + task_id);
    r.test_correct += (it->second == answer) ? 1 : 0;
  }
  r.score = r.test_total == 0 ? 1.0 : static_cast<double>(r.test_correct) / r.test_total;
  r.accepted = r.score >= valid_threshold;
  return r;
}

/// |sum of +/-1 answers| / N.
inline double consensus_score(const std::vector<bool>& answers) {
  if (answers.empty()) throw Error(ErrorCode::empty_input, "consensus of no answers");
  long long sum = 0;
  for (bool a : answers) sum += a ? 1 : -1;
  return static_cast<double>(sum < 0 ? -sum : sum) / static_cast<double>(answers.size());
}

struct ConsensusEntry {
  Rect rect;
  std::vector<int> answers;  // +1 / -1
  double score = 0.0;
};

/// Blurs the response mask, then where the previous mask is zero takes the
/// mean of the two, and elsewhere their product.
inline GrayMask merge_masks(const GrayMask& prev, const GrayMask& resp, int blur_kernel) {
  require_same_dims(prev, resp, "merge_masks");
  const auto blurred = gaussian_blur(resp, blur_kernel);
  std::vector<double> out(prev.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = prev[i] == 0.0 ? (prev[i] + blurred[i]) / 2.0 : prev[i] * blurred[i];
  }
  return GrayMask::from_unclamped(prev.width(), prev.height(), std::move(out));
}

}  // namespace patchlab
