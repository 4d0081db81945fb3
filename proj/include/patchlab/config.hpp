#pragma once

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>

#include "saliency.hpp"
#include "segmentation.hpp"

namespace patchlab {

using json = nlohmann::json;

/// Hyperparameters of one extraction job. Defaults are the deployment values
/// found in a pilot study; none are claimed optimal.
struct JobConfig {
  int init_size = 128;
  int min_size = 80;
  double shrink_ratio = 0.4;
  double coverage_threshold = 0.3;
  long long min_group_size = 1024;
  double valid_threshold = 0.9;
  int votes_per_patch = 3;
  int votes_per_group = 1;
  int test_questions_per_worker = 10;
  double bin_threshold = 0.5;
  Connectivity connectivity = Connectivity::four;
  SaliencyProviderConfig saliency;

  /// The blur kernel of the mask update is the minimum grid size.
  int blur_kernel() const noexcept { return min_size; }

  void validate() const {
    auto fail = [](const std::string& m) { throw Error(ErrorCode::invalid_argument, "config: " + m); };
    if (!(shrink_ratio > 0.0 && shrink_ratio < 1.0)) fail("shrinkRatio must be in (0,1)");
    if (min_size < 1 || init_size < 1) fail("grid sizes must be >= 1");
    if (min_size > init_size) fail("minSize must not exceed initSize");
    for (double t : {coverage_threshold, valid_threshold, bin_threshold}) {
      if (!(t >= 0.0 && t <= 1.0)) fail("thresholds must be in [0,1]");
    }
    if (votes_per_patch < 1 || votes_per_group < 1) fail("vote counts must be >= 1");
    if (test_questions_per_worker < 0) fail("testQuestionsPerWorker must be >= 0");
    if (min_group_size < 0) fail("minGroupSize must be >= 0");
    saliency.validate();
  }
};

inline json to_json(const SaliencyProviderConfig& c) {
  return {{"mode", c.mode == SaliencyMode::precomputed ? "precomputed" : "spectral-residual"},
          {"scales", c.scales},
          {"precomputedDir", c.precomputed_dir.string()}};
}

inline void merge_json(SaliencyProviderConfig& c, const json& j) {
  if (j.contains("mode")) {
    const auto m = j.at("mode").get<std::string>();
    if (m == "precomputed") c.mode = SaliencyMode::precomputed;
    else if (m == "spectral-residual") c.mode = SaliencyMode::spectral_residual;
    else throw Error(ErrorCode::parse_error, "unknown saliency mode " + m);
  }
  if (j.contains("scales")) c.scales = j.at("scales").get<std::vector<int>>();
  if (j.contains("precomputedDir")) c.precomputed_dir = j.at("precomputedDir").get<std::string>();
}

inline json to_json(const JobConfig& c) {
  return {{"initSize", c.init_size},
          {"minSize", c.min_size},
          {"shrinkRatio", c.shrink_ratio},
          {"coverageThreshold", c.coverage_threshold},
          {"minGroupSize", c.min_group_size},
          {"validThreshold", c.valid_threshold},
          {"votesPerPatch", c.votes_per_patch},
          {"votesPerGroup", c.votes_per_group},
          {"testQuestionsPerWorker", c.test_questions_per_worker},
          {"binThreshold", c.bin_threshold},
          {"connectivity", static_cast<int>(c.connectivity)},
          {"saliency", to_json(c.saliency)}};
}

/// Overlays the keys present in `j` onto `c`; absent keys keep their value.
inline void merge_json(JobConfig& c, const json& j) {
  try {
    if (!j.is_object()) throw Error(ErrorCode::parse_error, "config must be a JSON object");
    auto take = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
    };
    take("initSize", c.init_size);
    take("minSize", c.min_size);
    take("shrinkRatio", c.shrink_ratio);
    take("coverageThreshold", c.coverage_threshold);
    take("minGroupSize", c.min_group_size);
    take("validThreshold", c.valid_threshold);
    take("votesPerPatch", c.votes_per_patch);
    take("votesPerGroup", c.votes_per_group);
    take("testQuestionsPerWorker", c.test_questions_per_worker);
    take("binThreshold", c.bin_threshold);
    if (j.contains("connectivity")) {
      const int k = j.at("connectivity").get<int>();
      if (k != 4 && k != 8) throw Error(ErrorCode::parse_error, "connectivity must be 4 or 8");
      c.connectivity = k == 4 ? Connectivity::four : Connectivity::eight;
    }
    if (j.contains("saliency")) merge_json(c.saliency, j.at("saliency"));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::parse_error, std::string("config: ") + e.what());
  }
}

inline JobConfig job_config_from_json(const json& j, JobConfig base = {}) {
  merge_json(base, j);
  return base;
}

/// Service-wide settings. The config file mirrors JobConfig at top level and
/// may add these keys.
struct ServiceConfig {
  JobConfig job;
  std::int64_t lease_ttl_ms = 120'000;
  int pages_per_assignment = 20;
  int page_size = 6;
  std::uint64_t seed = 0;
};

inline void merge_json(ServiceConfig& c, const json& j) {
  merge_json(c.job, j);
  try {
    if (j.contains("leaseTtlMs")) c.lease_ttl_ms = j.at("leaseTtlMs").get<std::int64_t>();
    if (j.contains("pagesPerAssignment")) c.pages_per_assignment = j.at("pagesPerAssignment").get<int>();
    if (j.contains("pageSize")) c.page_size = j.at("pageSize").get<int>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::parse_error, std::string("config: ") + e.what());
  }
  if (c.page_size < 1 || c.pages_per_assignment < 1 || c.lease_ttl_ms < 1) {
    throw Error(ErrorCode::invalid_argument, "config: page and lease settings must be positive");
  }
}

inline json to_json(const ServiceConfig& c) {
  auto j = to_json(c.job);
  j["leaseTtlMs"] = c.lease_ttl_ms;
  j["pagesPerAssignment"] = c.pages_per_assignment;
  j["pageSize"] = c.page_size;
  j["seed"] = c.seed;
  return j;
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::missing_file, path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::parse_error, path.string() + ": " + e.what());
  }
}

}  // namespace patchlab
