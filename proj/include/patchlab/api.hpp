#pragma once

// Transport-independent request dispatch for the JSON API. The HTTP server
// and the in-process simulator transport both call `dispatch`.

#include <regex>
#include <string>

#include "service.hpp"

namespace patchlab {

struct ApiRequest {
  std::string method;
  std::string path;
  std::string body;
};

struct ApiResponse {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";

  json json_body() const { return json::parse(body); }
};

inline int http_status(ErrorCode c) {
  switch (c) {
    case ErrorCode::not_found:
    case ErrorCode::unknown_worker:
    case ErrorCode::unknown_token:
    case ErrorCode::unknown_task:
    case ErrorCode::missing_file:
      return 404;
    case ErrorCode::duplicate_submission:
    case ErrorCode::conflict:
    case ErrorCode::wrong_state:
    case ErrorCode::precondition:
      return 409;
    case ErrorCode::token_mismatch:
      return 403;
    case ErrorCode::lease_expired:
      return 410;
    case ErrorCode::corrupt_header:
    case ErrorCode::unsupported_format:
    case ErrorCode::image_too_small:
    case ErrorCode::dimension_mismatch:
      return 422;
    case ErrorCode::io:
      return 500;
    default:
      return 400;
  }
}

namespace detail {

inline ApiResponse json_response(int status, const json& body) { return {status, body.dump(), "application/json"}; }

inline ApiResponse bytes_response(const Bytes& bytes, const char* type) {
  return {200, std::string(bytes.begin(), bytes.end()), type};
}

inline json parse_body(const std::string& body) {
  if (body.empty()) return json::object();
  try {
    auto j = json::parse(body);
    if (!j.is_object()) throw Error(ErrorCode::parse_error, "request body must be a JSON object");
    return j;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::parse_error, e.what());
  }
}

template <class T>
T field(const json& j, const char* key) {
  if (!j.contains(key)) throw Error(ErrorCode::invalid_argument, std::string("missing field ") + key);
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw Error(ErrorCode::invalid_argument, std::string("bad field ") + key);
  }
}

}  // namespace detail

inline ApiResponse dispatch(Service& svc, const ApiRequest& req) {
  using detail::field;
  using detail::json_response;
  static const std::regex job_re("^/jobs/([^/]+)$");
  static const std::regex mask_re("^/jobs/([^/]+)/mask$");
  static const std::regex report_re("^/jobs/([^/]+)/report$");
  static const std::regex next_re("^/workers/([^/]+)/next-page$");
  static const std::regex answers_re("^/pages/([^/]+)/answers$");
  static const std::regex patch_re("^/patches/([^/]+)\\.png$");
  static const std::regex region_re("^/tasks/([^/]+)/region\\.pgm$");

  std::smatch m;
  const auto& p = req.path;
  const bool get = req.method == "GET";
  const bool post = req.method == "POST";
  try {
    if (post && p == "/jobs") {
      const auto body = detail::parse_body(req.body);
      std::optional<std::string> id;
      if (body.contains("jobId")) id = field<std::string>(body, "jobId");
      const auto job = svc.create_job(field<std::string>(body, "imageId"), field<std::string>(body, "classLabel"),
                                      body.value("config", json::object()), id);
      return json_response(201, {{"jobId", job}});
    }
    if (get && std::regex_match(p, m, job_re)) return json_response(200, svc.job_status(m[1]));
    if (get && std::regex_match(p, m, mask_re)) {
      return detail::bytes_response(encode_pgm(svc.job_mask(m[1])), "image/x-portable-graymap");
    }
    if (get && std::regex_match(p, m, report_re)) return json_response(200, svc.job_report(m[1]));
    if (post && p == "/workers") {
      const auto body = detail::parse_body(req.body);
      const auto wid = field<std::string>(body, "workerId");
      const auto r = svc.register_worker(wid);
      return json_response(200, {{"workerId", wid}, {"assignment", r.assignment}, {"started", r.started}});
    }
    if (get && std::regex_match(p, m, next_re)) {
      const auto page = svc.next_page(m[1]);
      if (!page) return {204, "", "application/json"};
      return json_response(200, to_json(*page));
    }
    if (post && std::regex_match(p, m, answers_re)) {
      const auto body = detail::parse_body(req.body);
      PageSubmission sub{m[1], field<std::string>(body, "workerId"), field<std::vector<bool>>(body, "answers"),
                         field<double>(body, "elapsedMs")};
      const auto out = svc.submit_page(sub);
      json r = {{"status", out.accepted ? "accepted" : "rejected"}};
      if (out.validity) r["validity"] = to_json(*out.validity);
      return json_response(200, r);
    }
    if (post && p == "/polygons") {
      const auto body = detail::parse_body(req.body);
      PolygonAnnotation ann;
      ann.image_id = field<std::string>(body, "imageId");
      ann.worker_id = field<std::string>(body, "workerId");
      ann.elapsed_ms = field<double>(body, "elapsedMs");
      for (const auto& pt : field<json>(body, "points")) {
        if (!pt.is_array() || pt.size() != 2 || !pt[0].is_number() || !pt[1].is_number()) {
          throw Error(ErrorCode::invalid_argument, "points must be [x,y] pairs");
        }
        ann.points.push_back({pt[0].get<double>(), pt[1].get<double>()});
      }
      const int id = svc.submit_polygon(ann);
      return json_response(200, {{"status", "accepted"}, {"polygonId", id}});
    }
    if (get && std::regex_match(p, m, patch_re)) {
      return detail::bytes_response(encode_png(svc.task_image(m[1])), "image/png");
    }
    if (get && std::regex_match(p, m, region_re)) {
      return detail::bytes_response(encode_pgm(svc.task_region(m[1])), "image/x-portable-graymap");
    }
    return json_response(404, {{"error", "not-found"}, {"message", req.method + " " + p}});
  } catch (const Error& e) {
    return json_response(http_status(e.code()), {{"error", std::string(to_string(e.code()))}, {"message", e.what()}});
  } catch (const std::exception& e) {
    return json_response(500, {{"error", "internal"}, {"message", e.what()}});
  }
}

}  // namespace patchlab
