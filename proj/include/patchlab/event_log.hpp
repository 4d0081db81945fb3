#pragma once

#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include "config.hpp"
#include "error.hpp"

namespace patchlab {

/// Append-only JSONL write-ahead log for a data directory.
///
/// `<data>/events.jsonl` holds every event in commit order. Job-scoped events
/// are wrapped as {"type":"job","jobId":..,"event":{..}} and also projected,
/// unwrapped, into `<data>/jobs/<jobId>/events.jsonl`. The projection is
/// rebuilt from the main log at startup, so a crash between the two writes
/// loses nothing.
class EventLog {
 public:
  explicit EventLog(std::filesystem::path data_dir) : dir_(std::move(data_dir)) {
    std::filesystem::create_directories(dir_ / "jobs");
  }

  std::filesystem::path path() const { return dir_ / "events.jsonl"; }
  std::filesystem::path job_dir(const std::string& job_id) const { return dir_ / "jobs" / job_id; }

  /// Reads the log. A torn final line (crash mid-append) is dropped and
  /// truncated away; a malformed line anywhere else is an error.
  std::vector<json> read_all() {
    std::lock_guard lock(mu_);
    std::vector<json> out;
    if (!std::filesystem::exists(path())) return out;
    std::string text;
    {
      std::ifstream in(path(), std::ios::binary);
      text.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }
    std::size_t pos = 0;
    std::size_t line_no = 0;
    while (pos < text.size()) {
      ++line_no;
      const auto nl = text.find('\n', pos);
      const bool last = nl == std::string::npos;
      const auto line = text.substr(pos, last ? std::string::npos : nl - pos);
      if (!line.empty()) {
        try {
          out.push_back(json::parse(line));
        } catch (const json::exception& e) {
          if (!last) throw Error(ErrorCode::parse_error, "event log line " + std::to_string(line_no) + ": " + e.what());
          std::filesystem::resize_file(path(), pos);
          return out;
        }
      }
      if (last) {
        write_raw(path(), "\n");
        break;
      }
      pos = nl + 1;
    }
    return out;
  }

  void append(const json& ev) {
    std::lock_guard lock(mu_);
    write_line(path(), ev.dump());
    if (ev.value("type", "") == "job") {
      const auto id = ev.at("jobId").get<std::string>();
      std::filesystem::create_directories(job_dir(id));
      write_line(job_dir(id) / "events.jsonl", ev.at("event").dump());
    }
  }

  void append_job(const std::string& job_id, const json& job_event) {
    append({{"type", "job"}, {"jobId", job_id}, {"event", job_event}});
  }

  /// Rewrites every per-job projection from the main log.
  void rebuild_projections(const std::vector<json>& events) {
    std::lock_guard lock(mu_);
    std::map<std::string, std::string> text;
    for (const auto& ev : events) {
      if (ev.value("type", "") != "job") continue;
      text[ev.at("jobId").get<std::string>()] += ev.at("event").dump() + "\n";
    }
    for (const auto& [id, body] : text) {
      std::filesystem::create_directories(job_dir(id));
      std::ofstream out(job_dir(id) / "events.jsonl", std::ios::binary | std::ios::trunc);
      out << body;
      if (!out) throw Error(ErrorCode::io, "cannot rewrite projection for " + id);
    }
  }

  /// Events of one job from its projection file.
  static std::vector<json> read_job_events(const std::filesystem::path& job_dir) {
    std::ifstream in(job_dir / "events.jsonl");
    if (!in) throw Error(ErrorCode::not_found, "no event log in " + job_dir.string());
    std::vector<json> out;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      try {
        out.push_back(json::parse(line));
      } catch (const json::exception&) {
        break;  // torn tail
      }
    }
    return out;
  }

 private:
  static void write_raw(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary | std::ios::app);
    out << text;
    out.flush();
    if (!out) throw Error(ErrorCode::io, "append to " + p.string() + " failed");
  }

  static void write_line(const std::filesystem::path& p, const std::string& line) { write_raw(p, line + "\n"); }

  std::filesystem::path dir_;
  std::mutex mu_;
};

}  // namespace patchlab
