#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "patchlab/patchlab.hpp"

namespace testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "patchlab") {
    static int counter = 0;
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            (tag + "-" + std::to_string(rd()) + "-" + std::to_string(++counter));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& p) const { return path_ / p; }

 private:
  std::filesystem::path path_;
};

inline patchlab::GrayMask random_mask(std::mt19937_64& rng, int w, int h) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(w) * h);
  for (auto& x : v) x = u(rng);
  return patchlab::GrayMask(w, h, std::move(v));
}

inline patchlab::GrayMask random_bitmap(std::mt19937_64& rng, int w, int h, double density) {
  std::bernoulli_distribution b(density);
  std::vector<double> v(static_cast<std::size_t>(w) * h);
  for (auto& x : v) x = b(rng) ? 1.0 : 0.0;
  return patchlab::GrayMask(w, h, std::move(v));
}

inline patchlab::GrayMask rect_mask(int w, int h, const patchlab::Rect& r, double value = 1.0) {
  patchlab::GrayMask m(w, h, 0.0);
  for (int y = r.y; y < r.bottom(); ++y) {
    for (int x = r.x; x < r.right(); ++x) m.set(x, y, value);
  }
  return m;
}

inline void write_bytes(const std::filesystem::path& p, const std::string& bytes) {
  patchlab::write_file_atomic(p, std::span(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()));
}

inline std::string pgm_bytes(int w, int h, const std::vector<std::uint8_t>& px, int maxval = 255) {
  std::string s = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n" + std::to_string(maxval) + "\n";
  s.append(px.begin(), px.end());
  return s;
}

}  // namespace testing
