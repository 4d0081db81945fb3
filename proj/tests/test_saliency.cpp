#include <catch_amalgamated.hpp>

#include <complex>
#include <numbers>

#include "support.hpp"

using namespace patchlab;
using Catch::Approx;
using cd = std::complex<double>;

namespace {

// Direct DFT along one axis of a row-major buffer.
void dft_axis(std::vector<cd>& a, int w, int h, bool rows, int sign) {
  const int n = rows ? w : h;
  const int lines = rows ? h : w;
  std::vector<cd> line(n), out(n);
  for (int l = 0; l < lines; ++l) {
    for (int k = 0; k < n; ++k) line[k] = rows ? a[static_cast<std::size_t>(l) * w + k] : a[static_cast<std::size_t>(k) * w + l];
    for (int f = 0; f < n; ++f) {
      cd acc = 0.0;
      for (int k = 0; k < n; ++k) {
        const double ang = sign * 2.0 * std::numbers::pi * f * k / n;
        acc += line[k] * cd(std::cos(ang), std::sin(ang));
      }
      out[f] = acc;
    }
    for (int k = 0; k < n; ++k) (rows ? a[static_cast<std::size_t>(l) * w + k] : a[static_cast<std::size_t>(k) * w + l]) = out[k];
  }
}

// Reference spectral residual built on a direct DFT.
GrayMask spectral_residual_oracle(const RasterImage& img) {
  const int w = img.width(), h = img.height();
  const auto luma = to_luma(img);
  std::vector<cd> a(luma.begin(), luma.end());
  dft_axis(a, w, h, true, -1);
  dft_axis(a, w, h, false, -1);
  double peak_amp = 0.0;
  for (const auto& c : a) peak_amp = std::max(peak_amp, std::abs(c));
  const double floor = peak_amp * 1e-12;
  std::vector<double> la(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) la[i] = std::log(1.0 + std::abs(a[i]));
  std::vector<cd> b(a.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double avg = 0.0;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) avg += la[static_cast<std::size_t>((y + dy + h) % h) * w + (x + dx + w) % w];
      }
      avg /= 9.0;
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      b[i] = std::abs(a[i]) > floor ? std::exp(la[i] - avg) * std::polar(1.0, std::arg(a[i])) : cd{};
    }
  }
  dft_axis(b, w, h, true, +1);
  dft_axis(b, w, h, false, +1);
  std::vector<double> e(b.size());
  double peak = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) peak = std::max(peak, e[i] = std::norm(b[i]));
  for (double& v : e) v /= peak;
  return min_max_scale(gaussian_blur(GrayMask::from_unclamped(w, h, e), 9));
}

RasterImage square_on_black(int size, int x0, int y0, int side = 4) {
  RasterImage img(size, size, 1);
  for (int y = y0; y < y0 + side; ++y) {
    for (int x = x0; x < x0 + side; ++x) img.at(x, y) = 255;
  }
  return img;
}

std::pair<int, int> argmax(const GrayMask& m) {
  const auto it = std::max_element(m.values().begin(), m.values().end());
  const auto i = static_cast<int>(it - m.values().begin());
  return {i % m.width(), i / m.width()};
}

}  // namespace

TEST_CASE("spectral_residual basics", "[saliency]") {
  const auto flat = spectral_residual(RasterImage(16, 16, 1, std::vector<std::uint8_t>(256, 90)));
  for (double v : flat.values()) CHECK(v == 0.0);

  try {
    spectral_residual(RasterImage(7, 30, 1));
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::image_too_small);
  }

  std::mt19937_64 rng(1);
  RasterImage noise(40, 24, 3);
  for (auto& p : noise.pixels()) p = static_cast<std::uint8_t>(rng());
  const auto out = spectral_residual(noise);
  CHECK(out.width() == 40);
  CHECK(out.height() == 24);
  for (double v : out.values()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("spectral_residual matches a direct-DFT reference", "[saliency]") {
  std::mt19937_64 rng(6);
  RasterImage textured(24, 16, 3);
  for (auto& p : textured.pixels()) p = static_cast<std::uint8_t>(rng() % 64);
  for (const auto& img : {square_on_black(64, 30, 12), textured}) {
    const auto got = spectral_residual(img);
    const auto want = spectral_residual_oracle(img);
    for (std::size_t i = 0; i < got.size(); ++i) REQUIRE(got[i] == Approx(want[i]).margin(1e-9));
  }
}

TEST_CASE("spectral_residual finds a lone square", "[saliency]") {
  const auto img = square_on_black(64, 30, 12);
  const auto [ax, ay] = argmax(spectral_residual(img));
  // Inside the square's 9x9 neighbourhood: the 4x4 block grown by 2-3 px.
  CHECK(ax >= 30 - 3);
  CHECK(ax <= 33 + 2);
  CHECK(ay >= 12 - 3);
  CHECK(ay <= 15 + 2);
  // The peak is a near-tie plateau; the reference must also be maximal there.
  const auto ref = spectral_residual_oracle(img);
  const auto [rx, ry] = argmax(ref);
  CHECK(ref.at(ax, ay) == Approx(ref.at(rx, ry)).margin(1e-9));
}

TEST_CASE("spectral_residual is translation covariant", "[saliency]") {
  const auto [bx, by] = argmax(spectral_residual(square_on_black(64, 20, 20)));
  for (auto [dx, dy] : {std::pair{5, 0}, std::pair{0, 7}, std::pair{9, -4}, std::pair{-6, 11}}) {
    const auto [sx, sy] = argmax(spectral_residual(square_on_black(64, 20 + dx, 20 + dy)));
    CHECK(std::abs((sx - bx) - dx) <= 2);
    CHECK(std::abs((sy - by) - dy) <= 2);
  }
}

TEST_CASE("multiscale_saliency with a custom provider", "[saliency]") {
  std::mt19937_64 rng(12);
  const RasterImage img(48, 40, 1);
  const auto m = testing::random_mask(rng, 256, 256);

  SECTION("single scale is the rescaled provider map") {
    const auto out = multiscale_saliency(img, {256}, [&](const RasterImage& scaled, int s) {
      CHECK(scaled.width() == s);
      CHECK(scaled.height() == s);
      return m;
    });
    CHECK(out == min_max_scale(resize_bilinear(m, 48, 40)));
  }

  SECTION("identical maps at two scales average to themselves") {
    // A bilinear ramp survives any resampling, so both scales agree exactly.
    auto ramp = [](int s) {
      GrayMask r(s, s);
      for (int y = 0; y < s; ++y) {
        for (int x = 0; x < s; ++x) r.set(x, y, (x + y) / (2.0 * (s - 1)));
      }
      return r;
    };
    const auto out = multiscale_saliency(img, {256, 512}, [&](const RasterImage&, int s) { return ramp(s); });
    const auto single = multiscale_saliency(img, {256}, [&](const RasterImage&, int s) { return ramp(s); });
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == Approx(single[i]).margin(1e-9));
  }

  SECTION("scale order does not matter") {
    auto provider = [&](const RasterImage&, int s) {
      std::mt19937_64 r(static_cast<std::uint64_t>(s));
      return s == 64 ? resize_bilinear(m, 64, 64) : min_max_scale(testing::random_mask(r, s, s));
    };
    CHECK(multiscale_saliency(img, {64, 128, 96}, provider) == multiscale_saliency(img, {96, 64, 128}, provider));
  }

  SECTION("output dims follow the image") {
    const RasterImage odd(13, 77, 3);
    CHECK(multiscale_saliency(odd, {32, 64}, [&](const RasterImage&, int s) { return GrayMask(s, s, 0.4); }).width() == 13);
  }

  CHECK_THROWS_AS(multiscale_saliency(img, std::vector<int>{}, [&](const RasterImage&, int) { return m; }), Error);
}

TEST_CASE("precomputed saliency", "[saliency]") {
  testing::TempDir dir;
  // A: 256x256 horizontal ramp, byte value = x. B: 512x512, rows >= 256 white.
  RasterImage a(256, 256, 1), b(512, 512, 1);
  for (int y = 0; y < 256; ++y) {
    for (int x = 0; x < 256; ++x) a.at(x, y) = static_cast<std::uint8_t>(x);
  }
  for (int y = 256; y < 512; ++y) {
    for (int x = 0; x < 512; ++x) b.at(x, y) = 255;
  }
  const auto ab = encode_pgm(a);
  testing::write_bytes(dir / "img.256.pgm", std::string(ab.begin(), ab.end()));
  const auto bb = encode_pgm(b);
  testing::write_bytes(dir / "img.512.pgm", std::string(bb.begin(), bb.end()));

  SaliencyProviderConfig cfg;
  cfg.mode = SaliencyMode::precomputed;
  cfg.precomputed_dir = dir.path();

  SECTION("hand-computed 4x4 mean of both scales") {
    // Corner-aligned 256->4 samples x = 0, 85, 170, 255: A = x/3.
    // 512->4 samples rows 0, 170.3, 340.7, 511: B = 0, 0, 1, 1.
    const double b_row[4] = {0, 0, 1, 1};
    const auto out = multiscale_saliency(RasterImage(4, 4, 3), cfg, "img");
    for (int y = 0; y < 4; ++y) {
      for (int x = 0; x < 4; ++x) CHECK(out.at(x, y) == Approx((x / 3.0 + b_row[y]) / 2.0).margin(1e-12));
    }
  }

  SECTION("loader checks presence and dims") {
    CHECK(load_precomputed_saliency(dir.path(), "img", 256).width() == 256);
    try {
      load_precomputed_saliency(dir.path(), "other", 256);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::missing_file);
    }
    std::filesystem::copy_file(dir / "img.256.pgm", dir / "bad.512.pgm");
    try {
      load_precomputed_saliency(dir.path(), "bad", 512);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::dimension_mismatch);
    }
  }

  SECTION("precomputed mode needs an image id and a directory") {
    CHECK_THROWS_AS(multiscale_saliency(RasterImage(4, 4, 1), cfg), Error);
    cfg.precomputed_dir.clear();
    CHECK_THROWS_AS(cfg.validate(), Error);
  }

  SECTION("scales below 32 are rejected") {
    cfg.scales = {16};
    CHECK_THROWS_AS(cfg.validate(), Error);
  }
}
