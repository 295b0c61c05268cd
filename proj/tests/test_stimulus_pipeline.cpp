#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "neurocodec/io.hpp"
#include "neurocodec/stimulus_pipeline.hpp"
#include "test_util.hpp"

using namespace neurocodec;
using namespace neurocodec::stimulus;

namespace {

Tensor ramp_frames(std::int64_t t, std::int64_t h, std::int64_t w) {
  Tensor f(Shape{t, 3, h, w});
  for (std::int64_t i = 0; i < f.size(); ++i)
    f[i] = static_cast<double>(i % 997) / 997.0;
  return f;
}

}  // namespace

TEST_CASE("identity resampling leaves frames untouched") {
  const double fps = 32.0 / 1.3;
  Tensor in = ramp_frames(64, 8, 8);
  Tensor out = resample_movie(in, fps, 1.3, 8);
  REQUIRE(out.shape() == in.shape());
  CHECK(out.vec() == in.vec());
}

TEST_CASE("30 fps maps to 32 frames per TR via nearest index") {
  const double fps = 30.0, tr = 1.3;
  const std::int64_t t_raw = 39;  // one TR worth of source frames
  Tensor in(Shape{t_raw, 3, 4, 4});
  for (std::int64_t i = 0; i < t_raw; ++i)
    for (std::int64_t k = 0; k < 3 * 16; ++k)
      in[i * 3 * 16 + k] = static_cast<double>(i) / 64.0;  // frame id encoded in pixels

  Tensor out = resample_movie(in, fps, tr, 4);
  REQUIRE(out.dim(0) == 32);
  for (std::int64_t m = 0; m < 32; ++m) {
    // brute-force oracle: nearest source frame by timestamp, exact midpoints
    // resolved toward the later frame (round half up)
    std::int64_t best = 0;
    double best_dist = 1e300;
    const double t_out = static_cast<double>(m) * tr / 32.0;
    for (std::int64_t s = 0; s < t_raw; ++s) {
      const double d = std::abs(t_out - static_cast<double>(s) / fps);
      if (d < best_dist - 1e-12) {
        best_dist = d;
        best = s;
      } else if (std::abs(d - best_dist) <= 1e-12) {
        best = s;
      }
    }
    CHECK(out[m * 3 * 16] == doctest::Approx(static_cast<double>(best) / 64.0).epsilon(1e-12));
  }
}

TEST_CASE("trailing partial TR is dropped") {
  const double fps = 32.0 / 1.3;
  Tensor in = ramp_frames(33, 4, 4);
  Tensor out = resample_movie(in, fps, 1.3, 4);
  CHECK(out.dim(0) == 32);  // 1 chunk, 1 frame dropped
}

TEST_CASE("resample validates input") {
  Tensor ok = ramp_frames(32, 4, 4);
  CHECK_THROWS_AS(resample_movie(Tensor(Shape{0, 3, 4, 4}), 30.0, 1.3, 4), DataError);
  CHECK_THROWS_AS(resample_movie(ok, 0.0, 1.3, 4), DataError);
  CHECK_THROWS_AS(resample_movie(ok, 30.0, -1.0, 4), DataError);
}

TEST_CASE("resample is idempotent on the target grid") {
  const double fps = 32.0 / 1.3;
  Tensor in = ramp_frames(96, 6, 6);
  Tensor once = resample_movie(in, fps, 1.3, 6);
  Tensor twice = resample_movie(once, fps, 1.3, 6);
  CHECK(once.vec() == twice.vec());
}

TEST_CASE("spatial standardization center-crops and keeps range") {
  Tensor in(Shape{32, 3, 10, 16});
  testutil::random_tensor({1}, 0);
  rng::Stream rs(5);
  for (std::int64_t i = 0; i < in.size(); ++i) in[i] = rs.next_unit();
  Tensor out = resample_movie(in, 32.0 / 1.3, 1.3, 8);
  CHECK(out.shape() == Shape{32, 3, 8, 8});
  CHECK(out.min() >= 0.0);
  CHECK(out.max() <= 1.0);
}

TEST_CASE("chunking covers the movie losslessly") {
  Tensor in = ramp_frames(96, 4, 4);
  auto chunks = chunk_movie(in, "m0");
  REQUIRE(chunks.size() == 3);
  CHECK(chunks[0].chunk_index == 0);
  CHECK(chunks[1].chunk_index == 1);
  CHECK(chunks[2].chunk_index == 2);
  // concatenation reproduces the input exactly
  std::vector<double> cat;
  for (const auto& c : chunks)
    cat.insert(cat.end(), c.frames.vec().begin(), c.frames.vec().end());
  CHECK(cat == in.vec());

  CHECK_THROWS_AS(chunk_movie(ramp_frames(95, 4, 4), "bad"), DataError);
}

TEST_CASE("chunk count at the shortest published run length") {
  Tensor in = ramp_frames(309 * 32, 2, 2);
  CHECK(chunk_movie(in, "short").size() == 309);
}

TEST_CASE("target frame is a bitwise slice of its chunk") {
  Tensor in = ramp_frames(64, 5, 5);
  auto chunks = chunk_movie(in, "m");
  for (const auto& c : chunks) {
    TargetFrame t = extract_target(c);
    for (std::int64_t i = 0; i < t.pixels.size(); ++i)
      CHECK(t.pixels[i] == c.frames[c.target_frame_index * t.pixels.size() + i]);
  }

  VideoChunk mid;
  mid.frames = Tensor(Shape{32, 3, 4, 4});
  for (std::int64_t i = 0; i < 3 * 16; ++i) mid.frames[16 * 3 * 16 + i] = 0.5;
  CHECK(extract_target(mid).pixels.min() == 0.5);
  CHECK(extract_target(mid).pixels.max() == 0.5);

  // configurable target index
  auto first = chunk_movie(in, "m", 0);
  TargetFrame t0 = extract_target(first[0]);
  for (std::int64_t i = 0; i < t0.pixels.size(); ++i)
    CHECK(t0.pixels[i] == first[0].frames[i]);
}

TEST_CASE("pixel range invariant through resample and chunk") {
  rng::Stream rs(17);
  Tensor in(Shape{70, 3, 9, 9});
  for (std::int64_t i = 0; i < in.size(); ++i) in[i] = rs.next_unit();
  Tensor out = resample_movie(in, 24.0, 1.3, 7);
  auto chunks = chunk_movie(out, "m");
  for (const auto& c : chunks) {
    CHECK(c.frames.min() >= 0.0);
    CHECK(c.frames.max() <= 1.0);
  }
}

TEST_CASE("chunk files round-trip through the packed format") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "ncdc_test_chunks";
  fs::remove_all(dir);

  Tensor in = ramp_frames(64, 4, 4);
  auto chunks = chunk_movie(in, "movie_a");
  write_chunks(dir, "movie_a", chunks);
  ChunkedMovie m = read_chunks(dir);
  CHECK(m.movie_id == "movie_a");
  REQUIRE(m.n_chunks == 2);
  Tensor c0 = m.chunk_frames(0);
  // float32 round trip is exact for values that came from float-precision data
  for (std::int64_t i = 0; i < c0.size(); ++i)
    CHECK(c0[i] == doctest::Approx(chunks[0].frames[i]).epsilon(1e-7));
  Tensor target = m.target_frame(1);
  Tensor expect = extract_target(chunks[1]).pixels;
  for (std::int64_t i = 0; i < target.size(); ++i)
    CHECK(target[i] == doctest::Approx(expect[i]).epsilon(1e-7));
  fs::remove_all(dir);
}

TEST_CASE("ppm round trip preserves 8-bit pixels") {
  namespace fs = std::filesystem;
  const fs::path p = fs::temp_directory_path() / "ncdc_frame.ppm";
  Tensor frame(Shape{3, 5, 7});
  rng::Stream rs(3);
  for (std::int64_t i = 0; i < frame.size(); ++i)
    frame[i] = static_cast<double>(rs.next_below(256)) / 255.0;
  io::write_ppm(p, frame);
  Tensor back = io::read_ppm(p);
  REQUIRE(back.shape() == frame.shape());
  for (std::int64_t i = 0; i < frame.size(); ++i)
    CHECK(back[i] == doctest::Approx(frame[i]).epsilon(1e-9));
  fs::remove(p);
}
