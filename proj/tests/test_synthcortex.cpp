#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>

#include "neurocodec/fmri_pipeline.hpp"
#include "neurocodec/synthcortex.hpp"
#include "test_util.hpp"

using namespace neurocodec;
using namespace neurocodec::synthcortex;

namespace {

Tensor grating_frame(int h, double orientation, double freq, double phase) {
  Tensor f(Shape{3, h, h});
  const double ct = std::cos(orientation), st = std::sin(orientation);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < h; ++x) {
      const double u = x * ct + y * st;
      const double v = 0.5 + 0.5 * std::cos(2.0 * std::numbers::pi * freq * u + phase);
      for (int c = 0; c < 3; ++c) f[(c * h + y) * h + x] = v;
    }
  return f;
}

}  // namespace

TEST_CASE("hrf kernels are unit sum") {
  HrfSpec delay;
  delay.kind = HrfSpec::Kind::delay;
  delay.delay_tr = 4;
  auto h = make_hrf(delay);
  REQUIRE(h.size() == 5);
  CHECK(h[4] == 1.0);
  for (int i = 0; i < 4; ++i) CHECK(h[static_cast<std::size_t>(i)] == 0.0);

  HrfSpec dg;
  dg.kind = HrfSpec::Kind::double_gamma;
  dg.tr_seconds = 1.3;
  auto g = make_hrf(dg);
  double sum = 0;
  for (double v : g) sum += v;
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(g.size() == static_cast<std::size_t>(20.0 / 1.3) + 1);
  // peak around 5 s
  std::size_t peak = 0;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (g[i] > g[peak]) peak = i;
  CHECK(std::abs(static_cast<double>(peak) * 1.3 - 5.0) < 1.4);
  // undershoot exists after the peak
  double mn = 1.0;
  for (std::size_t i = peak; i < g.size(); ++i) mn = std::min(mn, g[i]);
  CHECK(mn < 0.0);
}

TEST_CASE("gabor features vanish on a zero frame") {
  auto bank = default_bank(16, 32);
  Tensor zero(Shape{3, 32, 32});
  auto f = gabor_features(zero, bank);
  for (double v : f) CHECK(v == 0.0);
}

TEST_CASE("matched grating dominates the orthogonal orientation") {
  const int h = 32;
  GaborSpec a;
  a.orientation = 0.0;
  a.frequency = 4.0 / h;
  a.center_x = a.center_y = h / 2.0;
  a.envelope_sigma = h / 4.0;
  GaborSpec b = a;
  b.orientation = std::numbers::pi / 2.0;
  const std::vector<GaborSpec> bank = {a, b};

  Tensor frame = grating_frame(h, 0.0, 4.0 / h, 0.0);
  auto f = gabor_features(frame, bank);
  CHECK(f[0] > f[1] * 3.0);
}

TEST_CASE("kernel positive part maximizes its own rotation slot") {
  const int h = 32;
  std::vector<GaborSpec> rotations;
  for (int o = 0; o < 4; ++o) {
    GaborSpec g;
    g.orientation = o * std::numbers::pi / 4.0;
    g.frequency = 4.0 / h;
    g.center_x = g.center_y = h / 2.0;
    g.envelope_sigma = h / 4.0;
    rotations.push_back(g);
  }
  // frame = positive part of rotation 1's kernel
  Tensor k = gabor_kernel(rotations[1], h, h);
  Tensor frame(Shape{3, h, h});
  for (std::int64_t i = 0; i < k.size(); ++i) {
    const double v = k[i] > 0.0 ? k[i] * 4.0 : 0.0;
    frame[i] = v;
    frame[k.size() + i] = v;
    frame[2 * k.size() + i] = v;
  }
  auto f = gabor_features(frame, rotations);
  CHECK(f[1] > f[0]);
  CHECK(f[1] > f[2]);
  CHECK(f[1] > f[3]);
}

TEST_CASE("synth_bold degenerate kernel equals z-scored features") {
  SynthConfig cfg;
  cfg.n_movies = 1;
  cfg.chunks_per_movie = 20;
  cfg.voxels = 16;
  cfg.features = 16;
  cfg.frame_size = 16;
  cfg.noise_sigma = 0.0;
  cfg.hrf.kind = HrfSpec::Kind::delay;
  cfg.hrf.delay_tr = 0;  // delta kernel
  cfg.seed = 5;
  SynthDataset ds = make_synth_dataset(cfg);

  // identity-like weights: voxel j reads feature j directly
  SynthGroundTruth gt = ds.gt;
  gt.weights = Tensor(Shape{16, 16});
  for (int j = 0; j < 16; ++j) gt.weights[j * 16 + j] = 1.0;
  gt.noise_sigma = 0.0;
  gt.hrf_kernel = {1.0};

  Tensor bold = synth_bold(ds.movies[0].chunks, gt, 9);
  Tensor feats(Shape{20, 16});
  for (int i = 0; i < 20; ++i) {
    auto row = gabor_features(stimulus::extract_target(ds.movies[0].chunks[static_cast<std::size_t>(i)]).pixels,
                              gt.gabor_bank);
    for (int j = 0; j < 16; ++j) feats[i * 16 + j] = row[static_cast<std::size_t>(j)];
  }
  Tensor want = fmri::zscore_voxels(feats);
  REQUIRE(bold.shape() == want.shape());
  for (std::int64_t i = 0; i < bold.size(); ++i)
    CHECK(bold[i] == doctest::Approx(want[i]).epsilon(1e-9));
}

TEST_CASE("two-tap hrf mixes consecutive feature rows") {
  SynthConfig cfg;
  cfg.n_movies = 1;
  cfg.chunks_per_movie = 12;
  cfg.voxels = 4;
  cfg.features = 4;
  cfg.frame_size = 16;
  cfg.seed = 8;
  cfg.noise_sigma = 0.0;
  SynthDataset ds = make_synth_dataset(cfg);

  SynthGroundTruth gt = ds.gt;
  gt.weights = Tensor(Shape{4, 4});
  for (int j = 0; j < 4; ++j) gt.weights[j * 4 + j] = 1.0;
  gt.hrf_kernel = {0.5, 0.5};
  gt.noise_sigma = 0.0;

  Tensor bold = synth_bold(ds.movies[0].chunks, gt, 0);
  // oracle: convolve features directly, then z-score
  Tensor feats(Shape{12, 4});
  for (int i = 0; i < 12; ++i) {
    auto row = gabor_features(stimulus::extract_target(ds.movies[0].chunks[static_cast<std::size_t>(i)]).pixels,
                              gt.gabor_bank);
    for (int j = 0; j < 4; ++j) feats[i * 4 + j] = row[static_cast<std::size_t>(j)];
  }
  Tensor mixed(Shape{12, 4});
  for (int i = 0; i < 12; ++i)
    for (int j = 0; j < 4; ++j)
      mixed[i * 4 + j] = 0.5 * feats[i * 4 + j] + (i > 0 ? 0.5 * feats[(i - 1) * 4 + j] : 0.0);
  Tensor want = fmri::zscore_voxels(mixed);
  for (std::int64_t i = 0; i < bold.size(); ++i)
    CHECK(bold[i] == doctest::Approx(want[i]).epsilon(1e-9));
}

TEST_CASE("dataset shapes, determinism and region blocks") {
  SynthConfig cfg;
  cfg.n_movies = 2;
  cfg.chunks_per_movie = 50;
  cfg.voxels = 128;
  cfg.features = 16;
  cfg.frame_size = 32;
  cfg.seed = 7;
  SynthDataset a = make_synth_dataset(cfg);
  REQUIRE(a.movies.size() == 2);
  CHECK(a.movies[0].chunks.size() == 50);
  CHECK(a.movies[0].chunks[0].frames.shape() == Shape{32, 3, 32, 32});
  CHECK(a.movies[0].bold.shape() == Shape{50, 128});

  SynthDataset b = make_synth_dataset(cfg);
  CHECK(a.movies[0].bold.vec() == b.movies[0].bold.vec());
  CHECK(a.movies[1].chunks[17].frames.vec() == b.movies[1].chunks[17].frames.vec());

  // 4 regions x 32 voxels
  int per_region[4] = {0, 0, 0, 0};
  for (const auto& r : a.gt.region_of_voxel)
    ++per_region[r.back() - '0'];
  for (int c : per_region) CHECK(c == 32);
}

TEST_CASE("bold honors the voxel-series normalization invariants") {
  SynthConfig cfg;
  cfg.n_movies = 1;
  cfg.chunks_per_movie = 60;
  cfg.voxels = 32;
  cfg.features = 8;
  cfg.frame_size = 16;
  cfg.seed = 3;
  SynthDataset ds = make_synth_dataset(cfg);
  const Tensor& bold = ds.movies[0].bold;
  for (int j = 0; j < 32; ++j) {
    double mean = 0, q = 0;
    for (int i = 0; i < 60; ++i) mean += bold[i * 32 + j];
    mean /= 60.0;
    for (int i = 0; i < 60; ++i) {
      const double d = bold[i * 32 + j] - mean;
      q += d * d;
    }
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(std::sqrt(q / 59.0) - 1.0) < 1e-6);
  }
}

TEST_CASE("noiseless bold is exactly linear in the true features") {
  // with sigma=0 and a delta hrf, a linear readout of the true features
  // reproduces every voxel: residual ~ 0, correlation = 1
  SynthConfig cfg;
  cfg.n_movies = 1;
  cfg.chunks_per_movie = 40;
  cfg.voxels = 12;
  cfg.features = 6;
  cfg.frame_size = 16;
  cfg.noise_sigma = 0.0;
  cfg.hrf.kind = HrfSpec::Kind::delay;
  cfg.hrf.delay_tr = 0;
  cfg.seed = 19;
  SynthDataset ds = make_synth_dataset(cfg);

  std::vector<std::vector<double>> X;
  for (const auto& chunk : ds.movies[0].chunks) {
    auto row = gabor_features(stimulus::extract_target(chunk).pixels, ds.gt.gabor_bank);
    row.push_back(1.0);  // intercept
    X.push_back(row);
  }
  const Tensor& bold = ds.movies[0].bold;
  for (int j = 0; j < 12; ++j) {
    std::vector<double> y;
    for (int i = 0; i < 40; ++i) y.push_back(bold[i * 12 + j]);
    auto beta = testutil::lstsq(X, y);
    std::vector<double> yhat;
    for (const auto& row : X) {
      double acc = 0;
      for (std::size_t k = 0; k < beta.size(); ++k) acc += beta[k] * row[k];
      yhat.push_back(acc);
    }
    CHECK(testutil::pearson_oracle(y, yhat) > 1.0 - 1e-9);
  }
}
