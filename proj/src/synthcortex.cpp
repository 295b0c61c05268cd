#include "neurocodec/synthcortex.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "neurocodec/io.hpp"
#include "neurocodec/rng.hpp"

namespace neurocodec::synthcortex {

namespace fs = std::filesystem;
using stimulus::kFramesPerChunk;
using stimulus::VideoChunk;

std::vector<double> make_hrf(const HrfSpec& spec) {
  if (spec.kind == HrfSpec::Kind::delay) {
    if (spec.delay_tr < 0) throw DataError("make_hrf: negative delay");
    std::vector<double> h(static_cast<std::size_t>(spec.delay_tr) + 1, 0.0);
    h.back() = 1.0;
    return h;
  }
  if (spec.tr_seconds <= 0.0) throw DataError("make_hrf: tr_seconds must be positive");
  // double gamma, peak ~5 s, undershoot ~15 s, truncated at 20 s
  const double a1 = 6.0, a2 = 16.0, ratio = 1.0 / 6.0;
  const auto n = static_cast<std::size_t>(20.0 / spec.tr_seconds) + 1;
  std::vector<double> h(n);
  double sum = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double t = static_cast<double>(k) * spec.tr_seconds;
    const double g1 = std::pow(t, a1 - 1.0) * std::exp(-t) / std::tgamma(a1);
    const double g2 = std::pow(t, a2 - 1.0) * std::exp(-t) / std::tgamma(a2);
    h[k] = g1 - ratio * g2;
    sum += h[k];
  }
  if (sum <= 0.0) throw NumericError("make_hrf: degenerate kernel sum");
  for (auto& v : h) v /= sum;
  return h;
}

Tensor gabor_kernel(const GaborSpec& spec, int h, int w) {
  Tensor k(Shape{h, w});
  const double ct = std::cos(spec.orientation), st = std::sin(spec.orientation);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double dx = x - spec.center_x, dy = y - spec.center_y;
      const double u = dx * ct + dy * st;
      const double env = std::exp(-(dx * dx + dy * dy) / (2.0 * spec.envelope_sigma * spec.envelope_sigma));
      k[y * w + x] = env * std::cos(2.0 * std::numbers::pi * spec.frequency * u + spec.phase);
    }
  // zero mean, unit L2
  const double mean = k.sum() / static_cast<double>(k.size());
  double q = 0.0;
  for (std::int64_t i = 0; i < k.size(); ++i) {
    k[i] -= mean;
    q += k[i] * k[i];
  }
  const double norm = std::sqrt(q);
  if (norm > 0.0)
    for (std::int64_t i = 0; i < k.size(); ++i) k[i] /= norm;
  return k;
}

std::vector<double> gabor_features(const Tensor& frame, const std::vector<GaborSpec>& bank) {
  if (frame.ndim() != 3 || frame.dim(0) != 3)
    throw DataError("gabor_features: expected [3,H,W] frame");
  const auto h = static_cast<int>(frame.dim(1)), w = static_cast<int>(frame.dim(2));
  std::vector<double> gray(static_cast<std::size_t>(h) * w);
  const double* d = frame.data();
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(gray.size()); ++i)
    gray[static_cast<std::size_t>(i)] =
        (d[i] + d[i + h * w] + d[i + 2 * h * w]) / 3.0;
  std::vector<double> feats(bank.size());
  for (std::size_t f = 0; f < bank.size(); ++f) {
    const Tensor k = gabor_kernel(bank[f], h, w);
    double dot = 0.0;
    for (std::size_t i = 0; i < gray.size(); ++i) dot += gray[i] * k[static_cast<std::int64_t>(i)];
    feats[f] = std::abs(dot);
  }
  return feats;
}

std::vector<GaborSpec> default_bank(int features, int frame_size) {
  if (features < 1) throw DataError("default_bank: features must be positive");
  std::vector<GaborSpec> bank;
  bank.reserve(static_cast<std::size_t>(features));
  const double h = frame_size;
  // centers x orientations x frequencies, cycled to fill F slots
  const double centers[2][2] = {{0.35 * h, 0.35 * h}, {0.65 * h, 0.65 * h}};
  for (int f = 0; f < features; ++f) {
    GaborSpec g;
    const int ci = (f / 8) % 2;
    const int oi = f % 4;
    const int fi = (f / 4) % 2;
    g.center_x = centers[ci][0];
    g.center_y = centers[ci][1];
    g.orientation = oi * std::numbers::pi / 4.0;
    g.frequency = (fi == 0 ? 3.0 : 6.0) / h;
    g.phase = 0.0;
    g.envelope_sigma = h / 5.0;
    bank.push_back(g);
  }
  return bank;
}

// ---- movie rendering -----------------------------------------------------------

namespace {

struct Blob {
  double x, y, sigma, amp;
};

struct SceneState {
  double theta = 0.0, freq = 0.1, phase = 0.0, phase_speed = 0.2;
  double cx = 0.0, cy = 0.0, env_sigma = 8.0;
  int mode = 0;  // 0 grating, 1 blobs
  std::vector<Blob> blobs;
};

double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

constexpr int kSegmentChunks = 8;

SceneState fresh_scene(rng::Stream& rs, int h) {
  SceneState s;
  s.theta = rs.uniform(0.0, std::numbers::pi);
  s.freq = rs.uniform(2.5, 6.5) / h;
  s.phase = rs.uniform(0.0, 2.0 * std::numbers::pi);
  s.phase_speed = rs.uniform(0.05, 0.3);
  s.cx = rs.uniform(0.3, 0.7) * h;
  s.cy = rs.uniform(0.3, 0.7) * h;
  s.env_sigma = rs.uniform(0.25, 0.45) * h;
  s.mode = rs.next_unit() < 0.5 ? 0 : 1;
  s.blobs.resize(3);
  for (auto& b : s.blobs) {
    b.x = rs.uniform(0.2, 0.8) * h;
    b.y = rs.uniform(0.2, 0.8) * h;
    b.sigma = rs.uniform(0.08, 0.2) * h;
    b.amp = rs.uniform(0.4, 0.8);
  }
  return s;
}

// Fresh scene parameters every segment, a smooth walk inside it. Segments
// of one movie then sample the same configuration space as any other
// movie's, which is what lets a model trained on one movie generalize to a
// held-out one.
void advance_state(SceneState& s, rng::Stream& rs, int h, int chunk_index) {
  if (chunk_index % kSegmentChunks == 0) {
    const double phase = s.phase;
    s = fresh_scene(rs, h);
    s.phase = phase + rs.uniform(0.0, 2.0 * std::numbers::pi);
    return;
  }
  s.theta += 0.15 * rs.normal();
  s.freq = std::clamp(s.freq * std::exp(0.08 * rs.normal()), 2.0 / h, 8.0 / h);
  s.phase_speed = std::clamp(s.phase_speed + 0.03 * rs.normal(), 0.02, 0.35);
  s.cx = std::clamp(s.cx + 0.03 * h * rs.normal(), 0.2 * h, 0.8 * h);
  s.cy = std::clamp(s.cy + 0.03 * h * rs.normal(), 0.2 * h, 0.8 * h);
  s.env_sigma = std::clamp(s.env_sigma * std::exp(0.05 * rs.normal()), 0.2 * h, 0.5 * h);
  for (auto& b : s.blobs) {
    b.x = std::clamp(b.x + 0.05 * h * rs.normal(), 0.15 * h, 0.85 * h);
    b.y = std::clamp(b.y + 0.05 * h * rs.normal(), 0.15 * h, 0.85 * h);
    b.sigma = std::clamp(b.sigma * std::exp(0.05 * rs.normal()), 0.06 * h, 0.25 * h);
    b.amp = std::clamp(b.amp + 0.05 * rs.normal(), 0.3, 0.9);
  }
}

void render_gray(const SceneState& s, double phase, std::vector<double>& gray, int h) {
  const double ct = std::cos(s.theta), st = std::sin(s.theta);
  if (s.mode == 0) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < h; ++x) {
        const double dx = x - s.cx, dy = y - s.cy;
        const double u = dx * ct + dy * st;
        const double env = std::exp(-(dx * dx + dy * dy) / (2.0 * s.env_sigma * s.env_sigma));
        gray[static_cast<std::size_t>(y) * h + x] =
            clamp01(0.5 + 0.45 * env * std::cos(2.0 * std::numbers::pi * s.freq * u + phase));
      }
  } else {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < h; ++x) {
        double v = 0.12;
        for (const auto& b : s.blobs) {
          const double dx = x - b.x, dy = y - b.y;
          v += b.amp * std::exp(-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma));
        }
        gray[static_cast<std::size_t>(y) * h + x] = clamp01(v);
      }
  }
}

std::vector<VideoChunk> render_movie(const std::string& movie_id, int n_chunks, int h,
                                     std::uint64_t seed) {
  rng::Stream rs(rng::derive(seed, "movie:" + movie_id));
  SceneState state = fresh_scene(rs, h);
  std::vector<VideoChunk> chunks;
  chunks.reserve(static_cast<std::size_t>(n_chunks));
  std::vector<double> gray(static_cast<std::size_t>(h) * h);
  for (int c = 0; c < n_chunks; ++c) {
    advance_state(state, rs, h, c);
    VideoChunk chunk;
    chunk.movie_id = movie_id;
    chunk.chunk_index = c;
    chunk.frames = Tensor(Shape{kFramesPerChunk, 3, h, h});
    for (int f = 0; f < kFramesPerChunk; ++f) {
      const double phase = state.phase + state.phase_speed * f;
      render_gray(state, phase, gray, h);
      double* out = chunk.frames.data() + static_cast<std::int64_t>(f) * 3 * h * h;
      for (std::size_t i = 0; i < gray.size(); ++i) {
        out[i] = clamp01(gray[i] * 0.95);
        out[gray.size() + i] = gray[i];
        out[2 * gray.size() + i] = clamp01(gray[i] * 1.05);
      }
    }
    state.phase += state.phase_speed * kFramesPerChunk;
    chunks.push_back(std::move(chunk));
  }
  return chunks;
}

Tensor bold_pipeline(const std::vector<VideoChunk>& chunks, const SynthGroundTruth& gt,
                     std::uint64_t seed, Tensor* clean_out) {
  if (chunks.empty()) throw DataError("synth_bold: need at least one chunk");
  const auto t = static_cast<std::int64_t>(chunks.size());
  const std::int64_t v = gt.weights.dim(0);
  const auto f = static_cast<std::int64_t>(gt.gabor_bank.size());
  if (gt.weights.dim(1) != f)
    throw DataError("synth_bold: weights/bank feature count mismatch");

  Tensor feats(Shape{t, f});
  for (std::int64_t i = 0; i < t; ++i) {
    const auto row = gabor_features(stimulus::extract_target(chunks[static_cast<std::size_t>(i)]).pixels,
                                    gt.gabor_bank);
    for (std::int64_t j = 0; j < f; ++j) feats[i * f + j] = row[static_cast<std::size_t>(j)];
  }

  Tensor linear(Shape{t, v});
  for (std::int64_t i = 0; i < t; ++i)
    for (std::int64_t k = 0; k < v; ++k) {
      double acc = 0.0;
      for (std::int64_t j = 0; j < f; ++j) acc += gt.weights[k * f + j] * feats[i * f + j];
      linear[i * v + k] = acc;
    }

  Tensor clean(Shape{t, v});
  const auto hl = static_cast<std::int64_t>(gt.hrf_kernel.size());
  for (std::int64_t i = 0; i < t; ++i)
    for (std::int64_t k = 0; k < hl && k <= i; ++k) {
      const double hv = gt.hrf_kernel[static_cast<std::size_t>(k)];
      if (hv == 0.0) continue;
      const double* src = linear.data() + (i - k) * v;
      double* dst = clean.data() + i * v;
      for (std::int64_t j = 0; j < v; ++j) dst[j] += hv * src[j];
    }
  if (clean_out) *clean_out = clean;

  Tensor noisy = clean;
  if (gt.noise_sigma > 0.0) {
    rng::Stream rs(rng::derive(seed, "bold-noise"));
    for (std::int64_t i = 0; i < noisy.size(); ++i) noisy[i] += gt.noise_sigma * rs.normal();
  }
  if (t == 1) return Tensor(Shape{1, v});  // single row z-scores to zero
  return fmri::zscore_voxels(noisy);
}

}  // namespace

Tensor synth_bold(const std::vector<VideoChunk>& chunks, const SynthGroundTruth& gt,
                  std::uint64_t seed) {
  return bold_pipeline(chunks, gt, seed, nullptr);
}

SynthDataset make_synth_dataset(const SynthConfig& cfg) {
  if (cfg.n_movies < 1 || cfg.chunks_per_movie < 1 || cfg.voxels < 1 ||
      cfg.features < 1 || cfg.frame_size < 8)
    throw DataError("make_synth_dataset: all sizes must be positive (frame_size >= 8)");

  SynthDataset ds;
  ds.config = cfg;
  ds.gt.gabor_bank = default_bank(cfg.features, cfg.frame_size);
  HrfSpec hrf = cfg.hrf;
  hrf.tr_seconds = cfg.tr_seconds;
  ds.gt.hrf_kernel = make_hrf(hrf);
  ds.gt.noise_sigma = cfg.noise_sigma;

  // movies first: feature scales are measured from the rendered frames so
  // voxel loadings can be normalized to unit-ish signal variance
  for (int m = 0; m < cfg.n_movies; ++m) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "_%02d", m);
    SynthMovie movie;
    movie.id = cfg.movie_prefix + buf;
    movie.chunks = render_movie(movie.id, cfg.chunks_per_movie, cfg.frame_size, cfg.seed);
    ds.movies.push_back(std::move(movie));
  }

  const auto f = static_cast<std::int64_t>(cfg.features);
  std::vector<double> f_mean(static_cast<std::size_t>(f), 0.0);
  std::vector<double> f_sq(static_cast<std::size_t>(f), 0.0);
  std::int64_t count = 0;
  for (const auto& movie : ds.movies)
    for (const auto& chunk : movie.chunks) {
      const auto row = gabor_features(stimulus::extract_target(chunk).pixels, ds.gt.gabor_bank);
      for (std::int64_t j = 0; j < f; ++j) {
        f_mean[static_cast<std::size_t>(j)] += row[static_cast<std::size_t>(j)];
        f_sq[static_cast<std::size_t>(j)] += row[static_cast<std::size_t>(j)] * row[static_cast<std::size_t>(j)];
      }
      ++count;
    }
  std::vector<double> f_std(static_cast<std::size_t>(f));
  for (std::int64_t j = 0; j < f; ++j) {
    const double mu = f_mean[static_cast<std::size_t>(j)] / static_cast<double>(count);
    const double var = f_sq[static_cast<std::size_t>(j)] / static_cast<double>(count) - mu * mu;
    f_std[static_cast<std::size_t>(j)] = std::sqrt(std::max(var, 1e-12));
  }

  // sparse voxel loadings over the bank; rows beyond informative_fraction
  // are zero so those voxels carry pure noise
  const std::int64_t v = cfg.voxels;
  const auto informative = static_cast<std::int64_t>(cfg.informative_fraction * static_cast<double>(v) + 1e-9);
  ds.gt.weights = Tensor(Shape{v, f});
  rng::Stream wrs(rng::derive(cfg.seed, "weights"));
  for (std::int64_t k = 0; k < informative; ++k) {
    const int nnz = 2;
    for (int pick = 0; pick < nnz; ++pick) {
      const auto j = static_cast<std::int64_t>(wrs.next_below(static_cast<std::uint64_t>(f)));
      const double sign = wrs.next_unit() < 0.5 ? -1.0 : 1.0;
      const double mag = wrs.uniform(0.5, 1.5) / std::sqrt(static_cast<double>(nnz));
      ds.gt.weights[k * f + j] += sign * mag / f_std[static_cast<std::size_t>(j)];
    }
  }

  // contiguous region blocks, mimicking an anatomical parcellation
  ds.gt.region_of_voxel.resize(static_cast<std::size_t>(v));
  const std::int64_t per_region = std::max<std::int64_t>(1, v / cfg.n_regions);
  for (std::int64_t k = 0; k < v; ++k) {
    auto r = k / per_region;
    if (r >= cfg.n_regions) r = cfg.n_regions - 1;
    ds.gt.region_of_voxel[static_cast<std::size_t>(k)] = "region_" + std::to_string(r);
  }

  for (auto& movie : ds.movies)
    movie.bold = bold_pipeline(movie.chunks, ds.gt,
                               rng::derive(cfg.seed, "bold:" + movie.id), &movie.clean_signal);

  ds.mask.voxel_ids.resize(static_cast<std::size_t>(v));
  for (std::int64_t k = 0; k < v; ++k) ds.mask.voxel_ids[static_cast<std::size_t>(k)] = static_cast<int>(k);
  ds.mask.region_label = ds.gt.region_of_voxel;
  ds.mask.selected.assign(static_cast<std::size_t>(v), true);
  ds.mask.snr.assign(static_cast<std::size_t>(v), 0.0);
  return ds;
}

void export_raw(const SynthDataset& ds, const fs::path& dir) {
  const SynthConfig& cfg = ds.config;
  fs::create_directories(dir);

  io::json ids = io::json::array();
  for (const auto& m : ds.movies) ids.push_back(m.id);
  io::json meta = {{"schema_version", 1},
                   {"movie_ids", ids},
                   {"subjects", cfg.subjects},
                   {"voxels", cfg.voxels},
                   {"features", cfg.features},
                   {"frame_size", cfg.frame_size},
                   {"tr_seconds", cfg.tr_seconds},
                   {"noise_sigma", cfg.noise_sigma},
                   {"seed", cfg.seed}};
  io::save_json(dir / "dataset.json", meta);

  io::json atlas = {{"voxel_ids", ds.mask.voxel_ids},
                    {"region_labels", ds.mask.region_label}};
  io::save_json(dir / "atlas.json", atlas);
  write_ground_truth(dir, ds.gt);

  const double fps = kFramesPerChunk / cfg.tr_seconds;
  for (const auto& movie : ds.movies) {
    const fs::path mdir = dir / "movies" / movie.id;
    fs::create_directories(mdir / "frames");
    std::int64_t frame_no = 0;
    for (const auto& chunk : movie.chunks) {
      const std::int64_t h = chunk.frames.dim(2), w = chunk.frames.dim(3);
      for (int k = 0; k < kFramesPerChunk; ++k, ++frame_no) {
        Tensor frame(Shape{3, h, w});
        std::copy_n(chunk.frames.data() + static_cast<std::int64_t>(k) * 3 * h * w, 3 * h * w,
                    frame.data());
        char name[32];
        std::snprintf(name, sizeof(name), "%06lld.ppm", static_cast<long long>(frame_no));
        io::write_ppm(mdir / "frames" / name, frame);
      }
    }
    io::json sidecar = {{"movie_id", movie.id},
                        {"fps", fps},
                        {"width", cfg.frame_size},
                        {"height", cfg.frame_size},
                        {"frame_count", frame_no}};
    io::save_json(mdir / "movie.json", sidecar);

    // multi-subject stacks: per-voxel baseline + shared clean signal +
    // independent per-subject noise, scaled so the subject average has the
    // configured noise level
    const std::int64_t t = movie.clean_signal.dim(0), v = movie.clean_signal.dim(1);
    const double subj_sigma = cfg.noise_sigma * std::sqrt(static_cast<double>(cfg.subjects));
    fmri::SubjectStack stack;
    stack.tr_seconds = cfg.tr_seconds;
    stack.data = Tensor(Shape{cfg.subjects, t, v});
    for (int s = 0; s < cfg.subjects; ++s) {
      rng::Stream rs(rng::derive(cfg.seed, "subject:" + movie.id, static_cast<std::uint64_t>(s)));
      double* dst = stack.data.data() + static_cast<std::int64_t>(s) * t * v;
      for (std::int64_t i = 0; i < t; ++i)
        for (std::int64_t j = 0; j < v; ++j)
          dst[i * v + j] = 100.0 + 0.5 * static_cast<double>(j) +
                           movie.clean_signal[i * v + j] + subj_sigma * rs.normal();
    }
    fmri::write_subject_stack(mdir, stack, movie.id);
  }
}

void write_ground_truth(const fs::path& dir, const SynthGroundTruth& gt) {
  io::json bank = io::json::array();
  for (const auto& g : gt.gabor_bank)
    bank.push_back({{"orientation", g.orientation},
                    {"frequency", g.frequency},
                    {"phase", g.phase},
                    {"center_x", g.center_x},
                    {"center_y", g.center_y},
                    {"envelope_sigma", g.envelope_sigma}});
  io::json j = {{"bank", bank},
                {"hrf", gt.hrf_kernel},
                {"noise_sigma", gt.noise_sigma},
                {"regions", gt.region_of_voxel},
                {"weights_shape", gt.weights.shape()}};
  io::save_json(dir / "ground_truth.json", j);
  io::write_f32_tensor(dir / "ground_truth_weights.bin", gt.weights);
}

SynthGroundTruth read_ground_truth(const fs::path& dir) {
  const auto j = io::load_json(dir / "ground_truth.json");
  SynthGroundTruth gt;
  for (const auto& g : j.at("bank")) {
    GaborSpec s;
    s.orientation = g.at("orientation").get<double>();
    s.frequency = g.at("frequency").get<double>();
    s.phase = g.at("phase").get<double>();
    s.center_x = g.at("center_x").get<double>();
    s.center_y = g.at("center_y").get<double>();
    s.envelope_sigma = g.at("envelope_sigma").get<double>();
    gt.gabor_bank.push_back(s);
  }
  gt.hrf_kernel = j.at("hrf").get<std::vector<double>>();
  gt.noise_sigma = j.at("noise_sigma").get<double>();
  gt.region_of_voxel = j.at("regions").get<std::vector<std::string>>();
  gt.weights = io::read_f32_tensor(dir / "ground_truth_weights.bin",
                                   j.at("weights_shape").get<Shape>());
  return gt;
}

}  // namespace neurocodec::synthcortex
