#include "neurocodec/stimulus_pipeline.hpp"

#include <algorithm>
#include <cmath>

#include "neurocodec/io.hpp"

namespace neurocodec::stimulus {

namespace fs = std::filesystem;

Tensor resize_frame(const Tensor& frame, int target_size) {
  if (frame.ndim() != 3 || frame.dim(0) != 3)
    throw DataError("resize_frame: expected [3,H,W], got " + shape_str(frame.shape()));
  const std::int64_t h = frame.dim(1), w = frame.dim(2);
  if (target_size <= 0) {
    if (h != w) throw DataError("native-size mode requires square frames");
    return frame;
  }
  const std::int64_t side = std::min(h, w);
  const std::int64_t y0 = (h - side) / 2, x0 = (w - side) / 2;
  const std::int64_t out = target_size;
  if (side == out && y0 == 0 && x0 == 0) return frame;

  Tensor res(Shape{3, out, out});
  // Bilinear over the center crop, pixel-center alignment.
  const double scale = static_cast<double>(side) / static_cast<double>(out);
  for (std::int64_t c = 0; c < 3; ++c) {
    const double* src = frame.data() + c * h * w;
    double* dst = res.data() + c * out * out;
    for (std::int64_t y = 0; y < out; ++y) {
      double sy = (static_cast<double>(y) + 0.5) * scale - 0.5;
      if (sy < 0) sy = 0;
      if (sy > static_cast<double>(side - 1)) sy = static_cast<double>(side - 1);
      const std::int64_t yi = static_cast<std::int64_t>(sy);
      const std::int64_t yj = std::min(yi + 1, side - 1);
      const double fy = sy - static_cast<double>(yi);
      for (std::int64_t x = 0; x < out; ++x) {
        double sx = (static_cast<double>(x) + 0.5) * scale - 0.5;
        if (sx < 0) sx = 0;
        if (sx > static_cast<double>(side - 1)) sx = static_cast<double>(side - 1);
        const std::int64_t xi = static_cast<std::int64_t>(sx);
        const std::int64_t xj = std::min(xi + 1, side - 1);
        const double fx = sx - static_cast<double>(xi);
        const double a = src[(y0 + yi) * w + x0 + xi];
        const double b = src[(y0 + yi) * w + x0 + xj];
        const double cc = src[(y0 + yj) * w + x0 + xi];
        const double d = src[(y0 + yj) * w + x0 + xj];
        dst[y * out + x] = (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * cc + fx * d);
      }
    }
  }
  return res;
}

Tensor resample_movie(const Tensor& frames, double fps_raw, double tr_seconds,
                      int target_size) {
  if (frames.ndim() != 4 || frames.dim(1) != 3)
    throw DataError("resample_movie: expected [T,3,H,W], got " + shape_str(frames.shape()));
  const std::int64_t t_raw = frames.dim(0);
  if (t_raw < 1) throw DataError("resample_movie: empty input");
  if (fps_raw <= 0.0 || tr_seconds <= 0.0)
    throw DataError("resample_movie: rates must be positive");

  const double duration = static_cast<double>(t_raw) / fps_raw;
  const auto n_trs = static_cast<std::int64_t>(duration / tr_seconds + 1e-9);
  if (n_trs < 1)
    throw DataError("resample_movie: movie shorter than one TR");

  const std::int64_t h = frames.dim(2), w = frames.dim(3);
  const std::int64_t out_side = target_size > 0 ? target_size : h;
  const std::int64_t n_out = n_trs * kFramesPerChunk;
  Tensor out(Shape{n_out, 3, out_side, out_side});
  const std::int64_t frame_sz_in = 3 * h * w;
  const std::int64_t frame_sz_out = 3 * out_side * out_side;

  std::int64_t last_src = -1;
  Tensor resized;
  for (std::int64_t m = 0; m < n_out; ++m) {
    // output frame m sits at time m*tr/32; nearest source frame by index round
    const double t_sec = static_cast<double>(m) * tr_seconds / kFramesPerChunk;
    auto src = static_cast<std::int64_t>(std::llround(t_sec * fps_raw));
    if (src >= t_raw) src = t_raw - 1;
    if (src != last_src) {
      Tensor in_frame(Shape{3, h, w});
      std::copy_n(frames.data() + src * frame_sz_in, frame_sz_in, in_frame.data());
      resized = resize_frame(in_frame, target_size);
      last_src = src;
    }
    std::copy_n(resized.data(), frame_sz_out, out.data() + m * frame_sz_out);
  }
  return out;
}

std::vector<VideoChunk> chunk_movie(const Tensor& frames, const std::string& movie_id,
                                    int target_frame_index) {
  if (frames.ndim() != 4 || frames.dim(1) != 3)
    throw DataError("chunk_movie: expected [N*32,3,H,W]");
  const std::int64_t total = frames.dim(0);
  if (total % kFramesPerChunk != 0)
    throw DataError("chunk_movie: frame count " + std::to_string(total) +
                    " not divisible by " + std::to_string(kFramesPerChunk));
  if (target_frame_index < 0 || target_frame_index >= kFramesPerChunk)
    throw DataError("chunk_movie: target_frame_index out of range");
  const std::int64_t n = total / kFramesPerChunk;
  const std::int64_t h = frames.dim(2), w = frames.dim(3);
  const std::int64_t chunk_sz = kFramesPerChunk * 3 * h * w;

  std::vector<VideoChunk> chunks;
  chunks.reserve(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    VideoChunk c;
    c.movie_id = movie_id;
    c.chunk_index = static_cast<int>(i);
    c.target_frame_index = target_frame_index;
    c.frames = Tensor(Shape{kFramesPerChunk, 3, h, w});
    std::copy_n(frames.data() + i * chunk_sz, chunk_sz, c.frames.data());
    chunks.push_back(std::move(c));
  }
  return chunks;
}

TargetFrame extract_target(const VideoChunk& chunk) {
  if (chunk.frames.ndim() != 4 || chunk.frames.dim(0) != kFramesPerChunk)
    throw DataError("extract_target: malformed chunk");
  const std::int64_t h = chunk.frames.dim(2), w = chunk.frames.dim(3);
  TargetFrame t;
  t.pixels = Tensor(Shape{3, h, w});
  std::copy_n(chunk.frames.data() + chunk.target_frame_index * 3 * h * w, 3 * h * w,
              t.pixels.data());
  return t;
}

// ---- on-disk formats ----------------------------------------------------------

MovieSidecar read_movie_sidecar(const fs::path& movie_dir) {
  const auto j = io::load_json(movie_dir / "movie.json");
  io::check_keys(j, {"movie_id", "fps", "width", "height", "frame_count"},
                 (movie_dir / "movie.json").string());
  MovieSidecar m;
  m.movie_id = j.at("movie_id").get<std::string>();
  m.fps = j.at("fps").get<double>();
  m.width = j.at("width").get<int>();
  m.height = j.at("height").get<int>();
  m.frame_count = j.at("frame_count").get<std::int64_t>();
  if (m.fps <= 0 || m.width <= 0 || m.height <= 0 || m.frame_count <= 0)
    throw DataError("movie.json has nonpositive dimensions: " + movie_dir.string());
  return m;
}

Tensor load_movie_frames(const fs::path& movie_dir, const MovieSidecar& meta) {
  const fs::path frames_dir = movie_dir / "frames";
  std::vector<fs::path> files;
  if (!fs::is_directory(frames_dir))
    throw DataError("missing frames directory: " + frames_dir.string());
  for (const auto& e : fs::directory_iterator(frames_dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (static_cast<std::int64_t>(files.size()) != meta.frame_count)
    throw DataError("frame count mismatch in " + frames_dir.string() + ": found " +
                    std::to_string(files.size()) + ", sidecar says " +
                    std::to_string(meta.frame_count));

  Tensor out(Shape{meta.frame_count, 3, meta.height, meta.width});
  const std::int64_t frame_sz = 3LL * meta.height * meta.width;
  for (std::size_t i = 0; i < files.size(); ++i) {
    Tensor f = io::read_ppm(files[i]);
    if (f.dim(1) != meta.height || f.dim(2) != meta.width)
      throw DataError("frame size mismatch: " + files[i].string());
    std::copy_n(f.data(), frame_sz, out.data() + static_cast<std::int64_t>(i) * frame_sz);
  }
  return out;
}

void write_chunks(const fs::path& dir, const std::string& movie_id,
                  const std::vector<VideoChunk>& chunks) {
  if (chunks.empty()) throw DataError("write_chunks: no chunks for " + movie_id);
  const Shape cs = chunks.front().frames.shape();
  const std::int64_t chunk_sz = shape_numel(cs);
  std::vector<float> packed(static_cast<std::size_t>(chunk_sz) * chunks.size());
  for (std::size_t i = 0; i < chunks.size(); ++i) {
    if (chunks[i].frames.shape() != cs) throw DataError("write_chunks: ragged chunk shapes");
    const double* d = chunks[i].frames.data();
    float* p = packed.data() + static_cast<std::int64_t>(i) * chunk_sz;
    for (std::int64_t k = 0; k < chunk_sz; ++k) p[k] = static_cast<float>(d[k]);
  }
  fs::create_directories(dir);
  io::write_f32(dir / "chunks.bin", packed);
  io::json hdr = {{"movie_id", movie_id},
                  {"n_chunks", chunks.size()},
                  {"shape", cs},
                  {"target_frame_index", chunks.front().target_frame_index}};
  io::save_json(dir / "chunks.json", hdr);
}

ChunkedMovie read_chunks(const fs::path& dir) {
  const auto j = io::load_json(dir / "chunks.json");
  io::check_keys(j, {"movie_id", "n_chunks", "shape", "target_frame_index"},
                 (dir / "chunks.json").string());
  ChunkedMovie m;
  m.movie_id = j.at("movie_id").get<std::string>();
  m.n_chunks = j.at("n_chunks").get<std::int64_t>();
  m.target_frame_index = j.at("target_frame_index").get<int>();
  m.chunk_shape = j.at("shape").get<Shape>();
  if (m.chunk_shape.size() != 4 || m.chunk_shape[0] != kFramesPerChunk || m.chunk_shape[1] != 3)
    throw DataError("bad chunk shape in " + dir.string());
  m.pixels = io::read_f32(dir / "chunks.bin", m.n_chunks * shape_numel(m.chunk_shape));
  return m;
}

Tensor ChunkedMovie::chunk_frames(std::int64_t index) const {
  if (index < 0 || index >= n_chunks) throw DataError("chunk index out of range");
  const std::int64_t sz = shape_numel(chunk_shape);
  Tensor t(chunk_shape);
  const float* p = pixels.data() + index * sz;
  for (std::int64_t k = 0; k < sz; ++k) t[k] = static_cast<double>(p[k]);
  return t;
}

Tensor ChunkedMovie::target_frame(std::int64_t index, int target_frame_index) const {
  if (index < 0 || index >= n_chunks) throw DataError("chunk index out of range");
  const std::int64_t h = chunk_shape[2], w = chunk_shape[3];
  const std::int64_t frame_sz = 3 * h * w;
  Tensor t(Shape{3, h, w});
  const float* p = pixels.data() + index * shape_numel(chunk_shape) +
                   static_cast<std::int64_t>(target_frame_index) * frame_sz;
  for (std::int64_t k = 0; k < frame_sz; ++k) t[k] = static_cast<double>(p[k]);
  return t;
}

}  // namespace neurocodec::stimulus
