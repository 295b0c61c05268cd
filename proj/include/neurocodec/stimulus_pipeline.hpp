#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "neurocodec/tensor.hpp"

namespace neurocodec::stimulus {

inline constexpr int kFramesPerChunk = 32;
inline constexpr int kDefaultTargetFrame = 16;
inline constexpr double kDefaultTrSeconds = 1.3;

// One repetition time's worth of stimulus: 32 RGB frames in [0,1] plus the
// index of the frame the decoder reconstructs.
struct VideoChunk {
  std::string movie_id;
  int chunk_index = 0;
  Tensor frames;  // [32, 3, H, W]
  int target_frame_index = kDefaultTargetFrame;
};

struct TargetFrame {
  Tensor pixels;  // [3, H, W]
};

// Temporal resampling to 32 frames per TR (nearest source frame by time)
// combined with spatial standardization (center crop to square, bilinear
// scale to target_size x target_size; target_size <= 0 keeps the native
// size, inputs must then already be square). A trailing partial TR is
// dropped.
Tensor resample_movie(const Tensor& frames, double fps_raw, double tr_seconds,
                      int target_size);

// Splits [N*32, 3, H, W] into N chunks covering frames [32i, 32i+32).
std::vector<VideoChunk> chunk_movie(const Tensor& frames, const std::string& movie_id,
                                    int target_frame_index = kDefaultTargetFrame);

TargetFrame extract_target(const VideoChunk& chunk);

// Spatial helper shared with the synthetic generator: center crop to square
// then bilinear resize. Frame layout [3, H, W], values stay in [0,1].
Tensor resize_frame(const Tensor& frame, int target_size);

// ---- on-disk formats ----
//
// Movie input: a directory of numbered image files (lexicographic order is
// temporal order) next to a movie.json sidecar {movie_id, fps, width,
// height, frame_count}. Chunked output: chunks.bin (packed LE float32,
// [n_chunks, 32, 3, H, W]) + chunks.json header.

struct MovieSidecar {
  std::string movie_id;
  double fps = 0.0;
  int width = 0, height = 0;
  std::int64_t frame_count = 0;
};

MovieSidecar read_movie_sidecar(const std::filesystem::path& movie_dir);
Tensor load_movie_frames(const std::filesystem::path& movie_dir, const MovieSidecar& meta);

void write_chunks(const std::filesystem::path& dir, const std::string& movie_id,
                  const std::vector<VideoChunk>& chunks);

struct ChunkedMovie {
  std::string movie_id;
  std::int64_t n_chunks = 0;
  int target_frame_index = kDefaultTargetFrame;
  Shape chunk_shape;            // [32, 3, H, W]
  std::vector<float> pixels;    // packed [n_chunks * 32*3*H*W]

  Tensor chunk_frames(std::int64_t index) const;         // [32,3,H,W]
  Tensor target_frame(std::int64_t index, int target_frame_index = kDefaultTargetFrame) const;
};

ChunkedMovie read_chunks(const std::filesystem::path& dir);

}  // namespace neurocodec::stimulus
