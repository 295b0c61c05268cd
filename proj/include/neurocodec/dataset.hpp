#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "neurocodec/fmri_pipeline.hpp"
#include "neurocodec/stimulus_pipeline.hpp"
#include "neurocodec/synthcortex.hpp"
#include "neurocodec/tensor.hpp"

namespace neurocodec::data {

// A processed dataset: per movie, chunked stimulus (float32 in memory, the
// chunks are large) and the delay-aligned z-scored voxel series over the
// full mask. Training and evaluation slice voxel columns through `view`.
struct MovieData {
  std::string id;
  stimulus::ChunkedMovie chunks;
  Tensor voxels;  // [n_chunks, V_full]
  int delay_applied_tr = 0;
};

struct Dataset {
  std::vector<MovieData> movies;
  fmri::VoxelMask mask;
  double tr_seconds = stimulus::kDefaultTrSeconds;

  const MovieData& movie(const std::string& id) const;
  int frame_size() const;
  std::int64_t full_voxels() const;
};

Dataset load_dataset(const std::filesystem::path& dir);

// Column selection for the --mask {full, snr_top} switch.
enum class MaskSelection { full, snr_top };

struct VoxelView {
  std::vector<int> columns;  // indices into the full-mask axis
  std::int64_t count() const { return static_cast<std::int64_t>(columns.size()); }
};

VoxelView make_view(const fmri::VoxelMask& mask, MaskSelection sel);

// One trainable pair: (movie, chunk index).
struct SampleRef {
  int movie = 0;
  int chunk = 0;
};

std::vector<SampleRef> gather_samples(const Dataset& ds, const fmri::SplitPlan& split,
                                      const std::string& section);  // train|val|test

struct Batch {
  Tensor frames_btchw;  // [B, 3, 32, H, W], encoder layout
  Tensor targets;       // [B, 3, H, W] middle frames
  Tensor voxels;        // [B, V_view]
};

Batch assemble_batch(const Dataset& ds, const VoxelView& view,
                     const std::vector<SampleRef>& refs, std::size_t begin, std::size_t end);

// In-memory bridge from the synthetic generator: applies the same
// delay-alignment and final normalization the preprocessing command applies
// (the synthetic response carries its delay inside the HRF).
Dataset dataset_from_synth(const synthcortex::SynthDataset& synth, int delay_tr);

}  // namespace neurocodec::data
