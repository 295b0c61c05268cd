#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "neurocodec/fmri_pipeline.hpp"
#include "neurocodec/stimulus_pipeline.hpp"
#include "neurocodec/tensor.hpp"

namespace neurocodec::synthcortex {

// Paired (video, fMRI) data generated from a known response model, so the
// whole encode/decode/attribute loop can be validated at desk scale against
// ground truth.

struct GaborSpec {
  double orientation = 0.0;   // radians
  double frequency = 0.0;     // cycles per pixel
  double phase = 0.0;         // radians
  double center_x = 0.0;      // pixels
  double center_y = 0.0;
  double envelope_sigma = 1.0;  // pixels
};

struct HrfSpec {
  enum class Kind { delay, double_gamma };
  Kind kind = Kind::delay;
  int delay_tr = fmri::kDefaultDelayTr;  // used by Kind::delay
  double tr_seconds = stimulus::kDefaultTrSeconds;
};

struct SynthGroundTruth {
  std::vector<GaborSpec> gabor_bank;
  Tensor weights;  // [V, F] voxel loadings
  std::vector<double> hrf_kernel;  // unit sum
  double noise_sigma = 0.0;
  std::vector<std::string> region_of_voxel;
};

struct SynthConfig {
  int n_movies = 2;
  int chunks_per_movie = 300;
  int voxels = 128;
  int features = 16;
  int frame_size = 32;
  int n_regions = 4;
  double noise_sigma = 0.35;
  double tr_seconds = stimulus::kDefaultTrSeconds;
  int subjects = 4;                 // raw export only
  double informative_fraction = 1.0;  // voxels with nonzero loadings
  HrfSpec hrf;
  std::uint64_t seed = 0;
  std::string movie_prefix = "synth";
};

// Discretized double-gamma response (peak ~5 s, undershoot ~15 s, truncated
// at 20 s) sampled at tr_seconds, normalized to unit sum; or a pure
// delay_tr-step delta, mirroring the fixed-delay alignment assumption.
std::vector<double> make_hrf(const HrfSpec& spec);

// Kernels are zero-mean and unit-L2 so responses reflect structure rather
// than brightness. Feature f is |<grayscale(frame), gabor_f>| with
// grayscale = mean of the RGB channels.
Tensor gabor_kernel(const GaborSpec& spec, int h, int w);
std::vector<double> gabor_features(const Tensor& frame, const std::vector<GaborSpec>& bank);

std::vector<GaborSpec> default_bank(int features, int frame_size);

// Target-frame features -> weights -> causal HRF convolution -> Gaussian
// noise -> per-voxel z-score.
Tensor synth_bold(const std::vector<stimulus::VideoChunk>& chunks,
                  const SynthGroundTruth& gt, std::uint64_t seed);

struct SynthMovie {
  std::string id;
  std::vector<stimulus::VideoChunk> chunks;
  Tensor bold;         // [N, V] z-scored, delay baked in via the HRF
  Tensor clean_signal; // [N, V] pre-noise, pre-normalization
};

struct SynthDataset {
  SynthConfig config;
  std::vector<SynthMovie> movies;
  SynthGroundTruth gt;
  fmri::VoxelMask mask;  // full mask: every voxel selected, regions labeled
};

SynthDataset make_synth_dataset(const SynthConfig& cfg);

// Writes the raw-directory layout the preprocessing command consumes:
// per-movie PPM frames + movie.json, per-movie multi-subject fMRI stacks
// (baseline + clean signal + per-subject noise), atlas labels, and the
// ground truth for oracle tests.
void export_raw(const SynthDataset& ds, const std::filesystem::path& dir);

void write_ground_truth(const std::filesystem::path& dir, const SynthGroundTruth& gt);
SynthGroundTruth read_ground_truth(const std::filesystem::path& dir);

}  // namespace neurocodec::synthcortex
