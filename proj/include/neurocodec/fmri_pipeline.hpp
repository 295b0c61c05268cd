#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "neurocodec/tensor.hpp"

namespace neurocodec::fmri {

inline constexpr int kDefaultDelayTr = 4;
inline constexpr double kDefaultSnrFraction = 0.30;
inline constexpr double kDefaultTrainFrac = 0.8;

// Subjects x TRs x voxels, as acquired (baselines still present).
struct SubjectStack {
  Tensor data;  // [S, T, V]
  double tr_seconds = 1.3;

  std::int64_t subjects() const { return data.dim(0); }
  std::int64_t trs() const { return data.dim(1); }
  std::int64_t voxels() const { return data.dim(2); }
};

// Delay-aligned, z-scored group series paired row-for-row with stimulus
// chunks.
struct VoxelSeries {
  Tensor data;  // [n_chunks, V]
  std::string movie_id;
  int delay_applied_tr = 0;
};

struct VoxelMask {
  std::vector<int> voxel_ids;
  std::vector<std::string> region_label;
  std::vector<bool> selected;
  std::vector<double> snr;

  std::int64_t size() const { return static_cast<std::int64_t>(voxel_ids.size()); }
  std::int64_t selected_count() const;
  std::vector<int> selected_indices() const;
};

struct SplitLists {
  std::vector<int> train, val, test;
};

struct SplitPlan {
  std::map<std::string, SplitLists> movies;
  std::string held_out_movie_id;
  double train_frac = kDefaultTrainFrac;
  int ratio_train = 4, ratio_val = 1;
  std::uint64_t seed = 0;
};

// Per-column z-score with sample (ddof=1) std; constant columns map to
// all-zero.
Tensor zscore_voxels(const Tensor& data);

// Row i of the result is fmri row (i + delay_tr): stimulus chunk i then
// pairs with the hemodynamically delayed response.
Tensor align_delay(const Tensor& fmri, std::int64_t n_chunks, int delay_tr);

// Per-voxel signal-to-noise: variance over time of the subject-mean signal,
// divided by the variance over subjects of each subject's time-mean. Zero
// noise variance yields +inf, which ranks above every finite value.
// Variances use ddof=1.
std::vector<double> compute_snr(const SubjectStack& stack);

// Indices of the floor(fraction*V) largest values; ties broken by lower id.
std::vector<bool> select_top_fraction(const std::vector<double>& snr, double fraction);

Tensor average_subjects(const SubjectStack& stack);

// Per non-held-out movie, chunks [0, floor(train_frac*N)) are assigned
// uniformly at random (seeded per movie) to train/val at the given ratio
// (floor for val, remainder train); the last block is test. The held-out
// movie is entirely test.
SplitPlan make_split(const std::map<std::string, int>& movie_chunk_counts,
                     const std::string& held_out, double train_frac = kDefaultTrainFrac,
                     std::pair<int, int> ratio = {4, 1}, std::uint64_t seed = 0);

// ---- on-disk formats ----

struct FmriHeader {
  std::int64_t subjects = 0, trs = 0, voxels = 0;
  double tr_seconds = 1.3;
  std::string movie_id;
};

void write_subject_stack(const std::filesystem::path& dir, const SubjectStack& stack,
                         const std::string& movie_id);
SubjectStack read_subject_stack(const std::filesystem::path& dir, std::string* movie_id = nullptr);

void write_mask(const std::filesystem::path& path, const VoxelMask& mask);
VoxelMask read_mask(const std::filesystem::path& path);

void write_split(const std::filesystem::path& path, const SplitPlan& plan);
SplitPlan read_split(const std::filesystem::path& path);

void write_voxel_series(const std::filesystem::path& dir, const VoxelSeries& series);
VoxelSeries read_voxel_series(const std::filesystem::path& dir);

}  // namespace neurocodec::fmri
