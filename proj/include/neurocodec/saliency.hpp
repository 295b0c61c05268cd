#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "neurocodec/codec_models.hpp"
#include "neurocodec/objectives.hpp"
#include "neurocodec/tensor.hpp"

namespace neurocodec::saliency {

struct RegionRow {
  std::string region;
  std::int64_t a = 0;        // voxels located in the region
  std::int64_t b = 0;        // threshold-exceeding saliency values in it
  double a_ratio_pct = 0.0;  // A_i / sum A_j, percent
  double b_ratio_pct = 0.0;  // B_i / sum B_j, percent
  double b_over_a_pct = 0.0;
};

struct SaliencyResult {
  std::vector<double> per_voxel_score;  // >= 0
  double top_fraction = 0.20;
  std::vector<bool> top_mask;
  std::vector<RegionRow> region_rows;
};

// score_j = sum over samples of |d ssim(target_n, decoder(voxels_n)) /
// d voxels_n[j]|, decoder in eval mode. The per-sample contributions are
// reduced pairwise in sample order, so duplicating the sample list exactly
// doubles every score.
std::vector<double> compute_saliency(const models::DecoderSpec& spec,
                                     models::ParamStore& params, const Tensor& voxel_inputs,
                                     const std::vector<Tensor>& targets,
                                     const objectives::SsimParams& sp = {},
                                     int batch_size = 16);

// true for the ceil(fraction*V) largest scores; ties to the lower voxel id.
std::vector<bool> top_fraction_mask(const std::vector<double>& scores, double fraction);

// A/B counts and ratio columns per region, region order = first appearance.
std::vector<RegionRow> region_contributions(const std::vector<bool>& top_mask,
                                            const std::vector<std::string>& region_labels);

SaliencyResult analyze(const models::DecoderSpec& spec, models::ParamStore& params,
                       const Tensor& voxel_inputs, const std::vector<Tensor>& targets,
                       const std::vector<std::string>& region_labels,
                       double top_fraction = 0.20);

void write_saliency_csv(const std::filesystem::path& path, const SaliencyResult& result,
                        const std::vector<int>& voxel_ids,
                        const std::vector<std::string>& region_labels);
void write_regions_csv(const std::filesystem::path& path, const SaliencyResult& result);
void write_scores_json(const std::filesystem::path& path, const SaliencyResult& result,
                       const std::vector<int>& voxel_ids);

}  // namespace neurocodec::saliency
