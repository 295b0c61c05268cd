#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "neurocodec/codec_models.hpp"
#include "neurocodec/dataset.hpp"
#include "neurocodec/fmri_pipeline.hpp"
#include "neurocodec/objectives.hpp"

namespace neurocodec::trainer {

enum class TrainMode { encoder_only, end_to_end };

std::string mode_name(TrainMode m);
TrainMode mode_from_name(const std::string& s);

struct TrainOptions {
  TrainMode mode = TrainMode::end_to_end;
  objectives::HyperConfig hyper;
  int batch_size = 16;
  data::MaskSelection mask = data::MaskSelection::full;
  models::EncoderSpec encoder;
  models::DecoderSpec decoder;
  objectives::PyramidSpec pyramid = objectives::PyramidSpec::small();
  std::uint64_t pyramid_seed = 101;
  // checkpoint with pretrained pyramid weights; empty keeps the seeded
  // random stack
  std::filesystem::path pyramid_weights;
  // empty run_dir keeps everything in memory (no checkpoints on disk)
  std::filesystem::path run_dir;
  int keep_checkpoint_every = 1;
};

struct EpochStats {
  int epoch = 0;
  objectives::LossBreakdown train;
  objectives::LossBreakdown val;
  double val_encoder_corr = 0.0;
};

struct TrainResult {
  models::ParamStore encoder_params;   // at the best validation epoch
  models::ParamStore decoder_params;   // empty store in encoder_only mode
  std::vector<EpochStats> history;
  int best_epoch = -1;                 // -1 when epochs == 0
  double best_val_loss = 0.0;
};

// Adam (beta1 0.9, beta2 0.999, eps 1e-8) on the mode-appropriate loss.
// Per-epoch sample order is a seeded permutation; dropout noise is derived
// from (seed, epoch, batch), so a run is a pure function of its inputs.
// Validation runs in eval mode. Non-finite losses abort with NumericError.
TrainResult train(const data::Dataset& ds, const fmri::SplitPlan& split,
                  const TrainOptions& options);

// Continues a run directory from its latest epoch checkpoint up to
// hyper.epochs; the result is bit-identical to an uninterrupted run.
TrainResult resume(const std::filesystem::path& run_dir, const data::Dataset& ds,
                   const fmri::SplitPlan& split);

// Mean per-voxel correlation of encoder predictions on a sample list.
double encoder_correlation(const data::Dataset& ds, const data::VoxelView& view,
                           const std::vector<data::SampleRef>& refs,
                           const models::EncoderSpec& spec, models::ParamStore& params,
                           int batch_size = 16);

struct GridCell {
  double epsilon = 0.0;
  int epochs = 0;
  double val_encoder_corr = 0.0;
  double val_loss = 0.0;
  bool best = false;
};

// One model per (epsilon, epochs) cell; ranked by validation encoder
// correlation, best first.
std::vector<GridCell> grid_search(const std::vector<double>& epsilons,
                                  const std::vector<int>& epoch_grid,
                                  const data::Dataset& ds, const fmri::SplitPlan& split,
                                  TrainOptions base);

void write_grid_csv(const std::filesystem::path& path, const std::vector<GridCell>& cells);

void write_history_csv(const std::filesystem::path& path,
                       const std::vector<EpochStats>& history, TrainMode mode);

}  // namespace neurocodec::trainer
