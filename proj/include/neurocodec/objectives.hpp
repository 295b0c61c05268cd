#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "neurocodec/autodiff.hpp"
#include "neurocodec/codec_models.hpp"
#include "neurocodec/tensor.hpp"

namespace neurocodec::objectives {

using nlohmann::json;

// All training hyperparameters in one place. Defaults are the published
// operating point of the method.
struct HyperConfig {
  double alpha = 0.5;     // cosine-distance weight in the encoder loss
  double beta = 0.35;     // perceptual term weight
  double gamma = 0.35;    // structural-similarity term weight
  double delta = 0.30;    // total-variation term weight
  double epsilon = 0.5;   // encoder/decoder mix of the combined loss
  double learning_rate = 1e-4;
  int epochs = 11;
  std::uint64_t seed = 0;

  void validate() const;
  json to_json() const;
  static HyperConfig from_json(const json& j);
};

struct LossBreakdown {
  double mse_v = 0.0;          // voxel mean squared error
  double cos_dist = 0.0;       // mean (1 - cosine similarity) over the batch
  double encoder_loss = 0.0;   // mse_v + alpha * cos_dist
  double psim = 0.0;           // perceptual distance
  double ssim_loss = 0.0;      // 1 - SSIM
  double tv = 0.0;             // total variation of the reconstruction
  double decoder_loss = 0.0;   // beta*psim + gamma*ssim_loss + delta*tv
  double combined_loss = 0.0;  // eps*encoder + (1-eps)*decoder
  int cosine_zero_rows = 0;    // rows hitting the zero-norm rule
};

// ---- SSIM ----

struct SsimParams {
  int window = 11;
  double sigma = 1.5;
  double c1 = 0.01 * 0.01;  // stabilizers for unit data range
  double c2 = 0.03 * 0.03;
};

// Mean local SSIM over sliding Gaussian windows (valid region), averaged
// over channels and batch. Inputs [B,C,H,W] in [0,1].
ad::Value ssim_t(ad::Tape& tape, ad::Value a, ad::Value b, const SsimParams& p = {});

// Single-frame convenience form, [3,H,W] -> value in [-1,1].
double ssim(const Tensor& f, const Tensor& g, const SsimParams& p = {});

// ---- total variation ----

// Mean |horizontal difference| + mean |vertical difference|; [3,H,W].
double tv_loss(const Tensor& frame);

// ---- perceptual distance ----

// Five-stage convolutional feature pyramid. Weights are fixed (never
// trained): either seeded random (hermetic default) or loaded from a
// checkpoint-format file holding a pretrained stack of the same topology.
struct PyramidSpec {
  std::vector<int> stage_channels = {64, 64, 128, 256, 512};
  std::vector<int> stage_convs = {2, 2, 3, 3, 3};
  int kernel = 3;
  int in_channels = 3;

  static PyramidSpec vgg16_shape();  // the five-scale reference topology
  static PyramidSpec small();        // light variant for desk-scale training

  json to_json() const;
  static PyramidSpec from_json(const json& j);
};

struct FeaturePyramid {
  PyramidSpec spec;
  models::ParamStore weights;

  // feature maps for the five stages, gradients flow through x only
  std::vector<ad::Value> stages(ad::Tape& tape, ad::Value x) const;
};

FeaturePyramid make_random_pyramid(const PyramidSpec& spec, std::uint64_t seed);
FeaturePyramid load_pyramid(const std::filesystem::path& checkpoint);

// Sum over the five stages of the mean squared difference between
// unit-normalized feature maps (per sample, per stage).
ad::Value perceptual_t(ad::Tape& tape, ad::Value a, ad::Value b, const FeaturePyramid& pyr);
double perceptual_loss(const Tensor& f, const Tensor& g, const FeaturePyramid& pyr);

// ---- composite losses ----

struct EncoderLossValues {
  ad::Value mse, cos_dist, total;
  int cosine_zero_rows = 0;
};

struct DecoderLossValues {
  ad::Value psim, ssim_loss, tv, total;
};

struct CombinedLossValues {
  EncoderLossValues enc;
  DecoderLossValues dec;
  ad::Value total;
};

// mean-per-element squared error + alpha * mean(1 - cosine similarity);
// minimizing it maximizes cosine similarity.
EncoderLossValues encoder_loss_t(ad::Tape& tape, ad::Value v_true, ad::Value v_pred,
                                 double alpha);
DecoderLossValues decoder_loss_t(ad::Tape& tape, ad::Value f_true, ad::Value f_pred,
                                 const FeaturePyramid& pyr, double beta, double gamma,
                                 double delta, const SsimParams& sp = {});
CombinedLossValues combined_loss_t(ad::Tape& tape, ad::Value v_true, ad::Value v_pred,
                                   ad::Value f_true, ad::Value f_pred,
                                   const FeaturePyramid& pyr, const HyperConfig& cfg,
                                   const SsimParams& sp = {});

// Plain-number wrappers used by tests and reporting. Inputs [B,V] / [B,3,H,W].
double loss_encoder(const Tensor& v, const Tensor& v_pred, double alpha,
                    LossBreakdown* breakdown = nullptr);
double loss_decoder(const Tensor& f, const Tensor& f_pred, double beta, double gamma,
                    double delta, const FeaturePyramid& pyr,
                    LossBreakdown* breakdown = nullptr);
double loss_combined(const Tensor& v, const Tensor& v_pred, const Tensor& f,
                     const Tensor& f_pred, const FeaturePyramid& pyr,
                     const HyperConfig& cfg, LossBreakdown* breakdown = nullptr);

}  // namespace neurocodec::objectives
