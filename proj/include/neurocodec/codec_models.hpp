#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "neurocodec/autodiff.hpp"
#include "neurocodec/tensor.hpp"

namespace neurocodec::models {

using nlohmann::json;

enum class PoolKind { max, avg };

// One space-time convolution stage: 3-d conv (temporal stride downsamples
// time), batch norm, ReLU, then a 2x2 spatial max pool applied per time
// slice.
struct TemporalBlock {
  int out_channels = 16;
  int kernel_t = 3;
  int kernel_s = 3;
  int stride_t = 1;
};

struct SpatialBlock {
  int out_channels = 128;
  int kernel = 3;
  int stride = 1;
  PoolKind pool = PoolKind::avg;
};

// Video chunk -> voxel vector. Temporal extent must collapse to exactly 1
// across the temporal blocks; this is validated at construction time.
struct EncoderSpec {
  std::vector<TemporalBlock> temporal_blocks;
  std::vector<SpatialBlock> spatial_blocks;
  std::vector<int> fc_widths;  // last entry = V of the active voxel mask
  double dropout_rate = 0.25;
  bool use_batch_norm = true;
  int in_frames = 32;
  int in_channels = 3;
  int in_size = 112;

  int voxels() const { return fc_widths.back(); }
  void validate() const;

  // channels 16/32/64 -> 128/128, FC(1024) -> FC(V); temporal kernels
  // 5/3/3 with strides 4/4/2 collapsing 32 -> 1
  static EncoderSpec reference(int voxels, int in_size = 112);
  // small variant for CPU-scale closed-loop runs
  static EncoderSpec desk(int voxels, int in_size = 32);

  json to_json() const;
  static EncoderSpec from_json(const json& j);
};

struct UpBlock {
  int scale = 2;
  int out_channels = 64;
  int kernel = 3;
};

// Voxel vector -> frame. FC entry to a coarse grid, nearest-neighbor
// upsampling stages, sigmoid output in (0,1).
struct DecoderSpec {
  int in_voxels = 0;
  int entry_channels = 256;
  int entry_h = 7, entry_w = 7;
  std::vector<UpBlock> up_blocks;
  int final_kernel = 3;
  bool use_batch_norm = true;
  int out_channels = 3;

  int out_size() const;
  void validate() const;

  static DecoderSpec reference(int voxels, int out_size = 112);
  static DecoderSpec desk(int voxels, int out_size = 32);

  json to_json() const;
  static DecoderSpec from_json(const json& j);
};

// Flat ordered collection of named tensors. Ordering is creation order and
// is what the checkpoint format serializes, so round-trips are stable.
struct ParamStore {
  struct Entry {
    std::string name;
    Tensor value;
    bool trainable = true;
  };

  std::vector<Entry> entries;
  std::map<std::string, int> index;
  std::string version = "neurocodec-params-v1";

  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool has(const std::string& name) const { return index.count(name) > 0; }
  void add(const std::string& name, Tensor value, bool trainable = true);
  std::int64_t total_parameters() const;
};

// Seeded fan-in-scaled uniform initialization (weights U(+-1/sqrt(fan_in)),
// biases zero, BN gamma 1 / beta 0, running stats 0 / 1).
ParamStore init_encoder_params(const EncoderSpec& spec, std::uint64_t seed);
ParamStore init_decoder_params(const DecoderSpec& spec, std::uint64_t seed);

// Bindings between a tape and a ParamStore: parameters touched by a forward
// pass are leafed once and recorded so the trainer can fetch gradients.
struct BoundParams {
  ad::Tape* tape = nullptr;
  ParamStore* store = nullptr;
  bool train_mode = false;
  std::vector<std::pair<int, ad::Value>> bound;  // (entry index, tape value)

  ad::Value operator()(const std::string& name);
};

// Tape-level forwards. `x` layouts: encoder [B,3,T,H,W] (call
// permute_chunk_batch first), decoder [B,V]. Dropout noise is derived from
// dropout_seed and the layer index only.
ad::Value encoder_forward_t(ad::Tape& tape, const EncoderSpec& spec, BoundParams& params,
                            ad::Value x, bool train_mode, std::uint64_t dropout_seed);
ad::Value decoder_forward_t(ad::Tape& tape, const DecoderSpec& spec, BoundParams& params,
                            ad::Value voxels, bool train_mode);

// Convenience non-tape wrappers matching the chunk layout [B,32,3,H,W].
Tensor encoder_forward(const EncoderSpec& spec, ParamStore& params,
                       const Tensor& chunk_batch, bool train_mode,
                       std::uint64_t dropout_seed = 0);
Tensor decoder_forward(const DecoderSpec& spec, ParamStore& params, const Tensor& voxels,
                       bool train_mode);

// [B,32,3,H,W] -> [B,3,32,H,W]
Tensor permute_chunk_batch(const Tensor& chunk_batch);

// ---- checkpoints ----
//
// Single-file format: magic, format version, JSON manifest (model specs,
// seed, epoch, hyperparameters, anything the caller passes), then the named
// tensor table with little-endian float64 payloads. Round-trips bit-exactly.

void save_checkpoint(const std::filesystem::path& path, const ParamStore& params,
                     const json& manifest);
ParamStore load_checkpoint(const std::filesystem::path& path, json* manifest = nullptr);

}  // namespace neurocodec::models
