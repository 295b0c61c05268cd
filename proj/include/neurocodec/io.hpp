#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "neurocodec/common.hpp"
#include "neurocodec/tensor.hpp"

namespace neurocodec::io {

using json = nlohmann::json;
namespace fs = std::filesystem;

// ---- raw bytes -------------------------------------------------------------

std::vector<std::uint8_t> read_file(const fs::path& path);
void write_file(const fs::path& path, const void* data, std::size_t n);
std::uint64_t hash_file(const fs::path& path);

// ---- JSON ------------------------------------------------------------------

json load_json(const fs::path& path);
void save_json(const fs::path& path, const json& j);

// Rejects keys outside `allowed`; errors name the offending key.
void check_keys(const json& j, const std::vector<std::string>& allowed,
                const std::string& context);

// ---- packed little-endian float32 arrays -----------------------------------
//
// On-disk array format used for fMRI stacks, chunked stimuli and voxel
// series: a .bin with packed LE float32 values plus a .json sidecar holding
// the shape and domain metadata.

void write_f32(const fs::path& bin_path, const std::vector<float>& values);
std::vector<float> read_f32(const fs::path& bin_path, std::int64_t expected);

void write_f32_tensor(const fs::path& bin_path, const Tensor& t);
Tensor read_f32_tensor(const fs::path& bin_path, const Shape& shape);

// ---- doubles, bit-exact ----------------------------------------------------

void append_f64_le(std::vector<std::uint8_t>& out, const double* v, std::int64_t n);
void read_f64_le(const std::uint8_t* in, double* v, std::int64_t n);
void append_u64_le(std::vector<std::uint8_t>& out, std::uint64_t v);
std::uint64_t read_u64_le(const std::uint8_t* in);
void append_u32_le(std::vector<std::uint8_t>& out, std::uint32_t v);
std::uint32_t read_u32_le(const std::uint8_t* in);

// ---- PPM (P6, 8-bit) frames ------------------------------------------------

// Frames on disk are binary PPM; values map to [0,1] by /255.
void write_ppm(const fs::path& path, const Tensor& frame_chw);
Tensor read_ppm(const fs::path& path);

// ---- misc ------------------------------------------------------------------

std::string format_double(double v);  // shortest round-trip decimal
double json_snr_value(const json& v);  // accepts numbers or "inf"
json snr_to_json(double v);

}  // namespace neurocodec::io
