#include "neurocodec/io.hpp"

#include <bit>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

namespace neurocodec::io {

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open file: " + path.string());
  f.seekg(0, std::ios::end);
  const std::streamoff n = f.tellg();
  f.seekg(0, std::ios::beg);
  std::vector<std::uint8_t> buf(static_cast<std::size_t>(n));
  if (n > 0) f.read(reinterpret_cast<char*>(buf.data()), n);
  if (!f) throw DataError("short read: " + path.string());
  return buf;
}

void write_file(const fs::path& path, const void* data, std::size_t n) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write file: " + path.string());
  f.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!f) throw DataError("short write: " + path.string());
}

std::uint64_t hash_file(const fs::path& path) {
  const auto bytes = read_file(path);
  return fnv1a64(bytes.data(), bytes.size());
}

json load_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open json: " + path.string());
  json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw DataError("malformed json in " + path.string() + ": " + e.what());
  }
  return j;
}

void save_json(const fs::path& path, const json& j) {
  const std::string s = j.dump(2) + "\n";
  write_file(path, s.data(), s.size());
}

void check_keys(const json& j, const std::vector<std::string>& allowed,
                const std::string& context) {
  if (!j.is_object()) throw ConfigError(context + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const auto& k : allowed)
      if (it.key() == k) { ok = true; break; }
    if (!ok) throw ConfigError(context + ": unknown key \"" + it.key() + "\"");
  }
}

// ---- packed float32 ----------------------------------------------------------

static_assert(sizeof(float) == 4 && std::numeric_limits<float>::is_iec559);

void write_f32(const fs::path& bin_path, const std::vector<float>& values) {
  std::vector<std::uint8_t> bytes(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto u = std::bit_cast<std::uint32_t>(values[i]);
    bytes[4 * i + 0] = static_cast<std::uint8_t>(u & 0xff);
    bytes[4 * i + 1] = static_cast<std::uint8_t>((u >> 8) & 0xff);
    bytes[4 * i + 2] = static_cast<std::uint8_t>((u >> 16) & 0xff);
    bytes[4 * i + 3] = static_cast<std::uint8_t>((u >> 24) & 0xff);
  }
  write_file(bin_path, bytes.data(), bytes.size());
}

std::vector<float> read_f32(const fs::path& bin_path, std::int64_t expected) {
  const auto bytes = read_file(bin_path);
  if (bytes.size() != static_cast<std::size_t>(expected) * 4)
    throw DataError("size mismatch in " + bin_path.string() + ": have " +
                    std::to_string(bytes.size() / 4) + " floats, expected " +
                    std::to_string(expected));
  std::vector<float> v(static_cast<std::size_t>(expected));
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::uint32_t u = static_cast<std::uint32_t>(bytes[4 * i + 0]) |
                            (static_cast<std::uint32_t>(bytes[4 * i + 1]) << 8) |
                            (static_cast<std::uint32_t>(bytes[4 * i + 2]) << 16) |
                            (static_cast<std::uint32_t>(bytes[4 * i + 3]) << 24);
    v[i] = std::bit_cast<float>(u);
  }
  return v;
}

void write_f32_tensor(const fs::path& bin_path, const Tensor& t) {
  std::vector<float> v(static_cast<std::size_t>(t.size()));
  for (std::int64_t i = 0; i < t.size(); ++i)
    v[static_cast<std::size_t>(i)] = static_cast<float>(t[i]);
  write_f32(bin_path, v);
}

Tensor read_f32_tensor(const fs::path& bin_path, const Shape& shape) {
  const auto v = read_f32(bin_path, shape_numel(shape));
  Tensor t(shape);
  for (std::int64_t i = 0; i < t.size(); ++i)
    t[i] = static_cast<double>(v[static_cast<std::size_t>(i)]);
  return t;
}

// ---- doubles -----------------------------------------------------------------

static_assert(sizeof(double) == 8 && std::numeric_limits<double>::is_iec559);

void append_f64_le(std::vector<std::uint8_t>& out, const double* v, std::int64_t n) {
  const std::size_t base = out.size();
  out.resize(base + static_cast<std::size_t>(n) * 8);
  for (std::int64_t i = 0; i < n; ++i) {
    const auto u = std::bit_cast<std::uint64_t>(v[i]);
    for (int b = 0; b < 8; ++b)
      out[base + static_cast<std::size_t>(i) * 8 + static_cast<std::size_t>(b)] =
          static_cast<std::uint8_t>((u >> (8 * b)) & 0xff);
  }
}

void read_f64_le(const std::uint8_t* in, double* v, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) {
    std::uint64_t u = 0;
    for (int b = 7; b >= 0; --b)
      u = (u << 8) | in[static_cast<std::size_t>(i) * 8 + static_cast<std::size_t>(b)];
    v[i] = std::bit_cast<double>(u);
  }
}

void append_u64_le(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<std::uint8_t>((v >> (8 * b)) & 0xff));
}

std::uint64_t read_u64_le(const std::uint8_t* in) {
  std::uint64_t u = 0;
  for (int b = 7; b >= 0; --b) u = (u << 8) | in[b];
  return u;
}

void append_u32_le(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>((v >> (8 * b)) & 0xff));
}

std::uint32_t read_u32_le(const std::uint8_t* in) {
  std::uint32_t u = 0;
  for (int b = 3; b >= 0; --b) u = (u << 8) | in[b];
  return u;
}

// ---- PPM ---------------------------------------------------------------------

void write_ppm(const fs::path& path, const Tensor& frame_chw) {
  if (frame_chw.ndim() != 3 || frame_chw.dim(0) != 3)
    throw DataError("write_ppm expects a [3,H,W] frame, got " + shape_str(frame_chw.shape()));
  const std::int64_t h = frame_chw.dim(1), w = frame_chw.dim(2);
  std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  bytes.reserve(bytes.size() + static_cast<std::size_t>(3 * h * w));
  const double* d = frame_chw.data();
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (std::int64_t c = 0; c < 3; ++c) {
        double v = d[(c * h + y) * w + x];
        if (v < 0.0) v = 0.0;
        if (v > 1.0) v = 1.0;
        bytes.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0)));
      }
  write_file(path, bytes.data(), bytes.size());
}

namespace {
// Skips whitespace and `#` comments between PPM header tokens.
std::size_t ppm_token(const std::vector<std::uint8_t>& b, std::size_t pos, std::string& tok) {
  while (pos < b.size()) {
    if (std::isspace(b[pos])) { ++pos; continue; }
    if (b[pos] == '#') {
      while (pos < b.size() && b[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  tok.clear();
  while (pos < b.size() && !std::isspace(b[pos])) tok.push_back(static_cast<char>(b[pos++]));
  return pos;
}
}  // namespace

Tensor read_ppm(const fs::path& path) {
  const auto bytes = read_file(path);
  std::string tok;
  std::size_t pos = ppm_token(bytes, 0, tok);
  if (tok != "P6") throw DataError("not a P6 ppm: " + path.string());
  pos = ppm_token(bytes, pos, tok);
  const long w = std::strtol(tok.c_str(), nullptr, 10);
  pos = ppm_token(bytes, pos, tok);
  const long h = std::strtol(tok.c_str(), nullptr, 10);
  pos = ppm_token(bytes, pos, tok);
  const long maxval = std::strtol(tok.c_str(), nullptr, 10);
  if (w <= 0 || h <= 0 || maxval != 255)
    throw DataError("unsupported ppm header in " + path.string());
  ++pos;  // single whitespace after maxval
  if (bytes.size() < pos + static_cast<std::size_t>(3 * w * h))
    throw DataError("truncated ppm payload: " + path.string());
  Tensor t(Shape{3, h, w});
  double* d = t.data();
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x)
      for (long c = 0; c < 3; ++c)
        d[(c * h + y) * w + x] =
            static_cast<double>(bytes[pos + static_cast<std::size_t>((y * w + x) * 3 + c)]) / 255.0;
  return t;
}

// ---- misc ---------------------------------------------------------------------

std::string format_double(double v) {
  char buf[40];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double json_snr_value(const json& v) {
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    throw DataError("bad snr entry: " + s);
  }
  return v.get<double>();
}

json snr_to_json(double v) {
  if (std::isinf(v)) return json("inf");
  return json(v);
}

}  // namespace neurocodec::io
