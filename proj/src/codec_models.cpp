#include "neurocodec/codec_models.hpp"

#include <cmath>

#include "neurocodec/io.hpp"
#include "neurocodec/rng.hpp"

namespace neurocodec::models {

namespace {

std::int64_t conv_out_size(std::int64_t in, std::int64_t k, std::int64_t s, std::int64_t p) {
  return (in + 2 * p - k) / s + 1;
}

PoolKind pool_from_string(const std::string& s) {
  if (s == "max") return PoolKind::max;
  if (s == "avg") return PoolKind::avg;
  throw ConfigError("unknown pool kind: " + s);
}

std::string pool_to_string(PoolKind p) { return p == PoolKind::max ? "max" : "avg"; }

}  // namespace

// ---- specs -------------------------------------------------------------------

void EncoderSpec::validate() const {
  if (temporal_blocks.empty()) throw ConfigError("encoder: need temporal blocks");
  if (fc_widths.empty()) throw ConfigError("encoder: need fc widths");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0)
    throw ConfigError("encoder: dropout_rate must be in [0,1)");
  std::int64_t t = in_frames, s = in_size;
  for (const auto& b : temporal_blocks) {
    t = conv_out_size(t, b.kernel_t, b.stride_t, (b.kernel_t - 1) / 2);
    s = conv_out_size(s, b.kernel_s, 1, (b.kernel_s - 1) / 2);
    if (t < 1 || s < 2) throw ConfigError("encoder: temporal stack collapses too far");
    s = (s - 2) / 2 + 1;  // spatial max pool 2x2
  }
  if (t != 1)
    throw ConfigError("encoder: temporal extent must collapse to 1, got " + std::to_string(t));
  for (const auto& b : spatial_blocks) {
    s = conv_out_size(s, b.kernel, b.stride, (b.kernel - 1) / 2);
    if (s < 2) throw ConfigError("encoder: spatial stack collapses too far");
    s = (s - 2) / 2 + 1;
  }
  if (s < 1) throw ConfigError("encoder: no spatial extent left before FC");
}

EncoderSpec EncoderSpec::reference(int voxels, int in_size) {
  EncoderSpec e;
  e.temporal_blocks = {{16, 5, 3, 4}, {32, 3, 3, 4}, {64, 3, 3, 2}};
  e.spatial_blocks = {{128, 3, 1, PoolKind::avg}, {128, 3, 1, PoolKind::avg}};
  e.fc_widths = {1024, voxels};
  e.dropout_rate = 0.25;
  e.in_size = in_size;
  e.validate();
  return e;
}

EncoderSpec EncoderSpec::desk(int voxels, int in_size) {
  EncoderSpec e;
  e.temporal_blocks = {{8, 5, 3, 8}, {16, 3, 3, 4}};
  e.spatial_blocks = {{32, 3, 1, PoolKind::avg}};
  e.fc_widths = {256, voxels};
  e.dropout_rate = 0.1;
  e.in_size = in_size;
  e.validate();
  return e;
}

json EncoderSpec::to_json() const {
  json tb = json::array();
  for (const auto& b : temporal_blocks)
    tb.push_back({{"out_channels", b.out_channels},
                  {"kernel_t", b.kernel_t},
                  {"kernel_s", b.kernel_s},
                  {"stride_t", b.stride_t}});
  json sb = json::array();
  for (const auto& b : spatial_blocks)
    sb.push_back({{"out_channels", b.out_channels},
                  {"kernel", b.kernel},
                  {"stride", b.stride},
                  {"pool", pool_to_string(b.pool)}});
  return {{"temporal_blocks", tb}, {"spatial_blocks", sb},
          {"fc_widths", fc_widths}, {"dropout_rate", dropout_rate},
          {"use_batch_norm", use_batch_norm}, {"in_frames", in_frames},
          {"in_channels", in_channels}, {"in_size", in_size}};
}

EncoderSpec EncoderSpec::from_json(const json& j) {
  io::check_keys(j, {"temporal_blocks", "spatial_blocks", "fc_widths", "dropout_rate",
                     "use_batch_norm", "in_frames", "in_channels", "in_size"},
                 "encoder spec");
  EncoderSpec e;
  e.temporal_blocks.clear();
  for (const auto& b : j.at("temporal_blocks"))
    e.temporal_blocks.push_back({b.at("out_channels").get<int>(), b.at("kernel_t").get<int>(),
                                 b.at("kernel_s").get<int>(), b.at("stride_t").get<int>()});
  e.spatial_blocks.clear();
  for (const auto& b : j.at("spatial_blocks"))
    e.spatial_blocks.push_back({b.at("out_channels").get<int>(), b.at("kernel").get<int>(),
                                b.at("stride").get<int>(),
                                pool_from_string(b.at("pool").get<std::string>())});
  e.fc_widths = j.at("fc_widths").get<std::vector<int>>();
  e.dropout_rate = j.at("dropout_rate").get<double>();
  e.use_batch_norm = j.at("use_batch_norm").get<bool>();
  e.in_frames = j.at("in_frames").get<int>();
  e.in_channels = j.at("in_channels").get<int>();
  e.in_size = j.at("in_size").get<int>();
  e.validate();
  return e;
}

int DecoderSpec::out_size() const {
  int s = entry_h;
  for (const auto& b : up_blocks) s *= b.scale;
  return s;
}

void DecoderSpec::validate() const {
  if (in_voxels < 1) throw ConfigError("decoder: in_voxels must be positive");
  if (entry_channels < 1 || entry_h < 1 || entry_w < 1)
    throw ConfigError("decoder: bad entry grid");
  if (up_blocks.empty()) throw ConfigError("decoder: need upsample blocks");
  if (entry_h != entry_w) throw ConfigError("decoder: entry grid must be square");
}

DecoderSpec DecoderSpec::reference(int voxels, int out_size) {
  DecoderSpec d;
  d.in_voxels = voxels;
  d.entry_channels = 256;
  d.entry_h = d.entry_w = out_size / 16;
  d.up_blocks = {{2, 128, 3}, {2, 64, 3}, {2, 32, 3}, {2, 16, 3}};
  d.validate();
  if (d.out_size() != out_size)
    throw ConfigError("decoder: out_size must be divisible by 16");
  return d;
}

DecoderSpec DecoderSpec::desk(int voxels, int out_size) {
  DecoderSpec d;
  d.in_voxels = voxels;
  d.entry_channels = 64;
  d.entry_h = d.entry_w = out_size / 16;
  d.up_blocks = {{2, 48, 3}, {2, 32, 3}, {2, 24, 3}, {2, 16, 3}};
  d.validate();
  if (d.out_size() != out_size)
    throw ConfigError("decoder: out_size must be divisible by 16");
  return d;
}

json DecoderSpec::to_json() const {
  json ub = json::array();
  for (const auto& b : up_blocks)
    ub.push_back({{"scale", b.scale}, {"out_channels", b.out_channels}, {"kernel", b.kernel}});
  return {{"in_voxels", in_voxels}, {"entry_channels", entry_channels},
          {"entry_h", entry_h}, {"entry_w", entry_w}, {"up_blocks", ub},
          {"final_kernel", final_kernel}, {"use_batch_norm", use_batch_norm},
          {"out_channels", out_channels}};
}

DecoderSpec DecoderSpec::from_json(const json& j) {
  io::check_keys(j, {"in_voxels", "entry_channels", "entry_h", "entry_w", "up_blocks",
                     "final_kernel", "use_batch_norm", "out_channels"},
                 "decoder spec");
  DecoderSpec d;
  d.in_voxels = j.at("in_voxels").get<int>();
  d.entry_channels = j.at("entry_channels").get<int>();
  d.entry_h = j.at("entry_h").get<int>();
  d.entry_w = j.at("entry_w").get<int>();
  d.up_blocks.clear();
  for (const auto& b : j.at("up_blocks"))
    d.up_blocks.push_back({b.at("scale").get<int>(), b.at("out_channels").get<int>(),
                           b.at("kernel").get<int>()});
  d.final_kernel = j.at("final_kernel").get<int>();
  d.use_batch_norm = j.at("use_batch_norm").get<bool>();
  d.out_channels = j.at("out_channels").get<int>();
  d.validate();
  return d;
}

// ---- param store ---------------------------------------------------------------

Tensor& ParamStore::at(const std::string& name) {
  auto it = index.find(name);
  if (it == index.end()) throw DataError("unknown parameter: " + name);
  return entries[static_cast<std::size_t>(it->second)].value;
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = index.find(name);
  if (it == index.end()) throw DataError("unknown parameter: " + name);
  return entries[static_cast<std::size_t>(it->second)].value;
}

void ParamStore::add(const std::string& name, Tensor value, bool trainable) {
  if (index.count(name)) throw DataError("duplicate parameter: " + name);
  index[name] = static_cast<int>(entries.size());
  entries.push_back({name, std::move(value), trainable});
}

std::int64_t ParamStore::total_parameters() const {
  std::int64_t n = 0;
  for (const auto& e : entries)
    if (e.trainable) n += e.value.size();
  return n;
}

namespace {

Tensor fan_in_uniform(rng::Stream& rs, Shape shape, std::int64_t fan_in) {
  Tensor t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rs.uniform(-bound, bound);
  return t;
}

void add_bn(ParamStore& p, const std::string& prefix, int channels) {
  p.add(prefix + ".gamma", Tensor(Shape{channels}, 1.0));
  p.add(prefix + ".beta", Tensor(Shape{channels}));
  p.add(prefix + ".running_mean", Tensor(Shape{channels}), false);
  p.add(prefix + ".running_var", Tensor(Shape{channels}, 1.0), false);
}

}  // namespace

ParamStore init_encoder_params(const EncoderSpec& spec, std::uint64_t seed) {
  spec.validate();
  ParamStore p;
  rng::Stream rs(rng::derive(seed, "encoder-init"));
  int c = spec.in_channels;
  std::int64_t t = spec.in_frames, s = spec.in_size;
  int i = 0;
  for (const auto& b : spec.temporal_blocks) {
    const std::string prefix = "enc.t" + std::to_string(i++);
    const std::int64_t fan_in = static_cast<std::int64_t>(c) * b.kernel_t * b.kernel_s * b.kernel_s;
    p.add(prefix + ".conv.weight",
          fan_in_uniform(rs, {b.out_channels, c, b.kernel_t, b.kernel_s, b.kernel_s}, fan_in));
    p.add(prefix + ".conv.bias", Tensor(Shape{b.out_channels}));
    if (spec.use_batch_norm) add_bn(p, prefix + ".bn", b.out_channels);
    c = b.out_channels;
    t = conv_out_size(t, b.kernel_t, b.stride_t, (b.kernel_t - 1) / 2);
    s = conv_out_size(s, b.kernel_s, 1, (b.kernel_s - 1) / 2);
    s = (s - 2) / 2 + 1;
  }
  i = 0;
  for (const auto& b : spec.spatial_blocks) {
    const std::string prefix = "enc.s" + std::to_string(i++);
    const std::int64_t fan_in = static_cast<std::int64_t>(c) * b.kernel * b.kernel;
    p.add(prefix + ".conv.weight", fan_in_uniform(rs, {b.out_channels, c, b.kernel, b.kernel}, fan_in));
    p.add(prefix + ".conv.bias", Tensor(Shape{b.out_channels}));
    if (spec.use_batch_norm) add_bn(p, prefix + ".bn", b.out_channels);
    c = b.out_channels;
    s = conv_out_size(s, b.kernel, b.stride, (b.kernel - 1) / 2);
    s = (s - 2) / 2 + 1;
  }
  std::int64_t width = static_cast<std::int64_t>(c) * s * s;
  i = 0;
  for (int fc : spec.fc_widths) {
    const std::string prefix = "enc.fc" + std::to_string(i++);
    p.add(prefix + ".weight", fan_in_uniform(rs, {fc, width}, width));
    p.add(prefix + ".bias", Tensor(Shape{fc}));
    width = fc;
  }
  return p;
}

ParamStore init_decoder_params(const DecoderSpec& spec, std::uint64_t seed) {
  spec.validate();
  ParamStore p;
  rng::Stream rs(rng::derive(seed, "decoder-init"));
  const std::int64_t entry = static_cast<std::int64_t>(spec.entry_channels) * spec.entry_h * spec.entry_w;
  p.add("dec.entry.weight", fan_in_uniform(rs, {entry, spec.in_voxels}, spec.in_voxels));
  p.add("dec.entry.bias", Tensor(Shape{entry}));
  int c = spec.entry_channels;
  int i = 0;
  for (const auto& b : spec.up_blocks) {
    const std::string prefix = "dec.up" + std::to_string(i++);
    const std::int64_t fan_in = static_cast<std::int64_t>(c) * b.kernel * b.kernel;
    p.add(prefix + ".conv.weight", fan_in_uniform(rs, {b.out_channels, c, b.kernel, b.kernel}, fan_in));
    p.add(prefix + ".conv.bias", Tensor(Shape{b.out_channels}));
    if (spec.use_batch_norm) add_bn(p, prefix + ".bn", b.out_channels);
    c = b.out_channels;
  }
  const std::int64_t fan_in = static_cast<std::int64_t>(c) * spec.final_kernel * spec.final_kernel;
  p.add("dec.out.conv.weight",
        fan_in_uniform(rs, {spec.out_channels, c, spec.final_kernel, spec.final_kernel}, fan_in));
  p.add("dec.out.conv.bias", Tensor(Shape{spec.out_channels}));
  return p;
}

// ---- forwards -------------------------------------------------------------------

ad::Value BoundParams::operator()(const std::string& name) {
  auto it = store->index.find(name);
  if (it == store->index.end()) throw DataError("forward pass needs missing parameter " + name);
  for (const auto& [entry, value] : bound)
    if (entry == it->second) return value;
  auto& e = store->entries[static_cast<std::size_t>(it->second)];
  ad::Value v = tape->leaf(e.value, e.trainable);
  bound.emplace_back(it->second, v);
  return v;
}

namespace {

ad::Value bn_or_identity(ad::Tape& tape, BoundParams& params, const std::string& prefix,
                         ad::Value x, bool use_bn, bool train_mode) {
  if (!use_bn) return x;
  ad::BatchNormOpts opts;
  opts.use_batch_stats = train_mode;
  opts.update_running = train_mode;
  return tape.batchnorm(x, params(prefix + ".gamma"), params(prefix + ".beta"),
                        &params.store->at(prefix + ".running_mean"),
                        &params.store->at(prefix + ".running_var"), opts);
}

}  // namespace

ad::Value encoder_forward_t(ad::Tape& tape, const EncoderSpec& spec, BoundParams& params,
                            ad::Value x, bool train_mode, std::uint64_t dropout_seed) {
  const Tensor& in = tape.val(x);
  if (in.ndim() != 5 || in.dim(1) != spec.in_channels || in.dim(2) != spec.in_frames ||
      in.dim(3) != spec.in_size || in.dim(4) != spec.in_size)
    throw DataError("encoder: input shape " + shape_str(in.shape()) +
                    " does not match the spec");
  const std::int64_t B = in.dim(0);

  ad::Value h = x;
  int i = 0;
  for (const auto& b : spec.temporal_blocks) {
    const std::string prefix = "enc.t" + std::to_string(i++);
    ad::Conv3dGeom gm;
    gm.stride_t = b.stride_t;
    gm.pad_t = (b.kernel_t - 1) / 2;
    gm.pad_h = gm.pad_w = (b.kernel_s - 1) / 2;
    h = tape.conv3d(h, params(prefix + ".conv.weight"), params(prefix + ".conv.bias"), gm);
    h = bn_or_identity(tape, params, prefix + ".bn", h, spec.use_batch_norm, train_mode);
    h = tape.relu(h);
    // spatial 2x2 max pool per time slice: fold T into the batch axis
    const Shape s5 = tape.val(h).shape();
    h = tape.reshape(h, {s5[0] * s5[1] * s5[2], 1, s5[3], s5[4]});
    h = tape.maxpool2d(h, 2, 2);
    const Shape sp = tape.val(h).shape();
    h = tape.reshape(h, {s5[0], s5[1], s5[2], sp[2], sp[3]});
  }

  // temporal extent is 1 by spec validation; drop it
  {
    const Shape s5 = tape.val(h).shape();
    h = tape.reshape(h, {s5[0], s5[1], s5[3], s5[4]});
  }

  i = 0;
  for (const auto& b : spec.spatial_blocks) {
    const std::string prefix = "enc.s" + std::to_string(i++);
    ad::Conv2dGeom gm;
    gm.stride_h = gm.stride_w = b.stride;
    gm.pad_h = gm.pad_w = (b.kernel - 1) / 2;
    h = tape.conv2d(h, params(prefix + ".conv.weight"), params(prefix + ".conv.bias"), gm);
    h = bn_or_identity(tape, params, prefix + ".bn", h, spec.use_batch_norm, train_mode);
    h = tape.relu(h);
    h = b.pool == PoolKind::max ? tape.maxpool2d(h, 2, 2) : tape.avgpool2d(h, 2, 2);
  }

  {
    const Shape s4 = tape.val(h).shape();
    h = tape.reshape(h, {B, s4[1] * s4[2] * s4[3]});
  }

  const auto n_fc = static_cast<int>(spec.fc_widths.size());
  for (int k = 0; k < n_fc; ++k) {
    const std::string prefix = "enc.fc" + std::to_string(k);
    h = tape.linear(h, params(prefix + ".weight"), params(prefix + ".bias"));
    if (k + 1 < n_fc) {
      h = tape.relu(h);
      if (train_mode && spec.dropout_rate > 0.0)
        h = tape.dropout(h, spec.dropout_rate,
                         rng::derive(dropout_seed, "enc-dropout", static_cast<std::uint64_t>(k)));
    }
  }
  return h;
}

ad::Value decoder_forward_t(ad::Tape& tape, const DecoderSpec& spec, BoundParams& params,
                            ad::Value voxels, bool train_mode) {
  const Tensor& in = tape.val(voxels);
  if (in.ndim() != 2 || in.dim(1) != spec.in_voxels)
    throw DataError("decoder: input shape " + shape_str(in.shape()) +
                    " does not match in_voxels=" + std::to_string(spec.in_voxels));
  const std::int64_t B = in.dim(0);

  ad::Value h = tape.linear(voxels, params("dec.entry.weight"), params("dec.entry.bias"));
  h = tape.relu(h);
  h = tape.reshape(h, {B, spec.entry_channels, spec.entry_h, spec.entry_w});

  int i = 0;
  for (const auto& b : spec.up_blocks) {
    const std::string prefix = "dec.up" + std::to_string(i++);
    h = tape.upsample2d_nearest(h, b.scale);
    ad::Conv2dGeom gm;
    gm.pad_h = gm.pad_w = (b.kernel - 1) / 2;
    h = tape.conv2d(h, params(prefix + ".conv.weight"), params(prefix + ".conv.bias"), gm);
    h = bn_or_identity(tape, params, prefix + ".bn", h, spec.use_batch_norm, train_mode);
    h = tape.relu(h);
  }
  ad::Conv2dGeom gm;
  gm.pad_h = gm.pad_w = (spec.final_kernel - 1) / 2;
  h = tape.conv2d(h, params("dec.out.conv.weight"), params("dec.out.conv.bias"), gm);
  return tape.sigmoid(h);
}

Tensor permute_chunk_batch(const Tensor& chunk_batch) {
  if (chunk_batch.ndim() != 5)
    throw DataError("permute_chunk_batch: expected [B,T,C,H,W]");
  const std::int64_t B = chunk_batch.dim(0), T = chunk_batch.dim(1), C = chunk_batch.dim(2),
                     H = chunk_batch.dim(3), W = chunk_batch.dim(4);
  Tensor out(Shape{B, C, T, H, W});
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t t = 0; t < T; ++t)
      for (std::int64_t c = 0; c < C; ++c)
        std::copy_n(chunk_batch.data() + (((b * T + t) * C + c) * H) * W, H * W,
                    out.data() + (((b * C + c) * T + t) * H) * W);
  return out;
}

Tensor encoder_forward(const EncoderSpec& spec, ParamStore& params, const Tensor& chunk_batch,
                       bool train_mode, std::uint64_t dropout_seed) {
  ad::Tape tape;
  BoundParams bp{&tape, &params, train_mode, {}};
  ad::Value x = tape.leaf(permute_chunk_batch(chunk_batch), false);
  return tape.val(encoder_forward_t(tape, spec, bp, x, train_mode, dropout_seed));
}

Tensor decoder_forward(const DecoderSpec& spec, ParamStore& params, const Tensor& voxels,
                       bool train_mode) {
  ad::Tape tape;
  BoundParams bp{&tape, &params, train_mode, {}};
  ad::Value x = tape.leaf(voxels, false);
  return tape.val(decoder_forward_t(tape, spec, bp, x, train_mode));
}

// ---- checkpoints ----------------------------------------------------------------

namespace {
constexpr char kMagic[4] = {'N', 'C', 'K', 'P'};
constexpr std::uint32_t kFormatVersion = 1;
}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParamStore& params,
                     const json& manifest) {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + 4);
  io::append_u32_le(out, kFormatVersion);
  json m = manifest;
  m["param_version"] = params.version;
  const std::string mj = m.dump();
  io::append_u64_le(out, mj.size());
  out.insert(out.end(), mj.begin(), mj.end());
  io::append_u64_le(out, params.entries.size());
  for (const auto& e : params.entries) {
    io::append_u64_le(out, e.name.size());
    out.insert(out.end(), e.name.begin(), e.name.end());
    out.push_back(e.trainable ? 1 : 0);
    out.push_back(0);  // dtype: 0 = float64
    out.push_back(static_cast<std::uint8_t>(e.value.ndim()));
    for (int d = 0; d < e.value.ndim(); ++d)
      io::append_u64_le(out, static_cast<std::uint64_t>(e.value.dim(d)));
    io::append_f64_le(out, e.value.data(), e.value.size());
  }
  io::write_file(path, out.data(), out.size());
}

ParamStore load_checkpoint(const std::filesystem::path& path, json* manifest) {
  const auto bytes = io::read_file(path);
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (pos + n > bytes.size()) throw DataError("truncated checkpoint: " + path.string());
  };
  need(8);
  if (!std::equal(kMagic, kMagic + 4, bytes.begin()))
    throw DataError("not a checkpoint file: " + path.string());
  const std::uint32_t ver = io::read_u32_le(bytes.data() + 4);
  if (ver != kFormatVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(ver) + " in " +
                    path.string());
  pos = 8;
  need(8);
  const std::uint64_t mlen = io::read_u64_le(bytes.data() + pos);
  pos += 8;
  need(mlen);
  json m = json::parse(std::string(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                   bytes.begin() + static_cast<std::ptrdiff_t>(pos + mlen)));
  pos += mlen;
  if (manifest) *manifest = m;

  ParamStore p;
  if (m.contains("param_version")) p.version = m["param_version"].get<std::string>();
  need(8);
  const std::uint64_t count = io::read_u64_le(bytes.data() + pos);
  pos += 8;
  for (std::uint64_t k = 0; k < count; ++k) {
    need(8);
    const std::uint64_t nlen = io::read_u64_le(bytes.data() + pos);
    pos += 8;
    need(nlen + 3);
    std::string name(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                     bytes.begin() + static_cast<std::ptrdiff_t>(pos + nlen));
    pos += nlen;
    const bool trainable = bytes[pos++] != 0;
    const std::uint8_t dtype = bytes[pos++];
    if (dtype != 0) throw DataError("unsupported tensor dtype in " + path.string());
    const std::uint8_t ndim = bytes[pos++];
    Shape shape(ndim);
    need(8ull * ndim);
    for (int d = 0; d < ndim; ++d) {
      shape[static_cast<std::size_t>(d)] =
          static_cast<std::int64_t>(io::read_u64_le(bytes.data() + pos));
      pos += 8;
    }
    Tensor t(shape);
    need(static_cast<std::size_t>(t.size()) * 8);
    io::read_f64_le(bytes.data() + pos, t.data(), t.size());
    pos += static_cast<std::size_t>(t.size()) * 8;
    p.add(name, std::move(t), trainable);
  }
  return p;
}

}  // namespace neurocodec::models
