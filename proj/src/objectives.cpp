#include "neurocodec/objectives.hpp"

#include <cmath>

#include "neurocodec/io.hpp"
#include "neurocodec/rng.hpp"

namespace neurocodec::objectives {

using ad::Tape;
using ad::Value;

void HyperConfig::validate() const {
  if (epsilon < 0.0 || epsilon > 1.0) throw ConfigError("epsilon must be in [0,1]");
  if (learning_rate <= 0.0) throw ConfigError("learning_rate must be positive");
  if (epochs < 0) throw ConfigError("epochs must be nonnegative");
}

json HyperConfig::to_json() const {
  return {{"alpha", alpha}, {"beta", beta}, {"gamma", gamma}, {"delta", delta},
          {"epsilon", epsilon}, {"learning_rate", learning_rate},
          {"epochs", epochs}, {"seed", seed}};
}

HyperConfig HyperConfig::from_json(const json& j) {
  io::check_keys(j, {"alpha", "beta", "gamma", "delta", "epsilon", "learning_rate",
                     "epochs", "seed"},
                 "hyperparameters");
  HyperConfig h;
  if (j.contains("alpha")) h.alpha = j.at("alpha").get<double>();
  if (j.contains("beta")) h.beta = j.at("beta").get<double>();
  if (j.contains("gamma")) h.gamma = j.at("gamma").get<double>();
  if (j.contains("delta")) h.delta = j.at("delta").get<double>();
  if (j.contains("epsilon")) h.epsilon = j.at("epsilon").get<double>();
  if (j.contains("learning_rate")) h.learning_rate = j.at("learning_rate").get<double>();
  if (j.contains("epochs")) h.epochs = j.at("epochs").get<int>();
  if (j.contains("seed")) h.seed = j.at("seed").get<std::uint64_t>();
  h.validate();
  return h;
}

// ---- SSIM ------------------------------------------------------------------------

Value ssim_t(Tape& tape, Value a, Value b, const SsimParams& p) {
  const Tensor &ta = tape.val(a), &tb = tape.val(b);
  if (!same_shape(ta, tb) || ta.ndim() != 4)
    throw DataError("ssim: expected matching [B,C,H,W] inputs");
  if (ta.dim(2) < p.window || ta.dim(3) < p.window)
    throw DataError("ssim: window larger than image");
  const auto k = ad::gaussian_kernel(p.window, p.sigma);

  Value mu_a = tape.blur2d_valid(a, k);
  Value mu_b = tape.blur2d_valid(b, k);
  Value aa = tape.blur2d_valid(tape.mul(a, a), k);
  Value bb = tape.blur2d_valid(tape.mul(b, b), k);
  Value ab = tape.blur2d_valid(tape.mul(a, b), k);

  Value mu_ab = tape.mul(mu_a, mu_b);
  Value var_a = tape.sub(aa, tape.mul(mu_a, mu_a));
  Value var_b = tape.sub(bb, tape.mul(mu_b, mu_b));
  Value cov = tape.sub(ab, mu_ab);

  Value num = tape.mul(tape.add_scalar(tape.mul_scalar(mu_ab, 2.0), p.c1),
                       tape.add_scalar(tape.mul_scalar(cov, 2.0), p.c2));
  Value den = tape.mul(
      tape.add_scalar(tape.add(tape.mul(mu_a, mu_a), tape.mul(mu_b, mu_b)), p.c1),
      tape.add_scalar(tape.add(var_a, var_b), p.c2));
  return tape.mean_all(tape.div(num, den));
}

double ssim(const Tensor& f, const Tensor& g, const SsimParams& p) {
  if (f.ndim() != 3) throw DataError("ssim: expected [C,H,W] frames");
  Tape tape;
  Shape batched = {1, f.dim(0), f.dim(1), f.dim(2)};
  Value a = tape.reshape(tape.leaf(f), batched);
  Value b = tape.reshape(tape.leaf(g), batched);
  return tape.scalar(ssim_t(tape, a, b, p));
}

double tv_loss(const Tensor& frame) {
  if (frame.ndim() != 3) throw DataError("tv_loss: expected [C,H,W]");
  Tape tape;
  Value x = tape.reshape(tape.leaf(frame), {1, frame.dim(0), frame.dim(1), frame.dim(2)});
  return tape.scalar(tape.tv2d(x));
}

// ---- perceptual ---------------------------------------------------------------------

PyramidSpec PyramidSpec::vgg16_shape() { return PyramidSpec{}; }

PyramidSpec PyramidSpec::small() {
  PyramidSpec p;
  p.stage_channels = {8, 12, 16, 24, 32};
  p.stage_convs = {1, 1, 1, 1, 1};
  return p;
}

json PyramidSpec::to_json() const {
  return {{"stage_channels", stage_channels}, {"stage_convs", stage_convs},
          {"kernel", kernel}, {"in_channels", in_channels}};
}

PyramidSpec PyramidSpec::from_json(const json& j) {
  io::check_keys(j, {"stage_channels", "stage_convs", "kernel", "in_channels"},
                 "pyramid spec");
  PyramidSpec p;
  p.stage_channels = j.at("stage_channels").get<std::vector<int>>();
  p.stage_convs = j.at("stage_convs").get<std::vector<int>>();
  p.kernel = j.at("kernel").get<int>();
  p.in_channels = j.at("in_channels").get<int>();
  if (p.stage_channels.size() != 5 || p.stage_convs.size() != 5)
    throw ConfigError("feature pyramid must have exactly 5 stages");
  return p;
}

std::vector<Value> FeaturePyramid::stages(Tape& tape, Value x) const {
  std::vector<Value> feats;
  Value h = x;
  for (std::size_t s = 0; s < spec.stage_channels.size(); ++s) {
    if (s > 0) h = tape.maxpool2d(h, 2, 2);
    for (int conv = 0; conv < spec.stage_convs[s]; ++conv) {
      const std::string prefix =
          "pyr.s" + std::to_string(s) + ".c" + std::to_string(conv);
      ad::Conv2dGeom gm;
      gm.pad_h = gm.pad_w = (spec.kernel - 1) / 2;
      // weights are constants on the tape: no gradient flows into them
      Value w = tape.leaf(weights.at(prefix + ".weight"), false);
      Value b = tape.leaf(weights.at(prefix + ".bias"), false);
      h = tape.relu(tape.conv2d(h, w, b, gm));
    }
    feats.push_back(h);
  }
  return feats;
}

FeaturePyramid make_random_pyramid(const PyramidSpec& spec, std::uint64_t seed) {
  if (spec.stage_channels.size() != 5 || spec.stage_convs.size() != 5)
    throw ConfigError("feature pyramid must have exactly 5 stages");
  FeaturePyramid pyr;
  pyr.spec = spec;
  rng::Stream rs(rng::derive(seed, "pyramid-init"));
  int c = spec.in_channels;
  for (std::size_t s = 0; s < spec.stage_channels.size(); ++s) {
    for (int conv = 0; conv < spec.stage_convs[s]; ++conv) {
      const std::string prefix = "pyr.s" + std::to_string(s) + ".c" + std::to_string(conv);
      const int oc = spec.stage_channels[s];
      const std::int64_t fan_in = static_cast<std::int64_t>(c) * spec.kernel * spec.kernel;
      Tensor w(Shape{oc, c, spec.kernel, spec.kernel});
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (std::int64_t i = 0; i < w.size(); ++i) w[i] = rs.uniform(-bound, bound);
      pyr.weights.add(prefix + ".weight", std::move(w), false);
      pyr.weights.add(prefix + ".bias", Tensor(Shape{oc}), false);
      c = oc;
    }
  }
  return pyr;
}

FeaturePyramid load_pyramid(const std::filesystem::path& checkpoint) {
  json manifest;
  models::ParamStore store = models::load_checkpoint(checkpoint, &manifest);
  if (!manifest.contains("pyramid_spec"))
    throw DataError("pyramid checkpoint lacks a pyramid_spec manifest entry");
  FeaturePyramid pyr;
  pyr.spec = PyramidSpec::from_json(manifest["pyramid_spec"]);
  pyr.weights = std::move(store);
  return pyr;
}

Value perceptual_t(Tape& tape, Value a, Value b, const FeaturePyramid& pyr) {
  const Tensor &ta = tape.val(a), &tb = tape.val(b);
  if (!same_shape(ta, tb) || ta.ndim() != 4)
    throw DataError("perceptual: expected matching [B,C,H,W] inputs");
  const std::int64_t B = ta.dim(0);
  const auto fa = pyr.stages(tape, a);
  const auto fb = pyr.stages(tape, b);
  Value total;
  for (std::size_t s = 0; s < fa.size(); ++s) {
    const Tensor& t = tape.val(fa[s]);
    const std::int64_t d = t.size() / B;
    Value ua = tape.l2_normalize_rows(tape.reshape(fa[s], {B, d}));
    Value ub = tape.l2_normalize_rows(tape.reshape(fb[s], {B, d}));
    Value diff = tape.sub(ua, ub);
    Value stage = tape.mean_all(tape.mul(diff, diff));
    total = s == 0 ? stage : tape.add(total, stage);
  }
  return total;
}

double perceptual_loss(const Tensor& f, const Tensor& g, const FeaturePyramid& pyr) {
  Tape tape;
  Value a = tape.leaf(f), b = tape.leaf(g);
  if (f.ndim() == 3) {
    a = tape.reshape(a, {1, f.dim(0), f.dim(1), f.dim(2)});
    b = tape.reshape(b, {1, g.dim(0), g.dim(1), g.dim(2)});
  }
  return tape.scalar(perceptual_t(tape, a, b, pyr));
}

// ---- composite losses -----------------------------------------------------------------

EncoderLossValues encoder_loss_t(Tape& tape, Value v_true, Value v_pred, double alpha) {
  const Tensor &tv = tape.val(v_true), &tp = tape.val(v_pred);
  if (!same_shape(tv, tp) || tv.ndim() != 2)
    throw DataError("encoder loss: expected matching [B,V] inputs");
  EncoderLossValues out;
  Value diff = tape.sub(v_true, v_pred);
  out.mse = tape.mean_all(tape.mul(diff, diff));
  Value sim = tape.cosine_rows(v_true, v_pred, 1e-12, &out.cosine_zero_rows);
  out.cos_dist = tape.add_scalar(tape.mul_scalar(tape.mean_all(sim), -1.0), 1.0);
  out.total = tape.add(out.mse, tape.mul_scalar(out.cos_dist, alpha));
  return out;
}

DecoderLossValues decoder_loss_t(Tape& tape, Value f_true, Value f_pred,
                                 const FeaturePyramid& pyr, double beta, double gamma,
                                 double delta, const SsimParams& sp) {
  DecoderLossValues out;
  out.psim = perceptual_t(tape, f_true, f_pred, pyr);
  out.ssim_loss = tape.add_scalar(tape.mul_scalar(ssim_t(tape, f_true, f_pred, sp), -1.0), 1.0);
  out.tv = tape.tv2d(f_pred);
  out.total = tape.add(tape.add(tape.mul_scalar(out.psim, beta),
                                tape.mul_scalar(out.ssim_loss, gamma)),
                       tape.mul_scalar(out.tv, delta));
  return out;
}

CombinedLossValues combined_loss_t(Tape& tape, Value v_true, Value v_pred, Value f_true,
                                   Value f_pred, const FeaturePyramid& pyr,
                                   const HyperConfig& cfg, const SsimParams& sp) {
  cfg.validate();
  CombinedLossValues out;
  out.enc = encoder_loss_t(tape, v_true, v_pred, cfg.alpha);
  out.dec = decoder_loss_t(tape, f_true, f_pred, pyr, cfg.beta, cfg.gamma, cfg.delta, sp);
  out.total = tape.add(tape.mul_scalar(out.enc.total, cfg.epsilon),
                       tape.mul_scalar(out.dec.total, 1.0 - cfg.epsilon));
  return out;
}

namespace {

Tensor as_batch(const Tensor& t) {
  if (t.ndim() == 3) {
    Tensor b(Shape{1, t.dim(0), t.dim(1), t.dim(2)});
    std::copy_n(t.data(), t.size(), b.data());
    return b;
  }
  return t;
}

}  // namespace

double loss_encoder(const Tensor& v, const Tensor& v_pred, double alpha,
                    LossBreakdown* breakdown) {
  Tape tape;
  auto lv = encoder_loss_t(tape, tape.leaf(v), tape.leaf(v_pred), alpha);
  if (breakdown) {
    breakdown->mse_v = tape.scalar(lv.mse);
    breakdown->cos_dist = tape.scalar(lv.cos_dist);
    breakdown->encoder_loss = tape.scalar(lv.total);
    breakdown->cosine_zero_rows = lv.cosine_zero_rows;
  }
  return tape.scalar(lv.total);
}

double loss_decoder(const Tensor& f, const Tensor& f_pred, double beta, double gamma,
                    double delta, const FeaturePyramid& pyr, LossBreakdown* breakdown) {
  Tape tape;
  auto lv = decoder_loss_t(tape, tape.leaf(as_batch(f)), tape.leaf(as_batch(f_pred)), pyr,
                           beta, gamma, delta);
  if (breakdown) {
    breakdown->psim = tape.scalar(lv.psim);
    breakdown->ssim_loss = tape.scalar(lv.ssim_loss);
    breakdown->tv = tape.scalar(lv.tv);
    breakdown->decoder_loss = tape.scalar(lv.total);
  }
  return tape.scalar(lv.total);
}

double loss_combined(const Tensor& v, const Tensor& v_pred, const Tensor& f,
                     const Tensor& f_pred, const FeaturePyramid& pyr,
                     const HyperConfig& cfg, LossBreakdown* breakdown) {
  Tape tape;
  auto lv = combined_loss_t(tape, tape.leaf(v), tape.leaf(v_pred),
                            tape.leaf(as_batch(f)), tape.leaf(as_batch(f_pred)), pyr, cfg);
  if (breakdown) {
    breakdown->mse_v = tape.scalar(lv.enc.mse);
    breakdown->cos_dist = tape.scalar(lv.enc.cos_dist);
    breakdown->encoder_loss = tape.scalar(lv.enc.total);
    breakdown->psim = tape.scalar(lv.dec.psim);
    breakdown->ssim_loss = tape.scalar(lv.dec.ssim_loss);
    breakdown->tv = tape.scalar(lv.dec.tv);
    breakdown->decoder_loss = tape.scalar(lv.dec.total);
    breakdown->combined_loss = tape.scalar(lv.total);
    breakdown->cosine_zero_rows = lv.enc.cosine_zero_rows;
  }
  return tape.scalar(lv.total);
}

}  // namespace neurocodec::objectives
