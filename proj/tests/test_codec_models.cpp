#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "neurocodec/codec_models.hpp"
#include "neurocodec/io.hpp"
#include "neurocodec/objectives.hpp"
#include "test_util.hpp"

using namespace neurocodec;
using namespace neurocodec::models;
using testutil::random_tensor;

namespace {

EncoderSpec tiny_encoder(int voxels = 3, int in_size = 8) {
  EncoderSpec e;
  e.temporal_blocks = {{2, 3, 3, 8}, {2, 3, 3, 4}};
  e.spatial_blocks = {{3, 3, 1, PoolKind::avg}};
  e.fc_widths = {4, voxels};
  e.dropout_rate = 0.0;
  e.in_size = in_size;
  e.validate();
  return e;
}

DecoderSpec tiny_decoder(int voxels = 3, int out_size = 8) {
  DecoderSpec d;
  d.in_voxels = voxels;
  d.entry_channels = 2;
  d.entry_h = d.entry_w = 2;
  d.up_blocks = {{2, 2, 3}, {2, 2, 3}};
  d.validate();
  REQUIRE(d.out_size() == out_size);
  return d;
}

// Flattens all trainable parameters for finite differencing.
struct FlatParams {
  ParamStore* store;
  std::vector<std::pair<int, std::int64_t>> slots;  // (entry, offset)

  explicit FlatParams(ParamStore& s) : store(&s) {
    for (std::size_t e = 0; e < s.entries.size(); ++e)
      if (s.entries[e].trainable)
        for (std::int64_t i = 0; i < s.entries[e].value.size(); ++i)
          slots.emplace_back(static_cast<int>(e), i);
  }
  double get(std::size_t k) const {
    return store->entries[static_cast<std::size_t>(slots[k].first)].value[slots[k].second];
  }
  void set(std::size_t k, double v) {
    store->entries[static_cast<std::size_t>(slots[k].first)].value[slots[k].second] = v;
  }
};

}  // namespace

TEST_CASE("full-scale encoder output shape") {
  EncoderSpec spec = EncoderSpec::reference(4609, 112);
  ParamStore params = init_encoder_params(spec, 1);
  Tensor batch = random_tensor({1, 32, 3, 112, 112}, 2, 0.0, 1.0);
  Tensor out = encoder_forward(spec, params, batch, false);
  CHECK(out.shape() == Shape{1, 4609});
}

TEST_CASE("zero parameters force zero encoder output and 0.5 decoder output") {
  EncoderSpec espec = tiny_encoder();
  ParamStore ep = init_encoder_params(espec, 3);
  for (auto& e : ep.entries)
    if (e.name.find("running_var") == std::string::npos) e.value.fill(0.0);
  Tensor chunk = random_tensor({2, 32, 3, 8, 8}, 4, 0.0, 1.0);
  Tensor out = encoder_forward(espec, ep, chunk, false);
  for (std::int64_t i = 0; i < out.size(); ++i) CHECK(out[i] == 0.0);

  DecoderSpec dspec = tiny_decoder();
  ParamStore dp = init_decoder_params(dspec, 5);
  for (auto& e : dp.entries)
    if (e.name.find("running_var") == std::string::npos) e.value.fill(0.0);
  Tensor vox = random_tensor({2, 3}, 6);
  Tensor img = decoder_forward(dspec, dp, vox, false);
  for (std::int64_t i = 0; i < img.size(); ++i) CHECK(img[i] == 0.5);
}

TEST_CASE("decoder output is strictly inside (0,1) even for extreme inputs") {
  DecoderSpec dspec = tiny_decoder();
  ParamStore dp = init_decoder_params(dspec, 7);
  Tensor vox(Shape{2, 3});
  vox[0] = 1e3; vox[1] = -1e3; vox[2] = 1e3; vox[3] = -1e3; vox[4] = 0.0; vox[5] = 1e3;
  Tensor img = decoder_forward(dspec, dp, vox, false);
  for (std::int64_t i = 0; i < img.size(); ++i) {
    CHECK(img[i] > 0.0);
    CHECK(img[i] < 1.0);
  }
}

TEST_CASE("eval-mode forward is bit-deterministic") {
  EncoderSpec spec = tiny_encoder();
  ParamStore params = init_encoder_params(spec, 11);
  Tensor batch = random_tensor({2, 32, 3, 8, 8}, 12, 0.0, 1.0);
  Tensor a = encoder_forward(spec, params, batch, false);
  Tensor b = encoder_forward(spec, params, batch, false);
  CHECK(a.vec() == b.vec());
}

TEST_CASE("encoder gradients match finite differences over every parameter") {
  EncoderSpec spec = tiny_encoder();
  ParamStore params = init_encoder_params(spec, 13);
  REQUIRE(params.total_parameters() < 5000);
  Tensor batch = random_tensor({2, 32, 3, 8, 8}, 14, 0.0, 1.0);
  Tensor x = permute_chunk_batch(batch);

  auto eval = [&]() {
    ad::Tape tape;
    BoundParams bp{&tape, &params, true, {}};
    ad::Value out = encoder_forward_t(tape, spec, bp, tape.leaf(x), true, 99);
    // scalar probe: mean of squared outputs
    return tape.scalar(tape.mean_all(tape.mul(out, out)));
  };

  ad::Tape tape;
  BoundParams bp{&tape, &params, true, {}};
  ad::Value out = encoder_forward_t(tape, spec, bp, tape.leaf(x), true, 99);
  ad::Value root = tape.mean_all(tape.mul(out, out));
  tape.backward(root);

  FlatParams flat(params);
  double max_rel = 0.0;
  const double h = 1e-5;
  for (std::size_t k = 0; k < flat.slots.size(); ++k) {
    const double orig = flat.get(k);
    flat.set(k, orig + h);
    const double fp = eval();
    flat.set(k, orig - h);
    const double fm = eval();
    flat.set(k, orig);
    const double num = (fp - fm) / (2 * h);
    double ana = 0.0;
    for (const auto& [entry, value] : bp.bound)
      if (entry == flat.slots[k].first) ana = tape.grad(value)[flat.slots[k].second];
    const double rel = std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), 1e-6});
    max_rel = std::max(max_rel, rel);
  }
  INFO("max rel err ", max_rel, " over ", flat.slots.size(), " params");
  CHECK(max_rel < 1e-4);
}

TEST_CASE("decoder gradients match finite differences over every parameter") {
  DecoderSpec spec = tiny_decoder();
  ParamStore params = init_decoder_params(spec, 15);
  REQUIRE(params.total_parameters() < 5000);
  Tensor vox = random_tensor({2, 3}, 16);

  auto eval = [&]() {
    ad::Tape tape;
    BoundParams bp{&tape, &params, true, {}};
    ad::Value out = decoder_forward_t(tape, spec, bp, tape.leaf(vox), true);
    return tape.scalar(tape.mean_all(tape.mul(out, out)));
  };

  ad::Tape tape;
  BoundParams bp{&tape, &params, true, {}};
  ad::Value out = decoder_forward_t(tape, spec, bp, tape.leaf(vox), true);
  ad::Value root = tape.mean_all(tape.mul(out, out));
  tape.backward(root);

  FlatParams flat(params);
  double max_rel = 0.0;
  const double h = 1e-5;
  for (std::size_t k = 0; k < flat.slots.size(); ++k) {
    const double orig = flat.get(k);
    flat.set(k, orig + h);
    const double fp = eval();
    flat.set(k, orig - h);
    const double fm = eval();
    flat.set(k, orig);
    const double num = (fp - fm) / (2 * h);
    double ana = 0.0;
    for (const auto& [entry, value] : bp.bound)
      if (entry == flat.slots[k].first) ana = tape.grad(value)[flat.slots[k].second];
    max_rel = std::max(max_rel,
                       std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), 1e-6}));
  }
  INFO("max rel err ", max_rel);
  CHECK(max_rel < 1e-4);
}

TEST_CASE("end-to-end composition is bitwise and decoder loss reaches encoder params") {
  EncoderSpec espec = tiny_encoder();
  DecoderSpec dspec = tiny_decoder();
  ParamStore ep = init_encoder_params(espec, 21);
  ParamStore dp = init_decoder_params(dspec, 22);
  Tensor batch = random_tensor({2, 32, 3, 8, 8}, 23, 0.0, 1.0);
  Tensor x = permute_chunk_batch(batch);

  // composition equals calling the two ops in sequence
  Tensor v_pred = encoder_forward(espec, ep, batch, false);
  Tensor f_seq = decoder_forward(dspec, dp, v_pred, false);
  {
    ad::Tape tape;
    BoundParams bpe{&tape, &ep, false, {}};
    BoundParams bpd{&tape, &dp, false, {}};
    ad::Value v = encoder_forward_t(tape, espec, bpe, tape.leaf(x), false, 0);
    ad::Value f = decoder_forward_t(tape, dspec, bpd, v, false);
    CHECK(tape.val(v).vec() == v_pred.vec());
    CHECK(tape.val(f).vec() == f_seq.vec());
  }

  // gradients of a pure decoder-side loss w.r.t. encoder params are nonzero
  {
    ad::Tape tape;
    BoundParams bpe{&tape, &ep, true, {}};
    BoundParams bpd{&tape, &dp, true, {}};
    ad::Value v = encoder_forward_t(tape, espec, bpe, tape.leaf(x), true, 7);
    ad::Value f = decoder_forward_t(tape, dspec, bpd, v, true);
    ad::Value loss = tape.mean_all(tape.mul(f, f));
    tape.backward(loss);
    double total_mag = 0.0;
    for (const auto& [entry, value] : bpe.bound) {
      if (!ep.entries[static_cast<std::size_t>(entry)].trainable) continue;
      const Tensor& grad = tape.grad(value);
      for (std::int64_t i = 0; i < grad.size(); ++i) total_mag += std::abs(grad[i]);
    }
    CHECK(total_mag > 0.0);
  }
}

TEST_CASE("initialization is seeded and fan-in scaled") {
  EncoderSpec spec = tiny_encoder();
  ParamStore a = init_encoder_params(spec, 31);
  ParamStore b = init_encoder_params(spec, 31);
  ParamStore c = init_encoder_params(spec, 32);
  bool all_equal = true, any_diff = false;
  for (std::size_t i = 0; i < a.entries.size(); ++i) {
    if (a.entries[i].value.vec() != b.entries[i].value.vec()) all_equal = false;
    if (a.entries[i].value.vec() != c.entries[i].value.vec()) any_diff = true;
  }
  CHECK(all_equal);
  CHECK(any_diff);

  // weight tensor means stay within 3 sigma of zero under fan-in scaling
  for (const auto& e : a.entries) {
    if (e.name.find(".weight") == std::string::npos) continue;
    const std::int64_t n = e.value.size();
    double mean = 0.0, lo = 0.0, hi = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      mean += e.value[i];
      lo = std::min(lo, e.value[i]);
      hi = std::max(hi, e.value[i]);
    }
    mean /= static_cast<double>(n);
    const double bound = std::max(std::abs(lo), std::abs(hi));
    const double sigma_mean = (2.0 * bound) / std::sqrt(12.0 * static_cast<double>(n));
    CHECK(std::abs(mean) < 3.0 * sigma_mean + 1e-12);
  }
}

TEST_CASE("checkpoint round trip is bit exact") {
  namespace fs = std::filesystem;
  const fs::path p1 = fs::temp_directory_path() / "ncdc_ckpt1.bin";
  const fs::path p2 = fs::temp_directory_path() / "ncdc_ckpt2.bin";

  EncoderSpec spec = tiny_encoder();
  ParamStore params = init_encoder_params(spec, 41);
  json manifest = {{"spec", {{"encoder", spec.to_json()}}}, {"seed", 41}, {"epoch", 3},
                   {"hyperconfig", objectives::HyperConfig{}.to_json()}};
  save_checkpoint(p1, params, manifest);

  json back_manifest;
  ParamStore back = load_checkpoint(p1, &back_manifest);
  REQUIRE(back.entries.size() == params.entries.size());
  for (std::size_t i = 0; i < params.entries.size(); ++i) {
    CHECK(back.entries[i].name == params.entries[i].name);
    CHECK(back.entries[i].trainable == params.entries[i].trainable);
    CHECK(back.entries[i].value.vec() == params.entries[i].value.vec());
  }
  CHECK(back_manifest["epoch"] == 3);

  save_checkpoint(p2, back, manifest);
  CHECK(io::hash_file(p1) == io::hash_file(p2));
  const auto b1 = io::read_file(p1);
  const auto b2 = io::read_file(p2);
  CHECK(b1 == b2);

  CHECK_THROWS_AS(load_checkpoint(fs::temp_directory_path() / "missing.bin"), DataError);
  fs::remove(p1);
  fs::remove(p2);
}

TEST_CASE("input shape validation") {
  EncoderSpec spec = tiny_encoder();
  ParamStore params = init_encoder_params(spec, 51);
  CHECK_THROWS_AS(encoder_forward(spec, params, random_tensor({1, 32, 3, 9, 9}, 1), false),
                  DataError);
  DecoderSpec dspec = tiny_decoder();
  ParamStore dp = init_decoder_params(dspec, 52);
  CHECK_THROWS_AS(decoder_forward(dspec, dp, random_tensor({2, 5}, 2), false), DataError);
}
