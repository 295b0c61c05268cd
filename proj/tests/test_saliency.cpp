#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "neurocodec/saliency.hpp"
#include "test_util.hpp"

using namespace neurocodec;
using namespace neurocodec::saliency;
using testutil::random_tensor;

namespace {

models::DecoderSpec tiny_decoder(int voxels) {
  models::DecoderSpec d;
  d.in_voxels = voxels;
  d.entry_channels = 2;
  d.entry_h = d.entry_w = 1;
  d.up_blocks = {{2, 3, 3}, {2, 3, 3}, {2, 3, 3}, {2, 2, 3}};
  d.validate();
  return d;
}

}  // namespace

TEST_CASE("dead input voxels score exactly zero") {
  const int v = 6;
  models::DecoderSpec spec = tiny_decoder(v);
  models::ParamStore params = models::init_decoder_params(spec, 3);
  // zero the first-layer column of voxel 2
  Tensor& w = params.at("dec.entry.weight");
  const std::int64_t rows = w.dim(0);
  for (std::int64_t r = 0; r < rows; ++r) w[r * v + 2] = 0.0;

  Tensor inputs = random_tensor({5, v}, 4);
  std::vector<Tensor> targets;
  for (int i = 0; i < 5; ++i)
    targets.push_back(random_tensor({3, 16, 16}, 10 + static_cast<std::uint64_t>(i), 0.0, 1.0));

  auto scores = compute_saliency(spec, params, inputs, targets);
  REQUIRE(scores.size() == 6);
  CHECK(scores[2] == 0.0);
  for (int j = 0; j < v; ++j)
    if (j != 2) CHECK(scores[static_cast<std::size_t>(j)] > 0.0);
}

TEST_CASE("saliency equals the finite-difference sensitivity of ssim") {
  const int v = 4;
  models::DecoderSpec spec = tiny_decoder(v);
  models::ParamStore params = models::init_decoder_params(spec, 7);
  Tensor inputs = random_tensor({3, v}, 8);
  std::vector<Tensor> targets;
  for (int i = 0; i < 3; ++i)
    targets.push_back(random_tensor({3, 16, 16}, 20 + static_cast<std::uint64_t>(i), 0.0, 1.0));

  auto scores = compute_saliency(spec, params, inputs, targets);

  const double h = 1e-6;
  for (int j = 0; j < v; ++j) {
    double want = 0.0;
    for (int n = 0; n < 3; ++n) {
      auto eval = [&](double value) {
        Tensor vox(Shape{1, v});
        for (int k = 0; k < v; ++k) vox[k] = inputs[n * v + k];
        vox[j] = value;
        Tensor recon = models::decoder_forward(spec, params, vox, false);
        Tensor frame(Shape{3, 16, 16});
        std::copy_n(recon.data(), frame.size(), frame.data());
        return objectives::ssim(targets[static_cast<std::size_t>(n)], frame);
      };
      const double base = inputs[n * v + j];
      want += std::abs((eval(base + h) - eval(base - h)) / (2.0 * h));
    }
    const double got = scores[static_cast<std::size_t>(j)];
    CHECK(std::abs(got - want) / std::max({std::abs(got), std::abs(want), 1e-6}) < 1e-4);
  }
}

TEST_CASE("duplicating the sample set doubles every score exactly") {
  const int v = 5;
  models::DecoderSpec spec = tiny_decoder(v);
  models::ParamStore params = models::init_decoder_params(spec, 9);
  Tensor inputs = random_tensor({4, v}, 10);
  std::vector<Tensor> targets;
  for (int i = 0; i < 4; ++i)
    targets.push_back(random_tensor({3, 16, 16}, 30 + static_cast<std::uint64_t>(i), 0.0, 1.0));

  auto once = compute_saliency(spec, params, inputs, targets);

  Tensor doubled(Shape{8, v});
  std::copy_n(inputs.data(), inputs.size(), doubled.data());
  std::copy_n(inputs.data(), inputs.size(), doubled.data() + inputs.size());
  std::vector<Tensor> targets2 = targets;
  targets2.insert(targets2.end(), targets.begin(), targets.end());

  auto twice = compute_saliency(spec, params, doubled, targets2);
  for (std::size_t j = 0; j < once.size(); ++j) CHECK(twice[j] == 2.0 * once[j]);
}

TEST_CASE("permuting voxel order permutes scores identically") {
  const int v = 6;
  models::DecoderSpec spec = tiny_decoder(v);
  models::ParamStore params = models::init_decoder_params(spec, 11);
  Tensor inputs = random_tensor({3, v}, 12);
  std::vector<Tensor> targets;
  for (int i = 0; i < 3; ++i)
    targets.push_back(random_tensor({3, 16, 16}, 40 + static_cast<std::uint64_t>(i), 0.0, 1.0));
  auto base = compute_saliency(spec, params, inputs, targets);

  const std::vector<int> perm = {3, 0, 5, 1, 4, 2};  // new j reads old perm[j]
  models::ParamStore permuted = params;
  Tensor& w0 = params.at("dec.entry.weight");
  Tensor& w1 = permuted.at("dec.entry.weight");
  for (std::int64_t r = 0; r < w0.dim(0); ++r)
    for (int j = 0; j < v; ++j)
      w1[r * v + j] = w0[r * v + perm[static_cast<std::size_t>(j)]];
  Tensor inputs_p(Shape{3, v});
  for (int n = 0; n < 3; ++n)
    for (int j = 0; j < v; ++j)
      inputs_p[n * v + j] = inputs[n * v + perm[static_cast<std::size_t>(j)]];

  auto moved = compute_saliency(spec, permuted, inputs_p, targets);
  for (int j = 0; j < v; ++j)
    CHECK(moved[static_cast<std::size_t>(j)] ==
          doctest::Approx(base[static_cast<std::size_t>(perm[static_cast<std::size_t>(j)])])
              .epsilon(1e-12));
}

TEST_CASE("top fraction mask") {
  std::vector<double> scores;
  for (int i = 1; i <= 10; ++i) scores.push_back(static_cast<double>(i));
  auto mask = top_fraction_mask(scores, 0.2);
  CHECK(std::count(mask.begin(), mask.end(), true) == 2);
  CHECK(mask[9]);
  CHECK(mask[8]);

  auto all = top_fraction_mask(scores, 1.0);
  CHECK(std::count(all.begin(), all.end(), true) == 10);

  // sort oracle on random scores
  auto rnd = testutil::random_tensor({1000}, 13, 0.0, 1.0).vec();
  auto got = top_fraction_mask(rnd, 0.2);
  std::vector<int> order(1000);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return rnd[static_cast<std::size_t>(a)] != rnd[static_cast<std::size_t>(b)]
               ? rnd[static_cast<std::size_t>(a)] > rnd[static_cast<std::size_t>(b)]
               : a < b;
  });
  std::vector<bool> want(1000, false);
  for (int i = 0; i < 200; ++i) want[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = true;
  CHECK(got == want);

  CHECK_THROWS_AS(top_fraction_mask({}, 0.2), DataError);
}

TEST_CASE("region contribution arithmetic") {
  // regions of size 3 and 7; selected = all of the first + 1 of the second
  std::vector<std::string> labels;
  for (int i = 0; i < 3; ++i) labels.push_back("small");
  for (int i = 0; i < 7; ++i) labels.push_back("large");
  std::vector<bool> top(10, false);
  top[0] = top[1] = top[2] = top[3] = true;

  auto rows = region_contributions(top, labels);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].region == "small");
  CHECK(rows[0].a == 3);
  CHECK(rows[0].b == 3);
  CHECK(rows[0].a_ratio_pct == doctest::Approx(30.0).epsilon(1e-12));
  CHECK(rows[0].b_ratio_pct == doctest::Approx(75.0).epsilon(1e-12));
  CHECK(rows[0].b_over_a_pct == doctest::Approx(100.0).epsilon(1e-12));
  CHECK(rows[1].a == 7);
  CHECK(rows[1].b == 1);
  CHECK(rows[1].a_ratio_pct == doctest::Approx(70.0).epsilon(1e-12));
  CHECK(rows[1].b_ratio_pct == doctest::Approx(25.0).epsilon(1e-12));
  CHECK(rows[1].b_over_a_pct == doctest::Approx(100.0 / 7.0).epsilon(1e-9));

  // ratio columns sum to 100% and counts to their totals
  double a_sum = 0, b_sum = 0;
  std::int64_t a_count = 0, b_count = 0;
  for (const auto& r : rows) {
    a_sum += r.a_ratio_pct;
    b_sum += r.b_ratio_pct;
    a_count += r.a;
    b_count += r.b;
  }
  CHECK(std::abs(a_sum - 100.0) < 1e-9);
  CHECK(std::abs(b_sum - 100.0) < 1e-9);
  CHECK(a_count == 10);
  CHECK(b_count == 4);

  CHECK_THROWS_AS(region_contributions(top, std::vector<std::string>(9)), DataError);
}
