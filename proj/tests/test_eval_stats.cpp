#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "neurocodec/eval_stats.hpp"
#include "neurocodec/io.hpp"
#include "test_util.hpp"

using namespace neurocodec;
using namespace neurocodec::stats;

TEST_CASE("pearson basics and affine invariance") {
  std::vector<double> x = {1, 2, 3, 4, 5};
  std::vector<double> y;
  for (double v : x) y.push_back(2 * v + 1);
  CHECK(pearson(x, y) == doctest::Approx(1.0).epsilon(1e-12));

  std::vector<double> neg;
  for (double v : x) neg.push_back(-v);
  CHECK(pearson(x, neg) == doctest::Approx(-1.0).epsilon(1e-12));

  bool deg = false;
  CHECK(pearson({1, 1, 1}, {1, 2, 3}, &deg) == 0.0);
  CHECK(deg);

  CHECK_THROWS_AS(pearson({1, 2}, {1, 2, 3}), DataError);

  rng::Stream rs(5);
  std::vector<double> a, b;
  for (int i = 0; i < 1000; ++i) {
    a.push_back(rs.normal());
    b.push_back(rs.normal() + 0.3 * a.back());
  }
  CHECK(pearson(a, b) == doctest::Approx(testutil::pearson_oracle(a, b)).epsilon(1e-12));

  // positive affine maps leave the value unchanged
  std::vector<double> a2, b2;
  for (double v : a) a2.push_back(3.7 * v - 2.0);
  for (double v : b) b2.push_back(0.2 * v + 11.0);
  CHECK(std::abs(pearson(a2, b2) - pearson(a, b)) < 1e-12);
}

TEST_CASE("evaluate_encoder perfect and shuffled") {
  Tensor v = testutil::random_tensor({300, 10}, 7);
  EncoderEval perfect = evaluate_encoder(v, v);
  CHECK(perfect.mean_r == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(perfect.mse == doctest::Approx(0.0).epsilon(1e-15));

  // column-shuffled predictions decorrelate
  Tensor shuffled = v;
  rng::Stream rs(8);
  const auto perm = rs.permutation(300);
  for (int i = 0; i < 300; ++i)
    for (int j = 0; j < 10; ++j)
      shuffled[i * 10 + j] = v[static_cast<std::int64_t>(perm[static_cast<std::size_t>(i)]) * 10 + j];
  EncoderEval mixed = evaluate_encoder(v, shuffled);
  CHECK(std::abs(mixed.mean_r) < 0.05);
}

TEST_CASE("evaluate_decoder perfect and shuffled null") {
  std::vector<Tensor> frames;
  for (int i = 0; i < 12; ++i)
    frames.push_back(testutil::random_tensor({3, 16, 16}, 100 + static_cast<std::uint64_t>(i), 0.0, 1.0));
  DecoderEval perfect = evaluate_decoder(frames, frames);
  CHECK(perfect.mean_ssim == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(perfect.mse == doctest::Approx(0.0).epsilon(1e-15));

  auto nulls = null_ssim(frames, frames, 8, 3);
  CHECK(nulls.size() == 8);
  // shuffled pairings cannot beat identity on average
  for (double v : nulls) CHECK(v <= 1.0 + 1e-12);

  // determinism
  CHECK(null_ssim(frames, frames, 8, 3) == nulls);
}

TEST_CASE("null pearson calibration") {
  Tensor v = testutil::random_tensor({500, 16}, 21);
  Tensor pred = testutil::random_tensor({500, 16}, 22);
  auto nulls = null_pearson(v, pred, 100, 9);
  REQUIRE(nulls.size() == 100);
  double mean = 0;
  for (double x : nulls) mean += x;
  mean /= 100.0;
  CHECK(std::abs(mean) < 0.05);
  CHECK(null_pearson(v, pred, 100, 9) == nulls);
}

TEST_CASE("mann-whitney U statistic on separated samples") {
  auto r = mann_whitney_u({1, 2}, {3, 4});
  CHECK(r.u == 0.0);
  CHECK(r.exact);
  CHECK(r.p > 0.0);
  CHECK(r.p <= 1.0);
}

TEST_CASE("mann-whitney exact equals enumeration oracle") {
  rng::Stream rs(31);
  for (int trial = 0; trial < 120; ++trial) {
    const int n1 = 1 + static_cast<int>(rs.next_below(4));
    const int n2 = 1 + static_cast<int>(rs.next_below(4));
    std::vector<double> a, b;
    for (int i = 0; i < n1; ++i)
      a.push_back(static_cast<double>(rs.next_below(6)));  // heavy ties
    for (int i = 0; i < n2; ++i) b.push_back(static_cast<double>(rs.next_below(6)));
    const double got = mann_whitney_exact_p(a, b);
    const double want = testutil::mwu_exact_p_enum(a, b);
    CHECK(got == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("mann-whitney normal approximation tracks the exact p") {
  rng::Stream rs(41);
  for (int trial = 0; trial < 60; ++trial) {
    const int n1 = 3 + static_cast<int>(rs.next_below(6));
    const int n2 = std::max<int>(3, std::min<int>(8, 64 / n1));
    if (n1 * n2 < 8) continue;
    std::vector<double> a, b;
    for (int i = 0; i < n1; ++i) a.push_back(rs.normal());
    for (int i = 0; i < n2; ++i) b.push_back(rs.normal() + 0.4);
    const double exact = mann_whitney_exact_p(a, b);
    const double approx = mann_whitney_normal_p(a, b);
    CHECK(std::abs(exact - approx) < 0.02);
  }
}

TEST_CASE("cliffs delta brute-force agreement and fixed values") {
  CHECK(cliffs_delta({5, 6, 7}, {1, 2, 3}) == 1.0);
  CHECK(cliffs_delta({1, 2, 3}, {1, 2, 3}) == 0.0);
  CHECK(cliffs_delta({1, 2, 3}, {2, 3, 4}) == doctest::Approx(-5.0 / 9.0).epsilon(1e-12));

  rng::Stream rs(51);
  for (int trial = 0; trial < 100; ++trial) {
    const int n1 = 1 + static_cast<int>(rs.next_below(50));
    const int n2 = 1 + static_cast<int>(rs.next_below(50));
    std::vector<double> a, b;
    for (int i = 0; i < n1; ++i) a.push_back(static_cast<double>(rs.next_below(8)));
    for (int i = 0; i < n2; ++i) b.push_back(static_cast<double>(rs.next_below(8)));
    CHECK(cliffs_delta(a, b) == testutil::cliffs_delta_brute(a, b));
  }
}

TEST_CASE("report medians and comparisons") {
  RunEval perfect;
  perfect.run_name = "perfect";
  perfect.has_decoder = true;
  perfect.enc_corr = make_metric_block({1, 1, 1, 1}, {{"m0", {1, 1}}});
  perfect.enc_mse = make_metric_block({0, 0, 0, 0}, {});
  perfect.dec_ssim = make_metric_block({1, 1, 1}, {});
  perfect.dec_mse = make_metric_block({0, 0, 0}, {});

  EvalReport single = build_report({perfect});
  CHECK(single.runs[0].enc_corr.med == 1.0);
  CHECK(single.runs[0].enc_mse.med == 0.0);
  CHECK(single.runs[0].dec_ssim.med == 1.0);
  CHECK(single.runs[0].dec_mse.med == 0.0);
  CHECK(single.comparisons.empty());

  // two identical runs: delta 0, p near 1
  RunEval twin = perfect;
  twin.run_name = "twin";
  EvalReport pair = build_report({perfect, twin});
  REQUIRE(!pair.comparisons.empty());
  for (const auto& c : pair.comparisons) {
    CHECK(c.delta == 0.0);
    CHECK(c.p > 0.9);
  }
}

TEST_CASE("report csv layout is Table-1 shaped (golden)") {
  auto mk = [](const std::string& name, bool dec, std::vector<double> corr,
               std::vector<double> mse, std::vector<double> dssim) {
    RunEval r;
    r.run_name = name;
    r.has_decoder = dec;
    r.enc_corr = make_metric_block(std::move(corr), {});
    r.enc_mse = make_metric_block(std::move(mse), {});
    if (dec) {
      r.dec_ssim = make_metric_block(std::move(dssim), {});
      r.dec_mse = make_metric_block({0.2, 0.25, 0.3}, {});
    }
    return r;
  };
  EvalReport rep = build_report(
      {mk("ed_snr", true, {0.2, 0.22, 0.24}, {0.8, 0.9, 1.0}, {0.3, 0.32, 0.34}),
       mk("ed_full", true, {0.14, 0.16, 0.18}, {0.86, 0.96, 1.06}, {0.24, 0.26, 0.28}),
       mk("e_snr", false, {0.13, 0.15, 0.17}, {0.87, 0.97, 1.07}, {}),
       mk("e_full", false, {0.1, 0.12, 0.14}, {0.9, 1.0, 1.1}, {})});

  namespace fs = std::filesystem;
  const fs::path p = fs::temp_directory_path() / "ncdc_table.csv";
  write_metric_table_csv(p, rep);
  const auto bytes = io::read_file(p);
  const std::string got(bytes.begin(), bytes.end());
  const std::string want =
      "metric,ed_snr,ed_full,e_snr,e_full\n"
      "enc_corr,0.22,0.16,0.15,0.12\n"
      "enc_mse,0.9,0.96,0.97,1\n"
      "dec_ssim,0.32,0.26,/,/\n"
      "dec_mse,0.25,0.25,/,/\n";
  CHECK(got == want);
  fs::remove(p);
}

TEST_CASE("performance svg renders points and null line") {
  MetricBlock mb = make_metric_block({0.5, 0.6, 0.7}, {{"m0", {0.5}}, {"m1", {0.7}}});
  NullBlock nb = make_null_block({0.01, -0.02, 0.03}, 7);
  namespace fs = std::filesystem;
  const fs::path p = fs::temp_directory_path() / "ncdc_plot.svg";
  write_performance_svg(p, "encoder performance", mb, &nb);
  const auto bytes = io::read_file(p);
  const std::string svg(bytes.begin(), bytes.end());
  CHECK(svg.find("<svg") != std::string::npos);
  CHECK(svg.find("fill=\"green\"") != std::string::npos);
  CHECK(svg.find("fill=\"cyan\"") != std::string::npos);
  CHECK(svg.find("stroke-dasharray") != std::string::npos);
  CHECK(svg.find("m1") != std::string::npos);
  fs::remove(p);
}
