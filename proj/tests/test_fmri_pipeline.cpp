#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <numeric>

#include "neurocodec/fmri_pipeline.hpp"
#include "neurocodec/rng.hpp"
#include "test_util.hpp"

using namespace neurocodec;
using namespace neurocodec::fmri;

namespace {

// Brute-force two-loop SNR oracle, kept deliberately naive.
std::vector<double> snr_oracle(const SubjectStack& st) {
  const std::int64_t s = st.subjects(), t = st.trs(), v = st.voxels();
  std::vector<double> out(static_cast<std::size_t>(v));
  for (std::int64_t j = 0; j < v; ++j) {
    std::vector<double> gm, sm;
    for (std::int64_t i = 0; i < t; ++i) {
      double acc = 0;
      for (std::int64_t k = 0; k < s; ++k) acc += st.data[(k * t + i) * v + j];
      gm.push_back(acc / static_cast<double>(s));
    }
    for (std::int64_t k = 0; k < s; ++k) {
      double acc = 0;
      for (std::int64_t i = 0; i < t; ++i) acc += st.data[(k * t + i) * v + j];
      sm.push_back(acc / static_cast<double>(t));
    }
    auto var = [](const std::vector<double>& x) {
      double m = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
      double q = 0;
      for (double e : x) q += (e - m) * (e - m);
      return q / static_cast<double>(x.size() - 1);
    };
    const double nv = var(sm);
    out[static_cast<std::size_t>(j)] =
        nv == 0.0 ? std::numeric_limits<double>::infinity() : var(gm) / nv;
  }
  return out;
}

}  // namespace

TEST_CASE("zscore fixed columns") {
  Tensor d = Tensor::from({3, 2}, {1, 5, 2, 5, 3, 5});
  Tensor z = zscore_voxels(d);
  CHECK(z[0] == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(z[2] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(z[4] == doctest::Approx(1.0).epsilon(1e-12));
  // constant column maps to zeros
  CHECK(z[1] == 0.0);
  CHECK(z[3] == 0.0);
  CHECK(z[5] == 0.0);
  CHECK_THROWS_AS(zscore_voxels(Tensor(Shape{1, 3})), DataError);
}

TEST_CASE("zscore normalizes random data and is idempotent") {
  Tensor d = testutil::random_tensor({200, 10}, 7, -3.0, 9.0);
  Tensor z = zscore_voxels(d);
  for (std::int64_t j = 0; j < 10; ++j) {
    double mean = 0, q = 0;
    for (std::int64_t i = 0; i < 200; ++i) mean += z[i * 10 + j];
    mean /= 200.0;
    for (std::int64_t i = 0; i < 200; ++i) {
      const double dd = z[i * 10 + j] - mean;
      q += dd * dd;
    }
    const double sd = std::sqrt(q / 199.0);
    CHECK(std::abs(mean) < 1e-9);
    CHECK(std::abs(sd - 1.0) < 1e-9);
  }
  Tensor zz = zscore_voxels(z);
  for (std::int64_t i = 0; i < z.size(); ++i) CHECK(std::abs(zz[i] - z[i]) < 1e-9);
}

TEST_CASE("align_delay index arithmetic") {
  Tensor f(Shape{10, 2});
  for (std::int64_t i = 0; i < 10; ++i) { f[i * 2] = i; f[i * 2 + 1] = 10 + i; }
  Tensor a = align_delay(f, 6, 4);
  REQUIRE(a.shape() == Shape{6, 2});
  for (std::int64_t i = 0; i < 6; ++i) CHECK(a[i * 2] == static_cast<double>(i + 4));

  Tensor z = align_delay(f, 6, 0);
  for (std::int64_t i = 0; i < 6; ++i) CHECK(z[i * 2] == static_cast<double>(i));

  CHECK_THROWS_AS(align_delay(Tensor(Shape{9, 2}), 6, 4), DataError);  // T = n+3
}

TEST_CASE("snr zero-noise sentinel") {
  // all subjects identical and nonconstant in time
  SubjectStack st;
  st.data = Tensor(Shape{3, 4, 2});
  for (std::int64_t k = 0; k < 3; ++k)
    for (std::int64_t i = 0; i < 4; ++i)
      for (std::int64_t j = 0; j < 2; ++j) st.data[(k * 4 + i) * 2 + j] = static_cast<double>(i);
  auto s = compute_snr(st);
  CHECK(std::isinf(s[0]));
  CHECK(std::isinf(s[1]));
}

TEST_CASE("snr matches the brute-force oracle on a hand-sized stack") {
  SubjectStack st;
  st.data = testutil::random_tensor({2, 3, 4}, 11);
  auto got = compute_snr(st);
  auto want = snr_oracle(st);
  for (std::size_t j = 0; j < got.size(); ++j)
    CHECK(got[j] == doctest::Approx(want[j]).epsilon(1e-12));
}

TEST_CASE("snr oracle agreement over many random small stacks") {
  rng::Stream rs(123);
  for (int trial = 0; trial < 300; ++trial) {
    const auto s = static_cast<std::int64_t>(2 + rs.next_below(5));
    const auto t = static_cast<std::int64_t>(2 + rs.next_below(5));
    const auto v = static_cast<std::int64_t>(1 + rs.next_below(6));
    SubjectStack st;
    st.data = testutil::random_tensor({s, t, v}, 1000 + static_cast<std::uint64_t>(trial));
    auto got = compute_snr(st);
    auto want = snr_oracle(st);
    for (std::size_t j = 0; j < got.size(); ++j) {
      if (std::isinf(want[j])) CHECK(std::isinf(got[j]));
      else CHECK(got[j] == doctest::Approx(want[j]).epsilon(1e-12));
    }
  }
  SubjectStack bad;
  bad.data = Tensor(Shape{1, 5, 2});
  CHECK_THROWS_AS(compute_snr(bad), DataError);
}

TEST_CASE("top-fraction selection") {
  auto sel = select_top_fraction({1, 3, 2, 5}, 0.5);
  CHECK(sel == std::vector<bool>{false, true, false, true});

  auto all = select_top_fraction({1, 3, 2, 5}, 1.0);
  CHECK(std::count(all.begin(), all.end(), true) == 4);

  // sort-based oracle on a random vector
  auto snr = testutil::random_tensor({1000}, 13).vec();
  auto got = select_top_fraction(snr, 0.3);
  std::vector<int> order(1000);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return snr[static_cast<std::size_t>(a)] != snr[static_cast<std::size_t>(b)]
               ? snr[static_cast<std::size_t>(a)] > snr[static_cast<std::size_t>(b)]
               : a < b;
  });
  std::vector<bool> want(1000, false);
  for (int i = 0; i < 300; ++i) want[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = true;
  CHECK(got == want);

  // ties break toward the lower voxel id
  auto tied = select_top_fraction({2, 2, 2, 2}, 0.5);
  CHECK(tied == std::vector<bool>{true, true, false, false});

  CHECK_THROWS_AS(select_top_fraction({}, 0.3), DataError);
}

TEST_CASE("selection counts follow floor(fraction * V)") {
  CHECK(count_floor(0.3, 15364) == 4609);  // published mask size
  std::vector<double> snr(15364);
  rng::Stream rs(99);
  for (auto& v : snr) v = rs.next_unit();
  auto sel = select_top_fraction(snr, 0.3);
  CHECK(std::count(sel.begin(), sel.end(), true) == 4609);

  for (int v = 1; v <= 50; ++v) {
    std::vector<double> x(static_cast<std::size_t>(v), 1.0);
    if (count_floor(0.3, v) == 0) continue;
    auto s = select_top_fraction(x, 0.3);
    CHECK(std::count(s.begin(), s.end(), true) == count_floor(0.3, v));
  }
}

TEST_CASE("average_subjects") {
  SubjectStack one;
  one.data = testutil::random_tensor({1, 4, 3}, 21);
  Tensor a = average_subjects(one);
  for (std::int64_t i = 0; i < a.size(); ++i) CHECK(a[i] == one.data[i]);

  SubjectStack sym;
  sym.data = Tensor(Shape{2, 3, 2});
  for (std::int64_t i = 0; i < 6; ++i) {
    sym.data[i] = static_cast<double>(i) + 1.0;
    sym.data[6 + i] = -(static_cast<double>(i) + 1.0);
  }
  Tensor zero = average_subjects(sym);
  for (std::int64_t i = 0; i < zero.size(); ++i) CHECK(zero[i] == 0.0);

  SubjectStack rnd;
  rnd.data = testutil::random_tensor({5, 6, 4}, 22);
  Tensor got = average_subjects(rnd);
  for (std::int64_t i = 0; i < 6; ++i)
    for (std::int64_t j = 0; j < 4; ++j) {
      double acc = 0;
      for (std::int64_t k = 0; k < 5; ++k) acc += rnd.data[(k * 6 + i) * 4 + j];
      CHECK(got[i * 4 + j] == doctest::Approx(acc / 5.0).epsilon(1e-12));
    }
}

TEST_CASE("split arithmetic and held-out handling") {
  std::map<std::string, int> counts = {{"a", 100}, {"b", 60}, {"held", 44}};
  SplitPlan plan = make_split(counts, "held", 0.8, {4, 1}, 5);

  const auto& a = plan.movies.at("a");
  CHECK(a.train.size() == 64);
  CHECK(a.val.size() == 16);
  CHECK(a.test.size() == 20);
  for (int i : a.test) CHECK(i >= 80);

  const auto& h = plan.movies.at("held");
  CHECK(h.train.empty());
  CHECK(h.val.empty());
  CHECK(h.test.size() == 44);

  CHECK_THROWS_AS(make_split(counts, "missing"), DataError);
  CHECK_THROWS_AS(make_split({{"a", 4}}, "a"), DataError);
}

TEST_CASE("split invariants over randomized counts and seeds") {
  rng::Stream rs(31);
  for (int trial = 0; trial < 500; ++trial) {
    std::map<std::string, int> counts;
    const int n_movies = 2 + static_cast<int>(rs.next_below(4));
    for (int m = 0; m < n_movies; ++m)
      counts["m" + std::to_string(m)] = 5 + static_cast<int>(rs.next_below(200));
    SplitPlan plan = make_split(counts, "m0", 0.8, {4, 1}, rs.next_u64());
    for (const auto& [id, lists] : plan.movies) {
      const int n = counts[id];
      std::vector<bool> seen(static_cast<std::size_t>(n), false);
      auto mark = [&](const std::vector<int>& v) {
        for (int i : v) {
          REQUIRE(i >= 0);
          REQUIRE(i < n);
          REQUIRE(!seen[static_cast<std::size_t>(i)]);  // pairwise disjoint
          seen[static_cast<std::size_t>(i)] = true;
        }
      };
      mark(lists.train);
      mark(lists.val);
      mark(lists.test);
      CHECK(std::count(seen.begin(), seen.end(), false) == 0);  // full coverage
      if (id == "m0") {
        CHECK(lists.test.size() == static_cast<std::size_t>(n));
      } else {
        const int pool = count_floor(0.8, n);
        CHECK(static_cast<int>(lists.val.size()) == pool / 5);
        CHECK(static_cast<int>(lists.train.size()) == pool - pool / 5);
        for (int i : lists.test) CHECK(i >= pool);  // temporal leakage guard
      }
    }
  }
}

TEST_CASE("split determinism and per-movie seed independence") {
  std::map<std::string, int> counts = {{"a", 50}, {"b", 50}, {"c", 30}};
  SplitPlan p1 = make_split(counts, "c", 0.8, {4, 1}, 77);
  SplitPlan p2 = make_split(counts, "c", 0.8, {4, 1}, 77);
  CHECK(p1.movies.at("a").train == p2.movies.at("a").train);
  CHECK(p1.movies.at("b").val == p2.movies.at("b").val);
  // same count, same seed, different movie id -> different assignment
  CHECK(p1.movies.at("a").train != p1.movies.at("b").train);
}

TEST_CASE("test-set size identity at a 14-movie session scale") {
  // 13 split movies of 500 chunks plus one held-out movie of 671 chunks:
  // 13*100 + 671 = 1971 test frames
  std::map<std::string, int> counts;
  for (int m = 0; m < 13; ++m) counts["m" + std::to_string(m)] = 500;
  counts["held"] = 671;
  SplitPlan plan = make_split(counts, "held");
  std::size_t test_total = 0;
  for (const auto& [id, lists] : plan.movies) test_total += lists.test.size();
  CHECK(test_total == 1971);
}

TEST_CASE("mask and split json round-trips") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "ncdc_fmri_io";
  fs::remove_all(dir);
  fs::create_directories(dir);

  VoxelMask m;
  m.voxel_ids = {0, 1, 2};
  m.region_label = {"r0", "r0", "r1"};
  m.selected = {true, false, true};
  m.snr = {1.5, std::numeric_limits<double>::infinity(), 0.25};
  write_mask(dir / "mask.json", m);
  VoxelMask back = read_mask(dir / "mask.json");
  CHECK(back.voxel_ids == m.voxel_ids);
  CHECK(back.region_label == m.region_label);
  CHECK(back.selected == m.selected);
  CHECK(std::isinf(back.snr[1]));
  CHECK(back.snr[2] == 0.25);
  CHECK(back.selected_count() == 2);
  CHECK(back.selected_indices() == std::vector<int>{0, 2});

  SplitPlan plan = make_split({{"a", 50}, {"b", 30}}, "b", 0.8, {4, 1}, 3);
  write_split(dir / "split.json", plan);
  SplitPlan pback = read_split(dir / "split.json");
  CHECK(pback.held_out_movie_id == "b");
  CHECK(pback.movies.at("a").train == plan.movies.at("a").train);
  CHECK(pback.movies.at("a").val == plan.movies.at("a").val);
  CHECK(pback.seed == 3);

  SubjectStack st;
  st.data = testutil::random_tensor({2, 6, 3}, 41);
  st.tr_seconds = 1.3;
  write_subject_stack(dir / "mov", st, "mov");
  std::string id;
  SubjectStack sback = read_subject_stack(dir / "mov", &id);
  CHECK(id == "mov");
  CHECK(sback.data.shape() == st.data.shape());
  fs::remove_all(dir);
}
