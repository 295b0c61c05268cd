#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "neurocodec/autodiff.hpp"
#include "test_util.hpp"

using namespace neurocodec;
using ad::Tape;
using ad::Value;
using testutil::fd_check;
using testutil::random_tensor;

namespace {

// Runs forward once for analytic grads, then finite-differences every input.
// The default tolerance matches the project-wide gradient contract (1e-4);
// |.|-kinked ops (tv) and batch statistics land around 1e-5 under central
// differences with h=1e-5.
void check_grads(
    const std::function<double(Tape&, std::vector<Value>&)>& build,
    std::vector<Tensor> inputs, double tol = 1e-4) {
  auto run = [&]() {
    Tape tape;
    std::vector<Value> vals;
    vals.reserve(inputs.size());
    for (auto& t : inputs) vals.push_back(tape.leaf(t, true));
    return build(tape, vals);
  };

  Tape tape;
  std::vector<Value> vals;
  for (auto& t : inputs) vals.push_back(tape.leaf(t, true));
  std::vector<Value> leaves = vals;
  const double out = build(tape, vals);
  CHECK(std::isfinite(out));

  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Tensor analytic = tape.grad(leaves[i]);
    auto rep = fd_check(run, inputs[i], analytic);
    INFO("input ", i, " max rel err ", rep.max_rel_err);
    CHECK(rep.max_rel_err < tol);
  }
}

}  // namespace

TEST_CASE("elementwise chain gradients") {
  check_grads(
      [](Tape& t, std::vector<Value>& v) {
        Value a = v[0], b = v[1];
        Value x = t.mul(t.add(a, b), t.sub(a, b));
        x = t.div(x, t.add_scalar(t.mul(b, b), 2.0));
        x = t.relu(t.mul_scalar(x, 1.7));
        Value root = t.mean_all(x);
        t.backward(root);
        return t.scalar(root);
      },
      {random_tensor({3, 5}, 11), random_tensor({3, 5}, 12)});
}

TEST_CASE("sigmoid gradient and range") {
  check_grads(
      [](Tape& t, std::vector<Value>& v) {
        Value root = t.mean_all(t.sigmoid(v[0]));
        t.backward(root);
        return t.scalar(root);
      },
      {random_tensor({4, 7}, 21, -3.0, 3.0)});

  // extreme magnitudes stay strictly inside (0,1)
  Tape tape;
  Tensor big(Shape{4});
  big[0] = 1e3; big[1] = -1e3; big[2] = 800.0; big[3] = -800.0;
  const Tensor& s = tape.val(tape.sigmoid(tape.leaf(big)));
  for (std::int64_t i = 0; i < s.size(); ++i) {
    CHECK(s[i] > 0.0);
    CHECK(s[i] < 1.0);
  }
}

TEST_CASE("linear gradients") {
  check_grads(
      [](Tape& t, std::vector<Value>& v) {
        Value root = t.mean_all(t.relu(t.linear(v[0], v[1], v[2])));
        t.backward(root);
        return t.scalar(root);
      },
      {random_tensor({4, 6}, 31), random_tensor({5, 6}, 32), random_tensor({5}, 33)});
}

TEST_CASE("conv2d gradients with stride and padding") {
  ad::Conv2dGeom gm{2, 2, 1, 1};
  check_grads(
      [gm](Tape& t, std::vector<Value>& v) {
        Value root = t.mean_all(t.conv2d(v[0], v[1], v[2], gm));
        t.backward(root);
        return t.scalar(root);
      },
      {random_tensor({2, 3, 7, 8}, 41), random_tensor({4, 3, 3, 3}, 42),
       random_tensor({4}, 43)});
}

TEST_CASE("conv3d gradients with strides and padding") {
  ad::Conv3dGeom gm{2, 1, 1, 1, 1, 1};
  check_grads(
      [gm](Tape& t, std::vector<Value>& v) {
        Value root = t.mean_all(t.conv3d(v[0], v[1], v[2], gm));
        t.backward(root);
        return t.scalar(root);
      },
      {random_tensor({2, 2, 5, 4, 4}, 51), random_tensor({3, 2, 3, 3, 3}, 52),
       random_tensor({3}, 53)});
}

TEST_CASE("pooling gradients") {
  check_grads(
      [](Tape& t, std::vector<Value>& v) {
        Value root = t.mean_all(t.maxpool2d(v[0], 2, 2));
        t.backward(root);
        return t.scalar(root);
      },
      {random_tensor({2, 3, 6, 6}, 61)});
  check_grads(
      [](Tape& t, std::vector<Value>& v) {
        Value root = t.mean_all(t.avgpool2d(v[0], 3, 2));
        t.backward(root);
        return t.scalar(root);
      },
      {random_tensor({2, 3, 7, 7}, 62)});
}

TEST_CASE("upsample nearest gradients and values") {
  Tape tape;
  Tensor x = random_tensor({1, 2, 3, 3}, 71);
  const Tensor& up = tape.val(tape.upsample2d_nearest(tape.leaf(x), 2));
  CHECK(up.shape() == Shape{1, 2, 6, 6});
  CHECK(up[0] == x[0]);
  CHECK(up[1] == x[0]);

  check_grads(
      [](Tape& t, std::vector<Value>& v) {
        Value root = t.mean_all(t.mul(t.upsample2d_nearest(v[0], 2),
                                      t.upsample2d_nearest(v[0], 2)));
        t.backward(root);
        return t.scalar(root);
      },
      {random_tensor({2, 2, 3, 4}, 72)});
}

TEST_CASE("batchnorm gradients, batch statistics") {
  Tensor rm(Shape{3}), rv(Shape{3}, 1.0);
  check_grads(
      [&rm, &rv](Tape& t, std::vector<Value>& v) {
        ad::BatchNormOpts opts;
        opts.use_batch_stats = true;
        opts.update_running = false;
        Value root = t.mean_all(
            t.mul(t.batchnorm(v[0], v[1], v[2], &rm, &rv, opts), v[3]));
        t.backward(root);
        return t.scalar(root);
      },
      {random_tensor({4, 3, 2, 2}, 81), random_tensor({3}, 82, 0.5, 1.5),
       random_tensor({3}, 83), random_tensor({4, 3, 2, 2}, 84)});
}

TEST_CASE("batchnorm gradients, running statistics") {
  Tensor rm = random_tensor({3}, 85, -0.2, 0.2);
  Tensor rv = random_tensor({3}, 86, 0.5, 1.5);
  check_grads(
      [&rm, &rv](Tape& t, std::vector<Value>& v) {
        ad::BatchNormOpts opts;
        opts.use_batch_stats = false;
        Value root = t.mean_all(
            t.mul(t.batchnorm(v[0], v[1], v[2], &rm, &rv, opts), v[3]));
        t.backward(root);
        return t.scalar(root);
      },
      {random_tensor({4, 3, 2, 2}, 87), random_tensor({3}, 88, 0.5, 1.5),
       random_tensor({3}, 89), random_tensor({4, 3, 2, 2}, 90)});
}

TEST_CASE("batchnorm running update blends batch moments") {
  Tensor rm(Shape{1}), rv(Shape{1}, 1.0);
  Tape tape;
  Tensor x = Tensor::from({4, 1}, {1.0, 2.0, 3.0, 4.0});
  ad::BatchNormOpts opts;
  opts.use_batch_stats = true;
  opts.update_running = true;
  opts.momentum = 0.1;
  tape.batchnorm(tape.leaf(x), tape.leaf(Tensor(Shape{1}, 1.0)),
                 tape.leaf(Tensor(Shape{1})), &rm, &rv, opts);
  CHECK(rm[0] == doctest::Approx(0.1 * 2.5).epsilon(1e-12));
  CHECK(rv[0] == doctest::Approx(0.9 * 1.0 + 0.1 * 1.25).epsilon(1e-12));
}

TEST_CASE("dropout determinism and gradient through fixed mask") {
  Tensor x = random_tensor({6, 6}, 91);
  auto run = [&](std::uint64_t seed) {
    Tape t;
    return Tensor(t.val(t.dropout(t.leaf(x), 0.5, seed)));
  };
  Tensor a = run(7), b = run(7), c = run(8);
  CHECK(a.vec() == b.vec());
  CHECK(a.vec() != c.vec());

  check_grads(
      [](Tape& t, std::vector<Value>& v) {
        Value root = t.mean_all(t.dropout(v[0], 0.3, 99));
        t.backward(root);
        return t.scalar(root);
      },
      {random_tensor({5, 5}, 92)});
}

TEST_CASE("blur2d valid-mode gradients and mass preservation") {
  const auto k = ad::gaussian_kernel(5, 1.5);
  double ksum = 0.0;
  for (double v : k) ksum += v;
  CHECK(ksum == doctest::Approx(1.0).epsilon(1e-12));

  // constant image stays constant under a unit-mass window
  Tape tape;
  const Tensor& blurred =
      tape.val(tape.blur2d_valid(tape.leaf(Tensor(Shape{1, 1, 8, 8}, 0.7)), k));
  for (std::int64_t i = 0; i < blurred.size(); ++i)
    CHECK(blurred[i] == doctest::Approx(0.7).epsilon(1e-12));

  check_grads(
      [&k](Tape& t, std::vector<Value>& v) {
        Value b = t.blur2d_valid(v[0], k);
        Value root = t.mean_all(t.mul(b, b));
        t.backward(root);
        return t.scalar(root);
      },
      {random_tensor({2, 2, 7, 8}, 93)});
}

TEST_CASE("l2_normalize_rows gradients") {
  check_grads(
      [](Tape& t, std::vector<Value>& v) {
        Value u = t.l2_normalize_rows(v[0]);
        Value root = t.mean_all(t.mul(u, t.add_scalar(u, 0.3)));
        t.backward(root);
        return t.scalar(root);
      },
      {random_tensor({3, 6}, 94, 0.2, 1.0)});
}

TEST_CASE("cosine_rows values and gradients") {
  Tape tape;
  Tensor a = Tensor::from({2, 2}, {1.0, 0.0, 1.0, 1.0});
  Tensor b = Tensor::from({2, 2}, {0.0, 1.0, -1.0, -1.0});
  const Tensor& sim = tape.val(tape.cosine_rows(tape.leaf(a), tape.leaf(b)));
  CHECK(sim[0] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(sim[1] == doctest::Approx(-1.0).epsilon(1e-12));

  int zero_rows = -1;
  Tape t2;
  Tensor z(Shape{1, 3});
  t2.cosine_rows(t2.leaf(z), t2.leaf(random_tensor({1, 3}, 95)), 1e-12, &zero_rows);
  CHECK(zero_rows == 1);

  check_grads(
      [](Tape& t, std::vector<Value>& v) {
        Value root = t.mean_all(t.cosine_rows(v[0], v[1]));
        t.backward(root);
        return t.scalar(root);
      },
      {random_tensor({4, 5}, 96, 0.3, 1.0), random_tensor({4, 5}, 97, -1.0, -0.3)});
}

TEST_CASE("tv2d value and gradients") {
  // constant image -> zero
  Tape tape;
  CHECK(tape.scalar(tape.tv2d(tape.leaf(Tensor(Shape{1, 3, 5, 5}, 0.4)))) == 0.0);

  // hand-counted step edge: one vertical 0->1 step between columns 2 and 3
  Tensor step(Shape{1, 1, 4, 6});
  for (std::int64_t y = 0; y < 4; ++y)
    for (std::int64_t x = 3; x < 6; ++x) step[y * 6 + x] = 1.0;
  Tape t2;
  // 4 rows with |diff|=1 at one column pair; denominators 4*5 horizontal, 3*6 vertical
  CHECK(t2.scalar(t2.tv2d(t2.leaf(step))) == doctest::Approx(4.0 / 20.0).epsilon(1e-12));

  check_grads(
      [](Tape& t, std::vector<Value>& v) {
        Value root = t.tv2d(v[0]);
        t.backward(root);
        return t.scalar(root);
      },
      {random_tensor({2, 3, 5, 6}, 98)});
}

TEST_CASE("reshape and reductions") {
  check_grads(
      [](Tape& t, std::vector<Value>& v) {
        Value r = t.reshape(v[0], {6, 4});
        Value root = t.mul_scalar(t.sum_all(t.mul(r, r)), 0.25);
        t.backward(root);
        return t.scalar(root);
      },
      {random_tensor({2, 3, 4}, 99)});
}
