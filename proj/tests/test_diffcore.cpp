#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "placekit/checkpoint.hpp"
#include "placekit/gradcheck.hpp"
#include "placekit/ops.hpp"
#include "placekit/registry.hpp"
#include "placekit/rng.hpp"
#include "placekit/tensor.hpp"

using namespace placekit;
namespace ops = placekit::ops;

namespace {

Tensor rand_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Values bounded away from zero, for kink-free relu/abs checks.
Tensor rand_tensor_away_from_zero(Shape shape, Rng& rng, double margin = 0.1) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.data()) {
    const double u = rng.uniform(margin, 1.0);
    v = rng.uniform() < 0.5 ? -u : u;
  }
  return t;
}

}  // namespace

TEST_CASE("elementwise and reduction primitives pass gradcheck at seeded points",
          "[diffcore][gradcheck]") {
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    {
      auto a = rand_tensor({3, 4}, rng), b = rand_tensor({3, 4}, rng);
      CHECK(gradcheck([](const std::vector<Tensor>& in) { return ops::add(in[0], in[1]); },
                      {a, b})
                .worst <= 1e-4);
      CHECK(gradcheck([](const std::vector<Tensor>& in) { return ops::sub(in[0], in[1]); },
                      {a, b})
                .worst <= 1e-4);
      CHECK(gradcheck([](const std::vector<Tensor>& in) { return ops::mul(in[0], in[1]); },
                      {a, b})
                .worst <= 1e-4);
      CHECK(gradcheck(
                [](const std::vector<Tensor>& in) { return ops::affine(in[0], -2.5, 0.7); },
                {a})
                .worst <= 1e-4);
      CHECK(gradcheck([](const std::vector<Tensor>& in) { return ops::sum(in[0]); }, {a})
                .worst <= 1e-4);
      CHECK(gradcheck([](const std::vector<Tensor>& in) { return ops::mean(in[0]); }, {a})
                .worst <= 1e-4);
      CHECK(gradcheck([](const std::vector<Tensor>& in) { return ops::tanh_(in[0]); }, {a})
                .worst <= 1e-4);
      CHECK(gradcheck([](const std::vector<Tensor>& in) { return ops::sigmoid(in[0]); }, {a})
                .worst <= 1e-4);
      CHECK(gradcheck([](const std::vector<Tensor>& in) { return ops::exp_(in[0]); }, {a})
                .worst <= 1e-4);
      CHECK(gradcheck(
                [](const std::vector<Tensor>& in) { return ops::softmax(in[0]); }, {a})
                .worst <= 1e-4);
      CHECK(gradcheck(
                [](const std::vector<Tensor>& in) { return ops::reshape(in[0], {4, 3}); },
                {a})
                .worst <= 1e-4);
    }
    {
      auto pos = rand_tensor({2, 5}, rng, 0.2, 2.0);
      CHECK(gradcheck([](const std::vector<Tensor>& in) { return ops::log_(in[0]); }, {pos})
                .worst <= 1e-4);
    }
    {
      auto x = rand_tensor_away_from_zero({4, 4}, rng);
      CHECK(gradcheck([](const std::vector<Tensor>& in) { return ops::relu(in[0]); }, {x})
                .worst <= 1e-6);
      CHECK(gradcheck(
                [](const std::vector<Tensor>& in) { return ops::leaky_relu(in[0]); }, {x})
                .worst <= 1e-4);
      CHECK(gradcheck([](const std::vector<Tensor>& in) { return ops::abs_(in[0]); }, {x})
                .worst <= 1e-4);
      // interior of the clamp window only
      CHECK(gradcheck(
                [](const std::vector<Tensor>& in) { return ops::clamp(in[0], -5.0, 5.0); },
                {x})
                .worst <= 1e-4);
    }
    {
      auto a = rand_tensor({2, 3}, rng), b = rand_tensor({2, 3}, rng);
      CHECK(gradcheck(
                [](const std::vector<Tensor>& in) {
                  return ops::concat({in[0], in[1]}, 1);
                },
                {a, b})
                .worst <= 1e-4);
      CHECK(gradcheck(
                [](const std::vector<Tensor>& in) {
                  return ops::concat({in[0], in[1]}, 0);
                },
                {a, b})
                .worst <= 1e-4);
    }
  }
}

TEST_CASE("linear algebra primitives pass gradcheck", "[diffcore][gradcheck]") {
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed * 11);
    auto a = rand_tensor({3, 4}, rng), b = rand_tensor({4, 5}, rng);
    CHECK(gradcheck([](const std::vector<Tensor>& in) { return ops::matmul(in[0], in[1]); },
                    {a, b})
              .worst <= 1e-4);
    auto x = rand_tensor({3, 4}, rng), w = rand_tensor({4, 6}, rng),
         bias = rand_tensor({6}, rng);
    CHECK(gradcheck(
              [](const std::vector<Tensor>& in) { return ops::linear(in[0], in[1], in[2]); },
              {x, w, bias})
              .worst <= 1e-4);
  }
}

TEST_CASE("conv, pooling and batchnorm pass gradcheck", "[diffcore][gradcheck]") {
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed * 17);
    auto x = rand_tensor({2, 3, 6, 6}, rng);
    auto w = rand_tensor({4, 3, 3, 3}, rng);
    auto b = rand_tensor({4}, rng);
    CHECK(gradcheck(
              [](const std::vector<Tensor>& in) {
                return ops::conv3x3(in[0], in[1], in[2], 1, 1);
              },
              {x, w, b})
              .worst <= 1e-4);
    CHECK(gradcheck(
              [](const std::vector<Tensor>& in) {
                return ops::conv3x3(in[0], in[1], in[2], 2, 1);
              },
              {x, w, b})
              .worst <= 1e-4);
    CHECK(gradcheck(
              [](const std::vector<Tensor>& in) {
                return ops::adaptive_avg_pool(in[0], 2, 2);
              },
              {x})
              .worst <= 1e-4);
    CHECK(gradcheck(
              [](const std::vector<Tensor>& in) {
                return ops::adaptive_avg_pool(in[0], 3, 3);
              },
              {x})
              .worst <= 1e-4);

    auto gamma = rand_tensor({3}, rng, 0.5, 1.5);
    auto beta = rand_tensor({3}, rng);
    {
      ops::BatchNormState st(3);
      CHECK(gradcheck(
                [&st](const std::vector<Tensor>& in) {
                  return ops::batchnorm(in[0], in[1], in[2], st, true);
                },
                {x, gamma, beta})
                .worst <= 1e-4);
    }
    {
      ops::BatchNormState st(3);
      for (size_t c = 0; c < 3; ++c) {
        st.running_mean[c] = rng.uniform(-0.3, 0.3);
        st.running_var[c] = rng.uniform(0.5, 1.5);
      }
      CHECK(gradcheck(
                [&st](const std::vector<Tensor>& in) {
                  return ops::batchnorm(in[0], in[1], in[2], st, false);
                },
                {x, gamma, beta})
                .worst <= 1e-4);
    }
  }
}

TEST_CASE("grid sampler passes gradcheck w.r.t. source and theta",
          "[diffcore][gradcheck]") {
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed * 23);
    auto src = rand_tensor({1, 2, 8, 8}, rng, 0.0, 1.0);
    // generic interior warp; random offsets keep samples off cell edges
    Tensor theta = Tensor::from_data(
        {1, 2, 3}, {1.0 / rng.uniform(0.4, 0.9), 0.0, rng.uniform(-0.2, 0.2), 0.0,
                    1.0 / rng.uniform(0.4, 0.9), rng.uniform(-0.2, 0.2)});
    CHECK(gradcheck(
              [](const std::vector<Tensor>& in) {
                return ops::grid_sample_bilinear(in[0], in[1]);
              },
              {src, theta})
              .worst <= 1e-4);
  }
}

TEST_CASE("softmax of a constant vector is uniform", "[diffcore]") {
  Tensor x = Tensor::full({1, 84}, 0.37);
  Tensor y = ops::softmax(x);
  for (double v : y.data()) CHECK(v == Catch::Approx(1.0 / 84.0).epsilon(1e-12));
}

TEST_CASE("matmul with identity returns the input", "[diffcore]") {
  Rng rng(7);
  auto x = rand_tensor({5, 5}, rng);
  Tensor eye = Tensor::zeros({5, 5});
  for (int i = 0; i < 5; ++i) eye.data()[static_cast<size_t>(i) * 5 + i] = 1.0;
  Tensor y = ops::matmul(x, eye);
  for (size_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("shape mismatches report the offending shapes", "[diffcore]") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({3, 3});
  CHECK_THROWS_AS(ops::add(a, b), ShapeMismatch);
  CHECK_THROWS_AS(ops::matmul(a, a), ShapeMismatch);
  CHECK_THROWS_WITH(ops::add(a, b), Catch::Matchers::ContainsSubstring("(2,3)"));
}

TEST_CASE("backward accumulation is additive", "[diffcore]") {
  Rng rng(3);
  auto x = rand_tensor({4}, rng);
  x.set_requires_grad(true);
  Tensor loss = ops::sum(ops::mul(x, x));
  ad::backward(loss);
  const std::vector<double> g1 = x.grad();
  ad::backward(loss);
  for (size_t i = 0; i < g1.size(); ++i) CHECK(x.grad()[i] == 2.0 * g1[i]);
}

TEST_CASE("graph evaluation is deterministic across runs", "[diffcore]") {
  auto run = [] {
    Rng rng(99);
    auto x = rand_tensor({3, 3}, rng);
    auto w = rand_tensor({3, 3}, rng);
    Tensor y = ops::sum(ops::tanh_(ops::matmul(x, w)));
    return y.item();
  };
  CHECK(run() == run());
}

TEST_CASE("adam: zero gradient leaves parameters unchanged", "[diffcore][adam]") {
  ParamRegistry reg;
  Tensor p = reg.add("p", {3});
  p.data() = {1.0, -2.0, 3.0};
  p.grad();  // allocate zero grads
  adam_step(reg, 0.1);
  CHECK(p.data() == std::vector<double>{1.0, -2.0, 3.0});
}

TEST_CASE("adam: first step with unit gradient moves by ~lr", "[diffcore][adam]") {
  // hand-evaluated recurrence: m_hat = v_hat = 1 at t=1, so the update is
  // lr / (1 + eps)
  ParamRegistry reg;
  Tensor p = reg.add("p", {1});
  p.data() = {0.5};
  p.grad()[0] = 1.0;
  adam_step(reg, 0.1, 0.5, 0.999, 1e-8);
  CHECK(p.data()[0] == Catch::Approx(0.5 - 0.1 / (1.0 + 1e-8)).margin(1e-12));
  CHECK(p.grad_view()[0] == 0.0);  // grads zeroed afterward
}

TEST_CASE("adam defaults match beta1=0.5 beta2=0.999", "[diffcore][adam]") {
  // the defaults live in the adam_step signature; exercise them against an
  // explicit reference update
  ParamRegistry a, b;
  Tensor pa = a.add("p", {1}), pb = b.add("p", {1});
  pa.data() = {1.0};
  pb.data() = {1.0};
  pa.grad()[0] = 0.3;
  pb.grad()[0] = 0.3;
  adam_step(a, 0.05);
  adam_step(b, 0.05, 0.5, 0.999, 1e-8);
  CHECK(pa.data()[0] == pb.data()[0]);
}

TEST_CASE("gaussian_sample: clamped sigma limit returns mu", "[diffcore][rng]") {
  Rng rng(5);
  Tensor mu = Tensor::from_data({4}, {0.1, -0.2, 0.3, 0.0});
  Tensor sigma = Tensor::full({4}, 0.0);
  Tensor eps = Tensor::zeros({4});
  for (auto& v : eps.data()) v = rng.normal();
  Tensor sig = ops::clamp(sigma, 1e-8, 1e30);
  Tensor z = ops::add(mu, ops::mul(sig, eps));
  for (size_t i = 0; i < 4; ++i)
    CHECK(z.data()[i] == Catch::Approx(mu.data()[i]).margin(1e-6));
}

TEST_CASE("rng normal obeys the law of large numbers", "[diffcore][rng]") {
  Rng rng(2024);
  const int n = 100000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double v = rng.normal();
    s += v;
    s2 += v * v;
  }
  const double mean = s / n;
  const double var = s2 / n - mean * mean;
  CHECK(std::abs(mean) < 0.02);
  CHECK(std::abs(var - 1.0) < 0.05);
}

TEST_CASE("rng: identical seeds give identical sequences, forks differ",
          "[diffcore][rng]") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());
  Rng c = Rng(42).fork("stream-a");
  Rng d = Rng(42).fork("stream-a");
  Rng e = Rng(42).fork("stream-b");
  CHECK(c.next_u64() == d.next_u64());
  CHECK(c.next_u64() != e.next_u64());
}

TEST_CASE("checkpoint round trip restores parameters and optimizer state",
          "[diffcore][checkpoint]") {
  namespace fs = std::filesystem;
  const auto path = fs::temp_directory_path() / "placekit_ckpt_test.bin";

  Rng rng(12);
  ParamRegistry reg;
  reg.add_kaiming("layer.w", {4, 3}, 4, rng);
  reg.add_const("layer.b", {3}, 0.25);
  // run one optimizer step so the adam state is non-trivial
  for (size_t i = 0; i < reg.size(); ++i) {
    Tensor p = reg.param(i);
    for (auto& g : p.grad()) g = 0.1;
  }
  adam_step(reg, 0.01);
  save_checkpoint(path.string(), "kind=test\nc=4\n", {{"generator", &reg, true}});

  ParamRegistry loaded;
  loaded.add("layer.w", {4, 3});
  loaded.add("layer.b", {3});
  const std::string blob = load_checkpoint(path.string(), {{"generator", &loaded, true}});
  CHECK(blob == "kind=test\nc=4\n");
  CHECK(read_checkpoint_config(path.string()) == "kind=test\nc=4\n");
  for (size_t i = 0; i < reg.size(); ++i) {
    CHECK(loaded.param(i).data() == reg.param(i).data());
    CHECK(loaded.adam_state(i).m == reg.adam_state(i).m);
    CHECK(loaded.adam_state(i).v == reg.adam_state(i).v);
  }
  CHECK(loaded.adam_step_count() == 1);

  ParamRegistry wrong;
  wrong.add("layer.w", {4, 4});
  wrong.add("layer.b", {3});
  CHECK_THROWS_AS(load_checkpoint(path.string(), {{"generator", &wrong, true}}),
                  CheckpointError);
  fs::remove(path);
}

TEST_CASE("gradcheck harness reports per-input errors", "[diffcore][gradcheck]") {
  Rng rng(31);
  auto x = rand_tensor({3, 4}, rng);
  auto w = rand_tensor({4, 2}, rng);
  auto b = rand_tensor({2}, rng);
  auto report = gradcheck(
      [](const std::vector<Tensor>& in) { return ops::linear(in[0], in[1], in[2]); },
      {x, w, b});
  REQUIRE(report.max_rel_err.size() == 3);
  for (double e : report.max_rel_err) CHECK(e <= 1e-4);
}
