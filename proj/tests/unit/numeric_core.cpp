#include <cmath>
#include <random>

#include "doctest.h"
#include "genieblue/autograd.hpp"
#include "genieblue/optim.hpp"
#include "genieblue/tensor.hpp"
#include "support.hpp"

using namespace genieblue;
using namespace genieblue::testing;

namespace {

Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  Tensor c({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a.at(i, k) * b.at(k, j);
      c.at(i, j) = s;
    }
  }
  return c;
}

Tensor random_tensor(Shape shape, Rng& rng, double stddev = 1.0) {
  Tensor t(std::move(shape));
  randomize(t, rng, stddev);
  return t;
}

}  // namespace

TEST_SUITE("tensor") {
  TEST_CASE("softmax of equal entries is uniform") {
    const Tensor p = kernels::softmax_rows(Tensor::vector({0, 0, 0}));
    for (std::size_t i = 0; i < 3; ++i) CHECK(p[i] == doctest::Approx(1.0 / 3).epsilon(1e-15));
  }

  TEST_CASE("softmax of 1, 2, 3") {
    const Tensor p = kernels::softmax_rows(Tensor::vector({1, 2, 3}));
    const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    CHECK(p[0] == doctest::Approx(0.09003057).epsilon(1e-7));
    CHECK(p[1] == doctest::Approx(0.24472847).epsilon(1e-7));
    CHECK(p[2] == doctest::Approx(0.66524096).epsilon(1e-7));
    CHECK(std::fabs(p[2] - std::exp(3.0) / z) < 1e-15);
  }

  TEST_CASE("identity times X is X") {
    Rng rng(1);
    const Tensor x = random_tensor({3, 5}, rng);
    CHECK(kernels::matmul(Tensor::identity(3), x).identical(x));
  }

  TEST_CASE("products match a loop oracle for every tail width") {
    Rng rng(2);
    for (std::size_t m : {1, 3, 8, 17}) {
      for (std::size_t n = 1; n <= 70; ++n) {
        for (std::size_t k : {1, 5, 16, 33}) {
          const Tensor a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
          const Tensor want = naive_matmul(a, b);
          CAPTURE(m);
          CAPTURE(n);
          CAPTURE(k);
          REQUIRE(relative_error(kernels::matmul(a, b), want) < 1e-14);
          REQUIRE(relative_error(kernels::matmul_nt(a, kernels::transpose(b)), want) < 1e-14);
          REQUIRE(relative_error(kernels::matmul_tn(kernels::transpose(a), b), want) < 1e-14);
        }
      }
    }
  }

  TEST_CASE("a product row does not depend on the other rows") {
    Rng rng(3);
    const Tensor a = random_tensor({9, 40}, rng), b = random_tensor({40, 37}, rng);
    const Tensor all = kernels::matmul(a, b);
    for (std::size_t i = 0; i < a.rows(); ++i) {
      Tensor row({1, a.cols()});
      std::copy(a.row(i), a.row(i) + a.cols(), row.data());
      const Tensor one = kernels::matmul(row, b);
      CHECK(std::equal(one.data(), one.data() + one.size(), all.row(i)));
    }
  }

  TEST_CASE("shape mismatch names both shapes") {
    const Tensor a({2, 3}), b({2, 3});
    CHECK_THROWS_WITH_AS(kernels::matmul(a, b), doctest::Contains("[2, 3]"), ShapeError);
    CHECK_THROWS_AS(kernels::add(a, Tensor({3, 2})), ShapeError);
  }

  TEST_CASE("vexp tracks std::exp") {
    Rng rng(4);
    std::uniform_real_distribution<double> u(-700.0, 700.0);
    for (int i = 0; i < 100000; ++i) {
      const double x = u(rng);
      REQUIRE(std::fabs(kernels::vexp(x) - std::exp(x)) <= 4e-16 * std::exp(x));
    }
    CHECK(kernels::vexp(0.0) == 1.0);
  }

  TEST_CASE("gelu is the tanh form") {
    for (double x = -6.0; x <= 6.0; x += 0.01) {
      const double want = 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
      REQUIRE(std::fabs(kernels::gelu(x) - want) < 1e-14);
      const double h = 1e-6;
      const double slope = (kernels::gelu(x + h) - kernels::gelu(x - h)) / (2 * h);
      REQUIRE(std::fabs(kernels::gelu_derivative(x) - slope) < 1e-8);
    }
  }

  TEST_CASE("rms normalization") {
    const Tensor x = Tensor::matrix(1, 4, {1, -2, 3, -4});
    const Tensor g = Tensor::vector({1, 2, 1, 0.5});
    const Tensor y = kernels::rms_normalize(x, g);
    const double inv = 1.0 / std::sqrt((1 + 4 + 9 + 16) / 4.0 + 1e-6);
    CHECK(y[0] == doctest::Approx(inv));
    CHECK(y[1] == doctest::Approx(-4 * inv));
    CHECK(y[3] == doctest::Approx(-2 * inv));
  }
}

TEST_SUITE("autograd") {
  TEST_CASE("sum of Wx has gradient rows equal to x") {
    Tensor w({3, 4}, 0.5);
    const Tensor x = Tensor::matrix(1, 4, {1, 2, 3, 4});
    ParamSet trainable{&w};
    Tape tape(&trainable);
    Var loss = ad::sum(ad::matmul_nt(tape.constant(x), tape.param(w)));
    tape.backward(loss);
    const Tensor g = *tape.param_grad(w);
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 4; ++j) CHECK(g.at(i, j) == x[j]);
    }
  }

  TEST_CASE("zero times anything has zero gradients") {
    Rng rng(5);
    Tensor w = random_tensor({4, 4}, rng);
    ParamSet trainable{&w};
    Tape tape(&trainable);
    Var loss = ad::scale(ad::sum(ad::gelu(ad::matmul_nt(tape.constant(random_tensor({2, 4}, rng)),
                                                       tape.param(w)))),
                         0.0);
    tape.backward(loss);
    const Tensor g = *tape.param_grad(w);
    for (double v : g.values()) CHECK(v == 0.0);
  }

  TEST_CASE("non-scalar loss is rejected") {
    Tape tape;
    Var v = tape.constant(Tensor({2, 2}, 1.0));
    CHECK_THROWS_AS(tape.backward(v), ShapeError);
  }

  TEST_CASE("non-finite intermediate is rejected with the node") {
    Tensor w({1, 1}, 1e300);
    ParamSet trainable{&w};
    Tape tape(&trainable);
    Var big = ad::matmul_nt(tape.param(w), tape.param(w));
    CHECK_THROWS_WITH_AS(tape.backward(ad::sum(big)), doctest::Contains("#"), NonFiniteError);
  }

  TEST_CASE("two-layer MLP matches central differences") {
    Rng rng(0);
    Tensor w1 = random_tensor({8, 8}, rng, 0.5), w2 = random_tensor({8, 8}, rng, 0.5);
    Tensor b1 = random_tensor({8}, rng, 0.1);
    const Tensor x = random_tensor({5, 8}, rng);
    auto loss = [&](Tape& t) {
      Var h = ad::gelu(ad::add_row_vector(ad::matmul_nt(t.constant(x), t.param(w1)), t.param(b1)));
      Var y = ad::matmul_nt(h, t.param(w2));
      return ad::weighted_nll(y, {0, 3, 7, 1, 2}, {0.2, 0.2, 0.2, 0.2, 0.2});
    };
    for (int i = 0; i < 10; ++i) {
      CHECK(directional_check({&w1, &b1, &w2}, loss, rng, 1e-5).relative() < 1e-4);
    }
  }

  TEST_CASE("every op matches central differences") {
    Rng rng(6);
    Tensor x = random_tensor({7, 8}, rng), w = random_tensor({8, 8}, rng, 0.4);
    Tensor a = random_tensor({2, 8}, rng, 0.3), b = random_tensor({8, 2}, rng, 0.3);
    Tensor gain = random_tensor({8}, rng), table = random_tensor({5, 8}, rng);
    Tensor inj = random_tensor({2, 8}, rng);
    const std::vector<Segment> segs = {{0, 3}, {3, 4}};
    std::vector<std::size_t> targets = {1, 0, 4, 2, 3, 3, 1};
    std::vector<double> weights = {0.1, 0.0, 0.3, 0.2, 0.1, 0.2, 0.1};
    auto nll = [&](Var v) { return ad::weighted_nll(ad::matmul_nt(v, ad::scale(v.tape().param(table), 1.0)), targets, weights); };

    SUBCASE("lora linear and rms norm") {
      auto loss = [&](Tape& t) {
        Var h = ad::rms_norm(t.param(x), t.param(gain));
        return nll(ad::lora_linear(h, t.param(w), t.param(a), t.param(b), 0.7));
      };
      for (int i = 0; i < 5; ++i) CHECK(directional_check({&x, &w, &a, &b, &gain}, loss, rng).relative() < 1e-6);
    }
    for (bool causal : {true, false}) {
      SUBCASE(causal ? "causal attention" : "full attention") {
        Tensor wk = random_tensor({8, 8}, rng, 0.4), wv = random_tensor({8, 8}, rng, 0.4);
        auto loss = [&](Tape& t) {
          Var in = t.param(x);
          Var q = ad::matmul_nt(in, t.param(w)), k = ad::matmul_nt(in, t.param(wk));
          Var v = ad::matmul_nt(in, t.param(wv));
          return nll(ad::attention(q, k, v, segs, 2, causal));
        };
        for (int i = 0; i < 5; ++i) CHECK(directional_check({&x, &w, &wk, &wv}, loss, rng).relative() < 1e-6);
      }
    }
    SUBCASE("embedding with injection, row routing and bias") {
      auto loss = [&](Tape& t) {
        Var e = ad::embed_with_injection(t.param(table), {1, 0, 0, 2, 4, 4, 3},
                                         {false, true, true, false, false, false, false},
                                         t.param(inj));
        Var left = ad::gelu(ad::take_rows(e, {0, 2, 4}));
        Var right = ad::add_row_vector(ad::take_rows(e, {1, 3, 5, 6}), t.param(gain));
        return nll(ad::add(ad::merge_rows(left, {0, 2, 4}, right, {1, 3, 5, 6}), t.param(x)));
      };
      for (int i = 0; i < 5; ++i) CHECK(directional_check({&table, &inj, &gain, &x}, loss, rng).relative() < 1e-6);
    }
  }
}

TEST_SUITE("optim") {
  TEST_CASE("zero gradient without decay is the identity") {
    Tensor p = Tensor::vector({1.0, -2.0});
    const Tensor g({2});
    AdamWState state;
    AdamWHyper hyper;
    hyper.weight_decay = 0.0;
    const ParamSlot slot{&p, &g};
    adamw_step({&slot, 1}, state, 0.1, hyper);
    CHECK(p[0] == 1.0);
    CHECK(p[1] == -2.0);
    CHECK(state.t == 1);
  }

  TEST_CASE("decay-only step") {
    Tensor p = Tensor::vector({1.0});
    const Tensor g({1});
    AdamWState state;
    const ParamSlot slot{&p, &g};
    adamw_step({&slot, 1}, state, 0.1, AdamWHyper{});
    CHECK(p[0] == doctest::Approx(0.995).epsilon(1e-15));
  }

  TEST_CASE("first Adam step from hand evaluation") {
    Tensor p = Tensor::vector({1.0});
    const Tensor g = Tensor::vector({1.0});
    AdamWState state;
    AdamWHyper hyper;
    hyper.weight_decay = 0.0;
    const ParamSlot slot{&p, &g};
    adamw_step({&slot, 1}, state, 0.1, hyper);
    // m_hat = 1, v_hat = 1, step = 0.1 * 1 / (1 + 1e-6).
    CHECK(p[0] == doctest::Approx(1.0 - 0.1 / (1.0 + 1e-6)).epsilon(1e-15));
    CHECK(p[0] == doctest::Approx(0.9000001).epsilon(1e-9));
  }

  TEST_CASE("non-finite gradient is rejected") {
    Tensor p = Tensor::vector({1.0});
    const Tensor g = Tensor::vector({NAN});
    AdamWState state;
    const ParamSlot slot{&p, &g};
    CHECK_THROWS(adamw_step({&slot, 1}, state, 0.1, AdamWHyper{}));
  }

  TEST_CASE("warmup and cosine schedule") {
    LrSchedule s{1e-3, 34, 3434, 0.0};
    CHECK(lr_at(34, s) == doctest::Approx(1e-3).epsilon(1e-15));
    CHECK(lr_at(0, s) == doctest::Approx(1e-3 / 34));
    CHECK(lr_at(34 + 1700, s) == doctest::Approx(0.5e-3).epsilon(1e-12));
    CHECK(lr_at(3434, s) == doctest::Approx(0.0).epsilon(1e-18));
    CHECK_THROWS(lr_at(3435, s));
    CHECK(std::fabs(lr_at(33, s) - lr_at(34, s)) < 1e-12);
    for (std::uint64_t t = 34; t < 3434; ++t) REQUIRE(lr_at(t + 1, s) <= lr_at(t, s));
    CHECK_THROWS(LrSchedule{1e-3, 0, 10, 0.0}.validate());
    CHECK_THROWS(LrSchedule{1e-3, 10, 10, 0.0}.validate());
    CHECK_THROWS(LrSchedule{1e-3, 1, 10, 1.0}.validate());
  }
}
