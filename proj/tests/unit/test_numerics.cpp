#include <cmath>
#include <vector>

#include "doctest.h"
#include "facetalk/checkpoint.hpp"
#include "facetalk/error.hpp"
#include "facetalk/gradcheck.hpp"
#include "facetalk/ops.hpp"
#include "facetalk/optim.hpp"

using namespace facetalk;

namespace {

Array random_array(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Array a(std::move(shape));
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = rng.uniform(lo, hi);
  return a;
}

}  // namespace

TEST_CASE("relu6 clamps to [0, 6]") {
  CHECK(relu6(Array::vector({-1.0}))[0] == 0.0);
  CHECK(relu6(Array::vector({3.0}))[0] == 3.0);
  CHECK(relu6(Array::vector({7.5}))[0] == 6.0);
  CHECK_THROWS_AS(relu6(Array::vector({std::nan("")})), NumericError);
}

TEST_CASE("sigmoid values") {
  CHECK(sigmoid(Array::vector({0.0}))[0] == 0.5);
  CHECK(std::fabs(sigmoid(Array::vector({50.0}))[0] - 1.0) <= 1e-15);
  // Direct scalar evaluation of 1 / (1 + e^-1).
  const double oracle = 1.0 / (1.0 + std::exp(-1.0));
  CHECK(sigmoid(Array::vector({1.0}))[0] == doctest::Approx(oracle).epsilon(1e-15));
  CHECK(oracle == doctest::Approx(0.731058).epsilon(1e-6));
  CHECK(sigmoid(-800.0) >= 0.0);
}

TEST_CASE("matmul") {
  const Array m = Array::matrix(2, 2, {1, 2, 3, 4});
  CHECK(matmul(Array::identity(2), m) == m);
  const Array r = matmul(Array::matrix(1, 2, {1, 2}), Array::matrix(2, 1, {3, 4}));
  CHECK(r.shape() == Shape{1, 1});
  CHECK(r[0] == 11.0);
  try {
    matmul(Array(Shape{2, 3}), Array(Shape{2, 2}));
    FAIL("expected shape error");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[2x2]") != std::string::npos);
  }
}

TEST_CASE("backward of simple losses") {
  ParamStore store;
  Rng rng(3);
  store.add("p", random_array({2, 3}, rng));
  store.add("unused", random_array({4}, rng));

  SUBCASE("sum gives ones") {
    Tape tape;
    tape.backward(ops::sum(tape.param(store, "p")));
    for (double g : store.at("p").grad.values()) CHECK(g == 1.0);
  }
  SUBCASE("half squared norm gives p") {
    Tape tape;
    Var p = tape.param(store, "p");
    tape.backward(ops::scale(ops::sum(ops::square(p)), 0.5));
    CHECK(store.at("p").grad == store.at("p").value);
  }
  SUBCASE("disconnected parameters get exactly zero") {
    Tape tape;
    Var p = tape.param(store, "p");
    tape.param(store, "unused");
    tape.backward(ops::sum(ops::sigmoid(p)));
    for (double g : store.at("unused").grad.values()) CHECK(g == 0.0);
  }
  SUBCASE("repeated backward accumulates") {
    Tape tape;
    Var loss = ops::sum(tape.param(store, "p"));
    tape.backward(loss);
    tape.backward(loss);
    for (double g : store.at("p").grad.values()) CHECK(g == 2.0);
  }
  SUBCASE("non-scalar loss is rejected") {
    Tape tape;
    CHECK_THROWS_AS(tape.backward(tape.param(store, "p")), ShapeError);
  }
}

TEST_CASE("finite_diff_grad examples") {
  ParamStore store;
  store.add("x", Array::vector({1.0}));
  auto square = [](const ParamStore& s) {
    const double x = s.at("x").value[0];
    return x * x;
  };
  CHECK(finite_diff_grad(store, square)[0][0] == doctest::Approx(2.0).epsilon(1e-6));

  store.at("x").value[0] = 3.0;
  auto clamp = [](const ParamStore& s) { return relu6(s.at("x").value[0]); };
  CHECK(std::fabs(finite_diff_grad(store, clamp)[0][0] - 1.0) <= 1e-6);

  CHECK_THROWS_AS(finite_diff_grad(store, clamp, 0.0), NumericError);
  auto bad = [](const ParamStore&) { return std::nan(""); };
  CHECK_THROWS_AS(finite_diff_grad(store, bad), NumericError);
}

TEST_CASE("two-layer network gradients match finite differences") {
  Rng rng(11);
  ParamStore store;
  store.add("W1", random_array({6, 4}, rng));
  store.add("b1", random_array({6}, rng));
  store.add("W2", random_array({3, 6}, rng));
  store.add("b2", random_array({3}, rng));
  const Array x = random_array({5, 4}, rng, -2.0, 2.0);
  const Array y = random_array({5, 3}, rng);
  auto build = [&](Tape& t) {
    Var h = ops::relu6(ops::linear(t.constant(x), t.param(store, "W1"),
                                   t.param(store, "b1")));
    Var out = ops::sigmoid(
        ops::linear(h, t.param(store, "W2"), t.param(store, "b2")));
    return ops::mean(ops::square(ops::sub(out, t.constant(y))));
  };

  // Full finite-difference oracle against every coordinate.
  store.zero_grads();
  {
    Tape t;
    t.backward(build(t));
  }
  const auto numeric = finite_diff_grad(store, [&](const ParamStore&) {
    Tape t;
    return build(t).value().item();
  });
  for (std::size_t b = 0; b < store.size(); ++b) {
    const Array& g = store.entry(b).grad;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double denom = std::max({std::fabs(g[i]), std::fabs(numeric[b][i]), 1e-6});
      CHECK(std::fabs(g[i] - numeric[b][i]) / denom < 1e-4);
    }
  }

  const GradCheckReport report = check_gradients({&store}, build);
  CHECK(report.passed());
  CHECK(report.checked == store.parameter_count());
}

TEST_CASE("every differentiable op passes the gradient check") {
  Rng rng(5);
  ParamStore store;
  store.add("a", random_array({3, 4}, rng, -3.0, 8.0));
  store.add("b", random_array({3, 4}, rng, 0.5, 2.0));
  store.add("m", random_array({4, 2}, rng));
  store.add("row", random_array({4}, rng));
  store.add("table", random_array({5, 4}, rng));
  store.add("img", random_array({2, 2 * 4 * 4}, rng));
  Array kernels(Shape{3, 2, 3, 3});
  for (std::size_t i = 0; i < kernels.size(); ++i) kernels[i] = rng.uniform(-1, 1);
  const Array weights = Array::vector({0.5, -1.0, 2.0, 0.25});
  const std::vector<std::size_t> idx{2, 3, 3, 1};

  auto build = [&](Tape& t) {
    Var a = t.param(store, "a");
    Var b = t.param(store, "b");
    std::vector<Var> terms;
    terms.push_back(ops::sum(ops::relu6(a)));
    terms.push_back(ops::sum(ops::relu(a)));
    terms.push_back(ops::sum(ops::mul(ops::sigmoid(a), b)));
    terms.push_back(ops::mean(ops::log(b)));
    terms.push_back(ops::sum(ops::abs(ops::sub(a, b))));
    terms.push_back(ops::sum(ops::pow_abs(ops::add_scalar(a, 0.3), 2)));
    terms.push_back(ops::sum(ops::matmul(ops::scale(a, 0.5), t.param(store, "m"))));
    terms.push_back(ops::sum(ops::square(ops::add_row(a, t.param(store, "row")))));
    terms.push_back(ops::sum(ops::weighted_row_sum(a, weights)));
    terms.push_back(ops::sum(ops::row_norm(ops::add(a, b))));
    const Var parts[] = {ops::slice_cols(a, 0, 2), ops::slice_cols(b, 2, 2)};
    terms.push_back(ops::sum(ops::square(ops::concat_cols(parts))));
    const Var cand[] = {ops::slice_cols(a, 0, 2), ops::slice_cols(b, 1, 2)};
    terms.push_back(ops::sum(ops::max_of(cand)));
    terms.push_back(ops::sum(ops::square(ops::embedding(t.param(store, "table"), idx, true))));
    Var conv = ops::conv3x3(t.param(store, "img"), kernels, 2, 4, 4);
    terms.push_back(ops::sum(ops::square(ops::avg_pool2(conv, 3, 4, 4))));
    Var total = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) total = ops::add(total, terms[i]);
    return total;
  };
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    GradCheckOptions opts;
    opts.seed = seed;
    opts.samples = 20;
    const GradCheckReport report = check_gradients({&store}, build, opts);
    for (const auto& f : report.failures)
      MESSAGE(f.block << "[" << f.index << "] analytic " << f.analytic
                      << " numeric " << f.numeric);
    CHECK(report.passed());
  }
  // Row 0 of the embedding table is frozen by the lookup.
  store.zero_grads();
  Tape t;
  const std::vector<std::size_t> with_pad{0, 0, 4};
  t.backward(ops::sum(ops::embedding(t.param(store, "table"), with_pad, true)));
  CHECK(store.at("table").grad[16] == 1.0);
  for (std::size_t c = 0; c < 4; ++c) CHECK(store.at("table").grad[c] == 0.0);
}

TEST_CASE("adam_step") {
  ParamStore store;
  Rng rng(1);
  store.add("w", random_array({10}, rng));
  const Array before = store.at("w").value;

  SUBCASE("zero gradients leave fresh parameters unchanged") {
    adam_step(store, {});
    CHECK(store.at("w").value == before);
    CHECK(store.at("w").step == 1);
  }
  SUBCASE("first step with constant gradient moves each coordinate by lr") {
    store.at("w").grad.fill(0.37);
    AdamConfig cfg;
    cfg.lr = 1e-3;
    adam_step(store, cfg);
    for (std::size_t i = 0; i < 10; ++i) {
      CHECK(std::fabs(before[i] - store.at("w").value[i] - cfg.lr) <= 1e-6);
    }
    for (double g : store.at("w").grad.values()) CHECK(g == 0.0);
  }
  SUBCASE("listening default learning rate is accepted") {
    store.at("w").grad.fill(1.0);
    CHECK(AdamConfig{}.lr == 1e-4);
    CHECK_NOTHROW(adam_step(store, AdamConfig{}));
  }
  SUBCASE("non-positive learning rate is rejected") {
    AdamConfig cfg;
    cfg.lr = 0.0;
    CHECK_THROWS_AS(adam_step(store, cfg), ConfigError);
  }
  SUBCASE("frozen blocks are skipped") {
    store.set_frozen("w", true);
    store.at("w").grad.fill(1.0);
    adam_step(store, {});
    CHECK(store.at("w").value == before);
    CHECK(store.at("w").step == 0);
  }
}

TEST_CASE("gradient clipping") {
  ParamStore store;
  store.add("a", Array::vector({0.0, 0.0}));
  store.at("a").grad = Array::vector({3.0, 4.0});
  CHECK(clip_grad_norm(store, 1.0) == doctest::Approx(5.0));
  CHECK(store.at("a").grad[0] == doctest::Approx(0.6));
  CHECK(global_grad_norm(store) == doctest::Approx(1.0));
}

TEST_CASE("checkpoint encoding") {
  Rng rng(9);
  std::vector<NamedArray> blocks{
      {"listen.enc.layer0.W_i", random_array({3, 5}, rng, -1e300, 1e300)},
      {"scalar", Array::scalar(-0.0)},
      {"stats", random_array({2, 20}, rng)}};
  blocks[0].value[1] = 5e-324;
  const std::string bytes = encode_checkpoint(blocks);
  CHECK(bytes.substr(0, 5) == "NVSQ1");
  // version 1, three blocks, little-endian
  CHECK(bytes[5] == 1);
  CHECK(bytes[9] == 3);
  const auto decoded = decode_checkpoint(bytes);
  REQUIRE(decoded.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(decoded[i].name == blocks[i].name);
    CHECK(decoded[i].value.shape() == blocks[i].value.shape());
  }
  CHECK(encode_checkpoint(decoded) == bytes);
  CHECK(std::signbit(decoded[1].value[0]));

  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad_magic), DataError);
  std::string bad_version = bytes;
  bad_version[5] = 2;
  CHECK_THROWS_AS(decode_checkpoint(bad_version), DataError);
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), DataError);

  ParamStore store;
  store.add("stats", Array(Shape{2, 20}));
  load_blocks(store, decoded);
  CHECK(store.at("stats").value == blocks[2].value);
  store.add("missing", Array(Shape{1}));
  CHECK_THROWS_AS(load_blocks(store, decoded), DataError);
}
