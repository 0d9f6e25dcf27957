#include <catch2/catch_amalgamated.hpp>

#include <fstream>

#include "opgfpad/netcore.hpp"

#include "helpers.hpp"

using namespace opgfpad;
using namespace opgfpad::netcore;

namespace {

using DT = Tensor<double>;
using DV = Var<double>;

DT rnd(std::vector<std::int64_t> shape, SeededRng& rng, double scale = 1.0) {
  DT t(std::move(shape));
  for (auto& v : t.data) v = rng.normal(0.0, scale);
  return t;
}

// Central-difference check of d loss / d inputs[k] where loss = sum(f(...) * R)
// with a fixed random projection R. Checks a sample of coordinates.
void check_gradients(const std::function<DV(const std::vector<DV>&)>& f, std::vector<DT> inputs,
                     double rel_tol = 1e-4, int coords_per_input = 6, std::uint64_t seed = 77) {
  SeededRng rng(seed);
  auto make_vars = [&](const std::vector<DT>& ts) {
    std::vector<DV> vars;
    for (const auto& t : ts) vars.push_back(DV::leaf(t));
    return vars;
  };
  std::vector<DV> vars = make_vars(inputs);
  DV out = f(vars);
  DT proj = rnd(out.value().shape, rng);
  auto loss_of = [&](const std::vector<DT>& ts) {
    std::vector<DV> vs = make_vars(ts);
    DV o = f(vs);
    double loss = 0;
    for (std::size_t i = 0; i < o.value().data.size(); ++i)
      loss += o.value().data[i] * proj.data[i];
    return loss;
  };
  DV loss = mul(out, DV::constant(proj));
  auto grads = backward(sum_all(loss), vars);

  for (std::size_t k = 0; k < inputs.size(); ++k) {
    DT g = grads.tensor(vars[k]);
    for (int c = 0; c < coords_per_input; ++c) {
      auto j = static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(inputs[k].data.size()) - 1));
      const double h = 1e-5;
      double orig = inputs[k].data[j];
      inputs[k].data[j] = orig + h;
      double lp = loss_of(inputs);
      inputs[k].data[j] = orig - h;
      double lm = loss_of(inputs);
      inputs[k].data[j] = orig;
      double fd = (lp - lm) / (2 * h);
      double denom = std::max({1e-6, std::abs(fd), std::abs(g.data[j])});
      INFO("input " << k << " coord " << j << " fd=" << fd << " ad=" << g.data[j]);
      REQUIRE(std::abs(fd - g.data[j]) / denom < rel_tol);
    }
  }
}

}  // namespace

TEST_CASE("identity dense layer reproduces its input") {
  Network net;
  net.input_shape = {4};
  net.chain({.kind = LayerKind::dense, .name = "d", .channels = 4});
  ModelParams<float> p;
  Tensor<float> w({4, 4});
  for (int i = 0; i < 4; ++i) w.data[static_cast<std::size_t>(i * 4 + i)] = 1.0f;
  p.values.emplace("d.w", w);
  p.values.emplace("d.b", Tensor<float>({4}));

  Tensor<float> x({3, 4});
  SeededRng rng(1);
  for (auto& v : x.data) v = static_cast<float>(rng.normal());
  auto bp = bind_const(p);
  auto y = forward(net, bp, p, Var<float>::constant(x), false);
  CHECK(y.value().data == x.data);
}

TEST_CASE("shape inference tracks dense-block concatenation bookkeeping") {
  // input c channels, k growth-g layers appended by concat
  const int c = 16, g = 8, k = 5;
  Network net;
  net.input_shape = {c, 10, 10};
  int features = net.add({.kind = LayerKind::conv2d, .name = "c0", .inputs = {-1},
                          .channels = c, .kernel = 3, .stride = 1, .pad = 1});
  for (int i = 0; i < k; ++i) {
    int conv = net.add({.kind = LayerKind::conv2d, .name = "g" + std::to_string(i),
                        .inputs = {features}, .channels = g, .kernel = 3, .stride = 1, .pad = 1});
    features = net.add({.kind = LayerKind::concat, .name = "cat" + std::to_string(i),
                        .inputs = {features, conv}});
  }
  auto shapes = infer_shapes(net);
  CHECK(shapes.back()[0] == c + k * g);

  // shape mismatches are reported with the layer name
  Network bad;
  bad.input_shape = {3, 8, 8};
  bad.add({.kind = LayerKind::avg_pool, .name = "toolarge", .inputs = {-1}, .kernel = 16,
           .stride = 2});
  try {
    infer_shapes(bad);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("toolarge") != std::string::npos);
  }
}

TEST_CASE("dropout with rate zero equals the plain forward in training mode") {
  RunConfig cfg;
  Network net;
  net.input_shape = {6};
  net.chain({.kind = LayerKind::dense, .name = "d", .channels = 5});
  net.chain({.kind = LayerKind::dropout, .name = "drop", .rate = 0.0});
  SeededRng init(3);
  auto params = init_params<float>(net, init);

  Tensor<float> x({4, 6});
  SeededRng rng(9);
  for (auto& v : x.data) v = static_cast<float>(rng.normal());
  auto bp = bind_const(params);
  SeededRng drop_rng(11);
  auto with = forward(net, bp, params, Var<float>::constant(x), true, &drop_rng);
  auto without = forward(net, bp, params, Var<float>::constant(x), false);
  CHECK(with.value().data == without.value().data);
}

TEST_CASE("batch norm in inference mode is a fixed per-sample affine map") {
  Network net;
  net.input_shape = {2, 3, 3};
  net.chain({.kind = LayerKind::batch_norm, .name = "bn"});
  SeededRng init(4);
  auto params = init_params<float>(net, init);
  params.values.at("bn.running_mean").data = {0.5f, -1.0f};
  params.values.at("bn.running_var").data = {2.0f, 0.5f};
  params.values.at("bn.gamma").data = {1.5f, 0.8f};
  params.values.at("bn.beta").data = {0.1f, -0.2f};

  SeededRng rng(8);
  Tensor<float> sample({1, 2, 3, 3});
  for (auto& v : sample.data) v = static_cast<float>(rng.normal());

  auto run_with_companion = [&](float fill) {
    Tensor<float> batch({2, 2, 3, 3}, fill);
    std::copy(sample.data.begin(), sample.data.end(), batch.data.begin());
    auto bp = bind_const(params);
    auto y = forward(net, bp, params, Var<float>::constant(batch), false);
    return std::vector<float>(y.value().data.begin(), y.value().data.begin() + 18);
  };
  CHECK(run_with_companion(0.0f) == run_with_companion(42.0f));
}

TEST_CASE("adam: zero gradient with zero decay leaves parameters unchanged") {
  ModelParams<float> p;
  p.values.emplace("w", Tensor<float>({3}, 1.5f));
  auto st = OptimizerState<float>::for_params(p, 1e-3, 0.0);
  std::map<std::string, Tensor<float>> g;
  g.emplace("w", Tensor<float>({3}));
  adam_step(st, p, g);
  for (float v : p.values.at("w").data) CHECK(v == 1.5f);
  CHECK(st.step == 1);
}

TEST_CASE("adam first step moves a scalar by about lr against the gradient sign") {
  ModelParams<float> p;
  p.values.emplace("w", Tensor<float>({1}, 1.0f));
  auto st = OptimizerState<float>::for_params(p, 1e-4, 0.0);
  std::map<std::string, Tensor<float>> g;
  g.emplace("w", Tensor<float>({1}, 1.0f));
  adam_step(st, p, g);
  double moved = 1.0 - p.values.at("w").data[0];
  CHECK(moved == Catch::Approx(1e-4).epsilon(1e-3));
}

TEST_CASE("adam applies decoupled weight decay") {
  ModelParams<float> p;
  p.values.emplace("w", Tensor<float>({1}, 2.0f));
  auto st = OptimizerState<float>::for_params(p, 0.01, 0.1);
  std::map<std::string, Tensor<float>> g;
  g.emplace("w", Tensor<float>({1}));  // zero gradient: only decay acts
  adam_step(st, p, g);
  CHECK(p.values.at("w").data[0] == Catch::Approx(2.0 - 0.01 * 0.1 * 2.0));
}

TEST_CASE("adam is deterministic across identical models") {
  auto run = [] {
    ModelParams<float> p;
    p.values.emplace("w", Tensor<float>({4}, 0.7f));
    auto st = OptimizerState<float>::for_params(p, 1e-3, 1e-2);
    std::map<std::string, Tensor<float>> g;
    Tensor<float> gt({4});
    for (std::size_t i = 0; i < 4; ++i) gt.data[i] = 0.1f * static_cast<float>(i + 1);
    g.emplace("w", gt);
    for (int i = 0; i < 10; ++i) adam_step(st, p, g);
    return p.values.at("w").data;
  };
  CHECK(run() == run());
}

TEST_CASE("non-finite gradients abort the step with a diagnostic") {
  ModelParams<float> p;
  p.values.emplace("w", Tensor<float>({2}, 1.0f));
  auto st = OptimizerState<float>::for_params(p, 1e-3, 0.0);
  std::map<std::string, Tensor<float>> g;
  Tensor<float> gt({2});
  gt.data[1] = std::numeric_limits<float>::quiet_NaN();
  g.emplace("w", gt);
  REQUIRE_THROWS_AS(adam_step(st, p, g), NumericError);
  for (float v : p.values.at("w").data) CHECK(v == 1.0f);  // untouched
}

TEST_CASE("checkpoints round-trip bit-identically and gate on config") {
  testutil::TempDir tmp("ckpt");
  SeededRng rng(12);
  ModelParams<float> p;
  Tensor<float> w({3, 4});
  for (auto& v : w.data) v = static_cast<float>(rng.normal());
  p.values.emplace("layer.w", w);
  p.values.emplace("layer.running_mean", Tensor<float>({4}, 0.25f));
  p.buffers.insert("layer.running_mean");

  RunConfig cfg;
  cfg.seed = 5;
  auto path = tmp.path() / "model.ckpt";
  save_checkpoint(p, cfg, {{"role", "test"}, {"section", "3"}}, path);

  auto ck = load_checkpoint(path, &cfg);
  CHECK(ck.params.values.at("layer.w").data == w.data);
  CHECK(ck.params.is_buffer("layer.running_mean"));
  CHECK(ck.tags.at("section") == "3");
  CHECK(ck.config.seed == 5);

  // different seed is still compatible
  RunConfig reseeded = cfg;
  reseeded.seed = 99;
  REQUIRE_NOTHROW(load_checkpoint(path, &reseeded));

  // mismatched patch_size refuses unless forced
  RunConfig other = cfg;
  other.patch_size = 64;
  REQUIRE_THROWS_AS(load_checkpoint(path, &other), CompatibilityError);
  REQUIRE_NOTHROW(load_checkpoint(path, &other, /*force=*/true));
}

TEST_CASE("corrupt checkpoints fail integrity, not parsing garbage") {
  testutil::TempDir tmp("ckpt_bad");
  ModelParams<float> p;
  p.values.emplace("w", Tensor<float>({8}, 1.0f));
  RunConfig cfg;
  auto path = tmp.path() / "m.ckpt";
  save_checkpoint(p, cfg, {}, path);

  auto bytes = [&] {
    std::ifstream in(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  }();
  bytes[bytes.size() / 2] ^= 0x5a;
  std::ofstream(path, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  REQUIRE_THROWS_AS(load_checkpoint(path), IntegrityError);

  std::ofstream(tmp.path() / "tiny.ckpt", std::ios::binary) << "xx";
  REQUIRE_THROWS_AS(load_checkpoint(tmp.path() / "tiny.ckpt"), IntegrityError);
}

TEST_CASE("forward is bit-reproducible for fixed seed and params") {
  RunConfig cfg;
  cfg.patch_size = 32;
  Network net;
  net.input_shape = {1, 16, 16};
  net.chain({.kind = LayerKind::conv2d, .name = "c1", .channels = 8, .kernel = 3, .stride = 2,
             .pad = 1});
  net.chain({.kind = LayerKind::batch_norm, .name = "bn"});
  net.chain({.kind = LayerKind::relu, .name = "r"});
  net.chain({.kind = LayerKind::dense, .name = "d", .channels = 3});

  auto run = [&] {
    SeededRng init(21);
    auto params = init_params<float>(net, init);
    SeededRng rng(22);
    Tensor<float> x({2, 1, 16, 16});
    for (auto& v : x.data) v = static_cast<float>(rng.normal());
    auto bp = bind_const(params);
    return forward(net, bp, params, Var<float>::constant(x), false).value().data;
  };
  CHECK(run() == run());
}

// ---------------------------------------------------------------------------
// Analytic gradients vs central differences (float64), rel. tol. 1e-4.

TEST_CASE("gradient check: conv2d (input, weights, bias)") {
  SeededRng rng(100);
  DT x = rnd({2, 3, 8, 8}, rng), w = rnd({5, 3, 3, 3}, rng), b = rnd({5}, rng);
  check_gradients(
      [](const std::vector<DV>& v) {
        return add_channel(conv2d_op(v[0], v[1], 2, 1), v[2]);
      },
      {x, w, b});
}

TEST_CASE("gradient check: transposed conv") {
  SeededRng rng(101);
  DT x = rnd({2, 4, 5, 5}, rng), w = rnd({4, 3, 4, 4}, rng);
  check_gradients(
      [](const std::vector<DV>& v) {
        return conv_input_grad(v[0], v[1], 10, 10, 2, 1);
      },
      {x, w});
}

TEST_CASE("gradient check: dense") {
  SeededRng rng(102);
  DT x = rnd({4, 7}, rng), w = rnd({7, 3}, rng), b = rnd({3}, rng);
  check_gradients(
      [](const std::vector<DV>& v) {
        DV y = matmul(v[0], v[1]);
        auto n = y.value().dim(0);
        auto u = y.value().dim(1);
        return reshape(add_channel(reshape(y, {n, u, 1, 1}), v[2]), {n, u});
      },
      {x, w, b});
}

TEST_CASE("gradient check: batch norm in training mode") {
  SeededRng rng(103);
  DT x = rnd({3, 4, 5, 5}, rng), gamma = rnd({4}, rng, 0.5), beta = rnd({4}, rng, 0.5);
  for (auto& v : gamma.data) v += 1.0;
  check_gradients(
      [](const std::vector<DV>& v) {
        const auto& s = v[0].value().shape;
        double count = static_cast<double>(s[0] * s[2] * s[3]);
        DV mean = scale(sum_channel(v[0]), 1.0 / count);
        DV centered = sub(v[0], broadcast_channel(mean, s));
        DV var = scale(sum_channel(mul(centered, centered)), 1.0 / count);
        DV inv = reciprocal(sqrt_v(add_scalar(var, 1e-5)));
        return add_channel(mul_channel(mul_channel(centered, inv), v[1]), v[2]);
      },
      {x, gamma, beta});
}

TEST_CASE("gradient check: activations") {
  SeededRng rng(104);
  DT x = rnd({3, 10}, rng);
  for (auto& v : x.data)
    if (std::abs(v) < 0.05) v += 0.1;  // keep away from the relu kink
  check_gradients([](const std::vector<DV>& v) { return relu(v[0]); }, {x});
  check_gradients([](const std::vector<DV>& v) { return leaky_relu(v[0], 0.2); }, {x});
  check_gradients([](const std::vector<DV>& v) { return tanh_v(v[0]); }, {x});
  check_gradients([](const std::vector<DV>& v) { return sigmoid_v(v[0]); }, {x});
}

TEST_CASE("gradient check: pooling and concatenation") {
  SeededRng rng(105);
  DT x = rnd({2, 3, 6, 6}, rng);
  check_gradients([](const std::vector<DV>& v) { return avg_pool_op(v[0], 2, 2); }, {x});
  check_gradients([](const std::vector<DV>& v) { return global_avg_pool_op(v[0]); }, {x});

  DT a = rnd({2, 2, 4, 4}, rng), b2 = rnd({2, 3, 4, 4}, rng);
  check_gradients(
      [](const std::vector<DV>& v) {
        return concat_channels(std::vector<DV>{v[0], v[1]});
      },
      {a, b2});
}

TEST_CASE("gradient check: dropout mask (fixed rng)") {
  SeededRng rng(106);
  DT x = rnd({4, 6}, rng);
  // The mask must be identical across evaluations for finite differences;
  // regenerate it from a fixed seed inside the function.
  check_gradients(
      [](const std::vector<DV>& v) {
        SeededRng mask_rng(42);
        Tensor<double> mask(v[0].value().shape);
        for (auto& m : mask.data) m = mask_rng.uniform() < 0.3 ? 0.0 : 1.0 / 0.7;
        return mul_const(v[0], std::move(mask));
      },
      {x});
}

TEST_CASE("gradient check: full small network stack") {
  SeededRng rng(107);
  DT x = rnd({2, 1, 8, 8}, rng), w1 = rnd({4, 1, 3, 3}, rng), b1 = rnd({4}, rng),
     w2 = rnd({64, 2}, rng), b2 = rnd({2}, rng);
  check_gradients(
      [](const std::vector<DV>& v) {
        DV h = leaky_relu(add_channel(conv2d_op(v[0], v[1], 2, 1), v[2]), 0.2);
        auto n = h.value().dim(0);
        DV flat = reshape(h, {n, h.value().numel() / n});
        DV y = matmul(flat, v[3]);
        return reshape(add_channel(reshape(y, {n, 2, 1, 1}), v[4]), {n, 2});
      },
      {x, w1, b1, w2, b2});
}
