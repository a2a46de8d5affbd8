#include "defectloc/model.hpp"
#include "support.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>

using namespace defectloc;

namespace {

Tensor random_batch(int n, int size, std::uint64_t seed) {
  std::vector<Image> imgs;
  for (int i = 0; i < n; ++i) imgs.push_back(testing::random_image(size, size, seed + i));
  return Tensor::from_images(imgs);
}

double weighted_sum(const Tensor& out, const Tensor& weights) {
  double s = 0.0;
  for (std::size_t i = 0; i < out.data.size(); ++i) s += out.data[i] * weights.data[i];
  return s;
}

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("standard layout reaches a 512 x 1 x 1 latent") {
    const auto geo = plan_encoder(NetworkConfig::standard());
    REQUIRE(geo.size() == 7);
    CHECK(geo.front().in_h == 289);
    CHECK(geo.back().out_channels == 512);
    CHECK(geo.back().out_h == 1);
    CHECK(geo.back().out_w == 1);
    for (std::size_t i = 1; i < geo.size(); ++i) CHECK(geo[i].in_h == geo[i - 1].out_h);
    // Each stage emits the fewest outputs that cover its input.
    for (const auto& g : geo) CHECK(g.out_h == std::max(1, (g.in_h - g.kernel + g.stride - 1) / g.stride + 1));
  }

  TEST_CASE("a stack ending at 2x2 is rejected") {
    try {
      plan_encoder(NetworkConfig::scaled(14, {4, 8}));
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("latent spatial dims 2×2") != std::string::npos);
    }
    NetworkConfig bad = NetworkConfig::scaled(16, {4, 4, 4, 4});
    bad.skip_stages = {3};
    CHECK_THROWS_AS(plan_encoder(bad), ConfigError);
  }

  TEST_CASE("build is deterministic under a seed") {
    const auto cfg = NetworkConfig::scaled(16, {4, 8, 8, 8});
    const auto a = build(cfg, 1), b = build(cfg, 1), c = build(cfg, 2);
    CHECK(a.same_values(b));
    CHECK_FALSE(a.same_values(c));
    CHECK(a.parameter_count() > 0);
  }

  TEST_CASE("output shape and range for any batch size") {
    const auto w = build(NetworkConfig::scaled(16, {4, 8, 8, 8}), 3);
    for (int n : {1, 2, 4}) {
      const Tensor out = forward(w, random_batch(n, 16, 10));
      CHECK(out.n == n);
      CHECK(out.c == 1);
      CHECK(out.h == 16);
      CHECK(out.w == 16);
      for (double v : out.data) CHECK((v > 0.0 && v < 1.0));
    }
    CHECK(forward(w, random_batch(2, 16, 1)) == forward(w, random_batch(2, 16, 1)));
    CHECK_THROWS_AS(forward(w, random_batch(2, 15, 1)), ValidationError);
  }

  TEST_CASE("odd input sizes invert exactly") {
    for (int size : {5, 9, 13, 17, 21, 31}) {
      // Shortest stack of 4/2 stages that reaches 1x1 for this size.
      std::vector<int> channels{3};
      for (;; channels.push_back(3)) {
        try {
          plan_encoder(NetworkConfig::scaled(size, channels, {}));
          break;
        } catch (const ConfigError&) {
          REQUIRE(channels.size() < 10);
        }
      }
      const auto w = build(NetworkConfig::scaled(size, channels, {0}), 1);
      const Tensor out = forward(w, random_batch(1, size, 2));
      CHECK(out.h == size);
      CHECK(out.w == size);
    }
  }

  TEST_CASE("backward matches central differences on a micro network") {
    ModelWeights w = build(NetworkConfig::scaled(8, {2, 3, 3}, {0, 1}), 5);
    const Tensor batch = random_batch(3, 8, 20);
    const Tensor probe = random_batch(3, 8, 40);

    Network net(w);
    net.forward(batch, Mode::Train);
    const auto grads = net.backward(probe);
    REQUIRE(grads.size() == w.tensors.size());

    const double h = 1e-6;
    double worst = 0.0;
    for (std::size_t t = 0; t < w.tensors.size(); ++t) {
      if (!w.tensors[t].trainable) continue;
      for (std::size_t i = 0; i < w.tensors[t].values.size(); ++i) {
        double& v = w.tensors[t].values[i];
        const double keep = v;
        ModelWeights probe_w = w;
        probe_w.tensors[t].values[i] = keep + h;
        const double up = weighted_sum(Network(probe_w).forward(batch, Mode::Train), probe);
        probe_w.tensors[t].values[i] = keep - h;
        const double down = weighted_sum(Network(probe_w).forward(batch, Mode::Train), probe);
        const double fd = (up - down) / (2 * h);
        const double err = std::abs(fd - grads[t][i]) / std::max(1e-4, std::abs(fd));
        worst = std::max(worst, err);
      }
    }
    CHECK(worst < 1e-3);
  }

  TEST_CASE("skip links are live paths") {
    const ModelWeights w = build(NetworkConfig::scaled(16, {4, 8, 8, 8}), 9);
    const Tensor batch = random_batch(2, 16, 3);
    for (int stage : {0, 1, 2}) {
      Network net(w);
      const Tensor base = net.forward(batch, Mode::Eval);
      net.set_skip_ablated(stage, true);
      CHECK_FALSE(net.forward(batch, Mode::Eval) == base);
    }
    Network net(w);
    CHECK_THROWS_AS(net.set_skip_ablated(3, true), ParameterError);
  }

  TEST_CASE("canonical config round trip") {
    NetworkConfig c = NetworkConfig::standard();
    c.leaky_slope = 0.1;
    CHECK(NetworkConfig::parse_canonical(c.canonical()) == c);
    CHECK(c.hash() != NetworkConfig::standard().hash());
  }

  TEST_CASE("save and load are bit-identical") {
    testing::TempDir dir;
    ModelWeights w = build(NetworkConfig::scaled(16, {4, 8, 8, 8}), 11);
    w.meta = {7, 0.125};
    // Give the running statistics non-default values.
    Network(w).forward(random_batch(4, 16, 5), Mode::Train);
    save(w, dir / "m.ckpt");
    const ModelWeights back = load(dir / "m.ckpt");
    CHECK(back.same_values(w));
    CHECK(back.meta.epoch == 7);
    CHECK(back.meta.val_loss == 0.125);
    const Tensor batch = random_batch(3, 16, 8);
    CHECK(forward(back, batch) == forward(w, batch));
  }

  TEST_CASE("truncated or foreign checkpoints are rejected") {
    testing::TempDir dir;
    const ModelWeights w = build(NetworkConfig::scaled(16, {4, 8, 8, 8}), 11);
    save(w, dir / "m.ckpt");
    const auto size = std::filesystem::file_size(dir / "m.ckpt");
    std::filesystem::copy_file(dir / "m.ckpt", dir / "cut.ckpt");
    std::filesystem::resize_file(dir / "cut.ckpt", size / 2);
    CHECK_THROWS_AS(load(dir / "cut.ckpt"), LoadError);
    std::ofstream(dir / "junk.ckpt") << "hello";
    CHECK_THROWS_AS(load(dir / "junk.ckpt"), LoadError);
    CHECK_THROWS_AS(load(dir / "none.ckpt"), LoadError);
    CHECK_THROWS_AS(load(dir / "m.ckpt", NetworkConfig::scaled(16, {4, 8, 8, 16})), CompatibilityError);
    CHECK_NOTHROW(load(dir / "m.ckpt", w.config));
  }

  TEST_CASE("checkpoint attributes and state survive") {
    testing::TempDir dir;
    Checkpoint c{build(NetworkConfig::scaled(8, {2, 3, 3}, {0, 1}), 1), {{"kind", "last"}, {"note", "a b\tc"}}, {}};
    c.state.push_back({"extra", {2, 2}, {1.0, -0.0, 1e-300, 3.5}, false});
    save_checkpoint(c, dir / "c.ckpt");
    const Checkpoint back = load_checkpoint(dir / "c.ckpt");
    CHECK(back.attributes == c.attributes);
    CHECK(back.state == c.state);
    CHECK(std::signbit(back.state[0].values[1]));
  }
}
