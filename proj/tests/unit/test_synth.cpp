#include "defectloc/synth.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>

using namespace defectloc;

namespace {

AugmentConfig flips(double ph, double pv) {
  AugmentConfig c = AugmentConfig::none();
  c.p_hflip = ph;
  c.p_vflip = pv;
  return c;
}

TexturePool small_pool() {
  TexturePool pool({1.0, 0.5, 20});
  for (std::uint64_t s = 0; s < 3; ++s) pool.add(testing::structured_image(64, 64, s), "t" + std::to_string(s));
  return pool;
}

}  // namespace

TEST_SUITE("synth") {
  TEST_CASE("neutral augmentation is the identity") {
    const Image t = testing::random_image(9, 7, 1);
    for (std::uint64_t s = 0; s < 10; ++s) CHECK((augment(t, AugmentConfig::none(), s) == t).all());
  }

  TEST_CASE("both flips on a 2x2 tile") {
    Image t(2, 2);
    t << 0.1, 0.2, 0.3, 0.4;
    Image expect(2, 2);
    expect << 0.4, 0.3, 0.2, 0.1;
    CHECK((augment(t, flips(1, 1), 5) == expect).all());
    Image h(2, 2);
    h << 0.2, 0.1, 0.4, 0.3;
    CHECK((augment(t, flips(1, 0), 5) == h).all());
  }

  TEST_CASE("brightness saturates at 1") {
    AugmentConfig c = AugmentConfig::none();
    c.brightness_lo = c.brightness_hi = 1.5;
    CHECK((augment(Image::Constant(4, 4, 0.9), c, 0) == 1.0).all());
    c.brightness_lo = c.brightness_hi = 0.5;
    CHECK((augment(Image::Constant(4, 4, 0.9), c, 0) - 0.45).abs().maxCoeff() < 1e-15);
  }

  TEST_CASE("contrast pivots on the tile mean") {
    AugmentConfig c = AugmentConfig::none();
    c.contrast_lo = c.contrast_hi = 1.2;
    Image t(1, 2);
    t << 0.4, 0.6;
    const Image out = augment(t, c, 0);
    CHECK(out(0, 0) == doctest::Approx(0.38));
    CHECK(out(0, 1) == doctest::Approx(0.62));
  }

  TEST_CASE("default augmentation stays in range and flip rate is binomial") {
    const Image t = testing::random_image(6, 5, 2);
    const Image flipped = t.rowwise().reverse();
    AugmentConfig c = flips(0.3, 0.0);
    int hits = 0;
    const int n = 2000;
    for (int s = 0; s < n; ++s) hits += (augment(t, c, s) == flipped).all();
    // 4.5 standard deviations.
    CHECK(std::abs(hits - 0.3 * n) < 4.5 * std::sqrt(n * 0.3 * 0.7));

    for (int s = 0; s < 200; ++s) {
      const Image a = augment(t, AugmentConfig{}, s);
      CHECK(a.minCoeff() >= 0.0);
      CHECK(a.maxCoeff() <= 1.0);
    }
  }

  TEST_CASE("overlay blending") {
    const Image clean = Image::Constant(5, 5, 0.2);
    const Image patch = Image::Constant(2, 3, 0.8);
    Mask m = Mask::Constant(2, 3, true);
    m(0, 0) = false;

    auto zero = overlay(clean, patch, m, {1, 2}, 0.0);
    CHECK((zero.input == clean).all());
    CHECK(zero.mask.count() == 5);
    CHECK_FALSE(zero.mask(1, 2));
    CHECK(zero.mask(1, 3));

    auto full = overlay(clean, patch, m, {1, 2}, 1.0);
    CHECK(full.input(2, 2) == 0.8);
    CHECK(full.input(1, 2) == 0.2);

    auto half = overlay(clean, patch, m, {3, 0}, 0.5);
    CHECK(half.input(4, 1) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK((half.mask.topRows(3) == false).all());

    CHECK_THROWS_AS(overlay(clean, patch, m, {4, 0}, 0.5), ParameterError);
    CHECK_THROWS_AS(overlay(clean, patch, m, {0, -1}, 0.5), ParameterError);
    CHECK_THROWS_AS(overlay(clean, patch, m, {0, 0}, 1.5), ParameterError);
  }

  TEST_CASE("oversized segments are centre-cropped") {
    HarvestedSegment big;
    big.mask = Mask::Constant(10, 12, true);
    big.patch = testing::random_image(10, 12, 1);
    const auto fit = fit_segment(big, {4, 6});
    CHECK(fit.mask.rows() == 4);
    CHECK(fit.mask.cols() == 6);
    CHECK((fit.patch == big.patch.block(3, 3, 4, 6)).all());

    HarvestedSegment ring;
    ring.mask = Mask::Constant(9, 9, false);
    ring.mask(0, 8) = true;
    ring.patch = Image::Zero(9, 9);
    const auto moved = fit_segment(ring, {3, 3});
    CHECK(moved.mask.count() == 1);

    const auto same = fit_segment(ring, {20, 20});
    CHECK(same.mask.rows() == 9);
  }

  TEST_CASE("samples: forced branches, determinism, pixels outside the mask") {
    const TexturePool pool = small_pool();
    const Image tile = testing::random_image(32, 32, 9);
    AugmentConfig never;
    never.anomaly_probability = 0.0;
    AugmentConfig always;
    always.anomaly_probability = 1.0;

    for (std::uint64_t s = 0; s < 30; ++s) {
      const auto clean = make_sample(tile, pool, never, s);
      CHECK_FALSE(clean.has_anomaly);
      CHECK_FALSE(clean.mask.any());
      CHECK((clean.input == augment(tile, never, derive_seed(s, {0}))).all());

      const auto a = make_sample(tile, pool, always, s);
      const auto b = make_sample(tile, pool, always, s);
      CHECK(a.has_anomaly);
      CHECK(a.mask.any());
      CHECK((a.input == b.input).all());
      CHECK((a.mask == b.mask).all());
      CHECK(a.alpha == b.alpha);
      CHECK((a.alpha >= 0.3 && a.alpha <= 1.0));
      CHECK(a.input.rows() == 32);
      CHECK(a.mask.cols() == 32);
      CHECK(((!a.mask).select(a.input, 0.0) == (!a.mask).select(a.clean, 0.0)).all());
      CHECK(a.input.minCoeff() >= 0.0);
      CHECK(a.input.maxCoeff() <= 1.0);
    }
  }

  TEST_CASE("masked pixels are the alpha blend of clean and texture") {
    TexturePool pool({1.0, 0.0, 10});
    pool.add(Image::Constant(16, 16, 0.9));
    AugmentConfig c = AugmentConfig::none();
    c.anomaly_probability = 1.0;
    const Image tile = Image::Constant(24, 24, 0.1);
    const auto s = make_sample(tile, pool, c, 4);
    CHECK(s.mask.count() == 256);
    const double expect = (1 - s.alpha) * 0.1 + s.alpha * 0.9;
    CHECK((s.mask.select(s.input, expect) - expect).abs().maxCoeff() < 1e-12);
  }

  TEST_CASE("pool draws match harvest_segment") {
    const TexturePool pool = small_pool();
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto d = pool.draw(seed);
      bool found = false;
      for (std::size_t i = 0; i < pool.size(); ++i) {
        const auto& e = pool.entry(i);
        const auto h = harvest_segment(e.segments, e.source, derive_seed(seed, {1}));
        if (h.label == d.label && h.mask.rows() == d.mask.rows() && h.mask.cols() == d.mask.cols() &&
            (h.mask == d.mask).all() && (h.patch == d.patch).all())
          found = true;
      }
      CHECK(found);
    }
    CHECK_THROWS_AS(TexturePool().draw(1), ParameterError);
  }

  TEST_CASE("config validation") {
    AugmentConfig c;
    c.p_hflip = 1.5;
    CHECK_THROWS_AS(c.validate(), ParameterError);
    c = {};
    c.alpha_lo = 0.8;
    c.alpha_hi = 0.2;
    CHECK_THROWS_AS(c.validate(), ParameterError);
    c = {};
    c.alpha_hi = 1.2;
    CHECK_THROWS_AS(c.validate(), ParameterError);
  }
}
