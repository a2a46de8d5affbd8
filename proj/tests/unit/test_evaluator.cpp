#include "defectloc/evaluator.hpp"
#include "support.hpp"

#include <doctest.h>

#include <memory>
#include <random>
#include <set>

using namespace defectloc;

namespace {

struct Labels {
  std::unique_ptr<bool[]> data;
  std::size_t n;
  std::span<const bool> span() const { return {data.get(), n}; }
};

Labels labels_of(const std::vector<int>& v) {
  Labels l{std::make_unique<bool[]>(v.size()), v.size()};
  for (std::size_t i = 0; i < v.size(); ++i) l.data[i] = v[i] != 0;
  return l;
}

int brightness(const ColorImage& img, int y, int x) { return img.at(y, x, 0) + img.at(y, x, 1) + img.at(y, x, 2); }

}  // namespace

TEST_SUITE("evaluator") {
  TEST_CASE("identity reconstruction has an empty anomaly map") {
    const Image tile = testing::random_image(8, 8, 1);
    const auto m = anomaly_map(tile, tile, 0.01);
    CHECK((m.residual == 0.0).all());
    CHECK_FALSE(m.binary.any());
    CHECK(anomaly_map(tile, tile, 0.0).binary.all());
  }

  TEST_CASE("one pixel off by 0.5 at threshold 0.04") {
    const Image tile = Image::Constant(12, 12, 0.3);
    Image recon = tile;
    recon(4, 7) = 0.8;
    const auto m = anomaly_map(tile, recon, 0.04);
    CHECK(m.binary.count() == 1);
    CHECK(m.binary(4, 7));
    CHECK(m.residual(4, 7) == doctest::Approx(0.5));
    CHECK_THROWS_AS(anomaly_map(tile, Image::Zero(12, 11), 0.1), ValidationError);
  }

  TEST_CASE("threshold 0 flags exactly the non-zero residuals") {
    const Image tile = Image::Constant(6, 6, 0.5);
    Image recon = tile;
    recon(1, 1) = 0.6;
    CHECK(anomaly_map(tile, recon, 0.0).binary.count() == 36);
    CHECK(anomaly_map(tile, recon, 1e-12).binary.count() == 1);
  }

  TEST_CASE("binary map shrinks as the threshold grows") {
    const Image a = testing::random_image(10, 10, 1), b = testing::random_image(10, 10, 2);
    for (double t1 = 0.0; t1 < 1.0; t1 += 0.1) {
      const Mask lo = anomaly_map(a, b, t1).binary, hi = anomaly_map(a, b, t1 + 0.05).binary;
      CHECK((hi && !lo).count() == 0);
    }
  }

  TEST_CASE("network reconstruction feeds the anomaly map") {
    const ModelWeights w = build(NetworkConfig::scaled(16, {4, 8, 8, 8}), 2);
    const Image tile = testing::random_image(16, 16, 4);
    const auto m = anomaly_map(w, tile, 0.1);
    const Image recon = network_reconstructor(w, 4)(std::vector<Image>{tile}).front();
    CHECK((m.residual == (tile - recon).abs()).all());
  }

  TEST_CASE("six-pixel toy case") {
    const std::vector<double> s{0.9, 0.8, 0.4, 0.7, 0.3, 0.1};
    const auto l = labels_of({1, 1, 1, 0, 0, 0});
    const auto c = roc(s, l.span());
    CHECK(c.auc == doctest::Approx(8.0 / 9.0).epsilon(1e-15));
    CHECK(testing::concordant_pair_auc(s, l.span()) == doctest::Approx(8.0 / 9.0).epsilon(1e-15));
    CHECK(c.positives == 3);
    CHECK(c.negatives == 3);
    CHECK(std::isinf(c.points.front().threshold));
    CHECK(c.points.back().fpr == 1.0);
    CHECK(c.points.back().tpr == 1.0);
  }

  TEST_CASE("perfect and uninformative scores") {
    const std::vector<double> s{0.9, 0.8, 0.2, 0.1};
    const auto l = labels_of({1, 1, 0, 0});
    CHECK(roc(s, l.span()).auc == 1.0);
    const std::vector<double> flat(4, 0.3);
    const auto c = roc(flat, l.span());
    CHECK(c.auc == 0.5);
    std::set<std::pair<double, double>> distinct;
    for (const auto& p : c.points) distinct.insert({p.fpr, p.tpr});
    CHECK(distinct.size() == 2);
  }

  TEST_CASE("AUC equals the concordant-pair statistic on random instances") {
    std::mt19937_64 gen(11);
    for (int trial = 0; trial < 100; ++trial) {
      const int n = 2 + gen() % 99;
      std::vector<double> s(n);
      std::vector<int> raw(n);
      for (int i = 0; i < n; ++i) {
        s[i] = (gen() % 20) / 19.0;  // coarse values force ties
        raw[i] = gen() % 3 == 0;
      }
      raw[0] = 1;
      raw[1] = 0;
      const auto l = labels_of(raw);
      CHECK(std::abs(roc(s, l.span()).auc - testing::concordant_pair_auc(s, l.span())) < 1e-9);
    }
  }

  TEST_CASE("monotone transforms leave the curve area unchanged") {
    std::mt19937_64 gen(12);
    std::uniform_real_distribution<double> u(0, 1);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<double> s(60), t(60);
      std::vector<int> raw(60);
      for (int i = 0; i < 60; ++i) {
        raw[i] = u(gen) < 0.4;
        s[i] = u(gen) * 0.5 + 0.3 * raw[i];
        t[i] = std::exp(3 * s[i]) - 0.5;
      }
      raw[0] = 1;
      raw[1] = 0;
      const auto l = labels_of(raw);
      CHECK(roc(s, l.span()).auc == doctest::Approx(roc(t, l.span()).auc).epsilon(1e-12));
    }
  }

  TEST_CASE("a correctly ranked extra pixel never lowers the pooled AUC") {
    std::mt19937_64 gen(13);
    std::uniform_real_distribution<double> u(0, 1);
    for (int trial = 0; trial < 30; ++trial) {
      std::vector<double> s(40);
      std::vector<int> raw(40);
      for (int i = 0; i < 40; ++i) s[i] = u(gen), raw[i] = u(gen) < 0.5;
      raw[0] = 1;
      raw[1] = 0;
      const double before = roc(s, labels_of(raw).span()).auc;
      s.push_back(1.5);
      raw.push_back(1);
      CHECK(roc(s, labels_of(raw).span()).auc >= before);
      s.back() = -1.0;
      raw.back() = 0;
      CHECK(roc(s, labels_of(raw).span()).auc >= before);
    }
  }

  TEST_CASE("curve shape invariants") {
    const Image r = testing::random_image(20, 20, 5);
    const Mask m = testing::random_mask(20, 20, 0.3, 6);
    const auto c = roc(std::vector<Image>{r}, std::vector<Mask>{m});
    for (std::size_t i = 1; i < c.points.size(); ++i) {
      CHECK(c.points[i].threshold < c.points[i - 1].threshold);
      CHECK(c.points[i].fpr >= c.points[i - 1].fpr);
      CHECK(c.points[i].tpr >= c.points[i - 1].tpr);
    }
    CHECK((c.auc >= 0.0 && c.auc <= 1.0));
  }

  TEST_CASE("pooled versus per-image curves") {
    std::vector<Image> r{testing::random_image(6, 6, 1), testing::random_image(6, 6, 2), testing::random_image(6, 6, 3)};
    std::vector<Mask> m{testing::random_mask(6, 6, 0.5, 1), Mask::Constant(6, 6, false), testing::random_mask(6, 6, 0.5, 3)};
    CHECK(roc_per_image(r, m).size() == 2);
    CHECK(roc(r, m).positives == m[0].count() + m[2].count());
    CHECK_THROWS_AS(roc(std::vector<Image>{r[1]}, std::vector<Mask>{m[1]}), ValidationError);
  }

  TEST_CASE("threshold grid") {
    const std::vector<double> few{0.5, 0.123, 0.123, 2.0};
    const auto g = threshold_grid(few);
    CHECK(g.front() == 2.0);
    CHECK(g.back() == 0.0);
    CHECK(std::find(g.begin(), g.end(), 0.123) != g.end());
    for (std::size_t i = 1; i < g.size(); ++i) CHECK(g[i] < g[i - 1]);
    CHECK(g.size() == 256 + 3);  // 0.5 falls between two even steps

    std::vector<double> many(10000);
    for (int i = 0; i < 10000; ++i) many[i] = 0.3 + i * 1e-5;
    const auto h = threshold_grid(many, 256, 100);
    CHECK(h.size() <= 256 + 100 + 1);
    CHECK(std::find(h.begin(), h.end(), many.front()) != h.end());
    CHECK(std::find(h.begin(), h.end(), many.back()) != h.end());
  }

  TEST_CASE("operating threshold selection") {
    RocCurve c;
    c.points = {{INFINITY, 0, 0}, {0.5, 0.0, 0.2}, {0.3, 0.1, 0.35}, {0.2, 0.2, 0.45}, {0.1, 0.4, 1.0}, {0.0, 1.0, 1.0}};
    CHECK(select_threshold(c, 0.4) == 0.2);
    CHECK(select_threshold(c, 1.0) == 0.1);
    CHECK(select_threshold(c, 0.2) == 0.5);
    c.points = {{INFINITY, 0, 0}, {0.5, 0.0, 0.2}, {0.3, 0.5, 0.3}};
    try {
      select_threshold(c, 0.4);
      FAIL("expected ParameterError");
    } catch (const ParameterError& e) {
      CHECK(std::string(e.what()).find("0.3") != std::string::npos);
    }
  }

  TEST_CASE("heatmap rendering") {
    const Image tile = Image::Constant(10, 12, 0.4);
    const auto zero = render_heatmap_overlay(tile, Image::Zero(10, 12));
    for (int y = 0; y < 10; ++y)
      for (int x = 0; x < 12; ++x)
        for (int ch = 0; ch < 3; ++ch) CHECK(zero.heatmap.at(y, x, ch) == zero.heatmap.at(0, 0, ch));

    Image hot = Image::Zero(10, 12);
    hot(3, 5) = 0.2;
    const auto h = render_heatmap_overlay(tile, hot);
    int best = -1, by = -1, bx = -1;
    for (int y = 0; y < 10; ++y)
      for (int x = 0; x < 12; ++x)
        if (brightness(h.overlay, y, x) > best) best = brightness(h.overlay, y, x), by = y, bx = x;
    CHECK(by == 3);
    CHECK(bx == 5);

    const ColorImage strip = h.side_by_side();
    CHECK(strip.width == 36);
    CHECK(strip.height == 10);
    for (int ch = 0; ch < 3; ++ch) {
      CHECK(strip.at(3, 5 + 12, ch) == h.heatmap.at(3, 5, ch));
      CHECK(strip.at(3, 5 + 24, ch) == h.overlay.at(3, 5, ch));
    }
    // 75% heatmap over 50% tile.
    const int tile8 = static_cast<int>(std::lround(0.4 * 255));
    for (int ch = 0; ch < 3; ++ch)
      CHECK(std::abs(h.overlay.at(0, 0, ch) - (0.75 * h.heatmap.at(0, 0, ch) + 0.5 * tile8)) <= 1.0);

    testing::TempDir dir;
    save_color_image(dir / "h.png", strip);
    CHECK(std::filesystem::exists(dir / "h.png"));
  }
}
