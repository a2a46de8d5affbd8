#include "defectloc/deskdata.hpp"

#include "defectloc/graphseg.hpp"
#include "defectloc/ingest.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace defectloc {

namespace {

Image smooth_noise(Extent size, double sigma, Rng& rng) {
  Image n(size.h, size.w);
  for (Eigen::Index i = 0; i < n.size(); ++i) n.data()[i] = rng.normal();
  Image s = gaussian_smooth(n, sigma);
  const double sd = std::sqrt((s - s.mean()).square().mean());
  return sd > 0 ? Image((s - s.mean()) / sd) : s;
}

void disc(Image& img, double cy, double cx, double r, double value, double rim_value) {
  const int y0 = std::max(0, static_cast<int>(cy - r - 3)), y1 = std::min<int>(img.rows() - 1, cy + r + 3);
  const int x0 = std::max(0, static_cast<int>(cx - r - 3)), x1 = std::min<int>(img.cols() - 1, cx + r + 3);
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      const double d = std::hypot(y - cy, x - cx);
      if (d <= r)
        img(y, x) = value;
      else if (d <= r + 2.0)
        img(y, x) = rim_value;
    }
  }
}

}  // namespace

Image make_board(Extent size, std::uint64_t seed) {
  Rng rng(seed);
  const double panel = rng.uniform(0.62, 0.74);
  const double background = rng.uniform(0.05, 0.12);
  const int margin = 6 + static_cast<int>(rng.index(10));
  const int rim = 8 + static_cast<int>(rng.index(6));

  Image img = Image::Constant(size.h, size.w, background);
  const Image grain = smooth_noise(size, 1.0, rng);
  const Image cloud = smooth_noise(size, 12.0, rng);
  const double tilt = rng.uniform(-0.04, 0.04);
  for (int y = margin; y < size.h - margin; ++y) {
    for (int x = margin; x < size.w - margin; ++x) {
      const int edge = std::min({y - margin, x - margin, size.h - margin - 1 - y, size.w - margin - 1 - x});
      double v = panel + 0.015 * grain(y, x) + 0.02 * cloud(y, x) + tilt * (static_cast<double>(x) / size.w - 0.5);
      if (edge < rim) v -= 0.22 * (1.0 - 0.5 * static_cast<double>(edge) / rim);
      img(y, x) = v;
    }
  }

  const int grooves = 1 + static_cast<int>(rng.index(2));
  for (int g = 0; g < grooves; ++g) {
    const bool horizontal = rng.bernoulli(0.5);
    const int width = 3 + static_cast<int>(rng.index(3));
    const int span = horizontal ? size.h : size.w;
    const int at = margin + rim + static_cast<int>(rng.index(static_cast<std::uint64_t>(span - 2 * (margin + rim) - width)));
    for (int o = 0; o < width; ++o) {
      const double depth = o == 0 || o == width - 1 ? 0.12 : 0.25;
      if (horizontal) {
        for (int x = margin; x < size.w - margin; ++x) img(at + o, x) -= depth;
      } else {
        for (int y = margin; y < size.h - margin; ++y) img(y, at + o) -= depth;
      }
    }
  }

  const int holes = 2 + static_cast<int>(rng.index(4));
  for (int k = 0; k < holes; ++k) {
    const double r = rng.uniform(5.0, 12.0);
    const double cy = rng.uniform(margin + rim + r, size.h - margin - rim - r);
    const double cx = rng.uniform(margin + rim + r, size.w - margin - rim - r);
    disc(img, cy, cx, r, rng.uniform(0.08, 0.18), panel - 0.12);
  }
  return img.cwiseMax(0.0).cwiseMin(1.0);
}

Image make_texture(Extent size, std::uint64_t seed) {
  // Axis-aligned layouts only: oblique edges blurred at the default
  // segmentation sigma chain into a single component. The bright shade stays
  // clear of the panel grey so an overlaid patch is visible on either tone.
  Rng rng(seed);
  Image img(size.h, size.w);
  const double lo = rng.uniform(0.0, 0.25), hi = rng.uniform(0.88, 1.0);
  auto shade = [&](bool bright) { return (bright ? hi : lo) + rng.uniform(-0.04, 0.04); };
  const int kind = static_cast<int>(rng.index(4));
  if (kind == 0) {
    // Mosaic of rectangles with random row heights and column widths.
    std::vector<int> row_of(size.h), col_of(size.w);
    for (int y = 0, r = 0; y < size.h; ++r)
      for (int n = 12 + static_cast<int>(rng.index(21)); n > 0 && y < size.h; --n) row_of[y++] = r;
    for (int x = 0, c = 0; x < size.w; ++c)
      for (int n = 12 + static_cast<int>(rng.index(21)); n > 0 && x < size.w; --n) col_of[x++] = c;
    const int cells_w = col_of.back() + 1;
    std::vector<double> val(static_cast<std::size_t>(row_of.back() + 1) * cells_w);
    for (std::size_t i = 0; i < val.size(); ++i) val[i] = shade((i / cells_w + i % cells_w) % 2 == 0);
    for (int y = 0; y < size.h; ++y)
      for (int x = 0; x < size.w; ++x) img(y, x) = val[static_cast<std::size_t>(row_of[y]) * cells_w + col_of[x]];
  } else if (kind == 1) {
    // Bands of random width, horizontal or vertical.
    const bool horizontal = rng.bernoulli(0.5);
    const int span = horizontal ? size.h : size.w;
    std::vector<double> band(span);
    bool bright = rng.bernoulli(0.5);
    for (int i = 0; i < span; bright = !bright) {
      const double v = shade(bright);
      for (int n = 12 + static_cast<int>(rng.index(19)); n > 0 && i < span; --n) band[i++] = v;
    }
    for (int y = 0; y < size.h; ++y)
      for (int x = 0; x < size.w; ++x) img(y, x) = band[horizontal ? y : x];
  } else if (kind == 2) {
    const int cell = 14 + static_cast<int>(rng.index(16));
    for (int y = 0; y < size.h; ++y)
      for (int x = 0; x < size.w; ++x) img(y, x) = ((y / cell + x / cell) % 2) ? hi : lo;
  } else {
    // Running-bond bricks, every other row shifted by half a brick.
    const int course = 14 + static_cast<int>(rng.index(11));
    const int brick = 24 + static_cast<int>(rng.index(25));
    const int courses = (size.h + course - 1) / course, per_row = size.w / brick + 2;
    std::vector<double> val(static_cast<std::size_t>(courses) * per_row);
    for (std::size_t i = 0; i < val.size(); ++i) val[i] = shade(rng.bernoulli(0.5));
    for (int y = 0; y < size.h; ++y) {
      const int r = y / course;
      const int shift = r % 2 ? brick / 2 : 0;
      for (int x = 0; x < size.w; ++x) img(y, x) = val[static_cast<std::size_t>(r) * per_row + (x + shift) / brick];
    }
  }
  // Fine surface pattern inside the cells, far below the segmentation blur
  // scale, so harvested patches are textured rather than flat like a hole.
  Image fine(size.h, size.w);
  if (rng.bernoulli(0.5)) {
    const double period = rng.uniform(3.0, 6.0), angle = rng.uniform(0.0, M_PI), phase = rng.uniform(0.0, 2 * M_PI);
    const double fy = std::sin(angle) * 2 * M_PI / period, fx = std::cos(angle) * 2 * M_PI / period;
    for (int y = 0; y < size.h; ++y)
      for (int x = 0; x < size.w; ++x) fine(y, x) = std::sin(fy * y + fx * x + phase);
  } else {
    fine = smooth_noise(size, 0.7, rng);
  }
  const Image grain = smooth_noise(size, 0.8, rng);
  return (img + 0.12 * fine + 0.03 * grain).cwiseMax(0.0).cwiseMin(1.0);
}

PipelineConfig desk_config(const std::filesystem::path& root, const std::filesystem::path& work_dir) {
  PipelineConfig c;
  c.paths.board_dir = (root / "boards").string();
  c.paths.texture_dir = (root / "textures").string();
  c.paths.work_dir = work_dir.string();
  c.tiling.window = {96, 96};
  c.tiling.stride = {48, 48};
  c.balance.extractor = "projection";
  c.model.channels = {16, 32, 64, 64, 128, 128};
  c.train.batch_size = 16;
  c.train.max_epochs = 30;
  return c;
}

void write_desk_corpus(const std::filesystem::path& root, const DeskCorpusOptions& options) {
  namespace fs = std::filesystem;
  fs::create_directories(root / "boards");
  fs::create_directories(root / "textures");
  char name[64];
  for (int i = 0; i < options.boards; ++i) {
    std::snprintf(name, sizeof name, "board_%03d.png", i);
    save_image(root / "boards" / name, make_board(options.board, derive_seed(options.seed, {1, std::uint64_t(i)})));
  }
  for (int i = 0; i < options.textures; ++i) {
    std::snprintf(name, sizeof name, "texture_%03d.png", i);
    save_image(root / "textures" / name,
               make_texture(options.texture, derive_seed(options.seed, {2, std::uint64_t(i)})));
  }
  std::ofstream ini(root / "desk.ini");
  ini << render_config(desk_config(root, root / "work"));
}

}  // namespace defectloc
