#include "defectloc/tiler.hpp"

#include <algorithm>
#include <fstream>
#include <limits>

namespace fs = std::filesystem;

namespace defectloc {

namespace {

struct AxisPlan {
  int count;
  int pad;
};

AxisPlan plan_axis(int length, int window, int stride, const char* axis) {
  if (length < 1 || window < 1 || stride < 1)
    throw ParameterError(std::string("tile grid ") + axis + ": image, window and stride must all be >= 1");
  int count = 1;
  if (length > window) count = (length - window + stride - 1) / stride + 1;
  const int pad = (count - 1) * stride + window - length;
  if (pad >= stride && length < window)
    throw ParameterError(std::string("tile grid ") + axis + ": window " + std::to_string(window) +
                         " exceeds image " + std::to_string(length) + " by more than the stride");
  return {count, std::max(pad, 0)};
}

}  // namespace

TileGrid plan_grid(Extent image, Extent window, Extent stride) {
  const AxisPlan rows = plan_axis(image.h, window.h, stride.h, "height");
  const AxisPlan cols = plan_axis(image.w, window.w, stride.w, "width");
  return TileGrid{image, window, stride, rows.count, cols.count, {rows.pad, cols.pad}};
}

Tile extract_tile(const ImageRecord& image, const TileGrid& grid, int row, int col) {
  const Position o = grid.origin(row, col);
  Tile t{image.id, row, col, o, Image::Zero(grid.window.h, grid.window.w)};
  const int h = std::min(grid.window.h, image.height() - o.y);
  const int w = std::min(grid.window.w, image.width() - o.x);
  if (h > 0 && w > 0) t.pixels.topLeftCorner(h, w) = image.pixels.block(o.y, o.x, h, w);
  return t;
}

std::vector<Tile> extract_tiles(const ImageRecord& image, const TileGrid& grid) {
  if (!(image.extent() == grid.image))
    throw ValidationError("tile grid planned for " + std::to_string(grid.image.h) + "x" +
                          std::to_string(grid.image.w) + " but image '" + image.id + "' is " +
                          std::to_string(image.height()) + "x" + std::to_string(image.width()));
  std::vector<Tile> tiles;
  tiles.reserve(static_cast<std::size_t>(grid.count()));
  for (int r = 0; r < grid.rows; ++r)
    for (int c = 0; c < grid.cols; ++c) tiles.push_back(extract_tile(image, grid, r, c));
  return tiles;
}

Image stitch_map(const std::vector<TileValues>& tiles, Extent image, Reducer reducer) {
  if (tiles.empty()) throw ParameterError("stitch_map: empty tile list");
  Image acc = reducer == Reducer::Mean ? Image::Zero(image.h, image.w)
                                       : Image::Constant(image.h, image.w, -std::numeric_limits<double>::infinity());
  Eigen::ArrayXXi count = Eigen::ArrayXXi::Zero(image.h, image.w);
  for (const auto& t : tiles) {
    const Position o = t.origin;
    if (o.y < 0 || o.x < 0 || o.y >= image.h || o.x >= image.w)
      throw ParameterError("stitch_map: tile origin outside image");
    const int h = std::min<int>(static_cast<int>(t.values.rows()), image.h - o.y);
    const int w = std::min<int>(static_cast<int>(t.values.cols()), image.w - o.x);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double& dst = acc(o.y + y, o.x + x);
        const double v = t.values(y, x);
        dst = reducer == Reducer::Mean ? dst + v : std::max(dst, v);
        ++count(o.y + y, o.x + x);
      }
    }
  }
  for (int y = 0; y < image.h; ++y) {
    for (int x = 0; x < image.w; ++x) {
      if (count(y, x) == 0)
        acc(y, x) = 0.0;
      else if (reducer == Reducer::Mean)
        acc(y, x) /= count(y, x);
    }
  }
  return acc;
}

std::string tile_name(const std::string& source_id, int row, int col) {
  return source_id + "_" + std::to_string(row) + "_" + std::to_string(col);
}

std::vector<fs::path> write_tiles(const fs::path& dir, const std::vector<Tile>& tiles, int bit_depth) {
  fs::create_directories(dir);
  std::ofstream index(dir / "index.tsv", std::ios::app);
  if (!index) throw Error("cannot write tile index in " + dir.string());
  std::vector<fs::path> paths;
  paths.reserve(tiles.size());
  for (const auto& t : tiles) {
    const std::string name = tile_name(t.source_id, t.row, t.col);
    const fs::path p = dir / (name + ".png");
    save_image(p, t.pixels, bit_depth);
    index << name << '\t' << t.source_id << '\t' << t.row << '\t' << t.col << '\t' << t.origin.y << '\t'
          << t.origin.x << '\n';
    paths.push_back(p);
  }
  return paths;
}

}  // namespace defectloc
