#pragma once

#include "defectloc/common.hpp"
#include "defectloc/ingest.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace defectloc {

/// Sliding-window layout over one source raster. Origins are anchored at
/// (0,0); the last row/column of windows may overhang the bottom/right edge,
/// and the overhang is zero-filled.
struct TileGrid {
  Extent image;
  Extent window;
  Extent stride;  // {dy, dx}
  int rows = 0;
  int cols = 0;
  Extent pad;  // {bottom, right}

  int count() const { return rows * cols; }
  Position origin(int row, int col) const { return {row * stride.h, col * stride.w}; }
};

/// rows = ceil((H - h) / dy) + 1, cols likewise. A window larger than the
/// image is accepted as long as the resulting pad stays below the stride.
TileGrid plan_grid(Extent image, Extent window, Extent stride);

struct Tile {
  std::string source_id;
  int row = 0;
  int col = 0;
  Position origin;
  Image pixels;
};

/// All rows*cols windows in row-major order.
std::vector<Tile> extract_tiles(const ImageRecord& image, const TileGrid& grid);
Tile extract_tile(const ImageRecord& image, const TileGrid& grid, int row, int col);

enum class Reducer { Mean, Max };

struct TileValues {
  Position origin;
  Image values;
};

/// Reassembles per-tile maps into a full-image map. Each output pixel is the
/// reducer over all tiles covering it; pixels no tile covers are 0.
Image stitch_map(const std::vector<TileValues>& tiles, Extent image, Reducer reducer = Reducer::Mean);

/// `{source_id}_{row}_{col}`
std::string tile_name(const std::string& source_id, int row, int col);

/// Materialises tiles as PNG files named by tile_name() plus an `index.tsv`
/// (`name<TAB>source_id<TAB>row<TAB>col<TAB>y<TAB>x`). Returns written paths.
std::vector<std::filesystem::path> write_tiles(const std::filesystem::path& dir, const std::vector<Tile>& tiles,
                                               int bit_depth = 8);

}  // namespace defectloc
