#pragma once

// Small generated stand-in for the board and texture corpora, sized for a
// CPU run of the full pipeline.

#include "defectloc/common.hpp"
#include "defectloc/config.hpp"

#include <cstdint>
#include <filesystem>

namespace defectloc {

struct DeskCorpusOptions {
  int boards = 64;
  Extent board{288, 384};
  int textures = 24;
  Extent texture{256, 256};
  std::uint64_t seed = 7;
};

/// Bright grained panel with a darker rim, a few drilled holes and milled
/// grooves, on a dark background margin.
Image make_board(Extent size, std::uint64_t seed);

/// High-contrast patchwork (mosaic, bands, checks or bricks) with a fine
/// stripe or grain pattern inside the cells. Graph segmentation harvests
/// anomaly shapes from it.
Image make_texture(Extent size, std::uint64_t seed);

/// Pipeline settings matching the desk corpus: 96x96 tiles at stride 48, a
/// six-stage network, the projection extractor and a 30-epoch budget.
PipelineConfig desk_config(const std::filesystem::path& root, const std::filesystem::path& work_dir);

/// Writes root/boards/*.png, root/textures/*.png and root/desk.ini.
void write_desk_corpus(const std::filesystem::path& root, const DeskCorpusOptions& options = {});

}  // namespace defectloc
