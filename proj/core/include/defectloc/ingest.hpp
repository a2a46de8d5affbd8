#pragma once

#include "defectloc/common.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace defectloc {

struct ImageRecord {
  std::string id;
  std::string path;
  Image pixels;
  int bit_depth = 8;  // of the decoded source raster

  int height() const { return static_cast<int>(pixels.rows()); }
  int width() const { return static_cast<int>(pixels.cols()); }
  Extent extent() const { return {height(), width()}; }
};

/// Decodes an 8- or 16-bit raster, converts colour with BT.601 luma
/// (0.299 R + 0.587 G + 0.114 B) and scales to [0,1]. The id defaults to the
/// file stem.
ImageRecord load_image(const std::filesystem::path& path, std::string id = {});

/// Writes an image as PNG; values are clipped to [0,1] and quantised to the
/// given bit depth (8 or 16).
void save_image(const std::filesystem::path& path, const Image& image, int bit_depth = 8);

/// Raster extensions picked up by directory discovery.
bool is_raster_file(const std::filesystem::path& path);

enum class Split { Train, Val, Test };
enum class Role { Board, Texture };

std::string to_string(Split s);
std::string to_string(Role r);
Split parse_split(const std::string& s);
Role parse_role(const std::string& s);

struct ManifestEntry {
  std::string id;
  std::string path;
  Split split = Split::Train;
  Role role = Role::Board;
  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

/// Ordered set of dataset entries with unique ids. Serialised one record per
/// line as `id<TAB>path<TAB>split<TAB>role`.
class Manifest {
 public:
  /// Throws ValidationError on duplicate id.
  void add(ManifestEntry entry);
  const std::vector<ManifestEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::optional<ManifestEntry> find(const std::string& id) const;
  std::vector<ManifestEntry> select(Split split) const;
  std::vector<ManifestEntry> select(Role role) const;
  /// Entries whose path does not exist on disk.
  std::vector<ManifestEntry> unresolved() const;

  void write(std::ostream& out) const;
  static Manifest read(std::istream& in);
  void save(const std::filesystem::path& path) const;
  static Manifest load(const std::filesystem::path& path);

  friend bool operator==(const Manifest&, const Manifest&) = default;

 private:
  std::vector<ManifestEntry> entries_;
};

struct SplitFractions {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

struct ManifestBuild {
  Manifest manifest;
  bool empty_warning = false;
};

/// Discovers raster files under root_dir (recursively), shuffles them with a
/// seeded Fisher-Yates pass and assigns contiguous split blocks whose
/// boundaries are the rounded cumulative fractions.
ManifestBuild build_manifest(const std::filesystem::path& root_dir, const SplitFractions& fractions,
                             std::uint64_t seed, Role role = Role::Board);

}  // namespace defectloc
