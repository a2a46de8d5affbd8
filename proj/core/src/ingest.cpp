#include "defectloc/ingest.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace fs = std::filesystem;

namespace defectloc {

namespace {

double channel_scale(int depth) {
  switch (depth) {
    case CV_8U:
      return 1.0 / 255.0;
    case CV_16U:
      return 1.0 / 65535.0;
    default:
      return 0.0;
  }
}

template <typename T>
Image decode_pixels(const cv::Mat& mat, double scale) {
  const int channels = mat.channels();
  Image out(mat.rows, mat.cols);
  for (int y = 0; y < mat.rows; ++y) {
    const T* row = mat.ptr<T>(y);
    for (int x = 0; x < mat.cols; ++x) {
      const T* px = row + static_cast<std::ptrdiff_t>(x) * channels;
      double v;
      if (channels == 1 || channels == 2) {
        v = px[0] * scale;
      } else {
        // OpenCV stores colour as BGR(A).
        v = (0.299 * px[2] + 0.587 * px[1] + 0.114 * px[0]) * scale;
      }
      out(y, x) = std::clamp(v, 0.0, 1.0);
    }
  }
  return out;
}

}  // namespace

bool is_raster_file(const fs::path& path) {
  static const std::set<std::string> kExtensions = {".png", ".jpg",  ".jpeg", ".bmp", ".tif",
                                                    ".tiff", ".pgm", ".ppm",  ".pnm"};
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return kExtensions.count(ext) > 0;
}

ImageRecord load_image(const fs::path& path, std::string id) {
  std::error_code ec;
  if (!fs::is_regular_file(path, ec)) throw LoadError(path.string(), "no such file");
  const cv::Mat mat = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (mat.empty()) throw LoadError(path.string(), "not a decodable raster image");
  if (mat.rows == 0 || mat.cols == 0) throw ValidationError("zero-area image: " + path.string());

  const double scale = channel_scale(mat.depth());
  if (scale == 0.0) throw LoadError(path.string(), "unsupported bit depth (expected 8 or 16 bit)");

  ImageRecord rec;
  rec.id = id.empty() ? path.stem().string() : std::move(id);
  rec.path = path.string();
  rec.bit_depth = mat.depth() == CV_8U ? 8 : 16;
  rec.pixels = mat.depth() == CV_8U ? decode_pixels<std::uint8_t>(mat, scale)
                                    : decode_pixels<std::uint16_t>(mat, scale);
  return rec;
}

void save_image(const fs::path& path, const Image& image, int bit_depth) {
  if (image.size() == 0) throw ValidationError("refusing to write zero-area image " + path.string());
  if (bit_depth != 8 && bit_depth != 16) throw ParameterError("bit depth must be 8 or 16");
  const double max_value = bit_depth == 8 ? 255.0 : 65535.0;
  cv::Mat mat(static_cast<int>(image.rows()), static_cast<int>(image.cols()),
              bit_depth == 8 ? CV_8UC1 : CV_16UC1);
  for (int y = 0; y < mat.rows; ++y) {
    for (int x = 0; x < mat.cols; ++x) {
      const double v = std::round(std::clamp(image(y, x), 0.0, 1.0) * max_value);
      if (bit_depth == 8)
        mat.at<std::uint8_t>(y, x) = static_cast<std::uint8_t>(v);
      else
        mat.at<std::uint16_t>(y, x) = static_cast<std::uint16_t>(v);
    }
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), mat)) throw Error("failed to write image " + path.string());
}

std::string to_string(Split s) {
  switch (s) {
    case Split::Train:
      return "train";
    case Split::Val:
      return "val";
    case Split::Test:
      return "test";
  }
  return "train";
}

std::string to_string(Role r) { return r == Role::Board ? "board" : "texture"; }

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw ValidationError("unknown split tag '" + s + "'");
}

Role parse_role(const std::string& s) {
  if (s == "board") return Role::Board;
  if (s == "texture") return Role::Texture;
  throw ValidationError("unknown role tag '" + s + "'");
}

void Manifest::add(ManifestEntry entry) {
  if (entry.id.empty()) throw ValidationError("manifest entry with empty id");
  if (entry.id.find('\t') != std::string::npos || entry.path.find('\t') != std::string::npos)
    throw ValidationError("manifest fields must not contain tabs: " + entry.id);
  if (find(entry.id)) throw ValidationError("duplicate manifest id '" + entry.id + "'");
  entries_.push_back(std::move(entry));
}

std::optional<ManifestEntry> Manifest::find(const std::string& id) const {
  auto it = std::find_if(entries_.begin(), entries_.end(), [&](const auto& e) { return e.id == id; });
  if (it == entries_.end()) return std::nullopt;
  return *it;
}

std::vector<ManifestEntry> Manifest::select(Split split) const {
  std::vector<ManifestEntry> out;
  std::copy_if(entries_.begin(), entries_.end(), std::back_inserter(out),
               [&](const auto& e) { return e.split == split; });
  return out;
}

std::vector<ManifestEntry> Manifest::select(Role role) const {
  std::vector<ManifestEntry> out;
  std::copy_if(entries_.begin(), entries_.end(), std::back_inserter(out),
               [&](const auto& e) { return e.role == role; });
  return out;
}

std::vector<ManifestEntry> Manifest::unresolved() const {
  std::vector<ManifestEntry> out;
  for (const auto& e : entries_) {
    std::error_code ec;
    if (!fs::exists(e.path, ec)) out.push_back(e);
  }
  return out;
}

void Manifest::write(std::ostream& out) const {
  for (const auto& e : entries_)
    out << e.id << '\t' << e.path << '\t' << to_string(e.split) << '\t' << to_string(e.role) << '\n';
}

Manifest Manifest::read(std::istream& in) {
  Manifest m;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, '\t')) fields.push_back(field);
    if (fields.size() != 4)
      throw ValidationError("manifest line " + std::to_string(lineno) + ": expected 4 tab-separated fields");
    m.add({fields[0], fields[1], parse_split(fields[2]), parse_role(fields[3])});
  }
  return m;
}

void Manifest::save(const fs::path& path) const {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write manifest " + path.string());
  write(out);
}

Manifest Manifest::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError(path.string(), "cannot open manifest");
  return read(in);
}

ManifestBuild build_manifest(const fs::path& root_dir, const SplitFractions& fractions, std::uint64_t seed,
                             Role role) {
  const double sum = fractions.train + fractions.val + fractions.test;
  if (fractions.train < 0 || fractions.val < 0 || fractions.test < 0 || std::abs(sum - 1.0) > 1e-9)
    throw ParameterError("split fractions must be non-negative and sum to 1");

  std::vector<fs::path> files;
  std::error_code ec;
  if (fs::is_directory(root_dir, ec)) {
    for (const auto& entry : fs::recursive_directory_iterator(root_dir)) {
      if (entry.is_regular_file() && is_raster_file(entry.path())) files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());

  ManifestBuild result;
  if (files.empty()) {
    result.empty_warning = true;
    return result;
  }

  Rng rng(derive_seed(seed, {0x6d616e6966657374ULL}));
  for (std::size_t i = files.size() - 1; i > 0; --i) std::swap(files[i], files[rng.index(i + 1)]);

  const auto n = static_cast<double>(files.size());
  const auto train_end = static_cast<std::size_t>(std::llround(fractions.train * n));
  const auto val_end =
      std::min(files.size(), static_cast<std::size_t>(std::llround((fractions.train + fractions.val) * n)));

  std::set<std::string> used;
  for (std::size_t i = 0; i < files.size(); ++i) {
    fs::path rel = fs::relative(files[i], root_dir);
    std::string id = rel.parent_path().empty() ? rel.stem().string()
                                                : (rel.parent_path() / rel.stem()).generic_string();
    std::replace(id.begin(), id.end(), '/', '_');
    if (used.count(id)) id = rel.generic_string();
    std::replace(id.begin(), id.end(), '/', '_');
    used.insert(id);
    const Split split = i < train_end ? Split::Train : (i < val_end ? Split::Val : Split::Test);
    result.manifest.add({id, files[i].string(), split, role});
  }
  return result;
}

}  // namespace defectloc
