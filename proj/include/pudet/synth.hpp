#pragma once

// Synthetic "cell" images with complete ground truth, annotation degradation,
// patch tiling and the on-disk dataset format.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include <nlohmann/json.hpp>

#include "pudet/box.hpp"
#include "pudet/errors.hpp"
#include "pudet/random.hpp"

namespace pudet {

struct GroundTruthBox {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;
  int class_id = 1;  // 0 is background
  double agreement = 1.0;

  Box box() const { return {x, y, w, h}; }
  friend bool operator==(const GroundTruthBox&, const GroundTruthBox&) = default;
};

struct AnnotatedImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major
  std::vector<GroundTruthBox> boxes;
  bool complete = true;

  std::uint8_t at(int x, int y) const {
    return pixels[static_cast<std::size_t>(y) * static_cast<std::size_t>(width) +
                  static_cast<std::size_t>(x)];
  }
  friend bool operator==(const AnnotatedImage&, const AnnotatedImage&) = default;
};

template <class T>
struct Range {
  T lo{};
  T hi{};
  bool valid() const { return lo <= hi; }
};

struct BlobAppearance {
  Range<int> count{0, 0};
  Range<int> radius{3, 4};
  Range<double> intensity{150.0, 200.0};
  // Minor axis is shortened by up to this fraction.
  double eccentricity = 0.0;
};

struct GeneratorConfig {
  std::uint64_t seed = 0;
  int width = 48;
  int height = 48;
  std::vector<BlobAppearance> classes;  // one entry per positive class, M - 1 entries
  double background = 30.0;
  double noise = 0.0;  // Gaussian sigma on the 0..255 scale
  BlobAppearance distractors{{0, 0}, {2, 3}, {80.0, 100.0}, 0.0};
  int min_gap = 1;        // minimum free pixels between two blobs' boxes
  int max_retries = 500;  // per instance

  int num_classes() const { return static_cast<int>(classes.size()) + 1; }

  void validate() const {
    if (width <= 0 || height <= 0) throw ConfigError("generator: image size must be positive");
    if (classes.empty()) throw ConfigError("generator: need at least one positive class (M >= 2)");
    auto check = [](const BlobAppearance& b, const std::string& what) {
      if (!b.count.valid() || !b.radius.valid() || !b.intensity.valid())
        throw ConfigError("generator: empty range in " + what);
      if (b.count.lo < 0 || b.radius.lo < 1)
        throw ConfigError("generator: counts must be >= 0 and radii >= 1 in " + what);
      if (b.eccentricity < 0.0 || b.eccentricity >= 1.0)
        throw ConfigError("generator: eccentricity must lie in [0,1) in " + what);
    };
    for (std::size_t m = 0; m < classes.size(); ++m) check(classes[m], "class " + std::to_string(m + 1));
    check(distractors, "distractors");
  }
};

namespace detail {

inline std::uint8_t to_pixel(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

struct Blob {
  int cx, cy, rx, ry;
  double intensity;
  Box bounds() const {
    return {static_cast<double>(cx - rx), static_cast<double>(cy - ry),
            static_cast<double>(2 * rx + 1), static_cast<double>(2 * ry + 1)};
  }
};

inline bool place_blob(Rng& rng, const GeneratorConfig& cfg, const BlobAppearance& look,
                       const std::vector<Blob>& placed, Blob& out) {
  for (int attempt = 0; attempt < cfg.max_retries; ++attempt) {
    const int r = static_cast<int>(rng.integer(look.radius.lo, look.radius.hi));
    const double squash = 1.0 - look.eccentricity * rng.uniform();
    const int minor = std::max(1, static_cast<int>(std::lround(r * squash)));
    const bool tall = rng.bernoulli(0.5);
    const int rx = tall ? minor : r;
    const int ry = tall ? r : minor;
    const double intensity = rng.uniform(look.intensity.lo, look.intensity.hi);
    if (2 * rx + 1 > cfg.width || 2 * ry + 1 > cfg.height) continue;
    const int cx = static_cast<int>(rng.integer(rx, cfg.width - 1 - rx));
    const int cy = static_cast<int>(rng.integer(ry, cfg.height - 1 - ry));
    Blob cand{cx, cy, rx, ry, intensity};
    Box grown = cand.bounds();
    grown.x -= cfg.min_gap;
    grown.y -= cfg.min_gap;
    grown.w += 2 * cfg.min_gap;
    grown.h += 2 * cfg.min_gap;
    const bool clash = std::any_of(placed.begin(), placed.end(), [&](const Blob& b) {
      return intersection_area(grown, b.bounds()) > 0.0;
    });
    if (!clash) {
      out = cand;
      return true;
    }
  }
  return false;
}

inline void render_blob(std::vector<double>& canvas, const GeneratorConfig& cfg, const Blob& b) {
  for (int y = b.cy - b.ry; y <= b.cy + b.ry; ++y) {
    for (int x = b.cx - b.rx; x <= b.cx + b.rx; ++x) {
      const double u = (x - b.cx) / (b.rx + 0.5);
      const double v = (y - b.cy) / (b.ry + 0.5);
      const double d2 = u * u + v * v;
      if (d2 > 1.0) continue;
      const double value = cfg.background + (b.intensity - cfg.background) * (1.0 - 0.4 * d2);
      canvas[static_cast<std::size_t>(y) * cfg.width + x] = value;
    }
  }
}

inline AnnotatedImage generate_one(const GeneratorConfig& cfg, std::uint64_t image_seed) {
  Rng rng(image_seed);
  std::vector<Blob> placed;
  AnnotatedImage img;
  img.width = cfg.width;
  img.height = cfg.height;
  img.complete = true;
  std::vector<double> canvas(static_cast<std::size_t>(cfg.width) * cfg.height, cfg.background);

  auto fail = [&](const std::string& what) {
    std::ostringstream os;
    os << "could not place " << what << " after " << cfg.max_retries << " retries in a " << cfg.width
       << "x" << cfg.height << " image with min_gap " << cfg.min_gap
       << "; reduce instance counts or radii";
    throw GenerationError(os.str());
  };

  for (std::size_t m = 0; m < cfg.classes.size(); ++m) {
    const auto& look = cfg.classes[m];
    const int n = static_cast<int>(rng.integer(look.count.lo, look.count.hi));
    for (int i = 0; i < n; ++i) {
      Blob b{};
      if (!place_blob(rng, cfg, look, placed, b)) fail("a class-" + std::to_string(m + 1) + " instance");
      placed.push_back(b);
      render_blob(canvas, cfg, b);
      const Box bb = b.bounds();
      img.boxes.push_back({bb.x, bb.y, bb.w, bb.h, static_cast<int>(m + 1), rng.uniform()});
    }
  }
  const int nd = static_cast<int>(rng.integer(cfg.distractors.count.lo, cfg.distractors.count.hi));
  for (int i = 0; i < nd; ++i) {
    Blob b{};
    if (!place_blob(rng, cfg, cfg.distractors, placed, b)) fail("a distractor");
    placed.push_back(b);
    render_blob(canvas, cfg, b);
  }

  img.pixels.resize(canvas.size());
  for (std::size_t i = 0; i < canvas.size(); ++i) {
    const double noisy = cfg.noise > 0.0 ? canvas[i] + cfg.noise * rng.normal() : canvas[i];
    img.pixels[i] = to_pixel(noisy);
  }
  return img;
}

}  // namespace detail

/// Deterministic in (config, count); image i depends only on (seed, i).
inline std::vector<AnnotatedImage> generate(const GeneratorConfig& config, int count) {
  if (count <= 0) throw UsageError("generate: count must be positive");
  config.validate();
  std::vector<AnnotatedImage> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    out.push_back(detail::generate_one(config, derive_seed(config.seed, static_cast<std::uint64_t>(i))));
  }
  return out;
}

namespace detail {

inline std::map<int, std::vector<std::size_t>> indices_by_class(const AnnotatedImage& img) {
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < img.boxes.size(); ++i) by_class[img.boxes[i].class_id].push_back(i);
  return by_class;
}

inline AnnotatedImage keep_indices(const AnnotatedImage& img, std::vector<std::size_t> keep) {
  std::sort(keep.begin(), keep.end());
  AnnotatedImage out = img;
  out.boxes.clear();
  for (std::size_t i : keep) out.boxes.push_back(img.boxes[i]);
  out.complete = false;
  return out;
}

}  // namespace detail

/// Per class, keeps a uniformly random subset of at most keep_n boxes.
inline AnnotatedImage degrade_random(const AnnotatedImage& img, int keep_n, std::uint64_t seed) {
  if (keep_n < 1) throw UsageError("degrade_random: keep_n must be >= 1");
  if (!img.complete) throw UsageError("degrade_random: image annotations are already incomplete");
  Rng rng(seed);
  std::vector<std::size_t> keep;
  for (auto& [cls, idx] : detail::indices_by_class(img)) {
    if (static_cast<int>(idx.size()) > keep_n) {
      rng.shuffle(idx);
      idx.resize(static_cast<std::size_t>(keep_n));
    }
    keep.insert(keep.end(), idx.begin(), idx.end());
  }
  return detail::keep_indices(img, std::move(keep));
}

/// Per class, keeps the keep_n boxes with highest agreement (ties: lower index).
inline AnnotatedImage degrade_by_agreement(const AnnotatedImage& img, int keep_n) {
  if (keep_n < 1) throw UsageError("degrade_by_agreement: keep_n must be >= 1");
  if (!img.complete) throw UsageError("degrade_by_agreement: image annotations are already incomplete");
  std::vector<std::size_t> keep;
  for (auto& [cls, idx] : detail::indices_by_class(img)) {
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return img.boxes[a].agreement > img.boxes[b].agreement;
    });
    if (static_cast<int>(idx.size()) > keep_n) idx.resize(static_cast<std::size_t>(keep_n));
    keep.insert(keep.end(), idx.begin(), idx.end());
  }
  return detail::keep_indices(img, std::move(keep));
}

struct Patch {
  AnnotatedImage image;
  int offset_x = 0;
  int offset_y = 0;
};

/// Window origins along one axis; the last window is flush with the far edge.
inline std::vector<int> tile_offsets(int length, int patch, int overlap) {
  const int stride = patch - overlap;
  std::vector<int> offs;
  int p = 0;
  while (p + patch < length) {
    offs.push_back(p);
    p += stride;
  }
  offs.push_back(length - patch);
  offs.erase(std::unique(offs.begin(), offs.end()), offs.end());
  return offs;
}

/// Boxes go to every patch whose window [o, o+patch) contains their center.
/// Rebased boxes keep their full extent and may reach past the patch edge.
inline std::vector<Patch> tile(const AnnotatedImage& img, int patch, int overlap) {
  if (!(overlap >= 0 && overlap < patch && patch <= std::min(img.width, img.height))) {
    throw UsageError("tile: need 0 <= overlap < patch <= min(width, height); got patch " +
                     std::to_string(patch) + ", overlap " + std::to_string(overlap));
  }
  std::vector<Patch> out;
  for (int oy : tile_offsets(img.height, patch, overlap)) {
    for (int ox : tile_offsets(img.width, patch, overlap)) {
      Patch p;
      p.offset_x = ox;
      p.offset_y = oy;
      p.image.width = patch;
      p.image.height = patch;
      p.image.complete = img.complete;
      p.image.pixels.resize(static_cast<std::size_t>(patch) * patch);
      for (int y = 0; y < patch; ++y)
        for (int x = 0; x < patch; ++x)
          p.image.pixels[static_cast<std::size_t>(y) * patch + x] = img.at(ox + x, oy + y);
      for (const auto& b : img.boxes) {
        const double cx = b.x + 0.5 * b.w, cy = b.y + 0.5 * b.h;
        if (cx >= ox && cx < ox + patch && cy >= oy && cy < oy + patch) {
          GroundTruthBox r = b;
          r.x -= ox;
          r.y -= oy;
          p.image.boxes.push_back(r);
        }
      }
      out.push_back(std::move(p));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset files: manifest.json + <name>.pgm (P5) + <name>.csv per image.

struct Dataset {
  int num_classes = 2;  // M, including background
  nlohmann::json config = nlohmann::json::object();
  std::vector<AnnotatedImage> images;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace detail {

inline std::string image_name(std::size_t i) {
  std::ostringstream os;
  os << "img_" << std::setw(5) << std::setfill('0') << i;
  return os.str();
}

inline void write_pgm(const std::filesystem::path& path, const AnnotatedImage& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  f << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!f) throw DataError("write failed: " + path.string());
}

inline void read_pgm(const std::filesystem::path& path, AnnotatedImage& img) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read " + path.string());
  auto token = [&](const char* what) {
    std::string t;
    int c = f.get();
    while (c != EOF) {
      if (c == '#') {
        while (c != EOF && c != '\n') c = f.get();
      } else if (!std::isspace(c)) {
        break;
      }
      c = f.get();
    }
    while (c != EOF && !std::isspace(c)) {
      t.push_back(static_cast<char>(c));
      c = f.get();
    }
    if (t.empty()) throw DataError(path.string() + ": truncated header, expected " + what);
    return t;
  };
  if (token("magic") != "P5") throw DataError(path.string() + ": not a binary PGM (P5)");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(token("width"));
    h = std::stoi(token("height"));
    maxval = std::stoi(token("maxval"));
  } catch (const std::logic_error&) {
    throw DataError(path.string() + ": malformed PGM header");
  }
  if (maxval != 255) throw DataError(path.string() + ": only maxval 255 is supported");
  if (w != img.width || h != img.height) {
    throw DataError(path.string() + ": size " + std::to_string(w) + "x" + std::to_string(h) +
                    " disagrees with manifest");
  }
  img.pixels.resize(static_cast<std::size_t>(w) * h);
  f.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (f.gcount() != static_cast<std::streamsize>(img.pixels.size()))
    throw DataError(path.string() + ": pixel data truncated");
}

constexpr const char* kBoxHeader = "x,y,w,h,class_id,agreement";

inline void write_boxes(const std::filesystem::path& path, const AnnotatedImage& img) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path.string());
  f << kBoxHeader << '\n';
  for (const auto& b : img.boxes) {
    f << format_double(b.x) << ',' << format_double(b.y) << ',' << format_double(b.w) << ','
      << format_double(b.h) << ',' << b.class_id << ',' << format_double(b.agreement) << '\n';
  }
}

template <class T>
T parse_field(std::string_view s, const std::string& where) {
  T v{};
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw DataError(where + ": cannot parse '" + std::string(s) + "'");
  return v;
}

inline void read_boxes(const std::filesystem::path& path, AnnotatedImage& img) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read " + path.string());
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(f, line) || line != kBoxHeader)
    throw DataError(path.string() + ":1: expected header '" + kBoxHeader + "'");
  ++lineno;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    std::vector<std::string_view> fields;
    std::string_view rest(line);
    for (;;) {
      const auto comma = rest.find(',');
      fields.push_back(rest.substr(0, comma));
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    if (fields.size() != 6) throw DataError(where + ": expected 6 fields, got " + std::to_string(fields.size()));
    GroundTruthBox b;
    b.x = parse_field<double>(fields[0], where);
    b.y = parse_field<double>(fields[1], where);
    b.w = parse_field<double>(fields[2], where);
    b.h = parse_field<double>(fields[3], where);
    b.class_id = parse_field<int>(fields[4], where);
    b.agreement = parse_field<double>(fields[5], where);
    if (!(b.w > 0.0 && b.h > 0.0) || b.class_id < 1)
      throw DataError(where + ": box needs positive size and class_id >= 1");
    img.boxes.push_back(b);
  }
}

}  // namespace detail

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
  nlohmann::json manifest;
  manifest["format"] = "pudet-dataset";
  manifest["version"] = 1;
  manifest["num_classes"] = ds.num_classes;
  manifest["config"] = ds.config;
  manifest["images"] = nlohmann::json::array();
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    const auto& img = ds.images[i];
    const std::string name = detail::image_name(i);
    manifest["images"].push_back(
        {{"name", name}, {"width", img.width}, {"height", img.height}, {"complete", img.complete}});
    detail::write_pgm(dir / (name + ".pgm"), img);
    detail::write_boxes(dir / (name + ".csv"), img);
  }
  std::ofstream f(dir / "manifest.json");
  if (!f) throw DataError("cannot write manifest in " + dir.string());
  f << manifest.dump(2) << '\n';
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  const auto mpath = dir / "manifest.json";
  std::ifstream f(mpath);
  if (!f) throw DataError("cannot read " + mpath.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(mpath.string() + ": " + e.what());
  }
  Dataset ds;
  try {
    if (manifest.at("format") != "pudet-dataset") throw DataError(mpath.string() + ": unknown format");
    if (manifest.at("version") != 1) throw DataError(mpath.string() + ": unsupported version");
    ds.num_classes = manifest.at("num_classes").get<int>();
    ds.config = manifest.value("config", nlohmann::json::object());
    std::size_t record = 0;
    for (const auto& entry : manifest.at("images")) {
      AnnotatedImage img;
      const auto name = entry.at("name").get<std::string>();
      img.width = entry.at("width").get<int>();
      img.height = entry.at("height").get<int>();
      img.complete = entry.at("complete").get<bool>();
      if (img.width <= 0 || img.height <= 0)
        throw DataError(mpath.string() + ": image record " + std::to_string(record) + " has no pixels");
      detail::read_pgm(dir / (name + ".pgm"), img);
      detail::read_boxes(dir / (name + ".csv"), img);
      for (const auto& b : img.boxes) {
        if (b.class_id >= ds.num_classes)
          throw DataError(name + ".csv: class_id " + std::to_string(b.class_id) + " >= num_classes");
      }
      ds.images.push_back(std::move(img));
      ++record;
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(mpath.string() + ": " + e.what());
  }
  return ds;
}

}  // namespace pudet
