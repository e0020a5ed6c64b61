#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "r3cnn/geometry.hpp"
#include "r3cnn/png.hpp"
#include "r3cnn/rng.hpp"

namespace r3cnn {

enum class ShapeClass : int { kRectangle = 1, kEllipse = 2, kTriangle = 3 };
inline constexpr int kNumShapeClasses = 3;

struct SceneSpec {
  std::size_t image_size = 128;  // square
  int shape_count_min = 1;
  int shape_count_max = 4;
  double min_instance_area = 32.0;     // px^2 of visible mask
  double min_visible_fraction = 0.25;  // visible/full area or dropped
  std::uint64_t seed = 0;

  void validate() const {
    if (image_size < 32)
      throw std::invalid_argument("SceneSpec: image_size must be >= 32");
    if (shape_count_min < 0 || shape_count_max < shape_count_min)
      throw std::invalid_argument("SceneSpec: bad shape_count range");
  }
};

using MaskRaster = std::vector<std::uint8_t>;  // H*W, 0/1

struct GroundTruth {
  std::vector<Box> boxes;
  std::vector<int> class_labels;   // >= 1
  std::vector<MaskRaster> masks;   // image resolution

  std::size_t size() const { return boxes.size(); }
};

struct Image {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes/px
};

// ---------------------------------------------------------------------------
// Run-length mask codec: alternating run counts over the row-major raster,
// starting with a run of zeros. Text form is byte-order independent.
// ---------------------------------------------------------------------------

inline std::vector<std::size_t> rle_encode(const MaskRaster& mask) {
  std::vector<std::size_t> runs;
  std::uint8_t cur = 0;
  std::size_t len = 0;
  for (std::uint8_t v : mask) {
    const std::uint8_t bit = v ? 1 : 0;
    if (bit == cur) {
      ++len;
    } else {
      runs.push_back(len);
      cur = bit;
      len = 1;
    }
  }
  runs.push_back(len);
  return runs;
}

inline MaskRaster rle_decode(const std::vector<std::size_t>& runs,
                             std::size_t total) {
  MaskRaster mask;
  mask.reserve(total);
  std::uint8_t cur = 0;
  for (std::size_t run : runs) {
    mask.insert(mask.end(), run, cur);
    cur = 1 - cur;
  }
  if (mask.size() != total)
    throw std::invalid_argument("rle_decode: runs sum " +
                                std::to_string(mask.size()) +
                                " != raster size " + std::to_string(total));
  return mask;
}

// Tight bounding box of a raster mask; pixel (x, y) covers [x,x+1)x[y,y+1).
inline Box tight_bbox(const MaskRaster& mask, std::size_t width,
                      std::size_t height) {
  std::size_t minx = width, miny = height, maxx = 0, maxy = 0;
  bool any = false;
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      if (!mask[y * width + x]) continue;
      any = true;
      minx = std::min(minx, x);
      miny = std::min(miny, y);
      maxx = std::max(maxx, x);
      maxy = std::max(maxy, y);
    }
  }
  if (!any) return Box{0, 0, 0, 0};
  return Box{static_cast<double>(minx), static_cast<double>(miny),
             static_cast<double>(maxx + 1), static_cast<double>(maxy + 1)};
}

namespace detail {

struct ShapeDraft {
  int cls = 0;
  // rect/ellipse: defined by center + half extents; triangle: 3 vertices
  double cx = 0, cy = 0, hx = 0, hy = 0;
  double vx[3] = {0, 0, 0}, vy[3] = {0, 0, 0};
  std::uint8_t color[3] = {0, 0, 0};

  bool contains(double px, double py) const {
    switch (cls) {
      case static_cast<int>(ShapeClass::kRectangle):
        return std::abs(px - cx) <= hx && std::abs(py - cy) <= hy;
      case static_cast<int>(ShapeClass::kEllipse): {
        const double dx = (px - cx) / hx, dy = (py - cy) / hy;
        return dx * dx + dy * dy <= 1.0;
      }
      case static_cast<int>(ShapeClass::kTriangle): {
        auto side = [&](int i, int j) {
          return (vx[j] - vx[i]) * (py - vy[i]) -
                 (vy[j] - vy[i]) * (px - vx[i]);
        };
        const double s0 = side(0, 1), s1 = side(1, 2), s2 = side(2, 0);
        const bool has_neg = s0 < 0 || s1 < 0 || s2 < 0;
        const bool has_pos = s0 > 0 || s1 > 0 || s2 > 0;
        return !(has_neg && has_pos);
      }
      default:
        return false;
    }
  }
};

inline ShapeDraft draw_shape(Rng& rng, std::size_t image_size) {
  ShapeDraft s;
  s.cls = static_cast<int>(rng.uniform_int(1, kNumShapeClasses));
  const double n = static_cast<double>(image_size);
  switch (static_cast<ShapeClass>(s.cls)) {
    case ShapeClass::kRectangle: {
      s.hx = rng.uniform(9.0, 28.0) * n / 128.0;
      s.hy = rng.uniform(9.0, 28.0) * n / 128.0;
      s.cx = rng.uniform(s.hx, n - s.hx);
      s.cy = rng.uniform(s.hy, n - s.hy);
      break;
    }
    case ShapeClass::kEllipse: {
      s.hx = rng.uniform(9.0, 28.0) * n / 128.0;
      s.hy = rng.uniform(9.0, 28.0) * n / 128.0;
      s.cx = rng.uniform(s.hx, n - s.hx);
      s.cy = rng.uniform(s.hy, n - s.hy);
      break;
    }
    case ShapeClass::kTriangle: {
      const double ext = rng.uniform(22.0, 56.0) * n / 128.0;
      const double x0 = rng.uniform(0.0, n - ext);
      const double y0 = rng.uniform(0.0, n - ext);
      for (int attempt = 0; attempt < 64; ++attempt) {
        for (int v = 0; v < 3; ++v) {
          s.vx[v] = x0 + rng.uniform(0.0, ext);
          s.vy[v] = y0 + rng.uniform(0.0, ext);
        }
        const double area =
            0.5 * std::abs((s.vx[1] - s.vx[0]) * (s.vy[2] - s.vy[0]) -
                           (s.vx[2] - s.vx[0]) * (s.vy[1] - s.vy[0]));
        if (area >= 0.2 * ext * ext) break;
      }
      break;
    }
  }
  for (int c = 0; c < 3; ++c)
    s.color[c] = static_cast<std::uint8_t>(rng.uniform_int(40, 230));
  return s;
}

}  // namespace detail

// Deterministic scene generation: identical (spec, index) gives bit-identical
// output. Occlusion by paint order; instances whose visible mask drops below
// either area floor are removed from the ground truth.
inline std::pair<Image, GroundTruth> generate_scene(const SceneSpec& spec,
                                                    std::size_t index) {
  spec.validate();
  Rng rng(Rng::mix(spec.seed, index));
  Rng noise_rng(Rng::mix(Rng::mix(spec.seed, index), 0x6e6f697365ULL));
  const std::size_t n = spec.image_size;

  const int count =
      static_cast<int>(rng.uniform_int(spec.shape_count_min, spec.shape_count_max));
  std::vector<detail::ShapeDraft> shapes;
  shapes.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i)
    shapes.push_back(detail::draw_shape(rng, n));

  // ownership raster: -1 background, otherwise index of topmost shape
  std::vector<int> owner(n * n, -1);
  std::vector<double> full_area(shapes.size(), 0.0);
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const double px = static_cast<double>(x) + 0.5;
      const double py = static_cast<double>(y) + 0.5;
      for (std::size_t s = 0; s < shapes.size(); ++s) {
        if (shapes[s].contains(px, py)) {
          owner[y * n + x] = static_cast<int>(s);  // later shapes paint over
          full_area[s] += 1.0;
        }
      }
    }
  }

  GroundTruth gt;
  for (std::size_t s = 0; s < shapes.size(); ++s) {
    MaskRaster mask(n * n, 0);
    double visible = 0;
    for (std::size_t p = 0; p < n * n; ++p) {
      if (owner[p] == static_cast<int>(s)) {
        mask[p] = 1;
        visible += 1.0;
      }
    }
    if (visible < spec.min_instance_area) continue;
    if (full_area[s] > 0 && visible / full_area[s] < spec.min_visible_fraction)
      continue;
    gt.boxes.push_back(tight_bbox(mask, n, n));
    gt.class_labels.push_back(shapes[s].cls);
    gt.masks.push_back(std::move(mask));
  }

  Image img;
  img.width = img.height = n;
  img.rgb.resize(n * n * 3);
  std::uint8_t bg[3];
  for (int c = 0; c < 3; ++c)
    bg[c] = static_cast<std::uint8_t>(noise_rng.uniform_int(20, 100));
  for (std::size_t p = 0; p < n * n; ++p) {
    const int o = owner[p];
    for (int c = 0; c < 3; ++c) {
      const int base = o < 0 ? bg[c] : shapes[static_cast<std::size_t>(o)].color[c];
      const int v = base + static_cast<int>(noise_rng.uniform_int(-12, 12));
      img.rgb[p * 3 + static_cast<std::size_t>(c)] =
          static_cast<std::uint8_t>(std::clamp(v, 0, 255));
    }
  }
  return {std::move(img), std::move(gt)};
}

// ---------------------------------------------------------------------------
// Dataset persistence. One text record per scene; masks are run-length
// encoded. The manifest records the spec and per-scene indices so the whole
// dataset can be regenerated bit-identically.
// ---------------------------------------------------------------------------

struct SceneRecord {
  std::size_t index = 0;
  std::string image_path;
  GroundTruth gt;
};

struct DatasetManifest {
  SceneSpec spec;
  std::vector<SceneRecord> scenes;
};

inline std::string write_dataset(const SceneSpec& spec, std::size_t count,
                                 const std::string& path) {
  spec.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(path) / "images", ec);
  if (ec)
    throw std::runtime_error("cannot create dataset directory '" + path +
                             "': " + ec.message());
  const std::string manifest_path = (fs::path(path) / "manifest.txt").string();
  std::ofstream mf(manifest_path);
  if (!mf)
    throw std::runtime_error("cannot write manifest: " + manifest_path);
  mf << "r3cnn-manifest v1\n";
  mf << "image_size " << spec.image_size << " seed " << spec.seed
     << " count_min " << spec.shape_count_min << " count_max "
     << spec.shape_count_max << " min_instance_area " << spec.min_instance_area
     << " min_visible_fraction " << spec.min_visible_fraction << "\n";
  mf << "scenes " << count << "\n";
  for (std::size_t i = 0; i < count; ++i) {
    auto [img, gt] = generate_scene(spec, i);
    char name[64];
    std::snprintf(name, sizeof(name), "images/scene_%06zu.png", i);
    write_png((fs::path(path) / name).string(), img.rgb.data(), img.width,
              img.height);
    mf << "scene " << i << " " << name << " " << gt.size() << "\n";
    for (std::size_t k = 0; k < gt.size(); ++k) {
      mf << "inst " << gt.class_labels[k] << " " << gt.boxes[k].x1 << " "
         << gt.boxes[k].y1 << " " << gt.boxes[k].x2 << " " << gt.boxes[k].y2
         << " rle";
      for (std::size_t run : rle_encode(gt.masks[k])) mf << " " << run;
      mf << "\n";
    }
  }
  if (!mf) throw std::runtime_error("manifest write failed: " + manifest_path);
  return manifest_path;
}

inline DatasetManifest read_manifest(const std::string& manifest_path) {
  std::ifstream mf(manifest_path);
  if (!mf) throw std::runtime_error("cannot open manifest: " + manifest_path);
  DatasetManifest out;
  std::string line;
  if (!std::getline(mf, line) || line != "r3cnn-manifest v1")
    throw std::runtime_error("bad manifest header in " + manifest_path);
  std::getline(mf, line);
  {
    std::istringstream ss(line);
    std::string key;
    while (ss >> key) {
      if (key == "image_size") ss >> out.spec.image_size;
      else if (key == "seed") ss >> out.spec.seed;
      else if (key == "count_min") ss >> out.spec.shape_count_min;
      else if (key == "count_max") ss >> out.spec.shape_count_max;
      else if (key == "min_instance_area") ss >> out.spec.min_instance_area;
      else if (key == "min_visible_fraction") ss >> out.spec.min_visible_fraction;
      else throw std::runtime_error("unknown manifest spec key '" + key + "'");
    }
  }
  std::size_t count = 0;
  mf >> line >> count;
  if (line != "scenes")
    throw std::runtime_error("bad manifest scene count line");
  const std::size_t npx = out.spec.image_size * out.spec.image_size;
  for (std::size_t i = 0; i < count; ++i) {
    SceneRecord rec;
    std::size_t ninst = 0;
    mf >> line >> rec.index >> rec.image_path >> ninst;
    if (line != "scene")
      throw std::runtime_error("bad manifest scene record at scene " +
                               std::to_string(i));
    for (std::size_t k = 0; k < ninst; ++k) {
      int cls;
      Box b;
      std::string tag;
      mf >> line >> cls >> b.x1 >> b.y1 >> b.x2 >> b.y2 >> tag;
      if (line != "inst" || tag != "rle")
        throw std::runtime_error("bad manifest instance record at scene " +
                                 std::to_string(i));
      std::vector<std::size_t> runs;
      std::size_t total = 0;
      while (total < npx) {
        std::size_t run;
        mf >> run;
        runs.push_back(run);
        total += run;
      }
      rec.gt.boxes.push_back(b);
      rec.gt.class_labels.push_back(cls);
      rec.gt.masks.push_back(rle_decode(runs, npx));
    }
    out.scenes.push_back(std::move(rec));
  }
  if (!mf) throw std::runtime_error("truncated manifest: " + manifest_path);
  return out;
}

}  // namespace r3cnn
