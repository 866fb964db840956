#pragma once

#include <vector>

#include "pudet/errors.hpp"
#include "pudet/synth.hpp"

namespace pudet {

/// Image intensities mapped from [0,255] to [-1,1].
struct NormalizedImage {
  int width = 0;
  int height = 0;
  std::vector<double> values;

  double at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

inline double normalize(double pixel) {
  if (!(pixel >= 0.0 && pixel <= 255.0))
    throw DataError("normalize: pixel value " + std::to_string(pixel) + " outside [0,255]");
  return 2.0 * pixel / 255.0 - 1.0;
}

inline NormalizedImage normalize(const AnnotatedImage& img) {
  NormalizedImage out{img.width, img.height, {}};
  out.values.reserve(img.pixels.size());
  for (auto p : img.pixels) out.values.push_back(normalize(static_cast<double>(p)));
  return out;
}

/// Mirrors pixels left-right; boxes move to x' = width - x - w.
inline AnnotatedImage flip_horizontal(const AnnotatedImage& img) {
  AnnotatedImage out = img;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      out.pixels[static_cast<std::size_t>(y) * img.width + x] = img.at(img.width - 1 - x, y);
  for (auto& b : out.boxes) b.x = img.width - b.x - b.w;
  return out;
}

}  // namespace pudet
