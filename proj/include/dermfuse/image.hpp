#pragma once

#include <png.h>

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "dermfuse/errors.hpp"
#include "dermfuse/rng.hpp"
#include "dermfuse/serialize.hpp"

namespace dermfuse {

// Raster image, row-major HWC, values in [0,1]. 8-bit only at file
// boundaries. Channel count is 3 for everything in the pipeline; a handful
// of ops also accept single-channel planes.
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int h, int w, int c, float fill = 0.0f)
      : height(h), width(w), channels(c),
        pixels(static_cast<std::size_t>(h) * w * c, fill) {
    if (h < 1 || w < 1 || (c != 1 && c != 3)) {
      throw ContractError("image: bad dimensions " + std::to_string(h) + "x" + std::to_string(w) +
                          "x" + std::to_string(c));
    }
  }

  float& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  float at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }

  bool same_dims(const Image& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }
};

inline std::uint8_t pixel_to_u8(float v) {
  float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

inline float pixel_from_u8(std::uint8_t v) { return static_cast<float>(v) / 255.0f; }

inline void clip_pixels(Image& img) {
  for (auto& v : img.pixels) v = std::clamp(v, 0.0f, 1.0f);
}

namespace detail {

inline std::vector<std::uint8_t> image_to_bytes(const Image& img) {
  std::vector<std::uint8_t> bytes(img.pixels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = pixel_to_u8(img.pixels[i]);
  return bytes;
}

inline Image image_from_bytes(int h, int w, int c, const std::uint8_t* bytes) {
  Image img(h, w, c);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = pixel_from_u8(bytes[i]);
  return img;
}

inline Image load_png(const std::filesystem::path& path) {
  png_image pimg;
  std::memset(&pimg, 0, sizeof(pimg));
  pimg.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&pimg, path.string().c_str())) {
    throw FormatError("png read failed for " + path.string() + ": " + pimg.message);
  }
  const bool gray = (pimg.format & PNG_FORMAT_FLAG_COLOR) == 0;
  pimg.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  const int channels = gray ? 1 : 3;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(pimg));
  png_color black{0, 0, 0};
  if (!png_image_finish_read(&pimg, &black, buf.data(), 0, nullptr)) {
    std::string msg = pimg.message;
    png_image_free(&pimg);
    throw FormatError("png decode failed for " + path.string() + ": " + msg);
  }
  return image_from_bytes(static_cast<int>(pimg.height), static_cast<int>(pimg.width), channels,
                          buf.data());
}

inline void save_png(const Image& img, const std::filesystem::path& path) {
  png_image pimg;
  std::memset(&pimg, 0, sizeof(pimg));
  pimg.version = PNG_IMAGE_VERSION;
  pimg.width = static_cast<png_uint_32>(img.width);
  pimg.height = static_cast<png_uint_32>(img.height);
  pimg.format = img.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  auto bytes = image_to_bytes(img);
  if (!png_image_write_to_file(&pimg, path.string().c_str(), 0, bytes.data(), 0, nullptr)) {
    throw IOError("png write failed for " + path.string() + ": " + pimg.message);
  }
}

// P6 binary PPM, maxval 255 only.
inline Image load_ppm(const std::vector<std::uint8_t>& bytes, const std::string& name) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (std::isspace(bytes[pos])) {
        ++pos;
      } else if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&]() -> long {
    skip_space();
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) throw FormatError("ppm: bad header in " + name);
    long v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) v = v * 10 + (bytes[pos++] - '0');
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw FormatError("ppm: not P6 in " + name);
  pos = 2;
  long w = read_int();
  long h = read_int();
  long maxval = read_int();
  if (w < 1 || h < 1) throw FormatError("ppm: bad dimensions in " + name);
  if (maxval != 255) throw FormatError("ppm: only maxval 255 supported in " + name);
  ++pos;  // single whitespace after maxval
  const std::size_t need = static_cast<std::size_t>(w) * h * 3;
  if (bytes.size() < pos + need) throw FormatError("ppm: truncated pixel data in " + name);
  return image_from_bytes(static_cast<int>(h), static_cast<int>(w), 3, bytes.data() + pos);
}

inline void save_ppm(const Image& img, const std::filesystem::path& path) {
  if (img.channels != 3) throw FormatError("ppm: only 3-channel images");
  std::string header =
      "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  auto bytes = image_to_bytes(img);
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), bytes.begin(), bytes.end());
  write_file_bytes(path, out);
}

}  // namespace detail

inline Image load_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IOError("image not found: " + path.string());
  auto bytes = read_file_bytes(path);
  if (bytes.size() >= 8 && bytes[0] == 0x89 && bytes[1] == 'P' && bytes[2] == 'N' && bytes[3] == 'G') {
    return detail::load_png(path);
  }
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') {
    return detail::load_ppm(bytes, path.string());
  }
  throw FormatError("unsupported image encoding: " + path.string());
}

inline void save_image(const Image& img, const std::filesystem::path& path) {
  if (path.has_parent_path() && !std::filesystem::exists(path.parent_path())) {
    throw IOError("parent directory does not exist: " + path.parent_path().string());
  }
  auto ext = path.extension().string();
  for (auto& ch : ext) ch = static_cast<char>(std::tolower(ch));
  if (ext == ".png") {
    detail::save_png(img, path);
  } else if (ext == ".ppm") {
    detail::save_ppm(img, path);
  } else {
    throw FormatError("unsupported image extension: " + path.string());
  }
}

// Shades-of-gray color constancy: scales each channel so the Minkowski
// p-norm means agree (p=1 gray-world, p -> inf white-patch). An all-zero
// channel is left unscaled.
inline Image shades_of_gray(const Image& img, double p = 6.0) {
  if (p < 1.0) throw ContractError("shades_of_gray: p must be >= 1");
  if (img.channels != 3) return img;
  const std::size_t n = static_cast<std::size_t>(img.height) * img.width;
  double est[3];
  for (int c = 0; c < 3; ++c) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      acc += std::pow(static_cast<double>(img.pixels[i * 3 + c]), p);
    }
    est[c] = std::pow(acc / static_cast<double>(n), 1.0 / p);
  }
  const double mean_est = (est[0] + est[1] + est[2]) / 3.0;
  double scale[3];
  for (int c = 0; c < 3; ++c) scale[c] = est[c] > 0.0 ? mean_est / est[c] : 1.0;
  Image out = img;
  for (std::size_t i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) {
      out.pixels[i * 3 + c] = std::clamp(
          static_cast<float>(static_cast<double>(img.pixels[i * 3 + c]) * scale[c]), 0.0f, 1.0f);
    }
  }
  return out;
}

namespace detail {

// Full-range YCbCr (JPEG convention).
inline void rgb_to_ycbcr(float r, float g, float b, float& y, float& cb, float& cr) {
  y = 0.299f * r + 0.587f * g + 0.114f * b;
  cb = 0.5f + (b - y) / 1.772f;
  cr = 0.5f + (r - y) / 1.402f;
}

inline void ycbcr_to_rgb(float y, float cb, float cr, float& r, float& g, float& b) {
  r = y + 1.402f * (cr - 0.5f);
  b = y + 1.772f * (cb - 0.5f);
  g = (y - 0.299f * r - 0.114f * b) / 0.587f;
}

// Contrast-limited histogram equalization of one plane in [0,1].
// 256 bins, per-tile mapping, bilinear blending between tile mappings.
inline void clahe_plane(std::vector<float>& plane, int h, int w, double clip_limit, int tiles) {
  const int ty = std::min(tiles, h);
  const int tx = std::min(tiles, w);
  const std::size_t n = static_cast<std::size_t>(h) * w;

  std::vector<int> q(n);
  for (std::size_t i = 0; i < n; ++i) {
    q[i] = std::clamp(static_cast<int>(std::lround(plane[i] * 255.0f)), 0, 255);
  }

  // per-tile lookup tables kept as doubles; rounding happens once at the end
  std::vector<std::array<double, 256>> luts(static_cast<std::size_t>(ty) * tx);
  for (int i = 0; i < ty; ++i) {
    const int y0 = i * h / ty, y1 = (i + 1) * h / ty;
    for (int j = 0; j < tx; ++j) {
      const int x0 = j * w / tx, x1 = (j + 1) * w / tx;
      double hist[256] = {0};
      const double count = static_cast<double>(y1 - y0) * (x1 - x0);
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) hist[q[static_cast<std::size_t>(y) * w + x]] += 1.0;
      int occupied = 0;
      for (auto b : hist) occupied += b > 0.0 ? 1 : 0;
      if (occupied <= 1) {
        // empty tile or a single occupied level: the mapping is the identity
        auto& lut = luts[static_cast<std::size_t>(i) * tx + j];
        for (int v = 0; v < 256; ++v) lut[v] = v;
        continue;
      }
      if (std::isfinite(clip_limit)) {
        const double limit = clip_limit * count / 256.0;
        double excess = 0.0;
        for (auto& b : hist) {
          if (b > limit) {
            excess += b - limit;
            b = limit;
          }
        }
        const double add = excess / 256.0;
        for (auto& b : hist) b += add;
      }
      double cdf = 0.0, cdf_min = -1.0;
      auto& lut = luts[static_cast<std::size_t>(i) * tx + j];
      for (int v = 0; v < 256; ++v) {
        cdf += hist[v];
        if (cdf_min < 0.0 && hist[v] > 0.0) cdf_min = cdf;
        lut[v] = cdf;
      }
      for (int v = 0; v < 256; ++v) {
        lut[v] = std::clamp((lut[v] - cdf_min) / (count - cdf_min) * 255.0, 0.0, 255.0);
      }
    }
  }

  auto tile_coord = [](int pos, int extent, int ntiles, int& lo, int& hi, double& frac) {
    double f = (pos + 0.5) * static_cast<double>(ntiles) / extent - 0.5;
    if (f <= 0.0) {
      lo = hi = 0;
      frac = 0.0;
    } else if (f >= ntiles - 1) {
      lo = hi = ntiles - 1;
      frac = 0.0;
    } else {
      lo = static_cast<int>(f);
      hi = lo + 1;
      frac = f - lo;
    }
  };

  for (int y = 0; y < h; ++y) {
    int i0, i1;
    double fy;
    tile_coord(y, h, ty, i0, i1, fy);
    for (int x = 0; x < w; ++x) {
      int j0, j1;
      double fx;
      tile_coord(x, w, tx, j0, j1, fx);
      const int v = q[static_cast<std::size_t>(y) * w + x];
      const double top = (1.0 - fx) * luts[static_cast<std::size_t>(i0) * tx + j0][v] +
                         fx * luts[static_cast<std::size_t>(i0) * tx + j1][v];
      const double bot = (1.0 - fx) * luts[static_cast<std::size_t>(i1) * tx + j0][v] +
                         fx * luts[static_cast<std::size_t>(i1) * tx + j1][v];
      const double mapped = (1.0 - fy) * top + fy * bot;
      plane[static_cast<std::size_t>(y) * w + x] =
          std::clamp(static_cast<float>(std::lround(mapped) / 255.0), 0.0f, 1.0f);
    }
  }
}

}  // namespace detail

// CLAHE on the luma channel (chroma untouched); `per_channel` applies the
// equalization to each RGB channel independently instead. Pass an infinite
// clip_limit to disable clipping.
inline Image clahe(const Image& img, double clip_limit = 2.0, int tiles = 8,
                   bool per_channel = false) {
  if (!(clip_limit >= 1.0)) throw ContractError("clahe: clip_limit must be >= 1");
  if (tiles < 1) throw ContractError("clahe: tiles must be >= 1");
  const std::size_t n = static_cast<std::size_t>(img.height) * img.width;
  Image out = img;
  if (img.channels == 1) {
    detail::clahe_plane(out.pixels, img.height, img.width, clip_limit, tiles);
  } else if (per_channel) {
    std::vector<float> plane(n);
    for (int c = 0; c < 3; ++c) {
      for (std::size_t i = 0; i < n; ++i) plane[i] = img.pixels[i * 3 + c];
      detail::clahe_plane(plane, img.height, img.width, clip_limit, tiles);
      for (std::size_t i = 0; i < n; ++i) out.pixels[i * 3 + c] = plane[i];
    }
  } else {
    std::vector<float> luma(n), cb(n), cr(n);
    for (std::size_t i = 0; i < n; ++i) {
      detail::rgb_to_ycbcr(img.pixels[i * 3], img.pixels[i * 3 + 1], img.pixels[i * 3 + 2], luma[i],
                           cb[i], cr[i]);
    }
    detail::clahe_plane(luma, img.height, img.width, clip_limit, tiles);
    for (std::size_t i = 0; i < n; ++i) {
      float r, g, b;
      detail::ycbcr_to_rgb(luma[i], cb[i], cr[i], r, g, b);
      out.pixels[i * 3] = r;
      out.pixels[i * 3 + 1] = g;
      out.pixels[i * 3 + 2] = b;
    }
  }
  clip_pixels(out);
  return out;
}

// Half-pixel-center convention throughout: src = (dst + 0.5) * in/out - 0.5,
// clamped to the valid range.
inline Image resize_bilinear(const Image& img, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw ContractError("resize_bilinear: output extents must be >= 1");
  Image out(out_h, out_w, img.channels);
  const double sy = static_cast<double>(img.height) / out_h;
  const double sx = static_cast<double>(img.width) / out_w;
  for (int y = 0; y < out_h; ++y) {
    double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height - 1));
    int y0 = static_cast<int>(fy);
    int y1 = std::min(y0 + 1, img.height - 1);
    double ty = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width - 1));
      int x0 = static_cast<int>(fx);
      int x1 = std::min(x0 + 1, img.width - 1);
      double tx = fx - x0;
      for (int c = 0; c < img.channels; ++c) {
        double v = (1 - ty) * ((1 - tx) * img.at(y0, x0, c) + tx * img.at(y0, x1, c)) +
                   ty * ((1 - tx) * img.at(y1, x0, c) + tx * img.at(y1, x1, c));
        out.at(y, x, c) = std::clamp(static_cast<float>(v), 0.0f, 1.0f);
      }
    }
  }
  return out;
}

namespace detail {

// Catmull-Rom kernel (bicubic with a = -0.5).
inline double cubic_weight(double x) {
  x = std::abs(x);
  if (x <= 1.0) return (1.5 * x - 2.5) * x * x + 1.0;
  if (x < 2.0) return ((-0.5 * x + 2.5) * x - 4.0) * x + 2.0;
  return 0.0;
}

}  // namespace detail

inline Image resize_bicubic(const Image& img, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw ContractError("resize_bicubic: output extents must be >= 1");
  Image out(out_h, out_w, img.channels);
  const double sy = static_cast<double>(img.height) / out_h;
  const double sx = static_cast<double>(img.width) / out_w;
  for (int y = 0; y < out_h; ++y) {
    const double fy = (y + 0.5) * sy - 0.5;
    const int yb = static_cast<int>(std::floor(fy));
    double wy[4];
    for (int i = 0; i < 4; ++i) wy[i] = detail::cubic_weight(fy - (yb - 1 + i));
    for (int x = 0; x < out_w; ++x) {
      const double fx = (x + 0.5) * sx - 0.5;
      const int xb = static_cast<int>(std::floor(fx));
      double wx[4];
      for (int i = 0; i < 4; ++i) wx[i] = detail::cubic_weight(fx - (xb - 1 + i));
      for (int c = 0; c < img.channels; ++c) {
        double acc = 0.0;
        for (int i = 0; i < 4; ++i) {
          const int yy = std::clamp(yb - 1 + i, 0, img.height - 1);
          double row = 0.0;
          for (int j = 0; j < 4; ++j) {
            const int xx = std::clamp(xb - 1 + j, 0, img.width - 1);
            row += wx[j] * img.at(yy, xx, c);
          }
          acc += wy[i] * row;
        }
        out.at(y, x, c) = std::clamp(static_cast<float>(acc), 0.0f, 1.0f);
      }
    }
  }
  return out;
}

enum class SrMethod { bilinear, bicubic, file };

inline SrMethod sr_method_from_string(const std::string& s) {
  if (s == "bilinear") return SrMethod::bilinear;
  if (s == "bicubic") return SrMethod::bicubic;
  if (s == "file") return SrMethod::file;
  throw ConfigError("unknown sr method: " + s);
}

inline std::string to_string(SrMethod m) {
  switch (m) {
    case SrMethod::bilinear: return "bilinear";
    case SrMethod::bicubic: return "bicubic";
    default: return "file";
  }
}

// Path of the precomputed upscale target that sits next to a source image.
inline std::filesystem::path sr_sibling_path(const std::filesystem::path& image_path) {
  std::filesystem::path p = image_path;
  p.replace_extension();
  p += ".sr.png";
  return p;
}

// Upscaling target for the auxiliary regression task. `source_path` is the
// on-disk location of the input image and is only consulted in file mode,
// where an externally generated `<stem>.sr.png` sibling is required.
inline Image sr_target(const Image& img, SrMethod method, int factor = 2,
                       const std::filesystem::path& source_path = {}) {
  if (factor < 2 || (factor & (factor - 1)) != 0) {
    throw ContractError("sr_target: factor must be a power of two >= 2");
  }
  switch (method) {
    case SrMethod::bilinear:
      return resize_bilinear(img, img.height * factor, img.width * factor);
    case SrMethod::bicubic:
      return resize_bicubic(img, img.height * factor, img.width * factor);
    case SrMethod::file: {
      if (source_path.empty()) throw ContractError("sr_target: file mode needs the source path");
      auto sibling = sr_sibling_path(source_path);
      if (!std::filesystem::exists(sibling)) {
        throw IOError("sr_target: missing sibling " + sibling.string());
      }
      Image target = load_image(sibling);
      if (target.height != img.height * factor || target.width != img.width * factor ||
          target.channels != img.channels) {
        throw ShapeError("sr_target: sibling " + sibling.string() + " is " +
                         std::to_string(target.height) + "x" + std::to_string(target.width) +
                         ", expected " + std::to_string(img.height * factor) + "x" +
                         std::to_string(img.width * factor));
      }
      return target;
    }
  }
  throw ContractError("sr_target: unreachable");
}

inline Image hflip(const Image& img) {
  Image out(img.height, img.width, img.channels);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(y, img.width - 1 - x, c);
  return out;
}

inline Image vflip(const Image& img) {
  Image out(img.height, img.width, img.channels);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(img.height - 1 - y, x, c);
  return out;
}

struct AugmentConfig {
  double hflip_prob = 0.5;
  double vflip_prob = 0.5;
  double scale_lo = 0.9;
  double scale_hi = 1.1;
  double brightness = 0.2;
  double contrast = 0.2;
  double saturation = 0.2;
  double noise_sigma = 0.01;

  void validate() const {
    auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!prob(hflip_prob) || !prob(vflip_prob)) throw ConfigError("augment: probabilities must be in [0,1]");
    if (!(scale_lo <= 1.0 && 1.0 <= scale_hi)) throw ConfigError("augment: scale range must contain 1");
    if (brightness < 0 || contrast < 0 || saturation < 0 || noise_sigma < 0) {
      throw ConfigError("augment: jitter magnitudes must be >= 0");
    }
  }
};

// Geometric ops that were actually applied, so a precomputed paired target
// can be kept aligned with the augmented input.
struct AugmentOps {
  bool hflip = false;
  bool vflip = false;
};

namespace detail {

inline Image zoom_about_center(const Image& img, double s) {
  Image out(img.height, img.width, img.channels);
  const double cy = (img.height - 1) / 2.0;
  const double cx = (img.width - 1) / 2.0;
  for (int y = 0; y < img.height; ++y) {
    double fy = std::clamp(cy + (y - cy) / s, 0.0, static_cast<double>(img.height - 1));
    int y0 = static_cast<int>(fy);
    int y1 = std::min(y0 + 1, img.height - 1);
    double ty = fy - y0;
    for (int x = 0; x < img.width; ++x) {
      double fx = std::clamp(cx + (x - cx) / s, 0.0, static_cast<double>(img.width - 1));
      int x0 = static_cast<int>(fx);
      int x1 = std::min(x0 + 1, img.width - 1);
      double tx = fx - x0;
      for (int c = 0; c < img.channels; ++c) {
        double v = (1 - ty) * ((1 - tx) * img.at(y0, x0, c) + tx * img.at(y0, x1, c)) +
                   ty * ((1 - tx) * img.at(y1, x0, c) + tx * img.at(y1, x1, c));
        out.at(y, x, c) = static_cast<float>(v);
      }
    }
  }
  return out;
}

inline float pixel_luma(const Image& img, std::size_t i) {
  if (img.channels == 1) return img.pixels[i];
  return 0.299f * img.pixels[i * 3] + 0.587f * img.pixels[i * 3 + 1] + 0.114f * img.pixels[i * 3 + 2];
}

}  // namespace detail

// Training-time augmentation, applied in a fixed order: horizontal flip,
// vertical flip, scale about center, brightness, contrast, saturation,
// additive Gaussian noise, final clip. Each stage that draws randomness
// draws it unconditionally so the stream layout is independent of the
// config values. Deterministic for a given rng state.
inline Image augment(const Image& img, const AugmentConfig& cfg, Rng& rng,
                     AugmentOps* applied = nullptr) {
  cfg.validate();
  const bool do_h = rng.uniform() < cfg.hflip_prob;
  const bool do_v = rng.uniform() < cfg.vflip_prob;
  const double s = rng.uniform(cfg.scale_lo, cfg.scale_hi);
  const double d_bright = rng.uniform(-cfg.brightness, cfg.brightness);
  const double d_contrast = rng.uniform(-cfg.contrast, cfg.contrast);
  const double d_sat = rng.uniform(-cfg.saturation, cfg.saturation);
  if (applied) *applied = AugmentOps{do_h, do_v};

  Image out = img;
  if (do_h) out = hflip(out);
  if (do_v) out = vflip(out);
  if (s != 1.0) out = detail::zoom_about_center(out, s);
  if (d_bright != 0.0) {
    for (auto& v : out.pixels) v += static_cast<float>(d_bright);
  }
  if (d_contrast != 0.0) {
    const std::size_t n = static_cast<std::size_t>(out.height) * out.width;
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += detail::pixel_luma(out, i);
    const float m = static_cast<float>(mean / static_cast<double>(n));
    const float f = static_cast<float>(1.0 + d_contrast);
    for (auto& v : out.pixels) v = m + (v - m) * f;
  }
  if (d_sat != 0.0 && out.channels == 3) {
    const std::size_t n = static_cast<std::size_t>(out.height) * out.width;
    const float f = static_cast<float>(1.0 + d_sat);
    for (std::size_t i = 0; i < n; ++i) {
      const float l = detail::pixel_luma(out, i);
      for (int c = 0; c < 3; ++c) out.pixels[i * 3 + c] = l + (out.pixels[i * 3 + c] - l) * f;
    }
  }
  if (cfg.noise_sigma > 0.0) {
    for (auto& v : out.pixels) v += static_cast<float>(rng.normal(0.0, cfg.noise_sigma));
  }
  clip_pixels(out);
  return out;
}

}  // namespace dermfuse
