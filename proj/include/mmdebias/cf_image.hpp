#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mmdebias/core.hpp"
#include "mmdebias/errors.hpp"
#include "mmdebias/image.hpp"
#include "mmdebias/io.hpp"

namespace mmdebias {

struct Grid {
  int rows = 0;
  int cols = 0;
  std::vector<double> v;  // row-major

  Grid() = default;
  Grid(int r, int c, double fill = 0.0)
      : rows(r), cols(c), v(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), fill) {
    if (r <= 0 || c <= 0) throw ConfigError("grid: non-positive dimensions");
  }
  double& at(int r, int c) { return v[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const { return v[static_cast<std::size_t>(r) * cols + c]; }
  double mean() const {
    if (v.empty()) return 0.0;
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  }
};

// Raw per-sample attention dump. `values` is indexed [layer][head][token][patch]
// flattened row-major with patch count = patch_h * patch_w. When pre_pooled is
// set, `values` is already a patch grid and layers/heads/tokens describe the
// source it was pooled from.
struct AttentionRecord {
  std::string sample_id;
  int patch_h = 0;
  int patch_w = 0;
  int layers = 0;
  int heads = 0;
  int tokens = 0;
  bool pre_pooled = false;
  std::vector<double> values;

  std::size_t patches() const {
    return static_cast<std::size_t>(patch_h) * static_cast<std::size_t>(patch_w);
  }
  void validate() const {
    if (patch_h <= 0 || patch_w <= 0) throw ShapeError("attention record: bad patch grid");
    if (pre_pooled) {
      if (values.size() != patches()) throw ShapeError("attention record: pooled size mismatch");
      return;
    }
    if (layers <= 0 || heads <= 0 || tokens <= 0)
      throw ShapeError("attention record: bad source dimensions");
    std::size_t expect = static_cast<std::size_t>(layers) * heads * tokens * patches();
    if (values.size() != expect) throw ShapeError("attention record: value count mismatch");
  }
};

// Row i, column j (both 1-indexed) of a grid with P patches per row map to the
// 1-indexed flat position t = j + P * (i - 1).
inline std::size_t patch_index(std::size_t i, std::size_t j, std::size_t patches_per_row) {
  if (patches_per_row == 0) throw IndexError("patch_index: zero patches per row");
  if (i < 1 || j < 1 || j > patches_per_row)
    throw IndexError("patch_index: position out of range");
  return j + patches_per_row * (i - 1);
}

enum class PoolMode {
  MeanLayersSumRest,  // mean over layers, sum over heads and tokens
  MeanAll             // mean over layers, heads and tokens
};

struct LayerWindow {
  int first = 0;
  int last = 0;  // inclusive
};

// Default pooling window: the last three recorded layers (all of them when
// fewer than three were recorded).
inline LayerWindow default_layer_window(int layers) {
  if (layers <= 0) throw ShapeError("default_layer_window: no layers");
  return {std::max(0, layers - 3), layers - 1};
}

// Collapses raw attention into one scalar per patch. Pre-pooled records pass
// through unchanged.
inline Grid pool_attention(const AttentionRecord& rec,
                           std::optional<LayerWindow> window = std::nullopt,
                           PoolMode mode = PoolMode::MeanLayersSumRest) {
  rec.validate();
  Grid g(rec.patch_h, rec.patch_w);
  if (rec.pre_pooled) {
    g.v = rec.values;
    return g;
  }
  LayerWindow win = window ? *window : default_layer_window(rec.layers);
  if (win.first < 0 || win.last < win.first || win.last >= rec.layers)
    throw IndexError("pool_attention: layer window out of range");
  std::size_t patches = rec.patches();
  std::size_t per_layer = static_cast<std::size_t>(rec.heads) * rec.tokens * patches;
  std::size_t per_head = static_cast<std::size_t>(rec.tokens) * patches;
  for (int l = win.first; l <= win.last; ++l) {
    for (int h = 0; h < rec.heads; ++h) {
      for (int m = 0; m < rec.tokens; ++m) {
        const double* src =
            rec.values.data() + l * per_layer + h * per_head + static_cast<std::size_t>(m) * patches;
        for (std::size_t t = 0; t < patches; ++t) g.v[t] += src[t];
      }
    }
  }
  double denom = static_cast<double>(win.last - win.first + 1);
  if (mode == PoolMode::MeanAll)
    denom *= static_cast<double>(rec.heads) * static_cast<double>(rec.tokens);
  for (double& x : g.v) x /= denom;
  check_finite(g.v, "pool_attention");
  return g;
}

// Min-max rescale to [0, 1]; a constant grid maps to all zeros.
inline Grid normalize_mask(const Grid& g) {
  if (g.v.empty()) throw ShapeError("normalize_mask: empty grid");
  check_finite(g.v, "normalize_mask");
  auto [mn_it, mx_it] = std::minmax_element(g.v.begin(), g.v.end());
  double mn = *mn_it, mx = *mx_it;
  Grid out(g.rows, g.cols);
  if (mx == mn) return out;
  for (std::size_t i = 0; i < g.v.size(); ++i) out.v[i] = (g.v[i] - mn) / (mx - mn);
  return out;
}

// Scales attention up and saturates, so mid-strength regions mask fully.
inline Grid enhance_mask(const Grid& g, double factor = 1.5) {
  if (!(factor > 0.0)) throw ConfigError("enhance_mask: factor must be positive");
  Grid out(g.rows, g.cols);
  for (std::size_t i = 0; i < g.v.size(); ++i) {
    double x = g.v[i];
    if (!(x >= 0.0 && x <= 1.0)) throw DomainError("enhance_mask: input outside [0,1]");
    out.v[i] = std::clamp(factor * x, 0.0, 1.0);
  }
  return out;
}

struct KernelSpec {
  int size = 3;  // odd
  double sigma = 1.0;
};

inline std::vector<double> gaussian_kernel(const KernelSpec& spec) {
  if (spec.size < 1 || spec.size % 2 == 0) throw ConfigError("kernel size must be odd");
  if (!(spec.sigma > 0.0)) throw ConfigError("kernel sigma must be positive");
  int r = spec.size / 2;
  std::vector<double> k(static_cast<std::size_t>(spec.size) * spec.size);
  double sum = 0.0;
  for (int y = -r; y <= r; ++y)
    for (int x = -r; x <= r; ++x) {
      double w = std::exp(-(x * x + y * y) / (2.0 * spec.sigma * spec.sigma));
      k[static_cast<std::size_t>(y + r) * spec.size + (x + r)] = w;
      sum += w;
    }
  for (double& w : k) w /= sum;
  return k;
}

// Gaussian blur with reflected borders. The kernel sums to one, so values stay
// inside [0, 1].
inline Grid smooth_mask(const Grid& g, const KernelSpec& spec = {}) {
  if (g.v.empty()) throw ShapeError("smooth_mask: empty grid");
  if (spec.size > g.rows || spec.size > g.cols)
    throw ConfigError("smooth_mask: kernel larger than grid");
  std::vector<double> k = gaussian_kernel(spec);
  int r = spec.size / 2;
  auto reflect = [](int i, int n) {
    while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
    return i;
  };
  Grid out(g.rows, g.cols);
  for (int y = 0; y < g.rows; ++y)
    for (int x = 0; x < g.cols; ++x) {
      double acc = 0.0;
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          int sy = reflect(y + dy, g.rows);
          int sx = reflect(x + dx, g.cols);
          acc += k[static_cast<std::size_t>(dy + r) * spec.size + (dx + r)] * g.at(sy, sx);
        }
      out.at(y, x) = acc;
    }
  return out;
}

// Align-corners bilinear interpolation, upscale only.
inline Grid resize_mask(const Grid& g, int rows, int cols) {
  if (g.v.empty()) throw ShapeError("resize_mask: empty grid");
  if (rows < g.rows || cols < g.cols) throw ConfigError("resize_mask: target below source size");
  if (rows == g.rows && cols == g.cols) return g;
  Grid out(rows, cols);
  for (int y = 0; y < rows; ++y) {
    double sy = rows > 1 ? static_cast<double>(y) * (g.rows - 1) / (rows - 1) : 0.0;
    int y0 = static_cast<int>(sy);
    int y1 = std::min(y0 + 1, g.rows - 1);
    double fy = sy - y0;
    for (int x = 0; x < cols; ++x) {
      double sx = cols > 1 ? static_cast<double>(x) * (g.cols - 1) / (cols - 1) : 0.0;
      int x0 = static_cast<int>(sx);
      int x1 = std::min(x0 + 1, g.cols - 1);
      double fx = sx - x0;
      double top = g.at(y0, x0) * (1.0 - fx) + g.at(y0, x1) * fx;
      double bot = g.at(y1, x0) * (1.0 - fx) + g.at(y1, x1) * fx;
      out.at(y, x) = top * (1.0 - fy) + bot * fy;
    }
  }
  return out;
}

struct Rgb {
  std::uint8_t r = 128, g = 128, b = 128;
};

// out = round((1 - m) * image + m * fill), per pixel and channel. A zero mask
// returns the input bytes untouched; a unit mask paints the fill color.
inline Image blend(const Image& im, const Grid& mask, Rgb fill = {}) {
  if (mask.rows != im.height || mask.cols != im.width)
    throw ShapeError("blend: mask and image dimensions differ");
  Image out = im;
  const std::uint8_t fill_c[3] = {fill.r, fill.g, fill.b};
  for (int y = 0; y < im.height; ++y) {
    const std::uint8_t* src = im.row(y);
    std::uint8_t* dst = out.row(y);
    for (int x = 0; x < im.width; ++x) {
      double m = mask.at(y, x);
      if (!(m >= 0.0 && m <= 1.0)) throw DomainError("blend: mask value outside [0,1]");
      for (int c = 0; c < 3; ++c) {
        double v = (1.0 - m) * src[x * 3 + c] + m * fill_c[c];
        dst[x * 3 + c] = static_cast<std::uint8_t>(v + 0.5);
      }
    }
  }
  return out;
}

// Final per-pixel mask plus a fingerprint of the processing parameters that
// produced it.
struct AlphaMask {
  Grid grid;
  std::string provenance;
};

struct MaskParams {
  std::optional<LayerWindow> window;  // default: last three layers
  PoolMode mode = PoolMode::MeanLayersSumRest;
  double enhance_factor = 1.5;
  KernelSpec kernel;
  Rgb fill;
};

inline std::string mask_provenance(const MaskParams& p, const AttentionRecord& rec) {
  LayerWindow win = p.window ? *p.window : default_layer_window(rec.layers > 0 ? rec.layers : 1);
  std::string s = "pool=";
  s += p.mode == PoolMode::MeanLayersSumRest ? "mean-sum" : "mean-all";
  s += ";win=" + std::to_string(win.first) + ".." + std::to_string(win.last);
  s += ";enh=" + std::to_string(p.enhance_factor);
  s += ";k=" + std::to_string(p.kernel.size) + "s" + std::to_string(p.kernel.sigma);
  s += ";fill=" + std::to_string(p.fill.r) + "," + std::to_string(p.fill.g) + "," +
       std::to_string(p.fill.b);
  return s;
}

struct CounterfactualImage {
  Image image;
  AlphaMask mask;
};

// Full pipeline: pool -> normalize -> enhance -> smooth -> resize -> blend.
// Each stage names itself in any error it raises.
inline CounterfactualImage generate_counterfactual_image(const Image& im,
                                                         const AttentionRecord& rec,
                                                         const MaskParams& params = {}) {
  Grid pooled = pool_attention(rec, params.window, params.mode);
  Grid norm = normalize_mask(pooled);
  Grid enhanced = enhance_mask(norm, params.enhance_factor);
  Grid smooth = smooth_mask(enhanced, params.kernel);
  Grid full = resize_mask(smooth, im.height, im.width);
  CounterfactualImage out;
  out.image = blend(im, full, params.fill);
  out.mask.grid = std::move(full);
  out.mask.provenance = mask_provenance(params, rec);
  return out;
}

// Attention dumps travel as line records: a header with the schema and the
// grid geometry fingerprint, then one record per sample.
inline void write_attention_records(const std::filesystem::path& path,
                                    const std::vector<AttentionRecord>& records) {
  json header;
  header["schema"] = "attention/1";
  std::string geo;
  for (const auto& r : records)
    geo += r.sample_id + ":" + std::to_string(r.patch_h) + "x" + std::to_string(r.patch_w) + ";";
  header["fingerprint"] = hex64(fnv1a64(geo));
  std::vector<json> rows;
  rows.reserve(records.size());
  for (const auto& r : records) {
    r.validate();
    json j;
    j["sample_id"] = r.sample_id;
    j["patch_h"] = r.patch_h;
    j["patch_w"] = r.patch_w;
    j["layers"] = r.layers;
    j["heads"] = r.heads;
    j["tokens"] = r.tokens;
    j["pre_pooled"] = r.pre_pooled;
    j["values"] = r.values;
    rows.push_back(std::move(j));
  }
  write_line_records(path, header, rows);
}

inline std::vector<AttentionRecord> read_attention_records(const std::filesystem::path& path) {
  LineRecordFile f = read_line_records(path, "attention");
  std::vector<AttentionRecord> out;
  out.reserve(f.records.size());
  for (const auto& j : f.records) {
    AttentionRecord r;
    const std::string where = path.string();
    r.sample_id = require_field<std::string>(j, "sample_id", where);
    r.patch_h = require_field<int>(j, "patch_h", where);
    r.patch_w = require_field<int>(j, "patch_w", where);
    r.layers = require_field<int>(j, "layers", where);
    r.heads = require_field<int>(j, "heads", where);
    r.tokens = require_field<int>(j, "tokens", where);
    r.pre_pooled = j.value("pre_pooled", false);
    r.values = require_field<std::vector<double>>(j, "values", where);
    r.validate();
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace mmdebias
