// SPDX-License-Identifier: Apache-2.0
#include "maskdiff/data.hpp"

#include "maskdiff/image_io.hpp"
#include "maskdiff/ops.hpp"
#include "maskdiff/random.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <random>
#include <stdexcept>

namespace maskdiff {
namespace {

constexpr double kFieldSmoothing = 8.0;  // stream function blur sigma = max(h, w) / this

using Rng64 = std::mt19937_64;
namespace fs = std::filesystem;

double uniform(Rng64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

bool inside(const std::vector<Point>& poly, double x, double y) {
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const auto& a = poly[i];
    const auto& b = poly[j];
    if ((a[1] > y) != (b[1] > y) && x < (b[0] - a[0]) * (y - a[1]) / (b[1] - a[1]) + a[0]) in = !in;
  }
  return in;
}

double segment_distance(const Point& a, const Point& b, double x, double y) {
  const double vx = b[0] - a[0], vy = b[1] - a[1];
  const double len2 = vx * vx + vy * vy;
  double u = len2 > 0 ? ((x - a[0]) * vx + (y - a[1]) * vy) / len2 : 0.0;
  u = std::clamp(u, 0.0, 1.0);
  const double dx = a[0] + u * vx - x, dy = a[1] + u * vy - y;
  return std::sqrt(dx * dx + dy * dy);
}

// Positive inside the polygon.
double signed_distance(const std::vector<Point>& poly, double x, double y) {
  double d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) d = std::min(d, segment_distance(poly[j], poly[i], x, y));
  return inside(poly, x, y) ? d : -d;
}

double polygon_area(const std::vector<Point>& poly) {
  double a = 0;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) a += poly[j][0] * poly[i][1] - poly[i][0] * poly[j][1];
  return std::abs(a) / 2;
}

// Gaussian-smoothed white noise with unit standard deviation.
Tensor<float> band_noise(Index h, Index w, double sigma, Rng64& rng) {
  Tensor<float> t = gaussian_blur(normal_tensor<float>(Shape{1, 1, h, w}, rng), sigma);
  const double mean = t.vec().cast<double>().mean();
  const double var = (t.vec().cast<double>().array() - mean).square().mean();
  const auto inv = static_cast<float>(1.0 / std::sqrt(std::max(var, 1e-12)));
  t.array() = (t.array() - static_cast<float>(mean)) * inv;
  return t;
}

std::vector<Point> random_outline(Rng64& rng) {
  std::vector<Point> v;
  if (uniform(rng, 0, 1) < 0.5) {
    const double ratio = uniform(rng, 0.5, 1.0), phi = uniform(rng, 0, std::numbers::pi);
    for (int i = 0; i < 64; ++i) {
      const double a = 2 * std::numbers::pi * i / 64;
      const double x = std::cos(a), y = ratio * std::sin(a);
      v.push_back({x * std::cos(phi) - y * std::sin(phi), x * std::sin(phi) + y * std::cos(phi)});
    }
  } else {
    const int k = std::uniform_int_distribution<int>(5, 9)(rng);
    for (int i = 0; i < k; ++i) {
      const double a = 2 * std::numbers::pi * (i + uniform(rng, -0.3, 0.3)) / k;
      const double r = uniform(rng, 0.55, 1.0);
      v.push_back({r * std::cos(a), r * std::sin(a)});
    }
  }
  return v;
}

double mask_fraction(const Tensor<float>& m) { return static_cast<double>(m.vec().sum()) / static_cast<double>(m.size()); }

void check_binary(const Tensor<float>& m, const char* what) {
  for (Index i = 0; i < m.size(); ++i) {
    if (m[i] != 0.0f && m[i] != 1.0f) throw std::invalid_argument(std::string(what) + ": mask is not binary");
  }
}

Tensor<float> binarize(const Tensor<float>& t) {
  Tensor<float> out(t.shape());
  for (Index i = 0; i < t.size(); ++i) out[i] = t[i] >= 0.5f ? 1.0f : 0.0f;
  return out;
}

// Bilinear sample of plane p (h x w) at continuous pixel-centre coordinates.
float sample_plane(const float* p, Index h, Index w, double x, double y) {
  const double fx = std::clamp(x - 0.5, 0.0, static_cast<double>(w - 1));
  const double fy = std::clamp(y - 0.5, 0.0, static_cast<double>(h - 1));
  const auto x0 = static_cast<Index>(std::floor(fx)), y0 = static_cast<Index>(std::floor(fy));
  const Index x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
  const double ax = fx - static_cast<double>(x0), ay = fy - static_cast<double>(y0);
  const double top = (1 - ax) * p[y0 * w + x0] + ax * p[y0 * w + x1];
  const double bot = (1 - ax) * p[y1 * w + x0] + ax * p[y1 * w + x1];
  return static_cast<float>((1 - ay) * top + ay * bot);
}

// out(y, x) = in(y + dy, x + dx) for every plane.
Tensor<float> warp(const Tensor<float>& x, const Tensor<float>& field) {
  const Index planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<float> out(x.shape());
  const float* dx = field.data();
  const float* dy = field.data() + h * w;
  for (Index p = 0; p < planes; ++p) {
    const float* src = x.data() + p * h * w;
    float* dst = out.data() + p * h * w;
    for (Index r = 0; r < h; ++r) {
      for (Index c = 0; c < w; ++c) {
        const Index i = r * w + c;
        dst[i] = sample_plane(src, h, w, static_cast<double>(c) + 0.5 + dx[i], static_cast<double>(r) + 0.5 + dy[i]);
      }
    }
  }
  return out;
}

}  // namespace

Tensor<float> rasterize_polygon(const std::vector<Point>& polygon, Index h, Index w) {
  Tensor<float> m(Shape{1, 1, h, w});
  if (polygon.size() < 3) return m;
  for (Index r = 0; r < h; ++r) {
    for (Index c = 0; c < w; ++c) m(0, 0, r, c) = inside(polygon, static_cast<double>(c) + 0.5, static_cast<double>(r) + 0.5) ? 1.0f : 0.0f;
  }
  return m;
}

Sample generate_synthetic_sample(int size, std::uint64_t seed, int index) {
  if (size <= 0 || size % 32 != 0) {
    throw std::invalid_argument("generate_synthetic: size " + std::to_string(size) + " is not a positive multiple of 32");
  }
  Rng64 rng(derive_seed(seed, {static_cast<std::uint64_t>(index)}));
  const Index h = size, w = size;
  const double s = size;

  std::array<double, 3> base{}, slope{}, shift{};
  for (auto& b : base) b = uniform(rng, 0.25, 0.75);
  for (auto& g : slope) g = uniform(rng, -0.25, 0.25);
  for (auto& d : shift) d = (uniform(rng, 0, 1) < 0.5 ? -1.0 : 1.0) * uniform(rng, 0.04, 0.10);
  const double theta = uniform(rng, 0, 2 * std::numbers::pi);
  const Tensor<float> coarse = band_noise(h, w, 1.2, rng);
  const Tensor<float> tint = band_noise(h, w, 2.0, rng);
  const Tensor<float> fine = band_noise(h, w, 0.6, rng);

  std::vector<Point> poly;
  Tensor<float> mask;
  for (int attempt = 0;; ++attempt) {
    if (attempt > 1000) throw std::runtime_error("generate_synthetic: could not place a region");
    std::vector<Point> outline = random_outline(rng);
    const double target = uniform(rng, 0.03, 0.25) * s * s;
    const double scale = std::sqrt(target / polygon_area(outline));
    double radius = 0;
    for (const auto& p : outline) radius = std::max(radius, scale * std::hypot(p[0], p[1]));
    if (2 * radius + 4 > s) continue;
    const double cx = uniform(rng, radius + 2, s - radius - 2), cy = uniform(rng, radius + 2, s - radius - 2);
    poly.clear();
    for (const auto& p : outline) poly.push_back({cx + scale * p[0], cy + scale * p[1]});
    mask = rasterize_polygon(poly, h, w);
    const double frac = mask_fraction(mask);
    if (frac >= 0.02 && frac <= 0.30) break;
  }

  Sample out;
  out.image = Tensor<float>(Shape{1, 3, h, w});
  for (Index r = 0; r < h; ++r) {
    for (Index c = 0; c < w; ++c) {
      const double x = (static_cast<double>(c) + 0.5) / s - 0.5, y = (static_cast<double>(r) + 0.5) / s - 0.5;
      const double along = x * std::cos(theta) + y * std::sin(theta);
      const double sd = signed_distance(poly, static_cast<double>(c) + 0.5, static_cast<double>(r) + 0.5);
      const double alpha = std::clamp((sd + 1.0) / 2.0, 0.0, 1.0);
      const Index i = r * w + c;
      for (Index k = 0; k < 3; ++k) {
        const auto uk = static_cast<std::size_t>(k);
        const double smooth = base[uk] + slope[uk] * along;
        const double bg = smooth + 0.07 * coarse[i] + 0.02 * (k == 1 ? tint[i] : -tint[i]);
        const double fill = smooth + shift[uk] + 0.025 * fine[i];
        out.image(0, k, r, c) = static_cast<float>(std::clamp((1 - alpha) * bg + alpha * fill, 0.0, 1.0));
      }
    }
  }
  out.gt_mask = std::move(mask);
  out.gt_edge = derive_edge(out.gt_mask);
  out.id = "synth_" + std::to_string(seed) + "_" + std::to_string(index);
  out.region = std::move(poly);
  return out;
}

Dataset generate_synthetic(int n, int size, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("generate_synthetic: n must be at least 1");
  Dataset d;
  d.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) d.push_back(generate_synthetic_sample(size, seed, i));
  return d;
}

Tensor<float> derive_edge(const Tensor<float>& mask, int width) {
  if (mask.rank() != 4 || mask.dim(1) != 1) throw ShapeError("derive_edge: mask must be [N, 1, H, W]");
  if (width < 0) throw std::invalid_argument("derive_edge: negative width");
  check_binary(mask, "derive_edge");
  const Index n = mask.dim(0), h = mask.dim(2), w = mask.dim(3);
  Tensor<float> out(mask.shape());
  std::vector<float> rmax(static_cast<std::size_t>(h * w)), rmin(rmax.size());
  for (Index k = 0; k < n; ++k) {
    const float* m = mask.data() + k * h * w;
    // Clipping the window to the image is the same as replicate padding for max/min.
    for (Index r = 0; r < h; ++r) {
      for (Index c = 0; c < w; ++c) {
        float hi = 0, lo = 1;
        for (Index cc = std::max<Index>(0, c - width); cc <= std::min<Index>(w - 1, c + width); ++cc) {
          hi = std::max(hi, m[r * w + cc]);
          lo = std::min(lo, m[r * w + cc]);
        }
        rmax[static_cast<std::size_t>(r * w + c)] = hi;
        rmin[static_cast<std::size_t>(r * w + c)] = lo;
      }
    }
    float* o = out.data() + k * h * w;
    for (Index r = 0; r < h; ++r) {
      for (Index c = 0; c < w; ++c) {
        float hi = 0, lo = 1;
        for (Index rr = std::max<Index>(0, r - width); rr <= std::min<Index>(h - 1, r + width); ++rr) {
          hi = std::max(hi, rmax[static_cast<std::size_t>(rr * w + c)]);
          lo = std::min(lo, rmin[static_cast<std::size_t>(rr * w + c)]);
        }
        o[r * w + c] = hi != lo ? 1.0f : 0.0f;
      }
    }
  }
  return out;
}

std::string to_string(AttackKind kind) {
  switch (kind) {
    case AttackKind::gaussian_noise: return "gaussian_noise";
    case AttackKind::gaussian_blur: return "gaussian_blur";
    case AttackKind::scaling: return "scaling";
    case AttackKind::distortion: return "distortion";
  }
  return "unknown";
}

AttackKind parse_attack_kind(const std::string& name) {
  for (AttackKind k : {AttackKind::gaussian_noise, AttackKind::gaussian_blur, AttackKind::scaling, AttackKind::distortion}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown attack kind: " + name);
}

double max_attack_strength(AttackKind kind) {
  switch (kind) {
    case AttackKind::gaussian_noise: return 1.0;
    case AttackKind::gaussian_blur: return 10.0;
    case AttackKind::scaling: return 0.9;
    case AttackKind::distortion: return 16.0;
  }
  return 0.0;
}

std::vector<AttackSpec> default_attack_grid(std::uint64_t seed) {
  std::vector<AttackSpec> g;
  auto add = [&](AttackKind k, std::initializer_list<double> strengths) {
    for (double s : strengths) g.push_back({k, s, seed});
  };
  add(AttackKind::gaussian_noise, {0.0, 0.02, 0.05, 0.1});
  add(AttackKind::gaussian_blur, {0.0, 1.0, 2.0, 3.0});
  add(AttackKind::scaling, {0.0, 0.25, 0.5});
  add(AttackKind::distortion, {0.0, 2.0, 4.0});
  return g;
}

Tensor<float> gaussian_blur(const Tensor<float>& x, double sigma) {
  if (!(sigma >= 0)) throw std::invalid_argument("gaussian_blur: sigma must be non-negative");
  if (x.rank() != 4) throw ShapeError("gaussian_blur: expected NCHW");
  if (sigma == 0) return x;
  const auto radius = static_cast<Index>(std::ceil(3 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double total = 0;
  for (Index i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = v;
    total += v;
  }
  for (auto& v : k) v /= total;
  const Index planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<float> out(x.shape());
  std::vector<double> tmp(static_cast<std::size_t>(h * w));
  for (Index p = 0; p < planes; ++p) {
    const float* src = x.data() + p * h * w;
    for (Index r = 0; r < h; ++r) {
      for (Index c = 0; c < w; ++c) {
        double acc = 0;
        for (Index i = -radius; i <= radius; ++i) acc += k[static_cast<std::size_t>(i + radius)] * src[r * w + std::clamp<Index>(c + i, 0, w - 1)];
        tmp[static_cast<std::size_t>(r * w + c)] = acc;
      }
    }
    float* dst = out.data() + p * h * w;
    for (Index r = 0; r < h; ++r) {
      for (Index c = 0; c < w; ++c) {
        double acc = 0;
        for (Index i = -radius; i <= radius; ++i) {
          acc += k[static_cast<std::size_t>(i + radius)] * tmp[static_cast<std::size_t>(std::clamp<Index>(r + i, 0, h - 1) * w + c)];
        }
        dst[r * w + c] = static_cast<float>(acc);
      }
    }
  }
  return out;
}

Tensor<float> resize_planes(const Tensor<float>& x, Index out_h, Index out_w) {
  if (x.rank() != 4) throw ShapeError("resize_planes: expected NCHW");
  const Index planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<float> out(Shape{x.dim(0), x.dim(1), out_h, out_w});
  for (Index p = 0; p < planes; ++p) {
    bilinear_resize_plane(x.data() + p * h * w, h, w, out.data() + p * out_h * out_w, out_h, out_w);
  }
  return out;
}

Tensor<float> smooth_displacement_field(Index h, Index w, double amplitude, std::uint64_t seed) {
  Rng64 rng(seed);
  const double sigma = static_cast<double>(std::max(h, w)) / kFieldSmoothing;
  // Smoothed noise is a stream function psi; the field (d psi/dy, -d psi/dx)
  // is divergence free, so warps preserve area to first order. The blur runs
  // on a canvas with a 3 sigma margin so its border clamp does not leak in.
  const auto margin = static_cast<Index>(std::ceil(3 * sigma)) + 1;
  const Index ch = h + 2 * margin, cw = w + 2 * margin;
  const Tensor<float> psi = gaussian_blur(normal_tensor<float>(Shape{1, 1, ch, cw}, rng), sigma);
  Tensor<float> field(Shape{1, 2, h, w});
  for (Index r = 0; r < h; ++r) {
    for (Index c = 0; c < w; ++c) {
      const Index y = r + margin, x = c + margin;
      field(0, 0, r, c) = 0.5f * (psi(0, 0, y + 1, x) - psi(0, 0, y - 1, x));
      field(0, 1, r, c) = -0.5f * (psi(0, 0, y, x + 1) - psi(0, 0, y, x - 1));
    }
  }
  double peak = 0;
  for (Index i = 0; i < h * w; ++i) peak = std::max(peak, std::hypot(double(field[i]), double(field[h * w + i])));
  const auto gain = static_cast<float>(peak > 0 ? amplitude / peak : 0.0);
  field.array() *= gain;
  return field;
}

Sample apply_attack(const Sample& sample, const AttackSpec& spec) {
  const double maxs = max_attack_strength(spec.kind);
  if (!(spec.strength >= 0 && spec.strength <= maxs)) {
    throw std::invalid_argument("attack " + to_string(spec.kind) + ": strength " + std::to_string(spec.strength) +
                                " outside [0, " + std::to_string(maxs) + "]");
  }
  if (spec.strength == 0) return sample;
  Sample out = sample;
  const std::uint64_t stream = derive_seed(spec.seed, {fnv1a(sample.id), static_cast<std::uint64_t>(spec.kind)});
  const Index h = sample.height(), w = sample.width();
  switch (spec.kind) {
    case AttackKind::gaussian_noise: {
      Rng64 rng(stream);
      const Tensor<float> z = normal_tensor<float>(sample.image.shape(), rng);
      out.image.array() = (sample.image.array() + static_cast<float>(spec.strength) * z.array()).min(1.0f).max(0.0f);
      break;
    }
    case AttackKind::gaussian_blur:
      out.image = gaussian_blur(sample.image, spec.strength);
      break;
    case AttackKind::scaling: {
      const Index sh = std::max<Index>(1, std::lround(static_cast<double>(h) * (1.0 - spec.strength)));
      const Index sw = std::max<Index>(1, std::lround(static_cast<double>(w) * (1.0 - spec.strength)));
      out.image = resize_planes(resize_planes(sample.image, sh, sw), h, w);
      out.gt_mask = binarize(resize_planes(resize_planes(sample.gt_mask, sh, sw), h, w));
      out.gt_edge = derive_edge(out.gt_mask);
      break;
    }
    case AttackKind::distortion: {
      const Tensor<float> field = smooth_displacement_field(h, w, spec.strength, stream);
      out.image = warp(sample.image, field);
      out.gt_mask = binarize(warp(sample.gt_mask, field));
      out.gt_edge = derive_edge(out.gt_mask);
      // Outline vertices move to the point p with p + d(p) = v.
      for (auto& v : out.region) {
        Point p = v;
        for (int it = 0; it < 50; ++it) {
          p = {v[0] - sample_plane(field.data(), h, w, p[0], p[1]), v[1] - sample_plane(field.data() + h * w, h, w, p[0], p[1])};
        }
        v = p;
      }
      break;
    }
  }
  return out;
}

Dataset load_folder(const fs::path& root, std::vector<std::string>* unpaired) {
  if (!fs::is_directory(root)) throw std::runtime_error("load_folder: not a directory: " + root.string());
  auto list = [](const fs::path& dir) {
    std::map<std::string, fs::path> files;
    if (!fs::is_directory(dir)) return files;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (!e.is_regular_file()) continue;
      std::string ext = e.path().extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
      if (ext == ".png") files.emplace(e.path().stem().string(), e.path());
    }
    return files;
  };
  const auto images = list(root / "images");
  const auto masks = list(root / "masks");
  Dataset d;
  for (const auto& [id, path] : images) {
    const auto m = masks.find(id);
    if (m == masks.end()) {
      if (unpaired != nullptr) unpaired->push_back("images/" + path.filename().string());
      continue;
    }
    Sample s;
    s.id = id;
    s.image = to_tensor(read_png(path, 3));
    const Tensor<float> raw = to_tensor(read_png(m->second, 1));
    if (raw.dim(2) != s.image.dim(2) || raw.dim(3) != s.image.dim(3)) {
      throw ShapeError("load_folder: mask size " + std::to_string(raw.dim(3)) + "x" + std::to_string(raw.dim(2)) +
                       " does not match image size " + std::to_string(s.image.dim(3)) + "x" +
                       std::to_string(s.image.dim(2)) + " for sample '" + id + "'");
    }
    s.gt_mask = binarize(raw);
    s.gt_edge = derive_edge(s.gt_mask);
    d.push_back(std::move(s));
  }
  if (unpaired != nullptr) {
    for (const auto& [id, path] : masks) {
      if (images.find(id) == images.end()) unpaired->push_back("masks/" + path.filename().string());
    }
  }
  return d;
}

void export_folder(const Dataset& data, const fs::path& root) {
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");
  for (const auto& s : data) {
    write_png(root / "images" / (s.id + ".png"), to_image(s.image));
    write_png(root / "masks" / (s.id + ".png"), to_image(s.gt_mask));
  }
}

}  // namespace maskdiff
