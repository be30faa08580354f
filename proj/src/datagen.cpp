#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>

#include "json.hpp"
#include "normlab/data.hpp"
#include "normlab/rng.hpp"

namespace normlab {

Shape Dataset::sample_shape() const {
  const auto& s = images.shape();
  return Shape(s.begin() + 1, s.end());
}

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
  const std::size_t per = numel(sample_shape());
  Shape shape = images.shape();
  shape[0] = indices.size();
  std::vector<double> out(indices.size() * per);
  const auto src = images.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= size()) throw Error("dataset: sample index out of range");
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(indices[i] * per), per,
                out.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return Tensor(std::move(shape), std::move(out));
}

Tensor Dataset::onehot(std::span<const std::size_t> indices) const {
  std::vector<double> out(indices.size() * classes, 0.0);
  for (std::size_t i = 0; i < indices.size(); ++i)
    out[i * classes + static_cast<std::size_t>(labels.at(indices[i]))] = 1.0;
  return Tensor(Shape{indices.size(), classes}, std::move(out));
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset d;
  d.images = batch(indices);
  d.classes = classes;
  for (auto i : indices) d.labels.push_back(labels[i]);
  return d;
}

const char* split_name(SplitName s) {
  switch (s) {
    case SplitName::Both: return "Both";
    case SplitName::RedOnly: return "RedOnly";
    case SplitName::BlueOnly: return "BlueOnly";
    case SplitName::None: return "None";
  }
  return "?";
}

// ---------------------------------------------------------------------------

namespace {

struct Point {
  double x, y;
};

// Stroke centre lines on a 28x28 canvas, (x, y) = (column, row).
const std::vector<Point>& glyph_path(int digit) {
  static const std::vector<Point> two = {{8.5, 9.0},   {10.5, 6.5}, {14.0, 5.5}, {17.5, 6.5},
                                         {19.5, 9.5},  {18.5, 12.5}, {15.5, 15.5}, {9.0, 21.5},
                                         {20.0, 21.5}};
  static const std::vector<Point> three = {{8.5, 7.0},   {12.0, 5.5},  {16.0, 5.5},  {19.0, 8.0},
                                           {18.0, 11.0}, {14.0, 13.5}, {18.0, 15.5}, {19.5, 18.5},
                                           {17.0, 21.5}, {13.0, 22.5}, {8.5, 21.0}};
  if (digit == 2) return two;
  if (digit == 3) return three;
  throw Error("digit_glyph: synthetic glyphs exist only for digits 2 and 3, got " +
              std::to_string(digit));
}

double segment_distance(Point p, Point a, Point b) {
  const double vx = b.x - a.x, vy = b.y - a.y;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((p.x - a.x) * vx + (p.y - a.y) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = p.x - (a.x + t * vx), dy = p.y - (a.y + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

struct GlyphPose {
  double dx = 0.0, dy = 0.0;  // translation in pixels
  double angle = 0.0;         // radians
  double scale = 1.0;
  double radius = 1.3;        // stroke radius on the 28-pixel canvas
};

std::vector<double> rasterize(int digit, std::size_t h, std::size_t w, const GlyphPose& pose = {}) {
  const auto& path = glyph_path(digit);
  const double sy = static_cast<double>(h) / 28.0, sx = static_cast<double>(w) / 28.0;
  const double ca = std::cos(pose.angle), sa = std::sin(pose.angle);
  std::vector<double> img(h * w, 0.0);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      // Map the pixel centre back onto the canonical canvas.
      const double px = (static_cast<double>(c) + 0.5 - pose.dx) / sx - 14.0;
      const double py = (static_cast<double>(r) + 0.5 - pose.dy) / sy - 14.0;
      const Point p{(ca * px + sa * py) / pose.scale + 14.0, (-sa * px + ca * py) / pose.scale + 14.0};
      for (std::size_t k = 0; k + 1 < path.size(); ++k)
        if (segment_distance(p, path[k], path[k + 1]) <= pose.radius / pose.scale) {
          img[r * w + c] = 1.0;
          break;
        }
    }
  return img;
}

struct BaseImage {
  std::vector<double> pixels;  // C*H*W, noisy, unclamped
  int label = 0;
};

void paint(std::vector<double>& px, const ShortcutDatasetConfig& cfg, std::array<std::size_t, 2> pos,
           std::array<double, 3> color) {
  const std::size_t plane = cfg.height * cfg.width;
  for (std::size_t r = pos[0]; r < pos[0] + cfg.square_size; ++r)
    for (std::size_t c = pos[1]; c < pos[1] + cfg.square_size; ++c)
      for (std::size_t ch = 0; ch < 3; ++ch)
        px[ch * plane + r * cfg.width + c] = color[ch] * cfg.square_intensity;
}

constexpr std::array<double, 3> kRed = {1.0, 0.0, 0.0};
constexpr std::array<double, 3> kBlue = {0.0, 0.0, 1.0};

std::vector<double> render(const BaseImage& base, const ShortcutDatasetConfig& cfg, bool red,
                           bool blue) {
  std::vector<double> px = base.pixels;
  if (base.label == 1) {
    if (red) paint(px, cfg, cfg.red_square_pos, kRed);
    if (blue) paint(px, cfg, cfg.blue_square_pos, kBlue);
  }
  for (auto& v : px) v = std::clamp(v, 0.0, 1.0);
  return px;
}

Dataset assemble(const std::vector<BaseImage>& bases, std::span<const std::size_t> ids,
                 const ShortcutDatasetConfig& cfg, bool red, bool blue) {
  const std::size_t per = cfg.channels * cfg.height * cfg.width;
  std::vector<double> data(ids.size() * per);
  Dataset d;
  d.classes = 2;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto px = render(bases[ids[i]], cfg, red, blue);
    std::copy(px.begin(), px.end(), data.begin() + static_cast<std::ptrdiff_t>(i * per));
    d.labels.push_back(bases[ids[i]].label);
  }
  d.images = Tensor(Shape{ids.size(), cfg.channels, cfg.height, cfg.width}, std::move(data));
  return d;
}

std::vector<BaseImage> synthetic_bases(const ShortcutDatasetConfig& cfg, std::size_t count) {
  const long j = static_cast<long>(cfg.jitter);
  const double rot = cfg.rotation_deg * std::numbers::pi / 180.0;
  std::vector<BaseImage> out(count);
#pragma omp parallel for schedule(static)
  for (long li = 0; li < static_cast<long>(count); ++li) {
    const auto i = static_cast<std::size_t>(li);
    Rng rng(derive_seed(cfg.seed, "base_image", i));
    BaseImage& b = out[i];
    b.label = static_cast<int>(i % 2);
    GlyphPose pose;
    pose.dy = static_cast<double>(rng.integer(-j, j));
    pose.dx = static_cast<double>(rng.integer(-j, j));
    pose.angle = rng.uniform(-1.0, 1.0) * rot;
    pose.scale = 1.0 + rng.uniform(-1.0, 1.0) * cfg.scale_jitter;
    pose.radius *= 1.0 + rng.uniform(-1.0, 1.0) * cfg.stroke_jitter;
    const auto gray = rasterize(cfg.classes[static_cast<std::size_t>(b.label)], cfg.height, cfg.width, pose);
    b.pixels.resize(cfg.channels * gray.size());
    for (std::size_t ch = 0; ch < cfg.channels; ++ch)
      for (std::size_t p = 0; p < gray.size(); ++p)
        b.pixels[ch * gray.size() + p] = gray[p] + cfg.noise_sigma * rng.normal();
  }
  return out;
}

std::vector<BaseImage> mnist_bases(const ShortcutDatasetConfig& cfg, std::size_t count) {
  const auto images = load_idx_images(cfg.idx_images);
  const auto labels = load_idx_labels(cfg.idx_labels);
  if (images.count != labels.size())
    throw Error("shortcut dataset: " + std::to_string(images.count) + " images but " +
                std::to_string(labels.size()) + " labels");
  if (images.rows != cfg.height || images.cols != cfg.width)
    throw Error("shortcut dataset: IDX images are " + std::to_string(images.rows) + "x" +
                std::to_string(images.cols) + ", config expects " + std::to_string(cfg.height) + "x" +
                std::to_string(cfg.width));
  std::array<std::vector<std::size_t>, 2> pools;
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (std::size_t c = 0; c < 2; ++c)
      if (labels[i] == cfg.classes[c]) pools[c].push_back(i);
  Rng order(derive_seed(cfg.seed, "mnist_order"));
  for (auto& pool : pools) {
    auto perm = order.permutation(pool.size());
    std::vector<std::size_t> shuffled(pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i) shuffled[i] = pool[perm[i]];
    pool = std::move(shuffled);
  }
  const std::size_t need0 = (count + 1) / 2, need1 = count / 2;
  if (pools[0].size() < need0 || pools[1].size() < need1)
    throw Error("shortcut dataset: IDX source has " + std::to_string(pools[0].size()) + "/" +
                std::to_string(pools[1].size()) + " samples of digits " +
                std::to_string(cfg.classes[0]) + "/" + std::to_string(cfg.classes[1]) + ", need " +
                std::to_string(need0) + "/" + std::to_string(need1));
  const std::size_t plane = cfg.height * cfg.width;
  std::vector<BaseImage> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(derive_seed(cfg.seed, "base_image", i));
    BaseImage& b = out[i];
    b.label = static_cast<int>(i % 2);
    const std::size_t src = pools[static_cast<std::size_t>(b.label)][i / 2];
    b.pixels.resize(cfg.channels * plane);
    for (std::size_t ch = 0; ch < cfg.channels; ++ch)
      for (std::size_t p = 0; p < plane; ++p)
        b.pixels[ch * plane + p] = images.pixels[src * plane + p] + cfg.noise_sigma * rng.normal();
  }
  return out;
}

}  // namespace

std::vector<double> digit_glyph(int digit) { return rasterize(digit, 28, 28); }

void validate(const ShortcutDatasetConfig& cfg) {
  auto fail = [](const std::string& m) { throw Error("shortcut dataset: " + m); };
  if (cfg.channels != 3) fail("channels must be 3 (squares are painted in RGB)");
  if (cfg.height < 8 || cfg.width < 8) fail("image must be at least 8x8");
  if (cfg.square_size == 0) fail("square_size must be positive");
  if (!(cfg.noise_sigma >= 0.0)) fail("noise_sigma must be >= 0");
  if (!(cfg.rotation_deg >= 0.0 && cfg.rotation_deg <= 90.0)) fail("rotation_deg must be in [0,90]");
  if (!(cfg.scale_jitter >= 0.0 && cfg.scale_jitter < 0.5)) fail("scale_jitter must be in [0,0.5)");
  if (!(cfg.stroke_jitter >= 0.0 && cfg.stroke_jitter < 1.0)) fail("stroke_jitter must be in [0,1)");
  if (!(cfg.square_intensity > 0.0 && cfg.square_intensity <= 1.0)) fail("square_intensity must be in (0,1]");
  if (cfg.classes[0] == cfg.classes[1]) fail("the two classes must differ");
  if (cfg.train_size < 2 || cfg.test_size < 2) fail("train_size and test_size must be >= 2");
  for (auto pos : {cfg.red_square_pos, cfg.blue_square_pos})
    if (pos[0] + cfg.square_size > cfg.height || pos[1] + cfg.square_size > cfg.width)
      fail("square at (" + std::to_string(pos[0]) + "," + std::to_string(pos[1]) +
           ") does not fit inside the image");
  const auto& r = cfg.red_square_pos;
  const auto& b = cfg.blue_square_pos;
  const bool overlap = r[0] < b[0] + cfg.square_size && b[0] < r[0] + cfg.square_size &&
                       r[1] < b[1] + cfg.square_size && b[1] < r[1] + cfg.square_size;
  if (overlap) fail("red and blue squares overlap");
  if (cfg.source == DigitSource::MnistIdx && (cfg.idx_images.empty() || cfg.idx_labels.empty()))
    fail("MnistIdx source needs idx_images and idx_labels paths");
  if (cfg.source == DigitSource::SyntheticDigits)
    for (int c : cfg.classes)
      if (c != 2 && c != 3) fail("SyntheticDigits provides only digits 2 and 3");
}

ShortcutDataset generate_shortcut_dataset(const ShortcutDatasetConfig& cfg) {
  validate(cfg);
  const std::size_t total = cfg.train_size + cfg.test_size + cfg.validation_size;
  const auto bases =
      cfg.source == DigitSource::SyntheticDigits ? synthetic_bases(cfg, total) : mnist_bases(cfg, total);

  ShortcutDataset out;
  std::size_t next = 0;
  for (auto* ids : {&out.train_base, &out.test_base, &out.validation_base}) {
    const std::size_t n = ids == &out.train_base  ? cfg.train_size
                          : ids == &out.test_base ? cfg.test_size
                                                  : cfg.validation_size;
    for (std::size_t i = 0; i < n; ++i) ids->push_back(next++);
  }
  out.train = assemble(bases, out.train_base, cfg, true, true);
  for (auto s : kAllSplits) {
    const bool red = s == SplitName::Both || s == SplitName::RedOnly;
    const bool blue = s == SplitName::Both || s == SplitName::BlueOnly;
    out.test[static_cast<std::size_t>(s)] = assemble(bases, out.test_base, cfg, red, blue);
    if (cfg.validation_size > 0)
      out.validation[static_cast<std::size_t>(s)] = assemble(bases, out.validation_base, cfg, red, blue);
  }
  out.square_region.assign(cfg.height * cfg.width, 0);
  for (auto pos : {cfg.red_square_pos, cfg.blue_square_pos})
    for (std::size_t r = pos[0]; r < pos[0] + cfg.square_size; ++r)
      for (std::size_t c = pos[1]; c < pos[1] + cfg.square_size; ++c)
        out.square_region[r * cfg.width + c] = 1;
  return out;
}

// ---------------------------------------------------------------------------

void export_datasets(const std::filesystem::path& dir,
                     const std::vector<std::pair<std::string, const Dataset*>>& sets) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json manifest;
  manifest["format"] = "normlab-dataset";
  manifest["dtype"] = "float64-le";
  manifest["label_dtype"] = "int64-le";
  nlohmann::ordered_json list = nlohmann::ordered_json::array();
  auto put = [](std::string& out, std::uint64_t bits) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
  };
  for (const auto& [name, ds] : sets) {
    std::string img, lab;
    for (double v : ds->images.data()) put(img, std::bit_cast<std::uint64_t>(v));
    for (int l : ds->labels) put(lab, static_cast<std::uint64_t>(static_cast<std::int64_t>(l)));
    const std::string fi = name + ".images.f64", fl = name + ".labels.i64";
    std::ofstream(dir / fi, std::ios::binary).write(img.data(), static_cast<std::streamsize>(img.size()));
    std::ofstream(dir / fl, std::ios::binary).write(lab.data(), static_cast<std::streamsize>(lab.size()));
    list.push_back({{"name", name},
                    {"shape", ds->images.shape()},
                    {"classes", ds->classes},
                    {"images", fi},
                    {"labels", fl}});
  }
  manifest["datasets"] = list;
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

}  // namespace normlab
