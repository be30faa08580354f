#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "normlab/data.hpp"

using namespace normlab;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("normlab_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ShortcutDatasetConfig small_config() {
  ShortcutDatasetConfig c;
  c.train_size = 40;
  c.test_size = 20;
  c.validation_size = 10;
  c.seed = 3;
  return c;
}

double pixel(const Dataset& d, std::size_t i, std::size_t c, std::size_t y, std::size_t x) {
  const auto s = d.images.shape();
  return d.images[((i * s[1] + c) * s[2] + y) * s[3] + x];
}

bool has_square(const Dataset& d, std::size_t i, std::size_t channel, std::array<std::size_t, 2> pos,
                std::size_t size, double intensity) {
  for (std::size_t y = pos[0]; y < pos[0] + size; ++y)
    for (std::size_t x = pos[1]; x < pos[1] + size; ++x)
      if (pixel(d, i, channel, y, x) != intensity) return false;
  return true;
}

}  // namespace

TEST(Idx, RoundTripImagesAndLabels) {
  const auto dir = temp_dir("idx");
  IdxArray img{0x00000803, {3, 2, 2}, {0, 255, 128, 1, 2, 3, 4, 5, 6, 7, 8, 9}};
  IdxArray lab{0x00000801, {3}, {2, 3, 9}};
  write_idx(dir / "img.idx", img);
  write_idx(dir / "lab.idx", lab);
  auto back = read_idx(dir / "img.idx");
  EXPECT_EQ(back.magic, img.magic);
  EXPECT_EQ(back.dims, img.dims);
  EXPECT_EQ(back.values, img.values);
  auto images = load_idx_images(dir / "img.idx");
  EXPECT_EQ(images.count, 3u);
  EXPECT_EQ(images.rows, 2u);
  EXPECT_DOUBLE_EQ(images.pixels[1], 1.0);
  EXPECT_DOUBLE_EQ(images.pixels[2], 128.0 / 255.0);
  EXPECT_EQ(load_idx_labels(dir / "lab.idx"), (std::vector<int>{2, 3, 9}));
  fs::remove_all(dir);
}

TEST(Idx, RejectsMalformedFiles) {
  const auto dir = temp_dir("idx_bad");
  auto write = [&](const std::string& name, std::vector<unsigned char> bytes) {
    std::ofstream f(dir / name, std::ios::binary);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  };
  write("magic", {0, 0, 0x0D, 1, 0, 0, 0, 1, 7});            // float type code
  write("short", {0, 0, 8, 1, 0, 0, 0, 3, 1, 2});             // 2 of 3 values
  write("long", {0, 0, 8, 1, 0, 0, 0, 1, 1, 2});              // trailing byte
  write("label", {0, 0, 8, 1, 0, 0, 0, 1, 10});               // label out of range
  write("header", {0, 0, 8});
  EXPECT_THROW(read_idx(dir / "magic"), Error);
  EXPECT_THROW(read_idx(dir / "short"), Error);
  EXPECT_THROW(read_idx(dir / "long"), Error);
  EXPECT_THROW(read_idx(dir / "header"), Error);
  EXPECT_THROW(load_idx_labels(dir / "label"), Error);
  EXPECT_THROW(load_idx_images(dir / "label"), Error);  // rank 1 is not an image file
  EXPECT_THROW(read_idx(dir / "absent"), Error);
  fs::remove_all(dir);
}

TEST(Shortcut, SplitsCarryTheAdvertisedSquares) {
  const auto cfg = small_config();
  const auto ds = generate_shortcut_dataset(cfg);
  ASSERT_EQ(ds.train.size(), 40u);
  const double I = cfg.square_intensity;
  for (std::size_t i = 0; i < ds.train.size(); ++i) {
    const bool painted = ds.train.labels[i] == 1;
    EXPECT_EQ(has_square(ds.train, i, 0, cfg.red_square_pos, cfg.square_size, I), painted);
    EXPECT_EQ(has_square(ds.train, i, 2, cfg.blue_square_pos, cfg.square_size, I), painted);
  }
  const auto& red = ds.split(SplitName::RedOnly);
  const auto& blue = ds.split(SplitName::BlueOnly);
  const auto& none = ds.split(SplitName::None);
  const auto& both = ds.split(SplitName::Both);
  for (std::size_t i = 0; i < cfg.test_size; ++i) {
    const bool one = both.labels[i] == 1;
    EXPECT_EQ(has_square(both, i, 0, cfg.red_square_pos, cfg.square_size, I), one);
    EXPECT_EQ(has_square(red, i, 0, cfg.red_square_pos, cfg.square_size, I), one);
    EXPECT_FALSE(has_square(red, i, 2, cfg.blue_square_pos, cfg.square_size, I));
    EXPECT_EQ(has_square(blue, i, 2, cfg.blue_square_pos, cfg.square_size, I), one);
    EXPECT_FALSE(has_square(none, i, 0, cfg.red_square_pos, cfg.square_size, I));
    // All four splits share the same base images and labels.
    EXPECT_EQ(none.labels[i], both.labels[i]);
    EXPECT_EQ(pixel(none, i, 1, 14, 14), pixel(both, i, 1, 14, 14));
  }
  EXPECT_EQ(ds.validation[0].size(), 10u);
  EXPECT_EQ(std::count(ds.square_region.begin(), ds.square_region.end(), 1), 32);
  for (double v : ds.train.images.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Shortcut, SplitsUseDisjointBaseImagesAndBalancedLabels) {
  const auto ds = generate_shortcut_dataset(small_config());
  std::vector<std::size_t> all = ds.train_base;
  all.insert(all.end(), ds.test_base.begin(), ds.test_base.end());
  all.insert(all.end(), ds.validation_base.begin(), ds.validation_base.end());
  std::sort(all.begin(), all.end());
  EXPECT_EQ(std::adjacent_find(all.begin(), all.end()), all.end());
  EXPECT_EQ(std::count(ds.train.labels.begin(), ds.train.labels.end(), 1), 20);
}

TEST(Shortcut, SameSeedSameBytesDifferentSeedDifferentImages) {
  auto cfg = small_config();
  const auto a = generate_shortcut_dataset(cfg), b = generate_shortcut_dataset(cfg);
  EXPECT_TRUE(std::equal(a.train.images.data().begin(), a.train.images.data().end(), b.train.images.data().begin()));
  cfg.seed = 4;
  const auto c = generate_shortcut_dataset(cfg);
  EXPECT_FALSE(std::equal(a.train.images.data().begin(), a.train.images.data().end(), c.train.images.data().begin()));
}

TEST(Shortcut, GlyphsDiffer) {
  const auto two = digit_glyph(2), three = digit_glyph(3);
  ASSERT_EQ(two.size(), 28u * 28u);
  EXPECT_NE(two, three);
  EXPECT_GT(std::count(two.begin(), two.end(), 1.0), 30);
  EXPECT_THROW(digit_glyph(7), Error);
}

TEST(Shortcut, ValidationRejectsBadConfigs) {
  auto bad = [](auto mutate) {
    auto c = small_config();
    mutate(c);
    return c;
  };
  EXPECT_THROW(validate(bad([](auto& c) { c.channels = 1; })), Error);
  EXPECT_THROW(validate(bad([](auto& c) { c.noise_sigma = -0.1; })), Error);
  EXPECT_THROW(validate(bad([](auto& c) { c.square_intensity = 0.0; })), Error);
  EXPECT_THROW(validate(bad([](auto& c) { c.blue_square_pos = {26, 26}; })), Error);  // outside
  EXPECT_THROW(validate(bad([](auto& c) { c.blue_square_pos = {3, 3}; })), Error);    // overlaps red
  EXPECT_THROW(validate(bad([](auto& c) { c.classes = {2, 2}; })), Error);
  EXPECT_THROW(validate(bad([](auto& c) { c.classes = {2, 7}; })), Error);  // no synthetic glyph
  EXPECT_THROW(validate(bad([](auto& c) { c.source = DigitSource::MnistIdx; })), Error);
  EXPECT_THROW(validate(bad([](auto& c) { c.train_size = 1; })), Error);
  EXPECT_NO_THROW(validate(small_config()));
}

TEST(Shortcut, MnistSourceReadsIdxFiles) {
  const auto dir = temp_dir("mnist");
  IdxArray img{0x00000803, {12, 28, 28}, {}};
  IdxArray lab{0x00000801, {12}, {}};
  for (std::size_t i = 0; i < 12; ++i) {
    const int digit = i % 3 == 0 ? 7 : (i % 2 ? 3 : 2);
    lab.values.push_back(static_cast<std::uint8_t>(digit));
    for (std::size_t p = 0; p < 28 * 28; ++p) img.values.push_back(static_cast<std::uint8_t>((p * digit) % 256));
  }
  write_idx(dir / "img", img);
  write_idx(dir / "lab", lab);
  ShortcutDatasetConfig c;
  c.source = DigitSource::MnistIdx;
  c.idx_images = (dir / "img").string();
  c.idx_labels = (dir / "lab").string();
  c.train_size = 4;
  c.test_size = 2;
  const auto ds = generate_shortcut_dataset(c);
  EXPECT_EQ(ds.train.size(), 4u);
  c.train_size = 40;  // more than the 8 usable images
  EXPECT_THROW(generate_shortcut_dataset(c), Error);
  fs::remove_all(dir);
}

TEST(Shortcut, ExportWritesRawArraysAndManifest) {
  const auto dir = temp_dir("export");
  const auto ds = generate_shortcut_dataset(small_config());
  export_datasets(dir, {{"train", &ds.train}, {"none", &ds.split(SplitName::None)}});
  EXPECT_EQ(fs::file_size(dir / "train.images.f64"), ds.train.images.numel() * 8);
  EXPECT_EQ(fs::file_size(dir / "train.labels.i64"), ds.train.size() * 8);
  EXPECT_TRUE(fs::exists(dir / "manifest.json"));
  fs::remove_all(dir);
}

// ---------------------------------------------------------------------------

namespace {
Tensor flat_images(double value) {
  Tensor t({3, 3, 8, 8});
  std::fill(t.data().begin(), t.data().end(), value);
  return t;
}
}  // namespace

TEST(Corruption, NamesRoundTrip) {
  for (auto k : kAllCorruptions) EXPECT_EQ(parse_corruption(corruption_name(k)), k);
  EXPECT_FALSE(parse_corruption("fog").has_value());
}

TEST(Corruption, DeterministicClampedAndSeedSensitive) {
  const auto x = generate_shortcut_dataset(small_config()).train.images;
  for (auto k : kAllCorruptions)
    for (int s : {1, 3, 5}) {
      const auto a = apply_corruption(x, {k, s}, 9), b = apply_corruption(x, {k, s}, 9);
      ASSERT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
      for (double v : a.data()) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
    }
  const auto a = apply_corruption(x, {CorruptionKind::GaussianNoise, 3}, 1);
  const auto b = apply_corruption(x, {CorruptionKind::GaussianNoise, 3}, 2);
  EXPECT_FALSE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST(Corruption, ClosedFormKinds) {
  // Contrast pulls towards 0.5 by (1 - 0.15 s).
  auto c = apply_corruption(flat_images(0.9), {CorruptionKind::Contrast, 2}, 0);
  EXPECT_NEAR(c[0], 0.5 + 0.4 * 0.7, 1e-15);
  // Blurring a constant image leaves it unchanged, including at the borders.
  auto b = apply_corruption(flat_images(0.3), {CorruptionKind::BoxBlur, 5}, 0);
  for (double v : b.data()) EXPECT_NEAR(v, 0.3, 1e-15);
  // Occlusion paints exactly one square of side 2 + 2s per image and channel.
  auto o = apply_corruption(flat_images(1.0), {CorruptionKind::Occlusion, 1}, 0);
  EXPECT_EQ(std::count(o.data().begin(), o.data().end(), 0.5), 3 * 3 * 16);
  // Severity-1 box blur is the identity.
  const auto x = generate_shortcut_dataset(small_config()).train.images;
  auto id = apply_corruption(x, {CorruptionKind::BoxBlur, 1}, 0);
  EXPECT_TRUE(std::equal(id.data().begin(), id.data().end(), x.data().begin()));
}

TEST(Corruption, NoiseGrowsWithSeverity) {
  const auto x = flat_images(0.5);
  auto dev = [&](int s) {
    auto y = apply_corruption(x, {CorruptionKind::GaussianNoise, s}, 4);
    double d = 0.0;
    for (std::size_t i = 0; i < y.numel(); ++i) d += std::abs(y[i] - 0.5);
    return d;
  };
  EXPECT_LT(dev(1), dev(3));
  EXPECT_LT(dev(3), dev(5));
}

TEST(Corruption, RejectsBadInput) {
  EXPECT_THROW(apply_corruption(flat_images(0.5), {CorruptionKind::Contrast, 0}, 0), Error);
  EXPECT_THROW(apply_corruption(flat_images(0.5), {CorruptionKind::Contrast, 6}, 0), Error);
  EXPECT_THROW(apply_corruption(Tensor({4, 4}), {CorruptionKind::Contrast, 1}, 0), Error);
}
