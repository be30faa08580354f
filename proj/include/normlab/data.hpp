#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "normlab/tensor.hpp"

namespace normlab {

/// Labelled images, NCHW in [0,1].
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  std::size_t classes = 2;

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const;
  /// Gathers the given samples into a new batch tensor.
  Tensor batch(std::span<const std::size_t> indices) const;
  Tensor onehot(std::span<const std::size_t> indices) const;
  Dataset subset(std::span<const std::size_t> indices) const;
};

// ---------------------------------------------------------------------------
// IDX

struct IdxArray {
  std::uint32_t magic = 0;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> values;
};

/// Parses an unsigned-byte IDX file (magic 0x00000801 or 0x00000803).
IdxArray read_idx(const std::filesystem::path& path);
void write_idx(const std::filesystem::path& path, const IdxArray& array);

struct IdxImages {
  std::size_t count = 0, rows = 0, cols = 0;
  std::vector<double> pixels;  // count*rows*cols, scaled to [0,1]
};
IdxImages load_idx_images(const std::filesystem::path& path);
/// Labels must lie in [0, 9].
std::vector<int> load_idx_labels(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Shortcut task

enum class DigitSource { SyntheticDigits, MnistIdx };
enum class SplitName { Both, RedOnly, BlueOnly, None };
inline constexpr std::array<SplitName, 4> kAllSplits = {SplitName::Both, SplitName::RedOnly,
                                                        SplitName::BlueOnly, SplitName::None};
const char* split_name(SplitName s);

struct ShortcutDatasetConfig {
  DigitSource source = DigitSource::SyntheticDigits;
  std::string idx_images;  // MnistIdx only
  std::string idx_labels;
  std::array<int, 2> classes = {2, 3};
  std::size_t height = 28;
  std::size_t width = 28;
  std::size_t channels = 3;
  double noise_sigma = 0.1;
  std::size_t square_size = 4;
  double square_intensity = 1.0;  // value of the painted channel
  std::array<std::size_t, 2> red_square_pos = {2, 2};     // row, col of top-left
  std::array<std::size_t, 2> blue_square_pos = {22, 22};
  std::size_t jitter = 2;  // SyntheticDigits translation range in pixels
  double rotation_deg = 0.0;   // SyntheticDigits: uniform rotation in [-r, r]
  double scale_jitter = 0.0;   // SyntheticDigits: glyph scale in [1-s, 1+s]
  double stroke_jitter = 0.0;  // SyntheticDigits: stroke radius factor in [1-t, 1+t]
  std::size_t train_size = 512;
  std::size_t test_size = 256;
  std::size_t validation_size = 0;
  std::uint64_t seed = 0;
};

void validate(const ShortcutDatasetConfig& cfg);

struct ShortcutDataset {
  Dataset train;                    // painted like Both
  std::array<Dataset, 4> test;      // indexed by SplitName
  std::array<Dataset, 4> validation;  // empty unless validation_size > 0
  std::vector<std::size_t> train_base, test_base, validation_base;  // base image ids
  std::vector<std::uint8_t> square_region;  // H*W mask, union of both squares

  const Dataset& split(SplitName s) const { return test[static_cast<std::size_t>(s)]; }
};

ShortcutDataset generate_shortcut_dataset(const ShortcutDatasetConfig& cfg);

/// The fixed 28x28 binary glyph for digit 2 or 3 (1 = stroke).
std::vector<double> digit_glyph(int digit);

// ---------------------------------------------------------------------------
// Corruptions

enum class CorruptionKind { GaussianNoise, ImpulseNoise, BoxBlur, Occlusion, Contrast };
inline constexpr std::array<CorruptionKind, 5> kAllCorruptions = {
    CorruptionKind::GaussianNoise, CorruptionKind::ImpulseNoise, CorruptionKind::BoxBlur,
    CorruptionKind::Occlusion, CorruptionKind::Contrast};

const char* corruption_name(CorruptionKind kind);
std::optional<CorruptionKind> parse_corruption(const std::string& name);

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::GaussianNoise;
  int severity = 3;
};

/// Deterministic in (seed, kind, severity); output clamped to [0,1].
Tensor apply_corruption(const Tensor& images, const CorruptionSpec& spec, std::uint64_t seed);
Dataset apply_corruption(const Dataset& data, const CorruptionSpec& spec, std::uint64_t seed);

// ---------------------------------------------------------------------------

/// Writes `<name>.images.f64` / `<name>.labels.i64` (little-endian) per
/// dataset plus a manifest.json listing names, shapes and files.
void export_datasets(const std::filesystem::path& dir,
                     const std::vector<std::pair<std::string, const Dataset*>>& sets);

}  // namespace normlab
