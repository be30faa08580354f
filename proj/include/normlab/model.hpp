#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "normlab/graph.hpp"
#include "normlab/tensor.hpp"

namespace normlab {

enum class LayerKind { Conv2D, BatchNorm, ReLU, MaxPool2D, Flatten, Dense, Softmax };

const char* layer_name(LayerKind kind);
std::optional<LayerKind> parse_layer_kind(const std::string& name);

struct LayerSpec {
  LayerKind kind = LayerKind::ReLU;
  std::size_t in = 0;   // Conv2D channels / Dense features
  std::size_t out = 0;  // Conv2D channels / Dense features

  bool operator==(const LayerSpec&) const = default;
};

/// Sequential architecture. A Dense layer applied to a 4-D activation
/// flattens it implicitly, which is how the CNN preset reads.
struct ModelSpec {
  std::string name;
  Shape input_shape;  // per sample: {C, H, W} or {D}
  std::vector<LayerSpec> layers;
  std::size_t representation_index = 0;

  bool operator==(const ModelSpec&) const = default;

  std::size_t num_classes() const;
  std::size_t count(LayerKind kind) const;
};

/// Per-sample output shape of every layer. Throws naming the first pair of
/// layers that do not conform, and checks the structural invariants
/// (final Softmax after Dense, representation strictly before final Dense).
std::vector<Shape> validate(const ModelSpec& spec);

/// The 19-layer small CNN with five BatchNorm layers.
ModelSpec appendix_cnn(std::size_t channels, std::size_t height, std::size_t width,
                       std::size_t classes);
/// Dense-[BN]-ReLU stack followed by Dense-Softmax.
ModelSpec mlp(std::size_t inputs, const std::vector<std::size_t>& hidden, std::size_t classes,
              bool batchnorm = true);

/// Deletes every BatchNorm descriptor and remaps representation_index to the
/// same semantic layer. Idempotent.
ModelSpec strip_batchnorm(const ModelSpec& spec);

struct LayerState {
  Tensor weight;  // Conv2D: [out,in,3,3]  Dense: [in,out]
  Tensor bias;    // [out]
  std::optional<BatchNormState> bn;
};

struct ForwardResult {
  Tensor representation;  // [N, h]
  Tensor logits;          // [N, k]
  Tensor probs;           // [N, k]
};

/// Learnable parameters and BatchNorm running statistics for a ModelSpec.
class Model {
 public:
  Model() = default;
  static Model build(const ModelSpec& spec, std::uint64_t seed);

  const ModelSpec& spec() const { return spec_; }
  std::uint64_t seed() const { return seed_; }

  /// Runs the network inside `g`. Frozen models use Eval-mode BatchNorm and
  /// never touch their running statistics regardless of `mode`.
  ForwardResult forward(Graph& g, const Tensor& x, Mode mode);
  /// Forward without a caller-visible graph (Eval bookkeeping, inference).
  ForwardResult infer(const Tensor& x, Mode mode = Mode::Eval);

  /// Learnable tensors in layer order: weight, bias per Conv/Dense; gamma,
  /// beta per BatchNorm.
  std::vector<Tensor> parameters() const;
  /// Conv/Dense weights only (the tensors L2 regularization applies to).
  std::vector<Tensor> weights() const;
  std::size_t parameter_count() const;

  std::vector<LayerState>& layers() { return layers_; }
  const std::vector<LayerState>& layers() const { return layers_; }

  void freeze();
  void unfreeze();
  bool frozen() const { return frozen_; }

  /// FNV-1a over every parameter and running statistic.
  std::uint64_t state_hash() const;
  /// Deep copy: no storage is shared with *this.
  Model clone() const;

 private:
  ModelSpec spec_;
  std::vector<Shape> shapes_;
  std::vector<LayerState> layers_;
  bool frozen_ = false;
  std::uint64_t seed_ = 0;
};

/// Writes `dir/manifest.json` and `dir/weights.bin` (little-endian float64).
void save_checkpoint(const Model& model, const std::filesystem::path& dir);
Model load_checkpoint(const std::filesystem::path& dir);

std::string spec_to_json(const ModelSpec& spec);  // compact JSON text
ModelSpec spec_from_json(const std::string& text);

}  // namespace normlab
