#include "normlab/model.hpp"

#include <cmath>
#include <sstream>

#include "normlab/rng.hpp"

namespace normlab {

const char* layer_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv2D: return "Conv2D";
    case LayerKind::BatchNorm: return "BatchNorm";
    case LayerKind::ReLU: return "ReLU";
    case LayerKind::MaxPool2D: return "MaxPool2D";
    case LayerKind::Flatten: return "Flatten";
    case LayerKind::Dense: return "Dense";
    case LayerKind::Softmax: return "Softmax";
  }
  return "?";
}

std::optional<LayerKind> parse_layer_kind(const std::string& name) {
  for (auto k : {LayerKind::Conv2D, LayerKind::BatchNorm, LayerKind::ReLU, LayerKind::MaxPool2D,
                 LayerKind::Flatten, LayerKind::Dense, LayerKind::Softmax})
    if (name == layer_name(k)) return k;
  return std::nullopt;
}

std::size_t ModelSpec::num_classes() const {
  return layers.size() >= 2 ? layers[layers.size() - 2].out : 0;
}

std::size_t ModelSpec::count(LayerKind kind) const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.kind == kind;
  return n;
}

namespace {

std::string describe(const LayerSpec& l, std::size_t index) {
  std::ostringstream os;
  os << "layer " << index << " (" << layer_name(l.kind);
  if (l.kind == LayerKind::Conv2D || l.kind == LayerKind::Dense)
    os << " in=" << l.in << " out=" << l.out;
  os << ')';
  return os.str();
}

[[noreturn]] void nonconforming(const ModelSpec& spec, std::size_t i, const Shape& prev,
                                const std::string& why) {
  std::ostringstream os;
  os << "model spec '" << spec.name << "': " << describe(spec.layers[i], i)
     << " does not conform to ";
  if (i == 0)
    os << "the input";
  else
    os << "the output of " << describe(spec.layers[i - 1], i - 1);
  os << " with shape " << to_string(prev) << ": " << why;
  throw Error(os.str());
}

}  // namespace

std::vector<Shape> validate(const ModelSpec& spec) {
  if (spec.input_shape.size() != 1 && spec.input_shape.size() != 3)
    throw Error("model spec '" + spec.name + "': input shape must be {D} or {C,H,W}, got " +
                to_string(spec.input_shape));
  if (spec.layers.size() < 2) throw Error("model spec '" + spec.name + "': needs at least Dense, Softmax");
  std::vector<Shape> shapes;
  Shape cur = spec.input_shape;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    switch (l.kind) {
      case LayerKind::Conv2D:
        if (cur.size() != 3) nonconforming(spec, i, cur, "Conv2D needs a {C,H,W} activation");
        if (cur[0] != l.in) nonconforming(spec, i, cur, "input channel count differs");
        if (l.out == 0) nonconforming(spec, i, cur, "out must be positive");
        cur = {l.out, cur[1], cur[2]};
        break;
      case LayerKind::BatchNorm:
      case LayerKind::ReLU:
        break;
      case LayerKind::MaxPool2D:
        if (cur.size() != 3 || cur[1] < 2 || cur[2] < 2)
          nonconforming(spec, i, cur, "MaxPool2D needs a {C,H,W} activation with H,W >= 2");
        cur = {cur[0], cur[1] / 2, cur[2] / 2};
        break;
      case LayerKind::Flatten:
        cur = {numel(cur)};
        break;
      case LayerKind::Dense:
        if (numel(cur) != l.in) nonconforming(spec, i, cur, "Dense in differs from input size");
        if (l.out == 0) nonconforming(spec, i, cur, "out must be positive");
        cur = {l.out};
        break;
      case LayerKind::Softmax:
        if (cur.size() != 1) nonconforming(spec, i, cur, "Softmax needs a flat activation");
        break;
    }
    shapes.push_back(cur);
  }
  const std::size_t last = spec.layers.size() - 1;
  if (spec.layers[last].kind != LayerKind::Softmax || spec.layers[last - 1].kind != LayerKind::Dense)
    throw Error("model spec '" + spec.name + "': must end with Dense followed by Softmax");
  if (spec.layers[last - 1].out < 2)
    throw Error("model spec '" + spec.name + "': final Dense needs at least 2 classes");
  if (spec.representation_index >= last - 1)
    throw Error("model spec '" + spec.name + "': representation_index " +
                std::to_string(spec.representation_index) +
                " must point strictly before the final Dense (index " + std::to_string(last - 1) +
                ")");
  return shapes;
}

ModelSpec appendix_cnn(std::size_t channels, std::size_t height, std::size_t width,
                       std::size_t classes) {
  using K = LayerKind;
  ModelSpec s;
  s.name = "appendix_cnn";
  s.input_shape = {channels, height, width};
  const std::size_t flat = 32 * (height / 2 / 2) * (width / 2 / 2);
  s.layers = {
      {K::Conv2D, channels, 16}, {K::BatchNorm}, {K::ReLU},
      {K::Conv2D, 16, 16},       {K::BatchNorm}, {K::ReLU},
      {K::MaxPool2D},
      {K::Conv2D, 16, 32},       {K::BatchNorm}, {K::ReLU},
      {K::Conv2D, 32, 32},       {K::BatchNorm}, {K::ReLU},
      {K::MaxPool2D},
      {K::Dense, flat, 256},     {K::BatchNorm}, {K::ReLU},
      {K::Dense, 256, classes},
      {K::Softmax},
  };
  s.representation_index = 16;  // ReLU after the 256-unit Dense
  return s;
}

ModelSpec mlp(std::size_t inputs, const std::vector<std::size_t>& hidden, std::size_t classes,
              bool batchnorm) {
  using K = LayerKind;
  ModelSpec s;
  s.name = batchnorm ? "mlp" : "mlp_nobn";
  s.input_shape = {inputs};
  std::size_t prev = inputs;
  for (auto h : hidden) {
    s.layers.push_back({K::Dense, prev, h});
    if (batchnorm) s.layers.push_back({K::BatchNorm});
    s.layers.push_back({K::ReLU});
    prev = h;
  }
  s.representation_index = s.layers.empty() ? 0 : s.layers.size() - 1;
  s.layers.push_back({K::Dense, prev, classes});
  s.layers.push_back({K::Softmax});
  return s;
}

ModelSpec strip_batchnorm(const ModelSpec& spec) {
  ModelSpec out = spec;
  out.layers.clear();
  std::size_t rep = 0;
  bool rep_set = false;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    if (spec.layers[i].kind != LayerKind::BatchNorm) out.layers.push_back(spec.layers[i]);
    // A representation taken at a BatchNorm maps to the layer feeding it.
    if (i == spec.representation_index) {
      rep = out.layers.empty() ? 0 : out.layers.size() - 1;
      rep_set = true;
    }
  }
  out.representation_index = rep_set ? rep : spec.representation_index;
  if (spec.count(LayerKind::BatchNorm) > 0 && out.name.find("_nobn") == std::string::npos)
    out.name += "_nobn";
  return out;
}

// ---------------------------------------------------------------------------

Model Model::build(const ModelSpec& spec, std::uint64_t seed) {
  Model m;
  m.spec_ = spec;
  m.shapes_ = validate(spec);
  m.seed_ = seed;
  m.layers_.resize(spec.layers.size());
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    auto& st = m.layers_[i];
    Rng rng(derive_seed(seed, "init", i));
    if (l.kind == LayerKind::Conv2D || l.kind == LayerKind::Dense) {
      const bool conv = l.kind == LayerKind::Conv2D;
      const double fan_in = static_cast<double>(conv ? l.in * 9 : l.in);
      const double limit = std::sqrt(6.0 / fan_in);  // He-uniform
      Shape ws = conv ? Shape{l.out, l.in, 3, 3} : Shape{l.in, l.out};
      std::vector<double> w(numel(ws));
      for (auto& v : w) v = rng.uniform(-limit, limit);
      st.weight = Tensor(ws, std::move(w), true);
      st.bias = Tensor(Shape{l.out}, true);
    } else if (l.kind == LayerKind::BatchNorm) {
      const Shape& prev = i == 0 ? spec.input_shape : m.shapes_[i - 1];
      st.bn = BatchNormState::create(prev[0]);
    }
  }
  return m;
}

ForwardResult Model::forward(Graph& g, const Tensor& x, Mode mode) {
  Shape expect = spec_.input_shape;
  if (x.rank() != expect.size() + 1 || !std::equal(expect.begin(), expect.end(), x.shape().begin() + 1))
    throw Error("forward: input shape " + to_string(x.shape()) + " does not match model input [N," +
                to_string(expect).substr(1));
  const Mode bn_mode = frozen_ ? Mode::Eval : mode;
  ForwardResult r;
  Tensor h = x;
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const auto& l = spec_.layers[i];
    auto& st = layers_[i];
    switch (l.kind) {
      case LayerKind::Conv2D:
        h = g.add_bias(g.conv2d(h, st.weight), st.bias);
        break;
      case LayerKind::BatchNorm:
        st.bn->mode = bn_mode;
        h = g.batchnorm(h, *st.bn, !frozen_);
        break;
      case LayerKind::ReLU:
        h = g.relu(h);
        break;
      case LayerKind::MaxPool2D:
        h = g.maxpool2d(h);
        break;
      case LayerKind::Flatten:
        h = g.flatten(h);
        break;
      case LayerKind::Dense:
        if (h.rank() != 2) h = g.flatten(h);
        h = g.add_bias(g.matmul(h, st.weight), st.bias);
        break;
      case LayerKind::Softmax:
        r.logits = h;
        h = g.softmax(h);
        r.probs = h;
        break;
    }
    if (i == spec_.representation_index) r.representation = h.rank() == 2 ? h : g.flatten(h);
  }
  return r;
}

ForwardResult Model::infer(const Tensor& x, Mode mode) {
  Graph g;
  return forward(g, x, mode);
}

std::vector<Tensor> Model::parameters() const {
  std::vector<Tensor> out;
  for (const auto& st : layers_) {
    if (st.weight.defined()) {
      out.push_back(st.weight);
      out.push_back(st.bias);
    }
    if (st.bn) {
      out.push_back(st.bn->gamma);
      out.push_back(st.bn->beta);
    }
  }
  return out;
}

std::vector<Tensor> Model::weights() const {
  std::vector<Tensor> out;
  for (const auto& st : layers_)
    if (st.weight.defined()) out.push_back(st.weight);
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.numel();
  return n;
}

void Model::freeze() {
  frozen_ = true;
  for (auto& p : parameters()) p.set_requires_grad(false);
}

void Model::unfreeze() {
  frozen_ = false;
  for (auto& p : parameters()) p.set_requires_grad(true);
}

std::uint64_t Model::state_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& st : layers_) {
    for (const Tensor* t : {&st.weight, &st.bias})
      if (t->defined()) h = fnv1a(t->data().data(), t->numel() * sizeof(double), h);
    if (st.bn) {
      const auto& bn = *st.bn;
      h = fnv1a(bn.gamma.data().data(), bn.gamma.numel() * sizeof(double), h);
      h = fnv1a(bn.beta.data().data(), bn.beta.numel() * sizeof(double), h);
      h = fnv1a(bn.running_mean.data(), bn.running_mean.size() * sizeof(double), h);
      h = fnv1a(bn.running_var.data(), bn.running_var.size() * sizeof(double), h);
    }
  }
  return h;
}

Model Model::clone() const {
  Model m = *this;
  for (auto& st : m.layers_) {
    st.weight = st.weight.clone();
    st.bias = st.bias.clone();
    if (st.bn) {
      st.bn->gamma = st.bn->gamma.clone();
      st.bn->beta = st.bn->beta.clone();
    }
  }
  return m;
}

}  // namespace normlab
