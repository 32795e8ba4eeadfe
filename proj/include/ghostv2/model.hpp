#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ghostv2/model_spec.hpp"

namespace ghostv2 {

// Per-block layout resolved from a ModelSpec at its nominal input size.
struct BlockLayout {
  std::string name;   // "<stage>.b<j>"
  std::string stage;
  std::int64_t input_size = 0;  // nominal feature size entering the block
  BottleneckConfig config;
};

struct ModelLayout {
  std::int64_t stem_channels = 0;
  std::vector<BlockLayout> blocks;
  std::int64_t head_channels = 0;
  int total_stride = 1;
};

// Applies width scaling, placement overrides and the kernel schedule.
ModelLayout resolve_layout(const ModelSpec& spec);

template <typename T>
struct Model {
  ModelSpec spec;
  ModelLayout layout;
  Tensor<T> stem;  // (k, k, in_channels, stem_channels)
  BatchNormParams<T> stem_bn;
  std::vector<BottleneckParams<T>> blocks;
  Tensor<T> head;  // (1, 1, c_last, head_channels)
  BatchNormParams<T> head_bn;
  Tensor<T> feature;  // (1, 1, head_channels, feature_size)
  Tensor<T> feature_bias;
  Tensor<T> classifier;  // (1, 1, feature_size, num_classes)
  Tensor<T> classifier_bias;

  // Stable order: stem, blocks, head, feature, classifier.
  void visit(const ParamVisitor<T>& f);
  void for_each_param(const std::function<void(const std::string&, const Tensor<T>&, bool)>& f) const;
  std::int64_t parameter_count() const;  // trainable elements
};

// Deterministic initialisation from seed. The classifier starts at zero so a
// fresh model predicts the uniform distribution.
template <typename T>
Model<T> build_model(const ModelSpec& spec, std::uint64_t seed);

// Logits (N, 1, 1, num_classes). Input H and W must be multiples of the total stride.
template <typename T>
Var<T> forward(const Ctx<T>& ctx, const Model<T>& model, const Var<T>& x);
template <typename T>
Tensor<T> forward(const Model<T>& model, const Tensor<T>& x, Mode mode = Mode::eval);

struct LayerRow {
  std::string scope;  // dotted layer path, e.g. "s28.b0.ghost1.attn"
  std::string op;
  Shape output;
  std::uint64_t macs = 0;
  std::uint64_t params = 0;
};

struct ModelSummary {
  std::string name;
  double width = 1.0;
  Shape input;
  std::vector<LayerRow> rows;
  std::uint64_t total_macs = 0;
  std::uint64_t total_params = 0;
};

// Static per-layer table derived from the layout by shape arithmetic alone.
ModelSummary summarize(const ModelSpec& spec, std::int64_t batch = 1);

}  // namespace ghostv2
