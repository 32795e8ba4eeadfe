#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ghostv2/model.hpp"

namespace ghostv2 {

// Procedural 1-channel images, one pattern family per class:
// 0 horizontal stripes, 1 vertical stripes, 2 checkerboard, 3 concentric rings
// (classes beyond 3 reuse the families with diagonal orientations). Every
// family has the same per-pixel value distribution, so a model that cannot
// aggregate over space cannot separate them.
struct DatasetSpec {
  std::int64_t image_size = 32;
  int num_classes = 4;
  std::int64_t samples_per_class = 64;
  double noise = 0.3;          // std-dev of additive Gaussian noise
  double test_fraction = 0.25;  // per class, taken from the end
  std::uint64_t seed = 1234;

  void validate() const;
};

struct SyntheticDataset {
  DatasetSpec spec;
  Tensor<float> train_x;  // (N, S, S, 1)
  std::vector<int> train_y;
  Tensor<float> test_x;
  std::vector<int> test_y;

  static SyntheticDataset generate(const DatasetSpec& spec);
};

// Rows [begin, begin + count) of a batch tensor.
Tensor<float> take_rows(const Tensor<float>& x, const std::vector<std::int64_t>& rows);

struct TrainConfig {
  int steps = 500;
  std::int64_t batch_size = 16;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double bn_momentum = 0.1;  // running = (1 - m) running + m batch
  std::uint64_t seed = 0;    // initialisation and batch order
  DatasetSpec data;
  std::string model = "mini";  // built-in name or YAML path
  std::optional<double> width;
  std::optional<Placement> placement;  // overrides every stage and block
  std::string weights_out;             // saved after training when non-empty

  void validate() const;
};

struct StepRecord {
  int step = 0;  // 1-based
  double loss = 0;
  double batch_accuracy = 0;
};

struct EvalResult {
  double accuracy = 0;
  double loss = 0;
  Tensor<float> logits;
};

struct TrainLog {
  std::string placement;
  std::vector<StepRecord> steps;
  double initial_loss = 0;
  double final_loss = 0;
  EvalResult train;
  EvalResult test;
  std::string weights_path;
  double seconds = 0;
};

class DivergenceError : public Error {
 public:
  DivergenceError(int step, double loss)
      : Error("training diverged at step " + std::to_string(step) + " (loss " + std::to_string(loss) + ")"),
        step_(step) {}
  int step() const { return step_; }

 private:
  int step_;
};

// Sets the model-wide placement and drops every stage/block override.
ModelSpec with_placement(ModelSpec spec, Placement p);

ModelSpec training_spec(const TrainConfig& cfg);

// Eval-mode accuracy and mean cross-entropy, in fixed-size chunks.
EvalResult evaluate_classifier(const Model<float>& model, const Tensor<float>& x, const std::vector<int>& labels,
                               std::int64_t chunk = 64);

// SGD with momentum on softmax cross-entropy. Deterministic for a given
// config; the trained model is returned through `trained` when non-null.
TrainLog train_toy(const TrainConfig& cfg, Model<float>* trained = nullptr);

}  // namespace ghostv2
