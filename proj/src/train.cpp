#include "ghostv2/train.hpp"

#include <chrono>
#include <cmath>
#include <numbers>
#include <unordered_map>

#include "ghostv2/weights.hpp"

namespace ghostv2 {

void DatasetSpec::validate() const {
  if (image_size < 4) throw ConfigError("dataset: image_size must be >= 4");
  if (num_classes < 2) throw ConfigError("dataset: num_classes must be >= 2");
  if (samples_per_class < 2) throw ConfigError("dataset: samples_per_class must be >= 2");
  if (!(noise >= 0.0)) throw ConfigError("dataset: noise must be non-negative");
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw ConfigError("dataset: test_fraction must lie in [0, 1)");
}

namespace {

float pattern(int cls, double y, double x, double S, double freq, double phase, double phase2, double cy, double cx,
              bool diagonal) {
  const double k = 2.0 * std::numbers::pi * freq / S;
  double u = y, v = x;
  if (diagonal) {
    u = (y + x) * std::numbers::sqrt2 / 2.0;
    v = (y - x) * std::numbers::sqrt2 / 2.0;
  }
  switch (cls % 4) {
    case 0: return static_cast<float>(std::sin(k * u + phase));
    case 1: return static_cast<float>(std::sin(k * v + phase));
    case 2: return static_cast<float>(std::sin(k * u + phase) * std::sin(k * v + phase2));
    default: return static_cast<float>(std::sin(k * std::hypot(y - cy, x - cx) + phase));
  }
}

}  // namespace

SyntheticDataset SyntheticDataset::generate(const DatasetSpec& spec) {
  spec.validate();
  const std::int64_t S = spec.image_size;
  const auto per_test = static_cast<std::int64_t>(std::floor(spec.test_fraction * static_cast<double>(spec.samples_per_class)));
  const std::int64_t per_train = spec.samples_per_class - per_test;
  std::vector<float> train, test;
  SyntheticDataset ds;
  ds.spec = spec;
  Rng root(spec.seed);
  // Interleave classes so every prefix is balanced.
  for (std::int64_t i = 0; i < spec.samples_per_class; ++i) {
    for (int cls = 0; cls < spec.num_classes; ++cls) {
      Rng rng = root.fork(static_cast<std::uint64_t>(i * spec.num_classes + cls));
      const double freq = rng.uniform(2.0, 5.0);
      const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double phase2 = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double amp = rng.uniform(0.7, 1.0);
      const double cy = rng.uniform(0.3, 0.7) * static_cast<double>(S);
      const double cx = rng.uniform(0.3, 0.7) * static_cast<double>(S);
      const bool diagonal = (cls / 4) % 2 == 1;
      auto& dst = i < per_train ? train : test;
      for (std::int64_t y = 0; y < S; ++y)
        for (std::int64_t x = 0; x < S; ++x) {
          const float p = pattern(cls, static_cast<double>(y), static_cast<double>(x), static_cast<double>(S), freq,
                                  phase, phase2, cy, cx, diagonal);
          dst.push_back(static_cast<float>(amp * p + spec.noise * rng.normal()));
        }
      (i < per_train ? ds.train_y : ds.test_y).push_back(cls);
    }
  }
  ds.train_x = Tensor<float>(Shape(per_train * spec.num_classes, S, S, 1), std::move(train));
  if (per_test > 0) {
    ds.test_x = Tensor<float>(Shape(per_test * spec.num_classes, S, S, 1), std::move(test));
  } else {
    ds.test_x = Tensor<float>::zeros(Shape(1, S, S, 1));
    ds.test_y.clear();
  }
  return ds;
}

Tensor<float> take_rows(const Tensor<float>& x, const std::vector<std::int64_t>& rows) {
  const Shape& s = x.shape();
  const std::int64_t per = s.h() * s.w() * s.c();
  std::vector<float> out;
  out.reserve(static_cast<std::size_t>(per) * rows.size());
  auto d = x.data();
  for (const auto r : rows) {
    if (r < 0 || r >= s.n()) throw ShapeError("take_rows: row " + std::to_string(r) + " outside batch " + s.str());
    out.insert(out.end(), d.begin() + r * per, d.begin() + (r + 1) * per);
  }
  return Tensor<float>(Shape(static_cast<std::int64_t>(rows.size()), s.h(), s.w(), s.c()), std::move(out));
}

void TrainConfig::validate() const {
  if (steps < 1) throw ConfigError("train: steps must be >= 1");
  if (batch_size < 2) throw ConfigError("train: batch_size must be >= 2 (batch statistics)");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("train: learning_rate must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train: momentum must lie in [0, 1)");
  if (!(bn_momentum >= 0.0 && bn_momentum <= 1.0)) throw ConfigError("train: bn_momentum must lie in [0, 1]");
  data.validate();
}

ModelSpec with_placement(ModelSpec spec, Placement p) {
  spec.placement = p;
  for (auto& st : spec.stages) {
    st.placement.reset();
    for (auto& b : st.blocks) b.placement.reset();
  }
  return spec;
}

ModelSpec training_spec(const TrainConfig& cfg) {
  ModelSpec spec = resolve_model_spec(cfg.model);
  if (cfg.width) spec.width = *cfg.width;
  if (cfg.placement) spec = with_placement(std::move(spec), *cfg.placement);
  if (spec.head.num_classes != cfg.data.num_classes) {
    throw ConfigError("train: model has " + std::to_string(spec.head.num_classes) + " classes, dataset has " +
                      std::to_string(cfg.data.num_classes));
  }
  if (spec.in_channels != 1) throw ConfigError("train: the synthetic dataset is single-channel");
  if (spec.input_size != cfg.data.image_size) {
    throw ConfigError("train: model input_size " + std::to_string(spec.input_size) + " differs from image_size " +
                      std::to_string(cfg.data.image_size));
  }
  spec.validate();
  return spec;
}

EvalResult evaluate_classifier(const Model<float>& model, const Tensor<float>& x, const std::vector<int>& labels,
                               std::int64_t chunk) {
  const std::int64_t N = x.shape().n();
  if (static_cast<std::int64_t>(labels.size()) != N) throw ShapeError("evaluate: label count differs from batch");
  const std::int64_t K = model.spec.head.num_classes;
  std::vector<float> logits;
  std::int64_t correct = 0;
  double loss_sum = 0.0;
  for (std::int64_t begin = 0; begin < N; begin += chunk) {
    std::vector<std::int64_t> rows;
    for (std::int64_t r = begin; r < std::min(N, begin + chunk); ++r) rows.push_back(r);
    const Tensor<float> y = forward(model, take_rows(x, rows), Mode::eval);
    const std::span<const int> lab(labels.data() + begin, rows.size());
    loss_sum += static_cast<double>(kernels::softmax_cross_entropy(y, lab).loss) * static_cast<double>(rows.size());
    auto d = y.data();
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::int64_t best = 0;
      for (std::int64_t k = 1; k < K; ++k) {
        if (d[i * K + k] > d[i * K + best]) best = k;
      }
      correct += best == lab[i] ? 1 : 0;
    }
    logits.insert(logits.end(), d.begin(), d.end());
  }
  EvalResult r;
  r.accuracy = N > 0 ? static_cast<double>(correct) / static_cast<double>(N) : 0.0;
  r.loss = N > 0 ? loss_sum / static_cast<double>(N) : 0.0;
  r.logits = Tensor<float>(Shape(N, 1, 1, K), std::move(logits));
  return r;
}

TrainLog train_toy(const TrainConfig& cfg, Model<float>* trained) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const ModelSpec spec = training_spec(cfg);
  const SyntheticDataset data = SyntheticDataset::generate(cfg.data);
  Model<float> model = build_model<float>(spec, cfg.seed);

  TrainLog log;
  log.placement = to_string(spec.placement);
  const std::int64_t N = data.train_x.shape().n();
  const std::int64_t B = std::min(cfg.batch_size, N);
  Rng order(cfg.seed ^ 0xD1CE5EEDULL);
  std::vector<std::int64_t> perm(static_cast<std::size_t>(N));
  std::size_t cursor = perm.size();
  std::unordered_map<std::string, std::vector<float>> velocity;
  const float lr = static_cast<float>(cfg.learning_rate);
  const float mu = static_cast<float>(cfg.momentum);
  const float bm = static_cast<float>(cfg.bn_momentum);

  for (int step = 1; step <= cfg.steps; ++step) {
    std::vector<std::int64_t> rows;
    while (static_cast<std::int64_t>(rows.size()) < B) {
      if (cursor == perm.size()) {
        for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<std::int64_t>(i);
        for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[order.below(i)]);
        cursor = 0;
      }
      rows.push_back(perm[cursor++]);
    }
    std::vector<int> labels;
    for (const auto r : rows) labels.push_back(data.train_y[static_cast<std::size_t>(r)]);

    Tape<float> tape;
    Binder<float> bind(tape);
    std::vector<BatchStats<float>> stats;
    const Ctx<float> ctx{bind, Mode::train, &stats};
    const Var<float> x = tape.leaf(take_rows(data.train_x, rows), "x");
    const Var<float> logits = forward(ctx, model, x);
    const Var<float> loss = ad::softmax_cross_entropy(logits, labels);
    const double loss_value = static_cast<double>(loss.value().item());
    if (!std::isfinite(loss_value)) throw DivergenceError(step, loss_value);

    std::int64_t correct = 0;
    {
      auto d = logits.value().data();
      const std::int64_t K = spec.head.num_classes;
      for (std::int64_t i = 0; i < B; ++i) {
        std::int64_t best = 0;
        for (std::int64_t k = 1; k < K; ++k) {
          if (d[i * K + k] > d[i * K + best]) best = k;
        }
        correct += best == labels[static_cast<std::size_t>(i)] ? 1 : 0;
      }
    }
    log.steps.push_back({step, loss_value, static_cast<double>(correct) / static_cast<double>(B)});

    const Gradients<float> grads = tape.backward(loss);
    std::unordered_map<const void*, const BatchStats<float>*> by_mean;
    for (const auto& s : stats) by_mean.emplace(s.running_mean_id, &s);
    const BatchStats<float>* pending = nullptr;
    model.visit([&](const std::string& name, Tensor<float>& t, bool trainable) {
      if (!trainable) {
        // running_mean precedes its running_var.
        if (name.ends_with(".running_mean")) {
          auto it = by_mean.find(t.storage_id());
          pending = it == by_mean.end() ? nullptr : it->second;
          if (pending == nullptr) return;
          std::vector<float> v = t.to_vector();
          auto m = pending->mean.data();
          for (std::size_t i = 0; i < v.size(); ++i) v[i] = (1.0f - bm) * v[i] + bm * m[i];
          t = Tensor<float>(t.shape(), std::move(v));
        } else if (pending != nullptr) {
          std::vector<float> v = t.to_vector();
          auto s = pending->var.data();
          for (std::size_t i = 0; i < v.size(); ++i) v[i] = (1.0f - bm) * v[i] + bm * s[i];
          t = Tensor<float>(t.shape(), std::move(v));
          pending = nullptr;
        }
        return;
      }
      const auto leaf = bind.find(t);
      if (!leaf || !grads.has(*leaf)) return;
      auto g = grads.of(*leaf).data();
      auto& vel = velocity[name];
      if (vel.empty()) vel.assign(g.size(), 0.0f);
      std::vector<float> w = t.to_vector();
      for (std::size_t i = 0; i < w.size(); ++i) {
        vel[i] = mu * vel[i] + g[i];
        w[i] -= lr * vel[i];
      }
      t = Tensor<float>(t.shape(), std::move(w));
    });
  }

  log.initial_loss = log.steps.front().loss;
  log.final_loss = log.steps.back().loss;
  log.train = evaluate_classifier(model, data.train_x, data.train_y);
  if (!data.test_y.empty()) log.test = evaluate_classifier(model, data.test_x, data.test_y);
  if (!cfg.weights_out.empty()) {
    save_weights(model, cfg.weights_out);
    log.weights_path = cfg.weights_out;
  }
  log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (trained != nullptr) *trained = std::move(model);
  return log;
}

}  // namespace ghostv2
