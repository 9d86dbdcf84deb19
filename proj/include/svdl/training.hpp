#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "svdl/checkpoint.hpp"
#include "svdl/compression.hpp"
#include "svdl/data.hpp"
#include "svdl/sparse_lstm.hpp"
#include "svdl/variational.hpp"

namespace svdl {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
  Task task = Task::Classification;
  Variant variant = Variant::WGN;
  std::size_t emb_dim = 64;
  std::size_t hidden = 64;
  double lr = 5e-4;
  std::size_t batch = 128;
  std::size_t epochs = 10;
  double clip = 0.0;  // 0 disables clipping
  std::size_t seq_len = 100;
  double tau = 0.05;
  std::uint64_t seed = 1;
  std::size_t kl_warmup_epochs = 0;
  double kl_scale = 1.0;
  bool per_sequence_noise = false;
  bool strict_neuron_rule = false;

  /// Learning rate, batch, clipping and unroll length per task.
  static TrainConfig defaults(Task task) {
    TrainConfig c;
    c.task = task;
    switch (task) {
      case Task::Classification:
        c.lr = 5e-4;
        c.batch = 128;
        c.clip = 0.0;
        break;
      case Task::CharLM:
        c.lr = 2e-3;
        c.batch = 64;
        c.clip = 1.0;
        c.seq_len = 100;
        break;
      case Task::WordLM:
        c.lr = 2e-3;
        c.batch = 32;
        c.clip = 10.0;
        c.seq_len = 35;
        break;
    }
    return c;
  }

  double kl_scale_at(std::size_t epoch) const {
    if (kl_warmup_epochs == 0) return kl_scale;
    return kl_scale * std::min(1.0, static_cast<double>(epoch) / static_cast<double>(kl_warmup_epochs));
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"task", task_name(c.task)},
          {"variant", variant_name(c.variant)},
          {"emb_dim", c.emb_dim},
          {"hidden", c.hidden},
          {"lr", c.lr},
          {"batch", c.batch},
          {"epochs", c.epochs},
          {"clip", c.clip},
          {"seq_len", c.seq_len},
          {"tau", c.tau},
          {"seed", c.seed},
          {"kl_warmup_epochs", c.kl_warmup_epochs},
          {"kl_scale", c.kl_scale},
          {"per_sequence_noise", c.per_sequence_noise},
          {"strict_neuron_rule", c.strict_neuron_rule}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  const auto task = parse_task(j.at("task").get<std::string>());
  const auto variant = parse_variant(j.at("variant").get<std::string>());
  if (!task || !variant) throw ConfigError("stored config has an unknown task or variant");
  TrainConfig c = TrainConfig::defaults(*task);
  c.variant = *variant;
  c.emb_dim = j.at("emb_dim").get<std::size_t>();
  c.hidden = j.at("hidden").get<std::size_t>();
  c.lr = j.at("lr").get<double>();
  c.batch = j.at("batch").get<std::size_t>();
  c.epochs = j.at("epochs").get<std::size_t>();
  c.clip = j.at("clip").get<double>();
  c.seq_len = j.at("seq_len").get<std::size_t>();
  c.tau = j.at("tau").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.kl_warmup_epochs = j.at("kl_warmup_epochs").get<std::size_t>();
  c.kl_scale = j.at("kl_scale").get<double>();
  c.per_sequence_noise = j.at("per_sequence_noise").get<bool>();
  c.strict_neuron_rule = j.at("strict_neuron_rule").get<bool>();
  return c;
}

inline ModelShape shape_for(const TrainConfig& c, const TaskData& d) {
  ModelShape s;
  s.task = c.task;
  s.variant = c.variant;
  s.vocab = d.vocab_size;
  s.hidden = c.hidden;
  s.classes = is_lm(c.task) ? d.vocab_size : d.classes;
  s.emb_dim = is_lm(c.task) ? 0 : c.emb_dim;
  return s;
}

// ---------------------------------------------------------------------------
// Gradients with respect to means and log-σ
// ---------------------------------------------------------------------------

template <class T>
struct ParamGrads {
  ParamSet<Array2<T>> mean;
  ParamSet<Array2<T>> log_sigma;  // empty arrays for deterministic tensors
};

template <class T>
ParamGrads<T> zero_param_grads(const Model<T>& m) {
  return {map_slots<Array2<T>>(m.params, [](const VariationalParam<T>& p) { return Array2<T>(p.mean.rows(), p.mean.cols()); }),
          map_slots<Array2<T>>(m.params, [](const VariationalParam<T>& p) {
            return Array2<T>(p.log_sigma.rows(), p.log_sigma.cols());
          })};
}

/// Trainable arrays in a fixed order: per tensor its mean, then its log-σ.
template <class T>
std::vector<Array2<T>*> trainable_arrays(Model<T>& m) {
  std::vector<Array2<T>*> out;
  for_each_param(m, [&](VariationalParam<T>& p) {
    out.push_back(&p.mean);
    if (p.is_variational()) out.push_back(&p.log_sigma);
  });
  return out;
}

template <class T>
std::vector<Array2<T>*> gradient_arrays(ParamGrads<T>& g) {
  std::vector<Array2<T>*> out;
  for_each_slot(
      [&](const std::string&, Array2<T>& gm, Array2<T>& gl) {
        out.push_back(&gm);
        if (!gl.empty()) out.push_back(&gl);
      },
      g.mean, g.log_sigma);
  return out;
}

template <class T>
double total_kl(const Model<T>& m) {
  double kl = 0.0;
  for_each_param(m, [&](const VariationalParam<T>& p) { kl += kl_log_uniform(p); });
  return kl;
}

// ---------------------------------------------------------------------------
// ELBO
// ---------------------------------------------------------------------------

struct ElboResult {
  double loss = 0.0;  // (N/items)·nll + kl_scale·KL
  double nll_sum = 0.0;
  double kl = 0.0;
  std::size_t items = 0;
  std::size_t correct = 0;
};

namespace detail {

inline Batch slice_row(const Batch& b, std::size_t row) {
  Batch s;
  s.size = 1;
  s.steps = b.steps;
  s.tokens.assign(b.tokens.begin() + static_cast<std::ptrdiff_t>(row * b.steps),
                  b.tokens.begin() + static_cast<std::ptrdiff_t>((row + 1) * b.steps));
  s.lengths = {b.lengths[row]};
  if (!b.labels.empty()) s.labels = {b.labels[row]};
  if (!b.targets.empty())
    s.targets.assign(b.targets.begin() + static_cast<std::ptrdiff_t>(row * b.steps),
                     b.targets.begin() + static_cast<std::ptrdiff_t>((row + 1) * b.steps));
  return s;
}

template <class T>
LstmState<T> state_row(const LstmState<T>& st, std::size_t row) {
  LstmState<T> out = zero_state<T>(1, st.h.cols());
  for (std::size_t c = 0; c < st.h.cols(); ++c) {
    out.h(0, c) = st.h(row, c);
    out.c(0, c) = st.c(row, c);
  }
  return out;
}

/// NLL of one sampling event; accumulates mean/log-σ gradients of
/// grad_scale·nll when `grads` is given.
template <class T>
HeadLoss nll_pass(const Model<T>& model, const Batch& batch, NoiseMode mode, Rng* rng, const LstmState<T>* init,
                  double grad_scale, ParamGrads<T>* grads, LstmState<T>* final_state) {
  const DrawnWeights<T> w = draw_weights(model, mode, rng);
  const ForwardPass<T> fp = model_forward(model, w, batch, init);
  Array2<T> dlogits;
  const HeadLoss hl = head_loss(model.shape, fp, batch, grad_scale, grads ? &dlogits : nullptr);
  if (final_state) *final_state = fp.lstm.final_state;
  if (!grads) return hl;
  const Gradients<T> dA = model_backward(model, w, batch, fp, dlogits);
  for_each_slot(
      [&](const std::string&, const VariationalParam<T>& p, const Draw<T>& d, const Array2<T>& g, Array2<T>& gm,
          Array2<T>& gl) {
        if (p.is_variational() && !d.noise.empty()) {
          Array2<T> m(gm.rows(), gm.cols()), l(gl.rows(), gl.cols());
          reparam_backward(p, d, g, m, l);
          for (std::size_t i = 0; i < gm.size(); ++i) {
            gm[i] += m[i];
            gl[i] += l[i];
          }
        } else {
          for (std::size_t i = 0; i < gm.size(); ++i) gm[i] += g[i];
        }
      },
      model.params, w, dA, grads->mean, grads->log_sigma);
  return hl;
}

template <class T>
std::string nonfinite_report(const Model<T>& model, const ParamGrads<T>* grads) {
  std::string names;
  auto note = [&](const std::string& what) { names += (names.empty() ? "" : ", ") + what; };
  for_each_slot(
      [&](const std::string& name, const VariationalParam<T>& p) {
        if (!all_finite<T>(p.mean.flat())) note(name + ".mean");
        if (!all_finite<T>(p.log_sigma.flat())) note(name + ".log_sigma");
      },
      model.params);
  if (grads) {
    for_each_slot(
        [&](const std::string& name, const Array2<T>& gm, const Array2<T>& gl) {
          if (!all_finite<T>(gm.flat())) note("grad " + name + ".mean");
          if (!all_finite<T>(gl.flat())) note("grad " + name + ".log_sigma");
        },
        grads->mean, grads->log_sigma);
  }
  return names.empty() ? "no parameter is non-finite" : names;
}

}  // namespace detail

/// loss = (N/items)·Σ nll + kl_scale·Σ KL for one minibatch and one sampling
/// event (or one per sequence with `per_sequence`). Gradients w.r.t. means
/// and log-σ are written to `grads` when given.
template <class T>
ElboResult elbo_minibatch(const Model<T>& model, const Batch& batch, double N, NoiseMode mode, double kl_scale,
                          Rng* rng, ParamGrads<T>* grads = nullptr, const LstmState<T>* init = nullptr,
                          LstmState<T>* final_state = nullptr, bool per_sequence = false) {
  if (grads) *grads = zero_param_grads(model);
  ElboResult r;
  std::size_t items = 0;
  for (std::size_t b = 0; b < batch.size; ++b) items += is_lm(model.shape.task) ? batch.lengths[b] : 1;
  if (items == 0) throw DataError("elbo_minibatch: empty batch");
  const double scale = N / static_cast<double>(items);

  try {
    if (per_sequence && mode == NoiseMode::Sampled && batch.size > 1) {
      LstmState<T> fin = zero_state<T>(batch.size, model.shape.hidden);
      for (std::size_t b = 0; b < batch.size; ++b) {
        const Batch one = detail::slice_row(batch, b);
        std::optional<LstmState<T>> row_init;
        if (init) row_init = detail::state_row(*init, b);
        LstmState<T> row_fin;
        const HeadLoss hl =
            detail::nll_pass(model, one, mode, rng, row_init ? &*row_init : nullptr, scale, grads, &row_fin);
        r.nll_sum += hl.nll_sum;
        r.items += hl.items;
        r.correct += hl.correct;
        for (std::size_t c = 0; c < model.shape.hidden; ++c) {
          fin.h(b, c) = row_fin.h(0, c);
          fin.c(b, c) = row_fin.c(0, c);
        }
      }
      if (final_state) *final_state = std::move(fin);
    } else {
      const HeadLoss hl = detail::nll_pass(model, batch, mode, rng, init, scale, grads, final_state);
      r.nll_sum = hl.nll_sum;
      r.items = hl.items;
      r.correct = hl.correct;
    }
  } catch (const NumericError& e) {
    throw NumericError(std::string(e.what()) + " (" + detail::nonfinite_report(model, static_cast<const ParamGrads<T>*>(nullptr)) + ")");
  }

  r.kl = total_kl(model);
  if (grads && kl_scale != 0.0) {
    for_each_slot(
        [&](const std::string&, const VariationalParam<T>& p, Array2<T>& gm, Array2<T>& gl) {
          if (p.is_variational()) kl_log_uniform_backward(p, kl_scale, gm, gl);
        },
        model.params, grads->mean, grads->log_sigma);
  }
  r.loss = scale * r.nll_sum + kl_scale * r.kl;
  if (!std::isfinite(r.loss)) {
    throw NumericError("elbo_minibatch: non-finite loss (" + detail::nonfinite_report(model, grads) + ")");
  }
  return r;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m, v;
};

/// Bias-corrected Adam, moments kept in double.
template <class T>
void adam_step(const std::vector<Array2<T>*>& params, const std::vector<Array2<T>*>& grads, AdamState& st, double lr) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: parameter and gradient lists differ");
  if (st.m.empty()) {
    for (auto* p : params) {
      st.m.emplace_back(p->size(), 0.0);
      st.v.emplace_back(p->size(), 0.0);
    }
  }
  if (st.m.size() != params.size()) throw ShapeError("adam_step: state belongs to another parameter list");
  ++st.step;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Array2<T>& p = *params[k];
    const Array2<T>& g = *grads[k];
    if (!p.same_shape(g) || st.m[k].size() != p.size())
      throw ShapeError("adam_step: shape mismatch at parameter " + std::to_string(k));
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      st.m[k][i] = st.beta1 * st.m[k][i] + (1.0 - st.beta1) * gi;
      st.v[k][i] = st.beta2 * st.v[k][i] + (1.0 - st.beta2) * gi * gi;
      const double mh = st.m[k][i] / c1, vh = st.v[k][i] / c2;
      p[i] = static_cast<T>(static_cast<double>(p[i]) - lr * mh / (std::sqrt(vh) + st.eps));
    }
  }
}

/// Global-norm clipping; returns the norm before clipping.
template <class T>
double clip_gradients(const std::vector<Array2<T>*>& grads, double threshold) {
  if (!(threshold > 0.0)) throw ConfigError("clip_gradients: threshold must be positive");
  double sq = 0.0;
  for (auto* g : grads)
    for (auto v : g->flat()) sq += static_cast<double>(v) * v;
  const double norm = std::sqrt(sq);
  if (norm > threshold) {
    const double s = threshold / norm;
    for (auto* g : grads)
      for (auto& v : g->flat()) v = static_cast<T>(v * s);
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Rows (when rows ≤ cols) or columns orthonormal; Gaussian draw followed by
/// two rounds of modified Gram-Schmidt.
template <class T>
Array2<T> orthogonal(std::size_t rows, std::size_t cols, Rng& rng) {
  const bool by_rows = rows <= cols;
  const std::size_t n = by_rows ? rows : cols, len = by_rows ? cols : rows;
  std::vector<std::vector<double>> v(n, std::vector<double>(len));
  for (auto& vec : v)
    for (auto& x : vec) x = rng.normal();
  for (int pass = 0; pass < 2; ++pass) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < i; ++j) {
        double d = 0.0;
        for (std::size_t k = 0; k < len; ++k) d += v[i][k] * v[j][k];
        for (std::size_t k = 0; k < len; ++k) v[i][k] -= d * v[j][k];
      }
      double norm = 0.0;
      for (double x : v[i]) norm += x * x;
      norm = std::sqrt(norm);
      for (double& x : v[i]) x /= norm;
    }
  }
  Array2<T> out(rows, cols);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < len; ++k) {
      if (by_rows) {
        out(i, k) = static_cast<T>(v[i][k]);
      } else {
        out(k, i) = static_cast<T>(v[i][k]);
      }
    }
  return out;
}

template <class T>
Array2<T> glorot_uniform(std::size_t rows, std::size_t cols, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Array2<T> out(rows, cols);
  for (auto& x : out.flat()) x = static_cast<T>(rng.uniform(-limit, limit));
  return out;
}

/// Classification: recurrent matrices orthogonal, the rest Glorot uniform.
/// Language models: every matrix orthogonal. Biases 0, log-σ −3, z means 1.
template <class T>
Model<T> init_model(const ModelShape& shape, Rng& rng) {
  Model<T> m = make_model<T>(shape);
  const bool lm = is_lm(shape.task);
  auto dense = [&](std::size_t r, std::size_t c) { return lm ? orthogonal<T>(r, c, rng) : glorot_uniform<T>(r, c, rng); };
  auto& p = m.params;
  if (p.emb) p.emb->mean = glorot_uniform<T>(shape.vocab, shape.emb_dim, rng);
  for (std::size_t g = 0; g < kNumGates; ++g) {
    p.wx[g].mean = dense(shape.hidden, shape.input_dim());
    p.wh[g].mean = orthogonal<T>(shape.hidden, shape.hidden, rng);
  }
  p.w_out.mean = dense(shape.classes, shape.hidden);
  return m;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
  double nll_sum = 0.0;
  std::size_t items = 0;
  std::size_t correct = 0;
  double mean_nll() const { return items ? nll_sum / static_cast<double>(items) : 0.0; }
};

inline std::string_view metric_name(Task t) {
  switch (t) {
    case Task::Classification: return "accuracy";
    case Task::CharLM: return "bits_per_char";
    case Task::WordLM: return "perplexity";
  }
  return "?";
}

/// Accuracy, NLL/ln 2 per character, or exp(mean NLL per word).
inline double metric_value(Task t, const EvalResult& r) {
  switch (t) {
    case Task::Classification: return r.items ? static_cast<double>(r.correct) / static_cast<double>(r.items) : 0.0;
    case Task::CharLM: return r.mean_nll() / std::numbers::ln2;
    case Task::WordLM: return std::exp(r.mean_nll());
  }
  return 0.0;
}

inline bool metric_better(Task t, double a, double b) { return t == Task::Classification ? a > b : a < b; }

/// Deterministic classification pass in file order.
template <class T>
EvalResult evaluate_classification(const Model<T>& model, const ClassificationSet& set, std::size_t batch) {
  EvalResult r;
  const DrawnWeights<T> w = draw_weights(model, NoiseMode::Deterministic, nullptr);
  for (const Batch& b : classification_batches(set, std::max<std::size_t>(batch, 1), nullptr)) {
    const auto fp = model_forward(model, w, b);
    const HeadLoss hl = head_loss(model.shape, fp, b, 1.0, static_cast<Array2<T>*>(nullptr));
    r.nll_sum += hl.nll_sum;
    r.items += hl.items;
    r.correct += hl.correct;
  }
  return r;
}

/// One unbroken pass over the stream: chunks of `unroll` steps on a single
/// lane with the state carried, the final partial chunk included.
template <class T>
EvalResult evaluate_lm(const Model<T>& model, const std::vector<std::int32_t>& ids, std::size_t unroll) {
  EvalResult r;
  if (ids.size() < 2) return r;
  const DrawnWeights<T> w = draw_weights(model, NoiseMode::Deterministic, nullptr);
  LstmState<T> state = zero_state<T>(1, model.shape.hidden);
  const std::size_t n = ids.size() - 1;
  for (std::size_t start = 0; start < n; start += unroll) {
    Batch b;
    b.size = 1;
    b.steps = std::min(unroll, n - start);
    b.lengths = {b.steps};
    b.tokens.assign(ids.begin() + static_cast<std::ptrdiff_t>(start),
                    ids.begin() + static_cast<std::ptrdiff_t>(start + b.steps));
    b.targets.assign(ids.begin() + static_cast<std::ptrdiff_t>(start + 1),
                     ids.begin() + static_cast<std::ptrdiff_t>(start + 1 + b.steps));
    const auto fp = model_forward(model, w, b, &state);
    const HeadLoss hl = head_loss(model.shape, fp, b, 1.0, static_cast<Array2<T>*>(nullptr));
    r.nll_sum += hl.nll_sum;
    r.items += hl.items;
    r.correct += hl.correct;
    state = fp.lstm.final_state;
  }
  return r;
}

enum class Split { Train, Valid, Test };

template <class T>
EvalResult evaluate_split(const Model<T>& model, const TaskData& data, Split split, std::size_t batch,
                          std::size_t unroll) {
  if (is_lm(model.shape.task)) {
    const auto& ids = split == Split::Train ? data.train_ids : split == Split::Valid ? data.valid_ids : data.test_ids;
    return evaluate_lm(model, ids, unroll);
  }
  const auto& set = split == Split::Train ? data.train : split == Split::Valid ? data.valid : data.test;
  return evaluate_classification(model, set, batch);
}

/// The model that quality is reported for: means with entries below τ removed.
template <class T>
Model<T> evaluation_model(const Model<T>& m, double tau) {
  return apply_pruning(m, tau).model;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

inline constexpr std::string_view kMetricsHeader = "epoch\tsplit\tnll\tkl\tmetric\tcompression";

struct MetricRow {
  std::size_t epoch = 0;
  std::string split;
  double nll = 0.0;
  double kl = 0.0;
  double metric = 0.0;
  double compression = 1.0;

  std::string line() const {
    return std::to_string(epoch) + "\t" + split + "\t" + g6(nll) + "\t" + g6(kl) + "\t" + g6(metric) + "\t" +
           g6(compression);
  }
};

struct TrainResult {
  Model<float> best_model, final_model;
  std::size_t best_epoch = 0;
  double best_valid_metric = 0.0;
  std::optional<double> test_metric;  // of the best model, when test data exist
  std::vector<MetricRow> rows;
};

struct TrainHooks {
  std::function<void(const MetricRow&)> on_row;
  nlohmann::json config_extra = nlohmann::json::object();  // merged into every checkpoint's config
};

inline Checkpoint make_checkpoint(const Model<float>& m, const TrainConfig& cfg, const TaskData& data,
                                  const Rng& noise_rng, std::size_t epoch) {
  Checkpoint ck;
  ck.model = m;
  ck.tau = cfg.tau;
  ck.config = to_json(cfg);
  ck.rng = noise_rng.state();
  ck.epoch = epoch;
  if (data.vocab) ck.vocab = data.vocab->serialize();
  return ck;
}

/// Runs `cfg.epochs` epochs. With `out_dir` set, writes metrics.tsv,
/// best.ckpt (best validation metric) and final.ckpt there.
inline TrainResult train(const TrainConfig& cfg, const TaskData& data,
                         const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                         const TrainHooks& hooks = {}) {
  const bool lm = is_lm(cfg.task);
  if (cfg.task != data.task) throw ConfigError("train: config task does not match the data");
  if ((lm ? data.train_ids.empty() : data.train.empty())) throw ConfigError("train: training set is empty");
  if ((lm ? data.valid_ids.size() < 2 : data.valid.empty())) throw ConfigError("train: validation set is empty");
  if (cfg.batch == 0 || cfg.hidden == 0 || (lm && cfg.seq_len == 0)) throw ConfigError("train: sizes must be positive");
  if (!(cfg.lr > 0.0)) throw ConfigError("train: lr must be positive");

  Rng root(cfg.seed);
  Rng init_rng = root.fork(1), shuffle_rng = root.fork(2), noise_rng = root.fork(3);
  Model<float> model = init_model<float>(shape_for(cfg, data), init_rng);
  AdamState adam;
  const NoiseMode mode = model.shape.weights_variational() ? NoiseMode::Sampled : NoiseMode::Deterministic;
  const double N = static_cast<double>(data.train_items());

  std::vector<LmBatch> lm_stream;
  if (lm) lm_stream = lm_batches(data.train_ids, cfg.batch, cfg.seq_len);

  std::ofstream metrics;
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    metrics.open(*out_dir / "metrics.tsv", std::ios::binary | std::ios::trunc);
    if (!metrics) throw Error("cannot write " + (*out_dir / "metrics.tsv").string());
    metrics << kMetricsHeader << '\n';
  }

  TrainResult res;
  bool have_best = false;
  auto emit = [&](const MetricRow& row) {
    res.rows.push_back(row);
    if (metrics.is_open()) metrics << row.line() << '\n' << std::flush;
    if (hooks.on_row) hooks.on_row(row);
  };

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double kl_scale = cfg.kl_scale_at(epoch);
    EvalResult running;
    auto step = [&](const Batch& b, const LstmState<float>* init, LstmState<float>* fin) {
      ParamGrads<float> grads;
      const ElboResult er =
          elbo_minibatch(model, b, N, mode, kl_scale, &noise_rng, &grads, init, fin, cfg.per_sequence_noise);
      running.nll_sum += er.nll_sum;
      running.items += er.items;
      running.correct += er.correct;
      auto gl = gradient_arrays(grads);
      if (cfg.clip > 0.0) clip_gradients(gl, cfg.clip);
      adam_step(trainable_arrays(model), gl, adam, cfg.lr);
    };
    if (lm) {
      LstmState<float> state = zero_state<float>(cfg.batch, cfg.hidden);
      for (const LmBatch& lb : lm_stream) {
        LstmState<float> next;
        step(lb.batch, lb.carry ? &state : nullptr, &next);
        state = std::move(next);  // detached: no gradient crosses batches
      }
    } else {
      for (const Batch& b : classification_batches(data.train, cfg.batch, &shuffle_rng)) step(b, nullptr, nullptr);
    }
    const std::string diag = detail::nonfinite_report(model, static_cast<const ParamGrads<float>*>(nullptr));
    if (diag != "no parameter is non-finite") throw NumericError("training diverged at epoch " + std::to_string(epoch) + ": " + diag);

    const double kl = total_kl(model);
    const PrunedModel<float> pruned = apply_pruning(model, cfg.tau);
    const double comp = compression_rate(pruned).rate;
    emit({epoch, "train", running.mean_nll(), kl, metric_value(cfg.task, running), comp});
    const EvalResult v = evaluate_split(pruned.model, data, Split::Valid, cfg.batch, cfg.seq_len);
    const double vm = metric_value(cfg.task, v);
    emit({epoch, "valid", v.mean_nll(), kl, vm, comp});
    if (!std::isfinite(v.nll_sum)) throw NumericError("validation loss is non-finite at epoch " + std::to_string(epoch));

    if (!have_best || !metric_better(cfg.task, res.best_valid_metric, vm)) {  // ties go to the later, sparser epoch
      have_best = true;
      res.best_epoch = epoch;
      res.best_valid_metric = vm;
      res.best_model = model;
      if (out_dir) {
        Checkpoint ck = make_checkpoint(model, cfg, data, noise_rng, epoch);
        ck.config.update(hooks.config_extra);
        ck.info = {{"valid_metric", vm}, {"metric", metric_name(cfg.task)}};
        save_checkpoint(ck, *out_dir / "best.ckpt");
      }
    }
  }
  if (!have_best) res.best_model = model;
  res.final_model = model;
  if (out_dir) {
    Checkpoint ck = make_checkpoint(model, cfg, data, noise_rng, cfg.epochs);
    ck.config.update(hooks.config_extra);
    save_checkpoint(ck, *out_dir / "final.ckpt");
  }
  const bool has_test = lm ? data.test_ids.size() >= 2 : !data.test.empty();
  if (has_test) {
    const Model<float> em = evaluation_model(res.best_model, cfg.tau);
    res.test_metric = metric_value(cfg.task, evaluate_split(em, data, Split::Test, cfg.batch, cfg.seq_len));
  }
  return res;
}

}  // namespace svdl
