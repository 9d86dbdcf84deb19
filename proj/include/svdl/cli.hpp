#pragma once

// Commands behind the svdl tool. Each returns a process exit code and
// writes results to `out`, diagnostics to `err`.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "svdl/checkpoint.hpp"
#include "svdl/compression.hpp"
#include "svdl/config.hpp"
#include "svdl/inference.hpp"
#include "svdl/training.hpp"

namespace svdl::cli {

enum Exit : int {
  kOk = 0,
  kInternal = 1,
  kConfig = 2,  // bad config or usage
  kData = 3,
  kNumeric = 4,  // divergence
  kCheckpoint = 5,
  kMismatch = 6,  // checkpoint and data disagree
  kNotPruned = 7,
};

namespace detail {

template <class F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kData;
  } catch (const NumericError& e) {
    err << "numeric divergence: " << e.what() << '\n';
    return kNumeric;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << '\n';
    return kCheckpoint;
  } catch (const nlohmann::json::exception& e) {
    err << "checkpoint error: stored config is incomplete: " << e.what() << '\n';
    return kCheckpoint;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kInternal;
  }
}

/// Data a checkpoint was trained on, encoded with its stored vocabulary.
inline TaskData checkpoint_data(const Checkpoint& ck) {
  if (!ck.config.contains("data")) throw ConfigError("checkpoint carries no data description; pass --data");
  const TrainConfig cfg = train_config_from_json(ck.config);
  const DataSpec spec = data_spec_from_json(ck.config.at("data"));
  std::optional<Vocabulary> vocab;
  if (!ck.vocab.empty()) vocab = Vocabulary::deserialize(ck.vocab);
  return load_task_data(spec, cfg.task, cfg.seed, vocab ? &*vocab : nullptr);
}

/// Model whose quality is reported: pruned checkpoints as stored, trained
/// ones pruned at their τ.
inline Model<float> quality_model(const Checkpoint& ck) {
  return ck.pruned() ? ck.model : evaluation_model(ck.model, ck.tau);
}

inline void check_compatible(const ModelShape& shape, const TaskData& d) {
  if (d.task != shape.task) throw Error("mismatch: data task differs from checkpoint task");
  if (d.vocab_size > shape.vocab)
    throw Error("mismatch: data vocabulary " + std::to_string(d.vocab_size) + " exceeds model vocabulary " +
                std::to_string(shape.vocab));
  if (!is_lm(shape.task) && d.classes > shape.classes)
    throw Error("mismatch: data has " + std::to_string(d.classes) + " classes, model " + std::to_string(shape.classes));
}

inline std::optional<double> split_metric(const Model<float>& m, const TaskData& d, Split split, const TrainConfig& cfg) {
  const bool lm = is_lm(d.task);
  const bool present = split == Split::Test ? (lm ? d.test_ids.size() >= 2 : !d.test.empty())
                                            : (lm ? d.valid_ids.size() >= 2 : !d.valid.empty());
  if (!present) return std::nullopt;
  return metric_value(d.task, evaluate_split(m, d, split, cfg.batch, cfg.seq_len));
}

}  // namespace detail

struct TrainOutcome {
  TrainResult result;
  RunConfig config;
};

inline int run_train(const RunConfig& rc, std::ostream& out, std::ostream& err, TrainOutcome* outcome = nullptr) {
  return detail::guarded(err, [&] {
    const TaskData data = load_task_data(rc.data, rc.train.task, rc.train.seed);
    std::filesystem::create_directories(rc.out_dir);
    TrainHooks hooks;
    hooks.config_extra["data"] = to_json(rc.data);  // lets prune and eval find the examples again
    TrainResult res = train(rc.train, data, rc.out_dir, hooks);
    out << "best_epoch\t" << res.best_epoch << '\n';
    out << "valid_" << metric_name(rc.train.task) << '\t' << g6(res.best_valid_metric) << '\n';
    if (res.test_metric) out << "test_" << metric_name(rc.train.task) << '\t' << g6(*res.test_metric) << '\n';
    if (outcome) *outcome = {std::move(res), rc};
    return int{kOk};
  });
}

inline int cmd_train(const std::filesystem::path& config, std::ostream& out, std::ostream& err) {
  RunConfig rc;
  try {
    rc = load_config(config);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfig;
  }
  return run_train(rc, out, err);
}

/// Prunes at τ, writes pruned.ckpt and the structure reports into `out_dir`,
/// prints the summary row.
inline int cmd_prune(const std::filesystem::path& ckpt, double tau, const std::filesystem::path& out_dir, std::ostream& out,
                     std::ostream& err) {
  if (tau < 0.0 || std::isnan(tau)) {
    err << "usage error: --tau must be >= 0\n";
    return kConfig;
  }
  Checkpoint ck;
  try {
    ck = load_checkpoint(ckpt);
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << '\n';
    return kCheckpoint;
  }
  return detail::guarded(err, [&] {
    const PrunedModel<float> pruned = apply_pruning(ck.model, tau);
    QualityFigure q;
    bool strict = false;
    if (ck.config.contains("task")) {
      const TrainConfig cfg = train_config_from_json(ck.config);
      strict = cfg.strict_neuron_rule;
      if (ck.config.contains("data")) {
        const TaskData data = detail::checkpoint_data(ck);
        auto v = detail::split_metric(pruned.model, data, Split::Test, cfg);
        if (!v) v = detail::split_metric(pruned.model, data, Split::Valid, cfg);
        if (v) q = {std::string(metric_name(cfg.task)), *v};
      }
    }
    const StructureSummary s = summarize(pruned, q, strict);
    structure_report(pruned, s, out_dir, &ck.model);
    Checkpoint pc = ck;
    pc.model = pruned.model;
    pc.masks = pruned.masks;
    pc.tau = tau;
    save_checkpoint(pc, out_dir / "pruned.ckpt");
    out << kSummaryHeader << '\n' << summary_row(s) << '\n';
    return int{kOk};
  });
}

/// Deterministic evaluation on a split of the checkpoint's own data, or on
/// `data_path` encoded with the checkpoint vocabulary.
inline int cmd_eval(const std::filesystem::path& ckpt, const std::string& data_path, const std::string& split_name,
                    std::ostream& out, std::ostream& err) {
  Checkpoint ck;
  try {
    ck = load_checkpoint(ckpt);
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << '\n';
    return kCheckpoint;
  }
  Split split = Split::Valid;
  if (split_name == "train") {
    split = Split::Train;
  } else if (split_name == "test") {
    split = Split::Test;
  } else if (split_name != "valid") {
    err << "usage error: --split must be train, valid or test\n";
    return kConfig;
  }
  return detail::guarded(err, [&]() -> int {
    const TrainConfig cfg = train_config_from_json(ck.config);
    TaskData data;
    if (!data_path.empty()) {
      DataSpec spec;
      spec.train = data_path;
      spec.valid_fraction = 0.0;
      if (!ck.vocab.empty() || spec.is_synthetic()) {
        std::optional<Vocabulary> vocab;
        if (!ck.vocab.empty()) vocab = Vocabulary::deserialize(ck.vocab);
        if (ck.config.contains("data") && spec.is_synthetic())
          spec.synthetic = data_spec_from_json(ck.config.at("data")).synthetic;
        data = load_task_data(spec, cfg.task, cfg.seed, vocab ? &*vocab : nullptr);
      } else {
        throw ConfigError("checkpoint has no vocabulary to encode " + data_path);
      }
      split = Split::Train;  // the given file is the whole evaluation set
    } else {
      data = detail::checkpoint_data(ck);
    }
    try {
      detail::check_compatible(ck.model.shape, data);
    } catch (const Error& e) {
      err << e.what() << '\n';
      return kMismatch;
    }
    EvalResult r;
    try {
      r = evaluate_split(detail::quality_model(ck), data, split, cfg.batch, cfg.seq_len);
    } catch (const IndexError& e) {
      err << "mismatch: " << e.what() << '\n';
      return kMismatch;
    } catch (const ShapeError& e) {
      err << "mismatch: " << e.what() << '\n';
      return kMismatch;
    }
    if (r.items == 0) throw DataError("evaluation split is empty");
    out << metric_name(cfg.task) << '\t' << g6(metric_value(cfg.task, r)) << '\n';
    return kOk;
  });
}

inline int cmd_bench(const std::filesystem::path& ckpt, std::size_t seq_len, std::size_t repeats, std::ostream& out,
                     std::ostream& err) {
  if (repeats < 10) {
    err << "usage error: --repeats must be at least 10\n";
    return kConfig;
  }
  if (seq_len == 0) {
    err << "usage error: --seq-len must be positive\n";
    return kConfig;
  }
  Checkpoint ck;
  try {
    ck = load_checkpoint(ckpt);
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << '\n';
    return kCheckpoint;
  }
  if (!ck.pruned()) {
    err << "checkpoint " << ckpt.string() << " is not pruned; run `svdl prune --ckpt " << ckpt.string()
        << "` first and bench the pruned.ckpt it writes\n";
    return kNotPruned;
  }
  return detail::guarded(err, [&] {
    const PrunedModel<float> pruned = pruned_from_checkpoint(ck);
    const CompiledModel<float> cm = compile(pruned);
    const BenchReport rep = benchmark(pruned, cm, seq_len, repeats, 7, std::string(variant_name(ck.model.shape.variant)));
    out << kBenchHeader << '\n' << bench_row(rep) << '\n';
    return int{kOk};
  });
}

inline constexpr std::string_view kTableHeader = "Method\tQuality\tCompression\tNeurons\tGates";

/// Trains every variant on one config into out.dir/<variant>, prunes the best
/// checkpoint and writes out.dir/table.tsv.
inline int cmd_sweep(const std::filesystem::path& config, std::ostream& out, std::ostream& err) {
  RunConfig base;
  try {
    base = load_config(config);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfig;
  }
  std::ostringstream table;
  table << kTableHeader << '\n';
  for (Variant v : {Variant::Baseline, Variant::W, Variant::WN, Variant::WGN}) {
    RunConfig rc = base;
    rc.train.variant = v;
    rc.out_dir = base.out_dir / std::string(variant_name(v));
    std::ostringstream sink;
    TrainOutcome oc;
    if (const int code = run_train(rc, sink, err, &oc); code != kOk) return code;
    const int code = detail::guarded(err, [&] {
      const PrunedModel<float> pruned = apply_pruning(oc.result.best_model, rc.train.tau);
      QualityFigure q{std::string(metric_name(rc.train.task)), oc.result.test_metric.value_or(oc.result.best_valid_metric)};
      const StructureSummary s = summarize(pruned, q, rc.train.strict_neuron_rule);
      structure_report(pruned, s, rc.out_dir, &oc.result.best_model);
      table << variant_name(v) << '\t' << g6(q.value) << '\t' << g6(s.compression.rate) << '\t' << s.neurons_field()
            << '\t' << s.gates.nonconstant_count() << '\n';
      return int{kOk};
    });
    if (code != kOk) return code;
  }
  std::ofstream f(base.out_dir / "table.tsv", std::ios::binary);
  if (!f) {
    err << "error: cannot write " << (base.out_dir / "table.tsv").string() << '\n';
    return kInternal;
  }
  f << table.str();
  out << table.str();
  return kOk;
}

}  // namespace svdl::cli
