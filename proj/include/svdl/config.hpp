#pragma once

// Flat `key = value` run configuration and the data it points to.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>

#include "json.hpp"
#include "svdl/data.hpp"
#include "svdl/error.hpp"
#include "svdl/training.hpp"

namespace svdl {

/// Where the examples come from. `train` is a file path or
/// `synthetic:<sparse_signal|parity|copy_memory>`.
struct DataSpec {
  std::string train, valid, test;
  std::size_t vocab_size = 0;     // word level; 0 means 10000
  double valid_fraction = -1.0;  // held out of train when no valid file; < 0 means task default
  SyntheticParams synthetic;

  bool is_synthetic() const { return train.rfind("synthetic:", 0) == 0; }
};

inline nlohmann::json to_json(const DataSpec& d) {
  return {{"train", d.train},
          {"valid", d.valid},
          {"test", d.test},
          {"vocab_size", d.vocab_size},
          {"valid_fraction", d.valid_fraction},
          {"synthetic", {{"samples", d.synthetic.samples}, {"length", d.synthetic.length}, {"vocab", d.synthetic.vocab}}}};
}

inline DataSpec data_spec_from_json(const nlohmann::json& j) {
  DataSpec d;
  d.train = j.at("train").get<std::string>();
  d.valid = j.at("valid").get<std::string>();
  d.test = j.at("test").get<std::string>();
  d.vocab_size = j.at("vocab_size").get<std::size_t>();
  d.valid_fraction = j.at("valid_fraction").get<double>();
  const auto& s = j.at("synthetic");
  d.synthetic.samples = s.at("samples").get<std::size_t>();
  d.synthetic.length = s.at("length").get<std::size_t>();
  d.synthetic.vocab = s.at("vocab").get<std::size_t>();
  return d;
}

struct RunConfig {
  TrainConfig train;
  DataSpec data;
  std::filesystem::path out_dir = "run";
};

/// Keys accepted in a config file; anything else is rejected.
inline const std::vector<std::string_view>& config_keys() {
  static const std::vector<std::string_view> keys = {
      "task",   "variant", "data.train", "data.valid", "data.test",       "vocab.size", "emb.dim",
      "hidden", "lr",      "batch",      "epochs",     "clip",            "tau",        "seed",
      "kl.warmup_epochs", "out.dir",   "neuron_rule", "seq_len",         "noise",      "kl.scale",
      "valid.fraction",   "synthetic.samples", "synthetic.length", "synthetic.vocab"};
  return keys;
}

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class N>
N parse_number(const std::string& key, const std::string& v) {
  N out{};
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("config: " + key + " = '" + v + "' is not a valid number");
  return out;
}

inline double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + " = '" + v + "' is not a valid number");
  }
}

}  // namespace detail

/// Relative data paths are resolved against `base_dir`.
inline RunConfig parse_config(std::string_view text, const std::filesystem::path& base_dir = {}) {
  std::map<std::string, std::string> kv;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(std::string_view(t).substr(0, eq));
    const std::string val = detail::trim(std::string_view(t).substr(eq + 1));
    const auto& keys = config_keys();
    if (std::find(keys.begin(), keys.end(), key) == keys.end())
      throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    if (kv.count(key)) throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    kv[key] = val;
  }

  if (!kv.count("task")) throw ConfigError("config: missing required key 'task'");
  const auto task = parse_task(kv["task"]);
  if (!task) throw ConfigError("config: task = '" + kv["task"] + "' (expected char_lm, word_lm or classification)");
  if (!kv.count("data.train")) throw ConfigError("config: missing required key 'data.train'");

  RunConfig rc;
  rc.train = TrainConfig::defaults(*task);
  TrainConfig& c = rc.train;
  auto resolve = [&](const std::string& p) -> std::string {
    if (p.empty() || p.rfind("synthetic:", 0) == 0) return p;
    const std::filesystem::path path(p);
    return (path.is_absolute() || base_dir.empty() ? path : base_dir / path).lexically_normal().string();
  };
  for (const auto& [key, v] : kv) {
    using detail::parse_number;
    using detail::parse_real;
    if (key == "task") continue;
    if (key == "variant") {
      const auto var = parse_variant(v);
      if (!var) throw ConfigError("config: variant = '" + v + "' (expected baseline, w, wn or wgn)");
      c.variant = *var;
    } else if (key == "data.train") {
      rc.data.train = resolve(v);
    } else if (key == "data.valid") {
      rc.data.valid = resolve(v);
    } else if (key == "data.test") {
      rc.data.test = resolve(v);
    } else if (key == "vocab.size") {
      rc.data.vocab_size = parse_number<std::size_t>(key, v);
    } else if (key == "emb.dim") {
      c.emb_dim = parse_number<std::size_t>(key, v);
    } else if (key == "hidden") {
      c.hidden = parse_number<std::size_t>(key, v);
    } else if (key == "lr") {
      c.lr = parse_real(key, v);
    } else if (key == "batch") {
      c.batch = parse_number<std::size_t>(key, v);
    } else if (key == "epochs") {
      c.epochs = parse_number<std::size_t>(key, v);
    } else if (key == "clip") {
      c.clip = v == "none" ? 0.0 : parse_real(key, v);
    } else if (key == "tau") {
      c.tau = parse_real(key, v);
    } else if (key == "seed") {
      c.seed = parse_number<std::uint64_t>(key, v);
    } else if (key == "kl.warmup_epochs") {
      c.kl_warmup_epochs = parse_number<std::size_t>(key, v);
    } else if (key == "kl.scale") {
      c.kl_scale = parse_real(key, v);
    } else if (key == "out.dir") {
      rc.out_dir = v;
    } else if (key == "neuron_rule") {
      if (v != "consume" && v != "strict") throw ConfigError("config: neuron_rule = '" + v + "' (expected consume or strict)");
      c.strict_neuron_rule = v == "strict";
    } else if (key == "seq_len") {
      c.seq_len = parse_number<std::size_t>(key, v);
    } else if (key == "noise") {
      if (v != "minibatch" && v != "sequence") throw ConfigError("config: noise = '" + v + "' (expected minibatch or sequence)");
      c.per_sequence_noise = v == "sequence";
    } else if (key == "valid.fraction") {
      rc.data.valid_fraction = parse_real(key, v);
    } else if (key == "synthetic.samples") {
      rc.data.synthetic.samples = parse_number<std::size_t>(key, v);
    } else if (key == "synthetic.length") {
      rc.data.synthetic.length = parse_number<std::size_t>(key, v);
    } else if (key == "synthetic.vocab") {
      rc.data.synthetic.vocab = parse_number<std::size_t>(key, v);
    }
  }
  if (c.tau < 0.0) throw ConfigError("config: tau must be >= 0");
  if (c.clip < 0.0) throw ConfigError("config: clip must be >= 0 (or none)");
  if (!(c.lr > 0.0)) throw ConfigError("config: lr must be positive");
  if (c.batch == 0 || c.hidden == 0 || c.seq_len == 0) throw ConfigError("config: batch, hidden and seq_len must be positive");
  if (!is_lm(c.task) && c.emb_dim == 0) throw ConfigError("config: emb.dim must be positive");
  if (rc.data.valid_fraction >= 1.0) throw ConfigError("config: valid.fraction must be below 1");
  return rc;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.parent_path());
}

namespace detail {

inline void require_file(const std::string& path) {
  if (!std::filesystem::is_regular_file(path)) throw DataError("data file not found: " + path);
}

}  // namespace detail

/// Builds the train, valid and test splits. The vocabulary comes from the training
/// file unless `fixed_vocab` is given (evaluation of a stored model).
inline TaskData load_task_data(const DataSpec& spec, Task task, std::uint64_t seed,
                               const Vocabulary* fixed_vocab = nullptr) {
  if (spec.train.empty()) throw ConfigError("data.train is empty");
  if (spec.is_synthetic()) {
    const auto kind = parse_synthetic(spec.train.substr(10));
    if (!kind) throw ConfigError("unknown synthetic task '" + spec.train.substr(10) + "'");
    TaskData d = synthetic_task(*kind, spec.synthetic, seed);
    if (d.task != task && !(is_lm(d.task) && is_lm(task)))
      throw ConfigError("synthetic task " + spec.train.substr(10) + " does not fit task " + std::string(task_name(task)));
    d.task = task;
    return d;
  }

  TaskData d;
  d.task = task;
  const double frac = spec.valid_fraction >= 0.0 ? spec.valid_fraction : (is_lm(task) ? 0.05 : 0.15);
  if (is_lm(task)) {
    const TokenLevel level = task == Task::CharLM ? TokenLevel::Char : TokenLevel::Word;
    detail::require_file(spec.train);
    const std::string text = read_file(spec.train);
    d.vocab = fixed_vocab ? *fixed_vocab : build_vocab(text, level, level == TokenLevel::Word ? (spec.vocab_size ? spec.vocab_size : 10000) : 0);
    d.train_ids = d.vocab->encode(text);
    if (!spec.valid.empty()) {
      detail::require_file(spec.valid);
      d.valid_ids = d.vocab->encode(read_file(spec.valid));
    } else {
      const auto cut = static_cast<std::size_t>(std::floor(static_cast<double>(d.train_ids.size()) * (1.0 - frac)));
      d.valid_ids.assign(d.train_ids.begin() + static_cast<std::ptrdiff_t>(cut), d.train_ids.end());
      d.train_ids.resize(cut);
    }
    if (!spec.test.empty()) {
      detail::require_file(spec.test);
      d.test_ids = d.vocab->encode(read_file(spec.test));
    }
    d.vocab_size = d.vocab->size();
    d.classes = d.vocab_size;
    return d;
  }

  detail::require_file(spec.train);
  const auto rows = read_labeled_tsv(spec.train);
  if (fixed_vocab) {
    d.vocab = *fixed_vocab;
  } else {
    std::string all;
    for (const auto& r : rows) (all += r.text) += '\n';
    d.vocab = build_vocab(all, TokenLevel::Word, spec.vocab_size ? spec.vocab_size : 10000);
  }
  ClassificationSet train = encode_labeled(rows, *d.vocab, "train");
  if (!spec.valid.empty()) {
    detail::require_file(spec.valid);
    d.train = std::move(train);
    d.valid = load_classification_tsv(spec.valid, *d.vocab, "valid");
  } else {
    auto [keep, held] = split_holdout(train, frac, seed);
    d.train = std::move(keep);
    d.valid = std::move(held);
  }
  if (!spec.test.empty()) {
    detail::require_file(spec.test);
    d.test = load_classification_tsv(spec.test, *d.vocab, "test");
  }
  d.vocab_size = d.vocab->size();
  d.classes = std::max({d.train.num_classes(), d.valid.num_classes(), d.test.num_classes(), std::size_t{2}});
  return d;
}

}  // namespace svdl
