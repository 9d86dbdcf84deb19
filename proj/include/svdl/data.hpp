#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "svdl/error.hpp"
#include "svdl/numerics.hpp"
#include "svdl/sparse_lstm.hpp"

namespace svdl {

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

enum class TokenLevel { Char, Word };

inline constexpr std::string_view kUnkToken = "<unk>";

/// Dense ids from 0. Char vocabularies have no specials; word vocabularies
/// reserve id 0 for the unknown token.
class Vocabulary {
 public:
  Vocabulary() = default;
  Vocabulary(TokenLevel level, std::vector<std::string> tokens) : level_(level), tokens_(std::move(tokens)) {
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!index_.emplace(tokens_[i], static_cast<std::int32_t>(i)).second)
        throw DataError("vocabulary: duplicate token '" + tokens_[i] + "'");
    }
    if (level_ == TokenLevel::Word) {
      auto it = index_.find(std::string(kUnkToken));
      if (it == index_.end()) throw DataError("vocabulary: word level needs " + std::string(kUnkToken));
      unk_ = it->second;
    }
  }

  TokenLevel level() const noexcept { return level_; }
  std::size_t size() const noexcept { return tokens_.size(); }
  bool empty() const noexcept { return tokens_.empty(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }
  const std::string& token(std::int32_t id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::optional<std::int32_t> unk() const noexcept { return unk_; }

  std::optional<std::int32_t> find(std::string_view tok) const {
    auto it = index_.find(std::string(tok));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  /// Unknown tokens map to UNK; char vocabularies have none and throw.
  std::int32_t id(std::string_view tok) const {
    if (auto f = find(tok)) return *f;
    if (unk_) return *unk_;
    throw DataError("vocabulary: token '" + std::string(tok) + "' not in character vocabulary");
  }

  std::vector<std::int32_t> encode(std::string_view text) const;
  std::string decode(const std::vector<std::int32_t>& ids) const;

  /// One token per line in id order. Char tokens are written as their byte
  /// value in decimal so newlines and tabs stay unambiguous.
  void dump(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    for (const auto& t : tokens_) {
      if (level_ == TokenLevel::Char) {
        out << static_cast<int>(static_cast<unsigned char>(t[0])) << '\n';
      } else {
        out << t << '\n';
      }
    }
  }

  /// Length-prefixed byte blob: level byte, count, then (u32 length, bytes) per token.
  std::string serialize() const {
    std::string out;
    out.push_back(level_ == TokenLevel::Char ? 'c' : 'w');
    auto put32 = [&](std::uint32_t v) {
      for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
    };
    put32(static_cast<std::uint32_t>(tokens_.size()));
    for (const auto& t : tokens_) {
      put32(static_cast<std::uint32_t>(t.size()));
      out += t;
    }
    return out;
  }

  static Vocabulary deserialize(std::string_view blob) {
    if (blob.empty()) return {};
    std::size_t pos = 1;
    auto get32 = [&]() {
      if (pos + 4 > blob.size()) throw DataError("vocabulary blob truncated");
      std::uint32_t v = 0;
      for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(blob[pos + i])) << (8 * i);
      pos += 4;
      return v;
    };
    const TokenLevel level = blob[0] == 'c' ? TokenLevel::Char : TokenLevel::Word;
    const std::uint32_t n = get32();
    std::vector<std::string> toks;
    toks.reserve(n);
    for (std::uint32_t i = 0; i < n; ++i) {
      const std::uint32_t len = get32();
      if (pos + len > blob.size()) throw DataError("vocabulary blob truncated");
      toks.emplace_back(blob.substr(pos, len));
      pos += len;
    }
    return Vocabulary(level, std::move(toks));
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.level_ == b.level_ && a.tokens_ == b.tokens_;
  }

 private:
  TokenLevel level_ = TokenLevel::Char;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
  std::optional<std::int32_t> unk_;
};

/// Lowercase, punctuation stripped, split on whitespace.
inline std::vector<std::string> word_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::isspace(u)) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else if (!std::ispunct(u)) {
      cur.push_back(static_cast<char>(std::tolower(u)));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline std::vector<std::int32_t> Vocabulary::encode(std::string_view text) const {
  std::vector<std::int32_t> ids;
  if (level_ == TokenLevel::Char) {
    ids.reserve(text.size());
    for (char ch : text) ids.push_back(id(std::string_view(&ch, 1)));
  } else {
    for (const auto& w : word_tokens(text)) ids.push_back(id(w));
  }
  return ids;
}

inline std::string Vocabulary::decode(const std::vector<std::int32_t>& ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (level_ == TokenLevel::Word && i > 0) out.push_back(' ');
    out += token(ids[i]);
  }
  return out;
}

/// Frequency-descending, ties broken lexicographically. `max_size` counts
/// specials and 0 means unlimited.
inline Vocabulary build_vocab(std::string_view corpus, TokenLevel level, std::size_t max_size = 0) {
  std::map<std::string, std::size_t> counts;
  if (level == TokenLevel::Char) {
    for (char ch : corpus) ++counts[std::string(1, ch)];
  } else {
    for (auto& w : word_tokens(corpus)) ++counts[std::move(w)];
  }
  if (counts.empty()) throw DataError("build_vocab: empty corpus");
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> toks;
  if (level == TokenLevel::Word) toks.emplace_back(kUnkToken);
  for (auto& [tok, n] : ranked) {
    if (max_size != 0 && toks.size() >= max_size) break;
    if (level == TokenLevel::Word && tok == kUnkToken) continue;
    toks.push_back(tok);
  }
  return Vocabulary(level, std::move(toks));
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// Language-model lanes
// ---------------------------------------------------------------------------

struct LmBatch {
  Batch batch;
  bool carry = false;  // continue from the previous batch's final state
};

/// Splits the corpus into B contiguous strips of ⌊n/B⌋ tokens; batch k reads
/// positions [kT, kT+T) of every strip, targets shifted by one. The tail
/// that does not fill a whole batch is dropped.
inline std::vector<LmBatch> lm_batches(const std::vector<std::int32_t>& ids, std::size_t B, std::size_t T) {
  if (B == 0 || T == 0) throw ConfigError("lm_batches: batch size and unroll length must be positive");
  if (ids.size() < B * (T + 1)) {
    throw DataError("lm_batches: corpus of " + std::to_string(ids.size()) + " tokens is shorter than " +
                    std::to_string(B * (T + 1)) + " (batch x (unroll + 1))");
  }
  const std::size_t strip = ids.size() / B;
  const std::size_t n_batches = (strip - 1) / T;
  std::vector<LmBatch> out(n_batches);
  for (std::size_t k = 0; k < n_batches; ++k) {
    Batch& b = out[k].batch;
    b.size = B;
    b.steps = T;
    b.tokens.resize(B * T);
    b.targets.resize(B * T);
    b.lengths.assign(B, T);
    for (std::size_t lane = 0; lane < B; ++lane)
      for (std::size_t t = 0; t < T; ++t) {
        const std::size_t pos = lane * strip + k * T + t;
        b.tokens[lane * T + t] = ids[pos];
        b.targets[lane * T + t] = ids[pos + 1];
      }
    out[k].carry = k > 0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Classification
// ---------------------------------------------------------------------------

struct ClassificationSet {
  std::vector<std::vector<std::int32_t>> sequences;
  std::vector<std::int32_t> labels;
  std::string split;

  std::size_t size() const noexcept { return sequences.size(); }
  bool empty() const noexcept { return sequences.empty(); }
  std::size_t max_length() const {
    std::size_t m = 0;
    for (const auto& s : sequences) m = std::max(m, s.size());
    return m;
  }
  std::size_t num_classes() const {
    std::int32_t m = -1;
    for (auto l : labels) m = std::max(m, l);
    return static_cast<std::size_t>(m + 1);
  }
};

struct LabeledText {
  std::int32_t label;
  std::string text;
};

/// Lines of `label<TAB>text`; blank lines skipped.
inline std::vector<LabeledText> read_labeled_tsv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path);
  std::vector<LabeledText> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    const std::string where = path + ":" + std::to_string(lineno);
    if (tab == std::string::npos) throw DataError(where + ": line " + std::to_string(lineno) + " has no tab");
    const std::string_view lab(line.data(), tab);
    std::int32_t label = 0;
    const auto [p, ec] = std::from_chars(lab.data(), lab.data() + lab.size(), label);
    if (ec != std::errc() || p != lab.data() + lab.size() || label < 0) {
      throw DataError(where + ": line " + std::to_string(lineno) + " label '" + std::string(lab) +
                      "' is not a non-negative integer");
    }
    rows.push_back({label, line.substr(tab + 1)});
  }
  return rows;
}

inline ClassificationSet encode_labeled(const std::vector<LabeledText>& rows, const Vocabulary& vocab,
                                        std::string split) {
  ClassificationSet set;
  set.split = std::move(split);
  for (const auto& r : rows) {
    auto ids = vocab.encode(r.text);
    if (ids.empty()) ids.push_back(vocab.unk().value_or(0));
    set.sequences.push_back(std::move(ids));
    set.labels.push_back(r.label);
  }
  return set;
}

inline ClassificationSet load_classification_tsv(const std::string& path, const Vocabulary& vocab,
                                                 std::string split = "train") {
  return encode_labeled(read_labeled_tsv(path), vocab, std::move(split));
}

/// Example i goes to the held-out part when hash(seed, i) falls below `fraction`.
inline bool hash_holdout(std::uint64_t seed, std::size_t index, double fraction) {
  std::uint64_t x = seed * 0x9e3779b97f4a7c15ull + static_cast<std::uint64_t>(index);
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ull;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebull;
  x ^= x >> 31;
  return static_cast<double>(x >> 11) * 0x1.0p-53 < fraction;
}

inline std::pair<ClassificationSet, ClassificationSet> split_holdout(const ClassificationSet& all,
                                                                     double fraction, std::uint64_t seed) {
  ClassificationSet keep, held;
  keep.split = all.split;
  held.split = "valid";
  for (std::size_t i = 0; i < all.size(); ++i) {
    auto& dst = hash_holdout(seed, i, fraction) ? held : keep;
    dst.sequences.push_back(all.sequences[i]);
    dst.labels.push_back(all.labels[i]);
  }
  return {std::move(keep), std::move(held)};
}

/// Rows [begin, end) of `order` padded to the longest sequence among them.
inline Batch classification_batch(const ClassificationSet& set, const std::vector<std::size_t>& order,
                                  std::size_t begin, std::size_t end) {
  Batch b;
  b.size = end - begin;
  for (std::size_t i = begin; i < end; ++i) b.steps = std::max(b.steps, set.sequences[order[i]].size());
  b.tokens.assign(b.size * b.steps, 0);
  for (std::size_t i = begin; i < end; ++i) {
    const auto& seq = set.sequences[order[i]];
    std::copy(seq.begin(), seq.end(), b.tokens.begin() + static_cast<std::ptrdiff_t>((i - begin) * b.steps));
    b.lengths.push_back(seq.size());
    b.labels.push_back(set.labels[order[i]]);
  }
  return b;
}

/// Minibatches in shuffled order (rng given) or file order.
inline std::vector<Batch> classification_batches(const ClassificationSet& set, std::size_t B, Rng* rng) {
  if (B == 0) throw ConfigError("classification_batches: batch size must be positive");
  std::vector<std::size_t> order(set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (rng) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng->below(i)]);
  }
  std::vector<Batch> out;
  for (std::size_t i = 0; i < order.size(); i += B) {
    out.push_back(classification_batch(set, order, i, std::min(order.size(), i + B)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic tasks
// ---------------------------------------------------------------------------

enum class SyntheticKind { SparseSignal, Parity, CopyMemory };

inline std::optional<SyntheticKind> parse_synthetic(std::string_view s) {
  if (s == "sparse_signal") return SyntheticKind::SparseSignal;
  if (s == "parity") return SyntheticKind::Parity;
  if (s == "copy_memory") return SyntheticKind::CopyMemory;
  return std::nullopt;
}

inline constexpr std::int32_t kSignalFirst = 2;
inline constexpr std::int32_t kSignalSecond = 5;

/// Label of a sparse_signal sequence: 1 iff token 2 appears before token 5.
inline std::int32_t sparse_signal_rule(const std::vector<std::int32_t>& seq) {
  const auto a = std::find(seq.begin(), seq.end(), kSignalFirst);
  const auto b = std::find(seq.begin(), seq.end(), kSignalSecond);
  return a < b ? 1 : 0;
}

/// Every sequence holds exactly one 2 and one 5 at distinct random positions;
/// the remaining positions are uniform over the other V − 2 tokens.
inline ClassificationSet sparse_signal(std::size_t n, Rng& rng, std::size_t length = 20, std::size_t vocab = 32) {
  if (vocab < 6 || length < 2) throw ConfigError("sparse_signal: needs vocab >= 6 and length >= 2");
  ClassificationSet set;
  set.split = "train";
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::int32_t> seq(length);
    for (auto& tok : seq) {
      auto v = static_cast<std::int32_t>(rng.below(vocab - 2));
      if (v >= kSignalFirst) ++v;
      if (v >= kSignalSecond) ++v;
      tok = v;
    }
    const std::size_t p = rng.below(length);
    std::size_t q = rng.below(length - 1);
    if (q >= p) ++q;
    seq[p] = kSignalFirst;
    seq[q] = kSignalSecond;
    set.labels.push_back(p < q ? 1 : 0);
    set.sequences.push_back(std::move(seq));
  }
  return set;
}

inline ClassificationSet parity(std::size_t n, Rng& rng, std::size_t length = 12) {
  ClassificationSet set;
  set.split = "train";
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::int32_t> seq(length);
    std::int32_t ones = 0;
    for (auto& tok : seq) {
      tok = static_cast<std::int32_t>(rng.below(2));
      ones += tok;
    }
    set.labels.push_back(ones % 2);
    set.sequences.push_back(std::move(seq));
  }
  return set;
}

/// Token t repeats token t − lag with probability `copy_prob`, otherwise uniform.
inline std::vector<std::int32_t> copy_memory(std::size_t n, Rng& rng, std::size_t lag = 5, std::size_t vocab = 8,
                                             double copy_prob = 0.9) {
  std::vector<std::int32_t> ids(n);
  for (std::size_t t = 0; t < n; ++t) {
    if (t >= lag && rng.uniform() < copy_prob) {
      ids[t] = ids[t - lag];
    } else {
      ids[t] = static_cast<std::int32_t>(rng.below(vocab));
    }
  }
  return ids;
}

// ---------------------------------------------------------------------------
// Bundled datasets
// ---------------------------------------------------------------------------

/// Everything a run consumes. LM tasks fill the *_ids streams, classification
/// fills the sets. Synthetic data has no vocabulary object.
struct TaskData {
  Task task = Task::Classification;
  std::size_t vocab_size = 0;
  std::size_t classes = 0;
  std::optional<Vocabulary> vocab;
  ClassificationSet train, valid, test;
  std::vector<std::int32_t> train_ids, valid_ids, test_ids;

  std::size_t train_items() const { return is_lm(task) ? train_ids.size() : train.size(); }
};

struct SyntheticParams {
  std::size_t samples = 2000;
  std::size_t length = 20;
  std::size_t vocab = 32;
};

/// Train/valid/test drawn from independent streams of one seed; valid and
/// test hold a quarter of `samples` each.
inline TaskData synthetic_task(SyntheticKind kind, const SyntheticParams& params, std::uint64_t seed) {
  Rng root(seed);
  Rng r_train = root.fork(1), r_valid = root.fork(2), r_test = root.fork(3);
  const std::size_t held = std::max<std::size_t>(params.samples / 4, 1);
  TaskData d;
  switch (kind) {
    case SyntheticKind::SparseSignal:
      d.task = Task::Classification;
      d.train = sparse_signal(params.samples, r_train, params.length, params.vocab);
      d.valid = sparse_signal(held, r_valid, params.length, params.vocab);
      d.test = sparse_signal(held, r_test, params.length, params.vocab);
      d.vocab_size = params.vocab;
      d.classes = 2;
      break;
    case SyntheticKind::Parity:
      d.task = Task::Classification;
      d.train = parity(params.samples, r_train, params.length);
      d.valid = parity(held, r_valid, params.length);
      d.test = parity(held, r_test, params.length);
      d.vocab_size = 2;
      d.classes = 2;
      break;
    case SyntheticKind::CopyMemory:
      d.task = Task::CharLM;
      d.train_ids = copy_memory(params.samples * params.length, r_train, 5, params.vocab);
      d.valid_ids = copy_memory(held * params.length, r_valid, 5, params.vocab);
      d.test_ids = copy_memory(held * params.length, r_test, 5, params.vocab);
      d.vocab_size = params.vocab;
      d.classes = params.vocab;
      break;
  }
  d.valid.split = "valid";
  d.test.split = "test";
  return d;
}

}  // namespace svdl
