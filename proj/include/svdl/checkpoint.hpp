#pragma once

// Binary checkpoint: "SVDL", u32 version, u64 manifest length, JSON manifest,
// then little-endian payloads in manifest order (f32 arrays, bit-packed
// masks, vocabulary bytes).

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "svdl/compression.hpp"
#include "svdl/error.hpp"
#include "svdl/sparse_lstm.hpp"

namespace svdl {

inline constexpr char kCheckpointMagic[4] = {'S', 'V', 'D', 'L'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Model<float> model;
  std::optional<ParamSet<Mask>> masks;  // present once pruned
  double tau = 0.05;
  nlohmann::json config = nlohmann::json::object();
  Rng::State rng{};
  std::string vocab;  // Vocabulary::serialize() output, empty for synthetic data
  std::uint64_t epoch = 0;
  nlohmann::json info = nlohmann::json::object();

  bool pruned() const { return masks.has_value(); }
};

namespace detail {

inline std::string_view kind_name(ParamKind k) {
  switch (k) {
    case ParamKind::Deterministic: return "deterministic";
    case ParamKind::Weight: return "weight";
    case ParamKind::Group: return "group";
  }
  return "?";
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint64_t get_le(const std::string& in, std::size_t pos, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

inline void put_floats(std::string& out, const Array2<float>& a) {
  for (float v : a.flat()) put_u32(out, std::bit_cast<std::uint32_t>(v));
}

inline std::size_t mask_bytes(std::size_t n) { return (n + 7) / 8; }

inline void put_mask(std::string& out, const Mask& m) {
  std::string bytes(mask_bytes(m.keep.size()), '\0');
  for (std::size_t i = 0; i < m.keep.size(); ++i)
    if (m.keep[i]) bytes[i / 8] = static_cast<char>(static_cast<unsigned char>(bytes[i / 8]) | (1u << (i % 8)));
  out += bytes;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::uint64_t parse_hex64(const std::string& s) { return std::stoull(s, nullptr, 16); }

inline nlohmann::json shape_json(const ModelShape& s) {
  return {{"task", task_name(s.task)},  {"variant", variant_name(s.variant)}, {"vocab", s.vocab},
          {"emb_dim", s.emb_dim},       {"hidden", s.hidden},                 {"classes", s.classes}};
}

inline ModelShape shape_from_json(const nlohmann::json& j) {
  ModelShape s;
  const auto task = parse_task(j.at("task").get<std::string>());
  const auto variant = parse_variant(j.at("variant").get<std::string>());
  if (!task || !variant) throw CheckpointError(CheckpointError::Kind::Manifest, "checkpoint: unknown task or variant");
  s.task = *task;
  s.variant = *variant;
  s.vocab = j.at("vocab").get<std::size_t>();
  s.emb_dim = j.at("emb_dim").get<std::size_t>();
  s.hidden = j.at("hidden").get<std::size_t>();
  s.classes = j.at("classes").get<std::size_t>();
  return s;
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
  using nlohmann::json;
  json tensors = json::array();
  std::string payload;
  auto emit = [&](const std::string& name, const VariationalParam<float>& p, const Mask* mask) {
    json parts = json::array();
    parts.push_back("mean");
    detail::put_floats(payload, p.mean);
    if (p.is_variational()) {
      parts.push_back("log_sigma");
      detail::put_floats(payload, p.log_sigma);
    }
    if (mask && !mask->empty()) {
      parts.push_back("mask");
      detail::put_mask(payload, *mask);
    }
    tensors.push_back({{"name", name},
                       {"kind", detail::kind_name(p.kind)},
                       {"rows", p.mean.rows()},
                       {"cols", p.mean.cols()},
                       {"dtype", "f32"},
                       {"parts", parts}});
  };
  if (ck.masks) {
    ParamSet<Mask> masks = *ck.masks;
    for_each_slot([&](const std::string& name, const VariationalParam<float>& p, const Mask& m) { emit(name, p, &m); },
                  ck.model.params, masks);
  } else {
    for_each_slot([&](const std::string& name, const VariationalParam<float>& p) { emit(name, p, nullptr); },
                  ck.model.params);
  }
  const std::size_t tensor_bytes = payload.size();
  payload += ck.vocab;

  json rng = {{"algorithm", Rng::kAlgorithm},
              {"s", json::array()},
              {"has_spare", ck.rng.has_spare},
              {"spare", detail::hex64(std::bit_cast<std::uint64_t>(ck.rng.spare))}};
  for (auto w : ck.rng.s) rng["s"].push_back(detail::hex64(w));

  json manifest = {{"format", "svdl-checkpoint"},
                   {"shape", detail::shape_json(ck.model.shape)},
                   {"tensors", tensors},
                   {"pruned", ck.pruned()},
                   {"tau", ck.tau},
                   {"config", ck.config},
                   {"rng", rng},
                   {"epoch", ck.epoch},
                   {"info", ck.info},
                   {"tensor_bytes", tensor_bytes},
                   {"vocab_bytes", ck.vocab.size()},
                   {"payload_bytes", payload.size()}};
  const std::string text = manifest.dump(1);

  std::string out(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u64(out, text.size());
  out += text;
  out += payload;
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  using K = CheckpointError::Kind;
  using nlohmann::json;
  if (bytes.size() < 4) throw CheckpointError(K::Truncated, "checkpoint: file shorter than its magic");
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw CheckpointError(K::Magic, "checkpoint: bad magic");
  if (bytes.size() < 16) throw CheckpointError(K::Truncated, "checkpoint: header truncated");
  const auto version = static_cast<std::uint32_t>(detail::get_le(bytes, 4, 4));
  if (version != kCheckpointVersion) {
    throw CheckpointError(K::Version, "checkpoint: version " + std::to_string(version) + ", expected " +
                                          std::to_string(kCheckpointVersion));
  }
  const std::uint64_t mlen = detail::get_le(bytes, 8, 8);
  if (mlen > bytes.size() - 16) throw CheckpointError(K::Truncated, "checkpoint: manifest truncated");
  json manifest;
  try {
    manifest = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(mlen));
  } catch (const json::exception& e) {
    throw CheckpointError(K::Manifest, std::string("checkpoint: manifest is not valid JSON: ") + e.what());
  }

  Checkpoint ck;
  std::size_t pos = 16 + mlen;
  try {
    const ModelShape shape = detail::shape_from_json(manifest.at("shape"));
    ck.model = make_model<float>(shape);
    ck.tau = manifest.at("tau").get<double>();
    ck.config = manifest.at("config");
    ck.epoch = manifest.at("epoch").get<std::uint64_t>();
    ck.info = manifest.at("info");
    const auto& rng = manifest.at("rng");
    for (std::size_t i = 0; i < 4; ++i) ck.rng.s[i] = detail::parse_hex64(rng.at("s").at(i).get<std::string>());
    ck.rng.has_spare = rng.at("has_spare").get<bool>();
    ck.rng.spare = std::bit_cast<double>(detail::parse_hex64(rng.at("spare").get<std::string>()));
    const bool pruned = manifest.at("pruned").get<bool>();

    const auto& tensors = manifest.at("tensors");
    std::size_t expected = 0;
    for (const auto& t : tensors) {
      const std::size_t n = t.at("rows").get<std::size_t>() * t.at("cols").get<std::size_t>();
      for (const auto& part : t.at("parts"))
        expected += part.get<std::string>() == "mask" ? detail::mask_bytes(n) : 4 * n;
    }
    const std::size_t tensor_bytes = manifest.at("tensor_bytes").get<std::size_t>();
    const std::size_t vocab_bytes = manifest.at("vocab_bytes").get<std::size_t>();
    const std::size_t payload_bytes = manifest.at("payload_bytes").get<std::size_t>();
    if (expected != tensor_bytes || tensor_bytes + vocab_bytes != payload_bytes) {
      throw CheckpointError(K::Length, "checkpoint: manifest lists " + std::to_string(expected) +
                                           " tensor bytes but declares " + std::to_string(tensor_bytes));
    }
    const std::size_t have = bytes.size() - pos;
    if (have < payload_bytes) {
      throw CheckpointError(K::Truncated, "checkpoint: payload has " + std::to_string(have) + " of " +
                                              std::to_string(payload_bytes) + " bytes");
    }
    if (have > payload_bytes) {
      throw CheckpointError(K::Length, "checkpoint: " + std::to_string(have - payload_bytes) +
                                           " trailing bytes after the payload");
    }

    if (pruned) ck.masks = map_slots<Mask>(ck.model.params, [](const VariationalParam<float>&) { return Mask{}; });
    std::size_t index = 0;
    auto read_floats = [&](Array2<float>& a) {
      for (auto& v : a.flat()) {
        v = std::bit_cast<float>(static_cast<std::uint32_t>(detail::get_le(bytes, pos, 4)));
        pos += 4;
      }
    };
    auto load = [&](const std::string& name, VariationalParam<float>& p, Mask* mask) {
      if (index >= tensors.size()) throw CheckpointError(K::Manifest, "checkpoint: missing tensor " + name);
      const auto& t = tensors.at(index++);
      if (t.at("name").get<std::string>() != name || t.at("rows").get<std::size_t>() != p.mean.rows() ||
          t.at("cols").get<std::size_t>() != p.mean.cols() || t.at("kind").get<std::string>() != detail::kind_name(p.kind)) {
        throw CheckpointError(K::Manifest, "checkpoint: tensor " + t.at("name").get<std::string>() +
                                               " does not match the model layout at " + name);
      }
      for (const auto& part : t.at("parts")) {
        const std::string what = part.get<std::string>();
        if (what == "mean") {
          read_floats(p.mean);
        } else if (what == "log_sigma" && p.is_variational()) {
          read_floats(p.log_sigma);
        } else if (what == "mask" && mask) {
          const std::size_t n = p.mean.size();
          *mask = Mask{p.mean.rows(), p.mean.cols(), std::vector<std::uint8_t>(n)};
          for (std::size_t i = 0; i < n; ++i)
            mask->keep[i] = (static_cast<unsigned char>(bytes[pos + i / 8]) >> (i % 8)) & 1u;
          pos += detail::mask_bytes(n);
        } else {
          throw CheckpointError(K::Manifest, "checkpoint: unexpected part " + what + " of " + name);
        }
      }
    };
    if (ck.masks) {
      for_each_slot([&](const std::string& name, VariationalParam<float>& p, Mask& m) { load(name, p, &m); },
                    ck.model.params, *ck.masks);
    } else {
      for_each_slot([&](const std::string& name, VariationalParam<float>& p) { load(name, p, nullptr); },
                    ck.model.params);
    }
    if (index != tensors.size()) throw CheckpointError(K::Manifest, "checkpoint: extra tensors in manifest");
    ck.vocab = bytes.substr(pos, vocab_bytes);
  } catch (const json::exception& e) {
    throw CheckpointError(K::Manifest, std::string("checkpoint: malformed manifest: ") + e.what());
  } catch (const ShapeError& e) {
    throw CheckpointError(K::Manifest, std::string("checkpoint: ") + e.what());
  }
  return ck;
}

/// Written to a sibling temp file, then renamed over the target.
inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(ck);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(CheckpointError::Kind::Io, "cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw CheckpointError(CheckpointError::Kind::Io, "write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::Io, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

/// Masked means as a PrunedModel. Only valid for pruned checkpoints.
inline PrunedModel<float> pruned_from_checkpoint(const Checkpoint& ck) {
  if (!ck.masks) throw Error("checkpoint is not pruned");
  PrunedModel<float> p;
  p.model = ck.model;
  p.masks = *ck.masks;
  p.tau = ck.tau;
  return p;
}

}  // namespace svdl
