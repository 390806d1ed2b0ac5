// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoint container.  Everything is little-endian; reals are IEEE f64.
//
//   GaRA adapter   "GARA" u32 version, u64 D, u64 K, u64 r_L, u64 r_H, f64 tau,
//                  arrays: lower a, lower b, higher a, higher b,
//                          space_mlp (w0 b0 w1 b1), lower_mlp (w0 b0 .. b2), higher_mlp
//   LoRA           "GLRA" u32 version, u64 D, u64 K, u64 R, arrays: a, b
//   MoE-LoRA       "GMOE" u32 version, u64 D, u64 K, u64 E, E x u64 rank, f64 tau,
//                  arrays: (a, b) per expert, router (w0 b0 w1 b1)
//   single-space   "GUNI" u32 version, u64 D, u64 K, u64 r, f64 tau, arrays: a, b, gate (w0 .. b2)
//   backbone       "GBBN" u32 version, u64 image_size, patch, dim, blocks, ff_hidden, seed,
//                  arrays in ToyBackbone::for_each_param order
//   model          "GMDL" u32 version, blob backbone, u64 slots, per slot: u8 kind, blob adapter
//   images         "GIMG" u32 version, u64 count, u64 size, per sample: clean, corrupted, mask
//
// An array is u64 element count followed by that many f64; a blob is u64 byte
// length followed by the bytes.  Gate hidden widths are recovered from array
// lengths.
#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "gara/baselines.hpp"
#include "gara/bench.hpp"
#include "gara/errors.hpp"
#include "gara/gated_rank.hpp"
#include "gara/model.hpp"

namespace gara::io {

inline constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  void magic(std::string_view m) {
    if (m.size() != 4) throw UsageError("checkpoint magic must be 4 bytes");
    buf_.append(m);
  }
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void array(std::span<const double> xs) {
    u64(xs.size());
    for (double x : xs) f64(x);
  }
  void blob(std::string_view bytes) {
    u64(bytes.size());
    buf_.append(bytes);
  }

  const std::string& bytes() const noexcept { return buf_; }
  std::string take() { return std::move(buf_); }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(std::string_view data, std::string what) : data_(data), what_(std::move(what)) {}

  void expect_magic(std::string_view m) {
    need(4);
    if (data_.substr(pos_, 4) != m) {
      throw DataError(what_ + ": bad magic '" + std::string(data_.substr(pos_, 4)) + "', expected '" +
                      std::string(m) + "'");
    }
    pos_ += 4;
  }
  void expect_version() {
    const std::uint32_t v = u32();
    if (v != kVersion) throw DataError(what_ + ": unsupported version " + std::to_string(v));
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(data_[pos_++])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(data_[pos_++])) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::vector<double> array() {
    const std::uint64_t n = u64();
    if (n > remaining() / 8) throw DataError(what_ + ": array of " + std::to_string(n) + " elements overruns input");
    std::vector<double> out(n);
    for (auto& x : out) x = f64();
    return out;
  }
  std::string_view blob() {
    const std::uint64_t n = u64();
    need(n);
    const std::string_view s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::vector<std::vector<double>> arrays_to_end() {
    std::vector<std::vector<double>> out;
    while (remaining() > 0) out.push_back(array());
    return out;
  }
  void expect_end() const {
    if (remaining() != 0) throw DataError(what_ + ": " + std::to_string(remaining()) + " trailing bytes");
  }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }
  const std::string& what() const noexcept { return what_; }

 private:
  void need(std::uint64_t n) const {
    if (n > remaining()) throw DataError(what_ + ": truncated input");
  }
  std::string_view data_;
  std::size_t pos_ = 0;
  std::string what_;
};

namespace detail {

template <class Adapter>
void write_params(Writer& w, const Adapter& a) {
  a.for_each_param([&](const ad::Param& p) { w.array(p.value.data()); });
}

template <class Adapter>
void assign_params(Adapter& a, const std::vector<std::vector<double>>& arrays, const std::string& what) {
  std::size_t i = 0;
  a.for_each_param([&](ad::Param& p) {
    if (i >= arrays.size()) throw DataError(what + ": missing array for " + p.name);
    const auto& src = arrays[i++];
    if (src.size() != p.value.size()) {
      throw DataError(what + ": array for " + p.name + " has " + std::to_string(src.size()) + " elements, expected " +
                      std::to_string(p.value.size()));
    }
    std::copy(src.begin(), src.end(), p.value.data().begin());
  });
  if (i != arrays.size()) throw DataError(what + ": " + std::to_string(arrays.size() - i) + " unexpected arrays");
}

inline std::size_t hidden_from(const std::vector<std::vector<double>>& arrays, std::size_t index, std::size_t fin,
                               const std::string& what) {
  if (index >= arrays.size() || fin == 0 || arrays[index].empty() || arrays[index].size() % fin != 0) {
    throw DataError(what + ": cannot infer gate hidden width");
  }
  return arrays[index].size() / fin;
}

inline std::size_t checked_dim(std::uint64_t v, const std::string& what) {
  if (v == 0 || v > (1u << 20)) throw DataError(what + ": implausible dimension " + std::to_string(v));
  return static_cast<std::size_t>(v);
}

}  // namespace detail

// ---- adapters ----

inline std::string encode(const GaraAdapter& a) {
  const GaraConfig& c = a.config();
  Writer w;
  w.magic("GARA");
  w.u32(kVersion);
  w.u64(c.output_dim);
  w.u64(c.input_dim);
  w.u64(c.rank_lower);
  w.u64(c.rank_higher);
  w.f64(c.tau);
  detail::write_params(w, a);
  return w.take();
}

inline GaraAdapter decode_gara(std::string_view bytes, const std::string& name = "gara") {
  Reader r(bytes, "GaRA checkpoint");
  r.expect_magic("GARA");
  r.expect_version();
  GaraConfig c;
  c.output_dim = detail::checked_dim(r.u64(), r.what());
  c.input_dim = detail::checked_dim(r.u64(), r.what());
  c.rank_lower = r.u64();
  c.rank_higher = r.u64();
  c.tau = r.f64();
  const auto arrays = r.arrays_to_end();
  c.gate_hidden = detail::hidden_from(arrays, 4, c.input_dim, r.what());
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw DataError(r.what() + ": " + e.what());
  }
  SeededRng rng(0);
  GaraAdapter a(c, rng, name);
  detail::assign_params(a, arrays, r.what());
  return a;
}

inline std::string encode(const LoraAdapter& a) {
  Writer w;
  w.magic("GLRA");
  w.u32(kVersion);
  w.u64(a.output_dim());
  w.u64(a.input_dim());
  w.u64(a.rank());
  detail::write_params(w, a);
  return w.take();
}

inline LoraAdapter decode_lora(std::string_view bytes, const std::string& name = "lora") {
  Reader r(bytes, "LoRA checkpoint");
  r.expect_magic("GLRA");
  r.expect_version();
  const std::size_t d = detail::checked_dim(r.u64(), r.what());
  const std::size_t k = detail::checked_dim(r.u64(), r.what());
  const std::size_t rank = r.u64();
  SeededRng rng(0);
  LoraAdapter a;
  try {
    a = LoraAdapter(rank, d, k, rng, name);
  } catch (const ConfigError& e) {
    throw DataError(r.what() + ": " + e.what());
  }
  detail::assign_params(a, r.arrays_to_end(), r.what());
  return a;
}

inline std::string encode(const MoeLoraAdapter& a) {
  const MoeConfig& c = a.config();
  Writer w;
  w.magic("GMOE");
  w.u32(kVersion);
  w.u64(c.output_dim);
  w.u64(c.input_dim);
  w.u64(c.expert_ranks.size());
  for (auto r : c.expert_ranks) w.u64(r);
  w.f64(c.tau);
  detail::write_params(w, a);
  return w.take();
}

inline MoeLoraAdapter decode_moe(std::string_view bytes, const std::string& name = "moe") {
  Reader r(bytes, "MoE checkpoint");
  r.expect_magic("GMOE");
  r.expect_version();
  MoeConfig c;
  c.output_dim = detail::checked_dim(r.u64(), r.what());
  c.input_dim = detail::checked_dim(r.u64(), r.what());
  const std::uint64_t e = r.u64();
  if (e == 0 || e > 1024) throw DataError(r.what() + ": bad expert count " + std::to_string(e));
  c.expert_ranks.resize(e);
  for (auto& rank : c.expert_ranks) rank = r.u64();
  c.tau = r.f64();
  const auto arrays = r.arrays_to_end();
  c.gate_hidden = detail::hidden_from(arrays, 2 * e, c.input_dim, r.what());
  SeededRng rng(0);
  MoeLoraAdapter a;
  try {
    a = MoeLoraAdapter(c, rng, name);
  } catch (const ConfigError& ex) {
    throw DataError(r.what() + ": " + ex.what());
  }
  detail::assign_params(a, arrays, r.what());
  return a;
}

inline std::string encode(const UnifiedGatedAdapter& a) {
  const UnifiedGatedConfig& c = a.config();
  Writer w;
  w.magic("GUNI");
  w.u32(kVersion);
  w.u64(c.output_dim);
  w.u64(c.input_dim);
  w.u64(c.rank);
  w.f64(c.tau);
  detail::write_params(w, a);
  return w.take();
}

inline UnifiedGatedAdapter decode_unified(std::string_view bytes, const std::string& name = "unified") {
  Reader r(bytes, "single-space checkpoint");
  r.expect_magic("GUNI");
  r.expect_version();
  UnifiedGatedConfig c;
  c.output_dim = detail::checked_dim(r.u64(), r.what());
  c.input_dim = detail::checked_dim(r.u64(), r.what());
  c.rank = r.u64();
  c.tau = r.f64();
  const auto arrays = r.arrays_to_end();
  c.gate_hidden = detail::hidden_from(arrays, 2, c.input_dim, r.what());
  SeededRng rng(0);
  UnifiedGatedAdapter a;
  try {
    a = UnifiedGatedAdapter(c, rng, name);
  } catch (const ConfigError& e) {
    throw DataError(r.what() + ": " + e.what());
  }
  detail::assign_params(a, arrays, r.what());
  return a;
}

// ---- backbone and model ----

inline std::string encode(const ToyBackbone& b) {
  const BackboneConfig& c = b.config();
  Writer w;
  w.magic("GBBN");
  w.u32(kVersion);
  for (std::uint64_t v : {std::uint64_t{c.image_size}, std::uint64_t{c.patch}, std::uint64_t{c.dim},
                          std::uint64_t{c.blocks}, std::uint64_t{c.ff_hidden}, c.seed})
    w.u64(v);
  detail::write_params(w, b);
  return w.take();
}

inline ToyBackbone decode_backbone(std::string_view bytes) {
  Reader r(bytes, "backbone checkpoint");
  r.expect_magic("GBBN");
  r.expect_version();
  BackboneConfig c;
  c.image_size = detail::checked_dim(r.u64(), r.what());
  c.patch = detail::checked_dim(r.u64(), r.what());
  c.dim = detail::checked_dim(r.u64(), r.what());
  c.blocks = detail::checked_dim(r.u64(), r.what());
  c.ff_hidden = detail::checked_dim(r.u64(), r.what());
  c.seed = r.u64();
  ToyBackbone b;
  try {
    b = ToyBackbone(c);
  } catch (const ConfigError& e) {
    throw DataError(r.what() + ": " + e.what());
  }
  detail::assign_params(b, r.arrays_to_end(), r.what());
  b.set_trainable(false);
  return b;
}

inline std::string encode(const Model& m) {
  Writer w;
  w.magic("GMDL");
  w.u32(kVersion);
  w.blob(encode(m.backbone()));
  w.u64(m.slots().size());
  for (const auto& s : m.slots()) {
    w.u8(static_cast<std::uint8_t>(s.adapter.index()));
    std::visit([&](const auto& a) {
      if constexpr (std::is_same_v<std::decay_t<decltype(a)>, std::monostate>) {
        w.blob({});
      } else {
        w.blob(encode(a));
      }
    }, s.adapter);
  }
  return w.take();
}

inline Model decode_model(std::string_view bytes) {
  Reader r(bytes, "model checkpoint");
  r.expect_magic("GMDL");
  r.expect_version();
  Model m(decode_backbone(r.blob()));
  const std::uint64_t n = r.u64();
  if (n != m.slots().size()) {
    throw DataError(r.what() + ": " + std::to_string(n) + " slots, backbone has " + std::to_string(m.slots().size()));
  }
  for (auto& s : m.slots()) {
    const std::uint8_t kind = r.u8();
    const std::string_view blob = r.blob();
    const std::string name = "block" + std::to_string(s.layer) + "." + to_string(s.proj);
    switch (kind) {
      case 0: s.adapter = std::monostate{}; break;
      case 1: s.adapter = decode_gara(blob, name); break;
      case 2: s.adapter = decode_lora(blob, name); break;
      case 3: s.adapter = decode_moe(blob, name); break;
      case 4: s.adapter = decode_unified(blob, name); break;
      default: throw DataError(r.what() + ": unknown adapter kind tag " + std::to_string(kind));
    }
  }
  r.expect_end();
  return m;
}

// ---- datasets ----

inline std::string encode_images(const Dataset& data) {
  Writer w;
  w.magic("GIMG");
  w.u32(kVersion);
  w.u64(data.size());
  w.u64(data.empty() ? 0 : data.front().clean.rows());
  for (const auto& s : data) {
    w.array(s.clean.data());
    w.array(s.corrupted.data());
    w.array(s.mask.as_matrix().data());
  }
  return w.take();
}

/// One JSON record per line: id, image_id, kind ("clean" for uncorrupted samples), severity, seed.
inline void write_manifest(std::ostream& os, const Dataset& data) {
  for (const auto& s : data) {
    nlohmann::ordered_json j;
    j["id"] = s.id;
    j["image_id"] = s.image_id;
    j["kind"] = s.is_clean ? std::string("clean") : std::string(to_string(s.spec.kind));
    j["severity"] = s.is_clean ? 0 : s.spec.severity;
    j["seed"] = s.is_clean ? 0 : s.spec.seed;
    os << j.dump() << '\n';
  }
}

// ---- files ----

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed: " + path.string());
}

inline std::string read_file(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw MissingFileError("no such file: " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFileError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void save_model(const std::filesystem::path& path, const Model& m) { write_file(path, encode(m)); }
inline Model load_model(const std::filesystem::path& path) { return decode_model(read_file(path)); }
inline void save_backbone(const std::filesystem::path& path, const ToyBackbone& b) { write_file(path, encode(b)); }
inline ToyBackbone load_backbone(const std::filesystem::path& path) { return decode_backbone(read_file(path)); }

}  // namespace gara::io
