// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "msft/model.hpp"

namespace msft {

// Layout (little-endian):
//   "MSFTCKPT" | u16 version | body | u32 crc32(version .. end of body)
//   body: u32 layers, d_model, heads, patch, ffn_mult | f64 eps, rope_base
//         u8 mode | u32 len + options text ("key=value;...")
//         u32 record count, then per record:
//           u32 len + name | u8 dtype (0 f32, 1 f64) | u8 rank | u32 extents | values
inline constexpr char kCheckpointMagic[8] = {'M', 'S', 'F', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

enum class StorageType : std::uint8_t { f32 = 0, f64 = 1 };

struct CheckpointRecord {
  std::string name;
  StorageType dtype = StorageType::f32;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  std::uint16_t version = kCheckpointVersion;
  BackboneConfig backbone;
  Mode mode = Mode::zero_shot;
  std::string options;
  std::vector<CheckpointRecord> records;

  const CheckpointRecord* find(const std::string& name) const {
    for (const auto& r : records)
      if (r.name == name) return &r;
    return nullptr;
  }
};

/// Finetuning options as "key=value;..." text.
inline std::string serialize_options(const ModelConfig& cfg) {
  const auto& o = cfg.msft;
  std::ostringstream os;
  os.precision(17);
  os << "K=" << o.scales.K << ";s=" << o.scales.s << ";in_adapter=" << to_string(o.in_adapter)
     << ";attn_adapter=" << to_string(o.attn_adapter) << ";in_scale_mask=" << o.in_scale_mask << ";c2f=" << o.c2f
     << ";f2c=" << o.f2c << ";mixing=" << to_string(o.mixing) << ";aligned_positions=" << o.aligned_positions
     << ";train_mask_token=" << o.train_mask_token << ";msft_lora_rank=" << o.lora_rank
     << ";msft_lora_alpha=" << o.lora_alpha << ";lora_rank=" << cfg.lora_rank << ";lora_alpha=" << cfg.lora_alpha;
  return os.str();
}

inline void parse_options(const std::string& text, ModelConfig& cfg) {
  std::istringstream is(text);
  std::string item;
  auto& o = cfg.msft;
  while (std::getline(is, item, ';')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw CorruptionError("malformed option entry '" + item + "'");
    const std::string k = item.substr(0, eq), v = item.substr(eq + 1);
    if (k == "K") o.scales.K = std::stoul(v);
    else if (k == "s") o.scales.s = std::stoul(v);
    else if (k == "in_adapter") o.in_adapter = parse_adapter_mode(v);
    else if (k == "attn_adapter") o.attn_adapter = parse_adapter_mode(v);
    else if (k == "in_scale_mask") o.in_scale_mask = v == "1";
    else if (k == "c2f") o.c2f = v == "1";
    else if (k == "f2c") o.f2c = v == "1";
    else if (k == "mixing") o.mixing = parse_mixing_mode(v);
    else if (k == "aligned_positions") o.aligned_positions = v == "1";
    else if (k == "train_mask_token") o.train_mask_token = v == "1";
    else if (k == "msft_lora_rank") o.lora_rank = std::stoul(v);
    else if (k == "msft_lora_alpha") o.lora_alpha = std::stod(v);
    else if (k == "lora_rank") cfg.lora_rank = std::stoul(v);
    else if (k == "lora_alpha") cfg.lora_alpha = std::stod(v);
    else throw CorruptionError("unknown option '" + k + "' in checkpoint");
  }
}

namespace detail {

class ByteWriter {
 public:
  template <class T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");
    const auto* p = reinterpret_cast<const unsigned char*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void put_string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  std::vector<unsigned char>& bytes() { return bytes_; }

 private:
  std::vector<unsigned char> bytes_;
};

class ByteReader {
 public:
  ByteReader(const unsigned char* p, std::size_t n) : p_(p), n_(n) {}
  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, p_ + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_string() {
    const auto len = get<std::uint32_t>();
    need(len);
    std::string s(reinterpret_cast<const char*>(p_ + pos_), len);
    pos_ += len;
    return s;
  }
  std::size_t remaining() const { return n_ - pos_; }

 private:
  void need(std::size_t k) const {
    if (pos_ + k > n_) throw CorruptionError("checkpoint truncated");
  }
  const unsigned char* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(const unsigned char* p, std::size_t n) {
  uLong c = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    c = crc32(c, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

}  // namespace detail

/// Values stored as 32-bit floats lose their low bits; rounding the live
/// parameters first makes a 32-bit round trip exact.
inline void round_to_f32(ParamStore& store) {
  for (auto& [name, t] : store.entries())
    for (double& v : t.mutable_data()) v = static_cast<double>(static_cast<float>(v));
}

inline std::vector<unsigned char> encode_checkpoint(const ModelConfig& cfg, const ParamStore& store, StorageType dtype,
                                                    std::uint16_t version = kCheckpointVersion) {
  detail::ByteWriter w;
  for (char c : kCheckpointMagic) w.put<char>(c);
  w.put<std::uint16_t>(version);
  const auto& b = cfg.backbone;
  for (std::size_t v : {b.layers, b.d_model, b.heads, b.patch, b.ffn_mult}) w.put<std::uint32_t>(static_cast<std::uint32_t>(v));
  w.put<double>(b.eps);
  w.put<double>(b.rope_base);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(cfg.mode));
  w.put_string(serialize_options(cfg));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(store.size()));
  for (const auto& [name, t] : store.entries()) {
    w.put_string(name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(dtype));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t e : t.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(e));
    for (double v : t.data()) {
      if (dtype == StorageType::f32) {
        w.put<float>(static_cast<float>(v));
      } else {
        w.put<double>(v);
      }
    }
  }
  auto& bytes = w.bytes();
  const std::uint32_t crc = detail::crc32_of(bytes.data() + sizeof(kCheckpointMagic), bytes.size() - sizeof(kCheckpointMagic));
  w.put<std::uint32_t>(crc);
  return std::move(w.bytes());
}

inline Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes) {
  constexpr std::size_t M = sizeof(kCheckpointMagic);
  if (bytes.size() < M + 2 + 4) throw CorruptionError("checkpoint truncated (" + std::to_string(bytes.size()) + " bytes)");
  if (std::memcmp(bytes.data(), kCheckpointMagic, M) != 0) throw CorruptionError("not a checkpoint (bad magic)");
  std::uint16_t version;
  std::memcpy(&version, bytes.data() + M, 2);
  if (version > kCheckpointVersion) {
    throw VersionError("checkpoint format version " + std::to_string(version) + " is newer than supported version " +
                       std::to_string(kCheckpointVersion));
  }
  if (version == 0) throw CorruptionError("checkpoint format version 0 is invalid");
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
  const std::uint32_t actual = detail::crc32_of(bytes.data() + M, bytes.size() - M - 4);
  if (stored != actual) throw CorruptionError("checkpoint CRC mismatch (file corrupted or truncated)");

  detail::ByteReader r(bytes.data() + M, bytes.size() - M - 4);
  Checkpoint ck;
  ck.version = r.get<std::uint16_t>();
  auto& b = ck.backbone;
  b.layers = r.get<std::uint32_t>();
  b.d_model = r.get<std::uint32_t>();
  b.heads = r.get<std::uint32_t>();
  b.patch = r.get<std::uint32_t>();
  b.ffn_mult = r.get<std::uint32_t>();
  b.eps = r.get<double>();
  b.rope_base = r.get<double>();
  const auto mode = r.get<std::uint8_t>();
  if (mode > static_cast<std::uint8_t>(Mode::msft)) throw CorruptionError("unknown mode tag " + std::to_string(mode));
  ck.mode = static_cast<Mode>(mode);
  ck.options = r.get_string();
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointRecord rec;
    rec.name = r.get_string();
    const auto dtype = r.get<std::uint8_t>();
    if (dtype > 1) throw CorruptionError("unknown dtype tag for '" + rec.name + "'");
    rec.dtype = static_cast<StorageType>(dtype);
    const auto rank = r.get<std::uint8_t>();
    for (std::uint8_t k = 0; k < rank; ++k) rec.shape.push_back(r.get<std::uint32_t>());
    const std::size_t n = shape_numel(rec.shape);
    const std::size_t width = rec.dtype == StorageType::f32 ? 4 : 8;
    if (n > r.remaining() / width) throw CorruptionError("checkpoint truncated in '" + rec.name + "'");
    rec.values.resize(n);
    for (auto& v : rec.values) v = rec.dtype == StorageType::f32 ? static_cast<double>(r.get<float>()) : r.get<double>();
    ck.records.push_back(std::move(rec));
  }
  if (r.remaining() != 0) throw CorruptionError("trailing bytes after checkpoint records");
  return ck;
}

/// Write-to-temp then rename.
inline void write_file_atomic(const std::string& path, const std::vector<unsigned char>& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot write '" + tmp + "'");
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw CheckpointError("write failed for '" + tmp + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError("cannot move '" + tmp + "' to '" + path + "': " + ec.message());
}

inline void save_checkpoint(const std::string& path, const Forecaster& model, StorageType dtype = StorageType::f32) {
  write_file_atomic(path, encode_checkpoint(model.config(), model.params(), dtype));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint '" + path + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

/// Model configuration recorded in a checkpoint.
inline ModelConfig checkpoint_config(const Checkpoint& ck) {
  ModelConfig cfg;
  cfg.backbone = ck.backbone;
  cfg.mode = ck.mode;
  parse_options(ck.options, cfg);
  return cfg;
}

inline void require_compatible(const BackboneConfig& have, const BackboneConfig& want) {
  auto field = [](const char* name, auto a, auto b) {
    if (a != b) {
      std::ostringstream os;
      os << "checkpoint backbone " << name << "=" << a << " does not match model " << name << "=" << b;
      throw IncompatibleError(os.str());
    }
  };
  field("layers", have.layers, want.layers);
  field("d_model", have.d_model, want.d_model);
  field("heads", have.heads, want.heads);
  field("patch", have.patch, want.patch);
  field("ffn_mult", have.ffn_mult, want.ffn_mult);
  field("eps", have.eps, want.eps);
  field("rope_base", have.rope_base, want.rope_base);
}

/// Copies checkpoint values into `store`. With `backbone_only`, only the
/// "backbone.*" parameters are required and written; otherwise every store
/// parameter must be present. Everything is validated before any write.
inline void apply_checkpoint(const Checkpoint& ck, const BackboneConfig& model_cfg, ParamStore& store,
                             bool backbone_only) {
  require_compatible(ck.backbone, model_cfg);
  std::vector<std::pair<Tensor*, const CheckpointRecord*>> plan;
  for (auto& [name, t] : store.entries()) {
    if (backbone_only && name.rfind("backbone.", 0) != 0) continue;
    const auto* rec = ck.find(name);
    if (!rec) throw IncompatibleError("checkpoint lacks parameter '" + name + "'");
    if (rec->shape != t.shape()) {
      throw IncompatibleError("parameter '" + name + "' has shape " + shape_str(rec->shape) + " in the checkpoint, " +
                              shape_str(t.shape()) + " in the model");
    }
    plan.emplace_back(&t, rec);
  }
  for (auto& [t, rec] : plan) std::copy(rec->values.begin(), rec->values.end(), t->mutable_data().begin());
}

}  // namespace msft
