#include "dipnet/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>

#include "dipnet/error.hpp"

namespace dipnet {

namespace {

constexpr char kMagic[8] = {'D', 'I', 'P', 'N', 'C', 'K', 'P', 'T'};

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}
void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<uint32_t>(f)); }
void put_str(std::string& out, const std::string& s) {
  put_u32(out, uint32_t(s.size()));
  out.append(s);
}

struct Reader {
  const std::string& buf;
  size_t pos = 0;
  explicit Reader(const std::string& b) : buf(b) {}
  void need(size_t n) const {
    if (pos + n > buf.size()) throw IoError("checkpoint truncated");
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(uint8_t(buf[pos + size_t(i)])) << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(uint8_t(buf[pos + size_t(i)])) << (8 * i);
    pos += 8;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str() {
    uint32_t n = u32();
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

const CheckpointData::Blob& CheckpointData::blob(const std::string& name) const {
  for (const Blob& b : blobs)
    if (b.name == name) return b;
  throw IoError("checkpoint: missing blob " + name);
}

uint64_t CheckpointData::counter(const std::string& name) const {
  for (const auto& [k, v] : counters)
    if (k == name) return v;
  throw IoError("checkpoint: missing counter " + name);
}

void save_checkpoint(const CheckpointData& data, const std::string& path) {
  std::string out;
  out.append(kMagic, 8);
  put_u32(out, kCheckpointVersion);
  put_str(out, data.fingerprint);
  put_u64(out, uint64_t(data.step));
  put_str(out, data.rng_state);
  put_u32(out, uint32_t(data.counters.size()));
  for (const auto& [name, v] : data.counters) {
    put_str(out, name);
    put_u64(out, v);
  }
  put_u32(out, uint32_t(data.blobs.size()));
  for (const CheckpointData::Blob& b : data.blobs) {
    put_str(out, b.name);
    put_u32(out, uint32_t(b.dims.size()));
    uint64_t numel = 1;
    for (uint32_t d : b.dims) {
      put_u32(out, d);
      numel *= d;
    }
    if (numel != b.values.size()) throw Error("checkpoint: blob " + b.name + " dims/values disagree");
    for (float f : b.values) put_f32(out, f);
  }
  uint32_t crc = uint32_t(crc32(0L, reinterpret_cast<const Bytef*>(out.data()), uInt(out.size())));
  put_u32(out, crc);

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write checkpoint " + path);
  f.write(out.data(), std::streamsize(out.size()));
  if (!f) throw IoError("short checkpoint write: " + path);
}

CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 16 || std::memcmp(buf.data(), kMagic, 8) != 0)
    throw IoError("not a checkpoint file: " + path);
  uint32_t stored_crc = 0;
  for (int i = 0; i < 4; ++i)
    stored_crc |= uint32_t(uint8_t(buf[buf.size() - 4 + size_t(i)])) << (8 * i);
  uint32_t crc =
      uint32_t(crc32(0L, reinterpret_cast<const Bytef*>(buf.data()), uInt(buf.size() - 4)));
  if (crc != stored_crc) throw IoError("checkpoint crc mismatch (corrupt file): " + path);

  Reader r(buf);
  r.pos = 8;
  uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw IoError("checkpoint version " + std::to_string(version) + " unsupported");
  CheckpointData data;
  data.fingerprint = r.str();
  data.step = int64_t(r.u64());
  data.rng_state = r.str();
  uint32_t ncounter = r.u32();
  for (uint32_t i = 0; i < ncounter; ++i) {
    std::string name = r.str();
    uint64_t v = r.u64();
    data.counters.emplace_back(std::move(name), v);
  }
  uint32_t nblob = r.u32();
  for (uint32_t i = 0; i < nblob; ++i) {
    CheckpointData::Blob b;
    b.name = r.str();
    uint32_t rank = r.u32();
    uint64_t numel = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      b.dims.push_back(r.u32());
      numel *= b.dims.back();
    }
    b.values.resize(numel);
    for (uint64_t k = 0; k < numel; ++k) b.values[k] = r.f32();
    data.blobs.push_back(std::move(b));
  }
  if (r.pos != buf.size() - 4) throw IoError("checkpoint has trailing bytes: " + path);
  return data;
}

void require_fingerprint(const CheckpointData& data, const std::string& expected) {
  if (data.fingerprint != expected)
    throw ConfigError("checkpoint fingerprint mismatch:\n  file:     " + data.fingerprint +
                      "\n  expected: " + expected);
}

namespace {

template <typename T>
CheckpointData::Blob to_blob(const std::string& name, const Tensor<T>& t) {
  CheckpointData::Blob b;
  b.name = name;
  for (int i = 0; i < t.shape().rank(); ++i) b.dims.push_back(uint32_t(t.shape()[i]));
  b.values.reserve(size_t(t.numel()));
  for (int64_t i = 0; i < t.numel(); ++i) b.values.push_back(float(t[i]));
  return b;
}

template <typename T>
void from_blob(const CheckpointData::Blob& b, Tensor<T>& t) {
  if (uint64_t(t.numel()) != b.values.size())
    throw ConfigError("checkpoint blob " + b.name + " has " + std::to_string(b.values.size()) +
                      " values, expected " + std::to_string(t.numel()));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = T(b.values[size_t(i)]);
}

}  // namespace

template <typename T>
void pack_model(CheckpointData& data, const std::string& prefix, const Model<T>& m) {
  for (const auto& p : m.params()) data.blobs.push_back(to_blob(prefix + "param:" + p->name, p->value));
  for (const auto& s : m.all_stats()) {
    data.blobs.push_back(to_blob(prefix + "bn_mean:" + s->name, s->mean));
    data.blobs.push_back(to_blob(prefix + "bn_var:" + s->name, s->var));
    data.counters.emplace_back(prefix + "bn_updates:" + s->name, uint64_t(s->updates));
  }
}

template <typename T>
void unpack_model(const CheckpointData& data, const std::string& prefix, Model<T>& m) {
  for (const auto& p : m.params()) from_blob(data.blob(prefix + "param:" + p->name), p->value);
  for (const auto& s : m.all_stats_mutable()) {
    from_blob(data.blob(prefix + "bn_mean:" + s->name), s->mean);
    from_blob(data.blob(prefix + "bn_var:" + s->name), s->var);
    s->updates = int64_t(data.counter(prefix + "bn_updates:" + s->name));
  }
}

template <typename T>
void pack_adam(CheckpointData& data, const std::string& prefix, Adam<T>& opt) {
  const auto& params = opt.params();
  for (size_t i = 0; i < params.size(); ++i) {
    data.blobs.push_back(to_blob(prefix + "adam_m:" + params[i]->name, opt.moments1()[i]));
    data.blobs.push_back(to_blob(prefix + "adam_v:" + params[i]->name, opt.moments2()[i]));
  }
  data.counters.emplace_back(prefix + "adam_steps", uint64_t(opt.step_count()));
}

template <typename T>
void unpack_adam(const CheckpointData& data, const std::string& prefix, Adam<T>& opt) {
  const auto& params = opt.params();
  for (size_t i = 0; i < params.size(); ++i) {
    from_blob(data.blob(prefix + "adam_m:" + params[i]->name), opt.moments1()[i]);
    from_blob(data.blob(prefix + "adam_v:" + params[i]->name), opt.moments2()[i]);
  }
  opt.set_step_count(int64_t(data.counter(prefix + "adam_steps")));
}

#define DIPNET_CKPT_INSTANTIATE(T)                                                        \
  template void pack_model<T>(CheckpointData&, const std::string&, const Model<T>&);      \
  template void unpack_model<T>(const CheckpointData&, const std::string&, Model<T>&);    \
  template void pack_adam<T>(CheckpointData&, const std::string&, Adam<T>&);              \
  template void unpack_adam<T>(const CheckpointData&, const std::string&, Adam<T>&);

DIPNET_CKPT_INSTANTIATE(float)
DIPNET_CKPT_INSTANTIATE(double)

}  // namespace dipnet
