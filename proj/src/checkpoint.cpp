// Copyright (C) 2026 The skv1 authors
// SPDX-License-Identifier: Apache-2.0
#include "skv1/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "skv1/errors.hpp"

namespace skv1 {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");
static_assert(sizeof(float) == 4);

namespace {

class Writer {
 public:
  template <typename U>
  void put(U v) {
    const char* p = reinterpret_cast<const char*>(&v);
    out_.insert(out_.end(), p, p + sizeof(U));
  }
  void bytes(const void* data, size_t n) {
    const char* p = static_cast<const char*>(data);
    out_.insert(out_.end(), p, p + n);
  }
  std::vector<char> take() { return std::move(out_); }

 private:
  std::vector<char> out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<char>& in) : in_(in) {}
  template <typename U>
  U get(const char* what) {
    U v;
    need(sizeof(U), what);
    std::memcpy(&v, in_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }
  void bytes(void* dst, size_t n, const char* what) {
    need(n, what);
    std::memcpy(dst, in_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(size_t n, const char* what) const {
    if (in_.size() - pos_ < n) throw IoError(std::string("checkpoint truncated while reading ") + what);
  }
  const std::vector<char>& in_;
  size_t pos_ = 0;
};

}  // namespace

std::vector<char> encode_checkpoint(const Checkpoint& ck) {
  Writer w;
  w.bytes("SKV1", 4);
  w.put<uint32_t>(kCheckpointVersion);
  const std::string cfg = ck.config.to_text();
  w.put<uint32_t>(static_cast<uint32_t>(cfg.size()));
  w.bytes(cfg.data(), cfg.size());
  w.put<uint32_t>(static_cast<uint32_t>(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    w.put<uint32_t>(static_cast<uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.put<uint32_t>(static_cast<uint32_t>(t.rank()));
    for (size_t e : t.shape()) w.put<uint64_t>(static_cast<uint64_t>(e));
    w.bytes(t.data(), t.size() * sizeof(float));
  }
  return w.take();
}

Checkpoint decode_checkpoint(const std::vector<char>& bytes) {
  Reader r(bytes);
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::memcmp(magic, "SKV1", 4) != 0) throw IoError("not a checkpoint: bad magic");
  const auto version = r.get<uint32_t>("version");
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  const auto cfg_len = r.get<uint32_t>("config length");
  std::string cfg(cfg_len, '\0');
  r.bytes(cfg.data(), cfg_len, "config");
  Checkpoint ck;
  ck.config = ModelConfig::parse(cfg);
  const auto count = r.get<uint32_t>("tensor count");
  for (uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<uint32_t>("name length");
    std::string name(name_len, '\0');
    r.bytes(name.data(), name_len, "name");
    const auto rank = r.get<uint32_t>("rank");
    std::vector<size_t> shape(rank);
    for (auto& e : shape) e = static_cast<size_t>(r.get<uint64_t>("extent"));
    Tensor32 t(shape);
    r.bytes(t.data(), t.size() * sizeof(float), "tensor data");
    if (!ck.tensors.emplace(name, std::move(t)).second) throw IoError("duplicate tensor '" + name + "'");
  }
  if (!r.done()) throw IoError("trailing bytes after checkpoint tensors");
  check_weights(ck.config, ck.tensors);
  return ck;
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  const auto bytes = encode_checkpoint(ck);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace skv1
