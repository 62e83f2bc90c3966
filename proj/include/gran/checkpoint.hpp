#pragma once

// Binary checkpoint format, one file per snapshot:
//   magic "GRANCKP1", u32 version,
//   u64 meta length + UTF-8 meta text (config echo and resume counters),
//   u64 entry count, then per entry:
//     u64 name length + name bytes, u64 rank, u64 dims..., float32 data (LE).
// Optimizer moments ride along as entries named "optim.adam.{m,v}:<param>".
// Reload of a float32 store is bit-exact.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "gran/optim.hpp"
#include "gran/tensor.hpp"

namespace gran {

struct CheckpointEntry {
  Shape shape;
  std::vector<float> data;
};

struct Checkpoint {
  std::string meta;
  std::map<std::string, CheckpointEntry> entries;  // sorted by name
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}
inline void put_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), 8);
}
inline std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
inline std::uint64_t get_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}

constexpr char kCkptMagic[9] = "GRANCKP1";
constexpr std::uint32_t kCkptVersion = 1;

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw input_error("checkpoint: cannot open '" + path + "' for writing");
  os.write(detail::kCkptMagic, 8);
  detail::put_u32(os, detail::kCkptVersion);
  detail::put_u64(os, ckpt.meta.size());
  os.write(ckpt.meta.data(), std::streamsize(ckpt.meta.size()));
  detail::put_u64(os, ckpt.entries.size());
  for (const auto& [name, e] : ckpt.entries) {
    detail::put_u64(os, name.size());
    os.write(name.data(), std::streamsize(name.size()));
    detail::put_u64(os, e.shape.size());
    for (std::size_t d : e.shape) detail::put_u64(os, d);
    os.write(reinterpret_cast<const char*>(e.data.data()),
             std::streamsize(e.data.size() * sizeof(float)));
  }
  if (!os) throw input_error("checkpoint: write failed for '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw input_error("checkpoint: cannot open '" + path + "'");
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, detail::kCkptMagic, 8) != 0)
    throw input_error("checkpoint: bad magic in '" + path + "'");
  const std::uint32_t version = detail::get_u32(is);
  if (version != detail::kCkptVersion)
    throw input_error("checkpoint: unsupported format version " + std::to_string(version));
  Checkpoint ckpt;
  const std::uint64_t meta_len = detail::get_u64(is);
  ckpt.meta.resize(meta_len);
  is.read(ckpt.meta.data(), std::streamsize(meta_len));
  const std::uint64_t count = detail::get_u64(is);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint64_t name_len = detail::get_u64(is);
    std::string name(name_len, '\0');
    is.read(name.data(), std::streamsize(name_len));
    CheckpointEntry e;
    const std::uint64_t rank = detail::get_u64(is);
    std::size_t numel = 1;
    for (std::uint64_t d = 0; d < rank; ++d) {
      e.shape.push_back(std::size_t(detail::get_u64(is)));
      numel *= e.shape.back();
    }
    e.data.resize(numel);
    is.read(reinterpret_cast<char*>(e.data.data()), std::streamsize(numel * sizeof(float)));
    if (!is) throw input_error("checkpoint: truncated file '" + path + "'");
    ckpt.entries.emplace(std::move(name), std::move(e));
  }
  return ckpt;
}

// Snapshot of parameters plus optimizer state. Data is stored as float32;
// a float store round-trips bit-exactly.
template <typename S>
Checkpoint checkpoint_from_store(const ParamStore<S>& store, std::string meta,
                                 bool with_optimizer = true) {
  Checkpoint ckpt;
  ckpt.meta = std::move(meta);
  for (const auto& name : store.names()) {
    const Tensor<S>& p = store.at(name);
    CheckpointEntry e;
    e.shape = p.shape();
    e.data.assign(p.data().begin(), p.data().end());
    ckpt.entries.emplace(name, std::move(e));
    if (with_optimizer) {
      const auto* mo = store.find_moments(name);
      if (mo && mo->m.size() == p.size()) {
        CheckpointEntry em, ev;
        em.shape = ev.shape = p.shape();
        em.data.assign(mo->m.begin(), mo->m.end());
        ev.data.assign(mo->v.begin(), mo->v.end());
        ckpt.entries.emplace("optim.adam.m:" + name, std::move(em));
        ckpt.entries.emplace("optim.adam.v:" + name, std::move(ev));
      }
    }
  }
  if (with_optimizer && store.step_count() > 0) {
    CheckpointEntry es;
    es.shape = {1};
    es.data = {float(store.step_count())};
    ckpt.entries.emplace("optim.adam.step", std::move(es));
  }
  return ckpt;
}

// Overwrites parameter values (and optimizer state when present) in an
// already-built store of matching shapes.
template <typename S>
void load_into_store(const Checkpoint& ckpt, ParamStore<S>& store) {
  for (const auto& name : store.names()) {
    auto it = ckpt.entries.find(name);
    if (it == ckpt.entries.end())
      throw input_error("checkpoint: missing parameter '" + name + "'");
    Tensor<S>& p = store.at(name);
    if (it->second.shape != p.shape())
      throw input_error("checkpoint: shape mismatch for '" + name + "': file " +
                        shape_str(it->second.shape) + " vs model " + shape_str(p.shape()));
    auto w = p.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = S(it->second.data[i]);
    const auto mit = ckpt.entries.find("optim.adam.m:" + name);
    const auto vit = ckpt.entries.find("optim.adam.v:" + name);
    if (mit != ckpt.entries.end() && vit != ckpt.entries.end()) {
      auto& mo = store.moments(name);
      mo.m.assign(mit->second.data.begin(), mit->second.data.end());
      mo.v.assign(vit->second.data.begin(), vit->second.data.end());
    }
  }
  const auto sit = ckpt.entries.find("optim.adam.step");
  if (sit != ckpt.entries.end()) store.step_count() = std::int64_t(sit->second.data[0]);
}

}  // namespace gran
