#ifndef IEDP_CHECKPOINT_HPP
#define IEDP_CHECKPOINT_HPP

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "iedp/common.hpp"
#include "iedp/nn.hpp"
#include "iedp/tensor.hpp"

namespace iedp {

// Flat binary container: "IEDP1" header, then records of
// (u32 name length, name bytes, u32 rank, u32 extents..., f32 payload),
// all little-endian.
struct NamedTensors {
  std::map<std::string, std::pair<Shape, std::vector<float>>> entries;

  void put(const std::string& name, const Shape& shape, std::vector<float> data) {
    entries[name] = {shape, std::move(data)};
  }

  template <class S>
  void put_tensor(const std::string& name, const Tensor<S>& t) {
    std::vector<float> d(static_cast<std::size_t>(t.numel()));
    for (Index i = 0; i < t.numel(); ++i) d[static_cast<std::size_t>(i)] = static_cast<float>(t.array()[i]);
    put(name, t.shape(), std::move(d));
  }

  void put_scalar(const std::string& name, float v) { put(name, {}, {v}); }

  bool has(const std::string& name) const { return entries.count(name) != 0; }

  const std::pair<Shape, std::vector<float>>& get(const std::string& name) const {
    auto it = entries.find(name);
    if (it == entries.end()) throw IoError("checkpoint entry missing: " + name);
    return it->second;
  }

  float get_scalar(const std::string& name) const {
    const auto& e = get(name);
    if (e.second.size() != 1) throw IoError("checkpoint entry not scalar: " + name);
    return e.second[0];
  }

  template <class S>
  void load_into(const std::string& name, Tensor<S>& t) const {
    const auto& [shape, data] = get(name);
    if (shape != t.shape())
      throw IoError("checkpoint entry " + name + " has shape " + shape_str(shape) +
                    ", expected " + shape_str(t.shape()));
    for (std::size_t i = 0; i < data.size(); ++i) t.array()[static_cast<Index>(i)] = static_cast<S>(data[i]);
  }
};

namespace detail {
inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}
}  // namespace detail

inline void save_named_tensors(const std::string& path, const NamedTensors& nt) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for write: " + path);
  os.write("IEDP1", 5);
  for (const auto& [name, entry] : nt.entries) {
    const auto& [shape, data] = entry;
    detail::write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_u32(os, static_cast<std::uint32_t>(shape.size()));
    for (Index e : shape) detail::write_u32(os, static_cast<std::uint32_t>(e));
    static_assert(sizeof(float) == 4);
    // little-endian hosts only; this project targets x86-64
    os.write(reinterpret_cast<const char*>(data.data()),
             static_cast<std::streamsize>(data.size() * 4));
  }
  if (!os) throw IoError("write failed: " + path);
}

inline NamedTensors load_named_tensors(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path);
  char magic[5];
  is.read(magic, 5);
  if (!is || std::memcmp(magic, "IEDP1", 5) != 0)
    throw IoError("bad checkpoint header in " + path);
  NamedTensors nt;
  while (true) {
    std::uint32_t name_len = detail::read_u32(is);
    if (is.eof()) break;
    if (!is) throw IoError("truncated checkpoint: " + path);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    std::uint32_t rank = detail::read_u32(is);
    Shape shape(rank);
    for (std::uint32_t i = 0; i < rank; ++i) shape[i] = static_cast<Index>(detail::read_u32(is));
    Index count = numel(shape);
    std::vector<float> data(static_cast<std::size_t>(count));
    is.read(reinterpret_cast<char*>(data.data()), count * 4);
    if (!is) throw IoError("truncated checkpoint record " + name + " in " + path);
    nt.put(name, shape, std::move(data));
    is.peek();
    if (is.eof()) break;
  }
  return nt;
}

template <class S>
void save_params(const std::string& path, const ParamStore<S>& store) {
  NamedTensors nt;
  for (auto* p : store.all()) nt.put_tensor(p->name, p->value);
  save_named_tensors(path, nt);
}

template <class S>
void load_params(const std::string& path, ParamStore<S>& store) {
  NamedTensors nt = load_named_tensors(path);
  for (auto* p : store.all()) nt.load_into(p->name, p->value);
}

// Loads only parameters under the given prefixes (e.g. frozen encoder towers).
template <class S>
void load_params_prefixed(const NamedTensors& nt, ParamStore<S>& store,
                          const std::vector<std::string>& prefixes) {
  for (auto* p : store.all()) {
    for (const auto& pre : prefixes) {
      if (p->name.rfind(pre, 0) == 0) {
        nt.load_into(p->name, p->value);
        break;
      }
    }
  }
}

}  // namespace iedp

#endif  // IEDP_CHECKPOINT_HPP
