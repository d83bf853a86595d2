#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "placekit/registry.hpp"

// Checkpoint file layout (all integers and doubles little-endian):
//
//   bytes 0..7   magic "PLCKPT01"
//   u32          config blob length, then that many bytes of key=value text
//                (model architecture; loaders validate it before reading data)
//   u32          registry count
//   per registry:
//     u32+bytes  registry name
//     u64        parameter count
//     per parameter:
//       u32+bytes  name
//       u32        ndim, then ndim x u64 dims
//       f64[]      row-major values
//     u8         has_adam
//     if has_adam:
//       u64        adam step count
//       per parameter (same order): f64[] m, then f64[] v

namespace placekit {

struct CheckpointError : std::runtime_error {
  explicit CheckpointError(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {

inline void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline void write_f64s(std::ostream& os, const std::vector<double>& v) {
  for (double d : v) {
    uint64_t bits;
    std::memcpy(&bits, &d, 8);
    write_u64(os, bits);
  }
}

inline void write_str(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw CheckpointError("truncated checkpoint");
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
  return v;
}

inline uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw CheckpointError("truncated checkpoint");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void read_f64s(std::istream& is, std::vector<double>& v) {
  for (auto& d : v) {
    const uint64_t bits = read_u64(is);
    std::memcpy(&d, &bits, 8);
  }
}

inline std::string read_str(std::istream& is) {
  const uint32_t n = read_u32(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw CheckpointError("truncated checkpoint");
  return s;
}

}  // namespace detail

struct NamedRegistry {
  std::string name;
  ParamRegistry* registry;
  bool with_adam = true;
};

inline void save_checkpoint(const std::string& path, const std::string& config_blob,
                            const std::vector<NamedRegistry>& regs) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot open for write: " + path);
  os.write("PLCKPT01", 8);
  detail::write_str(os, config_blob);
  detail::write_u32(os, static_cast<uint32_t>(regs.size()));
  for (const auto& nr : regs) {
    ParamRegistry& reg = *nr.registry;
    detail::write_str(os, nr.name);
    detail::write_u64(os, reg.size());
    for (size_t i = 0; i < reg.size(); ++i) {
      Tensor p = reg.param(i);
      detail::write_str(os, reg.names()[i]);
      detail::write_u32(os, static_cast<uint32_t>(p.shape().size()));
      for (int d : p.shape()) detail::write_u64(os, static_cast<uint64_t>(d));
      detail::write_f64s(os, p.data());
    }
    os.put(nr.with_adam ? '\1' : '\0');
    if (nr.with_adam) {
      detail::write_u64(os, reg.adam_step_count());
      for (size_t i = 0; i < reg.size(); ++i) {
        detail::write_f64s(os, reg.adam_state(i).m);
        detail::write_f64s(os, reg.adam_state(i).v);
      }
    }
  }
  if (!os) throw CheckpointError("write failed: " + path);
}

// Reads only the architecture blob; used to construct a model before the
// parameter payload is loaded into it.
inline std::string read_checkpoint_config(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::string(magic, 8) != "PLCKPT01")
    throw CheckpointError("bad checkpoint magic in " + path);
  return detail::read_str(is);
}

// Loads parameter data into already-constructed registries. Names, order
// and shapes must match exactly; mismatches fail loudly.
inline std::string load_checkpoint(const std::string& path,
                                   const std::vector<NamedRegistry>& regs) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::string(magic, 8) != "PLCKPT01")
    throw CheckpointError("bad checkpoint magic in " + path);
  const std::string blob = detail::read_str(is);
  const uint32_t nregs = detail::read_u32(is);
  if (nregs != regs.size())
    throw CheckpointError("registry count mismatch: file has " + std::to_string(nregs));
  for (const auto& nr : regs) {
    ParamRegistry& reg = *nr.registry;
    const std::string rname = detail::read_str(is);
    if (rname != nr.name)
      throw CheckpointError("registry name mismatch: " + rname + " vs " + nr.name);
    const uint64_t nparams = detail::read_u64(is);
    if (nparams != reg.size())
      throw CheckpointError("parameter count mismatch in " + rname);
    for (size_t i = 0; i < reg.size(); ++i) {
      Tensor p = reg.param(i);
      const std::string pname = detail::read_str(is);
      if (pname != reg.names()[i])
        throw CheckpointError("parameter name mismatch: " + pname + " vs " +
                              reg.names()[i]);
      const uint32_t ndim = detail::read_u32(is);
      Shape shape(ndim);
      for (auto& d : shape) d = static_cast<int>(detail::read_u64(is));
      if (shape != p.shape())
        throw CheckpointError("shape mismatch for " + pname + ": " + shape_str(shape) +
                              " vs " + shape_str(p.shape()));
      detail::read_f64s(is, p.data());
    }
    const int has_adam = is.get();
    if (has_adam == 1) {
      reg.adam_step_count() = detail::read_u64(is);
      for (size_t i = 0; i < reg.size(); ++i) {
        detail::read_f64s(is, reg.adam_state(i).m);
        detail::read_f64s(is, reg.adam_state(i).v);
      }
    } else if (has_adam != 0) {
      throw CheckpointError("corrupt optimizer flag in " + rname);
    }
  }
  return blob;
}

}  // namespace placekit
