// SPDX-License-Identifier: Apache-2.0
#pragma once

// Binary array container shared by UVE checkpoints and fused feature dumps.
//
//   PRIORMAP-ARRAYS 1\n
//   meta <one-line JSON>\n
//   count <N>\n
//   <name> <rank> <d0> .. <d{rank-1}> <byte offset>\n    (N lines)
//   end\n
//   <raw little-endian float64 payload>
//
// Byte offsets are relative to the first payload byte.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <istream>
#include <iterator>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "priormap/errors.hpp"
#include "priormap/tensor.hpp"
#include "priormap/uve.hpp"

namespace priormap {

struct ArrayFile {
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();
  std::vector<std::pair<std::string, Array>> arrays;

  const Array& get(const std::string& name) const {
    for (const auto& [n, a] : arrays)
      if (n == name) return a;
    throw DataError("array file: no array named '" + name + "'");
  }
};

namespace detail {
inline void write_le(std::ostream& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
  char buf[8];
  std::memcpy(buf, &bits, 8);
  out.write(buf, 8);
}

inline double read_le(const char* p) {
  std::uint64_t bits = 0;
  std::memcpy(&bits, p, 8);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
  return std::bit_cast<double>(bits);
}
}  // namespace detail

inline void write_array_file(std::ostream& out, const ArrayFile& f) {
  out << "PRIORMAP-ARRAYS 1\n";
  out << "meta " << f.meta.dump() << '\n';
  out << "count " << f.arrays.size() << '\n';
  std::size_t offset = 0;
  for (const auto& [name, a] : f.arrays) {
    if (name.empty() || name.find_first_of(" \t\n") != std::string::npos)
      throw UsageError("array file: invalid array name '" + name + "'");
    out << name << ' ' << a.rank();
    for (auto d : a.shape()) out << ' ' << d;
    out << ' ' << offset << '\n';
    offset += a.size() * 8;
  }
  out << "end\n";
  for (const auto& [_, a] : f.arrays)
    for (double v : a.data()) detail::write_le(out, v);
}

inline void write_array_file(const std::string& path, const ArrayFile& f) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  write_array_file(out, f);
}

inline ArrayFile read_array_file(std::istream& in) {
  std::string line;
  auto next = [&](const char* what) {
    if (!std::getline(in, line)) throw DataError(std::string("array file: truncated header (expected ") + what + ")");
  };
  next("magic");
  if (line != "PRIORMAP-ARRAYS 1") throw DataError("array file: bad magic '" + line + "'");
  ArrayFile f;
  next("meta");
  if (line.rfind("meta ", 0) != 0) throw DataError("array file: expected meta line");
  try {
    f.meta = nlohmann::ordered_json::parse(line.substr(5));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("array file: bad meta: ") + e.what());
  }
  next("count");
  std::size_t count = 0;
  if (std::sscanf(line.c_str(), "count %zu", &count) != 1) throw DataError("array file: bad count line");
  struct Entry {
    std::string name;
    Shape shape;
    std::size_t offset;
  };
  std::vector<Entry> entries;
  for (std::size_t i = 0; i < count; ++i) {
    next("manifest entry");
    std::istringstream ss(line);
    Entry e;
    std::size_t rank = 0;
    if (!(ss >> e.name >> rank) || rank > 3) throw DataError("array file: bad manifest line '" + line + "'");
    e.shape.resize(rank);
    for (auto& d : e.shape)
      if (!(ss >> d)) throw DataError("array file: bad manifest line '" + line + "'");
    if (!(ss >> e.offset)) throw DataError("array file: bad manifest line '" + line + "'");
    entries.push_back(std::move(e));
  }
  next("end");
  if (line != "end") throw DataError("array file: expected 'end'");
  std::vector<char> payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  for (auto& e : entries) {
    const std::size_t n = shape_size(e.shape);
    if (e.offset + n * 8 > payload.size()) throw DataError("array file: payload too short for '" + e.name + "'");
    std::vector<double> data(n);
    for (std::size_t k = 0; k < n; ++k) data[k] = detail::read_le(payload.data() + e.offset + 8 * k);
    f.arrays.emplace_back(e.name, Array(e.shape, std::move(data)));
  }
  return f;
}

inline ArrayFile read_array_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  return read_array_file(in);
}

// ---------------------------------------------------------------------------
// UVE checkpoints

struct Checkpoint {
  UveConfig config;
  ParamStore params;
};

inline void save_checkpoint(std::ostream& out, const UveConfig& cfg, const ParamStore& ps) {
  ArrayFile f;
  f.meta = {{"kind", "uve_checkpoint"}, {"seed", ps.seed()}, {"step", ps.step()}, {"config", cfg.to_json()}};
  for (const auto& [name, p] : ps) f.arrays.emplace_back(name, p.value);
  write_array_file(out, f);
}

inline void save_checkpoint(const std::string& path, const UveConfig& cfg, const ParamStore& ps) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint '" + path + "'");
  save_checkpoint(out, cfg, ps);
}

/// Restores parameters; names and shapes must match what the stored config
/// produces.
inline Checkpoint load_checkpoint(std::istream& in) {
  ArrayFile f = read_array_file(in);
  if (f.meta.value("kind", "") != "uve_checkpoint") throw DataError("checkpoint: not a UVE checkpoint");
  const UveConfig cfg = UveConfig::from_json(f.meta.at("config"));
  const auto seed = f.meta.at("seed").get<std::uint64_t>();
  ParamStore ps = init_uve_params(cfg, seed);
  if (f.arrays.size() != ps.size())
    throw DataError("checkpoint: expected " + std::to_string(ps.size()) + " tensors, found " +
                    std::to_string(f.arrays.size()));
  for (auto& [name, a] : f.arrays) {
    if (!ps.contains(name)) throw DataError("checkpoint: unexpected tensor '" + name + "'");
    auto& dst = ps.value(name);
    if (dst.shape() != a.shape())
      throw DataError("checkpoint: tensor '" + name + "' has shape " + shape_str(a.shape()) + ", config expects " +
                      shape_str(dst.shape()));
    dst = std::move(a);
  }
  ps.set_seed(seed);
  ps.set_step(f.meta.value("step", std::uint64_t{0}));
  return {cfg, std::move(ps)};
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path + "'");
  return load_checkpoint(in);
}

}  // namespace priormap
