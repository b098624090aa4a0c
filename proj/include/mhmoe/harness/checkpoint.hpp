// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mhmoe/harness/config.hpp"
#include "mhmoe/model.hpp"
#include "mhmoe/optimizer.hpp"
#include "mhmoe/random.hpp"

// File layout:
//   8 bytes   magic "MHMOECKP"
//   u32       format version
//   u64       header length
//   header    UTF-8 JSON: config text, step, RNG state, parameter table
//   payload   for each parameter in table order: values, Adam m, Adam v,
//             each as row-major float64 little-endian
namespace mhmoe::harness {

inline constexpr char kCheckpointMagic[8] = {'M', 'H', 'M', 'O', 'E', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  RunConfig config;
  std::size_t step = 0;
  std::string rng_state;
  std::unique_ptr<Model> model;
  Adam optimizer;
};

namespace detail {

template <typename T>
void put_le(std::ostream& os, T v) {
  static_assert(std::is_integral_v<T>);
  unsigned char b[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<unsigned char>(static_cast<std::uint64_t>(v) >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <typename T>
T get_le(std::istream& is, const std::string& path) {
  unsigned char b[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(b), sizeof(T))) throw FormatError(path + ": truncated checkpoint");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return static_cast<T>(v);
}

inline void put_doubles(std::ostream& os, std::span<const double> xs) {
  std::vector<unsigned char> buf(xs.size() * 8);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const auto u = std::bit_cast<std::uint64_t>(xs[i]);
    for (int j = 0; j < 8; ++j) buf[i * 8 + j] = static_cast<unsigned char>(u >> (8 * j));
  }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

inline void get_doubles(std::istream& is, std::span<double> xs, const std::string& path) {
  std::vector<unsigned char> buf(xs.size() * 8);
  if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
    throw FormatError(path + ": truncated checkpoint payload");
  }
  for (std::size_t i = 0; i < xs.size(); ++i) {
    std::uint64_t u = 0;
    for (int j = 0; j < 8; ++j) u |= static_cast<std::uint64_t>(buf[i * 8 + j]) << (8 * j);
    xs[i] = std::bit_cast<double>(u);
  }
}

}  // namespace detail

// Written to a temporary file first, then renamed over the target.
inline void save_checkpoint(const std::filesystem::path& path, const RunConfig& config, const Model& model,
                            const Adam& opt, std::size_t step, const std::string& rng_state) {
  const auto params = model.parameters();
  if (opt.first_moments().size() != params.size()) throw ContractError("save_checkpoint: optimizer/model mismatch");
  nlohmann::json header;
  header["version"] = kCheckpointVersion;
  header["config"] = to_text(config);
  header["step"] = step;
  header["adam_step"] = opt.step();
  header["rng_state"] = rng_state;
  auto& table = header["parameters"];
  table = nlohmann::json::array();
  for (const auto& p : params) table.push_back({{"name", p.name}, {"shape", p.tensor.shape()}});
  const std::string text = header.dump();

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot write checkpoint " + tmp.string());
    os.write(kCheckpointMagic, sizeof kCheckpointMagic);
    detail::put_le<std::uint32_t>(os, kCheckpointVersion);
    detail::put_le<std::uint64_t>(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
      detail::put_doubles(os, params[i].tensor.values());
      detail::put_doubles(os, opt.first_moments()[i]);
      detail::put_doubles(os, opt.second_moments()[i]);
    }
    if (!os) throw DataError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string where = path.string();
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read checkpoint " + where);
  char magic[sizeof kCheckpointMagic];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw FormatError(where + ": not a checkpoint (bad magic)");
  }
  const auto version = detail::get_le<std::uint32_t>(is, where);
  if (version != kCheckpointVersion) {
    throw FormatError(where + ": checkpoint format version " + std::to_string(version) + ", this build reads version " +
                      std::to_string(kCheckpointVersion));
  }
  const auto len = detail::get_le<std::uint64_t>(is, where);
  if (len > (std::uint64_t{1} << 30)) throw FormatError(where + ": implausible header length");
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw FormatError(where + ": truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where + ": malformed header: " + e.what());
  }
  Checkpoint ck;
  try {
    ck.config = parse_config_text(header.at("config").get<std::string>(), where + "[config]");
    ck.step = header.at("step").get<std::size_t>();
    ck.rng_state = header.at("rng_state").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where + ": malformed header: " + e.what());
  }
  ck.model = std::make_unique<Model>(ck.config.model);
  auto params = ck.model->parameters();
  const auto& table = header.at("parameters");
  if (table.size() != params.size()) {
    throw FormatError(where + ": " + std::to_string(table.size()) + " parameters stored, model has " +
                      std::to_string(params.size()));
  }
  ck.optimizer = Adam(params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto name = table[i].at("name").get<std::string>();
    const auto shape = table[i].at("shape").get<Shape>();
    if (name != params[i].name || shape != params[i].tensor.shape()) {
      throw FormatError(where + ": parameter " + std::to_string(i) + " is " + name + " " + to_string(shape) +
                        ", model expects " + params[i].name + " " + to_string(params[i].tensor.shape()));
    }
    detail::get_doubles(is, params[i].tensor.values(), where);
    detail::get_doubles(is, ck.optimizer.first_moments()[i], where);
    detail::get_doubles(is, ck.optimizer.second_moments()[i], where);
  }
  ck.optimizer.set_step(header.at("adam_step").get<std::size_t>());
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError(where + ": trailing bytes after payload");
  return ck;
}

}  // namespace mhmoe::harness
