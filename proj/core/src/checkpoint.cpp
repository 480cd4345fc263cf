// SPDX-License-Identifier: Apache-2.0
#include "fabgpt/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "fabgpt/errors.hpp"

namespace fabgpt {

namespace {

constexpr char kMagic[8] = {'F', 'A', 'B', 'G', 'P', 'T', '1', '\0'};
constexpr int kFormatVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, double v) {
  float f = static_cast<float>(v);
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

std::uint32_t get_u32(const std::string& in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

double get_f32(const std::string& in, std::size_t at) {
  const std::uint32_t bits = get_u32(in, at);
  float f;
  std::memcpy(&f, &bits, 4);
  return static_cast<double>(f);
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& c) {
  nlohmann::json table = nlohmann::json::array();
  std::size_t offset = 0;  // float elements into the blob
  for (const auto& [name, t] : c.tensors) {
    table.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.size();
  }
  const nlohmann::json header = {{"format_version", kFormatVersion},
                                 {"step", c.step},
                                 {"config", c.config},
                                 {"vocab", c.vocab_tokens},
                                 {"tensors", table}};
  const std::string header_bytes = header.dump();

  std::string out;
  out.reserve(16 + header_bytes.size() + 4 * offset);
  out.append(kMagic, 8);
  put_u32(out, static_cast<std::uint32_t>(header_bytes.size()));
  out += header_bytes;
  for (const auto& [name, t] : c.tensors)
    for (std::size_t i = 0; i < t.size(); ++i) put_f32(out, t.at(i));

  const std::filesystem::path target(path);
  const std::filesystem::path tmp = target.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f.good()) throw IoError("cannot write checkpoint " + tmp.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f.good()) throw IoError("short write on checkpoint " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, target, ec);
  if (ec) throw IoError("cannot move checkpoint into place: " + ec.message());
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f.good()) throw IoError("cannot open checkpoint " + path);
  std::string in((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  if (in.size() < 12 || std::memcmp(in.data(), kMagic, 8) != 0)
    throw FormatError("not a checkpoint file: " + path);
  const std::uint32_t header_len = get_u32(in, 8);
  if (in.size() < 12 + static_cast<std::size_t>(header_len))
    throw FormatError("truncated checkpoint header: " + path);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(in.substr(12, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed checkpoint header: ") + e.what());
  }

  Checkpoint c;
  try {
    if (header.at("format_version").get<int>() != kFormatVersion)
      throw FormatError("unsupported checkpoint format version");
    c.step = header.at("step").get<std::uint64_t>();
    c.config = header.at("config");
    c.vocab_tokens = header.at("vocab").get<std::vector<std::string>>();

    const std::size_t blob_at = 12 + header_len;
    const std::size_t blob_floats = (in.size() - blob_at) / 4;
    for (const auto& row : header.at("tensors")) {
      const std::string name = row.at("name").get<std::string>();
      const auto shape = row.at("shape").get<std::vector<std::size_t>>();
      const std::size_t offset = row.at("offset").get<std::size_t>();
      Tensor t(shape);
      if (offset + t.size() > blob_floats)
        throw FormatError("checkpoint blob truncated at tensor " + name);
      for (std::size_t i = 0; i < t.size(); ++i) t.at(i) = get_f32(in, blob_at + 4 * (offset + i));
      c.tensors.emplace_back(name, std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed checkpoint header: ") + e.what());
  }
  return c;
}

}  // namespace fabgpt
