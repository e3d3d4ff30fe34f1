// SPDX-License-Identifier: Apache-2.0
#include "kdcal/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>

#include "kdcal/error.hpp"

namespace kdcal {

namespace {

constexpr std::array<char, 8> kMagic{'K', 'D', 'C', 'A', 'L', 'C', 'K', 'P'};

template <typename T>
void write_le(std::ostream& out, T value) {
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.write(bytes.data(), bytes.size());
}

template <typename T>
T read_le(std::istream& in, const char* what) {
  std::array<char, sizeof(T)> bytes;
  if (!in.read(bytes.data(), bytes.size())) {
    throw FormatError(std::string("checkpoint truncated while reading ") + what);
  }
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

void require_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.contains(key)) throw ConfigError(where + "." + key + ": unknown key");
  }
  for (const auto& key : allowed) {
    if (!j.contains(key)) throw ConfigError(where + "." + key + ": missing");
  }
}

}  // namespace

nlohmann::json to_json(const ModelSpec& spec) {
  return {
      {"arch", std::string(to_string(spec.arch))},
      {"n_classes", spec.n_classes},
      {"width_multiplier", spec.width_multiplier},
      {"input_shape", {spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]}},
      {"seed", spec.seed},
  };
}

ModelSpec model_spec_from_json(const nlohmann::json& j) {
  require_keys(j, {"arch", "n_classes", "width_multiplier", "input_shape", "seed"}, "model_spec");
  try {
    ModelSpec spec;
    spec.arch = parse_arch(j.at("arch").get<std::string>());
    spec.n_classes = j.at("n_classes").get<std::size_t>();
    spec.width_multiplier = j.at("width_multiplier").get<double>();
    const auto shape = j.at("input_shape").get<std::vector<std::size_t>>();
    if (shape.size() != 3) throw ConfigError("model_spec.input_shape: expected 3 entries");
    spec.input_shape = {shape[0], shape[1], shape[2]};
    spec.seed = j.at("seed").get<std::uint64_t>();
    validate(spec);
    return spec;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model_spec: ") + e.what());
  }
}

void write_checkpoint(const Model& model, std::ostream& out) {
  nlohmann::json header = to_json(model.spec());
  header["normalization"] = {{"mean", model.normalization().mean}, {"std", model.normalization().stddev}};
  const std::string text = header.dump();

  out.write(kMagic.data(), kMagic.size());
  write_le<std::uint32_t>(out, kCheckpointFormatVersion);
  write_le<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  const auto params = model.parameters();
  write_le<std::uint64_t>(out, params.size());
  for (const auto& p : params) {
    write_le<std::uint64_t>(out, p.size());
    for (double v : p.values()) write_le<double>(out, v);
  }
  if (!out) throw IoError("failed writing checkpoint stream");
}

Model read_checkpoint(std::istream& in) {
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) {
    throw FormatError("not a kdcal checkpoint (bad magic)");
  }
  const auto version = read_le<std::uint32_t>(in, "format version");
  if (version != kCheckpointFormatVersion) {
    throw FormatError("unsupported checkpoint format version " + std::to_string(version));
  }
  const auto header_len = read_le<std::uint64_t>(in, "header length");
  if (header_len > (1u << 24)) throw FormatError("checkpoint header length implausible");
  std::string text(header_len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(header_len))) {
    throw FormatError("checkpoint truncated in header");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  Normalization norm;
  if (header.contains("normalization")) {
    norm.mean = header["normalization"].at("mean").get<std::vector<double>>();
    norm.stddev = header["normalization"].at("std").get<std::vector<double>>();
    header.erase("normalization");
  }
  Model model(model_spec_from_json(header));
  model.set_normalization(std::move(norm));

  const auto count = read_le<std::uint64_t>(in, "array count");
  auto params = model.mutable_parameters();
  if (count != params.size()) {
    throw FormatError("checkpoint holds " + std::to_string(count) + " arrays, spec implies " +
                      std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto len = read_le<std::uint64_t>(in, "array length");
    if (len != params[i].size()) {
      throw FormatError("checkpoint array " + std::to_string(i) + " has " + std::to_string(len) +
                        " elements, spec implies " + std::to_string(params[i].size()));
    }
    for (double& v : params[i].values()) v = read_le<double>(in, "parameter data");
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after checkpoint data");
  return model;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path.string());
  write_checkpoint(model, out);
  out.close();
  if (!out) throw IoError("failed writing checkpoint: " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  return read_checkpoint(in);
}

}  // namespace kdcal
