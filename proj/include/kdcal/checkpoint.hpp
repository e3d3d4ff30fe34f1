// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>

#include <json.hpp>

#include "kdcal/model.hpp"

namespace kdcal {

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

nlohmann::json to_json(const ModelSpec& spec);
/// Strict: unknown keys and missing fields are ConfigErrors.
ModelSpec model_spec_from_json(const nlohmann::json& j);

/// Layout (all integers little-endian):
///   magic "KDCALCKP" | u32 format_version | u64 header length | header JSON
///   | u64 array count | per array: u64 element count, f64 elements.
/// The header is the canonical (key-sorted, compact) JSON of the ModelSpec
/// plus a "normalization" member holding the model's input standardization.
void write_checkpoint(const Model& model, std::ostream& out);
Model read_checkpoint(std::istream& in);

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace kdcal
