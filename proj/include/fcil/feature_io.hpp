#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fcil/datasets.hpp"

namespace fcil {

// Binary feature file, all integers little-endian:
//
//   "FCF1" | version u16 = 1 | flags u16 = 0 | d u32 | C u32 | n u64
//   then n records of (d x f32 features, u16 label)
//
// Features are narrowed to f32 on write.
inline constexpr char kFeatureMagic[4] = {'F', 'C', 'F', '1'};
inline constexpr std::uint16_t kFeatureVersion = 1;
inline constexpr std::size_t kFeatureHeaderBytes = 4 + 2 + 2 + 4 + 4 + 8;

std::vector<std::uint8_t> encode_features(const FeatureDataset& ds);
FeatureDataset decode_features(const std::vector<std::uint8_t>& bytes);

FeatureDataset read_features(const std::filesystem::path& path);
void write_features(const FeatureDataset& ds, const std::filesystem::path& path);

}  // namespace fcil
