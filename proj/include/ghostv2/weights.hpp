#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ghostv2/model.hpp"

// Binary weight files:
//   "GNV2" | u32 version | u32 count |
//   count x (u16 name_len | name | u8 dtype | u8 rank | rank x u32 dim | values) |
//   u32 CRC32 of every byte after the magic.
// All integers and values little-endian; leading unit dimensions are dropped
// from the stored rank (minimum rank 1).
namespace ghostv2 {

inline constexpr std::uint32_t kWeightFormatVersion = 1;

enum class WeightErrorKind { io, magic, version, truncated, checksum, format, name_mismatch, shape_mismatch, dtype_mismatch };

std::string to_string(WeightErrorKind k);

class WeightFileError : public Error {
 public:
  WeightFileError(WeightErrorKind kind, const std::string& message)
      : Error("weights (" + to_string(kind) + "): " + message), kind_(kind) {}
  WeightErrorKind kind() const { return kind_; }

 private:
  WeightErrorKind kind_;
};

struct WeightEntry {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::vector<std::uint8_t> bytes;  // raw little-endian values
};

std::vector<std::uint8_t> encode_weights(const std::vector<WeightEntry>& entries);
// Parses and verifies a complete file image; throws WeightFileError.
std::vector<WeightEntry> decode_weights(std::span<const std::uint8_t> data);

template <typename T>
std::vector<WeightEntry> collect_weights(const Model<T>& model);

template <typename T>
void save_weights(const Model<T>& model, const std::string& path);
// All-or-nothing: the model is modified only if every tensor matches.
template <typename T>
void load_weights(Model<T>& model, const std::string& path);
template <typename T>
void assign_weights(Model<T>& model, const std::vector<WeightEntry>& entries);

}  // namespace ghostv2
