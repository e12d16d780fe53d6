#pragma once

// Binary tensor container used for feature bundles and checkpoints.
//
// Layout (all integers little-endian):
//   bytes 0..3   magic "PSTP"
//   bytes 4..7   format version (u32)
//   bytes 8..15  manifest length in bytes (u64)
//   ...          manifest: UTF-8 JSON {"meta": {...}, "tensors": [...]}
//   ...          tensor payloads, row-major, in manifest order
//
// Each manifest tensor entry carries name, shape, dtype ("f32"/"f64") and
// numel; numel must equal the product of the shape, and the payload size must
// match exactly. Readers fail with distinct errors for a bad magic, an
// unknown version, a manifest/shape inconsistency, and a truncated payload.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "pstp/errors.hpp"
#include "pstp/tensor.hpp"

namespace pstp {

inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr char kContainerMagic[4] = {'P', 'S', 'T', 'P'};

enum class Dtype { F32, F64 };

std::string dtype_name(Dtype d);
Dtype dtype_from_name(const std::string& s);
std::size_t dtype_size(Dtype d);

struct TensorRecord {
  std::string name;
  Shape shape;
  Dtype dtype = Dtype::F32;
  std::vector<std::uint8_t> raw;  // little-endian payload

  static TensorRecord from_floats(std::string name, Shape shape, const std::vector<float>& v);
  static TensorRecord from_doubles(std::string name, Shape shape, const std::vector<double>& v);
  std::vector<float> as_floats() const;
  std::vector<double> as_doubles() const;
};

struct Container {
  nlohmann::json meta;
  std::vector<TensorRecord> tensors;

  const TensorRecord& tensor(const std::string& name) const;
  bool has_tensor(const std::string& name) const;
};

void write_container(const std::string& path, const Container& c);
Container read_container(const std::string& path);

}  // namespace pstp
