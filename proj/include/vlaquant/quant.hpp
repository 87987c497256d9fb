#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "vlaquant/store.hpp"
#include "vlaquant/tensor.hpp"

namespace vlaq {

enum class QuantMode { symmetric, asymmetric };
enum class Granularity { per_tensor, per_channel, per_group };

const char* to_string(QuantMode m);
const char* to_string(Granularity g);
QuantMode parse_quant_mode(const std::string& s);
Granularity parse_granularity(const std::string& s);

struct QuantScheme {
  int bits = 8;  // 2, 4 or 8; 2 exists for exhaustive test oracles
  QuantMode mode = QuantMode::symmetric;
  Granularity granularity = Granularity::per_channel;
  std::size_t group_size = 32;

  void validate() const;

  // Legal code range: [-qmax, qmax] symmetric, [0, 2^bits - 1] asymmetric.
  int qmax() const { return (1 << (bits - 1)) - 1; }
  int code_min() const { return mode == QuantMode::symmetric ? -qmax() : 0; }
  int code_max() const { return mode == QuantMode::symmetric ? qmax() : (1 << bits) - 1; }

  // Number of scales for a weight of the given shape.
  std::size_t group_count(const Shape& shape) const;
  // Index of the scale that covers flat element i of a weight of `shape`.
  std::size_t group_of(const Shape& shape, std::size_t i) const;

  friend bool operator==(const QuantScheme&, const QuantScheme&) = default;
};

struct ScaleSet {
  std::vector<float> scales;
  std::vector<std::uint8_t> zero_points;  // empty for symmetric schemes
};

ScaleSet compute_scales(const Tensor& w, const QuantScheme& scheme);

/// Quantized form of one weight. Codes are kept unpacked in memory; they are
/// packed when written to a store.
struct QuantizedTensor {
  std::vector<std::int32_t> codes;
  std::vector<float> scales;
  std::vector<std::uint8_t> zero_points;
  QuantScheme scheme;
  Shape shape;

  // Throws IntegrityError on out-of-range codes or bad scale cardinality.
  void validate() const;
};

// The shared nearest-level rounding rule used by RTN and by the GPTQ sweep.
std::int32_t quantize_value(double w, float scale, int zero_point, const QuantScheme& scheme);
float dequantize_value(std::int32_t code, float scale, int zero_point, const QuantScheme& scheme);

double round_half_away(double x);

QuantizedTensor rtn_quantize(const Tensor& w, const QuantScheme& scheme);
Tensor dequantize(const QuantizedTensor& q);

// Nibble packing, low nibble first. Signed codes are stored as 4-bit two's
// complement.
std::vector<std::uint8_t> pack_u4(std::span<const std::int32_t> codes, bool is_signed);
std::vector<std::int32_t> unpack_u4(std::span<const std::uint8_t> bytes, std::size_t count, bool is_signed);

// Store layout: <layer>.codes, <layer>.scale, <layer>.zp (asymmetric only) and
// a small <layer>.scheme metadata entry so the store is self-describing.
void write_quantized(TensorStore& store, const std::string& layer, const QuantizedTensor& q);
QuantizedTensor read_quantized(const TensorStore& store, const std::string& layer);
bool has_quantized(const TensorStore& store, const std::string& layer);

// Byte count of codes + scales + zero points of a quantized layer, i.e. what
// quantized_bytes reports for its scheme.
std::uint64_t quantized_payload_bytes(const TensorStore& store, const std::string& layer);

struct Fp16Storage {};
struct SkipStorage {};  // unquantized, accounted as fp16
using Storage = std::variant<QuantScheme, SkipStorage, Fp16Storage>;

/// Exact serialized size of one weight under a storage choice.
std::uint64_t quantized_bytes(const Shape& shape, const Storage& storage);

}  // namespace vlaq
