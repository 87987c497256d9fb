#include "vlaquant/quant.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "vlaquant/error.hpp"

namespace vlaq {

const char* to_string(QuantMode m) { return m == QuantMode::symmetric ? "symmetric" : "asymmetric"; }

const char* to_string(Granularity g) {
  switch (g) {
    case Granularity::per_tensor: return "per_tensor";
    case Granularity::per_channel: return "per_channel";
    case Granularity::per_group: return "per_group";
  }
  return "?";
}

QuantMode parse_quant_mode(const std::string& s) {
  if (s == "symmetric") return QuantMode::symmetric;
  if (s == "asymmetric") return QuantMode::asymmetric;
  throw FormatError("unknown quantization mode '" + s + "'");
}

Granularity parse_granularity(const std::string& s) {
  if (s == "per_tensor") return Granularity::per_tensor;
  if (s == "per_channel") return Granularity::per_channel;
  if (s == "per_group") return Granularity::per_group;
  throw FormatError("unknown granularity '" + s + "'");
}

void QuantScheme::validate() const {
  if (bits != 2 && bits != 4 && bits != 8) throw FormatError("bit width must be 2, 4 or 8, got " + std::to_string(bits));
  if (granularity == Granularity::per_group && group_size < 1) throw FormatError("group_size must be >= 1");
}

std::size_t QuantScheme::group_count(const Shape& shape) const {
  switch (granularity) {
    case Granularity::per_tensor: return 1;
    case Granularity::per_channel: return shape.at(0);
    case Granularity::per_group: return shape.at(0) * ((shape.at(1) + group_size - 1) / group_size);
  }
  return 1;
}

std::size_t QuantScheme::group_of(const Shape& shape, std::size_t i) const {
  switch (granularity) {
    case Granularity::per_tensor: return 0;
    case Granularity::per_channel: return i / shape[1];
    case Granularity::per_group: {
      const std::size_t in = shape[1];
      const std::size_t groups_per_row = (in + group_size - 1) / group_size;
      return (i / in) * groups_per_row + (i % in) / group_size;
    }
  }
  return 0;
}

namespace {

void check_layout(const Shape& shape, const QuantScheme& scheme) {
  scheme.validate();
  if (scheme.granularity != Granularity::per_tensor && shape.size() != 2) {
    throw ShapeError(std::string(to_string(scheme.granularity)) + " quantization needs a 2-D weight, got " +
                     shape_string(shape));
  }
}

}  // namespace

double round_half_away(double x) { return std::round(x); }

ScaleSet compute_scales(const Tensor& w, const QuantScheme& scheme) {
  if (w.empty()) throw ShapeError("compute_scales: empty tensor");
  check_layout(w.shape(), scheme);
  const std::size_t groups = scheme.group_count(w.shape());
  std::vector<double> lo(groups, 0.0), hi(groups, 0.0), amax(groups, 0.0);
  std::vector<bool> seen(groups, false);
  for (std::size_t i = 0; i < w.size(); ++i) {
    const std::size_t g = scheme.group_of(w.shape(), i);
    const double v = w[i];
    if (!seen[g]) {
      lo[g] = hi[g] = v;
      seen[g] = true;
    } else {
      lo[g] = std::min(lo[g], v);
      hi[g] = std::max(hi[g], v);
    }
    amax[g] = std::max(amax[g], std::abs(v));
  }

  ScaleSet out;
  out.scales.resize(groups);
  if (scheme.mode == QuantMode::symmetric) {
    for (std::size_t g = 0; g < groups; ++g) {
      out.scales[g] = amax[g] == 0.0 ? 1.0f : static_cast<float>(amax[g] / scheme.qmax());
    }
    return out;
  }

  const int levels = (1 << scheme.bits) - 1;
  out.zero_points.resize(groups);
  for (std::size_t g = 0; g < groups; ++g) {
    // The range always contains zero so that a one-signed group still maps
    // onto the full code range.
    const double mn = std::min(lo[g], 0.0);
    const double mx = std::max(hi[g], 0.0);
    const float s = mx == mn ? 1.0f : static_cast<float>((mx - mn) / levels);
    out.scales[g] = s;
    const double zp = std::clamp(round_half_away(-mn / s), 0.0, double(levels));
    out.zero_points[g] = static_cast<std::uint8_t>(zp);
  }
  return out;
}

std::int32_t quantize_value(double w, float scale, int zero_point, const QuantScheme& scheme) {
  const double q = round_half_away(w / static_cast<double>(scale)) +
                   (scheme.mode == QuantMode::asymmetric ? zero_point : 0);
  return static_cast<std::int32_t>(std::clamp(q, double(scheme.code_min()), double(scheme.code_max())));
}

float dequantize_value(std::int32_t code, float scale, int zero_point, const QuantScheme& scheme) {
  if (scheme.mode == QuantMode::symmetric) return scale * static_cast<float>(code);
  return scale * static_cast<float>(code - zero_point);
}

void QuantizedTensor::validate() const {
  scheme.validate();
  if (codes.size() != element_count(shape)) throw IntegrityError("quantized tensor: code count does not match shape");
  const std::size_t groups = scheme.group_count(shape);
  if (scales.size() != groups) throw IntegrityError("quantized tensor: scale count does not match scheme");
  if (scheme.mode == QuantMode::asymmetric ? zero_points.size() != groups : !zero_points.empty()) {
    throw IntegrityError("quantized tensor: zero point count does not match scheme");
  }
  for (float s : scales) {
    if (!(s > 0.0f) || !std::isfinite(s)) throw IntegrityError("quantized tensor: non-positive scale");
  }
  for (auto z : zero_points) {
    if (z > scheme.code_max()) throw IntegrityError("quantized tensor: zero point out of range");
  }
  for (auto c : codes) {
    if (c < scheme.code_min() || c > scheme.code_max()) {
      throw IntegrityError("quantized tensor: code " + std::to_string(c) + " outside [" +
                           std::to_string(scheme.code_min()) + ", " + std::to_string(scheme.code_max()) + "]");
    }
  }
}

QuantizedTensor rtn_quantize(const Tensor& w, const QuantScheme& scheme) {
  auto ss = compute_scales(w, scheme);
  QuantizedTensor q;
  q.scheme = scheme;
  q.shape = w.shape();
  q.codes.resize(w.size());
  const bool asym = scheme.mode == QuantMode::asymmetric;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const std::size_t g = scheme.group_of(w.shape(), i);
    q.codes[i] = quantize_value(w[i], ss.scales[g], asym ? ss.zero_points[g] : 0, scheme);
  }
  q.scales = std::move(ss.scales);
  q.zero_points = std::move(ss.zero_points);
  return q;
}

Tensor dequantize(const QuantizedTensor& q) {
  q.validate();
  Tensor out({}, q.shape);
  const bool asym = q.scheme.mode == QuantMode::asymmetric;
  for (std::size_t i = 0; i < q.codes.size(); ++i) {
    const std::size_t g = q.scheme.group_of(q.shape, i);
    out[i] = dequantize_value(q.codes[i], q.scales[g], asym ? q.zero_points[g] : 0, q.scheme);
  }
  return out;
}

std::vector<std::uint8_t> pack_u4(std::span<const std::int32_t> codes, bool is_signed) {
  std::vector<std::uint8_t> out((codes.size() + 1) / 2, 0);
  for (std::size_t i = 0; i < codes.size(); ++i) {
    const int c = codes[i];
    if (is_signed ? (c < -8 || c > 7) : (c < 0 || c > 15)) {
      throw IntegrityError("pack_u4: code " + std::to_string(c) + " does not fit in a nibble");
    }
    const auto nib = static_cast<std::uint8_t>(c & 0xF);
    out[i / 2] |= (i % 2 == 0) ? nib : static_cast<std::uint8_t>(nib << 4);
  }
  return out;
}

std::vector<std::int32_t> unpack_u4(std::span<const std::uint8_t> bytes, std::size_t count, bool is_signed) {
  if (bytes.size() != (count + 1) / 2) throw IntegrityError("unpack_u4: byte count does not match code count");
  std::vector<std::int32_t> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    int nib = (i % 2 == 0) ? (bytes[i / 2] & 0xF) : (bytes[i / 2] >> 4);
    if (is_signed && nib >= 8) nib -= 16;
    out[i] = nib;
  }
  return out;
}

namespace {

Shape scale_shape(const Shape& shape, const QuantScheme& scheme) {
  switch (scheme.granularity) {
    case Granularity::per_tensor: return {1};
    case Granularity::per_channel: return {shape[0]};
    case Granularity::per_group: return {shape[0], scheme.group_count(shape) / shape[0]};
  }
  return {1};
}

DType code_dtype(const QuantScheme& scheme) {
  if (scheme.bits <= 4) return DType::u4;
  return scheme.mode == QuantMode::symmetric ? DType::i8 : DType::u8;
}

// bits, mode, granularity, reserved, group_size (u32 LE)
constexpr std::size_t kSchemeBytes = 8;

}  // namespace

void write_quantized(TensorStore& store, const std::string& layer, const QuantizedTensor& q) {
  q.validate();
  const bool is_signed = q.scheme.mode == QuantMode::symmetric;
  StoreEntry codes{layer + ".codes", code_dtype(q.scheme), q.shape, {}};
  if (codes.dtype == DType::u4) {
    codes.payload = pack_u4(q.codes, is_signed);
  } else {
    codes.payload.resize(q.codes.size());
    for (std::size_t i = 0; i < q.codes.size(); ++i) codes.payload[i] = static_cast<std::uint8_t>(q.codes[i] & 0xFF);
  }
  store.add(std::move(codes));

  const Shape sshape = scale_shape(q.shape, q.scheme);
  store.add(layer + ".scale", Tensor(layer + ".scale", sshape, q.scales));
  if (!is_signed) store.add(StoreEntry{layer + ".zp", DType::u8, sshape, q.zero_points});

  StoreEntry meta{layer + ".scheme", DType::u8, {kSchemeBytes}, std::vector<std::uint8_t>(kSchemeBytes, 0)};
  meta.payload[0] = static_cast<std::uint8_t>(q.scheme.bits);
  meta.payload[1] = static_cast<std::uint8_t>(q.scheme.mode);
  meta.payload[2] = static_cast<std::uint8_t>(q.scheme.granularity);
  const auto gs = static_cast<std::uint32_t>(q.scheme.group_size);
  std::memcpy(meta.payload.data() + 4, &gs, 4);
  store.add(std::move(meta));
}

bool has_quantized(const TensorStore& store, const std::string& layer) {
  return store.contains(layer + ".codes");
}

QuantizedTensor read_quantized(const TensorStore& store, const std::string& layer) {
  const auto& meta = store.entry(layer + ".scheme");
  if (meta.dtype != DType::u8 || meta.payload.size() != kSchemeBytes) {
    throw IntegrityError("quantized layer '" + layer + "': malformed scheme record");
  }
  QuantizedTensor q;
  q.scheme.bits = meta.payload[0];
  if (meta.payload[1] > 1 || meta.payload[2] > 2) throw IntegrityError("quantized layer '" + layer + "': bad scheme enum");
  q.scheme.mode = static_cast<QuantMode>(meta.payload[1]);
  q.scheme.granularity = static_cast<Granularity>(meta.payload[2]);
  std::uint32_t gs;
  std::memcpy(&gs, meta.payload.data() + 4, 4);
  q.scheme.group_size = gs;
  try {
    q.scheme.validate();
  } catch (const Error& e) {
    throw IntegrityError("quantized layer '" + layer + "': " + e.what());
  }

  const auto& codes = store.entry(layer + ".codes");
  if (codes.dtype != code_dtype(q.scheme)) throw IntegrityError("quantized layer '" + layer + "': codes dtype mismatch");
  q.shape = codes.shape;
  if (q.scheme.granularity != Granularity::per_tensor && q.shape.size() != 2) {
    throw IntegrityError("quantized layer '" + layer + "': codes are not 2-D");
  }
  const bool is_signed = q.scheme.mode == QuantMode::symmetric;
  if (codes.dtype == DType::u4) {
    q.codes = unpack_u4(codes.payload, codes.element_count(), is_signed);
  } else {
    q.codes.resize(codes.payload.size());
    for (std::size_t i = 0; i < q.codes.size(); ++i) {
      q.codes[i] = is_signed ? static_cast<std::int8_t>(codes.payload[i]) : codes.payload[i];
    }
  }
  const Tensor scale = store.tensor(layer + ".scale");
  q.scales = scale.values();
  if (!is_signed) q.zero_points = store.entry(layer + ".zp").payload;
  q.validate();
  return q;
}

std::uint64_t quantized_payload_bytes(const TensorStore& store, const std::string& layer) {
  std::uint64_t n = store.entry(layer + ".codes").payload.size() + store.entry(layer + ".scale").payload.size();
  if (store.contains(layer + ".zp")) n += store.entry(layer + ".zp").payload.size();
  return n;
}

std::uint64_t quantized_bytes(const Shape& shape, const Storage& storage) {
  std::uint64_t n = 1;
  for (auto d : shape) n *= d;
  if (n == 0) return 0;
  if (!std::holds_alternative<QuantScheme>(storage)) return 2 * n;
  const auto& scheme = std::get<QuantScheme>(storage);
  check_layout(shape, scheme);
  const std::uint64_t code_bytes = scheme.bits <= 4 ? (n + 1) / 2 : n;
  const std::uint64_t groups = scheme.group_count(shape);
  return code_bytes + 4 * groups + (scheme.mode == QuantMode::asymmetric ? groups : 0);
}

}  // namespace vlaq
