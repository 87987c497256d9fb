#include "vlaquant/store.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include "vlaquant/error.hpp"

namespace vlaq {

static_assert(std::endian::native == std::endian::little, "EAQT I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'E', 'A', 'Q', 'T'};

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::span<const std::uint8_t> take(std::uint64_t n, const char* what) {
    need(n, what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::uint64_t n, const char* what) const {
    if (n > bytes_.size() - pos_) throw FormatError(std::string("EAQT: truncated payload while reading ") + what);
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const char* dtype_name(DType d) {
  switch (d) {
    case DType::f32: return "f32";
    case DType::i8: return "i8";
    case DType::u4: return "u4";
    case DType::u8: return "u8";
  }
  return "?";
}

std::uint64_t payload_size(DType d, std::uint64_t n) {
  switch (d) {
    case DType::f32: return 4 * n;
    case DType::i8:
    case DType::u8: return n;
    case DType::u4: return (n + 1) / 2;
  }
  throw FormatError("EAQT: unknown dtype");
}

std::size_t StoreEntry::element_count() const { return vlaq::element_count(shape); }

bool operator==(const StoreEntry& a, const StoreEntry& b) {
  return a.name == b.name && a.dtype == b.dtype && a.shape == b.shape && a.payload == b.payload;
}

bool operator==(const TensorStore& a, const TensorStore& b) { return a.entries_ == b.entries_; }

void TensorStore::add(StoreEntry entry) {
  if (entry.name.empty()) throw FormatError("EAQT: empty entry name");
  if (entry.name.size() > std::numeric_limits<std::uint16_t>::max()) throw FormatError("EAQT: entry name too long");
  if (entry.shape.empty() || entry.shape.size() > 255) throw ShapeError("EAQT: entry '" + entry.name + "' has bad rank");
  for (auto d : entry.shape) {
    if (d == 0) throw ShapeError("EAQT: entry '" + entry.name + "' has a zero dimension");
  }
  if (entry.payload.size() != payload_size(entry.dtype, entry.element_count())) {
    throw FormatError("EAQT: entry '" + entry.name + "' payload length does not match its shape");
  }
  if (contains(entry.name)) throw FormatError("EAQT: duplicate entry name '" + entry.name + "'");
  index_.emplace(entry.name, entries_.size());
  entries_.push_back(std::move(entry));
}

void TensorStore::add(const Tensor& t) { add(t.name(), t); }

void TensorStore::add(const std::string& name, const Tensor& t) {
  StoreEntry e{name, DType::f32, t.shape(), {}};
  e.payload.resize(4 * t.size());
  std::memcpy(e.payload.data(), t.data().data(), e.payload.size());
  add(std::move(e));
}

const StoreEntry& TensorStore::entry(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw FormatError("EAQT: no entry named '" + name + "'");
  return entries_[it->second];
}

Tensor TensorStore::tensor(const std::string& name) const {
  const auto& e = entry(name);
  if (e.dtype != DType::f32) {
    throw FormatError("EAQT: entry '" + name + "' is " + dtype_name(e.dtype) + ", expected f32");
  }
  std::vector<float> data(e.element_count());
  std::memcpy(data.data(), e.payload.data(), e.payload.size());
  return Tensor(name, e.shape, std::move(data));
}

std::vector<std::uint8_t> serialize_store(const TensorStore& store) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put<std::uint32_t>(out, TensorStore::kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(store.size()));
  for (const auto& e : store.entries()) {
    put<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    put<std::uint8_t>(out, static_cast<std::uint8_t>(e.dtype));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(e.shape.size()));
    for (auto d : e.shape) put<std::uint64_t>(out, d);
    put<std::uint64_t>(out, e.payload.size());
    out.insert(out.end(), e.payload.begin(), e.payload.end());
  }
  return out;
}

TensorStore deserialize_store(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  auto magic = r.take(4, "magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw FormatError("EAQT: bad magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != TensorStore::kVersion) {
    throw FormatError("EAQT: unsupported format version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>("entry count");
  TensorStore store;
  for (std::uint32_t i = 0; i < count; ++i) {
    StoreEntry e;
    const auto name_len = r.get<std::uint16_t>("name length");
    auto name = r.take(name_len, "name");
    e.name.assign(name.begin(), name.end());
    const auto dtype = r.get<std::uint8_t>("dtype");
    if (dtype > 3) throw FormatError("EAQT: entry '" + e.name + "' has unknown dtype " + std::to_string(dtype));
    e.dtype = static_cast<DType>(dtype);
    const auto ndim = r.get<std::uint8_t>("ndim");
    for (std::uint8_t d = 0; d < ndim; ++d) e.shape.push_back(r.get<std::uint64_t>("dimension"));
    const auto len = r.get<std::uint64_t>("payload length");
    auto payload = r.take(len, "payload");
    e.payload.assign(payload.begin(), payload.end());
    if (e.dtype == DType::f32) {
      for (std::size_t k = 0; k + 4 <= e.payload.size(); k += 4) {
        float v;
        std::memcpy(&v, e.payload.data() + k, 4);
        if (!std::isfinite(v)) throw IntegrityError("EAQT: entry '" + e.name + "' contains non-finite values");
      }
    }
    store.add(std::move(e));
  }
  if (!r.done()) throw FormatError("EAQT: trailing bytes after last entry");
  return store;
}

void save_store(const TensorStore& store, const std::filesystem::path& path) {
  const auto bytes = serialize_store(store);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write failed for '" + path.string() + "'");
}

TensorStore load_store(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return deserialize_store(bytes);
}

}  // namespace vlaq
