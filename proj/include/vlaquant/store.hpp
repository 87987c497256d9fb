#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "vlaquant/tensor.hpp"

namespace vlaq {

// On-disk element types of the EAQT container.
enum class DType : std::uint8_t {
  f32 = 0,
  i8 = 1,
  u4 = 2,  // two codes per byte, low nibble first
  u8 = 3,
};

const char* dtype_name(DType d);
std::uint64_t payload_size(DType d, std::uint64_t element_count);

struct StoreEntry {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::vector<std::uint8_t> payload;

  std::size_t element_count() const;
};

/// Ordered collection of uniquely named entries. f32 entries convert to and
/// from Tensor; packed integer entries are kept as raw payload bytes.
class TensorStore {
 public:
  static constexpr std::uint32_t kVersion = 1;

  void add(StoreEntry entry);
  void add(const Tensor& t);
  void add(const std::string& name, const Tensor& t);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const StoreEntry& entry(const std::string& name) const;
  Tensor tensor(const std::string& name) const;

  const std::vector<StoreEntry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }

  friend bool operator==(const TensorStore& a, const TensorStore& b);

 private:
  std::vector<StoreEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

bool operator==(const StoreEntry& a, const StoreEntry& b);

std::vector<std::uint8_t> serialize_store(const TensorStore& store);
TensorStore deserialize_store(std::span<const std::uint8_t> bytes);

void save_store(const TensorStore& store, const std::filesystem::path& path);
TensorStore load_store(const std::filesystem::path& path);

}  // namespace vlaq
