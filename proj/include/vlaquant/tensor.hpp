#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace vlaq {

using Shape = std::vector<std::size_t>;

std::size_t element_count(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major f32 tensor. Every dimension is >= 1 and the data length
/// always equals the product of the shape.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::string name, Shape shape);
  Tensor(std::string name, Shape shape, std::vector<float> data);

  static Tensor zeros(Shape shape) { return Tensor({}, std::move(shape)); }
  static Tensor identity(std::size_t n);
  static Tensor from_rows(const std::vector<std::vector<float>>& rows);

  const std::string& name() const noexcept { return name_; }
  void set_name(std::string name) { name_ = std::move(name); }
  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // Matrix views; valid for rank-2 tensors only.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const float> data() const noexcept { return data_; }
  std::span<float> data() noexcept { return data_; }
  const std::vector<float>& values() const noexcept { return data_; }

  float operator[](std::size_t i) const { return data_[i]; }
  float& operator[](std::size_t i) { return data_[i]; }
  float at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
  float& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }

  bool all_finite() const noexcept;
  // Throws IntegrityError naming `context` if any element is NaN or Inf.
  void require_finite(const std::string& context) const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::string name_;
  Shape shape_;
  std::vector<float> data_;
};

// Requires rank 2; throws ShapeError otherwise.
void require_matrix(const Tensor& t, const char* what);

/// Real matrix product with f64 accumulation per output element.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

}  // namespace vlaq
