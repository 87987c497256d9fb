#include "vlaquant/tensor.hpp"

#include <cmath>
#include <sstream>

#include "vlaquant/error.hpp"

namespace vlaq {

std::size_t element_count(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

void validate_shape(const Shape& shape, const std::string& name) {
  if (shape.empty()) throw ShapeError("tensor '" + name + "' has no dimensions");
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor '" + name + "' has a zero dimension " + shape_string(shape));
  }
}

}  // namespace

Tensor::Tensor(std::string name, Shape shape) : name_(std::move(name)), shape_(std::move(shape)) {
  validate_shape(shape_, name_);
  data_.assign(element_count(shape_), 0.0f);
}

Tensor::Tensor(std::string name, Shape shape, std::vector<float> data)
    : name_(std::move(name)), shape_(std::move(shape)), data_(std::move(data)) {
  validate_shape(shape_, name_);
  if (data_.size() != element_count(shape_)) {
    throw ShapeError("tensor '" + name_ + "': data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape_string(shape_));
  }
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({}, {n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0f;
  return t;
}

Tensor Tensor::from_rows(const std::vector<std::vector<float>>& rows) {
  if (rows.empty()) throw ShapeError("from_rows: no rows");
  const std::size_t cols = rows.front().size();
  std::vector<float> data;
  data.reserve(rows.size() * cols);
  for (const auto& r : rows) {
    if (r.size() != cols) throw ShapeError("from_rows: ragged rows");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor({}, {rows.size(), cols}, std::move(data));
}

std::size_t Tensor::rows() const {
  require_matrix(*this, "rows()");
  return shape_[0];
}

std::size_t Tensor::cols() const {
  require_matrix(*this, "cols()");
  return shape_[1];
}

bool Tensor::all_finite() const noexcept {
  for (float v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tensor::require_finite(const std::string& context) const {
  if (!all_finite()) throw IntegrityError(context + ": tensor '" + name_ + "' contains non-finite values");
}

void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(what) + ": expected a matrix, got shape " + shape_string(t.shape()));
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  }
  Tensor out({}, {m, n});
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a.at(i, p);
      if (aip == 0.0) continue;
      const float* brow = b.data().data() + p * n;
      for (std::size_t j = 0; j < n; ++j) acc[j] += aip * brow[j];
    }
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = static_cast<float>(acc[j]);
  }
  out.require_finite("matmul");
  return out;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor out(a.name(), {n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
  return out;
}

}  // namespace vlaq
