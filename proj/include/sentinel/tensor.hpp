#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace sentinel {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Dense row-major float32 array. Value type: copies are deep.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  static Tensor scalar(float v) { return Tensor(Shape{}, std::vector<float>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  const std::vector<float>& values() const { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  /// Same payload, new extents; throws ShapeError if element counts differ.
  Tensor reshaped(Shape shape) const;

  /// Slice [begin, end) along the leading axis.
  Tensor rows(std::size_t begin, std::size_t end) const;

  /// Element `index` along the leading axis, with that axis dropped.
  Tensor row(std::size_t index) const;

  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<float> data_;
};

/// Concatenate equally-shaped tensors along a new leading axis.
Tensor stack(std::span<const Tensor> items);

/// Concatenate along the existing leading axis.
Tensor concat_rows(std::span<const Tensor> parts);

// ".ten" container: "SNTL", version u8, rank u8, u32 LE extents, f32 LE payload.
inline constexpr std::uint8_t kTenVersion = 1;

std::string encode_ten(const Tensor& t);
/// Decodes one tensor from the front of `bytes`; `consumed` receives its length.
Tensor decode_ten(std::string_view bytes, std::size_t* consumed = nullptr);
void save_ten(const std::filesystem::path& path, const Tensor& t);
Tensor load_ten(const std::filesystem::path& path);

}  // namespace sentinel
