#include "sentinel/tensor.hpp"

#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

#include "sentinel/errors.hpp"
#include "sentinel/io.hpp"

namespace sentinel {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream ss;
  ss << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) ss << ',';
    ss << shape[i];
  }
  ss << ']';
  return ss.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
  for (auto e : shape_) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_to_string(shape_));
  }
}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto e : shape_) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_to_string(shape_));
  }
  if (shape_numel(shape_) != data_.size()) {
    throw ShapeError("shape " + shape_to_string(shape_) + " needs " + std::to_string(shape_numel(shape_)) +
                     " values, got " + std::to_string(data_.size()));
  }
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw ShapeError("cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

Tensor Tensor::rows(std::size_t begin, std::size_t end) const {
  if (rank() == 0 || begin >= end || end > shape_[0]) {
    throw ShapeError("row slice [" + std::to_string(begin) + "," + std::to_string(end) + ") out of range for " +
                     shape_to_string(shape_));
  }
  const std::size_t stride = numel() / shape_[0];
  Shape s = shape_;
  s[0] = end - begin;
  return Tensor(std::move(s), std::vector<float>(data_.begin() + static_cast<std::ptrdiff_t>(begin * stride),
                                                 data_.begin() + static_cast<std::ptrdiff_t>(end * stride)));
}

Tensor Tensor::row(std::size_t index) const {
  Tensor r = rows(index, index + 1);
  Shape s(shape_.begin() + 1, shape_.end());
  return r.reshaped(std::move(s));
}

bool Tensor::all_finite() const {
  for (float v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor stack(std::span<const Tensor> items) {
  if (items.empty()) throw ShapeError("stack of zero tensors");
  const Shape& inner = items.front().shape();
  Shape s{items.size()};
  s.insert(s.end(), inner.begin(), inner.end());
  std::vector<float> data;
  data.reserve(shape_numel(s));
  for (const auto& t : items) {
    if (t.shape() != inner) {
      throw ShapeError("stack: shape " + shape_to_string(t.shape()) + " differs from " + shape_to_string(inner));
    }
    data.insert(data.end(), t.values().begin(), t.values().end());
  }
  return Tensor(std::move(s), std::move(data));
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Shape s = parts.front().shape();
  if (s.empty()) throw ShapeError("concat of scalars");
  std::size_t lead = 0;
  std::vector<float> data;
  for (const auto& t : parts) {
    if (t.rank() != s.size() || !std::equal(s.begin() + 1, s.end(), t.shape().begin() + 1)) {
      throw ShapeError("concat: shape " + shape_to_string(t.shape()) + " incompatible with " + shape_to_string(s));
    }
    lead += t.dim(0);
    data.insert(data.end(), t.values().begin(), t.values().end());
  }
  s[0] = lead;
  return Tensor(std::move(s), std::move(data));
}

std::string encode_ten(const Tensor& t) {
  std::string out = "SNTL";
  io::put_u8(out, kTenVersion);
  if (t.rank() > 255) throw ShapeError("rank too large for .ten");
  io::put_u8(out, static_cast<std::uint8_t>(t.rank()));
  for (auto e : t.shape()) {
    if (e > std::numeric_limits<std::uint32_t>::max()) throw ShapeError("extent too large for .ten");
    io::put_u32(out, static_cast<std::uint32_t>(e));
  }
  out.reserve(out.size() + 4 * t.numel());
  for (float v : t.data()) io::put_f32(out, v);
  return out;
}

Tensor decode_ten(std::string_view bytes, std::size_t* consumed) {
  io::ByteReader r(bytes);
  if (r.take(4) != "SNTL") throw FormatError(".ten: bad magic");
  const auto version = r.u8();
  if (version != kTenVersion) throw FormatError(".ten: unsupported version " + std::to_string(version));
  const auto rank = r.u8();
  Shape shape(rank);
  for (auto& e : shape) {
    e = r.u32();
    if (e == 0) throw FormatError(".ten: zero extent");
  }
  std::vector<float> data(shape_numel(shape));
  for (auto& v : data) v = r.f32();
  if (consumed) *consumed = r.offset();
  return Tensor(std::move(shape), std::move(data));
}

void save_ten(const std::filesystem::path& path, const Tensor& t) { io::write_file_atomic(path, encode_ten(t)); }

Tensor load_ten(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  std::size_t used = 0;
  Tensor t = decode_ten(bytes, &used);
  if (used != bytes.size()) throw FormatError(path.string() + ": trailing bytes after tensor");
  return t;
}

}  // namespace sentinel
