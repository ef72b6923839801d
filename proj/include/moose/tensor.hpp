#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace moose {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dense row-major float tensor. Activations use [batch, channels, height, width].
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> dims, float fill = 0.0f);
  Tensor(std::initializer_list<int> dims, float fill = 0.0f)
      : Tensor(std::vector<int>(dims), fill) {}

  const std::vector<int>& dims() const { return dims_; }
  int dim(std::size_t i) const { return dims_.at(i); }
  std::size_t rank() const { return dims_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::span<float> span() { return data_; }
  std::span<const float> span() const { return data_; }
  std::vector<float>& values() { return data_; }
  const std::vector<float>& values() const { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  // 4-d accessors.
  float& at(int n, int c, int h, int w) {
    return data_[((static_cast<std::size_t>(n) * dims_[1] + c) * dims_[2] + h) * dims_[3] + w];
  }
  float at(int n, int c, int h, int w) const {
    return data_[((static_cast<std::size_t>(n) * dims_[1] + c) * dims_[2] + h) * dims_[3] + w];
  }

  // Pointer to the start of sample n of a 4-d tensor.
  float* sample(int n) { return data_.data() + static_cast<std::size_t>(n) * sample_size(); }
  const float* sample(int n) const {
    return data_.data() + static_cast<std::size_t>(n) * sample_size();
  }
  std::size_t sample_size() const;

  void fill(float v);
  void reshape(std::vector<int> dims);
  bool same_shape(const Tensor& other) const { return dims_ == other.dims_; }

  std::string shape_string() const;

 private:
  std::vector<int> dims_;
  std::vector<float> data_;
};

std::size_t element_count(const std::vector<int>& dims);

// Concatenates 4-d tensors along the channel axis.
Tensor concat_channels(std::span<const Tensor* const> parts);

// Splits the channel range [begin, begin + count) out of a 4-d tensor.
Tensor slice_channels(const Tensor& t, int begin, int count);

// Adds `src` into channels [begin, begin + src.C) of `dst`.
void add_into_channels(Tensor& dst, const Tensor& src, int begin);

// Stable 64-bit digest of the raw bytes (FNV-1a).
std::uint64_t digest(std::span<const float> values, std::uint64_t seed = 1469598103934665603ull);

}  // namespace moose
