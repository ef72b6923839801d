#include "moose/tensor.hpp"

#include <algorithm>
#include <cstring>
#include <sstream>

namespace moose {

std::size_t element_count(const std::vector<int>& dims) {
  std::size_t n = 1;
  for (int d : dims) {
    if (d < 0) throw ShapeError("negative tensor dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor::Tensor(std::vector<int> dims, float fill)
    : dims_(std::move(dims)), data_(element_count(dims_), fill) {}

std::size_t Tensor::sample_size() const {
  if (dims_.empty()) return 0;
  return data_.size() / static_cast<std::size_t>(std::max(dims_[0], 1));
}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::reshape(std::vector<int> dims) {
  if (element_count(dims) != data_.size()) {
    throw ShapeError("reshape changes element count");
  }
  dims_ = std::move(dims);
}

std::string Tensor::shape_string() const {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims_.size(); ++i) os << (i ? "," : "") << dims_[i];
  os << ']';
  return os.str();
}

Tensor concat_channels(std::span<const Tensor* const> parts) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Tensor& first = *parts.front();
  const int n = first.dim(0), h = first.dim(2), w = first.dim(3);
  int channels = 0;
  for (const Tensor* p : parts) {
    if (p->rank() != 4 || p->dim(0) != n || p->dim(2) != h || p->dim(3) != w) {
      throw ShapeError("concat_channels: mismatched shapes " + first.shape_string() + " vs " +
                       p->shape_string());
    }
    channels += p->dim(1);
  }
  Tensor out({n, channels, h, w});
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int b = 0; b < n; ++b) {
    float* dst = out.sample(b);
    for (const Tensor* p : parts) {
      const std::size_t count = plane * p->dim(1);
      std::memcpy(dst, p->sample(b), count * sizeof(float));
      dst += count;
    }
  }
  return out;
}

Tensor slice_channels(const Tensor& t, int begin, int count) {
  const int n = t.dim(0), c = t.dim(1), h = t.dim(2), w = t.dim(3);
  if (begin < 0 || count < 0 || begin + count > c) throw ShapeError("slice_channels out of range");
  Tensor out({n, count, h, w});
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int b = 0; b < n; ++b) {
    std::memcpy(out.sample(b), t.sample(b) + plane * begin, plane * count * sizeof(float));
  }
  return out;
}

void add_into_channels(Tensor& dst, const Tensor& src, int begin) {
  const int n = dst.dim(0), h = dst.dim(2), w = dst.dim(3);
  if (src.dim(0) != n || src.dim(2) != h || src.dim(3) != w || begin + src.dim(1) > dst.dim(1)) {
    throw ShapeError("add_into_channels: shape mismatch");
  }
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const std::size_t count = plane * src.dim(1);
  for (int b = 0; b < n; ++b) {
    float* d = dst.sample(b) + plane * begin;
    const float* s = src.sample(b);
    for (std::size_t i = 0; i < count; ++i) d[i] += s[i];
  }
}

std::uint64_t digest(std::span<const float> values, std::uint64_t seed) {
  std::uint64_t h = seed;
  const auto* bytes = reinterpret_cast<const unsigned char*>(values.data());
  const std::size_t n = values.size() * sizeof(float);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace moose
