#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace metapolyp {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major float32 array. Rank-3 tensors are laid out as H x W x C.
class Tensor {
   public:
    Tensor() = default;
    explicit Tensor(Shape shape, float fill = 0.0f);
    Tensor(Shape shape, std::vector<float> data);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0f); }
    static Tensor full(Shape shape, float v) { return Tensor(std::move(shape), v); }
    static Tensor from(Shape shape, std::initializer_list<float> values);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<float> data() noexcept { return data_; }
    std::span<const float> data() const noexcept { return data_; }
    float* raw() noexcept { return data_.data(); }
    const float* raw() const noexcept { return data_.data(); }

    float& operator[](std::size_t i) { return data_[i]; }
    float operator[](std::size_t i) const { return data_[i]; }

    // H x W x C accessors.
    float& at(std::size_t y, std::size_t x, std::size_t c) { return data_[(y * shape_[1] + x) * shape_[2] + c]; }
    float at(std::size_t y, std::size_t x, std::size_t c) const { return data_[(y * shape_[1] + x) * shape_[2] + c]; }

    /// Same data, new extents; the element count must match.
    Tensor reshaped(Shape shape) const;

    bool all_finite() const noexcept;
    double sum() const noexcept;

    /// Bit-exact equality of shape and contents.
    friend bool operator==(const Tensor& a, const Tensor& b) noexcept;

   private:
    Shape shape_;
    std::vector<float> data_;
};

/// Throws NumericError naming `where` if any element is NaN or Inf.
void require_finite(const Tensor& t, const std::string& where);

}  // namespace metapolyp
