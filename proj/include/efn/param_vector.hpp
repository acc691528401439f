#pragma once

#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "efn/tensor.hpp"

namespace efn {

/// Named slice of a flat parameter vector.
struct ParamSegment {
  std::string name;
  std::size_t offset = 0;
  std::vector<std::size_t> shape;

  std::size_t size() const { return Tensor::element_count(shape); }
};

/// Segment table for one flat vector. Segments are contiguous, disjoint and
/// cover the vector exactly; construction enforces this.
class ParamLayout {
 public:
  ParamLayout() : segments_(std::make_shared<std::vector<ParamSegment>>()) {}

  explicit ParamLayout(std::vector<ParamSegment> segs) {
    std::size_t off = 0;
    for (const auto& s : segs) {
      if (s.offset != off)
        throw std::invalid_argument("ParamLayout: segment '" + s.name +
                                    "' leaves a gap or overlaps");
      off += s.size();
    }
    total_ = off;
    segments_ = std::make_shared<std::vector<ParamSegment>>(std::move(segs));
  }

  std::size_t total() const { return total_; }
  const std::vector<ParamSegment>& segments() const { return *segments_; }

  const ParamSegment& seg(std::string_view name) const {
    for (const auto& s : *segments_)
      if (s.name == name) return s;
    throw std::out_of_range("ParamLayout: no segment '" + std::string(name) +
                            "'");
  }

  bool has(std::string_view name) const {
    for (const auto& s : *segments_)
      if (s.name == name) return true;
    return false;
  }

 private:
  std::shared_ptr<const std::vector<ParamSegment>> segments_;
  std::size_t total_ = 0;
};

/// Builder for a ParamLayout: append segments in declaration order.
class ParamLayoutBuilder {
 public:
  std::size_t add(std::string name, std::vector<std::size_t> shape) {
    ParamSegment s{std::move(name), offset_, std::move(shape)};
    offset_ += s.size();
    segs_.push_back(std::move(s));
    return segs_.back().offset;
  }

  ParamLayout build() { return ParamLayout(std::move(segs_)); }

 private:
  std::vector<ParamSegment> segs_;
  std::size_t offset_ = 0;
};

/// A flat real64 vector plus its segment table (theta, phi, gradients).
class ParamVector {
 public:
  ParamVector() = default;

  explicit ParamVector(ParamLayout layout)
      : layout_(std::move(layout)), values_(layout_.total(), 0.0) {}

  ParamVector(ParamLayout layout, std::vector<double> values)
      : layout_(std::move(layout)), values_(std::move(values)) {
    if (values_.size() != layout_.total())
      throw std::invalid_argument("ParamVector: value count != layout total");
  }

  const ParamLayout& layout() const { return layout_; }
  std::size_t size() const { return values_.size(); }

  std::span<double> flat() { return values_; }
  std::span<const double> flat() const { return values_; }
  std::vector<double>& storage() { return values_; }
  const std::vector<double>& storage() const { return values_; }

  std::span<double> view(std::string_view name) {
    const auto& s = layout_.seg(name);
    return std::span<double>(values_.data() + s.offset, s.size());
  }
  std::span<const double> view(std::string_view name) const {
    const auto& s = layout_.seg(name);
    return std::span<const double>(values_.data() + s.offset, s.size());
  }

 private:
  ParamLayout layout_;
  std::vector<double> values_;
};

}  // namespace efn
