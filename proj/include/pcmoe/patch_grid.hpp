#pragma once

#include <utility>
#include <vector>

#include "pcmoe/tensor.hpp"

namespace pcmoe {

/// Half-open rectangle [row0, row1) x [col0, col1) on a feature map.
struct PatchRect {
  int row0 = 0;
  int row1 = 0;
  int col0 = 0;
  int col1 = 0;

  int height() const { return row1 - row0; }
  int width() const { return col1 - col0; }
  bool operator==(const PatchRect&) const = default;
};

/// g x g partition of an H x W map into non-overlapping patches, row-major.
/// Each axis is cut every floor(extent / g) cells; the last row and column
/// of patches absorb the remainder.
class PatchGrid {
 public:
  static PatchGrid make(int height, int width, int g);

  int grid() const { return g_; }
  int height() const { return height_; }
  int width() const { return width_; }
  int patch_count() const { return static_cast<int>(rects_.size()); }
  const std::vector<PatchRect>& rects() const { return rects_; }
  const PatchRect& rect(int i) const { return rects_.at(static_cast<std::size_t>(i)); }

 private:
  int g_ = 1;
  int height_ = 0;
  int width_ = 0;
  std::vector<PatchRect> rects_;
};

std::pair<std::vector<Tensor>, PatchGrid> split(const Tensor& f, int g);
Tensor reassemble(const std::vector<Tensor>& patches, const PatchGrid& grid, int out_channels);

}  // namespace pcmoe
