#include "pcmoe/patch_grid.hpp"

#include <string>

#include "pcmoe/errors.hpp"

namespace pcmoe {

namespace {

std::vector<std::pair<int, int>> cuts(int extent, int g) {
  const int base = extent / g;
  std::vector<std::pair<int, int>> out;
  out.reserve(static_cast<std::size_t>(g));
  for (int i = 0; i < g; ++i) out.emplace_back(i * base, i + 1 == g ? extent : (i + 1) * base);
  return out;
}

}  // namespace

PatchGrid PatchGrid::make(int height, int width, int g) {
  if (g < 1) throw ConfigError("grid size must be at least 1");
  if (g > height || g > width) {
    throw ConfigError("grid " + std::to_string(g) + " exceeds feature map " +
                      std::to_string(height) + "x" + std::to_string(width));
  }
  PatchGrid grid;
  grid.g_ = g;
  grid.height_ = height;
  grid.width_ = width;
  const auto rows = cuts(height, g);
  const auto cols = cuts(width, g);
  for (const auto& [r0, r1] : rows) {
    for (const auto& [c0, c1] : cols) grid.rects_.push_back({r0, r1, c0, c1});
  }
  return grid;
}

std::pair<std::vector<Tensor>, PatchGrid> split(const Tensor& f, int g) {
  const Shape s = f.shape();
  PatchGrid grid = PatchGrid::make(s.h, s.w, g);
  std::vector<Tensor> patches;
  patches.reserve(grid.rects().size());
  for (const auto& r : grid.rects()) {
    patches.push_back(crop(f, 0, s.n, r.row0, r.col0, r.height(), r.width()));
  }
  return {std::move(patches), std::move(grid)};
}

Tensor reassemble(const std::vector<Tensor>& patches, const PatchGrid& grid, int out_channels) {
  if (static_cast<int>(patches.size()) != grid.patch_count()) {
    throw UsageError("reassemble: expected " + std::to_string(grid.patch_count()) +
                     " patches, got " + std::to_string(patches.size()));
  }
  const int batch = patches.front().shape().n;
  std::vector<Block> blocks;
  blocks.reserve(patches.size());
  for (std::size_t i = 0; i < patches.size(); ++i) {
    const Shape ps = patches[i].shape();
    const PatchRect& r = grid.rects()[i];
    if (ps.n != batch || ps.c != out_channels || ps.h != r.height() || ps.w != r.width()) {
      throw UsageError("reassemble: patch " + std::to_string(i) + " has shape " + to_string(ps) +
                       ", grid expects " + std::to_string(r.height()) + "x" +
                       std::to_string(r.width()) + " with " + std::to_string(out_channels) +
                       " channels");
    }
    blocks.push_back({patches[i], 0, r.row0, r.col0});
  }
  return assemble(blocks, Shape{batch, out_channels, grid.height(), grid.width()});
}

}  // namespace pcmoe
