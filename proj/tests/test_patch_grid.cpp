#include <gtest/gtest.h>

#include "oracles.hpp"
#include "pcmoe/errors.hpp"
#include "pcmoe/patch_grid.hpp"

using namespace pcmoe;

TEST(PatchGrid, ExactDivision) {
  const PatchGrid g = PatchGrid::make(6, 6, 3);
  ASSERT_EQ(g.patch_count(), 9);
  for (const auto& r : g.rects()) {
    EXPECT_EQ(r.height(), 2);
    EXPECT_EQ(r.width(), 2);
  }
  EXPECT_EQ(g.rect(5), (PatchRect{2, 4, 4, 6}));
}

TEST(PatchGrid, SinglePatchIsWholeMap) {
  const PatchGrid g = PatchGrid::make(6, 6, 1);
  ASSERT_EQ(g.patch_count(), 1);
  EXPECT_EQ(g.rect(0), (PatchRect{0, 6, 0, 6}));
}

TEST(PatchGrid, RemainderGoesToLastRowAndColumn) {
  const PatchGrid g = PatchGrid::make(7, 7, 3);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(g.rect(i).width(), i == 2 ? 3 : 2);
    EXPECT_EQ(g.rect(i * 3).height(), i == 2 ? 3 : 2);
  }
}

TEST(PatchGrid, DisjointCoverByEnumeration) {
  for (int H = 1; H <= 9; ++H)
    for (int W = 1; W <= 9; ++W)
      for (int g = 1; g <= std::min(H, W); ++g) {
        const PatchGrid grid = PatchGrid::make(H, W, g);
        ASSERT_EQ(grid.patch_count(), g * g);
        std::vector<int> hits(static_cast<std::size_t>(H) * W, 0);
        for (const auto& r : grid.rects())
          for (int y = r.row0; y < r.row1; ++y)
            for (int x = r.col0; x < r.col1; ++x) ++hits[static_cast<std::size_t>(y) * W + x];
        for (int h : hits) ASSERT_EQ(h, 1) << H << "x" << W << " g=" << g;
      }
}

TEST(PatchGrid, GridLargerThanMapIsConfigError) {
  EXPECT_THROW(PatchGrid::make(2, 5, 3), ConfigError);
  EXPECT_THROW(PatchGrid::make(5, 5, 0), ConfigError);
  EXPECT_THROW(split(Tensor::zeros(Shape{1, 1, 4, 2}), 3), ConfigError);
}

TEST(PatchGrid, RoundtripIsBitExact) {
  Rng rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const int H = rng.uniform_int(1, 13), W = rng.uniform_int(1, 13);
    const int g = rng.uniform_int(1, std::min(H, W));
    Tensor f = oracle::random_tensor(rng, Shape{rng.uniform_int(1, 3), rng.uniform_int(1, 3), H, W}, false, -1e3, 1e3);
    auto [patches, grid] = split(f, g);
    Tensor back = reassemble(patches, grid, f.shape().c);
    ASSERT_EQ(back.shape(), f.shape());
    ASSERT_TRUE(std::equal(back.data().begin(), back.data().end(), f.data().begin()));
  }
}

TEST(PatchGrid, IndexFilledPatchesGiveBlockwiseMap) {
  const PatchGrid grid = PatchGrid::make(7, 5, 2);
  std::vector<Tensor> patches;
  for (int i = 0; i < grid.patch_count(); ++i) {
    const auto& r = grid.rect(i);
    patches.push_back(Tensor::full(Shape{1, 1, r.height(), r.width()}, i));
  }
  Tensor out = reassemble(patches, grid, 1);
  for (int y = 0; y < 7; ++y)
    for (int x = 0; x < 5; ++x) EXPECT_EQ(out.at(0, 0, y, x), (y < 3 ? 0 : 2) + (x < 2 ? 0 : 1));
}

TEST(PatchGrid, ReassembleShapeMismatchIsUsageError) {
  auto [patches, grid] = split(Tensor::zeros(Shape{1, 2, 6, 6}), 2);
  EXPECT_THROW(reassemble(patches, grid, 3), UsageError);
  patches.pop_back();
  EXPECT_THROW(reassemble(patches, grid, 2), UsageError);
}

TEST(PatchGrid, SplitReassembleIsGradientTransparent) {
  Rng rng(22);
  Tensor f = oracle::random_tensor(rng, Shape{2, 2, 7, 6}, true);
  Tensor probe = oracle::random_tensor(rng, f.shape());
  backward(sum(mul(f, probe)));
  const std::vector<double> direct(f.grad().begin(), f.grad().end());
  f.zero_grad();
  auto [patches, grid] = split(f, 3);
  backward(sum(mul(reassemble(patches, grid, 2), probe)));
  for (std::size_t i = 0; i < direct.size(); ++i) EXPECT_EQ(f.grad()[i], direct[i]);
}
