#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <set>

#include "oracles.hpp"
#include "pcmoe/errors.hpp"
#include "pcmoe/seg.hpp"

using namespace pcmoe;
namespace fs = std::filesystem;

namespace {

LabelMap map_of(int h, int w, std::vector<int> labels) { return {h, w, std::move(labels)}; }

void copy_param(TinySegModel& from, const std::string& a, TinySegModel& to, const std::string& b) {
  Parameter* src = from.find_parameter(a);
  Parameter* dst = to.find_parameter(b);
  ASSERT_NE(src, nullptr) << a;
  ASSERT_NE(dst, nullptr) << b;
  ASSERT_EQ(src->value.shape(), dst->value.shape());
  std::copy(src->value.data().begin(), src->value.data().end(), dst->value.mutable_data().begin());
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("pcmoe_test_seg_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(Scene, DeterministicInSeed) {
  const SceneSample a = generate_scene(42, 32, 40, 4);
  const SceneSample b = generate_scene(42, 32, 40, 4);
  EXPECT_EQ(a.mask, b.mask);
  EXPECT_TRUE(std::equal(a.image.data().begin(), a.image.data().end(), b.image.data().begin()));
  const SceneSample c = generate_scene(43, 32, 40, 4);
  EXPECT_NE(a.mask, c.mask);
}

TEST(Scene, ValuesAndLabelsInRange) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const SceneSample s = generate_scene(seed, 24, 16, 5);
    EXPECT_EQ(s.image.shape(), (Shape{1, 3, 24, 16}));
    for (double v : s.image.data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    for (int l : s.mask.labels) {
      EXPECT_GE(l, 0);
      EXPECT_LT(l, 5);
    }
  }
}

TEST(Scene, SingleRectangleIsExact) {
  SceneOptions opt;
  opt.max_shapes_per_class = 1;
  opt.rectangles_only = true;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const SceneSample s = generate_scene(seed, 32, 32, 2, opt);
    std::set<int> classes(s.mask.labels.begin(), s.mask.labels.end());
    EXPECT_EQ(classes, (std::set<int>{0, 1}));
    int r0 = 32, r1 = -1, c0 = 32, c1 = -1, count = 0;
    for (int r = 0; r < 32; ++r)
      for (int c = 0; c < 32; ++c)
        if (s.mask.at(r, c) == 1) {
          r0 = std::min(r0, r);
          r1 = std::max(r1, r);
          c0 = std::min(c0, c);
          c1 = std::max(c1, c);
          ++count;
        }
    EXPECT_EQ(count, (r1 - r0 + 1) * (c1 - c0 + 1)) << "class-1 region is not a filled rectangle";
  }
}

TEST(Scene, EveryClassUsuallyPresent) {
  std::vector<int> present(4, 0);
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const SceneSample s = generate_scene(seed, 64, 64, 4);
    std::set<int> classes(s.mask.labels.begin(), s.mask.labels.end());
    for (int c : classes) ++present[c];
  }
  for (int c = 0; c < 4; ++c) EXPECT_GE(present[c], 950) << "class " << c;
}

TEST(Scene, InvalidArguments) {
  EXPECT_THROW(generate_scene(1, 8, 32, 3), ConfigError);
  EXPECT_THROW(generate_scene(1, 32, 32, 1), ConfigError);
}

TEST(TinySeg, BaselineLogitShape) {
  SegModelConfig cfg;
  cfg.moe_slots.clear();
  TinySegModel model(cfg, 1);
  Rng rng(1);
  const SegForward out = model.forward(oracle::random_tensor(rng, Shape{2, 3, 32, 24}, false, 0, 1));
  EXPECT_EQ(out.logits.shape(), (Shape{2, 4, 32, 24}));
  EXPECT_TRUE(out.routing.empty());
  EXPECT_TRUE(model.moe_layers().empty());
}

TEST(TinySeg, ConfiguredSlotsAreExactlyTheMoELayers) {
  SegModelConfig cfg;
  cfg.moe_slots = {"bridge", "dec2"};
  TinySegModel model(cfg, 1);
  EXPECT_EQ(model.moe_layers().size(), 2u);
  Rng rng(2);
  const SegForward out = model.forward(oracle::random_tensor(rng, Shape{1, 3, 32, 32}, false, 0, 1));
  ASSERT_EQ(out.routing.size(), 2u);
  EXPECT_EQ(out.routing[0].slot, "bridge");
  EXPECT_EQ(out.routing[0].scale, 4);
  EXPECT_EQ(out.routing[1].slot, "dec2");
  EXPECT_EQ(out.routing[1].scale, 1);
  EXPECT_EQ(out.routing[1].moe.decisions.size(), 9u);
}

TEST(TinySeg, ConfigErrors) {
  SegModelConfig cfg;
  cfg.moe_slots = {"nope"};
  EXPECT_THROW(TinySegModel(cfg, 1), ConfigError);
  cfg.moe_slots = {"enc1"};
  EXPECT_THROW(TinySegModel(cfg, 1), ConfigError);
  cfg.moe_slots = {"dec2"};
  TinySegModel model(cfg, 1);
  EXPECT_THROW(model.forward(Tensor::zeros(Shape{1, 3, 30, 32})), ConfigError);
  EXPECT_THROW(model.forward(Tensor::zeros(Shape{1, 1, 32, 32})), ConfigError);
}

TEST(TinySeg, SingleExpertSlotReproducesBaseline) {
  SegModelConfig base_cfg;
  base_cfg.moe_slots.clear();
  TinySegModel base(base_cfg, 5);
  SegModelConfig moe_cfg;
  moe_cfg.moe.n_experts = 1;
  moe_cfg.moe.top_k = 1;
  TinySegModel moe(moe_cfg, 5);
  copy_param(base, "dec2.weight", moe, "dec2.expert0.weight");
  copy_param(base, "dec2.bias", moe, "dec2.expert0.bias");
  Rng rng(3);
  Tensor x = oracle::random_tensor(rng, Shape{2, 3, 32, 32}, false, 0, 1);
  const Tensor a = base.forward(x).logits;
  const Tensor b = moe.forward(x).logits;
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-10);
}

TEST(TinySeg, IdenticalExpertsWithFullTopKMatchSingleExpert) {
  SegModelConfig one_cfg;
  one_cfg.moe.n_experts = 1;
  one_cfg.moe.top_k = 1;
  TinySegModel one(one_cfg, 6);
  SegModelConfig all_cfg;
  all_cfg.moe.n_experts = 4;
  all_cfg.moe.top_k = 4;
  TinySegModel all(all_cfg, 6);
  for (int j = 0; j < 4; ++j) {
    copy_param(one, "dec2.expert0.weight", all, "dec2.expert" + std::to_string(j) + ".weight");
    copy_param(one, "dec2.expert0.bias", all, "dec2.expert" + std::to_string(j) + ".bias");
  }
  Rng rng(4);
  Tensor x = oracle::random_tensor(rng, Shape{1, 3, 32, 32}, false, 0, 1);
  const Tensor a = one.forward(x).logits;
  const Tensor b = all.forward(x).logits;
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-9);
}

TEST(CrossEntropy, Examples) {
  const LabelMap m = map_of(2, 2, {0, 1, 2, 3});
  std::vector<double> strong(16, 0.0);
  for (int p = 0; p < 4; ++p) strong[static_cast<std::size_t>(m.labels[p]) * 4 + p] = 25.0;
  EXPECT_LT(pixel_cross_entropy(Tensor::from_data(Shape{1, 4, 2, 2}, strong), {&m, 1}).item(), 1e-8);
  EXPECT_NEAR(pixel_cross_entropy(Tensor::zeros(Shape{1, 4, 2, 2}), {&m, 1}).item(), std::log(4.0), 1e-15);
}

TEST(CrossEntropy, MatchesHandComputation) {
  Rng rng(5);
  const std::vector<LabelMap> masks = {map_of(2, 2, {2, 0, 1, 1}), map_of(2, 2, {0, 0, 2, 1})};
  Tensor logits = oracle::random_tensor(rng, Shape{2, 3, 2, 2}, true, -3, 3);
  double ref = 0.0;
  for (int n = 0; n < 2; ++n)
    for (int p = 0; p < 4; ++p) {
      const int r = p / 2, c = p % 2;
      double z = 0.0;
      for (int k = 0; k < 3; ++k) z += std::exp(logits.at(n, k, r, c));
      ref += -(logits.at(n, masks[n].labels[p], r, c) - std::log(z));
    }
  ref /= 8;
  EXPECT_NEAR(pixel_cross_entropy(logits, masks).item(), ref, 1e-14);
  EXPECT_LT(oracle::max_fd_error([&] { return pixel_cross_entropy(logits, masks); }, {logits}), 1e-4);
}

TEST(CrossEntropy, LabelOutOfRangeIsDataError) {
  const LabelMap m = map_of(1, 2, {0, 3});
  EXPECT_THROW(pixel_cross_entropy(Tensor::zeros(Shape{1, 3, 1, 2}), {&m, 1}), DataError);
}

TEST(CrossEntropy, SmallGradientStepDecreasesLoss) {
  SegModelConfig cfg;
  cfg.moe.n_experts = 4;
  TinySegModel model(cfg, 7);
  std::vector<SceneSample> batch = {generate_scene(1, 32, 32, 4), generate_scene(2, 32, 32, 4)};
  std::vector<LabelMap> masks = {batch[0].mask, batch[1].mask};
  const Tensor x = stack_images(batch);
  auto params = model.parameters();
  for (Parameter* p : params) p->value.zero_grad();
  Tensor loss = pixel_cross_entropy(model.forward(x).logits, masks);
  backward(loss);
  sgd_step(params, 1e-3, 0.0);
  EXPECT_LT(pixel_cross_entropy(model.forward(x).logits, masks).item(), loss.item());
}

TEST(Miou, Examples) {
  const LabelMap a = map_of(2, 2, {0, 1, 1, 2});
  EXPECT_EQ(miou(a, a, 3), 1.0);
  const LabelMap zeros = map_of(2, 2, {0, 0, 0, 0});
  EXPECT_EQ(miou(zeros, zeros, 4), 1.0);
  // Class 1 in opposite corners of a 4x4 grid: IoU(1) = 0 and class 0 keeps
  // 8 of the 16 pixels in its union.
  std::vector<int> mask(16, 0), pred(16, 0);
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 2; ++c) {
      mask[static_cast<std::size_t>(r) * 4 + c] = 1;
      pred[static_cast<std::size_t>(r + 2) * 4 + c + 2] = 1;
    }
  EXPECT_DOUBLE_EQ(miou(map_of(4, 4, pred), map_of(4, 4, mask), 2), 0.25);
}

TEST(Miou, RelabelingSymmetryAndRange) {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<int> p(36), m(36);
    for (auto& v : p) v = rng.uniform_int(0, 3);
    for (auto& v : m) v = rng.uniform_int(0, 3);
    const double base = miou(map_of(6, 6, p), map_of(6, 6, m), 4);
    EXPECT_GE(base, 0.0);
    EXPECT_LE(base, 1.0);
    EXPECT_LT(base, 1.0);
    const int perm[4] = {2, 0, 3, 1};
    for (auto& v : p) v = perm[v];
    for (auto& v : m) v = perm[v];
    EXPECT_NEAR(miou(map_of(6, 6, p), map_of(6, 6, m), 4), base, 1e-15);
  }
}

TEST(Miou, ConfusionMatrixAccumulates) {
  ConfusionMatrix cm(3);
  cm.add(map_of(1, 3, {0, 1, 2}), map_of(1, 3, {0, 1, 1}));
  cm.add(map_of(1, 3, {2, 2, 2}), map_of(1, 3, {2, 2, 0}));
  EXPECT_EQ(cm.count(1, 2), 1);
  EXPECT_EQ(cm.count(0, 2), 1);
  EXPECT_EQ(cm.count(2, 2), 2);
  const auto iou = cm.per_class_iou();
  EXPECT_DOUBLE_EQ(iou[0], 1.0 / 2.0);
  EXPECT_DOUBLE_EQ(iou[1], 1.0 / 2.0);
  EXPECT_DOUBLE_EQ(iou[2], 2.0 / 4.0);
  EXPECT_THROW(ConfusionMatrix(3).miou(), DataError);
}

TEST(ClassFractions, CountsPixelsInWindow) {
  const LabelMap m = map_of(2, 4, {0, 1, 1, 2, 0, 0, 1, 2});
  const auto f = class_fractions(m, 0, 2, 1, 3, 3);
  EXPECT_DOUBLE_EQ(f[0], 0.25);
  EXPECT_DOUBLE_EQ(f[1], 0.75);
  EXPECT_DOUBLE_EQ(f[2], 0.0);
}

TEST(Dataset, ExportImportRoundtrip) {
  const fs::path dir = scratch("roundtrip");
  std::vector<SceneSample> samples = {generate_scene(10, 16, 20, 4), generate_scene(11, 16, 20, 4)};
  export_dataset(dir, samples);
  const auto back = import_dataset(dir / "manifest.txt");
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back[i].seed, samples[i].seed);
    EXPECT_EQ(back[i].mask, samples[i].mask);
    ASSERT_EQ(back[i].image.shape(), samples[i].image.shape());
    for (std::size_t j = 0; j < samples[i].image.numel(); ++j) {
      EXPECT_NEAR(back[i].image.data()[j], samples[i].image.data()[j], 0.5 / 255 + 1e-12);
    }
  }
  fs::remove_all(dir);
}

TEST(Dataset, MissingManifestIsDataError) {
  EXPECT_THROW(import_dataset(scratch("missing") / "manifest.txt"), DataError);
}

TEST(ModelCost, MatchesAllocationAndMoEAccounting) {
  for (int n : {1, 4, 8}) {
    SegModelConfig cfg;
    cfg.moe.n_experts = n;
    cfg.moe.top_k = std::min(2, n);
    TinySegModel model(cfg, 1);
    std::int64_t allocated = 0;
    for (Parameter* p : model.parameters()) allocated += static_cast<std::int64_t>(p->value.numel());
    const ModelCost cost = model_cost(cfg, 64, 64);
    EXPECT_EQ(cost.params_total, allocated);
    const ParamCount moe = count_parameters(model.slot_moe_config("dec2"));
    EXPECT_EQ(cost.params_total - cost.params_active, moe.total - moe.active);
    const FlopCount fl = estimate_flops(model.slot_moe_config("dec2"), 64, 64);
    EXPECT_EQ(cost.flops_total - cost.flops_active, fl.total - fl.active);
  }
}

TEST(ModelCost, ConvFlopsMatchMacCounter) {
  SegModelConfig cfg;
  cfg.moe_slots.clear();
  TinySegModel model(cfg, 1);
  reset_conv_mac_count();
  model.forward(Tensor::zeros(Shape{1, 3, 32, 32}));
  // Stride-2 slots see one extra row and column of zero padding, which the
  // accounting does not charge; everything else must agree exactly.
  const ModelCost cost = model_cost(cfg, 32, 32);
  EXPECT_LE(cost.flops_total, static_cast<std::int64_t>(2 * conv_mac_count()));
  EXPECT_GE(cost.flops_total, static_cast<std::int64_t>(2 * conv_mac_count()) * 95 / 100);
}
