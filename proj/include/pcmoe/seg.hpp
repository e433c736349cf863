#pragma once

// Desk-scale segmentation substrate: procedural scenes, a small
// encoder-decoder with optional PatchConvMoE slots, pixel cross-entropy and
// mean IoU.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pcmoe/layers.hpp"
#include "pcmoe/moe.hpp"
#include "pcmoe/tensor.hpp"

namespace pcmoe {

struct LabelMap {
  int height = 0;
  int width = 0;
  std::vector<int> labels;  // row-major class ids

  int at(int r, int c) const { return labels[static_cast<std::size_t>(r) * width + c]; }
  bool operator==(const LabelMap&) const = default;
};

struct SceneSample {
  Tensor image;  // [1, 3, H, W], values in [0, 1]
  LabelMap mask;
  std::uint64_t seed = 0;
};

struct SceneOptions {
  int min_shapes_per_class = 1;
  int max_shapes_per_class = 2;
  bool rectangles_only = false;
  /// A foreground class counts as present with at least this many pixels.
  int min_class_pixels = 16;
  int max_attempts = 64;
};

/// Background (class 0) is grey with low-amplitude noise. Every foreground
/// class is painted as axis-aligned rectangles and circles in a
/// class-specific colour and texture; the layout is redrawn until every
/// class is visible or max_attempts is reached.
SceneSample generate_scene(std::uint64_t seed, int height, int width, int num_classes,
                           const SceneOptions& options = {});

// ---- network --------------------------------------------------------------

/// One convolution slot of the reference network.
struct SlotSpec {
  std::string name;
  int in_channels;
  int out_channels;
  int kernel;
  int stride;
  bool upsample_before;
  bool relu_after;
  int scale;  // image pixels per feature-map pixel at this slot's output
};

/// enc1 (3->16, s2), enc2 (16->32, s2), bridge (32->32), dec1 (up, 32->16),
/// dec2 (up, 16->16), cls (1x1, 16->classes). Every 3x3 conv is followed by
/// ReLU.
std::vector<SlotSpec> tiny_seg_layout(int num_classes);

struct SegModelConfig {
  int num_classes = 4;
  /// Slots hosting a PatchConvMoE layer; stride-2 slots are not allowed.
  std::vector<std::string> moe_slots = {"dec2"};
  /// Routing options. Channels and expert kernel are taken from the slot.
  MoEConfig moe;
};

struct LayerRouting {
  std::string slot;
  int scale = 1;
  MoEOutput moe;
};

struct SegForward {
  Tensor logits;                      // [B, classes, H, W]
  std::vector<LayerRouting> routing;  // one entry per MoE slot, in network order
};

class TinySegModel {
 public:
  TinySegModel(SegModelConfig config, std::uint64_t seed);
  TinySegModel(TinySegModel&&) noexcept;
  TinySegModel& operator=(TinySegModel&&) noexcept;
  ~TinySegModel();

  const SegModelConfig& config() const { return config_; }
  SegForward forward(const Tensor& images);

  std::vector<Parameter*> parameters();
  Parameter* find_parameter(const std::string& name);
  std::vector<PatchConvMoE*> moe_layers();
  /// The config a given MoE slot was built with.
  MoEConfig slot_moe_config(const std::string& slot) const;
  /// Adds amount to the gate logit bias of expert in every MoE layer.
  void bias_gate(int expert, double amount);

 private:
  struct Layer;
  SegModelConfig config_;
  std::vector<std::unique_ptr<Layer>> layers_;
};

/// The per-slot MoE config for a network with the given routing options.
MoEConfig slot_moe_config(const SegModelConfig& config, const SlotSpec& slot);

struct ModelCost {
  std::int64_t params_total = 0;
  std::int64_t params_active = 0;
  std::int64_t flops_total = 0;   // 2 per multiply-accumulate, convolutions only
  std::int64_t flops_active = 0;
};

/// Parameters and convolution FLOPs of the network for one image of the
/// given size. MoE slots use count_parameters and estimate_flops.
ModelCost model_cost(const SegModelConfig& config, int height, int width);

// ---- objective and metric -------------------------------------------------

/// Mean over all pixels of -log softmax(logits)[label]. Throws DataError on
/// labels outside [0, classes).
Tensor pixel_cross_entropy(const Tensor& logits, std::span<const LabelMap> labels);

/// Per-pixel argmax (ties to the lower class id).
std::vector<LabelMap> predict(const Tensor& logits);

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes);

  void add(const LabelMap& pred, const LabelMap& truth);
  std::int64_t count(int truth, int pred) const;
  /// IoU per class; classes absent from both prediction and truth get -1.
  std::vector<double> per_class_iou() const;
  /// Mean IoU over classes present in truth or prediction. Throws DataError
  /// when no class is present.
  double miou() const;

 private:
  int classes_;
  std::vector<std::int64_t> counts_;  // [truth][pred]
};

double miou(const LabelMap& pred, const LabelMap& truth, int num_classes);

/// Fraction of pixels of each class inside [row0,row1) x [col0,col1).
std::vector<double> class_fractions(const LabelMap& mask, int row0, int row1, int col0, int col1,
                                    int num_classes);

/// Stacks images into one [B, 3, H, W] tensor.
Tensor stack_images(std::span<const SceneSample> samples);

// ---- dataset files --------------------------------------------------------

/// Writes sample_NNNNN.ppm (P6) and sample_NNNNN_mask.pgm (P5, class id as
/// grey level) per sample and a manifest.txt with "seed image mask" lines.
void export_dataset(const std::filesystem::path& dir, std::span<const SceneSample> samples);
/// Reads a manifest written by export_dataset. Pixel values are the stored
/// 8-bit levels divided by 255.
std::vector<SceneSample> import_dataset(const std::filesystem::path& manifest);

}  // namespace pcmoe
