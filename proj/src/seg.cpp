#include "pcmoe/seg.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>

#include "pcmoe/errors.hpp"
#include "pcmoe/image_io.hpp"
#include "pcmoe/rng.hpp"

namespace pcmoe {

// ---- scenes ---------------------------------------------------------------

namespace {

constexpr std::array<std::array<double, 3>, 7> kPalette{{
    {0.85, 0.20, 0.20},
    {0.20, 0.75, 0.25},
    {0.20, 0.30, 0.90},
    {0.90, 0.80, 0.15},
    {0.80, 0.30, 0.80},
    {0.20, 0.80, 0.80},
    {0.95, 0.55, 0.10},
}};

std::array<double, 3> class_color(int cls) {
  if (cls - 1 < static_cast<int>(kPalette.size())) return kPalette[static_cast<std::size_t>(cls - 1)];
  Rng rng(0xC010u + static_cast<std::uint64_t>(cls));
  return {rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)};
}

// Class-specific texture in [-1, 1] at absolute pixel (r, c).
double texture(int cls, int r, int c) {
  switch ((cls - 1) % 5) {
    case 0: return (r / 2) % 2 ? 1.0 : -1.0;
    case 1: return (c / 2) % 2 ? 1.0 : -1.0;
    case 2: return ((r / 2) + (c / 2)) % 2 ? 1.0 : -1.0;
    case 3: return ((r + c) / 3) % 2 ? 1.0 : -1.0;
    default: return (r % 4 < 2 && c % 4 < 2) ? 1.0 : -1.0;
  }
}

struct ShapeDraw {
  int cls;
  bool circle;
  int r0, c0, r1, c1;  // rectangle bounds (half-open) or circle bounding box
  double cy, cx, radius;
  std::array<double, 3> color;

  bool covers(int r, int c) const {
    if (!circle) return r >= r0 && r < r1 && c >= c0 && c < c1;
    const double dy = r + 0.5 - cy;
    const double dx = c + 0.5 - cx;
    return dy * dy + dx * dx <= radius * radius;
  }
};

}  // namespace

SceneSample generate_scene(std::uint64_t seed, int height, int width, int num_classes,
                           const SceneOptions& options) {
  if (num_classes < 2) throw ConfigError("scenes need at least 2 classes");
  if (height < 16 || width < 16) throw ConfigError("scenes must be at least 16x16");
  if (options.min_shapes_per_class < 1 ||
      options.max_shapes_per_class < options.min_shapes_per_class) {
    throw ConfigError("invalid shapes-per-class range");
  }
  Rng rng(seed);
  const int short_side = std::min(height, width);
  std::vector<ShapeDraw> shapes;
  LabelMap mask{height, width, std::vector<int>(static_cast<std::size_t>(height) * width, 0)};

  for (int attempt = 0; attempt < std::max(1, options.max_attempts); ++attempt) {
    shapes.clear();
    for (int cls = 1; cls < num_classes; ++cls) {
      const int count = rng.uniform_int(options.min_shapes_per_class, options.max_shapes_per_class);
      const auto base = class_color(cls);
      for (int s = 0; s < count; ++s) {
        ShapeDraw d{};
        d.cls = cls;
        d.circle = !options.rectangles_only && rng.uniform() < 0.5;
        for (int ch = 0; ch < 3; ++ch) d.color[ch] = base[ch] + rng.uniform(-0.08, 0.08);
        if (d.circle) {
          d.radius = rng.uniform(short_side / 12.0, short_side / 6.0);
          d.cy = rng.uniform(d.radius, height - d.radius);
          d.cx = rng.uniform(d.radius, width - d.radius);
        } else {
          const int h = rng.uniform_int(std::max(2, height / 8), std::max(2, height / 3));
          const int w = rng.uniform_int(std::max(2, width / 8), std::max(2, width / 3));
          d.r0 = rng.uniform_int(0, height - h);
          d.c0 = rng.uniform_int(0, width - w);
          d.r1 = d.r0 + h;
          d.c1 = d.c0 + w;
        }
        shapes.push_back(d);
      }
    }
    // Paint in a shuffled order so occlusion between classes varies.
    for (std::size_t i = shapes.size(); i > 1; --i) {
      std::swap(shapes[i - 1], shapes[rng.uniform_int(static_cast<std::uint64_t>(i))]);
    }
    std::fill(mask.labels.begin(), mask.labels.end(), 0);
    for (const auto& d : shapes) {
      for (int r = 0; r < height; ++r)
        for (int c = 0; c < width; ++c)
          if (d.covers(r, c)) mask.labels[static_cast<std::size_t>(r) * width + c] = d.cls;
    }
    std::vector<int> counts(static_cast<std::size_t>(num_classes), 0);
    for (int v : mask.labels) ++counts[v];
    bool all_present = true;
    for (int cls = 1; cls < num_classes; ++cls) {
      if (counts[cls] < options.min_class_pixels) all_present = false;
    }
    if (all_present) break;
  }

  // Colour of the topmost shape at each pixel.
  std::vector<const ShapeDraw*> owner(static_cast<std::size_t>(height) * width, nullptr);
  for (const auto& d : shapes) {
    for (int r = 0; r < height; ++r)
      for (int c = 0; c < width; ++c)
        if (d.covers(r, c)) owner[static_cast<std::size_t>(r) * width + c] = &d;
  }
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  std::vector<double> pixels(3 * plane);
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      const std::size_t p = static_cast<std::size_t>(r) * width + c;
      const ShapeDraw* d = owner[p];
      for (int ch = 0; ch < 3; ++ch) {
        double v;
        if (d == nullptr) {
          v = 0.45 + 0.03 * rng.normal();
        } else {
          v = d->color[ch] + 0.10 * texture(d->cls, r, c) + 0.03 * rng.normal();
        }
        pixels[ch * plane + p] = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  SceneSample sample;
  sample.image = Tensor::from_data(Shape{1, 3, height, width}, std::move(pixels));
  sample.mask = std::move(mask);
  sample.seed = seed;
  return sample;
}

// ---- network --------------------------------------------------------------

std::vector<SlotSpec> tiny_seg_layout(int num_classes) {
  return {
      {"enc1", 3, 16, 3, 2, false, true, 2},
      {"enc2", 16, 32, 3, 2, false, true, 4},
      {"bridge", 32, 32, 3, 1, false, true, 4},
      {"dec1", 32, 16, 3, 1, true, true, 2},
      {"dec2", 16, 16, 3, 1, true, true, 1},
      {"cls", 16, num_classes, 1, 1, false, false, 1},
  };
}

MoEConfig slot_moe_config(const SegModelConfig& config, const SlotSpec& slot) {
  MoEConfig m = config.moe;
  m.in_channels = slot.in_channels;
  m.out_channels = slot.out_channels;
  m.expert_kernel = slot.kernel == 3 ? ExpertKernel::k3x3 : ExpertKernel::k1x1;
  return m;
}

ModelCost model_cost(const SegModelConfig& config, int height, int width) {
  ModelCost cost;
  for (const auto& spec : tiny_seg_layout(config.num_classes)) {
    const int h = height / spec.scale;
    const int w = width / spec.scale;
    if (std::find(config.moe_slots.begin(), config.moe_slots.end(), spec.name) != config.moe_slots.end()) {
      const MoEConfig m = slot_moe_config(config, spec);
      const ParamCount p = count_parameters(m);
      const FlopCount f = estimate_flops(m, h, w);
      cost.params_total += p.total;
      cost.params_active += p.active;
      cost.flops_total += f.total;
      cost.flops_active += f.active;
    } else {
      const std::int64_t macs_per_px =
          static_cast<std::int64_t>(spec.out_channels) * spec.in_channels * spec.kernel * spec.kernel;
      const std::int64_t params = macs_per_px + spec.out_channels;
      const std::int64_t flops = 2 * macs_per_px * h * w;
      cost.params_total += params;
      cost.params_active += params;
      cost.flops_total += flops;
      cost.flops_active += flops;
    }
  }
  return cost;
}

struct TinySegModel::Layer {
  SlotSpec spec;
  ConvLayer conv;
  std::unique_ptr<PatchConvMoE> moe;
};

TinySegModel::TinySegModel(SegModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  if (config_.num_classes < 2) throw ConfigError("segmentation needs at least 2 classes");
  const auto layout = tiny_seg_layout(config_.num_classes);
  for (const auto& slot : config_.moe_slots) {
    auto it = std::find_if(layout.begin(), layout.end(), [&](const SlotSpec& s) { return s.name == slot; });
    if (it == layout.end()) throw ConfigError("unknown MoE slot '" + slot + "'");
    if (it->stride != 1) throw ConfigError("slot '" + slot + "' is strided and cannot host a MoE layer");
  }
  for (const auto& spec : layout) {
    auto layer = std::make_unique<Layer>();
    layer->spec = spec;
    const bool is_moe = std::find(config_.moe_slots.begin(), config_.moe_slots.end(), spec.name) !=
                        config_.moe_slots.end();
    if (is_moe) {
      layer->moe = std::make_unique<PatchConvMoE>(pcmoe::slot_moe_config(config_, spec), spec.name, seed);
    } else {
      // Stride-2 slots pad bottom/right by one (see forward), others keep size.
      const int pad = spec.stride == 1 ? spec.kernel / 2 : 0;
      layer->conv = ConvLayer::create(spec.name, spec.in_channels, spec.out_channels, spec.kernel,
                                      spec.stride, pad);
      layer->conv.init(seed);
    }
    layers_.push_back(std::move(layer));
  }
}

TinySegModel::TinySegModel(TinySegModel&&) noexcept = default;
TinySegModel& TinySegModel::operator=(TinySegModel&&) noexcept = default;
TinySegModel::~TinySegModel() = default;

SegForward TinySegModel::forward(const Tensor& images) {
  const Shape s = images.shape();
  if (s.c != 3) throw ConfigError("images must have 3 channels");
  if (s.h % 4 != 0 || s.w % 4 != 0) {
    throw ConfigError("image size " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                      " is not divisible by 4");
  }
  SegForward out;
  Tensor x = images;
  for (auto& layer : layers_) {
    const SlotSpec& spec = layer->spec;
    if (spec.upsample_before) x = upsample_nearest(x, 2);
    if (layer->moe) {
      MoEOutput m = layer->moe->forward(x);
      x = m.output;
      out.routing.push_back({spec.name, spec.scale, std::move(m)});
    } else {
      if (spec.stride == 2) {
        const Shape xs = x.shape();
        x = crop(x, 0, xs.n, 0, 0, xs.h + 1, xs.w + 1);
      }
      x = layer->conv.forward(x);
    }
    if (spec.relu_after) x = relu(x);
  }
  out.logits = x;
  return out;
}

std::vector<Parameter*> TinySegModel::parameters() {
  std::vector<Parameter*> out;
  for (auto& layer : layers_) {
    if (layer->moe) {
      auto p = layer->moe->parameters();
      out.insert(out.end(), p.begin(), p.end());
    } else {
      layer->conv.append_parameters(out);
    }
  }
  return out;
}

Parameter* TinySegModel::find_parameter(const std::string& name) {
  for (Parameter* p : parameters()) {
    if (p->name == name) return p;
  }
  return nullptr;
}

std::vector<PatchConvMoE*> TinySegModel::moe_layers() {
  std::vector<PatchConvMoE*> out;
  for (auto& layer : layers_) {
    if (layer->moe) out.push_back(layer->moe.get());
  }
  return out;
}

MoEConfig TinySegModel::slot_moe_config(const std::string& slot) const {
  for (const auto& layer : layers_) {
    if (layer->spec.name == slot) return pcmoe::slot_moe_config(config_, layer->spec);
  }
  throw ConfigError("unknown slot '" + slot + "'");
}

void TinySegModel::bias_gate(int expert, double amount) {
  for (PatchConvMoE* moe : moe_layers()) {
    if (expert < 0 || expert >= moe->config().n_experts) throw ConfigError("gate bias expert out of range");
    moe->gate().layers().back().bias.value.mutable_data()[static_cast<std::size_t>(expert)] += amount;
  }
}

// ---- objective and metric -------------------------------------------------

Tensor pixel_cross_entropy(const Tensor& logits, std::span<const LabelMap> labels) {
  const Shape s = logits.shape();
  if (static_cast<int>(labels.size()) != s.n) throw ConfigError("label count does not match batch");
  for (const auto& m : labels) {
    if (m.height != s.h || m.width != s.w) throw ConfigError("label map size does not match logits");
    for (int v : m.labels) {
      if (v < 0 || v >= s.c) throw DataError("label " + std::to_string(v) + " outside [0, " +
                                             std::to_string(s.c) + ")");
    }
  }
  const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
  const double inv = 1.0 / static_cast<double>(s.n * plane);
  const auto x = logits.data();
  // Softmax probabilities are kept for the backward pass.
  auto probs = std::make_shared<std::vector<double>>(x.size());
  double total = 0.0;
  for (int n = 0; n < s.n; ++n) {
    const std::size_t base = static_cast<std::size_t>(n) * s.c * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      double m = x[base + p];
      for (int c = 1; c < s.c; ++c) m = std::max(m, x[base + c * plane + p]);
      double z = 0.0;
      for (int c = 0; c < s.c; ++c) {
        const double e = std::exp(x[base + c * plane + p] - m);
        (*probs)[base + c * plane + p] = e;
        z += e;
      }
      for (int c = 0; c < s.c; ++c) (*probs)[base + c * plane + p] /= z;
      const int y = labels[static_cast<std::size_t>(n)].labels[p];
      total += -(x[base + y * plane + p] - m - std::log(z));
    }
  }
  std::vector<int> flat;
  flat.reserve(static_cast<std::size_t>(s.n) * plane);
  for (const auto& m : labels) flat.insert(flat.end(), m.labels.begin(), m.labels.end());
  auto ln = logits.node();
  return make_result(
      Shape{}, {total * inv}, {logits},
      [ln, probs, flat = std::move(flat), s, plane, inv](const detail::Node& self) {
        auto& g = ln->grad_buffer();
        const double scale = self.grad[0] * inv;
        for (int n = 0; n < s.n; ++n) {
          const std::size_t base = static_cast<std::size_t>(n) * s.c * plane;
          for (std::size_t p = 0; p < plane; ++p) {
            const int y = flat[static_cast<std::size_t>(n) * plane + p];
            for (int c = 0; c < s.c; ++c) {
              const std::size_t i = base + c * plane + p;
              g[i] += scale * ((*probs)[i] - (c == y ? 1.0 : 0.0));
            }
          }
        }
      },
      "pixel_cross_entropy");
}

std::vector<LabelMap> predict(const Tensor& logits) {
  const Shape s = logits.shape();
  const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
  const auto x = logits.data();
  std::vector<LabelMap> out;
  for (int n = 0; n < s.n; ++n) {
    LabelMap m{s.h, s.w, std::vector<int>(plane, 0)};
    const std::size_t base = static_cast<std::size_t>(n) * s.c * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      int best = 0;
      for (int c = 1; c < s.c; ++c) {
        if (x[base + c * plane + p] > x[base + best * plane + p]) best = c;
      }
      m.labels[p] = best;
    }
    out.push_back(std::move(m));
  }
  return out;
}

ConfusionMatrix::ConfusionMatrix(int num_classes)
    : classes_(num_classes), counts_(static_cast<std::size_t>(num_classes) * num_classes, 0) {
  if (num_classes < 1) throw ConfigError("confusion matrix needs at least one class");
}

void ConfusionMatrix::add(const LabelMap& pred, const LabelMap& truth) {
  if (pred.height != truth.height || pred.width != truth.width ||
      pred.labels.size() != truth.labels.size()) {
    throw ConfigError("prediction and mask shapes differ");
  }
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const int t = truth.labels[i];
    const int p = pred.labels[i];
    if (t < 0 || t >= classes_ || p < 0 || p >= classes_) {
      throw DataError("class id outside [0, " + std::to_string(classes_) + ")");
    }
    ++counts_[static_cast<std::size_t>(t) * classes_ + p];
  }
}

std::int64_t ConfusionMatrix::count(int truth, int pred) const {
  return counts_[static_cast<std::size_t>(truth) * classes_ + pred];
}

std::vector<double> ConfusionMatrix::per_class_iou() const {
  std::vector<double> iou(static_cast<std::size_t>(classes_), -1.0);
  for (int c = 0; c < classes_; ++c) {
    std::int64_t row = 0, col = 0;
    for (int o = 0; o < classes_; ++o) {
      row += count(c, o);
      col += count(o, c);
    }
    const std::int64_t inter = count(c, c);
    const std::int64_t uni = row + col - inter;
    if (uni > 0) iou[c] = static_cast<double>(inter) / static_cast<double>(uni);
  }
  return iou;
}

double ConfusionMatrix::miou() const {
  double acc = 0.0;
  int present = 0;
  for (double v : per_class_iou()) {
    if (v < 0.0) continue;
    acc += v;
    ++present;
  }
  if (present == 0) throw DataError("mIoU undefined: no class present in prediction or mask");
  return acc / present;
}

double miou(const LabelMap& pred, const LabelMap& truth, int num_classes) {
  ConfusionMatrix cm(num_classes);
  cm.add(pred, truth);
  return cm.miou();
}

std::vector<double> class_fractions(const LabelMap& mask, int row0, int row1, int col0, int col1,
                                    int num_classes) {
  row0 = std::max(row0, 0);
  col0 = std::max(col0, 0);
  row1 = std::min(row1, mask.height);
  col1 = std::min(col1, mask.width);
  std::vector<double> f(static_cast<std::size_t>(num_classes), 0.0);
  const int area = (row1 - row0) * (col1 - col0);
  if (area <= 0) return f;
  for (int r = row0; r < row1; ++r)
    for (int c = col0; c < col1; ++c) {
      const int v = mask.at(r, c);
      if (v < 0 || v >= num_classes) throw DataError("mask class out of range");
      f[v] += 1.0;
    }
  for (double& v : f) v /= area;
  return f;
}

Tensor stack_images(std::span<const SceneSample> samples) {
  std::vector<Tensor> parts;
  parts.reserve(samples.size());
  for (const auto& s : samples) parts.push_back(s.image);
  NoGradGuard guard;
  return concat_batch(parts).detach();
}

// ---- dataset files --------------------------------------------------------

void export_dataset(const std::filesystem::path& dir, std::span<const SceneSample> samples) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.txt", std::ios::trunc);
  if (!manifest) throw DataError("cannot write manifest in " + dir.string());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const SceneSample& s = samples[i];
    const Shape shape = s.image.shape();
    char stem[32];
    std::snprintf(stem, sizeof(stem), "sample_%05zu", i);
    RgbImage rgb{shape.w, shape.h, {}};
    rgb.pixels.resize(static_cast<std::size_t>(shape.w) * shape.h * 3);
    const std::size_t plane = static_cast<std::size_t>(shape.w) * shape.h;
    const auto v = s.image.data();
    for (std::size_t p = 0; p < plane; ++p)
      for (int ch = 0; ch < 3; ++ch)
        rgb.pixels[p * 3 + ch] =
            static_cast<std::uint8_t>(std::lround(std::clamp(v[ch * plane + p], 0.0, 1.0) * 255.0));
    GrayImage gray{shape.w, shape.h, {}};
    for (int label : s.mask.labels) {
      if (label < 0 || label > 255) throw DataError("class id does not fit a PGM grey level");
      gray.pixels.push_back(static_cast<std::uint8_t>(label));
    }
    const std::string image_name = std::string(stem) + ".ppm";
    const std::string mask_name = std::string(stem) + "_mask.pgm";
    write_ppm(dir / image_name, rgb);
    write_pgm(dir / mask_name, gray);
    manifest << s.seed << ' ' << image_name << ' ' << mask_name << '\n';
  }
}

std::vector<SceneSample> import_dataset(const std::filesystem::path& manifest) {
  std::ifstream is(manifest);
  if (!is) throw DataError("cannot open manifest: " + manifest.string());
  const auto dir = manifest.parent_path();
  std::vector<SceneSample> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    SceneSample s;
    std::string image_name, mask_name;
    if (!(ls >> s.seed >> image_name >> mask_name)) throw DataError("malformed manifest line: " + line);
    const RgbImage rgb = read_ppm(dir / image_name);
    const GrayImage gray = read_pgm(dir / mask_name);
    if (rgb.width != gray.width || rgb.height != gray.height) {
      throw DataError("image and mask sizes differ for " + image_name);
    }
    const std::size_t plane = static_cast<std::size_t>(rgb.width) * rgb.height;
    std::vector<double> pixels(3 * plane);
    for (std::size_t p = 0; p < plane; ++p)
      for (int ch = 0; ch < 3; ++ch) pixels[ch * plane + p] = rgb.pixels[p * 3 + ch] / 255.0;
    s.image = Tensor::from_data(Shape{1, 3, rgb.height, rgb.width}, std::move(pixels));
    s.mask = LabelMap{gray.height, gray.width, std::vector<int>(gray.pixels.begin(), gray.pixels.end())};
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace pcmoe
