#include "pcmoe/trainer.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "pcmoe/balancing.hpp"
#include "pcmoe/checkpoint.hpp"
#include "pcmoe/config_json.hpp"
#include "pcmoe/errors.hpp"
#include "pcmoe/rng.hpp"

namespace pcmoe {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::vector<LabelMap> masks_of(std::span<const SceneSample> samples) {
  std::vector<LabelMap> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.mask);
  return out;
}

// One trace record per decision of a routed layer. first_sample offsets
// batch_index; masks provide the class composition of each patch.
void append_records(const LayerRouting& layer, std::span<const LabelMap> masks, int num_classes,
                    std::int64_t step, int first_sample, std::vector<TraceRecord>& out) {
  for (const auto& d : layer.moe.decisions) {
    const PatchRect& r = layer.moe.grid.rect(d.patch_index);
    TraceRecord rec;
    rec.step = step;
    rec.batch_index = first_sample + d.batch_index;
    rec.patch_index = d.patch_index;
    rec.expert_ids = d.expert_ids;
    rec.weights = d.weights;
    rec.full_probs = d.full_probs;
    rec.class_fractions = class_fractions(masks[static_cast<std::size_t>(d.batch_index)],
                                          r.row0 * layer.scale, r.row1 * layer.scale,
                                          r.col0 * layer.scale, r.col1 * layer.scale, num_classes);
    out.push_back(std::move(rec));
  }
}

// Training allocates and frees the same multi-megabyte buffers every step.
// Keeping them on the heap instead of fresh mmap pages avoids a page fault
// storm that otherwise costs about a third of the step time.
void keep_large_buffers_resident() {
#if defined(__GLIBC__)
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
    return true;
  }();
  (void)done;
#endif
}

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  if (batch_size < 1) throw ConfigError("batch size must be at least 1");
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0, 1)");
  if (n_train < batch_size && epochs > 0) throw ConfigError("need at least one full training batch");
  if (n_val < 1) throw ConfigError("need at least one validation sample");
  if (image_size < 16 || image_size % 4 != 0) {
    throw ConfigError("image size must be a multiple of 4 and at least 16");
  }
  if (trace_every < 0) throw ConfigError("trace_every must be non-negative");
  if (!model.moe_slots.empty()) model.moe.validate();
}

Dataset make_dataset(const TrainConfig& config) {
  Dataset d;
  const std::uint64_t train_base = 1'000'000ULL * (2 * config.data_seed + 1);
  const std::uint64_t val_base = 1'000'000ULL * (2 * config.data_seed + 2);
  const int C = config.model.num_classes;
  const int S = config.image_size;
  for (int i = 0; i < config.n_train; ++i) d.train.push_back(generate_scene(train_base + i, S, S, C));
  for (int j = 0; j < config.n_val; ++j) d.val.push_back(generate_scene(val_base + j, S, S, C));
  return d;
}

TinySegModel initial_model(const TrainConfig& config) {
  TinySegModel model(config.model, config.seed);
  if (config.gate_bias != 0.0) model.bias_gate(0, config.gate_bias);
  return model;
}

TrainResult train(const TrainConfig& config) { return train(config, make_dataset(config)); }

TrainResult train(const TrainConfig& config, const Dataset& data) {
  config.validate();
  keep_large_buffers_resident();
  TrainResult result{initial_model(config), {}, {}, 0};
  TinySegModel& model = result.model;
  const auto params = model.parameters();
  for (const auto& slot : config.model.moe_slots) result.train_traces.push_back({slot, {}});

  const int steps_per_epoch = static_cast<int>(data.train.size()) / config.batch_size;
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle(splitmix64(config.seed ^ 0x5348554646ULL));
  const BalancingLoss kind = config.model.moe.balancing;
  const double lambda = config.model.moe.loss_weight;

  std::int64_t step = 0;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[shuffle.uniform_int(static_cast<std::uint64_t>(i))]);
    }
    double task_sum = 0.0;
    double balance_sum = 0.0;
    for (int s = 0; s < steps_per_epoch; ++s, ++step) {
      std::vector<SceneSample> batch;
      for (int b = 0; b < config.batch_size; ++b) {
        batch.push_back(data.train[order[static_cast<std::size_t>(s * config.batch_size + b)]]);
      }
      const auto masks = masks_of(batch);
      try {
        for (Parameter* p : params) p->value.zero_grad();
        SegForward fwd = model.forward(stack_images(batch));
        Tensor task = pixel_cross_entropy(fwd.logits, masks);
        Tensor balance = Tensor::scalar(0.0);
        if (kind != BalancingLoss::None) {
          std::vector<Tensor> terms;
          for (const auto& layer : fwd.routing) terms.push_back(balancing_loss(kind, gate_batch(layer.moe)));
          if (!terms.empty()) balance = add_n(terms);
        }
        Tensor loss = total_loss(task, balance, lambda);
        if (!std::isfinite(loss.item())) throw NumericError("non-finite loss");
        backward(loss);
        sgd_step(params, config.lr, config.momentum);
        task_sum += task.item();
        balance_sum += balance.item();
        if (config.trace_every > 0 && step % config.trace_every == 0) {
          for (std::size_t l = 0; l < fwd.routing.size(); ++l) {
            append_records(fwd.routing[l], masks, config.model.num_classes, step, 0,
                           result.train_traces[l].records);
          }
        }
      } catch (const NumericError& e) {
        throw NumericError("training diverged at step " + std::to_string(step) + " (epoch " +
                           std::to_string(epoch) + "): " + e.what());
      }
    }
    EvalResult ev = evaluate(model, data.val, config.batch_size, step);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = steps_per_epoch > 0 ? task_sum / steps_per_epoch : 0.0;
    rec.balance_loss = steps_per_epoch > 0 ? balance_sum / steps_per_epoch : 0.0;
    rec.val_miou = ev.miou;
    rec.nre = kNaN;
    rec.tec = kNaN;
    if (!ev.routing.empty()) {
      const auto counts = as_doubles(ev.routing.front().expert_counts());
      if (counts.size() >= 2) rec.nre = nre(counts);
      rec.tec = tec(counts);
    }
    result.history.push_back(rec);
  }
  result.steps = step;
  return result;
}

EvalResult evaluate(TinySegModel& model, std::span<const SceneSample> samples, int batch_size,
                    std::int64_t step) {
  if (samples.empty()) throw UsageError("evaluate needs at least one sample");
  if (batch_size < 1) throw ConfigError("batch size must be at least 1");
  NoGradGuard no_grad;
  const int C = model.config().num_classes;
  ConfusionMatrix cm(C);
  EvalResult out;
  for (const auto& slot : model.config().moe_slots) out.traces.push_back({slot, {}});
  for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t n = std::min(samples.size() - start, static_cast<std::size_t>(batch_size));
    const auto batch = samples.subspan(start, n);
    const auto masks = masks_of(batch);
    SegForward fwd = model.forward(stack_images(batch));
    const auto preds = predict(fwd.logits);
    for (std::size_t i = 0; i < n; ++i) cm.add(preds[i], masks[i]);
    for (std::size_t l = 0; l < fwd.routing.size(); ++l) {
      append_records(fwd.routing[l], masks, C, step, static_cast<int>(start), out.traces[l].records);
    }
  }
  out.miou = cm.miou();
  for (const auto& t : out.traces) out.routing.push_back(build_trace(t.records, C));
  return out;
}

std::string history_csv(std::span<const EpochRecord> history) {
  std::string s = "epoch,train_loss,val_miou,balance_loss,nre,tec\n";
  for (const auto& r : history) {
    s += std::to_string(r.epoch) + ',' + fmt(r.train_loss) + ',' + fmt(r.val_miou) + ',' +
         fmt(r.balance_loss) + ',' + fmt(r.nre) + ',' + fmt(r.tec) + '\n';
  }
  return s;
}

void write_history_csv(const std::filesystem::path& path, std::span<const EpochRecord> history) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  os << history_csv(history);
}

std::uint64_t parameter_checksum(TinySegModel& model) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (const Parameter* p : model.parameters()) {
    for (double v : p->value.data()) {
      auto bits = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) {
        h ^= (bits >> (8 * i)) & 0xFF;
        h *= 0x100000001B3ULL;
      }
    }
  }
  return h;
}

void save_model(const std::filesystem::path& path, TinySegModel& model, const TrainConfig& config) {
  const auto params = model.parameters();
  save_checkpoint(path, snapshot(params, dump_train_config(config)));
}

LoadedModel load_model(const std::filesystem::path& path) {
  const Checkpoint ckpt = load_checkpoint(path);
  TrainConfig config = parse_train_config(ckpt.metadata);
  TinySegModel model(config.model, config.seed);
  const auto params = model.parameters();
  restore(ckpt, params);
  return {config, std::move(model)};
}

}  // namespace pcmoe
