#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "pcmoe/errors.hpp"
#include "pcmoe/trainer.hpp"

using namespace pcmoe;
namespace fs = std::filesystem;

namespace {

// Small enough to train in well under a second.
TrainConfig tiny() {
  TrainConfig c;
  c.epochs = 2;
  c.batch_size = 4;
  c.n_train = 8;
  c.n_val = 4;
  c.image_size = 32;
  c.seed = 3;
  c.trace_every = 1;
  c.model.moe.n_experts = 4;
  c.model.moe.top_k = 2;
  c.model.moe.balancing = BalancingLoss::Switch;
  return c;
}

std::vector<double> values_of(TinySegModel& m) {
  std::vector<double> out;
  for (Parameter* p : m.parameters()) out.insert(out.end(), p->value.data().begin(), p->value.data().end());
  return out;
}

}  // namespace

TEST(Trainer, ZeroEpochsLeavesInitialisation) {
  TrainConfig c = tiny();
  c.epochs = 0;
  TrainResult r = train(c);
  TinySegModel init = initial_model(c);
  EXPECT_EQ(r.steps, 0);
  EXPECT_TRUE(r.history.empty());
  EXPECT_EQ(parameter_checksum(r.model), parameter_checksum(init));
}

TEST(Trainer, GateBiasShiftsInitialRoutingTowardExpertZero) {
  TrainConfig c = tiny();
  c.gate_bias = 5.0;
  TinySegModel m = initial_model(c);
  const Dataset d = make_dataset(c);
  const EvalResult ev = evaluate(m, d.val);
  EXPECT_EQ(ev.routing.front().expert_counts()[0], ev.routing.front().n_decisions());
}

TEST(Trainer, DeterministicAcrossRuns) {
  const TrainConfig c = tiny();
  TrainResult a = train(c);
  TrainResult b = train(c);
  EXPECT_EQ(history_csv(a.history), history_csv(b.history));
  EXPECT_EQ(parameter_checksum(a.model), parameter_checksum(b.model));
  ASSERT_EQ(a.train_traces.size(), 1u);
  EXPECT_EQ(a.train_traces[0].records, b.train_traces[0].records);
  EXPECT_EQ(a.steps, 4);
  EXPECT_EQ(a.history.size(), 2u);
  TrainConfig other = c;
  other.seed = 4;
  TrainResult d = train(other);
  EXPECT_NE(parameter_checksum(a.model), parameter_checksum(d.model));
}

TEST(Trainer, HistoryAgreesWithEvaluateAndEvaluateIsPure) {
  const TrainConfig c = tiny();
  const Dataset d = make_dataset(c);
  TrainResult r = train(c, d);
  const std::uint64_t before = parameter_checksum(r.model);
  const EvalResult ev = evaluate(r.model, d.val, c.batch_size, r.steps);
  EXPECT_EQ(parameter_checksum(r.model), before);
  const EpochRecord& last = r.history.back();
  EXPECT_EQ(ev.miou, last.val_miou);
  const auto counts = as_doubles(ev.routing.front().expert_counts());
  EXPECT_EQ(nre(counts), last.nre);
  EXPECT_EQ(tec(counts), last.tec);
  for (const auto& rec : r.history) {
    EXPECT_TRUE(std::isfinite(rec.train_loss));
    EXPECT_GE(rec.val_miou, 0.0);
    EXPECT_LE(rec.val_miou, 1.0);
    EXPECT_GT(rec.balance_loss, 0.0);
  }
}

TEST(Trainer, EvaluationTraceCoversEveryPatch) {
  TrainConfig c = tiny();
  c.n_val = 64;
  c.model.moe.grid = 3;
  TinySegModel m = initial_model(c);
  const Dataset d = make_dataset(c);
  const EvalResult ev = evaluate(m, d.val, 8, 17);
  ASSERT_EQ(ev.traces.size(), 1u);
  const auto& recs = ev.traces[0].records;
  ASSERT_EQ(recs.size(), 64u * 9);
  std::vector<int> seen(64 * 9, 0);
  for (const auto& rec : recs) {
    EXPECT_EQ(rec.step, 17);
    EXPECT_EQ(rec.expert_ids.size(), 2u);
    ++seen[static_cast<std::size_t>(rec.batch_index) * 9 + rec.patch_index];
    double s = 0;
    for (double f : rec.class_fractions) s += f;
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  for (int v : seen) EXPECT_EQ(v, 1);
  EXPECT_EQ(ev.routing.front().n_decisions(), 64 * 9);
}

TEST(Trainer, BaselineHasNoRouting) {
  TrainConfig c = tiny();
  c.model.moe_slots.clear();
  TrainResult r = train(c);
  EXPECT_TRUE(r.train_traces.empty());
  EXPECT_TRUE(std::isnan(r.history.back().nre));
  EXPECT_TRUE(std::isnan(r.history.back().tec));
  EXPECT_EQ(r.history.back().balance_loss, 0.0);
  const Dataset d = make_dataset(c);
  EXPECT_TRUE(evaluate(r.model, d.val).traces.empty());
}

TEST(Trainer, DivergenceNamesTheStep) {
  TrainConfig c = tiny();
  c.lr = 1e200;
  c.momentum = 0.0;
  try {
    train(c);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("at step "), std::string::npos) << e.what();
  }
}

TEST(Trainer, InvalidConfigsAreRejected) {
  auto bad = [](auto mutate) {
    TrainConfig c = tiny();
    mutate(c);
    EXPECT_THROW(train(c), ConfigError);
  };
  bad([](TrainConfig& c) { c.batch_size = 0; });
  bad([](TrainConfig& c) { c.lr = 0; });
  bad([](TrainConfig& c) { c.momentum = 1.0; });
  bad([](TrainConfig& c) { c.n_train = 2; });
  bad([](TrainConfig& c) { c.image_size = 30; });
  bad([](TrainConfig& c) { c.model.moe.top_k = 5; });
  bad([](TrainConfig& c) { c.model.moe_slots = {"enc2"}; });
}

TEST(Trainer, DatasetSeedsFollowTheSplitScheme) {
  TrainConfig c = tiny();
  c.data_seed = 2;
  const Dataset d = make_dataset(c);
  EXPECT_EQ(d.train[1].seed, 5'000'001u);
  EXPECT_EQ(d.val[3].seed, 6'000'003u);
}

TEST(Trainer, HistoryCsvFormat) {
  std::vector<EpochRecord> h = {{1, 0.5, 0.25, 0.0, std::nan(""), std::nan("")}, {2, 0.125, 0.75, 1.5, 0.5, 0.25}};
  EXPECT_EQ(history_csv(h),
            "epoch,train_loss,val_miou,balance_loss,nre,tec\n1,0.5,0.25,0,nan,nan\n2,0.125,0.75,1.5,0.5,0.25\n");
}

TEST(Trainer, SaveLoadRoundtrip) {
  const fs::path dir = fs::temp_directory_path() / "pcmoe_test_trainer_ckpt";
  fs::create_directories(dir);
  TrainConfig c = tiny();
  c.epochs = 1;
  TrainResult r = train(c);
  save_model(dir / "m.bin", r.model, c);
  LoadedModel back = load_model(dir / "m.bin");
  EXPECT_EQ(values_of(back.model), values_of(r.model));
  EXPECT_EQ(back.config.model.moe.n_experts, 4);
  const Dataset d = make_dataset(c);
  EXPECT_EQ(evaluate(back.model, d.val).miou, evaluate(r.model, d.val).miou);
  fs::remove_all(dir);
}
