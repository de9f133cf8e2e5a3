#include "lcat/config.hpp"

#include <gtest/gtest.h>

using namespace lcat;
using nlohmann::json;

TEST(Config, PresetNamesAndErrors) {
  for (const auto& name : RunConfig::preset_names())
    EXPECT_NO_THROW((void)RunConfig::preset(name, "desk"));
  try {
    (void)RunConfig::preset("lcattt", "desk");
    FAIL() << "expected preset error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Err::Config);
    // Error message lists the valid names.
    EXPECT_NE(std::string(e.what()).find("lcat_trades"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("scat"), std::string::npos);
  }
  EXPECT_THROW((void)RunConfig::defaults("gpu"), Error);
}

TEST(Config, PresetScheduleShapes) {
  const auto lcat = RunConfig::preset("lcat", "desk");
  EXPECT_EQ(lcat.schedule.mode, TrainMode::LCAT);
  EXPECT_EQ(lcat.schedule.clean_epochs, 5);
  EXPECT_EQ(lcat.schedule.adv_epochs, 5);
  EXPECT_EQ(lcat.schedule.attack_scope, AttackScope::QueryOnly);

  const auto scat = RunConfig::preset("scat", "desk");
  EXPECT_EQ(scat.schedule.clean_epochs, 9);
  EXPECT_EQ(scat.schedule.adv_epochs, 1);

  const auto at = RunConfig::preset("at", "desk");
  EXPECT_EQ(at.schedule.mode, TrainMode::AT);
  EXPECT_EQ(at.schedule.attack_scope, AttackScope::SupportAndQuery);

  const auto trades = RunConfig::preset("lcat_trades", "desk");
  EXPECT_EQ(trades.schedule.trades, TradesMode::AdvPhaseOnly);
  EXPECT_EQ(trades.attack_train.objective, AttackObjective::KlToClean);
  EXPECT_DOUBLE_EQ(trades.schedule.trades_beta, 6.0);

  const auto nat = RunConfig::preset("nat", "desk");
  EXPECT_EQ(nat.schedule.mode, TrainMode::NAT);
}

TEST(Config, ProfileHyperparameters) {
  const auto paper = RunConfig::defaults("paper");
  EXPECT_DOUBLE_EQ(paper.lr, 0.1);
  EXPECT_EQ(paper.schedule.meta_batches_per_epoch, 100);
  EXPECT_NEAR(paper.attack_train.epsilon, 8.0 / 255.0, 1e-12);
  EXPECT_NEAR(paper.attack_train.step_size, 2.0 / 255.0, 1e-12);
  EXPECT_EQ(paper.attack_train.steps, 7);
  EXPECT_EQ(paper.attack_eval.steps, 20);
  EXPECT_EQ(paper.schedule.total_epochs, 50);
  EXPECT_EQ(paper.schedule.batch_size, 8);

  const auto desk = RunConfig::defaults("desk");
  EXPECT_LT(desk.lr, paper.lr);
  EXPECT_EQ(desk.schedule.meta_batches_per_epoch, 20);
  EXPECT_EQ(desk.attack_eval.steps, 20);
}

TEST(Config, UnknownKeysRejectedAtEveryLevel) {
  auto cfg = RunConfig::defaults("desk");
  EXPECT_THROW(cfg.merge_json(json{{"typo", 1}}), Error);
  EXPECT_THROW(cfg.merge_json(json{{"schedule", {{"epochz", 10}}}}), Error);
  EXPECT_THROW(cfg.merge_json(json{{"model", {{"denoize", true}}}}), Error);
  EXPECT_THROW(cfg.merge_json(json{{"attack_train", {{"eps", 0.1}}}}), Error);
  try {
    cfg.merge_json(json{{"eval", {{"episodez", 10}}}});
    FAIL() << "expected unknown-key error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("episodez"), std::string::npos);
  }
}

TEST(Config, BadValuesRejected) {
  auto cfg = RunConfig::defaults("desk");
  EXPECT_THROW(cfg.merge_json(json{{"schedule", {{"mode", "warp"}}}}), Error);
  EXPECT_THROW(cfg.merge_json(json{{"optimizer", {{"kind", "lion"}}}}), Error);
  EXPECT_THROW(cfg.merge_json(json{{"seed", "abc"}}), Error);
  cfg.merge_json(json{{"schedule", {{"trades_beta", -2.0}}}});
  EXPECT_THROW(cfg.validate(), Error);
}

TEST(Config, JsonRoundTripPreservesEverything) {
  auto cfg = RunConfig::preset("lcat_trades", "desk");
  cfg.seed = 77;
  cfg.dataset = "data/foo.fsb";
  cfg.schedule.total_epochs = 12;
  cfg.schedule.granularity = UpdateGranularity::PerBlock;
  cfg.optimizer = OptKind::Sgd;
  cfg.lr = 0.025;
  cfg.net.denoise = false;
  cfg.head.kind = HeadKind::Ridge;
  cfg.head.ridge_lambda = 2.0;
  cfg.attack_train.epsilon = 0.07;
  cfg.eval.episodes = 321;
  cfg.eval.sampler.q = 4;
  cfg.log_wall_ms = false;

  const auto text = cfg.to_json();
  const auto back = RunConfig::from_json(text);
  EXPECT_EQ(back.to_json(), text);
  EXPECT_EQ(back.seed, 77u);
  EXPECT_EQ(back.schedule.granularity, UpdateGranularity::PerBlock);
  EXPECT_EQ(back.optimizer, OptKind::Sgd);
  EXPECT_EQ(back.head.kind, HeadKind::Ridge);
  EXPECT_FALSE(back.net.denoise);
  EXPECT_FALSE(back.log_wall_ms);
  EXPECT_EQ(back.eval.episodes, 321);
  EXPECT_NEAR(back.attack_train.epsilon, 0.07, 1e-12);
}

TEST(Config, FlagsStyleMergeOverridesFileValues) {
  auto cfg = RunConfig::preset("aq", "desk");
  cfg.merge_json(json{{"schedule", {{"epochs", 30}}}});
  EXPECT_EQ(cfg.schedule.total_epochs, 30);
  cfg.merge_json(json{{"schedule", {{"epochs", 60}}}});
  EXPECT_EQ(cfg.schedule.total_epochs, 60);
  // Untouched fields survive partial merges.
  EXPECT_EQ(cfg.schedule.mode, TrainMode::AQ);
}

TEST(Config, EvalAttackMirrorsAttackEval) {
  auto cfg = RunConfig::defaults("desk");
  cfg.merge_json(json{{"attack_eval", {{"epsilon", 0.123}, {"steps", 9}}}});
  EXPECT_NEAR(cfg.eval.attack.epsilon, 0.123, 1e-12);
  EXPECT_EQ(cfg.eval.attack.steps, 9);
  EXPECT_EQ(cfg.eval.sampler.split, Split::Test);
}

TEST(Config, TrainOptionsCarryThroughTheSchedule) {
  auto cfg = RunConfig::preset("scat", "desk");
  cfg.seed = 5;
  const auto opts = cfg.train_options();
  EXPECT_EQ(opts.schedule.clean_epochs, 9);
  EXPECT_EQ(opts.sampler.split, Split::Train);
  EXPECT_EQ(opts.seed, 5u);
}
